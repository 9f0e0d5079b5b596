//! Physical broadcast layer: power normalization, SNR bookkeeping and
//! AWGN / Rayleigh / Rician corruption of the transmitted symbols.
//!
//! Real symbols are paired `(re, im)` into complex symbols for the fading
//! channels. Every real component carries noise of variance
//! `10^(-snr/10)`, which is the per-component half of the complex noise
//! power `snr_db_to_noise_variance(snr, 2.0)` for a unit-power real signal.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
    Rician,
}

impl ChannelKind {
    pub fn is_fading(self) -> bool {
        !matches!(self, ChannelKind::Awgn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    /// Independent gain for every complex symbol.
    PerSymbol,
    /// One gain per transmitted vector.
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// Rician coefficient `a`; ignored by the other kinds.
    #[serde(default = "default_rician_a")]
    pub rician_a: f64,
    /// Nominal SNR in dB. `f64::INFINITY` disables the noise.
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default = "default_fading_mode")]
    pub fading_mode: FadingMode,
    /// Perfect-CSI zero-forcing at the receiver.
    #[serde(default = "default_equalize")]
    pub equalize: bool,
}

fn default_rician_a() -> f64 {
    2.0
}
fn default_snr() -> f64 {
    10.0
}
fn default_fading_mode() -> FadingMode {
    FadingMode::PerSymbol
}
fn default_equalize() -> bool {
    true
}

impl ChannelSpec {
    pub fn awgn() -> Self {
        Self::new(ChannelKind::Awgn)
    }

    pub fn rayleigh() -> Self {
        Self::new(ChannelKind::Rayleigh)
    }

    pub fn rician(a: f64) -> Self {
        ChannelSpec {
            rician_a: a,
            ..Self::new(ChannelKind::Rician)
        }
    }

    pub fn new(kind: ChannelKind) -> Self {
        ChannelSpec {
            kind,
            rician_a: default_rician_a(),
            snr_db: default_snr(),
            fading_mode: default_fading_mode(),
            equalize: default_equalize(),
        }
    }

    pub fn with_snr(mut self, snr_db: f64) -> Self {
        self.snr_db = snr_db;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ChannelKind::Rician && !(self.rician_a > 0.0 && self.rician_a.is_finite()) {
            return Err(Error::InvalidChannel(format!(
                "Rician coefficient must be positive, got {}",
                self.rician_a
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidChannel(format!("SNR must be finite or +inf, got {}", self.snr_db)));
        }
        Ok(())
    }

    pub fn noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }
}

/// What a random stream is used for; part of its identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Noise = 1,
    Gain = 2,
    Latent = 3,
    Snr = 4,
    Shuffle = 5,
    Init = 6,
}

/// Deterministic random stream identified by `(seed, user, purpose, counter)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub user: u32,
    pub purpose: Purpose,
    /// Free slot for epoch/step/repeat indices.
    pub counter: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, user: u32, purpose: Purpose) -> Self {
        RngStream {
            seed,
            user,
            purpose,
            counter: 0,
        }
    }

    pub fn at(mut self, counter: u64) -> Self {
        self.counter = counter;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let id = ((self.user as u64) << 8) | self.purpose as u64;
        rng.set_stream(splitmix64(id ^ splitmix64(self.counter)));
        rng
    }
}

/// Scales `s` to unit mean-square power.
pub fn power_normalize<T: Scalar>(s: &[T]) -> Result<Vec<T>> {
    if s.is_empty() {
        return Err(Error::DegenerateSignal);
    }
    let ms = s.iter().map(|&v| v * v).sum::<T>() / T::lit(s.len() as f64);
    if ms <= T::zero() || !ms.is_finite() {
        return Err(Error::DegenerateSignal);
    }
    let inv = T::one() / ms.sqrt();
    Ok(s.iter().map(|&v| v * inv).collect())
}

/// Noise power giving `snr_db` against a signal of power `signal_power`.
pub fn snr_db_to_noise_variance(snr_db: f64, signal_power: f64) -> f64 {
    signal_power * 10f64.powf(-snr_db / 10.0)
}

/// Line-of-sight mean and scattered standard deviation of a Rician gain.
pub fn rician_params(a: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) {
        return Err(Error::InvalidChannel(format!("Rician coefficient must be positive, got {a}")));
    }
    if a.is_infinite() {
        return Ok((1.0, 0.0));
    }
    Ok(((a / (a + 1.0)).sqrt(), (1.0 / (a + 1.0)).sqrt()))
}

fn complex_normal<R: Rng>(rng: &mut R, std: f64) -> Complex64 {
    let s = std * std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// One draw of channel state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// One gain per complex symbol, or a single gain for block fading.
    pub h: Vec<Complex64>,
    /// Total noise power per complex symbol (fading) or per real symbol (AWGN).
    pub noise_variance: f64,
}

impl ChannelRealization {
    /// Gain for complex symbol `k`.
    pub fn gain(&self, k: usize) -> Complex64 {
        if self.h.len() == 1 {
            self.h[0]
        } else {
            self.h[k]
        }
    }
}

/// Samples the gain(s) for `n_symbols` complex symbols.
pub fn sample_gain<R: Rng>(spec: &ChannelSpec, n_symbols: usize, rng: &mut R) -> Result<ChannelRealization> {
    spec.validate()?;
    if n_symbols == 0 {
        return Err(Error::InvalidChannel("need at least one symbol".into()));
    }
    let count = match (spec.kind, spec.fading_mode) {
        (ChannelKind::Awgn, _) | (_, FadingMode::PerBlock) => 1,
        (_, FadingMode::PerSymbol) => n_symbols,
    };
    let h = match spec.kind {
        ChannelKind::Awgn => vec![Complex64::new(1.0, 0.0)],
        ChannelKind::Rayleigh => (0..count).map(|_| complex_normal(rng, 1.0)).collect(),
        ChannelKind::Rician => {
            let (mu, sigma) = rician_params(spec.rician_a)?;
            (0..count)
                .map(|_| Complex64::new(mu, 0.0) + complex_normal(rng, sigma))
                .collect()
        }
    };
    let noise_variance = if spec.noiseless() {
        0.0
    } else if spec.kind.is_fading() {
        snr_db_to_noise_variance(spec.snr_db, 2.0)
    } else {
        snr_db_to_noise_variance(spec.snr_db, 1.0)
    };
    Ok(ChannelRealization { h, noise_variance })
}

/// Per-row channel state for a batch of transmitted vectors, ready to apply.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRealization {
    pub kind: ChannelKind,
    pub equalize: bool,
    /// Gain per complex symbol across the whole batch (`rows * len / 2`); empty for AWGN.
    pub gains: Vec<Complex64>,
    /// Additive noise per real symbol (`rows * len`).
    pub noise: Vec<f64>,
}

/// Draws gains and noise for `rows` vectors of `len` real symbols.
pub fn realize_batch(spec: &ChannelSpec, rows: usize, len: usize, stream: &RngStream) -> Result<BatchRealization> {
    spec.validate()?;
    if spec.kind.is_fading() && !len.is_multiple_of(2) {
        return Err(Error::OddSymbolCount(len));
    }
    let mut gain_rng = RngStream {
        purpose: Purpose::Gain,
        ..*stream
    }
    .rng();
    let mut noise_rng = RngStream {
        purpose: Purpose::Noise,
        ..*stream
    }
    .rng();
    let mut gains = Vec::new();
    if spec.kind.is_fading() {
        gains.reserve(rows * len / 2);
        for _ in 0..rows {
            let r = sample_gain(spec, len / 2, &mut gain_rng)?;
            gains.extend((0..len / 2).map(|k| r.gain(k)));
        }
    }
    let noise = if spec.noiseless() {
        vec![0.0; rows * len]
    } else {
        let std = snr_db_to_noise_variance(spec.snr_db, 1.0).sqrt();
        (0..rows * len)
            .map(|_| std * noise_rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    Ok(BatchRealization {
        kind: spec.kind,
        equalize: spec.equalize,
        gains,
        noise,
    })
}

impl BatchRealization {
    /// Multiplicative gains the differentiable path applies to the signal;
    /// `None` means the signal passes with unit gain.
    pub fn effective_gains(&self) -> Option<&[Complex64]> {
        if self.kind.is_fading() && !self.equalize {
            Some(&self.gains)
        } else {
            None
        }
    }

    /// Additive term seen after (optional) equalization: `n` or `n / h`.
    pub fn effective_noise(&self) -> Vec<f64> {
        if self.kind.is_fading() && self.equalize {
            let mut out = self.noise.clone();
            for (p, h) in self.gains.iter().enumerate() {
                let n = Complex64::new(self.noise[2 * p], self.noise[2 * p + 1]) / h;
                out[2 * p] = n.re;
                out[2 * p + 1] = n.im;
            }
            out
        } else {
            self.noise.clone()
        }
    }

    /// `h z + n`, or `z + n / h` when equalizing.
    pub fn apply<T: Scalar>(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.noise.len() {
            return Err(Error::shape(format!(
                "realization covers {} symbols, signal has {}",
                self.noise.len(),
                z.len()
            )));
        }
        let mut out: Vec<T> = z.to_vec();
        if let Some(gains) = self.effective_gains() {
            for (p, h) in gains.iter().enumerate() {
                let c = Complex64::new(z[2 * p].as_f64(), z[2 * p + 1].as_f64()) * h;
                out[2 * p] = T::lit(c.re);
                out[2 * p + 1] = T::lit(c.im);
            }
        }
        for (o, n) in out.iter_mut().zip(self.effective_noise()) {
            *o += T::lit(n);
        }
        Ok(out)
    }
}

/// Sends one unit-power vector through the channel.
pub fn transmit<T: Scalar>(z: &[T], spec: &ChannelSpec, stream: &RngStream) -> Result<Vec<T>> {
    let r = realize_batch(spec, 1, z.len(), stream)?;
    r.apply(z)
}

/// `10 log10(P_signal / P_error)` between a reference and a corrupted copy.
pub fn empirical_snr_db(reference: &[f64], received: &[f64]) -> f64 {
    let ps: f64 = reference.iter().map(|v| v * v).sum();
    let pn: f64 = reference.iter().zip(received).map(|(a, b)| (b - a) * (b - a)).sum();
    10.0 * (ps / pn).log10()
}
