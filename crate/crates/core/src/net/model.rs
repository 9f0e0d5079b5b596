use rand::Rng;
use rand_distr::StandardNormal;

use super::blocks::{reparameterize, Extractor, Fusion, Gcf, HeadKind, Latent, Receiver, Tce};
use super::config::{Head, ModelConfig, Variant};
use super::{LatentStats, SnrVector};
use crate::chansim::{realize_batch, ChannelSpec, Purpose, RngStream};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of stacked LCA blocks in each channel-aware sub-encoder.
pub const LCA_DEPTH: usize = 3;

/// One user's compression path inside an encoder.
#[derive(Debug, Clone)]
pub struct Branch {
    /// User whose SNR conditions this branch.
    pub user: usize,
    pub tce: Tce,
    pub gcf: Option<Gcf>,
}

/// One physical transmitter: extractor, per-user branches, fusion.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub extractor: Extractor,
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
    /// Users that receive this encoder's signal.
    pub users: Vec<usize>,
}

/// How latents are produced from `(mu, sigma)`.
#[derive(Debug, Clone, Copy)]
pub enum LatentMode {
    /// `z = mu` (evaluation).
    Mean,
    /// `z = mu + sigma * lambda` with `lambda` drawn from the stream (user slot overwritten).
    Sample(RngStream),
}

/// How the encoder output reaches the receivers.
#[derive(Debug, Clone)]
pub enum ChannelMode {
    /// Receivers see the transmitted signal unchanged.
    Bypass,
    /// Each user's channel at the SNR given in the forward call, unless its
    /// spec is noiseless (infinite SNR).
    Simulate { specs: Vec<ChannelSpec>, stream: RngStream },
}

/// Handles into the graph for one full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Extracted semantic feature of each encoder.
    pub features: Vec<Var>,
    /// Latent statistics per user (stochastic variants only).
    pub stats: Vec<Option<LatentStats>>,
    /// Refined latent per branch.
    pub refined: Vec<Var>,
    /// Power-normalized transmitted signal per encoder.
    pub signals: Vec<Var>,
    /// Channel-corrupted signal per user.
    pub received: Vec<Var>,
    /// Task output per user (logits or image).
    pub outputs: Vec<Var>,
}

/// Pixels are centred and scaled by these before the extractor.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

fn network_input<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let centred = g.add_scalar(x, T::lit(-INPUT_MEAN));
    g.scale(centred, T::lit(1.0 / INPUT_STD))
}

/// A complete transmitter / channel / receiver system for one variant.
#[derive(Debug, Clone)]
pub struct BroadcastModel {
    pub variant: Variant,
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub receivers: Vec<Receiver>,
}

impl BroadcastModel {
    /// Builds `variant` and registers freshly initialized parameters.
    pub fn build<T: Scalar>(variant: Variant, config: &ModelConfig, seed: u64) -> Result<(Self, ParameterStore<T>)> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = RngStream::new(seed, 0, Purpose::Init).rng();
        let rng = &mut rng;
        let n = config.n_users();
        let cfg = config;
        let store_ref = &mut store;

        let mut encoders = Vec::new();
        let mut receiver_inputs = vec![cfg.c_tx; n];
        match variant {
            Variant::Unicast => {
                let symbols = cfg.unicast_symbols();
                for user in 0..n {
                    let name = format!("user{user}");
                    let extractor = Extractor::new(store_ref, rng, &format!("{name}.extractor"), cfg)?;
                    let tce = Tce::new(store_ref, rng, &format!("{name}.enc"), cfg, 0, HeadKind::Stacked)?;
                    let fusion = Fusion::new(store_ref, rng, &format!("{name}.fusion"), cfg.c2(), cfg.fusion_hidden, symbols)?;
                    encoders.push(Encoder {
                        extractor,
                        branches: vec![Branch { user, tce, gcf: None }],
                        fusion,
                        users: vec![user],
                    });
                    receiver_inputs[user] = symbols;
                }
            }
            Variant::Deeprc => {
                let extractor = Extractor::new(store_ref, rng, "extractor", cfg)?;
                let tce = Tce::new(store_ref, rng, "enc", cfg, 0, HeadKind::Stacked)?;
                let fusion = Fusion::new(store_ref, rng, "fusion", cfg.c2(), cfg.fusion_hidden, cfg.c_tx)?;
                encoders.push(Encoder {
                    extractor,
                    branches: vec![Branch { user: 0, tce, gcf: None }],
                    fusion,
                    users: (0..n).collect(),
                });
            }
            _ => {
                let extractor = Extractor::new(store_ref, rng, "extractor", cfg)?;
                let n_lca = if variant.uses_lca() { LCA_DEPTH } else { 0 };
                let head = match variant {
                    Variant::Deepbroadcast => HeadKind::Pfg,
                    Variant::DeepbroadcastE2e => HeadKind::Affine,
                    _ => HeadKind::Stacked,
                };
                let mut branches = Vec::with_capacity(n);
                for user in 0..n {
                    let tce = Tce::new(store_ref, rng, &format!("user{user}.tce"), cfg, n_lca, head)?;
                    branches.push(Branch { user, tce, gcf: None });
                }
                if variant.uses_gcf() {
                    for b in &mut branches {
                        b.gcf = Some(Gcf::new(store_ref, rng, &format!("user{}.gcf", b.user), cfg)?);
                    }
                }
                let fusion = Fusion::new(store_ref, rng, "fusion", n * cfg.c2(), cfg.fusion_hidden, cfg.c_tx)?;
                encoders.push(Encoder {
                    extractor,
                    branches,
                    fusion,
                    users: (0..n).collect(),
                });
            }
        }
        let receivers = cfg
            .heads
            .iter()
            .enumerate()
            .map(|(user, &head)| Receiver::new(store_ref, rng, &format!("user{user}.rx"), cfg, head, receiver_inputs[user]))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            BroadcastModel {
                variant,
                config: config.clone(),
                encoders,
                receivers,
            },
            store,
        ))
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users()
    }

    /// Total symbols sent over the air per image.
    pub fn symbols_per_image(&self) -> usize {
        self.encoders.iter().map(|e| e.fusion.output_len()).sum()
    }

    fn encoder_of(&self, user: usize) -> Result<usize> {
        self.encoders
            .iter()
            .position(|e| e.users.contains(&user))
            .ok_or(Error::UnknownUser {
                index: user,
                n_users: self.n_users(),
            })
    }

    fn branch(&self, user: usize) -> Result<&Branch> {
        self.encoders
            .iter()
            .flat_map(|e| &e.branches)
            .find(|b| b.user == user)
            .ok_or(Error::UnknownUser {
                index: user,
                n_users: self.n_users(),
            })
    }

    fn check_images<T: Scalar>(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] || shape[0] == 0 {
            return Err(Error::config(
                "model.image_size",
                format!("expected images of shape (B, 3, {s}, {s}), got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Shared semantic feature `(B, c1, h1, w1)` of the first encoder.
    pub fn extract_semantics<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, images: &Tensor<T>) -> Result<Var> {
        self.check_images(images)?;
        let x = g.constant(images.clone());
        let x_in = network_input(g, x);
        Ok(self.encoders[0].extractor.forward(g, store, x_in))
    }

    /// Sub-encoder of `user` conditioned on that user's SNR.
    pub fn tce_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        user: usize,
        feature: Var,
        snr_db: f64,
    ) -> Result<Latent> {
        Ok(self.branch(user)?.tce.forward(g, store, feature, snr_db))
    }

    /// Fine-tunes `user`'s refined latent; identity when the variant has no GCF.
    pub fn gcf_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        user: usize,
        refined: Var,
        snrs: &SnrVector,
    ) -> Result<Var> {
        match &self.branch(user)?.gcf {
            Some(gcf) => gcf.forward(g, store, refined, snrs),
            None => Ok(refined),
        }
    }

    /// Fine-tuning, concatenation, fusion and power normalization for the encoder serving `user`.
    pub fn cfe_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        encoder: usize,
        refined: &[Var],
        snrs: &SnrVector,
    ) -> Result<Var> {
        let enc = &self.encoders[encoder];
        if refined.len() != enc.branches.len() {
            return Err(Error::shape(format!(
                "encoder has {} branches, got {} latents",
                enc.branches.len(),
                refined.len()
            )));
        }
        let mut tuned = Vec::with_capacity(refined.len());
        for (b, &zr) in enc.branches.iter().zip(refined) {
            tuned.push(match &b.gcf {
                Some(gcf) => gcf.forward(g, store, zr, snrs)?,
                None => zr,
            });
        }
        let z_cat = if tuned.len() == 1 { tuned[0] } else { g.concat(&tuned) };
        if g.shape(z_cat)[1] != enc.fusion.input_len() {
            return Err(Error::shape(format!(
                "fusion expects {} inputs, got {}",
                enc.fusion.input_len(),
                g.shape(z_cat)[1]
            )));
        }
        enc.fusion.forward(g, store, z_cat)
    }

    pub fn receiver_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        received: Var,
        user: usize,
    ) -> Result<Var> {
        let rx = self.receivers.get(user).ok_or(Error::UnknownUser {
            index: user,
            n_users: self.n_users(),
        })?;
        rx.forward(g, store, received)
    }

    /// Image to task outputs for every user.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        images: &Tensor<T>,
        snrs: &SnrVector,
        latent: LatentMode,
        channel: &ChannelMode,
    ) -> Result<ForwardPass> {
        self.check_images(images)?;
        let n = self.n_users();
        if snrs.len() != n {
            return Err(Error::shape(format!("expected {n} SNRs, got {}", snrs.len())));
        }
        if let ChannelMode::Simulate { specs, .. } = channel {
            if specs.len() != n {
                return Err(Error::shape(format!("expected {n} channel specs, got {}", specs.len())));
            }
        }
        let rows = images.rows();
        let x = g.constant(images.clone());
        let x_in = network_input(g, x);
        let mut pass = ForwardPass {
            features: Vec::new(),
            stats: vec![None; n],
            refined: Vec::new(),
            signals: Vec::new(),
            received: vec![x; n],
            outputs: Vec::new(),
        };
        for (e, enc) in self.encoders.iter().enumerate() {
            let feature = enc.extractor.forward(g, store, x_in);
            pass.features.push(feature);
            let mut refined = Vec::with_capacity(enc.branches.len());
            for b in &enc.branches {
                let zr = match b.tce.forward(g, store, feature, snrs.get(b.user)) {
                    Latent::Deterministic(z) => z,
                    Latent::Stats(stats) => {
                        let z = match latent {
                            LatentMode::Mean => stats.mu,
                            LatentMode::Sample(stream) => {
                                let mut rng = RngStream {
                                    user: b.user as u32,
                                    purpose: Purpose::Latent,
                                    ..stream
                                }
                                .rng();
                                let shape = g.shape(stats.mu).to_vec();
                                let n: usize = shape.iter().product();
                                let lambda: Vec<T> = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
                                reparameterize(g, &stats, Tensor::from_vec(&shape, lambda)?)?
                            }
                        };
                        pass.stats[b.user] = Some(stats);
                        z
                    }
                };
                refined.push(zr);
            }
            pass.refined.extend(&refined);
            let signal = self.cfe_forward(g, store, e, &refined, snrs)?;
            pass.signals.push(signal);
            for &user in &enc.users {
                pass.received[user] = match channel {
                    ChannelMode::Bypass => signal,
                    ChannelMode::Simulate { specs, stream } => {
                        // A noiseless spec stays noiseless whatever the conditioning SNR.
                        let spec = if specs[user].noiseless() {
                            specs[user]
                        } else {
                            specs[user].with_snr(snrs.get(user))
                        };
                        let len = g.shape(signal)[1];
                        let r = realize_batch(&spec, rows, len, &RngStream { user: user as u32, ..*stream })?;
                        let mut z = signal;
                        if let Some(gains) = r.effective_gains() {
                            let gains = gains.iter().map(|h| (T::lit(h.re), T::lit(h.im))).collect();
                            z = g.complex_gain(z, gains);
                        }
                        let noise: Vec<T> = r.effective_noise().into_iter().map(T::lit).collect();
                        let nv = g.constant(Tensor::from_vec(&[rows, len], noise)?);
                        g.add(z, nv)
                    }
                };
            }
        }
        for user in 0..n {
            let out = self.receiver_forward(g, store, pass.received[user], user)?;
            pass.outputs.push(out);
        }
        Ok(pass)
    }

    /// Receiver head of `user`.
    pub fn head(&self, user: usize) -> Result<Head> {
        self.config.heads.get(user).copied().ok_or(Error::UnknownUser {
            index: user,
            n_users: self.n_users(),
        })
    }

    /// Encoder index serving `user`.
    pub fn encoder_for(&self, user: usize) -> Result<usize> {
        self.encoder_of(user)
    }
}
