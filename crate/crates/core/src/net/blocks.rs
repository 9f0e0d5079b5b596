//! Encoder and decoder blocks: semantic extractor, local channel-aware
//! attention (LCA), task-channel-aware sub-encoder (TCE), global
//! channel-aware fine-tuning (GCF), fusion, and receivers.

use rand_chacha::ChaCha8Rng;

use super::config::{Head, ModelConfig, SoftmaxAxis};
use super::layers::{Conv2d, ConvTranspose2d, LayerNorm, Linear};
use super::{snr_feature, LatentStats, SnrVector};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor added to the softplus output so sigma stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Shared CNN backbone: two stride-2 blocks then two stride-1 blocks.
#[derive(Debug, Clone)]
pub struct Extractor {
    convs: Vec<Conv2d>,
}

impl Extractor {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c1;
        let convs = vec![
            Conv2d::new(store, rng, &format!("{name}.conv0"), 3, c, 3, 2, 1)?,
            Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, 3, 2, 1)?,
            Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3, 1, 1)?,
            Conv2d::new(store, rng, &format!("{name}.conv3"), c, c, 3, 1, 1)?,
        ];
        Ok(Extractor { convs })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Var {
        self.convs.iter().fold(x, |h, conv| {
            let h = conv.forward(g, store, h);
            g.relu(h)
        })
    }
}

/// SNR-conditioned 1x1-convolution attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Lca {
    rho: Conv2d,
    gate: Conv2d,
    snr: Conv2d,
    out: Conv2d,
    axis: SoftmaxAxis,
}

/// Intermediate values of one LCA pass.
pub struct LcaTrace {
    pub attention: Var,
    pub output: Var,
}

impl Lca {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.c1;
        Ok(Lca {
            rho: Conv2d::pointwise(store, rng, &format!("{name}.rho"), c, c)?,
            gate: Conv2d::pointwise(store, rng, &format!("{name}.gate"), c, c)?,
            snr: Conv2d::pointwise(store, rng, &format!("{name}.snr"), 1, c)?,
            out: Conv2d::pointwise(store, rng, &format!("{name}.out"), c, c)?,
            axis: cfg.softmax_axis,
        })
    }

    /// The output projection; zeroing it turns the block into the identity.
    pub fn output_conv(&self) -> &Conv2d {
        &self.out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f: Var, snr_db: f64) -> Var {
        self.trace(g, store, f, snr_db).output
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f: Var, snr_db: f64) -> LcaTrace {
        let shape = g.shape(f).to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let plane = g.constant(Tensor::full(&[b, 1, h, w], T::lit(snr_feature(snr_db))));
        let z_eps = self.snr.forward(g, store, plane);
        let z_rho = self.rho.forward(g, store, f);
        let z_g = self.gate.forward(g, store, f);
        let scores = g.mul(z_eps, z_rho);
        let attention = match self.axis {
            SoftmaxAxis::Channel => g.softmax(scores, 1),
            SoftmaxAxis::Spatial => {
                let flat = g.reshape(scores, &[b, shape[1], h * w]);
                let s = g.softmax(flat, 2);
                g.reshape(s, &shape)
            }
        };
        let mixed = g.mul(attention, z_g);
        let projected = self.out.forward(g, store, mixed);
        let output = g.add(projected, f);
        LcaTrace { attention, output }
    }
}

/// How a sub-encoder turns the halved feature map into a latent.
#[derive(Debug, Clone)]
pub enum LatentHead {
    /// Probability feature generation: parallel affine maps for mu and sigma.
    Pfg { mu: Linear, sigma: Linear },
    /// A single affine map (deterministic latent).
    Affine(Linear),
    /// Stacked affine layers with a ReLU between them (deterministic latent).
    Stacked(Linear, Linear),
}

/// Output of a sub-encoder.
pub enum Latent {
    Stats(LatentStats),
    Deterministic(Var),
}

/// Per-user sub-encoder: optional LCA stack, halving convolution, latent head.
#[derive(Debug, Clone)]
pub struct Tce {
    lcas: Vec<Lca>,
    halve: Conv2d,
    head: LatentHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Pfg,
    Affine,
    Stacked,
}

impl Tce {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        n_lca: usize,
        head: HeadKind,
    ) -> Result<Self> {
        let lcas = (0..n_lca)
            .map(|k| Lca::new(store, rng, &format!("{name}.lca{k}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let halve = Conv2d::new(store, rng, &format!("{name}.halve"), cfg.c1, 2 * cfg.c1, 3, 2, 1)?;
        let d_in = cfg.feature_len() / 2;
        let c2 = cfg.c2();
        let head = match head {
            HeadKind::Pfg => LatentHead::Pfg {
                mu: Linear::new(store, rng, &format!("{name}.pfg.mu"), d_in, c2)?,
                sigma: Linear::new(store, rng, &format!("{name}.pfg.sigma"), d_in, c2)?,
            },
            HeadKind::Affine => LatentHead::Affine(Linear::new(store, rng, &format!("{name}.fc"), d_in, c2)?),
            HeadKind::Stacked => LatentHead::Stacked(
                Linear::new(store, rng, &format!("{name}.fc0"), d_in, c2)?,
                Linear::new(store, rng, &format!("{name}.fc1"), c2, c2)?,
            ),
        };
        Ok(Tce { lcas, halve, head })
    }

    pub fn lcas(&self) -> &[Lca] {
        &self.lcas
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, f: Var, snr_db: f64) -> Latent {
        let mut h = f;
        for lca in &self.lcas {
            h = lca.forward(g, store, h, snr_db);
        }
        let h = self.halve.forward(g, store, h);
        let h = g.relu(h);
        let h = g.flatten(h);
        match &self.head {
            LatentHead::Pfg { mu, sigma } => {
                let m = mu.forward(g, store, h);
                let raw = sigma.forward(g, store, h);
                let sp = g.softplus(raw);
                let s = g.add_scalar(sp, T::lit(SIGMA_FLOOR));
                Latent::Stats(LatentStats { mu: m, sigma: s })
            }
            LatentHead::Affine(fc) => Latent::Deterministic(fc.forward(g, store, h)),
            LatentHead::Stacked(fc0, fc1) => {
                let a = fc0.forward(g, store, h);
                let a = g.relu(a);
                Latent::Deterministic(fc1.forward(g, store, a))
            }
        }
    }
}

/// `z^r = mu + sigma * lambda`.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, stats: &LatentStats, lambda: Tensor<T>) -> Result<Var> {
    if g.shape(stats.mu) != lambda.shape() {
        return Err(Error::shape(format!(
            "lambda {:?} does not match latent {:?}",
            lambda.shape(),
            g.shape(stats.mu)
        )));
    }
    let lam = g.constant(lambda);
    let noise = g.mul(stats.sigma, lam);
    Ok(g.add(stats.mu, noise))
}

/// Gated fine-tuning of one user's latent by the whole SNR vector.
#[derive(Debug, Clone)]
pub struct Gcf {
    norm: LayerNorm,
    key: Linear,
    value: Linear,
    query: [Linear; 3],
    out: Linear,
    n_users: usize,
}

/// Intermediate values of one GCF pass.
pub struct GcfTrace {
    pub key: Var,
    pub value: Var,
    pub query: Var,
    pub output: Var,
}

impl Gcf {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (c2, c3, qh, n) = (cfg.c2(), cfg.c3(), cfg.query_hidden, cfg.n_users());
        Ok(Gcf {
            norm: LayerNorm::new(store, &format!("{name}.ln"), c2)?,
            key: Linear::new(store, rng, &format!("{name}.key"), c2, c3)?,
            value: Linear::new(store, rng, &format!("{name}.value"), c2, c3)?,
            query: [
                Linear::new(store, rng, &format!("{name}.query0"), n, qh)?,
                Linear::new(store, rng, &format!("{name}.query1"), qh, qh)?,
                Linear::new(store, rng, &format!("{name}.query2"), qh, c3)?,
            ],
            out: Linear::new(store, rng, &format!("{name}.out"), c3, c2)?,
            n_users: n,
        })
    }

    pub fn value_layer(&self) -> &Linear {
        &self.value
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, zr: Var, snrs: &SnrVector) -> Result<Var> {
        Ok(self.trace(g, store, zr, snrs)?.output)
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, zr: Var, snrs: &SnrVector) -> Result<GcfTrace> {
        if snrs.len() != self.n_users {
            return Err(Error::shape(format!("GCF expects {} SNRs, got {}", self.n_users, snrs.len())));
        }
        let shape = g.shape(zr).to_vec();
        if shape.len() != 2 || shape[1] != self.key.d_in {
            return Err(Error::shape(format!("GCF expects (B, {}), got {shape:?}", self.key.d_in)));
        }
        let rows = shape[0];
        let ln = self.norm.forward(g, store, zr);
        let k = self.key.forward(g, store, ln);
        let key = g.sigmoid(k);
        let value = self.value.forward(g, store, ln);
        let snr_in: Vec<T> = (0..rows).flat_map(|_| snrs.values().iter().map(|&s| T::lit(snr_feature(s)))).collect();
        let s = g.constant(Tensor::from_vec(&[rows, self.n_users], snr_in)?);
        let q = self.query[0].forward(g, store, s);
        let q = g.relu(q);
        let q = self.query[1].forward(g, store, q);
        let q = g.relu(q);
        let q = self.query[2].forward(g, store, q);
        let query = g.sigmoid(q);
        let vk = g.mul(value, key);
        let vkq = g.mul(vk, query);
        let res = g.add(zr, vkq);
        let output = self.out.forward(g, store, res);
        Ok(GcfTrace {
            key,
            value,
            query,
            output,
        })
    }
}

/// Concatenation followed by two affine maps and power normalization.
#[derive(Debug, Clone)]
pub struct Fusion {
    fc0: Linear,
    fc1: Linear,
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Fusion {
            fc0: Linear::new(store, rng, &format!("{name}.fc0"), d_in, hidden)?,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), hidden, d_out)?,
        })
    }

    pub fn input_len(&self) -> usize {
        self.fc0.d_in
    }

    pub fn output_len(&self) -> usize {
        self.fc1.d_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, z_cat: Var) -> Result<Var> {
        let a = self.fc0.forward(g, store, z_cat);
        let b = self.fc1.forward(g, store, a);
        g.power_norm(b)
    }
}

#[derive(Debug, Clone)]
enum Executor {
    Classify(Linear, Linear),
    Recover {
        fc: Linear,
        up: [ConvTranspose2d; 3],
        c1: usize,
        h1: usize,
    },
}

/// Channel decoder followed by a task executor.
#[derive(Debug, Clone)]
pub struct Receiver {
    dec: [Linear; 2],
    exec: Executor,
    input_len: usize,
}

impl Receiver {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        head: Head,
        input_len: usize,
    ) -> Result<Self> {
        let dh = cfg.decoder_hidden;
        let dec = [
            Linear::new(store, rng, &format!("{name}.dec0"), input_len, dh)?,
            Linear::new(store, rng, &format!("{name}.dec1"), dh, dh)?,
        ];
        let exec = match head {
            Head::Classify { n_label } => Executor::Classify(
                Linear::new(store, rng, &format!("{name}.exec0"), dh, cfg.executor_hidden)?,
                Linear::new(store, rng, &format!("{name}.exec1"), cfg.executor_hidden, n_label)?,
            ),
            Head::Recover => {
                let c = cfg.c1;
                let half = (c / 2).max(1);
                Executor::Recover {
                    fc: Linear::new(store, rng, &format!("{name}.expand"), dh, cfg.feature_len())?,
                    up: [
                        ConvTranspose2d::new(store, rng, &format!("{name}.up0"), c, c, 3, 2, 1, 1)?,
                        ConvTranspose2d::new(store, rng, &format!("{name}.up1"), c, half, 3, 2, 1, 1)?,
                        ConvTranspose2d::new(store, rng, &format!("{name}.up2"), half, 3, 3, 1, 1, 0)?,
                    ],
                    c1: c,
                    h1: cfg.h1(),
                }
            }
        };
        Ok(Receiver { dec, exec, input_len })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, zh: Var) -> Result<Var> {
        let shape = g.shape(zh);
        if shape.len() != 2 || shape[1] != self.input_len {
            return Err(Error::shape(format!(
                "receiver expects (B, {}), got {shape:?}",
                self.input_len
            )));
        }
        let mut h = zh;
        for fc in &self.dec {
            h = fc.forward(g, store, h);
            h = g.relu(h);
        }
        Ok(match &self.exec {
            Executor::Classify(fc0, fc1) => {
                let a = fc0.forward(g, store, h);
                let a = g.relu(a);
                fc1.forward(g, store, a)
            }
            Executor::Recover { fc, up, c1, h1 } => {
                let rows = g.value(h).rows();
                let a = fc.forward(g, store, h);
                let a = g.relu(a);
                let mut x = g.reshape(a, &[rows, *c1, *h1, *h1]);
                for (k, layer) in up.iter().enumerate() {
                    x = layer.forward(g, store, x);
                    x = if k + 1 < up.len() { g.relu(x) } else { g.sigmoid(x) };
                }
                x
            }
        })
    }
}
