use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a receiver produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Classify { n_label: usize },
    Recover,
}

/// Axis the LCA softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Across channels at each spatial position.
    #[default]
    Channel,
    /// Across spatial positions within each channel.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Deepbroadcast,
    DeepbroadcastE2e,
    Mtoc,
    MtocWlca,
    MtocWgcf,
    Unicast,
    Deeprc,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Deepbroadcast,
        Variant::DeepbroadcastE2e,
        Variant::Mtoc,
        Variant::MtocWlca,
        Variant::MtocWgcf,
        Variant::Unicast,
        Variant::Deeprc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Deepbroadcast => "deepbroadcast",
            Variant::DeepbroadcastE2e => "deepbroadcast_e2e",
            Variant::Mtoc => "mtoc",
            Variant::MtocWlca => "mtoc_wlca",
            Variant::MtocWgcf => "mtoc_wgcf",
            Variant::Unicast => "unicast",
            Variant::Deeprc => "deeprc",
        }
    }

    /// Display label used in tables and charts.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Deepbroadcast => "DeepBroadcast",
            Variant::DeepbroadcastE2e => "DeepBroadcast-E2E",
            Variant::Mtoc => "MTOC",
            Variant::MtocWlca => "MTOC-wLCA",
            Variant::MtocWgcf => "MTOC-wGCF",
            Variant::Unicast => "Unicast",
            Variant::Deeprc => "DeepRC",
        }
    }

    pub fn uses_lca(self) -> bool {
        matches!(self, Variant::Deepbroadcast | Variant::DeepbroadcastE2e | Variant::MtocWlca)
    }

    pub fn uses_gcf(self) -> bool {
        matches!(self, Variant::Deepbroadcast | Variant::DeepbroadcastE2e | Variant::MtocWgcf)
    }

    /// Whether the encoder emits Gaussian latent statistics (and hence a KL term).
    pub fn is_stochastic(self) -> bool {
        self == Variant::Deepbroadcast
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!(
                        "unknown variant `{s}` (expected one of {})",
                        Variant::ALL.map(Variant::as_str).join(", ")
                    ),
                )
            })
    }
}

/// Network dimensions.
///
/// The extracted feature is `(c1, h1, h1)` with `h1 = image_size / 4`; each
/// user's refined latent has `c2 = c1 * h1 * h1 / 4` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub c1: usize,
    pub c_tx: usize,
    pub fusion_hidden: usize,
    pub query_hidden: usize,
    pub decoder_hidden: usize,
    pub executor_hidden: usize,
    #[serde(default)]
    pub softmax_axis: SoftmaxAxis,
    /// One entry per user.
    #[serde(default)]
    pub heads: Vec<Head>,
}

impl ModelConfig {
    pub fn new(heads: Vec<Head>) -> Self {
        ModelConfig {
            image_size: 32,
            c1: 32,
            c_tx: 16,
            fusion_hidden: 256,
            query_hidden: 64,
            decoder_hidden: 256,
            executor_hidden: 128,
            softmax_axis: SoftmaxAxis::Channel,
            heads,
        }
    }

    pub fn n_users(&self) -> usize {
        self.heads.len()
    }

    pub fn h1(&self) -> usize {
        self.image_size / 4
    }

    pub fn w1(&self) -> usize {
        self.h1()
    }

    pub fn feature_len(&self) -> usize {
        self.c1 * self.h1() * self.w1()
    }

    pub fn c2(&self) -> usize {
        self.feature_len() / 4
    }

    /// GCF modulation width; tied to `c2` by the residual add.
    pub fn c3(&self) -> usize {
        self.c2()
    }

    /// Symbols each user gets in the unicast baseline.
    pub fn unicast_symbols(&self) -> usize {
        let per = self.c_tx.div_ceil(self.n_users().max(1));
        per + per % 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::config(format!("model.{path}"), msg));
        if self.heads.is_empty() {
            return bad("heads", "need at least one user");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad("image_size", "must be a positive multiple of 8");
        }
        if self.c1 == 0 {
            return bad("c1", "must be positive");
        }
        if !self.feature_len().is_multiple_of(4) {
            return bad("c1", "c1 * h1 * w1 must be divisible by 4");
        }
        if self.c_tx == 0 || !self.c_tx.is_multiple_of(2) {
            return bad("c_tx", "must be a positive even number");
        }
        for (name, v) in [
            ("fusion_hidden", self.fusion_hidden),
            ("query_hidden", self.query_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("executor_hidden", self.executor_hidden),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            if let Head::Classify { n_label } = h {
                if *n_label < 2 {
                    return Err(Error::config(format!("model.heads[{i}].n_label"), "need at least two classes"));
                }
            }
        }
        Ok(())
    }
}
