//! Experiment configuration: TOML files, case presets and `key=value` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chansim::ChannelSpec;
use crate::data::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{narrow_grid, wide_grid, EvalConfig};
use crate::net::{ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::trainer::{default_snr_list, LossConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
    Custom,
}

impl Case {
    pub const PRESETS: [Case; 5] = [Case::Case1, Case::Case2, Case::Case3, Case::Case4, Case::Case5];

    pub fn as_str(self) -> &'static str {
        match self {
            Case::Case1 => "case1",
            Case::Case2 => "case2",
            Case::Case3 => "case3",
            Case::Case4 => "case4",
            Case::Case5 => "case5",
            Case::Custom => "custom",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Case::PRESETS
            .into_iter()
            .chain([Case::Custom])
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config("case", format!("unknown preset `{s}` (expected case1..case5 or custom)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub task: TaskSpec,
    pub channel: ChannelSpec,
}

/// Training settings shared by every variant of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub snr_list: Vec<f64>,
    #[serde(default)]
    pub continuous_snr: bool,
    #[serde(default)]
    pub deterministic_latent: bool,
    #[serde(default = "yes")]
    pub channel_noise: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            epochs: 120,
            batch_size: 128,
            snr_list: default_snr_list(),
            continuous_snr: false,
            deterministic_latent: false,
            channel_noise: true,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            train_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: Case,
    /// Variants the experiment trains and compares; the first is the reference.
    pub variants: Vec<Variant>,
    pub output_dir: PathBuf,
    /// `model.heads` may be omitted; it is derived from the users' tasks.
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub trainer: TrainerSection,
    pub eval: EvalConfig,
    pub users: Vec<UserConfig>,
}

impl ExperimentConfig {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.users.iter().map(|u| u.task.clone()).collect()
    }

    /// Fills derived fields and checks every constraint.
    pub fn resolve(mut self) -> Result<Self> {
        let heads: Vec<_> = self.users.iter().map(|u| u.task.head()).collect();
        if self.model.heads.is_empty() {
            self.model.heads = heads;
        } else if self.model.heads != heads {
            return Err(Error::config(
                "model.heads",
                format!("{:?} disagree with the users' tasks {heads:?}", self.model.heads),
            ));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::config("users", "need at least one user"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "need at least one variant"));
        }
        self.eval.validate()?;
        for &v in &self.variants {
            self.train_config(v)?.validate()?;
        }
        Ok(())
    }

    /// Training config of one variant. Variants without a stochastic latent
    /// carry no KL term, so only `loss.beta` differs in effect.
    pub fn train_config(&self, variant: Variant) -> Result<TrainConfig> {
        let t = &self.trainer;
        Ok(TrainConfig {
            variant,
            model: self.model.clone(),
            tasks: self.tasks(),
            channels: self.users.iter().map(|u| u.channel).collect(),
            loss: self.loss.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            snr_list: t.snr_list.clone(),
            continuous_snr: t.continuous_snr,
            deterministic_latent: t.deterministic_latent,
            channel_noise: t.channel_noise,
            optimizer: t.optimizer.clone(),
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            train_limit: t.train_limit,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Writes the fully resolved form.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. `trainer.seed=7` or `users.2.channel.rician_a=4`.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).expect("config serializes to TOML");
        let template = toml::Value::try_from(self.schema_template()).expect("config serializes to TOML");
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::config(set.as_str(), "override must look like key=value"))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if lookup(&template, &path).is_none() && lookup(&doc, &path).is_none() {
                return Err(Error::config(key, "unknown configuration key"));
            }
            let value = parse_value(raw.trim());
            assign(&mut doc, &path, value).map_err(|m| Error::config(key, m))?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(toml_error)?;
        cfg.resolve()
    }

    /// Copy with every optional field present, so overrides may name them.
    fn schema_template(&self) -> Self {
        let mut t = self.clone();
        t.trainer.train_limit.get_or_insert(0);
        t.eval.test_limit.get_or_insert(0);
        t.loss.gamma.get_or_insert_with(|| vec![0.0; self.users.len()]);
        for u in &mut t.users {
            if u.task.kind == TaskKind::Recover {
                u.task.label_map = crate::data::LabelMap::Identity;
            }
        }
        t
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let path = e.message().split('`').nth(1).unwrap_or("config").to_string();
    Error::config(path, e.to_string().trim().to_string())
}

fn lookup<'a>(v: &'a toml::Value, path: &[&str]) -> Option<&'a toml::Value> {
    let mut cur = v;
    for seg in path {
        cur = match cur {
            toml::Value::Table(t) => t.get(*seg)?,
            toml::Value::Array(a) => a.get(seg.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

fn assign(v: &mut toml::Value, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = v;
    for seg in parents {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default())),
            toml::Value::Array(a) => {
                let i: usize = seg.parse().map_err(|_| format!("`{seg}` is not an index"))?;
                a.get_mut(i).ok_or(format!("index {i} out of range"))?
            }
            _ => return Err(format!("`{seg}` is not a table")),
        };
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| format!("`{last}` is not an index"))?;
            *a.get_mut(i).ok_or(format!("index {i} out of range"))? = value;
        }
        _ => return Err("parent is not a table".into()),
    }
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// The fully specified configuration behind a preset.
pub fn expand_preset(name: &str) -> Result<ExperimentConfig> {
    let case: Case = name.parse()?;
    let user = |task: TaskSpec, channel: ChannelSpec| UserConfig { task, channel };
    let two_user = || {
        vec![
            user(TaskSpec::task1(0.5), ChannelSpec::rayleigh()),
            user(TaskSpec::task2(0.5), ChannelSpec::awgn()),
        ]
    };
    let three_user = || {
        vec![
            user(TaskSpec::task1(0.15), ChannelSpec::awgn()),
            user(TaskSpec::task2(0.15), ChannelSpec::rayleigh()),
            user(TaskSpec::task3(0.7), ChannelSpec::rician(2.0)),
        ]
    };
    let (users, variants, grid, beta, deterministic) = match case {
        Case::Case1 => (
            vec![
                user(TaskSpec::recover(0, 1.0), ChannelSpec::awgn()),
                user(TaskSpec::task3(crate::objective::RECOVERY_CE_WEIGHT), ChannelSpec::rayleigh()),
            ],
            vec![Variant::Deepbroadcast, Variant::Deeprc],
            narrow_grid(),
            0.0,
            true,
        ),
        Case::Case2 => (
            two_user(),
            vec![Variant::Deepbroadcast, Variant::Mtoc, Variant::Unicast],
            wide_grid(),
            1e-4,
            false,
        ),
        Case::Case3 => (
            three_user(),
            vec![Variant::Deepbroadcast, Variant::Mtoc, Variant::Unicast],
            narrow_grid(),
            1e-4,
            false,
        ),
        Case::Case4 => (
            two_user(),
            vec![Variant::Deepbroadcast, Variant::MtocWlca, Variant::MtocWgcf, Variant::Mtoc],
            narrow_grid(),
            1e-4,
            false,
        ),
        Case::Case5 => (
            three_user(),
            vec![Variant::Deepbroadcast, Variant::DeepbroadcastE2e],
            narrow_grid(),
            1e-4,
            false,
        ),
        Case::Custom => return Err(Error::config("case", "`custom` has no preset; write a config file")),
    };
    let heads = users.iter().map(|u| u.task.head()).collect();
    ExperimentConfig {
        case,
        variants,
        output_dir: PathBuf::from("runs").join(case.as_str()),
        model: ModelConfig::new(heads),
        loss: LossConfig { beta, gamma: None },
        trainer: TrainerSection {
            deterministic_latent: deterministic,
            ..TrainerSection::default()
        },
        eval: EvalConfig::new(grid),
        users,
    }
    .resolve()
}
