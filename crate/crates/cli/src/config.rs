//! Run configuration: defaults, then the TOML file, then `BIHOI_` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bihoi_core::data::{condition_hash, Family};
use bihoi_core::metrics::MetricConfig;
use bihoi_core::{HandType, MAX_FRAMES};
use bihoi_models::diffusion::DiffusionConfig;
use bihoi_models::jointvae::JointVaeConfig;
use bihoi_models::manivae::ManiVaeConfig;
use bihoi_models::ssm::{Backbone, SsmBlockConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::fail;

pub const ENV_PREFIX: &str = "BIHOI_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub families: Vec<String>,
    /// Total samples, assigned to the families in turn.
    pub count: usize,
    pub frames: usize,
    pub text_dim: usize,
    pub object_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub lr: f64,
    /// Minibatch size; 0 uses the whole set.
    pub batch: usize,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub frames: usize,
    pub hand_type: String,
    /// Dataset sample providing instruction and object when none are given.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub hand_radius: f64,
    pub voxel: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub backbones: Vec<Backbone>,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub train_steps: u64,
    pub schedule_steps: usize,
    pub frames: usize,
    pub samples: usize,
    pub eval_draws: usize,
    pub lengths: Vec<usize>,
    pub timing_dim: usize,
    pub timing_reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub joint: JointVaeConfig,
    pub joint_train: TrainSettings,
    pub mani: ManiVaeConfig,
    pub mani_train: TrainSettings,
    pub diffusion: DiffusionConfig,
    pub diffusion_train: TrainSettings,
    pub sample: SampleSection,
    pub metrics: MetricsSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let metrics = MetricConfig::default();
        RunConfig {
            run: RunSection { seed: 0, out: PathBuf::from("runs/default") },
            data: DataSection {
                families: vec![Family::BiArt.name().into()],
                count: 4,
                frames: 32,
                text_dim: 64,
                object_dim: 64,
            },
            joint: JointVaeConfig::default(),
            joint_train: TrainSettings { steps: 2000, lr: 1e-3, batch: 0, clip_norm: 1.0 },
            mani: ManiVaeConfig::default(),
            mani_train: TrainSettings { steps: 2000, lr: 1e-3, batch: 0, clip_norm: 1.0 },
            diffusion: DiffusionConfig::default(),
            diffusion_train: TrainSettings { steps: 500, lr: 1e-3, batch: 0, clip_norm: 1.0 },
            sample: SampleSection { frames: MAX_FRAMES, hand_type: HandType::Bimanual.name().into(), index: 0 },
            metrics: MetricsSection { hand_radius: metrics.hand_radius, voxel: metrics.voxel, dt: metrics.dt },
            ablate: AblateSection {
                backbones: Backbone::ALL.to_vec(),
                model_dim: 32,
                num_blocks: 2,
                train_steps: 100,
                schedule_steps: 100,
                frames: 32,
                samples: 2,
                eval_draws: 16,
                lengths: vec![256, 512, 1024, 2048],
                timing_dim: 32,
                timing_reps: 3,
            },
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `BIHOI_SECTION__FIELD=value` sets `section.field`; deeper paths nest with `__`.
fn env_overrides(vars: impl Iterator<Item = (String, String)>) -> Table {
    let mut out = Table::new();
    let mut keys: Vec<(String, String)> = vars.filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__")).collect();
    keys.sort();
    for (key, raw) in keys {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        let mut node = &mut out;
        for part in &path[..path.len() - 1] {
            node = node
                .entry(part.clone())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("override paths nest tables");
        }
        node.insert(path[path.len() - 1].clone(), parse_scalar(&raw));
    }
    out
}

impl RunConfig {
    /// Defaults overlaid with `path` (if any) and the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(path: Option<&Path>, vars: impl Iterator<Item = (String, String)>) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Table = text.parse().map_err(|e| fail("ConfigError", format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        merge(&mut table, env_overrides(vars));
        let cfg: RunConfig = table.try_into().map_err(|e| fail("ConfigError", format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn families(&self) -> Result<Vec<Family>> {
        self.data.families.iter().map(|f| parse_family(f)).collect()
    }

    pub fn hand_type(&self) -> Result<HandType> {
        self.sample.hand_type.parse().map_err(anyhow::Error::from)
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig { hand_radius: self.metrics.hand_radius, voxel: self.metrics.voxel, dt: self.metrics.dt }
    }

    pub fn validate(&self) -> Result<()> {
        let families = self.families()?;
        if families.is_empty() || self.data.count == 0 {
            return Err(fail("InvalidConfig", "the dataset needs at least one family and one sample"));
        }
        check_frames(self.data.frames)?;
        check_frames(self.sample.frames)?;
        check_frames(self.ablate.frames)?;
        self.hand_type()?;
        let dims = (self.data.text_dim, self.data.object_dim);
        for (name, got) in [
            ("joint", (self.joint.text_dim, self.joint.object_dim)),
            ("mani", (self.mani.text_dim, self.mani.object_dim)),
            ("diffusion", (self.diffusion.text_dim, self.diffusion.object_dim)),
        ] {
            if got != dims {
                return Err(fail(
                    "InvalidConfig",
                    format!("[{name}] feature dims {got:?} differ from [data] {dims:?}"),
                ));
            }
        }
        if self.mani.latent_dim != self.diffusion.latent_dim {
            return Err(fail("InvalidConfig", "[mani] and [diffusion] latent_dim differ"));
        }
        self.joint.validate()?;
        self.mani.validate()?;
        self.diffusion.validate()?;
        for (name, t) in [("joint_train", &self.joint_train), ("mani_train", &self.mani_train), ("diffusion_train", &self.diffusion_train)] {
            if !(t.lr > 0.0 && t.lr.is_finite() && t.clip_norm > 0.0) {
                return Err(fail("InvalidConfig", format!("[{name}] needs positive lr and clip_norm")));
            }
        }
        let m = &self.metrics;
        if !(m.hand_radius > 0.0 && m.voxel > 0.0 && m.dt > 0.0) {
            return Err(fail("InvalidConfig", "[metrics] values must be positive"));
        }
        let a = &self.ablate;
        if a.backbones.is_empty() || a.lengths.len() < 2 || a.samples == 0 || a.eval_draws == 0 || a.timing_reps == 0 {
            return Err(fail("InvalidConfig", "[ablate] needs backbones, two or more lengths and positive counts"));
        }
        self.ablation_model(Backbone::Ssm).validate()?;
        Ok(())
    }

    /// Diffusion configuration used for one ablation row.
    pub fn ablation_model(&self, backbone: Backbone) -> DiffusionConfig {
        DiffusionConfig {
            backbone: SsmBlockConfig {
                backbone,
                model_dim: self.ablate.model_dim,
                num_blocks: self.ablate.num_blocks,
                ..self.diffusion.backbone.clone()
            },
            steps: self.ablate.schedule_steps,
            ..self.diffusion.clone()
        }
    }

    /// Independent seed for a named stage of the run.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        self.run.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ condition_hash(stage.as_bytes())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.run.out.join("dataset.bhds")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.run.out.join("checkpoints").join(format!("{name}.bhck"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.run.out.join("logs").join(format!("{name}.csv"))
    }
}

pub fn check_frames(n: usize) -> Result<()> {
    if n == 0 || n > MAX_FRAMES {
        return Err(fail("InvalidLength", format!("{n} frames, expected 1..={MAX_FRAMES}")));
    }
    Ok(())
}

pub fn parse_family(name: &str) -> Result<Family> {
    let key: String = name.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
    Family::ALL
        .into_iter()
        .find(|f| f.name().replace('-', "") == key)
        .ok_or_else(|| fail("InvalidConfig", format!("unknown family `{name}` (expected bi-art, bi-rigid, single-art or single-rigid)")))
}
