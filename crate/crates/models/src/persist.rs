//! Conversions between models and checkpoints.

use bihoi_nn::{Adam, Checkpoint, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::diffusion::{CompositeStats, DiffusionConfig, DiffusionModel};
use crate::error::{ModelError, Result};
use crate::jointvae::{JointVae, JointVaeConfig};
use crate::manivae::{ManiVae, ManiVaeConfig};

pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint;
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;
}

fn config_json(c: &impl Serialize) -> String {
    serde_json::to_string(c).expect("configs serialize")
}

fn parse_config<C: DeserializeOwned>(ck: &Checkpoint, kind: &str) -> Result<C> {
    if ck.kind != kind {
        return Err(ModelError::Config(format!("checkpoint holds a {} model, expected {kind}", ck.kind)));
    }
    serde_json::from_str(&ck.config).map_err(|e| ModelError::Config(format!("checkpoint config: {e}")))
}

fn base(kind: &str, config: String, store: &bihoi_nn::ParamStore, step: u64, adam: Option<&Adam>) -> Checkpoint {
    let mut params = store.clone();
    params.unfreeze();
    Checkpoint {
        kind: kind.to_string(),
        config,
        step,
        params,
        extras: Default::default(),
        adam: adam.cloned(),
    }
}

impl Persist for JointVae {
    const KIND: &'static str = JointVae::KIND;

    fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint {
        base(Self::KIND, config_json(&self.config), &self.store, step, adam)
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: JointVaeConfig = parse_config(ck, Self::KIND)?;
        let mut m = JointVae::new(config, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

impl Persist for ManiVae {
    const KIND: &'static str = ManiVae::KIND;

    fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint {
        base(Self::KIND, config_json(&self.config), &self.store, step, adam)
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ManiVaeConfig = parse_config(ck, Self::KIND)?;
        let mut m = ManiVae::new(config, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

impl Persist for DiffusionModel {
    const KIND: &'static str = DiffusionModel::KIND;

    fn to_checkpoint(&self, step: u64, adam: Option<&Adam>) -> Checkpoint {
        let mut ck = base(Self::KIND, config_json(&self.config), &self.store, step, adam);
        ck.extras.insert("stats.mean".into(), Tensor::row_vector(self.stats.mean.clone()));
        ck.extras.insert("stats.std".into(), Tensor::row_vector(self.stats.std.clone()));
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: DiffusionConfig = parse_config(ck, Self::KIND)?;
        let mut m = DiffusionModel::new(config, 0)?;
        m.store.load_from(&ck.params)?;
        let mean = ck.extra("stats.mean")?.data().to_vec();
        let std = ck.extra("stats.std")?.data().to_vec();
        if mean.len() != m.width() || std.len() != m.width() {
            return Err(ModelError::ShapeMismatch("normalization statistics width".into()));
        }
        m.stats = CompositeStats { mean, std };
        Ok(m)
    }
}
