//! JSON model checkpoints. Floats are written with round-trip precision, so
//! loading a checkpoint reproduces the parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::share::ShareDomain;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Owning party.
    pub party: u32,
    /// Training epoch the model was taken after; 0 before training.
    pub epoch: usize,
    pub domain: ShareDomain,
    /// The model as the owning party holds it: masked layers carry only its
    /// own share.
    pub model: ModelParams,
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn new(party: u32, epoch: usize, model: ModelParams, config: RunConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            party,
            epoch,
            domain: config.domain,
            model,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.model.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelRole};
    use crate::rng::stream_rng;
    use crate::share::share;

    #[test]
    fn bit_exact_round_trip() {
        let mut rng = stream_rng(5, 0);
        let mut model = ModelParams::mlp(&[6, 5, 4], Activation::Relu, ModelRole::Bottom, &mut rng).unwrap();
        let domain = ShareDomain::ring(16, 64).unwrap();
        let (w, b) = {
            let (w, b) = model.layers[0].plain("test").unwrap();
            (
                share(w, &domain, &mut rng).unwrap(),
                share(b, &domain, &mut rng).unwrap(),
            )
        };
        model.layers[0].set_masked(w.share_a, b.share_a, domain).unwrap();
        let ck = Checkpoint::new(0, 3, model, RunConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
