//! Run configuration, read from JSON. Every field has a default, so `{}` is a
//! valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AuxSpec, CsvSchema};
use crate::error::{Error, Result};
use crate::share::ShareDomain;
use crate::transport::Backend;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain vertical training, nothing masked.
    Vanilla,
    /// Greedy selection restarted from an empty set each epoch.
    #[default]
    Vmask,
    /// Greedy selection that only ever adds layers.
    VmaskAs,
    /// Same count as VMask, layers drawn at random.
    VmaskRs,
    /// Every layer masked every epoch.
    VmaskAlls,
    /// No training; attack a freshly initialized bottom model.
    ScratchBaseline,
}

impl Mode {
    pub fn is_masked(self) -> bool {
        matches!(self, Mode::Vmask | Mode::VmaskAs | Mode::VmaskRs | Mode::VmaskAlls)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Vmask => "vmask",
            Mode::VmaskAs => "vmask-as",
            Mode::VmaskRs => "vmask-rs",
            Mode::VmaskAlls => "vmask-alls",
            Mode::ScratchBaseline => "scratch-baseline",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// The bundled handwritten digits corpus.
    #[default]
    Digits,
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
    Blobs {
        samples: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Known labels per class.
    pub m_per_class: usize,
    /// Fine-tuning epochs of the reported attacks.
    pub epochs: usize,
    pub lr: f64,
    /// Fine-tuning epochs of the attacks simulated during layer selection.
    pub select_epochs: usize,
    pub head_hidden: usize,
    /// Also attack the attacker view after every epoch.
    pub every_epoch: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            m_per_class: 4,
            epochs: 50,
            lr: 0.1,
            select_epochs: 50,
            head_hidden: 16,
            every_epoch: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxConfig {
    #[serde(flatten)]
    pub spec: AuxSpec,
    /// Load auxiliary data from this file instead of subsampling the
    /// training rows. Columns must match the full feature layout.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Number of parties including the active one.
    pub parties: usize,
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub aux: AuxConfig,
    /// Bottom model widths after the input layer.
    pub bottom_widths: Vec<usize>,
    pub top_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub budget: f64,
    pub sigma: f64,
    pub domain: ShareDomain,
    pub seed: u64,
    pub attack: AttackConfig,
    pub transport: Backend,
    pub out_dir: Option<PathBuf>,
    pub write_embeddings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::default(),
            parties: 2,
            dataset: DatasetSpec::default(),
            test_fraction: 0.2,
            aux: AuxConfig::default(),
            bottom_widths: vec![64, 32, 16],
            top_hidden: 16,
            epochs: 50,
            batch_size: 16,
            lr: 0.1,
            budget: 0.25,
            sigma: 0.01,
            domain: ShareDomain::default(),
            seed: 42,
            attack: AttackConfig::default(),
            transport: Backend::default(),
            out_dir: None,
            write_embeddings: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.parties < 2 {
            return bad(format!("need at least 2 parties, got {}", self.parties));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return bad(format!("privacy budget {} outside [0, 1]", self.budget));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return bad(format!("noise sigma {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test fraction {}", self.test_fraction));
        }
        if self.bottom_widths.is_empty() || self.bottom_widths.contains(&0) {
            return bad(format!("bottom widths {:?}", self.bottom_widths));
        }
        if self.top_hidden == 0 || self.attack.head_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if self.attack.m_per_class == 0 {
            return bad("attack needs at least one known label per class".into());
        }
        if !self.attack.lr.is_finite() || self.attack.lr < 0.0 {
            return bad(format!("attack learning rate {}", self.attack.lr));
        }
        self.aux.spec.validate()?;
        self.domain.validate()?;
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.bottom_widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.bottom_widths.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig {
            mode: Mode::VmaskAs,
            domain: ShareDomain::ring(16, 64).unwrap(),
            dataset: DatasetSpec::Blobs {
                samples: 100,
                features: 8,
                classes: 3,
                spread: 0.5,
            },
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn mode_names() {
        for m in [
            "vanilla",
            "vmask",
            "vmask-as",
            "vmask-rs",
            "vmask-alls",
            "scratch-baseline",
        ] {
            assert_eq!(m.parse::<Mode>().unwrap().as_str(), m);
        }
        assert!("vmask-xx".parse::<Mode>().is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"parties": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"budget": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"epochs": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"nonsense": 0}"#).is_ok());
    }
}
