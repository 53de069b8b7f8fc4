//! Per-run records and their CSV files.
//!
//! `metrics.csv` holds only values that are a function of the configuration
//! and seed, so identical runs produce identical bytes. Wall-clock time goes
//! to `timing.csv`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Masked layers each passive party trained with this epoch.
    pub masked: Vec<BTreeSet<usize>>,
    /// Plaintext layers each passive party trained with this epoch.
    pub plaintext: Vec<BTreeSet<usize>>,
    /// Last simulated attack accuracy of each party's selection, if any ran.
    pub estimates: Vec<Option<f64>>,
    /// Mask ratio over epochs `1..=epoch`, averaged over passive parties.
    pub mask_ratio: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub party: u32,
    pub variant: String,
    /// Masked set chosen for the next epoch.
    pub u: BTreeSet<usize>,
    pub estimate: Option<f64>,
    /// Number of simulated attacks run.
    pub simulations: usize,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub seed: u64,
    pub mode: String,
    pub party: u32,
    /// Which model was attacked: `scratch`, `best`, `final` or `epoch-N`.
    pub target: String,
    pub m_per_class: usize,
    pub epochs: usize,
    pub per_epoch: Vec<f64>,
    pub best: f64,
}

pub fn fmt_set(s: &BTreeSet<usize>) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "loss",
        "train_accuracy",
        "test_accuracy",
        "masked",
        "plaintext",
        "estimate",
        "mask_ratio",
    ])?;
    for r in rows {
        let join = |sets: &[BTreeSet<usize>]| sets.iter().map(fmt_set).collect::<Vec<_>>().join("|");
        let est = r.estimates.iter().map(|e| fmt_opt(*e)).collect::<Vec<_>>().join("|");
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            r.train_accuracy.to_string(),
            r.test_accuracy.to_string(),
            join(&r.masked),
            join(&r.plaintext),
            est,
            r.mask_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "wall_seconds"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.wall_seconds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_selections(path: &Path, rows: &[SelectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "party", "variant", "u", "estimate", "simulations", "budget"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.party.to_string(),
            r.variant.clone(),
            fmt_set(&r.u),
            fmt_opt(r.estimate),
            r.simulations.to_string(),
            r.budget.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_attacks(path: &Path, rows: &[AttackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "mode",
        "party",
        "target",
        "m_per_class",
        "epochs",
        "per_epoch",
        "best",
    ])?;
    for r in rows {
        let per_epoch = r.per_epoch.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.seed.to_string(),
            r.mode.clone(),
            r.party.to_string(),
            r.target.clone(),
            r.m_per_class.to_string(),
            r.epochs.to_string(),
            per_epoch,
            r.best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = EpochRecord {
            epoch: 1,
            loss: 0.5,
            train_accuracy: 0.25,
            test_accuracy: 0.75,
            masked: vec![BTreeSet::from([1, 2]), BTreeSet::new()],
            plaintext: vec![BTreeSet::from([3]), BTreeSet::from([1, 2, 3])],
            estimates: vec![Some(0.125), None],
            mask_ratio: 1.0 / 3.0,
            wall_seconds: 9.0,
        };
        write_metrics(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,loss,train_accuracy,test_accuracy,masked,plaintext,estimate,mask_ratio\n\
             1,0.5,0.25,0.75,1;2|,3|1;2;3,0.125|,0.3333333333333333\n"
        );
    }
}
