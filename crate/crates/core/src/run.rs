//! End-to-end runs: data preparation, party setup, the epoch loop, attacks
//! and output files.
//!
//! Every epoch of a masked run trains with the current masked sets, updates
//! the shadow models, selects next epoch's masked sets and moves layers
//! between plaintext and shares before the next epoch starts.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{build_attack_dataset, materialize_attacker_view, mc_attack};
use crate::audit::{audit_config, AuditReport};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSpec, Mode, RunConfig};
use crate::data::{
    aux_rows, blobs, corrupt_features, digits, load_csv, train_test_split, vertical_split, CsvSchema, Dataset,
    Standardizer,
};
use crate::error::{Error, Result};
use crate::masking::{mask_ratio, mask_transition, NoiseConfig};
use crate::metrics::{
    write_attacks, write_metrics, write_selections, write_timing, AttackRecord, EpochRecord, SelectionRecord,
};
use crate::nn::{predict, Activation, ModelParams, ModelRole};
use crate::party::{ActiveParty, Dealer, PassiveParty};
use crate::reference::evaluate_logits;
use crate::rng::{stream, stream_rng};
use crate::secure_train::{reconstructed_bottoms, run_epoch, EpochPlan, Federation};
use crate::select::{select_layers, GradNormAccumulator, McLeakage, SelectionVariant};
use crate::shadow::{bottom_from_seed, bottom_init_seed, shadow_model_update, ShadowModel, ShadowSet};
use crate::tensor::{accuracy, DenseTensor};
use crate::transport::{star, Message, TrafficEvent};

/// Standardized, split and vertically partitioned data for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub num_classes: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Column block of each party, last one the active party's.
    pub train_blocks: Vec<DenseTensor>,
    pub test_blocks: Vec<DenseTensor>,
    /// Auxiliary rows in every party's column layout.
    pub aux_blocks: Vec<DenseTensor>,
    pub aux_labels: Vec<usize>,
}

impl PreparedData {
    pub fn feature_dim(&self) -> usize {
        self.train.dim()
    }

    /// Width chain of each party's bottom model.
    pub fn bottom_dims(&self, cfg: &RunConfig) -> Vec<Vec<usize>> {
        self.train_blocks
            .iter()
            .map(|b| {
                std::iter::once(b.cols())
                    .chain(cfg.bottom_widths.iter().copied())
                    .collect()
            })
            .collect()
    }
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Digits => digits(),
        DatasetSpec::Csv { path, schema } => load_csv(path, schema),
        DatasetSpec::Blobs {
            samples,
            features,
            classes,
            spread,
        } => blobs(
            *samples,
            *features,
            *classes,
            *spread,
            &mut stream_rng(seed, stream::BLOBS),
        ),
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let full = load_dataset(&cfg.dataset, cfg.seed)?;
    let (train, test) = train_test_split(&full, cfg.test_fraction, &mut stream_rng(cfg.seed, stream::SPLIT))?;
    let scaler = Standardizer::fit(&train.features);
    let train = Dataset::new(scaler.apply(&train.features)?, train.labels, full.num_classes)?;
    let test = Dataset::new(scaler.apply(&test.features)?, test.labels, full.num_classes)?;

    let mut aux_rng = stream_rng(cfg.seed, stream::AUX);
    let aux = match &cfg.aux.path {
        Some(path) => {
            let schema = CsvSchema {
                num_classes: Some(full.num_classes),
                ..Default::default()
            };
            let raw = load_csv(path, &schema)?;
            if raw.dim() != full.dim() {
                return Err(Error::shape("auxiliary features", full.dim(), raw.dim()));
            }
            Dataset::new(scaler.apply(&raw.features)?, raw.labels, full.num_classes)?
        }
        None => train.select(&aux_rows(&train, &cfg.aux.spec, &mut aux_rng)?),
    };
    let aux_x = corrupt_features(&aux.features, cfg.aux.spec.feature_noise, &mut aux_rng)?;

    Ok(PreparedData {
        num_classes: full.num_classes,
        train_blocks: vertical_split(&train.features, cfg.parties)?,
        test_blocks: vertical_split(&test.features, cfg.parties)?,
        aux_blocks: vertical_split(&aux_x, cfg.parties)?,
        aux_labels: aux.labels,
        train,
        test,
    })
}

/// Creates all parties and the dealer, connects them, and sends every
/// passive party's init seed to the active party.
pub fn build_federation(cfg: &RunConfig, data: &PreparedData) -> Result<Federation> {
    let k_parties = cfg.parties;
    let active_id = (k_parties - 1) as u32;
    let dims = data.bottom_dims(cfg);
    let mut endpoints = star(k_parties as u32, cfg.transport)?;
    let active_ep = endpoints.pop().expect("star returns one endpoint per party");

    let mut passives = Vec::with_capacity(k_parties - 1);
    for (k, ep) in endpoints.into_iter().enumerate() {
        let seed = bottom_init_seed(cfg.seed, k as u32);
        let bottom = bottom_from_seed(seed, &dims[k], ModelRole::Bottom)?;
        passives.push(PassiveParty::new(
            k as u32,
            active_id,
            data.train_blocks[k].clone(),
            bottom,
            seed,
            cfg.domain,
            stream_rng(cfg.seed, stream::PARTY_SHARES + k as u64),
            ep,
        )?);
    }

    let active_bottom = bottom_from_seed(
        bottom_init_seed(cfg.seed, active_id),
        &dims[k_parties - 1],
        ModelRole::Bottom,
    )?;
    let top = ModelParams::mlp(
        &[cfg.embedding_dim(), cfg.top_hidden, data.num_classes],
        Activation::Relu,
        ModelRole::Top,
        &mut stream_rng(cfg.seed, stream::TOP_INIT),
    )?;
    let mut active = ActiveParty::new(
        active_id,
        data.train_blocks[k_parties - 1].clone(),
        data.train.labels.clone(),
        data.num_classes,
        active_bottom,
        top,
        cfg.domain,
        NoiseConfig::new(cfg.sigma)?,
        stream_rng(cfg.seed, stream::NOISE),
        active_ep,
    )?;

    for p in &mut passives {
        let msg = Message::Seed {
            party: p.id,
            seed: p.init_seed,
        };
        p.endpoint.send(active_id, &msg)?;
        match active.endpoint.recv(p.id)? {
            Message::Seed { party, seed } if party == p.id => {
                active.peer_seeds.insert(party, seed);
            }
            other => return Err(crate::transport::unexpected("Seed", &other).into()),
        }
    }

    Ok(Federation {
        passives,
        active,
        dealer: Dealer::new(cfg.domain, stream_rng(cfg.seed, stream::DEALER)),
    })
}

/// Shadows built by the active party from the seeds it received.
pub fn build_shadows(fed: &Federation, cfg: &RunConfig, data: &PreparedData) -> Result<ShadowSet> {
    let dims = data.bottom_dims(cfg);
    let mut shadows = Vec::with_capacity(fed.passives.len());
    for p in &fed.passives {
        let seed = *fed
            .active
            .peer_seeds
            .get(&p.id)
            .ok_or_else(|| Error::InvalidConfig(format!("no init seed from party {}", p.id)))?;
        shadows.push(ShadowModel {
            party: p.id,
            model: bottom_from_seed(seed, &dims[p.id as usize], ModelRole::Shadow)?,
            aux: data.aux_blocks[p.id as usize].clone(),
        });
    }
    ShadowSet::new(shadows, data.aux_labels.clone())
}

fn variant(mode: Mode) -> Option<SelectionVariant> {
    match mode {
        Mode::Vmask => Some(SelectionVariant::VMask),
        Mode::VmaskAs => Some(SelectionVariant::VMaskAS),
        Mode::VmaskRs => Some(SelectionVariant::VMaskRS),
        Mode::VmaskAlls => Some(SelectionVariant::VMaskALLS),
        Mode::Vanilla | Mode::ScratchBaseline => None,
    }
}

/// Test accuracy of the full model, with masked layers rebuilt from both
/// shares.
pub fn test_accuracy(fed: &Federation, data: &PreparedData) -> Result<f64> {
    if data.test.is_empty() {
        return Ok(0.0);
    }
    let mut bottoms = reconstructed_bottoms(fed)?;
    bottoms.push(fed.active.bottom.clone());
    let logits = evaluate_logits(&bottoms, &fed.active.top, &data.test_blocks)?;
    Ok(accuracy(&logits, &data.test.labels))
}

/// Attack by passive party `k` on `model`, held the way the party holds it.
pub fn attack_model(
    cfg: &RunConfig,
    data: &PreparedData,
    k: u32,
    model: &ModelParams,
    target: &str,
) -> Result<AttackRecord> {
    let view = materialize_attacker_view(model)?;
    let mut rng = stream_rng(cfg.seed, stream::ATTACK + u64::from(k));
    let ds = build_attack_dataset(
        &data.train_blocks[k as usize],
        &data.train.labels,
        data.num_classes,
        cfg.attack.m_per_class,
        1.0,
        &mut rng,
    )?;
    let report = mc_attack(
        &ds,
        &view,
        cfg.attack.head_hidden,
        cfg.attack.epochs,
        cfg.attack.lr,
        &mut rng,
    )?;
    Ok(AttackRecord {
        seed: cfg.seed,
        mode: cfg.mode.to_string(),
        party: k,
        target: target.to_string(),
        m_per_class: cfg.attack.m_per_class,
        epochs: cfg.attack.epochs,
        per_epoch: report.per_epoch,
        best: report.best,
    })
}

/// Attack on party `k`'s bottom model as initialized, before any training.
pub fn scratch_attack(cfg: &RunConfig, data: &PreparedData, k: u32) -> Result<AttackRecord> {
    let dims = data.bottom_dims(cfg);
    let model = bottom_from_seed(bottom_init_seed(cfg.seed, k), &dims[k as usize], ModelRole::Bottom)?;
    attack_model(cfg, data, k, &model, "scratch")
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub audit: AuditReport,
    pub epochs: Vec<EpochRecord>,
    pub selections: Vec<SelectionRecord>,
    pub attacks: Vec<AttackRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Averaged over passive parties.
    pub mask_ratio: f64,
    /// Passive bottom models as their owners hold them.
    pub best_models: Vec<ModelParams>,
    pub final_models: Vec<ModelParams>,
    /// Passive bottom models with masked layers rebuilt, after the last epoch.
    pub final_reconstructed: Vec<ModelParams>,
    /// Traffic log of every endpoint, indexed by party.
    pub traffic: Vec<Vec<TrafficEvent>>,
}

impl RunOutcome {
    pub fn attack(&self, party: u32, target: &str) -> Option<&AttackRecord> {
        self.attacks.iter().find(|a| a.party == party && a.target == target)
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let data = prepare_data(cfg)?;
    run_with_data(cfg, &data)
}

pub fn run_with_data(cfg: &RunConfig, data: &PreparedData) -> Result<RunOutcome> {
    cfg.validate()?;
    let audit = audit_config(cfg, data.feature_dim())?;
    for w in audit.warnings() {
        log::warn!(
            "party {} layer {}: batch size {} >= input width {}, masked parameters are reconstructible",
            w.party,
            w.layer,
            w.batch_size,
            w.input_dim
        );
    }
    let mut outcome = RunOutcome {
        config: cfg.clone(),
        audit,
        epochs: Vec::new(),
        selections: Vec::new(),
        attacks: Vec::new(),
        best_epoch: 0,
        best_test_accuracy: 0.0,
        final_test_accuracy: 0.0,
        mask_ratio: 0.0,
        best_models: Vec::new(),
        final_models: Vec::new(),
        final_reconstructed: Vec::new(),
        traffic: Vec::new(),
    };
    if cfg.mode == Mode::ScratchBaseline {
        for k in 0..(cfg.parties - 1) as u32 {
            outcome.attacks.push(scratch_attack(cfg, data, k)?);
        }
        return Ok(outcome);
    }

    let mut fed = build_federation(cfg, data)?;
    let variant = variant(cfg.mode);
    let mut shadows = build_shadows(&fed, cfg, data)?;
    let mut norms: Vec<GradNormAccumulator> = fed
        .passives
        .iter()
        .map(|p| GradNormAccumulator::new(p.bottom.num_layers()))
        .collect();
    let num_layers = cfg.num_layers();
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); fed.passives.len()];
    let mut shuffle_rng = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut select_rng = stream_rng(cfg.seed, stream::SELECT);
    let mut estimate_rng = stream_rng(cfg.seed, stream::ESTIMATE);

    if variant.is_some() {
        let first = BTreeSet::from([1]);
        let Federation { passives, active, .. } = &mut fed;
        for p in passives.iter_mut() {
            mask_transition(p, active, &first).map_err(|e| e.context(format!("initial masking of party {}", p.id)))?;
        }
    }

    outcome.best_models = fed.passives.iter().map(|p| p.bottom.clone()).collect();
    for t in 1..=cfg.epochs {
        let started = Instant::now();
        set_epoch(&mut fed, t as u32);
        let masked: Vec<BTreeSet<usize>> = fed.passives.iter().map(|p| p.mask.u_curr.clone()).collect();
        let plaintext: Vec<BTreeSet<usize>> = fed.passives.iter().map(|p| p.mask.v_curr.clone()).collect();
        for (c, u) in counts.iter_mut().zip(&masked) {
            c.push(u.len());
        }

        let plan = EpochPlan::shuffled(data.train.len(), cfg.batch_size, cfg.lr, &mut shuffle_rng)?;
        let stats = run_epoch(&plan, &mut fed).map_err(|e| e.context(format!("epoch {t}")))?;

        let mut estimates = vec![None; fed.passives.len()];
        if let Some(variant) = variant {
            let top = fed.active.top.clone();
            let grads = shadow_model_update(&mut shadows, &top, cfg.batch_size, cfg.lr)?;
            let Federation { passives, active, .. } = &mut fed;
            for (k, p) in passives.iter_mut().enumerate() {
                norms[k].accumulate(&grads[k])?;
                let shadow = &shadows.shadows[k];
                let ds = build_attack_dataset(
                    &shadow.aux,
                    &shadows.aux_labels,
                    data.num_classes,
                    cfg.attack.m_per_class,
                    1.0,
                    &mut select_rng,
                )
                .map_err(|e| e.context("auxiliary attack dataset"))?;
                let mut estimator = McLeakage {
                    dataset: &ds,
                    head_hidden: cfg.attack.head_hidden,
                    epochs: cfg.attack.select_epochs,
                    lr: cfg.attack.lr,
                    rng: &mut estimate_rng,
                };
                let sel = select_layers(
                    &shadow.model,
                    &p.mask.u_curr,
                    cfg.budget,
                    &norms[k],
                    variant,
                    &mut estimator,
                    &mut select_rng,
                )?;
                estimates[k] = sel.last_estimate();
                outcome.selections.push(SelectionRecord {
                    epoch: t,
                    party: p.id,
                    variant: variant.as_str().to_string(),
                    u: sel.u_next.clone(),
                    estimate: sel.last_estimate(),
                    simulations: sel.estimates.len(),
                    budget: cfg.budget,
                });
                mask_transition(p, active, &sel.u_next)
                    .map_err(|e| e.context(format!("epoch {t} masking of party {}", p.id)))?;
            }
        }

        let test_acc = test_accuracy(&fed, data)?;
        if t == 1 || test_acc > outcome.best_test_accuracy {
            outcome.best_test_accuracy = test_acc;
            outcome.best_epoch = t;
            outcome.best_models = fed.passives.iter().map(|p| p.bottom.clone()).collect();
        }
        if cfg.attack.every_epoch {
            for p in &fed.passives {
                outcome
                    .attacks
                    .push(attack_model(cfg, data, p.id, &p.bottom, &format!("epoch-{t}"))?);
            }
        }
        let ratio = counts.iter().map(|c| mask_ratio(c, num_layers)).sum::<f64>() / counts.len() as f64;
        log::info!(
            "epoch {t}: loss {:.4} train {:.4} test {:.4} masked {:?}",
            stats.mean_loss,
            stats.train_accuracy,
            test_acc,
            masked
        );
        outcome.epochs.push(EpochRecord {
            epoch: t,
            loss: stats.mean_loss,
            train_accuracy: stats.train_accuracy,
            test_accuracy: test_acc,
            masked,
            plaintext,
            estimates,
            mask_ratio: ratio,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        outcome.final_test_accuracy = test_acc;
        outcome.mask_ratio = ratio;
    }

    outcome.final_models = fed.passives.iter().map(|p| p.bottom.clone()).collect();
    outcome.final_reconstructed = reconstructed_bottoms(&fed)?;
    for k in 0..fed.passives.len() {
        let id = k as u32;
        outcome
            .attacks
            .push(attack_model(cfg, data, id, &outcome.best_models[k], "best")?);
        outcome
            .attacks
            .push(attack_model(cfg, data, id, &outcome.final_models[k], "final")?);
    }
    outcome.traffic = fed
        .passives
        .iter()
        .map(|p| p.endpoint.log().to_vec())
        .chain(std::iter::once(fed.active.endpoint.log().to_vec()))
        .collect();
    Ok(outcome)
}

fn set_epoch(fed: &mut Federation, epoch: u32) {
    for p in &mut fed.passives {
        p.endpoint.set_epoch(epoch);
    }
    fed.active.endpoint.set_epoch(epoch);
}

/// Checks that each endpoint's traffic is ordered by epoch and that, within
/// an epoch, no training message follows a masking message: all of epoch t's
/// layer transitions finish before epoch t+1 starts.
pub fn verify_barrier(traffic: &[Vec<TrafficEvent>]) -> Result<()> {
    for (party, log) in traffic.iter().enumerate() {
        let mut epoch = 0;
        let mut masking_seen = false;
        for (i, ev) in log.iter().enumerate() {
            if ev.epoch < epoch {
                return Err(Error::InconsistentMask(format!(
                    "party {party} event {i} belongs to epoch {} after epoch {epoch}",
                    ev.epoch
                )));
            }
            if ev.epoch > epoch {
                epoch = ev.epoch;
                masking_seen = false;
            }
            let masking = matches!(ev.kind, "LayerShare" | "LayerReconstruct");
            if masking {
                masking_seen = true;
            } else if masking_seen && ev.kind != "Seed" {
                return Err(Error::InconsistentMask(format!(
                    "party {party} sent {} after masking in epoch {epoch}",
                    ev.kind
                )));
            }
        }
    }
    Ok(())
}

/// Writes metrics, selections, attacks, checkpoints and optionally test-set
/// embeddings into `dir`.
pub fn write_outputs(outcome: &RunOutcome, data: &PreparedData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics(&dir.join("metrics.csv"), &outcome.epochs)?;
    write_timing(&dir.join("timing.csv"), &outcome.epochs)?;
    write_selections(&dir.join("selection.csv"), &outcome.selections)?;
    write_attacks(&dir.join("attack.csv"), &outcome.attacks)?;
    for (k, m) in outcome.best_models.iter().enumerate() {
        Checkpoint::new(k as u32, outcome.best_epoch, m.clone(), outcome.config.clone())
            .save(&dir.join(format!("checkpoint-best-party{k}.json")))?;
    }
    for (k, m) in outcome.final_models.iter().enumerate() {
        Checkpoint::new(k as u32, outcome.epochs.len(), m.clone(), outcome.config.clone())
            .save(&dir.join(format!("checkpoint-final-party{k}.json")))?;
    }
    if outcome.config.write_embeddings && !outcome.final_reconstructed.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("embeddings.csv"))?;
        let d = outcome.config.embedding_dim();
        let mut header = vec!["party".to_string(), "row".to_string(), "label".to_string()];
        header.extend((0..d).map(|j| format!("e{j}")));
        w.write_record(&header)?;
        for (k, m) in outcome.final_reconstructed.iter().enumerate() {
            let z = predict(m, &data.test_blocks[k])?;
            for i in 0..z.rows() {
                let mut rec = vec![k.to_string(), i.to_string(), data.test.labels[i].to_string()];
                rec.extend(z.row(i).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: f64,
    /// Attack on the best-accuracy checkpoint of party 0.
    pub attack_best: f64,
    /// Attack on the final model of party 0.
    pub attack_final: f64,
    pub main_accuracy: f64,
    pub mask_ratio: f64,
}

/// One run per budget on the same seed. Budgets must be in descending order.
pub fn sweep_budget(cfg: &RunConfig, budgets: &[f64]) -> Result<Vec<SweepRow>> {
    if budgets.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidConfig(
            "budgets must be sorted in descending order".into(),
        ));
    }
    if budgets.is_empty() {
        return Ok(Vec::new());
    }
    let data = prepare_data(cfg)?;
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut c = cfg.clone();
        c.budget = budget;
        let out = run_with_data(&c, &data)?;
        let pick = |target: &str| out.attack(0, target).map_or(0.0, |a| a.best);
        rows.push(SweepRow {
            budget,
            attack_best: pick("best"),
            attack_final: pick("final"),
            main_accuracy: out.best_test_accuracy,
            mask_ratio: out.mask_ratio,
        });
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["budget", "attack_best", "attack_final", "main_accuracy", "mask_ratio"])?;
    for r in rows {
        w.write_record([
            r.budget.to_string(),
            r.attack_best.to_string(),
            r.attack_final.to_string(),
            r.main_accuracy.to_string(),
            r.mask_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
