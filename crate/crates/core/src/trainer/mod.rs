//! Deterministic training harness.
//!
//! A run is fully determined by its [`ExperimentConfig`]: parameter
//! initialization draws from `seed`, and the sample order of epoch `e` comes
//! from a ChaCha stream keyed by `(seed, e)`, so a run resumed from a
//! snapshot needs no saved RNG state.

mod data;
mod network;
mod optim;
mod params;
mod snapshot;

pub use data::{load_cifar10, load_datasets, parse_cifar10, synthetic, Dataset, SyntheticSpec, CIFAR_RECORD};
pub use network::{BatchResult, BlockSpec, ConvSpec, Mode, Model, NetworkSpec, NormImpl, NormLayer, NormSetup, NormTape, Tape};
pub use optim::{lr_at, optimizer_step, LrSchedule, OptimizerConfig, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use snapshot::{Blob, Snapshot};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytics::{RatioRecord, RatioTrajectory};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::norm::StatsMode;
use crate::shard::ShardConfig;
use crate::switchable::{harden, HardRatio, Member};

/// Stream offset for the batches used to estimate batch-average statistics.
const BN_STREAM: u64 = 1 << 40;
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// One-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc";

/// Metrics as CSV text.
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.11e}"));
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        s.push_str(&format!(
            "{},{:.11e},{:.11e},{:.11e},{},{}\n",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            opt(m.test_loss),
            opt(m.test_acc)
        ));
    }
    s
}

/// Per-step information handed to an [`Observer`].
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub model: &'a Model,
}

/// Hooks into a running training loop.
pub trait Observer {
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl Observer for () {}

pub struct TrainOutput {
    pub metrics: Vec<EpochMetrics>,
    pub trajectory: RatioTrajectory,
    /// State after the last epoch.
    pub snapshot: Snapshot,
    /// States saved at the configured `snapshot_epochs`.
    pub snapshots: Vec<(usize, Snapshot)>,
    pub model: Model,
}

/// Where a run starts from.
enum Start<'a> {
    Fresh,
    Resume(&'a Snapshot),
    HardFinetune(&'a Snapshot),
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    run(cfg, Start::Fresh, &mut ())
}

pub fn train_observed(cfg: &ExperimentConfig, observer: &mut dyn Observer) -> Result<TrainOutput> {
    run(cfg, Start::Fresh, observer)
}

/// Continues a run from a snapshot up to `cfg.epochs`.
pub fn resume(cfg: &ExperimentConfig, snap: &Snapshot) -> Result<TrainOutput> {
    run(cfg, Start::Resume(snap), &mut ())
}

pub fn resume_observed(cfg: &ExperimentConfig, snap: &Snapshot, observer: &mut dyn Observer) -> Result<TrainOutput> {
    run(cfg, Start::Resume(snap), observer)
}

/// Hardens every switchable layer of the snapshot's model, freezes the
/// ratios and keeps training the remaining parameters up to `cfg.epochs`.
pub fn harden_finetune(snap: &Snapshot, cfg: &ExperimentConfig) -> Result<TrainOutput> {
    run(cfg, Start::HardFinetune(snap), &mut ())
}

pub fn harden_finetune_observed(snap: &Snapshot, cfg: &ExperimentConfig, observer: &mut dyn Observer) -> Result<TrainOutput> {
    run(cfg, Start::HardFinetune(snap), observer)
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn slot_code(m: Member) -> u64 {
    m.slot() as u64
}

fn member_from_code(c: u64) -> Result<Member> {
    Member::ALL
        .into_iter()
        .find(|m| m.slot() as u64 == c)
        .ok_or_else(|| Error::Input(format!("bad normalizer code {c} in snapshot")))
}

/// Serializes the complete training state.
pub fn snapshot_of(model: &Model, opt: &OptimizerState, epoch: usize, cfg: &ExperimentConfig) -> Result<Snapshot> {
    let mut s = Snapshot::new();
    s.push("meta/epoch", Blob::U64(vec![epoch as u64]))?;
    s.push("meta/seed", Blob::U64(vec![cfg.seed]))?;
    s.push("meta/config", Blob::Bytes(cfg.to_text().into_bytes()))?;
    for p in model.params.iter() {
        s.push(format!("param/{}", p.name), Blob::F64(p.value.clone()))?;
    }
    for (p, b) in model.params.iter().zip(&opt.buffers) {
        s.push(format!("opt/{}", p.name), Blob::F64(b.clone()))?;
    }
    for layer in &model.norms {
        if let NormImpl::Switch { hard: Some(h), .. } = layer.imp {
            s.push(format!("hard/{}", layer.name), Blob::U64(vec![slot_code(h.mu), slot_code(h.sigma)]))?;
        }
        if let Some(st) = &layer.bn_stats {
            let mode = match st.mode {
                StatsMode::BatchAverage => 0,
                StatsMode::MovingAverage => 1,
            };
            s.push(format!("bn/{}/state", layer.name), Blob::U64(vec![mode, st.batches_seen, st.finalized as u64]))?;
            s.push(format!("bn/{}/means", layer.name), Blob::F64(st.means.clone()))?;
            s.push(format!("bn/{}/vars", layer.name), Blob::F64(st.vars.clone()))?;
        }
    }
    Ok(s)
}

fn restore_params(model: &mut Model, snap: &Snapshot) -> Result<()> {
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        model.params.assign(name, snap.f64s(&format!("param/{name}"))?)?;
    }
    let expected = names.len();
    let stored = snap.entries().iter().filter(|e| e.0.starts_with("param/")).count();
    if stored != expected {
        return Err(Error::Incompatible(format!("snapshot has {stored} parameters, model has {expected}")));
    }
    Ok(())
}

/// Loads parameters, optimizer buffers, hard choices and BN statistics.
/// Returns the number of completed epochs.
pub fn restore(model: &mut Model, opt: &mut OptimizerState, snap: &Snapshot) -> Result<usize> {
    restore_params(model, snap)?;
    for (p, b) in model.params.iter().zip(opt.buffers.iter_mut()) {
        let v = snap.f64s(&format!("opt/{}", p.name))?;
        if v.len() != b.len() {
            return Err(Error::Incompatible(format!("optimizer buffer of `{}` has the wrong length", p.name)));
        }
        b.copy_from_slice(v);
    }
    let mut hard = Vec::new();
    let mut any_hard = false;
    for layer in &model.norms {
        if layer.is_switchable() {
            match snap.get(&format!("hard/{}", layer.name)) {
                Some(Blob::U64(v)) if v.len() == 2 => {
                    any_hard = true;
                    hard.push(Some(HardRatio { mu: member_from_code(v[0])?, sigma: member_from_code(v[1])? }));
                }
                Some(_) => return Err(Error::Input(format!("malformed hard entry for {}", layer.name))),
                None => hard.push(None),
            }
        }
    }
    if any_hard {
        if hard.iter().any(Option::is_none) {
            return Err(Error::Incompatible("snapshot hardens only some switchable layers".into()));
        }
        model.set_hard(&hard.into_iter().flatten().collect::<Vec<_>>())?;
    }
    for layer in &mut model.norms {
        if let Some(st) = &mut layer.bn_stats {
            let state = snap.u64s(&format!("bn/{}/state", layer.name))?;
            let means = snap.f64s(&format!("bn/{}/means", layer.name))?;
            let vars = snap.f64s(&format!("bn/{}/vars", layer.name))?;
            let mode = if state.first() == Some(&1) { StatsMode::MovingAverage } else { StatsMode::BatchAverage };
            if state.len() != 3 || mode != st.mode || means.len() != st.means.len() || vars.len() != st.vars.len() {
                return Err(Error::Incompatible(format!("BN statistics of {} do not match", layer.name)));
            }
            st.means.copy_from_slice(means);
            st.vars.copy_from_slice(vars);
            st.batches_seen = state[1];
            st.finalized = state[2] != 0;
        }
    }
    let epoch = snap.u64s("meta/epoch")?.first().copied().unwrap_or(0);
    Ok(epoch as usize)
}

/// Hard choices derived from the ratios stored in a snapshot, for a model
/// with the architecture of `cfg`.
pub fn hard_choices_from(snap: &Snapshot, template: &Model) -> Result<Vec<HardRatio>> {
    let mut m = template.clone();
    restore_params(&mut m, snap)?;
    if !m.has_switchable() {
        return Err(Error::Usage("snapshot model has no switchable layers".into()));
    }
    Ok(m.ratio_states().iter().map(|(_, s)| harden(s)).collect())
}

fn record_ratios(model: &Model, epoch: usize, traj: &mut RatioTrajectory) -> Result<()> {
    for (meta, state) in model.ratio_states() {
        let omega = state.omega();
        traj.push(RatioRecord {
            layer_id: meta.layer_id,
            epoch,
            rf: meta.rf,
            lambda_mu: omega.expand(&state.lambda_mu()),
            lambda_sigma: omega.expand(&state.lambda_sigma()),
        })?;
    }
    Ok(())
}

/// Mean loss and accuracy in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = model.forward(&x, Mode::Eval)?;
        let (l, c, _) = Model::loss(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Re-estimates batch-average BN statistics over `cfg.bn_batches` training
/// batches drawn from a dedicated stream.
pub fn estimate_bn(model: &mut Model, train: &Dataset, cfg: &ExperimentConfig, shard: ShardConfig, epoch: usize) -> Result<()> {
    if !model.needs_batch_average() {
        return Ok(());
    }
    let batch = shard.total();
    let mut order = Vec::new();
    let mut round = 0;
    while order.len() < cfg.bn_batches * batch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(BN_STREAM + (epoch as u64) * 1024 + round);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(train.len() / batch * batch);
        order.extend(idx);
        round += 1;
    }
    let batches: Vec<_> = order.chunks(batch).take(cfg.bn_batches).map(|c| train.batch(c).0).collect();
    model.estimate_batch_average(&batches, shard)
}

fn run(cfg: &ExperimentConfig, start: Start<'_>, observer: &mut dyn Observer) -> Result<TrainOutput> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let shard = ShardConfig::new(cfg.shards, cfg.per_shard)?;
    let batch = shard.total();
    if train_set.len() < batch {
        return Err(Error::Config(format!("batch of {batch} samples exceeds the {} training samples", train_set.len())));
    }
    let input = (train_set.channels, train_set.height, train_set.width);
    let mut model = Model::from_config(cfg, input, train_set.classes)?;
    let mut opt = OptimizerState::new(&model.params);
    let mut first_epoch = 0;
    match start {
        Start::Fresh => {
            if let Some(path) = &cfg.hard_init_from {
                let snap = Snapshot::load(path)?;
                let choices = hard_choices_from(&snap, &model)?;
                model.hard_init(&choices)?;
            }
        }
        Start::Resume(snap) => first_epoch = restore(&mut model, &mut opt, snap)?,
        Start::HardFinetune(snap) => {
            if !model.has_switchable() {
                return Err(Error::Usage("hard finetuning needs switchable normalization layers".into()));
            }
            first_epoch = restore(&mut model, &mut opt, snap)?;
            model.harden_all()?;
        }
    }
    let schedule = LrSchedule::from_config(cfg);
    let opt_cfg = OptimizerConfig::from_config(cfg);
    let mut metrics = Vec::new();
    let mut trajectory = RatioTrajectory::new();
    let mut snapshots = Vec::new();
    let steps = train_set.len() / batch;
    for epoch in first_epoch..cfg.epochs {
        let lr = lr_at(&schedule, epoch);
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let (mut loss_sum, mut correct) = (0.0, 0);
        for step in 0..steps {
            let (x, labels) = train_set.batch(&order[step * batch..(step + 1) * batch]);
            let res = model.forward_backward(&x, &labels, shard)?;
            if !res.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {} step {step}", epoch + 1)));
            }
            optimizer_step(&opt_cfg, &mut model.params, &mut opt, lr)?;
            model.update_moving_stats(&res.tape)?;
            loss_sum += res.loss;
            correct += res.correct;
            observer.on_step(&StepInfo { epoch: epoch + 1, step, loss: res.loss, model: &model });
        }
        let done = epoch + 1;
        record_ratios(&model, done, &mut trajectory)?;
        let evaluate_now = done == cfg.epochs || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let (test_loss, test_acc) = match (&test_set, evaluate_now) {
            (Some(test), true) => {
                estimate_bn(&mut model, &train_set, cfg, shard, epoch)?;
                let (l, a) = evaluate(&model, test)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let m = EpochMetrics {
            epoch: done,
            lr,
            train_loss: loss_sum / steps as f64,
            train_acc: correct as f64 / (steps * batch) as f64,
            test_loss,
            test_acc,
        };
        observer.on_epoch(&m);
        metrics.push(m);
        if cfg.snapshot_epochs.contains(&done) {
            snapshots.push((done, snapshot_of(&model, &opt, done, cfg)?));
        }
    }
    let snapshot = snapshot_of(&model, &opt, cfg.epochs.max(first_epoch), cfg)?;
    Ok(TrainOutput { metrics, trajectory, snapshot, snapshots, model })
}

#[cfg(test)]
mod tests;
