//! Dual-network co-teaching with per-subject small-loss selection.
//!
//! Every mini-batch holds exactly `b` trials from each of the `N` source
//! subjects. Each network sums its per-sample losses per subject and keeps
//! the `ceil(R(T) * N)` subjects with the smallest sums; the *peer* network
//! is then updated on those subjects' trials. Both selections are taken
//! from the pre-update parameters. `R(T)` decays linearly from 1 to `1 - tau`
//! over the first `T_k` epochs and stays there.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::nn::{build_mini_resnet1d, per_sample_losses, Model, ModelConfig};
use crate::optim::{CosineSchedule, Optimizer, OptimizerKind};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Seed stream separating network g's initialization from network f's.
const STREAM_PEER_INIT: u64 = 0x9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoteachConfig {
    pub tau: f64,
    pub t_k: usize,
    pub t_max: usize,
    /// Iterations per epoch; `None` means one pass over the smallest subject.
    pub m_max: Option<usize>,
    pub batch_per_subject: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub optimizer: OptimizerKind,
    /// Seeds the mini-batch sampler.
    pub seed: u64,
}

impl Default for CoteachConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            t_k: 10,
            t_max: 30,
            m_max: None,
            batch_per_subject: 8,
            lr: 0.01,
            min_lr: 0.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl CoteachConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("coteach.tau", format!("must be in [0, 1), got {}", self.tau)));
        }
        if self.t_k == 0 {
            return Err(Error::config("coteach.t_k", "must be positive"));
        }
        if self.t_max == 0 {
            return Err(Error::config("coteach.t_max", "must be positive"));
        }
        if self.m_max == Some(0) {
            return Err(Error::config("coteach.m_max", "must be positive when set"));
        }
        if self.batch_per_subject == 0 {
            return Err(Error::config("coteach.batch_per_subject", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("coteach.lr", "must be finite and > 0"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("coteach.min_lr", "must be in [0, lr]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.lr, self.min_lr, self.t_max)
    }
}

/// `R(T) = 1 - min(T / T_k * tau, tau)`.
pub fn remember_rate(epoch: usize, t_k: usize, tau: f64) -> f64 {
    1.0 - (epoch as f64 / t_k as f64 * tau).min(tau)
}

/// Number of subjects kept at rate `r`: the smallest count with `count >= r * n`.
pub fn selection_count(r: f64, n: usize) -> usize {
    // tolerance absorbs products like 0.28 * 25 = 7.000000000000001
    let k = (r * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Positions of the `ceil(r * N)` smallest sums, ties to the lower
/// position, returned ascending.
pub fn select_small_loss_subjects(sums: &[f64], r: f64) -> Result<Vec<usize>> {
    if sums.is_empty() {
        return Err(Error::Validation("no subject loss sums to select from".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Validation(format!("remember rate {r} outside (0, 1]")));
    }
    if let Some(i) = sums.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("loss sum of subject position {i}")));
    }
    let mut order: Vec<usize> = (0..sums.len()).collect();
    order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
    let mut kept = order[..selection_count(r, sums.len())].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// `N * b` trials: rows `i*b .. (i+1)*b` belong to `subject_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub subject_ids: Vec<u32>,
    /// Trial index within the owning subject's dataset, per row.
    pub sample_indices: Vec<usize>,
    pub per_subject: usize,
}

impl SubjectBatch {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Trials and labels of the subjects at `positions`, in position order.
    pub fn subset(&self, positions: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let rows: Vec<usize> = positions
            .iter()
            .flat_map(|&p| p * self.per_subject..(p + 1) * self.per_subject)
            .collect();
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok((self.inputs.select_rows(&rows)?, labels))
    }
}

/// Positions of `train` sorted by subject id.
fn subject_order(train: &[SubjectDataset]) -> Result<Vec<usize>> {
    let first = train
        .first()
        .ok_or_else(|| Error::Validation("empty training set".into()))?;
    for ds in train {
        if ds.trials.shape()[1..] != first.trials.shape()[1..] {
            return Err(Error::Shape(format!(
                "subject {} trials {:?} do not match subject {} {:?}",
                ds.subject_id,
                ds.trials.shape(),
                first.subject_id,
                first.trials.shape()
            )));
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| train[i].subject_id);
    if order
        .windows(2)
        .any(|w| train[w[0]].subject_id == train[w[1]].subject_id)
    {
        return Err(Error::Validation("duplicate subject id in training set".into()));
    }
    Ok(order)
}

fn assemble(train: &[SubjectDataset], order: &[usize], picks: &[Vec<usize>], b: usize) -> Result<SubjectBatch> {
    let mut parts = Vec::with_capacity(order.len());
    let mut labels = Vec::with_capacity(order.len() * b);
    let mut sample_indices = Vec::with_capacity(order.len() * b);
    for (&pos, rows) in order.iter().zip(picks) {
        let ds = &train[pos];
        parts.push(ds.trials.select_rows(rows)?);
        labels.extend(rows.iter().map(|&r| ds.labels[r]));
        sample_indices.extend_from_slice(rows);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(SubjectBatch {
        inputs: Tensor::concat_rows(&refs)?,
        labels,
        subject_ids: order.iter().map(|&p| train[p].subject_id).collect(),
        sample_indices,
        per_subject: b,
    })
}

/// One-off subject-stratified batch: `b` distinct trials from every subject.
pub fn stratified_minibatch<R: Rng>(train: &[SubjectDataset], b: usize, rng: &mut R) -> Result<SubjectBatch> {
    if b == 0 {
        return Err(Error::Validation("subject-wise batch size must be positive".into()));
    }
    let order = subject_order(train)?;
    let picks = order
        .iter()
        .map(|&p| {
            let n = train[p].n_trials();
            if n < b {
                return Err(Error::Validation(format!(
                    "subject {} has {n} trials, fewer than b={b}",
                    train[p].subject_id
                )));
            }
            Ok(index::sample(rng, n, b).into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(train, &order, &picks, b)
}

/// Epoch-aware sampler: each subject is drawn without replacement from a
/// fresh permutation, refilled cyclically when exhausted.
#[derive(Clone, Debug)]
pub struct SubjectBatcher {
    order: Vec<usize>,
    queues: Vec<(Vec<usize>, usize)>,
    b: usize,
    rng: ChaCha8Rng,
}

impl SubjectBatcher {
    pub fn new(train: &[SubjectDataset], b: usize, seed: u64) -> Result<Self> {
        if b == 0 {
            return Err(Error::Validation("subject-wise batch size must be positive".into()));
        }
        let order = subject_order(train)?;
        let queues = order.iter().map(|&p| ((0..train[p].n_trials()).collect(), usize::MAX)).collect();
        Ok(Self {
            order,
            queues,
            b,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Reshuffles every subject's queue.
    pub fn start_epoch(&mut self) {
        for (perm, cursor) in &mut self.queues {
            perm.shuffle(&mut self.rng);
            *cursor = 0;
        }
    }

    pub fn next_batch(&mut self, train: &[SubjectDataset]) -> Result<SubjectBatch> {
        if train.len() != self.order.len() {
            return Err(Error::Validation("training set changed under the batcher".into()));
        }
        let mut picks = Vec::with_capacity(self.order.len());
        for (perm, cursor) in &mut self.queues {
            let mut rows = Vec::with_capacity(self.b);
            for _ in 0..self.b {
                if *cursor >= perm.len() {
                    perm.shuffle(&mut self.rng);
                    *cursor = 0;
                }
                rows.push(perm[*cursor]);
                *cursor += 1;
            }
            picks.push(rows);
        }
        assemble(train, &self.order, &picks, self.b)
    }
}

/// Per-subject sums of per-sample cross-entropy, in batch subject order.
pub fn per_subject_loss_sums(model: &Model, batch: &SubjectBatch) -> Result<Vec<f64>> {
    let losses = per_sample_losses(model, &batch.inputs, &batch.labels)?;
    Ok(losses
        .data()
        .chunks(batch.per_subject)
        .map(|c| c.iter().sum())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetTag {
    F,
    G,
}

impl std::fmt::Display for NetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetTag::F => "f",
            NetTag::G => "g",
        })
    }
}

/// One network's small-loss selection for one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub iter: usize,
    pub net: NetTag,
    pub loss_sums: Vec<f64>,
    /// Selected subject ids, ascending.
    pub selected: Vec<u32>,
    #[serde(rename = "R")]
    pub remember_rate: f64,
    /// Subject id for each entry of `loss_sums`.
    pub subjects: Vec<u32>,
    pub batch_size: usize,
}

pub fn write_selection_log<W: Write>(records: &[SelectionRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_selection_log(text: &str) -> Result<Vec<SelectionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Two peer networks with their optimizers and the loop position.
#[derive(Clone, Debug)]
pub struct CoteachState {
    pub model_f: Model,
    pub model_g: Model,
    pub opt_f: Optimizer,
    pub opt_g: Optimizer,
    pub epoch: usize,
    pub iteration: usize,
}

impl CoteachState {
    pub fn new(model_f: Model, model_g: Model, optimizer: OptimizerKind) -> Result<Self> {
        if model_f.param_shapes() != model_g.param_shapes() {
            return Err(Error::Validation(
                "peer networks must share one architecture".into(),
            ));
        }
        Ok(Self {
            opt_f: Optimizer::new(optimizer, model_f.params()),
            opt_g: Optimizer::new(optimizer, model_g.params()),
            model_f,
            model_g,
            epoch: 1,
            iteration: 0,
        })
    }

    /// Networks f and g from `config`; g's seed is derived from f's.
    pub fn from_config(config: &ModelConfig, optimizer: OptimizerKind) -> Result<Self> {
        let f = build_mini_resnet1d(config)?;
        let g = build_mini_resnet1d(&ModelConfig {
            seed: peer_seed(config.seed),
            ..config.clone()
        })?;
        Self::new(f, g, optimizer)
    }
}

pub fn peer_seed(seed: u64) -> u64 {
    derive_seed(seed, STREAM_PEER_INIT)
}

/// Mean-loss gradient step of `model` on the batch subjects at `positions`.
fn update_on(model: &mut Model, opt: &mut Optimizer, batch: &SubjectBatch, positions: &[usize], lr: f64) -> Result<f64> {
    let (x, y) = batch.subset(positions)?;
    let (loss, grads) = model.mean_loss_and_grads(&x, &y)?;
    opt.step(model.params_mut(), &grads, lr)?;
    Ok(loss)
}

/// Algorithm steps 4-9 for one mini-batch: both selections from the
/// pre-step networks, then f learns from g's subjects and g from f's.
pub fn cross_update_step(state: &mut CoteachState, batch: &SubjectBatch, lr: f64, r: f64) -> Result<[SelectionRecord; 2]> {
    let sums_f = per_subject_loss_sums(&state.model_f, batch)?;
    let sums_g = per_subject_loss_sums(&state.model_g, batch)?;
    let sel_f = select_small_loss_subjects(&sums_f, r)?;
    let sel_g = select_small_loss_subjects(&sums_g, r)?;

    let ctx = |net: &str| format!("epoch {} iter {} net {net}", state.epoch, state.iteration + 1);
    update_on(&mut state.model_f, &mut state.opt_f, batch, &sel_g, lr).map_err(|e| e.context(ctx("f")))?;
    update_on(&mut state.model_g, &mut state.opt_g, batch, &sel_f, lr).map_err(|e| e.context(ctx("g")))?;
    state.iteration += 1;

    let record = |net, sums: Vec<f64>, sel: &[usize]| SelectionRecord {
        epoch: state.epoch,
        iter: state.iteration,
        net,
        loss_sums: sums,
        selected: sel.iter().map(|&p| batch.subject_ids[p]).collect(),
        remember_rate: r,
        subjects: batch.subject_ids.clone(),
        batch_size: batch.len(),
    };
    Ok([record(NetTag::F, sums_f, &sel_f), record(NetTag::G, sums_g, &sel_g)])
}

/// Plain single-network step on the whole batch; shares the update path
/// with [`cross_update_step`] so `R = 1` reduces to it exactly.
pub fn plain_update_step(model: &mut Model, opt: &mut Optimizer, batch: &SubjectBatch, lr: f64) -> Result<f64> {
    let all: Vec<usize> = (0..batch.n_subjects()).collect();
    update_on(model, opt, batch, &all, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Coteach,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Coteach => "coteach",
            Method::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coteach" => Ok(Method::Coteach),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::config("method", format!("expected coteach|baseline, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub remember_rate: f64,
    pub lr: f64,
    pub val_balanced_accuracy_f: f64,
    pub val_balanced_accuracy_g: Option<f64>,
}

/// Best validation model of a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub net: NetTag,
    pub epoch: usize,
    pub val_balanced_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLogs {
    pub method: Method,
    pub epochs: Vec<EpochLog>,
    pub selections: Vec<SelectionRecord>,
    pub m_max: usize,
}

/// Snapshot handed to an observer after every iteration.
pub struct StepView<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub model_f: &'a Model,
    pub model_g: Option<&'a Model>,
}

/// Balanced accuracy of `model` on the pooled trials of `sets`.
pub fn pooled_balanced_accuracy(model: &Model, sets: &[SubjectDataset]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.n_classes());
    for ds in sets {
        let preds = model.predict(&ds.trials)?;
        cm.record_all(&ds.labels, &preds)?;
    }
    cm.balanced_accuracy()
}

fn default_m_max(train: &[SubjectDataset], b: usize) -> usize {
    let min_trials = train.iter().map(SubjectDataset::n_trials).min().unwrap_or(0);
    (min_trials / b).max(1)
}

fn check_inputs(train: &[SubjectDataset], val: &[SubjectDataset], model_config: &ModelConfig, cfg: &CoteachConfig) -> Result<()> {
    cfg.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    Ok(())
}

struct Best {
    checkpoint: Option<Checkpoint>,
}

impl Best {
    fn offer(&mut self, model: &Model, net: NetTag, epoch: usize, ba: f64) {
        if self.checkpoint.as_ref().is_none_or(|c| ba > c.val_balanced_accuracy) {
            self.checkpoint = Some(Checkpoint {
                model: model.clone(),
                net,
                epoch,
                val_balanced_accuracy: ba,
            });
        }
    }
}

/// Full co-teaching run: `t_max` epochs of `m_max` cross-updates, with
/// the checkpoint of highest validation balanced accuracy over both
/// networks and all epochs.
pub fn train_coteaching(train: &[SubjectDataset], val: &[SubjectDataset], model_config: &ModelConfig, cfg: &CoteachConfig) -> Result<(Checkpoint, RunLogs)> {
    train_coteaching_observed(train, val, model_config, cfg, &mut |_| {})
}

pub fn train_coteaching_observed(
    train: &[SubjectDataset],
    val: &[SubjectDataset],
    model_config: &ModelConfig,
    cfg: &CoteachConfig,
    observer: &mut dyn FnMut(&StepView),
) -> Result<(Checkpoint, RunLogs)> {
    check_inputs(train, val, model_config, cfg)?;
    let state = CoteachState::from_config(model_config, cfg.optimizer)?;
    run_coteaching(state, train, val, cfg, observer)
}

/// Drives an existing [`CoteachState`] through the configured epochs.
pub fn run_coteaching(
    mut state: CoteachState,
    train: &[SubjectDataset],
    val: &[SubjectDataset],
    cfg: &CoteachConfig,
    observer: &mut dyn FnMut(&StepView),
) -> Result<(Checkpoint, RunLogs)> {
    cfg.validate()?;
    let m_max = cfg.m_max.unwrap_or_else(|| default_m_max(train, cfg.batch_per_subject));
    let mut batcher = SubjectBatcher::new(train, cfg.batch_per_subject, cfg.seed)?;
    let schedule = cfg.schedule();
    let mut logs = RunLogs {
        method: Method::Coteach,
        m_max,
        ..Default::default()
    };
    let mut best = Best { checkpoint: None };

    for epoch in 1..=cfg.t_max {
        let r = remember_rate(epoch, cfg.t_k, cfg.tau);
        let lr = schedule.lr(epoch - 1)?;
        state.epoch = epoch;
        state.iteration = 0;
        batcher.start_epoch();
        for _ in 0..m_max {
            let batch = batcher.next_batch(train)?;
            let records = cross_update_step(&mut state, &batch, lr, r)?;
            logs.selections.extend(records);
            observer(&StepView {
                epoch,
                iteration: state.iteration,
                model_f: &state.model_f,
                model_g: Some(&state.model_g),
            });
        }
        let ba_f = pooled_balanced_accuracy(&state.model_f, val)?;
        let ba_g = pooled_balanced_accuracy(&state.model_g, val)?;
        best.offer(&state.model_f, NetTag::F, epoch, ba_f);
        best.offer(&state.model_g, NetTag::G, epoch, ba_g);
        log::debug!("coteach epoch {epoch}: R={r:.3} lr={lr:.5} val_ba f={ba_f:.4} g={ba_g:.4}");
        logs.epochs.push(EpochLog {
            epoch,
            remember_rate: r,
            lr,
            val_balanced_accuracy_f: ba_f,
            val_balanced_accuracy_g: Some(ba_g),
        });
    }
    let checkpoint = best
        .checkpoint
        .ok_or_else(|| Error::State("training produced no checkpoint".into()))?;
    Ok((checkpoint, logs))
}

/// Single-network training with the same batching, schedule and model
/// selection as co-teaching, minus selection and peer.
pub fn train_plain_observed(
    train: &[SubjectDataset],
    val: &[SubjectDataset],
    model_config: &ModelConfig,
    cfg: &CoteachConfig,
    observer: &mut dyn FnMut(&StepView),
) -> Result<(Checkpoint, RunLogs)> {
    check_inputs(train, val, model_config, cfg)?;
    let mut model = build_mini_resnet1d(model_config)?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let m_max = cfg.m_max.unwrap_or_else(|| default_m_max(train, cfg.batch_per_subject));
    let mut batcher = SubjectBatcher::new(train, cfg.batch_per_subject, cfg.seed)?;
    let schedule = cfg.schedule();
    let mut logs = RunLogs {
        method: Method::Baseline,
        m_max,
        ..Default::default()
    };
    let mut best = Best { checkpoint: None };

    for epoch in 1..=cfg.t_max {
        let lr = schedule.lr(epoch - 1)?;
        batcher.start_epoch();
        for iteration in 1..=m_max {
            let batch = batcher.next_batch(train)?;
            plain_update_step(&mut model, &mut opt, &batch, lr)
                .map_err(|e| e.context(format!("epoch {epoch} iter {iteration}")))?;
            observer(&StepView {
                epoch,
                iteration,
                model_f: &model,
                model_g: None,
            });
        }
        let ba = pooled_balanced_accuracy(&model, val)?;
        best.offer(&model, NetTag::F, epoch, ba);
        log::debug!("baseline epoch {epoch}: lr={lr:.5} val_ba={ba:.4}");
        logs.epochs.push(EpochLog {
            epoch,
            remember_rate: 1.0,
            lr,
            val_balanced_accuracy_f: ba,
            val_balanced_accuracy_g: None,
        });
    }
    let checkpoint = best
        .checkpoint
        .ok_or_else(|| Error::State("training produced no checkpoint".into()))?;
    Ok((checkpoint, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, GeneratorConfig};

    #[test]
    fn remember_rate_points() {
        assert_eq!(remember_rate(0, 10, 0.2), 1.0);
        assert!((remember_rate(10, 10, 0.2) - 0.8).abs() < 1e-12);
        assert!((remember_rate(5, 10, 0.2) - 0.9).abs() < 1e-12);
        assert!((remember_rate(40, 10, 0.2) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_small_loss_subjects(&[1.0, 3.0, 0.5, 2.0], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(select_small_loss_subjects(&[4.0, 3.0, 2.0], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_small_loss_subjects(&[1.0; 4], 0.5).unwrap(), vec![0, 1]);
        assert!(select_small_loss_subjects(&[], 0.5).is_err());
        assert!(select_small_loss_subjects(&[1.0], 0.0).is_err());
        assert_eq!(selection_count(remember_rate(10, 10, 0.2), 10), 8);
        assert_eq!(selection_count(0.98, 50), 49);
        assert_eq!(selection_count(0.98, 14), 14);
    }

    fn toy_train(n: usize) -> Vec<SubjectDataset> {
        generate_cohort(&GeneratorConfig {
            n_subjects: n,
            trials_per_class: 10,
            n_electrodes: 2,
            n_timesteps: 16,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_layout() {
        let train = toy_train(14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = stratified_minibatch(&train, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 112);
        assert_eq!(batch.inputs.shape(), &[112, 2, 16]);
        assert_eq!(batch.subject_ids, (0..14).collect::<Vec<u32>>());
        let one = stratified_minibatch(&train[..1], 1, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(stratified_minibatch(&[], 1, &mut rng).is_err());
    }

    #[test]
    fn batcher_exhausts_before_repeating() {
        let train = toy_train(3);
        let mut batcher = SubjectBatcher::new(&train, 4, 1).unwrap();
        batcher.start_epoch();
        let mut seen: Vec<Vec<usize>> = vec![Vec::new(); 3];
        for _ in 0..5 {
            let batch = batcher.next_batch(&train).unwrap();
            for (s, chunk) in batch.sample_indices.chunks(4).enumerate() {
                seen[s].extend_from_slice(chunk);
            }
        }
        for s in &mut seen {
            s.sort_unstable();
            assert_eq!(*s, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn subjects_sorted_by_id() {
        let mut train = toy_train(3);
        train.reverse();
        let batch = SubjectBatcher::new(&train, 2, 0).unwrap().next_batch(&train).unwrap();
        assert_eq!(batch.subject_ids, vec![0, 1, 2]);
    }

    #[test]
    fn config_validation_names_fields() {
        let err = CoteachConfig { tau: 1.0, ..Default::default() }.validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "coteach.tau"));
        assert!(CoteachConfig { batch_per_subject: 0, ..Default::default() }.validate().is_err());
        assert!(CoteachConfig::default().validate().is_ok());
    }

    #[test]
    fn selection_log_json_shape() {
        let rec = SelectionRecord {
            epoch: 2,
            iter: 3,
            net: NetTag::G,
            loss_sums: vec![1.5, 0.25],
            selected: vec![4],
            remember_rate: 0.5,
            subjects: vec![4, 9],
            batch_size: 16,
        };
        let mut buf = Vec::new();
        write_selection_log(std::slice::from_ref(&rec), &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with(r#"{"epoch":2,"iter":3,"net":"g","loss_sums":[1.5,0.25],"selected":[4],"R":0.5"#));
        assert_eq!(read_selection_log(&line).unwrap(), vec![rec]);
    }
}
