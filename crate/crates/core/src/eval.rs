//! Balanced accuracy, the plain-training baseline, leave-one-subject-out
//! runs and selection-frequency analysis.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coteach::{
    self, Checkpoint, CoteachConfig, Method, NetTag, RunLogs, SelectionRecord, StepView,
};
use crate::data::{augment_rest_class, loso_split, train_val_split, GeneratorConfig, SubjectDataset};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::seed::derive_seed;

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::Shape(format!(
                "confusion matrix for {n_classes} classes needs {} counts, got {}",
                n_classes * n_classes,
                counts.len()
            )));
        }
        Ok(Self { n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n_classes..(truth + 1) * self.n_classes]
            .iter()
            .sum()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n_classes || pred >= self.n_classes {
            return Err(Error::Validation(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.n_classes
            )));
        }
        self.counts[truth * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn record_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Validation("truth/prediction length mismatch".into()));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.record(t, p))
    }

    /// Mean over classes of `diagonal / row sum`.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        if self.n_classes == 0 {
            return Err(Error::Validation("confusion matrix has no classes".into()));
        }
        let mut total = 0.0;
        for c in 0..self.n_classes {
            let n = self.row_sum(c);
            if n == 0 {
                return Err(Error::Validation(format!(
                    "class {c} has no samples; balanced accuracy is undefined"
                )));
            }
            total += self.get(c, c) as f64 / n as f64;
        }
        Ok(total / self.n_classes as f64)
    }

    pub fn accuracy(&self) -> f64 {
        let all: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.n_classes).map(|c| self.get(c, c)).sum();
        hit as f64 / all.max(1) as f64
    }
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.balanced_accuracy()
}

/// Single network trained with cross-entropy on the same stratified
/// batches, schedule and checkpoint rule as co-teaching.
pub fn train_baseline(train: &[SubjectDataset], val: &[SubjectDataset], model_config: &ModelConfig, opt_config: &CoteachConfig) -> Result<(Checkpoint, RunLogs)> {
    coteach::train_plain_observed(train, val, model_config, opt_config, &mut |_| {})
}

pub fn train_baseline_observed(
    train: &[SubjectDataset],
    val: &[SubjectDataset],
    model_config: &ModelConfig,
    opt_config: &CoteachConfig,
    observer: &mut dyn FnMut(&StepView),
) -> Result<(Checkpoint, RunLogs)> {
    coteach::train_plain_observed(train, val, model_config, opt_config, observer)
}

/// Inclusive epoch range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochWindow {
    pub start: usize,
    pub end: usize,
}

impl EpochWindow {
    /// The last quarter of `t_max` epochs (rounded up, at least one epoch).
    pub fn final_quarter(t_max: usize) -> Self {
        let width = t_max.div_ceil(4).max(1);
        Self {
            start: t_max.saturating_sub(width) + 1,
            end: t_max,
        }
    }

    fn contains(&self, epoch: usize) -> bool {
        (self.start..=self.end).contains(&epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectFrequency {
    pub subject_id: u32,
    pub f: f64,
    pub g: f64,
    /// Mean of `f` and `g`.
    pub pooled: f64,
}

/// Fraction of iterations in `window` in which each subject was selected,
/// per network and pooled.
pub fn selection_frequency_report(logs: &[SelectionRecord], window: EpochWindow) -> Result<Vec<SubjectFrequency>> {
    if logs.is_empty() {
        return Err(Error::Validation("selection log is empty".into()));
    }
    let last = logs.iter().map(|r| r.epoch).max().unwrap_or(0);
    let first = logs.iter().map(|r| r.epoch).min().unwrap_or(0);
    if window.start == 0 || window.start > window.end || window.end > last || window.end < first {
        return Err(Error::Validation(format!(
            "epoch window {}..={} outside logged epochs {first}..={last}",
            window.start, window.end
        )));
    }
    let mut iters = [0usize; 2];
    let mut hits: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
    for rec in logs.iter().filter(|r| window.contains(r.epoch)) {
        let k = match rec.net {
            NetTag::F => 0,
            NetTag::G => 1,
        };
        iters[k] += 1;
        for &s in &rec.subjects {
            hits.entry(s).or_default();
        }
        for &s in &rec.selected {
            hits.entry(s).or_default()[k] += 1;
        }
    }
    let freq = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(hits
        .into_iter()
        .map(|(subject_id, [nf, ng])| {
            let f = freq(nf, iters[0]);
            let g = freq(ng, iters[1]);
            SubjectFrequency {
                subject_id,
                f,
                g,
                pooled: (f + g) / 2.0,
            }
        })
        .collect())
}

/// Architecture knobs for LOSO folds; data dimensions come from the cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width_base: usize,
    pub n_blocks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width_base: 4,
            n_blocks: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoConfig {
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub coteach: CoteachConfig,
    pub split_ratio: f64,
    pub master_seed: u64,
    pub parallel_folds: usize,
}

impl LosoConfig {
    pub fn new(generator: GeneratorConfig, model: ModelSection, coteach: CoteachConfig, master_seed: u64) -> Self {
        Self {
            generator,
            model,
            coteach,
            split_ratio: 0.9,
            master_seed,
            parallel_folds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub target_subject: u32,
    pub method: Method,
    pub balanced_accuracy: f64,
    pub best_epoch: usize,
    pub best_net: NetTag,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub master_seed: u64,
    /// `(target subject, fold seed)`
    pub fold_seeds: Vec<(u32, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Method,
    pub folds: Vec<FoldRecord>,
    pub mean: f64,
    pub std: f64,
    pub selection_window: Option<EpochWindow>,
    /// Per source subject, pooled frequency averaged over the folds it trained in.
    pub selection_frequencies: Vec<SubjectFrequency>,
    pub config: LosoConfig,
    pub seeds: SeedManifest,
}

pub struct FoldOutput {
    pub record: FoldRecord,
    pub checkpoint: Checkpoint,
    pub logs: RunLogs,
}

pub struct LosoRun {
    pub summary: RunSummary,
    pub folds: Vec<FoldOutput>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn fold_seed(master_seed: u64, target_subject: u32) -> u64 {
    derive_seed(master_seed, target_subject as u64)
}

pub fn run_id(method: Method, master_seed: u64) -> String {
    format!("{method}-{master_seed:016x}")
}

/// Trains and evaluates the fold holding out `target`.
pub fn run_fold(cohort: &[SubjectDataset], target: u32, method: Method, cfg: &LosoConfig) -> Result<FoldOutput> {
    let seed = fold_seed(cfg.master_seed, target);
    let (source, test) = loso_split(cohort, target)?;
    let source = source
        .iter()
        .map(|d| augment_rest_class(d, &cfg.generator))
        .collect::<Result<Vec<_>>>()?;
    let test = augment_rest_class(&test, &cfg.generator)?;
    let (train, val) = train_val_split(&source, cfg.split_ratio, derive_seed(seed, 1))?;

    let model_config = ModelConfig {
        n_electrodes: test.n_electrodes(),
        n_timesteps: test.n_timesteps(),
        n_classes: cfg.generator.n_imagery_classes + 1,
        width_base: cfg.model.width_base,
        n_blocks: cfg.model.n_blocks,
        seed: derive_seed(seed, 2),
    };
    let coteach_cfg = CoteachConfig {
        seed: derive_seed(seed, 3),
        ..cfg.coteach.clone()
    };
    let (checkpoint, logs) = match method {
        Method::Coteach => coteach::train_coteaching(&train, &val, &model_config, &coteach_cfg)?,
        Method::Baseline => train_baseline(&train, &val, &model_config, &coteach_cfg)?,
    };
    let ba = coteach::pooled_balanced_accuracy(&checkpoint.model, std::slice::from_ref(&test))?;
    log::info!(
        "{method} fold target={target}: balanced accuracy {ba:.4} (best {} epoch {})",
        checkpoint.net,
        checkpoint.epoch
    );
    Ok(FoldOutput {
        record: FoldRecord {
            target_subject: target,
            method,
            balanced_accuracy: ba,
            best_epoch: checkpoint.epoch,
            best_net: checkpoint.net,
            seed,
        },
        checkpoint,
        logs,
    })
}

/// Leave-one-subject-out over every subject in `cohort`.
pub fn run_loso(cohort: &[SubjectDataset], method: Method, cfg: &LosoConfig) -> Result<LosoRun> {
    if cohort.len() < 2 {
        return Err(Error::Validation(
            "leave-one-subject-out needs at least two subjects".into(),
        ));
    }
    if !(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0) {
        return Err(Error::config("split_ratio", "must lie in (0, 1)"));
    }
    cfg.generator.validate()?;
    cfg.coteach.validate()?;
    let targets: Vec<u32> = cohort.iter().map(|d| d.subject_id).collect();
    let fold = |&t: &u32| run_fold(cohort, t, method, cfg).map_err(|e| e.context(format!("fold target={t}")));
    let folds: Vec<FoldOutput> = if cfg.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_folds)
            .build()
            .map_err(|e| Error::State(format!("fold worker pool: {e}")))?;
        pool.install(|| targets.par_iter().map(fold).collect::<Result<Vec<_>>>())?
    } else {
        targets.iter().map(fold).collect::<Result<Vec<_>>>()?
    };
    let summary = summarize(method, cfg, &folds)?;
    Ok(LosoRun { summary, folds })
}

fn summarize(method: Method, cfg: &LosoConfig, folds: &[FoldOutput]) -> Result<RunSummary> {
    let records: Vec<FoldRecord> = folds.iter().map(|f| f.record.clone()).collect();
    let accs: Vec<f64> = records.iter().map(|r| r.balanced_accuracy).collect();
    let (mean, std) = mean_std(&accs);

    let (window, selection_frequencies) = if method == Method::Coteach {
        let window = EpochWindow::final_quarter(cfg.coteach.t_max);
        let mut acc: BTreeMap<u32, (SubjectFrequency, usize)> = BTreeMap::new();
        for f in folds {
            for row in selection_frequency_report(&f.logs.selections, window)? {
                let e = acc.entry(row.subject_id).or_insert((
                    SubjectFrequency {
                        subject_id: row.subject_id,
                        f: 0.0,
                        g: 0.0,
                        pooled: 0.0,
                    },
                    0,
                ));
                e.0.f += row.f;
                e.0.g += row.g;
                e.0.pooled += row.pooled;
                e.1 += 1;
            }
        }
        let rows = acc
            .into_values()
            .map(|(mut s, n)| {
                let n = n as f64;
                s.f /= n;
                s.g /= n;
                s.pooled /= n;
                s
            })
            .collect();
        (Some(window), rows)
    } else {
        (None, Vec::new())
    };

    Ok(RunSummary {
        run_id: run_id(method, cfg.master_seed),
        method,
        seeds: SeedManifest {
            master_seed: cfg.master_seed,
            fold_seeds: records.iter().map(|r| (r.target_subject, r.seed)).collect(),
        },
        folds: records,
        mean,
        std,
        selection_window: window,
        selection_frequencies,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: Method,
    pub target_subject: u32,
    pub balanced_accuracy: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

pub fn write_results_csv<W: Write>(summary: &RunSummary, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for f in &summary.folds {
        out.serialize(ResultRow {
            run_id: summary.run_id.clone(),
            method: f.method,
            target_subject: f.target_subject,
            balanced_accuracy: f.balanced_accuracy,
            best_epoch: f.best_epoch,
            seed: f.seed,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
