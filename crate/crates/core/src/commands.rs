//! `generate`, `run` and `report` as library calls; the `ctss` binary is a
//! thin argument parser over these.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coteach::{write_selection_log, CoteachConfig, Method};
use crate::data::{generate_cohort, load_raw, save_raw, GeneratorConfig, SubjectDataset};
use crate::error::{Error, Result};
use crate::eval::{mean_std, read_results_csv, run_loso, write_results_csv, LosoConfig, ModelSection, RunSummary};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SELECTION_FILE: &str = "selection.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Raw cohort to load instead of generating one. Relative paths resolve
    /// against the config file's directory.
    pub cohort_path: Option<PathBuf>,
    pub split_ratio: f64,
    pub parallel_folds: usize,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub coteach: CoteachConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Coteach,
            output_dir: PathBuf::from("runs/default"),
            master_seed: 0,
            cohort_path: None,
            split_ratio: 0.9,
            parallel_folds: 1,
            generator: GeneratorConfig::default(),
            model: ModelSection::default(),
            coteach: CoteachConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.coteach.validate()?;
        if self.model.width_base == 0 {
            return Err(Error::config("model.width_base", "must be positive"));
        }
        if !(1..=4).contains(&self.model.n_blocks) {
            return Err(Error::config("model.n_blocks", "must be in 1..=4"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("split_ratio", "must lie in (0, 1)"));
        }
        if self.parallel_folds == 0 {
            return Err(Error::config("parallel_folds", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.to_string())
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn loso_config(&self) -> LosoConfig {
        LosoConfig {
            generator: self.generator.clone(),
            model: self.model.clone(),
            coteach: self.coteach.clone(),
            split_ratio: self.split_ratio,
            master_seed: self.master_seed,
            parallel_folds: self.parallel_folds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub method: Method,
    pub master_seed: u64,
    pub cohort_source: String,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

/// Reads a TOML experiment config, or the `config` echo of a run manifest
/// when `path` ends in `.json`. Validation runs before anything else.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<Manifest>(&text)
            .map_err(|e| Error::config("manifest", e.to_string()))?
            .config
    } else {
        ExperimentConfig::from_toml(&text)?
    };
    if let (Some(rel), Some(dir)) = (&cfg.cohort_path, path.parent()) {
        if rel.is_relative() {
            cfg.cohort_path = Some(dir.join(rel));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Generates the configured cohort and writes it to `out`.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<Vec<SubjectDataset>> {
    config.validate()?;
    let cohort = generate_cohort(&config.generator)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_raw(&cohort, out)?;
    log::info!("wrote {} subjects to {}", cohort.len(), out.display());
    Ok(cohort)
}

/// Runs leave-one-subject-out for the configured method and writes
/// `results.csv`, `summary.json`, `manifest.json` and per-fold artifacts
/// under `config.output_dir`.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let started = Instant::now();
    let (cohort, source) = match &config.cohort_path {
        Some(p) => {
            let cohort = load_raw(p)?;
            check_cohort(&cohort, &config.generator)?;
            (cohort, p.display().to_string())
        }
        None => (generate_cohort(&config.generator)?, "generated".to_string()),
    };
    let run = run_loso(&cohort, config.method, &config.loso_config())?;

    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    write_results_csv(&run.summary, BufWriter::new(fs::File::create(out.join(RESULTS_FILE))?))?;
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&run.summary)?)?;
    for fold in &run.folds {
        let dir = out.join("folds").join(format!("subject_{:03}", fold.record.target_subject));
        fs::create_dir_all(&dir)?;
        if config.method == Method::Coteach {
            write_selection_log(
                &fold.logs.selections,
                BufWriter::new(fs::File::create(dir.join(SELECTION_FILE))?),
            )?;
        }
        fs::write(dir.join("epochs.json"), serde_json::to_string_pretty(&fold.logs.epochs)?)?;
        fold.checkpoint
            .model
            .save_checkpoint(BufWriter::new(fs::File::create(dir.join("checkpoint.bin"))?))?;
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.method,
        master_seed: config.master_seed,
        cohort_source: source,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    log::info!(
        "{} run: mean balanced accuracy {:.4} (std {:.4}) over {} folds",
        config.method,
        run.summary.mean,
        run.summary.std,
        run.summary.folds.len()
    );
    Ok(run.summary)
}

fn check_cohort(cohort: &[SubjectDataset], gen: &GeneratorConfig) -> Result<()> {
    for ds in cohort {
        if ds.n_electrodes() != gen.n_electrodes || ds.n_timesteps() != gen.n_timesteps {
            return Err(Error::Validation(format!(
                "cohort subject {} is {}x{}, generator section says {}x{}",
                ds.subject_id,
                ds.n_electrodes(),
                ds.n_timesteps(),
                gen.n_electrodes,
                gen.n_timesteps
            )));
        }
    }
    Ok(())
}

pub struct Report {
    pub text: String,
    pub csv: String,
}

struct RunArtifacts {
    label: String,
    accs: Vec<(u32, f64)>,
    summary: Option<RunSummary>,
}

fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let csv_path = dir.join(RESULTS_FILE);
    if !csv_path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found; is {} a finished run?", RESULTS_FILE, dir.display()),
        )));
    }
    let rows = read_results_csv(fs::File::open(&csv_path)?)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{} has no rows", csv_path.display())));
    }
    let summary = match fs::read_to_string(dir.join(SUMMARY_FILE)) {
        Ok(text) => Some(serde_json::from_str::<RunSummary>(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    Ok(RunArtifacts {
        label: rows[0].method.to_string(),
        accs: rows.iter().map(|r| (r.target_subject, r.balanced_accuracy)).collect(),
        summary,
    })
}

/// Per-subject balanced accuracy table (percent, two decimals) with
/// Avg./Std. columns, one row per run, followed by selection frequencies
/// for co-teaching runs.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Validation("no run directories given".into()));
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let mut subjects: Vec<u32> = runs.iter().flat_map(|r| r.accs.iter().map(|a| a.0)).collect();
    subjects.sort_unstable();
    subjects.dedup();

    let mut text = String::new();
    let mut csv = String::from("model");
    for s in &subjects {
        let _ = write!(csv, ",S{s}");
    }
    csv.push_str(",Avg.,Std.\n");

    let _ = writeln!(text, "Balanced accuracy (%) per held-out subject");
    let _ = write!(text, "{:<10}|", "Model");
    for s in &subjects {
        let _ = write!(text, " {:>6}", format!("S{s}"));
    }
    let _ = writeln!(text, " | {:>6} {:>6}", "Avg.", "Std.");
    for run in &runs {
        let (mean, std) = mean_std(&run.accs.iter().map(|a| a.1).collect::<Vec<_>>());
        let _ = write!(text, "{:<10}|", run.label);
        let _ = write!(csv, "{}", run.label);
        for s in &subjects {
            match run.accs.iter().find(|a| a.0 == *s) {
                Some((_, v)) => {
                    let _ = write!(text, " {:>6.2}", 100.0 * v);
                    let _ = write!(csv, ",{:.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(text, " {:>6}", "-");
                    csv.push(',');
                }
            }
        }
        let _ = writeln!(text, " | {:>6.2} {:>6.2}", 100.0 * mean, 100.0 * std);
        let _ = writeln!(csv, ",{:.2},{:.2}", 100.0 * mean, 100.0 * std);
    }

    for run in &runs {
        let Some(summary) = &run.summary else { continue };
        let (Some(w), false) = (summary.selection_window, summary.selection_frequencies.is_empty()) else {
            continue;
        };
        let _ = writeln!(
            text,
            "\nSelection frequency ({}, epochs {}..={})",
            run.label, w.start, w.end
        );
        let _ = writeln!(text, "{:>8} {:>7} {:>7} {:>7}", "subject", "f", "g", "pooled");
        for row in &summary.selection_frequencies {
            let _ = writeln!(
                text,
                "{:>8} {:>7.3} {:>7.3} {:>7.3}",
                row.subject_id, row.f, row.g, row.pooled
            );
        }
    }
    Ok(Report { text, csv })
}
