//! Synthetic multi-subject cohorts, rest-class augmentation, splits and the
//! raw cohort file format.
//!
//! Each imagery class has a global template: a mixture of two sinusoids at
//! class-specific frequencies with per-channel amplitudes and phases. A
//! subject sees the templates with its own gain and phase shift, plus an
//! additive background (per-channel DC level and one slow oscillation)
//! shared by all its trials. Trials add white Gaussian noise with standard
//! deviation `1 / snr` relative to the unit-RMS templates.
//!
//! The rest distribution is the subject background plus noise, with no
//! template. Noisy subjects draw their imagery-labeled trials from it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const RAW_MAGIC: &[u8; 4] = b"CTSS";
const RAW_VERSION: u16 = 1;

const STREAM_TEMPLATES: u64 = 1;
const STREAM_SUBJECT: u64 = 1_000_000;
const STREAM_TRIALS: u64 = 2_000_000;
const STREAM_REST: u64 = 3_000_000;
const STREAM_SPLIT: u64 = 4_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: u32,
    pub session_id: u32,
    /// `[n_trials, E, T_len]`
    pub trials: Tensor,
    pub labels: Vec<usize>,
    pub is_noisy: bool,
}

impl SubjectDataset {
    pub fn new(subject_id: u32, trials: Tensor, labels: Vec<usize>, is_noisy: bool) -> Result<Self> {
        if trials.ndim() != 3 {
            return Err(Error::Shape(format!(
                "subject {subject_id}: trials must be [n, E, T], got {:?}",
                trials.shape()
            )));
        }
        if trials.shape()[0] != labels.len() {
            return Err(Error::Validation(format!(
                "subject {subject_id}: {} trials but {} labels",
                trials.shape()[0],
                labels.len()
            )));
        }
        trials.ensure_finite(&format!("subject {subject_id} trials"))?;
        Ok(Self {
            subject_id,
            session_id: 0,
            trials,
            labels,
            is_noisy,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.labels.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.trials.shape()[1]
    }

    pub fn n_timesteps(&self) -> usize {
        self.trials.shape()[2]
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        self.trials.row(i)
    }

    /// Trial indices grouped by label, ascending within each class.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn subset(&self, rows: &[usize]) -> Result<SubjectDataset> {
        Ok(SubjectDataset {
            subject_id: self.subject_id,
            session_id: self.session_id,
            trials: self.trials.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            is_noisy: self.is_noisy,
        })
    }
}

/// How designated noisy subjects are corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Imagery trials come from the rest distribution; labels are kept.
    #[default]
    RestLike,
    /// Trials carry the control signal but labels are redrawn uniformly.
    LabelShuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub n_imagery_classes: usize,
    pub trials_per_class: usize,
    pub n_electrodes: usize,
    pub n_timesteps: usize,
    pub sampling_rate: f64,
    pub snr: f64,
    pub subject_shift_scale: f64,
    pub noisy_subject_ids: Vec<u32>,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            n_imagery_classes: 2,
            trials_per_class: 20,
            n_electrodes: 4,
            n_timesteps: 750,
            sampling_rate: 250.0,
            snr: 2.0,
            subject_shift_scale: 0.5,
            noisy_subject_ids: Vec::new(),
            noise_mode: NoiseMode::RestLike,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_subjects", self.n_subjects),
            ("n_imagery_classes", self.n_imagery_classes),
            ("trials_per_class", self.trials_per_class),
            ("n_electrodes", self.n_electrodes),
            ("n_timesteps", self.n_timesteps),
        ] {
            if v == 0 {
                return Err(Error::config(format!("generator.{name}"), "must be positive"));
            }
        }
        if self.n_imagery_classes + 1 > u16::MAX as usize {
            return Err(Error::config("generator.n_imagery_classes", "too many classes"));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::config("generator.snr", "must be > 0"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(Error::config("generator.sampling_rate", "must be finite and > 0"));
        }
        if !(self.subject_shift_scale >= 0.0 && self.subject_shift_scale.is_finite()) {
            return Err(Error::config("generator.subject_shift_scale", "must be finite and >= 0"));
        }
        if let Some(id) = self
            .noisy_subject_ids
            .iter()
            .find(|&&id| id as usize >= self.n_subjects)
        {
            return Err(Error::config(
                "generator.noisy_subject_ids",
                format!("subject {id} not in 0..{}", self.n_subjects),
            ));
        }
        Ok(())
    }

    /// Index of the rest class appended by [`augment_rest_class`].
    pub fn rest_label(&self) -> usize {
        self.n_imagery_classes
    }

    fn noise_std(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            1.0 / self.snr
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-class, per-channel sinusoid parameters shared by the whole cohort.
struct Templates {
    /// `[class][channel][component] -> (amplitude, frequency_hz, phase)`
    comps: Vec<Vec<[(f64, f64, f64); 2]>>,
    /// Scale giving each class template unit RMS.
    norm: Vec<f64>,
}

impl Templates {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TEMPLATES));
        let comps: Vec<Vec<[(f64, f64, f64); 2]>> = (0..cfg.n_imagery_classes)
            .map(|c| {
                let f_mu = 8.0 + 3.0 * c as f64;
                let f_beta = 18.0 + 5.0 * c as f64;
                (0..cfg.n_electrodes)
                    .map(|_| {
                        [f_mu, f_beta].map(|f| {
                            let amp = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                            (amp, f, rng.gen_range(0.0..2.0 * PI))
                        })
                    })
                    .collect()
            })
            .collect();
        let mut t = Templates {
            norm: vec![1.0; cfg.n_imagery_classes],
            comps,
        };
        for c in 0..cfg.n_imagery_classes {
            let raw = t.render(cfg, c, 1.0, 0.0);
            let rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
            t.norm[c] = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        }
        t
    }

    /// Template of `class` as a flat `[E, T]` array, scaled by `gain` and
    /// phase-shifted by `shift` radians.
    fn render(&self, cfg: &GeneratorConfig, class: usize, gain: f64, shift: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(cfg.n_electrodes * cfg.n_timesteps);
        for ch in &self.comps[class] {
            for t in 0..cfg.n_timesteps {
                let time = t as f64 / cfg.sampling_rate;
                let v: f64 = ch
                    .iter()
                    .map(|&(a, f, p)| a * (2.0 * PI * f * time + p + shift).sin())
                    .sum();
                out.push(gain * self.norm[class] * v);
            }
        }
        out
    }
}

/// Subject-level variability: template gain/phase and an additive background.
struct SubjectProfile {
    gain: f64,
    phase_shift: f64,
    background: Vec<f64>,
}

impl SubjectProfile {
    fn new(cfg: &GeneratorConfig, subject_id: u32) -> Self {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SUBJECT + subject_id as u64));
        let s = cfg.subject_shift_scale;
        let gain = (1.0 + 0.3 * s * gaussian(&mut rng)).max(0.1);
        let phase_shift = 0.5 * PI * s * gaussian(&mut rng);
        let freq = rng.gen_range(1.0..4.0);
        let mut background = Vec::with_capacity(cfg.n_electrodes * cfg.n_timesteps);
        for _ in 0..cfg.n_electrodes {
            let dc = s * gaussian(&mut rng);
            let amp = s * rng.gen_range(0.0..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for t in 0..cfg.n_timesteps {
                let time = t as f64 / cfg.sampling_rate;
                background.push(dc + amp * (2.0 * PI * freq * time + phase).sin());
            }
        }
        Self {
            gain,
            phase_shift,
            background,
        }
    }
}

fn draw_trial(signal: Option<&[f64]>, profile: &SubjectProfile, sigma: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    for (i, &bg) in profile.background.iter().enumerate() {
        let s = signal.map_or(0.0, |sig| sig[i]);
        let noise = if sigma > 0.0 { sigma * gaussian(rng) } else { 0.0 };
        out.push(bg + s + noise);
    }
}

/// Generates one dataset per subject, each with `n_imagery_classes *
/// trials_per_class` imagery trials (labels cycle through the classes).
pub fn generate_cohort(config: &GeneratorConfig) -> Result<Vec<SubjectDataset>> {
    config.validate()?;
    let templates = Templates::new(config);
    let sigma = config.noise_std();
    let n_trials = config.n_imagery_classes * config.trials_per_class;
    let mut cohort = Vec::with_capacity(config.n_subjects);
    for sid in 0..config.n_subjects as u32 {
        let profile = SubjectProfile::new(config, sid);
        let signals: Vec<Vec<f64>> = (0..config.n_imagery_classes)
            .map(|c| templates.render(config, c, profile.gain, profile.phase_shift))
            .collect();
        let noisy = config.noisy_subject_ids.contains(&sid);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRIALS + sid as u64));
        let mut data = Vec::with_capacity(n_trials * profile.background.len());
        let mut labels = Vec::with_capacity(n_trials);
        for j in 0..n_trials {
            let class = j % config.n_imagery_classes;
            let signal = match (noisy, config.noise_mode) {
                (true, NoiseMode::RestLike) => None,
                _ => Some(signals[class].as_slice()),
            };
            draw_trial(signal, &profile, sigma, &mut rng, &mut data);
            let label = match (noisy, config.noise_mode) {
                (true, NoiseMode::LabelShuffle) => rng.gen_range(0..config.n_imagery_classes),
                _ => class,
            };
            labels.push(label);
        }
        let trials = Tensor::new(
            vec![n_trials, config.n_electrodes, config.n_timesteps],
            data,
        )?;
        cohort.push(SubjectDataset::new(sid, trials, labels, noisy)?);
    }
    Ok(cohort)
}

/// Appends one rest trial (label `n_imagery_classes`) per existing trial,
/// drawn from the subject's rest distribution. Original trials are kept
/// bitwise and in order.
pub fn augment_rest_class(ds: &SubjectDataset, config: &GeneratorConfig) -> Result<SubjectDataset> {
    config.validate()?;
    let rest = config.rest_label();
    if ds.labels.iter().any(|&y| y >= rest) {
        return Err(Error::Validation(format!(
            "subject {}: labels already include class {rest}; rest augmentation applies once",
            ds.subject_id
        )));
    }
    if ds.n_electrodes() != config.n_electrodes || ds.n_timesteps() != config.n_timesteps {
        return Err(Error::Shape(format!(
            "subject {}: trials are {}x{}, generator config describes {}x{}",
            ds.subject_id,
            ds.n_electrodes(),
            ds.n_timesteps(),
            config.n_electrodes,
            config.n_timesteps
        )));
    }
    let profile = SubjectProfile::new(config, ds.subject_id);
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_REST + ds.subject_id as u64));
    let n = ds.n_trials();
    let mut data = ds.trials.data().to_vec();
    data.reserve(n * profile.background.len());
    for _ in 0..n {
        draw_trial(None, &profile, config.noise_std(), &mut rng, &mut data);
    }
    let mut labels = ds.labels.clone();
    labels.extend(std::iter::repeat_n(rest, n));
    let mut shape = ds.trials.shape().to_vec();
    shape[0] = 2 * n;
    let mut out = SubjectDataset::new(ds.subject_id, Tensor::new(shape, data)?, labels, ds.is_noisy)?;
    out.session_id = ds.session_id;
    Ok(out)
}

/// Holds out `target_subject_id`; the remaining subjects keep their order.
pub fn loso_split(cohort: &[SubjectDataset], target_subject_id: u32) -> Result<(Vec<SubjectDataset>, SubjectDataset)> {
    if cohort.len() < 2 {
        return Err(Error::Validation(
            "leave-one-subject-out needs at least two subjects".into(),
        ));
    }
    let pos = cohort
        .iter()
        .position(|d| d.subject_id == target_subject_id)
        .ok_or_else(|| {
            Error::Validation(format!("target subject {target_subject_id} not in cohort"))
        })?;
    let source = cohort
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos)
        .map(|(_, d)| d.clone())
        .collect();
    Ok((source, cohort[pos].clone()))
}

/// Per-subject, class-stratified split. Each class of each subject keeps
/// `round(ratio * n)` trials for training, clamped so both sides get at
/// least one.
pub fn train_val_split(source: &[SubjectDataset], ratio: f64, seed: u64) -> Result<(Vec<SubjectDataset>, Vec<SubjectDataset>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut train = Vec::with_capacity(source.len());
    let mut val = Vec::with_capacity(source.len());
    for ds in source {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT + ds.subject_id as u64));
        let mut train_rows = Vec::new();
        let mut val_rows = Vec::new();
        for (class, mut rows) in ds.indices_by_class() {
            let n = rows.len();
            if n < 2 {
                return Err(Error::Validation(format!(
                    "subject {} class {class} has {n} trial(s); a split needs at least 2",
                    ds.subject_id
                )));
            }
            rows.shuffle(&mut rng);
            let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
            train_rows.extend_from_slice(&rows[..n_train]);
            val_rows.extend_from_slice(&rows[n_train..]);
        }
        train_rows.sort_unstable();
        val_rows.sort_unstable();
        train.push(ds.subset(&train_rows)?);
        val.push(ds.subset(&val_rows)?);
    }
    Ok((train, val))
}

/// Serializes a cohort in the raw `CTSS` format.
pub fn write_raw<W: Write>(cohort: &[SubjectDataset], mut w: W) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&RAW_VERSION.to_le_bytes())?;
    w.write_all(&(cohort.len() as u32).to_le_bytes())?;
    for ds in cohort {
        let mut block = Vec::with_capacity(17 + 2 * ds.n_trials() + 8 * ds.trials.len());
        block.extend_from_slice(&ds.subject_id.to_le_bytes());
        block.push(u8::from(ds.is_noisy));
        for v in [ds.n_trials(), ds.n_electrodes(), ds.n_timesteps()] {
            block.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &y in &ds.labels {
            let y = u16::try_from(y).map_err(|_| {
                Error::Validation(format!("label {y} does not fit the u16 file field"))
            })?;
            block.extend_from_slice(&y.to_le_bytes());
        }
        for v in ds.trials.data() {
            block.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&block);
        w.write_all(&block)?;
        w.write_all(&crc.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a raw `CTSS` cohort, verifying magic, version and every block checksum.
pub fn read_raw(bytes: &[u8]) -> Result<Vec<SubjectDataset>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != RAW_MAGIC {
        return Err(Error::Format("bad magic; not a CTSS cohort file".into()));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != RAW_VERSION {
        return Err(Error::Format(format!("unsupported CTSS version {version}")));
    }
    let n = cur.u32("subject count")? as usize;
    let mut cohort = Vec::with_capacity(n.min(1 << 16));
    for s in 0..n {
        let start = cur.pos;
        let subject_id = cur.u32("subject id")?;
        let is_noisy = match cur.take(1, "noisy flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("subject block {s}: noisy flag byte {b}"))),
        };
        let n_trials = cur.u32("trial count")? as usize;
        let e = cur.u32("electrode count")? as usize;
        let t = cur.u32("timestep count")? as usize;
        if n_trials == 0 || e == 0 || t == 0 {
            return Err(Error::Format(format!("subject block {s}: zero-sized dimension")));
        }
        let label_bytes = cur.take(
            n_trials.checked_mul(2).ok_or_else(|| Error::Format("trial count overflow".into()))?,
            "labels",
        )?;
        let n_values = n_trials
            .checked_mul(e)
            .and_then(|v| v.checked_mul(t))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Format("trial data size overflow".into()))?;
        let value_bytes = cur.take(n_values, "trial data")?;
        let block = &bytes[start..cur.pos];
        let crc = cur.u32("checksum")?;
        if crc32fast::hash(block) != crc {
            return Err(Error::Format(format!(
                "checksum mismatch in subject block {s} (id {subject_id})"
            )));
        }
        let labels = label_bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        let data = value_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trials = Tensor::new(vec![n_trials, e, t], data)?;
        cohort.push(
            SubjectDataset::new(subject_id, trials, labels, is_noisy)
                .map_err(|err| Error::Format(err.to_string()))?,
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} subject blocks",
            bytes.len() - cur.pos
        )));
    }
    Ok(cohort)
}

pub fn save_raw(cohort: &[SubjectDataset], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_raw(cohort, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Vec<SubjectDataset>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_raw(&bytes).map_err(|e| e.context(path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_subjects: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_subjects,
            n_imagery_classes: 2,
            trials_per_class: 20,
            n_electrodes: 3,
            n_timesteps: 64,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn counts() {
        let cohort = generate_cohort(&small(10)).unwrap();
        assert_eq!(cohort.len(), 10);
        assert!(cohort.iter().all(|d| d.n_trials() == 40));
        assert!(cohort.iter().enumerate().all(|(i, d)| d.subject_id == i as u32));
    }

    #[test]
    fn noiseless_trials_repeat() {
        let cfg = GeneratorConfig {
            snr: f64::INFINITY,
            ..small(2)
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let d = &cohort[1];
        // labels cycle, so trials 0 and 2 share a class
        assert_eq!(d.trial(0), d.trial(2));
        assert_ne!(d.trial(0), d.trial(1));
    }

    #[test]
    fn degenerate_configs_fail() {
        assert!(generate_cohort(&GeneratorConfig { trials_per_class: 0, ..small(2) }).is_err());
        assert!(generate_cohort(&GeneratorConfig { n_imagery_classes: 0, ..small(2) }).is_err());
        assert!(generate_cohort(&GeneratorConfig { snr: 0.0, ..small(2) }).is_err());
        assert!(generate_cohort(&GeneratorConfig {
            noisy_subject_ids: vec![2],
            ..small(2)
        })
        .is_err());
    }

    #[test]
    fn augmentation_doubles_and_is_single_shot() {
        let cfg = small(1);
        let ds = &generate_cohort(&cfg).unwrap()[0];
        let aug = augment_rest_class(ds, &cfg).unwrap();
        assert_eq!(aug.n_trials(), 80);
        assert_eq!(&aug.trials.data()[..ds.trials.len()], ds.trials.data());
        assert_eq!(&aug.labels[..40], ds.labels.as_slice());
        assert!(aug.labels[40..].iter().all(|&y| y == 2));
        assert!(matches!(augment_rest_class(&aug, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn paper_sized_augmentation() {
        let cfg = GeneratorConfig {
            n_subjects: 1,
            n_imagery_classes: 3,
            trials_per_class: 50,
            n_electrodes: 2,
            n_timesteps: 16,
            ..Default::default()
        };
        let ds = &generate_cohort(&cfg).unwrap()[0];
        assert_eq!(ds.n_trials(), 150);
        let aug = augment_rest_class(ds, &cfg).unwrap();
        assert_eq!(aug.n_trials(), 300);
        assert_eq!(aug.indices_by_class().len(), 4);
    }

    #[test]
    fn loso_partitions() {
        let cohort = generate_cohort(&small(15)).unwrap();
        let (src, tgt) = loso_split(&cohort, 4).unwrap();
        assert_eq!(src.len(), 14);
        assert_eq!(tgt.subject_id, 4);
        let ids: Vec<u32> = src.iter().map(|d| d.subject_id).collect();
        assert_eq!(ids, (0..15).filter(|&i| i != 4).collect::<Vec<_>>());

        let two = generate_cohort(&small(2)).unwrap();
        let (src, _) = loso_split(&two, 0).unwrap();
        assert_eq!(src[0].subject_id, 1);
        assert!(loso_split(&two[..1], 0).is_err());
        assert!(loso_split(&two, 9).is_err());
    }

    #[test]
    fn stratified_split() {
        let cfg = GeneratorConfig {
            trials_per_class: 100,
            n_timesteps: 8,
            ..small(2)
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let (train, val) = train_val_split(&cohort, 0.9, 3).unwrap();
        for (tr, va) in train.iter().zip(&val) {
            for c in 0..2 {
                assert_eq!(tr.indices_by_class()[&c].len(), 90);
                assert_eq!(va.indices_by_class()[&c].len(), 10);
            }
        }
        assert_eq!(train_val_split(&cohort, 0.9, 3).unwrap(), (train, val));
        assert!(train_val_split(&cohort, 1.0, 3).is_err());

        let tiny = GeneratorConfig { trials_per_class: 2, ..small(1) };
        let c = generate_cohort(&tiny).unwrap();
        let (tr, va) = train_val_split(&c, 0.5, 0).unwrap();
        assert_eq!(tr[0].n_trials(), 2);
        assert_eq!(va[0].n_trials(), 2);

        let one = GeneratorConfig { trials_per_class: 1, ..small(1) };
        assert!(train_val_split(&generate_cohort(&one).unwrap(), 0.5, 0).is_err());
    }

    #[test]
    fn raw_round_trip_and_corruption() {
        let cohort = generate_cohort(&GeneratorConfig {
            noisy_subject_ids: vec![1],
            ..small(3)
        })
        .unwrap();
        let mut buf = Vec::new();
        write_raw(&cohort, &mut buf).unwrap();
        let back = read_raw(&buf).unwrap();
        assert_eq!(back, cohort);

        let mut bad = buf.clone();
        bad[1] ^= 0x20;
        assert!(matches!(read_raw(&bad), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_raw(&bad), Err(Error::Format(_))));
        let mut bad = buf.clone();
        let mid = buf.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(read_raw(&bad), Err(Error::Format(ref m)) if m.contains("checksum")));
        assert!(matches!(read_raw(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }
}
