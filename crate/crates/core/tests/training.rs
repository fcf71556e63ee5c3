use std::collections::BTreeSet;

use ctss::coteach::{
    cross_update_step, per_subject_loss_sums, stratified_minibatch, train_coteaching, CoteachConfig, CoteachState,
    Method, NetTag, SubjectBatcher,
};
use ctss::data::{augment_rest_class, generate_cohort, train_val_split, GeneratorConfig, SubjectDataset};
use ctss::eval::{mean_std, read_results_csv, run_loso, train_baseline, write_results_csv, LosoConfig, ModelSection};
use ctss::nn::{build_mini_resnet1d, per_sample_losses, ModelConfig};
use ctss::optim::OptimizerKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_generator(n_subjects: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_subjects,
        trials_per_class: 10,
        n_electrodes: 2,
        n_timesteps: 64,
        snr: 2.0,
        seed: 21,
        ..Default::default()
    }
}

fn toy_split(n_subjects: usize) -> (Vec<SubjectDataset>, Vec<SubjectDataset>) {
    let gen = toy_generator(n_subjects);
    let aug: Vec<_> = generate_cohort(&gen)
        .unwrap()
        .iter()
        .map(|d| augment_rest_class(d, &gen).unwrap())
        .collect();
    train_val_split(&aug, 0.8, 1).unwrap()
}

fn toy_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_electrodes: 2,
        n_timesteps: 64,
        n_classes: 3,
        width_base: 2,
        n_blocks: 1,
        seed,
    }
}

fn toy_coteach(t_max: usize) -> CoteachConfig {
    CoteachConfig {
        t_max,
        batch_per_subject: 4,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn loss_sums_regroup_per_sample_losses() {
    let (train, _) = toy_split(4);
    let model = build_mini_resnet1d(&toy_model(1)).unwrap();
    let batch = stratified_minibatch(&train, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.len(), 3 * 4);
    let sums = per_subject_loss_sums(&model, &batch).unwrap();

    // oracle: one trial at a time, grouped by the recorded subject id
    let mut expected = vec![0.0; batch.n_subjects()];
    for row in 0..batch.len() {
        let x = batch.inputs.select_rows(&[row]).unwrap();
        let loss = per_sample_losses(&model, &x, &batch.labels[row..=row]).unwrap().data()[0];
        let sid = train
            .iter()
            .find(|d| d.trial(batch.sample_indices[row]) == batch.inputs.row(row))
            .unwrap()
            .subject_id;
        let pos = batch.subject_ids.iter().position(|&s| s == sid).unwrap();
        expected[pos] += loss;
    }
    for (a, b) in sums.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn batcher_keeps_subject_blocks_and_cycles() {
    let (train, _) = toy_split(3);
    let mut batcher = SubjectBatcher::new(&train, 4, 9).unwrap();
    batcher.start_epoch();
    let per_subject = train[0].n_trials();
    let mut seen = vec![BTreeSet::new(); 3];
    for _ in 0..per_subject.div_ceil(4) {
        let batch = batcher.next_batch(&train).unwrap();
        assert_eq!(batch.subject_ids, vec![0, 1, 2]);
        for (row, &idx) in batch.sample_indices.iter().enumerate() {
            let pos = row / 4;
            assert_eq!(batch.inputs.row(row), train[pos].trial(idx));
            assert_eq!(batch.labels[row], train[pos].labels[idx]);
            seen[pos].insert(idx);
        }
    }
    for s in &seen {
        assert_eq!(s.len(), per_subject);
    }
}

#[test]
fn swapping_peers_swaps_the_outcome() {
    let (train, _) = toy_split(3);
    let a = build_mini_resnet1d(&toy_model(1)).unwrap();
    let b = build_mini_resnet1d(&toy_model(2)).unwrap();
    let batch = stratified_minibatch(&train, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

    let mut fg = CoteachState::new(a.clone(), b.clone(), OptimizerKind::Adam).unwrap();
    let mut gf = CoteachState::new(b, a, OptimizerKind::Adam).unwrap();
    let r1 = cross_update_step(&mut fg, &batch, 0.01, 0.6).unwrap();
    let r2 = cross_update_step(&mut gf, &batch, 0.01, 0.6).unwrap();
    assert_eq!(fg.model_f.params(), gf.model_g.params());
    assert_eq!(fg.model_g.params(), gf.model_f.params());
    assert_eq!(r1[0].selected, r2[1].selected);
    assert_eq!(r1[0].loss_sums, r2[1].loss_sums);
    assert_eq!((r1[0].net, r1[1].net), (NetTag::F, NetTag::G));
}

#[test]
fn identical_peers_stay_identical_at_full_rate() {
    let (train, _) = toy_split(3);
    let m = build_mini_resnet1d(&toy_model(4)).unwrap();
    let mut state = CoteachState::new(m.clone(), m, OptimizerKind::Adam).unwrap();
    let mut batcher = SubjectBatcher::new(&train, 4, 2).unwrap();
    batcher.start_epoch();
    for _ in 0..5 {
        let batch = batcher.next_batch(&train).unwrap();
        let [rf, rg] = cross_update_step(&mut state, &batch, 0.01, 1.0).unwrap();
        assert_eq!(rf.selected, vec![0, 1, 2]);
        assert_eq!(rf.selected, rg.selected);
    }
    assert_eq!(state.model_f.params(), state.model_g.params());
}

#[test]
fn first_epoch_keeps_every_subject() {
    let (train, val) = toy_split(3);
    let (_, logs) = train_coteaching(&train, &val, &toy_model(1), &toy_coteach(1)).unwrap();
    assert!(!logs.selections.is_empty());
    for rec in &logs.selections {
        assert!((rec.remember_rate - 0.98).abs() < 1e-12);
        assert_eq!(rec.selected, vec![0, 1, 2]);
        assert_eq!(rec.batch_size, 4 * 3);
    }
}

#[test]
fn coteaching_is_deterministic() {
    let (train, val) = toy_split(3);
    let run = || train_coteaching(&train, &val, &toy_model(1), &toy_coteach(2)).unwrap();
    let (c1, l1) = run();
    let (c2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(c1.model.params(), c2.model.params());
    assert_eq!((c1.net, c1.epoch), (c2.net, c2.epoch));
}

#[test]
fn baseline_reduces_training_loss() {
    let (train, val) = toy_split(3);
    let cfg = toy_model(3);
    let loss = |m: &ctss::Model| -> f64 {
        train
            .iter()
            .map(|d| per_sample_losses(m, &d.trials, &d.labels).unwrap().sum())
            .sum()
    };
    let before = loss(&build_mini_resnet1d(&cfg).unwrap());
    let (ck, logs) = train_baseline(&train, &val, &cfg, &toy_coteach(25)).unwrap();
    assert_eq!(logs.method, Method::Baseline);
    assert!(logs.selections.is_empty());
    assert!(loss(&ck.model) < 0.7 * before, "{} -> {}", before, loss(&ck.model));
}

#[test]
fn loso_folds_never_see_their_target() {
    let gen = toy_generator(4);
    let cohort = generate_cohort(&gen).unwrap();
    let cfg = LosoConfig::new(
        gen,
        ModelSection {
            width_base: 2,
            n_blocks: 1,
        },
        toy_coteach(2),
        17,
    );
    let run = run_loso(&cohort, Method::Coteach, &cfg).unwrap();
    assert_eq!(run.folds.len(), 4);
    for fold in &run.folds {
        let target = fold.record.target_subject;
        let expected: Vec<u32> = (0..4).filter(|&s| s != target).collect();
        for rec in &fold.logs.selections {
            assert_eq!(rec.subjects, expected);
            assert!(!rec.selected.contains(&target));
            assert_eq!(rec.batch_size, 4 * 3);
        }
    }

    let accs: Vec<f64> = run.summary.folds.iter().map(|f| f.balanced_accuracy).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    assert!((run.summary.mean - mean).abs() < 1e-12);
    assert!((run.summary.std - std).abs() < 1e-12);
    assert_eq!(mean_std(&accs), (run.summary.mean, run.summary.std));

    let mut csv = Vec::new();
    write_results_csv(&run.summary, &mut csv).unwrap();
    let rows = read_results_csv(&csv[..]).unwrap();
    assert_eq!(rows.len(), 4);
    for (row, fold) in rows.iter().zip(&run.summary.folds) {
        assert_eq!(row.target_subject, fold.target_subject);
        assert_eq!(row.balanced_accuracy, fold.balanced_accuracy);
    }
}

#[test]
fn parallel_folds_match_sequential() {
    let gen = toy_generator(3);
    let cohort = generate_cohort(&gen).unwrap();
    let mut cfg = LosoConfig::new(gen, ModelSection { width_base: 2, n_blocks: 1 }, toy_coteach(1), 2);
    let seq = run_loso(&cohort, Method::Baseline, &cfg).unwrap();
    cfg.parallel_folds = 3;
    let par = run_loso(&cohort, Method::Baseline, &cfg).unwrap();
    assert_eq!(seq.summary.folds, par.summary.folds);
}
