use super::*;
use crate::losses::LossWeights;
use crate::phantom::{sample_paired_dataset, sample_unpaired_set, ClassMix, StyleShiftParams};
use crate::tolerance::REPORT_TOL;

fn small_cfg() -> TrainConfig {
    let mut c = TrainConfig::with_side(16);
    c.generator.widths = vec![4, 8];
    c.generator.out_width = 2;
    c.discriminator.widths = vec![4, 8];
    c.batch_size = 2;
    c.seed = 3;
    c
}

fn data(n: usize, seed: u64) -> PairedDataset {
    sample_paired_dataset(n, 16, &ClassMix::uniform(), seed).unwrap()
}

fn unpaired(m: usize) -> UnpairedXraySet {
    let shift = StyleShiftParams {
        gamma: 1.4,
        contrast: 1.1,
        noise_sigma: 0.02,
        vignette: 0.0,
    };
    sample_unpaired_set(m, 16, &ClassMix::uniform(), &shift, 8).unwrap()
}

#[test]
fn default_config_matches_documented_values() {
    let c = TrainConfig::default();
    assert_eq!(c.weights, LossWeights { lambda1: 0.1, lambda2: 0.1, lambda3: 0.1, lambda4: 10.0 });
    assert_eq!((c.pretrain_epochs, c.finetune_epochs, c.baseline_epochs), (30, 10, 40));
    assert!(!c.include_lsgan_on_unpaired);
    c.validate().unwrap();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    let partial: TrainConfig = serde_json::from_str(r#"{"batch_size": 8}"#).unwrap();
    assert_eq!(partial.batch_size, 8);
    let mut bad = c.clone();
    bad.batch_size = 0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = c;
    bad.volume_side = 16;
    assert!(bad.validate().is_err());
}

#[test]
fn split_is_seeded_and_disjoint() {
    let ds = data(20, 1);
    let (train, val) = split_validation(&ds, 0.1, 5);
    assert_eq!((train.len(), val.len()), (18, 2));
    for v in &val.samples {
        assert!(!train.samples.contains(v));
    }
    let (_, val2) = split_validation(&ds, 0.1, 5);
    assert_eq!(val, val2);
    assert_eq!(split_validation(&data(3, 1), 0.1, 5).1.len(), 0);
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let mut c = small_cfg();
    c.lr_g = 0.0;
    c.lr_d = 0.0;
    let ds = data(2, 2);
    let mut t = Trainer::<f32>::new(c).unwrap();
    let (g0, d0) = (t.generator().params.clone(), t.discriminator().params.clone());
    let batch: Vec<&PairedSample> = ds.samples.iter().collect();
    let r1 = t.train_step_paired(&batch).unwrap();
    let r2 = t.train_step_paired(&batch).unwrap();
    assert_eq!(t.generator().params, g0);
    assert_eq!(t.discriminator().params, d0);
    assert_eq!(r1, r2);
}

#[test]
fn paired_steps_are_deterministic() {
    let ds = data(4, 3);
    let run = || {
        let mut t = Trainer::<f32>::new(small_cfg()).unwrap();
        let batch: Vec<&PairedSample> = ds.samples.iter().collect();
        (0..3).map(|_| t.train_step_paired(&batch).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn paired_report_total_matches_weights() {
    let ds = data(2, 4);
    let mut t = Trainer::<f64>::new(small_cfg()).unwrap();
    let batch: Vec<&PairedSample> = ds.samples.iter().collect();
    let r = t.train_step_paired(&batch).unwrap();
    assert!(r.l_lsgan.is_some() && r.l_re.is_some() && r.l_pl.is_some() && r.l_disc.is_some());
    assert!(r.l_sind.is_none());
    assert!((r.l_total - r.weighted_total(&t.config.weights)).abs() < REPORT_TOL);
}

#[test]
fn zero_lambda4_unpaired_step_leaves_generator_unchanged() {
    let mut c = small_cfg();
    c.weights.lambda4 = 0.0;
    let u = unpaired(2);
    let mut t = Trainer::<f32>::new(c).unwrap();
    // move the optimizer moments away from zero first
    let ds = data(2, 5);
    let batch: Vec<&PairedSample> = ds.samples.iter().collect();
    t.train_step_paired(&batch).unwrap();
    let g0 = t.generator().params.clone();
    let xs: Vec<&XrayImage> = u.xrays().iter().collect();
    let r = t.train_step_unpaired(&xs).unwrap();
    assert_eq!(t.generator().params, g0);
    assert!(r.l_sind.unwrap() > 0.0);
    assert_eq!(r.l_total, 0.0);
    assert_eq!(u.hidden_access_count(), 0);
}

#[test]
fn unpaired_step_leaves_discriminator_untouched() {
    let mut c = small_cfg();
    c.include_lsgan_on_unpaired = true;
    let u = unpaired(2);
    let mut t = Trainer::<f32>::new(c).unwrap();
    let d0 = t.discriminator().params.clone();
    let g0 = t.generator().params.clone();
    let xs: Vec<&XrayImage> = u.xrays().iter().collect();
    let r = t.train_step_unpaired(&xs).unwrap();
    assert!(r.l_lsgan.is_some());
    assert_eq!(t.discriminator().params, d0);
    assert_ne!(t.generator().params, g0);
}

#[test]
fn single_sample_overfit_reduces_reconstruction() {
    let mut c = TrainConfig::with_side(16);
    c.weights.lambda1 = 0.0;
    c.weights.lambda3 = 0.0;
    c.lr_g = 2e-3;
    let ds = data(1, 6);
    let mut t = Trainer::<f32>::new(c).unwrap();
    let batch = vec![&ds.samples[0]];
    let first = t.train_step_paired(&batch).unwrap().l_re.unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = t.train_step_paired(&batch).unwrap().l_re.unwrap();
    }
    assert!(last <= 0.1 * first, "l_re {first} -> {last}");
}

#[test]
fn single_xray_shape_induction_descends() {
    let mut c = small_cfg();
    c.lr_g = 2e-3;
    let u = unpaired(1);
    let mut t = Trainer::<f32>::new(c).unwrap();
    let xs = vec![&u.xrays()[0]];
    let first = t.train_step_unpaired(&xs).unwrap().l_sind.unwrap();
    let mut last = first;
    for _ in 1..300 {
        last = t.train_step_unpaired(&xs).unwrap().l_sind.unwrap();
    }
    assert!(last <= 0.2 * first, "l_sind {first} -> {last}");
    assert_eq!(u.hidden_access_count(), 0);
}

#[test]
fn finetune_alternates_and_never_reads_hidden_volumes() {
    let mut c = small_cfg();
    c.pretrain_epochs = 1;
    c.finetune_epochs = 2;
    let ds = data(4, 7);
    let u = unpaired(7);
    let start = pretrain::<f32>(&c, &ds, None).unwrap();
    let mut t = Trainer::<f32>::from_checkpoint(&start).unwrap();
    t.set_config(c.clone()).unwrap();
    t.begin_stage(Stage::Finetune);
    t.run_finetune(&ds, &u, &PairedDataset { samples: vec![], master_seed: 0 }).unwrap();
    assert_eq!(u.hidden_access_count(), 0);
    let phases: Vec<&str> = t
        .log()
        .iter()
        .filter(|r| r.kind == "step")
        .map(|r| r.phase.as_deref().unwrap())
        .collect();
    // ceil(max(4, 7) / 2) = 4 batches per stream per epoch
    assert_eq!(phases.len(), 2 * 2 * 4);
    for (i, p) in phases.iter().enumerate() {
        assert_eq!(*p, if i % 2 == 0 { "unpaired" } else { "paired" });
    }
    for r in t.log().iter().filter(|r| r.kind == "step") {
        assert!((r.l_total.unwrap() - r.report().weighted_total(&c.weights)).abs() < REPORT_TOL);
    }
}

#[test]
fn empty_unpaired_set_degenerates_to_paired_only() {
    let mut c = small_cfg();
    c.finetune_epochs = 1;
    let ds = data(4, 9);
    let empty = UnpairedXraySet::new(vec![], vec![], vec![], 0).unwrap();
    let mut t = Trainer::<f32>::new(c).unwrap();
    t.begin_stage(Stage::Finetune);
    t.run_finetune(&ds, &empty, &ds).unwrap();
    let steps: Vec<_> = t.log().iter().filter(|r| r.kind == "step").collect();
    assert_eq!(steps.len(), 2);
    assert!(steps.iter().all(|r| r.phase.as_deref() == Some("paired")));
}

#[test]
fn zero_epochs_checkpoint_holds_initial_weights() {
    let mut c = small_cfg();
    c.pretrain_epochs = 0;
    let ckpt = pretrain::<f32>(&c, &data(2, 10), None).unwrap();
    let fresh = Trainer::<f32>::new(c).unwrap();
    assert_eq!(ckpt, fresh.checkpoint());
    let g: Generator<f32> = load_generator(&ckpt).unwrap();
    assert_eq!(g.params, fresh.generator().params);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let mut c = small_cfg();
    c.pretrain_epochs = 3;
    let ds = data(6, 11);
    let (train, val) = split_validation(&ds, 0.2, c.seed);
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();

    let mut a = Trainer::<f32>::new(c.clone()).unwrap();
    a.set_output_dir(full.path()).unwrap();
    a.run_paired(&train, &val).unwrap();

    let mut short = c.clone();
    short.pretrain_epochs = 1;
    let mut b = Trainer::<f32>::new(short).unwrap();
    b.set_output_dir(part.path()).unwrap();
    b.run_paired(&train, &val).unwrap();
    // continue a second epoch past the checkpoint so the log has stale lines to drop
    let ck1 = CheckpointFile::load(part.path().join(epoch_checkpoint_name(1))).unwrap();
    let mut resumed = Trainer::<f32>::from_checkpoint(&ck1).unwrap();
    resumed.set_config(c.clone()).unwrap();
    resumed.set_output_dir(part.path()).unwrap();
    resumed.run_paired(&train, &val).unwrap();

    for e in 0..=3 {
        let name = epoch_checkpoint_name(e);
        let (x, y) = (fs::read(full.path().join(&name)).unwrap(), fs::read(part.path().join(&name)).unwrap());
        if e == 0 || e == 1 {
            // the short run stored its own (shorter) config in these
            continue;
        }
        assert_eq!(x, y, "{name} differs");
    }
    assert_eq!(
        fs::read(full.path().join(LOG_FILE)).unwrap(),
        fs::read(part.path().join(LOG_FILE)).unwrap()
    );
}

#[test]
fn fixed_seed_runs_write_identical_files() {
    let mut c = small_cfg();
    c.pretrain_epochs = 2;
    let ds = data(5, 12);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pretrain::<f32>(&c, &ds, Some(d.path())).unwrap();
    }
    for name in [epoch_checkpoint_name(0), epoch_checkpoint_name(2), BEST_CHECKPOINT.into(), LOG_FILE.into()] {
        assert_eq!(
            fs::read(dirs[0].path().join(&name)).unwrap(),
            fs::read(dirs[1].path().join(&name)).unwrap(),
            "{name}"
        );
    }
    let log = logfile::read_log(dirs[0].path().join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().filter(|r| r.kind == "epoch").count(), 2);
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let ds = data(2, 13);
    let mut t = Trainer::<f32>::new(small_cfg()).unwrap();
    t.generator_mut().params.tensors_mut()[0].data_mut()[0] = f32::NAN;
    let batch: Vec<&PairedSample> = ds.samples.iter().collect();
    match t.train_step_paired(&batch) {
        Err(Error::NonFinite { step, term, .. }) => {
            assert_eq!(step, 0);
            assert!(term.starts_with("l_"), "{term}");
        }
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

