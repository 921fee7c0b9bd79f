use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use xct_core::evaluation::{
    eval_reconstruction, evaluate_model, run_ablation, train_classifier, AblationConfig, AblationData,
    ClassifierTrainConfig, MetricsReport, OracleReconstructor, ReconstructionMetrics,
};
use xct_core::models::CheckpointFile;
use xct_core::phantom::{
    load_paired_dataset, load_unpaired_set, sample_paired_dataset, sample_unpaired_set, save_paired_dataset,
    save_unpaired_set, DatasetManifest, StyleShiftParams,
};
use xct_core::projection::project_mean;
use xct_core::tensor::Precision;
use xct_core::training::{checkpoint_config, load_generator, split_validation, Stage, TrainConfig, Trainer};
use xct_core::volume::{export_slices, load_volume, save_xray};
use xct_core::{PairedDataset, Real, UnpairedXraySet};

use crate::run::{usage, RunDir};
use crate::{AblateArgs, Command, ConfigKind, DrrArgs, EvalArgs, ExportArgs, FinetuneArgs, PhantomArgs, TrainArgs};

/// Default shift for `--unpaired` without explicit `--shift`.
const DEFAULT_SHIFT: StyleShiftParams = StyleShiftParams {
    gamma: 1.4,
    contrast: 1.1,
    noise_sigma: 0.02,
    vignette: 0.0,
};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Drr(a) => drr(a),
        Command::Export(a) => export(a),
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn print_default_config(kind: ConfigKind) -> Result<()> {
    let bytes = match kind {
        ConfigKind::Train => pretty(&TrainConfig::default())?,
        ConfigKind::Classifier => pretty(&ClassifierTrainConfig::default())?,
        ConfigKind::Ablation => pretty(&AblationConfig::default())?,
    };
    print!("{}", String::from_utf8(bytes)?);
    Ok(())
}

/// Parses a JSON config; malformed or unknown fields are usage errors.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn check_side(what: &str, side: usize, m: &DatasetManifest, dir: &Path) -> Result<()> {
    if m.dims != [side; 3] {
        return Err(usage(format!(
            "{what} side {side} does not match dataset {} with dims {:?}",
            dir.display(),
            m.dims
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(run: &RunDir, name: &str, value: &T) -> Result<()> {
    let p = run.join(name);
    fs::write(&p, pretty(value)?).with_context(|| format!("writing {}", p.display()))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let shift = match (a.shift, a.unpaired) {
        (Some(s), _) => Some(s),
        (None, true) => Some(DEFAULT_SHIFT),
        (None, false) => None,
    };
    // the dataset manifest is this directory's one manifest
    let dir = RunDir::create(&a.out.out, a.out.force, false)?;
    let m = match shift {
        None => {
            let ds = sample_paired_dataset(a.n, a.side, &a.class_mix, a.seed)?;
            save_paired_dataset(&ds, &a.class_mix, &dir.path)?
        }
        Some(s) => {
            let set = sample_unpaired_set(a.n, a.side, &a.class_mix, &s, a.seed)?;
            save_unpaired_set(&set, &a.class_mix, &s, &dir.path)?
        }
    };
    log::info!("wrote {} samples to {}", m.files.len(), dir.path.display());
    Ok(())
}

fn train_config(path: Option<&Path>, side: usize) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => read_config(p)?,
        None => TrainConfig::with_side(side),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_paired<E: Real>(mut t: Trainer<E>, cfg: &TrainConfig, run: &RunDir, data: &PairedDataset) -> Result<()> {
    t.set_output_dir(&run.path)?;
    let (train, val) = split_validation(data, cfg.validation_fraction, cfg.seed);
    t.run_paired(&train, &val)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (data, dm) = load_paired_dataset(&a.data)?;
    let side = dm.dims[0];
    let cfg = match &a.resume {
        Some(r) => {
            let file = CheckpointFile::load(r)?;
            let cfg = checkpoint_config(&file)?;
            if a.config.is_some() && train_config(a.config.as_deref(), side)? != cfg {
                return Err(usage("--config differs from the config stored in the resumed checkpoint"));
            }
            cfg
        }
        None => train_config(a.config.as_deref(), side)?,
    };
    check_side("config volume", cfg.volume_side, &dm, &a.data)?;
    let mut run = RunDir::create(&a.out.out, a.out.force, a.resume.is_some())?;
    run.store_config(pretty(&cfg)?)?;
    run.add_dataset("paired", &a.data, dm);
    let stage: Stage = a.stage.into();
    log::info!("{} stage on {} samples", stage.name(), data.len());
    macro_rules! go {
        ($e:ty) => {{
            let t = match &a.resume {
                Some(r) => Trainer::<$e>::from_checkpoint(&CheckpointFile::load(r)?)?,
                None => {
                    let mut t = Trainer::<$e>::new(cfg.clone())?;
                    t.begin_stage(stage);
                    t
                }
            };
            if t.state().stage != stage {
                return Err(usage(format!(
                    "checkpoint is from the {} stage, not {}",
                    t.state().stage.name(),
                    stage.name()
                )));
            }
            run_paired(t, &cfg, &run, &data)?
        }};
    }
    match cfg.precision {
        Precision::F32 => go!(f32),
        Precision::F64 => go!(f64),
    }
    run.finish()?;
    Ok(())
}

fn run_finetune<E: Real>(
    mut t: Trainer<E>,
    cfg: &TrainConfig,
    fresh: bool,
    run: &RunDir,
    data: &PairedDataset,
    unpaired: &UnpairedXraySet,
) -> Result<()> {
    if fresh {
        t.set_config(cfg.clone())?;
        t.begin_stage(Stage::Finetune);
    } else if t.state().stage != Stage::Finetune {
        return Err(usage("--resume needs a checkpoint from a fine-tuning run"));
    }
    t.set_output_dir(&run.path)?;
    let (train, val) = split_validation(data, cfg.validation_fraction, cfg.seed);
    t.run_finetune(&train, unpaired, &val)?;
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let (data, dm) = load_paired_dataset(&a.data)?;
    let (unpaired, um) = load_unpaired_set(&a.unpaired)?;
    let fresh = a.resume.is_none();
    let ckpt_path = a.start.as_ref().or(a.resume.as_ref()).expect("clap requires --start or --resume");
    let file = CheckpointFile::load(ckpt_path)?;
    let stored = checkpoint_config(&file)?;
    let cfg = match &a.config {
        Some(p) => {
            let c: TrainConfig = read_config(p)?;
            c.validate()?;
            c
        }
        None => stored.clone(),
    };
    if !fresh && cfg != stored {
        return Err(usage("--config differs from the config stored in the resumed checkpoint"));
    }
    check_side("config volume", cfg.volume_side, &dm, &a.data)?;
    check_side("config volume", cfg.volume_side, &um, &a.unpaired)?;
    let mut run = RunDir::create(&a.out.out, a.out.force, !fresh)?;
    run.store_config(pretty(&cfg)?)?;
    run.add_dataset("paired", &a.data, dm);
    run.add_dataset("unpaired", &a.unpaired, um);
    log::info!(
        "fine-tuning on {} paired and {} unpaired samples (lambda4 = {})",
        data.len(),
        unpaired.len(),
        cfg.weights.lambda4
    );
    match cfg.precision {
        Precision::F32 => run_finetune(Trainer::<f32>::from_checkpoint(&file)?, &cfg, fresh, &run, &data, &unpaired)?,
        Precision::F64 => run_finetune(Trainer::<f64>::from_checkpoint(&file)?, &cfg, fresh, &run, &data, &unpaired)?,
    }
    run.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    reconstruction: ReconstructionMetrics,
    model: Option<MetricsReport>,
    oracle: Option<MetricsReport>,
    classifier_val_accuracy: Option<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = CheckpointFile::load(&a.checkpoint)?;
    let g = load_generator::<f32>(&file)?;
    let (test, tm) = load_unpaired_set(&a.test)?;
    check_side("generator", g.config.side, &tm, &a.test)?;
    let mut run = RunDir::create(&a.out.out, a.out.force, false)?;
    run.add_dataset("test", &a.test, tm);

    let reconstruction = eval_reconstruction(&g, &test)?;
    let mut out = EvalOutput {
        checkpoint: a.checkpoint.display().to_string(),
        reconstruction,
        model: None,
        oracle: None,
        classifier_val_accuracy: None,
    };
    let cfg = match &a.classifier_config {
        Some(p) => read_config(p)?,
        None => {
            let mut c = ClassifierTrainConfig::default();
            c.model.side = g.config.side;
            c
        }
    };
    if let Some(dir) = &a.classifier_data {
        let (cds, cm) = load_paired_dataset(dir)?;
        check_side("classifier", cfg.model.side, &cm, dir)?;
        run.add_dataset("classifier", dir, cm);
        cfg.validate()?;
        let clf = train_classifier(&cds, &cfg)?;
        out.model = Some(evaluate_model(&clf.classifier, &g, &test, cfg.seed)?);
        let oracle = OracleReconstructor::from_unpaired(&test)?;
        out.oracle = Some(evaluate_model(&clf.classifier, &oracle, &test, cfg.seed)?);
        out.classifier_val_accuracy = Some(clf.best_val_accuracy);
    }
    run.store_config(pretty(&cfg)?)?;
    write_json(&run, "metrics.json", &out)?;
    log::info!(
        "projection mse {:.6}, hidden volume mse {:.6} over {} samples",
        reconstruction.projection_mse,
        reconstruction.hidden_volume_mse,
        reconstruction.count
    );
    if let Some(m) = &out.model {
        log::info!("generated-volume accuracy {:.3}", m.classification.accuracy);
    }
    run.finish()?;
    Ok(())
}

fn jobs(flag: Option<usize>, config: usize) -> Result<usize> {
    let jobs = match std::env::var("XCT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("XCT_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => flag.unwrap_or(config),
    };
    if jobs == 0 {
        return Err(usage("job count must be >= 1"));
    }
    Ok(jobs)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (paired, dm) = load_paired_dataset(&a.data)?;
    let side = dm.dims[0];
    let mut cfg: AblationConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => {
            let mut c = AblationConfig::default();
            c.base.set_side(side);
            c.classifier.model.side = side;
            c
        }
    };
    if let Some(l) = a.lambda4 {
        cfg.lambda4_values = l;
    }
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n as u64).map(|i| cfg.base.seed + i).collect();
    }
    cfg.jobs = jobs(a.jobs, cfg.jobs)?;
    cfg.validate()?;
    check_side("config volume", cfg.base.volume_side, &dm, &a.data)?;

    let (unpaired, um) = load_unpaired_set(&a.unpaired)?;
    let (test, tm) = load_unpaired_set(&a.test)?;
    check_side("config volume", cfg.base.volume_side, &um, &a.unpaired)?;
    check_side("config volume", cfg.base.volume_side, &tm, &a.test)?;
    let mut run = RunDir::create(&a.out.out, a.out.force, false)?;
    run.store_config(pretty(&cfg)?)?;
    run.add_dataset("paired", &a.data, dm);
    run.add_dataset("unpaired", &a.unpaired, um);
    run.add_dataset("test", &a.test, tm);
    let classifier_data = match &a.classifier_data {
        Some(dir) => {
            let (cds, cm) = load_paired_dataset(dir)?;
            check_side("classifier", cfg.classifier.model.side, &cm, dir)?;
            run.add_dataset("classifier", dir, cm);
            Some(cds)
        }
        None => {
            if cfg.classifier.model.side != side {
                return Err(usage(format!(
                    "classifier side {} does not match dataset side {side}",
                    cfg.classifier.model.side
                )));
            }
            None
        }
    };
    let data = AblationData {
        paired,
        unpaired,
        test,
        classifier_data,
    };
    log::info!(
        "ablation over lambda4 {:?} with seeds {:?} on {} jobs",
        cfg.lambda4_values,
        cfg.seeds,
        cfg.jobs
    );
    // pretrained checkpoints land next to the results
    let result = run_ablation(&cfg, &data, Some(&run.path))?;
    write_json(&run, "ablation.json", &result)?;
    let text = result.to_text();
    fs::write(run.join("ablation.txt"), &text)?;
    print!("{text}");
    run.finish()?;
    Ok(())
}

fn drr(a: DrrArgs) -> Result<()> {
    let v = load_volume(&a.input)?;
    let x = project_mean(&v, a.plane);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_xray(&x, &a.out)?;
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let v = load_volume(&a.input)?;
    let run = RunDir::create(&a.out.out, a.out.force, false)?;
    let paths = export_slices(&v, a.plane, &run.path)?;
    log::info!("wrote {} slices to {}", paths.len(), run.path.display());
    run.finish()?;
    Ok(())
}
