//! Paired pretraining, alternating shape-induction fine-tuning, checkpoints
//! and the newline-delimited JSON training log.

mod config;
mod logfile;

pub use config::{Stage, TrainConfig};
pub use logfile::{read_log, LogRecord, LOG_FILE};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::{
    loss_discriminator, loss_lsgan_g, loss_projection, loss_reconstruction, loss_shape_induction,
    loss_total, LossParts, LossReport,
};
use crate::models::{CheckpointFile, Discriminator, Generator};
use crate::tensor::{Adam, Real, Tape, Tensor, Var};
use crate::volume::{stack_volumes, stack_xrays, PairedDataset, PairedSample, UnpairedXraySet, XrayImage};

pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:03}.ckpt")
}

/// Seed-derived split: `floor(n * fraction)` validation samples, the rest for training.
pub fn split_validation(ds: &PairedDataset, fraction: f64, seed: u64) -> (PairedDataset, PairedDataset) {
    let n = ds.len();
    let n_val = ((n as f64) * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465));
    let (val, train) = order.split_at(n_val);
    let (mut val, mut train) = (val.to_vec(), train.to_vec());
    val.sort_unstable();
    train.sort_unstable();
    (ds.subset(&train), ds.subset(&val))
}

/// Counters restored on resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub global_step: u64,
    /// Word position of the shuffling RNG, as a decimal string.
    pub rng_word_pos: String,
    pub best_val_re: Option<f64>,
    pub best_epoch: Option<usize>,
    pub adam_g_steps: Vec<u64>,
    pub adam_d_steps: Vec<u64>,
    /// Log records written so far; a resumed run truncates the log to this.
    pub log_records: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    state: TrainState,
}

fn max_abs_grad<E: Real>(grads: &[Tensor<E>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64().abs())
        .fold(0.0, |a: f64, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) })
}

/// Generator, discriminator, their optimizers and the schedule state.
pub struct Trainer<E: Real> {
    pub config: TrainConfig,
    generator: Generator<E>,
    discriminator: Discriminator<E>,
    opt_g: Adam<E>,
    opt_d: Adam<E>,
    rng: ChaCha8Rng,
    state: TrainState,
    out_dir: Option<PathBuf>,
    log: Vec<LogRecord>,
}

impl<E: Real> Trainer<E> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), config.seed)?;
        let opt_g = Adam::new(config.adam(config.lr_g), &generator.params.shapes());
        let opt_d = Adam::new(config.adam(config.lr_d), &discriminator.params.shapes());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7368_7566_666c_6521);
        Ok(Self {
            state: TrainState {
                stage: Stage::Pretrain,
                epoch: 0,
                global_step: 0,
                rng_word_pos: "0".into(),
                best_val_re: None,
                best_epoch: None,
                adam_g_steps: vec![0; generator.params.len()],
                adam_d_steps: vec![0; discriminator.params.len()],
                log_records: 0,
            },
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng,
            out_dir: None,
            log: Vec::new(),
        })
    }

    /// Restores models, optimizer moments, counters and RNG position.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::format("meta", e.to_string()))?;
        let mut t = Self::new(meta.config)?;
        t.generator.params.load_entries(&file.params, "g.")?;
        t.discriminator.params.load_entries(&file.params, "d.")?;
        let load_moments = |opt: &mut Adam<E>, names: &[String], steps: &[u64], prefix: &str| -> Result<()> {
            if steps.len() != opt.states.len() {
                return Err(Error::format("optimizer", "optimizer state count mismatch"));
            }
            for ((st, name), &step) in opt.states.iter_mut().zip(names).zip(steps) {
                for (suffix, slot) in [("m", &mut st.m), ("v", &mut st.v)] {
                    let key = format!("{prefix}{name}.{suffix}");
                    let (_, t) = file
                        .optimizer
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| Error::format("optimizer", format!("missing {key}")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::format("optimizer", format!("{key} shape mismatch")));
                    }
                    *slot = Tensor::cast(t);
                }
                st.step = step;
            }
            Ok(())
        };
        let gnames = t.generator.params.names().to_vec();
        let dnames = t.discriminator.params.names().to_vec();
        load_moments(&mut t.opt_g, &gnames, &meta.state.adam_g_steps, "g.")?;
        load_moments(&mut t.opt_d, &dnames, &meta.state.adam_d_steps, "d.")?;
        let pos: u128 = meta
            .state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::format("meta", "bad rng_word_pos"))?;
        t.rng.set_word_pos(pos);
        t.state = meta.state;
        Ok(t)
    }

    /// Starts a new stage from the current weights and optimizer moments.
    pub fn begin_stage(&mut self, stage: Stage) {
        self.state.stage = stage;
        self.state.epoch = 0;
        self.state.best_val_re = None;
        self.state.best_epoch = None;
        self.state.log_records = 0;
        self.log.clear();
    }

    /// Replaces the config (e.g. loss weights or epoch counts for a new stage);
    /// model shapes and the seed must be unchanged.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        contract!(
            config.generator == self.config.generator && config.discriminator == self.config.discriminator,
            "model configuration cannot change between stages"
        );
        self.opt_g.config = config.adam(config.lr_g);
        self.opt_d.config = config.adam(config.lr_d);
        self.config = config;
        Ok(())
    }

    /// Directs checkpoints and the log to `dir`. An existing log is truncated
    /// to the records covered by the current state, so resumed runs append
    /// exactly where the checkpoint left off.
    pub fn set_output_dir(&mut self, dir: impl Into<PathBuf>) -> Result<()> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(LOG_FILE);
        let kept = logfile::truncate_log(&path, self.state.log_records)?;
        self.log = kept;
        self.out_dir = Some(dir);
        Ok(())
    }

    pub fn generator(&self) -> &Generator<E> {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator<E> {
        &mut self.generator
    }

    pub fn discriminator(&self) -> &Discriminator<E> {
        &self.discriminator
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            logfile::append(&dir.join(LOG_FILE), &rec)?;
        }
        self.log.push(rec);
        self.state.log_records = self.log.len();
        Ok(())
    }

    fn check_finite(&self, report: &LossReport, grads: &[Tensor<E>]) -> Result<()> {
        for (term, v) in report.terms() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step: self.state.global_step,
                    term: term.to_string(),
                    max_grad: max_abs_grad(grads),
                });
            }
        }
        Ok(())
    }

    fn adam_step(opt: &mut Adam<E>, params: &mut crate::models::ParamSet<E>, grads: &[Tensor<E>], step: u64) -> Result<()> {
        let names = params.names().to_vec();
        opt.step(params.tensors_mut(), grads, &names).map_err(|e| match e {
            Error::NonFinite { term, max_grad, .. } => Error::NonFinite { step, term, max_grad },
            other => other,
        })
    }

    fn collect_grads(tape: &Tape<E>, loss: Var, vars: &[Var]) -> Result<Vec<Tensor<E>>> {
        let mut g = tape.backward(loss)?;
        vars.iter()
            .map(|&v| {
                g.take(v).map(Ok).unwrap_or_else(|| {
                    let s = tape.shape(v)?;
                    Ok(Tensor::zeros(s))
                })
            })
            .collect()
    }

    /// One discriminator update on real vs detached fake volumes, then one
    /// generator update on the weighted adversarial, reconstruction and
    /// projection terms.
    pub fn train_step_paired(&mut self, batch: &[&PairedSample]) -> Result<LossReport> {
        contract!(!batch.is_empty(), "paired step needs a non-empty batch");
        let w = self.config.weights;
        let xs: Vec<&XrayImage> = batch.iter().map(|s| &s.xray).collect();
        let cts: Vec<_> = batch.iter().map(|s| &s.ct).collect();
        let x_t = stack_xrays::<E>(&xs)?;
        let ct_t = stack_volumes::<E>(&cts)?;

        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, true);
        let x = tape.constant(x_t);
        let real = tape.constant(ct_t);
        let fake = self.generator.forward(&mut tape, &gp, x)?;

        // discriminator update
        let dp = self.discriminator.params.bind(&mut tape, true);
        let fake_det = tape.detach(fake)?;
        let rs = self.discriminator.forward(&mut tape, &dp, real, x)?;
        let fs = self.discriminator.forward(&mut tape, &dp, fake_det, x)?;
        let ld = loss_discriminator(&mut tape, rs, fs)?;
        let l_disc = tape.value(ld)?.item().as_f64();
        let d_grads = Self::collect_grads(&tape, ld, &dp)?;
        if !l_disc.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.global_step,
                term: "l_disc".into(),
                max_grad: max_abs_grad(&d_grads),
            });
        }
        Self::adam_step(&mut self.opt_d, &mut self.discriminator.params, &d_grads, self.state.global_step)?;

        // generator update against the refreshed discriminator
        let lsgan = if w.lambda1 > 0.0 {
            let dc = self.discriminator.params.bind(&mut tape, false);
            let s = self.discriminator.forward(&mut tape, &dc, fake, x)?;
            Some(loss_lsgan_g(&mut tape, s)?)
        } else {
            None
        };
        let re = loss_reconstruction(&mut tape, fake, real)?;
        let pl = loss_projection(&mut tape, fake, real)?;
        let parts = LossParts {
            lsgan,
            re: Some(re),
            pl: Some(pl),
            sind: None,
        };
        let (total, mut report) = loss_total(&mut tape, &w, &parts)?;
        report.l_disc = Some(l_disc);
        let g_grads = Self::collect_grads(&tape, total, &gp)?;
        self.check_finite(&report, &g_grads)?;
        Self::adam_step(&mut self.opt_g, &mut self.generator.params, &g_grads, self.state.global_step)?;
        self.state.global_step += 1;
        Ok(report)
    }

    /// Generator update on the weighted shape-induction term (plus the
    /// adversarial term if configured). The discriminator is not touched and
    /// no step is taken when every applicable weight is zero.
    pub fn train_step_unpaired(&mut self, batch: &[&XrayImage]) -> Result<LossReport> {
        contract!(!batch.is_empty(), "unpaired step needs a non-empty batch");
        let w = self.config.weights;
        let use_lsgan = self.config.include_lsgan_on_unpaired && w.lambda1 > 0.0;
        let active = w.lambda4 > 0.0 || use_lsgan;

        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, active);
        let x = tape.constant(stack_xrays::<E>(batch)?);
        let fake = self.generator.forward(&mut tape, &gp, x)?;
        let sind = loss_shape_induction(&mut tape, fake, x)?;
        let lsgan = if use_lsgan {
            let dc = self.discriminator.params.bind(&mut tape, false);
            let s = self.discriminator.forward(&mut tape, &dc, fake, x)?;
            Some(loss_lsgan_g(&mut tape, s)?)
        } else {
            None
        };
        let parts = LossParts {
            lsgan,
            re: None,
            pl: None,
            sind: Some(sind),
        };
        let (total, report) = loss_total(&mut tape, &w, &parts)?;
        if active {
            let g_grads = Self::collect_grads(&tape, total, &gp)?;
            self.check_finite(&report, &g_grads)?;
            Self::adam_step(&mut self.opt_g, &mut self.generator.params, &g_grads, self.state.global_step)?;
        } else {
            self.check_finite(&report, &[])?;
        }
        self.state.global_step += 1;
        Ok(report)
    }

    /// Mean per-sample reconstruction MSE of the generator on `val`.
    pub fn validation_re(&self, val: &PairedDataset) -> Result<f64> {
        if val.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for chunk in val.samples.chunks(self.config.batch_size.max(1)) {
            let xs: Vec<&XrayImage> = chunk.iter().map(|s| &s.xray).collect();
            let preds = self.generator.predict(&xs)?;
            for (p, s) in preds.iter().zip(chunk) {
                total += p.mse(&s.ct)?;
            }
        }
        Ok(total / val.len() as f64)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    fn step_record(&self, phase: &'static str, report: &LossReport) -> LogRecord {
        LogRecord::step(self.state.stage, phase, self.state.epoch + 1, self.state.global_step, report)
    }

    /// Closes an epoch: validation, best tracking, log line, checkpoints.
    fn end_epoch(&mut self, val: &PairedDataset, fallback: &PairedDataset) -> Result<f64> {
        self.state.epoch += 1;
        let val_re = if val.is_empty() {
            self.validation_re(fallback)?
        } else {
            self.validation_re(val)?
        };
        let improved = match self.state.best_val_re {
            None => true,
            Some(b) => val_re < b,
        };
        if improved {
            self.state.best_val_re = Some(val_re);
            self.state.best_epoch = Some(self.state.epoch);
        }
        self.record(LogRecord::epoch(self.state.stage, self.state.epoch, self.state.global_step, val_re))?;
        log::info!(
            "{} epoch {}/{}: validation l_re {:.6}",
            self.state.stage.name(),
            self.state.epoch,
            self.config.epochs_for(self.state.stage),
            val_re
        );
        if let Some(dir) = self.out_dir.clone() {
            let bytes = self.checkpoint().to_bytes();
            let path = dir.join(epoch_checkpoint_name(self.state.epoch));
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            if improved {
                let best = dir.join(BEST_CHECKPOINT);
                fs::write(&best, &bytes).map_err(|e| Error::io(&best, e))?;
            }
        }
        Ok(val_re)
    }

    fn write_initial_checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            if self.state.epoch == 0 {
                let path = dir.join(epoch_checkpoint_name(0));
                self.checkpoint().save(&path)?;
            }
        }
        Ok(())
    }

    /// Paired-only epochs for the current stage (pretrain or baseline),
    /// continuing from the completed epoch count.
    pub fn run_paired(&mut self, train: &PairedDataset, val: &PairedDataset) -> Result<CheckpointFile> {
        contract!(!train.is_empty(), "paired training needs a non-empty dataset");
        self.write_initial_checkpoint()?;
        let bs = self.config.batch_size;
        while self.state.epoch < self.config.epochs_for(self.state.stage) {
            let order = self.shuffled(train.len());
            for idx in order.chunks(bs) {
                let batch: Vec<&PairedSample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let report = self.train_step_paired(&batch)?;
                let rec = self.step_record("paired", &report);
                self.record(rec)?;
            }
            self.end_epoch(val, train)?;
        }
        Ok(self.checkpoint())
    }

    /// Alternating epochs: unpaired batch, paired batch, and so on. Each
    /// stream yields `ceil(max(|paired|, |unpaired|) / batch)` batches, the
    /// shorter one cycling. Reads only the X-ray side of `unpaired`.
    pub fn run_finetune(
        &mut self,
        train: &PairedDataset,
        unpaired: &UnpairedXraySet,
        val: &PairedDataset,
    ) -> Result<CheckpointFile> {
        contract!(!train.is_empty(), "fine-tuning needs a non-empty paired dataset");
        if unpaired.is_empty() {
            log::warn!("unpaired set is empty; fine-tuning degenerates to paired-only training");
        }
        self.write_initial_checkpoint()?;
        let bs = self.config.batch_size;
        let xrays = unpaired.xrays();
        let longest = train.len().max(xrays.len());
        let n_batches = longest.div_ceil(bs);
        while self.state.epoch < self.config.epochs_for(self.state.stage) {
            let p_order = self.shuffled(train.len());
            let u_order = self.shuffled(xrays.len());
            let batch_of = |order: &[usize], k: usize| -> Vec<usize> {
                let n = order.len();
                let start = k * bs;
                if n == 0 {
                    return Vec::new();
                }
                (start..(start + bs).min(longest)).map(|j| order[j % n]).collect()
            };
            for k in 0..n_batches {
                if !xrays.is_empty() {
                    let idx = batch_of(&u_order, k);
                    let batch: Vec<&XrayImage> = idx.iter().map(|&i| &xrays[i]).collect();
                    let report = self.train_step_unpaired(&batch)?;
                    let rec = self.step_record("unpaired", &report);
                    self.record(rec)?;
                }
                let idx = batch_of(&p_order, k);
                let batch: Vec<&PairedSample> = idx.iter().map(|&i| &train.samples[i]).collect();
                let report = self.train_step_paired(&batch)?;
                let rec = self.step_record("paired", &report);
                self.record(rec)?;
            }
            self.end_epoch(val, train)?;
        }
        Ok(self.checkpoint())
    }

    /// Snapshot of models, optimizer moments, config and counters.
    pub fn checkpoint(&self) -> CheckpointFile {
        let mut params = self.generator.params.to_entries("g.");
        params.extend(self.discriminator.params.to_entries("d."));
        let mut optimizer = Vec::new();
        for (prefix, opt, names) in [
            ("g.", &self.opt_g, self.generator.params.names()),
            ("d.", &self.opt_d, self.discriminator.params.names()),
        ] {
            for (st, name) in opt.states.iter().zip(names) {
                optimizer.push((format!("{prefix}{name}.m"), Tensor::cast(&st.m)));
                optimizer.push((format!("{prefix}{name}.v"), Tensor::cast(&st.v)));
            }
        }
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos().to_string();
        state.adam_g_steps = self.opt_g.states.iter().map(|s| s.step).collect();
        state.adam_d_steps = self.opt_d.states.iter().map(|s| s.step).collect();
        let meta = CheckpointMeta {
            config: self.config.clone(),
            state,
        };
        CheckpointFile {
            params,
            optimizer,
            meta: serde_json::to_value(meta).expect("checkpoint meta serializes"),
        }
    }
}

/// Reads the training config stored in a checkpoint.
pub fn checkpoint_config(file: &CheckpointFile) -> Result<TrainConfig> {
    let meta: CheckpointMeta =
        serde_json::from_value(file.meta.clone()).map_err(|e| Error::format("meta", e.to_string()))?;
    Ok(meta.config)
}

/// Loads only the generator from a checkpoint.
pub fn load_generator<E: Real>(file: &CheckpointFile) -> Result<Generator<E>> {
    let cfg = checkpoint_config(file)?;
    let mut g = Generator::new(cfg.generator, cfg.seed)?;
    g.params.load_entries(&file.params, "g.")?;
    Ok(g)
}

/// Pretrains from scratch: split off validation, then run the paired stage.
pub fn pretrain<E: Real>(cfg: &TrainConfig, paired: &PairedDataset, out_dir: Option<&Path>) -> Result<CheckpointFile> {
    let (train, val) = split_validation(paired, cfg.validation_fraction, cfg.seed);
    let mut t = Trainer::<E>::new(cfg.clone())?;
    if let Some(d) = out_dir {
        t.set_output_dir(d)?;
    }
    t.run_paired(&train, &val)
}

/// Fine-tunes from `start` with the weights and epoch counts of `cfg`.
pub fn finetune<E: Real>(
    cfg: &TrainConfig,
    paired: &PairedDataset,
    unpaired: &UnpairedXraySet,
    start: &CheckpointFile,
    out_dir: Option<&Path>,
) -> Result<CheckpointFile> {
    let (train, val) = split_validation(paired, cfg.validation_fraction, cfg.seed);
    let mut t = Trainer::<E>::from_checkpoint(start)?;
    t.set_config(cfg.clone())?;
    t.begin_stage(Stage::Finetune);
    if let Some(d) = out_dir {
        t.set_output_dir(d)?;
    }
    t.run_finetune(&train, unpaired, &val)
}

#[cfg(test)]
mod tests;
