use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::classify::generated_training_set;
use super::{
    evaluate_model, train_classifier, ClassifierProtocol, ClassifierTrainConfig, MetricsReport, OracleReconstructor,
};
use crate::error::{Error, Result};
use crate::models::{CheckpointFile, Generator};
use crate::training::{checkpoint_config, finetune, load_generator, pretrain, TrainConfig};
use crate::volume::{PairedDataset, UnpairedXraySet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub lambda4_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub classifier: ClassifierTrainConfig,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            lambda4_values: vec![0.0, 0.1, 1.0, 10.0, 100.0],
            seeds: vec![0, 1, 2],
            classifier: ClassifierTrainConfig::default(),
            jobs: 1,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.classifier.validate()?;
        if self.seeds.len() < 2 {
            return Err(Error::Config("ablation needs at least 2 seeds".into()));
        }
        if self.lambda4_values.is_empty() {
            return Err(Error::Config("ablation needs at least one lambda4 value".into()));
        }
        for (i, a) in self.lambda4_values.iter().enumerate() {
            if !(a.is_finite() && *a >= 0.0) {
                return Err(Error::Config(format!("lambda4 value {a} must be finite and >= 0")));
            }
            if self.lambda4_values[..i].contains(a) {
                return Err(Error::Config(format!("lambda4 value {a} is repeated")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} is repeated")));
            }
        }
        Ok(())
    }
}

/// Inputs of an ablation run. The classifier trains on `classifier_data`
/// (true volumes) or, when absent, on `paired`.
pub struct AblationData {
    pub paired: PairedDataset,
    pub unpaired: UnpairedXraySet,
    pub test: UnpairedXraySet,
    pub classifier_data: Option<PairedDataset>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    /// Sample standard deviation; `None` below two defined values.
    pub std: Option<f64>,
    /// Runs where the metric was defined.
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: None, std: None, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self {
            mean: Some(mean),
            std,
            n,
        }
    }

    fn cell(&self, digits: usize) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.digits$} ± {s:.digits$}"),
            (Some(m), None) => format!("{m:.digits$}"),
            _ => "undefined".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub projection_mse: MeanStd,
    pub hidden_volume_mse: MeanStd,
    pub accuracy: MeanStd,
    pub tb_recall: MeanStd,
    pub tb_precision: MeanStd,
}

impl MetricSummary {
    pub fn of(runs: &[MetricsReport]) -> Self {
        Self {
            projection_mse: MeanStd::of(runs.iter().map(|r| Some(r.projection_mse))),
            hidden_volume_mse: MeanStd::of(runs.iter().map(|r| Some(r.hidden_volume_mse))),
            accuracy: MeanStd::of(runs.iter().map(|r| Some(r.classification.accuracy))),
            tb_recall: MeanStd::of(runs.iter().map(|r| r.classification.tb_recall)),
            tb_precision: MeanStd::of(runs.iter().map(|r| r.classification.tb_precision)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda4: f64,
    /// One report per seed, in seed order.
    pub runs: Vec<MetricsReport>,
    pub summary: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// The true-volume reference on the same test set.
    pub oracle: MetricsReport,
    pub classifier_val_accuracy: f64,
}

impl AblationResult {
    pub fn row(&self, lambda4: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.lambda4 == lambda4)
    }

    /// Aligned plain-text table, one line per λ4 value plus the oracle.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = ["lambda4", "projection_mse", "volume_mse", "accuracy", "tb_recall", "tb_precision"];
        let mut lines: Vec<[String; 6]> = vec![header.map(String::from)];
        for r in &self.rows {
            let s = &r.summary;
            lines.push([
                format!("{}", r.lambda4),
                s.projection_mse.cell(5),
                s.hidden_volume_mse.cell(5),
                s.accuracy.cell(3),
                s.tb_recall.cell(3),
                s.tb_precision.cell(3),
            ]);
        }
        let o = MetricSummary::of(std::slice::from_ref(&self.oracle));
        lines.push([
            "oracle".into(),
            o.projection_mse.cell(5),
            o.hidden_volume_mse.cell(5),
            o.accuracy.cell(3),
            o.tb_recall.cell(3),
            o.tb_precision.cell(3),
        ]);
        let widths: Vec<usize> = (0..6)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(
            out,
            "seeds: {:?}; test samples: {}; classifier validation accuracy: {:.3}",
            self.seeds, self.oracle.count, self.classifier_val_accuracy
        );
        out
    }
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn seed_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seed = seed;
    c
}

/// Pretrained checkpoint for one seed, reused from `cache` when the stored
/// config matches.
fn cached_pretrain(cfg: &TrainConfig, paired: &PairedDataset, cache: Option<&Path>) -> Result<CheckpointFile> {
    let path = cache.map(|d| {
        d.join(format!(
            "pretrain_n{}_m{}_seed{}.ckpt",
            paired.len(),
            paired.master_seed,
            cfg.seed
        ))
    });
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let file = CheckpointFile::load(p)?;
        if checkpoint_config(&file)? == *cfg {
            log::info!("reusing cached pretrain checkpoint {}", p.display());
            return Ok(file);
        }
    }
    log::info!("pretraining seed {}", cfg.seed);
    let file = pretrain::<f32>(cfg, paired, None)?;
    if let Some(p) = path {
        file.save(&p)?;
    }
    Ok(file)
}

/// Pretrains once per seed, fine-tunes each (λ4, seed) cell from that shared
/// checkpoint and evaluates every cell on the sealed test set.
pub fn run_ablation(cfg: &AblationConfig, data: &AblationData, cache: Option<&Path>) -> Result<AblationResult> {
    cfg.validate()?;
    if let Some(d) = cache {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let clf_data = data.classifier_data.as_ref().unwrap_or(&data.paired);
    let reference = train_classifier(clf_data, &cfg.classifier)?;
    let oracle = OracleReconstructor::from_unpaired(&data.test)?;
    let oracle_report = evaluate_model(&reference.classifier, &oracle, &data.test, cfg.classifier.seed)?;

    // pretraining ignores λ4, so one checkpoint per seed serves every row
    let pretrained = parallel_map(&cfg.seeds, cfg.jobs, |&s| {
        cached_pretrain(&seed_config(&cfg.base, s), &data.paired, cache)
    })?;

    let cells: Vec<(usize, usize)> = (0..cfg.lambda4_values.len())
        .flat_map(|l| (0..cfg.seeds.len()).map(move |s| (l, s)))
        .collect();
    let reports = parallel_map(&cells, cfg.jobs, |&(l, s)| {
        let lambda4 = cfg.lambda4_values[l];
        let seed = cfg.seeds[s];
        let mut c = seed_config(&cfg.base, seed);
        c.weights.lambda4 = lambda4;
        log::info!("fine-tuning lambda4 = {lambda4}, seed {seed}");
        let ckpt = finetune::<f32>(&c, &data.paired, &data.unpaired, &pretrained[s], None)?;
        let g: Generator<f32> = load_generator(&ckpt)?;
        match cfg.classifier.protocol {
            ClassifierProtocol::TrueVolumes => evaluate_model(&reference.classifier, &g, &data.test, seed),
            ClassifierProtocol::Generated => {
                let own = train_classifier(&generated_training_set(clf_data, &g)?, &cfg.classifier)?;
                evaluate_model(&own.classifier, &g, &data.test, seed)
            }
        }
    })?;

    let mut rows: Vec<AblationRow> = cfg
        .lambda4_values
        .iter()
        .map(|&lambda4| AblationRow {
            lambda4,
            runs: Vec::new(),
            summary: MetricSummary::of(&[]),
        })
        .collect();
    for (&(l, _), r) in cells.iter().zip(reports) {
        rows[l].runs.push(r);
    }
    for row in &mut rows {
        row.summary = MetricSummary::of(&row.runs);
    }
    Ok(AblationResult {
        seeds: cfg.seeds.clone(),
        rows,
        oracle: oracle_report,
        classifier_val_accuracy: reference.best_val_accuracy,
    })
}
