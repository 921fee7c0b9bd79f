//! Reconstruction metrics against the sealed ground truth, the downstream
//! classification proxy and the λ4 ablation harness.

mod ablation;
mod classify;

pub use ablation::{run_ablation, AblationConfig, AblationData, AblationResult, AblationRow, MeanStd, MetricSummary};
pub use classify::{
    generated_training_set, train_classifier, ClassifierProtocol, ClassifierTrainConfig, EpochStats, TrainedClassifier,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, Generator};
use crate::phantom::ClassLabel;
use crate::projection::drr;
use crate::tensor::Real;
use crate::volume::{UnpairedXraySet, Volume, XrayImage};

/// Anything that maps X-rays to volumes: a trained generator or a reference model.
pub trait Reconstructor {
    fn reconstruct(&self, xrays: &[&XrayImage]) -> Result<Vec<Volume>>;

    fn reconstruct_all(&self, xrays: &[XrayImage]) -> Result<Vec<Volume>> {
        let mut out = Vec::with_capacity(xrays.len());
        for chunk in xrays.chunks(16) {
            let refs: Vec<&XrayImage> = chunk.iter().collect();
            out.extend(self.reconstruct(&refs)?);
        }
        Ok(out)
    }
}

impl<E: Real> Reconstructor for Generator<E> {
    fn reconstruct(&self, xrays: &[&XrayImage]) -> Result<Vec<Volume>> {
        self.predict(xrays)
    }
}

/// Returns the true volume of each known X-ray (an upper bound for any generator).
#[derive(Clone, Debug)]
pub struct OracleReconstructor {
    pairs: Vec<(XrayImage, Volume)>,
}

impl OracleReconstructor {
    pub fn new(xrays: &[XrayImage], volumes: &[Volume]) -> Result<Self> {
        if xrays.len() != volumes.len() {
            return Err(Error::Evaluation(format!(
                "oracle needs one volume per x-ray ({} vs {})",
                xrays.len(),
                volumes.len()
            )));
        }
        Ok(Self {
            pairs: xrays.iter().cloned().zip(volumes.iter().cloned()).collect(),
        })
    }

    /// Oracle over the sealed side of an unpaired set.
    pub fn from_unpaired(set: &UnpairedXraySet) -> Result<Self> {
        Self::new(set.xrays(), set.hidden_ct())
    }
}

impl Reconstructor for OracleReconstructor {
    fn reconstruct(&self, xrays: &[&XrayImage]) -> Result<Vec<Volume>> {
        xrays
            .iter()
            .map(|x| {
                self.pairs
                    .iter()
                    .find(|(k, _)| k == *x)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::Evaluation("oracle has no volume for this x-ray".into()))
            })
            .collect()
    }
}

/// Returns the same uniform volume for every input.
#[derive(Clone, Copy, Debug)]
pub struct ConstantReconstructor {
    pub side: usize,
    pub value: f32,
}

impl Reconstructor for ConstantReconstructor {
    fn reconstruct(&self, xrays: &[&XrayImage]) -> Result<Vec<Volume>> {
        xrays
            .iter()
            .map(|_| Volume::filled([self.side; 3], self.value))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    /// Mean over the set of the per-pixel MSE between the coronal DRR of G(x) and x.
    pub projection_mse: f64,
    /// Mean over the set of the per-voxel MSE between G(x) and the true volume.
    pub hidden_volume_mse: f64,
    pub count: usize,
}

/// Scores reconstructions against both the inputs and the sealed volumes.
/// This is the one place outside persistence that reads the hidden side.
pub fn eval_reconstruction<R: Reconstructor + ?Sized>(model: &R, set: &UnpairedXraySet) -> Result<ReconstructionMetrics> {
    if set.is_empty() {
        return Err(Error::Evaluation("cannot evaluate on an empty set".into()));
    }
    let truth = set.hidden_ct();
    if truth.len() != set.len() {
        return Err(Error::Evaluation(format!(
            "{} x-rays but {} hidden volumes",
            set.len(),
            truth.len()
        )));
    }
    let preds = model.reconstruct_all(set.xrays())?;
    let (mut proj, mut vol) = (0.0, 0.0);
    for ((p, x), v) in preds.iter().zip(set.xrays()).zip(truth) {
        proj += drr(p).mse(x)?;
        vol += p.mse(v)?;
    }
    let n = set.len() as f64;
    Ok(ReconstructionMetrics {
        projection_mse: proj / n,
        hidden_volume_mse: vol / n,
        count: set.len(),
    })
}

/// Classification scores derived from a confusion matrix (rows = truth, columns = prediction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: [[usize; ClassLabel::COUNT]; ClassLabel::COUNT],
    pub count: usize,
    pub accuracy: f64,
    /// Per class; `None` when the class never occurs in the truth.
    pub recall: [Option<f64>; ClassLabel::COUNT],
    /// Per class; `None` when the class is never predicted.
    pub precision: [Option<f64>; ClassLabel::COUNT],
    pub tb_recall: Option<f64>,
    pub tb_precision: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassificationMetrics {
    pub fn from_confusion(confusion: [[usize; ClassLabel::COUNT]; ClassLabel::COUNT]) -> Result<Self> {
        let count: usize = confusion.iter().flatten().sum();
        if count == 0 {
            return Err(Error::Evaluation("no predictions to score".into()));
        }
        let diag: usize = (0..ClassLabel::COUNT).map(|i| confusion[i][i]).sum();
        let recall = std::array::from_fn(|i| ratio(confusion[i][i], confusion[i].iter().sum()));
        let precision = std::array::from_fn(|j| ratio(confusion[j][j], confusion.iter().map(|r| r[j]).sum()));
        let tb = ClassLabel::Tb.index();
        Ok(Self {
            confusion,
            count,
            accuracy: diag as f64 / count as f64,
            recall,
            precision,
            tb_recall: recall[tb],
            tb_precision: precision[tb],
        })
    }

    pub fn from_predictions(truth: &[ClassLabel], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Evaluation(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = [[0; ClassLabel::COUNT]; ClassLabel::COUNT];
        for (t, &p) in truth.iter().zip(predicted) {
            if p >= ClassLabel::COUNT {
                return Err(Error::Evaluation(format!("predicted class {p} out of range")));
            }
            confusion[t.index()][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Everything measured for one model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub projection_mse: f64,
    pub hidden_volume_mse: f64,
    pub classification: ClassificationMetrics,
    pub count: usize,
    pub seed: u64,
}

/// Classifies the reconstructions of `xrays` and scores them against `labels`.
pub fn eval_generated_classification<E: Real, R: Reconstructor + ?Sized>(
    clf: &Classifier<E>,
    model: &R,
    xrays: &[XrayImage],
    labels: &[ClassLabel],
) -> Result<ClassificationMetrics> {
    if xrays.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} x-rays but {} labels",
            xrays.len(),
            labels.len()
        )));
    }
    let vols = model.reconstruct_all(xrays)?;
    let refs: Vec<&Volume> = vols.iter().collect();
    let predicted = clf.predict(&refs)?;
    ClassificationMetrics::from_predictions(labels, &predicted)
}

/// Reconstruction and classification metrics of `model` on a sealed test set.
pub fn evaluate_model<E: Real, R: Reconstructor + ?Sized>(
    clf: &Classifier<E>,
    model: &R,
    test: &UnpairedXraySet,
    seed: u64,
) -> Result<MetricsReport> {
    let rec = eval_reconstruction(model, test)?;
    let classification = eval_generated_classification(clf, model, test.xrays(), test.hidden_labels())?;
    Ok(MetricsReport {
        projection_mse: rec.projection_mse,
        hidden_volume_mse: rec.hidden_volume_mse,
        classification,
        count: rec.count,
        seed,
    })
}
