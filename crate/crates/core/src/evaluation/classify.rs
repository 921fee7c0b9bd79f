use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Reconstructor;
use crate::error::{Error, Result};
use crate::models::{dropout_mask, Classifier, ClassifierConfig};
use crate::phantom::ClassLabel;
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::training::split_validation;
use crate::volume::{stack_volumes, PairedDataset, PairedSample, Volume, XrayImage};

/// Which volumes the proxy classifier is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierProtocol {
    /// Train once on true CT volumes and test on generated ones.
    #[default]
    TrueVolumes,
    /// Train on each model's own reconstructions of the paired X-rays.
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub model: ClassifierConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub protocol: ClassifierProtocol,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            model: ClassifierConfig::default(),
            epochs: 15,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            validation_fraction: 0.2,
            protocol: ClassifierProtocol::TrueVolumes,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("classifier batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("classifier lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("classifier validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    /// The best-by-validation snapshot.
    pub classifier: Classifier<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochStats>,
}

fn accuracy(clf: &Classifier<f32>, ds: &PairedDataset) -> Result<f64> {
    let vols: Vec<&Volume> = ds.samples.iter().map(|s| &s.ct).collect();
    let pred = clf.predict(&vols)?;
    let hits = pred.iter().zip(&ds.samples).filter(|(p, s)| **p == s.label.index()).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Replaces every CT of `ds` by the model's reconstruction of its X-ray.
pub fn generated_training_set<R: Reconstructor + ?Sized>(ds: &PairedDataset, model: &R) -> Result<PairedDataset> {
    let xrays: Vec<XrayImage> = ds.samples.iter().map(|s| s.xray.clone()).collect();
    let vols = model.reconstruct_all(&xrays)?;
    Ok(PairedDataset {
        samples: ds
            .samples
            .iter()
            .zip(vols)
            .map(|(s, ct)| PairedSample {
                xray: s.xray.clone(),
                ct,
                label: s.label,
            })
            .collect(),
        master_seed: ds.master_seed,
    })
}

/// Cross-entropy training on the volumes of `ds`; returns the epoch with the
/// best validation accuracy (earliest on ties).
pub fn train_classifier(ds: &PairedDataset, cfg: &ClassifierTrainConfig) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let (train, val) = split_validation(ds, cfg.validation_fraction, cfg.seed);
    let mut counts = [0usize; ClassLabel::COUNT];
    for s in &train.samples {
        counts[s.label.index()] += 1;
    }
    for c in ClassLabel::ALL {
        match counts[c.index()] {
            0 => {
                return Err(Error::Config(format!(
                    "class {} is absent from the classifier training set",
                    c.name()
                )))
            }
            n if n < 30 => log::warn!("only {n} training samples of class {}", c.name()),
            _ => {}
        }
    }
    let val = if val.is_empty() { train.clone() } else { val };

    let mut clf = Classifier::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &clf.params.shapes(),
    );
    let names = clf.params.names().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636c_6173_7369_6679);
    let mut best: Option<(usize, f64, Classifier<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let vols: Vec<&Volume> = idx.iter().map(|&i| &train.samples[i].ct).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train.samples[i].label.index()).collect();
            tape.reset();
            let p = clf.params.bind(&mut tape, true);
            let v = tape.constant(stack_volumes::<f32>(&vols)?);
            let mask = (cfg.model.dropout > 0.0).then(|| {
                tape.constant(dropout_mask(&mut rng, idx.len(), cfg.model.hidden, cfg.model.dropout))
            });
            let logits = clf.logits(&mut tape, &p, v, mask)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss)?.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch as u64,
                    term: "classifier cross-entropy".into(),
                    max_grad: f64::NAN,
                });
            }
            loss_sum += value * idx.len() as f64;
            let mut g = tape.backward(loss)?;
            let grads = p
                .iter()
                .map(|&v| g.take(v).ok_or_else(|| Error::Evaluation("missing classifier gradient".into())))
                .collect::<Result<Vec<_>>>()?;
            opt.step(clf.params.tensors_mut(), &grads, &names)?;
        }
        let val_accuracy = accuracy(&clf, &val)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
        });
        log::debug!("classifier epoch {epoch}: val accuracy {val_accuracy:.3}");
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, clf.clone()));
        }
    }
    let (best_epoch, best_val_accuracy, classifier) = match best {
        Some(b) => b,
        None => (0, accuracy(&clf, &val)?, clf),
    };
    Ok(TrainedClassifier {
        classifier,
        best_epoch,
        best_val_accuracy,
        history,
    })
}
