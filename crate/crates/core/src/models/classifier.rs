use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, check_widths, he_uniform, init_rng, ParamSet};
use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::volume::{stack_volumes, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub side: usize,
    /// Channels of the four stride-2 convolution blocks.
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            side: 32,
            widths: vec![8, 16, 32, 64],
            hidden: 512,
            dropout: 0.5,
            classes: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths, "classifier")?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.hidden == 0 || self.classes < 2 || self.side == 0 {
            return Err(Error::Config("classifier needs hidden >= 1, classes >= 2, side >= 1".into()));
        }
        Ok(())
    }
}

/// Conv blocks, global average pooling, FC-hidden, dropout, FC-classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<E> {
    pub config: ClassifierConfig,
    pub params: ParamSet<E>,
}

/// Inverted-dropout mask `[batch, hidden]`: kept units are scaled by `1 / (1 - p)`.
pub fn dropout_mask<E: Real>(rng: &mut ChaCha8Rng, batch: usize, hidden: usize, p: f64) -> Tensor<E> {
    let keep = E::lit(1.0 / (1.0 - p));
    Tensor::from_fn(&[batch, hidden], |_| if rng.random::<f64>() < p { E::zero() } else { keep })
}

impl<E: Real> Classifier<E> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed, 0x43);
        let mut params = ParamSet::default();
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            params.push(format!("conv{i}.w"), he_uniform(&mut rng, &[w, cin, 3, 3, 3], cin * 27));
            params.push(format!("conv{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        params.push("fc1.w", he_uniform(&mut rng, &[cin, config.hidden], cin));
        params.push("fc1.b", Tensor::zeros(&[config.hidden]));
        params.push("fc2.w", he_uniform(&mut rng, &[config.hidden, config.classes], config.hidden));
        params.push("fc2.b", Tensor::zeros(&[config.classes]));
        Ok(Self { config, params })
    }

    /// Class logits `[b, classes]`; `mask` applies dropout after the hidden layer.
    pub fn logits(&self, tape: &mut Tape<E>, p: &[Var], v: Var, mask: Option<Var>) -> Result<Var> {
        let b = check_input(tape, v, 5, self.config.side, "classifier")?;
        let mut h = v;
        for i in 0..self.config.widths.len() {
            let c = tape.conv3d(h, p[2 * i], 2, 1)?;
            let c = tape.channel_bias(c, p[2 * i + 1])?;
            h = tape.relu(c)?;
        }
        let s = tape.shape(h)?.to_vec();
        let flat = tape.reshape(h, &[s[0], s[1], s[2] * s[3] * s[4]])?;
        let pooled = tape.mean_along_axis(flat, 2)?;
        let k = 2 * self.config.widths.len();
        let f = tape.matmul(pooled, p[k])?;
        let f = tape.channel_bias(f, p[k + 1])?;
        let mut f = tape.relu(f)?;
        if let Some(m) = mask {
            let ms = tape.shape(m)?;
            contract!(
                ms == [b, self.config.hidden],
                "dropout mask {:?} does not match [{}, {}]",
                ms,
                b,
                self.config.hidden
            );
            f = tape.mul(f, m)?;
        }
        let o = tape.matmul(f, p[k + 2])?;
        tape.channel_bias(o, p[k + 3])
    }

    /// Class probabilities `[b, classes]` in inference mode.
    pub fn forward(&self, tape: &mut Tape<E>, p: &[Var], v: Var) -> Result<Var> {
        let l = self.logits(tape, p, v, None)?;
        tape.softmax(l)
    }

    /// Probability vectors for a set of volumes, evaluated in chunks.
    pub fn predict_proba(&self, vols: &[&Volume]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(vols.len());
        let mut tape = Tape::new();
        for chunk in vols.chunks(16) {
            tape.reset();
            let p = self.params.bind(&mut tape, false);
            let v = tape.constant(stack_volumes::<E>(chunk)?);
            let probs = self.forward(&mut tape, &p, v)?;
            let t = tape.value(probs)?;
            out.extend(
                t.data()
                    .chunks(self.config.classes)
                    .map(|r| r.iter().map(|x| x.as_f64()).collect()),
            );
        }
        Ok(out)
    }

    /// Arg-max class per volume; ties go to the lower index.
    pub fn predict(&self, vols: &[&Volume]) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(vols)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
