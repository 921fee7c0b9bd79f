//! Generator (2D encoder, depth-replicated bridge, 3D decoder), conditional
//! PatchGAN discriminator and the 3D classifier, all as named parameter sets
//! evaluated on a [`Tape`].

mod checkpoint;
mod classifier;
mod discriminator;
mod generator;

pub use checkpoint::{CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{dropout_mask, Classifier, ClassifierConfig};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Real> Default for ParamSet<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<E: Real> ParamSet<E> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<E>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn set_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = E::zero());
        }
    }

    pub fn cast<F: Real>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// `(prefix + name, f32 tensor)` pairs for serialization.
    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), Tensor::cast(t)))
            .collect()
    }

    /// Overwrites values from entries named `prefix + name`; shapes must match.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let full = format!("{prefix}{name}");
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::format("tensor", format!("missing parameter {full}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "tensor",
                    format!("{full} has shape {:?}, model expects {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = Tensor::cast(t);
        }
        Ok(())
    }
}

/// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<E: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| E::lit(rng.random_range(-bound..bound)))
}

pub(crate) fn init_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(crate) fn check_widths(widths: &[usize], what: &str) -> Result<()> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!("{what} widths must be non-empty and positive")));
    }
    Ok(())
}

pub(crate) enum Act<E> {
    Relu,
    Leaky(E),
    Sigmoid,
}

pub(crate) fn apply_act<E: Real>(tape: &mut Tape<E>, x: Var, act: Act<E>) -> Result<Var> {
    match act {
        Act::Relu => tape.relu(x),
        Act::Leaky(s) => tape.leaky_relu(x, s),
        Act::Sigmoid => tape.sigmoid(x),
    }
}

/// Checks a `[b, 1, ...]` input against the configured side on its last `rank - 2` axes.
pub(crate) fn check_input<E: Real>(tape: &Tape<E>, x: Var, rank: usize, side: usize, what: &str) -> Result<usize> {
    let s = tape.shape(x)?;
    contract!(
        s.len() == rank && s[1] == 1 && s[2..].iter().all(|&d| d == side),
        "{what}: expected [batch, 1] followed by {} axes of {side}, got {:?}",
        rank - 2,
        s
    );
    Ok(s[0])
}

#[cfg(test)]
mod tests;
