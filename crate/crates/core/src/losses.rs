//! Generator loss terms, their weighted combination, and the LSGAN
//! discriminator objective. Every norm is a mean over elements.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::projection::{project_node, Plane};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Weights of the adversarial, reconstruction, projection and shape-induction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values. Terms absent from a step are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_lsgan: Option<f64>,
    pub l_re: Option<f64>,
    pub l_pl: Option<f64>,
    pub l_sind: Option<f64>,
    pub l_total: f64,
    /// Discriminator objective of the same step, when D was updated.
    pub l_disc: Option<f64>,
}

impl LossReport {
    /// Weighted sum of the present generator terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        [
            (w.lambda1, self.l_lsgan),
            (w.lambda2, self.l_re),
            (w.lambda3, self.l_pl),
            (w.lambda4, self.l_sind),
        ]
        .iter()
        .filter_map(|&(l, p)| p.map(|p| l * p))
        .sum()
    }

    /// Names and values of the present terms, in a fixed order.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        [
            ("l_lsgan", self.l_lsgan),
            ("l_re", self.l_re),
            ("l_pl", self.l_pl),
            ("l_sind", self.l_sind),
            ("l_disc", self.l_disc),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .chain(std::iter::once(("l_total", self.l_total)))
        .collect()
    }
}

/// Loss nodes feeding [`loss_total`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub lsgan: Option<Var>,
    pub re: Option<Var>,
    pub pl: Option<Var>,
    pub sind: Option<Var>,
}

fn mean_square_error<E: Real>(tape: &mut Tape<E>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn same_shape<E: Real>(tape: &Tape<E>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a)?, tape.shape(b)?);
    contract!(sa == sb, "{what}: shape mismatch {:?} vs {:?}", sa, sb);
    Ok(())
}

/// `0.5 * mean((scores - 1)^2)`.
pub fn loss_lsgan_g<E: Real>(tape: &mut Tape<E>, fake_scores: Var) -> Result<Var> {
    let d = tape.add_scalar(fake_scores, -E::one())?;
    let sq = tape.square(d)?;
    let m = tape.mean(sq)?;
    tape.scale(m, E::lit(0.5))
}

/// Voxel-wise mean squared error between a prediction and ground truth.
pub fn loss_reconstruction<E: Real>(tape: &mut Tape<E>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "loss_reconstruction")?;
    mean_square_error(tape, pred, gt)
}

/// Mean over the three planes of the mean absolute difference of projections.
pub fn loss_projection<E: Real>(tape: &mut Tape<E>, pred: Var, gt: Var) -> Result<Var> {
    same_shape(tape, pred, gt, "loss_projection")?;
    let mut acc: Option<Var> = None;
    for plane in Plane::ALL {
        let pp = project_node(tape, pred, plane)?;
        let pg = project_node(tape, gt, plane)?;
        let d = tape.sub(pp, pg)?;
        let a = tape.abs_val(d)?;
        let m = tape.mean(a)?;
        acc = Some(match acc {
            None => m,
            Some(s) => tape.add(s, m)?,
        });
    }
    tape.scale(acc.expect("three planes"), E::lit(1.0 / 3.0))
}

/// Mean squared error between the coronal projection of `pred` and the
/// input X-ray `x` (`[b, 1, H, W]`).
pub fn loss_shape_induction<E: Real>(tape: &mut Tape<E>, pred: Var, x: Var) -> Result<Var> {
    let proj = project_node(tape, pred, Plane::Coronal)?;
    let (sp, sx) = (tape.shape(proj)?, tape.shape(x)?);
    contract!(
        sp == sx,
        "loss_shape_induction: coronal face {:?} does not match x-ray {:?}",
        sp,
        sx
    );
    mean_square_error(tape, proj, x)
}

/// `0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)`. The caller detaches the
/// fake volume before scoring it, so no gradient reaches the generator.
pub fn loss_discriminator<E: Real>(tape: &mut Tape<E>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let real = loss_lsgan_g(tape, real_scores)?;
    let sq = tape.square(fake_scores)?;
    let m = tape.mean(sq)?;
    let fake = tape.scale(m, E::lit(0.5))?;
    tape.add(real, fake)
}

/// Weighted sum of the present parts, plus a report whose `l_total` is
/// recomputed in 64-bit from the reported parts.
pub fn loss_total<E: Real>(tape: &mut Tape<E>, w: &LossWeights, parts: &LossParts) -> Result<(Var, LossReport)> {
    w.validate()?;
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let terms = [
        (w.lambda1, parts.lsgan, &mut report.l_lsgan),
        (w.lambda2, parts.re, &mut report.l_re),
        (w.lambda3, parts.pl, &mut report.l_pl),
        (w.lambda4, parts.sind, &mut report.l_sind),
    ];
    for (lambda, part, slot) in terms {
        let Some(v) = part else { continue };
        let value = tape.value(v)?;
        contract!(value.rank() == 0, "loss parts must be scalars, got {:?}", value.shape());
        *slot = Some(value.item().as_f64());
        let scaled = tape.scale(v, E::lit(lambda))?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(E::zero())),
    };
    report.l_total = report.weighted_total(w);
    Ok((total, report))
}
