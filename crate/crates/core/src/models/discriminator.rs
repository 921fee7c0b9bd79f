use serde::{Deserialize, Serialize};

use super::{apply_act, check_input, check_widths, he_uniform, init_rng, Act, ParamSet};
use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub side: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            side: 32,
            widths: vec![8, 16, 32],
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths, "discriminator")?;
        let f = 1 << self.widths.len();
        if self.side == 0 || !self.side.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "discriminator side {} must be a positive multiple of {f}",
                self.side
            )));
        }
        Ok(())
    }

    /// Side of the output score grid.
    pub fn grid_side(&self) -> usize {
        self.side >> self.widths.len()
    }
}

/// Conditional PatchGAN: scores `[b, 1, g, g, g]` for a volume given its
/// X-ray, which enters as a second channel replicated along depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<E> {
    pub config: DiscriminatorConfig,
    pub params: ParamSet<E>,
}

impl<E: Real> Discriminator<E> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed, 0x44);
        let mut params = ParamSet::default();
        let mut cin = 2;
        for (i, &w) in config.widths.iter().enumerate() {
            params.push(format!("block{i}.w"), he_uniform(&mut rng, &[w, cin, 4, 4, 4], cin * 64));
            params.push(format!("block{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        params.push("head.w", he_uniform(&mut rng, &[1, cin, 3, 3, 3], cin * 27));
        params.push("head.b", Tensor::zeros(&[1]));
        Ok(Self { config, params })
    }

    pub fn forward(&self, tape: &mut Tape<E>, p: &[Var], v: Var, x: Var) -> Result<Var> {
        let side = self.config.side;
        let bv = check_input(tape, v, 5, side, "discriminator volume")?;
        let bx = check_input(tape, x, 4, side, "discriminator x-ray")?;
        contract!(bv == bx, "discriminator: {} volumes but {} x-rays", bv, bx);
        let slope = E::lit(self.config.leaky_slope);
        let cond = tape.broadcast_depth(x, side)?;
        let mut h = tape.concat_channels(v, cond)?;
        for i in 0..self.config.widths.len() {
            let c = tape.conv3d(h, p[2 * i], 2, 1)?;
            let c = tape.channel_bias(c, p[2 * i + 1])?;
            h = apply_act(tape, c, Act::Leaky(slope))?;
        }
        let n = p.len();
        let s = tape.conv3d(h, p[n - 2], 1, 1)?;
        tape.channel_bias(s, p[n - 1])
    }
}
