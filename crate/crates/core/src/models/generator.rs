use serde::{Deserialize, Serialize};

use super::{apply_act, check_input, check_widths, he_uniform, init_rng, Act, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::volume::{stack_xrays, Volume, XrayImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Input image side; the output volume is `side^3`.
    pub side: usize,
    /// Encoder channels per stride-2 level.
    pub widths: Vec<usize>,
    /// Channels of the last decoder block, before the head.
    pub out_width: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            side: 32,
            widths: vec![8, 16, 32],
            out_width: 4,
            leaky_slope: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_widths(&self.widths, "generator")?;
        let levels = self.widths.len();
        if self.out_width == 0 || self.side == 0 || !self.side.is_multiple_of(1 << levels) {
            return Err(Error::Config(format!(
                "generator side {} must be a positive multiple of {}",
                self.side,
                1 << levels
            )));
        }
        Ok(())
    }

    /// Output channels of the decoder block at `level` (0 = full resolution).
    fn up_width(&self, level: usize) -> usize {
        if level == 0 {
            self.out_width
        } else {
            self.widths[level - 1]
        }
    }

    /// Channels of the encoder feature reused as a skip at `level`.
    fn skip_width(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.widths[level - 1]
        }
    }
}

/// X-ray `[b, 1, S, S]` to volume `[b, 1, S, S, S]`.
///
/// Each encoder level halves the image with a 4x4 stride-2 convolution. A 1x1
/// convolution expands the deepest map into `side >> levels` depth slices per
/// channel, then every decoder level doubles
/// the volume with a 2x2x2 transposed convolution and concatenates the
/// depth-replicated encoder map of the same scale (the input X-ray at full
/// scale). A 3x3x3 convolution and a sigmoid produce the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<E> {
    pub config: GeneratorConfig,
    pub params: ParamSet<E>,
}

impl<E: Real> Generator<E> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed, 0x47);
        let mut params = ParamSet::default();
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            params.push(format!("enc{i}.w"), he_uniform(&mut rng, &[w, cin, 4, 4], cin * 16));
            params.push(format!("enc{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        let deep = config.side >> config.widths.len();
        params.push("bridge.w", he_uniform(&mut rng, &[cin * deep, cin, 1, 1], cin));
        params.push("bridge.b", Tensor::zeros(&[cin * deep]));
        for level in (0..config.widths.len()).rev() {
            let out = config.up_width(level);
            params.push(format!("dec{level}.w"), he_uniform(&mut rng, &[cin, out, 2, 2, 2], cin));
            params.push(format!("dec{level}.b"), Tensor::zeros(&[out]));
            cin = out + config.skip_width(level);
        }
        params.push("head.w", he_uniform(&mut rng, &[1, cin, 3, 3, 3], cin * 27));
        params.push("head.b", Tensor::zeros(&[1]));
        Ok(Self { config, params })
    }

    pub fn forward(&self, tape: &mut Tape<E>, p: &[Var], x: Var) -> Result<Var> {
        let side = self.config.side;
        check_input(tape, x, 4, side, "generator")?;
        let slope = E::lit(self.config.leaky_slope);
        let levels = self.config.widths.len();
        let mut k = 0;
        let mut next = || {
            let pair = (p[k], p[k + 1]);
            k += 2;
            pair
        };

        let mut skips = vec![x];
        let mut h = x;
        for _ in 0..levels {
            let (w, b) = next();
            let c = tape.conv2d(h, w, 2, 1)?;
            let c = tape.channel_bias(c, b)?;
            h = apply_act(tape, c, Act::Leaky(slope))?;
            skips.push(h);
        }
        // learned depth expansion: channel c*deep + d becomes depth slice d of channel c
        let deep = side >> levels;
        let (w, b) = next();
        let e = tape.conv2d(h, w, 1, 0)?;
        let e = tape.channel_bias(e, b)?;
        let e = apply_act(tape, e, Act::Leaky(slope))?;
        let s = tape.shape(e)?.to_vec();
        let mut z = tape.reshape(e, &[s[0], s[1] / deep, deep, s[2], s[3]])?;
        for level in (0..levels).rev() {
            let (w, b) = next();
            let u = tape.conv3d_transposed(z, w, 2, 0)?;
            let u = tape.channel_bias(u, b)?;
            let u = apply_act(tape, u, Act::Relu)?;
            let skip = tape.broadcast_depth(skips[level], side >> level)?;
            z = tape.concat_channels(u, skip)?;
        }
        let (w, b) = next();
        let y = tape.conv3d(z, w, 1, 1)?;
        let y = tape.channel_bias(y, b)?;
        apply_act(tape, y, Act::Sigmoid)
    }

    /// Runs the generator on a batch of images outside any training graph.
    pub fn predict(&self, xrays: &[&XrayImage]) -> Result<Vec<Volume>> {
        if xrays.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(stack_xrays::<E>(xrays)?);
        let y = self.forward(&mut tape, &p, x)?;
        let out = tape.value(y)?;
        (0..xrays.len()).map(|i| Volume::from_tensor(out, i)).collect()
    }
}
