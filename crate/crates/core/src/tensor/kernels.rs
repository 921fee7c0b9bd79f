//! Raw-slice kernels behind the differentiable ops.
//!
//! Convolutions are lowered to GEMM through im2col. Every spatial op is
//! expressed in three spatial axes; 2D convolutions run with a unit depth axis.

use super::Real;
use crate::error::{contract, Result};

/// Geometry of a strided, zero-padded 3D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            contract!(stride[a] >= 1, "stride must be >= 1");
            contract!(kernel[a] >= 1, "kernel extent must be >= 1");
            let padded = in_dims[a] + 2 * pad[a];
            contract!(
                kernel[a] <= padded,
                "kernel extent {} exceeds padded input extent {} on axis {}",
                kernel[a],
                padded,
                a
            );
            out_dims[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        })
    }

    /// Geometry whose *output* has extent `in_dims` and whose input is
    /// produced by the matching transposed convolution.
    pub fn transposed(
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut full = [0; 3];
        for a in 0..3 {
            contract!(stride[a] >= 1, "stride must be >= 1");
            contract!(in_dims[a] >= 1, "empty spatial axis");
            let span = (in_dims[a] - 1) * stride[a] + kernel[a];
            contract!(
                span > 2 * pad[a],
                "transposed convolution output would be empty on axis {}",
                a
            );
            full[a] = span - 2 * pad[a];
        }
        let g = Self::new(full, kernel, stride, pad)?;
        debug_assert_eq!(g.out_dims, in_dims);
        Ok(g)
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Maps an output coordinate plus kernel offset back to an input coordinate.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < extent {
        Some(i as usize)
    } else {
        None
    }
}

/// Gathers patches of `channels` input planes into a `[channels*kvol, out_len]` matrix.
pub(crate) fn im2col<E: Real>(g: &ConvGeom, input: &[E], channels: usize, cols: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let n = g.out_len();
    let plane = id * ih * iw;
    let mut row = 0;
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut p = 0;
                    for oz in 0..od {
                        let iz = source(oz, kz, g.stride[0], g.pad[0], id);
                        for oy in 0..oh {
                            let iy = source(oy, ky, g.stride[1], g.pad[1], ih);
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let base = (iz * ih + iy) * iw;
                                    for ox in 0..ow {
                                        dst[p] = match source(ox, kx, g.stride[2], g.pad[2], iw) {
                                            Some(ix) => src[base + ix],
                                            None => E::zero(),
                                        };
                                        p += 1;
                                    }
                                }
                                _ => {
                                    dst[p..p + ow].fill(E::zero());
                                    p += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a `[channels*kvol, out_len]` matrix back onto input planes.
pub(crate) fn col2im<E: Real>(g: &ConvGeom, cols: &[E], channels: usize, out: &mut [E]) {
    let [id, ih, iw] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out_dims;
    let n = g.out_len();
    let plane = id * ih * iw;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * n..(row + 1) * n];
                    let mut p = 0;
                    for oz in 0..od {
                        let iz = source(oz, kz, g.stride[0], g.pad[0], id);
                        for oy in 0..oh {
                            let iy = source(oy, ky, g.stride[1], g.pad[1], ih);
                            if let (Some(iz), Some(iy)) = (iz, iy) {
                                let base = (iz * ih + iy) * iw;
                                for ox in 0..ow {
                                    if let Some(ix) = source(ox, kx, g.stride[2], g.pad[2], iw) {
                                        dst[base + ix] = dst[base + ix] + src[p];
                                    }
                                    p += 1;
                                }
                            } else {
                                p += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation: input `[batch, cin, in..]`, kernel `[cout, cin, k..]`.
pub(crate) fn conv_forward<E: Real>(
    g: &ConvGeom,
    input: &[E],
    batch: usize,
    cin: usize,
    kernel: &[E],
    cout: usize,
) -> Vec<E> {
    let rows = cin * g.kvol();
    let n = g.out_len();
    let in_stride = cin * g.in_len();
    let mut out = vec![E::zero(); batch * cout * n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); rows * n]
    };
    for b in 0..batch {
        let x = &input[b * in_stride..(b + 1) * in_stride];
        let patches: &[E] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, cin, &mut cols);
            &cols
        };
        let y = &mut out[b * cout * n..(b + 1) * cout * n];
        E::gemm(
            cout,
            rows,
            n,
            E::one(),
            kernel,
            rows as isize,
            1,
            patches,
            n as isize,
            1,
            E::zero(),
            y,
            n as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv_forward`] with respect to its input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<E: Real>(
    g: &ConvGeom,
    input: &[E],
    batch: usize,
    cin: usize,
    kernel: &[E],
    cout: usize,
    grad_out: &[E],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let rows = cin * g.kvol();
    let n = g.out_len();
    let in_stride = cin * g.in_len();
    let mut d_input = need_input.then(|| vec![E::zero(); batch * in_stride]);
    let mut d_kernel = need_kernel.then(|| vec![E::zero(); cout * rows]);
    let mut cols = vec![E::zero(); rows * n];
    for b in 0..batch {
        let gy = &grad_out[b * cout * n..(b + 1) * cout * n];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[b * in_stride..(b + 1) * in_stride], cin, &mut cols);
            // dK[cout, rows] += dY[cout, n] * cols^T
            E::gemm(
                cout,
                n,
                rows,
                E::one(),
                gy,
                n as isize,
                1,
                &cols,
                1,
                n as isize,
                E::one(),
                dk,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols[rows, n] = K^T * dY
            E::gemm(
                rows,
                cout,
                n,
                E::one(),
                kernel,
                1,
                rows as isize,
                gy,
                n as isize,
                1,
                E::zero(),
                &mut cols,
                n as isize,
                1,
            );
            col2im(g, &cols, cin, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (d_input, d_kernel)
}

/// Transposed convolution: input `[batch, cin, small..]`, kernel `[cin, cout, k..]`.
/// `g` describes the forward convolution from the large output to the small input.
pub(crate) fn conv_t_forward<E: Real>(
    g: &ConvGeom,
    input: &[E],
    batch: usize,
    cin: usize,
    kernel: &[E],
    cout: usize,
) -> Vec<E> {
    let rows = cout * g.kvol();
    let n = g.out_len();
    let big = g.in_len();
    let mut out = vec![E::zero(); batch * cout * big];
    let mut cols = vec![E::zero(); rows * n];
    for b in 0..batch {
        let x = &input[b * cin * n..(b + 1) * cin * n];
        // cols[rows, n] = Kmat^T * x, Kmat = [cin, rows]
        E::gemm(
            rows,
            cin,
            n,
            E::one(),
            kernel,
            1,
            rows as isize,
            x,
            n as isize,
            1,
            E::zero(),
            &mut cols,
            n as isize,
            1,
        );
        col2im(g, &cols, cout, &mut out[b * cout * big..(b + 1) * cout * big]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<E: Real>(
    g: &ConvGeom,
    input: &[E],
    batch: usize,
    cin: usize,
    kernel: &[E],
    cout: usize,
    grad_out: &[E],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let rows = cout * g.kvol();
    let n = g.out_len();
    let big = g.in_len();
    let mut d_input = need_input.then(|| vec![E::zero(); batch * cin * n]);
    let mut d_kernel = need_kernel.then(|| vec![E::zero(); cin * rows]);
    let mut cols = vec![E::zero(); rows * n];
    for b in 0..batch {
        im2col(g, &grad_out[b * cout * big..(b + 1) * cout * big], cout, &mut cols);
        if let Some(dx) = d_input.as_mut() {
            E::gemm(
                cin,
                rows,
                n,
                E::one(),
                kernel,
                rows as isize,
                1,
                &cols,
                n as isize,
                1,
                E::zero(),
                &mut dx[b * cin * n..(b + 1) * cin * n],
                n as isize,
                1,
            );
        }
        if let Some(dk) = d_kernel.as_mut() {
            let x = &input[b * cin * n..(b + 1) * cin * n];
            E::gemm(
                cin,
                n,
                rows,
                E::one(),
                x,
                n as isize,
                1,
                &cols,
                1,
                n as isize,
                E::one(),
                dk,
                rows as isize,
                1,
            );
        }
    }
    (d_input, d_kernel)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Arithmetic mean over the middle extent: sums in index order, then divides.
pub(crate) fn mean_axis<E: Real>(data: &[E], outer: usize, len: usize, inner: usize) -> Vec<E> {
    let mut out = vec![E::zero(); outer * inner];
    let denom = E::lit(len as f64);
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for k in 0..len {
            let row = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (a, &x) in acc.iter_mut().zip(row) {
                *a = *a + x;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
    }
    out
}
