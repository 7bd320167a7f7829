//! Raw compute kernels on flat slices. The autodiff graph wraps these; the
//! topology prior and the metrics use them directly.

use std::borrow::Cow;

use crate::error::{dim_err, param_err, Result};
use crate::scalar::Scalar;

/// Stride / zero padding / dilation for the (T, H, W) axes of a convolution.
/// 2-D convolutions use a unit temporal axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self { stride: [1; 3], padding: [0; 3], dilation: [1; 3] }
    }
}

impl ConvGeometry {
    pub fn planar(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride: [1, stride, stride], padding: [0, padding, padding], dilation: [1, dilation, dilation] }
    }

    /// Zero padding that keeps every axis at its input size for stride 1.
    pub fn same(kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        let mut padding = [0; 3];
        for i in 0..3 {
            padding[i] = dilation[i] * (kernel[i] - 1) / 2;
        }
        Self { stride: [1; 3], padding, dilation }
    }

    fn validate(&self) -> Result<()> {
        if self.stride.iter().any(|&s| s == 0) {
            return Err(param_err!("stride must be >= 1"));
        }
        if self.dilation.iter().any(|&d| d == 0) {
            return Err(param_err!("dilation must be >= 1"));
        }
        Ok(())
    }
}

/// Output shape `(B, Cout, T', H', W')` of a 3-D convolution.
pub fn conv_output_shape(input: [usize; 5], weight: [usize; 5], g: &ConvGeometry) -> Result<[usize; 5]> {
    g.validate()?;
    if input[1] != weight[1] {
        return Err(dim_err!("conv: input has {} channels, weight expects {}", input[1], weight[1]));
    }
    let mut out = [input[0], weight[0], 0, 0, 0];
    for ax in 0..3 {
        let n = input[2 + ax] + 2 * g.padding[ax];
        let span = g.dilation[ax] * (weight[2 + ax] - 1) + 1;
        if span > n {
            return Err(dim_err!(
                "conv: kernel span {span} exceeds padded extent {n} on axis {}",
                ax + 2
            ));
        }
        out[2 + ax] = (n - span) / g.stride[ax] + 1;
    }
    Ok(out)
}

fn is_pointwise(weight: [usize; 5], g: &ConvGeometry) -> bool {
    weight[2..] == [1, 1, 1] && g.stride == [1; 3] && g.padding == [0; 3]
}

struct Im2Col {
    cin: usize,
    inp: [usize; 3],
    ker: [usize; 3],
    out: [usize; 3],
    g: ConvGeometry,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.cin * self.ker.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Visits `(row, col, input offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = self.inp;
        let [kt, kh, kw] = self.ker;
        let [ot, oh, ow] = self.out;
        let g = &self.g;
        let cols = self.cols();
        for ci in 0..self.cin {
            for at in 0..kt {
                for ah in 0..kh {
                    for aw in 0..kw {
                        let row = ((ci * kt + at) * kh + ah) * kw + aw;
                        for zt in 0..ot {
                            let t = (zt * g.stride[0] + at * g.dilation[0]) as isize - g.padding[0] as isize;
                            if t < 0 || t >= it as isize {
                                continue;
                            }
                            for zh in 0..oh {
                                let h = (zh * g.stride[1] + ah * g.dilation[1]) as isize - g.padding[1] as isize;
                                if h < 0 || h >= ih as isize {
                                    continue;
                                }
                                let base_in = ((ci * it + t as usize) * ih + h as usize) * iw;
                                let base_col = row * cols + (zt * oh + zh) * ow;
                                for zw in 0..ow {
                                    let w = (zw * g.stride[2] + aw * g.dilation[2]) as isize - g.padding[2] as isize;
                                    if w < 0 || w >= iw as isize {
                                        continue;
                                    }
                                    f(row, base_col + zw, base_in + w as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<S: Scalar>(&self, x: &[S], col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        self.for_each_tap(|_, c, i| col[c] = x[i]);
    }

    fn scatter<S: Scalar>(&self, col: &[S], dx: &mut [S]) {
        self.for_each_tap(|_, c, i| dx[i] += col[c]);
    }
}

fn plan(input: [usize; 5], weight: [usize; 5], out: [usize; 5], g: &ConvGeometry) -> Im2Col {
    Im2Col {
        cin: input[1],
        inp: [input[2], input[3], input[4]],
        ker: [weight[2], weight[3], weight[4]],
        out: [out[2], out[3], out[4]],
        g: *g,
    }
}

/// 3-D convolution (cross-correlation) forward pass.
pub fn conv3d_forward<S: Scalar>(
    x: &[S],
    input: [usize; 5],
    w: &[S],
    weight: [usize; 5],
    bias: Option<&[S]>,
    g: &ConvGeometry,
) -> Result<(Vec<S>, [usize; 5])> {
    let out = conv_output_shape(input, weight, g)?;
    let p = plan(input, weight, out, g);
    let (k, cols, cout) = (p.rows(), p.cols(), weight[0]);
    let in_per = input[1..].iter().product::<usize>();
    let out_per = cout * cols;
    let mut y = vec![S::zero(); input[0] * out_per];
    let pointwise = is_pointwise(weight, g);
    let mut scratch = if pointwise { Vec::new() } else { vec![S::zero(); k * cols] };
    for b in 0..input[0] {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let col: &[S] = if pointwise {
            xb
        } else {
            p.gather(xb, &mut scratch);
            &scratch
        };
        let yb = &mut y[b * out_per..(b + 1) * out_per];
        if let Some(bias) = bias {
            for (c, chunk) in yb.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[c]);
            }
        }
        let beta = if bias.is_some() { S::one() } else { S::zero() };
        S::gemm(cout, k, cols, S::one(), w, k as isize, 1, col, cols as isize, 1, beta, yb, cols as isize, 1);
    }
    Ok((y, out))
}

/// Gradients of a 3-D convolution. Each output is only computed when asked
/// for; weight and bias gradients are accumulated into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<S: Scalar>(
    x: &[S],
    input: [usize; 5],
    w: &[S],
    weight: [usize; 5],
    g: &ConvGeometry,
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) -> Result<()> {
    let out = conv_output_shape(input, weight, g)?;
    let p = plan(input, weight, out, g);
    let (k, cols, cout) = (p.rows(), p.cols(), weight[0]);
    let in_per = input[1..].iter().product::<usize>();
    let out_per = cout * cols;
    let pointwise = is_pointwise(weight, g);

    if let Some(db) = db {
        for b in 0..input[0] {
            for c in 0..cout {
                let s: S = dy[b * out_per + c * cols..b * out_per + (c + 1) * cols].iter().copied().sum();
                db[c] += s;
            }
        }
    }
    if let Some(dw) = dw {
        let mut scratch = if pointwise { Vec::new() } else { vec![S::zero(); k * cols] };
        for b in 0..input[0] {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let col: Cow<[S]> = if pointwise {
                Cow::Borrowed(xb)
            } else {
                p.gather(xb, &mut scratch);
                Cow::Borrowed(&scratch)
            };
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            // dw (cout x k) += dy_b (cout x cols) * col^T (cols x k)
            S::gemm(cout, cols, k, S::one(), dyb, cols as isize, 1, &col, 1, cols as isize, S::one(), dw, k as isize, 1);
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![S::zero(); k * cols];
        for b in 0..input[0] {
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if pointwise {
                S::gemm(k, cout, cols, S::one(), w, 1, k as isize, dyb, cols as isize, 1, S::one(), dxb, cols as isize, 1);
            } else {
                S::gemm(k, cout, cols, S::one(), w, 1, k as isize, dyb, cols as isize, 1, S::zero(), &mut dcol, cols as isize, 1);
                p.scatter(&dcol, dxb);
            }
        }
    }
    Ok(())
}

fn check_pool_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(param_err!("pooling kernel must be odd, got {k}"));
    }
    Ok(())
}

/// Same-size k x k box average over the last two axes with zero padding and
/// a fixed divisor k². The operator is self-adjoint, so the backward pass
/// is the same call applied to the upstream gradient.
pub fn avg_pool2d<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, k: usize) -> Result<Vec<S>> {
    check_pool_k(k)?;
    let r = (k / 2) as isize;
    let inv = S::one() / S::lit((k * k) as f64);
    let mut y = vec![S::zero(); planes * h * w];
    // separable: rows then columns, each summing k taps
    let mut tmp = vec![S::zero(); h * w];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = S::zero();
                for d in -r..=r {
                    let jj = j as isize + d;
                    if jj >= 0 && jj < w as isize {
                        s += xp[i * w + jj as usize];
                    }
                }
                tmp[i * w + j] = s;
            }
        }
        let yp = &mut y[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = S::zero();
                for d in -r..=r {
                    let ii = i as isize + d;
                    if ii >= 0 && ii < h as isize {
                        s += tmp[ii as usize * w + j];
                    }
                }
                yp[i * w + j] = s * inv;
            }
        }
    }
    Ok(y)
}

/// Block mean over `factor x factor` tiles of the last two axes.
pub fn downsample_mean<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, factor: usize) -> Result<Vec<S>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("{h}x{w} is not divisible by factor {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = S::one() / S::lit((factor * factor) as f64);
    let mut y = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                y[(p * oh + i / factor) * ow + j / factor] += x[(p * h + i) * w + j];
            }
        }
    }
    y.iter_mut().for_each(|v| *v *= inv);
    Ok(y)
}

pub fn downsample_mean_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize, factor: usize, dx: &mut [S]) {
    let (oh, ow) = (h / factor, w / factor);
    let inv = S::one() / S::lit((factor * factor) as f64);
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[(p * h + i) * w + j] += dy[(p * oh + i / factor) * ow + j / factor] * inv;
            }
        }
    }
}

/// Linear interpolation taps `(i0, i1, frac)` mapping `n_out` pixel centres
/// onto `n_in` source centres, clamped at the borders.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Separable linear upsampling of the last two axes to `(oh, ow)`.
pub fn upsample_linear<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<S> {
    let rt = linear_taps(h, oh);
    let ct = linear_taps(w, ow);
    let mut y = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
            let (a0, a1) = (S::lit(1.0 - fr), S::lit(fr));
            for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                let (b0, b1) = (S::lit(1.0 - fc), S::lit(fc));
                let top = xp[r0 * w + c0] * b0 + xp[r0 * w + c1] * b1;
                let bot = xp[r1 * w + c0] * b0 + xp[r1 * w + c1] * b1;
                y[(p * oh + i) * ow + j] = top * a0 + bot * a1;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_linear_backward<S: Scalar>(dy: &[S], planes: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [S]) {
    let rt = linear_taps(h, oh);
    let ct = linear_taps(w, ow);
    for p in 0..planes {
        let dxp = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1, fr)) in rt.iter().enumerate() {
            let (a0, a1) = (S::lit(1.0 - fr), S::lit(fr));
            for (j, &(c0, c1, fc)) in ct.iter().enumerate() {
                let (b0, b1) = (S::lit(1.0 - fc), S::lit(fc));
                let g = dy[(p * oh + i) * ow + j];
                dxp[r0 * w + c0] += g * a0 * b0;
                dxp[r0 * w + c1] += g * a0 * b1;
                dxp[r1 * w + c0] += g * a1 * b0;
                dxp[r1 * w + c1] += g * a1 * b1;
            }
        }
    }
}

/// Zero-padded 3x3 stencil over a single `h x w` plane.
pub fn stencil3x3<S: Scalar>(x: &[S], h: usize, w: usize, kernel: &[[f64; 3]; 3]) -> Vec<S> {
    let mut y = vec![S::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = S::zero();
            for (di, row) in kernel.iter().enumerate() {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for (dj, &kv) in row.iter().enumerate() {
                    let jj = j as isize + dj as isize - 1;
                    if kv == 0.0 || jj < 0 || jj >= w as isize {
                        continue;
                    }
                    s += S::lit(kv) * x[ii as usize * w + jj as usize];
                }
            }
            y[i * w + j] = s;
        }
    }
    y
}
