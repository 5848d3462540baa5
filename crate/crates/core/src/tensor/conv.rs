//! Convolution, batch normalization and pooling on `[N, C, H, W]` tensors.

use std::sync::Arc;

use super::gemm::{gemm_f64, GemmOp};
use super::{Result, Tape, Tensor, TensorError};

/// Stride, zero padding and channel grouping of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// `floor((size + 2p - k) / stride) + 1`, or `None` when the kernel does
    /// not fit.
    pub fn output_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.c / self.groups
    }
    fn cout_g(&self) -> usize {
        self.o / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    /// Input coordinate for output position `o` and kernel offset `k`.
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

/// Unfolds the input channels of group `gi` into `[patch, N*Ho*Wo]`.
fn im2col(x: &[f32], g: &Geometry, gi: usize) -> Vec<f64> {
    let cols = g.cols();
    let hw_out = g.ho * g.wo;
    let mut out = vec![0.0f64; g.patch() * cols];
    for ci in 0..g.cin_g() {
        let c = gi * g.cin_g() + ci;
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else {
                            continue;
                        };
                        let base = n * hw_out + oy * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                dst[base + ox] = f64::from(plane[iy * g.w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds `[patch, N*Ho*Wo]` column gradients back onto the input of group `gi`.
fn col2im(cols_grad: &[f64], g: &Geometry, gi: usize, gx: &mut [f64]) {
    let cols = g.cols();
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin_g() {
        let c = gi * g.cin_g() + ci;
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let Some(iy) = g.src(oy, i, g.h) else {
                            continue;
                        };
                        let base = n * hw_out + oy * g.wo;
                        for ox in 0..g.wo {
                            if let Some(ix) = g.src(ox, j, g.w) {
                                gx[off + iy * g.w + ix] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &Geometry) -> Vec<f32> {
    let hw_out = g.ho * g.wo;
    let mut out = vec![0.0f32; g.n * g.o * hw_out];
    if g.is_depthwise() {
        for n in 0..g.n {
            for c in 0..g.c {
                let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                let b = bias.map_or(0.0, |b| f64::from(b[c]));
                let dst = &mut out[(n * g.o + c) * hw_out..(n * g.o + c + 1) * hw_out];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0f64;
                        for i in 0..g.kh {
                            let Some(iy) = g.src(oy, i, g.h) else {
                                continue;
                            };
                            for j in 0..g.kw {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    acc += f64::from(kern[i * g.kw + j])
                                        * f64::from(plane[iy * g.w + ix]);
                                }
                            }
                        }
                        dst[oy * g.wo + ox] = (acc + b) as f32;
                    }
                }
            }
        }
        return out;
    }
    let (patch, cols, cout_g) = (g.patch(), g.cols(), g.cout_g());
    for gi in 0..g.groups {
        let unfolded = im2col(x, g, gi);
        let wg: Vec<f64> = w[gi * cout_g * patch..(gi + 1) * cout_g * patch]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let mut y = vec![0.0f64; cout_g * cols];
        gemm_f64(
            GemmOp::N,
            GemmOp::N,
            cout_g,
            cols,
            patch,
            &wg,
            &unfolded,
            0.0,
            &mut y,
        );
        for oc in 0..cout_g {
            let o = gi * cout_g + oc;
            let b = bias.map_or(0.0, |b| f64::from(b[o]));
            for n in 0..g.n {
                let src = &y[oc * cols + n * hw_out..oc * cols + (n + 1) * hw_out];
                let dst = &mut out[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s + b) as f32;
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for the requested inputs.
fn conv_backward(
    gy: &[f32],
    x: &[f32],
    w: &[f32],
    g: &Geometry,
    needs: (bool, bool, bool),
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let hw_out = g.ho * g.wo;
    let gb = needs.2.then(|| {
        (0..g.o)
            .map(|o| {
                (0..g.n)
                    .flat_map(|n| gy[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out].iter())
                    .map(|&v| f64::from(v))
                    .sum::<f64>() as f32
            })
            .collect()
    });
    let mut gx = needs.0.then(|| vec![0.0f64; x.len()]);
    let mut gw = needs.1.then(|| vec![0.0f64; w.len()]);

    if g.is_depthwise() {
        for n in 0..g.n {
            for c in 0..g.c {
                let xoff = (n * g.c + c) * g.h * g.w;
                let gyp = &gy[(n * g.o + c) * hw_out..(n * g.o + c + 1) * hw_out];
                let koff = c * g.kh * g.kw;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let d = f64::from(gyp[oy * g.wo + ox]);
                        if d == 0.0 {
                            continue;
                        }
                        for i in 0..g.kh {
                            let Some(iy) = g.src(oy, i, g.h) else {
                                continue;
                            };
                            for j in 0..g.kw {
                                let Some(ix) = g.src(ox, j, g.w) else {
                                    continue;
                                };
                                let xi = xoff + iy * g.w + ix;
                                let ki = koff + i * g.kw + j;
                                if let Some(gw) = gw.as_mut() {
                                    gw[ki] += d * f64::from(x[xi]);
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += d * f64::from(w[ki]);
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let (patch, cols, cout_g) = (g.patch(), g.cols(), g.cout_g());
        for gi in 0..g.groups {
            let mut gyg = vec![0.0f64; cout_g * cols];
            for oc in 0..cout_g {
                let o = gi * cout_g + oc;
                for n in 0..g.n {
                    let src = &gy[(n * g.o + o) * hw_out..(n * g.o + o + 1) * hw_out];
                    let dst = &mut gyg[oc * cols + n * hw_out..oc * cols + (n + 1) * hw_out];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = f64::from(s);
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                let unfolded = im2col(x, g, gi);
                let dst = &mut gw[gi * cout_g * patch..(gi + 1) * cout_g * patch];
                gemm_f64(
                    GemmOp::N,
                    GemmOp::T,
                    cout_g,
                    patch,
                    cols,
                    &gyg,
                    &unfolded,
                    0.0,
                    dst,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let wg: Vec<f64> = w[gi * cout_g * patch..(gi + 1) * cout_g * patch]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                let mut gcols = vec![0.0f64; patch * cols];
                gemm_f64(
                    GemmOp::T,
                    GemmOp::N,
                    patch,
                    cols,
                    cout_g,
                    &wg,
                    &gyg,
                    0.0,
                    &mut gcols,
                );
                col2im(&gcols, g, gi, gx);
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    (gx.map(to32), gw.map(to32), gb)
}

/// Statistics of one training-mode batch-norm call: per-channel mean and
/// unbiased variance over `N*H*W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Normalization source for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics (a fixed affine map).
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

impl Tape {
    /// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C/groups, kh, kw]`.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        spec: Conv2dSpec,
    ) -> Result<Tensor> {
        let shape_err = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.ndim() != 4 || w.ndim() != 4 || spec.groups == 0 || spec.stride == 0 {
            return Err(shape_err());
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if c % spec.groups != 0 || o % spec.groups != 0 || cin_g != c / spec.groups {
            return Err(shape_err());
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, kh), spec.output_size(wd, kw)) else {
            return Err(shape_err());
        };
        let geo = Geometry {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
            groups: spec.groups,
        };
        let out = conv_forward(x.data(), w.data(), bias.map(|b| b.data()), &geo);
        let (xd, wdata) = (Arc::clone(&x.data), Arc::clone(&w.data));
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record(
            "conv2d",
            vec![n, o, ho, wo],
            out,
            &inputs,
            move |gy, needs| {
                let nb = needs.get(2).copied().unwrap_or(false);
                let (gx, gw, gb) = conv_backward(gy, &xd, &wdata, &geo, (needs[0], needs[1], nb));
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(gb);
                }
                grads
            },
        )
    }

    /// Per-channel batch normalization of `[N, C, H, W]`.
    ///
    /// In training mode the returned [`BatchStats`] carry the batch mean and
    /// unbiased variance so the caller can update running statistics.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mode: BatchNormMode<'_>,
        eps: f32,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        if x.ndim() != 4 || gamma.shape() != [x.shape()[1]] || beta.shape() != gamma.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = x.shape()[2] * x.shape()[3];
        let count = n * hw;
        let xd = x.data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(TensorError::InvalidArgument {
                        op: "batch_norm",
                        reason: "training mode needs more than one value per channel".into(),
                    });
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let vals =
                        (0..n).flat_map(|s| xd[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter());
                    let m = vals.clone().map(|&v| f64::from(v)).sum::<f64>() / count as f64;
                    let v = vals.map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    var: var
                        .iter()
                        .map(|&v| (v * count as f64 / (count - 1) as f64) as f32)
                        .collect(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(TensorError::InvalidArgument {
                        op: "batch_norm",
                        reason: format!("running statistics must have {c} channels"),
                    });
                }
                (
                    running_mean.iter().map(|&v| f64::from(v)).collect(),
                    running_var.iter().map(|&v| f64::from(v)).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| 1.0 / (v + f64::from(eps)).sqrt())
            .collect();
        let mut xhat = vec![0.0f64; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let (gm, bt) = (f64::from(gamma.data()[ch]), f64::from(beta.data()[ch]));
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in range {
                    let h = (f64::from(xd[i]) - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = (gm * h + bt) as f32;
                }
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let gamma_d = Arc::clone(&gamma.data);
        let y = self.record(
            "batch_norm",
            x.shape().to_vec(),
            out,
            &[x, gamma, beta],
            move |gy, needs| {
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            let g = f64::from(gy[i]);
                            sum_g[ch] += g;
                            sum_gx[ch] += g * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0f32; gy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = f64::from(gamma_d[ch]) * inv_std[ch];
                            let (mg, mgx) = (sum_g[ch] / count as f64, sum_gx[ch] / count as f64);
                            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                let g = f64::from(gy[i]);
                                gx[i] = if train {
                                    (scale * (g - mg - xhat[i] * mgx)) as f32
                                } else {
                                    (scale * g) as f32
                                };
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    needs[1].then(|| sum_gx.iter().map(|&v| v as f32).collect()),
                    needs[2].then(|| sum_g.iter().map(|&v| v as f32).collect()),
                ]
            },
        )?;
        Ok((y, stats))
    }

    /// Spatial mean of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[2] * x.shape()[3] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                reason: format!("expected non-empty [N, C, H, W], got {:?}", x.shape()),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32)
            .collect();
        self.record("global_avg_pool", vec![n, c], out, &[x], move |g, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &v in g {
                gx.extend(std::iter::repeat_n((f64::from(v) / hw as f64) as f32, hw));
            }
            vec![Some(gx)]
        })
    }
}
