//! Differentiable primitives.
//!
//! Broadcasting: binary elementwise ops accept a right operand of the same
//! rank whose shape matches the left operand on a leading prefix and is 1 on
//! every remaining (trailing) axis, e.g. `[N, C, H, W] op [N, C, 1, 1]`.
//! The output always has the left operand's shape.

use std::sync::Arc;

use super::gemm::{gemm_f64, GemmOp};
use super::{Result, Tape, Tensor, TensorError};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// Number of consecutive lhs elements that share one rhs element.
fn broadcast_block(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape == b.shape {
        return Ok(1);
    }
    if a.ndim() != b.ndim() {
        return Err(shape_err(op, a, b));
    }
    let p = a
        .shape
        .iter()
        .zip(&b.shape)
        .position(|(x, y)| x != y)
        .unwrap_or(a.ndim());
    if b.shape[p..].iter().any(|&d| d != 1) {
        return Err(shape_err(op, a, b));
    }
    Ok(a.shape[p..].iter().product())
}

fn reduce_blocks(g: &[f32], block: usize) -> Vec<f32> {
    g.chunks(block)
        .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect()
}

fn unary_grad(g: &[f32], f: impl Fn(usize, f32) -> f32) -> Vec<Option<Vec<f32>>> {
    vec![Some(
        g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect(),
    )]
}

impl Tape {
    /// Elementwise `a + b` with trailing-singleton broadcasting of `b`.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let block = broadcast_block("add", a, b)?;
        let (ad, bd) = (&a.data, &b.data);
        let data = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i / block])
            .collect();
        self.record("add", a.shape.clone(), data, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_blocks(g, block)),
            ]
        })
    }

    /// Elementwise `a - b` with trailing-singleton broadcasting of `b`.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let block = broadcast_block("sub", a, b)?;
        let (ad, bd) = (&a.data, &b.data);
        let data = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x - bd[i / block])
            .collect();
        self.record("sub", a.shape.clone(), data, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| reduce_blocks(g, block).into_iter().map(|v| -v).collect()),
            ]
        })
    }

    /// Elementwise `a * b` with trailing-singleton broadcasting of `b`.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let block = broadcast_block("mul", a, b)?;
        let (ad, bd) = (Arc::clone(&a.data), Arc::clone(&b.data));
        let data = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i / block])
            .collect();
        self.record("mul", a.shape.clone(), data, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                g.iter()
                    .enumerate()
                    .map(|(i, &v)| v * bd[i / block])
                    .collect()
            });
            let gb = needs[1].then(|| {
                g.chunks(block)
                    .zip(ad.chunks(block))
                    .map(|(gc, ac)| {
                        gc.iter()
                            .zip(ac)
                            .map(|(&x, &y)| f64::from(x) * f64::from(y))
                            .sum::<f64>() as f32
                    })
                    .collect()
            });
            vec![ga, gb]
        })
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&self, a: &Tensor, scale: f32, shift: f32) -> Result<Tensor> {
        let data = a.data.iter().map(|&x| scale * x + shift).collect();
        self.record("affine", a.shape.clone(), data, &[a], move |g, _| {
            unary_grad(g, |_, v| v * scale)
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let a64 = a.to_f64_vec();
        let b64 = b.to_f64_vec();
        let mut c = vec![0.0f64; m * n];
        gemm_f64(GemmOp::N, GemmOp::N, m, n, k, &a64, &b64, 0.0, &mut c);
        let data = c.iter().map(|&v| v as f32).collect();
        self.record("matmul", vec![m, n], data, &[a, b], move |g, needs| {
            let g64: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
            let ga = needs[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm_f64(GemmOp::N, GemmOp::T, m, k, n, &g64, &b64, 0.0, &mut out);
                out.into_iter().map(|v| v as f32).collect()
            });
            let gb = needs[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm_f64(GemmOp::T, GemmOp::N, k, n, m, &a64, &g64, 0.0, &mut out);
                out.into_iter().map(|v| v as f32).collect()
            });
            vec![ga, gb]
        })
    }

    /// `x · wᵀ + bias` for `x: [N, in]`, `w: [out, in]`, `bias: [out]`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if x.ndim() != 2 || w.ndim() != 2 || x.shape[1] != w.shape[1] {
            return Err(shape_err("linear", x, w));
        }
        let (n, fin, fout) = (x.shape[0], x.shape[1], w.shape[0]);
        if let Some(b) = bias {
            if b.shape != [fout] {
                return Err(shape_err("linear", w, b));
            }
        }
        let x64 = x.to_f64_vec();
        let w64 = w.to_f64_vec();
        let mut y = vec![0.0f64; n * fout];
        if let Some(b) = bias {
            for row in y.chunks_mut(fout) {
                for (v, &bv) in row.iter_mut().zip(b.data.iter()) {
                    *v = f64::from(bv);
                }
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm_f64(GemmOp::N, GemmOp::T, n, fout, fin, &x64, &w64, beta, &mut y);
        let data = y.iter().map(|&v| v as f32).collect();
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.record("linear", vec![n, fout], data, &inputs, move |g, needs| {
            let g64: Vec<f64> = g.iter().map(|&v| f64::from(v)).collect();
            let gx = needs[0].then(|| {
                let mut out = vec![0.0; n * fin];
                gemm_f64(
                    GemmOp::N,
                    GemmOp::N,
                    n,
                    fin,
                    fout,
                    &g64,
                    &w64,
                    0.0,
                    &mut out,
                );
                out.into_iter().map(|v| v as f32).collect()
            });
            let gw = needs[1].then(|| {
                let mut out = vec![0.0; fout * fin];
                gemm_f64(
                    GemmOp::T,
                    GemmOp::N,
                    fout,
                    fin,
                    n,
                    &g64,
                    &x64,
                    0.0,
                    &mut out,
                );
                out.into_iter().map(|v| v as f32).collect()
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    (0..fout)
                        .map(|j| (0..n).map(|i| g64[i * fout + j]).sum::<f64>() as f32)
                        .collect()
                }));
            }
            grads
        })
    }

    /// Reshape without copying; element order is unchanged.
    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let view = a.reshaped(shape)?;
        self.record_shared(view, &[a], |g, _| vec![Some(g.to_vec())])
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        if axis >= first.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", first.ndim()),
            });
        }
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(shape_err("concat", first, p));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        self.record("concat", shape, data, parts, move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                grads.push(needs[i].then(|| {
                    let mut out = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        let start = o * total + offset;
                        out.extend_from_slice(&g[start..start + w]);
                    }
                    out
                }));
                offset += w;
            }
            grads
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data.iter().map(|&v| f64::from(v)).sum();
        let n = a.numel();
        self.record("sum", vec![1], vec![s as f32], &[a], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s: f64 = a.data.iter().map(|&v| f64::from(v)).sum();
        self.record(
            "mean",
            vec![1],
            vec![(s / n as f64) as f32],
            &[a],
            move |g, _| vec![Some(vec![(f64::from(g[0]) / n as f64) as f32; n])],
        )
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let ad = Arc::clone(&a.data);
        let data = ad.iter().map(|&x| x.max(0.0)).collect();
        self.record("relu", a.shape.clone(), data, &[a], move |g, _| {
            unary_grad(g, |i, v| if ad[i] > 0.0 { v } else { 0.0 })
        })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out: Arc<[f32]> = a.data.iter().map(|&x| x.exp()).collect::<Vec<_>>().into();
        let saved = Arc::clone(&out);
        self.record("exp", a.shape.clone(), out.to_vec(), &[a], move |g, _| {
            unary_grad(g, |i, v| v * saved[i])
        })
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.iter().any(|&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::NonPositiveLog { op: "log" });
        }
        let ad = Arc::clone(&a.data);
        let data = ad.iter().map(|&x| x.ln()).collect();
        self.record("log", a.shape.clone(), data, &[a], move |g, _| {
            unary_grad(g, |i, v| v / ad[i])
        })
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&self, a: &Tensor, floor: f32) -> Result<Tensor> {
        let ad = Arc::clone(&a.data);
        let data = ad.iter().map(|&x| x.max(floor)).collect();
        self.record("clamp_min", a.shape.clone(), data, &[a], move |g, _| {
            unary_grad(g, |i, v| if ad[i] > floor { v } else { 0.0 })
        })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let k = *a.shape.last().ok_or(TensorError::InvalidArgument {
            op: "softmax",
            reason: "rank-0 input".into(),
        })?;
        if k == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: "empty last axis".into(),
            });
        }
        let mut out = Vec::with_capacity(a.numel());
        for row in a.data.chunks(k) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row.iter().map(|&x| f64::from(x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| (v / z) as f32));
        }
        let y: Arc<[f32]> = out.clone().into();
        self.record("softmax", a.shape.clone(), out, &[a], move |g, _| {
            let mut gx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(k).zip(y.chunks(k)) {
                let dot: f64 = gr
                    .iter()
                    .zip(yr)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                gx.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(&gi, &yi)| (f64::from(yi) * (f64::from(gi) - dot)) as f32),
                );
            }
            vec![Some(gx)]
        })
    }
}
