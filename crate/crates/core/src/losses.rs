//! Alignment and classification losses and their adaptive weighting.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, NodeId, Tape, Tensor};

/// Gaussian kernel family for LMMD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub kernel_count: usize,
    pub bandwidth_multiplier: f64,
    /// Replaces the median heuristic as the base bandwidth when set.
    pub fixed_bandwidth: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel_count: 5,
            bandwidth_multiplier: 2.0,
            fixed_bandwidth: None,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Self {
        Self {
            kernel_count: 1,
            bandwidth_multiplier: 1.0,
            fixed_bandwidth: Some(bandwidth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_count == 0 {
            return Err(Error::config("kernel_count", "must be at least 1"));
        }
        if !(self.bandwidth_multiplier.is_finite() && self.bandwidth_multiplier > 0.0) {
            return Err(Error::config("bandwidth_multiplier", "must be positive"));
        }
        if let Some(b) = self.fixed_bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::config("fixed_bandwidth", "must be positive"));
            }
        }
        Ok(())
    }

    /// Bandwidths `base * mult^(j - count/2)` for `j in 0..count`.
    pub fn bandwidths(&self, base: f64) -> Vec<f64> {
        let half = (self.kernel_count / 2) as i32;
        (0..self.kernel_count as i32)
            .map(|j| base * self.bandwidth_multiplier.powi(j - half))
            .collect()
    }
}

fn sq_dist(z: &[f64], d: usize, i: usize, j: usize) -> f64 {
    z[i * d..(i + 1) * d]
        .iter()
        .zip(&z[j * d..(j + 1) * d])
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Median of the off-diagonal pairwise squared distances; 1.0 when that
/// median is zero.
fn median_bandwidth(z: &[f64], d: usize, n: usize) -> f64 {
    let mut v = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push(sq_dist(z, d, i, j));
        }
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let med = if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// Signed per-sample weights: `1/n_c` on the source side, `-1/m_c` on the
/// target side, zero for classes missing on either side.
fn class_weights(ys: &[usize], yt: &[usize]) -> Vec<f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &y in ys {
        counts.entry(y).or_default().0 += 1;
    }
    for &y in yt {
        counts.entry(y).or_default().1 += 1;
    }
    let w = |y: usize, src: bool| {
        let (ns, nt) = counts[&y];
        match (ns, nt, src) {
            (0, _, _) | (_, 0, _) => 0.0,
            (ns, _, true) => 1.0 / ns as f64,
            (_, nt, false) => -1.0 / nt as f64,
        }
    };
    ys.iter()
        .map(|&y| w(y, true))
        .chain(yt.iter().map(|&y| w(y, false)))
        .collect()
}

struct LmmdCore {
    value: f64,
    /// `dL/dz` for the joint batch, row-major `[n+m, d]`.
    grad: Vec<f64>,
}

fn lmmd_core(
    z: &[f64],
    d: usize,
    ys: &[usize],
    yt: &[usize],
    kcfg: &KernelConfig,
    want_grad: bool,
) -> LmmdCore {
    let n = ys.len() + yt.len();
    let labels: Vec<usize> = ys.iter().chain(yt).copied().collect();
    let e = class_weights(ys, yt);
    let base = kcfg
        .fixed_bandwidth
        .unwrap_or_else(|| median_bandwidth(z, d, n));
    let bws = kcfg.bandwidths(base);
    let q = bws.len() as f64;
    let mut value = 0.0;
    let mut grad = if want_grad {
        vec![0.0; n * d]
    } else {
        Vec::new()
    };
    for i in 0..n {
        if e[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if labels[i] != labels[j] || e[j] == 0.0 {
                continue;
            }
            let w = e[i] * e[j];
            let d2 = sq_dist(z, d, i, j);
            let (mut k, mut dk) = (0.0, 0.0);
            for &b in &bws {
                let g = (-d2 / b).exp();
                k += g;
                dk += g / b;
            }
            value += w * k / q;
            if want_grad && i != j {
                // d/dz_i of w*K(z_i, z_j), counted twice for the (j, i) term.
                let c = -4.0 * w * dk / q;
                for t in 0..d {
                    grad[i * d + t] += c * (z[i * d + t] - z[j * d + t]);
                }
            }
        }
    }
    LmmdCore { value, grad }
}

fn check_lmmd_inputs(
    n: usize,
    m: usize,
    d: usize,
    ns: usize,
    nt: usize,
    kcfg: &KernelConfig,
) -> Result<()> {
    kcfg.validate()?;
    if n < 2 || m < 2 {
        return Err(Error::Data(format!(
            "lmmd needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    if ns != n || nt != m {
        return Err(Error::Data(format!(
            "lmmd label counts {ns}/{nt} do not match feature rows {n}/{m}"
        )));
    }
    if d == 0 {
        return Err(Error::Data("lmmd features have zero width".into()));
    }
    Ok(())
}

/// Local MMD computed entirely in 64-bit on row-major `[n, d]` / `[m, d]`
/// feature matrices.
pub fn lmmd_f64(
    src: &[f64],
    tgt: &[f64],
    d: usize,
    ys: &[usize],
    yt: &[usize],
    kcfg: &KernelConfig,
) -> Result<f64> {
    if d == 0 || src.len() % d != 0 || tgt.len() % d != 0 {
        return Err(Error::Data(
            "lmmd feature length is not a multiple of d".into(),
        ));
    }
    check_lmmd_inputs(src.len() / d, tgt.len() / d, d, ys.len(), yt.len(), kcfg)?;
    let z: Vec<f64> = src.iter().chain(tgt).copied().collect();
    Ok(lmmd_core(&z, d, ys, yt, kcfg, false).value)
}

/// Differentiable local MMD between source and target features.
///
/// Sum over classes of the biased squared MMD between the class-`c` rows of
/// each side, using a mean of Gaussian kernels `exp(-|x-y|^2 / b)`. The base
/// bandwidth (median heuristic) is treated as a constant. Returns the loss
/// tensor `[1]` and its 64-bit value.
pub fn lmmd(
    tape: &Tape,
    f_src: &Tensor,
    f_tgt: &Tensor,
    ys: &[usize],
    yt: &[usize],
    kcfg: &KernelConfig,
) -> Result<(Tensor, f64)> {
    let (ss, st) = (f_src.shape(), f_tgt.shape());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "lmmd",
            lhs: ss.to_vec(),
            rhs: st.to_vec(),
        }
        .into());
    }
    let (n, m, d) = (ss[0], st[0], ss[1]);
    check_lmmd_inputs(n, m, d, ys.len(), yt.len(), kcfg)?;
    let z: Vec<f64> = f_src
        .data()
        .iter()
        .chain(f_tgt.data())
        .map(|&v| f64::from(v))
        .collect();
    let core = lmmd_core(
        &z,
        d,
        ys,
        yt,
        kcfg,
        f_src.requires_grad() || f_tgt.requires_grad(),
    );
    let value = core.value;
    let grad: Arc<[f64]> = core.grad.into();
    let out = tape.record(
        "lmmd",
        vec![1],
        vec![value as f32],
        &[f_src, f_tgt],
        move |g, needs| {
            let g0 = f64::from(g[0]);
            let part =
                |lo: usize, hi: usize| grad[lo..hi].iter().map(|v| (v * g0) as f32).collect();
            vec![
                needs[0].then(|| part(0, n * d)),
                needs[1].then(|| part(n * d, (n + m) * d)),
            ]
        },
    )?;
    Ok((out, value))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub num_classes: usize,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        Ok(())
    }
}

/// `(1-eps) * dist + eps/K` per row. Rows must sum to 1 within 1e-4.
pub fn smooth(dist: &Tensor, cfg: &SmoothingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let k = cfg.num_classes;
    if dist.ndim() != 2 || dist.shape()[1] != k {
        return Err(Error::Data(format!(
            "smooth expects [N, {k}], got {:?}",
            dist.shape()
        )));
    }
    let eps = cfg.epsilon;
    let mut out = Vec::with_capacity(dist.numel());
    for (r, row) in dist.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Data(format!("row {r} sums to {s}, not 1")));
        }
        out.extend(
            row.iter()
                .map(|&v| ((1.0 - eps) * f64::from(v) + eps / k as f64) as f32),
        );
    }
    Ok(Tensor::new(dist.shape(), out)?)
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        v[i * num_classes + y] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), num_classes], v)?)
}

/// Cross-entropy output: the loss, the same loss evaluated in f64, and the
/// smoothed prediction it was taken against.
pub struct SmoothedCe {
    pub loss: Tensor,
    pub value: f64,
    pub smoothed_probs: Tensor,
}

fn smoothed_ce_f64(logits: &[f32], labels: &[usize], k: usize, eps: f64) -> f64 {
    let total: f64 = labels
        .iter()
        .zip(logits.chunks(k))
        .map(|(&y, row)| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f64> = row
                .iter()
                .map(|&z| (f64::from(z) - f64::from(m)).exp())
                .collect();
            let z: f64 = e.iter().sum();
            e.iter()
                .enumerate()
                .map(|(j, v)| {
                    let t = if j == y { 1.0 - eps } else { 0.0 } + eps / k as f64;
                    let q = (1.0 - eps) * v / z + eps / k as f64;
                    -t * q.max(1e-12).ln()
                })
                .sum::<f64>()
        })
        .sum();
    total / labels.len() as f64
}

/// `-mean_n sum_k smooth(label)_k * log(max(smooth(softmax(logits))_k, 1e-12))`.
pub fn smoothed_cross_entropy(
    tape: &Tape,
    logits: &Tensor,
    labels: &[usize],
    cfg: &SmoothingConfig,
) -> Result<SmoothedCe> {
    cfg.validate()?;
    let k = cfg.num_classes;
    if logits.ndim() != 2 || logits.shape()[1] != k || logits.shape()[0] != labels.len() {
        return Err(Error::Data(format!(
            "cross-entropy expects [{}, {k}] logits, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let target = smooth(&one_hot(labels, k)?, cfg)?;
    let eps = cfg.epsilon as f32;
    let p = tape.softmax(logits)?;
    let q = tape.affine(&p, 1.0 - eps, eps / k as f32)?;
    let q_safe = tape.clamp_min(&q, 1e-12)?;
    let lq = tape.log(&q_safe)?;
    let weighted = tape.mul(&lq, &target)?;
    let s = tape.sum(&weighted)?;
    let loss = tape.affine(&s, -1.0 / labels.len() as f32, 0.0)?;
    Ok(SmoothedCe {
        loss,
        value: smoothed_ce_f64(logits.data(), labels, k, cfg.epsilon),
        smoothed_probs: q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub loss_feature: f64,
    pub loss_classify: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub w_a: f64,
    pub w_b: f64,
    pub l_a: f64,
    pub l_b: f64,
    pub delta: f64,
}

pub const DEFAULT_DELTA: f64 = 1e-8;

/// Gradient-norm and loss-magnitude balanced weights:
///
/// `alpha = w_a/(w_a+w_b+delta) * (l_a+l_b)/(l_a+delta)`,
/// `beta  = w_b/(w_a+w_b+delta) * (l_a+l_b)/(l_b+delta)`.
pub fn adaptive_weights(
    w_a: f64,
    w_b: f64,
    terms: LossTerms,
    delta: f64,
) -> Result<AdaptiveWeights> {
    if !(delta >= 0.0) {
        return Err(Error::config("delta", "must be nonnegative"));
    }
    let l_a = terms.loss_feature.abs();
    let l_b = terms.loss_classify.abs();
    let share = w_a + w_b + delta;
    let total = l_a + l_b;
    Ok(AdaptiveWeights {
        alpha: w_a / share * total / (l_a + delta),
        beta: w_b / share * total / (l_b + delta),
        w_a,
        w_b,
        l_a,
        l_b,
        delta,
    })
}

/// [`adaptive_weights`] from two gradient maps taken at the same node.
pub fn adaptive_weights_from_grads(
    grad_feature: &GradientMap,
    grad_classify: &GradientMap,
    node: NodeId,
    terms: LossTerms,
    delta: f64,
) -> Result<AdaptiveWeights> {
    let w_a = grad_feature.l2_norm(node)?;
    let w_b = grad_classify.l2_norm(node)?;
    adaptive_weights(w_a, w_b, terms, delta)
}

/// Whether `epoch` (1-based) is in the weighted phase, `epoch <= 0.9 * num_epoch`.
/// Compared as `10 * epoch <= 9 * num_epoch` so no rounding is involved.
pub fn weighted_phase(epoch: usize, num_epoch: usize) -> bool {
    10 * epoch <= 9 * num_epoch
}

/// Scalar value of the epoch-gated objective.
pub fn total_loss(
    epoch: usize,
    num_epoch: usize,
    weights: &AdaptiveWeights,
    terms: LossTerms,
) -> f64 {
    if weighted_phase(epoch, num_epoch) {
        weights.alpha * terms.loss_feature + weights.beta * terms.loss_classify
    } else {
        terms.loss_classify
    }
}
