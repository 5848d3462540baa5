//! Independent f64 reference implementations and a finite-difference
//! harness shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values exactly representable in f32, uniform in `[lo, hi)`.
pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| f64::from(rng.random_range(lo..hi) as f32))
        .collect()
}

/// Like [`rand_vec`] but at least `gap` away from zero, for kinked ops.
pub fn rand_vec_away(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = f64::from(rng.random_range(lo..hi) as f32);
            if v.abs() > gap {
                break v;
            }
        })
        .collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `max_i |a_i - n_i| / max_i |n_i|`: error relative to the gradient scale.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central differences of `f` with respect to every element of `inputs[k]`.
pub fn numeric_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[k].len())
        .map(|i| {
            let x = inputs[k][i];
            work[k][i] = x + FD_STEP;
            let up = f(&work);
            work[k][i] = x - FD_STEP;
            let down = f(&work);
            work[k][i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Reference operators. Shapes are passed explicitly; data is row-major.

pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [o, cg, kh, kw] = ws;
    assert_eq!(c / groups, cg);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let og = o / groups;
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = (
                                    (i * stride + u) as isize - pad as isize,
                                    (j * stride + v) as isize - pad as isize,
                                );
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w[((oc * cg + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, [n, o, ho, wo])
}

/// Batch normalization with batch statistics (biased variance).
pub fn batch_norm_train(
    x: &[f64],
    xs: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|s| (0..hw).map(move |p| (s * c + ch) * hw + p))
            .collect();
        let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = gamma[ch] * (x[i] - m) / (v + eps).sqrt() + beta[ch];
        }
    }
    out
}

pub fn batch_norm_eval(
    x: &[f64],
    xs: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    rm: &[f64],
    rv: &[f64],
    eps: f64,
) -> Vec<f64> {
    let [_, c, h, w] = xs;
    let hw = h * w;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * (v - rm[ch]) / (rv[ch] + eps).sqrt() + beta[ch]
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn global_avg_pool(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let hw = xs[2] * xs[3];
    x.chunks(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect()
}

/// `x [n, fin] · wᵀ + b` with `w [fout, fin]`.
pub fn linear(
    x: &[f64],
    n: usize,
    fin: usize,
    w: &[f64],
    fout: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for s in 0..n {
        for o in 0..fout {
            out[s * fout + o] = b.map_or(0.0, |b| b[o])
                + (0..fin)
                    .map(|i| x[s * fin + i] * w[o * fin + i])
                    .sum::<f64>();
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks(k)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / z)
        })
        .collect()
}

/// Label-smoothed cross-entropy between smoothed one-hot targets and
/// smoothed softmax probabilities, averaged over rows.
pub fn smoothed_ce(logits: &[f64], labels: &[usize], k: usize, eps: f64) -> f64 {
    let p = softmax_rows(logits, k);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        for c in 0..k {
            let t = if c == y {
                1.0 - eps + eps / k as f64
            } else {
                eps / k as f64
            };
            let q = (1.0 - eps) * p[r * k + c] + eps / k as f64;
            total -= t * q.ln();
        }
    }
    total / labels.len() as f64
}

/// Brute-force class-conditional MMD: explicit double sums over the three
/// pair sets for every class present on both sides, Gaussian kernels with
/// bandwidths `base * mult^(j - count/2)`.
pub fn lmmd(
    src: &[f64],
    tgt: &[f64],
    d: usize,
    ys: &[usize],
    yt: &[usize],
    base: f64,
    mult: f64,
    count: usize,
) -> f64 {
    let row = |v: &[f64], i: usize| v[i * d..(i + 1) * d].to_vec();
    let kern = |a: &[f64], b: &[f64]| {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (0..count)
            .map(|j| {
                let bw = base * mult.powf(j as f64 - (count / 2) as f64);
                (-sq / bw).exp()
            })
            .sum::<f64>()
            / count as f64
    };
    let classes = ys.iter().chain(yt).copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for c in 0..classes {
        let s: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        let t: Vec<usize> = (0..yt.len()).filter(|&j| yt[j] == c).collect();
        if s.is_empty() || t.is_empty() {
            continue;
        }
        let (ns, nt) = (s.len() as f64, t.len() as f64);
        let mut ss = 0.0;
        for &i in &s {
            for &j in &s {
                ss += kern(&row(src, i), &row(src, j));
            }
        }
        let mut tt = 0.0;
        for &i in &t {
            for &j in &t {
                tt += kern(&row(tgt, i), &row(tgt, j));
            }
        }
        let mut st = 0.0;
        for &i in &s {
            for &j in &t {
                st += kern(&row(src, i), &row(tgt, j));
            }
        }
        total += ss / (ns * ns) + tt / (nt * nt) - 2.0 * st / (ns * nt);
    }
    total
}
