//! Tape gradients against central differences of independent f64
//! reference implementations.

mod common;

use common::*;
use edgeda::losses::{lmmd, smoothed_cross_entropy, KernelConfig, SmoothingConfig};
use edgeda::nn::{
    BatchNorm2d, Conv2d, Dense, DepthwiseSeparableBlock, Forward, ParamStore, ResidualBlock, Track,
};
use edgeda::tensor::{BatchNormMode, Conv2dSpec, Tape, Tensor};
use rand::Rng;
use std::cell::Cell;

const SEEDS: u64 = 20;

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, to_f32(v)).unwrap()
}

/// Projects `y` onto the fixed direction `r` so the loss is a scalar.
fn project(tape: &Tape, y: &Tensor, r: &[f64]) -> Tensor {
    let rt = tensor(y.shape(), r);
    let p = tape.mul(y, &rt).unwrap();
    tape.sum(&p).unwrap()
}

/// Checks every input of a primitive op and returns the worst error.
fn check_op(
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
    tape_fn: &dyn Fn(&Tape, &[Tensor]) -> Tensor,
    ref_fn: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(s, v)| tape.leaf(&tensor(s, v)))
        .collect();
    let y = tape_fn(&tape, &leaves);
    let mut g = rng(seed ^ 0x5EED);
    let r = rand_vec(&mut g, y.numel(), -1.0, 1.0);
    let loss = project(&tape, &y, &r);
    let ids: Vec<_> = leaves.iter().map(|t| t.node().unwrap()).collect();
    let grads = tape.backward(&loss, &ids).unwrap();
    let values: Vec<Vec<f64>> = inputs.iter().map(|i| i.1.clone()).collect();
    let f = |x: &[Vec<f64>]| dot(&ref_fn(x), &r);
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(*id).unwrap().to_f64_vec();
        worst = worst.max(rel_error(&analytic, &numeric_grad(&f, &values, k)));
    }
    worst
}

fn assert_op(name: &str, worst: f64) {
    assert!(worst < FD_TOL, "{name}: relative error {worst:e}");
}

fn dims(g: &mut impl Rng, lo: usize, hi: usize) -> usize {
    g.random_range(lo..=hi)
}

#[test]
pub fn elementwise_ops() {
    for seed in 0..SEEDS {
        let mut g = rng(seed);
        let (n, c, h) = (dims(&mut g, 1, 3), dims(&mut g, 1, 4), dims(&mut g, 1, 3));
        let s = vec![n, c, h];
        let numel = n * c * h;
        let a = rand_vec(&mut g, numel, -2.0, 2.0);
        let b = rand_vec(&mut g, numel, -2.0, 2.0);
        let bb = rand_vec(&mut g, n * c, -2.0, 2.0);
        let bs = vec![n, c, 1];
        let two = |x: &[Vec<f64>], f: fn(f64, f64) -> f64, block: usize| -> Vec<f64> {
            x[0].iter()
                .enumerate()
                .map(|(i, &v)| f(v, x[1][i / block]))
                .collect()
        };
        let ins = [(s.clone(), a.clone()), (s.clone(), b.clone())];
        let insb = [(s.clone(), a.clone()), (bs.clone(), bb.clone())];
        assert_op(
            "add",
            check_op(&ins, seed, &|t, x| t.add(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p + q, 1)
            }),
        );
        assert_op(
            "add broadcast",
            check_op(&insb, seed, &|t, x| t.add(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p + q, h)
            }),
        );
        assert_op(
            "sub",
            check_op(&ins, seed, &|t, x| t.sub(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p - q, 1)
            }),
        );
        assert_op(
            "sub broadcast",
            check_op(&insb, seed, &|t, x| t.sub(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p - q, h)
            }),
        );
        assert_op(
            "mul",
            check_op(&ins, seed, &|t, x| t.mul(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p * q, 1)
            }),
        );
        assert_op(
            "mul broadcast",
            check_op(&insb, seed, &|t, x| t.mul(&x[0], &x[1]).unwrap(), &|x| {
                two(x, |p, q| p * q, h)
            }),
        );

        let one = [(s.clone(), a.clone())];
        let (sc, sh) = (g.random_range(-2.0f32..2.0), g.random_range(-1.0f32..1.0));
        assert_op(
            "affine",
            check_op(&one, seed, &|t, x| t.affine(&x[0], sc, sh).unwrap(), &|x| {
                x[0].iter()
                    .map(|&v| f64::from(sc) * v + f64::from(sh))
                    .collect()
            }),
        );
        assert_op(
            "exp",
            check_op(&one, seed, &|t, x| t.exp(&x[0]).unwrap(), &|x| {
                x[0].iter().map(|v| v.exp()).collect()
            }),
        );
        let kinked = [(s.clone(), rand_vec_away(&mut g, numel, -2.0, 2.0, 0.05))];
        assert_op(
            "relu",
            check_op(&kinked, seed, &|t, x| t.relu(&x[0]).unwrap(), &|x| {
                relu(&x[0])
            }),
        );
        let floor = 0.3f32;
        let clamped = [(
            s.clone(),
            rand_vec_away(&mut g, numel, -2.0, 2.0, 0.05)
                .iter()
                .map(|v| v + 0.3)
                .collect(),
        )];
        assert_op(
            "clamp_min",
            check_op(
                &clamped,
                seed,
                &|t, x| t.clamp_min(&x[0], floor).unwrap(),
                &|x| x[0].iter().map(|&v| v.max(f64::from(floor))).collect(),
            ),
        );
        let pos = [(s.clone(), rand_vec(&mut g, numel, 0.5, 3.0))];
        assert_op(
            "log",
            check_op(&pos, seed, &|t, x| t.log(&x[0]).unwrap(), &|x| {
                x[0].iter().map(|v| v.ln()).collect()
            }),
        );
        assert_op(
            "sum",
            check_op(&one, seed, &|t, x| t.sum(&x[0]).unwrap(), &|x| {
                vec![x[0].iter().sum()]
            }),
        );
        assert_op(
            "mean",
            check_op(&one, seed, &|t, x| t.mean(&x[0]).unwrap(), &|x| {
                vec![x[0].iter().sum::<f64>() / x[0].len() as f64]
            }),
        );
        assert_op(
            "softmax",
            check_op(&one, seed, &|t, x| t.softmax(&x[0]).unwrap(), &|x| {
                softmax_rows(&x[0], h)
            }),
        );
        let flat = vec![n * c * h];
        assert_op(
            "reshape",
            check_op(&one, seed, &|t, x| t.reshape(&x[0], &flat).unwrap(), &|x| {
                x[0].clone()
            }),
        );
    }
}

#[test]
pub fn matrix_ops() {
    for seed in 0..SEEDS {
        let mut g = rng(100 + seed);
        let (m, k, n) = (dims(&mut g, 1, 5), dims(&mut g, 1, 6), dims(&mut g, 1, 5));
        let a = rand_vec(&mut g, m * k, -1.0, 1.0);
        let b = rand_vec(&mut g, k * n, -1.0, 1.0);
        assert_op(
            "matmul",
            check_op(
                &[(vec![m, k], a.clone()), (vec![k, n], b)],
                seed,
                &|t, x| t.matmul(&x[0], &x[1]).unwrap(),
                &|x| matmul(&x[0], &x[1], m, k, n),
            ),
        );
        let w = rand_vec(&mut g, n * k, -1.0, 1.0);
        let bias = rand_vec(&mut g, n, -1.0, 1.0);
        let ins = [
            (vec![m, k], a.clone()),
            (vec![n, k], w.clone()),
            (vec![n], bias),
        ];
        assert_op(
            "linear",
            check_op(
                &ins,
                seed,
                &|t, x| t.linear(&x[0], &x[1], Some(&x[2])).unwrap(),
                &|x| linear(&x[0], m, k, &x[1], n, Some(&x[2])),
            ),
        );
        assert_op(
            "linear without bias",
            check_op(
                &ins[..2],
                seed,
                &|t, x| t.linear(&x[0], &x[1], None).unwrap(),
                &|x| linear(&x[0], m, k, &x[1], n, None),
            ),
        );
        let c = rand_vec(&mut g, m * n, -1.0, 1.0);
        let cat_ins = [(vec![m, k], a.clone()), (vec![m, n], c.clone())];
        assert_op(
            "concat axis 1",
            check_op(
                &cat_ins,
                seed,
                &|t, x| t.concat(&[&x[0], &x[1]], 1).unwrap(),
                &|x| {
                    (0..m)
                        .flat_map(|r| {
                            x[0][r * k..(r + 1) * k]
                                .iter()
                                .chain(&x[1][r * n..(r + 1) * n])
                                .copied()
                                .collect::<Vec<_>>()
                        })
                        .collect()
                },
            ),
        );
        let d = rand_vec(&mut g, n * k, -1.0, 1.0);
        let cat0 = [(vec![m, k], a), (vec![n, k], d)];
        assert_op(
            "concat axis 0",
            check_op(
                &cat0,
                seed,
                &|t, x| t.concat(&[&x[0], &x[1]], 0).unwrap(),
                &|x| x[0].iter().chain(&x[1]).copied().collect(),
            ),
        );
    }
}

#[test]
pub fn spatial_ops() {
    for seed in 0..SEEDS {
        let mut g = rng(200 + seed);
        let groups = [1, 1, 2][seed as usize % 3];
        let n = dims(&mut g, 1, 2);
        let c = groups * dims(&mut g, 1, 2);
        let o = groups * dims(&mut g, 1, 3);
        let (h, w) = (dims(&mut g, 3, 6), dims(&mut g, 3, 6));
        let k = [1, 2, 3][g.random_range(0..3)];
        let stride = dims(&mut g, 1, 2);
        let pad = g.random_range(0..=k / 2 + 1);
        let xs = [n, c, h, w];
        let ws = [o, c / groups, k, k];
        let x = rand_vec(&mut g, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut g, o * (c / groups) * k * k, -1.0, 1.0);
        let b = rand_vec(&mut g, o, -1.0, 1.0);
        let spec = Conv2dSpec {
            stride,
            padding: pad,
            groups,
        };
        let ins = [(xs.to_vec(), x.clone()), (ws.to_vec(), wt), (vec![o], b)];
        assert_op(
            &format!("conv2d {xs:?} {ws:?} s{stride} p{pad} g{groups}"),
            check_op(
                &ins,
                seed,
                &|t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), spec).unwrap(),
                &|v| conv2d(&v[0], xs, &v[1], ws, Some(&v[2]), stride, pad, groups).0,
            ),
        );
        assert_op(
            "conv2d without bias",
            check_op(
                &ins[..2],
                seed,
                &|t, v| t.conv2d(&v[0], &v[1], None, spec).unwrap(),
                &|v| conv2d(&v[0], xs, &v[1], ws, None, stride, pad, groups).0,
            ),
        );
        let gamma = rand_vec(&mut g, c, 0.5, 1.5);
        let beta = rand_vec(&mut g, c, -0.5, 0.5);
        let xb = rand_vec(&mut g, 2 * c * h * w, -2.0, 2.0);
        let bxs = [2, c, h, w];
        let bn_ins = [
            (bxs.to_vec(), xb.clone()),
            (vec![c], gamma.clone()),
            (vec![c], beta.clone()),
        ];
        assert_op(
            "batch_norm train",
            check_op(
                &bn_ins,
                seed,
                &|t, v| {
                    t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Train, 1e-5)
                        .unwrap()
                        .0
                },
                &|v| batch_norm_train(&v[0], bxs, &v[1], &v[2], 1e-5),
            ),
        );
        let rm = to_f32(&rand_vec(&mut g, c, -0.5, 0.5));
        let rv = to_f32(&rand_vec(&mut g, c, 0.5, 2.0));
        let (rm64, rv64): (Vec<f64>, Vec<f64>) = (
            rm.iter().map(|&v| v.into()).collect(),
            rv.iter().map(|&v| v.into()).collect(),
        );
        assert_op(
            "batch_norm eval",
            check_op(
                &bn_ins,
                seed,
                &|t, v| {
                    let mode = BatchNormMode::Eval {
                        running_mean: &rm,
                        running_var: &rv,
                    };
                    t.batch_norm(&v[0], &v[1], &v[2], mode, 1e-5).unwrap().0
                },
                &|v| batch_norm_eval(&v[0], bxs, &v[1], &v[2], &rm64, &rv64, 1e-5),
            ),
        );
        assert_op(
            "global_avg_pool",
            check_op(
                &[(xs.to_vec(), x)],
                seed,
                &|t, v| t.global_avg_pool(&v[0]).unwrap(),
                &|v| global_avg_pool(&v[0], xs),
            ),
        );
    }
}

#[test]
pub fn loss_ops() {
    for seed in 0..SEEDS {
        let mut g = rng(300 + seed);
        let (n, k) = (dims(&mut g, 2, 6), dims(&mut g, 2, 5));
        let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..k)).collect();
        let eps = [0.0, 0.1, 0.3][seed as usize % 3];
        let logits = rand_vec(&mut g, n * k, -3.0, 3.0);
        let cfg = SmoothingConfig {
            epsilon: eps,
            num_classes: k,
        };
        let lab = labels.clone();
        assert_op(
            "smoothed cross-entropy",
            check_op(
                &[(vec![n, k], logits)],
                seed,
                &|t, v| smoothed_cross_entropy(t, &v[0], &lab, &cfg).unwrap().loss,
                &|v| vec![smoothed_ce(&v[0], &labels, k, eps)],
            ),
        );

        let (ns, nt, d) = (dims(&mut g, 2, 6), dims(&mut g, 2, 6), dims(&mut g, 1, 4));
        let classes = dims(&mut g, 1, 3);
        let ys: Vec<usize> = (0..ns).map(|_| g.random_range(0..classes)).collect();
        let yt: Vec<usize> = (0..nt).map(|_| g.random_range(0..classes)).collect();
        let base = g.random_range(0.5..4.0);
        let kcfg = KernelConfig {
            kernel_count: 5,
            bandwidth_multiplier: 2.0,
            fixed_bandwidth: Some(base),
        };
        let src = rand_vec(&mut g, ns * d, -1.0, 1.0);
        let tgt = rand_vec(&mut g, nt * d, -1.0, 1.0);
        let (ys2, yt2) = (ys.clone(), yt.clone());
        assert_op(
            "lmmd",
            check_op(
                &[(vec![ns, d], src), (vec![nt, d], tgt)],
                seed,
                &|t, v| lmmd(t, &v[0], &v[1], &ys2, &yt2, &kcfg).unwrap().0,
                &|v| vec![common::lmmd(&v[0], &v[1], d, &ys, &yt, base, 2.0, 5)],
            ),
        );
    }
}

/// Layer check: gradients with respect to the input and every parameter.
/// `reference` returns the output and the sign pattern of every ReLU input;
/// a case whose pattern flips under a finite-difference step straddles a
/// kink and is rejected so it can be redrawn.
fn check_layer(
    store: &ParamStore,
    xs: [usize; 4],
    x: &[f64],
    seed: u64,
    train: bool,
    forward: &dyn Fn(&mut Forward<'_>, &Tensor) -> Tensor,
    reference: &dyn Fn(&[f64], &dyn Fn(&str) -> Vec<f64>) -> (Vec<f64>, Vec<bool>),
) -> Option<f64> {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.kind == edgeda::nn::EntryKind::Param)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut values = vec![x.to_vec()];
    for n in &names {
        values.push(store.get(n).unwrap().to_f64_vec());
    }
    let fixed = |v: &[Vec<f64>], name: &str| -> Vec<f64> {
        match names.iter().position(|n| n == name) {
            Some(i) => v[i + 1].clone(),
            None => store.get(name).unwrap().to_f64_vec(),
        }
    };
    let (_, pattern) = reference(&values[0], &|n| fixed(&values, n));
    let tape = Tape::new();
    let mut ctx = Forward::new(&tape, store, Track::All, train);
    let xl = tape.leaf(&tensor(&xs, x));
    let y = forward(&mut ctx, &xl);
    let mut g = rng(seed ^ 0xBEEF);
    let r = rand_vec(&mut g, y.numel(), -1.0, 1.0);
    let loss = project(&tape, &y, &r);
    let mut ids = vec![xl.node().unwrap()];
    ids.extend(names.iter().map(|n| ctx.node_of(n).unwrap()));
    let grads = tape.backward(&loss, &ids).unwrap();
    let flipped = Cell::new(false);
    let f = |v: &[Vec<f64>]| {
        let (out, p) = reference(&v[0], &|n| fixed(v, n));
        if p != pattern {
            flipped.set(true);
        }
        dot(&out, &r)
    };
    let numeric: Vec<Vec<f64>> = (0..ids.len())
        .map(|k| numeric_grad(&f, &values, k))
        .collect();
    if flipped.get() {
        return None;
    }
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap().to_f64_vec();
        let e = rel_error(&analytic, &numeric[k]);
        assert!(
            e < FD_TOL,
            "input {k} ({}) error {e:e}",
            if k == 0 { "x" } else { &names[k - 1] }
        );
        worst = worst.max(e);
    }
    Some(worst)
}

fn init_store(
    f: impl FnOnce(&mut ParamStore, &mut rand_chacha::ChaCha8Rng),
    seed: u64,
) -> ParamStore {
    let mut s = ParamStore::new();
    let mut g = rng(seed);
    f(&mut s, &mut g);
    // Move batch-norm affine parameters off their identity initialization.
    let names: Vec<String> = s
        .names()
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta"))
        .map(String::from)
        .collect();
    for n in names {
        let len = s.get(&n).unwrap().numel();
        let lo = if n.ends_with(".gamma") { 0.5 } else { -0.5 };
        s.set(&n, tensor(&[len], &rand_vec(&mut g, len, lo, lo + 1.0)))
            .unwrap();
    }
    s
}

fn relu_tracked(v: &[f64], pattern: &mut Vec<bool>) -> Vec<f64> {
    pattern.extend(v.iter().map(|&x| x > 0.0));
    relu(v)
}

fn conv_ref(
    c: &Conv2d,
    x: &[f64],
    xs: [usize; 4],
    p: &dyn Fn(&str) -> Vec<f64>,
) -> (Vec<f64>, [usize; 4]) {
    let w = p(&format!("{}.weight", c.name));
    let b = c.bias.then(|| p(&format!("{}.bias", c.name)));
    let ws = [
        c.out_channels,
        c.in_channels / c.groups,
        c.kernel.0,
        c.kernel.1,
    ];
    conv2d(x, xs, &w, ws, b.as_deref(), c.stride, c.padding, c.groups)
}

fn bn_ref(b: &BatchNorm2d, x: &[f64], xs: [usize; 4], p: &dyn Fn(&str) -> Vec<f64>) -> Vec<f64> {
    batch_norm_train(
        x,
        xs,
        &p(&format!("{}.gamma", b.name)),
        &p(&format!("{}.beta", b.name)),
        f64::from(b.eps),
    )
}

/// Redraws until a case is away from every ReLU kink, then checks it.
fn run_layer_cases(label: &str, mut case: impl FnMut(u64) -> Option<f64>) {
    let mut done = 0;
    let mut attempt = 0;
    while done < SEEDS {
        attempt += 1;
        assert!(
            attempt < 10 * SEEDS,
            "{label}: too many cases on ReLU kinks"
        );
        if case(attempt).is_some() {
            done += 1;
        }
    }
}

#[test]
pub fn conv_dense_and_norm_layers() {
    run_layer_cases("conv2d", |seed| {
        let mut g = rng(1000 + seed);
        let (cin, cout) = (dims(&mut g, 1, 3), dims(&mut g, 1, 3));
        let conv = Conv2d::same(
            "c",
            cin,
            cout,
            [1, 3][seed as usize % 2],
            dims(&mut g, 1, 2),
        )
        .with_bias(seed % 3 == 0);
        let store = init_store(|s, g| conv.init(s, g).unwrap(), seed);
        let xs = [2, cin, 5, 4];
        let x = rand_vec(&mut g, 2 * cin * 20, -1.0, 1.0);
        check_layer(
            &store,
            xs,
            &x,
            seed,
            true,
            &|ctx, x| conv.forward(ctx, x).unwrap(),
            &|x, p| (conv_ref(&conv, x, xs, p).0, Vec::new()),
        )
    });
    run_layer_cases("batch norm", |seed| {
        let mut g = rng(2000 + seed);
        let c = dims(&mut g, 1, 4);
        let bn = BatchNorm2d::new("bn", c);
        let store = init_store(|s, _| bn.init(s).unwrap(), seed);
        let xs = [3, c, 2, 3];
        let x = rand_vec(&mut g, 18 * c, -2.0, 2.0);
        check_layer(
            &store,
            xs,
            &x,
            seed,
            true,
            &|ctx, x| bn.forward(ctx, x).unwrap(),
            &|x, p| (bn_ref(&bn, x, xs, p), Vec::new()),
        )
    });
    run_layer_cases("dense", |seed| {
        let mut g = rng(3000 + seed);
        let (fin, fout) = (dims(&mut g, 1, 6), dims(&mut g, 1, 5));
        let dense = Dense::new("fc", fin, fout);
        let store = init_store(|s, g| dense.init(s, g).unwrap(), seed);
        let x = rand_vec(&mut g, 3 * fin, -1.0, 1.0);
        // Dense takes [N, in]; the harness shape is only used to build the leaf.
        let tape_shape = [3, fin, 1, 1];
        check_layer(
            &store,
            tape_shape,
            &x,
            seed,
            true,
            &|ctx, x| {
                let flat = ctx.tape.reshape(x, &[3, fin]).unwrap();
                dense.forward(ctx, &flat).unwrap()
            },
            &|x, p| {
                (
                    linear(x, 3, fin, &p("fc.weight"), fout, Some(&p("fc.bias"))),
                    Vec::new(),
                )
            },
        )
    });
}

#[test]
pub fn separable_and_residual_blocks() {
    run_layer_cases("depthwise separable", |seed| {
        let mut g = rng(4000 + seed);
        // A batch-normalized 1x1 conv over one channel is scale invariant,
        // leaving only a vanishing gradient; start at two channels.
        let (cin, cout) = (dims(&mut g, 2, 3), dims(&mut g, 1, 3));
        let stride = dims(&mut g, 1, 2);
        let block = if seed % 2 == 0 {
            DepthwiseSeparableBlock::new("ds", cin, cout, 3, stride)
        } else {
            DepthwiseSeparableBlock::plain("ds", cin, cout, 3, stride)
        };
        let store = init_store(|s, g| block.init(s, g).unwrap(), seed);
        let xs = [2, cin, 4, 4];
        let x = rand_vec(&mut g, 32 * cin, -1.0, 1.0);
        check_layer(
            &store,
            xs,
            &x,
            seed,
            true,
            &|ctx, x| block.forward(ctx, x).unwrap(),
            &|x, p| {
                let mut pattern = Vec::new();
                let (mut h, mut s) = conv_ref(&block.depthwise, x, xs, p);
                if let Some(bn) = &block.depthwise_norm {
                    h = bn_ref(bn, &h, s, p);
                }
                if block.activation {
                    h = relu_tracked(&h, &mut pattern);
                }
                let (h2, s2) = conv_ref(&block.pointwise, &h, s, p);
                (h, s) = (h2, s2);
                if let Some(bn) = &block.pointwise_norm {
                    h = bn_ref(bn, &h, s, p);
                }
                if block.activation {
                    h = relu_tracked(&h, &mut pattern);
                }
                (h, pattern)
            },
        )
    });
    run_layer_cases("residual", |seed| {
        let mut g = rng(5000 + seed);
        let cin = dims(&mut g, 2, 3);
        let (cout, stride) = if seed % 2 == 0 {
            (cin, 1)
        } else {
            (dims(&mut g, 1, 3), 2)
        };
        let block = ResidualBlock::new("res", cin, cout, stride);
        let store = init_store(|s, g| block.init(s, g).unwrap(), seed);
        let xs = [2, cin, 4, 4];
        let x = rand_vec(&mut g, 32 * cin, -1.0, 1.0);
        check_layer(
            &store,
            xs,
            &x,
            seed,
            true,
            &|ctx, x| block.forward(ctx, x).unwrap(),
            &|x, p| {
                let mut pattern = Vec::new();
                let (h, s) = conv_ref(&block.conv1, x, xs, p);
                let h = relu_tracked(&bn_ref(&block.bn1, &h, s, p), &mut pattern);
                let (h, s) = conv_ref(&block.conv2, &h, s, p);
                let h = bn_ref(&block.bn2, &h, s, p);
                let short = match &block.projection {
                    Some((c, b)) => {
                        let (v, vs) = conv_ref(c, x, xs, p);
                        bn_ref(b, &v, vs, p)
                    }
                    None => x.to_vec(),
                };
                let sum: Vec<f64> = h.iter().zip(&short).map(|(a, b)| a + b).collect();
                (relu_tracked(&sum, &mut pattern), pattern)
            },
        )
    });
}
