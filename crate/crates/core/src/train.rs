//! Cloud training, edge knowledge transfer, evaluation and ablations.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{stream_seed, SampleSet, Splits};
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_weights, lmmd, smoothed_cross_entropy, weighted_phase, KernelConfig, LossTerms,
    SmoothingConfig, DEFAULT_DELTA,
};
use crate::models::{build_model, share_pre_fe, Model, ModelConfig, ModelKind};
use crate::nn::{Forward, ParamStore, Track};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Node at which the two per-loss gradients are measured for the adaptive
/// weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientAnchor {
    /// The edge model's feature output (input of the classifier).
    Features,
    /// The smoothed softmax output of the classifier. The alignment loss
    /// does not depend on it, so its gradient norm there is always zero.
    ClassifierOutput,
}

impl GradientAnchor {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "features" => Some(Self::Features),
            "classifier_output" => Some(Self::ClassifierOutput),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Features => "features",
            Self::ClassifierOutput => "classifier_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_epoch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub smoothing_epsilon: f64,
    pub delta: f64,
    pub kernel: KernelConfig,
    pub anchor: GradientAnchor,
}

impl TrainConfig {
    pub fn cloud_default() -> Self {
        Self {
            batch_size: 32,
            num_epoch: 60,
            lr_max: 1e-3,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            smoothing_epsilon: 0.1,
            delta: DEFAULT_DELTA,
            kernel: KernelConfig::default(),
            anchor: GradientAnchor::Features,
        }
    }

    pub fn transfer_default() -> Self {
        Self {
            num_epoch: 100,
            ..Self::cloud_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lr_max.is_finite()
            && self.lr_max >= 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr_max)
        {
            return Err(Error::config("lr", "need 0 <= lr_min <= lr_max"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || self.adam.eps <= 0.0
        {
            return Err(Error::config(
                "adam",
                "betas must lie in [0, 1) and eps be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing_epsilon) {
            return Err(Error::config("smoothing_epsilon", "must lie in [0, 1)"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config("delta", "must be nonnegative"));
        }
        self.kernel.validate()
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(t: usize, num_epoch: usize, lr_max: f64, lr_min: f64) -> f64 {
    if num_epoch == 0 {
        return lr_max;
    }
    let c = (std::f64::consts::PI * t as f64 / num_epoch as f64).cos();
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c)
}

/// Adam with per-name moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every `(name, gradient)` pair. Frozen entries are
    /// rejected; the caller never passes them.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (name, g) in grads {
            if store.is_frozen(name) {
                return Err(Error::NotFrozen(format!(
                    "optimizer was handed frozen entry `{name}`"
                )));
            }
            let p = store.get(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut out = Vec::with_capacity(p.numel());
            for (i, (&w, &gi)) in p.data().iter().zip(g.data()).enumerate() {
                let gi = f64::from(gi);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                out.push((f64::from(w) - upd) as f32);
            }
            let shape = p.shape().to_vec();
            store.set(name, Tensor::new(&shape, out)?)?;
        }
        Ok(())
    }
}

/// Per-epoch summary. Wall time is kept out of the serialized record so
/// metric files are reproducible byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub loss_feature: f64,
    pub loss_classify: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w_a: f64,
    pub w_b: f64,
    pub lr: f64,
    pub train_accuracy: f64,
    pub weighted_phase: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl EpochReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    loss: f64,
    lf: f64,
    lc: f64,
    alpha: f64,
    beta: f64,
    w_a: f64,
    w_b: f64,
    correct: usize,
    seen: usize,
}

impl Accum {
    fn report(&self, epoch: usize, lr: f64, weighted: bool, start: Instant) -> EpochReport {
        let k = self.n.max(1) as f64;
        EpochReport {
            epoch,
            loss: self.loss / k,
            loss_feature: self.lf / k,
            loss_classify: self.lc / k,
            alpha: self.alpha / k,
            beta: self.beta / k,
            w_a: self.w_a / k,
            w_b: self.w_b / k,
            lr,
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
            weighted_phase: weighted,
            wall_time_s: start.elapsed().as_secs_f64(),
        }
    }
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
            epoch,
            batch,
            detail: format!("non-finite value in `{op}`"),
        },
        other => other,
    }
}

fn check_loss(epoch: usize, batch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            batch,
            detail: format!("{what} = {v}"),
        })
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(logits
        .argmax_rows()?
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count())
}

fn tracked_grads(ctx: &Forward<'_>, tape: &Tape, loss: &Tensor) -> Result<Vec<(String, Tensor)>> {
    let ids: Vec<_> = ctx.tracked().iter().map(|(_, id)| *id).collect();
    let g = tape.backward(loss, &ids)?;
    ctx.tracked()
        .iter()
        .map(|(name, id)| Ok((name.clone(), g.get(*id)?.clone())))
        .collect()
}

fn smoothing(model: &Model, cfg: &TrainConfig) -> SmoothingConfig {
    SmoothingConfig {
        epsilon: cfg.smoothing_epsilon,
        num_classes: model.config().num_classes,
    }
}

/// Supervised training with label-smoothed cross-entropy.
///
/// `on_epoch` sees each report as soon as its epoch finishes.
pub fn train_cloud(
    model: &mut Model,
    data: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Data("training set needs at least 2 samples".into()));
    }
    let smooth = smoothing(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0xC10D, 0));
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(cfg.num_epoch);
    for epoch in 1..=cfg.num_epoch {
        let start = Instant::now();
        let lr = cosine_lr(epoch - 1, cfg.num_epoch, cfg.lr_max, cfg.lr_min);
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (x, y) = data.batch(idx)?;
            let mut step = || -> Result<()> {
                let tape = Tape::new();
                let mut ctx = Forward::new(&tape, &model.params, Track::Trainable, true);
                let logits = model.forward_logits(&mut ctx, &x)?;
                let ce = smoothed_cross_entropy(&tape, &logits, &y, &smooth)?;
                let lc = f64::from(ce.loss.item());
                check_loss(epoch, b, "loss_classify", lc)?;
                let grads = tracked_grads(&ctx, &tape, &ce.loss)?;
                let stats = ctx.take_batch_stats();
                adam.step(&mut model.params, &grads, lr)?;
                model.apply_batch_stats(&stats)?;
                acc.n += 1;
                acc.loss += lc;
                acc.lc += lc;
                acc.beta += 1.0;
                acc.correct += count_correct(&logits, &y)?;
                acc.seen += y.len();
                Ok(())
            };
            step().map_err(|e| diverged(epoch, b, e))?;
        }
        let r = acc.report(epoch, lr, false, start);
        on_epoch(&r);
        reports.push(r);
    }
    Ok(reports)
}

/// How the alignment and classification losses are combined during the
/// weighted phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingMode {
    /// Gradient-norm adaptive weights.
    Adaptive,
    Fixed {
        alpha: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Proposed,
    WoDomainAdaptation,
    WoAdaptationAdjustment,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Self::Proposed,
        Self::WoAdaptationAdjustment,
        Self::WoDomainAdaptation,
    ];

    pub fn weighting(self) -> WeightingMode {
        match self {
            Self::Proposed => WeightingMode::Adaptive,
            Self::WoAdaptationAdjustment => WeightingMode::Fixed {
                alpha: 1.0,
                beta: 1.0,
            },
            Self::WoDomainAdaptation => WeightingMode::Fixed {
                alpha: 0.0,
                beta: 1.0,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::WoDomainAdaptation => "wo-da",
            Self::WoAdaptationAdjustment => "wo-aa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proposed" => Some(Self::Proposed),
            "wo-da" | "wo_domain_adaptation" => Some(Self::WoDomainAdaptation),
            "wo-aa" | "wo_adaptation_adjustment" => Some(Self::WoAdaptationAdjustment),
            _ => None,
        }
    }
}

/// Rows of `labels` drawn with replacement, classes assigned round-robin
/// from a random starting class so each class appears `~bs/K` times.
fn balanced_batch(rng: &mut ChaCha8Rng, by_class: &[Vec<usize>], bs: usize) -> Vec<usize> {
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let offset = rng.random_range(0..present.len());
    (0..bs)
        .map(|i| {
            let pool = present[(offset + i) % present.len()];
            pool[rng.random_range(0..pool.len())]
        })
        .collect()
}

/// Eval-mode features for a whole set, in chunks.
pub fn infer_features_chunked(model: &Model, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for lo in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (lo..(lo + chunk).min(n)).collect();
        parts.push(model.infer_features(&x.select_rows(&idx)?)?);
    }
    let d = model.config().feature_dim;
    let data: Vec<f32> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    Ok(Tensor::new(&[n, d], data)?)
}

/// Knowledge transfer into the edge model.
///
/// The cloud model only supplies fixed source features (eval mode). Per
/// iteration the edge model sees a class-balanced target batch, the
/// alignment loss compares its features with a class-balanced batch of
/// source features, and only non-frozen edge parameters are updated.
pub fn transfer_edge(
    cloud: &Model,
    edge: &mut Model,
    src: &SampleSet,
    tgt: &SampleSet,
    cfg: &TrainConfig,
    mode: WeightingMode,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    edge.assert_pre_fe_frozen()?;
    if cloud.config().feature_dim != edge.config().feature_dim {
        return Err(Error::ParamMismatch(
            "cloud and edge feature dims differ".into(),
        ));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Data(
            "transfer needs nonempty source and target sets".into(),
        ));
    }
    let smooth = smoothing(edge, cfg);
    let src_feats = infer_features_chunked(cloud, &src.inputs, 32)?;
    let (src_classes, tgt_classes) = (src.class_indices(), tgt.class_indices());
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0x7EA5, 0));
    let mut adam = Adam::new(cfg.adam);
    let iters = tgt.len().div_ceil(cfg.batch_size);
    let mut reports = Vec::with_capacity(cfg.num_epoch);

    for epoch in 1..=cfg.num_epoch {
        let start = Instant::now();
        let lr = cosine_lr(epoch - 1, cfg.num_epoch, cfg.lr_max, cfg.lr_min);
        let weighted = weighted_phase(epoch, cfg.num_epoch);
        let mut acc = Accum::default();
        for b in 0..iters {
            let si = balanced_batch(&mut rng, &src_classes, cfg.batch_size);
            let ti = balanced_batch(&mut rng, &tgt_classes, cfg.batch_size);
            let f_src = src_feats.select_rows(&si)?;
            let ys: Vec<usize> = si.iter().map(|&i| src.labels[i]).collect();
            let (x_t, yt) = tgt.batch(&ti)?;

            let mut step = || -> Result<()> {
                let tape = Tape::new();
                let mut ctx = Forward::new(&tape, &edge.params, Track::Trainable, true);
                let feat = edge.forward_features(&mut ctx, &x_t)?;
                let logits = edge.forward_head(&mut ctx, &feat)?;
                let (lf_t, lf) = lmmd(&tape, &f_src, &feat, &ys, &yt, &cfg.kernel)?;
                let ce = smoothed_cross_entropy(&tape, &logits, &yt, &smooth)?;
                let lc = f64::from(ce.loss.item());
                check_loss(epoch, b, "loss_feature", lf)?;
                check_loss(epoch, b, "loss_classify", lc)?;
                let terms = LossTerms {
                    loss_feature: lf,
                    loss_classify: lc,
                };

                let (alpha, beta, w_a, w_b) = match (weighted, mode) {
                    (false, _) => (0.0, 1.0, 0.0, 0.0),
                    (true, WeightingMode::Fixed { alpha, beta }) => (alpha, beta, 0.0, 0.0),
                    (true, WeightingMode::Adaptive) => {
                        let anchor = match cfg.anchor {
                            GradientAnchor::Features => &feat,
                            GradientAnchor::ClassifierOutput => &ce.smoothed_probs,
                        };
                        let node = anchor.node().ok_or_else(|| {
                            Error::NotFrozen(
                                "edge model has no trainable parameters before the anchor".into(),
                            )
                        })?;
                        let ga = tape.backward(&lf_t, &[node])?;
                        let gb = tape.backward(&ce.loss, &[node])?;
                        let w = adaptive_weights(
                            ga.l2_norm(node)?,
                            gb.l2_norm(node)?,
                            terms,
                            cfg.delta,
                        )?;
                        (w.alpha, w.beta, w.w_a, w.w_b)
                    }
                };
                check_loss(epoch, b, "alpha", alpha)?;
                check_loss(epoch, b, "beta", beta)?;
                let weighted_ce = tape.affine(&ce.loss, beta as f32, 0.0)?;
                let objective = if alpha != 0.0 {
                    let weighted_lf = tape.affine(&lf_t, alpha as f32, 0.0)?;
                    tape.add(&weighted_lf, &weighted_ce)?
                } else {
                    weighted_ce
                };
                let total = f64::from(objective.item());
                check_loss(epoch, b, "loss", total)?;
                let grads = tracked_grads(&ctx, &tape, &objective)?;
                let stats = ctx.take_batch_stats();
                adam.step(&mut edge.params, &grads, lr)?;
                edge.apply_batch_stats(&stats)?;

                acc.n += 1;
                acc.loss += total;
                acc.lf += lf;
                acc.lc += lc;
                acc.alpha += alpha;
                acc.beta += beta;
                acc.w_a += w_a;
                acc.w_b += w_b;
                acc.correct += count_correct(&logits, &yt)?;
                acc.seen += yt.len();
                Ok(())
            };
            step().map_err(|e| diverged(epoch, b, e))?;
        }
        let r = acc.report(epoch, lr, weighted, start);
        on_epoch(&r);
        reports.push(r);
    }
    Ok(reports)
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("true\\pred");
        for k in 0..self.num_classes {
            s.push_str(&format!(" {k:>5}"));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&format!("{i:>9}"));
            for v in row {
                s.push_str(&format!(" {v:>5}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Argmax accuracy with eval-mode batch norm.
pub fn evaluate(model: &Model, data: &SampleSet) -> Result<Evaluation> {
    let k = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let n = data.len();
    for lo in (0..n).step_by(64) {
        let idx: Vec<usize> = (lo..(lo + 64).min(n)).collect();
        let (x, y) = data.batch(&idx)?;
        let pred = model.infer_logits(&x)?.argmax_rows()?;
        for (p, t) in pred.into_iter().zip(y) {
            if t >= k {
                return Err(Error::Data(format!(
                    "label {t} out of range for {k} classes"
                )));
            }
            cm.counts[t][p] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: cm.accuracy(),
        confusion: cm,
    })
}

/// Seeds for one pipeline run, derived from a single experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSeeds {
    pub data: u64,
    pub cloud_init: u64,
    pub cloud_train: u64,
    pub edge_init: u64,
    pub transfer: u64,
}

impl PipelineSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            data: stream_seed(seed, 1, 0),
            cloud_init: stream_seed(seed, 2, 0),
            cloud_train: stream_seed(seed, 3, 0),
            edge_init: stream_seed(seed, 4, 0),
            transfer: stream_seed(seed, 5, 0),
        }
    }
}

/// Builds and trains the cloud model for one seed.
pub fn run_cloud(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SampleSet,
    seed: u64,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(Model, Vec<EpochReport>)> {
    let seeds = PipelineSeeds::from_seed(seed);
    let mut model = build_model(model_cfg, ModelKind::Cloud, seeds.cloud_init)?;
    let cfg = TrainConfig {
        seed: seeds.cloud_train,
        ..train_cfg.clone()
    };
    let reports = train_cloud(&mut model, data, &cfg, on_epoch)?;
    Ok((model, reports))
}

pub struct AblationRun {
    pub variant: Variant,
    pub edge: Model,
    pub reports: Vec<EpochReport>,
    pub evaluation: Evaluation,
}

/// One ablation arm: fresh edge model, Pre-FE shared from `cloud` and
/// frozen, transfer with the variant's weighting, then test evaluation.
pub fn run_ablation(
    variant: Variant,
    cloud: &Model,
    splits: &Splits,
    transfer_cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<AblationRun> {
    let seeds = PipelineSeeds::from_seed(seed);
    let mut edge = build_model(cloud.config(), ModelKind::Edge, seeds.edge_init)?;
    share_pre_fe(cloud, &mut edge)?;
    edge.freeze_pre_fe();
    let cfg = TrainConfig {
        seed: seeds.transfer,
        ..transfer_cfg.clone()
    };
    let reports = transfer_edge(
        cloud,
        &mut edge,
        &splits.finetune_src,
        &splits.finetune_tgt,
        &cfg,
        variant.weighting(),
        on_epoch,
    )?;
    let evaluation = evaluate(&edge, &splits.test)?;
    Ok(AblationRun {
        variant,
        edge,
        reports,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 0.0), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3, 1e-5) - 1e-5 < 1e-15);
        assert!((cosine_lr(5, 10, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_frozen() {
        let mut s = ParamStore::new();
        s.insert_named("a", Tensor::zeros(&[2])).unwrap();
        s.freeze_prefix("a");
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam
            .step(&mut s, &[("a".into(), Tensor::full(&[2], 1.0))], 0.1)
            .is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut s = ParamStore::new();
        s.insert_named("a", Tensor::zeros(&[2])).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(
            &mut s,
            &[("a".into(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())],
            0.01,
        )
        .unwrap();
        let a = s.get("a").unwrap().data();
        assert!((a[0] + 0.01).abs() < 1e-6 && (a[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn confusion_counts() {
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![vec![3, 1], vec![0, 4]];
        assert_eq!(cm.row_sums(), vec![4, 4]);
        assert_eq!(cm.accuracy(), 7.0 / 8.0);
    }

    #[test]
    fn balanced_batches_cover_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let by_class = vec![vec![0, 1], vec![2], vec![3, 4, 5]];
        let b = balanced_batch(&mut rng, &by_class, 9);
        let mut per = [0; 3];
        for i in b {
            per[match i {
                0 | 1 => 0,
                2 => 1,
                _ => 2,
            }] += 1;
        }
        assert_eq!(per, [3, 3, 3]);
    }
}
