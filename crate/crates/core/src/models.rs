//! Cloud (C) and edge (E) models built from a shared configuration.
//!
//! Both models are `pre_fe -> pos_fe -> global average pool -> proj -> classifier`.
//! `pre_fe` is defined once in [`ModelConfig`] so the two models always
//! agree on its parameter names, shapes and layer order. The cloud model's
//! posterior extractor is a stack of residual stages, the edge model's is
//! four depthwise-separable stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, Dense, DepthwiseSeparableBlock, Forward, LayerDesc, ParamStore,
    ResidualBlock, Track,
};
use crate::tensor::{BatchStats, Tape, Tensor};

pub const PRE_FE_PREFIX: &str = "pre_fe.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cloud,
    Edge,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cloud => "cloud",
            Self::Edge => "edge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cloud" => Some(Self::Cloud),
            "edge" => Some(Self::Edge),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Output width of each stem conv (3x3, stride 1, BN, ReLU).
    pub pre_fe_widths: Vec<usize>,
    /// Residual stage widths; each stage downsamples by 2 in its first block.
    pub c_stage_widths: Vec<usize>,
    pub c_blocks_per_stage: usize,
    /// Depthwise-separable stage widths, stride 2 each. Exactly four.
    pub e_stage_widths: Vec<usize>,
    /// Common feature dimension of both models.
    pub feature_dim: usize,
    /// Hidden width of the classifier; 0 means a single dense layer.
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [6, 32, 32],
            num_classes: 5,
            pre_fe_widths: vec![32, 32],
            c_stage_widths: vec![64, 128, 256, 512],
            c_blocks_per_stage: 2,
            e_stage_widths: vec![48, 64, 96, 128],
            feature_dim: 128,
            classifier_hidden: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            return Err(Error::config(
                "input_shape",
                "all dimensions must be positive",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.pre_fe_widths.is_empty() || self.pre_fe_widths.contains(&0) {
            return Err(Error::config(
                "pre_fe_widths",
                "need at least one positive width",
            ));
        }
        if self.c_stage_widths.contains(&0) {
            return Err(Error::config("c_stage_widths", "widths must be positive"));
        }
        if !self.c_stage_widths.is_empty() && self.c_blocks_per_stage == 0 {
            return Err(Error::config("c_blocks_per_stage", "must be at least 1"));
        }
        if self.e_stage_widths.len() != 4 {
            return Err(Error::config(
                "e_stage_widths",
                format!(
                    "exactly 4 stages required, got {}",
                    self.e_stage_widths.len()
                ),
            ));
        }
        if self.e_stage_widths.contains(&0) {
            return Err(Error::config("e_stage_widths", "widths must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        Ok(())
    }

    /// Stable `key=value` text, one per line, used for hashing and echoing.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "model.input_shape={}\nmodel.num_classes={}\nmodel.pre_fe_widths={}\nmodel.c_stage_widths={}\n\
             model.c_blocks_per_stage={}\nmodel.e_stage_widths={}\nmodel.feature_dim={}\nmodel.classifier_hidden={}\n",
            list(&self.input_shape),
            self.num_classes,
            list(&self.pre_fe_widths),
            list(&self.c_stage_widths),
            self.c_blocks_per_stage,
            list(&self.e_stage_widths),
            self.feature_dim,
            self.classifier_hidden,
        )
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
enum PosFe {
    Residual(Vec<ResidualBlock>),
    Separable(Vec<DepthwiseSeparableBlock>),
}

#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    pre_fe: Vec<(Conv2d, BatchNorm2d)>,
    pos_fe: PosFe,
    proj: Dense,
    classifier: Vec<Dense>,
    pub params: ParamStore,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, kind: ModelKind, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();

    let mut pre_fe = Vec::new();
    let mut ch = config.input_shape[0];
    for (i, &w) in config.pre_fe_widths.iter().enumerate() {
        let conv = Conv2d::same(&format!("pre_fe.conv{}", i + 1), ch, w, 3, 1);
        let bn = BatchNorm2d::new(&format!("pre_fe.bn{}", i + 1), w);
        conv.init(&mut params, &mut rng)?;
        bn.init(&mut params)?;
        pre_fe.push((conv, bn));
        ch = w;
    }

    let pos_fe = match kind {
        ModelKind::Cloud => {
            let mut blocks = Vec::new();
            for (s, &w) in config.c_stage_widths.iter().enumerate() {
                for b in 0..config.c_blocks_per_stage {
                    let stride = if b == 0 { 2 } else { 1 };
                    let block = ResidualBlock::new(
                        &format!("c_pos_fe.stage{}.block{}", s + 1, b + 1),
                        ch,
                        w,
                        stride,
                    );
                    block.init(&mut params, &mut rng)?;
                    blocks.push(block);
                    ch = w;
                }
            }
            PosFe::Residual(blocks)
        }
        ModelKind::Edge => {
            let mut blocks = Vec::new();
            for (s, &w) in config.e_stage_widths.iter().enumerate() {
                let block =
                    DepthwiseSeparableBlock::new(&format!("e_pos_fe.stage{}", s + 1), ch, w, 3, 2);
                block.init(&mut params, &mut rng)?;
                blocks.push(block);
                ch = w;
            }
            PosFe::Separable(blocks)
        }
    };

    let proj = Dense::new("proj", ch, config.feature_dim);
    proj.init(&mut params, &mut rng)?;
    let mut classifier = Vec::new();
    if config.classifier_hidden > 0 {
        classifier.push(Dense::new(
            "classifier.hidden",
            config.feature_dim,
            config.classifier_hidden,
        ));
        classifier.push(Dense::new(
            "classifier.out",
            config.classifier_hidden,
            config.num_classes,
        ));
    } else {
        classifier.push(Dense::new(
            "classifier",
            config.feature_dim,
            config.num_classes,
        ));
    }
    for d in &classifier {
        d.init(&mut params, &mut rng)?;
    }

    let model = Model {
        kind,
        config: config.clone(),
        pre_fe,
        pos_fe,
        proj,
        classifier,
        params,
    };
    // Shape-checks the whole stack once at build time.
    model.describe()?;
    Ok(model)
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape {
            return Err(Error::ParamMismatch(format!(
                "{} model expects [N, {:?}] input, got {:?}",
                self.kind.as_str(),
                self.config.input_shape,
                s
            )));
        }
        Ok(())
    }

    pub fn forward_pre_fe(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (conv, bn) in &self.pre_fe {
            h = conv.forward(ctx, &h)?;
            h = bn.forward(ctx, &h)?;
            h = ctx.tape.relu(&h)?;
        }
        Ok(h)
    }

    /// Pooled, projected feature vector `[N, feature_dim]`.
    pub fn forward_features(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let mut h = self.forward_pre_fe(ctx, x)?;
        match &self.pos_fe {
            PosFe::Residual(blocks) => {
                for b in blocks {
                    h = b.forward(ctx, &h)?;
                }
            }
            PosFe::Separable(blocks) => {
                for b in blocks {
                    h = b.forward(ctx, &h)?;
                }
            }
        }
        let pooled = ctx.tape.global_avg_pool(&h)?;
        self.proj.forward(ctx, &pooled)
    }

    /// Classifier applied to features from [`Model::forward_features`].
    pub fn forward_head(&self, ctx: &mut Forward<'_>, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        let last = self.classifier.len() - 1;
        for (i, d) in self.classifier.iter().enumerate() {
            h = d.forward(ctx, &h)?;
            if i < last {
                h = ctx.tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_logits(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let f = self.forward_features(ctx, x)?;
        self.forward_head(ctx, &f)
    }

    fn infer_with<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(&Self, &mut Forward<'_>, &Tensor) -> Result<Tensor>,
    {
        let tape = Tape::no_grad();
        let mut ctx = Forward::new(&tape, &self.params, Track::None, false);
        f(self, &mut ctx, x)
    }

    /// Eval-mode forward without recording.
    pub fn infer_pre_fe(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_with(x, Self::forward_pre_fe)
    }

    pub fn infer_features(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_with(x, Self::forward_features)
    }

    pub fn infer_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_with(x, Self::forward_logits)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        let mut v: Vec<&BatchNorm2d> = self.pre_fe.iter().map(|(_, bn)| bn).collect();
        match &self.pos_fe {
            PosFe::Residual(blocks) => v.extend(blocks.iter().flat_map(|b| b.batch_norms())),
            PosFe::Separable(blocks) => v.extend(blocks.iter().flat_map(|b| b.batch_norms())),
        }
        v
    }

    /// Folds training-mode batch statistics into the running buffers.
    /// Layers whose parameters are frozen are left alone.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            let bn = self
                .batch_norms()
                .into_iter()
                .find(|bn| &bn.name == name)
                .cloned()
                .ok_or_else(|| Error::ParamMismatch(format!("no batch-norm layer `{name}`")))?;
            if self.params.is_frozen(&format!("{name}.gamma")) {
                continue;
            }
            bn.update_running(&mut self.params, s)?;
        }
        Ok(())
    }

    /// Flags every `pre_fe.*` entry (weights and running statistics) as
    /// frozen. Frozen batch-norm layers run in eval mode from then on.
    pub fn freeze_pre_fe(&mut self) -> usize {
        self.params.freeze_prefix(PRE_FE_PREFIX)
    }

    /// Errors unless every `pre_fe.*` entry is frozen.
    pub fn assert_pre_fe_frozen(&self) -> Result<()> {
        let mut any = false;
        for (name, e) in self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(PRE_FE_PREFIX))
        {
            any = true;
            if !e.frozen {
                return Err(Error::NotFrozen(format!("`{name}` is not frozen")));
            }
        }
        if !any {
            return Err(Error::NotFrozen("model has no pre_fe entries".into()));
        }
        Ok(())
    }

    /// Replaces all entries from `store`, which must hold exactly this
    /// model's names with matching shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if let Some(n) = self.params.names().find(|n| !store.contains(n)) {
            return Err(Error::ParamMismatch(format!("archive lacks `{n}`")));
        }
        if let Some(n) = store.names().find(|n| !self.params.contains(n)) {
            return Err(Error::ParamMismatch(format!("unexpected entry `{n}`")));
        }
        for (name, e) in store.iter() {
            let have = self.params.get(name)?.shape();
            if have != e.tensor.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{name}` has shape {:?}, model expects {have:?}",
                    e.tensor.shape()
                )));
            }
        }
        self.params.copy_from(store)
    }

    pub fn pre_fe_snapshot(&self) -> ParamStore {
        self.params.subset(PRE_FE_PREFIX)
    }

    /// Primitive layer list at batch size 1.
    pub fn describe(&self) -> Result<Vec<LayerDesc>> {
        self.describe_at(&self.config.input_shape)
    }

    /// Like [`Model::describe`] for a per-sample input shape `[C, H, W]`.
    pub fn describe_at(&self, input_shape: &[usize]) -> Result<Vec<LayerDesc>> {
        if input_shape.len() != 3 || input_shape[0] != self.config.input_shape[0] {
            return Err(Error::config(
                "input_shape",
                format!(
                    "expected [{}, H, W], got {input_shape:?}",
                    self.config.input_shape[0]
                ),
            ));
        }
        let mut out = Vec::new();
        let mut s = input_shape.to_vec();
        for (conv, bn) in &self.pre_fe {
            s = conv.describe(&s, &mut out)?;
            s = bn.describe(&s, &mut out)?;
            out.push(LayerDesc {
                name: format!("{}.relu", conv.name),
                kind: crate::nn::LayerKind::Relu,
                input_shape: s.clone(),
                output_shape: s.clone(),
                param_names: Vec::new(),
            });
        }
        match &self.pos_fe {
            PosFe::Residual(blocks) => {
                for b in blocks {
                    s = b.describe(&s, &mut out)?;
                }
            }
            PosFe::Separable(blocks) => {
                for b in blocks {
                    s = b.describe(&s, &mut out)?;
                }
            }
        }
        s = crate::nn::pool_desc("pool", &s, &mut out);
        s = self.proj.describe(&s, &mut out)?;
        let last = self.classifier.len() - 1;
        for (i, d) in self.classifier.iter().enumerate() {
            s = d.describe(&s, &mut out)?;
            if i < last {
                out.push(LayerDesc {
                    name: format!("{}.relu", d.name),
                    kind: crate::nn::LayerKind::Relu,
                    input_shape: s.clone(),
                    output_shape: s.clone(),
                    param_names: Vec::new(),
                });
            }
        }
        Ok(out)
    }
}

/// Copies every `pre_fe.*` entry of `source` into `target`.
///
/// Name sets, order and shapes must agree; the first mismatch is reported.
pub fn share_pre_fe(source: &Model, target: &mut Model) -> Result<()> {
    let src = source.pre_fe_snapshot();
    share_pre_fe_from(&src, target)
}

/// As [`share_pre_fe`], from a store holding only `pre_fe.*` entries
/// (e.g. one loaded from an archive subset).
pub fn share_pre_fe_from(src: &ParamStore, target: &mut Model) -> Result<()> {
    let tgt_names: Vec<String> = target
        .params
        .names()
        .filter(|n| n.starts_with(PRE_FE_PREFIX))
        .map(str::to_string)
        .collect();
    let src_names: Vec<&str> = src
        .names()
        .filter(|n| n.starts_with(PRE_FE_PREFIX))
        .collect();
    let longest = tgt_names.len().max(src_names.len());
    for i in 0..longest {
        match (src_names.get(i), tgt_names.get(i)) {
            (Some(a), Some(b)) if *a == b.as_str() => {
                let (sa, sb) = (src.get(a)?.shape(), target.params.get(b)?.shape());
                if sa != sb {
                    return Err(Error::ParamMismatch(format!(
                        "`{a}`: source shape {sa:?}, target shape {sb:?}"
                    )));
                }
            }
            (a, b) => {
                return Err(Error::ParamMismatch(format!(
                    "pre_fe entry {i}: source `{}`, target `{}`",
                    a.copied().unwrap_or("<none>"),
                    b.map(String::as_str).unwrap_or("<none>")
                )))
            }
        }
    }
    target.params.copy_from(&src.subset(PRE_FE_PREFIX))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_shape: [2, 8, 8],
            num_classes: 3,
            pre_fe_widths: vec![4],
            c_stage_widths: vec![8, 8],
            c_blocks_per_stage: 1,
            e_stage_widths: vec![4, 4, 6, 6],
            feature_dim: 5,
            classifier_hidden: 0,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model(&tiny(), ModelKind::Edge, 7).unwrap();
        let b = build_model(&tiny(), ModelKind::Edge, 7).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let c = build_model(&tiny(), ModelKind::Edge, 8).unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn e_stage_count_enforced() {
        let mut cfg = tiny();
        cfg.e_stage_widths.pop();
        match build_model(&cfg, ModelKind::Edge, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "e_stage_widths"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logits_shape() {
        let m = build_model(&tiny(), ModelKind::Cloud, 1).unwrap();
        let x = Tensor::full(&[3, 2, 8, 8], 0.5);
        assert_eq!(m.infer_logits(&x).unwrap().shape(), &[3, 3]);
        assert!(m.infer_logits(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn pre_fe_structure_matches() {
        let c = build_model(&tiny(), ModelKind::Cloud, 1).unwrap();
        let e = build_model(&tiny(), ModelKind::Edge, 2).unwrap();
        let (sc, se) = (c.pre_fe_snapshot(), e.pre_fe_snapshot());
        let names = |s: &ParamStore| {
            s.iter()
                .map(|(n, e)| (n.to_string(), e.tensor.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(names(&sc), names(&se));
    }

    #[test]
    fn share_copies_without_alias() {
        let mut c = build_model(&tiny(), ModelKind::Cloud, 1).unwrap();
        let mut e = build_model(&tiny(), ModelKind::Edge, 2).unwrap();
        share_pre_fe(&c, &mut e).unwrap();
        assert!(c.pre_fe_snapshot().bit_eq(&e.pre_fe_snapshot()));
        c.params
            .set("pre_fe.conv1.weight", Tensor::zeros(&[4, 2, 3, 3]))
            .unwrap();
        assert!(!c.pre_fe_snapshot().bit_eq(&e.pre_fe_snapshot()));
    }

    #[test]
    fn share_reports_mismatch() {
        let c = build_model(&tiny(), ModelKind::Cloud, 1).unwrap();
        let mut cfg = tiny();
        cfg.pre_fe_widths = vec![6];
        let mut e = build_model(&cfg, ModelKind::Edge, 2).unwrap();
        let err = share_pre_fe(&c, &mut e).unwrap_err().to_string();
        assert!(err.contains("pre_fe.conv1.weight"), "{err}");
    }

    #[test]
    fn freeze_marks_pre_fe_only() {
        let mut e = build_model(&tiny(), ModelKind::Edge, 2).unwrap();
        assert!(e.assert_pre_fe_frozen().is_err());
        assert_eq!(e.freeze_pre_fe(), 5);
        e.assert_pre_fe_frozen().unwrap();
        assert!(!e.params.is_frozen("e_pos_fe.stage1.dw.weight"));
    }

    #[test]
    fn hash_depends_on_config() {
        let a = tiny();
        let mut b = tiny();
        b.feature_dim = 6;
        assert_eq!(a.hash(), tiny().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn default_edge_is_small() {
        let cfg = ModelConfig::default();
        let c = build_model(&cfg, ModelKind::Cloud, 0).unwrap();
        let e = build_model(&cfg, ModelKind::Edge, 0).unwrap();
        assert!(e.params.param_count() * 10 <= c.params.param_count());
    }
}
