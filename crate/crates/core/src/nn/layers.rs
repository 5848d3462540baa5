use rand::Rng;

use super::{EntryKind, Forward, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Conv2dSpec, Tensor};

/// Primitive operation kinds, as seen by the complexity analyzer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Elementwise sum of a residual branch and its shortcut.
    Add,
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

/// One primitive layer with its per-sample input/output shapes and the
/// store entries that hold its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub param_names: Vec<String>,
}

fn he_uniform(rng: &mut impl Rng, numel: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..numel)
        .map(|_| rng.random_range(-bound..=bound))
        .collect()
}

fn relu_desc(name: &str, shape: &[usize], out: &mut Vec<LayerDesc>) {
    out.push(LayerDesc {
        name: format!("{name}.relu"),
        kind: LayerKind::Relu,
        input_shape: shape.to_vec(),
        output_shape: shape.to_vec(),
        param_names: Vec::new(),
    });
}

/// 2-D convolution layer. Weight shape `[out, in/groups, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Square kernel with "same" padding `(k-1)/2`, no grouping, no bias.
    pub fn same(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel: (k, k),
            stride,
            padding: (k - 1) / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
        {
            return Err(Error::config(
                &self.name,
                "channels and kernel must be positive",
            ));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::config(
                &self.name,
                format!(
                    "groups={} must divide in_channels={} and out_channels={}",
                    self.groups, self.in_channels, self.out_channels
                ),
            ));
        }
        if self.stride == 0 {
            return Err(Error::config(&self.name, "stride must be positive"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.bias { self.out_channels } else { 0 }
    }

    pub fn spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec![format!("{}.weight", self.name)];
        if self.bias {
            v.push(format!("{}.bias", self.name));
        }
        v
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let w = he_uniform(rng, shape.iter().product(), fan_in);
        store.insert(
            &format!("{}.weight", self.name),
            Tensor::new(&shape, w)?,
            EntryKind::Param,
        )?;
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                Tensor::zeros(&[self.out_channels]),
                EntryKind::Param,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &Forward<'_>, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::ParamMismatch(format!(
                "{}: expected {} input channels, got input {:?}",
                self.name,
                self.in_channels,
                x.shape()
            )));
        }
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        Ok(ctx.tape.conv2d(x, w, b, self.spec())?)
    }

    /// Output shape `[C', H', W']` for a per-sample input `[C, H, W]`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spec = self.spec();
        match input {
            [c, h, w] if *c == self.in_channels => {
                match (
                    spec.output_size(*h, self.kernel.0),
                    spec.output_size(*w, self.kernel.1),
                ) {
                    (Some(ho), Some(wo)) => Ok(vec![self.out_channels, ho, wo]),
                    _ => Err(Error::config(
                        &self.name,
                        format!("kernel does not fit input {input:?}"),
                    )),
                }
            }
            _ => Err(Error::config(
                &self.name,
                format!("incompatible input {input:?}"),
            )),
        }
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerDesc>) -> Result<Vec<usize>> {
        let output = self.output_shape(input)?;
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::Conv2d {
                in_channels: self.in_channels,
                out_channels: self.out_channels,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
                groups: self.groups,
                bias: self.bias,
            },
            input_shape: input.to_vec(),
            output_shape: output.clone(),
            param_names: self.param_names(),
        });
        Ok(output)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        store.insert(
            &format!("{}.gamma", self.name),
            Tensor::full(&[c], 1.0),
            EntryKind::Param,
        )?;
        store.insert(
            &format!("{}.beta", self.name),
            Tensor::zeros(&[c]),
            EntryKind::Param,
        )?;
        store.insert(
            &format!("{}.running_mean", self.name),
            Tensor::zeros(&[c]),
            EntryKind::Buffer,
        )?;
        store.insert(
            &format!("{}.running_var", self.name),
            Tensor::full(&[c], 1.0),
            EntryKind::Buffer,
        )?;
        Ok(())
    }

    /// Training mode uses batch statistics unless this layer's scale is
    /// frozen; eval mode (and frozen layers) use the running statistics.
    pub fn forward(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let gamma_name = format!("{}.gamma", self.name);
        let train = ctx.is_train() && !ctx.is_frozen(&gamma_name);
        let gamma = ctx.param(&gamma_name)?.clone();
        let beta = ctx.param(&format!("{}.beta", self.name))?.clone();
        if train {
            let (y, stats) =
                ctx.tape
                    .batch_norm(x, &gamma, &beta, BatchNormMode::Train, self.eps)?;
            if let Some(stats) = stats {
                ctx.push_batch_stats(&self.name, stats);
            }
            Ok(y)
        } else {
            let rm = ctx.param(&format!("{}.running_mean", self.name))?.clone();
            let rv = ctx.param(&format!("{}.running_var", self.name))?.clone();
            let mode = BatchNormMode::Eval {
                running_mean: rm.data(),
                running_var: rv.data(),
            };
            Ok(ctx.tape.batch_norm(x, &gamma, &beta, mode, self.eps)?.0)
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(
        &self,
        store: &mut ParamStore,
        stats: &crate::tensor::BatchStats,
    ) -> Result<()> {
        let m = self.momentum;
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{}.{suffix}", self.name);
            let old = store.get(&name)?;
            let new: Vec<f32> = old
                .data()
                .iter()
                .zip(batch.iter())
                .map(|(&r, &b)| (1.0 - m) * r + m * b)
                .collect();
            store.set(&name, Tensor::new(&[self.channels], new)?)?;
        }
        Ok(())
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerDesc>) -> Result<Vec<usize>> {
        if input.first() != Some(&self.channels) {
            return Err(Error::config(
                &self.name,
                format!("incompatible input {input:?}"),
            ));
        }
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::BatchNorm {
                channels: self.channels,
            },
            input_shape: input.to_vec(),
            output_shape: input.to_vec(),
            param_names: vec![
                format!("{}.gamma", self.name),
                format!("{}.beta", self.name),
            ],
        });
        Ok(input.to_vec())
    }
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Dense {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.to_string(),
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_features * self.in_features + if self.bias { self.out_features } else { 0 }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::config(&self.name, "features must be positive"));
        }
        let w = he_uniform(rng, self.in_features * self.out_features, self.in_features);
        store.insert(
            &format!("{}.weight", self.name),
            Tensor::new(&[self.out_features, self.in_features], w)?,
            EntryKind::Param,
        )?;
        if self.bias {
            store.insert(
                &format!("{}.bias", self.name),
                Tensor::zeros(&[self.out_features]),
                EntryKind::Param,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        Ok(ctx.tape.linear(x, w, b)?)
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerDesc>) -> Result<Vec<usize>> {
        if input != [self.in_features] {
            return Err(Error::config(
                &self.name,
                format!("incompatible input {input:?}"),
            ));
        }
        let mut names = vec![format!("{}.weight", self.name)];
        if self.bias {
            names.push(format!("{}.bias", self.name));
        }
        out.push(LayerDesc {
            name: self.name.clone(),
            kind: LayerKind::Dense {
                in_features: self.in_features,
                out_features: self.out_features,
                bias: self.bias,
            },
            input_shape: input.to_vec(),
            output_shape: vec![self.out_features],
            param_names: names,
        });
        Ok(vec![self.out_features])
    }
}

/// Depthwise `k x k` convolution (one filter per channel) followed by a
/// `1 x 1` pointwise convolution that mixes channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseSeparableBlock {
    pub name: String,
    pub depthwise: Conv2d,
    pub depthwise_norm: Option<BatchNorm2d>,
    pub pointwise: Conv2d,
    pub pointwise_norm: Option<BatchNorm2d>,
    pub activation: bool,
}

impl DepthwiseSeparableBlock {
    /// Conv -> BN -> ReLU for both sub-convolutions, convs without bias.
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            depthwise: Conv2d::same(&format!("{name}.dw"), in_channels, in_channels, k, stride)
                .with_groups(in_channels),
            depthwise_norm: Some(BatchNorm2d::new(&format!("{name}.dw_bn"), in_channels)),
            pointwise: Conv2d::same(&format!("{name}.pw"), in_channels, out_channels, 1, 1),
            pointwise_norm: Some(BatchNorm2d::new(&format!("{name}.pw_bn"), out_channels)),
            activation: true,
        }
    }

    /// The two convolutions alone, with biases, no normalization or activation.
    pub fn plain(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            depthwise: Conv2d::same(&format!("{name}.dw"), in_channels, in_channels, k, stride)
                .with_groups(in_channels)
                .with_bias(true),
            depthwise_norm: None,
            pointwise: Conv2d::same(&format!("{name}.pw"), in_channels, out_channels, 1, 1)
                .with_bias(true),
            pointwise_norm: None,
            activation: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count()
            + self.pointwise.param_count()
            + self
                .depthwise_norm
                .as_ref()
                .map_or(0, BatchNorm2d::param_count)
            + self
                .pointwise_norm
                .as_ref()
                .map_or(0, BatchNorm2d::param_count)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.depthwise.groups != self.depthwise.in_channels
            || self.depthwise.out_channels != self.depthwise.in_channels
        {
            return Err(Error::config(
                &self.depthwise.name,
                "depthwise conv must have groups == channels",
            ));
        }
        if self.pointwise.kernel != (1, 1) || self.pointwise.groups != 1 {
            return Err(Error::config(
                &self.pointwise.name,
                "pointwise conv must be 1x1 with groups == 1",
            ));
        }
        self.depthwise.init(store, rng)?;
        if let Some(bn) = &self.depthwise_norm {
            bn.init(store)?;
        }
        self.pointwise.init(store, rng)?;
        if let Some(bn) = &self.pointwise_norm {
            bn.init(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let mut h = self.depthwise.forward(ctx, x)?;
        if let Some(bn) = &self.depthwise_norm {
            h = bn.forward(ctx, &h)?;
        }
        if self.activation {
            h = ctx.tape.relu(&h)?;
        }
        h = self.pointwise.forward(ctx, &h)?;
        if let Some(bn) = &self.pointwise_norm {
            h = bn.forward(ctx, &h)?;
        }
        if self.activation {
            h = ctx.tape.relu(&h)?;
        }
        Ok(h)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        self.depthwise_norm.iter().chain(self.pointwise_norm.iter())
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerDesc>) -> Result<Vec<usize>> {
        let mut s = self.depthwise.describe(input, out)?;
        if let Some(bn) = &self.depthwise_norm {
            s = bn.describe(&s, out)?;
        }
        if self.activation {
            relu_desc(&self.depthwise.name, &s, out);
        }
        s = self.pointwise.describe(&s, out)?;
        if let Some(bn) = &self.pointwise_norm {
            s = bn.describe(&s, out)?;
        }
        if self.activation {
            relu_desc(&self.pointwise.name, &s, out);
        }
        Ok(s)
    }
}

/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when input and output shapes agree and a
/// `1 x 1` strided projection with batch norm otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    /// Adds a projection exactly when one is needed.
    pub fn new(name: &str, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let needs = in_channels != out_channels || stride != 1;
        Self::with_projection(name, in_channels, out_channels, stride, needs)
            .expect("projection matches need")
    }

    /// Fails when the shapes differ but no projection was requested.
    pub fn with_projection(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        projection: bool,
    ) -> Result<Self> {
        if (in_channels != out_channels || stride != 1) && !projection {
            return Err(Error::config(
                name,
                format!(
                    "shortcut {in_channels}->{out_channels} at stride {stride} needs a projection"
                ),
            ));
        }
        Ok(Self {
            name: name.to_string(),
            conv1: Conv2d::same(
                &format!("{name}.conv1"),
                in_channels,
                out_channels,
                3,
                stride,
            ),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_channels),
            conv2: Conv2d::same(&format!("{name}.conv2"), out_channels, out_channels, 3, 1),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_channels),
            projection: projection.then(|| {
                (
                    Conv2d::same(
                        &format!("{name}.proj"),
                        in_channels,
                        out_channels,
                        1,
                        stride,
                    ),
                    BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels),
                )
            }),
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self
                .projection
                .as_ref()
                .map_or(0, |(c, b)| c.param_count() + b.param_count())
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.bn1.init(store)?;
        self.conv2.init(store, rng)?;
        self.bn2.init(store)?;
        if let Some((c, b)) = &self.projection {
            c.init(store, rng)?;
            b.init(store)?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Forward<'_>, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, &h)?;
        let h = ctx.tape.relu(&h)?;
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.bn2.forward(ctx, &h)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, &s)?
            }
            None => x.clone(),
        };
        let sum = ctx.tape.add(&h, &shortcut)?;
        Ok(ctx.tape.relu(&sum)?)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        [&self.bn1, &self.bn2]
            .into_iter()
            .chain(self.projection.as_ref().map(|(_, b)| b))
    }

    pub fn describe(&self, input: &[usize], out: &mut Vec<LayerDesc>) -> Result<Vec<usize>> {
        let mut s = self.conv1.describe(input, out)?;
        s = self.bn1.describe(&s, out)?;
        relu_desc(&self.conv1.name, &s, out);
        s = self.conv2.describe(&s, out)?;
        s = self.bn2.describe(&s, out)?;
        if let Some((c, b)) = &self.projection {
            let p = c.describe(input, out)?;
            b.describe(&p, out)?;
        } else if input != s.as_slice() {
            return Err(Error::config(
                &self.name,
                "identity shortcut with mismatched shapes",
            ));
        }
        out.push(LayerDesc {
            name: format!("{}.add", self.name),
            kind: LayerKind::Add,
            input_shape: s.clone(),
            output_shape: s.clone(),
            param_names: Vec::new(),
        });
        relu_desc(&self.name, &s, out);
        Ok(s)
    }
}

/// Pool descriptor helper shared by the models.
pub fn pool_desc(name: &str, input: &[usize], out: &mut Vec<LayerDesc>) -> Vec<usize> {
    let output = vec![input[0]];
    out.push(LayerDesc {
        name: name.to_string(),
        kind: LayerKind::GlobalAvgPool,
        input_shape: input.to_vec(),
        output_shape: output.clone(),
        param_names: Vec::new(),
    });
    output
}
