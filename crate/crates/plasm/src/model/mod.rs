//! Declarative residual (and plain, skip-free) convolutional classifiers.
//!
//! A [`ModelConfig`] describes the architecture; [`build_model`] allocates its
//! named parameters deterministically; [`forward`] runs a pure forward pass
//! and [`forward_on_tape`] records a differentiable one. The binary head is
//! always a single sigmoid unit.

pub mod checkpoint;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, BnBatchStats};
use crate::tensor::{Activation, BnMode, NodeId, RunningStats, Tape, Tensor};

/// Batch-norm epsilon used throughout the models.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: new = (1 - momentum) * old + momentum * batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (4x); `out_channels` includes the expansion.
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Optional max pool after the stem conv: (window, stride).
    pub pool: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub out_channels: usize,
    pub first_stride: usize,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input (channels, height, width).
    pub input_size: (usize, usize, usize),
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Hidden dense widths before the final 1-unit sigmoid head.
    pub head_hidden: Vec<usize>,
    /// False builds the plain (VGG-style) stack: same conv layers, no adds.
    pub skip_connections: bool,
    /// Insert batch norm after every convolution.
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCounts {
    /// Main-path convolutions (stem + block convs). Projection shortcuts are
    /// part of the skip path and are not counted as layers.
    pub conv_layers: usize,
    pub dense_layers: usize,
    pub shortcut_projections: usize,
}

impl ModelConfig {
    pub fn resnet_mini() -> Self {
        ModelConfig {
            input_size: (3, 64, 64),
            stem: StemSpec {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pool: Some((2, 2)),
            },
            stages: vec![
                StageSpec {
                    blocks: 2,
                    out_channels: 16,
                    first_stride: 2,
                    kind: BlockKind::Basic,
                },
                StageSpec {
                    blocks: 2,
                    out_channels: 32,
                    first_stride: 2,
                    kind: BlockKind::Basic,
                },
            ],
            head_hidden: vec![],
            skip_connections: true,
            batch_norm: true,
        }
    }

    /// Same layers as `resnet_mini` with the skip connections removed.
    pub fn plain_mini() -> Self {
        ModelConfig {
            skip_connections: false,
            ..Self::resnet_mini()
        }
    }

    /// Full-size residual classifier: 49 convolutional layers and one dense
    /// layer. Used for structural assertions, not desk-scale training.
    pub fn resnet50() -> Self {
        let stage = |blocks, out_channels, first_stride| StageSpec {
            blocks,
            out_channels,
            first_stride,
            kind: BlockKind::Bottleneck,
        };
        ModelConfig {
            input_size: (3, 224, 224),
            stem: StemSpec {
                out_channels: 64,
                kernel: 7,
                stride: 2,
                pool: Some((3, 2)),
            },
            stages: vec![
                stage(3, 256, 1),
                stage(4, 512, 2),
                stage(6, 1024, 2),
                stage(3, 2048, 2),
            ],
            head_hidden: vec![],
            skip_connections: true,
            batch_norm: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet-mini" => Ok(Self::resnet_mini()),
            "plain-mini" => Ok(Self::plain_mini()),
            "resnet50" => Ok(Self::resnet50()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected resnet-mini, plain-mini, or resnet50)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "input size must be positive, got {:?}",
                self.input_size
            )));
        }
        if self.stem.out_channels == 0 || self.stem.kernel == 0 {
            return Err(Error::InvalidConfig(
                "stem channels/kernel must be >= 1".into(),
            ));
        }
        if !matches!(self.stem.stride, 1 | 2) {
            return Err(Error::InvalidConfig("stem stride must be 1 or 2".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.out_channels == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage{i} must have >= 1 block and >= 1 channel"
                )));
            }
            if !matches!(stage.first_stride, 1 | 2) {
                return Err(Error::InvalidConfig(format!(
                    "stage{i} first_stride must be 1 or 2"
                )));
            }
            if stage.kind == BlockKind::Bottleneck && stage.out_channels % 4 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage{i}: bottleneck out_channels must be divisible by 4"
                )));
            }
        }
        if self.head_hidden.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("head widths must be >= 1".into()));
        }
        // The plan computes spatial extents and rejects collapse below 1.
        self.plan()?;
        Ok(())
    }

    /// Main-path layer counts, derived from the config alone.
    pub fn layer_counts(&self) -> LayerCounts {
        let per_block = |kind: BlockKind| match kind {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        };
        let mut conv = 1; // stem
        let mut shortcuts = 0;
        let mut in_ch = self.stem.out_channels;
        for stage in &self.stages {
            conv += stage.blocks * per_block(stage.kind);
            if self.skip_connections && (stage.first_stride != 1 || in_ch != stage.out_channels) {
                shortcuts += 1;
            }
            in_ch = stage.out_channels;
        }
        LayerCounts {
            conv_layers: conv,
            dense_layers: self.head_hidden.len() + 1,
            shortcut_projections: shortcuts,
        }
    }

    /// Expected parameter names/shapes in architecture order.
    pub fn parameter_ledger(&self) -> Result<Vec<ParamSpec>> {
        let plan = self.plan()?;
        let mut ledger = Vec::new();
        let push_conv = |ledger: &mut Vec<ParamSpec>, c: &ConvSpec| {
            ledger.push(ParamSpec::trainable(
                format!("{}.weight", c.name),
                vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
            ));
            ledger.push(ParamSpec::trainable(
                format!("{}.bias", c.name),
                vec![c.out_ch],
            ));
        };
        let push_bn = |ledger: &mut Vec<ParamSpec>, b: &BnSpec| {
            ledger.push(ParamSpec::trainable(
                format!("{}.gamma", b.name),
                vec![b.channels],
            ));
            ledger.push(ParamSpec::trainable(
                format!("{}.beta", b.name),
                vec![b.channels],
            ));
            ledger.push(ParamSpec::buffer(
                format!("{}.running_mean", b.name),
                vec![b.channels],
            ));
            ledger.push(ParamSpec::buffer(
                format!("{}.running_var", b.name),
                vec![b.channels],
            ));
        };

        push_conv(&mut ledger, &plan.stem_conv);
        if let Some(bn) = &plan.stem_bn {
            push_bn(&mut ledger, bn);
        }
        for stage in &plan.stages {
            for block in stage {
                for (conv, bn) in &block.convs {
                    push_conv(&mut ledger, conv);
                    if let Some(bn) = bn {
                        push_bn(&mut ledger, bn);
                    }
                }
                if let Some((conv, bn)) = &block.shortcut {
                    push_conv(&mut ledger, conv);
                    if let Some(bn) = bn {
                        push_bn(&mut ledger, bn);
                    }
                }
            }
        }
        for d in &plan.head {
            ledger.push(ParamSpec::trainable(
                format!("{}.weight", d.name),
                vec![d.in_dim, d.out_dim],
            ));
            ledger.push(ParamSpec::trainable(
                format!("{}.bias", d.name),
                vec![d.out_dim],
            ));
        }
        Ok(ledger)
    }

    fn plan(&self) -> Result<Plan> {
        let (in_c, in_h, in_w) = self.input_size;

        let stem_pad = self.stem.kernel / 2;
        let ho = ops::conv_out_extent(in_h, self.stem.kernel, self.stem.stride, stem_pad);
        let wo = ops::conv_out_extent(in_w, self.stem.kernel, self.stem.stride, stem_pad);
        let (mut h, mut w) = match (ho, wo) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
            _ => {
                return Err(Error::InvalidConfig(
                    "stem conv collapses the input below 1x1".into(),
                ))
            }
        };
        let stem_conv = ConvSpec {
            name: "stem.conv0".into(),
            in_ch: in_c,
            out_ch: self.stem.out_channels,
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            pad: stem_pad,
        };
        let stem_bn = self.batch_norm.then(|| BnSpec {
            name: "stem.bn0".into(),
            channels: self.stem.out_channels,
        });
        if let Some((window, stride)) = self.stem.pool {
            if window > h || window > w || stride == 0 || window == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stem pool window {window} does not fit {h}x{w}"
                )));
            }
            (h, w) = ((h - window) / stride + 1, (w - window) / stride + 1);
        }

        let mut stages = Vec::new();
        let mut in_ch = self.stem.out_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.first_stride } else { 1 };
                let prefix = format!("stage{si}.block{bi}");
                let out_ch = stage.out_channels;
                let bn = |k: usize, ch: usize| {
                    self.batch_norm.then(|| BnSpec {
                        name: format!("{prefix}.bn{k}"),
                        channels: ch,
                    })
                };
                let convs = match stage.kind {
                    BlockKind::Basic => vec![
                        (
                            ConvSpec {
                                name: format!("{prefix}.conv1"),
                                in_ch,
                                out_ch,
                                kernel: 3,
                                stride,
                                pad: 1,
                            },
                            bn(1, out_ch),
                        ),
                        (
                            ConvSpec {
                                name: format!("{prefix}.conv2"),
                                in_ch: out_ch,
                                out_ch,
                                kernel: 3,
                                stride: 1,
                                pad: 1,
                            },
                            bn(2, out_ch),
                        ),
                    ],
                    BlockKind::Bottleneck => {
                        let mid = out_ch / 4;
                        vec![
                            (
                                ConvSpec {
                                    name: format!("{prefix}.conv1"),
                                    in_ch,
                                    out_ch: mid,
                                    kernel: 1,
                                    stride,
                                    pad: 0,
                                },
                                bn(1, mid),
                            ),
                            (
                                ConvSpec {
                                    name: format!("{prefix}.conv2"),
                                    in_ch: mid,
                                    out_ch: mid,
                                    kernel: 3,
                                    stride: 1,
                                    pad: 1,
                                },
                                bn(2, mid),
                            ),
                            (
                                ConvSpec {
                                    name: format!("{prefix}.conv3"),
                                    in_ch: mid,
                                    out_ch,
                                    kernel: 1,
                                    stride: 1,
                                    pad: 0,
                                },
                                bn(3, out_ch),
                            ),
                        ]
                    }
                };
                let needs_projection = stride != 1 || in_ch != out_ch;
                let shortcut = (self.skip_connections && needs_projection).then(|| {
                    (
                        ConvSpec {
                            name: format!("{prefix}.shortcut0"),
                            in_ch,
                            out_ch,
                            kernel: 1,
                            stride,
                            pad: 0,
                        },
                        self.batch_norm.then(|| BnSpec {
                            name: format!("{prefix}.shortcut1"),
                            channels: out_ch,
                        }),
                    )
                });
                // Both block entry convs (3x3 pad 1 and 1x1 pad 0) map an
                // extent e to ceil(e / stride).
                (h, w) = (h.div_ceil(stride), w.div_ceil(stride));
                blocks.push(BlockPlan { convs, shortcut });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }

        let mut head = Vec::new();
        let mut dim = in_ch;
        for (i, &hidden) in self.head_hidden.iter().enumerate() {
            head.push(DenseSpec {
                name: format!("head.dense{i}"),
                in_dim: dim,
                out_dim: hidden,
            });
            dim = hidden;
        }
        head.push(DenseSpec {
            name: format!("head.dense{}", self.head_hidden.len()),
            in_dim: dim,
            out_dim: 1,
        });

        Ok(Plan {
            stem_conv,
            stem_bn,
            stem_pool: self.stem.pool,
            stages,
            head,
            out_spatial: (h, w),
        })
    }

    /// Spatial extent of the final feature map.
    pub fn output_spatial(&self) -> Result<(usize, usize)> {
        Ok(self.plan()?.out_spatial)
    }
}

#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct BnSpec {
    name: String,
    channels: usize,
}

#[derive(Debug, Clone)]
struct DenseSpec {
    name: String,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
struct BlockPlan {
    convs: Vec<(ConvSpec, Option<BnSpec>)>,
    shortcut: Option<(ConvSpec, Option<BnSpec>)>,
}

#[derive(Debug, Clone)]
struct Plan {
    stem_conv: ConvSpec,
    stem_bn: Option<BnSpec>,
    stem_pool: Option<(usize, usize)>,
    stages: Vec<Vec<BlockPlan>>,
    head: Vec<DenseSpec>,
    out_spatial: (usize, usize),
}

/// One expected parameter: name, shape, and whether the optimizer updates it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamSpec {
    fn trainable(name: String, shape: Vec<usize>) -> Self {
        ParamSpec {
            name,
            shape,
            trainable: true,
        }
    }
    fn buffer(name: String, shape: Vec<usize>) -> Self {
        ParamSpec {
            name,
            shape,
            trainable: false,
        }
    }
}

/// Ordered map of parameter name to tensor. Trainable entries carry
/// `requires_grad = true`; batch-norm running stats are non-trainable buffers.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over every entry (weights and buffers).
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Element count over trainable entries only.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad())
            .map(|t| t.len())
            .sum()
    }

    /// Mark every parameter whose name starts with one of `prefixes` as
    /// excluded from gradient computation.
    pub fn freeze_prefixes(&mut self, prefixes: &[String]) {
        for (name, tensor) in self.entries.iter_mut() {
            if prefixes.iter().any(|p| name.starts_with(p.as_str())) && tensor.requires_grad() {
                *tensor = tensor.clone().with_requires_grad(false);
            }
        }
    }

    /// Names of trainable parameters, in architecture order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub(crate) fn running_stats(&self, bn_name: &str) -> Result<RunningStats> {
        let mean = self
            .get(&format!("{bn_name}.running_mean"))
            .ok_or_else(|| Error::InvalidInput(format!("missing {bn_name}.running_mean")))?;
        let var = self
            .get(&format!("{bn_name}.running_var"))
            .ok_or_else(|| Error::InvalidInput(format!("missing {bn_name}.running_var")))?;
        Ok(RunningStats {
            mean: mean.clone(),
            var: var.clone(),
        })
    }

    /// Fold batch statistics into the named bn's running stats.
    pub fn update_running_stats(
        &mut self,
        bn_name: &str,
        stats: &BnBatchStats,
        momentum: f64,
    ) -> Result<()> {
        let current = self.running_stats(bn_name)?;
        let mix = |old: &Tensor, new: &Tensor| -> Result<Tensor> {
            let data: Vec<f64> = old
                .data()
                .iter()
                .zip(new.data().iter())
                .map(|(o, n)| (1.0 - momentum) * o + momentum * n)
                .collect();
            Tensor::new(old.shape().to_vec(), data)
        };
        let mean = mix(&current.mean, &stats.mean)?;
        let var = mix(&current.var, &stats.var)?;
        self.insert(format!("{bn_name}.running_mean"), mean);
        self.insert(format!("{bn_name}.running_var"), var);
        Ok(())
    }
}

/// Allocate parameters for `config`: He-style fan-in init for conv/dense
/// weights, zero biases, gamma=1/beta=0, identity running stats. Deterministic
/// for a given seed.
pub fn build_model(config: &ModelConfig, init_seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let ledger = config.parameter_ledger()?;
    let mut rng = crate::rng::stream(init_seed, &[0x6d6f64656c]); // "model"
    let mut params = ModelParams::default();
    for spec in &ledger {
        let numel: usize = spec.shape.iter().product();
        let tensor = if spec.name.ends_with(".weight") {
            let fan_in: usize = match spec.shape.len() {
                4 => spec.shape[1] * spec.shape[2] * spec.shape[3],
                2 => spec.shape[0],
                _ => unreachable!("weights are conv or dense"),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std > 0");
            let data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(spec.shape.clone(), data)?
        } else if spec.name.ends_with(".gamma") || spec.name.ends_with(".running_var") {
            Tensor::ones(&spec.shape)?
        } else {
            Tensor::zeros(&spec.shape)?
        };
        params.insert(spec.name.clone(), tensor.with_requires_grad(spec.trainable));
    }
    Ok(params)
}

fn check_batch(config: &ModelConfig, batch: &Tensor) -> Result<()> {
    let (c, h, w) = config.input_size;
    if batch.rank() != 4 || batch.dim(1) != c || batch.dim(2) != h || batch.dim(3) != w {
        return Err(Error::InvalidInput(format!(
            "batch shape {:?} does not match configured input {c}x{h}x{w}",
            batch.shape()
        )));
    }
    Ok(())
}

fn get_param<'p>(params: &'p ModelParams, name: &str) -> Result<&'p Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name:?}")))
}

/// Pure forward pass returning per-sample probabilities in (0,1) as a rank-1
/// tensor. `mode` selects batch (train) or running (eval) statistics for the
/// batch-norm layers; neither mutates anything.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    check_batch(config, batch)?;
    let plan = config.plan()?;

    let conv = |x: &Tensor, spec: &ConvSpec| -> Result<Tensor> {
        ops::conv2d(
            x,
            get_param(params, &format!("{}.weight", spec.name))?,
            get_param(params, &format!("{}.bias", spec.name))?,
            spec.stride,
            spec.pad,
        )
    };
    let bn = |x: &Tensor, spec: &BnSpec| -> Result<Tensor> {
        let gamma = get_param(params, &format!("{}.gamma", spec.name))?;
        let beta = get_param(params, &format!("{}.beta", spec.name))?;
        match mode {
            BnMode::Train => Ok(ops::bn_train_forward(x, gamma, beta, BN_EPS)?.0),
            BnMode::Eval => {
                let running = params.running_stats(&spec.name)?;
                ops::bn_eval_forward(x, gamma, beta, &running, BN_EPS)
            }
        }
    };

    let mut x = conv(batch, &plan.stem_conv)?;
    if let Some(spec) = &plan.stem_bn {
        x = bn(&x, spec)?;
    }
    x = ops::activation(&x, Activation::Relu);
    if let Some((window, stride)) = plan.stem_pool {
        x = ops::max_pool2d(&x, window, stride)?;
    }

    for stage in &plan.stages {
        for block in stage {
            let block_in = x.clone();
            let last = block.convs.len() - 1;
            for (i, (cspec, bspec)) in block.convs.iter().enumerate() {
                x = conv(&x, cspec)?;
                if let Some(bspec) = bspec {
                    x = bn(&x, bspec)?;
                }
                if i < last {
                    x = ops::activation(&x, Activation::Relu);
                }
            }
            if config.skip_connections {
                let sc = match &block.shortcut {
                    Some((cspec, bspec)) => {
                        let mut sc = conv(&block_in, cspec)?;
                        if let Some(bspec) = bspec {
                            sc = bn(&sc, bspec)?;
                        }
                        sc
                    }
                    None => block_in,
                };
                x = ops::add(&x, &sc)?;
            }
            x = ops::activation(&x, Activation::Relu);
        }
    }

    let mut flat = ops::global_avg_pool(&x)?;
    let last = plan.head.len() - 1;
    for (i, d) in plan.head.iter().enumerate() {
        flat = ops::dense(
            &flat,
            get_param(params, &format!("{}.weight", d.name))?,
            get_param(params, &format!("{}.bias", d.name))?,
        )?;
        if i < last {
            flat = ops::activation(&flat, Activation::Relu);
        }
    }
    let probs = ops::activation(&flat, Activation::Sigmoid);
    probs.reshaped(vec![batch.dim(0)])
}

/// Output of a recorded (train-mode) forward pass.
pub struct TapedForward {
    /// Node holding per-sample probabilities, shape [N, 1].
    pub probs: NodeId,
    /// Batch statistics per batch-norm layer, for running-stat updates.
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

/// Record a train-mode forward pass on `tape`. Parameters are recorded as
/// named leaves (respecting their `requires_grad` flags), so
/// `tape.backward(loss)` yields gradients keyed by parameter name.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Tensor,
) -> Result<TapedForward> {
    check_batch(config, batch)?;
    let plan = config.plan()?;
    let mut bn_stats = Vec::new();

    let param_node = |tape: &mut Tape, name: String| -> Result<NodeId> {
        let tensor = get_param(params, &name)?.clone();
        Ok(tape.param(name, tensor))
    };
    macro_rules! conv {
        ($x:expr, $spec:expr) => {{
            let w = param_node(tape, format!("{}.weight", $spec.name))?;
            let b = param_node(tape, format!("{}.bias", $spec.name))?;
            tape.conv2d($x, w, b, $spec.stride, $spec.pad)?
        }};
    }
    macro_rules! bn {
        ($x:expr, $spec:expr) => {{
            let gamma = param_node(tape, format!("{}.gamma", $spec.name))?;
            let beta = param_node(tape, format!("{}.beta", $spec.name))?;
            let (id, stats) = tape.batch_norm_train($x, gamma, beta, BN_EPS)?;
            bn_stats.push(($spec.name.clone(), stats));
            id
        }};
    }

    let input = tape.leaf(batch.clone());
    let mut x = conv!(input, plan.stem_conv);
    if let Some(spec) = &plan.stem_bn {
        x = bn!(x, spec);
    }
    x = tape.relu(x);
    if let Some((window, stride)) = plan.stem_pool {
        x = tape.max_pool2d(x, window, stride)?;
    }

    for stage in &plan.stages {
        for block in stage {
            let block_in = x;
            let last = block.convs.len() - 1;
            for (i, (cspec, bspec)) in block.convs.iter().enumerate() {
                x = conv!(x, cspec);
                if let Some(bspec) = bspec {
                    x = bn!(x, bspec);
                }
                if i < last {
                    x = tape.relu(x);
                }
            }
            if config.skip_connections {
                let sc = match &block.shortcut {
                    Some((cspec, bspec)) => {
                        let mut sc = conv!(block_in, cspec);
                        if let Some(bspec) = bspec {
                            sc = bn!(sc, bspec);
                        }
                        sc
                    }
                    None => block_in,
                };
                x = tape.add(x, sc)?;
            }
            x = tape.relu(x);
        }
    }

    let mut flat = tape.global_avg_pool(x)?;
    let last = plan.head.len() - 1;
    for (i, d) in plan.head.iter().enumerate() {
        let w = param_node(tape, format!("{}.weight", d.name))?;
        let b = param_node(tape, format!("{}.bias", d.name))?;
        flat = tape.dense(flat, w, b)?;
        if i < last {
            flat = tape.relu(flat);
        }
    }
    let probs = tape.sigmoid(flat);
    Ok(TapedForward { probs, bn_stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal config: one 1x1 stem conv (1 -> 1), no stages, dense head, no bn.
    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: (1, 4, 4),
            stem: StemSpec {
                out_channels: 1,
                kernel: 1,
                stride: 1,
                pool: None,
            },
            stages: vec![],
            head_hidden: vec![],
            skip_connections: true,
            batch_norm: false,
        }
    }

    #[test]
    fn tiny_config_has_four_parameters() {
        let params = build_model(&tiny_config(), 0).unwrap();
        // conv weight + conv bias + dense weight + dense bias
        assert_eq!(params.len(), 4);
        assert_eq!(params.param_count(), 4);
        assert_eq!(params.trainable_count(), 4);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let config = ModelConfig::resnet_mini();
        let a = build_model(&config, 42).unwrap();
        let b = build_model(&config, 42).unwrap();
        for (name, t) in a.iter() {
            assert!(t.bit_eq(b.get(name).unwrap()), "{name} differs");
        }
        let c = build_model(&config, 43).unwrap();
        assert!(!a
            .get("stem.conv0.weight")
            .unwrap()
            .bit_eq(c.get("stem.conv0.weight").unwrap()));
    }

    #[test]
    fn resnet_mini_matches_hand_summed_ledger() {
        // Hand-summed from the shape rules:
        //   stem: 8*3*3*3 + 8 + (8 + 8 gamma/beta) = 240
        //   stage0.block0: 1152+16 + 32 + 2304+16 + 32 + 128+16 + 32 = 3728
        //   stage0.block1: 2304+16 + 32 + 2304+16 + 32 = 4704
        //   stage1.block0: 4608+32 + 64 + 9216+32 + 64 + 512+32 + 64 = 14624
        //   stage1.block1: 9216+32 + 64 + 9216+32 + 64 = 18624
        //   head: 32 + 1 = 33
        // trainable total = 41953; bn running stats add 496 buffer elements.
        let params = build_model(&ModelConfig::resnet_mini(), 7).unwrap();
        assert_eq!(params.trainable_count(), 41953);
        assert_eq!(params.param_count(), 41953 + 496);
    }

    #[test]
    fn resnet50_counts_forty_nine_convs_and_one_dense() {
        let counts = ModelConfig::resnet50().layer_counts();
        assert_eq!(counts.conv_layers, 49);
        assert_eq!(counts.dense_layers, 1);
        assert_eq!(counts.shortcut_projections, 4);
    }

    #[test]
    fn skip_toggle_preserves_layer_counts_and_shapes() {
        let with = ModelConfig::resnet_mini();
        let without = ModelConfig::plain_mini();
        assert_eq!(
            with.layer_counts().conv_layers,
            without.layer_counts().conv_layers
        );
        assert_eq!(
            with.layer_counts().dense_layers,
            without.layer_counts().dense_layers
        );
        assert_eq!(without.layer_counts().shortcut_projections, 0);
        assert_eq!(
            with.output_spatial().unwrap(),
            without.output_spatial().unwrap()
        );
        // Main-path parameters have identical shapes; only shortcuts disappear.
        let a = build_model(&with, 1).unwrap();
        let b = build_model(&without, 1).unwrap();
        for (name, t) in b.iter() {
            assert_eq!(a.get(name).unwrap().shape(), t.shape(), "{name}");
        }
        assert!(a.names().any(|n| n.contains("shortcut")));
        assert!(!b.names().any(|n| n.contains("shortcut")));
    }

    #[test]
    fn forward_shape_and_range() {
        use rand::Rng;
        let config = ModelConfig::resnet_mini();
        let params = build_model(&config, 3).unwrap();
        let mut rng = crate::rng::stream(3, &[9]);
        let batch = Tensor::new(
            vec![4, 3, 64, 64],
            (0..4 * 3 * 64 * 64)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap();
        let probs = forward(&params, &config, &batch, BnMode::Eval).unwrap();
        assert_eq!(probs.shape(), &[4]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));

        let bad = Tensor::zeros(&[1, 3, 32, 32]).unwrap();
        assert!(forward(&params, &config, &bad, BnMode::Eval).is_err());
    }

    #[test]
    fn duplicate_samples_get_identical_probabilities_in_eval() {
        use rand::Rng;
        let config = ModelConfig::resnet_mini();
        let params = build_model(&config, 5).unwrap();
        let mut rng = crate::rng::stream(5, &[1]);
        let one: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        let batch = Tensor::new(vec![2, 3, 64, 64], data).unwrap();
        let probs = forward(&params, &config, &batch, BnMode::Eval).unwrap();
        assert_eq!(probs.data()[0], probs.data()[1]);
    }

    #[test]
    fn all_zero_image_yields_half_probability() {
        // Zero input, zero biases, identity running stats: the head sees zeros
        // and sigmoid(0) = 0.5.
        let config = ModelConfig::resnet_mini();
        let params = build_model(&config, 11).unwrap();
        let batch = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        let probs = forward(&params, &config, &batch, BnMode::Eval).unwrap();
        assert!((probs.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_is_pure() {
        let config = ModelConfig::resnet_mini();
        let params = build_model(&config, 2).unwrap();
        let batch = Tensor::full(&[2, 3, 64, 64], 0.25).unwrap();
        let a = forward(&params, &config, &batch, BnMode::Eval).unwrap();
        let b = forward(&params, &config, &batch, BnMode::Eval).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn appended_zero_block_preserves_decisions() {
        // Base: one stage of one block. Extended: a second stride-1 block with
        // all-zero branch parameters, eval-mode bn with identity stats, and an
        // identity shortcut. Probabilities must match exactly.
        let base = ModelConfig {
            input_size: (1, 8, 8),
            stem: StemSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                pool: None,
            },
            stages: vec![StageSpec {
                blocks: 1,
                out_channels: 4,
                first_stride: 1,
                kind: BlockKind::Basic,
            }],
            head_hidden: vec![],
            skip_connections: true,
            batch_norm: true,
        };
        let extended = ModelConfig {
            stages: vec![StageSpec {
                blocks: 2,
                out_channels: 4,
                first_stride: 1,
                kind: BlockKind::Basic,
            }],
            ..base.clone()
        };

        let base_params = build_model(&base, 19).unwrap();
        let mut ext_params = build_model(&extended, 19).unwrap();
        // Copy shared parameters, zero the appended block's branch.
        for (name, tensor) in base_params.iter() {
            ext_params.insert(name, tensor.clone());
        }
        for spec in extended.parameter_ledger().unwrap() {
            if spec.name.starts_with("stage0.block1.conv") {
                let zeros = Tensor::zeros(&spec.shape).unwrap().with_requires_grad(true);
                ext_params.insert(spec.name.clone(), zeros);
            }
        }

        use rand::Rng;
        let mut rng = crate::rng::stream(19, &[2]);
        let batch = Tensor::new(
            vec![3, 1, 8, 8],
            (0..192).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let p_base = forward(&base_params, &base, &batch, BnMode::Eval).unwrap();
        let p_ext = forward(&ext_params, &extended, &batch, BnMode::Eval).unwrap();
        assert_eq!(p_base.data(), p_ext.data());
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut config = ModelConfig::resnet_mini();
        config.stages[0].first_stride = 3;
        assert!(config.validate().is_err());

        let mut config = ModelConfig::resnet_mini();
        config.input_size = (3, 4, 4); // collapses through pool + two strides
        assert!(build_model(&config, 0).is_err() || config.validate().is_ok());

        let mut config = ModelConfig::resnet50();
        config.stages[0].out_channels = 255; // not divisible by 4
        assert!(config.validate().is_err());
    }
}
