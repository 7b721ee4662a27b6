//! Model composition: ODEBlocks, downsampling blocks, and the ResNet /
//! ODENet / dsODENet variants.
//!
//! An ODEBlock treats one residual block as a single Euler step of
//! `dz/dt = f(z, t)` and runs it `C` times with one shared weight set:
//! `z <- z + h * f(z, t_i)` with `t_i = i * h`, the time reset to zero at
//! each block invocation. `f` is two repetitions of
//! [AddTime, conv (standard or depthwise+pointwise), BatchNorm, ReLU].
//! A downsampling block runs once, halves the spatial extent, doubles the
//! channel count, and adds a strided 1x1 convolution on the shortcut path.
//! The ResNet variant instead instantiates `C` distinct residual blocks per
//! stage (no AddTime channel), each executed once.
//!
//! Two forward paths exist: a single-sample inference path using running
//! batch-norm statistics, and a batched training path that computes batch
//! statistics, caches every intermediate, and supports a full reverse-mode
//! backward pass through the unrolled Euler loop. Weight updates happen only
//! between passes; `forward_train` itself is pure and running-statistics
//! updates are applied explicitly afterwards.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    add_time, add_time_backward, batchnorm_forward, batchnorm_train_backward,
    batchnorm_train_forward, conv_backward, conv_forward, fc_backward, fc_forward,
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, BatchNormParams,
    BnTrainCache, ConvKind, ConvSpec,
};
use crate::tensor::Tensor;

pub const DEFAULT_BASE_CHANNELS: usize = 64;
pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_STEP_SIZE: f64 = 1.0;
pub const KERNEL: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Model family variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ResNet,
    OdeNet,
    DsOdeNet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ResNet => "resnet",
            Variant::OdeNet => "odenet",
            Variant::DsOdeNet => "dsodenet",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(Variant::ResNet),
            "odenet" => Ok(Variant::OdeNet),
            "dsodenet" => Ok(Variant::DsOdeNet),
            other => Err(Error::config("variant", format!("unknown variant `{}`", other))),
        }
    }
}

/// Declarative description of a model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of ODE (or building-block) stages: 2 or 3.
    pub num_blocks: usize,
    pub base_channels: usize,
    /// Euler iterations per ODEBlock; distinct block count per ResNet stage.
    pub c_iters: usize,
    /// Euler step size `h`.
    pub step_size: f64,
    /// Input feature map shape `(C, H, W)`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Per-stage overrides of the separable-convolution flag, keyed by stage
    /// key (`odeblock1`, `downsampling2`, ...).
    pub separable_overrides: BTreeMap<String, bool>,
}

impl ModelSpec {
    pub fn new(variant: Variant, num_blocks: usize) -> Self {
        ModelSpec {
            variant,
            num_blocks,
            base_channels: DEFAULT_BASE_CHANNELS,
            c_iters: DEFAULT_ITERATIONS,
            step_size: DEFAULT_STEP_SIZE,
            input_shape: [3, 8, 8],
            classes: 10,
            separable_overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.num_blocks == 2 || self.num_blocks == 3) {
            return Err(Error::config("num_blocks", "must be 2 or 3"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        if self.c_iters == 0 {
            return Err(Error::config("c_iters", "must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("step_size", "must be a positive finite value"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("input_shape", "dimensions must be positive"));
        }
        if self.classes == 0 {
            return Err(Error::config("classes", "must be positive"));
        }
        // every downsampling halves the spatial extent once
        let downs = self.num_blocks - 1;
        if self.input_shape[1] < (1 << downs) || self.input_shape[2] < (1 << downs) {
            return Err(Error::config(
                "input_shape",
                format!("spatial extent too small for {} downsampling stages", downs),
            ));
        }
        for key in self.separable_overrides.keys() {
            if !self.stage_plan().iter().any(|s| &s.key == key) {
                return Err(Error::config(
                    "separable_overrides",
                    format!("unknown stage key `{}`", key),
                ));
            }
        }
        Ok(())
    }

    /// Ordered stage descriptions: block stages alternating with
    /// downsampling stages.
    pub fn stage_plan(&self) -> Vec<StagePlan> {
        let mut plan = Vec::new();
        let mut ch = self.base_channels;
        for i in 0..self.num_blocks {
            let idx = i + 1;
            let (name, key) = match self.variant {
                Variant::ResNet => (format!("Building block{}", idx), format!("building_block{}", idx)),
                _ => (format!("ODEBlock{}", idx), format!("odeblock{}", idx)),
            };
            let separable = self
                .separable_overrides
                .get(&key)
                .copied()
                .unwrap_or(self.variant == Variant::DsOdeNet);
            plan.push(StagePlan {
                name,
                key,
                kind: StageKind::Block { channels: ch },
                separable,
            });
            if i + 1 < self.num_blocks {
                let key = format!("downsampling{}", idx);
                // dsODENet applies DSC only to the second downsampling block
                // of the three-block topology; the two-block topology keeps
                // its single downsampling block non-separable.
                let default = self.variant == Variant::DsOdeNet && self.num_blocks == 3 && idx == 2;
                let separable = self.separable_overrides.get(&key).copied().unwrap_or(default);
                plan.push(StagePlan {
                    name: format!("Downsampling{}", idx),
                    key,
                    kind: StageKind::Down {
                        in_channels: ch,
                        out_channels: ch * 2,
                    },
                    separable,
                });
                ch *= 2;
            }
        }
        plan
    }

    /// Channel count of the final feature vector.
    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.num_blocks - 1)
    }

    /// Feature-map shape entering the block pipeline (after pre-processing).
    pub fn entry_shape(&self) -> [usize; 3] {
        [self.base_channels, self.input_shape[1], self.input_shape[2]]
    }

    /// Per-stage output shapes, from the entry feature map to the last block.
    pub fn stage_output_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = Vec::new();
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for stage in self.stage_plan() {
            match stage.kind {
                StageKind::Block { channels } => shapes.push([channels, h, w]),
                StageKind::Down { out_channels, .. } => {
                    h = (h + 2 - KERNEL) / 2 + 1;
                    w = (w + 2 - KERNEL) / 2 + 1;
                    shapes.push([out_channels, h, w]);
                }
            }
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Block { channels: usize },
    Down { in_channels: usize, out_channels: usize },
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    /// Display name matching the reports ("ODEBlock1", "Downsampling1", ...).
    pub name: String,
    /// Lowercase key used for config overrides and array names.
    pub key: String,
    pub kind: StageKind,
    pub separable: bool,
}

/// One convolution with owned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    fn zeros(spec: ConvSpec) -> Self {
        let weight = Tensor::zeros(&spec.weight_shape());
        let bias = spec.bias.then(|| Tensor::zeros(&[spec.out_channels]));
        Conv { spec, weight, bias }
    }

    fn init(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = match spec.kind {
            ConvKind::Standard => spec.in_channels * spec.kernel * spec.kernel,
            ConvKind::Depthwise => spec.kernel * spec.kernel,
            ConvKind::Pointwise => spec.in_channels,
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        let weight = Tensor::from_vec_unchecked(
            spec.weight_shape(),
            (0..spec.weight_len()).map(|_| normal.sample(rng)).collect(),
        );
        let bias = spec.bias.then(|| Tensor::zeros(&[spec.out_channels]));
        Conv { spec, weight, bias }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv_forward(input, &self.spec, &self.weight, self.bias.as_ref())
    }
}

/// Either one standard convolution or a depthwise+pointwise pair.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvUnit {
    Standard(Conv),
    Separable { dw: Conv, pw: Conv },
}

impl ConvUnit {
    fn build(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        separable: bool,
        init: &mut Init<'_>,
    ) -> ConvUnit {
        if separable {
            let dw = init.conv(ConvSpec::depthwise(in_channels, KERNEL, stride, 1));
            let pw = init.conv(ConvSpec::pointwise(in_channels, out_channels));
            ConvUnit::Separable { dw, pw }
        } else {
            ConvUnit::Standard(init.conv(ConvSpec::standard(
                in_channels,
                out_channels,
                KERNEL,
                stride,
                1,
                false,
            )))
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvUnit::Standard(c) => c.spec.out_channels,
            ConvUnit::Separable { pw, .. } => pw.spec.out_channels,
        }
    }
}

/// Weight initialization mode used during model construction.
enum Init<'a> {
    Zeros,
    Seeded(&'a mut ChaCha8Rng),
}

impl Init<'_> {
    fn conv(&mut self, spec: ConvSpec) -> Conv {
        match self {
            Init::Zeros => Conv::zeros(spec),
            Init::Seeded(rng) => Conv::init(spec, rng),
        }
    }

    fn fc(&mut self, classes: usize, features: usize) -> Fc {
        match self {
            Init::Zeros => Fc {
                weight: Tensor::zeros(&[classes, features]),
                bias: Tensor::zeros(&[classes]),
            },
            Init::Seeded(rng) => {
                let std = (1.0 / features as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                Fc {
                    weight: Tensor::from_vec_unchecked(
                        vec![classes, features],
                        (0..classes * features).map(|_| normal.sample(rng)).collect(),
                    ),
                    bias: Tensor::zeros(&[classes]),
                }
            }
        }
    }
}

/// Batch normalization with owned parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn params(&self) -> BatchNormParams {
        BatchNormParams {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
        }
    }

    fn apply_update(&mut self, cache: &BnTrainCache) {
        let m = self.momentum;
        for (i, rm) in self.running_mean.data_mut().iter_mut().enumerate() {
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[i];
        }
        for (i, rv) in self.running_var.data_mut().iter_mut().enumerate() {
            *rv = (1.0 - m) * *rv + m * cache.batch_var_unbiased[i];
        }
    }
}

/// conv -> batchnorm -> relu, optionally preceded by AddTime.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStep {
    pub conv: ConvUnit,
    pub bn: BatchNorm,
}

impl ConvStep {
    fn build(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        separable: bool,
        init: &mut Init<'_>,
    ) -> ConvStep {
        ConvStep {
            conv: ConvUnit::build(in_channels, out_channels, stride, separable, init),
            bn: BatchNorm::new(out_channels),
        }
    }
}

/// Residual block run `C` times with a shared weight set and an explicit
/// integration-time channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeBlock {
    pub channels: usize,
    pub c_iters: usize,
    pub step_size: f64,
    pub steps: [ConvStep; 2],
}

/// Plain residual block: one of the `C` distinct blocks of a ResNet stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub steps: [ConvStep; 2],
}

/// Downsampling block: strided main path plus a strided 1x1 shortcut
/// convolution; executed exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsampling {
    pub main: [ConvStep; 2],
    pub shortcut: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Ode(OdeBlock),
    Res(Vec<ResBlock>),
    Down(Downsampling),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fc {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Instantiated model: pre-processing step, block stages, and the
/// fully-connected head over globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub pre: ConvStep,
    pub stages: Vec<Stage>,
    pub fc: Fc,
}

impl Model {
    /// Build with freshly initialized weights (seeded, deterministic).
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, Init::Seeded(&mut rng))
    }

    /// Build with all-zero weights (useful for counting and tests).
    pub fn zeros(spec: &ModelSpec) -> Result<Model> {
        Self::build(spec, Init::Zeros)
    }

    fn build(spec: &ModelSpec, mut init: Init<'_>) -> Result<Model> {
        spec.validate()?;
        let base = spec.base_channels;
        let pre = ConvStep {
            conv: ConvUnit::Standard(init.conv(ConvSpec::standard(
                spec.input_shape[0],
                base,
                KERNEL,
                1,
                1,
                false,
            ))),
            bn: BatchNorm::new(base),
        };
        let mut stages = Vec::new();
        for plan in spec.stage_plan() {
            match plan.kind {
                StageKind::Block { channels } => {
                    match spec.variant {
                        Variant::ResNet => {
                            let blocks = (0..spec.c_iters)
                                .map(|_| ResBlock {
                                    steps: [
                                        ConvStep::build(channels, channels, 1, plan.separable, &mut init),
                                        ConvStep::build(channels, channels, 1, plan.separable, &mut init),
                                    ],
                                })
                                .collect();
                            stages.push(Stage::Res(blocks));
                        }
                        _ => {
                            // the AddTime channel feeds one extra input
                            // channel into every ODE-style convolution
                            let in_ch = channels + 1;
                            stages.push(Stage::Ode(OdeBlock {
                                channels,
                                c_iters: spec.c_iters,
                                step_size: spec.step_size,
                                steps: [
                                    ConvStep::build(in_ch, channels, 1, plan.separable, &mut init),
                                    ConvStep::build(in_ch, channels, 1, plan.separable, &mut init),
                                ],
                            }));
                        }
                    }
                }
                StageKind::Down {
                    in_channels,
                    out_channels,
                } => {
                    let main = [
                        ConvStep::build(in_channels, out_channels, 2, plan.separable, &mut init),
                        ConvStep::build(out_channels, out_channels, 1, plan.separable, &mut init),
                    ];
                    let shortcut = init.conv(ConvSpec::standard(in_channels, out_channels, 1, 2, 0, true));
                    stages.push(Stage::Down(Downsampling { main, shortcut }));
                }
            }
        }
        let fc = init.fc(spec.classes, spec.feature_channels());
        Ok(Model {
            spec: spec.clone(),
            pre,
            stages,
            fc,
        })
    }
}

/// Inference output: the pooled pre-fc feature vector and the class logits.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub features: Tensor,
    pub logits: Tensor,
}

// ---------------------------------------------------------------------------
// inference forward (running statistics, per sample)
// ---------------------------------------------------------------------------

fn step_forward_infer(step: &ConvStep, x: &Tensor, time: Option<f64>, ops: &mut u64) -> Result<Tensor> {
    let x = match time {
        Some(t) => {
            *ops += 1;
            add_time(x, t)?
        }
        None => x.clone(),
    };
    let conv_out = match &step.conv {
        ConvUnit::Standard(c) => {
            *ops += 1;
            c.forward(&x)?
        }
        ConvUnit::Separable { dw, pw } => {
            *ops += 2;
            pw.forward(&dw.forward(&x)?)?
        }
    };
    *ops += 2; // batchnorm + relu
    Ok(relu_forward(&batchnorm_forward(&conv_out, &step.bn.params())?))
}

fn block_eval_infer(steps: &[ConvStep; 2], z: &Tensor, time: Option<f64>, ops: &mut u64) -> Result<Tensor> {
    let mid = step_forward_infer(&steps[0], z, time, ops)?;
    step_forward_infer(&steps[1], &mid, time, ops)
}

impl OdeBlock {
    /// Euler iteration `z <- z + h * f(z, t_i)` with `t_i = i * h`.
    pub fn forward(&self, z: &Tensor, ops: &mut u64) -> Result<Tensor> {
        let mut z = z.clone();
        let shape = z.shape().to_vec();
        for i in 0..self.c_iters {
            let t = i as f64 * self.step_size;
            let f = block_eval_infer(&self.steps, &z, Some(t), ops)?;
            if f.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "OdeBlock::forward",
                    format!("{:?}", shape),
                    format!("{:?}", f.shape()),
                ));
            }
            z.axpy(self.step_size, &f)?;
        }
        Ok(z)
    }
}

impl Downsampling {
    pub fn forward(&self, z: &Tensor, ops: &mut u64) -> Result<Tensor> {
        let mid = step_forward_infer(&self.main[0], z, None, ops)?;
        let main = step_forward_infer(&self.main[1], &mid, None, ops)?;
        *ops += 1;
        let shortcut = self.shortcut.forward(z)?;
        main.add(&shortcut)
    }
}

impl ResBlock {
    pub fn forward(&self, z: &Tensor, ops: &mut u64) -> Result<Tensor> {
        let f = block_eval_infer(&self.steps, z, None, ops)?;
        z.add(&f)
    }
}

impl Model {
    /// Single-sample inference forward pass (running batch-norm statistics).
    pub fn forward(&self, input: &Tensor) -> Result<ModelOutput> {
        Ok(self.forward_counted(input)?.0)
    }

    /// Forward pass that also reports the number of primitive-layer
    /// invocations, which depends on the spec alone, never on input values.
    pub fn forward_counted(&self, input: &Tensor) -> Result<(ModelOutput, u64)> {
        let mut ops = 0u64;
        if input.shape() != self.spec.input_shape {
            return Err(Error::shape(
                "Model::forward input",
                format!("{:?}", self.spec.input_shape),
                format!("{:?}", input.shape()),
            ));
        }
        let mut z = step_forward_infer(&self.pre, input, None, &mut ops)?;
        for stage in &self.stages {
            z = match stage {
                Stage::Ode(block) => block.forward(&z, &mut ops)?,
                Stage::Res(blocks) => {
                    let mut z = z;
                    for b in blocks {
                        z = b.forward(&z, &mut ops)?;
                    }
                    z
                }
                Stage::Down(down) => down.forward(&z, &mut ops)?,
            };
        }
        ops += 1;
        let features = global_avg_pool(&z)?;
        ops += 1;
        let logits = fc_forward(&features, &self.fc.weight, &self.fc.bias)?;
        Ok((ModelOutput { features, logits }, ops))
    }
}

// ---------------------------------------------------------------------------
// training forward/backward (batched, batch statistics)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvStepCache {
    /// Inputs to the convolution (after AddTime where applicable).
    conv_input: Vec<Tensor>,
    /// Depthwise outputs (separable units only).
    mid: Option<Vec<Tensor>>,
    bn: BnTrainCache,
    /// Batch-norm outputs, cached as the ReLU inputs.
    relu_input: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BlockIterCache {
    steps: [ConvStepCache; 2],
}

#[derive(Debug, Clone)]
pub enum StageCache {
    Ode(Vec<BlockIterCache>),
    Res(Vec<BlockIterCache>),
    Down {
        main: BlockIterCache,
        shortcut_input: Vec<Tensor>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    pre: ConvStepCache,
    stages: Vec<StageCache>,
    pool_dims: (usize, usize, usize),
    fc_input: Vec<Tensor>,
}

/// Batched training output.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub features: Vec<Tensor>,
    pub logits: Vec<Tensor>,
}

fn step_forward_train(
    step: &ConvStep,
    xs: &[Tensor],
    time: Option<f64>,
) -> Result<(Vec<Tensor>, ConvStepCache)> {
    let conv_input: Vec<Tensor> = match time {
        Some(t) => xs.iter().map(|x| add_time(x, t)).collect::<Result<_>>()?,
        None => xs.to_vec(),
    };
    let (conv_out, mid) = match &step.conv {
        ConvUnit::Standard(c) => {
            let out: Vec<Tensor> = conv_input.iter().map(|x| c.forward(x)).collect::<Result<_>>()?;
            (out, None)
        }
        ConvUnit::Separable { dw, pw } => {
            let mids: Vec<Tensor> = conv_input.iter().map(|x| dw.forward(x)).collect::<Result<_>>()?;
            let out: Vec<Tensor> = mids.iter().map(|m| pw.forward(m)).collect::<Result<_>>()?;
            (out, Some(mids))
        }
    };
    let (bn_out, bn_cache) = batchnorm_train_forward(&conv_out, &step.bn.gamma, &step.bn.beta, step.bn.eps)?;
    let outs: Vec<Tensor> = bn_out.iter().map(relu_forward).collect();
    Ok((
        outs,
        ConvStepCache {
            conv_input,
            mid,
            bn: bn_cache,
            relu_input: bn_out,
        },
    ))
}

fn block_eval_train(
    steps: &[ConvStep; 2],
    zs: &[Tensor],
    time: Option<f64>,
) -> Result<(Vec<Tensor>, BlockIterCache)> {
    let (mid, c0) = step_forward_train(&steps[0], zs, time)?;
    let (out, c1) = step_forward_train(&steps[1], &mid, time)?;
    Ok((out, BlockIterCache { steps: [c0, c1] }))
}

/// Gradients of one conv unit, mirroring its parameter arrays.
#[derive(Debug, Clone)]
pub enum ConvUnitGrads {
    Standard { weight: Tensor, bias: Option<Tensor> },
    Separable { dw: Tensor, pw: Tensor },
}

#[derive(Debug, Clone)]
pub struct StepGrads {
    pub conv: ConvUnitGrads,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct DownGrads {
    pub main: [StepGrads; 2],
    pub shortcut_weight: Tensor,
    pub shortcut_bias: Tensor,
}

#[derive(Debug, Clone)]
pub enum StageGrads {
    Ode([StepGrads; 2]),
    Res(Vec<[StepGrads; 2]>),
    Down(DownGrads),
}

/// Parameter gradients mirroring a model's weight structure.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub pre: StepGrads,
    pub stages: Vec<StageGrads>,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

fn zero_step_grads(step: &ConvStep) -> StepGrads {
    let conv = match &step.conv {
        ConvUnit::Standard(c) => ConvUnitGrads::Standard {
            weight: Tensor::zeros(c.weight.shape()),
            bias: c.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        },
        ConvUnit::Separable { dw, pw } => ConvUnitGrads::Separable {
            dw: Tensor::zeros(dw.weight.shape()),
            pw: Tensor::zeros(pw.weight.shape()),
        },
    };
    StepGrads {
        conv,
        gamma: Tensor::zeros(step.bn.gamma.shape()),
        beta: Tensor::zeros(step.bn.beta.shape()),
    }
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> ModelGrads {
        let stages = model
            .stages
            .iter()
            .map(|stage| match stage {
                Stage::Ode(b) => StageGrads::Ode([zero_step_grads(&b.steps[0]), zero_step_grads(&b.steps[1])]),
                Stage::Res(blocks) => StageGrads::Res(
                    blocks
                        .iter()
                        .map(|b| [zero_step_grads(&b.steps[0]), zero_step_grads(&b.steps[1])])
                        .collect(),
                ),
                Stage::Down(d) => StageGrads::Down(DownGrads {
                    main: [zero_step_grads(&d.main[0]), zero_step_grads(&d.main[1])],
                    shortcut_weight: Tensor::zeros(d.shortcut.weight.shape()),
                    shortcut_bias: Tensor::zeros(&[d.shortcut.spec.out_channels]),
                }),
            })
            .collect();
        ModelGrads {
            pre: zero_step_grads(&model.pre),
            stages,
            fc_weight: Tensor::zeros(model.fc.weight.shape()),
            fc_bias: Tensor::zeros(model.fc.bias.shape()),
        }
    }

    /// Flat view of all gradient tensors, matching [`Model::params`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_step_grads(&self.pre, &mut out);
        for stage in &self.stages {
            match stage {
                StageGrads::Ode(steps) => {
                    for s in steps {
                        collect_step_grads(s, &mut out);
                    }
                }
                StageGrads::Res(blocks) => {
                    for b in blocks {
                        for s in b {
                            collect_step_grads(s, &mut out);
                        }
                    }
                }
                StageGrads::Down(d) => {
                    for s in &d.main {
                        collect_step_grads(s, &mut out);
                    }
                    out.push(&d.shortcut_weight);
                    out.push(&d.shortcut_bias);
                }
            }
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, a: f64) {
        for t in self.params_mut() {
            t.scale(a);
        }
    }

    /// Mutable flat view, matching [`Model::params_mut`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_step_grads_mut(&mut self.pre, &mut out);
        for stage in &mut self.stages {
            match stage {
                StageGrads::Ode(steps) => {
                    for s in steps {
                        collect_step_grads_mut(s, &mut out);
                    }
                }
                StageGrads::Res(blocks) => {
                    for b in blocks {
                        for s in b {
                            collect_step_grads_mut(s, &mut out);
                        }
                    }
                }
                StageGrads::Down(d) => {
                    for s in &mut d.main {
                        collect_step_grads_mut(s, &mut out);
                    }
                    out.push(&mut d.shortcut_weight);
                    out.push(&mut d.shortcut_bias);
                }
            }
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }
}

fn collect_step_grads<'a>(s: &'a StepGrads, out: &mut Vec<&'a Tensor>) {
    match &s.conv {
        ConvUnitGrads::Standard { weight, bias } => {
            out.push(weight);
            if let Some(b) = bias {
                out.push(b);
            }
        }
        ConvUnitGrads::Separable { dw, pw } => {
            out.push(dw);
            out.push(pw);
        }
    }
    out.push(&s.gamma);
    out.push(&s.beta);
}

fn collect_step_grads_mut<'a>(s: &'a mut StepGrads, out: &mut Vec<&'a mut Tensor>) {
    match &mut s.conv {
        ConvUnitGrads::Standard { weight, bias } => {
            out.push(weight);
            if let Some(b) = bias {
                out.push(b);
            }
        }
        ConvUnitGrads::Separable { dw, pw } => {
            out.push(dw);
            out.push(pw);
        }
    }
    out.push(&mut s.gamma);
    out.push(&mut s.beta);
}

fn step_backward(
    step: &ConvStep,
    cache: &ConvStepCache,
    grad_outputs: &[Tensor],
    grads: &mut StepGrads,
    timed: bool,
) -> Result<Vec<Tensor>> {
    let g_relu: Vec<Tensor> = cache
        .relu_input
        .iter()
        .zip(grad_outputs)
        .map(|(x, g)| relu_backward(x, g))
        .collect::<Result<_>>()?;
    let (g_bn, dgamma, dbeta) = batchnorm_train_backward(&cache.bn, &step.bn.gamma, &g_relu)?;
    grads.gamma.axpy(1.0, &dgamma)?;
    grads.beta.axpy(1.0, &dbeta)?;
    let mut g_inputs = Vec::with_capacity(g_bn.len());
    match (&step.conv, &mut grads.conv) {
        (ConvUnit::Standard(c), ConvUnitGrads::Standard { weight, bias }) => {
            for (x, g) in cache.conv_input.iter().zip(&g_bn) {
                let lg = conv_backward(x, &c.spec, &c.weight, g)?;
                weight.axpy(1.0, &lg.grad_params[0])?;
                if let (Some(b), Some(gb)) = (bias.as_mut(), lg.grad_params.get(1)) {
                    b.axpy(1.0, gb)?;
                }
                g_inputs.push(lg.grad_input);
            }
        }
        (ConvUnit::Separable { dw, pw }, ConvUnitGrads::Separable { dw: gdw, pw: gpw }) => {
            let mids = cache.mid.as_ref().expect("separable cache holds depthwise outputs");
            for ((x, m), g) in cache.conv_input.iter().zip(mids).zip(&g_bn) {
                let pw_grads = conv_backward(m, &pw.spec, &pw.weight, g)?;
                gpw.axpy(1.0, &pw_grads.grad_params[0])?;
                let dw_grads = conv_backward(x, &dw.spec, &dw.weight, &pw_grads.grad_input)?;
                gdw.axpy(1.0, &dw_grads.grad_params[0])?;
                g_inputs.push(dw_grads.grad_input);
            }
        }
        _ => unreachable!("grads mirror the model structure"),
    }
    if timed {
        g_inputs = g_inputs
            .iter()
            .map(add_time_backward)
            .collect::<Result<_>>()?;
    }
    Ok(g_inputs)
}

fn block_backward(
    steps: &[ConvStep; 2],
    cache: &BlockIterCache,
    grad_outputs: &[Tensor],
    grads: &mut [StepGrads; 2],
    timed: bool,
) -> Result<Vec<Tensor>> {
    let g_mid = step_backward(&steps[1], &cache.steps[1], grad_outputs, &mut grads[1], timed)?;
    step_backward(&steps[0], &cache.steps[0], &g_mid, &mut grads[0], timed)
}

impl Model {
    /// Batched training-mode forward pass. Pure: running statistics are not
    /// touched; apply them afterwards with [`Model::apply_bn_updates`].
    pub fn forward_train(&self, xs: &[Tensor]) -> Result<(BatchOutput, ModelCache)> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("forward_train requires a non-empty batch".into()));
        }
        for x in xs {
            if x.shape() != self.spec.input_shape {
                return Err(Error::shape(
                    "Model::forward_train input",
                    format!("{:?}", self.spec.input_shape),
                    format!("{:?}", x.shape()),
                ));
            }
        }
        let (mut zs, pre_cache) = step_forward_train(&self.pre, xs, None)?;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match stage {
                Stage::Ode(block) => {
                    let mut iters = Vec::with_capacity(block.c_iters);
                    for i in 0..block.c_iters {
                        let t = i as f64 * block.step_size;
                        let (f, ic) = block_eval_train(&block.steps, &zs, Some(t))?;
                        for (z, u) in zs.iter_mut().zip(&f) {
                            z.axpy(block.step_size, u)?;
                        }
                        iters.push(ic);
                    }
                    stage_caches.push(StageCache::Ode(iters));
                }
                Stage::Res(blocks) => {
                    let mut caches = Vec::with_capacity(blocks.len());
                    for b in blocks {
                        let (f, c) = block_eval_train(&b.steps, &zs, None)?;
                        for (z, u) in zs.iter_mut().zip(&f) {
                            z.axpy(1.0, u)?;
                        }
                        caches.push(c);
                    }
                    stage_caches.push(StageCache::Res(caches));
                }
                Stage::Down(down) => {
                    let shortcut_input = zs.clone();
                    let (mid, c0) = step_forward_train(&down.main[0], &zs, None)?;
                    let (mut main, c1) = step_forward_train(&down.main[1], &mid, None)?;
                    for (m, z) in main.iter_mut().zip(&shortcut_input) {
                        m.axpy(1.0, &down.shortcut.forward(z)?)?;
                    }
                    zs = main;
                    stage_caches.push(StageCache::Down {
                        main: BlockIterCache { steps: [c0, c1] },
                        shortcut_input,
                    });
                }
            }
        }
        let pool_dims = zs[0].dims3()?;
        let features: Vec<Tensor> = zs.iter().map(global_avg_pool).collect::<Result<_>>()?;
        let logits: Vec<Tensor> = features
            .iter()
            .map(|f| fc_forward(f, &self.fc.weight, &self.fc.bias))
            .collect::<Result<_>>()?;
        Ok((
            BatchOutput {
                features: features.clone(),
                logits,
            },
            ModelCache {
                pre: pre_cache,
                stages: stage_caches,
                pool_dims,
                fc_input: features,
            },
        ))
    }

    /// Reverse-mode backward pass through the cached training forward.
    /// `grad_logits` (and optionally `grad_features`) hold per-sample upstream
    /// gradients; the returned structure mirrors the model parameters.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_logits: &[Tensor],
        grad_features: Option<&[Tensor]>,
    ) -> Result<ModelGrads> {
        let batch = cache.fc_input.len();
        if grad_logits.len() != batch || grad_features.map_or(false, |g| g.len() != batch) {
            return Err(Error::shape(
                "Model::backward",
                format!("{} per-sample gradients", batch),
                format!(
                    "{} logit gradients, {:?} feature gradients",
                    grad_logits.len(),
                    grad_features.map(|g| g.len())
                ),
            ));
        }
        let mut grads = ModelGrads::zeros_like(self);
        // fully-connected head and pooled features
        let mut gs: Vec<Tensor> = Vec::with_capacity(batch);
        for (j, gl) in grad_logits.iter().enumerate() {
            let lg = fc_backward(&cache.fc_input[j], &self.fc.weight, gl)?;
            grads.fc_weight.axpy(1.0, &lg.grad_params[0])?;
            grads.fc_bias.axpy(1.0, &lg.grad_params[1])?;
            let mut g_feat = lg.grad_input;
            if let Some(gf) = grad_features {
                g_feat.axpy(1.0, &gf[j])?;
            }
            gs.push(global_avg_pool_backward(cache.pool_dims, &g_feat)?);
        }
        // stages in reverse
        for (stage, scache, sgrads) in self
            .stages
            .iter()
            .zip(&cache.stages)
            .zip(&mut grads.stages)
            .map(|((a, b), c)| (a, b, c))
            .rev()
        {
            match (stage, scache, sgrads) {
                (Stage::Ode(block), StageCache::Ode(iters), StageGrads::Ode(sg)) => {
                    for ic in iters.iter().rev() {
                        let gu: Vec<Tensor> = gs
                            .iter()
                            .map(|g| {
                                let mut s = g.clone();
                                s.scale(block.step_size);
                                s
                            })
                            .collect();
                        let g_through = block_backward(&block.steps, ic, &gu, sg, true)?;
                        for (g, gt) in gs.iter_mut().zip(&g_through) {
                            g.axpy(1.0, gt)?;
                        }
                    }
                }
                (Stage::Res(blocks), StageCache::Res(caches), StageGrads::Res(sg)) => {
                    for ((b, c), g_block) in blocks.iter().zip(caches).zip(sg.iter_mut()).rev() {
                        let g_through = block_backward(&b.steps, c, &gs, g_block, false)?;
                        for (g, gt) in gs.iter_mut().zip(&g_through) {
                            g.axpy(1.0, gt)?;
                        }
                    }
                }
                (
                    Stage::Down(down),
                    StageCache::Down {
                        main,
                        shortcut_input,
                    },
                    StageGrads::Down(dg),
                ) => {
                    let g_main = block_backward(&down.main, main, &gs, &mut dg.main, false)?;
                    let mut g_in = Vec::with_capacity(gs.len());
                    for (j, g) in gs.iter().enumerate() {
                        let lg = conv_backward(&shortcut_input[j], &down.shortcut.spec, &down.shortcut.weight, g)?;
                        dg.shortcut_weight.axpy(1.0, &lg.grad_params[0])?;
                        dg.shortcut_bias.axpy(1.0, &lg.grad_params[1])?;
                        let mut gi = lg.grad_input;
                        gi.axpy(1.0, &g_main[j])?;
                        g_in.push(gi);
                    }
                    gs = g_in;
                }
                _ => unreachable!("cache and grads mirror the model structure"),
            }
        }
        step_backward(&self.pre, &cache.pre, &gs, &mut grads.pre, false)?;
        Ok(grads)
    }

    /// Fold the batch statistics recorded in a training cache into the
    /// running statistics, in the same order the forward pass visited them.
    pub fn apply_bn_updates(&mut self, cache: &ModelCache) {
        self.pre.bn.apply_update(&cache.pre.bn);
        for (stage, scache) in self.stages.iter_mut().zip(&cache.stages) {
            match (stage, scache) {
                (Stage::Ode(block), StageCache::Ode(iters)) => {
                    for ic in iters {
                        block.steps[0].bn.apply_update(&ic.steps[0].bn);
                        block.steps[1].bn.apply_update(&ic.steps[1].bn);
                    }
                }
                (Stage::Res(blocks), StageCache::Res(caches)) => {
                    for (b, c) in blocks.iter_mut().zip(caches) {
                        b.steps[0].bn.apply_update(&c.steps[0].bn);
                        b.steps[1].bn.apply_update(&c.steps[1].bn);
                    }
                }
                (Stage::Down(down), StageCache::Down { main, .. }) => {
                    down.main[0].bn.apply_update(&main.steps[0].bn);
                    down.main[1].bn.apply_update(&main.steps[1].bn);
                }
                _ => unreachable!("cache mirrors the model structure"),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// parameter listing
// ---------------------------------------------------------------------------

fn step_param_names(prefix: &str, idx: usize, step: &ConvStep, out: &mut Vec<(String, usize)>) {
    match &step.conv {
        ConvUnit::Standard(c) => {
            out.push((format!("{prefix}.conv{idx}.weight"), 0));
            if c.bias.is_some() {
                out.push((format!("{prefix}.conv{idx}.bias"), 0));
            }
        }
        ConvUnit::Separable { .. } => {
            out.push((format!("{prefix}.conv{idx}.dw.weight"), 0));
            out.push((format!("{prefix}.conv{idx}.pw.weight"), 0));
        }
    }
    out.push((format!("{prefix}.bn{idx}.gamma"), 0));
    out.push((format!("{prefix}.bn{idx}.beta"), 0));
}

impl Model {
    fn stage_keys(&self) -> Vec<String> {
        self.spec.stage_plan().iter().map(|p| p.key.clone()).collect()
    }

    /// Names of all trainable parameter arrays, in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        step_param_names("pre", 1, &self.pre, &mut names);
        let keys = self.stage_keys();
        for (stage, key) in self.stages.iter().zip(&keys) {
            match stage {
                Stage::Ode(b) => {
                    step_param_names(key, 1, &b.steps[0], &mut names);
                    step_param_names(key, 2, &b.steps[1], &mut names);
                }
                Stage::Res(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        let prefix = format!("{key}.{j}");
                        step_param_names(&prefix, 1, &b.steps[0], &mut names);
                        step_param_names(&prefix, 2, &b.steps[1], &mut names);
                    }
                }
                Stage::Down(d) => {
                    step_param_names(key, 1, &d.main[0], &mut names);
                    step_param_names(key, 2, &d.main[1], &mut names);
                    names.push((format!("{key}.shortcut.weight"), 0));
                    names.push((format!("{key}.shortcut.bias"), 0));
                }
            }
        }
        names.push(("fc.weight".to_string(), 0));
        names.push(("fc.bias".to_string(), 0));
        names.into_iter().map(|(n, _)| n).collect()
    }

    /// All trainable parameter tensors, in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_step_params(&self.pre, &mut out);
        for stage in &self.stages {
            match stage {
                Stage::Ode(b) => {
                    collect_step_params(&b.steps[0], &mut out);
                    collect_step_params(&b.steps[1], &mut out);
                }
                Stage::Res(blocks) => {
                    for b in blocks {
                        collect_step_params(&b.steps[0], &mut out);
                        collect_step_params(&b.steps[1], &mut out);
                    }
                }
                Stage::Down(d) => {
                    collect_step_params(&d.main[0], &mut out);
                    collect_step_params(&d.main[1], &mut out);
                    out.push(&d.shortcut.weight);
                    out.push(d.shortcut.bias.as_ref().expect("shortcut carries a bias"));
                }
            }
        }
        out.push(&self.fc.weight);
        out.push(&self.fc.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        collect_step_params_mut(&mut self.pre, &mut out);
        for stage in &mut self.stages {
            match stage {
                Stage::Ode(b) => {
                    let [s0, s1] = &mut b.steps;
                    collect_step_params_mut(s0, &mut out);
                    collect_step_params_mut(s1, &mut out);
                }
                Stage::Res(blocks) => {
                    for b in blocks {
                        let [s0, s1] = &mut b.steps;
                        collect_step_params_mut(s0, &mut out);
                        collect_step_params_mut(s1, &mut out);
                    }
                }
                Stage::Down(d) => {
                    let [m0, m1] = &mut d.main;
                    collect_step_params_mut(m0, &mut out);
                    collect_step_params_mut(m1, &mut out);
                    out.push(&mut d.shortcut.weight);
                    out.push(d.shortcut.bias.as_mut().expect("shortcut carries a bias"));
                }
            }
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    /// Named running-statistics buffers (not trained, but serialized).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn bn_buffers<'a>(prefix: &str, idx: usize, bn: &'a BatchNorm, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{prefix}.bn{idx}.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.bn{idx}.running_var"), &bn.running_var));
        }
        bn_buffers("pre", 1, &self.pre.bn, &mut out);
        let keys = self.stage_keys();
        for (stage, key) in self.stages.iter().zip(&keys) {
            match stage {
                Stage::Ode(b) => {
                    bn_buffers(key, 1, &b.steps[0].bn, &mut out);
                    bn_buffers(key, 2, &b.steps[1].bn, &mut out);
                }
                Stage::Res(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        let prefix = format!("{key}.{j}");
                        bn_buffers(&prefix, 1, &b.steps[0].bn, &mut out);
                        bn_buffers(&prefix, 2, &b.steps[1].bn, &mut out);
                    }
                }
                Stage::Down(d) => {
                    bn_buffers(key, 1, &d.main[0].bn, &mut out);
                    bn_buffers(key, 2, &d.main[1].bn, &mut out);
                }
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.push(&mut self.pre.bn.running_mean);
        out.push(&mut self.pre.bn.running_var);
        for stage in &mut self.stages {
            match stage {
                Stage::Ode(b) => {
                    let [s0, s1] = &mut b.steps;
                    out.push(&mut s0.bn.running_mean);
                    out.push(&mut s0.bn.running_var);
                    out.push(&mut s1.bn.running_mean);
                    out.push(&mut s1.bn.running_var);
                }
                Stage::Res(blocks) => {
                    for b in blocks {
                        let [s0, s1] = &mut b.steps;
                        out.push(&mut s0.bn.running_mean);
                        out.push(&mut s0.bn.running_var);
                        out.push(&mut s1.bn.running_mean);
                        out.push(&mut s1.bn.running_var);
                    }
                }
                Stage::Down(d) => {
                    let [m0, m1] = &mut d.main;
                    out.push(&mut m0.bn.running_mean);
                    out.push(&mut m0.bn.running_var);
                    out.push(&mut m1.bn.running_mean);
                    out.push(&mut m1.bn.running_var);
                }
            }
        }
        out
    }

    /// Named trainable parameters in declaration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.param_names().into_iter().zip(self.params()).collect()
    }
}

fn collect_step_params<'a>(step: &'a ConvStep, out: &mut Vec<&'a Tensor>) {
    match &step.conv {
        ConvUnit::Standard(c) => {
            out.push(&c.weight);
            if let Some(b) = &c.bias {
                out.push(b);
            }
        }
        ConvUnit::Separable { dw, pw } => {
            out.push(&dw.weight);
            out.push(&pw.weight);
        }
    }
    out.push(&step.bn.gamma);
    out.push(&step.bn.beta);
}

fn collect_step_params_mut<'a>(step: &'a mut ConvStep, out: &mut Vec<&'a mut Tensor>) {
    match &mut step.conv {
        ConvUnit::Standard(c) => {
            out.push(&mut c.weight);
            if let Some(b) = &mut c.bias {
                out.push(b);
            }
        }
        ConvUnit::Separable { dw, pw } => {
            out.push(&mut dw.weight);
            out.push(&mut pw.weight);
        }
    }
    out.push(&mut step.bn.gamma);
    out.push(&mut step.bn.beta);
}

// ---------------------------------------------------------------------------
// scalar Euler solver
// ---------------------------------------------------------------------------

/// First-order Euler integration of a scalar ODE `dz/dt = f(z, t)` over
/// `steps` steps of size `h`, starting at `t = 0`.
pub fn euler_solve_scalar(z0: f64, h: f64, steps: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut z = z0;
    for i in 0..steps {
        let t = i as f64 * h;
        z += h * f(z, t);
    }
    z
}
