//! Conversion of trained float models into the fixed-point deployment
//! scheme, and the fixed-point block forward pass.
//!
//! Weights of convolutional layers use the 20-bit format and everything else
//! (activations, normalization affines, biases) uses the 24-bit format.
//! Batch normalization is folded into the preceding convolution by default:
//! at inference BN is the per-channel affine `y = a*x + b` with
//! `a = gamma / sqrt(var + eps)` and `b = beta - mean * a`, so folding scales
//! each output-channel kernel slice by `a` and introduces a bias. A no-fold
//! mode keeps BN as a separate quantized affine stage instead.
//!
//! The block subgraph (everything between pre- and post-processing, plus the
//! final global average pool) runs entirely in integer arithmetic:
//! multiply-accumulate in a 64-bit accumulator, one round-to-nearest-even
//! rescale per output element, saturation instead of wraparound. Host-side
//! pre- and post-processing stay in floating point.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fixed::{qmac, rne_div, FixedPointFormat, QTensor, Q4_16, Q8_16};
use crate::layers::{batchnorm_forward, relu_forward, ConvKind, ConvSpec};
use crate::model::{Conv, ConvStep, ConvUnit, Fc, Model, ModelSpec, Stage};
use crate::tensor::Tensor;

/// Deployment quantization scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    /// Format of convolution weight arrays.
    pub conv_fmt: FixedPointFormat,
    /// Format of everything else: activations, affines, biases.
    pub other_fmt: FixedPointFormat,
    /// Fold batch normalization into the preceding convolution.
    pub fold_batchnorm: bool,
    /// Per-layer weight-format overrides, keyed by layer path
    /// (`odeblock1.conv1`, `downsampling2.shortcut`, ...).
    pub per_layer: BTreeMap<String, FixedPointFormat>,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme {
            conv_fmt: Q4_16,
            other_fmt: Q8_16,
            fold_batchnorm: true,
            per_layer: BTreeMap::new(),
        }
    }
}

impl QuantScheme {
    /// Parse a scheme flag such as `20/24` (conv bits / other bits), keeping
    /// 16 fraction bits on the shared grid.
    pub fn parse(s: &str) -> Result<QuantScheme> {
        let (conv, other) = s
            .split_once('/')
            .ok_or_else(|| Error::config("scheme", "expected <conv_bits>/<other_bits>, e.g. 20/24"))?;
        let conv_bits: u8 = conv
            .trim()
            .parse()
            .map_err(|_| Error::config("scheme", format!("bad conv bit width `{}`", conv)))?;
        let other_bits: u8 = other
            .trim()
            .parse()
            .map_err(|_| Error::config("scheme", format!("bad bit width `{}`", other)))?;
        Ok(QuantScheme {
            conv_fmt: FixedPointFormat::new(conv_bits, 16.min(conv_bits - 1))?,
            other_fmt: FixedPointFormat::new(other_bits, 16.min(other_bits - 1))?,
            ..QuantScheme::default()
        })
    }

    fn weight_fmt(&self, layer: &str) -> FixedPointFormat {
        self.per_layer.get(layer).copied().unwrap_or(self.conv_fmt)
    }
}

/// Quantized convolution: integer weights plus an optional bias on the
/// activation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub spec: ConvSpec,
    pub weight: QTensor,
    pub bias: Option<QTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QConvUnit {
    Standard(QConv),
    Separable { dw: QConv, pw: QConv },
}

/// Per-channel affine stage standing in for unfolded batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct QAffine {
    pub scale: QTensor,
    pub offset: QTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QConvStep {
    pub conv: QConvUnit,
    /// Present only when batch normalization is kept unfolded.
    pub bn: Option<QAffine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QOdeBlock {
    pub channels: usize,
    pub c_iters: usize,
    pub step_size: f64,
    pub steps: [QConvStep; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QResBlock {
    pub steps: [QConvStep; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct QDownsampling {
    pub main: [QConvStep; 2],
    pub shortcut: QConv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QStage {
    Ode(QOdeBlock),
    Res(Vec<QResBlock>),
    Down(QDownsampling),
}

/// The fixed-point block subgraph: every stage between pre- and
/// post-processing, ending with the global average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct QStages {
    pub stages: Vec<QStage>,
    pub act_fmt: FixedPointFormat,
    /// Expected input feature-map shape `(C, H, W)`.
    pub entry_shape: [usize; 3],
}

/// Quantized model: float pre-processing, fixed-point blocks, float head.
#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    pub spec: ModelSpec,
    pub scheme: QuantScheme,
    pub pre: ConvStep,
    pub blocks: QStages,
    pub fc: Fc,
}

/// Per-layer saturation statistics from quantizing a model.
#[derive(Debug, Clone, Default)]
pub struct QuantizeReport {
    pub layers: Vec<LayerQuantStats>,
}

#[derive(Debug, Clone)]
pub struct LayerQuantStats {
    pub layer: String,
    pub saturated: u64,
    pub total: usize,
}

impl QuantizeReport {
    fn push(&mut self, layer: String, saturated: u64, total: usize) {
        self.layers.push(LayerQuantStats {
            layer,
            saturated,
            total,
        });
    }

    pub fn total_saturated(&self) -> u64 {
        self.layers.iter().map(|l| l.saturated).sum()
    }
}

/// Inference-time affine implied by a batch-norm layer: `(a, b)` per channel.
fn bn_affine(bn: &crate::model::BatchNorm) -> (Vec<f64>, Vec<f64>) {
    let c = bn.gamma.len();
    let mut a = Vec::with_capacity(c);
    let mut b = Vec::with_capacity(c);
    for ch in 0..c {
        let inv = 1.0 / (bn.running_var.data()[ch] + bn.eps).sqrt();
        let scale = bn.gamma.data()[ch] * inv;
        a.push(scale);
        b.push(bn.beta.data()[ch] - bn.running_mean.data()[ch] * scale);
    }
    (a, b)
}

/// Fold a batch-norm affine into a convolution, producing scaled weights and
/// a per-output-channel bias (all in floating point).
pub fn fold_conv_bn(conv: &Conv, bn: &crate::model::BatchNorm) -> (Tensor, Tensor) {
    let (a, b) = bn_affine(bn);
    let m = conv.spec.out_channels;
    let per_out = conv.weight.len() / m;
    let mut w = conv.weight.data().to_vec();
    for mo in 0..m {
        for v in w[mo * per_out..(mo + 1) * per_out].iter_mut() {
            *v *= a[mo];
        }
    }
    let mut bias = b;
    if let Some(cb) = &conv.bias {
        for ((bi, &av), &cbv) in bias.iter_mut().zip(&a).zip(cb.data()) {
            *bi += av * cbv;
        }
    }
    (
        Tensor::from_vec_unchecked(conv.weight.shape().to_vec(), w),
        Tensor::from_vec_unchecked(vec![m], bias),
    )
}

/// Fold every convolution+batchnorm pair of a model in floating point,
/// leaving identity batch-norm stages behind. Used to verify that folding
/// preserves the float logits before any quantization happens.
pub fn fold_model(model: &Model) -> Model {
    let mut folded = model.clone();
    fn fold_step(step: &mut ConvStep) {
        // fold into the channel-mixing convolution (pointwise for separable)
        let bn = step.bn.clone();
        let target = match &mut step.conv {
            ConvUnit::Standard(c) => c,
            ConvUnit::Separable { pw, .. } => pw,
        };
        let (w, b) = fold_conv_bn(target, &bn);
        target.weight = w;
        target.bias = Some(b);
        target.spec.bias = true;
        step.bn = crate::model::BatchNorm {
            gamma: Tensor::filled(&[bn.gamma.len()], 1.0),
            beta: Tensor::zeros(&[bn.gamma.len()]),
            running_mean: Tensor::zeros(&[bn.gamma.len()]),
            running_var: Tensor::filled(&[bn.gamma.len()], 1.0 - bn.eps),
            eps: bn.eps,
            momentum: bn.momentum,
        };
    }
    for stage in &mut folded.stages {
        match stage {
            Stage::Ode(b) => b.steps.iter_mut().for_each(fold_step),
            Stage::Res(blocks) => blocks
                .iter_mut()
                .for_each(|b| b.steps.iter_mut().for_each(fold_step)),
            Stage::Down(d) => d.main.iter_mut().for_each(fold_step),
        }
    }
    folded
}

fn quantize_conv(
    conv: &Conv,
    layer: &str,
    weight_fmt: FixedPointFormat,
    bias_fmt: FixedPointFormat,
    report: &mut QuantizeReport,
) -> Result<QConv> {
    let (weight, sat) = QTensor::quantize_counting(&conv.weight, weight_fmt)?;
    report.push(format!("{layer}.weight"), sat, weight.len());
    let bias = match &conv.bias {
        Some(b) => {
            let (qb, sat) = QTensor::quantize_counting(b, bias_fmt)?;
            report.push(format!("{layer}.bias"), sat, qb.len());
            Some(qb)
        }
        None => None,
    };
    Ok(QConv {
        spec: conv.spec.clone(),
        weight,
        bias,
    })
}

fn quantize_step(
    step: &ConvStep,
    layer_prefix: &str,
    idx: usize,
    scheme: &QuantScheme,
    report: &mut QuantizeReport,
) -> Result<QConvStep> {
    let layer = format!("{layer_prefix}.conv{idx}");
    if scheme.fold_batchnorm {
        // fold into the channel-mixing convolution of the step
        let (target, dw) = match &step.conv {
            ConvUnit::Standard(c) => (c, None),
            ConvUnit::Separable { dw, pw } => (pw, Some(dw)),
        };
        let (w, b) = fold_conv_bn(target, &step.bn);
        let folded = Conv {
            spec: ConvSpec {
                bias: true,
                ..target.spec.clone()
            },
            weight: w,
            bias: Some(b),
        };
        let conv = match dw {
            None => QConvUnit::Standard(quantize_conv(
                &folded,
                &layer,
                scheme.weight_fmt(&layer),
                scheme.other_fmt,
                report,
            )?),
            Some(dw) => QConvUnit::Separable {
                dw: quantize_conv(
                    dw,
                    &format!("{layer}.dw"),
                    scheme.weight_fmt(&layer),
                    scheme.other_fmt,
                    report,
                )?,
                pw: quantize_conv(
                    &folded,
                    &format!("{layer}.pw"),
                    scheme.weight_fmt(&layer),
                    scheme.other_fmt,
                    report,
                )?,
            },
        };
        Ok(QConvStep { conv, bn: None })
    } else {
        let conv = match &step.conv {
            ConvUnit::Standard(c) => QConvUnit::Standard(quantize_conv(
                c,
                &layer,
                scheme.weight_fmt(&layer),
                scheme.other_fmt,
                report,
            )?),
            ConvUnit::Separable { dw, pw } => QConvUnit::Separable {
                dw: quantize_conv(
                    dw,
                    &format!("{layer}.dw"),
                    scheme.weight_fmt(&layer),
                    scheme.other_fmt,
                    report,
                )?,
                pw: quantize_conv(
                    pw,
                    &format!("{layer}.pw"),
                    scheme.weight_fmt(&layer),
                    scheme.other_fmt,
                    report,
                )?,
            },
        };
        let (a, b) = bn_affine(&step.bn);
        let c = a.len();
        let (scale, sat_a) =
            QTensor::quantize_counting(&Tensor::from_vec_unchecked(vec![c], a), scheme.other_fmt)?;
        let (offset, sat_b) =
            QTensor::quantize_counting(&Tensor::from_vec_unchecked(vec![c], b), scheme.other_fmt)?;
        report.push(format!("{layer_prefix}.bn{idx}.scale"), sat_a, c);
        report.push(format!("{layer_prefix}.bn{idx}.offset"), sat_b, c);
        Ok(QConvStep {
            conv,
            bn: Some(QAffine { scale, offset }),
        })
    }
}

/// Quantize a trained model under a scheme. The float pre-processing step
/// and classifier head are carried over unchanged; every block parameter
/// array becomes a word tensor. Saturated weights are reported per layer.
pub fn quantize_model(model: &Model, scheme: &QuantScheme) -> Result<(QModel, QuantizeReport)> {
    let mut report = QuantizeReport::default();
    let mut stages = Vec::with_capacity(model.stages.len());
    let keys: Vec<String> = model.spec.stage_plan().iter().map(|p| p.key.clone()).collect();
    for (stage, key) in model.stages.iter().zip(&keys) {
        let qstage = match stage {
            Stage::Ode(b) => QStage::Ode(QOdeBlock {
                channels: b.channels,
                c_iters: b.c_iters,
                step_size: b.step_size,
                steps: [
                    quantize_step(&b.steps[0], key, 1, scheme, &mut report)?,
                    quantize_step(&b.steps[1], key, 2, scheme, &mut report)?,
                ],
            }),
            Stage::Res(blocks) => QStage::Res(
                blocks
                    .iter()
                    .enumerate()
                    .map(|(j, b)| {
                        Ok(QResBlock {
                            steps: [
                                quantize_step(&b.steps[0], &format!("{key}.{j}"), 1, scheme, &mut report)?,
                                quantize_step(&b.steps[1], &format!("{key}.{j}"), 2, scheme, &mut report)?,
                            ],
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            Stage::Down(d) => {
                let layer = format!("{key}.shortcut");
                QStage::Down(QDownsampling {
                    main: [
                        quantize_step(&d.main[0], key, 1, scheme, &mut report)?,
                        quantize_step(&d.main[1], key, 2, scheme, &mut report)?,
                    ],
                    shortcut: quantize_conv(
                        &d.shortcut,
                        &layer,
                        scheme.weight_fmt(&layer),
                        scheme.other_fmt,
                        &mut report,
                    )?,
                })
            }
        };
        stages.push(qstage);
    }
    Ok((
        QModel {
            spec: model.spec.clone(),
            scheme: scheme.clone(),
            pre: model.pre.clone(),
            blocks: QStages {
                stages,
                act_fmt: scheme.other_fmt,
                entry_shape: model.spec.entry_shape(),
            },
            fc: model.fc.clone(),
        },
        report,
    ))
}

// ---------------------------------------------------------------------------
// fixed-point forward
// ---------------------------------------------------------------------------

fn q_conv_forward(
    input: &QTensor,
    conv: &QConv,
    act_fmt: FixedPointFormat,
    sats: &mut u64,
) -> Result<QTensor> {
    let (n, h, w) = input.dims3()?;
    if n != conv.spec.in_channels {
        return Err(Error::shape(
            "q_conv_forward",
            format!("{} input channels", conv.spec.in_channels),
            format!("{}", n),
        ));
    }
    let (oh, ow) = conv.spec.out_spatial(h, w)?;
    let m = conv.spec.out_channels;
    let k = conv.spec.kernel;
    let s = conv.spec.stride;
    let p = conv.spec.padding;
    let w_fb = conv.weight.fmt().frac_bits() as u32;
    let act_fb = act_fmt.frac_bits() as u32;
    let acc_frac = act_fb + w_fb;
    let id = input.words();
    let wd = conv.weight.words();
    // bias words live on the activation grid; align them to the accumulator
    let bias_shift = conv
        .bias
        .as_ref()
        .map(|b| acc_frac - b.fmt().frac_bits() as u32);
    let mut out = vec![0i32; m * oh * ow];
    match conv.spec.kind {
        ConvKind::Standard | ConvKind::Depthwise => {
            let depthwise = conv.spec.kind == ConvKind::Depthwise;
            for mo in 0..m {
                let bias_acc = match (&conv.bias, bias_shift) {
                    (Some(b), Some(shift)) => (b.words()[mo] as i64) << shift,
                    _ => 0,
                };
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias_acc;
                        let (ni_lo, ni_hi) = if depthwise { (mo, mo + 1) } else { (0, n) };
                        for ni in ni_lo..ni_hi {
                            let wbase = if depthwise {
                                mo * k * k
                            } else {
                                ((mo * n + ni) * k) * k
                            };
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = (ni * h + iy as usize) * w;
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc = qmac(acc, id[irow + ix as usize], wd[wbase + ky * k + kx]);
                                }
                            }
                        }
                        let (word, sat) = act_fmt.store_from(acc, acc_frac);
                        *sats += sat as u64;
                        out[(mo * oh + oy) * ow + ox] = word;
                    }
                }
            }
        }
        ConvKind::Pointwise => {
            let hw = h * w;
            for mo in 0..m {
                let bias_acc = match (&conv.bias, bias_shift) {
                    (Some(b), Some(shift)) => (b.words()[mo] as i64) << shift,
                    _ => 0,
                };
                let wrow = mo * n;
                for site in 0..hw {
                    let mut acc = bias_acc;
                    for ni in 0..n {
                        acc = qmac(acc, id[ni * hw + site], wd[wrow + ni]);
                    }
                    let (word, sat) = act_fmt.store_from(acc, acc_frac);
                    *sats += sat as u64;
                    out[mo * hw + site] = word;
                }
            }
        }
    }
    QTensor::from_words(vec![m, oh, ow], out, act_fmt)
}

fn q_affine(
    input: &QTensor,
    affine: &QAffine,
    act_fmt: FixedPointFormat,
    sats: &mut u64,
) -> Result<QTensor> {
    let (c, h, w) = input.dims3()?;
    let hw = h * w;
    let a_fb = affine.scale.fmt().frac_bits() as u32;
    let b_fb = affine.offset.fmt().frac_bits() as u32;
    let act_fb = act_fmt.frac_bits() as u32;
    let acc_frac = act_fb + a_fb;
    let mut out = vec![0i32; input.len()];
    for ch in 0..c {
        let a = affine.scale.words()[ch];
        let b_acc = (affine.offset.words()[ch] as i64) << (acc_frac - b_fb);
        for i in ch * hw..(ch + 1) * hw {
            let acc = qmac(b_acc, input.words()[i], a);
            let (word, sat) = act_fmt.store_from(acc, acc_frac);
            *sats += sat as u64;
            out[i] = word;
        }
    }
    QTensor::from_words(vec![c, h, w], out, act_fmt)
}

fn q_relu(input: &QTensor) -> QTensor {
    let mut out = input.clone();
    for w in out.words_mut() {
        *w = (*w).max(0);
    }
    out
}

fn q_add_time(input: &QTensor, t: f64, act_fmt: FixedPointFormat) -> Result<QTensor> {
    let (c, h, w) = input.dims3()?;
    let tw = act_fmt.quantize(t)?;
    let mut words = Vec::with_capacity((c + 1) * h * w);
    words.extend_from_slice(input.words());
    words.extend(std::iter::repeat(tw).take(h * w));
    QTensor::from_words(vec![c + 1, h, w], words, act_fmt)
}

/// `z + h*u` on the shared activation grid. `h = 1` is exact; other step
/// sizes multiply through the accumulator.
fn q_residual_add(
    z: &QTensor,
    u: &QTensor,
    step_size: f64,
    act_fmt: FixedPointFormat,
    sats: &mut u64,
) -> Result<QTensor> {
    if z.shape() != u.shape() {
        return Err(Error::shape(
            "q_residual_add",
            format!("{:?}", z.shape()),
            format!("{:?}", u.shape()),
        ));
    }
    let mut out = vec![0i32; z.len()];
    if step_size == 1.0 {
        for (o, (&a, &b)) in out.iter_mut().zip(z.words().iter().zip(u.words())) {
            let (word, sat) = act_fmt.saturate(a as i64 + b as i64);
            *sats += sat as u64;
            *o = word;
        }
    } else {
        let act_fb = act_fmt.frac_bits() as u32;
        let hw = act_fmt.quantize(step_size)?;
        for (o, (&a, &b)) in out.iter_mut().zip(z.words().iter().zip(u.words())) {
            let acc = ((a as i64) << act_fb) + (b as i64) * (hw as i64);
            let (word, sat) = act_fmt.store_from(acc, 2 * act_fb);
            *sats += sat as u64;
            *o = word;
        }
    }
    QTensor::from_words(z.shape().to_vec(), out, act_fmt)
}

fn q_step_forward(
    step: &QConvStep,
    input: &QTensor,
    time: Option<f64>,
    act_fmt: FixedPointFormat,
    sats: &mut u64,
) -> Result<QTensor> {
    let x = match time {
        Some(t) => q_add_time(input, t, act_fmt)?,
        None => input.clone(),
    };
    let mut out = match &step.conv {
        QConvUnit::Standard(c) => q_conv_forward(&x, c, act_fmt, sats)?,
        QConvUnit::Separable { dw, pw } => {
            let mid = q_conv_forward(&x, dw, act_fmt, sats)?;
            q_conv_forward(&mid, pw, act_fmt, sats)?
        }
    };
    if let Some(affine) = &step.bn {
        out = q_affine(&out, affine, act_fmt, sats)?;
    }
    Ok(q_relu(&out))
}

fn q_block_eval(
    steps: &[QConvStep; 2],
    z: &QTensor,
    time: Option<f64>,
    act_fmt: FixedPointFormat,
    sats: &mut u64,
) -> Result<QTensor> {
    let mid = q_step_forward(&steps[0], z, time, act_fmt, sats)?;
    q_step_forward(&steps[1], &mid, time, act_fmt, sats)
}

/// Fixed-point global average pool, `(C, H, W) -> (C, 1, 1)`, with
/// round-to-nearest-even division.
fn q_global_avg_pool(input: &QTensor) -> Result<QTensor> {
    let (c, h, w) = input.dims3()?;
    let hw = (h * w) as i64;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let sum: i64 = input.words()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as i64)
            .sum();
        out.push(rne_div(sum, hw) as i32);
    }
    QTensor::from_words(vec![c, 1, 1], out, input.fmt())
}

impl QStages {
    /// Run the block subgraph on an entry feature map. Returns the pooled
    /// `(C, 1, 1)` feature tensor and the saturation count.
    pub fn forward(&self, entry: &QTensor) -> Result<(QTensor, u64)> {
        if entry.shape() != self.entry_shape {
            return Err(Error::shape(
                "QStages::forward",
                format!("{:?}", self.entry_shape),
                format!("{:?}", entry.shape()),
            ));
        }
        if entry.fmt() != self.act_fmt {
            return Err(Error::shape(
                "QStages::forward",
                self.act_fmt.label(),
                entry.fmt().label(),
            ));
        }
        let mut sats = 0u64;
        let mut z = entry.clone();
        for stage in &self.stages {
            z = match stage {
                QStage::Ode(block) => {
                    let mut z = z;
                    for i in 0..block.c_iters {
                        let t = i as f64 * block.step_size;
                        let u = q_block_eval(&block.steps, &z, Some(t), self.act_fmt, &mut sats)?;
                        z = q_residual_add(&z, &u, block.step_size, self.act_fmt, &mut sats)?;
                    }
                    z
                }
                QStage::Res(blocks) => {
                    let mut z = z;
                    for b in blocks {
                        let u = q_block_eval(&b.steps, &z, None, self.act_fmt, &mut sats)?;
                        z = q_residual_add(&z, &u, 1.0, self.act_fmt, &mut sats)?;
                    }
                    z
                }
                QStage::Down(down) => {
                    let mid = q_step_forward(&down.main[0], &z, None, self.act_fmt, &mut sats)?;
                    let main = q_step_forward(&down.main[1], &mid, None, self.act_fmt, &mut sats)?;
                    let short = q_conv_forward(&z, &down.shortcut, self.act_fmt, &mut sats)?;
                    q_residual_add(&main, &short, 1.0, self.act_fmt, &mut sats)?
                }
            };
        }
        let pooled = q_global_avg_pool(&z)?;
        Ok((pooled, sats))
    }
}

// ---------------------------------------------------------------------------
// array enumeration (weight images, memory planning)
// ---------------------------------------------------------------------------

fn step_array_names(prefix: &str, idx: usize, step: &QConvStep, out: &mut Vec<String>) {
    let layer = format!("{prefix}.conv{idx}");
    match &step.conv {
        QConvUnit::Standard(c) => {
            out.push(format!("{layer}.weight"));
            if c.bias.is_some() {
                out.push(format!("{layer}.bias"));
            }
        }
        QConvUnit::Separable { pw, .. } => {
            out.push(format!("{layer}.dw.weight"));
            out.push(format!("{layer}.pw.weight"));
            if pw.bias.is_some() {
                out.push(format!("{layer}.pw.bias"));
            }
        }
    }
    if step.bn.is_some() {
        out.push(format!("{prefix}.bn{idx}.scale"));
        out.push(format!("{prefix}.bn{idx}.offset"));
    }
}

fn step_arrays<'a>(step: &'a QConvStep, out: &mut Vec<&'a QTensor>) {
    match &step.conv {
        QConvUnit::Standard(c) => {
            out.push(&c.weight);
            if let Some(b) = &c.bias {
                out.push(b);
            }
        }
        QConvUnit::Separable { dw, pw } => {
            out.push(&dw.weight);
            out.push(&pw.weight);
            if let Some(b) = &pw.bias {
                out.push(b);
            }
        }
    }
    if let Some(bn) = &step.bn {
        out.push(&bn.scale);
        out.push(&bn.offset);
    }
}

fn step_arrays_mut<'a>(step: &'a mut QConvStep, out: &mut Vec<&'a mut QTensor>) {
    match &mut step.conv {
        QConvUnit::Standard(c) => {
            out.push(&mut c.weight);
            if let Some(b) = &mut c.bias {
                out.push(b);
            }
        }
        QConvUnit::Separable { dw, pw } => {
            out.push(&mut dw.weight);
            out.push(&mut pw.weight);
            if let Some(b) = &mut pw.bias {
                out.push(b);
            }
        }
    }
    if let Some(bn) = &mut step.bn {
        out.push(&mut bn.scale);
        out.push(&mut bn.offset);
    }
}

impl QStages {
    fn array_names(&self, spec: &ModelSpec) -> Vec<String> {
        let keys: Vec<String> = spec.stage_plan().iter().map(|p| p.key.clone()).collect();
        let mut names = Vec::new();
        for (stage, key) in self.stages.iter().zip(&keys) {
            match stage {
                QStage::Ode(b) => {
                    step_array_names(key, 1, &b.steps[0], &mut names);
                    step_array_names(key, 2, &b.steps[1], &mut names);
                }
                QStage::Res(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        let prefix = format!("{key}.{j}");
                        step_array_names(&prefix, 1, &b.steps[0], &mut names);
                        step_array_names(&prefix, 2, &b.steps[1], &mut names);
                    }
                }
                QStage::Down(d) => {
                    step_array_names(key, 1, &d.main[0], &mut names);
                    step_array_names(key, 2, &d.main[1], &mut names);
                    names.push(format!("{key}.shortcut.weight"));
                    if d.shortcut.bias.is_some() {
                        names.push(format!("{key}.shortcut.bias"));
                    }
                }
            }
        }
        names
    }

    fn arrays(&self) -> Vec<&QTensor> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match stage {
                QStage::Ode(b) => {
                    step_arrays(&b.steps[0], &mut out);
                    step_arrays(&b.steps[1], &mut out);
                }
                QStage::Res(blocks) => {
                    for b in blocks {
                        step_arrays(&b.steps[0], &mut out);
                        step_arrays(&b.steps[1], &mut out);
                    }
                }
                QStage::Down(d) => {
                    step_arrays(&d.main[0], &mut out);
                    step_arrays(&d.main[1], &mut out);
                    out.push(&d.shortcut.weight);
                    if let Some(b) = &d.shortcut.bias {
                        out.push(b);
                    }
                }
            }
        }
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut QTensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            match stage {
                QStage::Ode(b) => {
                    let [s0, s1] = &mut b.steps;
                    step_arrays_mut(s0, &mut out);
                    step_arrays_mut(s1, &mut out);
                }
                QStage::Res(blocks) => {
                    for b in blocks {
                        let [s0, s1] = &mut b.steps;
                        step_arrays_mut(s0, &mut out);
                        step_arrays_mut(s1, &mut out);
                    }
                }
                QStage::Down(d) => {
                    let [m0, m1] = &mut d.main;
                    step_arrays_mut(m0, &mut out);
                    step_arrays_mut(m1, &mut out);
                    out.push(&mut d.shortcut.weight);
                    if let Some(b) = &mut d.shortcut.bias {
                        out.push(b);
                    }
                }
            }
        }
        out
    }
}

impl QModel {
    /// Named block parameter arrays in graph declaration order.
    pub fn named_arrays(&self) -> Vec<(String, &QTensor)> {
        self.blocks
            .array_names(&self.spec)
            .into_iter()
            .zip(self.blocks.arrays())
            .collect()
    }

    /// Rebuild a quantized model from a spec, scheme, and a flat array list
    /// (name, tensor) in declaration order. Names, shapes, and formats must
    /// match the layout the scheme produces; the float pre/post layers are
    /// zero-initialized placeholders.
    pub fn from_arrays(
        spec: &ModelSpec,
        scheme: &QuantScheme,
        arrays: &[(String, QTensor)],
    ) -> Result<QModel> {
        let zero = Model::zeros(spec)?;
        let (mut qmodel, _) = quantize_model(&zero, scheme)?;
        let expected = qmodel.blocks.array_names(spec);
        if expected.len() != arrays.len() {
            return Err(Error::shape(
                "QModel::from_arrays",
                format!("{} arrays", expected.len()),
                format!("{} arrays", arrays.len()),
            ));
        }
        for ((slot, name), (got_name, got)) in qmodel
            .blocks
            .arrays_mut()
            .into_iter()
            .zip(&expected)
            .map(|(s, n)| (s, n))
            .zip(arrays)
        {
            if name != got_name {
                return Err(Error::shape(
                    "QModel::from_arrays",
                    format!("array `{}`", name),
                    format!("array `{}`", got_name),
                ));
            }
            if slot.shape() != got.shape() || slot.fmt() != got.fmt() {
                return Err(Error::shape(
                    format!("QModel::from_arrays `{}`", name),
                    format!("shape {:?} fmt {}", slot.shape(), slot.fmt()),
                    format!("shape {:?} fmt {}", got.shape(), got.fmt()),
                ));
            }
            *slot = got.clone();
        }
        Ok(qmodel)
    }
}

/// Output of a quantized end-to-end forward pass.
#[derive(Debug, Clone)]
pub struct QForwardOutput {
    /// Dequantized pooled features.
    pub features: Tensor,
    /// Raw pooled feature words, `(C, 1, 1)`.
    pub q_features: QTensor,
    pub logits: Tensor,
    pub saturations: u64,
}

impl QModel {
    /// End-to-end forward: float pre-processing, quantize to the activation
    /// format, fixed-point blocks and pooling, float classifier head.
    pub fn quantized_forward(&self, input: &Tensor) -> Result<QForwardOutput> {
        let entry = self.host_preprocess(input)?;
        let (q_features, saturations) = self.blocks.forward(&entry)?;
        let logits = self.host_postprocess(&q_features)?;
        Ok(QForwardOutput {
            features: q_features.dequantize(),
            q_features,
            logits,
            saturations,
        })
    }

    /// Float pre-processing then quantization to the entry activation format.
    pub fn host_preprocess(&self, input: &Tensor) -> Result<QTensor> {
        if input.shape() != self.spec.input_shape {
            return Err(Error::shape(
                "QModel::host_preprocess",
                format!("{:?}", self.spec.input_shape),
                format!("{:?}", input.shape()),
            ));
        }
        let conv_out = match &self.pre.conv {
            ConvUnit::Standard(c) => c.forward(input)?,
            ConvUnit::Separable { dw, pw } => pw.forward(&dw.forward(input)?)?,
        };
        let float = relu_forward(&batchnorm_forward(&conv_out, &self.pre.bn.params())?);
        QTensor::quantize(&float, self.blocks.act_fmt)
    }

    /// Dequantize pooled features and run the float classifier head.
    pub fn host_postprocess(&self, features: &QTensor) -> Result<Tensor> {
        let flat = features.dequantize();
        let vec = Tensor::rank1(flat.data().to_vec())?;
        crate::layers::fc_forward(&vec, &self.fc.weight, &self.fc.bias)
    }
}

/// Deviation statistics between a float model and its quantized counterpart
/// over a fixed input set.
#[derive(Debug, Clone)]
pub struct QuantErrorReport {
    pub inputs: usize,
    pub max_abs_logit_dev: f64,
    pub mean_abs_logit_dev: f64,
    pub argmax_flips: usize,
    pub flip_rate: f64,
    pub saturations: u64,
}

impl QuantErrorReport {
    pub fn to_csv(&self) -> String {
        format!(
            "inputs,max_abs_logit_dev,mean_abs_logit_dev,argmax_flips,flip_rate,saturations\n{},{},{},{},{},{}\n",
            self.inputs,
            self.max_abs_logit_dev,
            self.mean_abs_logit_dev,
            self.argmax_flips,
            self.flip_rate,
            self.saturations
        )
    }
}

pub fn argmax(logits: &Tensor) -> usize {
    logits
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Compare float and quantized predictions over an input set.
pub fn quantization_error_report(
    model: &Model,
    qmodel: &QModel,
    inputs: &[Tensor],
) -> Result<QuantErrorReport> {
    if model.spec != qmodel.spec {
        return Err(Error::InvalidArgument(
            "quantization_error_report requires matching model graphs".to_string(),
        ));
    }
    let mut max_dev = 0.0f64;
    let mut sum_dev = 0.0f64;
    let mut count = 0usize;
    let mut flips = 0usize;
    let mut sats = 0u64;
    for input in inputs {
        let float_out = model.forward(input)?;
        let q_out = qmodel.quantized_forward(input)?;
        for (a, b) in float_out.logits.data().iter().zip(q_out.logits.data()) {
            let d = (a - b).abs();
            max_dev = max_dev.max(d);
            sum_dev += d;
            count += 1;
        }
        if argmax(&float_out.logits) != argmax(&q_out.logits) {
            flips += 1;
        }
        sats += q_out.saturations;
    }
    Ok(QuantErrorReport {
        inputs: inputs.len(),
        max_abs_logit_dev: max_dev,
        mean_abs_logit_dev: if count > 0 { sum_dev / count as f64 } else { 0.0 },
        argmax_flips: flips,
        flip_rate: if inputs.is_empty() {
            0.0
        } else {
            flips as f64 / inputs.len() as f64
        },
        saturations: sats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelSpec, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(Variant::DsOdeNet, 3);
        spec.base_channels = 4;
        spec.c_iters = 2;
        spec.input_shape = [3, 8, 8];
        spec
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .unwrap()
    }

    /// Scale a freshly initialized model into a comfortably in-range regime.
    fn tame_model(model: &mut Model) {
        for p in model.params_mut() {
            p.scale(0.5);
        }
    }

    #[test]
    fn zero_model_quantizes_to_zero() {
        let spec = small_spec();
        let model = Model::zeros(&spec).unwrap();
        let (qm, report) = quantize_model(&model, &QuantScheme::default()).unwrap();
        assert_eq!(report.total_saturated(), 0);
        let QStage::Ode(b) = &qm.blocks.stages[0] else {
            panic!("expected ODE stage")
        };
        match &b.steps[0].conv {
            QConvUnit::Separable { dw, pw } => {
                assert!(dw.weight.words().iter().all(|&w| w == 0));
                assert!(pw.weight.words().iter().all(|&w| w == 0));
            }
            QConvUnit::Standard(c) => assert!(c.weight.words().iter().all(|&w| w == 0)),
        }
    }

    #[test]
    fn exactly_representable_weight() {
        assert_eq!(Q4_16.quantize(0.5).unwrap(), 32_768);
    }

    #[test]
    fn quantize_roundtrip_within_half_lsb() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 42).unwrap();
        tame_model(&mut model);
        let scheme = QuantScheme {
            fold_batchnorm: false,
            ..QuantScheme::default()
        };
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let bound = 2f64.powi(-17) + 1e-15;
        let (QStage::Ode(qb), Stage::Ode(fb)) = (&qm.blocks.stages[0], &model.stages[0]) else {
            panic!("expected ODE stages")
        };
        if let (QConvUnit::Separable { dw: qdw, .. }, ConvUnit::Separable { dw, .. }) =
            (&qb.steps[0].conv, &fb.steps[0].conv)
        {
            for (&w, &orig) in qdw.weight.words().iter().zip(dw.weight.data()) {
                let deq = qdw.weight.fmt().dequantize(w).unwrap();
                assert!((deq - orig).abs() <= bound);
            }
        }
    }

    #[test]
    fn fold_preserves_float_logits() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 7).unwrap();
        tame_model(&mut model);
        // make running stats non-trivial so folding is exercised
        let xs: Vec<Tensor> = (0..4).map(|i| random_input(&spec.input_shape, 50 + i)).collect();
        let (_, cache) = model.forward_train(&xs).unwrap();
        model.apply_bn_updates(&cache);
        let folded = fold_model(&model);
        let input = random_input(&spec.input_shape, 99);
        let a = model.forward(&input).unwrap();
        let b = folded.forward(&input).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() <= 1e-9, "fold deviation {}", (x - y).abs());
        }
    }

    #[test]
    fn quantized_forward_is_bitwise_deterministic() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 3).unwrap();
        tame_model(&mut model);
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let input = random_input(&spec.input_shape, 5);
        let a = qm.quantized_forward(&input).unwrap();
        let b = qm.quantized_forward(&input).unwrap();
        assert_eq!(a.q_features.words(), b.q_features.words());
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn zero_weights_give_fc_bias_logits() {
        let spec = small_spec();
        let mut model = Model::zeros(&spec).unwrap();
        for (i, v) in model.fc.bias.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.25;
        }
        let (qm, _) = quantize_model(&model, &QuantScheme::default()).unwrap();
        let out = qm.quantized_forward(&Tensor::zeros(&spec.input_shape)).unwrap();
        for (i, &l) in out.logits.data().iter().enumerate() {
            assert!((l - i as f64 * 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn both_fold_modes_agree_with_float_reference() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 23).unwrap();
        tame_model(&mut model);
        let input = random_input(&spec.input_shape, 77);
        let float_logits = model.forward(&input).unwrap().logits;
        for fold in [true, false] {
            let scheme = QuantScheme {
                conv_fmt: FixedPointFormat::new(32, 24).unwrap(),
                other_fmt: FixedPointFormat::new(32, 24).unwrap(),
                fold_batchnorm: fold,
                per_layer: BTreeMap::new(),
            };
            let (qm, _) = quantize_model(&model, &scheme).unwrap();
            let out = qm.quantized_forward(&input).unwrap();
            for (a, b) in float_logits.data().iter().zip(out.logits.data()) {
                assert!((a - b).abs() < 1e-3, "fold={fold} dev={}", (a - b).abs());
            }
        }
    }

    #[test]
    fn high_precision_scheme_tracks_float_closely() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 11).unwrap();
        tame_model(&mut model);
        let scheme = QuantScheme {
            conv_fmt: FixedPointFormat::new(32, 26).unwrap(),
            other_fmt: FixedPointFormat::new(32, 26).unwrap(),
            ..QuantScheme::default()
        };
        let (qm, _) = quantize_model(&model, &scheme).unwrap();
        let inputs: Vec<Tensor> = (0..5).map(|i| random_input(&spec.input_shape, 200 + i)).collect();
        let report = quantization_error_report(&model, &qm, &inputs).unwrap();
        assert!(report.max_abs_logit_dev < 1e-4, "deviation {}", report.max_abs_logit_dev);
        assert_eq!(report.argmax_flips, 0);
    }

    #[test]
    fn monotone_precision_reduces_deviation() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 17).unwrap();
        tame_model(&mut model);
        let inputs: Vec<Tensor> = (0..4).map(|i| random_input(&spec.input_shape, 400 + i)).collect();
        let mut prev = f64::INFINITY;
        for frac in [8u8, 12, 16, 20] {
            let scheme = QuantScheme {
                conv_fmt: FixedPointFormat::new(frac + 6, frac).unwrap(),
                other_fmt: FixedPointFormat::new(frac + 8, frac).unwrap(),
                ..QuantScheme::default()
            };
            let (qm, _) = quantize_model(&model, &scheme).unwrap();
            let report = quantization_error_report(&model, &qm, &inputs).unwrap();
            assert!(
                report.max_abs_logit_dev <= prev + 1e-9,
                "frac {} dev {} prev {}",
                frac,
                report.max_abs_logit_dev,
                prev
            );
            prev = report.max_abs_logit_dev;
        }
    }

    #[test]
    fn saturation_accounting_matches_recount() {
        let spec = small_spec();
        let mut model = Model::init(&spec, 19).unwrap();
        // blow up the first ODE depthwise kernel so weight saturation occurs
        if let Stage::Ode(b) = &mut model.stages[0] {
            if let ConvUnit::Separable { dw, .. } = &mut b.steps[0].conv {
                dw.weight.data_mut()[0] = 100.0;
                dw.weight.data_mut()[1] = -100.0;
            }
        }
        let (qm, report) = quantize_model(&model, &QuantScheme::default()).unwrap();
        assert_eq!(report.total_saturated(), 2);
        let QStage::Ode(qb) = &qm.blocks.stages[0] else {
            panic!("expected ODE stage")
        };
        let QConvUnit::Separable { dw, .. } = &qb.steps[0].conv else {
            panic!("expected separable unit")
        };
        // independent recount over stored words pinned at the range bounds
        assert_eq!(dw.weight.count_at_bounds(), 2);
    }

    #[test]
    fn scheme_parsing() {
        let s = QuantScheme::parse("20/24").unwrap();
        assert_eq!(s.conv_fmt, Q4_16);
        assert_eq!(s.other_fmt, Q8_16);
        assert!(QuantScheme::parse("24").is_err());
    }
}
