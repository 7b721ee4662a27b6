//! Primitive layers: forward passes and reverse-mode backward passes.
//!
//! Convolutions come in three kinds. A standard convolution mixes all input
//! channels with an `M x N x K x K` kernel. A depthwise convolution applies
//! one `K x K` kernel per channel (output channel `i` depends only on input
//! channel `i`). A pointwise convolution is a `1 x 1` channel-mixing step
//! with an `M x N` weight matrix. All convolutions zero-pad and use floor
//! arithmetic for the output extent, and accumulate in a fixed order
//! (channel-major, then row-major kernel scan) so results are bitwise
//! deterministic.
//!
//! Batch normalization has two faces: the inference form normalizes with
//! stored running statistics per sample, while the training form computes
//! batch statistics across a slice of samples and exposes the cached values
//! its backward pass needs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution kind; decides the weight layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Static description of one convolutional layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn standard(n: usize, m: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Self {
        ConvSpec {
            kind: ConvKind::Standard,
            in_channels: n,
            out_channels: m,
            kernel: k,
            stride,
            padding,
            bias,
        }
    }

    pub fn depthwise(n: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Depthwise,
            in_channels: n,
            out_channels: n,
            kernel: k,
            stride,
            padding,
            bias: false,
        }
    }

    pub fn pointwise(n: usize, m: usize) -> Self {
        ConvSpec {
            kind: ConvKind::Pointwise,
            in_channels: n,
            out_channels: m,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("ConvSpec.channels", "channel counts must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config("ConvSpec.kernel", "kernel must be a positive odd integer"));
        }
        if self.stride == 0 {
            return Err(Error::config("ConvSpec.stride", "stride must be positive"));
        }
        match self.kind {
            ConvKind::Depthwise if self.out_channels != self.in_channels => Err(Error::config(
                "ConvSpec.out_channels",
                "depthwise convolution requires out_channels == in_channels",
            )),
            ConvKind::Pointwise if self.kernel != 1 => Err(Error::config(
                "ConvSpec.kernel",
                "pointwise convolution requires kernel == 1",
            )),
            _ => Ok(()),
        }
    }

    /// Number of weight values: `N*M*K^2` standard, `N*K^2` depthwise, `N*M`
    /// pointwise.
    pub fn weight_len(&self) -> usize {
        match self.kind {
            ConvKind::Standard => self.in_channels * self.out_channels * self.kernel * self.kernel,
            ConvKind::Depthwise => self.in_channels * self.kernel * self.kernel,
            ConvKind::Pointwise => self.in_channels * self.out_channels,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            ConvKind::Standard => vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            ConvKind::Depthwise => vec![self.in_channels, self.kernel, self.kernel],
            ConvKind::Pointwise => vec![self.out_channels, self.in_channels],
        }
    }

    /// Total parameter count including the optional bias.
    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.bias { self.out_channels } else { 0 }
    }

    /// Output spatial extent under zero padding and floor arithmetic.
    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_extent(h, self.kernel, self.stride, self.padding)?;
        let ow = conv_extent(w, self.kernel, self.stride, self.padding)?;
        Ok((oh, ow))
    }
}

fn conv_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "convolution spatial extent",
            format!("input extent + 2*padding >= kernel {}", k),
            format!("{}", padded),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn check_input_channels(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(
            context,
            format!("{} input channels", expected),
            format!("{} input channels", got),
        ));
    }
    Ok(())
}

fn check_weight_len(context: &str, spec: &ConvSpec, weight: &Tensor) -> Result<()> {
    if weight.len() != spec.weight_len() {
        return Err(Error::shape(
            context,
            format!("{} weight values", spec.weight_len()),
            format!("{}", weight.len()),
        ));
    }
    Ok(())
}

/// Gradients produced by one layer's backward pass. `grad_params` mirrors the
/// layer's parameter arrays in declaration order (weight, then bias where
/// present; gamma then beta for batch normalization).
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub grad_input: Tensor,
    pub grad_params: Vec<Tensor>,
}

/// Standard cross-correlation with zero padding.
pub fn conv2d_forward(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    debug_assert_eq!(spec.kind, ConvKind::Standard);
    let (n, h, w) = input.dims3()?;
    check_input_channels("conv2d_forward", spec.in_channels, n)?;
    check_weight_len("conv2d_forward", spec, weight)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(
                "conv2d_forward bias",
                format!("{}", spec.out_channels),
                format!("{}", b.len()),
            ));
        }
    }
    let (oh, ow) = spec.out_spatial(h, w)?;
    let (m, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let id = input.data();
    let wd = weight.data();
    let mut out = vec![0.0f64; m * oh * ow];
    for mo in 0..m {
        let b = bias.map_or(0.0, |t| t.data()[mo]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ni in 0..n {
                    let wbase = ((mo * n + ni) * k) * k;
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
                            acc += id[irow + ix as usize] * wd[wbase + ky * k + kx];
                        }
                    }
                }
                out[(mo * oh + oy) * ow + ox] = acc + b;
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![m, oh, ow], out))
}

/// Depthwise convolution: output channel `i` depends only on input channel
/// `i`, weight shape `[N, K, K]`.
pub fn depthwise_forward(input: &Tensor, spec: &ConvSpec, weight: &Tensor) -> Result<Tensor> {
    debug_assert_eq!(spec.kind, ConvKind::Depthwise);
    let (n, h, w) = input.dims3()?;
    check_input_channels("depthwise_forward", spec.in_channels, n)?;
    check_weight_len("depthwise_forward", spec, weight)?;
    let (oh, ow) = spec.out_spatial(h, w)?;
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let id = input.data();
    let wd = weight.data();
    let mut out = vec![0.0f64; n * oh * ow];
    for c in 0..n {
        let wbase = c * k * k;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = (c * h + iy as usize) * w;
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += id[irow + ix as usize] * wd[wbase + ky * k + kx];
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![n, oh, ow], out))
}

/// Pointwise (1x1) convolution: at every spatial site the output channel
/// vector is `weights * input-channel-vector`, weight shape `[M, N]`.
pub fn pointwise_forward(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, h, w) = input.dims3()?;
    if weight.rank() != 2 || weight.shape()[1] != n {
        return Err(Error::shape(
            "pointwise_forward",
            format!("[M, {}] weight", n),
            format!("{:?}", weight.shape()),
        ));
    }
    let m = weight.shape()[0];
    let id = input.data();
    let wd = weight.data();
    let hw = h * w;
    let mut out = vec![0.0f64; m * hw];
    for mo in 0..m {
        let wrow = mo * n;
        for site in 0..hw {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += wd[wrow + ni] * id[ni * hw + site];
            }
            out[mo * hw + site] = acc;
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![m, h, w], out))
}

/// Dispatch a convolution by its spec kind. Depthwise and pointwise layers
/// have no bias of their own, but a folded normalization can attach one.
pub fn conv_forward(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    match spec.kind {
        ConvKind::Standard => conv2d_forward(input, spec, weight, bias),
        ConvKind::Depthwise => {
            let out = depthwise_forward(input, spec, weight)?;
            add_channel_bias(out, bias)
        }
        ConvKind::Pointwise => {
            let out = pointwise_forward(input, weight)?;
            add_channel_bias(out, bias)
        }
    }
}

fn add_channel_bias(mut out: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let Some(bias) = bias else { return Ok(out) };
    let (c, h, w) = out.dims3()?;
    if bias.len() != c {
        return Err(Error::shape(
            "conv_forward bias",
            format!("{}", c),
            format!("{}", bias.len()),
        ));
    }
    let hw = h * w;
    for ch in 0..c {
        let b = bias.data()[ch];
        for v in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut() {
            *v += b;
        }
    }
    Ok(out)
}

/// Backward pass of any convolution. The cached forward input must match the
/// spec; a mismatched cache is rejected. `grad_params` is `[grad_weight]` or
/// `[grad_weight, grad_bias]`.
pub fn conv_backward(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    grad_output: &Tensor,
) -> Result<LayerGradients> {
    let (n, h, w) = input.dims3()?;
    check_input_channels("conv_backward", spec.in_channels, n)?;
    check_weight_len("conv_backward", spec, weight)?;
    let (oh, ow) = spec.out_spatial(h, w)?;
    let (gm, goh, gow) = grad_output.dims3()?;
    if (gm, goh, gow) != (spec.out_channels, oh, ow) {
        return Err(Error::shape(
            "conv_backward grad_output",
            format!("[{}, {}, {}]", spec.out_channels, oh, ow),
            format!("[{}, {}, {}]", gm, goh, gow),
        ));
    }
    let (m, k, s, p) = (spec.out_channels, spec.kernel, spec.stride, spec.padding);
    let id = input.data();
    let wd = weight.data();
    let god = grad_output.data();
    let mut gi = vec![0.0f64; n * h * w];
    let mut gw = vec![0.0f64; weight.len()];
    let mut gb = if spec.bias { Some(vec![0.0f64; m]) } else { None };

    match spec.kind {
        ConvKind::Standard => {
            for mo in 0..m {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = god[(mo * oh + oy) * ow + ox];
                        if let Some(b) = gb.as_mut() {
                            b[mo] += g;
                        }
                        for ni in 0..n {
                            let wbase = ((mo * n + ni) * k) * k;
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
                                    let ii = irow + ix as usize;
                                    let wi = wbase + ky * k + kx;
                                    gw[wi] += g * id[ii];
                                    gi[ii] += g * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        ConvKind::Depthwise => {
            for c in 0..n {
                let wbase = c * k * k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = god[(c * oh + oy) * ow + ox];
                        if let Some(b) = gb.as_mut() {
                            b[c] += g;
                        }
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = (c * h + iy as usize) * w;
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = irow + ix as usize;
                                let wi = wbase + ky * k + kx;
                                gw[wi] += g * id[ii];
                                gi[ii] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
        ConvKind::Pointwise => {
            let hw = h * w;
            for mo in 0..m {
                let wrow = mo * n;
                for site in 0..hw {
                    let g = god[mo * hw + site];
                    if let Some(b) = gb.as_mut() {
                        b[mo] += g;
                    }
                    for ni in 0..n {
                        gw[wrow + ni] += g * id[ni * hw + site];
                        gi[ni * hw + site] += g * wd[wrow + ni];
                    }
                }
            }
        }
    }

    let mut grad_params = vec![Tensor::from_vec_unchecked(spec.weight_shape(), gw)];
    if let Some(b) = gb {
        grad_params.push(Tensor::from_vec_unchecked(vec![m], b));
    }
    Ok(LayerGradients {
        grad_input: Tensor::from_vec_unchecked(vec![n, h, w], gi),
        grad_params,
    })
}

/// Per-channel affine normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::config(
                "BatchNormParams",
                "per-channel arrays must have equal length",
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("BatchNormParams.eps", "eps must be positive"));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::config(
                "BatchNormParams.running_var",
                "variance must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Inference-mode batch normalization with stored running statistics.
pub fn batchnorm_forward(input: &Tensor, params: &BatchNormParams) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    check_input_channels("batchnorm_forward", params.channels(), c)?;
    let hw = h * w;
    let mut out = input.data().to_vec();
    for ch in 0..c {
        let inv = 1.0 / (params.running_var.data()[ch] + params.eps).sqrt();
        let g = params.gamma.data()[ch];
        let b = params.beta.data()[ch];
        let m = params.running_mean.data()[ch];
        for v in out[ch * hw..(ch + 1) * hw].iter_mut() {
            *v = g * (*v - m) * inv + b;
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![c, h, w], out))
}

/// Cached state of a training-mode batch normalization call.
#[derive(Debug, Clone)]
pub struct BnTrainCache {
    /// Normalized activations, one tensor per sample.
    pub xhat: Vec<Tensor>,
    /// Per-channel `1 / sqrt(var + eps)`.
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean (biased statistics used for normalization).
    pub batch_mean: Vec<f64>,
    /// Per-channel unbiased variance for the running-statistics update.
    pub batch_var_unbiased: Vec<f64>,
}

/// Training-mode batch normalization over a batch of feature maps. Statistics
/// are computed per channel across the whole batch and all spatial sites.
pub fn batchnorm_train_forward(
    inputs: &[Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Vec<Tensor>, BnTrainCache)> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "batchnorm_train_forward requires at least one sample".to_string(),
        ));
    }
    let (c, h, w) = inputs[0].dims3()?;
    check_input_channels("batchnorm_train_forward", gamma.len(), c)?;
    let hw = h * w;
    let count = inputs.len() * hw;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for x in inputs {
        if x.shape() != inputs[0].shape() {
            return Err(Error::shape(
                "batchnorm_train_forward",
                format!("{:?}", inputs[0].shape()),
                format!("{:?}", x.shape()),
            ));
        }
        let d = x.data();
        for ch in 0..c {
            for &v in &d[ch * hw..(ch + 1) * hw] {
                mean[ch] += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    for x in inputs {
        let d = x.data();
        for ch in 0..c {
            for &v in &d[ch * hw..(ch + 1) * hw] {
                let dm = v - mean[ch];
                var[ch] += dm * dm;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let unbiased: Vec<f64> = if count > 1 {
        var.iter().map(|&v| v * count as f64 / (count - 1) as f64).collect()
    } else {
        var.clone()
    };

    let mut xhat = Vec::with_capacity(inputs.len());
    let mut outs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let d = x.data();
        let mut xh = vec![0.0f64; d.len()];
        let mut y = vec![0.0f64; d.len()];
        for ch in 0..c {
            let g = gamma.data()[ch];
            let b = beta.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                let n = (d[i] - mean[ch]) * inv_std[ch];
                xh[i] = n;
                y[i] = g * n + b;
            }
        }
        xhat.push(Tensor::from_vec_unchecked(vec![c, h, w], xh));
        outs.push(Tensor::from_vec_unchecked(vec![c, h, w], y));
    }
    Ok((
        outs,
        BnTrainCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    ))
}

/// Backward pass of training-mode batch normalization. Returns per-sample
/// input gradients plus the gamma and beta gradients.
pub fn batchnorm_train_backward(
    cache: &BnTrainCache,
    gamma: &Tensor,
    grad_outputs: &[Tensor],
) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
    if grad_outputs.len() != cache.xhat.len() {
        return Err(Error::shape(
            "batchnorm_train_backward",
            format!("{} samples", cache.xhat.len()),
            format!("{} samples", grad_outputs.len()),
        ));
    }
    let (c, h, w) = cache.xhat[0].dims3()?;
    let hw = h * w;
    let count = (grad_outputs.len() * hw) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    // Sums of dxhat and dxhat * xhat per channel, where dxhat = g * gamma.
    let mut sum_dxhat = vec![0.0f64; c];
    let mut sum_dxhat_xhat = vec![0.0f64; c];
    for (go, xh) in grad_outputs.iter().zip(cache.xhat.iter()) {
        if go.shape() != xh.shape() {
            return Err(Error::shape(
                "batchnorm_train_backward grad_output",
                format!("{:?}", xh.shape()),
                format!("{:?}", go.shape()),
            ));
        }
        let god = go.data();
        let xhd = xh.data();
        for ch in 0..c {
            let g = gamma.data()[ch];
            for i in ch * hw..(ch + 1) * hw {
                dgamma[ch] += god[i] * xhd[i];
                dbeta[ch] += god[i];
                sum_dxhat[ch] += god[i] * g;
                sum_dxhat_xhat[ch] += god[i] * g * xhd[i];
            }
        }
    }
    let mut grads_in = Vec::with_capacity(grad_outputs.len());
    for (go, xh) in grad_outputs.iter().zip(cache.xhat.iter()) {
        let god = go.data();
        let xhd = xh.data();
        let mut gi = vec![0.0f64; god.len()];
        for ch in 0..c {
            let g = gamma.data()[ch];
            let inv = cache.inv_std[ch];
            for i in ch * hw..(ch + 1) * hw {
                let dxhat = god[i] * g;
                gi[i] = inv / count * (count * dxhat - sum_dxhat[ch] - xhd[i] * sum_dxhat_xhat[ch]);
            }
        }
        grads_in.push(Tensor::from_vec_unchecked(vec![c, h, w], gi));
    }
    Ok((
        grads_in,
        Tensor::from_vec_unchecked(vec![c], dgamma),
        Tensor::from_vec_unchecked(vec![c], dbeta),
    ))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Backward pass of ReLU given the cached forward input.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec_unchecked(input.shape().to_vec(), data))
}

/// Fully connected affine map over a flat vector.
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::shape("fc_forward", "rank-1 input", format!("{:?}", input.shape())));
    }
    let n = input.len();
    if weight.rank() != 2 || weight.shape()[1] != n || bias.len() != weight.shape()[0] {
        return Err(Error::shape(
            "fc_forward",
            format!("[M, {}] weight with matching bias", n),
            format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
        ));
    }
    let m = weight.shape()[0];
    let wd = weight.data();
    let id = input.data();
    let mut out = bias.data().to_vec();
    for mo in 0..m {
        let row = mo * n;
        let mut acc = 0.0;
        for ni in 0..n {
            acc += wd[row + ni] * id[ni];
        }
        out[mo] += acc;
    }
    Ok(Tensor::from_vec_unchecked(vec![m], out))
}

/// Backward pass of the fully connected layer. `grad_params` is
/// `[grad_weight, grad_bias]`.
pub fn fc_backward(input: &Tensor, weight: &Tensor, grad_output: &Tensor) -> Result<LayerGradients> {
    let n = input.len();
    let m = weight.shape()[0];
    if weight.rank() != 2 || weight.shape()[1] != n || grad_output.len() != m {
        return Err(Error::shape(
            "fc_backward",
            format!("[{}, {}] weight, [{}] grad_output", m, n, m),
            format!("weight {:?}, grad_output {:?}", weight.shape(), grad_output.shape()),
        ));
    }
    let wd = weight.data();
    let id = input.data();
    let god = grad_output.data();
    let mut gi = vec![0.0f64; n];
    let mut gw = vec![0.0f64; m * n];
    for mo in 0..m {
        let g = god[mo];
        let row = mo * n;
        for ni in 0..n {
            gw[row + ni] = g * id[ni];
            gi[ni] += g * wd[row + ni];
        }
    }
    Ok(LayerGradients {
        grad_input: Tensor::from_vec_unchecked(vec![n], gi),
        grad_params: vec![
            Tensor::from_vec_unchecked(vec![m, n], gw),
            Tensor::from_vec_unchecked(vec![m], god.to_vec()),
        ],
    })
}

/// Append one constant channel carrying the current integration time.
pub fn add_time(input: &Tensor, t: f64) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite {
            context: "add_time".to_string(),
            index: 0,
            value: t,
        });
    }
    let (c, h, w) = input.dims3()?;
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend_from_slice(input.data());
    data.extend(std::iter::repeat(t).take(h * w));
    Ok(Tensor::from_vec_unchecked(vec![c + 1, h, w], data))
}

/// Backward pass of AddTime: drop the gradient of the constant time channel.
pub fn add_time_backward(grad_output: &Tensor) -> Result<Tensor> {
    let (c, h, w) = grad_output.dims3()?;
    if c < 2 {
        return Err(Error::shape(
            "add_time_backward",
            "at least 2 channels",
            format!("{}", c),
        ));
    }
    Ok(Tensor::from_vec_unchecked(
        vec![c - 1, h, w],
        grad_output.data()[..(c - 1) * h * w].to_vec(),
    ))
}

/// Global average pooling, `(C, H, W) -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let hw = (h * w) as f64;
    let d = input.data();
    let out = (0..c)
        .map(|ch| d[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
        .collect();
    Ok(Tensor::from_vec_unchecked(vec![c], out))
}

/// Backward pass of global average pooling.
pub fn global_avg_pool_backward(dims: (usize, usize, usize), grad_output: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims;
    if grad_output.len() != c {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("[{}]", c),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let hw = h * w;
    let scale = 1.0 / hw as f64;
    let mut data = vec![0.0f64; c * hw];
    for ch in 0..c {
        let g = grad_output.data()[ch] * scale;
        for v in data[ch * hw..(ch + 1) * hw].iter_mut() {
            *v = g;
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![c, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Brute-force standard convolution used as an independent oracle.
    fn naive_conv(input: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let (n, h, w) = input.dims3().unwrap();
        let (oh, ow) = spec.out_spatial(h, w).unwrap();
        let m = spec.out_channels;
        let k = spec.kernel;
        let mut out = Tensor::zeros(&[m, oh, ow]);
        for mo in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[mo]);
                    for ni in 0..n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let x = input.at3(ni, iy as usize, ix as usize);
                                    let wv = weight.data()[((mo * n + ni) * k + ky) * k + kx];
                                    acc += x * wv;
                                }
                            }
                        }
                    }
                    out.data_mut()[(mo * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = ConvSpec::standard(1, 1, 1, 1, 0, false);
        let input = Tensor::from_vec(vec![1, 1, 1], vec![5.0]).unwrap();
        let weight = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_forward(&input, &spec, &weight, None).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv_full_overlap_sum() {
        let spec = ConvSpec::standard(1, 1, 3, 1, 1, false);
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let weight = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&input, &spec, &weight, None).unwrap();
        // center output element sees all nine inputs
        assert_eq!(out.at3(0, 1, 1), 9.0);
        // corner sees four
        assert_eq!(out.at3(0, 0, 0), 4.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let spec = ConvSpec::standard(3, 4, 3, stride, pad, true);
            let input = random_tensor(&mut rng, &[3, 8, 8]);
            let weight = random_tensor(&mut rng, &[4, 3, 3, 3]);
            let bias = random_tensor(&mut rng, &[4]);
            let got = conv2d_forward(&input, &spec, &weight, Some(&bias)).unwrap();
            let want = naive_conv(&input, &spec, &weight, Some(&bias));
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let spec = ConvSpec::depthwise(2, 3, 1, 1);
        let mut weight = Tensor::zeros(&[2, 3, 3]);
        weight.data_mut()[4] = 1.0; // channel 0 center
        weight.data_mut()[9 + 4] = 1.0; // channel 1 center
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, &[2, 5, 5]);
        let out = depthwise_forward(&input, &spec, &weight).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn depthwise_channel_isolation() {
        let spec = ConvSpec::depthwise(2, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut input = random_tensor(&mut rng, &[2, 4, 4]);
        for v in input.data_mut()[16..].iter_mut() {
            *v = 0.0; // zero channel 1
        }
        let weight = random_tensor(&mut rng, &[2, 3, 3]);
        let out = depthwise_forward(&input, &spec, &weight).unwrap();
        assert!(out.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_matches_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::depthwise(3, 3, 1, 1);
        let input = random_tensor(&mut rng, &[3, 6, 6]);
        let weight = random_tensor(&mut rng, &[3, 3, 3]);
        let got = depthwise_forward(&input, &spec, &weight).unwrap();
        // oracle: run each channel through a 1-channel standard convolution
        for c in 0..3 {
            let ch_spec = ConvSpec::standard(1, 1, 3, 1, 1, false);
            let ch_in = Tensor::from_vec(vec![1, 6, 6], input.data()[c * 36..(c + 1) * 36].to_vec()).unwrap();
            let ch_w = Tensor::from_vec(vec![1, 1, 3, 3], weight.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let want = naive_conv(&ch_in, &ch_spec, &ch_w, None);
            for (a, b) in got.data()[c * 36..(c + 1) * 36].iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_tensor(&mut rng, &[2, 3, 3]);
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = pointwise_forward(&input, &eye).unwrap();
        assert_eq!(out.data(), input.data());

        let sum_w = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let summed = pointwise_forward(&input, &sum_w).unwrap();
        for site in 0..9 {
            let want = input.data()[site] + input.data()[9 + site];
            assert!((summed.data()[site] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn pointwise_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, &[4, 5, 5]);
        let weight = random_tensor(&mut rng, &[3, 4]);
        let got = pointwise_forward(&input, &weight).unwrap();
        for site in 0..25 {
            for mo in 0..3 {
                let mut want = 0.0;
                for ni in 0..4 {
                    want += weight.data()[mo * 4 + ni] * input.data()[ni * 25 + site];
                }
                assert!((got.data()[mo * 25 + site] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dsc_decomposition_equals_standard_for_separable_kernel() {
        // standard kernel w[m,n,ky,kx] = pw[m,n] * dw[n,ky,kx] factors exactly
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, m, k) = (3usize, 4usize, 3usize);
        let dw = random_tensor(&mut rng, &[n, k, k]);
        let pw = random_tensor(&mut rng, &[m, n]);
        let mut std_w = Tensor::zeros(&[m, n, k, k]);
        for mo in 0..m {
            for ni in 0..n {
                for i in 0..k * k {
                    std_w.data_mut()[(mo * n + ni) * k * k + i] =
                        pw.data()[mo * n + ni] * dw.data()[ni * k * k + i];
                }
            }
        }
        let input = random_tensor(&mut rng, &[n, 6, 6]);
        let std_spec = ConvSpec::standard(n, m, k, 1, 1, false);
        let via_standard = conv2d_forward(&input, &std_spec, &std_w, None).unwrap();
        let dw_spec = ConvSpec::depthwise(n, k, 1, 1);
        let mid = depthwise_forward(&input, &dw_spec, &dw).unwrap();
        let via_dsc = pointwise_forward(&mid, &pw).unwrap();
        for (a, b) in via_standard.data().iter().zip(via_dsc.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn batchnorm_identity_params() {
        let params = BatchNormParams {
            gamma: Tensor::filled(&[2], 1.0),
            beta: Tensor::zeros(&[2]),
            running_mean: Tensor::zeros(&[2]),
            running_var: Tensor::filled(&[2], 1.0),
            eps: 0.0, // permitted in tests only
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_tensor(&mut rng, &[2, 3, 3]);
        let out = batchnorm_forward(&input, &params).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let params = BatchNormParams {
            gamma: Tensor::zeros(&[2]),
            beta: Tensor::filled(&[2], 0.7),
            running_mean: Tensor::zeros(&[2]),
            running_var: Tensor::filled(&[2], 1.0),
            eps: 1e-5,
        };
        let input = Tensor::filled(&[2, 2, 2], 3.0);
        let out = batchnorm_forward(&input, &params).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn batchnorm_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = BatchNormParams {
            gamma: random_tensor(&mut rng, &[3]),
            beta: random_tensor(&mut rng, &[3]),
            running_mean: random_tensor(&mut rng, &[3]),
            running_var: random_tensor(&mut rng, &[3]).map(|v| v.abs() + 0.1),
            eps: 1e-5,
        };
        let input = random_tensor(&mut rng, &[3, 4, 4]);
        let out = batchnorm_forward(&input, &params).unwrap();
        for ch in 0..3 {
            for i in 0..16 {
                let x = input.data()[ch * 16 + i];
                let want = params.gamma.data()[ch] * (x - params.running_mean.data()[ch])
                    / (params.running_var.data()[ch] + params.eps).sqrt()
                    + params.beta.data()[ch];
                assert!((out.data()[ch * 16 + i] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relu_and_fc_basics() {
        let t = Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).data(), &[0.0, 2.0]);

        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let out = fc_forward(&t, &eye, &bias).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn fc_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = random_tensor(&mut rng, &[5]);
        let weight = random_tensor(&mut rng, &[3, 5]);
        let bias = random_tensor(&mut rng, &[3]);
        let got = fc_forward(&input, &weight, &bias).unwrap();
        for mo in 0..3 {
            let mut want = bias.data()[mo];
            for ni in 0..5 {
                want += weight.data()[mo * 5 + ni] * input.data()[ni];
            }
            assert!((got.data()[mo] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn add_time_appends_constant_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_tensor(&mut rng, &[64, 8, 8]);
        let out = add_time(&input, 0.3).unwrap();
        assert_eq!(out.shape(), &[65, 8, 8]);
        assert_eq!(&out.data()[..64 * 64], input.data());
        assert!(out.data()[64 * 64..].iter().all(|&v| v == 0.3));

        let zero = add_time(&input, 0.0).unwrap();
        assert!(zero.data()[64 * 64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_backward_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let input = random_tensor(&mut rng, &[4]);
        let weight = random_tensor(&mut rng, &[3, 4]);
        let go = random_tensor(&mut rng, &[3]);
        let grads = fc_backward(&input, &weight, &go).unwrap();
        for mo in 0..3 {
            for ni in 0..4 {
                let want = go.data()[mo] * input.data()[ni];
                assert!((grads.grad_params[0].data()[mo * 4 + ni] - want).abs() <= 1e-15);
            }
        }
        assert_eq!(grads.grad_params[1].data(), go.data());
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let spec = ConvSpec::standard(2, 3, 3, 1, 1, true);
        let input = random_tensor(&mut rng, &[2, 4, 4]);
        let weight = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let go = Tensor::zeros(&[3, 4, 4]);
        let grads = conv_backward(&input, &spec, &weight, &go).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_params.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let spec = ConvSpec::standard(3, 4, 3, 1, 1, false);
        let input = random_tensor(&mut rng, &[3, 8, 8]);
        let weight = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let a = conv2d_forward(&input, &spec, &weight, None).unwrap();
        let b = conv2d_forward(&input, &spec, &weight, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let spec = ConvSpec::standard(3, 4, 3, 1, 1, false);
        let input = Tensor::zeros(&[2, 8, 8]);
        let weight = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d_forward(&input, &spec, &weight, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input channels"), "message was: {msg}");
    }
}
