//! Dense double-precision tensors and the handful of differentiable kernels
//! the lattice model is built from.
//!
//! Every kernel has an explicit backward counterpart; there is no general
//! autodiff graph. Layouts are row-major, feature maps are `[C, H, W]` and
//! convolution weights `[C_out, C_in, k_h, k_w]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, precondition_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(config_err!("tensor shape {:?} has a zero dimension", shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(config_err!(
                "tensor shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector tensor");
        Self { shape: vec![n], data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(config_err!("expected a [C, H, W] tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data.iter().copied().enumerate().find(|(_, v)| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One convolutional block of the backbone: conv (+bias), optionally ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub has_relu: bool,
}

impl ConvBlockSpec {
    /// A `k × k` block with "same"-style padding `k / 2` and ReLU.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel: (k, k), stride, padding: k / 2, has_relu: true }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("conv block channels must be positive: {:?}", self));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(config_err!("conv block kernel and stride must be positive: {:?}", self));
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |dim: usize, k: usize, name: &str| {
            let padded = dim + 2 * self.padding;
            if padded < k {
                Err(config_err!(
                    "{name} {dim} with padding {} is smaller than kernel {k}",
                    self.padding
                ))
            } else {
                Ok((padded - k) / self.stride + 1)
            }
        };
        Ok((out(h, self.kernel.0, "input height")?, out(w, self.kernel.1, "input width")?))
    }

    /// Multiply-accumulate count for one `[C_in, h, w]` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_dims(h, w)?;
        Ok((self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels * oh * ow) as u64)
    }
}

/// Prediction head: global average pooling followed by a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadSpec {
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(config_err!("head feature_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("head needs at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.num_classes, self.feature_dim]
    }

    /// FLOPs of the linear layer (2 × multiply-adds); pooling is free.
    pub fn flops(&self) -> u64 {
        2 * (self.feature_dim * self.num_classes) as u64
    }
}

fn check_conv_operands(input: &Tensor, spec: &ConvBlockSpec, weights: &Tensor, bias: &Tensor) -> Result<()> {
    spec.validate()?;
    let (c, _, _) = input.chw()?;
    if c != spec.in_channels {
        return Err(config_err!(
            "conv input channels: tensor has {c}, block expects {}",
            spec.in_channels
        ));
    }
    let ws = spec.weight_shape();
    if weights.shape() != ws {
        let names = ["out_channels", "in_channels", "kernel_h", "kernel_w"];
        let dim = weights
            .shape()
            .iter()
            .zip(ws.iter())
            .position(|(a, b)| a != b)
            .map(|i| names[i])
            .unwrap_or("rank");
        return Err(config_err!(
            "conv weight {dim} mismatch: weight shape {:?}, expected {:?}",
            weights.shape(),
            ws
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(config_err!(
            "conv bias out_channels mismatch: bias shape {:?}, expected [{}]",
            bias.shape(),
            spec.out_channels
        ));
    }
    Ok(())
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`:
/// the positions `o` with `0 <= o * stride + k - pad < dim`.
#[inline]
fn valid_range(out_len: usize, dim: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= dim - 1  <=>  o <= (dim - 1 + pad - k) / stride
    let hi = if dim + pad > k { ((dim - 1 + pad - k) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Cross-correlation plus bias, without the activation.
pub fn conv2d_linear(input: &Tensor, spec: &ConvBlockSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_conv_operands(input, spec, weights, bias)?;
    let (cin, h, w) = input.chw()?;
    let (oh, ow) = spec.output_dims(h, w)?;
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let cout = spec.out_channels;
    let x = input.data();
    let wt = weights.data();

    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Convolution block forward: cross-correlation, bias, then ReLU when
/// `spec.has_relu`.
pub fn conv2d(input: &Tensor, spec: &ConvBlockSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = conv2d_linear(input, spec, weights, bias)?;
    if spec.has_relu {
        relu_in_place(&mut out);
    }
    Ok(out)
}

pub fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Masks `grad` by `output > 0`, where `output` is the post-ReLU value.
pub fn relu_backward_in_place(output: &Tensor, grad: &mut Tensor) {
    grad.data_mut().iter_mut().zip(output.data()).for_each(|(g, &y)| {
        if y <= 0.0 {
            *g = 0.0
        }
    });
}

/// Gradients of [`conv2d_linear`].
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d_linear`] given the gradient with respect to its
/// (pre-activation) output.
pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvBlockSpec,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (cin, h, w) = input.chw()?;
    let (oh, ow) = spec.output_dims(h, w)?;
    if grad_out.shape() != [spec.out_channels, oh, ow] {
        return Err(config_err!(
            "conv grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [spec.out_channels, oh, ow]
        ));
    }
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding);
    let cout = spec.out_channels;
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();

    let mut gx = vec![0.0; cin * h * w];
    let mut gw = vec![0.0; cout * cin * kh * kw];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &go[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..kw {
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = wt[widx];
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xin[iy * w..(iy + 1) * w];
                        let gxrow = &mut gxin[iy * w..(iy + 1) * w];
                        for ox in x0..x1 {
                            let ix = ox * s + kx - p;
                            acc += grow[ox] * xrow[ix];
                            gxrow[ix] += wv * grow[ox];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(vec![cin, h, w], gx)?,
        weights: Tensor::new(spec.weight_shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

/// Spatial mean of each channel of a `[C, H, W]` map.
pub fn global_avg_pool(t: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = t.chw()?;
    let hw = h * w;
    Ok((0..c).map(|ch| t.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
}

/// Backward of [`global_avg_pool`] followed by scaling: each spatial cell of
/// channel `c` receives `grad[c] * scale / (H W)`.
pub fn global_avg_pool_backward(shape: (usize, usize, usize), grad: &[f64], scale: f64) -> Tensor {
    let (c, h, w) = shape;
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for (ch, &g) in grad.iter().enumerate().take(c) {
        let v = g * scale / hw as f64;
        out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = v);
    }
    out
}

/// `y = W x + b` for `W: [out, in]`.
pub fn linear(x: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match *weights.shape() {
        [r, c] => (r, c),
        _ => return Err(config_err!("linear weight must be rank 2, got {:?}", weights.shape())),
    };
    if cols != x.len() {
        return Err(config_err!("linear input length {} != weight columns {cols}", x.len()));
    }
    if bias.shape() != [rows] {
        return Err(config_err!("linear bias shape {:?}, expected [{rows}]", bias.shape()));
    }
    let w = weights.data();
    let y = (0..rows)
        .map(|r| bias.data()[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    Ok(Tensor::vector(y))
}

pub struct LinearGrads {
    pub input: Vec<f64>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &[f64], weights: &Tensor, grad_y: &[f64]) -> LinearGrads {
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let mut gx = vec![0.0; cols];
    let mut gw = vec![0.0; rows * cols];
    for r in 0..rows {
        let g = grad_y[r];
        for c in 0..cols {
            gx[c] += g * w[r * cols + c];
            gw[r * cols + c] = g * x[c];
        }
    }
    LinearGrads {
        input: gx,
        weights: Tensor { shape: vec![rows, cols], data: gw },
        bias: Tensor::vector(grad_y.to_vec()),
    }
}

/// Pools each feature map spatially, averages across the list, and applies
/// the head's affine map.
pub fn head_forward(features: &[&Tensor], head: &HeadSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let pooled = pooled_average(features)?;
    if pooled.len() != head.feature_dim {
        return Err(config_err!(
            "head feature_dim {} but features have {} channels",
            head.feature_dim,
            pooled.len()
        ));
    }
    if weights.shape() != head.weight_shape() {
        return Err(config_err!(
            "head weight shape {:?}, expected {:?}",
            weights.shape(),
            head.weight_shape()
        ));
    }
    linear(&pooled, weights, bias)
}

/// Mean over the list of the per-map spatial averages.
pub fn pooled_average(features: &[&Tensor]) -> Result<Vec<f64>> {
    let first = features.first().ok_or_else(|| precondition_err!("head needs at least one feature map"))?;
    let shape = first.shape();
    let mut acc = vec![0.0; first.chw()?.0];
    for f in features {
        if f.shape() != shape {
            return Err(precondition_err!(
                "head features differ in shape: {:?} vs {:?}",
                f.shape(),
                shape
            ));
        }
        for (a, p) in acc.iter_mut().zip(global_avg_pool(f)?) {
            *a += p;
        }
    }
    let n = features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Cross-entropy of `logits` against `label` and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(precondition_err!("label {label} out of range for {} classes", logits.len()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(logits.iter().map(|&z| libm::exp(z - m)).sum::<f64>());
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Momentum SGD with classic L2 weight decay folded into the gradient:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(precondition_err!("learning rate must be positive, got {}", config.lr));
        }
        Ok(Self { config, velocity: Vec::new() })
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(config_err!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(config_err!(
                    "parameter {i} shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
            if let Some((j, v)) = g.first_non_finite() {
                return Err(Error::NonFinite { what: alloc::format!("gradient of parameter {i}"), index: j, value: v });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + (gv + weight_decay * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One-shot form of [`Sgd::step`] with an explicit velocity buffer.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut Vec<Tensor>,
    config: SgdConfig,
) -> Result<()> {
    let mut sgd = Sgd::new(config)?;
    sgd.velocity = core::mem::take(velocity);
    let r = sgd.step(params, grads);
    *velocity = sgd.velocity;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv_identity_1x1() {
        let spec = ConvBlockSpec { in_channels: 1, out_channels: 1, kernel: (1, 1), stride: 1, padding: 0, has_relu: false };
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 - 4.0).collect()).unwrap();
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &spec, &w, &b).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let spec = ConvBlockSpec { in_channels: 1, out_channels: 1, kernel: (2, 2), stride: 1, padding: 0, has_relu: true };
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = conv2d(&x, &spec, &Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvBlockSpec::square(2, 3, 3, 2);
        let x = random(&[2, 7, 5], &mut rng);
        let b = Tensor::vector(vec![0.5, -0.25, 2.0]);
        let out = conv2d_linear(&x, &spec, &Tensor::zeros(&spec.weight_shape()), &b).unwrap();
        assert_eq!(out.shape(), &[3, 4, 3]);
        for c in 0..3 {
            assert!(out.data()[c * 12..(c + 1) * 12].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let spec = ConvBlockSpec::square(2, 3, 3, 1);
        let x = Tensor::zeros(&[1, 4, 4]);
        let err = conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), &Tensor::zeros(&[3])).unwrap_err();
        assert!(alloc::format!("{err}").contains("channels"));
        let x = Tensor::zeros(&[2, 4, 4]);
        let err = conv2d(&x, &spec, &Tensor::zeros(&[3, 2, 3, 2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(alloc::format!("{err}").contains("kernel_w"));
        let small = ConvBlockSpec { padding: 0, ..ConvBlockSpec::square(2, 3, 5, 1) };
        assert!(small.output_dims(4, 4).is_err());
    }

    /// Direct definition of cross-correlation with an explicit bounds test.
    fn conv_oracle(x: &Tensor, spec: &ConvBlockSpec, w: &Tensor, b: &Tensor) -> Tensor {
        let (cin, h, wd) = x.chw().unwrap();
        let (oh, ow) = spec.output_dims(h, wd).unwrap();
        let (kh, kw) = spec.kernel;
        Tensor::from_fn(&[spec.out_channels, oh, ow], |idx| {
            let (co, oy, ox) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
            let mut s = b.data()[co];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s, p, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 7, 7), (2, 2, 0, 6, 5), (5, 3, 2, 9, 4), (1, 1, 0, 3, 3)] {
            let spec = ConvBlockSpec { in_channels: 2, out_channels: 3, kernel: (k, k), stride: s, padding: p, has_relu: false };
            let x = random(&[2, h, w], &mut rng);
            let wt = random(&spec.weight_shape(), &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv2d_linear(&x, &spec, &wt, &b).unwrap();
            assert!(got.max_abs_diff(&conv_oracle(&x, &spec, &wt, &b)) < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let s = softmax(&[libm::log(1.0), libm::log(3.0)]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn linear_one_parameter_squared_error() {
        // L(w) = (w x - y)^2, dL/dw = 2 (w x - y) x
        let (w, x, y) = (0.7, 1.5, -2.0);
        let wt = Tensor::new(vec![1, 1], vec![w]).unwrap();
        let out = linear(&[x], &wt, &Tensor::zeros(&[1])).unwrap();
        let resid = out.data()[0] - y;
        let g = linear_backward(&[x], &wt, &[2.0 * resid]);
        assert!((g.weights.data()[0] - 2.0 * (w * x - y) * x).abs() < 1e-14);
    }

    #[test]
    fn head_identity_and_averaging() {
        let head = HeadSpec { feature_dim: 2, num_classes: 2 };
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap();
        let logits = head_forward(&[&f], &head, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(logits.data(), &[2.0, 2.0]);

        let a = Tensor::full(&[2, 2, 2], 2.0);
        let b = Tensor::full(&[2, 2, 2], 4.0);
        assert_eq!(pooled_average(&[&a, &b]).unwrap(), vec![3.0, 3.0]);
        assert!(head_forward(&[], &head, &eye, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn sgd_cases() {
        let cfg0 = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut v = Vec::new();
        sgd_step(&mut p, &[Tensor::zeros(&[2])], &mut v, cfg0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let mut p = vec![Tensor::vector(vec![1.0])];
        sgd_step(&mut p, &[Tensor::vector(vec![1.0])], &mut Vec::new(), cfg0).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);

        // v1 = g1, v2 = 0.9 g1 + g2; p2 = p0 - lr (v1 + v2)
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut sgd = Sgd::new(cfg).unwrap();
        let mut p = vec![Tensor::vector(vec![1.0])];
        sgd.step(&mut p, &[Tensor::vector(vec![2.0])]).unwrap();
        sgd.step(&mut p, &[Tensor::vector(vec![-1.0])]).unwrap();
        let v1 = 2.0;
        let v2 = 0.9 * v1 - 1.0;
        assert!((p[0].data()[0] - (1.0 - 0.1 * v1 - 0.1 * v2)).abs() < 1e-15);

        assert!(Sgd::new(SgdConfig { lr: 0.0, ..cfg }).is_err());
        let err = sgd.step(&mut p, &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn cross_entropy_uniform() {
        let (l, g) = cross_entropy(&[0.0; 4], 1).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-15);
        assert!((g[1] + 0.75).abs() < 1e-15);
        assert!(cross_entropy(&[0.0; 4], 4).is_err());
    }
}
