//! Channel-last layers built from graph primitives. Every convolution is a
//! patch gather followed by a matmul.

use super::params::{IndexKey, Init, ParamBuilder, ParamId, Session, StatId};
use crate::error::TensorError;
use crate::tensor::{Real, Var, GATHER_ZERO};

pub const INIT_STD: f64 = 0.02;

/// Convolution weights: uniform in `±1/√fan_in`.
pub fn fan_in_uniform(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f64).sqrt())
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Dense map over the trailing axis: `x · W + b`, `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::with_init(pb, fan_in, fan_out, bias, Init::TruncNormal(INIT_STD))
    }

    pub fn with_init<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = pb.param("weight", &[fan_in, fan_out], init);
        let bias = bias.then(|| pb.param("bias", &[fan_out], Init::Zeros));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let shape = s.g.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(shape_err("linear", format!("input {shape:?}, expected last dim {}", self.fan_in)));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = s.g.reshape(x, &[rows, self.fan_in])?;
        let w = s.p(self.weight);
        let mut y = s.g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = s.p(b);
            y = s.g.add(y, b)?;
        }
        let mut out = shape;
        *out.last_mut().unwrap() = self.fan_out;
        s.g.reshape(y, &out)
    }
}

/// Patch-gather index for a 2D NHWC convolution: output rows are
/// `(n, oy, ox)`, columns are `(ky, kx, c)`.
pub fn im2col2d_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<u32>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(n * ho * wo * k * k * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        let base = if inside { ((b * h + iy as usize) * w + ix as usize) * c } else { 0 };
                        for ch in 0..c {
                            idx.push(if inside { (base + ch) as u32 } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
    }
    (idx, ho, wo)
}

/// Patch-gather index for a 3D channel-last convolution over `[n, d, h, w, c]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col3d_index(
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<u32>, [usize; 3]) {
    let out = |x: usize| (x + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out(d), out(h), out(w));
    let mut idx = Vec::with_capacity(n * od * oh * ow * k * k * k * c);
    let coord = |o: usize, kk: usize| (o * stride + kk) as isize - pad as isize;
    for b in 0..n {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    for kz in 0..k {
                        let iz = coord(z, kz);
                        for ky in 0..k {
                            let iy = coord(y, ky);
                            for kx in 0..k {
                                let ix = coord(x, kx);
                                let inside = iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < d
                                    && (iy as usize) < h
                                    && (ix as usize) < w;
                                let base = if inside {
                                    (((b * d + iz as usize) * h + iy as usize) * w + ix as usize) * c
                                } else {
                                    0
                                };
                                for ch in 0..c {
                                    idx.push(if inside { (base + ch) as u32 } else { GATHER_ZERO });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (idx, [od, oh, ow])
}

/// General 2D convolution on `[n, h, w, c_in]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub proj: Linear,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            kernel,
            stride,
            pad,
            proj: Linear::with_init(pb, kernel * kernel * c_in, c_out, true, fan_in_uniform(kernel * kernel * c_in)),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        Linear::param_count(kernel * kernel * c_in, c_out, true)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let sh = s.g.shape(x).to_vec();
        let [n, h, w, c] = sh[..] else {
            return Err(shape_err("conv2d", format!("expected rank 4, got {sh:?}")));
        };
        let (k, st, p) = (self.kernel, self.stride, self.pad);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {sh:?}")));
        }
        let (ho, wo) = ((h + 2 * p - k) / st + 1, (w + 2 * p - k) / st + 1);
        let key = IndexKey::Im2Col2d { n, h, w, c, k, stride: st, pad: p };
        let idx = s.index(key, || im2col2d_index(n, h, w, c, k, st, p).0);
        let cols = s.g.gather(x, idx, &[n * ho * wo, k * k * c])?;
        let y = self.proj.forward(s, cols)?;
        s.g.reshape(y, &[n, ho, wo, self.proj.fan_out])
    }
}

/// Per-channel 2D convolution on `[n, h, w, c]` with stride 1 and
/// shape-preserving padding (odd kernel).
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub kernel: usize,
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, kernel: usize) -> Self {
        DepthwiseConv2d {
            kernel,
            channels,
            weight: pb.param("weight", &[kernel * kernel, channels], fan_in_uniform(kernel * kernel)),
            bias: pb.param("bias", &[channels], Init::Zeros),
        }
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        kernel * kernel * channels + channels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let sh = s.g.shape(x).to_vec();
        let [n, h, w, c] = sh[..] else {
            return Err(shape_err("dwconv2d", format!("expected rank 4, got {sh:?}")));
        };
        if c != self.channels {
            return Err(shape_err("dwconv2d", format!("{c} channels, expected {}", self.channels)));
        }
        let k = self.kernel;
        let pad = k / 2;
        let key = IndexKey::Im2Col2d { n, h, w, c, k, stride: 1, pad };
        let idx = s.index(key, || im2col2d_index(n, h, w, c, k, 1, pad).0);
        let cols = s.g.gather(x, idx, &[n * h * w, k * k, c])?;
        let wv = s.p(self.weight);
        let prod = s.g.mul(cols, wv)?;
        let summed = s.g.sum_axis(prod, 1)?;
        let bv = s.p(self.bias);
        let y = s.g.reshape(summed, &[n * h * w, c])?;
        let y = s.g.add(y, bv)?;
        s.g.reshape(y, &[n, h, w, c])
    }
}

/// 3D convolution on `[n, d, h, w, c_in]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub proj: Linear,
}

impl Conv3d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv3d {
            kernel,
            stride,
            pad,
            proj: Linear::with_init(pb, kernel.pow(3) * c_in, c_out, bias, fan_in_uniform(kernel.pow(3) * c_in)),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize, bias: bool) -> usize {
        Linear::param_count(kernel * kernel * kernel * c_in, c_out, bias)
    }

    pub fn out_extent(&self, x: usize) -> Option<usize> {
        (x + 2 * self.pad >= self.kernel).then(|| (x + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let sh = s.g.shape(x).to_vec();
        let [n, d, h, w, c] = sh[..] else {
            return Err(shape_err("conv3d", format!("expected rank 5, got {sh:?}")));
        };
        let (k, st, p) = (self.kernel, self.stride, self.pad);
        let (Some(od), Some(oh), Some(ow)) = (self.out_extent(d), self.out_extent(h), self.out_extent(w)) else {
            return Err(shape_err("conv3d", format!("kernel {k} larger than padded input {sh:?}")));
        };
        let key = IndexKey::Im2Col3d { n, d, h, w, c, k, stride: st, pad: p };
        let idx = s.index(key, || im2col3d_index(n, d, h, w, c, k, st, p).0);
        let cols = s.g.gather(x, idx, &[n * od * oh * ow, k * k * k * c])?;
        let y = self.proj.forward(s, cols)?;
        s.g.reshape(y, &[n, od, oh, ow, self.proj.fan_out])
    }
}

/// Transposed 3D convolution with kernel 2, stride 2 (non-overlapping):
/// every input voxel expands into a 2×2×2 output block.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub c_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose3d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, bias: bool) -> Self {
        ConvTranspose3d {
            c_out,
            weight: pb.param("weight", &[c_in, 8 * c_out], fan_in_uniform(c_in)),
            bias: bias.then(|| pb.param("bias", &[c_out], Init::Zeros)),
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, bias: bool) -> usize {
        c_in * 8 * c_out + if bias { c_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let sh = s.g.shape(x).to_vec();
        let [n, d, h, w, c] = sh[..] else {
            return Err(shape_err("conv_transpose3d", format!("expected rank 5, got {sh:?}")));
        };
        let co = self.c_out;
        let flat = s.g.reshape(x, &[n * d * h * w, c])?;
        let wv = s.p(self.weight);
        let blocks = s.g.matmul(flat, wv)?;
        // blocks: [n, d, h, w, 2, 2, 2, co] -> [n, d, 2, h, 2, w, 2, co]
        let key = IndexKey::Unpatch3d { n, d, h, w, c: co };
        let idx = s.index(key, || {
            crate::tensor::permute_index(&[n, d, h, w, 2, 2, 2, co], &[0, 1, 4, 2, 5, 3, 6, 7]).unwrap()
        });
        let mut y = s.g.gather(blocks, idx, &[n * 2 * d * 2 * h * 2 * w, co])?;
        if let Some(b) = self.bias {
            let bv = s.p(b);
            y = s.g.add(y, bv)?;
        }
        s.g.reshape(y, &[n, 2 * d, 2 * h, 2 * w, co])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stat: StatId,
}

impl BatchNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        BatchNorm {
            gamma: pb.param("gamma", &[channels], Init::Ones),
            beta: pb.param("beta", &[channels], Init::Zeros),
            stat: pb.running_stat("running", channels),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        s.batch_norm(x, self.gamma, self.beta, self.stat)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        LayerNorm {
            gamma: pb.param("gamma", &[channels], Init::Ones),
            beta: pb.param("beta", &[channels], Init::Zeros),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.g.layer_norm(x, g, b, T::of(super::params::NORM_EPS))
    }
}

/// Two pointwise maps with GELU between: `C -> ratio·C -> C`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, ratio: usize) -> Self {
        Mlp {
            fc1: Linear::new(&mut pb.sub("fc1"), channels, ratio * channels, true),
            fc2: Linear::new(&mut pb.sub("fc2"), ratio * channels, channels, true),
        }
    }

    pub fn param_count(channels: usize, ratio: usize) -> usize {
        Linear::param_count(channels, ratio * channels, true) + Linear::param_count(ratio * channels, channels, true)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.gelu(h)?;
        self.fc2.forward(s, h)
    }
}
