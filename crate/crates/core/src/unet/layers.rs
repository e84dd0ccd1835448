//! Residual, attention and resampling blocks shared by the encoders and the
//! decoder.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{self as nn, Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};

use crate::error::Result;

const NORM_EPS: f64 = 1e-5;

/// Group count for a group norm over `channels`: at most 32 groups, at
/// least two channels per group where possible.
pub fn norm_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

pub fn group_norm(channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    Ok(nn::group_norm(norm_groups(channels), channels, NORM_EPS, vb)?)
}

fn conv_cfg(padding: usize, stride: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    }
}

pub fn conv3x3(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(nn::conv2d(in_ch, out_ch, 3, conv_cfg(1, 1), vb)?)
}

pub fn conv1x1(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(nn::conv2d(in_ch, out_ch, 1, conv_cfg(0, 1), vb)?)
}

/// 3x3 convolution whose weight and bias start at zero.
pub fn zero_conv3x3(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Conv2d> {
    let weight = vb.get_with_hints((out_ch, in_ch, 3, 3), "weight", Init::Const(0.0))?;
    let bias = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(weight, Some(bias), conv_cfg(1, 1)))
}

fn zero_conv1x1(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Conv2d> {
    let weight = vb.get_with_hints((out_ch, in_ch, 1, 1), "weight", Init::Const(0.0))?;
    let bias = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(weight, Some(bias), conv_cfg(0, 1)))
}

/// Sinusoidal features of the step index, `[B, dim]`.
pub fn timestep_features(steps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).cos(), (t * f).sin())).unzip();
        values.extend(cos);
        values.extend(sin);
        values.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(values, (steps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: nn::linear(dim, out_dim, vb.pp("fc1"))?,
            fc2: nn::linear(out_dim, out_dim, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, steps: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let feats = timestep_features(steps, self.dim, dtype, device)?;
        let h = nn::ops::silu(&self.fc1.forward(&feats)?)?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// Pre-activation residual block with the time embedding added between
/// its two convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(in_ch: usize, out_ch: usize, temb_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(in_ch, vb.pp("norm1"))?,
            conv1: conv3x3(in_ch, out_ch, vb.pp("conv1"))?,
            emb: nn::linear(temb_dim, out_ch, vb.pp("emb"))?,
            norm2: group_norm(out_ch, vb.pp("norm2"))?,
            conv2: zero_conv3x3(out_ch, out_ch, vb.pp("conv2"))?,
            skip: if in_ch == out_ch {
                None
            } else {
                Some(conv1x1(in_ch, out_ch, vb.pp("skip"))?)
            },
        })
    }

    pub fn forward(&self, xs: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&nn::ops::silu(&self.norm1.forward(xs)?)?)?;
        let e = self.emb.forward(&nn::ops::silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&nn::ops::silu(&self.norm2.forward(&h)?)?)?;
        let residual = match &self.skip {
            Some(conv) => conv.forward(xs)?,
            None => xs.clone(),
        };
        Ok((h + residual)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl AttentionBlock {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(channels, vb.pp("norm"))?,
            qkv: conv1x1(channels, 3 * channels, vb.pp("qkv"))?,
            proj: zero_conv1x1(channels, channels, vb.pp("proj"))?,
            channels,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(xs)?)?.reshape((b, 3 * c, h * w))?;
        let q = qkv.narrow(1, 0, c)?;
        let k = qkv.narrow(1, c, c)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        // [B, HW(query), HW(key)]
        let logits = (q.transpose(1, 2)?.contiguous()?.matmul(&k.contiguous()?)? * scale)?;
        let weights = nn::ops::softmax(&logits, D::Minus1)?;
        let out = v.contiguous()?.matmul(&weights.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((xs + out)?)
    }
}

/// Strided 3x3 convolution halving the spatial size.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: nn::conv2d(channels, channels, 3, conv_cfg(1, 2), vb)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(xs)?)
    }
}

/// Nearest-neighbour doubling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv3x3(channels, channels, vb)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = xs.dims4()?;
        Ok(self.conv.forward(&xs.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(norm_groups(96), 32);
        assert_eq!(norm_groups(32), 16);
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(6), 2);
        assert_eq!(norm_groups(1), 1);
    }

    #[test]
    fn timestep_features_shape_and_values() {
        let f = timestep_features(&[0, 5], 8, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(f.dims(), &[2, 8]);
        let rows = f.to_vec2::<f64>().unwrap();
        assert_eq!(&rows[0][..4], &[1.0; 4]);
        assert_eq!(&rows[0][4..], &[0.0; 4]);
        assert!((rows[1][0] - 5f64.cos()).abs() < 1e-12);
    }
}
