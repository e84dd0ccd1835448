//! Shared/independent feature split, shared-block fusion and
//! squeeze-and-excitation reweighting.

use candle_core::{DType, Module, Tensor};
use candle_nn::{self as nn, Conv2d, Linear, VarBuilder};

use super::layers::conv3x3;
use crate::error::{Error, Result};

/// Two 3x3 heads mapping a stream's `2C`-channel bottleneck to its shared
/// and independent `C`-channel blocks.
#[derive(Debug, Clone)]
pub struct SplitHeads {
    shared: Conv2d,
    independent: Conv2d,
}

impl SplitHeads {
    pub fn new(stream_channels: usize, vb: VarBuilder) -> Result<Self> {
        if stream_channels % 2 != 0 || stream_channels == 0 {
            return Err(Error::Config(format!(
                "bottleneck channel count must be even, got {stream_channels}"
            )));
        }
        let half = stream_channels / 2;
        Ok(Self {
            shared: conv3x3(stream_channels, half, vb.pp("shared"))?,
            independent: conv3x3(stream_channels, half, vb.pp("independent"))?,
        })
    }

    /// Returns `(S, I)`.
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.shared.forward(features)?, self.independent.forward(features)?))
    }
}

/// Weighted sum `w1·S_x + w2·S_y + w3·S_v`; `weights` is a length-3 tensor
/// of nonnegative values summing to one.
pub fn fuse_shared(blocks: [&Tensor; 3], weights: &Tensor) -> Result<Tensor> {
    for b in &blocks[1..] {
        if b.dims() != blocks[0].dims() {
            return Err(Error::shape(blocks[0].dims(), b.dims()));
        }
    }
    if weights.dims() != [3] {
        return Err(Error::shape(&[3], weights.dims()));
    }
    let w = weights.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
        return Err(Error::Domain(format!(
            "fusion weights must be nonnegative and sum to 1, got {w:?}"
        )));
    }
    let mut acc = blocks[0].broadcast_mul(&weights.get(0)?)?;
    for (i, b) in blocks.iter().enumerate().skip(1) {
        acc = (acc + b.broadcast_mul(&weights.get(i)?)?)?;
    }
    Ok(acc)
}

/// Channel reweighting from globally pooled descriptors:
/// `s = sigmoid(fc2(silu(fc1(mean_hw(x)))))`, output channel `i` is `s_i·x_i`.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

impl SqueezeExcite {
    /// Hidden width is a quarter of `channels`, at least 4.
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / 4).max(4);
        Ok(Self {
            fc1: nn::linear(channels, hidden, vb.pp("fc1"))?,
            fc2: nn::linear(hidden, channels, vb.pp("fc2"))?,
        })
    }

    pub fn from_layers(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }

    /// Per-channel weights `[B, C]`, each in `(0, 1)`.
    pub fn weights(&self, rep: &Tensor) -> Result<Tensor> {
        let pooled = rep.mean((2, 3))?;
        let h = nn::ops::silu(&self.fc1.forward(&pooled)?)?;
        Ok(nn::ops::sigmoid(&self.fc2.forward(&h)?)?)
    }

    pub fn forward(&self, rep: &Tensor) -> Result<Tensor> {
        let s = self.weights(rep)?.unsqueeze(2)?.unsqueeze(3)?;
        Ok(rep.broadcast_mul(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::VarMap;

    fn block(value: f64) -> Tensor {
        Tensor::full(value, (2, 3, 4, 4), &Device::Cpu).unwrap()
    }

    fn weights(w: [f64; 3]) -> Tensor {
        Tensor::new(&w, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn fuse_cases() {
        let a = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let s = fuse_shared([&a, &a, &a], &weights([0.2, 0.5, 0.3])).unwrap();
        assert!(max_abs(&(s - &a).unwrap()) < 1e-12);

        let b = block(7.0);
        let s = fuse_shared([&a, &b, &b], &weights([1.0, 0.0, 0.0])).unwrap();
        assert_eq!(max_abs(&(s - &a).unwrap()), 0.0);

        let third = 1.0 / 3.0;
        let s = fuse_shared([&block(0.0), &block(2.0), &block(4.0)], &weights([third; 3])).unwrap();
        assert!(max_abs(&(s - block(2.0)).unwrap()) < 1e-12);
    }

    #[test]
    fn fuse_rejects_bad_input() {
        let a = block(1.0);
        let small = Tensor::zeros((2, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(fuse_shared([&a, &a, &small], &weights([0.3, 0.3, 0.4])).is_err());
        assert!(fuse_shared([&a, &a, &a], &weights([0.5, 0.6, -0.1])).is_err());
        assert!(fuse_shared([&a, &a, &a], &weights([0.5, 0.5, 0.5])).is_err());
    }

    #[test]
    fn split_shapes() {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F64, &Device::Cpu);
        let heads = SplitHeads::new(32, vb.pp("split")).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 32, 4, 4), &Device::Cpu).unwrap();
        let (s, i) = heads.forward(&x).unwrap();
        assert_eq!(s.dims(), &[1, 16, 4, 4]);
        assert_eq!(i.dims(), &[1, 16, 4, 4]);
        assert!(SplitHeads::new(31, vb.pp("odd")).is_err());
    }

    #[test]
    fn split_full_scale_shape() {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
        let heads = SplitHeads::new(192, vb).unwrap();
        let x = Tensor::zeros((1, 192, 7, 7), DType::F32, &Device::Cpu).unwrap();
        let (s, i) = heads.forward(&x).unwrap();
        assert_eq!(s.dims(), &[1, 96, 7, 7]);
        assert_eq!(i.dims(), &[1, 96, 7, 7]);
    }

    #[test]
    fn split_is_zero_for_zero_heads() {
        let dev = Device::Cpu;
        let zero = |o, i| {
            Conv2d::new(
                Tensor::zeros((o, i, 3, 3), DType::F64, &dev).unwrap(),
                Some(Tensor::zeros(o, DType::F64, &dev).unwrap()),
                candle_nn::Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            )
        };
        let heads = SplitHeads {
            shared: zero(16, 32),
            independent: zero(16, 32),
        };
        let x = Tensor::zeros((1, 32, 4, 4), DType::F64, &dev).unwrap();
        let (s, i) = heads.forward(&x).unwrap();
        assert_eq!(max_abs(&s), 0.0);
        assert_eq!(max_abs(&i), 0.0);
    }

    fn zero_se(c: usize) -> SqueezeExcite {
        let dev = Device::Cpu;
        let h = (c / 4).max(4);
        let lin = |o, i| {
            Linear::new(
                Tensor::zeros((o, i), DType::F64, &dev).unwrap(),
                Some(Tensor::zeros(o, DType::F64, &dev).unwrap()),
            )
        };
        SqueezeExcite::from_layers(lin(h, c), lin(c, h))
    }

    #[test]
    fn zero_se_halves_input() {
        let se = zero_se(8);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 3, 3), &Device::Cpu).unwrap();
        let y = se.forward(&x).unwrap();
        assert!(max_abs(&(y - (x * 0.5).unwrap()).unwrap()) < 1e-15);
    }

    #[test]
    fn se_scales_each_channel() {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F64, &Device::Cpu);
        let se = SqueezeExcite::new(8, vb).unwrap();
        // Channel c is the constant c + 1.
        let x = Tensor::arange(1f64, 9.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 8, 1, 1))
            .unwrap()
            .repeat((1, 1, 5, 5))
            .unwrap();
        let s = se.weights(&x).unwrap().to_vec2::<f64>().unwrap()[0].clone();
        let y4 = se.forward(&x).unwrap();
        for (c, sc) in s.iter().enumerate() {
            assert!(*sc > 0.0 && *sc < 1.0);
            let ch = y4.get(0).unwrap().get(c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for v in ch {
                assert!((v - sc * (c as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }
}
