//! The noise-prediction network: three independent encoders (for `x_t`, the
//! LR image and the auxiliary contrast), a shared/independent split of each
//! encoder's bottleneck, SE reweighting of the fused shared block and the
//! three independent blocks, and one decoder with skip connections from the
//! `x_t` encoder (optionally summed with the matching stages of the other
//! two encoders).

mod disentangle;
pub mod layers;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{self as nn, Conv2d, GroupNorm, Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionPair, NoisePredictor, Prediction};
use crate::error::{Error, Result};

pub use disentangle::{fuse_shared, SplitHeads, SqueezeExcite};
use layers::{conv3x3, group_norm, zero_conv3x3, AttentionBlock, Downsample, ResBlock, TimeEmbedding, Upsample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub num_res_blocks: usize,
    /// Spatial sizes at which attention blocks are inserted.
    pub attention_resolutions: Vec<usize>,
    pub channel_multipliers: Vec<usize>,
    pub learn_variance: bool,
    pub in_resolution: usize,
    /// Add the LR and auxiliary encoders' stage outputs to the `x_t` skip
    /// connections. Off, the conditions reach the decoder only through the
    /// fused bottleneck.
    #[serde(default)]
    pub condition_skips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 96,
            num_res_blocks: 2,
            attention_resolutions: vec![28, 14, 7],
            channel_multipliers: vec![1, 1, 2, 2, 2, 2],
            learn_variance: true,
            in_resolution: 224,
            condition_skips: false,
        }
    }
}

impl ModelConfig {
    /// 32x32 inputs, 16 base channels, four levels down to 4x4, condition
    /// skips on.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            channel_multipliers: vec![1, 2, 2, 2],
            learn_variance: true,
            in_resolution: 32,
            condition_skips: true,
        }
    }

    /// Spatial size at each level, from the input down to the bottleneck.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.channel_multipliers.len())
            .map(|l| self.in_resolution >> l)
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels * self.channel_multipliers.last().copied().unwrap_or(1)
    }

    /// Channels in each shared or independent block.
    pub fn representation_channels(&self) -> usize {
        self.bottleneck_channels() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be nonempty and positive".into()));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be even and positive, got {}",
                self.base_channels
            )));
        }
        if self.in_resolution == 0 || self.in_resolution % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "in_resolution {} cannot be halved {} times",
                self.in_resolution,
                levels - 1
            )));
        }
        let reachable = self.level_resolutions();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !reachable.contains(r)) {
            return Err(Error::Config(format!(
                "attention resolution {r} is not one of {reachable:?}"
            )));
        }
        if self.bottleneck_channels() % 2 != 0 {
            return Err(Error::Config("bottleneck channel count must be even".into()));
        }
        Ok(())
    }

    fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Raw and SE-reweighted disentangled blocks from one forward pass, each
/// `[B, C, H, W]` at the bottleneck resolution.
#[derive(Debug, Clone)]
pub struct Representations {
    pub s_x: Tensor,
    pub i_x: Tensor,
    pub s_y: Tensor,
    pub i_y: Tensor,
    pub s_v: Tensor,
    pub i_v: Tensor,
    pub s_hat: Tensor,
    pub i_hat_x: Tensor,
    pub i_hat_y: Tensor,
    pub i_hat_v: Tensor,
}

impl Representations {
    pub fn shared(&self) -> [&Tensor; 3] {
        [&self.s_x, &self.s_y, &self.s_v]
    }

    pub fn independent(&self) -> [&Tensor; 3] {
        [&self.i_x, &self.i_y, &self.i_v]
    }

    pub fn reweighted(&self) -> [&Tensor; 4] {
        [&self.i_hat_x, &self.i_hat_y, &self.i_hat_v, &self.s_hat]
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub eps_pred: Tensor,
    /// Variance interpolation coefficient in `[0, 1]`, when learned.
    pub v_pred: Option<Tensor>,
    pub reps: Representations,
}

enum EncoderLayer {
    Res(ResBlock),
    Attn(AttentionBlock),
    Down(Downsample),
}

/// One stream's encoder. Every residual block, and every downsample, closes
/// a stage whose output is kept as a skip connection.
struct Encoder {
    conv_in: Conv2d,
    stages: Vec<Vec<EncoderLayer>>,
}

impl Encoder {
    fn new(config: &ModelConfig, vb: VarBuilder) -> Result<(Self, Vec<usize>)> {
        let base = config.base_channels;
        let temb = config.temb_dim();
        let resolutions = config.level_resolutions();
        let levels = config.channel_multipliers.len();
        let conv_in = conv3x3(1, base, vb.pp("conv_in"))?;
        let mut stages = Vec::new();
        let mut skip_channels = vec![base];
        let mut ch = base;
        for (level, mult) in config.channel_multipliers.iter().enumerate() {
            let out = base * mult;
            for r in 0..config.num_res_blocks {
                let vb = vb.pp(format!("down.{level}.{r}"));
                let mut stage = vec![EncoderLayer::Res(ResBlock::new(ch, out, temb, vb.pp("res"))?)];
                ch = out;
                if config.attention_resolutions.contains(&resolutions[level]) {
                    stage.push(EncoderLayer::Attn(AttentionBlock::new(ch, vb.pp("attn"))?));
                }
                stages.push(stage);
                skip_channels.push(ch);
            }
            if level + 1 < levels {
                let down = Downsample::new(ch, vb.pp(format!("down.{level}.downsample")))?;
                stages.push(vec![EncoderLayer::Down(down)]);
                skip_channels.push(ch);
            }
        }
        Ok((Self { conv_in, stages }, skip_channels))
    }

    /// Returns the bottleneck features and every stage output.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for stage in &self.stages {
            for layer in stage {
                h = match layer {
                    EncoderLayer::Res(b) => b.forward(&h, temb)?,
                    EncoderLayer::Attn(a) => a.forward(&h)?,
                    EncoderLayer::Down(d) => d.forward(&h)?,
                };
            }
            skips.push(h.clone());
        }
        Ok((h, skips))
    }
}

struct DecoderStage {
    res: ResBlock,
    attn: Option<AttentionBlock>,
    up: Option<Upsample>,
}

struct Decoder {
    mid_in: ResBlock,
    mid_attn: AttentionBlock,
    mid_out: ResBlock,
    stages: Vec<DecoderStage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(config: &ModelConfig, mut skip_channels: Vec<usize>, out_channels: usize, vb: VarBuilder) -> Result<Self> {
        let base = config.base_channels;
        let temb = config.temb_dim();
        let resolutions = config.level_resolutions();
        let mut ch = config.bottleneck_channels();
        let mid_in = ResBlock::new(2 * ch, ch, temb, vb.pp("mid.res_in"))?;
        let mid_attn = AttentionBlock::new(ch, vb.pp("mid.attn"))?;
        let mid_out = ResBlock::new(ch, ch, temb, vb.pp("mid.res_out"))?;
        let mut stages = Vec::new();
        for (level, mult) in config.channel_multipliers.iter().enumerate().rev() {
            let out = base * mult;
            for i in 0..=config.num_res_blocks {
                let vb = vb.pp(format!("up.{level}.{i}"));
                let skip = skip_channels.pop().expect("one skip per decoder stage");
                let res = ResBlock::new(ch + skip, out, temb, vb.pp("res"))?;
                ch = out;
                let attn = if config.attention_resolutions.contains(&resolutions[level]) {
                    Some(AttentionBlock::new(ch, vb.pp("attn"))?)
                } else {
                    None
                };
                let up = if level > 0 && i == config.num_res_blocks {
                    Some(Upsample::new(ch, vb.pp("upsample"))?)
                } else {
                    None
                };
                stages.push(DecoderStage { res, attn, up });
            }
        }
        debug_assert!(skip_channels.is_empty());
        Ok(Self {
            mid_in,
            mid_attn,
            mid_out,
            stages,
            norm_out: group_norm(ch, vb.pp("norm_out"))?,
            conv_out: zero_conv3x3(ch, out_channels, vb.pp("conv_out"))?,
        })
    }

    fn forward(&self, fused: &Tensor, mut skips: Vec<Tensor>, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.mid_in.forward(fused, temb)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid_out.forward(&h, temb)?;
        for stage in &self.stages {
            let skip = skips.pop().expect("one skip per decoder stage");
            h = stage.res.forward(&Tensor::cat(&[&h, &skip], 1)?, temb)?;
            if let Some(attn) = &stage.attn {
                h = attn.forward(&h)?;
            }
            if let Some(up) = &stage.up {
                h = up.forward(&h)?;
            }
        }
        let h = nn::ops::silu(&self.norm_out.forward(&h)?)?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// Parameters live in whatever backs the `VarBuilder` the model was built
/// from, under the prefixes `time`, `enc_x`, `enc_y`, `enc_v`, `split_*`,
/// `fuse_logits`, `se_*` and `dec`.
pub struct DisentangledUNet {
    config: ModelConfig,
    time: TimeEmbedding,
    encoders: [Encoder; 3],
    splits: [SplitHeads; 3],
    fuse_logits: Tensor,
    se_independent: [SqueezeExcite; 3],
    se_shared: SqueezeExcite,
    decoder: Decoder,
}

const STREAMS: [&str; 3] = ["x", "y", "v"];

fn into3<T>(v: Vec<T>) -> [T; 3] {
    v.try_into().ok().expect("three streams")
}

impl DisentangledUNet {
    pub fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels;
        let rep = config.representation_channels();
        let time = TimeEmbedding::new(base, config.temb_dim(), vb.pp("time"))?;

        let mut skip_channels = Vec::new();
        let mut encoders = Vec::with_capacity(3);
        let mut splits = Vec::with_capacity(3);
        let mut se_independent = Vec::with_capacity(3);
        for name in STREAMS {
            let (enc, skips) = Encoder::new(config, vb.pp(format!("enc_{name}")))?;
            if name == "x" {
                skip_channels = skips;
            }
            encoders.push(enc);
            splits.push(SplitHeads::new(config.bottleneck_channels(), vb.pp(format!("split_{name}")))?);
            se_independent.push(SqueezeExcite::new(rep, vb.pp(format!("se_i{name}")))?);
        }
        let fuse_logits = vb.get_with_hints(3, "fuse_logits", Init::Const(0.0))?;
        let se_shared = SqueezeExcite::new(rep, vb.pp("se_s"))?;
        let out_channels = if config.learn_variance { 2 } else { 1 };
        let decoder = Decoder::new(config, skip_channels, out_channels, vb.pp("dec"))?;

        Ok(Self {
            config: config.clone(),
            time,
            encoders: into3(encoders),
            splits: into3(splits),
            fuse_logits,
            se_independent: into3(se_independent),
            se_shared,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Current fusion weights (softmax of the learnable logits).
    pub fn fusion_weights(&self) -> Result<Tensor> {
        Ok(nn::ops::softmax(&self.fuse_logits, 0)?)
    }

    pub fn forward(&self, x_t: &Tensor, cond: &ConditionPair, steps: &[usize]) -> Result<ModelOutput> {
        let res = self.config.in_resolution;
        let (b, c, h, w) = x_t.dims4()?;
        if c != 1 || h != res || w != res {
            return Err(Error::shape(&[b, 1, res, res], x_t.dims()));
        }
        if cond.lr_image.dims() != x_t.dims() {
            return Err(Error::shape(x_t.dims(), cond.lr_image.dims()));
        }
        if steps.len() != b {
            return Err(Error::shape(&[b], &[steps.len()]));
        }
        if steps.contains(&0) {
            return Err(Error::StepOutOfRange { step: 0, max: usize::MAX });
        }
        let temb = self.time.forward(steps, x_t.dtype(), x_t.device())?;

        let (feat_x, mut skips) = self.encoders[0].forward(x_t, &temb)?;
        let (feat_y, skips_y) = self.encoders[1].forward(&cond.lr_image, &temb)?;
        let (feat_v, skips_v) = self.encoders[2].forward(&cond.aux_contrast, &temb)?;
        if self.config.condition_skips {
            skips = skips
                .iter()
                .zip(&skips_y)
                .zip(&skips_v)
                .map(|((x, y), v)| Ok((x + y)?.add(v)?))
                .collect::<Result<_>>()?;
        }
        let (s_x, i_x) = self.splits[0].forward(&feat_x)?;
        let (s_y, i_y) = self.splits[1].forward(&feat_y)?;
        let (s_v, i_v) = self.splits[2].forward(&feat_v)?;

        let shared = fuse_shared([&s_x, &s_y, &s_v], &self.fusion_weights()?)?;
        let s_hat = self.se_shared.forward(&shared)?;
        let i_hat_x = self.se_independent[0].forward(&i_x)?;
        let i_hat_y = self.se_independent[1].forward(&i_y)?;
        let i_hat_v = self.se_independent[2].forward(&i_v)?;

        let fused = Tensor::cat(&[&i_hat_x, &i_hat_y, &i_hat_v, &s_hat], 1)?;
        let out = self.decoder.forward(&fused, skips, &temb)?;
        let eps_pred = out.narrow(1, 0, 1)?;
        let v_pred = if self.config.learn_variance {
            Some(nn::ops::sigmoid(&out.narrow(1, 1, 1)?)?)
        } else {
            None
        };
        Ok(ModelOutput {
            eps_pred,
            v_pred,
            reps: Representations {
                s_x,
                i_x,
                s_y,
                i_y,
                s_v,
                i_v,
                s_hat,
                i_hat_x,
                i_hat_y,
                i_hat_v,
            },
        })
    }

    /// SE channel weights for `[Î_x, Î_y, Î_v, Ŝ]` given raw blocks.
    pub fn se_weights(&self, reps: &Representations) -> Result<[Tensor; 4]> {
        let shared = fuse_shared(reps.shared(), &self.fusion_weights()?)?;
        Ok([
            self.se_independent[0].weights(&reps.i_x)?,
            self.se_independent[1].weights(&reps.i_y)?,
            self.se_independent[2].weights(&reps.i_v)?,
            self.se_shared.weights(&shared)?,
        ])
    }
}

impl NoisePredictor for DisentangledUNet {
    fn predict(&self, x_t: &Tensor, cond: &ConditionPair, steps: &[usize]) -> Result<Prediction> {
        let out = self.forward(x_t, cond, steps)?;
        Ok(Prediction {
            eps: out.eps_pred,
            v: out.v_pred,
        })
    }
}

/// Builds a model whose parameters are drawn from `seed`.
pub fn init_model(config: &ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<(nn::VarMap, DisentangledUNet)> {
    let map = nn::VarMap::new();
    let model = DisentangledUNet::new(config, VarBuilder::from_varmap(&map, dtype, device))?;
    reinit_params(&map, seed)?;
    Ok((map, model))
}

/// Redraws every non-constant parameter from a seeded stream, visiting
/// names in sorted order: weights from N(0, 2/fan_in), biases from
/// U(-1/√in, 1/√in). Constant initializations (zeros, ones) are kept.
pub fn reinit_params(map: &nn::VarMap, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = map.data().lock().expect("var map lock poisoned").clone();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    for name in names {
        let var = &vars[name];
        let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
        let (lo, hi) = (flat.min(0)?.to_scalar::<f64>()?, flat.max(0)?.to_scalar::<f64>()?);
        if lo == hi {
            continue;
        }
        let n = var.elem_count();
        let values: Vec<f64> = if let Some(prefix) = name.strip_suffix(".bias") {
            let fan_in = vars
                .get(&format!("{prefix}.weight"))
                .and_then(|w| w.dims().get(1).copied())
                .ok_or_else(|| Error::Config(format!("no weight next to {name}")))?;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| rng.sample(dist)).collect()
        } else {
            let fan_in: usize = var.dims()[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let t = Tensor::from_vec(values, var.dims(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}
