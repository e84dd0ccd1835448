//! Image-quality metrics, sampling-based uncertainty maps and dataset
//! evaluation reports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{tensor_to_grid, Grid, Manifest, NormalizedSlice, SliceRecord, Split};
use crate::diffusion::{sample_hr_with_seeds, ConditionPair, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Grid, b: &Grid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[b.dim().0, b.dim().1], &[a.dim().0, a.dim().1]));
    }
    Ok(())
}

pub fn mse(a: &Grid, b: &Grid) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::Empty("cannot compare empty grids"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(range² / MSE)` in dB; `+inf` for identical grids.
pub fn psnr(restored: &Grid, reference: &Grid, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(restored, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Array1<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k = Array1::from_shape_fn(size, |i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp());
    let s = k.sum();
    k / s
}

/// Separable correlation keeping only positions where the window fits.
fn filter_valid(image: &Grid, kernel: &Array1<f64>) -> Grid {
    let n = kernel.len();
    let (h, w) = image.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(r, c)| (0..n).map(|k| kernel[k] * image[[r, c + k]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(r, c)| (0..n).map(|k| kernel[k] * rows[[r + k, c]]).sum::<f64>())
}

/// Mean local SSIM with an 11x11 Gaussian window (σ = 1.5), population
/// statistics, `C1 = (K1·range)²`, `C2 = (K2·range)²`, averaged over the
/// positions where the window lies entirely inside the image.
pub fn ssim(restored: &Grid, reference: &Grid, data_range: f64) -> Result<f64> {
    check_shapes(restored, reference)?;
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let (h, w) = restored.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y) = (restored, reference);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&(x * x), &k) - &mx * &mx;
    let syy = filter_valid(&(y * y), &k) - &my * &my;
    let sxy = filter_valid(&(x * y), &k) - &mx * &my;
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    Ok((num / den).mean().expect("nonempty"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean: Grid,
    /// Population standard deviation; absent for a single sample.
    pub std: Option<Grid>,
}

/// Per-pixel mean and population standard deviation across samples.
pub fn uncertainty_maps(samples: &[Grid]) -> Result<UncertaintyMaps> {
    let first = samples.first().ok_or(Error::Empty("uncertainty maps need at least one sample"))?;
    for s in samples {
        check_shapes(s, first)?;
    }
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    let stack = ndarray::stack(Axis(0), &views).expect("shapes checked");
    let mean = stack.mean_axis(Axis(0)).expect("nonempty");
    let std = (samples.len() >= 2).then(|| stack.std_axis(Axis(0), 0.0));
    Ok(UncertaintyMaps { mean, std })
}

/// Scores that may be infinite; serialized as numbers, with `+∞` written
/// as the string `"inf"` (and `-∞` as `"-inf"`).
pub mod inf_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePaths {
    pub mean: String,
    pub error: String,
    pub std: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceMetrics {
    pub slice_id: String,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the zero-filled LR input against the same reference.
    #[serde(with = "inf_float")]
    pub lr_psnr: f64,
    pub lr_ssim: f64,
    pub data_range: f64,
    pub images: Option<ImagePaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub split: Split,
    pub k: usize,
    pub sampling_steps: usize,
    pub seed: u64,
    pub slices: Vec<SliceMetrics>,
    #[serde(with = "inf_float")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(with = "inf_float")]
    pub mean_lr_psnr: f64,
    pub mean_lr_ssim: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

impl EvalReport {
    /// Dataset means recomputed from the per-slice values.
    pub fn recompute_means(&mut self) {
        self.mean_psnr = mean_of(self.slices.iter().map(|s| s.psnr));
        self.mean_ssim = mean_of(self.slices.iter().map(|s| s.ssim));
        self.mean_lr_psnr = mean_of(self.slices.iter().map(|s| s.lr_psnr));
        self.mean_lr_ssim = mean_of(self.slices.iter().map(|s| s.lr_ssim));
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// K restorations of one slice, in intensity units.
#[derive(Debug, Clone)]
pub struct Restoration {
    pub samples: Vec<Grid>,
    pub maps: UncertaintyMaps,
}

/// Samples one slice with explicit per-chain seeds and maps the results
/// back to intensities with the slice's target scheme.
pub fn restore_slice(
    record: &SliceRecord,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Restoration> {
    let norm = NormalizedSlice::from_record(record);
    let dev = candle_core::Device::Cpu;
    let cond = ConditionPair::new(
        crate::data::grids_to_tensor(&[&norm.lr], &dev)?,
        crate::data::grids_to_tensor(&[&norm.aux], &dev)?,
    )?;
    let out = sample_hr_with_seeds(&cond, model, schedule, seeds)?;
    let samples = (0..seeds.len())
        .map(|i| Ok(norm.target_scheme.denormalize(&tensor_to_grid(&out, i)?)))
        .collect::<Result<Vec<_>>>()?;
    let maps = uncertainty_maps(&samples)?;
    Ok(Restoration { samples, maps })
}

/// Per-chain seeds for slice `position` of an evaluation run.
pub fn chain_seeds(seed: u64, position: usize, k: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    (0..k).map(|_| rng.random()).collect()
}

/// Writes an 8-bit binary PGM, mapping `[lo, hi]` linearly onto 0..=255.
pub fn write_pgm(path: &Path, grid: &Grid, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = grid.dim();
    let span = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(grid.iter().map(|&v| {
        let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
        (u.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: Split,
    pub k: usize,
    pub seed: u64,
    /// Where to write PGM images, if anywhere.
    pub image_dir: Option<PathBuf>,
    /// Evaluate at most this many slices (in manifest order).
    pub limit: Option<usize>,
}

/// Scores the mean of `k` restorations of every slice in the split against
/// its HR target, with `data_range` the target's max − min, next to the
/// zero-filled LR input. `schedule` should already be respaced.
pub fn evaluate_dataset(
    manifest: &Manifest,
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.k == 0 {
        return Err(Error::Empty("k must be at least 1"));
    }
    let metas: Vec<_> = manifest
        .records_in(opts.split)
        .take(opts.limit.unwrap_or(usize::MAX))
        .collect();
    if metas.is_empty() {
        return Err(Error::Empty("evaluation split has no slices"));
    }
    if let Some(dir) = &opts.image_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut slices = Vec::with_capacity(metas.len());
    for (pos, meta) in metas.into_iter().enumerate() {
        let record = manifest.load_record(meta)?;
        let reference = &record.hr_t2;
        let scheme = crate::data::NormScheme::of(reference);
        let range = scheme.range();
        if !(range > 0.0) {
            return Err(Error::Domain(format!("slice {} has a constant target", record.slice_id)));
        }
        let restored = restore_slice(&record, model, schedule, &chain_seeds(opts.seed, pos, opts.k))?;
        let mean = &restored.maps.mean;
        let images = match &opts.image_dir {
            Some(dir) => Some(write_slice_images(dir, &record.slice_id, &restored.maps, reference, scheme)?),
            None => None,
        };
        slices.push(SliceMetrics {
            psnr: psnr(mean, reference, range)?,
            ssim: ssim(mean, reference, range)?,
            lr_psnr: psnr(&record.lr_t2, reference, range)?,
            lr_ssim: ssim(&record.lr_t2, reference, range)?,
            data_range: range,
            slice_id: record.slice_id,
            images,
        });
    }
    let mut report = EvalReport {
        split: opts.split,
        k: opts.k,
        sampling_steps: schedule.steps(),
        seed: opts.seed,
        slices,
        mean_psnr: 0.0,
        mean_ssim: 0.0,
        mean_lr_psnr: 0.0,
        mean_lr_ssim: 0.0,
    };
    report.recompute_means();
    Ok(report)
}

/// Mean in the target's intensity window, absolute error and standard
/// deviation on `[0, range/4]`.
pub fn write_slice_images(
    dir: &Path,
    slice_id: &str,
    maps: &UncertaintyMaps,
    reference: &Grid,
    scheme: crate::data::NormScheme,
) -> Result<ImagePaths> {
    let name = |kind: &str| format!("{slice_id}.{kind}.pgm");
    let error = (&maps.mean - reference).mapv(f64::abs);
    let quarter = scheme.range() / 4.0;
    write_pgm(&dir.join(name("mean")), &maps.mean, scheme.min, scheme.max)?;
    write_pgm(&dir.join(name("error")), &error, 0.0, quarter)?;
    let std = match &maps.std {
        Some(s) => {
            write_pgm(&dir.join(name("std")), s, 0.0, quarter)?;
            Some(name("std"))
        }
        None => None,
    };
    Ok(ImagePaths {
        mean: name("mean"),
        error: name("error"),
        std,
    })
}
