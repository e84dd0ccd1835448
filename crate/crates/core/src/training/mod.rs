//! Optimization loop: batch selection, noising, the joint loss, AdamW with
//! gradient clipping, parameter EMA, checkpoints and JSONL logs.

mod checkpoint;
mod config;
pub mod optim;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curriculum::{build_entropy_index, curriculum_mu, iteration_rng, sample_batch_positions, CurriculumConfig, EntropyIndex};
use crate::data::{grids_to_tensor, Manifest, NormalizedSlice, SliceRecord, Split};
use crate::diffusion::{q_sample, ConditionPair, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{combine, disentanglement_loss, reconstruction_loss, vlb_variance_loss, ReconLoss};
use crate::unet::{init_model, DisentangledUNet};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{apply_override, Ablations, TrainConfig};
pub use optim::{AdamW, AdamWConfig, Ema};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const CONFIG_FILE: &str = "config.json";

/// Stream offset separating the noising draws from the batch selection draws.
const NOISE_SEED_SALT: u64 = 0x6e6f_6973_655f_7374;

/// One training iteration's record in the JSONL log. Terms switched off by
/// an ablation are `null`; `loss_charb` and `loss_mse` are mutually
/// exclusive. `mu_entropy` is `null` once sampling is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_disent: Option<f64>,
    pub loss_charb: Option<f64>,
    pub loss_mse: Option<f64>,
    pub loss_vlb: Option<f64>,
    pub mu_entropy: Option<f64>,
    pub sampling: String,
    pub steps: Vec<usize>,
    pub grad_norm: f64,
}

/// A normalized training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x0: Tensor,
    pub cond: ConditionPair,
}

impl Batch {
    pub fn from_slices(slices: &[&NormalizedSlice], device: &Device) -> Result<Self> {
        let hr: Vec<_> = slices.iter().map(|s| &s.hr).collect();
        let lr: Vec<_> = slices.iter().map(|s| &s.lr).collect();
        let aux: Vec<_> = slices.iter().map(|s| &s.aux).collect();
        Ok(Self {
            x0: grids_to_tensor(&hr, device)?,
            cond: ConditionPair::new(grids_to_tensor(&lr, device)?, grids_to_tensor(&aux, device)?)?,
        })
    }
}

/// Loss components of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub disent: Option<f64>,
    pub recon: f64,
    pub recon_kind: ReconLoss,
    pub vlb: Option<f64>,
    pub steps: Vec<usize>,
    pub grad_norm: f64,
}

struct TrainData {
    slices: Vec<NormalizedSlice>,
    index: EntropyIndex,
    /// Slice position for each index entry.
    slice_of: Vec<usize>,
}

impl TrainData {
    fn new(records: &[SliceRecord], bins: usize) -> Result<Self> {
        let index = build_entropy_index(records, bins)?;
        let by_id: HashMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.slice_id.as_str(), i)).collect();
        let slice_of = index.entries().iter().map(|(id, _)| by_id[id.as_str()]).collect();
        Ok(Self {
            slices: records.iter().map(NormalizedSlice::from_record).collect(),
            index,
            slice_of,
        })
    }
}

/// Model, optimizer, EMA and data for one training run.
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    device: Device,
    varmap: VarMap,
    model: DisentangledUNet,
    names: Vec<String>,
    vars: Vec<Var>,
    opt: AdamW,
    ema: Ema,
    iteration: usize,
    data: TrainData,
}

fn sorted_vars(map: &VarMap) -> (Vec<String>, Vec<Var>) {
    let data = map.data().lock().expect("var map lock poisoned");
    let sorted: BTreeMap<String, Var> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    sorted.into_iter().unzip()
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig, records: &[SliceRecord]) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let (varmap, model) = init_model(&config.model, DType::F64, &device, config.seed)?;
        let (names, vars) = sorted_vars(&varmap);
        let opt = AdamW::new(vars.clone(), config.optimizer)?;
        let ema = Ema::new(&vars, config.ema_decay, config.ema_warmup)?;
        let res = config.model.in_resolution;
        if let Some(r) = records.iter().find(|r| r.hr_t2.dim() != (res, res)) {
            return Err(Error::Config(format!(
                "slice {} is {:?}, model expects {res}x{res}",
                r.slice_id,
                r.hr_t2.dim()
            )));
        }
        Ok(Self {
            schedule: config.schedule.build()?,
            data: TrainData::new(records, config.entropy_bins)?,
            config,
            device,
            varmap,
            model,
            names,
            vars,
            opt,
            ema,
            iteration: 0,
        })
    }

    /// Restores parameters, EMA, optimizer state and the iteration counter.
    pub fn from_checkpoint(ck: &Checkpoint, records: &[SliceRecord]) -> Result<Self> {
        let mut trainer = Self::new(ck.config().clone(), records)?;
        let pick = |map: &BTreeMap<String, Tensor>| -> Result<Vec<Tensor>> {
            trainer
                .names
                .iter()
                .map(|n| {
                    map.get(n)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{n}`")))
                })
                .collect()
        };
        let params = pick(&ck.params)?;
        let ema = pick(&ck.ema)?;
        let (m, v) = (pick(&ck.adam_m)?, pick(&ck.adam_v)?);
        if ck.params.len() != trainer.names.len() {
            return Err(Error::Config("checkpoint has parameters the model does not".into()));
        }
        for (var, t) in trainer.vars.iter().zip(&params) {
            var.set(t)?;
        }
        trainer.ema.restore(ema, ck.meta.ema_updates)?;
        trainer.opt.restore(m, v, ck.meta.adam_step)?;
        trainer.iteration = ck.meta.iteration;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn model(&self) -> &DisentangledUNet {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn entropy_index(&self) -> &EntropyIndex {
        &self.data.index
    }

    /// Current parameters by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .cloned()
            .zip(self.vars.iter().map(|v| v.as_tensor().detach().copy().expect("cpu copy")))
            .collect()
    }

    pub fn ema_params(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.ema.shadow().iter().cloned()).collect()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (m, v) = self.opt.moments();
        let named = |ts: &[Tensor]| -> BTreeMap<String, Tensor> { self.names.iter().cloned().zip(ts.iter().cloned()).collect() };
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                iteration: self.iteration,
                adam_step: self.opt.step_count(),
                ema_updates: self.ema.updates(),
                rng: "chacha8; batch stream (seed, iteration), noise stream (seed ^ salt, iteration)".into(),
                config: self.config.clone(),
            },
            params: self.params(),
            ema: named(self.ema.shadow()),
            adam_m: named(m),
            adam_v: named(v),
        })
    }

    /// A separate model instance carrying the EMA weights.
    pub fn ema_model(&self) -> Result<(VarMap, DisentangledUNet)> {
        model_from_params(&self.config, &self.ema_params())
    }

    fn curriculum_config(&self) -> CurriculumConfig {
        CurriculumConfig {
            horizon: if self.config.ablations.no_curriculum { 0 } else { self.config.horizon },
            batch_size: self.config.batch_size,
            sigma: self.config.curriculum_sigma,
            seed: self.config.seed,
        }
    }

    /// The batch used at `iteration`, with the curriculum mean if the
    /// curriculum is still active.
    pub fn batch_for(&self, iteration: usize) -> Result<(Batch, Option<f64>)> {
        let cc = self.curriculum_config();
        let mut rng = iteration_rng(self.config.seed, iteration);
        let positions = sample_batch_positions(&self.data.index, iteration, &cc, &mut rng)?;
        let slices: Vec<&NormalizedSlice> = positions.iter().map(|&p| &self.data.slices[self.data.slice_of[p]]).collect();
        let mu = (iteration < cc.horizon)
            .then(|| curriculum_mu(iteration, cc.horizon, self.data.index.e_min(), self.data.index.e_max()));
        let batch = if self.config.augment {
            let moved: Vec<NormalizedSlice> = slices.iter().map(|s| s.transformed(rng.random_range(0..8))).collect();
            Batch::from_slices(&moved.iter().collect::<Vec<_>>(), &self.device)?
        } else {
            Batch::from_slices(&slices, &self.device)?
        };
        Ok((batch, mu))
    }

    /// Generator for the step and noise draws of `iteration`.
    pub fn noise_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ NOISE_SEED_SALT);
        rng.set_stream(iteration as u64);
        rng
    }

    /// One update on `batch`: per-sample `t` uniform in `1..=T`, Gaussian
    /// noise, the configured loss, clipped AdamW, then the EMA update.
    pub fn train_step<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<StepLosses> {
        let b = batch.x0.dim(0)?;
        let t_max = self.schedule.steps();
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
        let eps: Vec<f64> = (0..batch.x0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::from_vec(eps, batch.x0.shape(), &self.device)?;
        let x_t = q_sample(&batch.x0, &steps, &eps, &self.schedule)?;
        let out = self.model.forward(&x_t, &batch.cond, &steps)?;

        let weights = self.config.effective_weights();
        let kind = self.config.ablations.recon_loss();
        let disent = disentanglement_loss(&out.reps, weights.eps_div)?;
        let recon = reconstruction_loss(kind, &out.eps_pred, &eps, weights.gamma)?;
        let vlb = match &out.v_pred {
            Some(v) => Some(vlb_variance_loss(&batch.x0, &x_t, &steps, &out.eps_pred.detach(), Some(v), &self.schedule)?),
            None => None,
        };
        let terms = combine(&disent, &recon, vlb.as_ref(), &weights)?;
        let total = terms.total.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                steps,
                total,
                disent: terms.disent,
                recon: terms.recon,
                vlb: terms.vlb.unwrap_or(0.0),
            });
        }
        let mut grads = terms.total.backward()?;
        let grad_norm = optim::clip_grad_norm(&mut grads, &self.vars, self.config.grad_clip)?;
        self.opt.step(&grads, self.config.learning_rate_at(self.iteration))?;
        self.ema.update(&self.vars)?;
        Ok(StepLosses {
            total,
            disent: (!self.config.ablations.no_disent).then_some(terms.disent),
            recon: terms.recon,
            recon_kind: kind,
            vlb: terms.vlb,
            steps,
            grad_norm,
        })
    }

    /// Runs the next iteration and returns its log record.
    pub fn step(&mut self) -> Result<LogRecord> {
        let it = self.iteration;
        let (batch, mu) = self.batch_for(it)?;
        let mut rng = self.noise_rng(it);
        let l = self.train_step(&batch, &mut rng)?;
        self.iteration += 1;
        Ok(LogRecord {
            iteration: it,
            loss_total: l.total,
            loss_disent: l.disent,
            loss_charb: (l.recon_kind == ReconLoss::Charbonnier).then_some(l.recon),
            loss_mse: (l.recon_kind == ReconLoss::Mse).then_some(l.recon),
            loss_vlb: l.vlb,
            sampling: if mu.is_some() { "curriculum" } else { "uniform" }.into(),
            mu_entropy: mu,
            steps: l.steps,
            grad_norm: l.grad_norm,
        })
    }
}

/// Builds a model of `config.model` and loads `params` into it.
pub fn model_from_params(config: &TrainConfig, params: &BTreeMap<String, Tensor>) -> Result<(VarMap, DisentangledUNet)> {
    let (map, model) = init_model(&config.model, DType::F64, &Device::Cpu, config.seed)?;
    let (names, vars) = sorted_vars(&map);
    if names.len() != params.len() {
        return Err(Error::Config(format!(
            "expected {} parameters, found {}",
            names.len(),
            params.len()
        )));
    }
    for (name, var) in names.iter().zip(&vars) {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        var.set(&t.to_dtype(DType::F64)?)?;
    }
    Ok((map, model))
}

/// Model with the EMA weights of a checkpoint, used for sampling.
pub fn sampling_model(ck: &Checkpoint) -> Result<(VarMap, DisentangledUNet)> {
    model_from_params(ck.config(), &ck.ema)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: usize,
    pub final_loss: Option<f64>,
}

/// Trains on the train split of `manifest`, writing `config.json`,
/// `train_log.jsonl` and `checkpoint.safetensors` into `out_dir`. With
/// `resume`, continues from that checkpoint and appends to the log,
/// dropping records at or after the checkpoint's iteration.
pub fn train_loop(manifest: &Manifest, config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    train_loop_with(manifest, config, out_dir, resume, &mut |_| {})
}

/// [`train_loop`] with a callback receiving every log record.
pub fn train_loop_with(
    manifest: &Manifest,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let records = manifest.load_split(Split::Train)?;
    if records.is_empty() {
        return Err(Error::Empty("manifest has no training slices"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let ck_path = out_dir.join(CHECKPOINT_FILE);

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path, &Device::Cpu)?;
            let mut trainer = Trainer::from_checkpoint(&ck, &records)?;
            // The run length may be extended on resume; everything else comes
            // from the checkpoint.
            trainer.config.iterations = config.iterations.max(ck.iteration());
            truncate_log(&log_path, ck.iteration())?;
            trainer
        }
        None => {
            let _ = fs::remove_file(&log_path);
            Trainer::new(config.clone(), &records)?
        }
    };
    let cfg_text = serde_json::to_string_pretty(trainer.config())?;
    fs::write(out_dir.join(CONFIG_FILE), cfg_text).map_err(|e| Error::io(out_dir, e))?;

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = trainer.config().checkpoint_every;
    let mut final_loss = None;
    while trainer.iteration() < trainer.config().iterations {
        let record = trainer.step()?;
        final_loss = Some(record.loss_total);
        on_record(&record);
        serde_json::to_writer(&mut log, &record)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && trainer.iteration() % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint()?.save(&ck_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint()?.save(&ck_path)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        log: log_path,
        iterations: trainer.iteration(),
        final_loss,
    })
}

fn truncate_log(path: &Path, keep_below: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    // Surviving lines are copied verbatim rather than re-serialized.
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LogRecord = serde_json::from_str(line)?;
        if r.iteration < keep_below {
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
