//! Sequential runs of the three ablated training configurations and a
//! comparison table built from their logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalOptions, EvalReport};
use crate::training::{read_log, sampling_model, train_loop_with, Ablations, Checkpoint, LogRecord, TrainConfig};

/// Name and switches of each ablated configuration, in run order.
pub fn variants() -> [(&'static str, Ablations); 3] {
    let off = Ablations::default();
    [
        ("no_disent", Ablations { no_disent: true, ..off }),
        ("mse", Ablations { mse_instead_of_charbonnier: true, ..off }),
        ("no_curriculum", Ablations { no_curriculum: true, ..off }),
    ]
}

/// Which loss terms and sampling modes appear in a training log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogComposition {
    pub disent: bool,
    pub charbonnier: bool,
    pub mse: bool,
    pub vlb: bool,
    /// Sampling mode of the first record.
    pub first_sampling: String,
    pub records: usize,
}

impl LogComposition {
    /// A term counts as present only if every record carries it.
    pub fn of(records: &[LogRecord]) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("training log has no records"))?;
        let all = |f: fn(&LogRecord) -> bool| records.iter().all(f);
        let none = |f: fn(&LogRecord) -> bool| records.iter().all(|r| !f(r));
        let term = |name: &str, f: fn(&LogRecord) -> bool| {
            if all(f) {
                Ok(true)
            } else if none(f) {
                Ok(false)
            } else {
                Err(Error::Domain(format!("`{name}` is logged for only some iterations")))
            }
        };
        Ok(Self {
            disent: term("loss_disent", |r| r.loss_disent.is_some())?,
            charbonnier: term("loss_charb", |r| r.loss_charb.is_some())?,
            mse: term("loss_mse", |r| r.loss_mse.is_some())?,
            vlb: term("loss_vlb", |r| r.loss_vlb.is_some())?,
            first_sampling: first.sampling.clone(),
            records: records.len(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub ablations: Ablations,
    pub out_dir: PathBuf,
    pub composition: LogComposition,
    pub final_loss: Option<f64>,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

/// Trains every variant of [`variants`] from `base` into `out_dir/<name>`,
/// optionally scoring each on the requested split.
pub fn run_ablations(
    manifest: &Manifest,
    base: &TrainConfig,
    out_dir: &Path,
    eval: Option<&EvalOptions>,
    progress: &mut dyn FnMut(&str, &LogRecord),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for (name, ablations) in variants() {
        let config = TrainConfig { ablations, ..base.clone() };
        config.validate()?;
        let dir = out_dir.join(name);
        let outcome = train_loop_with(manifest, &config, &dir, None, &mut |r| progress(name, r))?;
        let composition = LogComposition::of(&read_log(&outcome.log)?)?;
        let eval = match eval {
            Some(opts) => {
                let ck = Checkpoint::load(&outcome.checkpoint, &candle_core::Device::Cpu)?;
                let (_vars, model) = sampling_model(&ck)?;
                let schedule = config.schedule.build()?.respace(config.sampling_steps)?;
                let opts = EvalOptions {
                    image_dir: opts.image_dir.as_ref().map(|d| d.join(name)),
                    ..opts.clone()
                };
                Some(evaluate_dataset(manifest, &model, &schedule, &opts)?)
            }
            None => None,
        };
        runs.push(AblationRun {
            name: name.to_string(),
            ablations,
            out_dir: dir,
            composition,
            final_loss: outcome.final_loss,
            eval,
        });
    }
    Ok(AblationReport { runs })
}

impl AblationReport {
    /// Markdown table with one row per configuration.
    pub fn table(&self) -> String {
        let mut s = String::from("| configuration | L_disent | reconstruction | L_vlb | sampling | final loss | PSNR | SSIM |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        let yes = |b: bool| if b { "yes" } else { "no" };
        for r in &self.runs {
            let c = &r.composition;
            let recon = match (c.charbonnier, c.mse) {
                (true, false) => "charbonnier",
                (false, true) => "mse",
                _ => "mixed",
            };
            let loss = r.final_loss.map_or("-".into(), |v| format!("{v:.5}"));
            let (psnr, ssim) = match &r.eval {
                Some(e) => (format!("{:.3}", e.mean_psnr), format!("{:.4}", e.mean_ssim)),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.name,
                yes(c.disent),
                recon,
                yes(c.vlb),
                c.first_sampling,
                loss,
                psnr,
                ssim
            );
        }
        s
    }
}
