use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::targets::{data_dropout, detection_loss, FrameTargets, NormStats, TargetMaps};
use super::{stack_inputs, DetectorConfig, RoadFusion};
use crate::bevgrid::BevTensor;
use crate::error::{Error, Result};
use crate::tensor::{Network, SgdMomentum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Road-channel dropout probability (input fusion only).
    pub dropout_prob: f64,
    pub augment: bool,
    pub seed: u64,
    /// Steps over which the learning rate ramps linearly up from zero.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.01,
            momentum: 0.9,
            batch: 4,
            epochs: 50,
            decay_epochs: vec![30, 45],
            decay_factor: 0.1,
            dropout_prob: 0.5,
            augment: false,
            seed: 0,
            warmup_steps: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("need lr >= 0 and momentum in [0, 1), got {} / {}", self.lr, self.momentum));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) || !(self.decay_factor > 0.0) {
            return bad(format!(
                "dropoutProb must be in [0, 1] and decayFactor > 0, got {} / {}",
                self.dropout_prob, self.decay_factor
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }

    /// Rate for optimizer step `step` (0-based) taken in `epoch`.
    pub fn lr_at_step(&self, epoch: usize, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        self.lr_at(epoch) * warm
    }
}

/// One prepared training frame.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: BevTensor,
    pub targets: TargetMaps,
    /// Output-grid road target for the multi-task head.
    pub road: Option<Vec<f32>>,
}

pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame `index`; `augment_seed` is set when augmentation is on and
    /// selects the transform.
    fn sample(&self, index: usize, augment_seed: Option<u64>) -> Result<TrainSample>;
}

impl SampleSource for Vec<TrainSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize, _augment_seed: Option<u64>) -> Result<TrainSample> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    /// Per-frame mean over the batch.
    pub cls: f64,
    pub reg: f64,
    pub road: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub cls: f64,
    pub reg: f64,
    pub road: f64,
    pub val_ap: Option<f64>,
}

pub struct TrainOutcome {
    pub net: Network<f32>,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// SGD with momentum over shuffled mini-batches. The loss of a step is the
/// mean over the batch of per-frame sums. `validate` runs after every epoch
/// and may return a validation AP. Results depend only on the inputs and
/// `hyper.seed`, not on the thread count.
pub fn train_detector(
    mut net: Network<f32>,
    cfg: &DetectorConfig,
    stats: &NormStats,
    data: &dyn SampleSource,
    hyper: &TrainHyper,
    validate: &mut dyn FnMut(&Network<f32>, usize) -> Result<Option<f64>>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("training set is empty".into()));
    }
    let mut order_rng = stream(hyper.seed, 1);
    let mut aug_rng = stream(hyper.seed, 2);
    let mut drop_rng = stream(hyper.seed, 3);
    let mut opt = SgdMomentum::new(hyper.lr, hyper.momentum);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(hyper.batch) {
            let seeds: Vec<Option<u64>> = chunk
                .iter()
                .map(|_| hyper.augment.then(|| aug_rng.random()))
                .collect();
            let mut samples = chunk
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| data.sample(i, s))
                .collect::<Result<Vec<_>>>()?;
            if cfg.road_fusion == RoadFusion::InputFusion {
                for s in &mut samples {
                    data_dropout(&mut s.input, hyper.dropout_prob, &mut drop_rng);
                }
            }
            let inputs: Vec<&BevTensor> = samples.iter().map(|s| &s.input).collect();
            let x = stack_inputs::<f32>(&inputs)?;
            let diverged = |e: Error| match e {
                Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch} step {step}: non-finite values in {what}")),
                e => e,
            };
            opt.lr = hyper.lr_at_step(epoch, step);
            let cache = net.forward(&x, true).map_err(diverged)?;
            let targets: Vec<FrameTargets> = samples
                .iter()
                .map(|s| FrameTargets {
                    maps: &s.targets,
                    road: s.road.as_deref(),
                })
                .collect();
            let (parts, mut d_out) = detection_loss(cache.output(net.spec.output), &targets, stats, cfg)?;
            let b = chunk.len() as f64;
            let total = parts.total(cfg.loss_weight) / b;
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} step {step}: loss {total} (cls {}, reg {}, road {}) at lr {}",
                    parts.cls, parts.reg, parts.road, opt.lr
                )));
            }
            d_out.scale(1.0 / b as f32);
            let grads = net.backward(&cache, &d_out, false).map_err(diverged)?;
            opt.step(&mut net, &grads)?;
            net.update_running_stats(&cache);
            let row = LogRow {
                epoch,
                step,
                cls: parts.cls / b,
                reg: parts.reg / b,
                road: parts.road / b,
                lr: opt.lr,
            };
            log::debug!("epoch {epoch} step {step} cls {:.4} reg {:.4} road {:.4}", row.cls, row.reg, row.road);
            sums.0 += row.cls;
            sums.1 += row.reg;
            sums.2 += row.road;
            sums.3 += 1;
            log.push(row);
            step += 1;
        }
        let n = sums.3 as f64;
        let val_ap = validate(&net, epoch)?;
        let summary = EpochSummary {
            epoch,
            cls: sums.0 / n,
            reg: sums.1 / n,
            road: sums.2 / n,
            val_ap,
        };
        log::info!(
            "epoch {epoch}: cls {:.4} reg {:.4} road {:.4} val AP {}",
            summary.cls,
            summary.reg,
            summary.road,
            val_ap.map_or("-".into(), |a| format!("{a:.4}"))
        );
        epochs.push(summary);
    }
    Ok(TrainOutcome { net, log, epochs })
}

/// CSV with columns `epoch,step,clsLoss,regLoss,lr`.
pub fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from("epoch,step,clsLoss,regLoss,lr\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.cls, r.reg, r.lr).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// CSV with columns `epoch,clsLoss,regLoss,roadLoss,valAP` (empty when no
/// validation ran).
pub fn write_epoch_log(path: &Path, rows: &[EpochSummary]) -> Result<()> {
    let mut s = String::from("epoch,clsLoss,regLoss,roadLoss,valAP\n");
    for r in rows {
        let ap = r.val_ap.map_or(String::new(), |a| a.to_string());
        writeln!(s, "{},{},{},{},{}", r.epoch, r.cls, r.reg, r.road, ap).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
