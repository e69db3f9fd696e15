//! Pretraining loop: masking, dual-branch forward, combined loss, AdamW step
//! on the online branch and EMA update of the target branch.

mod checkpoint;
mod optim;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{save_checkpoint, CheckpointMeta, CheckpointReader, RngState, CHECKPOINT_FORMAT};
pub use optim::{accumulate, collect_grads, decays, AdamW, AdamWConfig, ParamState, ADAM_EPS};

use crate::backbone::{BackboneConfig, DualBranchModel, EmaSchedule, TargetView};
use crate::error::{Error, Result};
use crate::facedata::{load_batch, DatasetManifest, FaceSample, PatchRegionTable, RegionTaxonomy};
use crate::masking::{sample_mask, MaskConfig, MaskPair, Strategy};
use crate::objectives::{pixel_target, total_loss, LossBundle, LossTerms, LossWeights, SimLoss};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSettings {
    pub strategy: Strategy,
    pub ratio: f64,
}

impl Default for MaskSettings {
    fn default() -> Self {
        MaskSettings {
            strategy: Strategy::CrfrP,
            ratio: 0.75,
        }
    }
}

fn default_warmup() -> usize {
    2
}
fn default_base_lr() -> f64 {
    1.5e-4
}
fn default_tau_base() -> f64 {
    0.996
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    pub effective_batch: usize,
    /// Samples per forward pass; gradients of `effective_batch / micro_batch`
    /// passes are accumulated. Defaults to the effective batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub mask: MaskSettings,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub sim_loss: SimLoss,
    #[serde(default = "default_true")]
    pub normalize_pixels: bool,
    #[serde(default = "default_tau_base")]
    pub tau_base: f64,
    #[serde(default)]
    pub target_view: TargetView,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults around `backbone`.
    pub fn desk(backbone: BackboneConfig, epochs: usize, effective_batch: usize) -> Self {
        TrainConfig {
            backbone,
            epochs,
            warmup_epochs: default_warmup().min(epochs.saturating_sub(1)),
            base_lr: default_base_lr(),
            effective_batch,
            micro_batch: None,
            optimizer: AdamWConfig::default(),
            mask: MaskSettings::default(),
            loss: LossWeights::default(),
            sim_loss: SimLoss::default(),
            normalize_pixels: true,
            tau_base: default_tau_base(),
            target_view: TargetView::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.micro_batch.unwrap_or(self.effective_batch)
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig::new(self.mask.strategy, self.mask.ratio, self.seed)
    }

    /// Independent mask stream for the target encoder's visible view.
    pub fn target_mask_config(&self) -> MaskConfig {
        MaskConfig::new(
            self.mask.strategy,
            self.mask.ratio,
            rng::derive_seed("target_mask", &[self.seed]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.mask_config().validate()?;
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.effective_batch == 0 {
            return bad("effective_batch must be at least 1".into());
        }
        let micro = self.micro_batch();
        if micro == 0 || !self.effective_batch.is_multiple_of(micro) {
            return bad(format!(
                "micro_batch {micro} must divide effective_batch {}",
                self.effective_batch
            ));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and nonnegative", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return bad(format!("tau_base {} outside [0, 1]", self.tau_base));
        }
        Ok(())
    }
}

/// Step counts derived from a config and a dataset size. Incomplete final
/// batches of an epoch are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Plan {
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        let steps_per_epoch = dataset_len / cfg.effective_batch.max(1);
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "dataset of {dataset_len} samples is smaller than effective_batch {}",
                cfg.effective_batch
            )));
        }
        Ok(Plan {
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
            warmup_steps: steps_per_epoch * cfg.warmup_epochs,
        })
    }
}

/// Linear warmup from 0 to `base_lr·batch/256`, then cosine decay reaching 0
/// at `total_steps`.
pub fn lr_at(base_lr: f64, effective_batch: usize, warmup_steps: usize, total_steps: usize, step: usize) -> f64 {
    let peak = base_lr * effective_batch as f64 / 256.0;
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: LossBundle,
    pub wall_time_s: f64,
}

impl StepRecord {
    /// Equality on everything except wall time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        self.step == other.step && self.lr == other.lr && self.tau == other.tau && self.loss == other.loss
    }
}

/// A training sample with its patches and region table precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub patches: Vec<f32>,
    pub table: PatchRegionTable,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub samples: Vec<PreparedSample>,
}

impl TrainData {
    pub fn from_samples(samples: &[FaceSample], cfg: &BackboneConfig, taxonomy: &RegionTaxonomy) -> Result<Self> {
        let samples = samples
            .iter()
            .map(|s| {
                if s.image.width() != cfg.image_size || s.image.height() != cfg.image_size {
                    return Err(Error::DimensionMismatch(format!(
                        "sample {} is {}x{}, model expects {}x{}",
                        s.id,
                        s.image.width(),
                        s.image.height(),
                        cfg.image_size,
                        cfg.image_size
                    )));
                }
                Ok(PreparedSample {
                    id: s.id.clone(),
                    patches: s.image.patchify(cfg.patch_size)?,
                    table: s.region_table(cfg.patch_size, taxonomy)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData { samples })
    }

    pub fn from_manifest(manifest: &DatasetManifest, cfg: &BackboneConfig, taxonomy: &RegionTaxonomy) -> Result<Self> {
        let indices: Vec<usize> = (0..manifest.len()).collect();
        Self::from_samples(&load_batch(manifest, &indices, taxonomy)?, cfg, taxonomy)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Owns the model, optimizer and data for one pretraining run.
#[derive(Debug)]
pub struct Pretrainer {
    cfg: TrainConfig,
    plan: Plan,
    ema: EmaSchedule,
    model: DualBranchModel,
    optim: AdamW,
    data: TrainData,
    step: usize,
    dump_dir: Option<PathBuf>,
}

impl Pretrainer {
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let plan = Plan::new(&cfg, data.len())?;
        let ema = EmaSchedule::new(cfg.tau_base, plan.total_steps)?;
        let model = DualBranchModel::new(cfg.backbone.clone(), cfg.seed)?;
        let optim = AdamW::new(cfg.optimizer, &model.online_params())?;
        Ok(Pretrainer {
            cfg,
            plan,
            ema,
            model,
            optim,
            data,
            step: 0,
            dump_dir: None,
        })
    }

    /// Rebuilds a run from a checkpoint; training continues at the saved step.
    pub fn resume(path: &Path, data: TrainData) -> Result<Self> {
        let reader = CheckpointReader::open(path)?;
        let meta = reader.meta().clone();
        let mut trainer = Pretrainer::new(meta.config, data)?;
        reader.load_into("online", &trainer.model.online_params())?;
        reader.load_into("target", &trainer.model.target_params())?;
        reader.load_optimizer(&mut trainer.optim)?;
        if meta.rng.seed != trainer.cfg.seed {
            return Err(Error::Checkpoint("stored RNG seed differs from the config seed".into()));
        }
        trainer.step = meta.rng.next_step;
        Ok(trainer)
    }

    /// Non-finite losses write a diagnostic JSON file here.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn plan(&self) -> Plan {
        self.plan
    }

    pub fn model(&self) -> &DualBranchModel {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.plan.total_steps
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(
            self.cfg.base_lr,
            self.cfg.effective_batch,
            self.plan.warmup_steps,
            self.plan.total_steps,
            step,
        )
    }

    /// Sample indices of the effective batch at `step`; the order within each
    /// epoch is a seeded permutation.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let epoch = step / self.plan.steps_per_epoch;
        let within = step % self.plan.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::stream("order", &[self.cfg.seed, epoch as u64]));
        let b = self.cfg.effective_batch;
        order[within * b..(within + 1) * b].to_vec()
    }

    fn masks_for(&self, cfg: &MaskConfig, indices: &[usize], epoch: u64) -> Result<Vec<MaskPair>> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.data.samples[i];
                sample_mask(&s.table, &cfg.for_sample(&s.id, epoch))
            })
            .collect()
    }

    /// Loss of one micro-batch as a differentiable scalar.
    pub fn micro_batch_loss(&self, indices: &[usize], epoch: u64) -> Result<(Tensor, LossBundle)> {
        let patches: Vec<Vec<f32>> = indices.iter().map(|&i| self.data.samples[i].patches.clone()).collect();
        let x = self.model.patches_tensor(&patches)?;
        let masks = self.masks_for(&self.cfg.mask_config(), indices, epoch)?;
        let target_masks = match self.cfg.target_view {
            TargetView::VisibleOtherMask => Some(self.masks_for(&self.cfg.target_mask_config(), indices, epoch)?),
            _ => None,
        };
        let out = self
            .model
            .forward(&x, &masks, self.cfg.target_view, target_masks.as_deref())?;
        let target = pixel_target(&x, self.cfg.normalize_pixels)?;
        let terms = LossTerms::compute(&out.pred, &target, &out.online, &out.target, &masks, self.cfg.sim_loss)?;
        total_loss(&terms, &self.cfg.loss)
    }

    fn non_finite(&self, step: usize, bundle: &LossBundle, indices: &[usize]) -> Error {
        let ids: Vec<&str> = indices.iter().map(|&i| self.data.samples[i].id.as_str()).collect();
        let report = serde_json::json!({
            "step": step,
            "lr": self.lr(step),
            "loss": bundle,
            "samples": ids,
        })
        .to_string();
        let dump = match &self.dump_dir {
            Some(dir) => {
                let path = dir.join(format!("nonfinite_step{step}.json"));
                match std::fs::write(&path, &report) {
                    Ok(()) => path.display().to_string(),
                    Err(_) => report,
                }
            }
            None => report,
        };
        Error::NonFiniteLoss { step, dump }
    }

    /// One effective step: accumulated gradients over micro-batches, one
    /// AdamW update, one EMA update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step;
        if self.is_finished() {
            return Err(Error::Config(format!("training already finished at step {step}")));
        }
        let lr = self.lr(step);
        let tau = self.ema.tau(step);
        let epoch = (step / self.plan.steps_per_epoch) as u64;
        let batch = self.batch_indices(step);
        let mut grads = Vec::new();
        let (mut rec_m, mut rec_fr, mut sim) = (0.0, 0.0, 0.0);
        {
            let params = self.model.online_params();
            for chunk in batch.chunks(self.cfg.micro_batch()) {
                let (loss, bundle) = self.micro_batch_loss(chunk, epoch)?;
                if !bundle.is_finite() {
                    return Err(self.non_finite(step, &bundle, chunk));
                }
                let share = chunk.len() as f64 / batch.len() as f64;
                rec_m += share * bundle.rec_m;
                rec_fr += share * bundle.rec_fr;
                sim += share * bundle.sim;
                let store = loss.affine(share, 0.0)?.backward()?;
                accumulate(&mut grads, collect_grads(&store, &params))?;
            }
        }
        let params = self.model.online_params();
        self.optim.step(&params, &grads, lr)?;
        self.model.ema_update(tau)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            tau,
            loss: LossBundle::new(rec_m, rec_fr, sim, &self.cfg.loss),
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs up to `n` steps, stopping early at the end of the schedule.
    pub fn run(&mut self, n: usize) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            out.push(self.train_step()?);
        }
        Ok(out)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.cfg.clone(),
            step: self.step,
            optim_t: self.optim.t,
            rng: RngState {
                seed: self.cfg.seed,
                next_step: self.step,
            },
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.checkpoint_meta(),
            &self.model.online_params(),
            &self.model.target_params(),
            &self.optim,
        )
    }
}

/// Both branches of a saved run, for diagnostics. The optimizer state is not read.
pub fn load_model(path: &Path) -> Result<(DualBranchModel, CheckpointMeta)> {
    let reader = CheckpointReader::open(path)?;
    let meta = reader.meta().clone();
    let model = DualBranchModel::new(meta.config.backbone.clone(), meta.config.seed)?;
    reader.load_into("online", &model.online_params())?;
    reader.load_into("target", &model.target_params())?;
    Ok((model, meta))
}
