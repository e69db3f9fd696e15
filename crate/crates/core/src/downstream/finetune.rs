use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_auc, ScoreRecord};
use crate::backbone::nn::{join, Init, Linear};
use crate::backbone::{BackboneConfig, Encoder, Params};
use crate::error::{Error, Result};
use crate::facedata::{load_batch, DatasetManifest, FaceSample, RegionTaxonomy};
use crate::pretrainer::{accumulate, collect_grads, AdamW, AdamWConfig, CheckpointReader};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Linear,
    Mlp,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_hidden() -> usize {
    256
}
fn default_wd() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Pretraining checkpoint; only its online encoder is read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Expected backbone. Required without a checkpoint (random
    /// initialization); with one, it must equal the stored config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default = "default_hidden")]
    pub mlp_hidden: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(checkpoint: Option<PathBuf>, epochs: usize) -> Self {
        FinetuneConfig {
            checkpoint,
            backbone: None,
            head: HeadKind::Linear,
            mlp_hidden: default_hidden(),
            epochs,
            base_lr: default_lr(),
            batch: default_batch(),
            weight_decay: default_wd(),
            freeze_backbone: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("finetune epochs must be at least 1".into());
        }
        if self.batch == 0 || self.mlp_hidden == 0 {
            return bad("batch and mlp_hidden must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be finite and nonnegative".into());
        }
        if self.checkpoint.is_none() && self.backbone.is_none() {
            return bad("finetuning needs a checkpoint or a backbone config".into());
        }
        if let Some(b) = &self.backbone {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Linear(Linear),
    Mlp { fc1: Linear, fc2: Linear },
}

impl Head {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Head::Linear(l) => l.forward(x),
            Head::Mlp { fc1, fc2 } => fc2.forward(&fc1.forward(x)?.gelu_erf()?),
        }
    }
}

impl Params for Head {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        match self {
            Head::Linear(l) => l.visit(&join(prefix, "fc"), out),
            Head::Mlp { fc1, fc2 } => {
                fc1.visit(&join(prefix, "fc1"), out);
                fc2.visit(&join(prefix, "fc2"), out);
            }
        }
    }
}

/// Encoder plus a two-logit head on the mean of the non-class tokens.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: BackboneConfig,
    pub encoder: Encoder,
    pub head: Head,
}

impl Params for Classifier {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.head.visit(&join(prefix, "head"), out);
    }
}

impl Classifier {
    pub fn new(config: BackboneConfig, head: HeadKind, mlp_hidden: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let mut init = Init::new(rng::stream("finetune_init", &[seed]), dtype, Device::Cpu);
        let encoder = Encoder::new(&mut init, &config)?;
        let width = config.encoder.width;
        let head = match head {
            HeadKind::Linear => Head::Linear(Linear::new(&mut init, width, 2)?),
            HeadKind::Mlp => Head::Mlp {
                fc1: Linear::new(&mut init, width, mlp_hidden)?,
                fc2: Linear::new(&mut init, mlp_hidden, 2)?,
            },
        };
        Ok(Classifier { config, encoder, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn patches_tensor(&self, patches: &[&[f32]]) -> Result<Tensor> {
        let n = self.config.num_patches();
        let p = self.config.patch_dim();
        if let Some(bad) = patches.iter().position(|s| s.len() != n * p) {
            return Err(Error::DimensionMismatch(format!(
                "sample {bad} has {} patch values, expected {}",
                patches[bad].len(),
                n * p
            )));
        }
        let flat: Vec<f32> = patches.iter().flat_map(|s| s.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (patches.len(), n, p), &Device::Cpu)?.to_dtype(self.config.precision.dtype())?)
    }

    /// Logits `(B, 2)`; index 1 is the real class.
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        let keep = vec![(0..n).collect::<Vec<_>>(); b];
        let tokens = self.encoder.forward(patches, &keep, false)?.0;
        let skip = usize::from(self.encoder.has_class_token());
        let pooled = tokens.narrow(1, skip, n)?.mean(1)?;
        self.head.forward(&pooled)
    }

    /// Probability of the real class for each sample.
    pub fn scores(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let logits = self.forward(patches)?.to_dtype(DType::F64)?;
        let probs = crate::backbone::nn::softmax_last(&logits)?;
        Ok(probs.narrow(1, 1, 1)?.squeeze(1)?.to_vec1()?)
    }

    /// Saves encoder and head weights with the backbone config as metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .named_params("")
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let kind = match self.head {
            Head::Linear(_) => HeadKind::Linear,
            Head::Mlp { .. } => HeadKind::Mlp,
        };
        let mut info = HashMap::new();
        info.insert("backbone".to_string(), serde_json::to_string(&self.config)?);
        info.insert("head".to_string(), serde_json::to_string(&kind)?);
        safetensors::serialize_to_file(tensors, Some(info), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Cross-entropy of two-class logits against 0/1 labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if b != labels.len() || c != 2 {
        return Err(Error::Loss(format!(
            "logits {:?} do not match {} binary labels",
            logits.dims(),
            labels.len()
        )));
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_probs = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)?;
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&l| if l == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let onehot = Tensor::from_vec(onehot, (b, 2), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_probs * onehot)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub patches: Vec<f32>,
    pub label: u8,
}

#[derive(Debug, Clone, Default)]
pub struct LabeledData {
    pub samples: Vec<LabeledSample>,
}

impl LabeledData {
    pub fn from_samples(samples: &[FaceSample], patch_size: usize) -> Result<Self> {
        let samples = samples
            .iter()
            .map(|s| {
                let label = s
                    .label
                    .ok_or_else(|| Error::Manifest(format!("sample {} has no label", s.id)))?;
                Ok(LabeledSample {
                    id: s.id.clone(),
                    patches: s.image.patchify(patch_size)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledData { samples })
    }

    pub fn from_manifest(manifest: &DatasetManifest, patch_size: usize) -> Result<Self> {
        if !manifest.is_labeled() {
            return Err(Error::Manifest("finetuning needs a labeled manifest".into()));
        }
        let indices: Vec<usize> = (0..manifest.len()).collect();
        let samples = load_batch(manifest, &indices, &RegionTaxonomy::standard())?;
        Self::from_samples(&samples, patch_size)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// None when the data has a single class.
    pub train_auc: Option<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub classifier: Classifier,
    pub history: Vec<EpochRecord>,
    /// Checkpoint tensors read while initializing the backbone.
    pub checkpoint_trace: Vec<String>,
}

/// Builds the classifier, loading the online encoder from the checkpoint if
/// one is configured.
pub fn build_classifier(cfg: &FinetuneConfig) -> Result<(Classifier, Vec<String>)> {
    cfg.validate()?;
    match &cfg.checkpoint {
        Some(path) => {
            let reader = CheckpointReader::open(path)?;
            let stored = &reader.meta().config.backbone;
            if let Some(expected) = &cfg.backbone {
                if expected != stored {
                    return Err(Error::Config(format!(
                        "checkpoint backbone (image {}, patch {}) differs from the configured backbone (image {}, patch {})",
                        stored.image_size, stored.patch_size, expected.image_size, expected.patch_size
                    )));
                }
            }
            let clf = Classifier::new(stored.clone(), cfg.head, cfg.mlp_hidden, cfg.seed)?;
            reader.load_into("online", &clf.encoder.named_params("encoder"))?;
            Ok((clf, reader.trace()))
        }
        None => {
            let backbone = cfg.backbone.clone().expect("validated");
            Ok((Classifier::new(backbone, cfg.head, cfg.mlp_hidden, cfg.seed)?, Vec::new()))
        }
    }
}

/// Scores every sample, in order.
pub fn predict(clf: &Classifier, data: &LabeledData, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch.max(1)) {
        let views: Vec<&[f32]> = chunk.iter().map(|s| s.patches.as_slice()).collect();
        out.extend(clf.scores(&clf.patches_tensor(&views)?)?);
    }
    Ok(out)
}

pub fn score_records(data: &LabeledData, scores: &[f64]) -> Vec<ScoreRecord> {
    data.samples
        .iter()
        .zip(scores)
        .map(|(s, &score)| ScoreRecord {
            id: s.id.clone(),
            video_id: None,
            score,
            label: s.label,
        })
        .collect()
}

/// End-to-end finetuning with cross-entropy at a constant learning rate.
pub fn finetune(cfg: &FinetuneConfig, data: &LabeledData) -> Result<FinetuneOutcome> {
    if data.is_empty() {
        return Err(Error::Manifest("finetuning data is empty".into()));
    }
    let (clf, checkpoint_trace) = build_classifier(cfg)?;
    let image = clf.config().image_size;
    let expected = clf.config().num_patches() * clf.config().patch_dim();
    if let Some(s) = data.samples.iter().find(|s| s.patches.len() != expected) {
        return Err(Error::DimensionMismatch(format!(
            "sample {} does not match the {image}px backbone with patch size {}",
            s.id,
            clf.config().patch_size
        )));
    }
    let trainable: Vec<(String, &Var)> = if cfg.freeze_backbone {
        clf.head.named_params("head")
    } else {
        clf.named_params("")
    };
    let mut optim = AdamW::new(
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: cfg.weight_decay,
        },
        &trainable,
    )?;
    let labels = data.labels();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream("finetune_order", &[cfg.seed, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let views: Vec<&[f32]> = chunk.iter().map(|&i| data.samples[i].patches.as_slice()).collect();
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&clf.forward(&clf.patches_tensor(&views)?)?, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch,
                    dump: format!("finetune loss {value} on {} samples", chunk.len()),
                });
            }
            loss_sum += value * chunk.len() as f64;
            let store = loss.backward()?;
            let mut grads = Vec::new();
            accumulate(&mut grads, collect_grads(&store, &trainable))?;
            optim.step(&trainable, &grads, cfg.base_lr)?;
        }
        let scores = predict(&clf, data, cfg.batch)?;
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
            .count();
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_auc: compute_auc(&scores, &labels).ok(),
            train_accuracy: correct as f64 / data.len() as f64,
        });
        log::debug!("finetune epoch {epoch}: {:?}", history.last());
    }
    drop(trainable);
    Ok(FinetuneOutcome {
        classifier: clf,
        history,
        checkpoint_trace,
    })
}
