//! Pretraining losses: masked-patch and covered-region reconstruction, the
//! online/target similarity term, and their weighted total.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{BinaryMask, MaskPair};

/// Stabilizer added to the per-patch variance of normalized pixel targets.
pub const PIXEL_NORM_EPS: f64 = 1e-6;
pub const INFONCE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fr: f64,
    pub lambda_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fr: 0.007,
            lambda_cl: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fr >= 0.0 && self.lambda_cl >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got lambda_fr={} lambda_cl={}",
                self.lambda_fr, self.lambda_cl
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rec_m: f64,
    pub rec_fr: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(rec_m: f64, rec_fr: f64, sim: f64, weights: &LossWeights) -> Self {
        LossBundle {
            rec_m,
            rec_fr,
            sim,
            total: rec_m + weights.lambda_fr * rec_fr + weights.lambda_cl * sim,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rec_m, self.rec_fr, self.sim, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimLoss {
    #[default]
    AsymmetricNcs,
    Infonce,
    Mse,
}

/// Sample mean and unbiased variance of one patch vector.
pub fn patch_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Reconstruction targets from patches `(B, N, P)`. With `normalize`, each
/// patch is standardized by its own mean and unbiased variance.
pub fn pixel_target(patches: &Tensor, normalize: bool) -> Result<Tensor> {
    let patches = patches.detach();
    if !normalize {
        return Ok(patches);
    }
    let p = patches.dim(D::Minus1)?;
    let mean = patches.mean_keepdim(D::Minus1)?;
    let centered = patches.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .affine(1.0 / (p.max(2) - 1) as f64, 0.0)?;
    Ok(centered.broadcast_div(&(var + PIXEL_NORM_EPS)?.sqrt()?)?)
}

/// Per-sample weights `mask / Σmask`; samples with an empty mask get all zeros
/// unless `require_nonempty` is set.
fn normalized_weights(masks: &[&BinaryMask], like: &Tensor, require_nonempty: bool) -> Result<Tensor> {
    let n = masks.first().map_or(0, |m| m.len());
    let mut w = Vec::with_capacity(masks.len() * n);
    for (b, m) in masks.iter().enumerate() {
        let count = m.count();
        if count == 0 && require_nonempty {
            return Err(Error::Loss(format!("sample {b} has no masked patch")));
        }
        let inv = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        w.extend(m.as_slice().iter().map(|&v| if v { inv } else { 0.0 }));
    }
    Ok(Tensor::from_vec(w, (masks.len(), n), like.device())?.to_dtype(like.dtype())?)
}

fn weighted_patch_mse(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Loss(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        )));
    }
    let per_patch = (pred - target)?.sqr()?.mean(D::Minus1)?;
    let per_sample = (per_patch * weights)?.sum(D::Minus1)?;
    Ok(per_sample.mean_all()?)
}

/// Mean over masked patches of the per-patch pixel MSE, averaged over the batch.
pub fn loss_rec_masked(pred: &Tensor, target: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
    let m: Vec<&BinaryMask> = masks.iter().map(|p| &p.mask).collect();
    let w = normalized_weights(&m, pred, true)?;
    weighted_patch_mse(pred, target, &w)
}

/// Mean over the covered-region patches of the per-patch pixel MSE; zero for
/// samples whose region mask is empty.
pub fn loss_rec_region(pred: &Tensor, target: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
    let m: Vec<&BinaryMask> = masks.iter().map(|p| &p.region_mask).collect();
    let w = normalized_weights(&m, pred, false)?;
    weighted_patch_mse(pred, target, &w)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Similarity loss between online predictions `(B, O)` and target projections.
/// The target is always treated as a constant.
pub fn loss_sim(online: &Tensor, target: &Tensor, variant: SimLoss) -> Result<Tensor> {
    if online.dims() != target.dims() || online.rank() != 2 {
        return Err(Error::Loss(format!(
            "similarity inputs {:?} and {:?} must be matching (B, O) matrices",
            online.dims(),
            target.dims()
        )));
    }
    let a = l2_normalize(online)?;
    let b = l2_normalize(&target.detach())?;
    match variant {
        SimLoss::AsymmetricNcs => Ok((a * b)?.sum(D::Minus1)?.mean_all()?.neg()?),
        SimLoss::Mse => Ok((a - b)?.sqr()?.sum(D::Minus1)?.mean_all()?),
        SimLoss::Infonce => {
            let batch = a.dim(0)?;
            let logits = a.matmul(&b.t()?)?.affine(1.0 / INFONCE_TEMPERATURE, 0.0)?;
            let max = logits.max_keepdim(D::Minus1)?.detach();
            let lse = logits
                .broadcast_sub(&max)?
                .exp()?
                .sum_keepdim(D::Minus1)?
                .log()?
                .add(&max)?
                .squeeze(1)?;
            let eye = Tensor::eye(batch, logits.dtype(), logits.device())?;
            let positives = (logits * eye)?.sum(D::Minus1)?;
            Ok((lse - positives)?.mean_all()?)
        }
    }
}

/// Differentiable loss components of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rec_m: Tensor,
    pub rec_fr: Tensor,
    pub sim: Tensor,
}

impl LossTerms {
    pub fn compute(
        pred: &Tensor,
        target_pixels: &Tensor,
        online: &Tensor,
        target_vec: &Tensor,
        masks: &[MaskPair],
        sim: SimLoss,
    ) -> Result<Self> {
        Ok(LossTerms {
            rec_m: loss_rec_masked(pred, target_pixels, masks)?,
            rec_fr: loss_rec_region(pred, target_pixels, masks)?,
            sim: loss_sim(online, target_vec, sim)?,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// `rec_m + λ_fr·rec_fr + λ_cl·sim` as a differentiable scalar, with the
/// component values.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossBundle)> {
    let total = ((&terms.rec_m + terms.rec_fr.affine(weights.lambda_fr, 0.0)?)?
        + terms.sim.affine(weights.lambda_cl, 0.0)?)?;
    let bundle = LossBundle {
        rec_m: scalar(&terms.rec_m)?,
        rec_fr: scalar(&terms.rec_fr)?,
        sim: scalar(&terms.sim)?,
        total: scalar(&total)?,
    };
    Ok((total, bundle))
}
