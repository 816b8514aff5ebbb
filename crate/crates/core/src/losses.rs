//! Joint objective: spatially weighted noise regression plus dice-based
//! segmentation of the source and future masks.

use serde::{Deserialize, Serialize};

use crate::denoiser::layers::sigmoid;
use crate::denoiser::MASK_SESSIONS;
use crate::diffusion::ImageTensor;
use crate::schedule::ScheduleTable;
use crate::{Error, Result};

/// Four `H x W` mask maps ordered s1, s2, s3, f. Predictions hold
/// probabilities, ground truth holds 0/1.
pub type MaskTensor = ImageTensor;

/// How the weighted squared noise residual is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub k_l: usize,
    pub filter_init: f64,
    pub mse_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            k_l: 11,
            filter_init: 0.1,
            mse_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be finite and >= 0"));
        }
        if self.k_l == 0 || self.k_l.is_multiple_of(2) {
            return Err(Error::config("loss.k_l", "must be an odd positive integer"));
        }
        if !self.filter_init.is_finite() {
            return Err(Error::config("loss.filter_init", "must be finite"));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "{what}: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `1 - 2 sum(p g) / (sum|p| + sum|g|)`; 0 when both masks are empty.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred, gt, "dice_loss")?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().map(|p| p.abs()).sum::<f64>() + gt.iter().map(|g| g.abs()).sum::<f64>();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / denom)
}

/// Gradient of [`dice_loss`] with respect to non-negative predictions.
pub fn dice_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_len(pred, gt, "dice_loss_grad")?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().map(|p| p.abs()).sum::<f64>() + gt.iter().map(|g| g.abs()).sum::<f64>();
    if denom == 0.0 {
        return Ok(vec![0.0; pred.len()]);
    }
    let d2 = denom * denom;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| -2.0 * g / denom + 2.0 * inter * p.signum() / d2)
        .collect())
}

fn check_masks(pred: &MaskTensor, gt: &MaskTensor) -> Result<()> {
    pred.ensure_same_shape(gt, "seg_loss")?;
    if pred.shape().channels != MASK_SESSIONS {
        return Err(Error::Argument(format!(
            "mask tensors need {MASK_SESSIONS} sessions, got {}",
            pred.shape().channels
        )));
    }
    Ok(())
}

/// Mean source dice plus the future dice weighted by `sqrt(abar_t)`.
pub fn seg_loss(pred: &MaskTensor, gt: &MaskTensor, t: usize, table: &ScheduleTable) -> Result<f64> {
    check_masks(pred, gt)?;
    table.check_step(t)?;
    let mut src = 0.0;
    for s in 0..3 {
        src += dice_loss(pred.channel(s), gt.channel(s))?;
    }
    let fut = dice_loss(pred.channel(3), gt.channel(3))?;
    Ok(src / 3.0 + table.alpha_bar(t).sqrt() * fut)
}

/// Gradient of [`seg_loss`] with respect to the predicted probabilities.
pub fn seg_loss_grad(
    pred: &MaskTensor,
    gt: &MaskTensor,
    t: usize,
    table: &ScheduleTable,
) -> Result<Vec<f64>> {
    check_masks(pred, gt)?;
    table.check_step(t)?;
    let mut out = Vec::with_capacity(pred.data().len());
    for s in 0..MASK_SESSIONS {
        let w = if s < 3 {
            1.0 / 3.0
        } else {
            table.alpha_bar(t).sqrt()
        };
        out.extend(
            dice_loss_grad(pred.channel(s), gt.channel(s))?
                .into_iter()
                .map(|g| w * g),
        );
    }
    Ok(out)
}

/// `omega = (m e^-m) * f_{k x k} + 1` where `m` is the per-pixel count of
/// positive ground-truth sessions and `f` a constant `k_l x k_l` filter.
/// Same-size output with zero padding.
pub fn weight_map(gt: &MaskTensor, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let shape = gt.shape();
    let (h, w) = (shape.height, shape.width);
    let plane = shape.plane();
    let mut f = vec![0.0; plane];
    for c in 0..shape.channels {
        for (acc, v) in f.iter_mut().zip(gt.channel(c)) {
            *acc += v;
        }
    }
    f.iter_mut().for_each(|m| *m *= (-*m).exp());

    // Separable box sum via prefix sums.
    let r = cfg.k_l / 2;
    let mut rows = vec![0.0; plane];
    let mut prefix = vec![0.0; w.max(h) + 1];
    for y in 0..h {
        for x in 0..w {
            prefix[x + 1] = prefix[x] + f[y * w + x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = prefix[hi + 1] - prefix[lo];
        }
    }
    let mut out = vec![0.0; plane];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + rows[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = 1.0 + cfg.filter_init * (prefix[hi + 1] - prefix[lo]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub weighted_mse: f64,
    pub seg: f64,
}

fn weighted_mse(eps: &ImageTensor, eps_hat: &ImageTensor, omega: &[f64], red: Reduction) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "joint_loss")?;
    let plane = eps.shape().plane();
    if omega.len() != plane {
        return Err(Error::Argument("weight map does not match image plane".into()));
    }
    let mut s = 0.0;
    for (i, (a, b)) in eps.data().iter().zip(eps_hat.data()).enumerate() {
        let r = omega[i % plane] * (a - b);
        s += r * r;
    }
    Ok(match red {
        Reduction::Sum => s,
        Reduction::Mean => s / eps.data().len() as f64,
    })
}

/// `||omega (eps - eps_hat)||^2 + lambda * seg_loss`, with `omega` broadcast
/// over the noise channels.
pub fn joint_loss(
    eps: &ImageTensor,
    eps_hat: &ImageTensor,
    pred_masks: &MaskTensor,
    gt_masks: &MaskTensor,
    t: usize,
    table: &ScheduleTable,
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let omega = weight_map(gt_masks, cfg)?;
    joint_loss_with_weights(eps, eps_hat, pred_masks, gt_masks, &omega, t, table, cfg)
}

#[allow(clippy::too_many_arguments)]
pub fn joint_loss_with_weights(
    eps: &ImageTensor,
    eps_hat: &ImageTensor,
    pred_masks: &MaskTensor,
    gt_masks: &MaskTensor,
    omega: &[f64],
    t: usize,
    table: &ScheduleTable,
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let wm = weighted_mse(eps, eps_hat, omega, cfg.mse_reduction)?;
    let seg = seg_loss(pred_masks, gt_masks, t, table)?;
    Ok(JointLoss {
        total: wm + cfg.lambda * seg,
        weighted_mse: wm,
        seg,
    })
}

/// Gradient of the weighted noise term with respect to `eps_hat`:
/// `-2 omega^2 (eps - eps_hat)` (divided by the element count for `Mean`).
pub fn weighted_mse_grad(
    eps: &ImageTensor,
    eps_hat: &ImageTensor,
    omega: &[f64],
    red: Reduction,
) -> Result<Vec<f64>> {
    eps.ensure_same_shape(eps_hat, "weighted_mse_grad")?;
    let plane = eps.shape().plane();
    let scale = match red {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / eps.data().len() as f64,
    };
    Ok(eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let w = omega[i % plane];
            -2.0 * w * w * (a - b) * scale
        })
        .collect())
}

/// Loss and gradients for raw network outputs: mask logits pass through a
/// logistic squashing before the dice terms.
pub struct LossGradients {
    pub loss: JointLoss,
    pub d_eps_hat: Vec<f64>,
    pub d_mask_logits: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn joint_loss_from_logits(
    eps: &ImageTensor,
    eps_hat: &ImageTensor,
    mask_logits: &ImageTensor,
    gt_masks: &MaskTensor,
    omega: &[f64],
    t: usize,
    table: &ScheduleTable,
    cfg: &LossConfig,
) -> Result<LossGradients> {
    let probs = mask_logits.map(sigmoid);
    let loss = joint_loss_with_weights(eps, eps_hat, &probs, gt_masks, omega, t, table, cfg)?;
    let d_eps_hat = weighted_mse_grad(eps, eps_hat, omega, cfg.mse_reduction)?;
    let d_probs = seg_loss_grad(&probs, gt_masks, t, table)?;
    let d_mask_logits = d_probs
        .iter()
        .zip(probs.data())
        .map(|(d, p)| cfg.lambda * d * p * (1.0 - p))
        .collect();
    Ok(LossGradients {
        loss,
        d_eps_hat,
        d_mask_logits,
    })
}
