//! Training objective: focal + L1 base segmentation loss, the
//! confidence-weighted segmentation loss, the image-level focal loss, and
//! their sum.
//!
//! The confidence transform C = 1 + exp(c) multiplies the per-pixel base
//! loss and is regularised by −α·log C (natural log). Probabilities are
//! clipped to [1e-7, 1−1e-7] inside logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainForward;
use crate::tensor::{ops, same_shape, GradTape, Tensor};

pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the focal term inside the base segmentation loss.
    pub beta: f64,
    /// Weight of the confidence regulariser.
    pub alpha_conf: f64,
    pub focal_gamma: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 5.0,
            alpha_conf: 0.1,
            focal_gamma: 2.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 || self.alpha_conf < 0.0 || self.focal_gamma < 0.0 {
            return Err(Error::Config(format!(
                "loss config out of range: beta {}, alpha {}, gamma {}",
                self.beta, self.alpha_conf, self.focal_gamma
            )));
        }
        Ok(())
    }
}

/// Scalar components of one loss evaluation. `l_base` is assembled from its
/// parts so the breakdown identity l_base = l1 + beta·focal holds exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub focal_pixel: f64,
    pub l_base: f64,
    pub l_seg: f64,
    pub l_img: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l1,focal_pixel,l_seg,l_img,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{},{},{},{},{},{}",
            step, self.l1, self.focal_pixel, self.l_seg, self.l_img, self.total
        )
    }
}

fn check_prob_domain(prob: &Tensor) -> Result<()> {
    if prob.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(
            "probabilities must lie strictly inside (0, 1)".into(),
        ));
    }
    Ok(())
}

fn check_binary(target: &Tensor) -> Result<()> {
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Domain("target mask must be binary".into()));
    }
    Ok(())
}

/// Per-element focal term −(1−p_t)^γ·ln(p_t) with p_t = prob where the
/// target is 1 and 1−prob elsewhere. The target is a constant.
fn focal_elements(prob: &Tensor, target: &Tensor, gamma: f64, tape: &mut GradTape) -> Result<Tensor> {
    // p_t = (2t−1)·p + (1−t), affine in p with constant coefficients
    let coeff = Tensor::from_fn(target.shape(), |i| 2.0 * target.data()[i] - 1.0);
    let offset = Tensor::from_fn(target.shape(), |i| 1.0 - target.data()[i]);
    let scaled = ops::mul(prob, &coeff, tape)?;
    let pt = ops::add(&scaled, &offset, tape)?;
    let one_minus = ops::add_scalar(&ops::scale(&pt, -1.0, tape)?, 1.0, tape)?;
    let weight = ops::pow_const(&one_minus, gamma, tape)?;
    let log_pt = ops::ln(&ops::clip(&pt, PROB_CLIP, 1.0 - PROB_CLIP, tape)?, tape)?;
    ops::neg(&ops::mul(&weight, &log_pt, tape)?, tape)
}

/// Mean focal loss over all elements.
pub fn focal(prob: &Tensor, target: &Tensor, gamma: f64, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("focal", prob, target)?;
    check_prob_domain(prob)?;
    check_binary(target)?;
    let elems = focal_elements(prob, target, gamma, tape)?;
    ops::mean(&elems, tape)
}

/// Mean absolute difference.
pub fn l1(map: &Tensor, target: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("l1", map, target)?;
    let diff = ops::sub(map, target, tape)?;
    ops::mean(&ops::abs(&diff, tape)?, tape)
}

/// L1 + beta·focal as a scalar.
pub fn base_seg_loss(
    map_prob: &Tensor,
    m_gt: &Tensor,
    cfg: &LossConfig,
    tape: &mut GradTape,
) -> Result<Tensor> {
    let l1_term = l1(map_prob, m_gt, tape)?;
    let focal_term = focal(map_prob, m_gt, cfg.focal_gamma, tape)?;
    ops::add(&l1_term, &ops::scale(&focal_term, cfg.beta, tape)?, tape)
}

/// Pre-reduction base-loss integrand per pixel: |p−m| + beta·focal_elem.
pub fn per_pixel_base(
    map_prob: &Tensor,
    m_gt: &Tensor,
    cfg: &LossConfig,
    tape: &mut GradTape,
) -> Result<Tensor> {
    same_shape("per_pixel_base", map_prob, m_gt)?;
    check_prob_domain(map_prob)?;
    check_binary(m_gt)?;
    let l1_px = ops::abs(&ops::sub(map_prob, m_gt, tape)?, tape)?;
    let focal_px = focal_elements(map_prob, m_gt, cfg.focal_gamma, tape)?;
    ops::add(&l1_px, &ops::scale(&focal_px, cfg.beta, tape)?, tape)
}

/// Mean over pixels of base·(1+e^c) − alpha·ln(1+e^c).
pub fn confidence_weighted_loss(
    per_pixel: &Tensor,
    c: &Tensor,
    alpha_conf: f64,
    tape: &mut GradTape,
) -> Result<Tensor> {
    same_shape("confidence_weighted_loss", per_pixel, c)?;
    let cmap = ops::add_scalar(&ops::exp(c, tape)?, 1.0, tape)?;
    let weighted = ops::mul(per_pixel, &cmap, tape)?;
    let reg = ops::scale(&ops::softplus(c, tape)?, alpha_conf, tape)?;
    ops::mean(&ops::sub(&weighted, &reg, tape)?, tape)
}

/// d/dc of the confidence-weighted integrand: e^c·ℓ − alpha·σ(c).
/// Non-negative wherever ℓ ≥ alpha, so low confidence only pays off on
/// pixels whose base loss is already small.
pub fn confidence_derivative(ell: f64, c: f64, alpha_conf: f64) -> f64 {
    let ec = c.exp();
    ec * ell - alpha_conf * (ec / (1.0 + ec))
}

/// Focal loss on the scalar image score.
pub fn image_loss(score: &Tensor, label: bool, gamma: f64, tape: &mut GradTape) -> Result<Tensor> {
    if !score.is_scalar() {
        return Err(Error::Contract(format!(
            "image score must be scalar, got {:?}",
            score.shape()
        )));
    }
    let target = Tensor::scalar(if label { 1.0 } else { 0.0 });
    focal(score, &target, gamma, tape)
}

/// Full objective on one sample. Returns the scalar components and the
/// differentiable total.
pub fn total_loss(
    fwd: &TrainForward,
    m_gt: &Tensor,
    label: bool,
    cfg: &LossConfig,
    tape: &mut GradTape,
) -> Result<(LossBreakdown, Tensor)> {
    cfg.validate()?;
    same_shape("total_loss", &fwd.map_logits, m_gt)?;
    check_binary(m_gt)?;

    let map_prob = ops::sigmoid(&fwd.map_logits, tape)?;
    let l1_term = l1(&map_prob, m_gt, tape)?;
    let focal_term = focal(&map_prob, m_gt, cfg.focal_gamma, tape)?;
    let per_px = per_pixel_base(&map_prob, m_gt, cfg, tape)?;
    let l_seg = confidence_weighted_loss(&per_px, &fwd.confidence, cfg.alpha_conf, tape)?;

    let score_prob = ops::sigmoid(&fwd.score_logit, tape)?;
    let l_img = image_loss(&score_prob, label, cfg.focal_gamma, tape)?;

    let total = ops::add(&l_seg, &l_img, tape)?;
    let l1_v = l1_term.item()?;
    let focal_v = focal_term.item()?;
    let breakdown = LossBreakdown {
        l1: l1_v,
        focal_pixel: focal_v,
        l_base: l1_v + cfg.beta * focal_v,
        l_seg: l_seg.item()?,
        l_img: l_img.item()?,
        total: total.item()?,
    };
    Ok((breakdown, total))
}
