//! Task losses with analytic gradients.
//!
//! Every loss is reduced by averaging over its own elements, so the weights
//! in [`LossWeights`] keep their meaning regardless of sample counts.
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.

use serde::{Deserialize, Serialize};

use super::{DetectError, Result};
use crate::geometry::{BinaryMask, SoftMask};

pub const PROB_EPS: f64 = 1e-12;
pub const MASK_SIZE: usize = 28;
/// Default focusing parameter for the focal mask loss.
pub const FOCAL_GAMMA: f64 = 2.0;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln p(true class)` for a probability vector that sums to one.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(DetectError::ClassOutOfRange {
            index: target,
            classes: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DetectError::NotADistribution(sum));
    }
    Ok(-probs[target].max(PROB_EPS).ln())
}

/// Cross entropy of `softmax(logits)` against `target`, with the gradient
/// with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let mut probs = softmax(logits);
    let loss = cross_entropy(&probs, target)?;
    probs[target] -= 1.0;
    Ok((loss, probs))
}

/// Smooth L1 per coordinate (`0.5 x^2` below 1, `|x| - 0.5` above), averaged.
pub fn smooth_l1(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(DetectError::LengthMismatch(predicted.len(), target.len()));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = (p - t).abs();
            if x < 1.0 {
                0.5 * x * x
            } else {
                x - 0.5
            }
        })
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Gradient of [`smooth_l1`] with respect to `predicted`.
pub fn smooth_l1_grad(predicted: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if predicted.len() != target.len() {
        return Err(DetectError::LengthMismatch(predicted.len(), target.len()));
    }
    let n = predicted.len().max(1) as f64;
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                x / n
            } else {
                x.signum() / n
            }
        })
        .collect())
}

fn check_lengths(pred: usize, target: usize) -> Result<()> {
    if pred != target {
        Err(DetectError::LengthMismatch(pred, target))
    } else {
        Ok(())
    }
}

/// Mean per-pixel binary cross entropy on probabilities.
pub fn bce(pred: &[f64], target: &[bool]) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n)
}

/// Gradient of [`bce`] with respect to the probabilities.
pub fn bce_grad(pred: &[f64], target: &[bool]) -> Result<Vec<f64>> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Mean per-pixel binary cross entropy on logits, with the logit gradient.
pub fn bce_with_logits(logits: &[f64], target: &[bool]) -> Result<(f64, Vec<f64>)> {
    focal_with_logits(logits, target, 0.0)
}

/// Mean focal loss `-(1 - p_t)^gamma ln p_t` on probabilities, where `p_t`
/// is `p` for foreground pixels and `1 - p` for background ones.
pub fn focal(pred: &[f64], target: &[bool], gamma: f64) -> Result<f64> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pt = clamp_prob(if y { p } else { 1.0 - p });
            -(1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum::<f64>()
        / n)
}

/// Gradient of [`focal`] with respect to the probabilities.
pub fn focal_grad(pred: &[f64], target: &[bool], gamma: f64) -> Result<Vec<f64>> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pt = clamp_prob(if y { p } else { 1.0 - p });
            let q = 1.0 - pt;
            let d_pt = if gamma == 0.0 {
                -1.0 / pt
            } else {
                gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt
            };
            let sign = if y { 1.0 } else { -1.0 };
            sign * d_pt / n
        })
        .collect())
}

/// Focal loss on logits with the logit gradient. `gamma = 0` is plain BCE.
pub fn focal_with_logits(logits: &[f64], target: &[bool], gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_lengths(logits.len(), target.len())?;
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(target) {
        let sign = if y { 1.0 } else { -1.0 };
        let pt_raw = sigmoid(sign * z);
        let pt = clamp_prob(pt_raw);
        // ln p_t computed stably from the logit, then floored like the clamp
        let log_pt = log_sigmoid(sign * z).max(PROB_EPS.ln());
        let q = 1.0 - pt;
        let w = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        loss += -w * log_pt;
        // d/dz = s * [gamma * p_t * q^gamma * ln p_t - q^(gamma+1)]
        let g = if pt_raw != pt {
            0.0
        } else {
            sign * (gamma * pt * w * log_pt - w * q)
        };
        grad.push(g / n);
    }
    Ok((loss / n, grad))
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn check_mask_dims(h: usize, w: usize) -> Result<()> {
    if h != MASK_SIZE || w != MASK_SIZE {
        Err(DetectError::MaskSize {
            expected: MASK_SIZE,
            height: h,
            width: w,
        })
    } else {
        Ok(())
    }
}

fn mask_vectors(pred: &SoftMask, target: &BinaryMask) -> Result<(Vec<f64>, Vec<bool>)> {
    check_mask_dims(pred.height(), pred.width())?;
    check_mask_dims(target.height(), target.width())?;
    Ok((
        pred.values().iter().map(|&v| v as f64).collect(),
        target.bits().to_vec(),
    ))
}

/// Per-pixel binary cross entropy between a predicted 28x28 mask and its target.
pub fn mask_bce(pred: &SoftMask, target: &BinaryMask) -> Result<f64> {
    let (p, y) = mask_vectors(pred, target)?;
    bce(&p, &y)
}

/// Focal variant of [`mask_bce`]; `gamma = 0` reduces to it exactly.
pub fn mask_focal(pred: &SoftMask, target: &BinaryMask, gamma: f64) -> Result<f64> {
    let (p, y) = mask_vectors(pred, target)?;
    focal(&p, &y, gamma)
}

/// Weights of the four task losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rpn: f64,
    pub class: f64,
    pub bbox: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn: 1.0,
            class: 1.0,
            bbox: 1.0,
            mask: 2.0,
        }
    }
}

/// Values of the four task losses for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rpn: f64,
    pub class: f64,
    pub bbox: f64,
    pub mask: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.rpn, self.class, self.bbox, self.mask]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        ["rpn", "class", "bbox", "mask"]
            .into_iter()
            .zip(self.as_array())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.rpn * c.rpn + w.class * c.class + w.bbox * c.bbox + w.mask * c.mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        // clamped, not infinite
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() + PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(&[0.0], &[0.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[2.0, 0.5], &[0.0, 0.0]).unwrap(), (1.5 + 0.125) / 2.0);
        assert!(smooth_l1(&[1.0], &[]).is_err());
    }

    #[test]
    fn mask_losses_closed_forms() {
        let target = BinaryMask::from_fn(28, 28, |r, c| (r + c) % 3 == 0).unwrap();
        let half = SoftMask::filled(28, 28, 0.5).unwrap();
        assert!((mask_bce(&half, &target).unwrap() - 2f64.ln()).abs() < 1e-12);
        let perfect = target.to_soft();
        assert!(mask_bce(&perfect, &target).unwrap() < 1e-10);
        assert!(mask_focal(&perfect, &target, 2.0).unwrap() < 1e-10);
        let wrong = SoftMask::filled(14, 14, 0.5).unwrap();
        assert!(matches!(
            mask_bce(&wrong, &BinaryMask::new(14, 14).unwrap()),
            Err(DetectError::MaskSize { .. })
        ));
    }

    #[test]
    fn focal_single_pixel() {
        let v = focal(&[0.9], &[true], 2.0).unwrap();
        assert!((v - 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((v - 1.0536e-3).abs() < 1e-7);
        assert!(focal(&[1.0], &[true], 2.0).unwrap() < 1e-30);
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..50);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            assert!((focal(&p, &y, 0.0).unwrap() - bce(&p, &y).unwrap()).abs() < 1e-9);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let a = focal_with_logits(&z, &y, 0.0).unwrap();
            let b = bce_with_logits(&z, &y).unwrap();
            assert!((a.0 - b.0).abs() < 1e-9);
            let probs: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
            assert!((a.0 - bce(&probs, &y).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_weights() {
        let ones = LossComponents { rpn: 1.0, class: 1.0, bbox: 1.0, mask: 1.0 };
        assert_eq!(total_loss(&ones, &LossWeights::default()), 5.0);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let c: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..5.0));
            let w: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
            let comps = LossComponents { rpn: c[0], class: c[1], bbox: c[2], mask: c[3] };
            let weights = LossWeights { rpn: w[0], class: w[1], bbox: w[2], mask: w[3] };
            let dot: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((total_loss(&comps, &weights) - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_component_is_named() {
        let c = LossComponents { rpn: 0.1, class: f64::NAN, bbox: 0.0, mask: f64::INFINITY };
        assert_eq!(c.first_non_finite(), Some("class"));
    }
}
