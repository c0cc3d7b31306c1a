//! Balanced and plain error measures, thresholded skill scores and rank
//! correlation.

mod kendall;
mod report;

pub use kendall::kendall_tau;
pub use report::{SkillAccumulator, SkillReport};

use serde::{Deserialize, Serialize};

use crate::data::codec::intensity_to_rainrate;
use crate::engine::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Piecewise weight of a ground-truth rain rate (mm/h).
pub fn rain_weight(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("rain rate must be >= 0, got {x}")));
    }
    Ok(if x < 2.0 {
        1.0
    } else if x < 5.0 {
        2.0
    } else if x < 10.0 {
        5.0
    } else if x < 30.0 {
        10.0
    } else {
        30.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Weighted by rain intensity (B-MSE + B-MAE).
    #[default]
    Balanced,
    /// Unit weights (MSE + MAE).
    Plain,
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Per-pixel weights from ground-truth rain rates; masked pixels get 0.
pub fn weight_map(truth_rate: &[f64], mask: Option<&[bool]>, mode: LossMode) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        check_len("weight_map", truth_rate.len(), m.len())?;
    }
    truth_rate
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if mask.is_some_and(|m| !m[i]) {
                return Ok(0.0);
            }
            match mode {
                LossMode::Balanced => rain_weight(x),
                LossMode::Plain => Ok(1.0),
            }
        })
        .collect()
}

/// [`weight_map`] for truth given as intensities in `[0, 1]`.
pub fn intensity_weight_map<T: Scalar>(truth: &Tensor<T>, mask: Option<&Tensor<T>>, mode: LossMode) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.shape() != truth.shape() {
            return Err(Error::shape(
                "weight_map",
                format!("mask {:?} vs truth {:?}", m.shape(), truth.shape()),
            ));
        }
    }
    let rates: Vec<f64> = truth.data().iter().map(|&v| intensity_to_rainrate(v.to_f64().unwrap().max(0.0))).collect();
    let mask_bits: Option<Vec<bool>> = mask.map(|m| m.data().iter().map(|&v| v > T::zero()).collect());
    let w = weight_map(&rates, mask_bits.as_deref(), mode)?;
    Tensor::from_vec(truth.shape(), w.into_iter().map(T::from_f64_lossy).collect())
}

fn weighted_sum(pred: &[f64], truth: &[f64], weights: &[f64], f: impl Fn(f64) -> f64) -> Result<f64> {
    check_len("weighted_error", pred.len(), truth.len())?;
    check_len("weighted_error", pred.len(), weights.len())?;
    Ok(pred
        .iter()
        .zip(truth)
        .zip(weights)
        .map(|((&p, &t), &w)| w * f(t - p))
        .sum())
}

fn per_frame(total: f64, frames: usize) -> Result<f64> {
    if frames == 0 {
        return Err(Error::InvalidArgument("frame count must be >= 1".into()));
    }
    Ok(total / frames as f64)
}

/// `(1/N) sum w (x - x_hat)^2` over `frames` frames.
pub fn bmse(pred: &[f64], truth: &[f64], weights: &[f64], frames: usize) -> Result<f64> {
    per_frame(weighted_sum(pred, truth, weights, |d| d * d)?, frames)
}

/// `(1/N) sum w |x - x_hat|` over `frames` frames.
pub fn bmae(pred: &[f64], truth: &[f64], weights: &[f64], frames: usize) -> Result<f64> {
    per_frame(weighted_sum(pred, truth, weights, f64::abs)?, frames)
}

fn unit_weights(len: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    match mask {
        Some(m) => {
            check_len("mask", len, m.len())?;
            Ok(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        }
        None => Ok(vec![1.0; len]),
    }
}

pub fn mse(pred: &[f64], truth: &[f64], mask: Option<&[bool]>, frames: usize) -> Result<f64> {
    bmse(pred, truth, &unit_weights(pred.len(), mask)?, frames)
}

pub fn mae(pred: &[f64], truth: &[f64], mask: Option<&[bool]>, frames: usize) -> Result<f64> {
    bmae(pred, truth, &unit_weights(pred.len(), mask)?, frames)
}

/// `(B-MSE + B-MAE)` (or the unit-weight variant, depending on how
/// `weights` was built) of `pred` over `frames` frames, on the tape.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: &Tensor<T>,
    weights: &Tensor<T>,
    frames: usize,
) -> Result<Var> {
    if frames == 0 {
        return Err(Error::InvalidArgument("frame count must be >= 1".into()));
    }
    let se = tape.weighted_squared_error(pred, truth, weights)?;
    let ae = tape.weighted_abs_error(pred, truth, weights)?;
    let sum = tape.add(se, ae)?;
    Ok(tape.scale(sum, T::one() / T::from_usize(frames).unwrap()))
}

/// Confusion counts for one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn merge(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.tn += o.tn;
    }
}

/// Binarise with `value >= tau` and count over unmasked pixels.
pub fn confusion(pred: &[f64], truth: &[f64], tau: f64, mask: Option<&[bool]>) -> Result<ConfusionCounts> {
    check_len("confusion", pred.len(), truth.len())?;
    if let Some(m) = mask {
        check_len("confusion", pred.len(), m.len())?;
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be > 0, got {tau}")));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match (p >= tau, t >= tau) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FN + FP)`; `None` when the denominator is 0 (the sample is
/// excluded from averages).
pub fn csi(c: &ConfusionCounts) -> Option<f64> {
    let d = c.tp + c.fn_ + c.fp;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HssVariant {
    /// `(TP TN - FN FP) / ((TP+FN)(FN+TN) + (TP+FP)(FP+TN))`: a perfect
    /// forecast scores 0.5.
    #[default]
    Printed,
    /// The conventional Heidke score, twice the printed form.
    Standard,
}

/// Heidke skill score; `None` when the denominator is 0.
pub fn hss(c: &ConfusionCounts, variant: HssVariant) -> Option<f64> {
    let (tp, fn_, fp, tn) = (c.tp as f64, c.fn_ as f64, c.fp as f64, c.tn as f64);
    let d = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
    if d == 0.0 {
        return None;
    }
    let v = (tp * tn - fn_ * fp) / d;
    Some(match variant {
        HssVariant::Printed => v,
        HssVariant::Standard => 2.0 * v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_at_breakpoints() {
        let w: Vec<f64> = [0.3, 2.0, 4.99, 5.0, 10.0, 29.9, 30.0]
            .iter()
            .map(|&x| rain_weight(x).unwrap())
            .collect();
        assert_eq!(w, vec![1.0, 2.0, 2.0, 5.0, 10.0, 10.0, 30.0]);
        assert!(rain_weight(-0.1).is_err());
    }

    #[test]
    fn single_pixel_losses() {
        let w = weight_map(&[12.0], None, LossMode::Balanced).unwrap();
        assert_eq!(bmse(&[10.0], &[12.0], &w, 1).unwrap(), 40.0);
        assert_eq!(bmae(&[10.0], &[12.0], &w, 1).unwrap(), 20.0);
        assert_eq!(mse(&[0.0], &[3.0], None, 1).unwrap(), 9.0);
        assert_eq!(mae(&[0.0], &[3.0], None, 1).unwrap(), 3.0);
        let masked = weight_map(&[12.0], Some(&[false]), LossMode::Balanced).unwrap();
        assert_eq!(bmse(&[0.0], &[12.0], &masked, 1).unwrap(), 0.0);
    }

    #[test]
    fn skill_examples() {
        let c = ConfusionCounts { tp: 2, fn_: 1, fp: 1, tn: 0 };
        assert_eq!(csi(&c), Some(0.5));
        assert_eq!(csi(&ConfusionCounts { tn: 4, ..Default::default() }), None);
        let c = ConfusionCounts { tp: 50, fn_: 0, fp: 0, tn: 50 };
        assert_eq!(hss(&c, HssVariant::Printed), Some(0.5));
        assert_eq!(hss(&c, HssVariant::Standard), Some(1.0));
        let c = ConfusionCounts { tp: 3, fn_: 1, fp: 1, tn: 5 };
        assert_eq!(hss(&c, HssVariant::Printed), Some(14.0 / 48.0));
    }

    #[test]
    fn four_pixel_confusion() {
        let tau = 1.0;
        let truth = [2.0, 2.0, 0.0, 0.0];
        let pred = [2.0, 0.0, 2.0, 0.0];
        let c = confusion(&pred, &truth, tau, None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fn_: 1, fp: 1, tn: 1 });
        let c = confusion(&pred, &truth, tau, Some(&[true, false, false, true])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fn_: 0, fp: 0, tn: 1 });
    }
}
