//! Discriminator rejection at test time: calibrate the normalizer on the
//! training set, map discriminator scores to acceptance probabilities, and
//! gate condition-generator outputs by a threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{ImageField, MaskField, PoseMap, SegMap};
use crate::imagegen::DiscriminatorBank;
use crate::nn::{Binding, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum RejectionError {
    #[error("calibration requires a nonempty score set")]
    EmptyCalibration,
    #[error("rejection input shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration file: {0}")]
    Format(String),
}

pub const REJECTION_EPSILON: f64 = 1e-6;

/// Discriminator-score statistics over a calibration set, yielding the
/// normalizer `L = max D/(1-D)` and the gate threshold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RejectionCalibration {
    pub version: u32,
    pub l: f64,
    pub threshold: f64,
    pub epsilon: f64,
    pub score_stats: Vec<f64>,
    pub histogram: Vec<u32>,
}

/// Channel concatenation in the fixed order `(S_hat, P, S_a, c, c_m)`.
pub fn build_rejection_input(
    seg: &SegMap,
    pose: &PoseMap,
    agnostic_parse: &SegMap,
    cloth: &ImageField,
    cloth_mask: &MaskField,
) -> Result<Tensor<f32>, RejectionError> {
    let hw = seg.hw();
    for (name, got) in [
        ("pose", pose.hw()),
        ("agnostic_parse", agnostic_parse.hw()),
        ("cloth", cloth.hw()),
        ("cloth_mask", cloth_mask.hw()),
    ] {
        if got != hw {
            return Err(RejectionError::ShapeMismatch(format!(
                "{name} is {got:?}, segmentation is {hw:?}"
            )));
        }
    }
    let (h, w) = hw;
    let cseg = seg.data.chw().0;
    let channels = cseg + 3 + cseg + 3 + 1;
    let mut data = Vec::with_capacity(channels * h * w);
    data.extend_from_slice(seg.data.data());
    data.extend_from_slice(pose.data.data());
    data.extend_from_slice(agnostic_parse.data.data());
    data.extend_from_slice(cloth.data.data());
    data.extend_from_slice(cloth_mask.data.data());
    Ok(Tensor::from_vec(&[channels, h, w], data))
}

/// Scalar probability-like discriminator output: the mean of the patch
/// score maps across both scales, clamped away from 0 and 1.
pub fn d_scalar(bank: &DiscriminatorBank, store: &ParamStore<f32>, x: &Tensor<f32>) -> f64 {
    let mut tape = Tape::<f32>::new();
    let mut bind = Binding::new(store, false);
    let xn = tape.constant(x.clone());
    let (scores, _) = bank.discriminate(&mut tape, &mut bind, store, xn, None);
    let mut acc = 0.0f64;
    for s in &scores {
        let v = tape.value(*s);
        let mean: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64;
        acc += mean;
    }
    clamp_score(acc / scores.len() as f64)
}

pub fn clamp_score(raw: f64) -> f64 {
    raw.clamp(REJECTION_EPSILON, 1.0 - REJECTION_EPSILON)
}

/// `L = max_x D(x)/(1-D(x))` over the calibration scores; all scores are
/// retained for threshold diagnostics.
pub fn estimate_l(scores: &[f64], threshold: f64) -> Result<RejectionCalibration, RejectionError> {
    if scores.is_empty() {
        return Err(RejectionError::EmptyCalibration);
    }
    let l = scores
        .iter()
        .map(|&d| d / (1.0 - d))
        .fold(f64::MIN, f64::max);
    let mut histogram = vec![0u32; 20];
    for &d in scores {
        let bin = ((d * 20.0) as usize).min(19);
        histogram[bin] += 1;
    }
    Ok(RejectionCalibration {
        version: 1,
        l,
        threshold,
        epsilon: REJECTION_EPSILON,
        score_stats: scores.to_vec(),
        histogram,
    })
}

/// `p_accept = min(1, (D/(1-D)) / L)`. Computed in ratio form so the
/// calibration argmax attains exactly 1.
pub fn p_accept(d: f64, calibration: &RejectionCalibration) -> f64 {
    let ratio = d / (1.0 - d);
    (ratio / calibration.l).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateDecision {
    Accept,
    /// Rejected; carries the acceptance probability for diagnostics.
    Reject(f64),
}

/// Deterministic threshold gate: accept iff `p_accept >= threshold`. No
/// uniform sampling; the threshold replaces it.
pub fn gate(d: f64, calibration: &RejectionCalibration) -> GateDecision {
    let p = p_accept(d, calibration);
    if p >= calibration.threshold {
        GateDecision::Accept
    } else {
        GateDecision::Reject(p)
    }
}

impl RejectionCalibration {
    pub fn save(&self, path: &std::path::Path) -> Result<(), RejectionError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| RejectionError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RejectionError> {
        let text = std::fs::read_to_string(path)?;
        let cal: Self =
            serde_json::from_str(&text).map_err(|e| RejectionError::Format(e.to_string()))?;
        if cal.version != 1 {
            return Err(RejectionError::Format(format!(
                "unsupported calibration version {}",
                cal.version
            )));
        }
        Ok(cal)
    }
}
