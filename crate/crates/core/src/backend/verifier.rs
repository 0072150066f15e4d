use serde::{Deserialize, Serialize};

use super::learn::{ExtraTrees, TreeParams};
use super::predictor::Predictor;
use super::BackendError;
use crate::hwsim::{FingerprintValue, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifierKind {
    RelativeErrorThreshold,
    HammingThreshold,
    LearnedClassifier,
}

impl std::str::FromStr for VerifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relative" | "threshold" => Ok(VerifierKind::RelativeErrorThreshold),
            "hamming" => Ok(VerifierKind::HammingThreshold),
            "learned" | "classifier" => Ok(VerifierKind::LearnedClassifier),
            _ => Err(format!("unknown verifier kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub target_tpr: f64,
    /// Largest Hamming threshold tried.
    pub hamming_max: u32,
    /// Relative-error floor in units of the robust residual scale.
    pub floor_sigmas: f64,
    pub trees: TreeParams,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            target_tpr: 0.97,
            hamming_max: 8,
            floor_sigmas: 10.0,
            trees: TreeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    RelativeError { tau: f64, floor: f64 },
    Hamming { t: u32 },
    Learned { forest: ExtraTrees, floor: f64 },
}

/// Rates measured while calibrating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tpr: f64,
    pub fpr: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verifier {
    pub rule: Rule,
    pub calibration: Calibration,
}

impl Verifier {
    pub fn kind(&self) -> VerifierKind {
        match self.rule {
            Rule::RelativeError { .. } => VerifierKind::RelativeErrorThreshold,
            Rule::Hamming { .. } => VerifierKind::HammingThreshold,
            Rule::Learned { .. } => VerifierKind::LearnedClassifier,
        }
    }

    pub fn relative(tau: f64, floor: f64) -> Self {
        Verifier {
            rule: Rule::RelativeError { tau, floor },
            calibration: Calibration::empty(),
        }
    }

    pub fn hamming(t: u32) -> Self {
        Verifier {
            rule: Rule::Hamming { t },
            calibration: Calibration::empty(),
        }
    }

    /// Short human-readable form of the rule.
    pub fn rule_summary(&self) -> String {
        match &self.rule {
            Rule::RelativeError { tau, floor } => {
                format!("relative tau={tau:.4} floor={floor:.4e}")
            }
            Rule::Hamming { t } => format!("hamming t={t}"),
            Rule::Learned { .. } => "learned classifier".to_string(),
        }
    }
}

impl Calibration {
    fn empty() -> Self {
        Calibration {
            tpr: f64::NAN,
            fpr: f64::NAN,
            positives: 0,
            negatives: 0,
        }
    }
}

/// Relative deviation of `observed` from `predicted`, guarded by `floor`.
pub fn relative_error(predicted: f64, observed: f64, floor: f64) -> f64 {
    (observed - predicted).abs() / predicted.abs().max(floor)
}

fn classifier_features(pred: f64, obs: f64, floor: f64) -> Vec<f64> {
    let err = (obs - pred).abs();
    vec![pred, obs, err, relative_error(pred, obs, floor)]
}

/// Accepts or rejects one observed fingerprint.
pub fn verify_one(
    verifier: &Verifier,
    predicted: FingerprintValue,
    observed: FingerprintValue,
) -> Result<bool, BackendError> {
    use FingerprintValue::*;
    match (&verifier.rule, predicted, observed) {
        (Rule::RelativeError { tau, floor }, Analog(p), Analog(o)) => {
            Ok(relative_error(p, o, *floor) <= *tau)
        }
        (Rule::Learned { forest, floor }, Analog(p), Analog(o)) => {
            Ok(forest.predict(&classifier_features(p, o, *floor)) >= 0.5)
        }
        (Rule::Hamming { t }, Bits32(p), Bits32(o)) => Ok((p ^ o).count_ones() <= *t),
        (Rule::Learned { forest, .. }, Bits32(p), Bits32(o)) => {
            Ok(forest.predict(&[(p ^ o).count_ones() as f64]) >= 0.5)
        }
        _ => Err(BackendError::TagMismatch),
    }
}

fn predictions(
    predictor: &Predictor,
    pairs: &[TrainingPair],
) -> Vec<(FingerprintValue, FingerprintValue)> {
    pairs
        .iter()
        .filter_map(|p| {
            predictor
                .predict(&p.task)
                .ok()
                .map(|pred| (pred, p.fingerprint))
        })
        .filter(|(pred, obs)| pred.same_kind(obs))
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust scale (1.4826 · MAD) of the absolute prediction residuals.
fn residual_scale(pos: &[(FingerprintValue, FingerprintValue)]) -> f64 {
    let mut r: Vec<f64> = pos
        .iter()
        .filter_map(|(p, o)| Some(o.as_analog()? - p.as_analog()?))
        .collect();
    if r.is_empty() {
        return 0.0;
    }
    let m = median(&mut r.clone());
    let mut dev: Vec<f64> = r.iter_mut().map(|x| (*x - m).abs()).collect();
    1.4826 * median(&mut dev)
}

fn rate(accepted: usize, total: usize) -> f64 {
    if total == 0 {
        f64::NAN
    } else {
        accepted as f64 / total as f64
    }
}

/// Smallest element of `scores` that at least `target` of them do not exceed.
fn quantile_threshold(scores: &mut [f64], target: f64) -> f64 {
    scores.sort_by(f64::total_cmp);
    let need = ((target * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    scores[need - 1]
}

/// Builds a verifier from held-out positives and other devices' negatives.
pub fn calibrate_verifier(
    predictor: &Predictor,
    pos_pairs: &[TrainingPair],
    neg_pairs: &[TrainingPair],
    kind: VerifierKind,
    params: &CalibrationParams,
) -> Result<Verifier, BackendError> {
    let pos = predictions(predictor, pos_pairs);
    if pos.is_empty() {
        return Err(BackendError::NoPositives(predictor.feature()));
    }
    let neg = predictions(predictor, neg_pairs);
    if neg.is_empty() {
        return Err(BackendError::NoNegatives(predictor.feature()));
    }
    let bits = matches!(pos[0].0, FingerprintValue::Bits32(_));
    let rule = match (kind, bits) {
        (VerifierKind::HammingThreshold, true) => {
            let dist = |(p, o): &(FingerprintValue, FingerprintValue)| {
                (p.as_bits().unwrap_or(0) ^ o.as_bits().unwrap_or(0)).count_ones()
            };
            let t = (0..=params.hamming_max)
                .find(|&t| {
                    rate(pos.iter().filter(|x| dist(x) <= t).count(), pos.len())
                        >= params.target_tpr
                })
                .unwrap_or(params.hamming_max);
            Rule::Hamming { t }
        }
        (VerifierKind::RelativeErrorThreshold, false) => {
            let floor = (params.floor_sigmas * residual_scale(&pos)).max(f64::MIN_POSITIVE);
            let mut scores: Vec<f64> = pos
                .iter()
                .map(|(p, o)| {
                    relative_error(
                        p.as_analog().unwrap_or(0.0),
                        o.as_analog().unwrap_or(0.0),
                        floor,
                    )
                })
                .collect();
            let tau = quantile_threshold(&mut scores, params.target_tpr).max(1e-12);
            Rule::RelativeError { tau, floor }
        }
        (VerifierKind::LearnedClassifier, _) => {
            let floor = if bits {
                0.0
            } else {
                (params.floor_sigmas * residual_scale(&pos)).max(f64::MIN_POSITIVE)
            };
            let feats = |(p, o): &(FingerprintValue, FingerprintValue)| match (p, o) {
                (FingerprintValue::Bits32(p), FingerprintValue::Bits32(o)) => {
                    vec![(p ^ o).count_ones() as f64]
                }
                _ => classifier_features(
                    p.as_analog().unwrap_or(0.0),
                    o.as_analog().unwrap_or(0.0),
                    floor,
                ),
            };
            let mut x: Vec<Vec<f64>> = pos.iter().map(feats).collect();
            x.extend(neg.iter().map(feats));
            let mut y = vec![1.0; pos.len()];
            y.extend(std::iter::repeat_n(0.0, neg.len()));
            Rule::Learned {
                forest: ExtraTrees::fit(&x, &y, params.trees),
                floor,
            }
        }
        (kind, _) => return Err(BackendError::UnsupportedVerifier(predictor.feature(), kind)),
    };
    let mut verifier = Verifier {
        rule,
        calibration: Calibration::empty(),
    };
    let accepted = |set: &[(FingerprintValue, FingerprintValue)]| {
        set.iter()
            .filter(|(p, o)| verify_one(&verifier, *p, *o).unwrap_or(false))
            .count()
    };
    let calibration = Calibration {
        tpr: rate(accepted(&pos), pos.len()),
        fpr: rate(accepted(&neg), neg.len()),
        positives: pos.len(),
        negatives: neg.len(),
    };
    verifier.calibration = calibration;
    Ok(verifier)
}
