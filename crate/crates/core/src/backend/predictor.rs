use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::learn::{ExtraTrees, KnnRegressor, TreeParams};
use super::BackendError;
use crate::hwsim::{reference_response, FingerprintValue, Model, TrainingPair};
use crate::mapping::{Feature, HardwareTask, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorKind {
    NearestNeighbor,
    RandomizedTreeEnsemble,
    ExactTable,
}

impl std::str::FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "knn" | "nearest-neighbor" => Ok(PredictorKind::NearestNeighbor),
            "trees" | "extra-trees" => Ok(PredictorKind::RandomizedTreeEnsemble),
            "table" | "exact-table" => Ok(PredictorKind::ExactTable),
            _ => Err(format!("unknown predictor kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub k: usize,
    pub trees: TreeParams,
    /// Divide analog readings by the model's public reference response
    /// before learning. Needs the model to be known.
    pub baseline: Option<Model>,
    /// Allow an ExactTable that does not cover every address.
    pub partial_table: bool,
}

impl Default for PredictorParams {
    fn default() -> Self {
        PredictorParams {
            k: 5,
            trees: TreeParams::default(),
            baseline: None,
            partial_table: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Learned {
    Knn(KnnRegressor),
    Trees(ExtraTrees),
    Table(BTreeMap<u32, u32>),
}

/// A trained per-feature predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub kind: PredictorKind,
    pub spec: TaskSpec,
    baseline: Option<Model>,
    learned: Learned,
}

fn normalized_args(spec: &TaskSpec, task: &HardwareTask) -> Vec<f64> {
    task.args
        .iter()
        .zip(&spec.arg_radices)
        .map(|(&a, &r)| {
            if r > 1 {
                a as f64 / (r - 1) as f64
            } else {
                0.0
            }
        })
        .collect()
}

fn baseline_for(model: Option<Model>, task: &HardwareTask) -> Option<f64> {
    model.and_then(|m| reference_response(m, task))
}

fn majority(words: &[u32]) -> u32 {
    let mut out = 0u32;
    for bit in 0..32 {
        let ones = words.iter().filter(|&&w| w >> bit & 1 == 1).count();
        let set = if ones * 2 == words.len() {
            words[0] >> bit & 1 == 1
        } else {
            ones * 2 > words.len()
        };
        if set {
            out |= 1 << bit;
        }
    }
    out
}

/// Trains a predictor for one task spec.
pub fn train_predictor(
    pairs: &[TrainingPair],
    spec: &TaskSpec,
    kind: PredictorKind,
    params: &PredictorParams,
) -> Result<Predictor, BackendError> {
    if pairs.is_empty() {
        return Err(BackendError::EmptyTrainingSet(spec.feature));
    }
    for p in pairs {
        if !spec.admits(&p.task) {
            return Err(BackendError::InvalidPair(p.task.to_string()));
        }
        if p.fingerprint.as_bits().is_some() != (spec.feature == Feature::Sram) {
            return Err(BackendError::InvalidPair(p.task.to_string()));
        }
    }
    if spec.feature == Feature::Sram && kind != PredictorKind::ExactTable {
        return Err(BackendError::UnsupportedKind(spec.feature, kind));
    }
    if spec.feature != Feature::Sram && kind == PredictorKind::ExactTable {
        return Err(BackendError::UnsupportedKind(spec.feature, kind));
    }
    let learned = match kind {
        PredictorKind::ExactTable => {
            let mut seen: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for p in pairs {
                seen.entry(p.task.args[0])
                    .or_default()
                    .push(p.fingerprint.as_bits().unwrap_or_default());
            }
            let size = spec.size();
            if !params.partial_table && (seen.len() as u64) < size {
                return Err(BackendError::IncompleteCoverage {
                    covered: seen.len() as u64,
                    required: size,
                });
            }
            Learned::Table(seen.into_iter().map(|(a, w)| (a, majority(&w))).collect())
        }
        _ => {
            let mut x = Vec::with_capacity(pairs.len());
            let mut y = Vec::with_capacity(pairs.len());
            for p in pairs {
                let v = p.fingerprint.as_analog().unwrap_or_default();
                let target = match baseline_for(params.baseline, &p.task) {
                    Some(0.0) => continue,
                    Some(r) => v / r,
                    None => v,
                };
                x.push(normalized_args(spec, &p.task));
                y.push(target);
            }
            if x.is_empty() {
                return Err(BackendError::EmptyTrainingSet(spec.feature));
            }
            if kind == PredictorKind::NearestNeighbor {
                Learned::Knn(KnnRegressor::fit(&x, &y, params.k))
            } else {
                Learned::Trees(ExtraTrees::fit(&x, &y, params.trees))
            }
        }
    };
    Ok(Predictor {
        kind,
        spec: spec.clone(),
        baseline: params.baseline,
        learned,
    })
}

impl Predictor {
    pub fn feature(&self) -> Feature {
        self.spec.feature
    }

    /// Predicted fingerprint for `task`. Deterministic.
    pub fn predict(&self, task: &HardwareTask) -> Result<FingerprintValue, BackendError> {
        if !self.spec.admits(task) {
            return Err(BackendError::InvalidPair(task.to_string()));
        }
        match &self.learned {
            Learned::Table(table) => table
                .get(&task.args[0])
                .map(|&w| FingerprintValue::Bits32(w))
                .ok_or(BackendError::UnseenAddress(task.args[0])),
            learned => {
                let base = baseline_for(self.baseline, task);
                if base == Some(0.0) {
                    return Ok(FingerprintValue::Analog(0.0));
                }
                let x = normalized_args(&self.spec, task);
                let raw = match learned {
                    Learned::Knn(m) => m.predict(&x),
                    Learned::Trees(m) => m.predict(&x),
                    Learned::Table(_) => unreachable!(),
                };
                Ok(FingerprintValue::Analog(raw * base.unwrap_or(1.0)))
            }
        }
    }
}
