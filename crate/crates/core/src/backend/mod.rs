//! Enrollment, per-feature predictors and verifiers, and token checking.
//!
//! The backend keeps one record per device. Enrollment collects training
//! pairs until [`Backend::commit`] trains a predictor for every enabled
//! feature, calibrates a verifier against other devices' pairs and seals
//! the record. [`Backend::authenticate`] then recomputes a request's tasks,
//! predicts each fingerprint and counts the entries its verifier accepts.

mod learn;
mod predictor;
mod verifier;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use learn::{ExtraTrees, KnnRegressor, TreeParams};
pub use predictor::{train_predictor, Predictor, PredictorKind, PredictorParams};
pub use verifier::{
    calibrate_verifier, relative_error, verify_one, Calibration, CalibrationParams, Rule, Verifier,
    VerifierKind,
};

use crate::client::{AuthConfig, Token};
use crate::hwsim::{Model, TrainingPair};
use crate::mapping::{map_message, Feature, MappingConfig, Request};

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no training pairs for {0}")]
    EmptyTrainingSet(Feature),
    #[error("pair does not fit the task spec: {0}")]
    InvalidPair(String),
    #[error("{0} cannot use a {1:?} predictor")]
    UnsupportedKind(Feature, PredictorKind),
    #[error("{0} cannot use a {1:?} verifier")]
    UnsupportedVerifier(Feature, VerifierKind),
    #[error("SRAM table covers {covered} of {required} addresses")]
    IncompleteCoverage { covered: u64, required: u64 },
    #[error("SRAM address {0} was never enrolled")]
    UnseenAddress(u32),
    #[error("no positive calibration pairs for {0}")]
    NoPositives(Feature),
    #[error("no negative calibration pairs for {0}")]
    NoNegatives(Feature),
    #[error("predicted and observed fingerprints have different types")]
    TagMismatch,
    #[error("device {0} is not registered")]
    UnknownDevice(u16),
    #[error("device {0} is already registered")]
    AlreadyRegistered(u16),
    #[error("device {0} is sealed")]
    SealedDevice(u16),
    #[error("least squares needs at least two distinct x values")]
    DegenerateInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    Ok,
    BelowThreshold,
    ReplayDetected,
    UnknownDevice,
    MalformedToken,
}

impl Reason {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Reason> {
        [
            Reason::Ok,
            Reason::BelowThreshold,
            Reason::ReplayDetected,
            Reason::UnknownDevice,
            Reason::MalformedToken,
        ]
        .get(code as usize)
        .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthResult {
    pub decision: Decision,
    pub matched_count: usize,
    pub reason: Reason,
}

impl AuthResult {
    fn reject(reason: Reason, matched_count: usize) -> Self {
        AuthResult {
            decision: Decision::Reject,
            matched_count,
            reason,
        }
    }

    pub fn accepted(&self) -> bool {
        self.decision == Decision::Accept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub auth: AuthConfig,
    pub mapping: MappingConfig,
    /// Predictor for analog features. SRAM always uses an exact table.
    pub predictor: PredictorKind,
    /// Verifier for analog features. SRAM uses a Hamming threshold unless
    /// this is the learned classifier.
    pub verifier: VerifierKind,
    pub calibration: CalibrationParams,
    pub knn_k: usize,
    pub trees: TreeParams,
    /// Every `holdout_every`-th enrolled analog pair is held out for
    /// calibration.
    pub holdout_every: usize,
    /// Other devices sampled for negatives at commit.
    pub negative_devices: usize,
    /// Negative pairs taken from each sampled device.
    pub negatives_per_device: usize,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            auth: AuthConfig::default(),
            mapping: MappingConfig::default(),
            predictor: PredictorKind::RandomizedTreeEnsemble,
            verifier: VerifierKind::RelativeErrorThreshold,
            calibration: CalibrationParams::default(),
            knn_k: 5,
            trees: TreeParams::default(),
            holdout_every: 5,
            negative_devices: 10,
            negatives_per_device: 200,
            seed: 0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        self.auth
            .validate()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        self.mapping
            .validate()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        if self.mapping.total_num != self.auth.total_num {
            return Err(BackendError::Config(
                "mapping and auth disagree on totalNum".into(),
            ));
        }
        if self.predictor == PredictorKind::ExactTable {
            return Err(BackendError::Config(
                "analog features need a regressor".into(),
            ));
        }
        if self.verifier == VerifierKind::HammingThreshold {
            return Err(BackendError::Config(
                "analog features need a relative or learned verifier".into(),
            ));
        }
        if self.holdout_every < 2 || self.knn_k == 0 || self.negative_devices == 0 {
            return Err(BackendError::Config(
                "holdout_every ≥ 2, knn_k ≥ 1, negative_devices ≥ 1".into(),
            ));
        }
        if !(self.calibration.target_tpr > 0.0 && self.calibration.target_tpr <= 1.0) {
            return Err(BackendError::Config("target TPR must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub predictor: Predictor,
    pub verifier: Verifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub model: Model,
    pub sealed: bool,
    pub enrollment: Vec<TrainingPair>,
    pub features: BTreeMap<Feature, FeatureModel>,
    pub last_seen_nonce: Option<u32>,
}

type Shared = Arc<Mutex<DeviceRecord>>;

/// Backend state. Calls for different devices run in parallel; calls for
/// one device serialize on its record.
#[derive(Debug)]
pub struct Backend {
    config: BackendConfig,
    devices: RwLock<BTreeMap<u16, Shared>>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    config: BackendConfig,
    devices: BTreeMap<u16, DeviceRecord>,
}

fn lock(record: &Shared) -> std::sync::MutexGuard<'_, DeviceRecord> {
    record.lock().unwrap_or_else(|e| e.into_inner())
}

impl Backend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Backend {
            config,
            devices: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn record(&self, id: u16) -> Option<Shared> {
        self.devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&id)
            .cloned()
    }

    pub fn device_ids(&self) -> Vec<u16> {
        self.devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .copied()
            .collect()
    }

    pub fn is_registered(&self, id: u16) -> bool {
        self.record(id).is_some()
    }

    pub fn is_sealed(&self, id: u16) -> bool {
        self.record(id).is_some_and(|r| lock(&r).sealed)
    }

    pub fn last_seen_nonce(&self, id: u16) -> Option<u32> {
        self.record(id).and_then(|r| lock(&r).last_seen_nonce)
    }

    /// Calibration rates per feature for a sealed device.
    pub fn calibration(&self, id: u16) -> Option<BTreeMap<Feature, Calibration>> {
        let r = self.record(id)?;
        let r = lock(&r);
        r.sealed.then(|| {
            r.features
                .iter()
                .map(|(f, m)| (*f, m.verifier.calibration))
                .collect()
        })
    }

    /// A clone of a device's trained feature models.
    pub fn feature_model(&self, id: u16, feature: Feature) -> Option<FeatureModel> {
        let r = self.record(id)?;
        let r = lock(&r);
        r.features.get(&feature).cloned()
    }

    pub fn begin_enrollment(&self, id: u16, model: Model) -> Result<(), BackendError> {
        let mut devices = self.devices.write().unwrap_or_else(|e| e.into_inner());
        if let Some(existing) = devices.get(&id) {
            return Err(if lock(existing).sealed {
                BackendError::SealedDevice(id)
            } else {
                BackendError::AlreadyRegistered(id)
            });
        }
        let record = DeviceRecord {
            model,
            sealed: false,
            enrollment: Vec::new(),
            features: BTreeMap::new(),
            last_seen_nonce: None,
        };
        devices.insert(id, Arc::new(Mutex::new(record)));
        Ok(())
    }

    pub fn add_pairs(&self, id: u16, pairs: Vec<TrainingPair>) -> Result<(), BackendError> {
        let record = self.record(id).ok_or(BackendError::UnknownDevice(id))?;
        let mut r = lock(&record);
        if r.sealed {
            return Err(BackendError::SealedDevice(id));
        }
        for p in &pairs {
            let ok = self
                .config
                .mapping
                .spec_for(p.task.feature)
                .is_some_and(|s| s.admits(&p.task))
                && p.fingerprint.as_bits().is_some() == (p.task.feature == Feature::Sram);
            if !ok {
                return Err(BackendError::InvalidPair(p.task.to_string()));
            }
        }
        r.enrollment.extend(pairs);
        Ok(())
    }

    fn negatives(&self, id: u16, feature: Feature) -> Vec<TrainingPair> {
        let mut others: Vec<(u16, Shared)> = self
            .devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|(&other, _)| other != id)
            .map(|(&k, v)| (k, v.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.seed ^ ((id as u64) << 8) ^ feature.code() as u64,
        );
        others.shuffle(&mut rng);
        let mut out = Vec::new();
        let mut used = 0;
        for (_, record) in others {
            if used == self.config.negative_devices {
                break;
            }
            let mut theirs: Vec<TrainingPair> = lock(&record)
                .enrollment
                .iter()
                .filter(|p| p.task.feature == feature)
                .cloned()
                .collect();
            if theirs.is_empty() {
                continue;
            }
            theirs.shuffle(&mut rng);
            theirs.truncate(self.config.negatives_per_device);
            out.extend(theirs);
            used += 1;
        }
        out
    }

    fn train_feature(
        &self,
        id: u16,
        model: Model,
        feature: Feature,
        pairs: &[TrainingPair],
    ) -> Result<FeatureModel, BackendError> {
        let spec = self
            .config
            .mapping
            .spec_for(feature)
            .ok_or(BackendError::EmptyTrainingSet(feature))?;
        let negatives = self.negatives(id, feature);
        let mut trees = self.config.trees;
        trees.seed ^= self.config.seed ^ ((id as u64) << 16) ^ feature.code() as u64;
        let params = PredictorParams {
            k: self.config.knn_k,
            trees,
            baseline: Some(model),
            partial_table: false,
        };
        if feature == Feature::Sram {
            let predictor = train_predictor(pairs, spec, PredictorKind::ExactTable, &params)?;
            let kind = match self.config.verifier {
                VerifierKind::LearnedClassifier => VerifierKind::LearnedClassifier,
                _ => VerifierKind::HammingThreshold,
            };
            let verifier = calibrate_verifier(
                &predictor,
                pairs,
                &negatives,
                kind,
                &self.config.calibration,
            )?;
            return Ok(FeatureModel {
                predictor,
                verifier,
            });
        }
        let every = self.config.holdout_every;
        let (held, train): (Vec<_>, Vec<_>) = pairs
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % every == every - 1);
        let held: Vec<TrainingPair> = held.into_iter().map(|(_, p)| p).collect();
        let train: Vec<TrainingPair> = train.into_iter().map(|(_, p)| p).collect();
        if held.is_empty() || train.is_empty() {
            return Err(BackendError::NoPositives(feature));
        }
        let fitted = train_predictor(&train, spec, self.config.predictor, &params)?;
        let verifier = calibrate_verifier(
            &fitted,
            &held,
            &negatives,
            self.config.verifier,
            &self.config.calibration,
        )?;
        let predictor = train_predictor(pairs, spec, self.config.predictor, &params)?;
        Ok(FeatureModel {
            predictor,
            verifier,
        })
    }

    /// Trains and calibrates every enabled feature and seals the device.
    pub fn commit(&self, id: u16) -> Result<BTreeMap<Feature, Calibration>, BackendError> {
        let record = self.record(id).ok_or(BackendError::UnknownDevice(id))?;
        let (model, pairs) = {
            let r = lock(&record);
            if r.sealed {
                return Err(BackendError::SealedDevice(id));
            }
            (r.model, r.enrollment.clone())
        };
        let mut features = BTreeMap::new();
        for spec in &self.config.mapping.enabled_specs {
            let mine: Vec<TrainingPair> = pairs
                .iter()
                .filter(|p| p.task.feature == spec.feature)
                .cloned()
                .collect();
            if mine.is_empty() {
                return Err(BackendError::EmptyTrainingSet(spec.feature));
            }
            features.insert(
                spec.feature,
                self.train_feature(id, model, spec.feature, &mine)?,
            );
        }
        let mut r = lock(&record);
        if r.sealed {
            return Err(BackendError::SealedDevice(id));
        }
        r.features = features;
        r.sealed = true;
        Ok(r.features
            .iter()
            .map(|(f, m)| (*f, m.verifier.calibration))
            .collect())
    }

    /// Counts the token entries that match without touching the replay guard.
    pub fn match_count(&self, id: u16, request: &Request, token: &Token) -> Result<usize, Reason> {
        let record = self.record(id).ok_or(Reason::UnknownDevice)?;
        let r = lock(&record);
        self.count_matches(&r, request, token)
    }

    fn count_matches(
        &self,
        r: &DeviceRecord,
        request: &Request,
        token: &Token,
    ) -> Result<usize, Reason> {
        if !r.sealed {
            return Err(Reason::UnknownDevice);
        }
        let total = self.config.auth.total_num;
        if token.nonce != request.nonce || token.entries.len() != total {
            return Err(Reason::MalformedToken);
        }
        if token
            .entries
            .iter()
            .enumerate()
            .any(|(i, e)| e.task_index as usize != i)
        {
            return Err(Reason::MalformedToken);
        }
        let tasks =
            map_message(request, &self.config.mapping).map_err(|_| Reason::MalformedToken)?;
        let mut matched = 0;
        for (task, entry) in tasks.iter().zip(&token.entries) {
            let Some(fm) = r.features.get(&task.feature) else {
                return Err(Reason::MalformedToken);
            };
            let Ok(predicted) = fm.predictor.predict(task) else {
                continue;
            };
            match verify_one(&fm.verifier, predicted, entry.fingerprint) {
                Ok(true) => matched += 1,
                Ok(false) => {}
                Err(_) => return Err(Reason::MalformedToken),
            }
        }
        Ok(matched)
    }

    /// Checks one token. Never fails: every outcome is an [`AuthResult`].
    pub fn authenticate(&self, id: u16, request: &Request, token: &Token) -> AuthResult {
        let Some(record) = self.record(id) else {
            return AuthResult::reject(Reason::UnknownDevice, 0);
        };
        let mut r = lock(&record);
        if !r.sealed {
            return AuthResult::reject(Reason::UnknownDevice, 0);
        }
        if r.last_seen_nonce.is_some_and(|last| request.nonce <= last) {
            return AuthResult::reject(Reason::ReplayDetected, 0);
        }
        let matched = match self.count_matches(&r, request, token) {
            Ok(m) => m,
            Err(reason) => return AuthResult::reject(reason, 0),
        };
        if matched >= self.config.auth.accept_num {
            r.last_seen_nonce = Some(request.nonce);
            AuthResult {
                decision: Decision::Accept,
                matched_count: matched,
                reason: Reason::Ok,
            }
        } else {
            AuthResult::reject(Reason::BelowThreshold, matched)
        }
    }

    pub fn to_snapshot(&self) -> String {
        let devices = self
            .devices
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|(&id, r)| (id, lock(r).clone()))
            .collect();
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            devices,
        };
        serde_json::to_string(&snap).expect("backend state serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, BackendError> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| BackendError::Snapshot(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(BackendError::Snapshot(format!(
                "unsupported version {}",
                snap.version
            )));
        }
        let backend = Backend::new(snap.config)?;
        *backend.devices.write().unwrap_or_else(|e| e.into_inner()) = snap
            .devices
            .into_iter()
            .map(|(id, r)| (id, Arc::new(Mutex::new(r))))
            .collect();
        Ok(backend)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_snapshot())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Backend::from_snapshot(&std::fs::read_to_string(path)?)
    }
}

/// Ordinary least squares fit of `y = slope * x + intercept`.
pub fn fit_linear_least_squares(pairs: &[(f64, f64)]) -> Result<(f64, f64), BackendError> {
    if pairs.len() < 2 {
        return Err(BackendError::DegenerateInput);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(BackendError::DegenerateInput);
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn least_squares_examples() {
        let pts: Vec<(f64, f64)> = (0..10).map(|x| (x as f64, 2.0 * x as f64 + 3.0)).collect();
        let (a, b) = fit_linear_least_squares(&pts).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12);
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, 1.1 * y + 1.0)).collect();
        let (a, b) = fit_linear_least_squares(&moved).unwrap();
        assert!((a - 2.2).abs() < 1e-12 && (b - 4.3).abs() < 1e-12);
        let flat = [(1.0, 2.0), (1.0, 3.0)];
        assert!(matches!(
            fit_linear_least_squares(&flat),
            Err(BackendError::DegenerateInput)
        ));
    }

    #[test]
    fn reason_codes_round_trip() {
        for code in 0..5 {
            assert_eq!(Reason::from_code(code).unwrap().code(), code);
        }
        assert_eq!(Reason::from_code(5), None);
    }

    #[test]
    fn config_rejects_mismatched_total() {
        let mut cfg = BackendConfig::default();
        cfg.auth.total_num = 12;
        assert!(Backend::new(cfg).is_err());
    }

    proptest! {
        #[test]
        fn transformed_fit_matches_closed_form(
            a in -50.0f64..50.0, b in -50.0f64..50.0, c in 0.5f64..2.0, d in -5.0f64..5.0,
        ) {
            let pts: Vec<(f64, f64)> = (0..20).map(|x| { let x = x as f64; (x, c * (a * x + b) + d) }).collect();
            let (fa, fb) = fit_linear_least_squares(&pts).unwrap();
            prop_assert!((fa - c * a).abs() <= 1e-9 * (c * a).abs().max(1.0));
            prop_assert!((fb - (c * b + d)).abs() <= 1e-9 * (c * b + d).abs().max(1.0));
        }
    }
}
