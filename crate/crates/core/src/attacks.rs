//! Adversaries: replay, request tampering, hardware and software mimicry,
//! and poisoned-pair identification.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    relative_error, train_predictor, Backend, BackendError, Predictor, PredictorKind,
    PredictorParams, Reason,
};
use crate::client::{unpoison_value, AuthConfig, Client, ClientError, Token, TokenEntry};
use crate::hwsim::{execute_task, DeviceProfile, FingerprintValue, Model, SimError, TrainingPair};
use crate::mapping::{
    map_message_variant, Feature, MappingConfig, MappingError, MappingVariant, Request,
};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("victim {0} is not enrolled")]
    UnknownVictim(u16),
    #[error("budget and trial counts must be positive")]
    EmptyBudget,
    #[error("no usable pairs")]
    NoPairs,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("report: {0}")]
    Report(String),
}

const OPERATIONS: [&str; 6] = [
    "UNLOCK",
    "LOCK",
    "STATUS",
    "SET_TEMP",
    "OPEN_VALVE",
    "READ_METER",
];

/// A plausible random request with the given nonce.
pub fn random_request<R: Rng + ?Sized>(nonce: u32, rng: &mut R) -> Request {
    let op = OPERATIONS[rng.random_range(0..OPERATIONS.len())];
    let count = rng.random_range(1..=3);
    let payloads = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=8);
            (0..len).map(|_| rng.random()).collect()
        })
        .collect();
    Request::new(op, nonce, payloads)
}

/// Probability that `n` uniform draws from a space of `d * d` outcomes hit
/// one fixed outcome at least once.
pub fn closed_form_tamper_prob(d: u64, n: u64) -> f64 {
    assert!(d >= 1, "output space must be non-empty");
    if n == 0 {
        return 0.0;
    }
    let d2 = (d as f64) * (d as f64);
    -((n as f64) * (-1.0 / d2).ln_1p()).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperOutcome {
    pub succeeded: bool,
    pub attempts_used: u64,
    pub variant: MappingVariant,
}

fn forged_operation(op: &str) -> String {
    let mut chars: Vec<char> = op.chars().collect();
    match chars.first_mut() {
        Some(c) => *c = if *c == 'X' { 'Y' } else { 'X' },
        None => chars.push('X'),
    }
    chars.into_iter().collect()
}

fn randomize(bytes: &mut [u8], rng: &mut (impl Rng + ?Sized)) {
    rng.fill_bytes(bytes);
}

/// Searches for a modified request that maps to the same task list as
/// `request`, so that its fingerprints could be reused.
///
/// The first attempt swaps the operation and keeps everything else; the
/// second keeps the operation and flips one payload bit. After that the
/// attacker fixes a forged operation and searches nonce and payloads round
/// by round: once the first `m` tasks match, only the inputs that round `m`
/// reads and no earlier round reads are redrawn. When round `m` has no such
/// inputs the search restarts from scratch.
pub fn run_tamper_attack<R: Rng + ?Sized>(
    request: &Request,
    mapping: &MappingConfig,
    variant: MappingVariant,
    budget: u64,
    rng: &mut R,
) -> Result<TamperOutcome, AttackError> {
    if budget == 0 {
        return Err(AttackError::EmptyBudget);
    }
    request.validate()?;
    let target = map_message_variant(request, mapping, variant)?;
    let mut attempts = 0u64;
    let check = |candidate: &Request, attempts: &mut u64| -> Result<Option<usize>, AttackError> {
        *attempts += 1;
        let tasks = map_message_variant(candidate, mapping, variant)?;
        Ok(tasks.iter().zip(&target).position(|(a, b)| a != b))
    };
    let done = |attempts| {
        Ok(TamperOutcome {
            succeeded: true,
            attempts_used: attempts,
            variant,
        })
    };

    let forged_op = forged_operation(&request.operation);
    let mut candidate = request.clone();
    candidate.operation = forged_op.clone();
    if check(&candidate, &mut attempts)?.is_none() {
        return done(attempts);
    }
    if attempts < budget {
        let mut candidate = request.clone();
        match candidate.payloads[0].first_mut() {
            Some(b) => *b ^= 1,
            None => candidate.payloads[0].push(0),
        }
        if check(&candidate, &mut attempts)?.is_none() {
            return done(attempts);
        }
    }

    let p = request.payloads.len();
    let total = mapping.total_num;
    let reads: Vec<BTreeSet<usize>> = (0..total)
        .map(|i| variant.payloads_read(i, p).into_iter().collect())
        .collect();
    // inputs first read by each round; the nonce is read by every round
    let mut fresh: Vec<BTreeSet<usize>> = Vec::with_capacity(total);
    let mut seen = BTreeSet::new();
    for r in &reads {
        fresh.push(r.difference(&seen).copied().collect());
        seen.extend(r.iter().copied());
    }
    let mut candidate = request.clone();
    candidate.operation = forged_op;
    let mut restart = true;
    while attempts < budget {
        if restart {
            candidate.nonce = rng.random();
            for payload in candidate.payloads.iter_mut() {
                randomize(payload, rng);
            }
            restart = false;
        }
        match check(&candidate, &mut attempts)? {
            None => return done(attempts),
            Some(m) => {
                if m == 0 || fresh[m].is_empty() {
                    restart = true;
                    continue;
                }
                for &j in &fresh[m] {
                    randomize(&mut candidate.payloads[j], rng);
                }
            }
        }
    }
    Ok(TamperOutcome {
        succeeded: false,
        attempts_used: attempts,
        variant,
    })
}

fn ensure_victim(backend: &Backend, victim_id: u16) -> Result<(), AttackError> {
    if backend.is_sealed(victim_id) {
        Ok(())
    } else {
        Err(AttackError::UnknownVictim(victim_id))
    }
}

fn fresh_nonce(backend: &Backend, victim_id: u16, floor: u32) -> u32 {
    backend
        .last_seen_nonce(victim_id)
        .map_or(0, |n| n.saturating_add(1))
        .max(floor)
}

/// Counts how many replayed tokens the backend accepts. Every token is
/// first submitted honestly; replays are only attempted for tokens that were
/// accepted. Returns (replays attempted, replays flagged as replays,
/// replays accepted).
pub fn run_replay_attack<R: Rng + ?Sized>(
    client: &mut Client,
    backend: &Backend,
    trials: usize,
    rng: &mut R,
) -> Result<(usize, usize, usize), AttackError> {
    let id = client.profile.device_id;
    ensure_victim(backend, id)?;
    let mut history: Vec<(Request, Token)> = Vec::new();
    let (mut attempted, mut flagged, mut accepted) = (0, 0, 0);
    let mut floor = 0;
    for _ in 0..trials {
        let nonce = fresh_nonce(backend, id, floor).max(client.next_nonce());
        floor = nonce.saturating_add(1);
        let request = random_request(nonce, rng);
        let token = client.generate_token(&request, rng)?;
        if backend.authenticate(id, &request, &token).accepted() {
            history.push((request, token));
        }
        if let Some((req, tok)) = history.get(rng.random_range(0..history.len().max(1))) {
            attempted += 1;
            let r = backend.authenticate(id, req, tok);
            flagged += usize::from(r.reason == Reason::ReplayDetected);
            accepted += usize::from(r.accepted());
        }
    }
    Ok((attempted, flagged, accepted))
}

/// An attacker that owns `attacker`'s hardware and claims to be
/// `victim_id`. Returns the accepted fraction over `trials` fresh requests.
pub fn run_hw_mimic<R: Rng + ?Sized>(
    attacker: &DeviceProfile,
    victim_id: u16,
    backend: &Backend,
    trials: usize,
    rng: &mut R,
) -> Result<f64, AttackError> {
    ensure_victim(backend, victim_id)?;
    if trials == 0 {
        return Err(AttackError::EmptyBudget);
    }
    let cfg = backend.config();
    let mut client = Client::new(attacker.clone(), cfg.auth, cfg.mapping.clone())?;
    let mut accepted = 0;
    for _ in 0..trials {
        let nonce = fresh_nonce(backend, victim_id, client.next_nonce());
        let request = random_request(nonce, rng);
        let token = client.generate_token(&request, rng)?;
        accepted += usize::from(backend.authenticate(victim_id, &request, &token).accepted());
    }
    Ok(accepted as f64 / trials as f64)
}

/// One eavesdropped token entry, with the client-private poison label kept
/// for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedPair {
    pub pair: TrainingPair,
    pub poisoned: bool,
}

/// Records the (task, sent value) pairs of `tokens` legitimate tokens.
pub fn observe_traffic<R: Rng + ?Sized>(
    client: &mut Client,
    tokens: usize,
    rng: &mut R,
) -> Result<Vec<ObservedPair>, AttackError> {
    let mut out = Vec::with_capacity(tokens * client.auth.total_num);
    for _ in 0..tokens {
        let request = random_request(client.next_nonce(), rng);
        let tasks = crate::mapping::map_message(&request, &client.mapping)?;
        let generated = client.generate_detailed(&request, rng)?;
        for ((task, entry), keep) in tasks
            .into_iter()
            .zip(generated.token.entries)
            .zip(generated.mask)
        {
            out.push(ObservedPair {
                pair: TrainingPair {
                    task,
                    fingerprint: entry.fingerprint,
                },
                poisoned: !keep,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttackStrategy {
    /// Train on a random subset sized like the unpoisoned share.
    pub filter_training: bool,
    /// Undo a guessed poisoning on predictions, with probability equal to
    /// the poisoned share.
    pub correct_output: bool,
}

impl AttackStrategy {
    pub const ALL: [AttackStrategy; 4] = [
        AttackStrategy {
            filter_training: false,
            correct_output: false,
        },
        AttackStrategy {
            filter_training: true,
            correct_output: false,
        },
        AttackStrategy {
            filter_training: false,
            correct_output: true,
        },
        AttackStrategy {
            filter_training: true,
            correct_output: true,
        },
    ];

    pub fn name(self) -> &'static str {
        match (self.filter_training, self.correct_output) {
            (false, false) => "all-direct",
            (true, false) => "filter-direct",
            (false, true) => "all-correct",
            (true, true) => "filter-correct",
        }
    }
}

/// A software clone of one device built from eavesdropped pairs.
#[derive(Debug, Clone)]
pub struct MimicModel {
    pub strategy: AttackStrategy,
    pub auth: AuthConfig,
    pub predictors: BTreeMap<Feature, Predictor>,
}

/// Trains one regressor per feature on eavesdropped pairs. `baseline` is
/// the victim's (public) device model.
pub fn train_sw_mimic<R: Rng + ?Sized>(
    eavesdropped: &[TrainingPair],
    strategy: AttackStrategy,
    cfg: &AuthConfig,
    mapping: &MappingConfig,
    baseline: Option<Model>,
    rng: &mut R,
) -> Result<MimicModel, AttackError> {
    let mut predictors = BTreeMap::new();
    for spec in &mapping.enabled_specs {
        let mut pairs: Vec<TrainingPair> = eavesdropped
            .iter()
            .filter(|p| p.task.feature == spec.feature)
            .cloned()
            .collect();
        if strategy.filter_training {
            let keep = (pairs.len() as f64 * cfg.used_ratio()).round() as usize;
            let picked = sample(rng, pairs.len(), keep.min(pairs.len()));
            pairs = picked.into_iter().map(|i| pairs[i].clone()).collect();
        }
        if pairs.is_empty() {
            continue;
        }
        let kind = if spec.feature == Feature::Sram {
            PredictorKind::ExactTable
        } else {
            PredictorKind::RandomizedTreeEnsemble
        };
        let mut params = PredictorParams {
            baseline,
            partial_table: true,
            ..Default::default()
        };
        params.trees.seed = rng.random();
        predictors.insert(spec.feature, train_predictor(&pairs, spec, kind, &params)?);
    }
    if predictors.is_empty() {
        return Err(AttackError::NoPairs);
    }
    Ok(MimicModel {
        strategy,
        auth: *cfg,
        predictors,
    })
}

impl MimicModel {
    /// The value the attacker would send for `task`.
    pub fn fabricate<R: Rng + ?Sized>(
        &self,
        task: &crate::mapping::HardwareTask,
        rng: &mut R,
    ) -> FingerprintValue {
        let guess = self
            .predictors
            .get(&task.feature)
            .and_then(|p| p.predict(task).ok());
        let value = match guess {
            Some(v) => v,
            None if task.feature == Feature::Sram => FingerprintValue::Bits32(rng.random()),
            None => FingerprintValue::Analog(0.0),
        };
        if self.strategy.correct_output && rng.random::<f64>() >= self.auth.used_ratio() {
            let noise = if self.auth.noise_hi > self.auth.noise_lo {
                rng.random_range(self.auth.noise_lo..=self.auth.noise_hi)
            } else {
                self.auth.noise_lo
            };
            unpoison_value(value, noise, self.auth.c)
        } else {
            value
        }
    }
}

/// Submits `trials` fabricated tokens for fresh requests as `victim_id`.
pub fn run_sw_mimic<R: Rng + ?Sized>(
    model: &MimicModel,
    backend: &Backend,
    victim_id: u16,
    trials: usize,
    rng: &mut R,
) -> Result<f64, AttackError> {
    ensure_victim(backend, victim_id)?;
    if trials == 0 {
        return Err(AttackError::EmptyBudget);
    }
    let mapping = &backend.config().mapping;
    let mut accepted = 0;
    let mut floor = 0;
    for _ in 0..trials {
        let nonce = fresh_nonce(backend, victim_id, floor);
        floor = nonce.saturating_add(1);
        let request = random_request(nonce, rng);
        let tasks = crate::mapping::map_message(&request, mapping)?;
        let entries = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TokenEntry {
                task_index: i as u8,
                fingerprint: model.fabricate(t, rng),
            })
            .collect();
        let token = Token { nonce, entries };
        accepted += usize::from(backend.authenticate(victim_id, &request, &token).accepted());
    }
    Ok(accepted as f64 / trials as f64)
}

#[derive(Debug, Clone)]
pub enum IdentifyMethod {
    /// Treat a random `train_fraction` of the pairs as normal, fit a model
    /// and flag held-out pairs whose relative error exceeds `threshold`.
    Supervised { train_fraction: f64, threshold: f64 },
    /// Measure each task on a second device of the same model and flag
    /// pairs whose relative discrepancy exceeds `threshold`. SRAM pairs are
    /// not scored: another device's word says nothing about the victim's.
    ExtraDevice {
        reference: Box<DeviceProfile>,
        threshold: f64,
    },
}

/// SRAM words are compared by Hamming distance rather than relative error.
const SRAM_FLAG_BITS: u32 = 2;

fn flag(observed: FingerprintValue, reference: FingerprintValue, threshold: f64) -> bool {
    match (observed, reference) {
        (FingerprintValue::Bits32(o), FingerprintValue::Bits32(r)) => {
            (o ^ r).count_ones() > SRAM_FLAG_BITS
        }
        (FingerprintValue::Analog(o), FingerprintValue::Analog(r)) => {
            relative_error(r, o, f64::MIN_POSITIVE) > threshold
        }
        _ => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub accuracy: f64,
    pub evaluated: usize,
}

/// Scores an attacker's attempt to tell poisoned pairs from raw ones.
/// `baseline` is the victim's public device model.
pub fn identify_poison<R: Rng + ?Sized>(
    pairs: &[ObservedPair],
    method: &IdentifyMethod,
    mapping: &MappingConfig,
    baseline: Model,
    rng: &mut R,
) -> Result<IdentifyReport, AttackError> {
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    match method {
        IdentifyMethod::ExtraDevice {
            reference,
            threshold,
        } => {
            for p in pairs.iter().filter(|p| p.pair.task.feature.is_analog()) {
                let guess = match execute_task(reference, &p.pair.task, rng) {
                    Ok(r) => flag(p.pair.fingerprint, r, *threshold),
                    Err(_) => rng.random(),
                };
                evaluated += 1;
                correct += usize::from(guess == p.poisoned);
            }
        }
        IdentifyMethod::Supervised {
            train_fraction,
            threshold,
        } => {
            for spec in &mapping.enabled_specs {
                let mine: Vec<&ObservedPair> = pairs
                    .iter()
                    .filter(|p| p.pair.task.feature == spec.feature)
                    .collect();
                let n_train = (mine.len() as f64 * train_fraction).round() as usize;
                if n_train == 0 || n_train >= mine.len() {
                    continue;
                }
                let chosen: BTreeSet<usize> =
                    sample(rng, mine.len(), n_train).into_iter().collect();
                let train: Vec<TrainingPair> =
                    chosen.iter().map(|&i| mine[i].pair.clone()).collect();
                let kind = if spec.feature == Feature::Sram {
                    PredictorKind::ExactTable
                } else {
                    PredictorKind::RandomizedTreeEnsemble
                };
                let mut params = PredictorParams {
                    baseline: Some(baseline),
                    partial_table: true,
                    ..Default::default()
                };
                params.trees.seed = rng.random();
                let model = train_predictor(&train, spec, kind, &params)?;
                for (i, p) in mine.iter().enumerate() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let guess = match model.predict(&p.pair.task) {
                        Ok(pred) => flag(p.pair.fingerprint, pred, *threshold),
                        Err(_) => rng.random(),
                    };
                    evaluated += 1;
                    correct += usize::from(guess == p.poisoned);
                }
            }
        }
    }
    if evaluated == 0 {
        return Err(AttackError::NoPairs);
    }
    Ok(IdentifyReport {
        accuracy: correct as f64 / evaluated as f64,
        evaluated,
    })
}

/// One row of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_kind: String,
    pub variant: String,
    pub seed: u64,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub wall_time_ms: u64,
}

impl AttackReport {
    pub fn new(
        attack_kind: &str,
        variant: &str,
        seed: u64,
        trials: u64,
        successes: u64,
        started: Instant,
    ) -> Self {
        AttackReport {
            attack_kind: attack_kind.to_string(),
            variant: variant.to_string(),
            seed,
            trials,
            successes,
            rate: if trials == 0 {
                0.0
            } else {
                successes as f64 / trials as f64
            },
            wall_time_ms: started.elapsed().as_millis() as u64,
        }
    }
}

/// Writes reports as CSV with a header row.
pub fn write_reports<W: Write>(out: W, reports: &[AttackReport]) -> Result<(), AttackError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)
            .map_err(|e| AttackError::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| AttackError::Report(e.to_string()))
}
