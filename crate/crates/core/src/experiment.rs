//! Seeded evaluation harness: enrolls a simulated fleet through the wire
//! protocol and measures acceptance rates and attack success.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    closed_form_tamper_prob, identify_poison, observe_traffic, random_request, run_sw_mimic,
    run_tamper_attack, train_sw_mimic, AttackError, AttackStrategy, IdentifyMethod, IdentifyReport,
};
use crate::backend::{Backend, BackendConfig, BackendError, PredictorKind, VerifierKind};
use crate::client::{AuthConfig, Client, ClientError, PoisonNoise};
use crate::hwsim::{
    collect_pairs, spawn_fleet_with, DeviceProfile, Model, SimConfig, SimError, TrainingPair,
};
use crate::mapping::{Feature, MappingConfig, MappingVariant, Request, TaskSpec};
use crate::service::{Loopback, ServiceClient, ServiceError, Transport};

pub const CSV_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("need at least one legitimate and one impostor outcome")]
    DegenerateSample,
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("enrollment: {0}")]
    Service(#[from] ServiceError),
    #[error("attack: {0}")]
    Attack(#[from] AttackError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `(is_legit, accepted)` outcomes to (TPR, FPR).
pub fn compute_tpr_fpr(outcomes: &[(bool, bool)]) -> Result<(f64, f64), ExperimentError> {
    let legit = outcomes.iter().filter(|o| o.0).count();
    let impostor = outcomes.len() - legit;
    if legit == 0 || impostor == 0 {
        return Err(ExperimentError::DegenerateSample);
    }
    let tp = outcomes.iter().filter(|o| o.0 && o.1).count();
    let fp = outcomes.iter().filter(|o| !o.0 && o.1).count();
    Ok((tp as f64 / legit as f64, fp as f64 / impostor as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "kebab-case")]
pub enum SweepAxis {
    Features(Vec<Feature>),
    UsedNum(Vec<usize>),
    AcceptNum(Vec<usize>),
    Noise(Vec<f64>),
    /// Tamper attempt budgets, on a two-task space of `d` tasks per round.
    TamperBudget {
        d: u32,
        budgets: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: Model,
    pub count: usize,
    pub fleet_seed: u64,
    pub sim: SimConfig,
    pub auth: AuthConfig,
    pub mapping: MappingConfig,
    pub predictor: PredictorKind,
    pub verifier: VerifierKind,
    pub pairs_per_feature: usize,
    /// SRAM enrollment sweeps every address this many times.
    pub sram_repeats: usize,
    pub trials: usize,
    /// Eavesdropped tokens for software-mimic measurements.
    pub traffic_tokens: usize,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "default".into(),
            model: Model::ModelA,
            count: 10,
            fleet_seed: 7,
            sim: SimConfig::default(),
            auth: AuthConfig::default(),
            mapping: MappingConfig::ensemble(),
            predictor: PredictorKind::RandomizedTreeEnsemble,
            verifier: VerifierKind::RelativeErrorThreshold,
            pairs_per_feature: 1000,
            sram_repeats: 3,
            trials: 500,
            traffic_tokens: 300,
            seed: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Invalid(m.to_string()));
        if self.count < 2 {
            return bad("a fleet needs at least two devices");
        }
        if self.pairs_per_feature < 10 || self.sram_repeats == 0 || self.trials == 0 {
            return bad("pairs_per_feature >= 10, sram_repeats >= 1 and trials >= 1");
        }
        self.auth.validate()?;
        if self.auth.total_num != self.mapping.total_num {
            return bad("auth and mapping disagree on totalNum");
        }
        Ok(())
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            auth: self.auth,
            mapping: self.mapping.clone(),
            predictor: self.predictor,
            verifier: self.verifier,
            seed: self.seed,
            ..BackendConfig::default()
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Enrollment pairs for one device under `mapping`.
pub fn enrollment_pairs<R: Rng + ?Sized>(
    device: &DeviceProfile,
    mapping: &MappingConfig,
    pairs_per_feature: usize,
    sram_repeats: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPair>, SimError> {
    let mut out = Vec::new();
    for spec in &mapping.enabled_specs {
        let n = if spec.feature == Feature::Sram {
            sram_repeats * spec.size() as usize
        } else {
            pairs_per_feature
        };
        out.extend(collect_pairs(device, spec, n, rng)?);
    }
    Ok(out)
}

/// Measures and uploads every device's enrollment pairs, then commits them
/// all, so each device can be calibrated against the others.
pub fn enroll_fleet<T: Transport, R: Rng + ?Sized>(
    svc: &mut ServiceClient<T>,
    fleet: &[DeviceProfile],
    spec: &ExperimentSpec,
    rng: &mut R,
) -> Result<(), ExperimentError> {
    for d in fleet {
        let pairs = enrollment_pairs(
            d,
            &spec.mapping,
            spec.pairs_per_feature,
            spec.sram_repeats,
            rng,
        )?;
        svc.enroll_begin(d.device_id, d.model)?;
        svc.enroll_data(d.device_id, &pairs)?;
    }
    for d in fleet {
        svc.enroll_commit(d.device_id)?;
    }
    Ok(())
}

/// An enrolled fleet.
pub struct Testbed {
    pub spec: ExperimentSpec,
    pub fleet: Vec<DeviceProfile>,
    pub backend: Backend,
}

impl Testbed {
    /// Spawns the fleet and enrolls every device through the protocol.
    pub fn build(spec: &ExperimentSpec) -> Result<Testbed, ExperimentError> {
        spec.validate()?;
        let fleet = spawn_fleet_with(spec.model, spec.count, spec.fleet_seed, &spec.sim)?;
        let backend = Backend::new(spec.backend_config())?;
        let mut svc = ServiceClient::new(Loopback { backend: &backend });
        enroll_fleet(&mut svc, &fleet, spec, &mut spec.rng(1))?;
        Ok(Testbed {
            spec: spec.clone(),
            fleet,
            backend,
        })
    }

    fn client(&self, device: &DeviceProfile, auth: AuthConfig) -> Result<Client, ExperimentError> {
        Ok(Client::new(
            device.clone(),
            auth,
            self.spec.mapping.clone(),
        )?)
    }

    /// Matched-entry counts of legitimate and same-model impostor tokens,
    /// `trials` of each, spread round-robin over the fleet. The backend's
    /// replay guard is not touched.
    pub fn match_counts(
        &self,
        auth: AuthConfig,
        stream: u64,
    ) -> Result<(Vec<usize>, Vec<usize>), ExperimentError> {
        let mut rng = self.spec.rng(stream);
        let n = self.fleet.len();
        let mut legit = Vec::with_capacity(self.spec.trials);
        let mut impostor = Vec::with_capacity(self.spec.trials);
        let mut owners: Vec<Client> = self
            .fleet
            .iter()
            .map(|d| self.client(d, auth))
            .collect::<Result<_, _>>()?;
        for t in 0..self.spec.trials {
            let victim = t % n;
            let attacker = (victim + 1 + rng.random_range(0..n - 1)) % n;
            let id = self.fleet[victim].device_id;
            let nonce = owners[victim]
                .next_nonce()
                .max(owners[attacker].next_nonce());
            let request = random_request(nonce, &mut rng);
            let token = owners[victim].generate_token(&request, &mut rng)?;
            legit.push(self.backend.match_count(id, &request, &token).unwrap_or(0));
            let token = owners[attacker].generate_token(&request, &mut rng)?;
            impostor.push(self.backend.match_count(id, &request, &token).unwrap_or(0));
        }
        Ok((legit, impostor))
    }

    /// TPR and FPR at `auth`, deciding with `auth.accept_num`.
    pub fn tpr_fpr(&self, auth: AuthConfig, stream: u64) -> Result<(f64, f64), ExperimentError> {
        let (legit, impostor) = self.match_counts(auth, stream)?;
        let outcomes: Vec<(bool, bool)> = legit
            .iter()
            .map(|&m| (true, m >= auth.accept_num))
            .chain(impostor.iter().map(|&m| (false, m >= auth.accept_num)))
            .collect();
        compute_tpr_fpr(&outcomes)
    }

    /// Acceptance rate of tokens whose entries are all poisoned with a fixed
    /// `noise` and no offset.
    pub fn fully_poisoned_acceptance(
        &self,
        noise: f64,
        trials: usize,
        stream: u64,
    ) -> Result<f64, ExperimentError> {
        let mut rng = self.spec.rng(stream);
        let auth = AuthConfig {
            c: 0.0,
            ..self.spec.auth
        };
        let keep_none = vec![false; auth.total_num];
        let mut accepted = 0;
        for t in 0..trials {
            let device = &self.fleet[t % self.fleet.len()];
            let mut client = self.client(device, auth)?;
            let request = random_request(t as u32, &mut rng);
            let token = client
                .generate_with_mask(&request, &keep_none, PoisonNoise::Fixed(noise), &mut rng)?
                .token;
            let m = self
                .backend
                .match_count(device.device_id, &request, &token)
                .unwrap_or(0);
            accepted += usize::from(m >= auth.accept_num);
        }
        Ok(accepted as f64 / trials as f64)
    }

    /// Best-of-four software-mimic success against `victim`, trained on
    /// `tokens` eavesdropped tokens of traffic generated under `traffic`.
    /// Returns the rate of each strategy in [`AttackStrategy::ALL`] order.
    pub fn sw_mimic_rates(
        &self,
        victim: usize,
        traffic: AuthConfig,
        tokens: usize,
        stream: u64,
    ) -> Result<[f64; 4], ExperimentError> {
        let mut rng = self.spec.rng(stream);
        let device = &self.fleet[victim];
        let mut owner = self.client(device, traffic)?;
        let observed: Vec<TrainingPair> = observe_traffic(&mut owner, tokens, &mut rng)?
            .into_iter()
            .map(|o| o.pair)
            .collect();
        let mut rates = [0.0; 4];
        for (slot, strategy) in rates.iter_mut().zip(AttackStrategy::ALL) {
            let model = train_sw_mimic(
                &observed,
                strategy,
                &traffic,
                &self.spec.mapping,
                Some(device.model),
                &mut rng,
            )?;
            *slot = run_sw_mimic(
                &model,
                &self.backend,
                device.device_id,
                self.spec.trials,
                &mut rng,
            )?;
        }
        Ok(rates)
    }
}

/// Poisoned traffic against clean traffic with the same number of raw
/// pairs, best strategy on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MimicComparison {
    pub clean: [f64; 4],
    pub poisoned: [f64; 4],
}

impl MimicComparison {
    pub fn best_clean(&self) -> f64 {
        self.clean.iter().cloned().fold(0.0, f64::max)
    }

    pub fn best_poisoned(&self) -> f64 {
        self.poisoned.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn mimic_comparison(
    testbed: &Testbed,
    victim: usize,
    stream: u64,
) -> Result<MimicComparison, ExperimentError> {
    let auth = testbed.spec.auth;
    let tokens = testbed.spec.traffic_tokens;
    let clean_auth = AuthConfig {
        used_num: auth.total_num,
        ..auth
    };
    let clean_tokens = (tokens * auth.used_num).div_ceil(auth.total_num);
    Ok(MimicComparison {
        poisoned: testbed.sw_mimic_rates(victim, auth, tokens, stream)?,
        clean: testbed.sw_mimic_rates(victim, clean_auth, clean_tokens, stream + 1)?,
    })
}

/// Identification accuracy of both methods on one victim's traffic,
/// generated with poison noise drawn from `noise_range`. The extra device is
/// the next fleet member.
pub fn identification(
    testbed: &Testbed,
    victim: usize,
    noise_range: (f64, f64),
    stream: u64,
) -> Result<(IdentifyReport, IdentifyReport), ExperimentError> {
    let mut rng = testbed.spec.rng(stream);
    let auth = AuthConfig {
        noise_lo: noise_range.0,
        noise_hi: noise_range.1,
        ..testbed.spec.auth
    };
    let device = &testbed.fleet[victim];
    let mut owner = testbed.client(device, auth)?;
    let observed = observe_traffic(&mut owner, testbed.spec.traffic_tokens, &mut rng)?;
    let supervised = IdentifyMethod::Supervised {
        train_fraction: 0.5,
        threshold: auth.noise_lo,
    };
    let reference = Box::new(testbed.fleet[(victim + 1) % testbed.fleet.len()].clone());
    let extra = IdentifyMethod::ExtraDevice {
        reference,
        threshold: auth.noise_lo,
    };
    let mapping = &testbed.spec.mapping;
    Ok((
        identify_poison(&observed, &supervised, mapping, device.model, &mut rng)?,
        identify_poison(&observed, &extra, mapping, device.model, &mut rng)?,
    ))
}

/// Monte-Carlo tamper success on a single-spec space of `d` tasks per round
/// and two rounds.
pub fn tamper_success_rate(
    d: u32,
    variant: MappingVariant,
    budget: u64,
    trials: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let spec = TaskSpec::new(Feature::Sram, vec![d])
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let mapping =
        MappingConfig::new(2, vec![spec]).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for t in 0..trials {
        let request = Request::new(
            "UNLOCK",
            t as u32,
            vec![
                rng.random::<[u8; 4]>().to_vec(),
                rng.random::<[u8; 4]>().to_vec(),
            ],
        );
        wins += usize::from(
            run_tamper_attack(&request, &mapping, variant, budget, &mut rng)?.succeeded,
        );
    }
    Ok(wins as f64 / trials as f64)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub schema: u32,
    pub experiment: String,
    pub axis_value: String,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub attack: String,
    pub attack_rate: Option<f64>,
    pub seed: u64,
    pub trials: usize,
}

impl ExperimentRow {
    fn new(spec: &ExperimentSpec, axis_value: impl ToString) -> Self {
        ExperimentRow {
            schema: CSV_SCHEMA,
            experiment: spec.name.clone(),
            axis_value: axis_value.to_string(),
            tpr: None,
            fpr: None,
            attack: String::new(),
            attack_rate: None,
            seed: spec.seed,
            trials: spec.trials,
        }
    }
}

/// Runs a sweep and returns its rows. Deterministic in `spec` and `axis`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    axis: &SweepAxis,
) -> Result<Vec<ExperimentRow>, ExperimentError> {
    spec.validate()?;
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Features(features) => {
            for &f in features {
                let mapping = MappingConfig::with_features(spec.auth.total_num, &[f])
                    .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
                let single = ExperimentSpec {
                    mapping,
                    ..spec.clone()
                };
                let bed = Testbed::build(&single)?;
                let (tpr, fpr) = bed.tpr_fpr(spec.auth, 10)?;
                rows.push(ExperimentRow {
                    tpr: Some(tpr),
                    fpr: Some(fpr),
                    ..ExperimentRow::new(spec, f)
                });
            }
        }
        SweepAxis::UsedNum(values) | SweepAxis::AcceptNum(values) => {
            let bed = Testbed::build(spec)?;
            for (i, &v) in values.iter().enumerate() {
                let auth = match axis {
                    SweepAxis::UsedNum(_) => AuthConfig {
                        used_num: v,
                        accept_num: v.div_ceil(2),
                        ..spec.auth
                    },
                    _ => AuthConfig {
                        accept_num: v,
                        ..spec.auth
                    },
                };
                auth.validate()?;
                let (tpr, fpr) = bed.tpr_fpr(auth, 100 + i as u64)?;
                let row = ExperimentRow {
                    tpr: Some(tpr),
                    fpr: Some(fpr),
                    ..ExperimentRow::new(spec, v)
                };
                rows.push(row);
            }
        }
        SweepAxis::Noise(values) => {
            let bed = Testbed::build(spec)?;
            let clean = AuthConfig {
                used_num: spec.auth.total_num,
                ..spec.auth
            };
            let (tpr, fpr) = bed.tpr_fpr(clean, 200)?;
            for (i, &noise) in values.iter().enumerate() {
                let rate = bed.fully_poisoned_acceptance(noise, spec.trials, 300 + i as u64)?;
                rows.push(ExperimentRow {
                    tpr: Some(tpr),
                    fpr: Some(fpr),
                    attack: "fully-poisoned".into(),
                    attack_rate: Some(rate),
                    ..ExperimentRow::new(spec, noise)
                });
            }
        }
        SweepAxis::TamperBudget { d, budgets } => {
            for (i, &budget) in budgets.iter().enumerate() {
                for (j, variant) in MappingVariant::ALL.into_iter().enumerate() {
                    let seed = spec.seed ^ ((i as u64) << 32) ^ j as u64;
                    let rate = tamper_success_rate(*d, variant, budget, spec.trials, seed)?;
                    rows.push(ExperimentRow {
                        attack: format!("tamper-{}", variant.name()),
                        attack_rate: Some(rate),
                        ..ExperimentRow::new(spec, budget)
                    });
                }
                rows.push(ExperimentRow {
                    attack: "closed-form".into(),
                    attack_rate: Some(closed_form_tamper_prob(*d as u64, budget)),
                    ..ExperimentRow::new(spec, budget)
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(out: W, rows: &[ExperimentRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Appends rows to a CSV file. The header is written only when the file is
/// new or empty.
pub fn append_rows(path: &Path, rows: &[ExperimentRow]) -> Result<(), ExperimentError> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}
