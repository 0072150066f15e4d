//! Request-to-task message mapping.
//!
//! A [`Request`] is turned into `total_num` [`HardwareTask`]s by a chained
//! AP-hash construction. Every round hashes the operation together with the
//! previous round's digest (`h1`), the nonce with the `i`-th payload counted
//! from the front (`h2`) and from the back (`h3`), then folds the three into
//! the next digest. Each digest is split by mixed-radix decomposition into a
//! feature selector and the task arguments.
//!
//! All hash inputs are byte-exact:
//!
//! * operation: raw UTF-8 bytes
//! * nonce, `h1`, `h2`, `h3` and the running digest: 4-byte big-endian
//! * fields are concatenated without separators

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest accepted operation label, in bytes.
pub const MAX_OPERATION_LEN: usize = 64;
/// Largest number of payloads in one request.
pub const MAX_PAYLOADS: usize = 16;
/// Longest accepted payload, in bytes.
pub const MAX_PAYLOAD_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("request carries no payloads")]
    EmptyPayloads,
    #[error("request has {0} payloads, at most {MAX_PAYLOADS} allowed")]
    TooManyPayloads(usize),
    #[error("payload {index} is {len} bytes, at most {MAX_PAYLOAD_LEN} allowed")]
    PayloadTooLong { index: usize, len: usize },
    #[error("operation is {0} bytes, at most {MAX_OPERATION_LEN} allowed")]
    OperationTooLong(usize),
    #[error("invalid mapping configuration: {0}")]
    InvalidConfig(String),
}

/// The six simulated hardware features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    DacAdc,
    Fpu,
    Pwm,
    RtcFre,
    RtcPha,
    Sram,
}

impl Feature {
    pub const ALL: [Feature; 6] = [
        Feature::DacAdc,
        Feature::Fpu,
        Feature::Pwm,
        Feature::RtcFre,
        Feature::RtcPha,
        Feature::Sram,
    ];

    /// Wire code, also the index into [`Feature::ALL`].
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Feature> {
        Feature::ALL.get(code as usize).copied()
    }

    /// Number of arguments the task procedure for this feature takes.
    pub fn arity(self) -> usize {
        match self {
            Feature::DacAdc => 4,
            Feature::Fpu => 3,
            Feature::Pwm => 5,
            Feature::RtcFre => 4,
            Feature::RtcPha => 3,
            Feature::Sram => 1,
        }
    }

    /// Default argument cardinalities.
    pub fn default_radices(self) -> Vec<u32> {
        match self {
            Feature::DacAdc => vec![256, 2, 2, 4],
            Feature::Fpu => vec![2, 32, 32],
            Feature::Pwm => vec![4, 8, 32, 2, 2],
            Feature::RtcFre => vec![4, 8, 16, 8],
            Feature::RtcPha => vec![4, 8, 128],
            Feature::Sram => vec![1024],
        }
    }

    pub fn is_analog(self) -> bool {
        self != Feature::Sram
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::DacAdc => "DacAdc",
            Feature::Fpu => "Fpu",
            Feature::Pwm => "Pwm",
            Feature::RtcFre => "RtcFre",
            Feature::RtcPha => "RtcPha",
            Feature::Sram => "Sram",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .iter()
            .copied()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown feature `{s}`"))
    }
}

/// A feature together with the cardinality of each of its argument slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub feature: Feature,
    pub arg_radices: Vec<u32>,
}

impl TaskSpec {
    pub fn new(feature: Feature, arg_radices: Vec<u32>) -> Result<Self, MappingError> {
        let spec = TaskSpec {
            feature,
            arg_radices,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(feature: Feature) -> Self {
        TaskSpec {
            feature,
            arg_radices: feature.default_radices(),
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        if self.arg_radices.len() != self.feature.arity() {
            return Err(MappingError::InvalidConfig(format!(
                "{} takes {} arguments, got {} radices",
                self.feature,
                self.feature.arity(),
                self.arg_radices.len()
            )));
        }
        if self.arg_radices.contains(&0) {
            return Err(MappingError::InvalidConfig(format!(
                "{} has a zero radix",
                self.feature
            )));
        }
        if self.size() < 2 {
            return Err(MappingError::InvalidConfig(format!(
                "{} argument space must hold at least two values",
                self.feature
            )));
        }
        Ok(())
    }

    /// Number of distinct argument tuples.
    pub fn size(&self) -> u64 {
        self.arg_radices.iter().map(|&r| r as u64).product()
    }

    /// Whether `task` is a well-formed task for this spec.
    pub fn admits(&self, task: &HardwareTask) -> bool {
        task.feature == self.feature
            && task.args.len() == self.arg_radices.len()
            && task.args.iter().zip(&self.arg_radices).all(|(a, r)| a < r)
    }

    /// Argument tuple with linear index `index` (last slot varies fastest).
    pub fn task_at(&self, mut index: u64) -> HardwareTask {
        let mut args = vec![0u32; self.arg_radices.len()];
        for (slot, &radix) in args.iter_mut().zip(&self.arg_radices).rev() {
            *slot = (index % radix as u64) as u32;
            index /= radix as u64;
        }
        HardwareTask {
            feature: self.feature,
            args,
        }
    }
}

/// One fingerprinting procedure with concrete arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HardwareTask {
    pub feature: Feature,
    pub args: Vec<u32>,
}

impl HardwareTask {
    pub fn new(feature: Feature, args: Vec<u32>) -> Self {
        HardwareTask { feature, args }
    }
}

impl fmt::Display for HardwareTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.feature)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl FromStr for HardwareTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (feature, args) = s
            .split_once(':')
            .ok_or_else(|| format!("missing `:` in `{s}`"))?;
        let feature = feature.parse()?;
        let args = args
            .split('/')
            .map(|a| {
                a.parse::<u32>()
                    .map_err(|e| format!("bad argument `{a}`: {e}"))
            })
            .collect::<Result<_, _>>()?;
        Ok(HardwareTask { feature, args })
    }
}

/// An operation the device wants authenticated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub operation: String,
    pub nonce: u32,
    pub payloads: Vec<Vec<u8>>,
}

impl Request {
    pub fn new(operation: impl Into<String>, nonce: u32, payloads: Vec<Vec<u8>>) -> Self {
        Request {
            operation: operation.into(),
            nonce,
            payloads,
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        if self.operation.len() > MAX_OPERATION_LEN {
            return Err(MappingError::OperationTooLong(self.operation.len()));
        }
        if self.payloads.is_empty() {
            return Err(MappingError::EmptyPayloads);
        }
        if self.payloads.len() > MAX_PAYLOADS {
            return Err(MappingError::TooManyPayloads(self.payloads.len()));
        }
        if let Some((index, p)) = self
            .payloads
            .iter()
            .enumerate()
            .find(|(_, p)| p.len() > MAX_PAYLOAD_LEN)
        {
            return Err(MappingError::PayloadTooLong {
                index,
                len: p.len(),
            });
        }
        Ok(())
    }

    /// The `i`-th payload counted from the front, wrapping around.
    pub fn payload_fwd(&self, i: usize) -> &[u8] {
        &self.payloads[i % self.payloads.len()]
    }

    /// The `i`-th payload counted from the back, wrapping around.
    pub fn payload_bwd(&self, i: usize) -> &[u8] {
        let p = self.payloads.len();
        &self.payloads[(p - 1 - i % p) % p]
    }
}

/// Which of the per-round hashes feed the digest.
///
/// Only [`MappingVariant::Full`] is used for authentication. The others exist
/// to measure how much each hash contributes to tamper resistance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingVariant {
    Full,
    H1Only,
    H3Only,
    H1H2,
}

impl MappingVariant {
    pub const ALL: [MappingVariant; 4] = [
        MappingVariant::Full,
        MappingVariant::H1Only,
        MappingVariant::H3Only,
        MappingVariant::H1H2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MappingVariant::Full => "full",
            MappingVariant::H1Only => "h1-only",
            MappingVariant::H3Only => "h3-only",
            MappingVariant::H1H2 => "h1-h2",
        }
    }

    /// Does the digest of round `i` read the front payload?
    fn reads_fwd(self) -> bool {
        matches!(self, MappingVariant::Full | MappingVariant::H1H2)
    }

    fn reads_bwd(self) -> bool {
        matches!(self, MappingVariant::Full | MappingVariant::H3Only)
    }

    fn reads_operation(self) -> bool {
        !matches!(self, MappingVariant::H3Only)
    }

    /// Payload indices that influence round `round` (not counting earlier
    /// rounds reached through the digest chain).
    pub fn payloads_read(self, round: usize, payload_count: usize) -> Vec<usize> {
        let p = payload_count;
        let mut out = Vec::with_capacity(2);
        if self.reads_fwd() {
            out.push(round % p);
        }
        if self.reads_bwd() {
            let idx = (p - 1 - round % p) % p;
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
        out
    }

    /// Whether the operation influences the task list at all.
    pub fn binds_operation(self) -> bool {
        self.reads_operation()
    }
}

impl FromStr for MappingVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MappingVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown mapping variant `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub total_num: usize,
    pub enabled_specs: Vec<TaskSpec>,
}

impl Default for MappingConfig {
    /// All six features at their default radices, ten tasks per request.
    fn default() -> Self {
        MappingConfig {
            total_num: 10,
            enabled_specs: Feature::ALL
                .iter()
                .map(|&f| TaskSpec::default_for(f))
                .collect(),
        }
    }
}

impl MappingConfig {
    pub fn new(total_num: usize, enabled_specs: Vec<TaskSpec>) -> Result<Self, MappingError> {
        let cfg = MappingConfig {
            total_num,
            enabled_specs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default radices for the given features.
    pub fn with_features(total_num: usize, features: &[Feature]) -> Result<Self, MappingError> {
        MappingConfig::new(
            total_num,
            features.iter().map(|&f| TaskSpec::default_for(f)).collect(),
        )
    }

    /// The four-feature ensemble used for authentication by default:
    /// DacAdc, Pwm, RtcFre and Sram.
    pub fn ensemble() -> Self {
        MappingConfig::with_features(
            10,
            &[
                Feature::DacAdc,
                Feature::Pwm,
                Feature::RtcFre,
                Feature::Sram,
            ],
        )
        .expect("default ensemble is valid")
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        if self.total_num == 0 || self.total_num > u8::MAX as usize {
            return Err(MappingError::InvalidConfig(format!(
                "total_num must be in 1..=255, got {}",
                self.total_num
            )));
        }
        if self.enabled_specs.is_empty() {
            return Err(MappingError::InvalidConfig("no task specs enabled".into()));
        }
        for spec in &self.enabled_specs {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn spec_for(&self, feature: Feature) -> Option<&TaskSpec> {
        self.enabled_specs.iter().find(|s| s.feature == feature)
    }
}

/// The AP hash: a 32-bit non-cryptographic string hash.
pub fn ap_hash(input: &[u8]) -> u32 {
    let mut hash: u32 = 0xAAAA_AAAA;
    for (i, &b) in input.iter().enumerate() {
        let b = b as u32;
        if i & 1 == 0 {
            hash ^= (hash << 7) ^ b.wrapping_mul(hash >> 3);
        } else {
            hash ^= !((hash << 11).wrapping_add(b ^ (hash >> 5)));
        }
    }
    hash
}

/// Hash of several fields concatenated without separators.
fn hash_parts(parts: &[&[u8]]) -> u32 {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut buf = Vec::with_capacity(len);
    for p in parts {
        buf.extend_from_slice(p);
    }
    ap_hash(&buf)
}

/// Number of distinct tasks one round can emit.
pub fn task_space_size(config: &MappingConfig) -> u64 {
    config.enabled_specs.iter().map(TaskSpec::size).sum()
}

/// Lazily extended digest stream: word 0 is the digest, word `k + 1` is
/// `ap_hash(digest_be || k_be)`.
struct DigestStream {
    digest: u32,
    next_counter: u32,
    quotient: u128,
}

impl DigestStream {
    fn new(digest: u32) -> Self {
        DigestStream {
            digest,
            next_counter: 0,
            quotient: digest as u128,
        }
    }

    fn take(&mut self, radix: u32) -> u32 {
        let radix = radix as u128;
        if self.quotient < radix {
            let mut buf = [0u8; 8];
            buf[..4].copy_from_slice(&self.digest.to_be_bytes());
            buf[4..].copy_from_slice(&self.next_counter.to_be_bytes());
            self.next_counter += 1;
            self.quotient = (self.quotient << 32) + ap_hash(&buf) as u128;
        }
        let field = (self.quotient % radix) as u32;
        self.quotient /= radix;
        field
    }
}

/// Splits one round digest into a task.
///
/// The first mixed-radix field picks the spec (skipped when only one spec is
/// enabled); the remaining fields are the arguments. Whenever the running
/// quotient drops below the next radix, the next counter-hash word is folded
/// in as `quotient * 2^32 + word`.
pub fn divide_arguments(digest: u32, config: &MappingConfig) -> HardwareTask {
    let specs = &config.enabled_specs;
    let mut stream = DigestStream::new(digest);
    let spec = if specs.len() > 1 {
        &specs[stream.take(specs.len() as u32) as usize]
    } else {
        &specs[0]
    };
    let args = spec.arg_radices.iter().map(|&r| stream.take(r)).collect();
    HardwareTask {
        feature: spec.feature,
        args,
    }
}

/// Maps a request to its task list.
pub fn map_message(
    request: &Request,
    config: &MappingConfig,
) -> Result<Vec<HardwareTask>, MappingError> {
    map_message_variant(request, config, MappingVariant::Full)
}

/// [`map_message`] with a selectable digest construction, for ablation
/// experiments.
pub fn map_message_variant(
    request: &Request,
    config: &MappingConfig,
    variant: MappingVariant,
) -> Result<Vec<HardwareTask>, MappingError> {
    if request.payloads.is_empty() {
        return Err(MappingError::EmptyPayloads);
    }
    config.validate()?;
    Ok(round_digests(request, config.total_num, variant)
        .into_iter()
        .map(|d| divide_arguments(d, config))
        .collect())
}

/// The per-round digests, before argument division.
pub fn round_digests(request: &Request, total_num: usize, variant: MappingVariant) -> Vec<u32> {
    let op = request.operation.as_bytes();
    let nonce = request.nonce.to_be_bytes();
    let mut digest: u32 = 0;
    let mut out = Vec::with_capacity(total_num);
    for i in 0..total_num {
        let h1 = hash_parts(&[op, &nonce, &digest.to_be_bytes()]);
        let h2 = hash_parts(&[&nonce, request.payload_fwd(i)]);
        let h3 = hash_parts(&[&nonce, request.payload_bwd(i)]);
        digest = match variant {
            MappingVariant::Full => {
                hash_parts(&[&h1.to_be_bytes(), &h2.to_be_bytes(), &h3.to_be_bytes()])
            }
            MappingVariant::H1Only => h1,
            MappingVariant::H3Only => h3,
            MappingVariant::H1H2 => hash_parts(&[&h1.to_be_bytes(), &h2.to_be_bytes()]),
        };
        out.push(digest);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(radices: Vec<u32>) -> MappingConfig {
        MappingConfig {
            total_num: 10,
            enabled_specs: vec![TaskSpec {
                feature: Feature::Pwm,
                arg_radices: radices,
            }],
        }
    }

    #[test]
    fn ap_hash_vectors() {
        assert_eq!(ap_hash(b""), 0xAAAA_AAAA);
        // Reference values from tests/vectors/gen_mapping.py.
        assert_eq!(ap_hash(b"a"), 0xEAAA_AA9F);
        assert_eq!(ap_hash(b"ab"), 0x49FF_1856);
        assert_eq!(ap_hash(b"abc"), 0x25C7_FF88);
        assert_eq!(ap_hash(b"hello"), 0x3B42_27CD);
        assert_eq!(ap_hash(b"abc"), ap_hash(b"abc"));
    }

    #[test]
    fn divide_mixed_radix_example() {
        let cfg = single(vec![6, 256, 20]);
        assert_eq!(divide_arguments(1_234_567, &cfg).args, vec![1, 193, 3]);
    }

    #[test]
    fn divide_zero_digest_uses_counter_extension() {
        let cfg = single(vec![6, 256, 20]);
        // 0 is below every radix, so the first extension word is folded in
        // immediately; the oracle gives [0, 186, 11].
        assert_eq!(divide_arguments(0, &cfg).args, vec![0, 186, 11]);
        let d1 = ap_hash(&[0, 0, 0, 0, 0, 0, 0, 0]) as u64;
        assert_eq!(divide_arguments(0, &cfg).args[0] as u64, d1 % 6);
    }

    #[test]
    fn divide_binary_radix_is_balanced() {
        let cfg = MappingConfig {
            total_num: 1,
            enabled_specs: vec![TaskSpec {
                feature: Feature::Sram,
                arg_radices: vec![2],
            }],
        };
        let ones: u32 = (0..10u32).map(|d| divide_arguments(d, &cfg).args[0]).sum();
        // Digests 0 and 1 fold in extension words; 2..=9 are their own parity.
        let expected: u32 = (2..10).map(|d| d % 2).sum::<u32>()
            + (0..2)
                .map(|d: u32| ap_hash(&[&d.to_be_bytes()[..], &[0, 0, 0, 0]].concat()) % 2)
                .sum::<u32>();
        assert_eq!(ones, expected);
        assert!((3..=7).contains(&ones));
    }

    #[test]
    fn task_space_sizes() {
        assert_eq!(
            task_space_size(&single(vec![4, 8, 16, 2, 60])),
            4 * 8 * 16 * 2 * 60
        );
        let two = MappingConfig {
            total_num: 1,
            enabled_specs: vec![
                TaskSpec {
                    feature: Feature::Sram,
                    arg_radices: vec![10],
                },
                TaskSpec {
                    feature: Feature::Sram,
                    arg_radices: vec![10],
                },
            ],
        };
        assert_eq!(task_space_size(&two), 20);
        assert_eq!(task_space_size(&MappingConfig::default()), 19_456);
        assert_eq!(
            TaskSpec {
                feature: Feature::Fpu,
                arg_radices: vec![6, 256, 20]
            }
            .size(),
            30_720
        );
    }

    #[test]
    fn map_message_rejects_empty_payloads() {
        let req = Request::new("UNLOCK", 1, vec![]);
        assert_eq!(
            map_message(&req, &MappingConfig::default()),
            Err(MappingError::EmptyPayloads)
        );
    }

    #[test]
    fn nonce_changes_task_list() {
        let cfg = MappingConfig::default();
        let a = map_message(&Request::new("UNLOCK", 7, vec![vec![1], vec![2]]), &cfg).unwrap();
        let b = map_message(&Request::new("UNLOCK", 8, vec![vec![1], vec![2]]), &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn payload_indexing_wraps() {
        let req = Request::new("x", 0, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(req.payload_fwd(4), &[1]);
        assert_eq!(req.payload_bwd(0), &[2]);
        assert_eq!(req.payload_bwd(4), &[1]);
        assert_eq!(MappingVariant::Full.payloads_read(0, 3), vec![0, 2]);
        assert_eq!(MappingVariant::Full.payloads_read(1, 3), vec![1]);
        assert_eq!(
            MappingVariant::H1Only.payloads_read(1, 3),
            Vec::<usize>::new()
        );
    }

    #[test]
    fn request_validation() {
        assert!(Request::new("a".repeat(65), 0, vec![vec![]])
            .validate()
            .is_err());
        assert!(Request::new("a", 0, vec![vec![0; 257]]).validate().is_err());
        assert!(Request::new("a", 0, vec![vec![0]; 17]).validate().is_err());
        assert!(Request::new("a", 0, vec![vec![0; 256]; 16])
            .validate()
            .is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::new(Feature::Sram, vec![1]).is_err());
        assert!(TaskSpec::new(Feature::Sram, vec![2, 2]).is_err());
        assert!(TaskSpec::new(Feature::DacAdc, vec![256, 2, 2, 4]).is_ok());
    }

    #[test]
    fn task_round_trips_through_text() {
        let t = HardwareTask::new(Feature::RtcFre, vec![3, 0, 12, 6]);
        assert_eq!(t.to_string().parse::<HardwareTask>().unwrap(), t);
    }

    #[test]
    fn task_at_enumerates_in_order() {
        let spec = TaskSpec {
            feature: Feature::Fpu,
            arg_radices: vec![2, 3, 4],
        };
        assert_eq!(spec.task_at(0).args, vec![0, 0, 0]);
        assert_eq!(spec.task_at(5).args, vec![0, 1, 1]);
        assert_eq!(spec.task_at(23).args, vec![1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn emitted_arguments_respect_radices(
            digest: u32,
            radices in proptest::collection::vec(1u32..5000, 1..6),
        ) {
            let t = divide_arguments(digest, &single(radices.clone()));
            proptest::prop_assert_eq!(t.args.len(), radices.len());
            for (a, r) in t.args.iter().zip(&radices) {
                proptest::prop_assert!(a < r);
            }
        }

        #[test]
        fn default_mapping_is_deterministic_and_in_range(
            op in "[A-Z_]{1,12}",
            nonce: u32,
            payloads in proptest::collection::vec(proptest::collection::vec(0u8.., 0..8), 1..4),
        ) {
            let req = Request::new(op, nonce, payloads);
            let config = MappingConfig::default();
            let tasks = map_message(&req, &config).unwrap();
            proptest::prop_assert_eq!(&tasks, &map_message(&req, &config).unwrap());
            for t in &tasks {
                proptest::prop_assert!(config.spec_for(t.feature).unwrap().admits(t));
            }
        }

        #[test]
        fn every_payload_feeds_two_rounds(
            nonce: u32,
            payloads in proptest::collection::vec(proptest::collection::vec(0u8.., 1..8), 2..6),
            pick: usize,
            bit in 0u8..8,
        ) {
            let k = pick % payloads.len();
            let rounds: Vec<usize> =
                (0..10).filter(|&i| MappingVariant::Full.payloads_read(i, payloads.len()).contains(&k)).collect();
            proptest::prop_assert!(rounds.len() >= 2);
            let req = Request::new("OP", nonce, payloads.clone());
            let mut changed = payloads;
            changed[k][0] ^= 1 << bit;
            let a = round_digests(&req, 10, MappingVariant::Full);
            let b = round_digests(&Request::new("OP", nonce, changed), 10, MappingVariant::Full);
            proptest::prop_assert!(a[..rounds[0]] == b[..rounds[0]]);
            proptest::prop_assert_ne!(a[rounds[0]], b[rounds[0]]);
        }
    }
}
