//! Client-side token generation.
//!
//! The client maps a request to its tasks, runs them on its hardware, keeps
//! `used_num` readings untouched and poisons the rest with
//! `fp * (1 + noise) + C`. Which entries were kept never leaves the client.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hwsim::{execute_task, DeviceProfile, FingerprintValue, SimError};
use crate::mapping::{map_message, MappingConfig, MappingError, Request};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("nonce {nonce} does not advance past {last}")]
    NonceRegression { nonce: u32, last: u32 },
    #[error("invalid parameters: {0}")]
    RangeError(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenDecodeError {
    #[error("token truncated")]
    Truncated,
    #[error("unknown value tag {0}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes after token")]
    TrailingBytes(usize),
}

/// Token sizing and poisoning parameters shared by client and backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    pub total_num: usize,
    pub used_num: usize,
    pub accept_num: usize,
    pub noise_lo: f64,
    pub noise_hi: f64,
    pub c: f64,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            total_num: 10,
            used_num: 5,
            accept_num: 3,
            noise_lo: 0.08,
            noise_hi: 0.2,
            c: 1.0,
        }
    }
}

impl AuthConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(1 <= self.accept_num
            && self.accept_num <= self.used_num
            && self.used_num <= self.total_num)
        {
            return Err(ClientError::RangeError(format!(
                "need 1 <= accept_num ({}) <= used_num ({}) <= total_num ({})",
                self.accept_num, self.used_num, self.total_num
            )));
        }
        if self.total_num > u8::MAX as usize {
            return Err(ClientError::RangeError(format!(
                "total_num {} exceeds 255",
                self.total_num
            )));
        }
        if !(self.noise_lo > 0.0 && self.noise_lo <= self.noise_hi && self.noise_hi.is_finite()) {
            return Err(ClientError::RangeError(format!(
                "need 0 < noise_lo ({}) <= noise_hi ({})",
                self.noise_lo, self.noise_hi
            )));
        }
        if !self.c.is_finite() {
            return Err(ClientError::RangeError("C must be finite".into()));
        }
        Ok(())
    }

    /// Fraction of entries that carry raw readings.
    pub fn used_ratio(&self) -> f64 {
        self.used_num as f64 / self.total_num as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub task_index: u8,
    pub fingerprint: FingerprintValue,
}

/// The fingerprints bound to one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub nonce: u32,
    pub entries: Vec<TokenEntry>,
}

const TAG_ANALOG: u8 = 0;
const TAG_BITS32: u8 = 1;

impl Token {
    /// Wire layout: nonce (4 bytes, big-endian), entry count (1 byte), then
    /// per entry the task index (1 byte), a tag (0 analog, 1 bits) and the
    /// value as a little-endian IEEE-754 double or little-endian u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.entries.len() * 10);
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.push(self.entries.len() as u8);
        for e in &self.entries {
            out.push(e.task_index);
            match e.fingerprint {
                FingerprintValue::Analog(v) => {
                    out.push(TAG_ANALOG);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                FingerprintValue::Bits32(w) => {
                    out.push(TAG_BITS32);
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Token, TokenDecodeError> {
        let (token, used) = Token::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(TokenDecodeError::TrailingBytes(bytes.len() - used));
        }
        Ok(token)
    }

    /// Decodes a token from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Token, usize), TokenDecodeError> {
        let header = bytes.get(..5).ok_or(TokenDecodeError::Truncated)?;
        let nonce = u32::from_be_bytes(header[..4].try_into().unwrap());
        let count = header[4] as usize;
        let mut pos = 5;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let head = bytes.get(pos..pos + 2).ok_or(TokenDecodeError::Truncated)?;
            let (task_index, tag) = (head[0], head[1]);
            pos += 2;
            let fingerprint = match tag {
                TAG_ANALOG => {
                    let raw = bytes.get(pos..pos + 8).ok_or(TokenDecodeError::Truncated)?;
                    pos += 8;
                    FingerprintValue::Analog(f64::from_le_bytes(raw.try_into().unwrap()))
                }
                TAG_BITS32 => {
                    let raw = bytes.get(pos..pos + 4).ok_or(TokenDecodeError::Truncated)?;
                    pos += 4;
                    FingerprintValue::Bits32(u32::from_le_bytes(raw.try_into().unwrap()))
                }
                other => return Err(TokenDecodeError::UnknownTag(other)),
            };
            entries.push(TokenEntry {
                task_index,
                fingerprint,
            });
        }
        Ok((Token { nonce, entries }, pos))
    }
}

/// Uniformly random mask with exactly `used_num` entries set (set = keep raw).
pub fn choose_poison_mask<R: Rng + ?Sized>(
    total_num: usize,
    used_num: usize,
    rng: &mut R,
) -> Result<Vec<bool>, ClientError> {
    if used_num == 0 || used_num > total_num {
        return Err(ClientError::RangeError(format!(
            "need 1 <= used_num ({used_num}) <= total_num ({total_num})"
        )));
    }
    let mut mask = vec![false; total_num];
    for i in sample(rng, total_num, used_num) {
        mask[i] = true;
    }
    Ok(mask)
}

/// `fp * (1 + noise) + C`. Bit patterns are treated as unsigned integers,
/// rounded and reduced modulo 2^32.
pub fn poison_value(fp: FingerprintValue, noise: f64, c: f64) -> FingerprintValue {
    match fp {
        FingerprintValue::Analog(v) => FingerprintValue::Analog(v * (noise + 1.0) + c),
        FingerprintValue::Bits32(w) => {
            let v = (w as f64 * (noise + 1.0) + c).round();
            FingerprintValue::Bits32(v.rem_euclid(4_294_967_296.0) as u64 as u32)
        }
    }
}

/// Inverse of [`poison_value`] for a guessed noise value.
pub fn unpoison_value(fp: FingerprintValue, noise: f64, c: f64) -> FingerprintValue {
    match fp {
        FingerprintValue::Analog(v) => FingerprintValue::Analog((v - c) / (noise + 1.0)),
        FingerprintValue::Bits32(w) => {
            let v = ((w as f64 - c) / (noise + 1.0)).round();
            FingerprintValue::Bits32(v.rem_euclid(4_294_967_296.0) as u64 as u32)
        }
    }
}

/// A token together with the client-private record of what was poisoned.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedToken {
    pub token: Token,
    /// `true` where the entry carries the raw reading.
    pub mask: Vec<bool>,
    pub raw: Vec<FingerprintValue>,
}

/// How poisoned entries draw their noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoisonNoise {
    Uniform { lo: f64, hi: f64 },
    Fixed(f64),
}

impl PoisonNoise {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            PoisonNoise::Uniform { lo, hi } if hi > lo => rng.random_range(lo..=hi),
            PoisonNoise::Uniform { lo, .. } => lo,
            PoisonNoise::Fixed(v) => v,
        }
    }
}

/// A device's token generator. Owns the device's nonce counter.
#[derive(Debug, Clone)]
pub struct Client {
    pub profile: DeviceProfile,
    pub auth: AuthConfig,
    pub mapping: MappingConfig,
    last_nonce: Option<u32>,
}

impl Client {
    pub fn new(
        profile: DeviceProfile,
        auth: AuthConfig,
        mapping: MappingConfig,
    ) -> Result<Self, ClientError> {
        auth.validate()?;
        mapping.validate()?;
        if mapping.total_num != auth.total_num {
            return Err(ClientError::RangeError(format!(
                "mapping emits {} tasks, auth config expects {}",
                mapping.total_num, auth.total_num
            )));
        }
        Ok(Client {
            profile,
            auth,
            mapping,
            last_nonce: None,
        })
    }

    pub fn last_nonce(&self) -> Option<u32> {
        self.last_nonce
    }

    /// The next unused nonce.
    pub fn next_nonce(&self) -> u32 {
        self.last_nonce.map_or(0, |n| n.saturating_add(1))
    }

    /// Builds the token for `request`, advancing the nonce counter.
    pub fn generate_token<R: Rng + ?Sized>(
        &mut self,
        request: &Request,
        rng: &mut R,
    ) -> Result<Token, ClientError> {
        Ok(self.generate_detailed(request, rng)?.token)
    }

    /// [`Client::generate_token`] that also returns the private mask and the
    /// raw readings.
    pub fn generate_detailed<R: Rng + ?Sized>(
        &mut self,
        request: &Request,
        rng: &mut R,
    ) -> Result<GeneratedToken, ClientError> {
        let mask = choose_poison_mask(self.auth.total_num, self.auth.used_num, rng)?;
        let noise = PoisonNoise::Uniform {
            lo: self.auth.noise_lo,
            hi: self.auth.noise_hi,
        };
        self.generate_with_mask(request, &mask, noise, rng)
    }

    /// Token generation with an explicit keep-mask and noise source. The mask
    /// may keep nothing; this is how fully poisoned tokens are produced for
    /// noise-rejection measurements.
    pub fn generate_with_mask<R: Rng + ?Sized>(
        &mut self,
        request: &Request,
        mask: &[bool],
        noise: PoisonNoise,
        rng: &mut R,
    ) -> Result<GeneratedToken, ClientError> {
        if let Some(last) = self.last_nonce {
            if request.nonce <= last {
                return Err(ClientError::NonceRegression {
                    nonce: request.nonce,
                    last,
                });
            }
        }
        if mask.len() != self.auth.total_num {
            return Err(ClientError::RangeError(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                self.auth.total_num
            )));
        }
        request.validate()?;
        let tasks = map_message(request, &self.mapping)?;
        let mut raw = Vec::with_capacity(tasks.len());
        let mut entries = Vec::with_capacity(tasks.len());
        for (i, (task, &keep)) in tasks.iter().zip(mask).enumerate() {
            let fp = execute_task(&self.profile, task, rng)?;
            let sent = if keep {
                fp
            } else {
                poison_value(fp, noise.draw(rng), self.auth.c)
            };
            raw.push(fp);
            entries.push(TokenEntry {
                task_index: i as u8,
                fingerprint: sent,
            });
        }
        self.last_nonce = Some(request.nonce);
        Ok(GeneratedToken {
            token: Token {
                nonce: request.nonce,
                entries,
            },
            mask: mask.to_vec(),
            raw,
        })
    }
}
