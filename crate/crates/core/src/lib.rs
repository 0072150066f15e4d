//! Request-bound hardware fingerprint tokens.
//!
//! A client maps every request to a list of fingerprinting tasks with a
//! chained hash, runs them on its own hardware and sends the readings along
//! with the request. Some readings are deliberately poisoned so that an
//! eavesdropper training on the traffic learns a skewed model. The backend
//! predicts each reading from a per-device model and accepts the request
//! when enough of them match.

pub mod attacks;
pub mod backend;
pub mod client;
pub mod experiment;
pub mod hwsim;
pub mod mapping;
pub mod service;

pub use backend::{AuthResult, Backend, BackendConfig, Decision, Reason};
pub use client::{AuthConfig, Client, Token};
pub use hwsim::{DeviceProfile, FingerprintValue, Model};
pub use mapping::{Feature, HardwareTask, MappingConfig, Request};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mapping.md")]
    mod mapping {}
    #[doc = include_str!("../../../book/src/hwsim.md")]
    mod hwsim {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/backend.md")]
    mod backend {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
