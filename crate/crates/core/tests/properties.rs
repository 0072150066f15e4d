//! Randomized properties of an enrolled backend.

use std::sync::OnceLock;

use fpauth::attacks::random_request;
use fpauth::backend::Reason;
use fpauth::client::{AuthConfig, Client};
use fpauth::experiment::{ExperimentSpec, Testbed};
use fpauth::mapping::{Feature, MappingConfig};
use fpauth::Backend;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bed() -> &'static Testbed {
    static BED: OnceLock<Testbed> = OnceLock::new();
    BED.get_or_init(|| {
        let spec = ExperimentSpec {
            count: 3,
            pairs_per_feature: 300,
            sram_repeats: 2,
            trials: 50,
            mapping: MappingConfig::with_features(
                10,
                &[Feature::RtcFre, Feature::Pwm, Feature::Sram],
            )
            .unwrap(),
            ..Default::default()
        };
        Testbed::build(&spec).unwrap()
    })
}

fn snapshot() -> &'static str {
    static SNAP: OnceLock<String> = OnceLock::new();
    SNAP.get_or_init(|| bed().backend.to_snapshot())
}

/// A fresh copy of the enrolled backend with a different acceptNum.
fn backend_with_accept(accept_num: usize) -> Backend {
    let mut snap: serde_json::Value = serde_json::from_str(snapshot()).unwrap();
    snap["config"]["auth"]["accept_num"] = accept_num.into();
    snap["config"]["auth"]["used_num"] = 10.into();
    Backend::from_snapshot(&snap.to_string()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_nonce_is_accepted_twice(
        nonces in prop::collection::vec(0u32..40, 1..40),
        seed: u64,
    ) {
        let bed = bed();
        let backend = backend_with_accept(3);
        let device = &bed.fleet[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // a client that only refuses to reuse its own nonces, so regressions reach the backend
        let mut accepted = Vec::new();
        for n in nonces {
            let mut client = Client::new(device.clone(), bed.spec.auth, bed.spec.mapping.clone()).unwrap();
            let request = random_request(n, &mut rng);
            let token = client.generate_token(&request, &mut rng).unwrap();
            let r = backend.authenticate(device.device_id, &request, &token);
            if r.accepted() {
                prop_assert!(!accepted.contains(&n));
                prop_assert!(accepted.last().is_none_or(|&last| n > last));
                accepted.push(n);
            } else if accepted.last().is_some_and(|&last| n <= last) {
                prop_assert_eq!(r.reason, Reason::ReplayDetected);
            }
        }
        prop_assert_eq!(backend.last_seen_nonce(device.device_id), accepted.last().copied());
    }

    #[test]
    fn raising_accept_num_never_turns_reject_into_accept(
        used in 1usize..=10,
        impostor: bool,
        seed: u64,
    ) {
        let bed = bed();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let auth = AuthConfig { used_num: used, accept_num: 1, ..bed.spec.auth };
        let victim = &bed.fleet[0];
        let signer = if impostor { &bed.fleet[1] } else { victim };
        let mut client = Client::new(signer.clone(), auth, bed.spec.mapping.clone()).unwrap();
        let request = random_request(1, &mut rng);
        let token = client.generate_token(&request, &mut rng).unwrap();
        let decisions: Vec<bool> = (1..=10)
            .map(|a| backend_with_accept(a).authenticate(victim.device_id, &request, &token).accepted())
            .collect();
        for w in decisions.windows(2) {
            prop_assert!(w[0] || !w[1], "{:?}", decisions);
        }
    }
}
