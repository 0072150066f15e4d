//! Byte-exact checks against vectors produced by the Python references in
//! tests/vectors.

use fpauth::backend::{AuthResult, Decision, Reason};
use fpauth::client::{Token, TokenEntry};
use fpauth::hwsim::{FingerprintValue, Model, TrainingPair};
use fpauth::mapping::{
    ap_hash, map_message, map_message_variant, HardwareTask, MappingConfig, MappingVariant, Request,
};
use fpauth::service::{self, ErrorCode, FrameKind};

const VECTORS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/vectors");

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

fn rows(name: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(format!("{VECTORS}/{name}")).unwrap();
    r.records().map(|r| r.unwrap()).collect()
}

fn request(op: &str, nonce: &str, payloads: &str) -> Request {
    Request::new(
        op,
        nonce.parse().unwrap(),
        payloads.split('|').map(unhex).collect(),
    )
}

fn tasks(encoded: &str) -> Vec<HardwareTask> {
    encoded.split('|').map(|t| t.parse().unwrap()).collect()
}

#[test]
fn ap_hash_vectors() {
    let rows = rows("ap_hash.csv");
    assert!(rows.len() >= 10);
    for r in rows {
        assert_eq!(
            format!("{:08x}", ap_hash(&unhex(&r[0]))),
            &r[1],
            "input {}",
            &r[0]
        );
    }
}

#[test]
fn map_message_vectors() {
    let config = MappingConfig::default();
    for r in rows("mapping.csv") {
        let got = map_message(&request(&r[0], &r[1], &r[2]), &config).unwrap();
        assert_eq!(got, tasks(&r[3]), "{} {}", &r[0], &r[1]);
    }
}

#[test]
fn variant_vectors() {
    let config = MappingConfig::default();
    for r in rows("variants.csv") {
        let variant = MappingVariant::ALL
            .into_iter()
            .find(|v| format!("{v:?}") == r[0])
            .unwrap();
        let got = map_message_variant(&request(&r[1], &r[2], &r[3]), &config, variant).unwrap();
        assert_eq!(got, tasks(&r[4]), "{} {} {}", &r[0], &r[1], &r[2]);
    }
}

fn golden_tokens() -> Vec<Token> {
    use FingerprintValue::*;
    let t = |nonce, entries: Vec<(u8, FingerprintValue)>| Token {
        nonce,
        entries: entries
            .into_iter()
            .map(|(task_index, fingerprint)| TokenEntry {
                task_index,
                fingerprint,
            })
            .collect(),
    };
    vec![
        t(
            0x01020304,
            vec![
                (0, Analog(1.5)),
                (1, Bits32(0xDEADBEEF)),
                (2, Analog(-0.001)),
            ],
        ),
        t(
            7,
            (0..10u8)
                .map(|i| {
                    (
                        i,
                        if i % 2 == 0 {
                            Analog(i as f64 * 3.25)
                        } else {
                            Bits32(i as u32 * 0x01010101)
                        },
                    )
                })
                .collect(),
        ),
        t(0xFFFFFFFE, vec![(0, Analog(12345.678))]),
        t(0, vec![]),
    ]
}

#[test]
fn token_vectors() {
    let bytes = std::fs::read(format!("{VECTORS}/token.bin")).unwrap();
    let expected: Vec<u8> = golden_tokens().iter().flat_map(|t| t.to_bytes()).collect();
    assert_eq!(bytes, expected);

    let mut rest = &bytes[..];
    for want in golden_tokens() {
        let (got, used) = Token::decode_prefix(rest).unwrap();
        assert_eq!(got, want);
        rest = &rest[used..];
    }
    assert!(rest.is_empty());
}

#[test]
fn frame_vectors() {
    let pairs = vec![
        TrainingPair {
            task: HardwareTask::new(fpauth::Feature::DacAdc, vec![17, 1, 0, 3]),
            fingerprint: FingerprintValue::Analog(812.25),
        },
        TrainingPair {
            task: HardwareTask::new(fpauth::Feature::Sram, vec![513]),
            fingerprint: FingerprintValue::Bits32(0x0F0F0F0F),
        },
    ];
    let request = Request::new("UNLOCK", 5, vec![vec![1, 2], vec![0xff]]);
    let token = &golden_tokens()[0];
    let accept = AuthResult {
        decision: Decision::Accept,
        matched_count: 4,
        reason: Reason::Ok,
    };
    let replay = AuthResult {
        decision: Decision::Reject,
        matched_count: 0,
        reason: Reason::ReplayDetected,
    };
    let frames = [
        (
            FrameKind::EnrollBegin,
            service::encode_enroll_begin(1, Model::ModelA),
        ),
        (
            FrameKind::EnrollData,
            service::encode_enroll_data(1, &pairs),
        ),
        (FrameKind::EnrollCommit, 1u16.to_be_bytes().to_vec()),
        (
            FrameKind::AuthRequest,
            service::encode_auth_request(2, &request, token),
        ),
        (FrameKind::Reply, vec![0]),
        (FrameKind::Reply, service::encode_auth_result(&accept)),
        (FrameKind::Reply, service::encode_auth_result(&replay)),
        (
            FrameKind::Error,
            service::encode_error(ErrorCode::SealedDevice, "device is sealed"),
        ),
    ];

    let bytes = std::fs::read(format!("{VECTORS}/frames.bin")).unwrap();
    let expected: Vec<u8> = frames
        .iter()
        .flat_map(|(k, b)| service::encode_frame(*k, b).unwrap())
        .collect();
    assert_eq!(bytes, expected);

    let mut rest = &bytes[..];
    for (kind, body) in &frames {
        let (frame, used) = service::decode_frame_prefix(rest).unwrap();
        assert_eq!((frame.kind, &frame.body), (*kind, body));
        rest = &rest[used..];
    }
    assert!(rest.is_empty());

    let wire = service::decode_auth_request(&frames[3].1).unwrap();
    assert_eq!(wire.device_id, 2);
    assert_eq!(wire.request, request);
    assert_eq!(Token::from_bytes(&wire.token).unwrap(), *token);
    assert_eq!(service::decode_auth_result(&frames[5].1).unwrap(), accept);
    assert_eq!(service::decode_auth_result(&frames[6].1).unwrap(), replay);
}
