use std::net::{Ipv4Addr, SocketAddrV4};

use appnet::trap::wire::*;
use proptest::prelude::*;

fn op() -> impl Strategy<Value = TrapOp> {
    prop::sample::select(TrapOp::ALL.to_vec())
}

fn addr() -> impl Strategy<Value = SocketAddrV4> {
    (any::<[u8; 4]>(), any::<u16>()).prop_map(|(ip, p)| SocketAddrV4::new(Ipv4Addr::from(ip), p))
}

fn status() -> impl Strategy<Value = TrapStatus> {
    (0u8..=12).prop_map(|c| TrapStatus::from_code(c).unwrap())
}

fn nonzero(a: SocketAddrV4) -> bool {
    !a.ip().is_unspecified() || a.port() != 0
}

proptest! {
    #[test]
    fn request_round_trip(op in op(), handle in any::<u32>(), a in addr(),
                          payload in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut r = TrapRequest::new(op, handle);
        if op.carries_addr() {
            r = r.with_addr(a);
        }
        if op.carries_payload() {
            r = r.with_payload(payload);
        }
        let bytes = r.encode();
        prop_assert_eq!(bytes.len(), REQUEST_HEADER + r.payload.len());
        prop_assert_eq!(payload_len(&bytes[..REQUEST_HEADER]).unwrap(), r.payload.len());
        prop_assert_eq!(TrapRequest::decode(&bytes).unwrap(), r);
    }

    #[test]
    fn reply_round_trip(op in op(), st in status(), handle in any::<u32>(), a in addr(),
                        payload in prop::collection::vec(any::<u8>(), 0..256), transfer in any::<bool>()) {
        let mut r = TrapReply::err(op, handle, st);
        r.transfer = transfer && st == TrapStatus::Ok && matches!(op, TrapOp::Connect | TrapOp::Accept);
        if nonzero(a) {
            r = r.with_addr(a);
        }
        r.payload = payload;
        let bytes = r.encode();
        prop_assert_eq!(bytes.len(), REPLY_HEADER + r.payload.len());
        prop_assert_eq!(payload_len(&bytes[..REPLY_HEADER]).unwrap(), r.payload.len());
        prop_assert_eq!(TrapReply::decode(&bytes).unwrap(), r);
    }

    #[test]
    fn decoding_noise_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = TrapRequest::decode(&bytes);
        let _ = TrapReply::decode(&bytes);
    }

    #[test]
    fn truncation_is_an_error(op in op(), handle in any::<u32>(), cut in 1usize..REQUEST_HEADER) {
        let bytes = TrapRequest::new(op, handle).encode();
        prop_assert!(TrapRequest::decode(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn request_header_layout() {
    let r = TrapRequest::new(TrapOp::Connect, 0x0102_0304)
        .with_addr(SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 10), 8080));
    assert_eq!(
        r.encode(),
        vec![0x01, TrapOp::Connect.code(), 1, 2, 3, 4, 10, 0, 0, 10, 0x1f, 0x90, 0, 0, 0, 0]
    );
}

#[test]
fn codes_are_dense() {
    let codes: Vec<u8> = TrapOp::ALL.iter().map(|o| o.code()).collect();
    assert_eq!(codes, (1..=10).collect::<Vec<_>>());
    for c in 0..=12 {
        assert_eq!(TrapStatus::from_code(c).unwrap().code(), c);
    }
    assert!(TrapStatus::from_code(13).is_err());
    assert!(TrapOp::from_code(0).is_err());
    assert!(TrapOp::from_code(11).is_err());
}

#[test]
fn bad_version_and_stray_fields_are_rejected() {
    let mut b = TrapRequest::new(TrapOp::Close, 1).encode();
    b[0] = 2;
    assert!(TrapRequest::decode(&b).is_err());
    // Close carries neither address nor payload.
    let mut b = TrapRequest::new(TrapOp::Close, 1).encode();
    b[6] = 10;
    assert!(TrapRequest::decode(&b).is_err());
    // Transfer flag on a non-connection reply.
    let mut r = TrapReply::ok(TrapOp::Bind, 1);
    r.transfer = true;
    assert!(TrapReply::decode(&r.encode()).is_err());
}
