use std::io::Cursor;

use adsaga_net::wire::{decode, decode_prefix, encode, read_message, Kind, WireError, WireMessage, MAX_FRAME};
use proptest::prelude::*;

fn any_message() -> impl Strategy<Value = WireMessage> {
    let kind = prop_oneof![Just(Kind::Hello), Just(Kind::Update), Just(Kind::Param), Just(Kind::Stop)];
    let bits = prop::collection::vec(any::<u64>().prop_map(f64::from_bits), 0..40);
    (kind, any::<u32>(), bits).prop_map(|(kind, sender, payload)| WireMessage {
        kind,
        sender,
        payload: if kind.carries_payload() { payload } else { Vec::new() },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn roundtrip_is_bit_exact(msg in any_message()) {
        let bytes = encode(&msg);
        prop_assert_eq!(bytes.len(), 9 + 8 * msg.payload.len());
        let back = decode(&bytes).unwrap();
        prop_assert!(back.bit_eq(&msg));
        let streamed = read_message(&mut Cursor::new(&bytes)).unwrap().unwrap();
        prop_assert!(streamed.bit_eq(&msg));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn every_proper_prefix_is_rejected(msg in any_message(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&msg);
        let k = cut.index(bytes.len());
        let truncated = matches!(decode(&bytes[..k]), Err(WireError::Truncated { .. }));
        prop_assert!(truncated);
        if k > 0 {
            prop_assert!(read_message(&mut Cursor::new(&bytes[..k])).is_err());
        }
    }

    #[test]
    fn concatenated_frames_split_cleanly(msgs in prop::collection::vec(any_message(), 1..6)) {
        let mut all = Vec::new();
        msgs.iter().for_each(|m| all.extend(encode(m)));
        let mut at = 0;
        for m in &msgs {
            let (got, used) = decode_prefix(&all[at..]).unwrap();
            prop_assert!(got.bit_eq(m));
            at += used;
        }
        prop_assert_eq!(at, all.len());
    }
}

fn frame(len: u32, kind: u8, tail: &[u8]) -> Vec<u8> {
    let mut v = len.to_le_bytes().to_vec();
    v.push(kind);
    v.extend_from_slice(&7u32.to_le_bytes());
    v.extend_from_slice(tail);
    v
}

#[test]
fn malformed_frames_are_rejected() {
    assert!(matches!(decode(&frame(5, 9, &[])), Err(WireError::UnknownKind(9))));
    assert!(matches!(decode(&frame(4, 0, &[])), Err(WireError::ShortLength(4))));
    assert!(matches!(decode(&frame(0, 0, &[])), Err(WireError::ShortLength(0))));
    assert!(matches!(decode(&frame(8, 1, &[0, 0, 0])), Err(WireError::RaggedPayload(3))));
    assert!(matches!(
        decode(&frame(13, 3, &1.0f64.to_le_bytes())),
        Err(WireError::UnexpectedPayload { kind: Kind::Stop, values: 1 })
    ));
    assert!(matches!(
        decode(&frame(13, 0, &1.0f64.to_le_bytes())),
        Err(WireError::UnexpectedPayload { kind: Kind::Hello, values: 1 })
    ));
    assert!(matches!(decode(&frame((MAX_FRAME + 1) as u32, 1, &[])), Err(WireError::Oversized(_))));
    assert!(matches!(decode(&frame(u32::MAX, 1, &[])), Err(WireError::Oversized(_))));
    // Claims more than it carries.
    assert!(matches!(decode(&frame(21, 1, &[0; 8])), Err(WireError::Truncated { needed: 25, available: 17 })));
    let mut extra = encode(&WireMessage::stop());
    extra.push(0);
    assert!(matches!(decode(&extra), Err(WireError::TrailingBytes(1))));
    assert!(matches!(decode(&[]), Err(WireError::Truncated { needed: 4, available: 0 })));
}

#[test]
fn oversized_length_is_rejected_before_allocation() {
    let bytes = frame(u32::MAX, 2, &[]);
    assert!(matches!(read_message(&mut Cursor::new(bytes)), Err(WireError::Oversized(_))));
}

#[test]
fn empty_stream_is_a_clean_end() {
    assert!(read_message(&mut Cursor::new(Vec::<u8>::new())).unwrap().is_none());
}
