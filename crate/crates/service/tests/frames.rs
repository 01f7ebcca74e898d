use proptest::prelude::*;
use resotrack_service::protocol::{
    frame_decode, frame_encode, Decoded, Mode, Samples, ScanPoint, StreamDecoder, TrackPoint, BLOCK_SIZE,
};

fn track_point() -> impl Strategy<Value = TrackPoint> {
    (any::<u64>(), -10.0..10.0f64, -10.0..10.0f64, -1e3..1e3f64, any::<bool>(), any::<bool>()).prop_map(
        |(i, v, f, e, locked, sat)| TrackPoint {
            i,
            v,
            f,
            e,
            locked,
            sat,
        },
    )
}

fn samples() -> impl Strategy<Value = (Mode, Samples)> {
    prop_oneof![
        prop::collection::vec(track_point(), 0..=BLOCK_SIZE).prop_map(|v| (Mode::Track, Samples::Track(v))),
        prop::collection::vec((0.0..3.3f64, 0.0..3.3f64), 1..=BLOCK_SIZE)
            .prop_map(|v| (Mode::Scan, Samples::Scan(v.into_iter().map(|(a, b)| ScanPoint { v_dac: a, v_adc: b }).collect()))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn frames_round_trip_exactly((mode, s) in samples(), seq in any::<u64>(), marker in any::<bool>()) {
        let bytes = frame_encode(s.clone(), mode, seq, marker).unwrap();
        prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        let f = frame_decode(&bytes).unwrap();
        prop_assert_eq!(f.seq, seq);
        prop_assert_eq!(f.mode, mode);
        prop_assert_eq!(f.has_marker(), marker);
        prop_assert_eq!(f.samples, s);
    }

    #[test]
    fn decoder_handles_arbitrary_chunking(cut in prop::collection::vec(1usize..400, 1..40)) {
        let mut stream = Vec::new();
        for seq in 0..6u64 {
            let pts = (0..150).map(|k| TrackPoint { i: seq * 150 + k, v: 1.6, f: 1.6, e: 0.0, locked: true, sat: false }).collect();
            stream.extend(frame_encode(Samples::Track(pts), Mode::Track, seq, seq % 2 == 0).unwrap());
        }
        let mut dec = StreamDecoder::new();
        let mut got = Vec::new();
        let mut rest = &stream[..];
        for c in cut.iter().cycle() {
            if rest.is_empty() { break; }
            let n = (*c).min(rest.len());
            got.extend(dec.feed(&rest[..n]));
            rest = &rest[n..];
        }
        let seqs: Vec<u64> = got.iter().filter_map(|d| match d { Decoded::Frame(f) => Some(f.seq), _ => None }).collect();
        prop_assert_eq!(seqs, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn corruption_resyncs_at_next_marker(bad in 1usize..5) {
        let mut dec = StreamDecoder::new();
        let mut out = Vec::new();
        for seq in 0..6u64 {
            let pts = (0..150).map(|k| TrackPoint { i: seq * 150 + k, v: 1.6, f: 1.6, e: 0.0, locked: true, sat: false }).collect();
            let mut line = frame_encode(Samples::Track(pts), Mode::Track, seq, seq % 2 == 0).unwrap();
            if seq as usize == bad {
                line[5] = b'#';
            }
            out.extend(dec.feed(&line));
        }
        let resynced = out.iter().any(|d| matches!(d, Decoded::Resync { .. }));
        prop_assert!(resynced);
        let seqs: Vec<u64> = out.iter().filter_map(|d| match d { Decoded::Frame(f) => Some(f.seq), _ => None }).collect();
        let resume = (bad as u64 + 1).next_multiple_of(2);
        let expected: Vec<u64> = (0..bad as u64).chain(resume..6).collect();
        prop_assert_eq!(seqs, expected);
    }
}
