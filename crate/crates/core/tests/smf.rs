use composer_forge_core::smf::{parse_smf, parse_vlq, read_notes, NoteEvent, SmfError};
use composer_forge_core::testkit::{fixtures, notes_to_smf, vlq, TrackWriter, WRITER_TICKS_PER_SECOND};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fixtures_parse_to_hand_computed_notes() {
    let all = fixtures::all();
    assert!(all.iter().filter(|f| f.expected.is_some()).count() >= 10);
    for f in &all {
        let got = read_notes(&f.bytes);
        match &f.expected {
            Some(want) => assert_eq!(&got.unwrap_or_else(|e| panic!("{}: {e}", f.name)).notes, want, "{}", f.name),
            None => assert!(got.is_err(), "{} should be rejected", f.name),
        }
    }
}

#[test]
fn diagnostics_count_irregular_events() {
    let f = fixtures::all().into_iter().find(|f| f.name == "dangling_off_and_zero_length_dropped").unwrap();
    let d = read_notes(&f.bytes).unwrap().diagnostics;
    assert_eq!((d.dangling_note_offs, d.zero_length_dropped, d.closed_at_end), (1, 1, 0));
    let f = fixtures::all().into_iter().find(|f| f.name == "unreleased_note_closed_at_end").unwrap();
    assert_eq!(read_notes(&f.bytes).unwrap().diagnostics.closed_at_end, 1);
}

#[test]
fn vlq_edge_values() {
    for (bytes, value) in [
        (&[0x00][..], 0u32),
        (&[0x7F], 127),
        (&[0x81, 0x00], 128),
        (&[0xFF, 0x7F], 16_383),
        (&[0x81, 0x80, 0x00], 16_384),
        (&[0xFF, 0xFF, 0xFF, 0x7F], 0x0FFF_FFFF),
    ] {
        assert_eq!(parse_vlq(bytes).unwrap(), (value, bytes.len()));
        assert_eq!(vlq(value), bytes);
    }
    assert!(parse_vlq(&[0x81, 0x80, 0x80, 0x80, 0x00]).is_err());
    assert!(parse_vlq(&[0x81]).is_err());
    assert!(parse_vlq(&[]).is_err());
}

#[test]
fn rejections_are_typed() {
    let format2 = fixtures::all().into_iter().find(|f| f.name == "format_2").unwrap();
    assert!(matches!(parse_smf(&format2.bytes), Err(SmfError::Unsupported(_))));
    let truncated = fixtures::all().into_iter().find(|f| f.name == "truncated_header").unwrap();
    assert!(matches!(parse_smf(&truncated.bytes), Err(SmfError::Malformed { .. })));
}

/// 10⁵ mutated files: byte flips, insertions, deletions and truncations of the
/// fixtures must come back as `Ok` or a typed error, never a panic.
#[test]
fn fuzzed_inputs_never_panic() {
    let seeds: Vec<Vec<u8>> = fixtures::all().into_iter().map(|f| f.bytes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let (mut ok, mut err) = (0usize, 0usize);
    for _ in 0..100_000 {
        let mut b = seeds[rng.random_range(0..seeds.len())].clone();
        for _ in 0..rng.random_range(1..=4) {
            match rng.random_range(0..4) {
                0 if !b.is_empty() => {
                    let i = rng.random_range(0..b.len());
                    b[i] = rng.random();
                }
                1 => {
                    let i = rng.random_range(0..=b.len());
                    b.insert(i, rng.random());
                }
                2 if !b.is_empty() => {
                    b.remove(rng.random_range(0..b.len()));
                }
                _ => {
                    let keep = rng.random_range(0..=b.len());
                    b.truncate(keep);
                }
            }
        }
        match read_notes(&b) {
            Ok(_) => ok += 1,
            Err(SmfError::Malformed { .. } | SmfError::Unsupported(_)) => err += 1,
        }
    }
    assert_eq!(ok + err, 100_000);
    assert!(err > 0 && ok > 0);
}

fn grid_notes() -> impl Strategy<Value = Vec<NoteEvent>> {
    // per pitch, non-overlapping notes on a 1/960 s grid
    prop::collection::vec((0u8..128, 0u32..2000, 1u32..500, 1u8..128), 0..40).prop_map(|raw| {
        let mut end_by_pitch = [0u32; 128];
        let mut notes = Vec::new();
        for (pitch, gap, len, velocity) in raw {
            let on = end_by_pitch[pitch as usize] + gap;
            let off = on + len;
            end_by_pitch[pitch as usize] = off;
            notes.push(NoteEvent {
                onset_seconds: f64::from(on) / WRITER_TICKS_PER_SECOND,
                offset_seconds: f64::from(off) / WRITER_TICKS_PER_SECOND,
                pitch,
                velocity,
                channel: 0,
            });
        }
        composer_forge_core::smf::sort_notes(&mut notes);
        notes
    })
}

proptest! {
    #[test]
    fn write_then_read_round_trips(notes in grid_notes()) {
        let back = read_notes(&notes_to_smf(&notes)).unwrap();
        prop_assert_eq!(back.notes, notes);
        prop_assert_eq!(back.diagnostics.zero_length_dropped, 0);
    }

    #[test]
    fn vlq_round_trips(v in 0u32..0x1000_0000) {
        let enc = vlq(v);
        prop_assert!(enc.len() <= 4);
        prop_assert_eq!(parse_vlq(&enc).unwrap(), (v, enc.len()));
    }

    #[test]
    fn running_status_is_transparent(keys in prop::collection::vec(0u8..128, 1..20)) {
        let build = |running: bool| {
            let mut w = TrackWriter::new();
            w.use_running_status = running;
            for (i, &k) in keys.iter().enumerate() {
                w.note_on(i as u64 * 10, 3, k, 90);
            }
            for (i, &k) in keys.iter().enumerate() {
                w.channel(1000 + i as u64, 0x93, &[k, 0]);
            }
            composer_forge_core::testkit::smf_bytes(0, 96, &[w.end(2000)])
        };
        let (a, b) = (build(true), build(false));
        prop_assert!(a.len() < b.len());
        prop_assert_eq!(read_notes(&a).unwrap(), read_notes(&b).unwrap());
    }
}
