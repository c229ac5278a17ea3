use composer_forge_core::pianoroll::{
    cache_path, cut, encode, from_cache_bytes, read_cache, segment_positions, to_cache_bytes, write_cache, CacheDir,
    PianoRoll, RollSource, Variant, PITCHES, SEGMENT_BINS,
};
use composer_forge_core::smf::NoteEvent;
use proptest::prelude::*;

/// Notes on a 1 ms grid; per pitch, consecutive notes leave at least two
/// empty 50 ms bins between them so no two notes touch a common bin.
fn collision_free() -> impl Strategy<Value = Vec<(u32, u32, u8, u8)>> {
    prop::collection::vec((0u8..128, 100u32..3000, 1u32..2000, 1u8..128), 1..60).prop_map(|raw| {
        let mut next_free = [0u32; 128];
        raw.into_iter()
            .map(|(pitch, gap, len, vel)| {
                let on = next_free[pitch as usize] + gap;
                let off = on + len;
                next_free[pitch as usize] = (off / 50 + 3) * 50;
                (on, off, pitch, vel)
            })
            .collect()
    })
}

fn to_notes(ms: &[(u32, u32, u8, u8)]) -> Vec<NoteEvent> {
    ms.iter()
        .map(|&(on, off, pitch, velocity)| NoteEvent {
            onset_seconds: f64::from(on) / 1000.0,
            offset_seconds: f64::from(off) / 1000.0,
            pitch,
            velocity,
            channel: 0,
        })
        .collect()
}

/// Integer oracle: bin `t` covers `[50t, 50t + 50)` ms.
fn oracle_bins(on: u32, off: u32) -> (usize, usize) {
    let first = (on / 50) as usize;
    let last = (off.div_ceil(50) as usize).saturating_sub(1).max(first);
    (first, last)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encoder_invariants(ms in collision_free()) {
        let roll = encode(&to_notes(&ms));
        let onsets = roll.onset_plane().iter().filter(|&&v| v == 1).count();
        prop_assert_eq!(onsets, ms.len());
        let mut covered = 0;
        for &(on, off, pitch, vel) in &ms {
            let (first, last) = oracle_bins(on, off);
            prop_assert_eq!(roll.onset(first, pitch as usize), 1);
            for t in first..=last {
                prop_assert_eq!(roll.frame(t, pitch as usize), vel);
            }
            if first > 0 {
                prop_assert_eq!(roll.frame(first - 1, pitch as usize), 0);
            }
            if last + 1 < roll.n_bins() {
                prop_assert_eq!(roll.frame(last + 1, pitch as usize), 0);
            }
            covered += last - first + 1;
        }
        prop_assert_eq!(roll.frame_plane().iter().filter(|&&v| v > 0).count(), covered);
        prop_assert!(roll.is_consistent());
        let b = roll.binarized();
        prop_assert_eq!(b.binarized(), b.clone());
        prop_assert!(b.frame_plane().iter().all(|&v| v <= 1));
    }
}

proptest! {
    #[test]
    fn positions_cover_the_piece(total in 0usize..20_000, n in 1usize..120) {
        let pos = segment_positions(total, n);
        prop_assert_eq!(pos.len(), n);
        prop_assert_eq!(pos[0], 0);
        prop_assert!(pos.windows(2).all(|w| w[0] <= w[1]));
        let last_start = total.saturating_sub(SEGMENT_BINS);
        prop_assert!(pos.iter().all(|&p| p <= last_start));
        if n > 1 {
            prop_assert_eq!(*pos.last().unwrap(), last_start);
        }
    }

    #[test]
    fn cache_round_trips_bit_exactly(ms in collision_free()) {
        let roll = encode(&to_notes(&ms));
        let bytes = to_cache_bytes(&roll);
        prop_assert_eq!(&bytes[..4], b"CFPR");
        prop_assert_eq!(bytes.len(), 16 + 2 * roll.n_bins() * PITCHES);
        let back = from_cache_bytes(&bytes, "mem").unwrap();
        prop_assert_eq!(to_cache_bytes(&back), bytes);
        prop_assert_eq!(back, roll);
    }

    #[test]
    fn cut_matches_roll(ms in collision_free(), start in 0usize..200) {
        let roll = encode(&to_notes(&ms));
        for variant in Variant::ALL {
            let seg = cut(&roll, "p", start, variant);
            prop_assert_eq!(seg.channels, variant.channels());
            prop_assert_eq!(seg.time_bins(), SEGMENT_BINS);
            let plane = SEGMENT_BINS * PITCHES;
            let frame = &seg.data[(seg.channels - 1) * plane..];
            for t in 0..SEGMENT_BINS {
                for p in (0..PITCHES).step_by(7) {
                    let src = if start + t < roll.n_bins() { roll.frame(start + t, p) } else { 0 };
                    let want = match variant {
                        Variant::FrameBinarized => f32::from(u8::from(src > 0)),
                        _ => f32::from(src) / 127.0,
                    };
                    prop_assert_eq!(frame[t * PITCHES + p], want);
                    if seg.channels == 2 {
                        let on = if start + t < roll.n_bins() { roll.onset(start + t, p) } else { 0 };
                        prop_assert_eq!(seg.data[t * PITCHES + p], f32::from(on));
                    }
                }
            }
        }
    }
}

#[test]
fn worked_bins() {
    let note = |on: f64, off: f64| NoteEvent {
        onset_seconds: on,
        offset_seconds: off,
        pitch: 60,
        velocity: 90,
        channel: 0,
    };
    let roll = encode(&[note(0.15, 0.30)]);
    assert_eq!(roll.onset(3, 60), 1);
    assert_eq!(roll.n_bins(), 6);
    assert_eq!((2..6).map(|t| roll.frame(t, 60)).collect::<Vec<_>>(), vec![0, 90, 90, 90]);
    // onset inside a bin still sounds in that bin
    let roll = encode(&[note(0.17, 0.21)]);
    assert_eq!((3..5).map(|t| roll.frame(t, 60)).collect::<Vec<_>>(), vec![90, 90]);
}

#[test]
fn cache_files_and_sources() {
    let dir = tempfile::tempdir().unwrap();
    let roll = encode(&to_notes(&[(0, 1000, 60, 80), (500, 700, 64, 30)]));
    let path = cache_path(dir.path(), "2004/a.midi");
    assert_eq!(path.parent().unwrap(), dir.path());
    write_cache(&roll, &path).unwrap();
    assert_eq!(read_cache(&path).unwrap(), roll);
    let src = CacheDir::new(dir.path());
    assert_eq!(*src.roll("2004/a.midi").unwrap(), roll);
    assert!(src.roll("missing.midi").is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    assert!(from_cache_bytes(&bytes, "x").is_err());
    let mut bytes = to_cache_bytes(&roll);
    bytes[16] = 2;
    assert!(from_cache_bytes(&bytes, "x").is_err());
    assert!(from_cache_bytes(&[0; 8], "x").is_err());
    assert_eq!(PianoRoll::default().n_bins(), 0);
}
