//! Hand-assembled Standard MIDI Files with hand-computed note lists.
//!
//! Bytes are written out literally rather than through [`super::TrackWriter`]
//! so that they check the parser independently of the crate's own writer.

use crate::smf::NoteEvent;

pub struct Fixture {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    /// `None` when the file must be rejected.
    pub expected: Option<Vec<NoteEvent>>,
}

fn header(format: u16, tracks: u16, division: u16) -> Vec<u8> {
    let mut out = b"MThd\x00\x00\x00\x06".to_vec();
    for v in [format, tracks, division] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

fn track(body: &[u8]) -> Vec<u8> {
    let mut out = b"MTrk".to_vec();
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

fn file(format: u16, division: u16, tracks: &[&[u8]]) -> Vec<u8> {
    let mut out = header(format, tracks.len() as u16, division);
    for t in tracks {
        out.extend(track(t));
    }
    out
}

fn n(on: f64, off: f64, pitch: u8, velocity: u8, channel: u8) -> NoteEvent {
    NoteEvent {
        onset_seconds: on,
        offset_seconds: off,
        pitch,
        velocity,
        channel,
    }
}

const EOT: [u8; 4] = [0x00, 0xFF, 0x2F, 0x00];

fn ok(name: &'static str, bytes: Vec<u8>, expected: Vec<NoteEvent>) -> Fixture {
    Fixture {
        name,
        bytes,
        expected: Some(expected),
    }
}

fn bad(name: &'static str, bytes: Vec<u8>) -> Fixture {
    Fixture {
        name,
        bytes,
        expected: None,
    }
}

/// At 480 ticks per quarter and the default 120 bpm, one tick is 1/960 s.
pub fn all() -> Vec<Fixture> {
    vec![
        ok(
            "single_note",
            file(0, 480, &[&[0x00, 0x90, 0x3C, 0x64, 0x83, 0x60, 0x80, 0x3C, 0x40, 0x00, 0xFF, 0x2F, 0x00]]),
            vec![n(0.0, 0.5, 60, 100, 0)],
        ),
        ok(
            "velocity_zero_note_on_releases",
            file(0, 480, &[&[0x00, 0x90, 0x40, 0x5A, 0x81, 0x70, 0x90, 0x40, 0x00, 0x00, 0xFF, 0x2F, 0x00]]),
            vec![n(0.0, 0.25, 64, 90, 0)],
        ),
        ok(
            "running_status",
            file(
                0,
                480,
                &[&[
                    0x00, 0x90, 0x3C, 0x40, // note-on 60
                    0x00, 0x3E, 0x50, // running: note-on 62
                    0x83, 0x60, 0x3C, 0x00, // running: vel-0 release 60 at 480
                    0x00, 0x3E, 0x00, // running: release 62
                    0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(0.0, 0.5, 60, 64, 0), n(0.0, 0.5, 62, 80, 0)],
        ),
        ok(
            "tempo_change_mid_track",
            file(
                0,
                480,
                &[&[
                    0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // 500000 µs/q
                    0x00, 0x90, 0x3C, 0x64, 0x83, 0x60, 0x80, 0x3C, 0x40, // 0..480
                    0x00, 0xFF, 0x51, 0x03, 0x03, 0xD0, 0x90, // 250000 µs/q at 480
                    0x00, 0x90, 0x3E, 0x64, 0x83, 0x60, 0x80, 0x3E, 0x40, // 480..960
                    0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(0.0, 0.5, 60, 100, 0), n(0.5, 0.75, 62, 100, 0)],
        ),
        ok(
            "two_byte_delta",
            file(
                0,
                128,
                &[&[
                    0x00, 0xFF, 0x51, 0x03, 0x0F, 0x42, 0x40, // 1 s per quarter
                    0x00, 0x90, 0x30, 0x50, 0x81, 0x00, 0x80, 0x30, 0x00, // 128 ticks
                    0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(0.0, 1.0, 48, 80, 0)],
        ),
        ok(
            "largest_four_byte_delta",
            file(
                0,
                480,
                &[&[0x00, 0x90, 0x3C, 0x64, 0xFF, 0xFF, 0xFF, 0x7F, 0x80, 0x3C, 0x00, 0x00, 0xFF, 0x2F, 0x00]],
            ),
            vec![n(0.0, 268_435_455.0 / 960.0, 60, 100, 0)],
        ),
        ok(
            "format1_conductor_track",
            file(
                1,
                480,
                &[
                    &[0x00, 0xFF, 0x51, 0x03, 0x09, 0x27, 0xC0, 0x00, 0xFF, 0x2F, 0x00], // 600000 µs/q
                    &[0x00, 0x90, 0x30, 0x46, 0x81, 0x70, 0x80, 0x30, 0x00, 0x00, 0xFF, 0x2F, 0x00],
                ],
            ),
            vec![n(0.0, 0.3, 48, 70, 0)],
        ),
        ok(
            "retrigger_closes_previous",
            file(
                0,
                480,
                &[&[
                    0x00, 0x90, 0x3C, 0x32, 0x81, 0x70, 0x90, 0x3C, 0x3C, 0x81, 0x70, 0x80, 0x3C, 0x00, 0x00, 0xFF, 0x2F,
                    0x00,
                ]],
            ),
            vec![n(0.0, 0.25, 60, 50, 0), n(0.25, 0.5, 60, 60, 0)],
        ),
        ok(
            "unreleased_note_closed_at_end",
            file(
                0,
                480,
                &[&[
                    0x00, 0x90, 0x3C, 0x64, 0x00, 0x90, 0x3E, 0x64, 0x87, 0x40, 0x80, 0x3E, 0x00, 0x00, 0xFF, 0x2F,
                    0x00,
                ]],
            ),
            vec![n(0.0, 1.0, 60, 100, 0), n(0.0, 1.0, 62, 100, 0)],
        ),
        ok(
            "sysex_and_text_meta_ignored",
            file(
                0,
                480,
                &[&[
                    0x00, 0x90, 0x3C, 0x40, // note-on
                    0x00, 0xF0, 0x03, 0x7E, 0x7F, 0xF7, // sysex
                    0x00, 0xFF, 0x01, 0x02, b'h', b'i', // text
                    0x00, 0xB0, 0x40, 0x7F, // sustain pedal down, not applied
                    0x83, 0x60, 0x80, 0x3C, 0x40, 0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(0.0, 0.5, 60, 64, 0)],
        ),
        ok(
            "channels_kept_apart",
            file(
                0,
                480,
                &[&[
                    0x00, 0x90, 0x3C, 0x50, 0x81, 0x70, 0x99, 0x3C, 0x60, 0x81, 0x70, 0x80, 0x3C, 0x00, 0x81, 0x70,
                    0x89, 0x3C, 0x00, 0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(0.0, 0.5, 60, 80, 0), n(0.25, 0.75, 60, 96, 9)],
        ),
        ok(
            "dangling_off_and_zero_length_dropped",
            file(
                0,
                480,
                &[&[
                    0x00, 0x80, 0x3D, 0x00, // off with nothing sounding
                    0x64, 0x90, 0x3E, 0x40, 0x00, 0x80, 0x3E, 0x00, // zero length at 100
                    0x00, 0x90, 0x3F, 0x40, 0x83, 0x60, 0x80, 0x3F, 0x00, // 100..580
                    0x00, 0xFF, 0x2F, 0x00,
                ]],
            ),
            vec![n(100.0 / 960.0, 580.0 / 960.0, 63, 64, 0)],
        ),
        ok(
            "unknown_chunk_skipped",
            {
                let mut b = header(0, 1, 480);
                b.extend_from_slice(b"XFIH\x00\x00\x00\x03abc");
                b.extend(track(&[0x00, 0x90, 0x3C, 0x64, 0x83, 0x60, 0x80, 0x3C, 0x40, 0x00, 0xFF, 0x2F, 0x00]));
                b
            },
            vec![n(0.0, 0.5, 60, 100, 0)],
        ),
        ok("empty_track", file(0, 480, &[&EOT]), vec![]),
        bad(
            "running_status_cleared_by_meta",
            file(
                0,
                480,
                &[&[0x00, 0x90, 0x3C, 0x40, 0x00, 0xFF, 0x01, 0x00, 0x83, 0x60, 0x3C, 0x00, 0x00, 0xFF, 0x2F, 0x00]],
            ),
        ),
        bad(
            "five_byte_delta",
            file(0, 480, &[&[0x81, 0x80, 0x80, 0x80, 0x00, 0x90, 0x3C, 0x40, 0x00, 0xFF, 0x2F, 0x00]]),
        ),
        bad("format_2", file(2, 480, &[&EOT])),
        bad("smpte_division", file(0, 0xE728, &[&EOT])),
        bad("truncated_header", b"MThd\x00\x00\x00\x06\x00".to_vec()),
        bad(
            "track_length_overruns_file",
            {
                let mut b = header(0, 1, 480);
                b.extend_from_slice(b"MTrk\x00\x00\x01\x00\x00\xFF\x2F\x00");
                b
            },
        ),
        bad("missing_track", header(1, 2, 480).into_iter().chain(track(&EOT)).collect()),
        bad(
            "zero_tempo",
            file(0, 480, &[&[0x00, 0xFF, 0x51, 0x03, 0x00, 0x00, 0x00, 0x00, 0xFF, 0x2F, 0x00]]),
        ),
    ]
}
