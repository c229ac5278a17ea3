//! Standard MIDI File (format 0/1) reader producing absolute-time notes.
//!
//! Parsing is split in two: [`parse_smf`] turns bytes into per-track lists of
//! tick-stamped events, and [`extract_notes`] pairs note-ons with note-offs and
//! converts ticks to seconds through a [`TempoMap`]. All channels are merged.
//! Sustain pedal (CC64) is parsed but not applied to note durations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tempo when a file carries no tempo event at tick 0 (120 bpm).
pub const DEFAULT_US_PER_QUARTER: u32 = 500_000;

const MAX_VLQ_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmfError {
    #[error("malformed MIDI file at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI feature: {0}")]
    Unsupported(String),
}

fn malformed(offset: usize, reason: impl Into<String>) -> SmfError {
    SmfError::Malformed {
        offset,
        reason: reason.into(),
    }
}

/// Decodes one variable-length quantity, returning `(value, bytes consumed)`.
pub fn parse_vlq(bytes: &[u8]) -> Result<(u32, usize), SmfError> {
    let mut value: u32 = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if i == MAX_VLQ_BYTES {
            return Err(malformed(i, "variable-length quantity longer than 4 bytes"));
        }
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    if bytes.len() >= MAX_VLQ_BYTES {
        Err(malformed(MAX_VLQ_BYTES, "variable-length quantity longer than 4 bytes"))
    } else {
        Err(malformed(bytes.len(), "truncated variable-length quantity"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmfFormat {
    SingleTrack,
    MultiTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmfHeader {
    pub format: SmfFormat,
    pub track_count: u16,
    /// Ticks per quarter note.
    pub division: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    NoteOn { channel: u8, key: u8, velocity: u8 },
    NoteOff { channel: u8, key: u8, velocity: u8 },
    ControlChange { channel: u8, controller: u8, value: u8 },
    /// Set Tempo meta event, microseconds per quarter note.
    Tempo(u32),
    EndOfTrack,
    /// Any other channel, meta or sysex event.
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedEvent {
    /// Absolute tick from the start of the track.
    pub tick: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Smf {
    pub header: SmfHeader,
    pub tracks: Vec<Vec<TimedEvent>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Absolute offset of `bytes[0]` in the file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    fn at(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SmfError> {
        if self.remaining() < n {
            return Err(malformed(self.at(), format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SmfError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, SmfError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SmfError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, SmfError> {
        let (v, n) = parse_vlq(&self.bytes[self.pos..]).map_err(|e| match e {
            SmfError::Malformed { offset, reason } => malformed(self.at() + offset, reason),
            other => other,
        })?;
        self.pos += n;
        Ok(v)
    }

    fn data_byte(&mut self) -> Result<u8, SmfError> {
        let at = self.at();
        let b = self.u8("channel message")?;
        if b & 0x80 != 0 {
            return Err(malformed(at, "status byte where data byte expected"));
        }
        Ok(b)
    }
}

/// Parses a complete Standard MIDI File.
///
/// Unknown chunks and unknown meta/sysex events are skipped by their declared
/// length. Format 2 and SMPTE time division are rejected.
pub fn parse_smf(bytes: &[u8]) -> Result<Smf, SmfError> {
    let mut r = Reader::new(bytes, 0);
    if r.take(4, "header magic")? != b"MThd" {
        return Err(malformed(0, "missing MThd header chunk"));
    }
    let header_len = r.u32("header length")? as usize;
    if header_len < 6 {
        return Err(malformed(4, "header chunk shorter than 6 bytes"));
    }
    let header_bytes = r.take(header_len, "header chunk")?;
    let mut h = Reader::new(header_bytes, 8);
    let format = match h.u16("format")? {
        0 => SmfFormat::SingleTrack,
        1 => SmfFormat::MultiTrack,
        2 => return Err(SmfError::Unsupported("format 2 (sequential tracks)".into())),
        f => return Err(malformed(8, format!("unknown format {f}"))),
    };
    let track_count = h.u16("track count")?;
    let division = h.u16("division")?;
    if track_count == 0 {
        return Err(malformed(10, "track count is zero"));
    }
    if format == SmfFormat::SingleTrack && track_count != 1 {
        return Err(malformed(10, "format 0 file must hold exactly one track"));
    }
    if division & 0x8000 != 0 {
        return Err(SmfError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(malformed(12, "division is zero"));
    }
    let header = SmfHeader {
        format,
        track_count,
        division,
    };

    let mut tracks = Vec::with_capacity(usize::from(track_count));
    while tracks.len() < usize::from(track_count) {
        if r.remaining() == 0 {
            return Err(malformed(
                r.at(),
                format!("expected {track_count} MTrk chunks, found {}", tracks.len()),
            ));
        }
        let id = r.take(4, "chunk id")?;
        let len = r.u32("chunk length")? as usize;
        let start = r.at();
        if r.remaining() < len {
            return Err(malformed(start, "chunk length overruns file"));
        }
        let body = r.take(len, "chunk body")?;
        if id == b"MTrk" {
            tracks.push(parse_track(body, start)?);
        }
    }
    Ok(Smf { header, tracks })
}

fn parse_track(body: &[u8], base: usize) -> Result<Vec<TimedEvent>, SmfError> {
    let mut r = Reader::new(body, base);
    let mut events = Vec::new();
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while r.remaining() > 0 {
        tick += u64::from(r.vlq()?);
        let at = r.at();
        let first = r.u8("event")?;
        let kind = match first {
            0xFF => {
                running = None;
                let meta_type = r.u8("meta type")?;
                let len = r.vlq()? as usize;
                let data = r.take(len, "meta event data")?;
                match meta_type {
                    0x2F => EventKind::EndOfTrack,
                    0x51 => {
                        if len != 3 {
                            return Err(malformed(at, "tempo meta event must have length 3"));
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(malformed(at, "tempo of zero microseconds per quarter"));
                        }
                        EventKind::Tempo(us)
                    }
                    _ => EventKind::Other,
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len, "sysex data")?;
                EventKind::Other
            }
            0xF1..=0xFE => return Err(malformed(at, "system message inside track")),
            status @ 0x80..=0xEF => {
                running = Some(status);
                channel_event(&mut r, status, None)?
            }
            data => {
                let status = running.ok_or_else(|| malformed(at, "data byte without running status"))?;
                channel_event(&mut r, status, Some(data))?
            }
        };
        events.push(TimedEvent { tick, kind });
        if kind == EventKind::EndOfTrack {
            break;
        }
    }
    Ok(events)
}

fn channel_event(r: &mut Reader<'_>, status: u8, first: Option<u8>) -> Result<EventKind, SmfError> {
    let channel = status & 0x0F;
    let next = |r: &mut Reader<'_>, slot: &mut Option<u8>| match slot.take() {
        Some(b) => Ok(b),
        None => r.data_byte(),
    };
    let mut pending = first;
    let kind = match status & 0xF0 {
        0x80 => EventKind::NoteOff {
            channel,
            key: next(r, &mut pending)?,
            velocity: next(r, &mut pending)?,
        },
        0x90 => {
            let key = next(r, &mut pending)?;
            let velocity = next(r, &mut pending)?;
            if velocity == 0 {
                EventKind::NoteOff {
                    channel,
                    key,
                    velocity: 0,
                }
            } else {
                EventKind::NoteOn {
                    channel,
                    key,
                    velocity,
                }
            }
        }
        0xB0 => EventKind::ControlChange {
            channel,
            controller: next(r, &mut pending)?,
            value: next(r, &mut pending)?,
        },
        0xA0 | 0xE0 => {
            next(r, &mut pending)?;
            next(r, &mut pending)?;
            EventKind::Other
        }
        // 0xC0 program change, 0xD0 channel pressure
        _ => {
            next(r, &mut pending)?;
            EventKind::Other
        }
    };
    Ok(kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoEntry {
    pub tick: u64,
    pub us_per_quarter: u32,
}

/// Piecewise-constant tempo over ticks; converts ticks to seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TempoMap {
    division: u16,
    entries: Vec<TempoEntry>,
    /// Σ Δticks × µs/qn up to each entry.
    elapsed: Vec<u128>,
}

impl TempoMap {
    /// Builds a map from explicit entries. Entries at equal ticks keep the last;
    /// a default entry at tick 0 is inserted when missing.
    pub fn new(division: u16, mut entries: Vec<TempoEntry>) -> Self {
        entries.sort_by_key(|e| e.tick);
        let mut dedup: Vec<TempoEntry> = Vec::with_capacity(entries.len() + 1);
        for e in entries {
            match dedup.last_mut() {
                Some(last) if last.tick == e.tick => *last = e,
                _ => dedup.push(e),
            }
        }
        if dedup.first().is_none_or(|e| e.tick > 0) {
            dedup.insert(
                0,
                TempoEntry {
                    tick: 0,
                    us_per_quarter: DEFAULT_US_PER_QUARTER,
                },
            );
        }
        let mut elapsed = Vec::with_capacity(dedup.len());
        let mut acc: u128 = 0;
        for (i, e) in dedup.iter().enumerate() {
            if i > 0 {
                let prev = dedup[i - 1];
                acc += u128::from(e.tick - prev.tick) * u128::from(prev.us_per_quarter);
            }
            elapsed.push(acc);
        }
        Self {
            division: division.max(1),
            entries: dedup,
            elapsed,
        }
    }

    /// Collects tempo events from every track, in track order.
    pub fn from_smf(smf: &Smf) -> Self {
        let entries = smf
            .tracks
            .iter()
            .flatten()
            .filter_map(|e| match e.kind {
                EventKind::Tempo(us) => Some(TempoEntry {
                    tick: e.tick,
                    us_per_quarter: us,
                }),
                _ => None,
            })
            .collect();
        Self::new(smf.header.division, entries)
    }

    pub fn entries(&self) -> &[TempoEntry] {
        &self.entries
    }

    pub fn seconds_at(&self, tick: u64) -> f64 {
        let i = self.entries.partition_point(|e| e.tick <= tick) - 1;
        let e = self.entries[i];
        let num = self.elapsed[i] + u128::from(tick - e.tick) * u128::from(e.us_per_quarter);
        num as f64 / (f64::from(self.division) * 1e6)
    }
}

/// One sounded note in absolute time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_seconds: f64,
    pub offset_seconds: f64,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractDiagnostics {
    /// Note-offs with no sounding note to close.
    pub dangling_note_offs: usize,
    /// Notes whose onset and offset fell on the same tick.
    pub zero_length_dropped: usize,
    /// Note-ons never released, closed at the final event's time.
    pub closed_at_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteExtraction {
    pub notes: Vec<NoteEvent>,
    pub diagnostics: ExtractDiagnostics,
}

/// Pairs note-ons with note-offs across all tracks and channels.
///
/// A note-on for an already sounding (channel, pitch) closes the earlier note.
/// Output is sorted by onset, then pitch.
pub fn extract_notes(_header: &SmfHeader, tracks: &[Vec<TimedEvent>], tempo: &TempoMap) -> NoteExtraction {
    let mut merged: Vec<(u64, usize, usize, EventKind)> = tracks
        .iter()
        .enumerate()
        .flat_map(|(t, evs)| evs.iter().enumerate().map(move |(i, e)| (e.tick, t, i, e.kind)))
        .collect();
    merged.sort_by_key(|&(tick, t, i, _)| (tick, t, i));
    let end_tick = merged.last().map_or(0, |m| m.0);

    let mut diag = ExtractDiagnostics::default();
    let mut active: Vec<Option<(u64, u8)>> = vec![None; 16 * 128];
    let mut spans: Vec<(u64, u64, u8, u8, u8)> = Vec::new();
    let close = |spans: &mut Vec<_>, diag: &mut ExtractDiagnostics, on: u64, off: u64, ch: u8, key: u8, vel: u8| {
        if off > on {
            spans.push((on, off, key, vel, ch));
        } else {
            diag.zero_length_dropped += 1;
        }
    };
    for &(tick, _, _, kind) in &merged {
        match kind {
            EventKind::NoteOn { channel, key, velocity } => {
                let slot = &mut active[usize::from(channel) * 128 + usize::from(key)];
                if let Some((on, vel)) = slot.replace((tick, velocity)) {
                    close(&mut spans, &mut diag, on, tick, channel, key, vel);
                }
            }
            EventKind::NoteOff { channel, key, .. } => {
                match active[usize::from(channel) * 128 + usize::from(key)].take() {
                    Some((on, vel)) => close(&mut spans, &mut diag, on, tick, channel, key, vel),
                    None => diag.dangling_note_offs += 1,
                }
            }
            _ => {}
        }
    }
    for (idx, slot) in active.iter_mut().enumerate() {
        if let Some((on, vel)) = slot.take() {
            diag.closed_at_end += 1;
            close(&mut spans, &mut diag, on, end_tick, (idx / 128) as u8, (idx % 128) as u8, vel);
        }
    }

    let mut notes: Vec<NoteEvent> = spans
        .into_iter()
        .map(|(on, off, pitch, velocity, channel)| NoteEvent {
            onset_seconds: tempo.seconds_at(on),
            offset_seconds: tempo.seconds_at(off),
            pitch,
            velocity,
            channel,
        })
        .filter(|n| {
            let ok = n.offset_seconds > n.onset_seconds;
            if !ok {
                diag.zero_length_dropped += 1;
            }
            ok
        })
        .collect();
    sort_notes(&mut notes);
    if diag.dangling_note_offs > 0 {
        log::debug!("{} dangling note-off events ignored", diag.dangling_note_offs);
    }
    NoteExtraction {
        notes,
        diagnostics: diag,
    }
}

/// Orders by onset, then pitch, then channel, then offset.
pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by(|a, b| {
        a.onset_seconds
            .total_cmp(&b.onset_seconds)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.channel.cmp(&b.channel))
            .then(a.offset_seconds.total_cmp(&b.offset_seconds))
    });
}

/// Parses a file and extracts its notes in one call.
pub fn read_notes(bytes: &[u8]) -> Result<NoteExtraction, SmfError> {
    let smf = parse_smf(bytes)?;
    let tempo = TempoMap::from_smf(&smf);
    Ok(extract_notes(&smf.header, &smf.tracks, &tempo))
}

#[derive(Serialize)]
struct DumpNote {
    onset: f64,
    offset: f64,
    pitch: u8,
    velocity: u8,
}

#[derive(Serialize)]
struct NoteDump {
    notes: Vec<DumpNote>,
}

/// Debug dump: `{"notes": [{onset, offset, pitch, velocity}, ...]}`.
pub fn notes_to_json(notes: &[NoteEvent]) -> String {
    let dump = NoteDump {
        notes: notes
            .iter()
            .map(|n| DumpNote {
                onset: n.onset_seconds,
                offset: n.offset_seconds,
                pitch: n.pitch,
                velocity: n.velocity,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&dump).expect("note dump serializes")
}
