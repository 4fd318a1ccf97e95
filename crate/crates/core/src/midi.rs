//! Standard MIDI File reading and writing for monophonic melodies.
//!
//! Melodies live on a fixed quantization grid. Each grid step carries one
//! [`MelodyEvent`]: a sustain/rest continuation, a release, or the onset of a
//! new pitch.
//!
//! Rendering is canonical and the parser inverts it exactly. Two details make
//! that possible for every valid sequence:
//!
//! - the end-of-track event sits at `len × ticks_per_step`, so trailing rests
//!   survive. A note still sounding when the track ends is sustained to the
//!   end and does not produce a trailing `NOTE_OFF`.
//! - a `NOTE_OFF` while nothing sounds is written as a stray note-off message
//!   for the last released pitch. Stray note-offs that land on a silent step
//!   decode back to `NOTE_OFF`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;
use walkdir::WalkDir;

/// Number of distinct melody symbols.
pub const VOCAB_SIZE: usize = 130;

/// Ticks per grid step used when rendering.
const RENDER_TICKS_PER_STEP: u32 = 120;
const RENDER_VELOCITY: u8 = 100;
const DRUM_CHANNEL: u8 = 9;
/// Tracks expanding past this many grid steps are skipped.
const MAX_MELODY_STEPS: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI: {0}")]
    Malformed(String),
    #[error("unsupported MIDI: {0}")]
    UnsupportedFormat(String),
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
    #[error("invalid melody: {0}")]
    InvalidMelody(String),
    #[error("directory not found: {0}")]
    DirectoryNotFound(PathBuf),
}

fn malformed(msg: impl Into<String>) -> MidiError {
    MidiError::Malformed(msg.into())
}

/// One grid step of a monophonic melody.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MelodyEvent(pub(crate) u8);

impl MelodyEvent {
    pub const NO_EVENT: MelodyEvent = MelodyEvent(0);
    pub const NOTE_OFF: MelodyEvent = MelodyEvent(1);

    pub fn new(symbol: u8) -> Option<Self> {
        ((symbol as usize) < VOCAB_SIZE).then_some(MelodyEvent(symbol))
    }

    pub fn note_on(pitch: u8) -> Option<Self> {
        (pitch < 128).then(|| MelodyEvent(pitch + 2))
    }

    pub fn symbol(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_note_on(self) -> bool {
        self.0 >= 2
    }

    pub fn pitch(self) -> Option<u8> {
        self.is_note_on().then(|| self.0 - 2)
    }
}

impl fmt::Debug for MelodyEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "NoEvent"),
            1 => write!(f, "NoteOff"),
            s => write!(f, "NoteOn({})", s - 2),
        }
    }
}

/// A quantized monophonic melody whose first event is a note onset.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MelodySequence {
    events: Vec<MelodyEvent>,
    steps_per_quarter: u32,
}

impl MelodySequence {
    pub fn new(events: Vec<MelodyEvent>, steps_per_quarter: u32) -> Result<Self, MidiError> {
        if steps_per_quarter == 0 {
            return Err(MidiError::InvalidMelody("steps_per_quarter must be positive".into()));
        }
        match events.first() {
            None => return Err(MidiError::InvalidMelody("empty melody".into())),
            Some(first) if !first.is_note_on() => {
                return Err(MidiError::InvalidMelody(format!(
                    "first event must be a note onset, got {first:?}"
                )))
            }
            _ => {}
        }
        Ok(Self { events, steps_per_quarter })
    }

    /// Builds a melody from raw symbols, checking range and invariants.
    pub fn from_symbols(symbols: &[u8], steps_per_quarter: u32) -> Result<Self, MidiError> {
        let events = symbols
            .iter()
            .map(|&s| {
                MelodyEvent::new(s)
                    .ok_or_else(|| MidiError::InvalidMelody(format!("symbol {s} out of range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(events, steps_per_quarter)
    }

    pub fn events(&self) -> &[MelodyEvent] {
        &self.events
    }

    pub fn symbols(&self) -> Vec<u8> {
        self.events.iter().map(|e| e.symbol()).collect()
    }

    pub fn key(&self) -> MelodyEvent {
        self.events[0]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps_per_quarter(&self) -> u32 {
        self.steps_per_quarter
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizationConfig {
    pub steps_per_quarter: u32,
    pub min_melody_events: usize,
    pub pitch_range: (u8, u8),
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self { steps_per_quarter: 4, min_melody_events: 1, pitch_range: (0, 127) }
    }
}

impl QuantizationConfig {
    pub fn validate(&self) -> Result<(), MidiError> {
        let (low, high) = self.pitch_range;
        if self.steps_per_quarter == 0 {
            return Err(MidiError::InvalidConfig("steps_per_quarter must be positive".into()));
        }
        if self.min_melody_events == 0 {
            return Err(MidiError::InvalidConfig("min_melody_events must be positive".into()));
        }
        if low > high || high > 127 {
            return Err(MidiError::InvalidConfig(format!("bad pitch range [{low}, {high}]")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self.data.get(self.pos).ok_or_else(|| malformed("unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Result<u8, MidiError> {
        self.data.get(self.pos).copied().ok_or_else(|| malformed("unexpected end of data"))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(malformed("unexpected end of data"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8().map_err(|_| malformed("truncated variable-length quantity"))?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(malformed("variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Clone, Copy, Debug)]
struct Note {
    start: u64,
    end: u64,
    pitch: u8,
}

#[derive(Default)]
struct TrackNotes {
    notes: Vec<Note>,
    /// Ticks of note-off messages that matched no sounding note.
    strays: Vec<u64>,
    end_of_track: u64,
}

/// Parses a Standard MIDI File and extracts one monophonic melody per track.
pub fn parse_and_extract(
    midi_bytes: &[u8],
    cfg: &QuantizationConfig,
) -> Result<Vec<MelodySequence>, MidiError> {
    cfg.validate()?;
    let mut r = Reader::new(midi_bytes);
    if r.remaining() < 4 || r.bytes(4)? != b"MThd" {
        return Err(malformed("missing MThd header"));
    }
    let header_len = r.u32_be()? as usize;
    if header_len < 6 {
        return Err(malformed("header chunk too short"));
    }
    let header = r.bytes(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("SMF format 2".into())),
        f => return Err(malformed(format!("unknown SMF format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(malformed("zero ticks per quarter"));
    }

    let mut melodies = Vec::new();
    let mut seen = 0u16;
    while seen < ntracks && r.remaining() > 0 {
        if r.remaining() < 8 {
            return Err(malformed("truncated chunk header"));
        }
        let tag = r.bytes(4)?;
        let len = r.u32_be()? as usize;
        let body = r.bytes(len).map_err(|_| malformed("chunk length exceeds file size"))?;
        if tag != b"MTrk" {
            // Unknown chunk types are skipped.
            continue;
        }
        seen += 1;
        let track = read_track(body)?;
        if let Some(melody) = quantize_track(&track, u64::from(division), cfg) {
            if melody.len() >= cfg.min_melody_events {
                melodies.push(melody);
            }
        }
    }
    if seen < ntracks {
        return Err(malformed(format!("expected {ntracks} tracks, found {seen}")));
    }
    Ok(melodies)
}

fn read_track(body: &[u8]) -> Result<TrackNotes, MidiError> {
    let mut r = Reader::new(body);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut open: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    let mut out = TrackNotes::default();
    let mut ended = false;

    while r.remaining() > 0 {
        tick += u64::from(r.vlq()?);
        let first = r.peek()?;
        let status = if first & 0x80 != 0 {
            r.u8()?
        } else {
            running.ok_or_else(|| malformed("data byte without running status"))?
        };
        match status {
            0xFF => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                r.bytes(len)?;
                if kind == 0x2F {
                    ended = true;
                    break;
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.bytes(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let channel = status & 0x0F;
                let data1 = r.u8()?;
                let data2 = match status & 0xF0 {
                    0xC0 | 0xD0 => 0,
                    _ => r.u8()?,
                };
                if data1 > 0x7F || data2 > 0x7F {
                    return Err(malformed("channel message data byte out of range"));
                }
                if channel == DRUM_CHANNEL {
                    continue;
                }
                let kind = status & 0xF0;
                let is_on = kind == 0x90 && data2 > 0;
                let is_off = kind == 0x80 || (kind == 0x90 && data2 == 0);
                if is_on {
                    if let Some(start) = open.insert((channel, data1), tick) {
                        out.notes.push(Note { start, end: tick, pitch: data1 });
                    }
                } else if is_off {
                    match open.remove(&(channel, data1)) {
                        Some(start) => out.notes.push(Note { start, end: tick, pitch: data1 }),
                        None => out.strays.push(tick),
                    }
                }
            }
            _ => return Err(malformed(format!("unexpected status byte {status:#04x}"))),
        }
    }
    if !ended {
        return Err(malformed("track without end-of-track event"));
    }
    for ((_, pitch), start) in open {
        out.notes.push(Note { start, end: tick, pitch });
    }
    out.end_of_track = tick;
    Ok(out)
}

fn to_step(tick: u64, division: u64, steps_per_quarter: u64) -> u64 {
    (2 * tick * steps_per_quarter + division) / (2 * division)
}

fn quantize_track(
    track: &TrackNotes,
    division: u64,
    cfg: &QuantizationConfig,
) -> Option<MelodySequence> {
    let spq = u64::from(cfg.steps_per_quarter);
    let (low, high) = cfg.pitch_range;
    let notes: Vec<Note> = track
        .notes
        .iter()
        .filter(|n| (low..=high).contains(&n.pitch))
        .map(|n| Note {
            start: to_step(n.start, division, spq),
            end: to_step(n.end, division, spq),
            pitch: n.pitch,
        })
        .filter(|n| n.end > n.start)
        .collect();
    let first = notes.iter().map(|n| n.start).min()?;
    let eot = to_step(track.end_of_track, division, spq);
    let strays: Vec<u64> = track
        .strays
        .iter()
        .map(|&t| to_step(t, division, spq))
        .filter(|&s| s > first)
        .collect();

    let mut total = eot;
    for n in &notes {
        // A note released exactly at end-of-track sustains to the end.
        total = total.max(if n.end == eot { n.end } else { n.end + 1 });
    }
    for &s in &strays {
        total = total.max(s + 1);
    }
    if total - first > MAX_MELODY_STEPS {
        return None;
    }

    let len = (total - first) as usize;
    // Highest sounding pitch per step; ties between identical pitches go to
    // the note that started later.
    let mut active: Vec<Option<(u8, u64)>> = vec![None; len];
    for n in &notes {
        for step in n.start.max(first)..n.end.min(total) {
            let slot = &mut active[(step - first) as usize];
            let candidate = (n.pitch, n.start);
            if slot.is_none_or(|cur| candidate > cur) {
                *slot = Some(candidate);
            }
        }
    }
    let mut stray_steps = vec![false; len];
    for s in strays {
        if s < total {
            stray_steps[(s - first) as usize] = true;
        }
    }

    let mut events = Vec::with_capacity(len);
    let mut previous: Option<(u8, u64)> = None;
    for (i, cur) in active.iter().enumerate() {
        let event = match (previous, *cur) {
            (prev, Some(note)) if prev != Some(note) => MelodyEvent(note.0 + 2),
            (_, Some(_)) => MelodyEvent::NO_EVENT,
            (Some(_), None) => MelodyEvent::NOTE_OFF,
            (None, None) if stray_steps[i] => MelodyEvent::NOTE_OFF,
            (None, None) => MelodyEvent::NO_EVENT,
        };
        events.push(event);
        previous = *cur;
    }
    MelodySequence::new(events, cfg.steps_per_quarter).ok()
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

pub const DEFAULT_TEMPO_BPM: f64 = 120.0;
pub const DEFAULT_PROGRAM: u8 = 0;

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7F) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn render_ticks_per_step(steps_per_quarter: u32) -> u32 {
    RENDER_TICKS_PER_STEP.min(0x7FFF / steps_per_quarter).max(1)
}

/// Renders a melody as a format-0 Standard MIDI File on channel 0.
///
/// `tempo_bpm` must be positive and finite and `program` at most 127.
pub fn render_midi(melody: &MelodySequence, tempo_bpm: f64, program: u8) -> Vec<u8> {
    assert!(tempo_bpm.is_finite() && tempo_bpm > 0.0, "tempo must be positive");
    assert!(program < 128, "program must be in 0..=127");
    let spq = melody.steps_per_quarter();
    assert!(spq <= 0x7FFF, "steps_per_quarter too large for SMF division");
    let tps = render_ticks_per_step(spq);
    let division = tps * spq;

    let mut track = Vec::new();
    let micros = (60_000_000.0 / tempo_bpm).round().clamp(1.0, 16_777_215.0) as u32;
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&micros.to_be_bytes()[1..]);
    track.extend_from_slice(&[0x00, 0xC0, program]);

    let mut last_tick = 0u32;
    let mut emit = |track: &mut Vec<u8>, tick: u32, msg: &[u8]| {
        write_vlq(track, tick - last_tick);
        track.extend_from_slice(msg);
        last_tick = tick;
    };
    let mut sounding: Option<u8> = None;
    let mut last_released: u8 = 0;
    for (i, event) in melody.events().iter().enumerate() {
        let tick = i as u32 * tps;
        match *event {
            MelodyEvent::NO_EVENT => {}
            MelodyEvent::NOTE_OFF => match sounding.take() {
                Some(p) => {
                    emit(&mut track, tick, &[0x80, p, 0x40]);
                    last_released = p;
                }
                None => emit(&mut track, tick, &[0x80, last_released, 0x00]),
            },
            on => {
                let pitch = on.symbol() - 2;
                if let Some(p) = sounding.take() {
                    emit(&mut track, tick, &[0x80, p, 0x40]);
                    last_released = p;
                }
                emit(&mut track, tick, &[0x90, pitch, RENDER_VELOCITY]);
                sounding = Some(pitch);
            }
        }
    }
    let end = melody.len() as u32 * tps;
    if let Some(p) = sounding {
        emit(&mut track, end, &[0x80, p, 0x40]);
    }
    emit(&mut track, end, &[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(division as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

// ---------------------------------------------------------------------------
// Corpus loading
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct Corpus {
    pub melodies: Vec<MelodySequence>,
    pub files_parsed: usize,
    pub skipped: usize,
}

fn is_midi_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// Recursively loads every `.mid`/`.midi` file under `directory` in
/// lexicographic path order. Unreadable or malformed files are counted and
/// skipped.
pub fn load_corpus(directory: &Path, cfg: &QuantizationConfig) -> Result<Corpus, MidiError> {
    cfg.validate()?;
    if !directory.is_dir() {
        return Err(MidiError::DirectoryNotFound(directory.to_path_buf()));
    }
    let mut corpus = Corpus::default();
    let walker = WalkDir::new(directory).sort_by_file_name().into_iter();
    for entry in walker.filter_map(Result::ok) {
        if !entry.file_type().is_file() || !is_midi_path(entry.path()) {
            continue;
        }
        let parsed = std::fs::read(entry.path())
            .map_err(|e| malformed(e.to_string()))
            .and_then(|bytes| parse_and_extract(&bytes, cfg));
        match parsed {
            Ok(mut melodies) => {
                corpus.files_parsed += 1;
                corpus.melodies.append(&mut melodies);
            }
            Err(_) => corpus.skipped += 1,
        }
    }
    Ok(corpus)
}
