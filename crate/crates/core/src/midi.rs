//! Standard MIDI File (SMF format 0/1) parsing and serialization.
//!
//! Only the event subset that matters for piano-roll conversion is
//! interpreted: note-on, note-off, program change, and the set-tempo meta
//! event. Everything else (controllers, pitch bend, SysEx, other meta
//! events) is skipped by length. The parser honors running status and pairs
//! note-on/note-off into [`RawNote`]s; it never panics on arbitrary bytes —
//! malformed input yields a [`ParseError`] naming the byte offset.

use thiserror::Error;

/// Largest value a 4-byte variable-length quantity can hold.
const VLQ_MAX: u64 = 0x0FFF_FFFF;

/// Drum channel (0-based). Notes on it are percussion regardless of program.
const DRUM_CHANNEL: u8 = 9;

/// One paired note with everything the roll encoder needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawNote {
    pub pitch: u8,
    pub onset_tick: u64,
    pub duration_tick: u64,
    pub velocity: u8,
    pub program: u8,
    pub is_drum: bool,
}

/// Tempo change: microseconds per quarter note starting at `tick`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoEvent {
    pub tick: u64,
    pub micros_per_beat: u32,
}

/// Notes of one MTrk chunk, sorted by onset tick.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Track {
    pub notes: Vec<RawNote>,
}

/// An in-memory score: paired notes grouped by track, plus the time
/// resolution and tempo map. Immutable after construction by convention;
/// nothing here holds interior mutability, so shared references are
/// thread-safe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub tracks: Vec<Track>,
    /// Ticks per quarter note, >= 1.
    pub ticks_per_beat: u16,
    pub tempo_map: Vec<TempoEvent>,
}

impl Score {
    pub fn new(ticks_per_beat: u16) -> Self {
        Score {
            tracks: Vec::new(),
            ticks_per_beat,
            tempo_map: Vec::new(),
        }
    }

    /// All notes across tracks, in track order.
    pub fn notes(&self) -> impl Iterator<Item = &RawNote> {
        self.tracks.iter().flat_map(|t| t.notes.iter())
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    /// Multiset of note attributes, sorted. Two scores are "note-set equal"
    /// when these compare equal, regardless of track layout.
    pub fn note_set(&self) -> Vec<RawNote> {
        let mut all: Vec<RawNote> = self.notes().copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("not an SMF file: expected MThd chunk at byte {offset}")]
    MissingHeader { offset: usize },
    #[error("MThd chunk length is {len} at byte {offset}, the SMF header must be 6 bytes")]
    BadHeaderLength { len: u32, offset: usize },
    #[error("unsupported SMF format {format} at byte {offset} (only 0 and 1)")]
    UnsupportedFormat { format: u16, offset: usize },
    #[error("SMPTE time division at byte {offset} is unsupported")]
    SmpteDivision { offset: usize },
    #[error("ticks-per-beat is zero at byte {offset}")]
    ZeroDivision { offset: usize },
    #[error("truncated input: needed {needed} more byte(s) at byte {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("variable-length quantity exceeds 4 bytes at byte {offset}")]
    VlqTooLong { offset: usize },
    #[error("expected a data byte, got {byte:#04x} at byte {offset}")]
    InvalidDataByte { byte: u8, offset: usize },
    #[error("unexpected status byte {byte:#04x} at byte {offset}")]
    UnexpectedStatus { byte: u8, offset: usize },
    #[error("data byte {byte:#04x} with no running status at byte {offset}")]
    MissingStatus { byte: u8, offset: usize },
    #[error(
        "note-on (channel {channel}, pitch {pitch}) never paired with a note-off \
         by end of track at byte {offset}"
    )]
    UnpairedNoteOn { channel: u8, pitch: u8, offset: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WriteError {
    #[error("tick delta {value} exceeds variable-length-quantity capacity ({VLQ_MAX})")]
    TickOverflow { value: u64 },
    #[error("ticks-per-beat {0} out of range 1..=32767")]
    BadDivision(u16),
    #[error("note field out of range: {0:?}")]
    InvalidNote(RawNote),
    #[error("too many tracks: {0} (SMF allows 65535)")]
    TooManyTracks(usize),
}

/// Cursor over the input with absolute-offset error reporting.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn need(&self, n: usize) -> Result<(), ParseError> {
        if self.remaining() < n {
            Err(ParseError::Truncated {
                needed: n - self.remaining(),
                offset: self.pos,
            })
        } else {
            Ok(())
        }
    }

    fn u8(&mut self) -> Result<u8, ParseError> {
        self.need(1)?;
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        self.need(2)?;
        let v = u16::from_be_bytes([self.bytes[self.pos], self.bytes[self.pos + 1]]);
        self.pos += 2;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        self.need(4)?;
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn skip(&mut self, n: usize) -> Result<(), ParseError> {
        self.need(n)?;
        self.pos += n;
        Ok(())
    }

    /// Data byte: top bit must be clear.
    fn data_byte(&mut self) -> Result<u8, ParseError> {
        let offset = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(ParseError::InvalidDataByte { byte: b, offset });
        }
        Ok(b)
    }

    fn vlq(&mut self) -> Result<u64, ParseError> {
        let start = self.pos;
        let mut value: u64 = 0;
        for i in 0.. {
            if i == 4 {
                return Err(ParseError::VlqTooLong { offset: start });
            }
            let b = self.u8()?;
            value = (value << 7) | u64::from(b & 0x7F);
            if b & 0x80 == 0 {
                break;
            }
        }
        Ok(value)
    }
}

/// Per-channel note-on bookkeeping while walking a track.
#[derive(Clone, Copy)]
struct OpenNote {
    onset_tick: u64,
    velocity: u8,
    program: u8,
}

struct TrackParser {
    /// Open note per (channel, pitch).
    open: Vec<Option<OpenNote>>,
    /// Current program per channel.
    programs: [u8; 16],
    notes: Vec<RawNote>,
}

impl TrackParser {
    fn new() -> Self {
        TrackParser {
            open: vec![None; 16 * 128],
            programs: [0; 16],
            notes: Vec::new(),
        }
    }

    fn slot(&mut self, channel: u8, pitch: u8) -> &mut Option<OpenNote> {
        &mut self.open[usize::from(channel) * 128 + usize::from(pitch)]
    }

    fn close(&mut self, channel: u8, pitch: u8, tick: u64) {
        if let Some(open) = self.slot(channel, pitch).take() {
            self.notes.push(RawNote {
                pitch,
                onset_tick: open.onset_tick,
                // simultaneous on/off still yields a sounding note
                duration_tick: (tick - open.onset_tick).max(1),
                velocity: open.velocity,
                program: open.program,
                is_drum: channel == DRUM_CHANNEL,
            });
        }
        // a note-off with nothing open is silently dropped
    }

    fn note_on(&mut self, channel: u8, pitch: u8, velocity: u8, tick: u64) {
        // Overlapping same-pitch notes on one channel: last-on wins, the
        // earlier note is closed at this tick.
        self.close(channel, pitch, tick);
        let program = self.programs[usize::from(channel)];
        *self.slot(channel, pitch) = Some(OpenNote {
            onset_tick: tick,
            velocity,
            program,
        });
    }

    fn finish(mut self, end_offset: usize) -> Result<Track, ParseError> {
        for channel in 0..16u8 {
            for pitch in 0..128u8 {
                if self.slot(channel, pitch).is_some() {
                    return Err(ParseError::UnpairedNoteOn {
                        channel,
                        pitch,
                        offset: end_offset,
                    });
                }
            }
        }
        self.notes.sort_by_key(|n| n.onset_tick);
        Ok(Track { notes: self.notes })
    }
}

/// Parse an SMF format-0 or format-1 file into a [`Score`].
///
/// Tracks without notes (e.g. a conductor track holding only tempo events)
/// are dropped; their tempo events still land in `tempo_map`.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, ParseError> {
    let mut r = Reader::new(bytes);

    let header_offset = r.pos;
    let mut tag = [0u8; 4];
    r.need(4)?;
    tag.copy_from_slice(&r.bytes[r.pos..r.pos + 4]);
    if &tag != b"MThd" {
        return Err(ParseError::MissingHeader {
            offset: header_offset,
        });
    }
    r.skip(4)?;

    let len_offset = r.pos;
    let len = r.u32()?;
    if len != 6 {
        return Err(ParseError::BadHeaderLength {
            len,
            offset: len_offset,
        });
    }
    let format_offset = r.pos;
    let format = r.u16()?;
    if format > 1 {
        return Err(ParseError::UnsupportedFormat {
            format,
            offset: format_offset,
        });
    }
    let ntracks = r.u16()?;
    let division_offset = r.pos;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(ParseError::SmpteDivision {
            offset: division_offset,
        });
    }
    if division == 0 {
        return Err(ParseError::ZeroDivision {
            offset: division_offset,
        });
    }

    let mut score = Score::new(division);
    let mut parsed = 0u16;
    while parsed < ntracks {
        let chunk_offset = r.pos;
        r.need(8)?;
        let mut id = [0u8; 4];
        id.copy_from_slice(&r.bytes[r.pos..r.pos + 4]);
        r.skip(4)?;
        let chunk_len = r.u32()? as usize;
        if &id != b"MTrk" {
            // alien chunk: skip it per the SMF spec
            r.skip(chunk_len).map_err(|_| ParseError::Truncated {
                needed: chunk_len - (bytes.len() - chunk_offset - 8),
                offset: chunk_offset,
            })?;
            continue;
        }
        r.need(chunk_len)?;
        let track_end = r.pos + chunk_len;
        let track = parse_track(&mut r, track_end, &mut score.tempo_map)?;
        if !track.notes.is_empty() {
            score.tracks.push(track);
        }
        r.pos = track_end;
        parsed += 1;
    }

    score.tempo_map.sort_by_key(|t| t.tick);
    Ok(score)
}

fn parse_track(
    r: &mut Reader<'_>,
    track_end: usize,
    tempo_map: &mut Vec<TempoEvent>,
) -> Result<Track, ParseError> {
    let mut state = TrackParser::new();
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;

    while r.pos < track_end {
        tick += r.vlq()?;

        let status_offset = r.pos;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            // data byte: reuse running status, re-consume the byte below
            r.pos -= 1;
            running_status.ok_or(ParseError::MissingStatus {
                byte: first,
                offset: status_offset,
            })?
        };

        match status {
            0x80..=0xEF => {
                running_status = Some(status);
                let channel = status & 0x0F;
                match status & 0xF0 {
                    0x80 => {
                        let pitch = r.data_byte()?;
                        let _release = r.data_byte()?;
                        state.close(channel, pitch, tick);
                    }
                    0x90 => {
                        let pitch = r.data_byte()?;
                        let velocity = r.data_byte()?;
                        if velocity == 0 {
                            // note-on with velocity 0 is a note-off
                            state.close(channel, pitch, tick);
                        } else {
                            state.note_on(channel, pitch, velocity, tick);
                        }
                    }
                    0xA0 | 0xB0 | 0xE0 => {
                        r.data_byte()?;
                        r.data_byte()?;
                    }
                    0xC0 => {
                        let program = r.data_byte()?;
                        state.programs[usize::from(channel)] = program;
                    }
                    0xD0 => {
                        r.data_byte()?;
                    }
                    _ => unreachable!(),
                }
            }
            0xF0 | 0xF7 => {
                // SysEx: length-prefixed payload, cancels running status
                running_status = None;
                let len = r.vlq()? as usize;
                r.skip(len)?;
            }
            0xFF => {
                running_status = None;
                let meta_type = r.u8()?;
                let len = r.vlq()? as usize;
                match meta_type {
                    0x2F => {
                        r.skip(len)?;
                        return state.finish(r.pos);
                    }
                    0x51 if len == 3 => {
                        r.need(3)?;
                        let d = &r.bytes[r.pos..r.pos + 3];
                        let micros = (u32::from(d[0]) << 16) | (u32::from(d[1]) << 8) | u32::from(d[2]);
                        tempo_map.push(TempoEvent {
                            tick,
                            micros_per_beat: micros,
                        });
                        r.skip(3)?;
                    }
                    _ => {
                        // unknown meta events are ignored
                        r.skip(len)?;
                    }
                }
            }
            _ => {
                return Err(ParseError::UnexpectedStatus {
                    byte: status,
                    offset: status_offset,
                });
            }
        }
    }

    // chunk ended without an end-of-track meta; accept what we have
    state.finish(r.pos)
}

fn push_vlq(out: &mut Vec<u8>, value: u64) -> Result<(), WriteError> {
    if value > VLQ_MAX {
        return Err(WriteError::TickOverflow { value });
    }
    let mut buf = [0u8; 4];
    let mut i = 3;
    let mut v = value;
    buf[i] = (v & 0x7F) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = ((v & 0x7F) as u8) | 0x80;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
    Ok(())
}

fn check_note(note: &RawNote) -> Result<(), WriteError> {
    let ok = note.pitch <= 127
        && (1..=127).contains(&note.velocity)
        && note.program <= 127
        && note.duration_tick >= 1;
    if ok {
        Ok(())
    } else {
        Err(WriteError::InvalidNote(*note))
    }
}

/// Channel a track's pitched notes go on: cycle through 0..16 skipping the
/// drum channel, so multi-track output stays per-channel separable.
fn melodic_channel(track_index: usize) -> u8 {
    let c = (track_index % 15) as u8;
    if c >= DRUM_CHANNEL {
        c + 1
    } else {
        c
    }
}

/// Serialize a [`Score`] as SMF format 1.
///
/// Track 0 carries the tempo map; each `Score` track becomes one MTrk chunk
/// with drums on channel 9 and pitched notes on a per-track channel, with
/// program changes emitted whenever the upcoming note needs one.
pub fn write_midi(score: &Score) -> Result<Vec<u8>, WriteError> {
    if score.ticks_per_beat == 0 || score.ticks_per_beat > 0x7FFF {
        return Err(WriteError::BadDivision(score.ticks_per_beat));
    }
    let ntracks = score.tracks.len() + 1;
    let ntracks_u16 = u16::try_from(ntracks).map_err(|_| WriteError::TooManyTracks(ntracks))?;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ntracks_u16.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_beat.to_be_bytes());

    // conductor track: tempo map only
    let mut tempo_events = score.tempo_map.clone();
    tempo_events.sort_by_key(|t| t.tick);
    let mut chunk = Vec::new();
    let mut last_tick = 0u64;
    for ev in &tempo_events {
        push_vlq(&mut chunk, ev.tick.saturating_sub(last_tick))?;
        last_tick = ev.tick.max(last_tick);
        chunk.extend_from_slice(&[0xFF, 0x51, 0x03]);
        chunk.extend_from_slice(&ev.micros_per_beat.to_be_bytes()[1..4]);
    }
    finish_chunk(&mut out, &mut chunk);

    for (track_index, track) in score.tracks.iter().enumerate() {
        write_track(&mut out, track, melodic_channel(track_index))?;
    }
    Ok(out)
}

enum TrackEventKind {
    NoteOff { channel: u8, pitch: u8 },
    NoteOn { channel: u8, note: RawNote },
}

fn write_track(out: &mut Vec<u8>, track: &Track, melodic: u8) -> Result<(), WriteError> {
    let mut events: Vec<(u64, u8, TrackEventKind)> = Vec::with_capacity(track.notes.len() * 2);
    for note in &track.notes {
        check_note(note)?;
        let channel = if note.is_drum { DRUM_CHANNEL } else { melodic };
        let off_tick = note
            .onset_tick
            .checked_add(note.duration_tick)
            .ok_or(WriteError::TickOverflow { value: u64::MAX })?;
        // note-offs sort before note-ons at the same tick so adjacent
        // same-pitch notes re-parse with their original boundaries
        events.push((
            off_tick,
            0,
            TrackEventKind::NoteOff {
                channel,
                pitch: note.pitch,
            },
        ));
        events.push((note.onset_tick, 1, TrackEventKind::NoteOn { channel, note: *note }));
    }
    events.sort_by_key(|(tick, order, _)| (*tick, *order));

    let mut chunk = Vec::new();
    let mut last_tick = 0u64;
    let mut channel_program: [Option<u8>; 16] = [None; 16];
    for (tick, _, kind) in events {
        match kind {
            TrackEventKind::NoteOff { channel, pitch } => {
                push_vlq(&mut chunk, tick - last_tick)?;
                chunk.extend_from_slice(&[0x80 | channel, pitch, 0]);
            }
            TrackEventKind::NoteOn { channel, note } => {
                let ch = usize::from(channel);
                if channel_program[ch] != Some(note.program) {
                    push_vlq(&mut chunk, tick - last_tick)?;
                    chunk.extend_from_slice(&[0xC0 | channel, note.program]);
                    channel_program[ch] = Some(note.program);
                    push_vlq(&mut chunk, 0)?;
                } else {
                    push_vlq(&mut chunk, tick - last_tick)?;
                }
                chunk.extend_from_slice(&[0x90 | channel, note.pitch, note.velocity]);
            }
        }
        last_tick = tick;
    }
    finish_chunk(out, &mut chunk);
    Ok(())
}

fn finish_chunk(out: &mut Vec<u8>, chunk: &mut Vec<u8>) {
    // end-of-track meta
    chunk.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
    out.append(chunk);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_note_file() -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes()); // format 0
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, // on at 0
            0x83, 0x60, 0x80, 60, 0, // off at 480 (0x1E0 as VLQ = 83 60)
            0x00, 0xFF, 0x2F, 0x00,
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        v
    }

    #[test]
    fn parses_single_note() {
        let score = parse_midi(&single_note_file()).unwrap();
        assert_eq!(score.ticks_per_beat, 480);
        assert_eq!(score.note_count(), 1);
        let note = score.notes().next().unwrap();
        assert_eq!(
            *note,
            RawNote {
                pitch: 60,
                onset_tick: 0,
                duration_tick: 480,
                velocity: 100,
                program: 0,
                is_drum: false,
            }
        );
    }

    #[test]
    fn empty_track_yields_empty_score() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&96u16.to_be_bytes());
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&4u32.to_be_bytes());
        v.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let score = parse_midi(&v).unwrap();
        assert_eq!(score.note_count(), 0);
        assert!(score.tracks.is_empty());
    }

    #[test]
    fn rejects_bad_header_length() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&7u32.to_be_bytes());
        v.extend_from_slice(&[0; 7]);
        match parse_midi(&v) {
            Err(ParseError::BadHeaderLength { len: 7, offset: 4 }) => {}
            other => panic!("expected BadHeaderLength, got {other:?}"),
        }
    }

    #[test]
    fn rejects_format_2() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&2u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        assert!(matches!(
            parse_midi(&v),
            Err(ParseError::UnsupportedFormat { format: 2, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let v = single_note_file();
        let cut = &v[..v.len() - 6];
        assert!(matches!(parse_midi(cut), Err(ParseError::Truncated { .. })));
    }

    #[test]
    fn velocity_zero_note_on_is_note_off() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, //
            0x60, 60, 0, // running status, vel 0 => off at 96
            0x00, 0xFF, 0x2F, 0x00,
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        let score = parse_midi(&v).unwrap();
        let note = score.notes().next().unwrap();
        assert_eq!(note.duration_tick, 96);
    }

    #[test]
    fn running_status_after_meta_is_an_error() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, //
            0x00, 0xFF, 0x01, 0x00, // text meta cancels running status
            0x00, 60, 0, // data byte with no status
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        assert!(matches!(
            parse_midi(&v),
            Err(ParseError::MissingStatus { .. })
        ));
    }

    #[test]
    fn unpaired_note_on_is_an_error() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[0x00, 0x90, 72, 100, 0x00, 0xFF, 0x2F, 0x00];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        assert!(matches!(
            parse_midi(&v),
            Err(ParseError::UnpairedNoteOn { pitch: 72, .. })
        ));
    }

    #[test]
    fn overlapping_same_pitch_last_on_wins() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, // on at 0
            0x20, 60, 90, // second on at 32: closes the first
            0x20, 0x80, 60, 0, // off at 64: closes the second
            0x00, 0xFF, 0x2F, 0x00,
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        let score = parse_midi(&v).unwrap();
        let notes = score.note_set();
        assert_eq!(notes.len(), 2);
        assert_eq!(notes[0].onset_tick, 0);
        assert_eq!(notes[0].duration_tick, 32);
        assert_eq!(notes[1].onset_tick, 32);
        assert_eq!(notes[1].duration_tick, 32);
        assert_eq!(notes[1].velocity, 90);
    }

    #[test]
    fn program_change_applies_at_note_on() {
        let mut v = Vec::new();
        v.extend_from_slice(b"MThd");
        v.extend_from_slice(&6u32.to_be_bytes());
        v.extend_from_slice(&0u16.to_be_bytes());
        v.extend_from_slice(&1u16.to_be_bytes());
        v.extend_from_slice(&480u16.to_be_bytes());
        let track: &[u8] = &[
            0x00, 0xC0, 56, // brass program
            0x00, 0x90, 60, 100, //
            0x10, 0x80, 60, 0, //
            0x00, 0xFF, 0x2F, 0x00,
        ];
        v.extend_from_slice(b"MTrk");
        v.extend_from_slice(&(track.len() as u32).to_be_bytes());
        v.extend_from_slice(track);
        let score = parse_midi(&v).unwrap();
        assert_eq!(score.notes().next().unwrap().program, 56);
    }

    #[test]
    fn write_empty_score_roundtrips() {
        let score = Score::new(480);
        let bytes = write_midi(&score).unwrap();
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.note_count(), 0);
        assert_eq!(back.ticks_per_beat, 480);
    }

    #[test]
    fn write_one_note_roundtrips_exactly() {
        let mut score = Score::new(480);
        score.tracks.push(Track {
            notes: vec![RawNote {
                pitch: 61,
                onset_tick: 7,
                duration_tick: 93,
                velocity: 55,
                program: 40,
                is_drum: false,
            }],
        });
        score.tempo_map.push(TempoEvent {
            tick: 0,
            micros_per_beat: 500_000,
        });
        let bytes = write_midi(&score).unwrap();
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.note_set(), score.note_set());
        assert_eq!(back.tempo_map, score.tempo_map);
    }

    #[test]
    fn drum_flag_survives_roundtrip() {
        let mut score = Score::new(96);
        score.tracks.push(Track {
            notes: vec![
                RawNote {
                    pitch: 35,
                    onset_tick: 0,
                    duration_tick: 10,
                    velocity: 99,
                    program: 0,
                    is_drum: true,
                },
                RawNote {
                    pitch: 35,
                    onset_tick: 20,
                    duration_tick: 10,
                    velocity: 99,
                    program: 17,
                    is_drum: false,
                },
            ],
        });
        let bytes = write_midi(&score).unwrap();
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.note_set().len(), 2);
        assert_eq!(
            back.note_set().iter().filter(|n| n.is_drum).count(),
            1,
            "exactly one drum note"
        );
    }

    #[test]
    fn tick_overflow_is_a_write_error() {
        let mut score = Score::new(480);
        score.tracks.push(Track {
            notes: vec![RawNote {
                pitch: 60,
                onset_tick: VLQ_MAX + 1,
                duration_tick: 1,
                velocity: 64,
                program: 0,
                is_drum: false,
            }],
        });
        assert!(matches!(
            write_midi(&score),
            Err(WriteError::TickOverflow { .. })
        ));
    }

    #[test]
    fn adjacent_same_pitch_notes_roundtrip() {
        // off and on share a tick; off must be written first
        let mut score = Score::new(480);
        score.tracks.push(Track {
            notes: vec![
                RawNote {
                    pitch: 64,
                    onset_tick: 0,
                    duration_tick: 120,
                    velocity: 80,
                    program: 5,
                    is_drum: false,
                },
                RawNote {
                    pitch: 64,
                    onset_tick: 120,
                    duration_tick: 60,
                    velocity: 70,
                    program: 5,
                    is_drum: false,
                },
            ],
        });
        let bytes = write_midi(&score).unwrap();
        let back = parse_midi(&bytes).unwrap();
        assert_eq!(back.note_set(), score.note_set());
    }
}
