//! Score-to-note-array conversion on a fixed time grid.
//!
//! A [`NoteArray`] is the intermediate between parsed MIDI and roll images:
//! every sounding note becomes one cell per grid column it covers, so a cell
//! maps 1:1 onto a roll pixel. Instruments collapse to five families, which
//! later pick the pixel chroma.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::midi::Score;

/// The five instrument families. Declaration order is the tie-break order
/// used everywhere a collision must pick one class deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstrumentClass {
    Piano,
    Percussion,
    Woodwind,
    Strings,
    Brass,
}

impl InstrumentClass {
    pub const ALL: [InstrumentClass; 5] = [
        InstrumentClass::Piano,
        InstrumentClass::Percussion,
        InstrumentClass::Woodwind,
        InstrumentClass::Strings,
        InstrumentClass::Brass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstrumentClass::Piano => "piano",
            InstrumentClass::Percussion => "percussion",
            InstrumentClass::Woodwind => "woodwind",
            InstrumentClass::Strings => "strings",
            InstrumentClass::Brass => "brass",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Position in [`Self::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Total map from General MIDI program number to instrument family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    by_program: [InstrumentClass; 128],
}

impl Default for ClassMap {
    fn default() -> Self {
        use InstrumentClass::*;
        // (first program, last program, family)
        const RANGES: [(u8, u8, InstrumentClass); 11] = [
            (0, 7, Piano),        // acoustic + electric pianos
            (8, 15, Percussion),  // chromatic percussion
            (16, 23, Piano),      // organs and sustained keyboards
            (24, 39, Strings),    // guitars and basses (plucked strings)
            (40, 55, Strings),    // orchestral strings and ensemble
            (56, 63, Brass),
            (64, 79, Woodwind),   // reeds and pipes
            (80, 95, Woodwind),   // leads/pads to the nearest sustained family
            (96, 111, Strings),   // FX and ethnic plucked
            (112, 119, Percussion),
            (120, 127, Percussion), // sound effects
        ];
        let mut by_program = [Piano; 128];
        for (lo, hi, class) in RANGES {
            for p in lo..=hi {
                by_program[usize::from(p)] = class;
            }
        }
        ClassMap { by_program }
    }
}

impl ClassMap {
    /// Class for a note: the drum-channel flag overrides the program table.
    pub fn classify(&self, program: u8, is_drum: bool) -> InstrumentClass {
        if is_drum {
            InstrumentClass::Percussion
        } else {
            self.by_program[usize::from(program & 0x7F)]
        }
    }

    /// Override ranges in the default map from a spec like
    /// `"0-7:piano,56-63:brass"`. Unlisted programs keep their defaults.
    pub fn from_spec(spec: &str) -> Result<Self, NotesError> {
        let mut map = ClassMap::default();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (range, name) = item
                .split_once(':')
                .ok_or_else(|| NotesError::BadClassSpec(item.to_string()))?;
            let class = InstrumentClass::from_name(name.trim())
                .ok_or_else(|| NotesError::BadClassSpec(item.to_string()))?;
            let (lo, hi) = match range.trim().split_once('-') {
                Some((a, b)) => (
                    a.trim().parse::<u8>().map_err(|_| NotesError::BadClassSpec(item.to_string()))?,
                    b.trim().parse::<u8>().map_err(|_| NotesError::BadClassSpec(item.to_string()))?,
                ),
                None => {
                    let p = range
                        .trim()
                        .parse::<u8>()
                        .map_err(|_| NotesError::BadClassSpec(item.to_string()))?;
                    (p, p)
                }
            };
            if lo > hi || hi > 127 {
                return Err(NotesError::BadClassSpec(item.to_string()));
            }
            for p in lo..=hi {
                map.by_program[usize::from(p)] = class;
            }
        }
        Ok(map)
    }
}

/// Map a program/drum-flag pair to its family with the default table.
pub fn classify_instrument(program: u8, is_drum: bool) -> InstrumentClass {
    ClassMap::default().classify(program, is_drum)
}

/// One grid cell: a note covering one pixel column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoteCell {
    pub column: u64,
    pub pitch: u8,
    /// 1..=127
    pub velocity: u8,
    pub instrument_class: InstrumentClass,
}

/// Grid-quantized notes plus the grid metadata needed to invert them.
///
/// Invariants kept by every constructor in this crate: cells sorted by
/// `(column, pitch, class)` with no duplicate `(column, pitch, class)`
/// triples (the higher velocity wins a merge).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteArray {
    pub cells: Vec<NoteCell>,
    pub ticks_per_beat: u16,
    /// Ticks covered by one pixel column, >= 1.
    pub grid_ticks: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NotesError {
    #[error("bad instrument-map entry {0:?}, expected `lo-hi:class`")]
    BadClassSpec(String),
    #[error("bad note-array header {0:?}, expected `tpb=<n> grid=<n>`")]
    BadHeader(String),
    #[error("bad note-array cell on line {line}: {text:?}")]
    BadCell { line: usize, text: String },
}

impl NoteArray {
    pub fn new(ticks_per_beat: u16, grid_ticks: u64) -> Self {
        NoteArray {
            cells: Vec::new(),
            ticks_per_beat,
            grid_ticks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Largest occupied column, if any cell exists.
    pub fn max_column(&self) -> Option<u64> {
        self.cells.iter().map(|c| c.column).max()
    }

    /// Sort by `(column, pitch, class)` and collapse duplicate triples,
    /// keeping the highest velocity.
    pub fn normalize(&mut self) {
        let mut merged: BTreeMap<(u64, u8, usize), u8> = BTreeMap::new();
        for cell in &self.cells {
            let key = (cell.column, cell.pitch, cell.instrument_class.index());
            let v = merged.entry(key).or_insert(0);
            *v = (*v).max(cell.velocity);
        }
        self.cells = merged
            .into_iter()
            .map(|((column, pitch, class_idx), velocity)| NoteCell {
                column,
                pitch,
                velocity,
                instrument_class: InstrumentClass::ALL[class_idx],
            })
            .collect();
    }

    /// Text serialization: `tpb=<n> grid=<n>` header, then one
    /// `column,pitch,velocity,class` line per cell.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tpb={} grid={}", self.ticks_per_beat, self.grid_ticks);
        for cell in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                cell.column,
                cell.pitch,
                cell.velocity,
                cell.instrument_class.name()
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NotesError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| NotesError::BadHeader(String::new()))?;
        let bad_header = || NotesError::BadHeader(header.to_string());
        let mut parts = header.split_whitespace();
        let tpb = parts
            .next()
            .and_then(|s| s.strip_prefix("tpb="))
            .and_then(|s| s.parse::<u16>().ok())
            .ok_or_else(bad_header)?;
        let grid = parts
            .next()
            .and_then(|s| s.strip_prefix("grid="))
            .and_then(|s| s.parse::<u64>().ok())
            .filter(|&g| g >= 1)
            .ok_or_else(bad_header)?;

        let mut array = NoteArray::new(tpb, grid);
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || NotesError::BadCell {
                line: i + 1,
                text: line.to_string(),
            };
            let mut fields = line.split(',');
            let column = fields.next().and_then(|s| s.parse::<u64>().ok()).ok_or_else(bad)?;
            let pitch = fields
                .next()
                .and_then(|s| s.parse::<u8>().ok())
                .filter(|&p| p <= 127)
                .ok_or_else(bad)?;
            let velocity = fields
                .next()
                .and_then(|s| s.parse::<u8>().ok())
                .filter(|&v| (1..=127).contains(&v))
                .ok_or_else(bad)?;
            let class = fields
                .next()
                .and_then(InstrumentClass::from_name)
                .ok_or_else(bad)?;
            if fields.next().is_some() {
                return Err(bad());
            }
            array.cells.push(NoteCell {
                column,
                pitch,
                velocity,
                instrument_class: class,
            });
        }
        array.normalize();
        Ok(array)
    }
}

/// Quantize a score onto the grid with the default instrument table.
///
/// A note of duration `d` becomes `ceil(d / grid_ticks)` consecutive cells
/// starting at column `onset_tick / grid_ticks`, all sharing the note's
/// pitch, velocity and family.
pub fn score_to_note_array(score: &Score, grid_ticks: u64) -> NoteArray {
    score_to_note_array_with(score, grid_ticks, &ClassMap::default())
}

pub fn score_to_note_array_with(score: &Score, grid_ticks: u64, map: &ClassMap) -> NoteArray {
    assert!(grid_ticks >= 1, "grid_ticks must be >= 1");
    let mut array = NoteArray::new(score.ticks_per_beat, grid_ticks);
    for note in score.notes() {
        let start = note.onset_tick / grid_ticks;
        let span = note.duration_tick.div_ceil(grid_ticks);
        let class = map.classify(note.program, note.is_drum);
        for column in start..start + span {
            array.cells.push(NoteCell {
                column,
                pitch: note.pitch,
                velocity: note.velocity,
                instrument_class: class,
            });
        }
    }
    array.normalize();
    array
}

/// Keep a score only when at most 80% of its notes sit at velocity 127.
///
/// The comparison is exact integer arithmetic (`5 * count <= 4 * total`), so
/// the boundary case "exactly 80%" is retained. Scores without notes drop.
pub fn velocity_filter_keeps(score: &Score) -> bool {
    let total = score.note_count();
    if total == 0 {
        return false;
    }
    let at_max = score.notes().filter(|n| n.velocity == 127).count();
    5 * at_max <= 4 * total
}

/// Drop scores dominated by max-velocity notes; the output is a subsequence
/// of the input.
pub fn filter_abnormal_velocity(scores: Vec<Score>) -> Vec<Score> {
    scores.into_iter().filter(velocity_filter_keeps).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{RawNote, Track};

    fn score_with(notes: Vec<RawNote>) -> Score {
        let mut s = Score::new(480);
        s.tracks.push(Track { notes });
        s
    }

    fn note(pitch: u8, onset: u64, dur: u64, vel: u8, program: u8) -> RawNote {
        RawNote {
            pitch,
            onset_tick: onset,
            duration_tick: dur,
            velocity: vel,
            program,
            is_drum: false,
        }
    }

    #[test]
    fn sustained_note_splits_into_columns() {
        let score = score_with(vec![note(60, 0, 480, 100, 0)]);
        let array = score_to_note_array(&score, 120);
        assert_eq!(array.cells.len(), 4);
        for (i, cell) in array.cells.iter().enumerate() {
            assert_eq!(cell.column, i as u64);
            assert_eq!(cell.pitch, 60);
            assert_eq!(cell.velocity, 100);
            assert_eq!(cell.instrument_class, InstrumentClass::Piano);
        }
    }

    #[test]
    fn one_tick_note_still_gets_a_cell() {
        let score = score_with(vec![note(60, 0, 1, 100, 0)]);
        let array = score_to_note_array(&score, 120);
        assert_eq!(array.cells.len(), 1);
    }

    #[test]
    fn onset_rounds_down_to_its_column() {
        let score = score_with(vec![note(60, 130, 100, 100, 0)]);
        let array = score_to_note_array(&score, 120);
        assert_eq!(array.cells[0].column, 1);
    }

    #[test]
    fn duplicate_cells_keep_highest_velocity() {
        let score = score_with(vec![note(60, 0, 120, 40, 0), note(60, 0, 120, 90, 3)]);
        let array = score_to_note_array(&score, 120);
        assert_eq!(array.cells.len(), 1);
        assert_eq!(array.cells[0].velocity, 90);
    }

    #[test]
    fn gm_table_examples() {
        assert_eq!(classify_instrument(0, false), InstrumentClass::Piano);
        assert_eq!(classify_instrument(56, false), InstrumentClass::Brass);
        assert_eq!(classify_instrument(73, false), InstrumentClass::Woodwind);
        assert_eq!(classify_instrument(48, false), InstrumentClass::Strings);
        assert_eq!(classify_instrument(9, false), InstrumentClass::Percussion);
        // the drum channel wins over any program
        for program in [0u8, 40, 73, 127] {
            assert_eq!(classify_instrument(program, true), InstrumentClass::Percussion);
        }
    }

    #[test]
    fn all_five_classes_reachable_and_total() {
        let map = ClassMap::default();
        let mut seen = [false; 5];
        for program in 0..=127u8 {
            seen[map.classify(program, false).index()] = true;
        }
        assert_eq!(seen, [true; 5]);
    }

    #[test]
    fn class_map_override() {
        let map = ClassMap::from_spec("0-127:brass, 10:piano").unwrap();
        assert_eq!(map.classify(5, false), InstrumentClass::Brass);
        assert_eq!(map.classify(10, false), InstrumentClass::Piano);
        assert!(ClassMap::from_spec("7-3:brass").is_err());
        assert!(ClassMap::from_spec("0-7:kazoo").is_err());
    }

    #[test]
    fn velocity_filter_examples() {
        // 9 of 10 at max: dropped
        let mut notes: Vec<RawNote> = (0..9).map(|i| note(60 + i, i as u64 * 10, 5, 127, 0)).collect();
        notes.push(note(50, 100, 5, 64, 0));
        assert!(!velocity_filter_keeps(&score_with(notes)));

        // all at 64: kept
        let all64 = score_with((0..10).map(|i| note(60, i * 10, 5, 64, 0)).collect());
        assert!(velocity_filter_keeps(&all64));

        // exactly 80%: kept (the rule is strictly "more than 80%")
        let mut notes: Vec<RawNote> = (0..8).map(|i| note(60 + i, i as u64 * 10, 5, 127, 0)).collect();
        notes.extend([note(40, 100, 5, 64, 0), note(41, 110, 5, 64, 0)]);
        assert!(velocity_filter_keeps(&score_with(notes)));

        // 80% plus one note: dropped
        let mut notes: Vec<RawNote> = (0..9).map(|i| note(60 + i, i as u64 * 10, 5, 127, 0)).collect();
        notes.extend([note(40, 100, 5, 64, 0), note(41, 110, 5, 64, 0)]);
        assert!(!velocity_filter_keeps(&score_with(notes)));

        // empty scores drop
        assert!(!velocity_filter_keeps(&Score::new(480)));
    }

    #[test]
    fn filter_returns_subsequence() {
        let keep = score_with(vec![note(60, 0, 10, 64, 0)]);
        let drop = score_with(vec![note(60, 0, 10, 127, 0)]);
        let out = filter_abnormal_velocity(vec![keep.clone(), drop, keep.clone()]);
        assert_eq!(out, vec![keep.clone(), keep]);
    }

    #[test]
    fn text_roundtrip() {
        let score = score_with(vec![note(60, 0, 480, 100, 0), note(35, 240, 240, 77, 60)]);
        let array = score_to_note_array(&score, 120);
        let text = array.to_text();
        assert!(text.starts_with("tpb=480 grid=120\n"));
        let back = NoteArray::from_text(&text).unwrap();
        assert_eq!(back, array);
    }

    #[test]
    fn text_rejects_garbage() {
        assert!(matches!(
            NoteArray::from_text("nope"),
            Err(NotesError::BadHeader(_))
        ));
        let bad_cell = "tpb=480 grid=120\n1,60,violin\n";
        assert!(matches!(
            NoteArray::from_text(bad_cell),
            Err(NotesError::BadCell { line: 2, .. })
        ));
        let bad_velocity = "tpb=480 grid=120\n1,60,0,piano\n";
        assert!(NoteArray::from_text(bad_velocity).is_err());
    }
}
