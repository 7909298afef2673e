//! Seeded generators for tests and the acceptance suite. Not part of the
//! public API surface; shapes here mirror what the real pipeline produces.

use rand::prelude::IndexedRandom;
use rand::Rng;

use crate::midi::{RawNote, Score, TempoEvent, Track};
use crate::notes::{InstrumentClass, NoteArray, NoteCell};
use crate::roll::{luma_to_velocity, velocity_to_luma, PianoRoll, YuvPixel, ROLL_HEIGHT};

/// A random score that satisfies every writer precondition: positive
/// durations, velocities 1..=127, and no overlapping same-pitch notes within
/// a track (SMF cannot represent those unambiguously on one channel).
pub fn random_score<R: Rng + ?Sized>(rng: &mut R, max_notes_per_track: usize) -> Score {
    let mut score = Score::new(*[96u16, 192, 480, 960].choose(rng).unwrap());
    let track_count = rng.random_range(1..=3);
    for _ in 0..track_count {
        let mut notes = Vec::new();
        for _ in 0..rng.random_range(0..=max_notes_per_track) {
            notes.push(RawNote {
                pitch: rng.random_range(0..=127),
                onset_tick: rng.random_range(0..20_000),
                duration_tick: rng.random_range(1..=2_000),
                velocity: rng.random_range(1..=127),
                program: rng.random_range(0..=127),
                is_drum: rng.random_ratio(1, 10),
            });
        }
        resolve_same_pitch_overlaps(&mut notes);
        if !notes.is_empty() {
            score.tracks.push(Track { notes });
        }
    }
    for _ in 0..rng.random_range(0..3) {
        score.tempo_map.push(TempoEvent {
            tick: rng.random_range(0..20_000),
            micros_per_beat: rng.random_range(200_000..1_200_000),
        });
    }
    score.tempo_map.sort_by_key(|t| t.tick);
    score
}

/// Clip or drop notes so that equal-(pitch, drum) notes never overlap.
fn resolve_same_pitch_overlaps(notes: &mut Vec<RawNote>) {
    notes.sort_by_key(|n| (n.pitch, n.is_drum, n.onset_tick, n.duration_tick));
    let mut kept: Vec<RawNote> = Vec::with_capacity(notes.len());
    for note in notes.iter().copied() {
        if let Some(prev) = kept.last_mut() {
            if prev.pitch == note.pitch && prev.is_drum == note.is_drum {
                let prev_end = prev.onset_tick + prev.duration_tick;
                if note.onset_tick == prev.onset_tick {
                    // simultaneous start: keep the later-sorted one
                    *prev = note;
                    continue;
                }
                if prev_end > note.onset_tick {
                    prev.duration_tick = note.onset_tick - prev.onset_tick;
                }
            }
        }
        kept.push(note);
    }
    kept.sort_by_key(|n| n.onset_tick);
    *notes = kept;
}

/// A random note array. With `collision_free` set, no two cells share a
/// `(column, pitch)` pixel, so roll rendering never merges anything.
pub fn random_note_array<R: Rng + ?Sized>(
    rng: &mut R,
    max_cells: usize,
    max_column: u64,
    collision_free: bool,
) -> NoteArray {
    let mut array = NoteArray::new(480, 120);
    let mut used = std::collections::HashSet::new();
    for _ in 0..rng.random_range(0..=max_cells) {
        let column = rng.random_range(0..=max_column);
        let pitch = rng.random_range(0..=127u8);
        if collision_free && !used.insert((column, pitch)) {
            continue;
        }
        array.cells.push(NoteCell {
            column,
            pitch,
            velocity: rng.random_range(1..=127),
            instrument_class: *InstrumentClass::ALL.choose(rng).unwrap(),
        });
    }
    array.normalize();
    array
}

/// Velocities that survive the luma quantization exactly (the image of the
/// decode map). Arrays built from these round-trip with full equality.
pub fn stable_velocities() -> Vec<u8> {
    let mut out: Vec<u8> = (1..=127)
        .filter_map(|v| {
            let y = velocity_to_luma(v).ok()?;
            (luma_to_velocity(y) == Some(v)).then_some(v)
        })
        .collect();
    out.dedup();
    out
}

/// Simple deterministic training roll: a handful of sustained notes across
/// the five families, repeated so the pattern fills the width.
pub fn fixture_roll(width: usize) -> PianoRoll {
    let mut roll = PianoRoll::new(width).expect("fixture width is a multiple of 16");
    let palette = crate::roll::Palette::default();
    let voices = [
        (60u8, InstrumentClass::Piano, 100u8),
        (64, InstrumentClass::Strings, 80),
        (67, InstrumentClass::Woodwind, 90),
        (48, InstrumentClass::Brass, 70),
        (36, InstrumentClass::Percussion, 110),
    ];
    for (i, &(pitch, class, velocity)) in voices.iter().enumerate() {
        let (u, v) = palette.chroma(class);
        let y = velocity_to_luma(velocity).unwrap();
        let phase = i * 3;
        for col in 0..width {
            // 8-column notes with 4-column rests, staggered per voice
            if (col + phase) % 12 < 8 {
                roll.set(pitch, col, YuvPixel { y, u, v });
            }
        }
    }
    roll
}

/// `count` copies of the fixture pattern, the desk-scale training corpus.
pub fn fixture_rolls(count: usize, width: usize) -> Vec<PianoRoll> {
    (0..count).map(|_| fixture_roll(width)).collect()
}

/// Sanity: the fixture stays inside roll invariants.
pub fn assert_roll_invariants(roll: &PianoRoll) {
    for pitch in 0..ROLL_HEIGHT as u8 {
        for col in 0..roll.width() {
            let px = roll.get(pitch, col);
            if px != YuvPixel::BACKGROUND {
                assert!((50..=100).contains(&px.y));
            }
        }
    }
}
