//! Turn sampled roll images into thinned, valid MIDI.
//!
//! Diffusion output tends to over-populate time windows; the density filter
//! caps simultaneous cells per window before pixel runs are merged back into
//! notes and written as a five-track SMF (one track per instrument family).

use thiserror::Error;

use crate::midi::{self, RawNote, Score, Track, WriteError};
use crate::notes::{InstrumentClass, NoteArray, NoteCell};
use crate::roll::{self, Palette, RollError, DEFAULT_LUMA_THRESHOLD};

/// GM program each family decodes to. Percussion decodes onto the drum
/// channel instead of a melodic program.
pub fn class_program(class: InstrumentClass) -> (u8, bool) {
    match class {
        InstrumentClass::Piano => (0, false),      // acoustic grand
        InstrumentClass::Percussion => (0, true),  // channel-10 kit
        InstrumentClass::Woodwind => (73, false),  // flute
        InstrumentClass::Strings => (48, false),   // string ensemble
        InstrumentClass::Brass => (61, false),     // brass section
    }
}

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error(transparent)]
    Roll(#[from] RollError),
    #[error(transparent)]
    MidiWrite(#[from] WriteError),
}

/// Cap the number of cells in every disjoint `window_columns`-wide window.
///
/// Removal order inside an over-full window: lowest velocity first, ties
/// broken by higher pitch, then later column, then later class variant.
/// Survivors keep their original values, so the filter is idempotent and its
/// output is always a subset of its input.
pub fn density_filter(
    array: &NoteArray,
    window_columns: u64,
    max_per_window: usize,
) -> NoteArray {
    assert!(window_columns >= 1, "window_columns must be >= 1");
    assert!(max_per_window >= 1, "max_per_window must be >= 1");

    let mut keep = vec![true; array.cells.len()];
    let mut window_start = 0usize;
    while window_start < array.cells.len() {
        let window_id = array.cells[window_start].column / window_columns;
        let mut window_end = window_start;
        while window_end < array.cells.len()
            && array.cells[window_end].column / window_columns == window_id
        {
            window_end += 1;
        }
        let count = window_end - window_start;
        if count > max_per_window {
            let mut order: Vec<usize> = (window_start..window_end).collect();
            order.sort_by_key(|&i| {
                let c = &array.cells[i];
                (
                    c.velocity,
                    std::cmp::Reverse(c.pitch),
                    std::cmp::Reverse(c.column),
                    std::cmp::Reverse(c.instrument_class.index()),
                )
            });
            for &i in order.iter().take(count - max_per_window) {
                keep[i] = false;
            }
        }
        window_start = window_end;
    }

    let mut out = NoteArray::new(array.ticks_per_beat, array.grid_ticks);
    out.cells = array
        .cells
        .iter()
        .zip(&keep)
        .filter_map(|(c, &k)| k.then_some(*c))
        .collect();
    out
}

/// Merge maximal runs of consecutive-column cells with equal (pitch, class)
/// back into notes: duration is the run length times the grid, velocity the
/// run maximum, program/drum-flag from [`class_program`].
pub fn merge_cells_to_notes(array: &NoteArray) -> Vec<RawNote> {
    let grid = array.grid_ticks.max(1);
    let mut cells: Vec<&NoteCell> = array.cells.iter().collect();
    cells.sort_by_key(|c| (c.pitch, c.instrument_class.index(), c.column));

    let mut notes = Vec::new();
    let mut run: Option<(u64, u64, u8, &NoteCell)> = None; // (start_col, len, max_vel, head)
    for cell in cells {
        match run {
            Some((start, len, max_vel, head))
                if head.pitch == cell.pitch
                    && head.instrument_class == cell.instrument_class
                    && cell.column == start + len =>
            {
                run = Some((start, len + 1, max_vel.max(cell.velocity), head));
            }
            _ => {
                if let Some(r) = run.take() {
                    notes.push(finish_run(r, grid));
                }
                run = Some((cell.column, 1, cell.velocity, cell));
            }
        }
    }
    if let Some(r) = run {
        notes.push(finish_run(r, grid));
    }
    notes.sort_by_key(|n| (n.onset_tick, n.pitch, n.program, n.is_drum));
    notes
}

fn finish_run((start, len, max_vel, head): (u64, u64, u8, &NoteCell), grid: u64) -> RawNote {
    let (program, is_drum) = class_program(head.instrument_class);
    RawNote {
        pitch: head.pitch,
        onset_tick: start * grid,
        duration_tick: len * grid,
        velocity: max_vel,
        program,
        is_drum,
    }
}

/// Everything the PNG-to-MIDI pipeline needs besides the images.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub ticks_per_beat: u16,
    pub grid_ticks: u64,
    pub window_columns: u64,
    pub max_per_window: usize,
    pub palette: Palette,
    pub luma_threshold: u8,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            ticks_per_beat: 480,
            grid_ticks: 120,
            // one beat at sixteenth-note resolution is 4 columns; cap four
            // beats' worth of simultaneous cells
            window_columns: 16,
            max_per_window: 24,
            palette: Palette::default(),
            luma_threshold: DEFAULT_LUMA_THRESHOLD,
        }
    }
}

/// Result of decoding a batch of images into one MIDI file.
#[derive(Debug)]
pub struct DecodeOutcome {
    pub midi: Vec<u8>,
    /// Cells read off the images before thinning.
    pub cells_decoded: usize,
    /// Cells surviving the density filter.
    pub cells_kept: usize,
    pub note_count: usize,
}

/// PNG rolls -> note array -> density filter -> notes -> SMF bytes.
///
/// All-background input is not an error; it produces a valid MIDI file with
/// no notes (callers may want to warn).
pub fn decode_pipeline(
    images: &[impl AsRef<[u8]>],
    config: &DecodeConfig,
) -> Result<DecodeOutcome, PostprocessError> {
    let rolls = images
        .iter()
        .map(|bytes| roll::rgb_image_to_roll(bytes.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let array = roll::rolls_to_note_array(
        &rolls,
        config.ticks_per_beat,
        config.grid_ticks,
        &config.palette,
        config.luma_threshold,
    )?;
    let cells_decoded = array.cells.len();
    let thinned = density_filter(&array, config.window_columns, config.max_per_window);
    let cells_kept = thinned.cells.len();
    let notes = merge_cells_to_notes(&thinned);
    let score = notes_to_score(notes, config.ticks_per_beat);
    let midi = midi::write_midi(&score)?;
    Ok(DecodeOutcome {
        midi,
        cells_decoded,
        cells_kept,
        note_count: score.note_count(),
    })
}

/// Group decoded notes into one track per instrument family (empty families
/// are omitted) so the output is genuinely multi-track.
pub fn notes_to_score(notes: Vec<RawNote>, ticks_per_beat: u16) -> Score {
    let mut score = Score::new(ticks_per_beat);
    for class in InstrumentClass::ALL {
        let (program, is_drum) = class_program(class);
        let mut track_notes: Vec<RawNote> = notes
            .iter()
            .filter(|n| n.program == program && n.is_drum == is_drum)
            .copied()
            .collect();
        if track_notes.is_empty() {
            continue;
        }
        track_notes.sort_by_key(|n| (n.onset_tick, n.pitch));
        score.tracks.push(Track { notes: track_notes });
    }
    score
}
