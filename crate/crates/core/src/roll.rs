//! Color piano-roll images and their codec.
//!
//! A roll is a 128-row (pitch) by N-column (time) grid of YUV pixels. Luma
//! carries note velocity, normalized into [50, 100] so note pixels stay far
//! from the Y=0 background; chroma picks the instrument family from a
//! five-color palette. Decoding is total: any pixel with enough luma becomes
//! a note cell, classified by nearest palette chroma.
//!
//! The palette entries are chosen so that every (luma, chroma) combination a
//! note can produce stays inside the RGB gamut. That keeps the BT.601
//! conversion clamp-free and the PNG round-trip error within one code per
//! channel.

use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Rgb};
use ndarray::Array3;
use thiserror::Error;

use crate::notes::{InstrumentClass, NoteArray, NoteCell};

/// Pitch axis size; MIDI has exactly 128 pitches.
pub const ROLL_HEIGHT: usize = 128;

/// Default time-axis size of one roll image.
pub const ROLL_WIDTH: usize = 512;

/// Lowest luma of a note pixel.
pub const NOTE_LUMA_MIN: u8 = 50;

/// Highest luma of a note pixel.
pub const NOTE_LUMA_MAX: u8 = 100;

/// Pixels with luma below this decode as background. Midway between the
/// 0-luma background and the dimmest note, so either side tolerates the
/// most noise.
pub const DEFAULT_LUMA_THRESHOLD: u8 = 25;

/// Palette chroma pairs must be at least this far apart in UV space.
pub const MIN_CHROMA_SEPARATION: f64 = 40.0;

/// Hard cap on how many roll images one note array may expand to.
const MAX_ROLLS: usize = 1 << 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RollError {
    #[error("roll width {0} must be a positive multiple of 16")]
    BadWidth(usize),
    #[error("velocity {0} out of range 1..=127")]
    BadVelocity(u8),
    #[error("palette chroma pairs closer than the minimum separation {MIN_CHROMA_SEPARATION}")]
    PaletteTooClose,
    #[error("note array spans {0} rolls, beyond the {MAX_ROLLS}-roll cap")]
    TooManyRolls(u64),
    #[error("rolls have mixed widths ({0} vs {1})")]
    MixedWidths(usize, usize),
    #[error("image is {width}x{height}, expected 128 rows and a multiple-of-16 width")]
    BadImageDimensions { width: u32, height: u32 },
    #[error("image is not 8-bit RGB")]
    NotRgb8,
    #[error("image decode failed: {0}")]
    ImageDecode(String),
    #[error("image encode failed: {0}")]
    ImageEncode(String),
}

/// One pixel in YUV semantics (full-range BT.601).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct YuvPixel {
    pub y: u8,
    pub u: u8,
    pub v: u8,
}

impl YuvPixel {
    pub const BACKGROUND: YuvPixel = YuvPixel { y: 0, u: 128, v: 128 };
}

/// Instrument-family chroma assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    chroma: [(u8, u8); 5],
}

impl Default for Palette {
    fn default() -> Self {
        // Saturation is scaled back just enough that Y in [50, 100] never
        // leaves the RGB gamut (the full-saturation primaries would clamp).
        Palette {
            chroma: [
                (100, 93),  // Piano: green
                (213, 114), // Percussion: blue
                (100, 135), // Woodwind: yellow
                (142, 93),  // Strings: cyan
                (168, 176), // Brass: magenta
            ],
        }
    }
}

impl Palette {
    /// Neutral chroma of background pixels.
    pub const BACKGROUND_CHROMA: (u8, u8) = (128, 128);

    pub fn new(chroma: [(u8, u8); 5]) -> Result<Self, RollError> {
        let palette = Palette { chroma };
        palette.validate()?;
        Ok(palette)
    }

    pub fn chroma(&self, class: InstrumentClass) -> (u8, u8) {
        self.chroma[class.index()]
    }

    pub fn validate(&self) -> Result<(), RollError> {
        for i in 0..5 {
            for j in i + 1..5 {
                let (ui, vi) = self.chroma[i];
                let (uj, vj) = self.chroma[j];
                let du = f64::from(ui) - f64::from(uj);
                let dv = f64::from(vi) - f64::from(vj);
                if (du * du + dv * dv).sqrt() < MIN_CHROMA_SEPARATION {
                    return Err(RollError::PaletteTooClose);
                }
            }
        }
        Ok(())
    }

    /// Class whose chroma is nearest in UV space; ties go to the earlier
    /// enum variant.
    pub fn nearest_class(&self, u: u8, v: u8) -> InstrumentClass {
        let mut best = InstrumentClass::Piano;
        let mut best_d = u64::MAX;
        for class in InstrumentClass::ALL {
            let (cu, cv) = self.chroma(class);
            let du = i64::from(u) - i64::from(cu);
            let dv = i64::from(v) - i64::from(cv);
            let d = (du * du + dv * dv) as u64;
            if d < best_d {
                best_d = d;
                best = class;
            }
        }
        best
    }
}

/// Map velocity 1..=127 onto note luma 50..=100.
pub fn velocity_to_luma(velocity: u8) -> Result<u8, RollError> {
    if !(1..=127).contains(&velocity) {
        // 0 would be a note-off, not a note
        return Err(RollError::BadVelocity(velocity));
    }
    let y = 50.0 + 50.0 * f64::from(velocity - 1) / 126.0;
    Ok(y.round() as u8)
}

/// Inverse of [`velocity_to_luma`] with the default detection threshold.
pub fn luma_to_velocity(luma: u8) -> Option<u8> {
    luma_to_velocity_with(luma, DEFAULT_LUMA_THRESHOLD)
}

/// `None` below the threshold (background); otherwise the velocity whose
/// luma is closest, clamped into 1..=127.
pub fn luma_to_velocity_with(luma: u8, threshold: u8) -> Option<u8> {
    if luma < threshold {
        return None;
    }
    let v = 1.0 + 126.0 * (f64::from(luma) - 50.0) / 50.0;
    Some(v.round().clamp(1.0, 127.0) as u8)
}

/// A fixed-height grid of YUV pixels, indexed by (pitch, column).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PianoRoll {
    width: usize,
    /// Row-major by pitch: `pixels[pitch * width + column]`.
    pixels: Vec<YuvPixel>,
}

impl PianoRoll {
    pub fn new(width: usize) -> Result<Self, RollError> {
        if width == 0 || width % 16 != 0 {
            return Err(RollError::BadWidth(width));
        }
        Ok(PianoRoll {
            width,
            pixels: vec![YuvPixel::BACKGROUND; ROLL_HEIGHT * width],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        ROLL_HEIGHT
    }

    pub fn get(&self, pitch: u8, column: usize) -> YuvPixel {
        self.pixels[usize::from(pitch) * self.width + column]
    }

    pub fn set(&mut self, pitch: u8, column: usize, pixel: YuvPixel) {
        self.pixels[usize::from(pitch) * self.width + column] = pixel;
    }

    /// Channels-first float tensor, each byte mapped onto [-1, 1].
    pub fn to_tensor(&self) -> Array3<f32> {
        let mut t = Array3::zeros((3, ROLL_HEIGHT, self.width));
        for pitch in 0..ROLL_HEIGHT {
            for col in 0..self.width {
                let px = self.pixels[pitch * self.width + col];
                t[[0, pitch, col]] = f32::from(px.y) / 127.5 - 1.0;
                t[[1, pitch, col]] = f32::from(px.u) / 127.5 - 1.0;
                t[[2, pitch, col]] = f32::from(px.v) / 127.5 - 1.0;
            }
        }
        t
    }

    /// Inverse of [`to_tensor`](Self::to_tensor): clamp to [-1, 1] and
    /// quantize back to bytes.
    pub fn from_tensor(tensor: &Array3<f32>) -> Result<Self, RollError> {
        let (channels, height, width) = tensor.dim();
        if channels != 3 || height != ROLL_HEIGHT {
            return Err(RollError::BadImageDimensions {
                width: width as u32,
                height: height as u32,
            });
        }
        let mut roll = PianoRoll::new(width)?;
        let to_byte = |x: f32| ((f32::clamp(x, -1.0, 1.0) + 1.0) * 127.5).round() as u8;
        for pitch in 0..ROLL_HEIGHT {
            for col in 0..width {
                roll.pixels[pitch * width + col] = YuvPixel {
                    y: to_byte(tensor[[0, pitch, col]]),
                    u: to_byte(tensor[[1, pitch, col]]),
                    v: to_byte(tensor[[2, pitch, col]]),
                };
            }
        }
        Ok(roll)
    }
}

/// Render a note array into as many fixed-width rolls as it needs.
///
/// Roll `k` holds columns `[k*width, (k+1)*width)`; the last roll is padded
/// with background. When two cells land on one pixel the higher velocity
/// wins, ties going to the earlier enum variant. An empty array renders to
/// no rolls at all.
pub fn note_array_to_rolls(
    array: &NoteArray,
    width: usize,
    palette: &Palette,
) -> Result<Vec<PianoRoll>, RollError> {
    if width == 0 || width % 16 != 0 {
        return Err(RollError::BadWidth(width));
    }
    let Some(max_column) = array.max_column() else {
        return Ok(Vec::new());
    };
    let count = (max_column + 1).div_ceil(width as u64);
    if count > MAX_ROLLS as u64 {
        return Err(RollError::TooManyRolls(count));
    }

    // winner per pixel before converting to YUV
    let mut winners: Vec<Vec<Option<(u8, InstrumentClass)>>> =
        vec![vec![None; ROLL_HEIGHT * width]; count as usize];
    for cell in &array.cells {
        let roll_index = (cell.column / width as u64) as usize;
        let col = (cell.column % width as u64) as usize;
        let slot = &mut winners[roll_index][usize::from(cell.pitch) * width + col];
        let challenger = (cell.velocity, cell.instrument_class);
        let wins = match slot {
            None => true,
            Some((vel, class)) => {
                cell.velocity > *vel || (cell.velocity == *vel && cell.instrument_class < *class)
            }
        };
        if wins {
            *slot = Some(challenger);
        }
    }

    let mut rolls = Vec::with_capacity(count as usize);
    for grid in winners {
        let mut roll = PianoRoll::new(width)?;
        for (i, slot) in grid.into_iter().enumerate() {
            if let Some((velocity, class)) = slot {
                let (u, v) = palette.chroma(class);
                roll.pixels[i] = YuvPixel {
                    y: velocity_to_luma(velocity)?,
                    u,
                    v,
                };
            }
        }
        rolls.push(roll);
    }
    Ok(rolls)
}

/// Read every note pixel back out of a sequence of rolls.
///
/// Total: any pixel at or above the luma threshold becomes a cell with the
/// nearest palette class; everything else is background. Roll `k`
/// contributes columns offset by `k * width`.
pub fn rolls_to_note_array(
    rolls: &[PianoRoll],
    ticks_per_beat: u16,
    grid_ticks: u64,
    palette: &Palette,
    luma_threshold: u8,
) -> Result<NoteArray, RollError> {
    let mut array = NoteArray::new(ticks_per_beat, grid_ticks);
    let Some(first) = rolls.first() else {
        return Ok(array);
    };
    for roll in rolls {
        if roll.width != first.width {
            return Err(RollError::MixedWidths(first.width, roll.width));
        }
    }
    for (k, roll) in rolls.iter().enumerate() {
        let offset = k as u64 * roll.width as u64;
        for pitch in 0..ROLL_HEIGHT as u8 {
            for col in 0..roll.width {
                let px = roll.get(pitch, col);
                if let Some(velocity) = luma_to_velocity_with(px.y, luma_threshold) {
                    array.cells.push(NoteCell {
                        column: offset + col as u64,
                        pitch,
                        velocity,
                        instrument_class: palette.nearest_class(px.u, px.v),
                    });
                }
            }
        }
    }
    array.normalize();
    Ok(array)
}

/// Full-range BT.601 YUV -> RGB.
pub fn yuv_to_rgb(px: YuvPixel) -> [u8; 3] {
    let y = f64::from(px.y);
    let u = f64::from(px.u) - 128.0;
    let v = f64::from(px.v) - 128.0;
    let r = y + 1.402 * v;
    let g = y - 0.344136 * u - 0.714136 * v;
    let b = y + 1.772 * u;
    [quantize(r), quantize(g), quantize(b)]
}

/// Full-range BT.601 RGB -> YUV.
pub fn rgb_to_yuv(rgb: [u8; 3]) -> YuvPixel {
    let r = f64::from(rgb[0]);
    let g = f64::from(rgb[1]);
    let b = f64::from(rgb[2]);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let v = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    YuvPixel {
        y: quantize(y),
        u: quantize(u),
        v: quantize(v),
    }
}

fn quantize(x: f64) -> u8 {
    x.round().clamp(0.0, 255.0) as u8
}

/// Encode a roll as a lossless 8-bit RGB PNG. Pitch 127 is the top row.
pub fn roll_to_rgb_image(roll: &PianoRoll) -> Result<Vec<u8>, RollError> {
    let mut img = ImageBuffer::new(roll.width as u32, ROLL_HEIGHT as u32);
    for pitch in 0..ROLL_HEIGHT {
        let row = (ROLL_HEIGHT - 1 - pitch) as u32;
        for col in 0..roll.width {
            let rgb = yuv_to_rgb(roll.get(pitch as u8, col));
            img.put_pixel(col as u32, row, Rgb(rgb));
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| RollError::ImageEncode(e.to_string()))?;
    Ok(bytes.into_inner())
}

/// Decode an 8-bit RGB image of roll dimensions back into YUV pixels.
pub fn rgb_image_to_roll(bytes: &[u8]) -> Result<PianoRoll, RollError> {
    let dynamic = image::load_from_memory(bytes).map_err(|e| RollError::ImageDecode(e.to_string()))?;
    let img = match dynamic {
        image::DynamicImage::ImageRgb8(img) => img,
        _ => return Err(RollError::NotRgb8),
    };
    let (width, height) = img.dimensions();
    if height != ROLL_HEIGHT as u32 || width == 0 || width % 16 != 0 {
        return Err(RollError::BadImageDimensions { width, height });
    }
    let mut roll = PianoRoll::new(width as usize)?;
    for pitch in 0..ROLL_HEIGHT {
        let row = (ROLL_HEIGHT - 1 - pitch) as u32;
        for col in 0..width {
            let px = rgb_to_yuv(img.get_pixel(col, row).0);
            roll.set(pitch as u8, col as usize, px);
        }
    }
    Ok(roll)
}
