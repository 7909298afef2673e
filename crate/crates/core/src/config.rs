//! Key-value configuration file mirroring the CLI flags.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank
//! lines are ignored. Unknown keys are an error (they are usually typos).
//! Flags win over file values; merging happens in the CLI layer.
//!
//! ```text
//! # encoding
//! grid_div = 4
//! width = 512
//! # model
//! steps = 1000
//! beta_start = 1e-4
//! beta_end = 0.02
//! palette.piano = 100,93
//! instrument_map = 0-7:piano,56-63:brass
//! ```

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::notes::{ClassMap, InstrumentClass};
use crate::roll::{Palette, DEFAULT_LUMA_THRESHOLD, ROLL_WIDTH};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {text:?}")]
    BadValue {
        line: usize,
        key: String,
        text: String,
    },
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Columns per beat divisor: one pixel spans `ticks_per_beat / grid_div`
    /// ticks.
    pub grid_div: u64,
    /// Roll image width in columns; multiple of 16.
    pub width: usize,
    /// Ticks per beat assumed when decoding images (no MIDI metadata there).
    pub ticks_per_beat: u16,
    /// Diffusion steps T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    /// SGD learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Multiplies the base (4, 8) channel widths of the denoiser.
    pub width_mult: usize,
    /// SGD momentum; 0 disables it.
    pub momentum: f64,
    pub embed_dim: usize,
    pub window_columns: u64,
    pub max_per_window: usize,
    pub luma_threshold: u8,
    pub palette: Palette,
    pub instrument_map: ClassMap,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid_div: 4,
            width: ROLL_WIDTH,
            ticks_per_beat: 480,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
            lr: 0.05,
            epochs: 100,
            batch: 4,
            width_mult: 4,
            momentum: 0.0,
            embed_dim: 32,
            window_columns: 16,
            max_per_window: 24,
            luma_threshold: DEFAULT_LUMA_THRESHOLD,
            palette: Palette::default(),
            instrument_map: ClassMap::default(),
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        text.parse()
    }

    /// Grid ticks for a given file resolution, never below one tick.
    pub fn grid_ticks(&self, ticks_per_beat: u16) -> u64 {
        (u64::from(ticks_per_beat) / self.grid_div).max(1)
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, text: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    text.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        text: text.to_string(),
    })
}

fn parse_chroma(line: usize, key: &str, text: &str) -> Result<(u8, u8), ConfigError> {
    let bad = || ConfigError::BadValue {
        line,
        key: key.to_string(),
        text: text.to_string(),
    };
    let (u, v) = text.split_once(',').ok_or_else(bad)?;
    Ok((
        u.trim().parse().map_err(|_| bad())?,
        v.trim().parse().map_err(|_| bad())?,
    ))
}

impl FromStr for Config {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = Config::default();
        let mut chroma = [(0u8, 0u8); 5];
        let mut chroma_set = [false; 5];
        for class in InstrumentClass::ALL {
            chroma[class.index()] = config.palette.chroma(class);
        }

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "grid_div" => config.grid_div = parse_value(line, key, value)?,
                "width" => config.width = parse_value(line, key, value)?,
                "ticks_per_beat" => config.ticks_per_beat = parse_value(line, key, value)?,
                "steps" => config.steps = parse_value(line, key, value)?,
                "beta_start" => config.beta_start = parse_value(line, key, value)?,
                "beta_end" => config.beta_end = parse_value(line, key, value)?,
                "seed" => config.seed = parse_value(line, key, value)?,
                "lr" => config.lr = parse_value(line, key, value)?,
                "epochs" => config.epochs = parse_value(line, key, value)?,
                "batch" => config.batch = parse_value(line, key, value)?,
                "width_mult" => config.width_mult = parse_value(line, key, value)?,
                "momentum" => config.momentum = parse_value(line, key, value)?,
                "embed_dim" => config.embed_dim = parse_value(line, key, value)?,
                "window_columns" => config.window_columns = parse_value(line, key, value)?,
                "max_per_window" => config.max_per_window = parse_value(line, key, value)?,
                "luma_threshold" => config.luma_threshold = parse_value(line, key, value)?,
                "instrument_map" => {
                    config.instrument_map =
                        ClassMap::from_spec(value).map_err(|_| ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            text: value.to_string(),
                        })?
                }
                _ => match key.strip_prefix("palette.").and_then(InstrumentClass::from_name) {
                    Some(class) => {
                        chroma[class.index()] = parse_chroma(line, key, value)?;
                        chroma_set[class.index()] = true;
                    }
                    None => {
                        return Err(ConfigError::UnknownKey {
                            line,
                            key: key.to_string(),
                        })
                    }
                },
            }
        }

        if chroma_set.iter().any(|&s| s) {
            config.palette = Palette::new(chroma).map_err(|e| ConfigError::BadValue {
                line: 0,
                key: "palette".to_string(),
                text: e.to_string(),
            })?;
        }
        Ok(config)
    }
}
