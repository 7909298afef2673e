//! MIDI-to-piano-roll codec and a self-contained denoising diffusion model
//! over the roll images.
//!
//! The pipeline has three legs:
//!
//! 1. **Encode** — parse Standard MIDI Files ([`midi`]), quantize notes onto a
//!    fixed time grid ([`notes`]), and render them as color piano-roll images
//!    where luma carries velocity and chroma carries the instrument family
//!    ([`roll`]).
//! 2. **Model** — train an epsilon-predicting convolutional denoiser
//!    ([`denoiser`]) with the DDPM forward/reverse processes ([`diffusion`]),
//!    then sample new rolls from noise.
//! 3. **Decode** — thin overly dense output and merge pixel runs back into
//!    notes ([`postprocess`]), writing valid multi-track MIDI. [`metrics`]
//!    scores decoded rolls against references.
//!
//! Every operation that consumes randomness takes it as an explicit argument
//! (a noise tensor or a seeded RNG), so the whole pipeline is deterministic
//! under a fixed seed.

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod midi;
pub mod notes;
pub mod postprocess;
pub mod roll;

#[doc(hidden)]
pub mod fixtures;

pub use config::Config;
pub use diffusion::{DiffusionSchedule, Tensor};
pub use midi::{RawNote, Score};
pub use notes::{InstrumentClass, NoteArray, NoteCell};
pub use roll::{Palette, PianoRoll, YuvPixel};
