//! Objective evaluation of decoded rolls against references.
//!
//! Notes match on exact `(column, pitch, class)` triples; velocity is
//! excluded by default because luma quantization would make exact equality
//! vacuous. The optional strict mode re-admits velocity with a small luma
//! tolerance. Entropy reports the diversity of the pitch distribution and
//! needs no reference.

use std::collections::HashMap;

use serde::Serialize;

use crate::notes::NoteArray;
use crate::roll::velocity_to_luma;

/// How two cells at the same `(column, pitch, class)` triple are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Triple equality only.
    #[default]
    PositionOnly,
    /// Triple equality plus velocities within the given luma distance.
    WithVelocity { luma_tolerance: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub entropy_bits: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Precision/recall/F/accuracy of `generated` against `reference`, plus the
/// pitch entropy of `generated`.
///
/// Both inputs empty counts as a perfect match (all four scores 1.0).
pub fn note_set_metrics(generated: &NoteArray, reference: &NoteArray) -> MetricReport {
    note_set_metrics_with(generated, reference, MatchMode::PositionOnly)
}

pub fn note_set_metrics_with(
    generated: &NoteArray,
    reference: &NoteArray,
    mode: MatchMode,
) -> MetricReport {
    let entropy_bits = pitch_entropy(generated);
    let n_gen = generated.cells.len();
    let n_ref = reference.cells.len();
    if n_gen == 0 && n_ref == 0 {
        return MetricReport {
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
            f_measure: 1.0,
            entropy_bits,
        };
    }

    let by_triple: HashMap<(u64, u8, usize), u8> = reference
        .cells
        .iter()
        .map(|c| ((c.column, c.pitch, c.instrument_class.index()), c.velocity))
        .collect();

    let mut shared_triples = 0usize;
    let mut matches = 0usize;
    for cell in &generated.cells {
        let key = (cell.column, cell.pitch, cell.instrument_class.index());
        if let Some(&ref_velocity) = by_triple.get(&key) {
            shared_triples += 1;
            let velocity_ok = match mode {
                MatchMode::PositionOnly => true,
                MatchMode::WithVelocity { luma_tolerance } => {
                    let lg = velocity_to_luma(cell.velocity).unwrap_or(0);
                    let lr = velocity_to_luma(ref_velocity).unwrap_or(0);
                    (i16::from(lg) - i16::from(lr)).unsigned_abs() <= u16::from(luma_tolerance)
                }
            };
            if velocity_ok {
                matches += 1;
            }
        }
    }

    let union = n_gen + n_ref - shared_triples;
    let precision = if n_gen == 0 { 0.0 } else { matches as f64 / n_gen as f64 };
    let recall = if n_ref == 0 { 0.0 } else { matches as f64 / n_ref as f64 };
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = if union == 0 { 1.0 } else { matches as f64 / union as f64 };
    MetricReport {
        accuracy,
        precision,
        recall,
        f_measure,
        entropy_bits,
    }
}

/// Shannon entropy (base 2) of the pitch distribution over cells.
pub fn pitch_entropy(array: &NoteArray) -> f64 {
    let mut counts = [0u64; 128];
    for cell in &array.cells {
        counts[usize::from(cell.pitch)] += 1;
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}
