//! Per-impression serving outcome shared by the HWM and dual planners.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One online evaluation: the effective probabilities used and the contract drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeDecision {
    pub impression_id: String,
    /// Chosen contract id, `None` when the impression is left unallocated.
    pub chosen: Option<String>,
    /// `(contract id, effective probability)` in evaluation order; sums to at most one.
    pub probabilities: Vec<(String, f64)>,
    /// The uniform variate consumed by the draw, for replay.
    pub draw: f64,
}

impl ServeDecision {
    pub fn unallocated_probability(&self) -> f64 {
        (1.0 - self.probabilities.iter().map(|(_, p)| p).sum::<f64>()).max(0.0)
    }
}

/// Maps one uniform variate `u ∈ [0, 1)` through the cumulative probabilities.
///
/// Returns the index of the selected entry or `None` for the unallocated remainder.
pub fn pick(probabilities: &[f64], u: f64) -> Option<usize> {
    let mut cumulative = 0.0;
    for (n, p) in probabilities.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return Some(n);
        }
    }
    None
}

/// Draws from `(id, probability)` pairs with a single uniform variate.
pub fn decide<R: Rng + ?Sized>(
    impression_id: impl Into<String>,
    probabilities: Vec<(String, f64)>,
    rng: &mut R,
) -> ServeDecision {
    let u: f64 = rng.random();
    let ps: Vec<f64> = probabilities.iter().map(|(_, p)| *p).collect();
    let chosen = pick(&ps, u).map(|n| probabilities[n].0.clone());
    ServeDecision {
        impression_id: impression_id.into(),
        chosen,
        probabilities,
        draw: u,
    }
}
