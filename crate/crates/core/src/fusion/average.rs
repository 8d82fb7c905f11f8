use super::{FusedScore, FusionError, FusionInput};
use crate::embedding;

/// Mean of the four per-source candidate distributions (context plus three
/// retrieved images). No parameters.
pub fn average_fuse(input: &FusionInput, scale: f64) -> Result<FusedScore, FusionError> {
    let dists = input
        .sources()
        .map(|s| embedding::softmax(&input.candidate_cosines(s), scale));
    let [a, b, c, d] = dists;
    let (a, b, c, d) = (a?, b?, c?, d?);
    let probabilities = (0..a.len())
        .map(|j| ((a[j] + b[j]) + (c[j] + d[j])) / 4.0)
        .collect();
    Ok(FusedScore {
        probabilities,
        fused: None,
    })
}

/// Scores candidates with the augmented-context embedding alone.
pub fn context_only_fuse(input: &FusionInput, scale: f64) -> Result<FusedScore, FusionError> {
    Ok(FusedScore {
        probabilities: embedding::softmax(&input.candidate_cosines(input.context()), scale)?,
        fused: None,
    })
}
