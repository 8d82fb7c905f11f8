use super::TrainError;

/// `-ln p[gold]` for a probability vector.
pub fn cross_entropy(probabilities: &[f64], gold: usize) -> Result<f64, TrainError> {
    let p = probabilities.get(gold).ok_or(TrainError::GoldOutOfRange {
        gold,
        classes: probabilities.len(),
    })?;
    Ok(-p.ln())
}

/// Cross-entropy of `softmax(logits)` against `gold`, via log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f64], gold: usize) -> Result<f64, TrainError> {
    let z = *logits.get(gold).ok_or(TrainError::GoldOutOfRange {
        gold,
        classes: logits.len(),
    })?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(lse - z)
}
