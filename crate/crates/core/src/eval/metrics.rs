use crate::error::{Result, XmicError};

/// Percentage of positions where `preds` equals `labels`.
pub fn top1_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(XmicError::Empty("top-1 accuracy needs at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(XmicError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    for v in [a, b] {
        if v < 0.0 || v.is_nan() {
            return Err(XmicError::NegativeInput(v));
        }
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
