use super::model::ProbeError;

/// F1 of one class. A class absent from both sides scores 1.
fn class_f1(y_true: &[u8], y_pred: &[u8], class: u8) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Unweighted mean of the class-0 and class-1 F1 scores.
pub fn macro_f1(y_true: &[u8], y_pred: &[u8]) -> Result<f64, ProbeError> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(ProbeError::ShapeMismatch);
    }
    Ok((class_f1(y_true, y_pred, 0) + class_f1(y_true, y_pred, 1)) / 2.0)
}
