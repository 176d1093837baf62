use super::ModelError;
use crate::trace_store::{LabelDictionary, LabelId};

/// Unweighted mean of per-class F1 over the classes present in `reference`.
///
/// Classes with no reference support are skipped, so labels the evaluation
/// split never contains do not dilute the score.
pub fn macro_f1(predicted: &[LabelId], reference: &[LabelId], labels: &LabelDictionary) -> Result<f64, ModelError> {
    if predicted.len() != reference.len() {
        return Err(ModelError::LengthMismatch {
            left: predicted.len(),
            right: reference.len(),
        });
    }
    if reference.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let width = predicted
        .iter()
        .chain(reference)
        .copied()
        .max()
        .map_or(0, |m| m + 1)
        .max(labels.len());
    let mut tp = vec![0usize; width];
    let mut pred_count = vec![0usize; width];
    let mut ref_count = vec![0usize; width];
    for (&p, &r) in predicted.iter().zip(reference) {
        pred_count[p] += 1;
        ref_count[r] += 1;
        if p == r {
            tp[p] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..width {
        if ref_count[c] == 0 {
            continue;
        }
        classes += 1;
        if tp[c] == 0 {
            continue;
        }
        let precision = tp[c] as f64 / pred_count[c] as f64;
        let recall = tp[c] as f64 / ref_count[c] as f64;
        sum += 2.0 * precision * recall / (precision + recall);
    }
    Ok(sum / classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict() -> LabelDictionary {
        LabelDictionary::from_names(["A", "B"])
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 1, 0];
        assert_eq!(macro_f1(&y, &y, &dict()).unwrap(), 1.0);
    }

    #[test]
    fn complement_is_zero() {
        assert_eq!(macro_f1(&[1, 0, 0], &[0, 1, 1], &dict()).unwrap(), 0.0);
    }

    #[test]
    fn worked_instance() {
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], &dict()).unwrap();
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert!((f1 - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn unsupported_classes_are_skipped() {
        // Class B never appears in the reference; only class A is averaged.
        let d = LabelDictionary::from_names(["A", "B", "C"]);
        let f1 = macro_f1(&[0, 1], &[0, 0], &d).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(macro_f1(&[0], &[0, 1], &dict()), Err(ModelError::LengthMismatch { .. })));
        assert!(matches!(macro_f1(&[], &[], &dict()), Err(ModelError::EmptyInput)));
    }
}
