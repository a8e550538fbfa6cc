use crate::autodiff::softmax_xent;

/// `-log softmax(logits)[label]`, computed with max subtraction.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label {label} out of range for {} classes", logits.len());
    softmax_xent(logits, label).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        for label in 0..3 {
            assert!((cross_entropy(&[0.0, 0.0, 0.0], label) - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_class() {
        let l = cross_entropy(&[1000.0, 0.0, 0.0], 0);
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(cross_entropy(&[1000.0, 0.0, 0.0], 1).is_finite());
    }

    #[test]
    fn one_two_three() {
        // -log(e^3 / (e + e^2 + e^3))
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((expected - 0.40761).abs() < 1e-4);
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2) - expected).abs() < 1e-12);
    }
}
