//! Quantizers and their straight-through surrogate.

use tnnsim_core::tnn::Ternary;

/// `+1` above `delta`, `-1` below `-delta`, `0` otherwise.
pub fn ternarize(w: f64, delta: f64) -> Ternary {
    if w > delta {
        Ternary::Pos
    } else if w < -delta {
        Ternary::Neg
    } else {
        Ternary::Zero
    }
}

/// Sign with `binarize(0) = +1`.
pub fn binarize(w: f64) -> Ternary {
    if w >= 0.0 {
        Ternary::Pos
    } else {
        Ternary::Neg
    }
}

/// Derivative of the clipped identity used in place of every quantizer.
pub fn ste_grad(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(ternarize(0.2, 0.05), Ternary::Pos);
        assert_eq!(ternarize(0.0, 0.05), Ternary::Zero);
        assert_eq!(ternarize(-0.05, 0.05), Ternary::Zero);
        assert_eq!(ternarize(0.05, 0.05), Ternary::Zero);
        assert_eq!(binarize(0.3), Ternary::Pos);
        assert_eq!(binarize(-0.3), Ternary::Neg);
        assert_eq!(binarize(0.0), Ternary::Pos);
        assert_eq!(ste_grad(0.5), 1.0);
        assert_eq!(ste_grad(1.5), 0.0);
        assert_eq!(ste_grad(-1.0), 1.0);
    }

    proptest! {
        #[test]
        fn ternarize_is_odd(w in -2.0f64..2.0, d in 0.0f64..1.0) {
            prop_assert_eq!(ternarize(-w, d), -ternarize(w, d));
        }

        #[test]
        fn zero_delta_ternarize_is_binarize(w in -2.0f64..2.0) {
            prop_assume!(w != 0.0);
            prop_assert_eq!(ternarize(w, 0.0), binarize(w));
        }
    }
}
