//! Composable adversarial perturbations.
//!
//! An attack is a chain of differentiable perturbation layers (additive
//! delta, affine warp, per-pixel flow), each with a hard threat bound,
//! optimised jointly against a classifier. The crate also ships the small
//! classifier, distances, and a local-contrast analysis of when combined
//! layers reach images that single layers cannot.
//!
//! ```
//! use advcompose::imagecore::{Image, Shape};
//! use advcompose::layers::{sequential_forward, FlowParams, LayerParams, SequentialPerturbation};
//!
//! let x = Image::filled(Shape::new(4, 4, 3), 0.5).unwrap();
//! let s = SequentialPerturbation::new(vec![LayerParams::Flow(FlowParams::zeros(4, 4))]);
//! assert_eq!(sequential_forward(&x, &s).unwrap(), x);
//! ```

pub mod attacks;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod imagecore;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod theory;
pub mod threat;

pub use error::{Error, Result};

/// Locale-independent decimal with 6 significant digits, shortest form.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(123456789.0), "123457000");
        assert_eq!(sig6(-2.5e-7), "-0.00000025");
    }
}
