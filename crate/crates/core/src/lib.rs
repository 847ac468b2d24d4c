pub mod analyzer;
pub mod backbone;
pub mod causal;
pub mod datagen;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};

/// Formats `v` rounded to 9 significant digits, in the shortest form that reads back to
/// the rounded value.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("valid float");
    format!("{rounded}")
}
