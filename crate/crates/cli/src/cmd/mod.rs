pub mod bench;
pub mod entropy;
pub mod train;
pub mod vce_demo;
pub mod verify;

/// Shortest round-trip text of a float, so CSV values reparse exactly.
pub fn num(v: f64) -> String {
    format!("{v}")
}
