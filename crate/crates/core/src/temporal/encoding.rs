use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Fixed sinusoidal frame encoding, `T × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub rho: DMatrix<f64>,
}

/// Frequency of column pair `i` for token width `d`.
pub fn frequency(i: usize, d: usize) -> f64 {
    10f64.powf(-8.0 * i as f64 / d as f64)
}

/// `rho(t, 2i) = sin(a_i t)`, `rho(t, 2i+1) = cos(a_i t)`, `a_i = 10^(-8i/d)`,
/// for frames stamped `0, 1, .., T-1`.
pub fn positional_encoding(frames: usize, d: usize) -> Result<PositionalEncoding> {
    let times: Vec<f64> = (0..frames).map(|t| t as f64).collect();
    encoding_for_times(&times, d)
}

/// The same encoding evaluated at arbitrary frame times.
pub fn encoding_for_times(times: &[f64], d: usize) -> Result<PositionalEncoding> {
    if times.is_empty() || d == 0 || d % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "positional encoding needs T >= 1 and even d, got T={}, d={d}",
            times.len()
        )));
    }
    let rho = DMatrix::from_fn(times.len(), d, |t, c| {
        let angle = frequency(c / 2, d) * times[t];
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(PositionalEncoding { rho })
}
