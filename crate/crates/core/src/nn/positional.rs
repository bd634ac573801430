use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sinusoidal encodings for positions `0..len`: even columns hold
/// `sin(pos / 10000^(2i/d))` and odd columns the matching cosine.
pub fn positional_encoding<F: Real>(len: usize, d: usize) -> Result<Tensor<F>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding width must be even and positive, got {d}"
        )));
    }
    if len == 0 {
        return Err(Error::contract("positional encoding needs at least one position"));
    }
    Ok(Tensor::from_fn(vec![len, d], |k| {
        let (pos, col) = (k / d, k % d);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        let pe = positional_encoding::<f64>(1, 6).unwrap();
        assert_eq!(pe.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn first_column_of_position_one_is_sin_one() {
        let pe = positional_encoding::<f32>(2, 4).unwrap();
        assert!((pe.get(&[1, 0]).unwrap() - 0.841_470_9).abs() < 1e-7);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(positional_encoding::<f32>(3, 5), Err(Error::Config(_))));
    }
}
