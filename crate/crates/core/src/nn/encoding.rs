//! Sinusoidal position and timestep encodings.

use crate::error::{CoreError, Result};
use crate::nn::tensor::Tensor;

/// Interleaved sin/cos encoding over geometric frequencies.
///
/// Returns `[positions.len(), dim]`; column `2i` is `sin(p * f_i)` and
/// `2i + 1` is `cos(p * f_i)` with `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal_encoding(positions: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(CoreError::InvalidParam(format!(
            "sinusoidal encoding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (p_idx, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (10_000f64).powf(-2.0 * i as f64 / dim as f64);
            let angle = p * freq;
            data[p_idx * dim + 2 * i] = angle.sin();
            data[p_idx * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![positions.len(), dim], data)
}

/// Encoding of a batch of integer timesteps: `[t.len(), dim]`.
pub fn timestep_encoding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    let positions: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    sinusoidal_encoding(&positions, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_all_zero_sin_one_cos() {
        let enc = sinusoidal_encoding(&[0.0], 8).unwrap();
        for i in 0..4 {
            assert_eq!(enc.data()[2 * i], 0.0);
            assert_eq!(enc.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let positions: Vec<f64> = (0..500).map(|p| p as f64).collect();
        let enc = sinusoidal_encoding(&positions, 32).unwrap();
        assert!(enc.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encodings_are_distinct_below_ten_thousand() {
        // injectivity over integer positions for dim >= 4
        let positions: Vec<f64> = (0..10_000).map(|p| p as f64).collect();
        let enc = sinusoidal_encoding(&positions, 4).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for p in 0..10_000 {
            let key: Vec<u64> = enc.data()[p * 4..(p + 1) * 4]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert!(seen.insert(key), "duplicate encoding at position {p}");
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_encoding(&[1.0], 5).is_err());
    }
}
