use alloc::vec::Vec;

use crate::error::Result;
use crate::invalid_err;
use crate::math;

/// Sinusoidal timestep embedding: interleaved pairs
/// `(sin(t w_i), cos(t w_i))` with `w_i = 10000^(-2i/dim)`.
///
/// `t` is validated against `[1, t_max]`; `dim` must be even.
pub fn time_embedding(t: u32, t_max: u32, dim: usize) -> Result<Vec<f64>> {
    if t < 1 || t > t_max {
        return Err(invalid_err!("timestep {t} outside [1, {t_max}]"));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid_err!("embedding dim must be positive and even, got {dim}"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let tf = t as f64;
    for i in 0..half {
        let omega = math::powf(10000.0, -2.0 * i as f64 / dim as f64);
        out.push(math::sin(tf * omega));
        out.push(math::cos(tf * omega));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pair_is_sin_cos_of_t() {
        let e = time_embedding(7, 1000, 16).unwrap();
        assert!((e[0] - math::sin(7.0)).abs() < 1e-15);
        assert!((e[1] - math::cos(7.0)).abs() < 1e-15);
    }

    #[test]
    fn squared_norm_is_half_dim() {
        for t in [1u32, 13, 999] {
            let e = time_embedding(t, 1000, 32).unwrap();
            let n2: f64 = e.iter().map(|&v| v * v).sum();
            assert!((n2 - 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_distinct_over_full_range() {
        let dim = 64;
        let embeds: Vec<Vec<f64>> = (1..=1000)
            .map(|t| time_embedding(t, 1000, dim).unwrap())
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..embeds.len() {
            for j in (i + 1)..embeds.len() {
                let d2: f64 = embeds[i]
                    .iter()
                    .zip(&embeds[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < min_dist {
                    min_dist = d2;
                }
            }
        }
        assert!(min_dist > 0.0, "two timesteps share an embedding");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(time_embedding(0, 1000, 8).is_err());
        assert!(time_embedding(1001, 1000, 8).is_err());
        assert!(time_embedding(5, 1000, 7).is_err());
    }
}
