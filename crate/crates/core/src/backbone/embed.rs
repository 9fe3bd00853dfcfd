use crate::error::{Error, Result};

/// Largest angular frequency; `t` in `[0, 1]` is treated like a diffusion
/// timestep in `[0, 1000]`.
const MAX_FREQUENCY: f64 = 1000.0;
const PERIOD_BASE: f64 = 10_000.0;

/// Sinusoidal features `[sin(t w_0) .. sin(t w_{k-1}), cos(t w_0) .. cos(t w_{k-1})]`
/// with geometrically spaced `w_k = 1000 * 10000^(-k / k_total)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = MAX_FREQUENCY * PERIOD_BASE.powf(-(k as f64) / half as f64);
        let (s, c) = (t * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time_is_sin_zero_cos_one() {
        let e = time_embedding(0.0, 16).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = time_embedding(0.1, 16).unwrap();
        assert_eq!(a, time_embedding(0.1, 16).unwrap());
        let b = time_embedding(0.9, 16).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(time_embedding(0.5, 7).is_err());
        assert!(time_embedding(0.5, 0).is_err());
    }
}
