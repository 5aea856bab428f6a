use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result};

/// Sinusoidal step embedding: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`
/// with `w_i = 10000^(-i / (dim / 2))`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::arg(format!("time embedding dimension {dim} must be even and positive")));
    }
    if t == 0 {
        return Err(Error::arg("time steps start at 1"));
    }
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let phase = t as f64 * freq;
        v.push(phase.sin());
        v.push(phase.cos());
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_properties() {
        let a = time_embed(500, 64).unwrap();
        assert_eq!(a, time_embed(500, 64).unwrap());
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        let e: Vec<_> = [1, 500, 1000].iter().map(|&t| time_embed(t, 64).unwrap()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let gap: f64 = e[i].iter().zip(&e[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(gap > 0.1);
            }
        }
        assert!(time_embed(5, 7).is_err());
        assert!(time_embed(0, 8).is_err());
    }
}
