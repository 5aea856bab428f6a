use alloc::format;

use num_traits::Float;

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::structure::NucleiStructure;
use crate::{Error, Raster, Result};

/// Minimum-mean-square-error noise prediction when the clean data are
/// elementwise `N(mu, var)`:
/// `eps = sqrt(1 - ab) (y_t - sqrt(ab) mu) / (ab var + 1 - ab)`.
pub fn oracle_predict_noise(mu: f64, var: f64, y_t: &Raster, t: usize, sched: &NoiseSchedule) -> Result<Raster> {
    if var.is_nan() || var < 0.0 {
        return Err(Error::arg(format!("variance {var} must be non-negative")));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::OutOfRange(format!("step {t} outside 1..={}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let gain = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
    let shift = ab.sqrt() * mu;
    let data = y_t.data.iter().map(|&y| (gain * (y as f64 - shift)) as f32).collect();
    Ok(Raster { data, ..*y_t })
}

/// [`Denoiser`] backed by [`oracle_predict_noise`]; ignores any condition.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mu: f64,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GaussianOracle {
    fn predict(&self, x_t: &Raster, t: usize, _cond: Option<&NucleiStructure>) -> Result<Raster> {
        oracle_predict_noise(self.mu, self.var, x_t, t, &self.schedule)
    }
}
