//! Denoising diffusion mathematics: the variance schedule, forward noising,
//! ancestral sampling and classifier-free guidance.
//!
//! Steps are indexed `1..=T` everywhere in this module.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use rand::Rng;

use crate::rng::normal_raster;
use crate::structure::NucleiStructure;
use crate::{Error, FeatureMap, Raster, Real, Result};

/// Per-step noise levels. `sigma_t = sqrt(beta_t)` (fixed, not learned).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_t` interpolated linearly from `beta_1` to `beta_T` inclusive.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::InvalidSchedule("need 0 < beta_1 <= beta_T < 1"));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> NoiseSchedule {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        NoiseSchedule { beta, alpha, alpha_bar, sigma }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::arg(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn combine<T: Real>(a: &FeatureMap<T>, ca: f64, b: &FeatureMap<T>, cb: f64, what: &str) -> Result<FeatureMap<T>> {
    a.check_same_shape(b, what)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| T::of(ca * x.as_f64() + cb * y.as_f64()))
        .collect();
    Ok(FeatureMap { data, ..*a })
}

/// One forward noising step: `sqrt(1 - beta_t) y_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(y_prev: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let b = sched.beta(t);
    combine(y_prev, (1.0 - b).sqrt(), eps, b.sqrt(), "forward_step")
}

/// Closed-form marginal: `sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(y0: &Raster, t: usize, eps: &Raster, sched: &NoiseSchedule) -> Result<Raster> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    combine(y0, ab.sqrt(), eps, (1.0 - ab).sqrt(), "q_sample")
}

/// Mean squared error between predicted and true noise.
pub fn simple_loss(eps_hat: &Raster, eps: &Raster) -> Result<f64> {
    eps_hat.check_same_shape(eps, "simple_loss")?;
    if eps.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps_hat
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum / eps.data.len() as f64)
}

/// One ancestral sampling step
/// `(y_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
/// `z` is ignored at `t = 1`.
pub fn reverse_step(
    y_t: &Raster,
    t: usize,
    eps_hat: &Raster,
    z: &Raster,
    sched: &NoiseSchedule,
) -> Result<Raster> {
    sched.check_step(t)?;
    y_t.check_same_shape(eps_hat, "reverse_step")?;
    y_t.check_same_shape(z, "reverse_step noise")?;
    let a = sched.alpha(t);
    let inv_sqrt_a = 1.0 / a.sqrt();
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let data = y_t
        .data
        .iter()
        .zip(&eps_hat.data)
        .zip(&z.data)
        .map(|((&y, &e), &n)| {
            (inv_sqrt_a * (f64::from(y) - coef * f64::from(e)) + sigma * f64::from(n)) as f32
        })
        .collect();
    Ok(Raster { data, ..*y_t })
}

/// Classifier-free guidance: `(w + 1) eps_cond - w eps_uncond`.
pub fn cfg_combine<T: Real>(eps_cond: &FeatureMap<T>, eps_uncond: &FeatureMap<T>, w: f64) -> Result<FeatureMap<T>> {
    combine(eps_cond, w + 1.0, eps_uncond, -w, "cfg_combine")
}

/// A noise predictor, conditional on a nuclei structure or not.
pub trait Denoiser {
    fn predict(&self, x_t: &Raster, t: usize, cond: Option<&NucleiStructure>) -> Result<Raster>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x_t: &Raster, t: usize, cond: Option<&NucleiStructure>) -> Result<Raster> {
        (**self).predict(x_t, t, cond)
    }
}

/// Full `T`-step ancestral sampling from standard normal noise.
///
/// With a condition, each step evaluates the denoiser with and without it and
/// mixes the two predictions with guidance weight `w`; without one the
/// denoiser is called once per step and `w` is unused. The result is clamped
/// to `[-1, 1]`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    shape: (usize, usize, usize),
    sched: &NoiseSchedule,
    cond: Option<&NucleiStructure>,
    w: f64,
    rng: &mut R,
) -> Result<Raster> {
    let mut x = normal_raster(rng, shape);
    for t in (1..=sched.steps()).rev() {
        let eps = match cond {
            None => denoiser.predict(&x, t, None)?,
            Some(y) => {
                let c = denoiser.predict(&x, t, Some(y))?;
                let u = denoiser.predict(&x, t, None)?;
                cfg_combine(&c, &u, w)?
            }
        };
        let z = if t > 1 { normal_raster(rng, shape) } else { Raster::zeros(shape.0, shape.1, shape.2) };
        x = reverse_step(&x, t, &eps, &z, sched)?;
    }
    for v in &mut x.data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::rng::stream_rng;
    use core::cell::Cell;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn constant(v: f32) -> Raster {
        Raster::filled(1, 2, 2, v)
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = sched();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.beta(1000), 0.02);
        assert!((s.sigma(500) - s.beta(500).sqrt()).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        let one = NoiseSchedule::linear(1, 0.01, 0.01).unwrap();
        assert_eq!(one.steps(), 1);
        assert_eq!(one.alpha_bar(1), 0.99);
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_step_examples() {
        let s = sched();
        let y = constant(0.7);
        let out = forward_step(&y, 10, &constant(0.0), &s).unwrap();
        assert!(out.data.iter().all(|&v| (v as f64 - (1.0 - s.beta(10)).sqrt() * 0.7).abs() < 1e-6));
        let out = forward_step(&constant(0.0), 10, &constant(1.0), &s).unwrap();
        assert!(out.data.iter().all(|&v| (v as f64 - s.beta(10).sqrt()).abs() < 1e-7));
        assert!(forward_step(&y, 10, &Raster::zeros(1, 3, 2), &s).is_err());
        assert!(forward_step(&y, 0, &y, &s).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = sched();
        let y = constant(0.4);
        let out = q_sample(&y, 300, &constant(0.0), &s).unwrap();
        assert!((out.data[0] as f64 - s.alpha_bar(300).sqrt() * 0.4).abs() < 1e-6);
        // abar = 0.25 exactly for a one-step schedule with beta = 0.75
        let quarter = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let out = q_sample(&constant(1.0), 1, &constant(1.0), &quarter).unwrap();
        assert!((out.data[0] - (0.5 + 0.75f32.sqrt())).abs() < 1e-6);
        assert!((out.data[0] - 1.3660).abs() < 1e-4);
    }

    #[test]
    fn simple_loss_examples() {
        let e = Raster::from_vec(1, 1, 3, vec![0.1, -2.0, 3.0]).unwrap();
        assert_eq!(simple_loss(&e, &e).unwrap(), 0.0);
        let shifted = Raster { data: e.data.iter().map(|v| v + 1.0).collect(), ..e.clone() };
        assert!((simple_loss(&shifted, &e).unwrap() - 1.0).abs() < 1e-6);
        assert!(simple_loss(&e, &constant(0.0)).is_err());
    }

    #[test]
    fn reverse_step_examples() {
        let s = sched();
        let y = constant(0.5);
        let zero = constant(0.0);
        let out = reverse_step(&y, 700, &zero, &zero, &s).unwrap();
        assert!((out.data[0] as f64 - 0.5 / s.alpha(700).sqrt()).abs() < 1e-6);
        let eps = constant(0.3);
        let a = reverse_step(&y, 1, &eps, &constant(5.0), &s).unwrap();
        let b = reverse_step(&y, 1, &eps, &constant(-5.0), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cfg_identities() {
        let c = constant(0.2);
        let u = constant(0.1);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, -1.0).unwrap(), u);
        assert!((cfg_combine(&c, &u, 2.0).unwrap().data[0] - 0.4).abs() < 1e-7);
    }

    struct Counting {
        calls: Cell<usize>,
        cond_calls: Cell<usize>,
    }

    impl Denoiser for Counting {
        fn predict(&self, x: &Raster, _t: usize, cond: Option<&NucleiStructure>) -> Result<Raster> {
            self.calls.set(self.calls.get() + 1);
            if cond.is_some() {
                self.cond_calls.set(self.cond_calls.get() + 1);
            }
            Ok(Raster::zeros(x.channels, x.height, x.width))
        }
    }

    #[test]
    fn unconditional_sampling_calls_once_per_step() {
        let s = NoiseSchedule::linear(25, 1e-4, 0.02).unwrap();
        let d = Counting { calls: Cell::new(0), cond_calls: Cell::new(0) };
        sample(&d, (3, 4, 4), &s, None, 7.0, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(d.calls.get(), 25);
        assert_eq!(d.cond_calls.get(), 0);

        let y = NucleiStructure::background(4, 4);
        let d = Counting { calls: Cell::new(0), cond_calls: Cell::new(0) };
        let out = sample(&d, (3, 4, 4), &s, Some(&y), 2.0, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(d.calls.get(), 50);
        assert_eq!(d.cond_calls.get(), 25);
        assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let d = Counting { calls: Cell::new(0), cond_calls: Cell::new(0) };
        let a = sample(&d, (3, 4, 4), &s, None, 0.0, &mut stream_rng(9, 2)).unwrap();
        let b = sample(&d, (3, 4, 4), &s, None, 0.0, &mut stream_rng(9, 2)).unwrap();
        let c = sample(&d, (3, 4, 4), &s, None, 0.0, &mut stream_rng(9, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
