use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::optim::AdamW;
use super::unet::Unet;
use crate::diffusion::{q_sample, simple_loss, NoiseSchedule};
use crate::rng::{normal_raster, stream_rng};
use crate::structure::NucleiStructure;
use crate::{Error, Raster, Result};

/// A clean training target with its optional condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub target: Raster,
    pub cond: Option<NucleiStructure>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing a sample's condition with the null condition.
    pub drop_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    /// Samples drawn over all steps.
    pub samples: usize,
    /// Samples trained with the null condition.
    pub null_count: usize,
}

impl TrainReport {
    pub fn null_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.null_count as f64 / self.samples as f64
        }
    }
}

fn check_data(net: &Unet<f32>, data: &[TrainingPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, p) in data.iter().enumerate() {
        if p.cond.is_some() != net.is_conditional() {
            return Err(Error::arg(format!(
                "pair {i}: {} network {} a condition",
                if net.is_conditional() { "conditional" } else { "unconditional" },
                if net.is_conditional() { "needs" } else { "does not take" }
            )));
        }
    }
    Ok(())
}

/// Runs `options.steps` optimizer steps. Each sample of a batch is drawn with
/// replacement, gets a uniform step in `1..=T`, fresh noise, and a condition
/// dropout draw. `on_step` sees `(step, loss)` for 1-based steps.
pub fn train<R: Rng + ?Sized>(
    net: &mut Unet<f32>,
    data: &[TrainingPair],
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    options: &TrainOptions,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    check_data(net, data)?;
    if options.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if !(0.0..1.0).contains(&options.drop_rate) {
        return Err(Error::arg(format!("drop rate {} outside [0, 1)", options.drop_rate)));
    }
    let mut report = TrainReport::default();
    let b = options.batch_size;
    for step in 1..=options.steps {
        let mut grads = net.params().zero_grads();
        let mut loss = 0.0;
        for _ in 0..b {
            let pair = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=sched.steps());
            let eps = normal_raster(rng, pair.target.shape());
            let drop = rng.random::<f64>() < options.drop_rate;
            let cond = if drop { None } else { pair.cond.as_ref() };
            report.samples += 1;
            if drop && net.is_conditional() {
                report.null_count += 1;
            }
            let x_t = q_sample(&pair.target, t, &eps, sched)?;
            let (out, cache) = net.forward(&x_t, t, cond.map(|c| c.raster()))?;
            loss += simple_loss(&out, &eps)?;
            let scale = 2.0 / (out.data.len() * b) as f32;
            let mut d = out;
            d.data.iter_mut().zip(&eps.data).for_each(|(o, e)| *o = scale * (*o - e));
            net.backward(&cache, &d, &mut grads);
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        opt.update(net.params_mut(), &grads)?;
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok(report)
}

/// Mean `simple_loss` over `draws` fixed (pair, step, noise) draws derived
/// from `seed`; conditions are used as given.
pub fn validation_loss(
    net: &Unet<f32>,
    data: &[TrainingPair],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    check_data(net, data)?;
    let mut total = 0.0;
    for i in 0..draws {
        let mut rng = stream_rng(seed, i as u64);
        let pair = &data[rng.random_range(0..data.len())];
        let t = rng.random_range(1..=sched.steps());
        let eps = normal_raster(&mut rng, pair.target.shape());
        let x_t = q_sample(&pair.target, t, &eps, sched)?;
        let out = net.predict_map(&x_t, t, pair.cond.as_ref().map(|c| c.raster()))?;
        total += simple_loss(&out, &eps)?;
    }
    Ok(if draws == 0 { 0.0 } else { total / draws as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkShape;
    use alloc::vec;

    fn shape() -> NetworkShape {
        NetworkShape { levels: 2, channels: vec![4, 8], attn_levels: vec![], resolution: 8, res_blocks: 1, spade_hidden: 4 }
    }

    fn data(cond: bool) -> Vec<TrainingPair> {
        let mut rng = stream_rng(3, 0);
        (0..4)
            .map(|_| TrainingPair {
                target: normal_raster(&mut rng, (3, 8, 8)),
                cond: cond.then(|| NucleiStructure::background(8, 8)),
            })
            .collect()
    }

    fn run(drop_rate: f64, steps: usize) -> (Unet<f32>, TrainReport) {
        let mut net = Unet::new(shape(), true, 1).unwrap();
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut opt = AdamW::new(net.params(), 1e-3);
        let mut rng = stream_rng(4, 0);
        let opts = TrainOptions { steps, batch_size: 2, drop_rate };
        let report = train(&mut net, &data(true), &sched, &mut opt, &opts, &mut rng, |_, _| {}).unwrap();
        (net, report)
    }

    #[test]
    fn zero_drop_rate_never_uses_null() {
        let (_, r) = run(0.0, 20);
        assert_eq!(r.null_count, 0);
        assert_eq!(r.samples, 40);
        assert_eq!(r.losses.len(), 20);
    }

    #[test]
    fn training_is_deterministic() {
        let (a, ra) = run(0.2, 5);
        let (b, rb) = run(0.2, 5);
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = Unet::<f32>::new(shape(), false, 1).unwrap();
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut opt = AdamW::new(net.params(), 1e-3);
        let mut rng = stream_rng(0, 0);
        let opts = TrainOptions { steps: 1, batch_size: 1, drop_rate: 0.0 };
        assert!(matches!(
            train(&mut net, &[], &sched, &mut opt, &opts, &mut rng, |_, _| {}),
            Err(Error::EmptyDataset)
        ));
        assert!(train(&mut net, &data(true), &sched, &mut opt, &opts, &mut rng, |_, _| {}).is_err());
        let bad = TrainOptions { drop_rate: 1.0, ..opts };
        assert!(train(&mut net, &data(false), &sched, &mut opt, &bad, &mut rng, |_, _| {}).is_err());
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (net, r) = run(0.2, 0);
        assert_eq!(net.params(), Unet::<f32>::new(shape(), true, 1).unwrap().params());
        assert!(r.losses.is_empty());
    }
}
