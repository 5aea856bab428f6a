//! Property and reproduction suites behind `nudiff verify`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nudiff_core::dataset::{extract_patches, kmeans, select_indices, window_origins};
use nudiff_core::diffusion::{cfg_combine, q_sample, sample, NoiseSchedule};
use nudiff_core::metrics::{aji, binary_dice, dice, relabel};
use nudiff_core::nn::{
    oracle_predict_noise, train, validation_loss, AdamW, GaussianOracle, NetworkShape, TrainOptions, TrainingPair, Unet,
};
use nudiff_core::rng::{normal_raster, stream_rng};
use nudiff_core::structure::{encode_structure, reconstruct_instances, NucleiStructure, WatershedParams};
use nudiff_core::toy::{random_blob_map, toy_sample};
use nudiff_core::{FeatureMap, ImageRaster, InstanceMap, Raster};
use rand::Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{io, pipeline, Error, Result};

/// Outcome of one property.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const SUITES: [&str; 11] =
    ["schedule", "diffusion", "gradient", "cfg", "structure", "metrics", "pipeline", "toy", "dropout", "io", "dataset"];

/// Runs one named suite, or every suite for `"all"`.
pub fn run(name: &str) -> Result<Vec<SuiteReport>> {
    if name == "all" {
        return SUITES.iter().map(|s| run_one(s)).collect();
    }
    Ok(vec![run_one(name)?])
}

fn run_one(name: &str) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match name {
        "schedule" => schedule_suite()?,
        "diffusion" => diffusion_suite()?,
        "gradient" => gradient_suite()?,
        "cfg" => cfg_suite()?,
        "structure" => structure_suite()?,
        "metrics" => metrics_suite()?,
        "pipeline" => pipeline_suite()?,
        "toy" => toy_suite(&ToyConfig::default())?.checks(),
        "dropout" => dropout_suite()?,
        "io" => io_suite()?,
        "dataset" => dataset_suite()?,
        other => return Err(Error::Invalid(format!("unknown suite {other:?}; expected one of {} or all", SUITES.join(", ")))),
    };
    Ok(SuiteReport { suite: name.into(), checks, seconds: start.elapsed().as_secs_f64() })
}

fn mean_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = v.clone().count();
    let mean = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var, n)
}

fn standard_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).expect("valid schedule")
}

/// Alpha-bar monotonicity and the moments of `q_sample` at t = 1, 500, 1000.
pub fn schedule_suite() -> Result<Vec<Check>> {
    let s = standard_schedule();
    let mut checks = Vec::new();
    let decreasing = (2..=1000).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));
    checks.push(Check::new("alpha_bar strictly decreasing", decreasing, format!("abar_T = {:.3e}", s.alpha_bar(1000))));
    let n = 10_000;
    let y0 = 0.5;
    for t in [1, 500, 1000] {
        let mut rng = stream_rng(101, t as u64);
        let eps = normal_raster(&mut rng, (1, 1, n));
        let yt = q_sample(&Raster::filled(1, 1, n, y0 as f32), t, &eps, &s)?;
        let (m, v, _) = mean_var(yt.data.iter().map(|&x| f64::from(x)));
        let ab = s.alpha_bar(t);
        let (em, ev) = (ab.sqrt() * y0, 1.0 - ab);
        let se_m = (ev / n as f64).sqrt();
        let se_v = ev * (2.0 / (n - 1) as f64).sqrt();
        let ok = (m - em).abs() <= 3.0 * se_m && (v - ev).abs() <= 3.0 * se_v;
        checks.push(Check::new(
            format!("q_sample moments t={t}"),
            ok,
            format!("mean {m:.5} vs {em:.5} (SE {se_m:.1e}), var {v:.5} vs {ev:.5} (SE {se_v:.1e})"),
        ));
    }
    Ok(checks)
}

/// The Gaussian oracle against Monte-Carlo regression, and 1000-step
/// ancestral sampling with it.
pub fn diffusion_suite() -> Result<Vec<Check>> {
    let s = standard_schedule();
    let (mu, var) = (0.3f64, 0.04f64);
    let mut checks = Vec::new();

    let t = 500;
    let n = 100_000;
    let mut rng = stream_rng(202, 0);
    let z = normal_raster(&mut rng, (1, 1, n));
    let eps = normal_raster(&mut rng, (1, 1, n));
    let y0 = Raster { data: z.data.iter().map(|v| (mu + var.sqrt() * f64::from(*v)) as f32).collect(), ..z };
    let yt = q_sample(&y0, t, &eps, &s)?;
    let (my, vy, _) = mean_var(yt.data.iter().map(|&x| f64::from(x)));
    let me = eps.data.iter().map(|&e| f64::from(e)).sum::<f64>() / n as f64;
    let cov = yt.data.iter().zip(&eps.data).map(|(&y, &e)| (f64::from(y) - my) * (f64::from(e) - me)).sum::<f64>()
        / (n - 1) as f64;
    let slope = cov / vy;
    let intercept = me - slope * my;
    let ab = s.alpha_bar(t);
    let f_slope = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
    let f_intercept = -f_slope * ab.sqrt() * mu;
    let probe = Raster::from_vec(1, 1, 2, vec![0.0, 1.0])?;
    let at = oracle_predict_noise(mu, var, &probe, t, &s)?;
    let formula_consistent = (f64::from(at.data[1] - at.data[0]) - f_slope).abs() < 1e-5
        && (f64::from(at.data[0]) - f_intercept).abs() < 1e-5;
    let slope_rel = (slope / f_slope - 1.0).abs();
    checks.push(Check::new(
        "oracle matches Monte-Carlo regression at t=500",
        slope_rel < 0.01 && (intercept - f_intercept).abs() < 0.01 * f_intercept.abs().max(f_slope) && formula_consistent,
        format!("slope {slope:.5} vs {f_slope:.5} ({:.3}%), intercept {intercept:.5} vs {f_intercept:.5}", 100.0 * slope_rel),
    ));

    let chains = 10_000;
    let oracle = GaussianOracle { mu, var, schedule: s.clone() };
    let mut rng = stream_rng(203, 0);
    let x = sample(&oracle, (1, 1, chains), &s, None, 0.0, &mut rng)?;
    let (m, v, _) = mean_var(x.data.iter().map(|&x| f64::from(x)));
    let se = (v / chains as f64).sqrt();
    checks.push(Check::new(
        "oracle sampler mean",
        (m - mu).abs() <= 3.0 * se,
        format!("{m:.5} vs {mu} (3 SE = {:.5})", 3.0 * se),
    ));
    checks.push(Check::new(
        "oracle sampler variance",
        (v / var - 1.0).abs() <= 0.10,
        format!("{v:.5} vs {var} ({:+.2}%)", 100.0 * (v / var - 1.0)),
    ));
    Ok(checks)
}

fn gradient_shape() -> NetworkShape {
    NetworkShape { levels: 2, channels: vec![4, 8], attn_levels: vec![2], resolution: 8, res_blocks: 1, spade_hidden: 4 }
}

type Batch = Vec<(FeatureMap<f64>, usize, Option<FeatureMap<f64>>, FeatureMap<f64>)>;

fn batch_loss(net: &Unet<f64>, batch: &Batch) -> f64 {
    let b = batch.len() as f64;
    batch
        .iter()
        .map(|(x, t, c, eps)| {
            let y = net.predict_map(x, *t, c.as_ref()).expect("valid input");
            y.data.iter().zip(&eps.data).map(|(a, e)| (a - e) * (a - e)).sum::<f64>() / y.data.len() as f64
        })
        .sum::<f64>()
        / b
}

/// Largest relative gap between analytic and central-difference gradients,
/// per parameter tensor, over a few entries of each.
fn gradient_errors(net: &mut Unet<f64>, batch: &Batch, rng: &mut impl Rng) -> Vec<(String, f64)> {
    let mut grads = net.params().zero_grads();
    let b = batch.len() as f64;
    for (x, t, c, eps) in batch {
        let (y, cache) = net.forward(x, *t, c.as_ref()).expect("valid input");
        let scale = 2.0 / (y.data.len() as f64 * b);
        let mut d = y;
        d.data.iter_mut().zip(&eps.data).for_each(|(o, e)| *o = scale * (*o - e));
        net.backward(&cache, &d, &mut grads);
    }
    let h = 1e-5;
    let count = net.params().len();
    let mut out = Vec::with_capacity(count);
    for pi in 0..count {
        let g = &grads.data[pi];
        let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        let mut idx = vec![top, rng.random_range(0..g.len()), rng.random_range(0..g.len())];
        idx.dedup();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for &i in &idx {
            let orig = net.params().params()[pi].data[i];
            net.params_mut().params_mut()[pi].data[i] = orig + h;
            let lp = batch_loss(net, batch);
            net.params_mut().params_mut()[pi].data[i] = orig - h;
            let lm = batch_loss(net, batch);
            net.params_mut().params_mut()[pi].data[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            diff += (num - g[i]).powi(2);
            norm = norm.max(num.abs()).max(g[i].abs());
        }
        // exactly-zero gradients (the key bias cancels in the softmax) leave
        // only rounding noise, hence the floor
        let rel = diff.sqrt() / norm.max(1e-6);
        out.push((net.params().params()[pi].name.clone(), rel));
    }
    out
}

/// Analytic against numeric gradients for every tensor of 2-level networks,
/// on 5 random batches.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for conditional in [true, false] {
        let mut worst = (String::new(), 0.0f64);
        let mut tensors = 0;
        for batch_id in 0..5u64 {
            let mut net = Unet::<f64>::new(gradient_shape(), conditional, 300 + batch_id)?;
            let mut rng = stream_rng(301, batch_id);
            net.params_mut().randomize(0.3, &mut rng);
            let batch: Batch = (0..2)
                .map(|i| {
                    let x = normal_raster(&mut rng, (3, 8, 8)).cast();
                    let eps = normal_raster(&mut rng, (3, 8, 8)).cast();
                    let c = (conditional && i == 0).then(|| normal_raster(&mut rng, (3, 8, 8)).cast());
                    (x, rng.random_range(1..=1000), c, eps)
                })
                .collect();
            let errs = gradient_errors(&mut net, &batch, &mut rng);
            tensors = errs.len();
            for (name, e) in errs {
                if e.is_nan() || e > worst.1 {
                    worst = (name, e);
                }
            }
        }
        let kind = if conditional { "conditional" } else { "unconditional" };
        checks.push(Check::new(
            format!("{kind} network gradients"),
            worst.1 <= 1e-3,
            format!("{tensors} tensors x 5 batches, worst relative error {:.2e} ({})", worst.1, worst.0),
        ));
    }
    Ok(checks)
}

/// Guidance identities at w = 0 and w = -1 and linearity in w.
pub fn cfg_suite() -> Result<Vec<Check>> {
    let mut rng = stream_rng(401, 0);
    let c: FeatureMap<f64> = normal_raster(&mut rng, (3, 8, 8)).cast();
    let u: FeatureMap<f64> = normal_raster(&mut rng, (3, 8, 8)).cast();
    let mut checks = Vec::new();
    checks.push(Check::new("w = 0 gives the conditional prediction", cfg_combine(&c, &u, 0.0)? == c, "exact"));
    checks.push(Check::new("w = -1 gives the unconditional prediction", cfg_combine(&c, &u, -1.0)? == u, "exact"));
    let f0 = cfg_combine(&c, &u, 0.0)?;
    let f1 = cfg_combine(&c, &u, 1.0)?;
    let mut worst = 0.0f64;
    for w in [-0.5, 0.3, 2.0, 7.5] {
        let fw = cfg_combine(&c, &u, w)?;
        for i in 0..fw.data.len() {
            worst = worst.max((fw.data[i] - (f0.data[i] + w * (f1.data[i] - f0.data[i]))).abs());
        }
    }
    checks.push(Check::new("linear in w", worst <= 1e-12, format!("max deviation {worst:.1e}")));
    Ok(checks)
}

fn encode_invariants(inst: &InstanceMap, ns: &NucleiStructure) -> std::result::Result<(), String> {
    ns.check_invariants().map_err(|e| e.to_string())?;
    let w = inst.width;
    for (i, &l) in inst.labels.iter().enumerate() {
        if (l != 0) != (ns.semantic()[i] > 0.0) {
            return Err(format!("semantic disagrees with labels at pixel {i}"));
        }
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in inst.labels.iter().enumerate() {
        if l != 0 {
            members.entry(l).or_default().push(i);
        }
    }
    for (id, px) in members {
        let cx = px.iter().map(|&i| (i % w) as f64).sum::<f64>() / px.len() as f64;
        let cy = px.iter().map(|&i| (i / w) as f64).sum::<f64>() / px.len() as f64;
        for (plane, center, coord, what) in
            [(ns.hdist(), cx, (|i: usize, w: usize| i % w) as fn(usize, usize) -> usize, "hdist"), (ns.vdist(), cy, |i, w| i / w, "vdist")]
        {
            let span = px.iter().map(|&i| plane[i].abs()).fold(0.0f32, f32::max);
            let extent = px.iter().map(|&i| (coord(i, w) as f64 - center).abs()).fold(0.0, f64::max);
            if extent > 0.0 && (span - 1.0).abs() > 1e-6 {
                return Err(format!("nucleus {id}: {what} spans to {span}, expected 1"));
            }
            for &i in &px {
                let off = coord(i, w) as f64 - center;
                let v = f64::from(plane[i]);
                if (off < -1e-9 && v >= 0.0) || (off > 1e-9 && v <= 0.0) {
                    return Err(format!("nucleus {id}: {what} sign wrong at pixel {i}"));
                }
            }
        }
    }
    Ok(())
}

/// Encode/decode round trip on 100 random 64x64 maps.
pub fn structure_suite() -> Result<Vec<Check>> {
    let params = WatershedParams::default();
    let results: Vec<(f64, std::result::Result<(), String>)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(501, i);
            let m = random_blob_map(&mut rng, 64, 64, 3..=8, 3..=6, 2);
            let ns = encode_structure(&m);
            let inv = encode_invariants(&m, &ns);
            let rec = reconstruct_instances(&ns, &params).expect("valid params");
            (aji(&rec, &m).expect("same shape"), inv)
        })
        .collect();
    let min = results.iter().map(|r| r.0).fold(1.0, f64::min);
    let mean = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let bad: Vec<String> = results.iter().filter_map(|r| r.1.clone().err()).collect();
    Ok(vec![
        Check::new("round-trip AJI per map >= 0.90", min >= 0.90, format!("min {min:.4} over 100 maps")),
        Check::new("round-trip AJI mean >= 0.95", mean >= 0.95, format!("mean {mean:.4}")),
        Check::new(
            "encode invariants",
            bad.is_empty(),
            bad.first().cloned().unwrap_or_else(|| "range, background zero and spans hold on all maps".into()),
        ),
    ])
}

/// Straightforward AJI: full overlap table, greedy over ground-truth
/// instances in order of their first pixel.
pub fn brute_force_aji(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let gmax = gt.labels.iter().copied().max().unwrap_or(0) as usize;
    let pmax = pred.labels.iter().copied().max().unwrap_or(0) as usize;
    let mut inter = vec![vec![0u64; pmax + 1]; gmax + 1];
    let mut garea = vec![0u64; gmax + 1];
    let mut parea = vec![0u64; pmax + 1];
    let mut gfirst = vec![usize::MAX; gmax + 1];
    let mut pfirst = vec![usize::MAX; pmax + 1];
    for (i, (&g, &p)) in gt.labels.iter().zip(&pred.labels).enumerate() {
        inter[g as usize][p as usize] += 1;
        garea[g as usize] += 1;
        parea[p as usize] += 1;
        gfirst[g as usize] = gfirst[g as usize].min(i);
        pfirst[p as usize] = pfirst[p as usize].min(i);
    }
    let mut gorder: Vec<usize> = (1..=gmax).collect();
    gorder.sort_by_key(|&g| gfirst[g]);
    let mut porder: Vec<usize> = (1..=pmax).collect();
    porder.sort_by_key(|&p| pfirst[p]);
    let (mut num, mut den) = (0u64, 0u64);
    let mut used = vec![false; pmax + 1];
    for g in gorder {
        if garea[g] == 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &p in &porder {
            if used[p] || parea[p] == 0 || inter[g][p] == 0 {
                continue;
            }
            let iou = inter[g][p] as f64 / (garea[g] + parea[p] - inter[g][p]) as f64;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((p, iou));
            }
        }
        match best {
            Some((p, _)) => {
                used[p] = true;
                num += inter[g][p];
                den += garea[g] + parea[p] - inter[g][p];
            }
            None => den += garea[g],
        }
    }
    for p in 1..=pmax {
        if parea[p] > 0 && !used[p] {
            den += parea[p];
        }
    }
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn map(h: usize, w: usize, labels: Vec<u32>) -> InstanceMap {
    InstanceMap::from_vec(h, w, labels).expect("sized")
}

fn random_pair(seed: u64) -> (InstanceMap, InstanceMap) {
    let mut rng = stream_rng(601, seed);
    let gt = random_blob_map(&mut rng, 24, 24, 1..=6, 2..=4, 0);
    let mut pred = if rng.random::<f64>() < 0.5 {
        random_blob_map(&mut rng, 24, 24, 0..=6, 2..=4, 0)
    } else {
        gt.clone()
    };
    // jitter: shift some labels and flip a few pixels
    let shift: i64 = rng.random_range(-2..=2);
    let mut labels = vec![0u32; 24 * 24];
    for y in 0..24i64 {
        for x in 0..24i64 {
            let sx = (x + shift).clamp(0, 23);
            labels[(y * 24 + x) as usize] = pred.labels[(y * 24 + sx) as usize];
        }
    }
    for _ in 0..rng.random_range(0..20) {
        labels[rng.random_range(0..24 * 24)] = rng.random_range(0..8);
    }
    pred = map(24, 24, labels);
    (pred, gt)
}

/// Dice and AJI examples, AJI against a brute-force version, invariances.
pub fn metrics_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let m = |v: &[u32]| map(1, v.len(), v.to_vec());
    let full = [true, true, true, false];
    let examples = [
        ("dice pred = gt", dice(&full, &full)?, 1.0),
        ("dice disjoint", dice(&[true, false], &[false, true])?, 0.0),
        (
            "dice |P|=|G|=4, overlap 2",
            dice(&[true, true, true, true, false, false], &[false, false, true, true, true, true])?,
            0.5,
        ),
        ("dice both empty", dice(&[false; 3], &[false; 3])?, 1.0),
        ("aji permuted ids", aji(&m(&[2, 2, 0, 1, 3]), &m(&[1, 1, 0, 3, 2]))?, 1.0),
        (
            "aji 2x2 nucleus, 2 hits + 1 outside",
            aji(&map(3, 3, vec![1, 1, 1, 0, 0, 0, 0, 0, 0]), &map(3, 3, vec![1, 1, 0, 1, 1, 0, 0, 0, 0]))?,
            0.4,
        ),
        ("aji empty prediction", aji(&m(&[0, 0, 0]), &m(&[1, 1, 0]))?, 0.0),
        ("aji both empty", aji(&m(&[0, 0]), &m(&[0, 0]))?, 1.0),
    ];
    for (name, got, want) in examples {
        checks.push(Check::new(name, got == want, format!("{got} (expected {want})")));
    }
    checks.push(Check::new("dice shape mismatch is an error", dice(&[true], &[true, false]).is_err(), ""));

    let (mut max_gap, mut perm_gap, mut order_violations) = (0.0f64, 0.0f64, 0);
    for i in 0..100 {
        let (pred, gt) = random_pair(i);
        let a = aji(&pred, &gt)?;
        max_gap = max_gap.max((a - brute_force_aji(&pred, &gt)).abs());
        let perm: Vec<u32> = {
            let mut p: Vec<u32> = (0..=8).collect();
            p[1..].rotate_left((i % 7 + 1) as usize);
            p
        };
        let mut reversed: Vec<u32> = (0..=8).collect();
        reversed[1..].reverse();
        perm_gap = perm_gap
            .max((aji(&relabel(&pred, &perm), &gt)? - a).abs())
            .max((aji(&pred, &relabel(&gt, &reversed))? - a).abs())
            .max((aji(&relabel(&pred, &reversed), &relabel(&gt, &perm))? - a).abs());
        if a > binary_dice(&pred, &gt)? + 1e-12 {
            order_violations += 1;
        }
    }
    checks.push(Check::new("aji equals brute force on 100 pairs", max_gap == 0.0, format!("max gap {max_gap:.1e}")));
    checks.push(Check::new("aji invariant to id permutation", perm_gap == 0.0, format!("max change {perm_gap:.1e}")));
    checks.push(Check::new("aji <= dice", order_violations == 0, format!("{order_violations} violations")));
    Ok(checks)
}

/// Scratch directory under the system temp dir, removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Result<Self> {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("nudiff-{tag}-{}-{n}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        io::ensure_dir(&dir)?;
        Ok(Scratch(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

/// Small configuration for the pipeline determinism run.
pub fn pipeline_config() -> RunConfig {
    RunConfig {
        timesteps: 50,
        network: NetworkShape { levels: 2, channels: vec![8, 16], attn_levels: vec![2], resolution: 16, res_blocks: 1, spade_hidden: 8 },
        steps: 0,
        finetune_steps: 0,
        patch_size: 16,
        stride: 8,
        clusters: 3,
        seed: 7,
        ..RunConfig::default()
    }
}

/// Writes a small procedural dataset in the layout `prepare` expects.
pub fn write_toy_dataset(dir: &Path, sources: usize, size: usize, seed: u64) -> Result<()> {
    io::ensure_dir(dir.join("images"))?;
    io::ensure_dir(dir.join("instances"))?;
    for i in 0..sources {
        let mut rng = stream_rng(seed, i as u64);
        let (inst, _, img) = toy_sample(&mut rng, size);
        io::write_image(&img, dir.join("images").join(format!("src{i}.png")))?;
        io::write_instance(&inst, dir.join("instances").join(format!("src{i}.png")))?;
    }
    Ok(())
}

/// Runs prepare, both trainings, synth, decode and evaluate under `root`.
pub fn run_pipeline(root: &Path, cfg: &RunConfig) -> Result<pipeline::PrepareSummary> {
    write_toy_dataset(&root.join("data"), 3, 32, 11)?;
    let prep = root.join("prep");
    let summary = pipeline::prepare(&root.join("data"), &prep, 0.5, cfg)?;
    let manifest = prep.join("manifest.csv");
    pipeline::train_structure(&manifest, &root.join("models/structure.ndck"), cfg)?;
    pipeline::train_image(&manifest, &root.join("models/image.ndck"), cfg)?;
    pipeline::synth(
        &root.join("models/structure.ndck"),
        &root.join("models/image.ndck"),
        2,
        cfg.guidance_w,
        &root.join("synth"),
        cfg,
    )?;
    pipeline::decode(&root.join("synth"), &root.join("synth_decoded"), cfg)?;
    pipeline::decode(&prep.join("patches/structures"), &root.join("real_decoded"), cfg)?;
    pipeline::evaluate(&root.join("real_decoded"), &prep.join("patches/instances"), &root.join("report.csv"))?;
    Ok(summary)
}

/// Every file under `root` with its contents, keyed by relative path.
pub fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(path.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

/// Two identical pipeline runs must produce byte-identical artifacts.
pub fn pipeline_suite() -> Result<Vec<Check>> {
    let cfg = pipeline_config();
    let a = Scratch::new("pipeline-a")?;
    let b = Scratch::new("pipeline-b")?;
    let summary = run_pipeline(&a.0, &cfg)?;
    run_pipeline(&b.0, &cfg)?;
    let (sa, sb) = (snapshot(&a.0)?, snapshot(&b.0)?);
    let differing: Vec<String> = sa
        .keys()
        .chain(sb.keys())
        .filter(|k| sa.get(*k) != sb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let mut checks = vec![Check::new(
        "byte-identical reruns",
        differing.is_empty() && !sa.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts compared", sa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )];
    let expected = (summary.patches as f64 * 0.5).round() as usize;
    checks.push(Check::new(
        "subset size",
        summary.selected == expected,
        format!("{} of {} patches", summary.selected, summary.patches),
    ));
    let report = pipeline::evaluate(
        &a.0.join("prep/patches/instances"),
        &a.0.join("prep/patches/instances"),
        &a.0.join("self.csv"),
    )?;
    checks.push(Check::new(
        "evaluate(pred = gt) is all ones",
        report.per_image.iter().all(|r| r.1 == 1.0 && r.2 == 1.0),
        format!("{} images", report.per_image.len()),
    ));
    let synth = io::list_files(a.0.join("synth"), "nstr")?.len();
    checks.push(Check::new("synth wrote the requested pairs", synth == 2, format!("{synth} structures")));
    Ok(checks)
}

/// Settings of the toy end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub dataset_size: usize,
    pub resolution: usize,
    pub timesteps: usize,
    pub structure_steps: usize,
    pub image_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub drop_rate: f64,
    pub samples: usize,
    pub guidance_w: f64,
    pub validation_draws: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dataset_size: 200,
            resolution: 32,
            timesteps: 250,
            structure_steps: 1500,
            image_steps: 1500,
            lr: 5e-4,
            batch_size: 4,
            drop_rate: 0.2,
            samples: 32,
            guidance_w: 2.0,
            validation_draws: 128,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    pub structure_loss: (f64, f64),
    pub image_loss: (f64, f64),
    pub nonempty_fraction: f64,
    pub alignment: f64,
    /// Dice between each sampled structure's foreground and the dark
    /// (nucleus-colored) pixels of the image sampled under it.
    pub image_alignment: f64,
    /// Mean |eps(x, t, y1) - eps(x, t, y2)| after training, untrained, and
    /// for an ideal denoiser (which is what a trained network approaches).
    pub sensitivity: (f64, f64, f64),
    pub seconds: f64,
}

impl ToyReport {
    pub fn structure_halved(&self) -> bool {
        self.structure_loss.1 <= 0.5 * self.structure_loss.0
    }

    pub fn image_halved(&self) -> bool {
        self.image_loss.1 <= 0.5 * self.image_loss.0
    }

    pub fn sampling_ok(&self) -> bool {
        self.nonempty_fraction >= 0.9 && self.alignment >= 0.7
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new(
                "structure training halves the loss",
                self.structure_halved(),
                format!("{:.4} -> {:.4}", self.structure_loss.0, self.structure_loss.1),
            ),
            Check::new(
                "conditional image training halves the loss",
                self.image_halved(),
                format!("{:.4} -> {:.4}", self.image_loss.0, self.image_loss.1),
            ),
            Check::new(
                "sampled pairs decode with aligned structure",
                self.sampling_ok(),
                format!(
                    "{:.0}% with >= 1 nucleus, mean alignment {:.3}, image/structure Dice {:.3}",
                    100.0 * self.nonempty_fraction,
                    self.alignment,
                    self.image_alignment
                ),
            ),
            Check::new(
                "conditioning is not ignored",
                self.sensitivity.0 > 10.0 * self.sensitivity.1,
                format!(
                    "trained {:.4} vs untrained {:.4} (ideal denoiser {:.4})",
                    self.sensitivity.0, self.sensitivity.1, self.sensitivity.2
                ),
            ),
        ]
    }
}

fn sensitivity(net: &Unet<f32>, a: &NucleiStructure, b: &NucleiStructure, seed: u64, t: usize) -> Result<f64> {
    let mut rng = stream_rng(seed, 0);
    let x = normal_raster(&mut rng, a.raster().shape());
    let ya = net.predict_map(&x, t, Some(a.raster()))?;
    let yb = net.predict_map(&x, t, Some(b.raster()))?;
    Ok(ya.data.iter().zip(&yb.data).map(|(p, q)| f64::from((p - q).abs())).sum::<f64>() / ya.data.len() as f64)
}

/// Pixels whose red channel is well below the background's.
fn dark_mask(img: &ImageRaster) -> Vec<bool> {
    img.raster().plane(0).iter().map(|&r| r < 0.2).collect()
}

/// Trains both models on procedural data, then samples and decodes pairs.
pub fn run_toy(tc: &ToyConfig) -> Result<ToyReport> {
    let start = Instant::now();
    let sched = NoiseSchedule::linear(tc.timesteps, 1e-4, 0.02)?;
    let shape = NetworkShape { resolution: tc.resolution, ..NetworkShape::desk_default() };
    let mut rng = stream_rng(tc.seed, 0);
    let data: Vec<_> = (0..tc.dataset_size).map(|_| toy_sample(&mut rng, tc.resolution)).collect();

    let structures: Vec<TrainingPair> =
        data.iter().map(|(_, ns, _)| TrainingPair { target: ns.raster().clone(), cond: None }).collect();
    let mut s_net = Unet::<f32>::new(shape.clone(), false, tc.seed + 1)?;
    let s0 = validation_loss(&s_net, &structures, &sched, tc.validation_draws, tc.seed + 2)?;
    let mut opt = AdamW::new(s_net.params(), tc.lr);
    let options = TrainOptions { steps: tc.structure_steps, batch_size: tc.batch_size, drop_rate: 0.0 };
    let mut train_rng = stream_rng(tc.seed + 3, 0);
    train(&mut s_net, &structures, &sched, &mut opt, &options, &mut train_rng, |step, loss| {
        if step % 250 == 0 {
            log::info!("toy structure step {step} loss {loss:.4}");
        }
    })?;
    let s1 = validation_loss(&s_net, &structures, &sched, tc.validation_draws, tc.seed + 2)?;

    let images: Vec<TrainingPair> = data
        .iter()
        .map(|(_, ns, img)| TrainingPair { target: img.raster().clone(), cond: Some(ns.clone()) })
        .collect();
    let mut i_net = Unet::<f32>::new(shape, true, tc.seed + 4)?;
    let probe_a = &data[0].1;
    let probe_b = &data[1].1;
    let sens0 = sensitivity(&i_net, probe_a, probe_b, tc.seed + 5, tc.timesteps / 2)?;
    let i0 = validation_loss(&i_net, &images, &sched, tc.validation_draws, tc.seed + 6)?;
    let mut opt = AdamW::new(i_net.params(), tc.lr);
    let options = TrainOptions { steps: tc.image_steps, batch_size: tc.batch_size, drop_rate: tc.drop_rate };
    let mut train_rng = stream_rng(tc.seed + 7, 0);
    train(&mut i_net, &images, &sched, &mut opt, &options, &mut train_rng, |step, loss| {
        if step % 250 == 0 {
            log::info!("toy image step {step} loss {loss:.4}");
        }
    })?;
    let i1 = validation_loss(&i_net, &images, &sched, tc.validation_draws, tc.seed + 6)?;
    let sens1 = sensitivity(&i_net, probe_a, probe_b, tc.seed + 5, tc.timesteps / 2)?;
    // texture is a function of structure, so an exact denoiser's prediction
    // moves by sqrt(abar / (1 - abar)) times the change in the clean image
    let ab = sched.alpha_bar(tc.timesteps / 2);
    let (ia, ib) = (data[0].2.raster(), data[1].2.raster());
    let dx0 = ia.data.iter().zip(&ib.data).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / ia.data.len() as f64;
    let ideal = (ab / (1.0 - ab)).sqrt() * dx0;

    let r = tc.resolution;
    let params = WatershedParams::default();
    let results = (0..tc.samples)
        .into_par_iter()
        .map(|i| -> Result<(bool, f64, f64)> {
            let mut rng = stream_rng(tc.seed + 8, i as u64);
            let raw = sample(&s_net, (3, r, r), &sched, None, 0.0, &mut rng)?;
            let ns = NucleiStructure::new(raw)?.sanitize();
            let img = ImageRaster::clamped(sample(&i_net, (3, r, r), &sched, Some(&ns), tc.guidance_w, &mut rng)?)?;
            let inst = reconstruct_instances(&ns, &params)?;
            let fg = ns.foreground(params.semantic_threshold);
            let align = dice(&fg, &inst.foreground())?;
            let img_align = dice(&fg, &dark_mask(&img))?;
            Ok((inst.count() > 0, align, img_align))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    Ok(ToyReport {
        structure_loss: (s0, s1),
        image_loss: (i0, i1),
        nonempty_fraction: results.iter().filter(|r| r.0).count() as f64 / n,
        alignment: results.iter().map(|r| r.1).sum::<f64>() / n,
        image_alignment: results.iter().map(|r| r.2).sum::<f64>() / n,
        sensitivity: (sens1, sens0, ideal),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn toy_suite(tc: &ToyConfig) -> Result<ToyReport> {
    run_toy(tc)
}

/// Fraction of null conditions over 10^4 steps at drop rate 0.2, plus the
/// drop rate 0 and determinism contracts.
pub fn dropout_suite() -> Result<Vec<Check>> {
    let shape = NetworkShape { levels: 1, channels: vec![4], attn_levels: vec![], resolution: 4, res_blocks: 1, spade_hidden: 4 };
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02)?;
    let mut rng = stream_rng(901, 0);
    let data: Vec<TrainingPair> = (0..4)
        .map(|_| {
            let (_, ns, img) = toy_sample(&mut rng, 4);
            TrainingPair { target: img.into_raster(), cond: Some(ns) }
        })
        .collect();
    let run = |drop_rate: f64, steps: usize| -> Result<(Unet<f32>, nudiff_core::nn::TrainReport)> {
        let mut net = Unet::<f32>::new(shape.clone(), true, 902)?;
        let mut opt = AdamW::new(net.params(), 1e-3);
        let mut rng = stream_rng(903, 0);
        let options = TrainOptions { steps, batch_size: 1, drop_rate };
        let report = train(&mut net, &data, &sched, &mut opt, &options, &mut rng, |_, _| {})?;
        Ok((net, report))
    };
    let (_, r) = run(0.2, 10_000)?;
    let f = r.null_fraction();
    let (_, r0) = run(0.0, 500)?;
    let (a, ra) = run(0.2, 50)?;
    let (b, rb) = run(0.2, 50)?;
    Ok(vec![
        Check::new(
            "null fraction at drop_rate 0.2",
            (0.17..=0.23).contains(&f),
            format!("{f:.4} ({} of {} samples)", r.null_count, r.samples),
        ),
        Check::new("drop_rate 0 never drops", r0.null_count == 0, format!("{} samples", r0.samples)),
        Check::new("fixed seed gives identical parameters", a.params() == b.params() && ra == rb, "50 steps twice"),
    ])
}

/// File-format round trips and error cases.
pub fn io_suite() -> Result<Vec<Check>> {
    let dir = Scratch::new("io")?;
    let mut checks = Vec::new();
    let mut rng = stream_rng(1001, 0);
    let mut r = Raster::zeros(3, 7, 5);
    for v in &mut r.data {
        *v = io::byte_to_unit(rng.random());
    }
    let img = ImageRaster::new(r)?;
    let p = dir.0.join("img.png");
    io::write_image(&img, &p)?;
    let first = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let back = io::read_image(&p)?;
    io::write_image(&back, &p)?;
    let second = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    checks.push(Check::new("image round trip", back == img && first == second, "pixels and file bytes identical"));

    let zeros = Raster::filled(3, 2, 2, -1.0);
    io::write_image(&ImageRaster::new(zeros.clone())?, &p)?;
    checks.push(Check::new("byte 0 reads as -1", io::read_image(&p)?.raster() == &zeros, ""));

    let inst = map(3, 4, vec![0, 1, 1, 0, 2, 2, 0, 65535, 0, 0, 3, 3]);
    let ip = dir.0.join("inst.png");
    io::write_instance(&inst, &ip)?;
    checks.push(Check::new("instance round trip", io::read_instance(&ip)? == inst, "ids up to 65535"));
    let over = map(1, 2, vec![0, 70000]);
    checks.push(Check::new("instance id overflow rejected", io::write_instance(&over, &ip).is_err(), ""));
    checks.push(Check::new(
        "instance PNG read as image rejected",
        io::write_instance(&inst, &ip).is_ok() && io::read_image(&ip).is_err(),
        "",
    ));

    let mut rng = stream_rng(1002, 0);
    let ns = NucleiStructure::new(normal_raster(&mut rng, (3, 6, 9)))?;
    let sp = dir.0.join("s.nstr");
    io::write_structure(&ns, &sp)?;
    let back = io::read_structure(&sp)?;
    let exact = back.raster().data.iter().zip(&ns.raster().data).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(Check::new("structure round trip bit-exact", exact && back.raster().shape() == (3, 6, 9), ""));
    let bytes = io::encode_nstr(&NucleiStructure::new(Raster::zeros(3, 2, 2))?);
    checks.push(Check::new("2x2 structure is 64 bytes", bytes.len() == 64, format!("{} bytes", bytes.len())));
    let mut four = bytes.clone();
    four[12] = 4;
    checks.push(Check::new("C = 4 rejected", io::decode_nstr(&four, Path::new("c4")).is_err(), ""));
    checks.push(Check::new(
        "truncated payload rejected",
        io::decode_nstr(&bytes[..60], Path::new("short")).is_err(),
        "",
    ));
    checks.push(Check::new("empty config gives defaults", RunConfig::parse("")? == RunConfig::default(), ""));
    checks.push(Check::new("T=0 rejected", RunConfig::parse("T=0").is_err(), ""));
    Ok(checks)
}

/// Patch tiling, clustering and subset selection properties.
pub fn dataset_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let o = window_origins(1000, 256, 128);
    checks.push(Check::new(
        "1000 px, size 256, stride 128",
        o == vec![0, 128, 256, 384, 512, 640, 744] && o.len() * o.len() == 49,
        format!("{o:?}"),
    ));
    checks.push(Check::new("512 px gives 9 patches", window_origins(512, 256, 128).len().pow(2) == 9, ""));

    let mut rng = stream_rng(1101, 0);
    let (inst, _, img) = toy_sample(&mut rng, 64);
    let set = extract_patches("toy", &img, &inst, 16, 8)?;
    let mut covered = vec![false; 64 * 64];
    for e in &set.entries {
        for y in e.row..e.row + 16 {
            for x in e.col..e.col + 16 {
                covered[y * 64 + x] = true;
            }
        }
    }
    checks.push(Check::new("tiling covers every pixel", covered.iter().all(|&c| c), format!("{} patches", set.len())));

    let features: Vec<_> = set
        .entries
        .iter()
        .map(|e| nudiff_core::dataset::patch_features(&e.image, &e.instances))
        .collect::<std::result::Result<_, _>>()?;
    let unit = features.iter().all(|f| (f.0.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    checks.push(Check::new("features are unit length", unit, ""));
    let a = kmeans(&features, 3, 5, 100)?;
    let monotone = a.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    checks.push(Check::new("k-means objective non-increasing", monotone, format!("{} passes", a.objective.len())));
    checks.push(Check::new("k-means deterministic", kmeans(&features, 3, 5, 100)? == a, ""));
    let mut sizes_ok = true;
    for p in [0.1, 0.2, 0.5, 1.0] {
        sizes_ok &= select_indices(&set, &a, p)?.len() == (p * set.len() as f64).round() as usize;
    }
    checks.push(Check::new("subset size = round(p * total)", sizes_ok, "p in {0.1, 0.2, 0.5, 1.0}"));
    Ok(checks)
}
