//! The subcommand workflows: prepare, train, synth, decode, evaluate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use nudiff_core::dataset::{downsample_pair, extract_patches, kmeans, patch_features, select_indices, PatchSet};
use nudiff_core::diffusion::sample;
use nudiff_core::metrics::MetricReport;
use nudiff_core::nn::{train, AdamW, TrainOptions, TrainReport, TrainingPair, Unet};
use nudiff_core::rng::{derive_seed, stream_rng};
use nudiff_core::structure::{encode_structure, reconstruct_instances, NucleiStructure};
use nudiff_core::{ImageRaster, InstanceMap};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::io::{
    ensure_dir, list_files, read_image, read_instance, read_structure, write_image, write_instance, write_structure,
};
use crate::manifest::{read_manifest, write_manifest, ManifestEntry, Origin};
use crate::{checkpoint, Error, Result};

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub sources: usize,
    pub patches: usize,
    pub selected: usize,
}

/// Tiles every `DATA/images/<name>.png` with its `DATA/instances/<name>.png`,
/// writes all patches (image, instances, structure), their features and
/// cluster assignment, and a manifest of the `proportion` subset. Manifest
/// paths are relative to `out`.
pub fn prepare(data: &Path, out: &Path, proportion: f64, cfg: &RunConfig) -> Result<PrepareSummary> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Invalid(format!("proportion {proportion} outside (0, 1]")));
    }
    let images = list_files(data.join("images"), "png")?;
    if images.is_empty() {
        return Err(Error::Invalid(format!("no images under {}", data.join("images").display())));
    }
    let mut patches = PatchSet::new(cfg.patch_size);
    for img_path in &images {
        let name = stem(img_path);
        let inst_path = data.join("instances").join(format!("{name}.png"));
        if !inst_path.is_file() {
            return Err(Error::Invalid(format!("missing instance map {} for {}", inst_path.display(), img_path.display())));
        }
        let img = read_image(img_path)?;
        let inst = read_instance(&inst_path)?;
        patches.extend(extract_patches(&name, &img, &inst, cfg.patch_size, cfg.stride)?)?;
    }
    info!("{} patches from {} sources", patches.len(), images.len());

    let ids: Vec<String> = patches
        .entries
        .iter()
        .map(|e| format!("{}_r{:05}_c{:05}", e.source, e.row, e.col))
        .collect();
    let rel_img = |id: &str| PathBuf::from("patches/images").join(format!("{id}.png"));
    let rel_inst = |id: &str| PathBuf::from("patches/instances").join(format!("{id}.png"));
    for d in ["patches/images", "patches/instances", "patches/structures"] {
        ensure_dir(out.join(d))?;
    }
    patches.entries.par_iter().zip(&ids).try_for_each(|(e, id)| -> Result<()> {
        write_image(&e.image, out.join(rel_img(id)))?;
        write_instance(&e.instances, out.join(rel_inst(id)))?;
        write_structure(&encode_structure(&e.instances), out.join("patches/structures").join(format!("{id}.nstr")))
    })?;

    let features = patches
        .entries
        .par_iter()
        .map(|e| patch_features(&e.image, &e.instances))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut text = String::from("patch_id");
    (0..features.first().map_or(0, |f| f.0.len())).for_each(|i| text.push_str(&format!(",f{i}")));
    text.push('\n');
    for (id, f) in ids.iter().zip(&features) {
        text.push_str(id);
        f.0.iter().for_each(|v| text.push_str(&format!(",{v}")));
        text.push('\n');
    }
    write_text(&out.join("features.csv"), &text)?;

    let k = cfg.clusters.min(features.len());
    if k < cfg.clusters {
        log::warn!("only {} patches; clustering with k = {k} instead of {}", features.len(), cfg.clusters);
    }
    let assignment = kmeans(&features, k, derive_seed(cfg.seed, "kmeans"), cfg.kmeans_max_iter)?;
    let mut text = String::from("patch_id,cluster,distance\n");
    for ((id, l), d) in ids.iter().zip(&assignment.labels).zip(&assignment.distances) {
        text.push_str(&format!("{id},{},{d}\n", l + 1));
    }
    write_text(&out.join("clusters.csv"), &text)?;

    let selected = select_indices(&patches, &assignment, proportion)?;
    let entries: Vec<ManifestEntry> = selected
        .iter()
        .map(|&i| ManifestEntry { image_path: rel_img(&ids[i]), instance_path: rel_inst(&ids[i]), origin: Origin::Real })
        .collect();
    write_manifest(&entries, out.join("manifest.csv"))?;
    Ok(PrepareSummary { sources: images.len(), patches: patches.len(), selected: entries.len() })
}

/// Manifest entries with paths resolved against the manifest's directory.
pub fn load_manifest_pairs(manifest: &Path, resolution: usize) -> Result<Vec<(ImageRaster, InstanceMap)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Invalid(format!("{}: empty manifest", manifest.display())));
    }
    entries
        .par_iter()
        .map(|e| {
            let img = read_image(base.join(&e.image_path))?;
            let inst = read_instance(base.join(&e.instance_path))?;
            let (h, w) = (img.height(), img.width());
            if h != w || h % resolution != 0 {
                return Err(Error::Invalid(format!(
                    "{}: {h}x{w} patch cannot be reduced to {resolution}x{resolution}",
                    e.image_path.display()
                )));
            }
            Ok(downsample_pair(&img, &inst, h / resolution)?)
        })
        .collect()
}

fn loss_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn phases_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("phases.csv")
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(path, &text)
}

/// One training phase as logged next to the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub name: &'static str,
    pub drop_rate: f64,
    pub lr: f64,
    pub steps: usize,
}

fn write_phases(path: &Path, phases: &[Phase]) -> Result<()> {
    let mut text = String::from("phase,drop_rate,lr,steps\n");
    for p in phases {
        text.push_str(&format!("{},{},{},{}\n", p.name, p.drop_rate, p.lr, p.steps));
    }
    write_text(path, &text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub phases: Vec<Phase>,
    pub losses: Vec<f64>,
    pub null_count: usize,
}

fn run_phases(net: &mut Unet<f32>, pairs: &[TrainingPair], cfg: &RunConfig, role: &str, phases: &[Phase]) -> Result<TrainSummary> {
    let sched = cfg.schedule()?;
    let mut opt = AdamW::new(net.params(), cfg.lr);
    let mut rng = stream_rng(derive_seed(cfg.seed, role), 0);
    let mut losses = Vec::new();
    let mut null_count = 0;
    for p in phases {
        info!("{role} {}: drop_rate {} lr {:e} for {} steps", p.name, p.drop_rate, p.lr, p.steps);
        opt.lr = p.lr;
        let options = TrainOptions { steps: p.steps, batch_size: cfg.batch_size, drop_rate: p.drop_rate };
        let offset = losses.len();
        let report: TrainReport = train(net, pairs, &sched, &mut opt, &options, &mut rng, |step, loss| {
            if step % 100 == 0 {
                info!("{role} step {} loss {loss:.5}", offset + step);
            }
        })?;
        losses.extend(report.losses);
        null_count += report.null_count;
    }
    Ok(TrainSummary { phases: phases.to_vec(), losses, null_count })
}

fn finish_training(net: &Unet<f32>, out: &Path, summary: &TrainSummary) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    checkpoint::save(net, out)?;
    write_losses(&loss_path(out), &summary.losses)?;
    write_phases(&phases_path(out), &summary.phases)
}

/// Trains the unconditional structure model on the manifest's instance maps.
pub fn train_structure(manifest: &Path, out: &Path, cfg: &RunConfig) -> Result<TrainSummary> {
    let pairs: Vec<TrainingPair> = load_manifest_pairs(manifest, cfg.network.resolution)?
        .iter()
        .map(|(_, inst)| TrainingPair { target: encode_structure(inst).into_raster(), cond: None })
        .collect();
    let mut net = Unet::new(cfg.network.clone(), false, derive_seed(cfg.seed, "structure-init"))?;
    let phases = [Phase { name: "unconditional", drop_rate: 0.0, lr: cfg.lr, steps: cfg.steps }];
    let summary = run_phases(&mut net, &pairs, cfg, "structure-train", &phases)?;
    finish_training(&net, out, &summary)?;
    Ok(summary)
}

/// Trains the conditional image model: fully conditional first, then
/// classifier-free fine-tuning with condition dropout.
pub fn train_image(manifest: &Path, out: &Path, cfg: &RunConfig) -> Result<TrainSummary> {
    let pairs: Vec<TrainingPair> = load_manifest_pairs(manifest, cfg.network.resolution)?
        .into_iter()
        .map(|(img, inst)| TrainingPair { target: img.into_raster(), cond: Some(encode_structure(&inst)) })
        .collect();
    let mut net = Unet::new(cfg.network.clone(), true, derive_seed(cfg.seed, "image-init"))?;
    let phases = [
        Phase { name: "conditional", drop_rate: 0.0, lr: cfg.lr, steps: cfg.steps },
        Phase { name: "classifier-free", drop_rate: cfg.drop_rate, lr: cfg.finetune_lr, steps: cfg.finetune_steps },
    ];
    let summary = run_phases(&mut net, &pairs, cfg, "image-train", &phases)?;
    finish_training(&net, out, &summary)?;
    Ok(summary)
}

/// One synthetic pair: a sanitized sampled structure and the image sampled
/// under it with guidance `w`.
pub fn synth_pair(
    structure_net: &Unet<f32>,
    image_net: &Unet<f32>,
    cfg: &RunConfig,
    w: f64,
    index: usize,
) -> Result<(NucleiStructure, ImageRaster)> {
    let sched = cfg.schedule()?;
    let r = structure_net.shape().resolution;
    let mut rng = stream_rng(derive_seed(cfg.seed, "synth"), index as u64);
    let raw = sample(structure_net, (3, r, r), &sched, None, 0.0, &mut rng)?;
    let ns = NucleiStructure::new(raw)?.sanitize();
    let img = sample(image_net, (3, r, r), &sched, Some(&ns), w, &mut rng)?;
    Ok((ns, ImageRaster::clamped(img)?))
}

pub fn check_model_pair(structure_net: &Unet<f32>, image_net: &Unet<f32>) -> Result<()> {
    if structure_net.is_conditional() {
        return Err(Error::Invalid("structure checkpoint is conditional; expected the unconditional model".into()));
    }
    if !image_net.is_conditional() {
        return Err(Error::Invalid("image checkpoint is unconditional; expected the conditional model".into()));
    }
    if structure_net.shape().resolution != image_net.shape().resolution {
        return Err(Error::Invalid(format!(
            "checkpoint shape mismatch: structure model at {} px, image model at {} px",
            structure_net.shape().resolution,
            image_net.shape().resolution
        )));
    }
    Ok(())
}

/// Writes `count` pairs as `sample_NNNNN.nstr` / `sample_NNNNN.png`.
pub fn synth(structure_ckpt: &Path, image_ckpt: &Path, count: usize, w: f64, out: &Path, cfg: &RunConfig) -> Result<usize> {
    if w.is_nan() || w < -1.0 {
        return Err(Error::Invalid(format!("guidance weight {w} below -1")));
    }
    let s_net = checkpoint::load(structure_ckpt)?;
    let i_net = checkpoint::load(image_ckpt)?;
    check_model_pair(&s_net, &i_net)?;
    if count == 0 {
        return Ok(0);
    }
    ensure_dir(out)?;
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let (ns, img) = synth_pair(&s_net, &i_net, cfg, w, i)?;
        write_structure(&ns, out.join(format!("sample_{i:05}.nstr")))?;
        write_image(&img, out.join(format!("sample_{i:05}.png")))?;
        info!("sample {i} written");
        Ok(())
    })?;
    Ok(count)
}

/// Reconstructs an instance map for every `.nstr` file in `structures`.
pub fn decode(structures: &Path, out: &Path, cfg: &RunConfig) -> Result<usize> {
    let files = list_files(structures, "nstr")?;
    ensure_dir(out)?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let ns = read_structure(f)?;
        let inst = reconstruct_instances(&ns, &cfg.watershed)?;
        write_instance(&inst, out.join(format!("{}.png", stem(f))))
    })?;
    Ok(files.len())
}

/// Scores every ground-truth map in `gt` against the same-named prediction.
/// Writes `image_id,dice,aji` rows and a final `mean` row.
pub fn evaluate(pred: &Path, gt: &Path, out: &Path) -> Result<MetricReport> {
    let gts = list_files(gt, "png")?;
    let maps = gts
        .par_iter()
        .map(|g| {
            let name = g.file_name().expect("listed file");
            let p = pred.join(name);
            if !p.is_file() {
                return Err(Error::Invalid(format!("no prediction {} for {}", p.display(), g.display())));
            }
            Ok((stem(g), read_instance(&p)?, read_instance(g)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::compute(maps.iter().map(|(id, p, g)| (id.clone(), p, g)))?;
    let mut text = String::from("image_id,dice,aji\n");
    for (id, d, a) in &report.per_image {
        text.push_str(&format!("{id},{d},{a}\n"));
    }
    text.push_str(&format!("mean,{},{}\n", report.dice, report.aji));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(out, &text)?;
    Ok(report)
}
