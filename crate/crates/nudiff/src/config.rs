//! Flat `key=value` run configuration.
//!
//! One key per line; `#` starts a comment; blank lines are ignored. Keys not
//! given keep their defaults.

use std::fs;
use std::path::Path;

use nudiff_core::diffusion::NoiseSchedule;
use nudiff_core::nn::NetworkShape;
use nudiff_core::structure::WatershedParams;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; each subcommand derives its own seeds from it by role.
    pub seed: u64,

    pub timesteps: usize,
    pub beta_1: f64,
    pub beta_t: f64,

    pub network: NetworkShape,

    pub batch_size: usize,
    /// Learning rate of structure training and of the first image phase.
    pub lr: f64,
    /// Learning rate of the classifier-free fine-tuning phase.
    pub finetune_lr: f64,
    /// Condition dropout of the fine-tuning phase.
    pub drop_rate: f64,
    pub steps: usize,
    pub finetune_steps: usize,

    pub guidance_w: f64,
    pub sample_count: usize,

    pub watershed: WatershedParams,

    pub patch_size: usize,
    pub stride: usize,

    pub clusters: usize,
    pub kmeans_max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            timesteps: 1000,
            beta_1: 1e-4,
            beta_t: 0.02,
            network: NetworkShape::desk_default(),
            batch_size: 4,
            lr: 1e-4,
            finetune_lr: 2e-5,
            drop_rate: 0.2,
            steps: 2000,
            finetune_steps: 500,
            guidance_w: 2.0,
            sample_count: 512,
            watershed: WatershedParams::default(),
            patch_size: 256,
            stride: 128,
            clusters: 6,
            kmeans_max_iter: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config { line, message: format!("cannot parse {key} = {value:?}") })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim(), line)).collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config { line, message: format!("expected key=value, got {content:?}") })?;
            match key {
                "seed" => c.seed = parse(key, value, line)?,
                "T" | "timesteps" => c.timesteps = parse(key, value, line)?,
                "beta_1" => c.beta_1 = parse(key, value, line)?,
                "beta_T" => c.beta_t = parse(key, value, line)?,
                "levels" => c.network.levels = parse(key, value, line)?,
                "channels" => c.network.channels = parse_list(key, value, line)?,
                "attn_levels" => c.network.attn_levels = parse_list(key, value, line)?,
                "resolution" => c.network.resolution = parse(key, value, line)?,
                "res_blocks" => c.network.res_blocks = parse(key, value, line)?,
                "spade_hidden" => c.network.spade_hidden = parse(key, value, line)?,
                "batch_size" => c.batch_size = parse(key, value, line)?,
                "lr" => c.lr = parse(key, value, line)?,
                "finetune_lr" => c.finetune_lr = parse(key, value, line)?,
                "drop_rate" => c.drop_rate = parse(key, value, line)?,
                "steps" => c.steps = parse(key, value, line)?,
                "finetune_steps" => c.finetune_steps = parse(key, value, line)?,
                "guidance_w" => c.guidance_w = parse(key, value, line)?,
                "sample_count" => c.sample_count = parse(key, value, line)?,
                "semantic_threshold" => c.watershed.semantic_threshold = parse(key, value, line)?,
                "energy_threshold" => c.watershed.energy_threshold = parse(key, value, line)?,
                "min_marker_area" => c.watershed.min_marker_area = parse(key, value, line)?,
                "patch_size" => c.patch_size = parse(key, value, line)?,
                "stride" => c.stride = parse(key, value, line)?,
                "k" | "clusters" => c.clusters = parse(key, value, line)?,
                "kmeans_max_iter" => c.kmeans_max_iter = parse(key, value, line)?,
                _ => return Err(Error::Config { line, message: format!("unknown key {key:?}") }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::Config { line: 0, message });
        if self.timesteps < 1 {
            return fail(format!("T = {} must be at least 1", self.timesteps));
        }
        if !(self.beta_1 > 0.0 && self.beta_1 <= self.beta_t && self.beta_t < 1.0) {
            return fail(format!("need 0 < beta_1 <= beta_T < 1, got {} and {}", self.beta_1, self.beta_t));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if self.guidance_w.is_nan() || self.guidance_w < -1.0 {
            return fail(format!("guidance_w {} below -1", self.guidance_w));
        }
        if self.clusters < 1 {
            return fail("k must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.patch_size < 1 || self.stride < 1 {
            return fail("patch_size and stride must be positive".into());
        }
        self.network.validate().or_else(|e| fail(e.to_string()))?;
        self.watershed.validate().or_else(|e| fail(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_1, self.beta_t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.timesteps, c.guidance_w, c.clusters), (1000, 2.0, 6));
    }

    #[test]
    fn values_comments_and_lists() {
        let c = RunConfig::parse("# run\nguidance_w=0\n  channels = 8, 16 # widths\nlevels=2\nattn_levels=\n").unwrap();
        assert_eq!(c.guidance_w, 0.0);
        assert_eq!(c.network.channels, vec![8, 16]);
        assert!(c.network.attn_levels.is_empty());
    }

    #[test]
    fn errors() {
        for bad in ["T=0", "nope=1", "T=ten", "drop_rate=1", "guidance_w=-2", "k=0", "beta_1=0.5\nbeta_T=0.1", "levels=4", "x"] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
    }
}
