//! Command line parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::config::RunConfig;
use crate::{io, pipeline, verify, Result};

#[derive(Debug, Parser)]
#[command(name = "nudiff", version, about = "Paired nuclei structure and image synthesis with diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key=value` run configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the master seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile a dataset into patches, cluster them and write a subset manifest.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        proportion: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train the unconditional structure model.
    TrainStructure {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the structure-conditioned image model in two phases.
    TrainImage {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample paired structures and images.
    Synth {
        #[arg(long)]
        structure_ckpt: PathBuf,
        #[arg(long)]
        image_ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        /// Guidance scale; defaults to `guidance_w` of the configuration.
        #[arg(long, allow_hyphen_values = true)]
        w: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Encode instance maps (16-bit PNG) into structure files.
    Encode {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct instance maps from structure files.
    Decode {
        #[arg(long)]
        structures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted instance maps against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a verification suite, or `all`.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::TrainStructure { common, .. }
            | Command::TrainImage { common, .. }
            | Command::Synth { common, .. }
            | Command::Encode { common, .. }
            | Command::Decode { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Verify { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Structure files for every instance map in `dir`.
pub fn encode_dir(instances: &Path, out: &Path) -> Result<usize> {
    use rayon::prelude::*;
    let files = io::list_files(instances, "png")?;
    io::ensure_dir(out)?;
    files.par_iter().try_for_each(|f| -> Result<()> {
        let inst = io::read_instance(f)?;
        let stem = f.file_stem().expect("listed file").to_string_lossy();
        io::write_structure(&nudiff_core::structure::encode_structure(&inst), out.join(format!("{stem}.nstr")))
    })?;
    Ok(files.len())
}

/// Outcome of a parsed command: `Ok(true)` success, `Ok(false)` a failed
/// verification.
pub fn execute(command: &Command) -> Result<bool> {
    let cfg = load_config(command.common())?;
    match command {
        Command::Prepare { data, out, proportion, .. } => {
            let s = pipeline::prepare(data, out, *proportion, &cfg)?;
            println!("{} sources, {} patches, {} selected", s.sources, s.patches, s.selected);
        }
        Command::TrainStructure { manifest, out, .. } => {
            let s = pipeline::train_structure(manifest, out, &cfg)?;
            println!("trained {} steps, final loss {}", s.losses.len(), s.losses.last().map_or("n/a".into(), |l| format!("{l:.5}")));
        }
        Command::TrainImage { manifest, out, .. } => {
            let s = pipeline::train_image(manifest, out, &cfg)?;
            println!(
                "trained {} steps ({} null conditions), final loss {}",
                s.losses.len(),
                s.null_count,
                s.losses.last().map_or("n/a".into(), |l| format!("{l:.5}"))
            );
        }
        Command::Synth { structure_ckpt, image_ckpt, count, w, out, .. } => {
            let n = pipeline::synth(structure_ckpt, image_ckpt, *count, w.unwrap_or(cfg.guidance_w), out, &cfg)?;
            println!("wrote {n} pairs");
        }
        Command::Encode { instances, out, .. } => println!("encoded {} maps", encode_dir(instances, out)?),
        Command::Decode { structures, out, .. } => println!("decoded {} structures", pipeline::decode(structures, out, &cfg)?),
        Command::Evaluate { pred, gt, out, .. } => {
            let r = pipeline::evaluate(pred, gt, out)?;
            println!("{} images, dice {:.4}, aji {:.4}", r.per_image.len(), r.dice, r.aji);
        }
        Command::Verify { suite, .. } => {
            let mut ok = true;
            for report in verify::run(suite)? {
                for c in &report.checks {
                    println!("[{}] {} {}: {}", report.suite, if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                info!("suite {} took {:.1}s", report.suite, report.seconds);
                ok &= report.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn configure_threads() {
    if let Some(n) = std::env::var("NUDIFF_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; NUDIFF_THREADS ignored");
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 failure, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}
