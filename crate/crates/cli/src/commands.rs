use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use halluc_core::pipeline::{run_cells, write_csv, Schedule, TrainConfig, VariantSetting};
use halluc_core::synthworld::generate_world;
use halluc_core::{KvCodec, Rng};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Sweep dimensions of `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    EmVsJoint,
    NumHalluc,
    HeadKind,
    Variant,
    Shots,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::EmVsJoint => "em_vs_joint",
            Axis::NumHalluc => "num_halluc",
            Axis::HeadKind => "head_kind",
            Axis::Variant => "variant",
            Axis::Shots => "shots",
        }
    }
}

pub const HALLUC_GRID: [usize; 7] = [0, 1, 2, 3, 5, 10, 20];
pub const SHOT_GRID: [usize; 5] = [1, 2, 3, 5, 10];

/// The cells of a sweep, each differing from `base` only along `axis`.
/// Head-kind and shot sweeps carry a hallucination-free partner for every value.
pub fn ablation_cells(base: &TrainConfig, axis: Axis) -> Vec<TrainConfig> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let pair = |c: TrainConfig| vec![TrainConfig { m: 0, ..c.clone() }, c];
    match axis {
        Axis::EmVsJoint => vec![
            with(&|c| c.schedule = Schedule::Joint),
            with(&|c| {
                c.schedule = Schedule::Em;
                c.em_iterations = 1
            }),
            with(&|c| {
                c.schedule = Schedule::Em;
                c.em_iterations = 2
            }),
        ],
        Axis::NumHalluc => HALLUC_GRID.iter().map(|&m| with(&|c| c.m = m)).collect(),
        Axis::HeadKind => [halluc_core::heads::HeadKind::Cosine, halluc_core::heads::HeadKind::FullyConnected]
            .into_iter()
            .flat_map(|k| pair(with(&|c| c.head_kind = k)))
            .collect(),
        Axis::Variant => [VariantSetting::None, VariantSetting::Conservative, VariantSetting::Aggressive]
            .into_iter()
            .map(|v| with(&|c| c.variant = v))
            .collect(),
        Axis::Shots => SHOT_GRID
            .iter()
            .flat_map(|&k| pair(with(&|c| c.shot = k)))
            .collect(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    axis: Option<&'a str>,
    config: &'a ExperimentConfig,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_manifest(config: &ExperimentConfig, command: &str, axis: Option<&str>) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        tool: "halluc",
        version: env!("CARGO_PKG_VERSION"),
        command,
        axis,
        config,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    let path = config.run.out.join("manifest.toml");
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Samples the world of the first configured seed and writes it with a manifest.
pub fn gen_world(config: &ExperimentConfig) -> Result<(PathBuf, f64), CliError> {
    let seed = *config
        .run
        .seeds
        .first()
        .ok_or_else(|| CliError::Argument("no seeds configured".into()))?;
    let world = generate_world(&config.world, &mut Rng::new(seed, "run").fork("world"))?;
    prepare_out(&config.run.out)?;
    let path = config.run.out.join("world.kv");
    write_file(&path, world.to_kv_string().as_bytes())?;
    write_manifest(config, "gen-world", None)?;
    Ok((path, world.orthonormality_error()))
}

fn run_and_write(config: &ExperimentConfig, cells: &[TrainConfig], command: &str, axis: Option<&str>) -> Result<PathBuf, CliError> {
    let reports = run_cells(&config.world, cells, &config.run.seeds)?;
    let mut buf = Vec::new();
    let base = config.world.base_classes;
    write_csv(&reports, base..base + config.world.novel_classes, &mut buf)?;
    prepare_out(&config.run.out)?;
    let path = config.run.out.join("results.csv");
    write_file(&path, &buf)?;
    write_manifest(config, command, axis)?;
    Ok(path)
}

pub fn train(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    run_and_write(config, std::slice::from_ref(&config.train), "train", None)
}

pub fn ablate(config: &ExperimentConfig, axis: Axis) -> Result<PathBuf, CliError> {
    let cells = ablation_cells(&config.train, axis);
    run_and_write(config, &cells, "ablate", Some(axis.as_str()))
}

/// Worker count from `HALLUC_THREADS`, capped by the machine.
pub fn thread_count() -> Result<usize, CliError> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("HALLUC_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Argument(format!("HALLUC_THREADS must be a positive integer, got '{v}'")))?;
            if n == 0 {
                return Err(CliError::Argument("HALLUC_THREADS must be at least 1".into()));
            }
            Ok(n.min(available))
        }
        Err(_) => Ok(available),
    }
}
