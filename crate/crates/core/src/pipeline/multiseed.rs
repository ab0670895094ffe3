use std::collections::HashMap;
use std::io::Write;

use log::info;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::synthworld::{build_episode, generate_world, Episode, SyntheticWorld, WorldParams};

use super::base::{prepare_base, BaseState};
use super::config::{TrainConfig, VariantSetting};
use super::eval::EvalReport;
use super::finetune::finetune;

/// One seed's metrics for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub report: EvalReport,
}

/// Mean and normal-approximation 95% half-width over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

/// `1.96 · s / √n` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<Interval> {
    if values.len() < 2 {
        return Err(Error::Argument("a confidence interval needs at least 2 seeds".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Interval {
        mean,
        half_width: 1.96 * var.sqrt() / n.sqrt(),
    })
}

/// All seeds of one configuration, sorted by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeedReport {
    pub config: TrainConfig,
    pub rows: Vec<SeedRow>,
    pub mean_novel_ap: Interval,
    pub true_positives: Interval,
    pub false_positives: Interval,
    pub per_class_ap: Vec<f64>,
}

impl MultiSeedReport {
    pub fn from_rows(config: TrainConfig, mut rows: Vec<SeedRow>) -> Result<Self> {
        rows.sort_by_key(|r| r.seed);
        let ap: Vec<f64> = rows.iter().map(|r| r.report.mean_novel_ap).collect();
        let tp: Vec<f64> = rows.iter().map(|r| r.report.true_positives as f64).collect();
        let fp: Vec<f64> = rows.iter().map(|r| r.report.false_positives as f64).collect();
        let classes = rows.first().map_or(0, |r| r.report.per_class_ap.len());
        let per_class_ap = (0..classes)
            .map(|k| rows.iter().map(|r| r.report.per_class_ap[k]).sum::<f64>() / rows.len() as f64)
            .collect();
        Ok(Self {
            config,
            mean_novel_ap: confidence_interval(&ap)?,
            true_positives: confidence_interval(&tp)?,
            false_positives: confidence_interval(&fp)?,
            per_class_ap,
            rows,
        })
    }

    pub fn ap_of(&self, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.seed == seed).map(|r| r.report.mean_novel_ap)
    }
}

/// Identifies base-stage inputs so cells that agree on them share one base state.
fn base_key(config: &TrainConfig) -> String {
    format!(
        "{:?}|{}|{:?}|{:?}|{}|{}|{}|{}|{}",
        config.head_kind,
        config.variant == VariantSetting::Aggressive,
        config.base,
        config.corpns,
        config.cosine_scale,
        config.halluc_init_std,
        config.proposals_per_instance,
        config.batch_size,
        config.foreground_fraction,
    )
}

/// The world of one seed.
pub fn seed_world(params: &WorldParams, seed: u64) -> Result<SyntheticWorld> {
    generate_world(params, &mut Rng::new(seed, "run").fork("world"))
}

/// Base state for one seed and configuration.
pub fn seed_base(world: &SyntheticWorld, config: &TrainConfig, seed: u64) -> Result<BaseState> {
    prepare_base(world, config, &Rng::new(seed, "run").fork("base"))
}

/// The episode of one seed; independent of every training choice except shot.
pub fn seed_episode(world: &SyntheticWorld, config: &TrainConfig, seed: u64) -> Result<Episode> {
    build_episode(
        world,
        config.shot,
        config.proposals_per_instance,
        &config.pools,
        &Rng::new(seed, "run").fork(&format!("episode-{}", config.shot)),
    )
}

/// Runs every configuration on one seed, sharing the world, base states and
/// episodes between them.
pub fn run_seed(params: &WorldParams, configs: &[TrainConfig], seed: u64) -> Result<Vec<EvalReport>> {
    let world = seed_world(params, seed)?;
    let mut bases: HashMap<String, BaseState> = HashMap::new();
    let mut episodes: HashMap<String, Episode> = HashMap::new();
    let ft_rng = Rng::new(seed, "run").fork("finetune");
    let mut out = Vec::with_capacity(configs.len());
    for config in configs {
        config.validate()?;
        let key = base_key(config);
        if !bases.contains_key(&key) {
            bases.insert(key.clone(), seed_base(&world, config, seed)?);
        }
        let ekey = format!("{}|{}|{:?}", config.shot, config.proposals_per_instance, config.pools);
        if !episodes.contains_key(&ekey) {
            episodes.insert(ekey.clone(), seed_episode(&world, config, seed)?);
        }
        let outcome = finetune(&bases[&key], &episodes[&ekey], config, &ft_rng)?;
        out.push(outcome.report);
    }
    Ok(out)
}

/// Runs each configuration over every seed; seeds run in parallel on the
/// current rayon pool and results come back sorted by seed.
pub fn run_cells(params: &WorldParams, configs: &[TrainConfig], seeds: &[u64]) -> Result<Vec<MultiSeedReport>> {
    if seeds.len() < 2 {
        return Err(Error::Argument("multi-seed runs need at least 2 seeds".into()));
    }
    let per_seed: Vec<(u64, Vec<EvalReport>)> = seeds
        .par_iter()
        .map(|&s| {
            let r = run_seed(params, configs, s)?;
            info!("seed {s} finished {} cells", configs.len());
            Ok((s, r))
        })
        .collect::<Result<_>>()?;
    configs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let rows = per_seed
                .iter()
                .map(|(s, r)| SeedRow {
                    seed: *s,
                    report: r[k].clone(),
                })
                .collect();
            MultiSeedReport::from_rows(c.clone(), rows)
        })
        .collect()
}

pub fn run_multiseed(params: &WorldParams, config: &TrainConfig, seeds: &[u64]) -> Result<MultiSeedReport> {
    Ok(run_cells(params, std::slice::from_ref(config), seeds)?.remove(0))
}

/// Fixed leading CSV columns; `ap_class_<id>` columns follow.
pub const CSV_COLUMNS: [&str; 10] = [
    "seed",
    "shot",
    "proposal_mode",
    "head_kind",
    "variant",
    "m",
    "em_iters",
    "mean_novel_ap",
    "tp_count",
    "fp_count",
];

/// Marker in the seed column of the per-cell summary row.
pub const AGGREGATE: &str = "AGGREGATE";

/// Writes one block of rows per report: every seed, then an AGGREGATE row of means.
pub fn write_csv<W: Write>(reports: &[MultiSeedReport], novel_ids: std::ops::Range<usize>, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Parse(format!("csv output failed: {e}"));
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(novel_ids.clone().map(|c| format!("ap_class_{c}")));
    w.write_record(&header).map_err(io)?;
    for rep in reports {
        let c = &rep.config;
        let cell = [
            c.shot.to_string(),
            c.proposal.as_str().to_string(),
            c.head_kind.as_str().to_string(),
            c.variant.as_str().to_string(),
            c.m.to_string(),
            c.schedule_label(),
        ];
        for row in &rep.rows {
            let mut rec = vec![row.seed.to_string()];
            rec.extend(cell.iter().cloned());
            rec.push(row.report.mean_novel_ap.to_string());
            rec.push(row.report.true_positives.to_string());
            rec.push(row.report.false_positives.to_string());
            rec.extend(row.report.per_class_ap.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        let mut rec = vec![AGGREGATE.to_string()];
        rec.extend(cell.iter().cloned());
        rec.push(rep.mean_novel_ap.mean.to_string());
        rec.push(rep.true_positives.mean.to_string());
        rec.push(rep.false_positives.mean.to_string());
        rec.extend(rep.per_class_ap.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Parse(format!("csv output failed: {e}")))?;
    Ok(())
}
