use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvCodec, KvDocument};
use crate::numerics::Rng;

use super::{Label, LabeledFeature, Origin, SyntheticWorld};

/// Sizes of the evaluation pool and the fine-tuning background reservoir.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSizes {
    /// Test foreground features drawn per class.
    pub test_per_class: usize,
    pub test_background: usize,
    pub train_background: usize,
}

impl Default for PoolSizes {
    fn default() -> Self {
        Self {
            test_per_class: 40,
            test_background: 800,
            train_background: 2000,
        }
    }
}

/// One annotated instance and the proposals around it.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedInstance {
    pub class: usize,
    pub instance: Vec<f64>,
    pub proposals: Vec<Vec<f64>>,
}

impl SeedInstance {
    /// The ground-truth feature followed by its proposals.
    pub fn examples(&self) -> impl Iterator<Item = &Vec<f64>> {
        std::iter::once(&self.instance).chain(&self.proposals)
    }
}

/// A K-shot fine-tuning set plus a held-out test pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shot: usize,
    pub proposals_per_instance: usize,
    pub novel_seeds: Vec<SeedInstance>,
    pub base_seeds: Vec<SeedInstance>,
    pub train_background: Vec<Vec<f64>>,
    pub test_pool: Vec<LabeledFeature>,
}

impl Episode {
    pub fn seeds_of(&self, class: usize) -> impl Iterator<Item = &SeedInstance> {
        self.novel_seeds
            .iter()
            .chain(&self.base_seeds)
            .filter(move |s| s.class == class)
    }
}

fn seeds_for(
    world: &SyntheticWorld,
    classes: std::ops::Range<usize>,
    shot: usize,
    proposals: usize,
    rng: &mut Rng,
) -> Result<Vec<SeedInstance>> {
    let mut out = Vec::with_capacity(classes.len() * shot);
    for class in classes {
        for _ in 0..shot {
            let instance = world.sample_instance(class, rng)?;
            let proposals = world.sample_proposals(&instance, proposals, rng)?;
            out.push(SeedInstance {
                class,
                instance,
                proposals,
            });
        }
    }
    Ok(out)
}

/// Builds a balanced K-shot episode. The test pool comes from its own stream
/// and uses full within-class variation.
pub fn build_episode(
    world: &SyntheticWorld,
    shot: usize,
    proposals: usize,
    pools: &PoolSizes,
    rng: &Rng,
) -> Result<Episode> {
    if shot == 0 {
        return Err(Error::Argument("shot must be at least 1".into()));
    }
    let novel_seeds = seeds_for(
        world,
        world.novel_class_ids(),
        shot,
        proposals,
        &mut rng.fork("novel-seeds"),
    )?;
    let base_seeds = seeds_for(
        world,
        0..world.base_classes,
        shot,
        proposals,
        &mut rng.fork("base-seeds"),
    )?;
    let train_background = world
        .sample_background(pools.train_background, &mut rng.fork("train-background"))
        .into_iter()
        .map(|f| f.vector)
        .collect();

    let mut test_rng = rng.fork("test-pool");
    let mut test_pool = Vec::with_capacity(world.num_classes() * pools.test_per_class + pools.test_background);
    for class in 0..world.num_classes() {
        for _ in 0..pools.test_per_class {
            test_pool.push(LabeledFeature {
                vector: world.sample_instance(class, &mut test_rng)?,
                label: Label::Class(class),
                origin: Origin::Real,
            });
        }
    }
    test_pool.extend(world.sample_background(pools.test_background, &mut test_rng));
    Ok(Episode {
        shot,
        proposals_per_instance: proposals,
        novel_seeds,
        base_seeds,
        train_background,
        test_pool,
    })
}

fn write_seeds(doc: &mut KvDocument, prefix: &str, seeds: &[SeedInstance]) {
    doc.push(format!("{prefix}.count"), seeds.len());
    for (i, s) in seeds.iter().enumerate() {
        doc.push(format!("{prefix}.{i}.class"), s.class);
        doc.push_floats(format!("{prefix}.{i}.instance"), &s.instance);
        for (j, p) in s.proposals.iter().enumerate() {
            doc.push_floats(format!("{prefix}.{i}.proposal.{j}"), p);
        }
    }
}

fn read_seeds(doc: &KvDocument, prefix: &str, proposals: usize) -> Result<Vec<SeedInstance>> {
    let n: usize = doc.get(&format!("{prefix}.count"))?;
    (0..n)
        .map(|i| {
            Ok(SeedInstance {
                class: doc.get(&format!("{prefix}.{i}.class"))?,
                instance: doc.get_floats(&format!("{prefix}.{i}.instance"))?,
                proposals: (0..proposals)
                    .map(|j| doc.get_floats(&format!("{prefix}.{i}.proposal.{j}")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

impl KvCodec for Episode {
    const KIND: &'static str = "episode";

    fn write_kv(&self, doc: &mut KvDocument) {
        doc.push("shot", self.shot);
        doc.push("proposals_per_instance", self.proposals_per_instance);
        write_seeds(doc, "novel", &self.novel_seeds);
        write_seeds(doc, "base", &self.base_seeds);
        doc.push("train_background.count", self.train_background.len());
        for (i, v) in self.train_background.iter().enumerate() {
            doc.push_floats(format!("train_background.{i}"), v);
        }
        doc.push("test.count", self.test_pool.len());
        for (i, f) in self.test_pool.iter().enumerate() {
            let label = match f.label {
                Label::Class(c) => c.to_string(),
                Label::Background => "bg".to_string(),
            };
            doc.push(format!("test.{i}.label"), label);
            doc.push_floats(format!("test.{i}.vector"), &f.vector);
        }
    }

    fn read_kv(doc: &KvDocument) -> Result<Self> {
        let proposals: usize = doc.get("proposals_per_instance")?;
        let nbg: usize = doc.get("train_background.count")?;
        let ntest: usize = doc.get("test.count")?;
        let test_pool = (0..ntest)
            .map(|i| {
                let raw = doc.get_str(&format!("test.{i}.label"))?;
                let label = if raw == "bg" {
                    Label::Background
                } else {
                    Label::Class(
                        raw.parse()
                            .map_err(|_| Error::Parse(format!("bad test label '{raw}'")))?,
                    )
                };
                Ok(LabeledFeature {
                    vector: doc.get_floats(&format!("test.{i}.vector"))?,
                    label,
                    origin: Origin::Real,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            shot: doc.get("shot")?,
            proposals_per_instance: proposals,
            novel_seeds: read_seeds(doc, "novel", proposals)?,
            base_seeds: read_seeds(doc, "base", proposals)?,
            train_background: (0..nbg)
                .map(|i| doc.get_floats(&format!("train_background.{i}")))
                .collect::<Result<_>>()?,
            test_pool,
        })
    }
}
