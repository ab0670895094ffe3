use std::ops::Range;

use crate::corpns::{ObjectnessHead, RpnEnsemble};
use crate::error::{Error, Result};
use crate::hallucinator::{hallucination_loss, HallucinationInputs, Hallucinator};
use crate::heads::{head_loss_and_grads, ClassifierHead, PrototypeRegistry};
use crate::numerics::{sgd_update, Activation, Matrix, Rng, SgdConfig};
use crate::synthworld::{compose_batch, Episode, Label, LabeledFeature, Origin};

use super::base::BaseState;
use super::config::{InitMode, ProposalMode, Schedule, TrainConfig};
use super::eval::{evaluate_pool, EvalReport};

/// The objectness scorer that filters proposals.
#[derive(Debug, Clone, Copy)]
pub enum Proposer<'a> {
    Single(&'a ObjectnessHead),
    Cooperative(&'a RpnEnsemble),
}

impl<'a> Proposer<'a> {
    pub fn from_base(base: &'a BaseState, mode: ProposalMode) -> Self {
        match mode {
            ProposalMode::Single => Proposer::Single(&base.single_rpn),
            ProposalMode::Corpns => Proposer::Cooperative(&base.ensemble),
        }
    }

    pub fn scores(&self, proposals: &Matrix) -> Result<Vec<f64>> {
        match self {
            Proposer::Single(h) => h.scores(proposals),
            Proposer::Cooperative(e) => e.selected_scores(proposals),
        }
    }
}

/// The K-shot fine-tuning set after proposal filtering.
#[derive(Debug, Clone)]
pub struct FinetuneSet {
    /// Per class, examples in the classifier's input space.
    pub features: Vec<Vec<Vec<f64>>>,
    /// Per class, the same examples in the hallucinator's input space.
    pub seeds: Vec<Vec<Vec<f64>>>,
    /// Background examples in the classifier's input space.
    pub background: Vec<Vec<f64>>,
    pub base_classes: usize,
    pub novel: Range<usize>,
}

impl FinetuneSet {
    /// Keeps each ground-truth feature plus the proposals the scorer accepts.
    pub fn build(base: &BaseState, episode: &Episode, config: &TrainConfig) -> Result<Self> {
        let classes = base.prototypes.num_classes();
        let base_classes = base.head.num_classes();
        let proposer = Proposer::from_base(base, config.proposal);
        let mut raw: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
        for seed in episode.base_seeds.iter().chain(&episode.novel_seeds) {
            raw[seed.class].push(seed.instance.clone());
            let props: Vec<&[f64]> = seed.proposals.iter().map(|p| p.as_slice()).collect();
            let scores = proposer.scores(&Matrix::from_rows(&props)?)?;
            for (p, s) in seed.proposals.iter().zip(scores) {
                if s >= config.proposal_threshold {
                    raw[seed.class].push(p.clone());
                }
            }
        }
        let to_z = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            Ok(base
                .transform
                .apply(&Matrix::from_rows(&refs)?, Activation::Relu)?
                .row_iter()
                .map(|r| r.to_vec())
                .collect())
        };
        let features = raw.iter().map(|r| to_z(r)).collect::<Result<Vec<_>>>()?;
        let seeds = if base.hallucinates_raw() { raw } else { features.clone() };
        Ok(Self {
            features,
            seeds,
            background: to_z(&episode.train_background)?,
            base_classes,
            novel: base_classes..classes,
        })
    }

    pub fn novel_examples(&self) -> impl Iterator<Item = (usize, &Vec<f64>)> {
        self.novel
            .clone()
            .flat_map(move |c| self.seeds[c].iter().map(move |v| (c, v)))
    }
}

/// Trained fine-tuning artefacts plus the evaluation of the final head.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: ClassifierHead,
    pub hallucinator: Option<Hallucinator>,
    pub prototypes: PrototypeRegistry,
    pub report: EvalReport,
}

/// Trains a `|C_n|`-way head on the novel examples alone and returns its rows.
pub fn coco_style_novel_init(set: &FinetuneSet, config: &TrainConfig, rng: &mut Rng) -> Result<Matrix> {
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut targets = Vec::new();
    for c in set.novel.clone() {
        for v in &set.features[c] {
            rows.push(v);
            targets.push(c - set.novel.start);
        }
    }
    if rows.is_empty() {
        return Err(Error::Argument("no novel examples to pre-train on".into()));
    }
    let x = Matrix::from_rows(&rows)?;
    let n = set.novel.len();
    let d = x.cols();
    // A head with only class rows: reuse the classifier with its last row as a class.
    let mut head = ClassifierHead {
        kind: config.head_kind,
        weights: Matrix::from_vec(n, d, rng.normal_vec(n * d, config.novel_init_std))?,
        scale: config.cosine_scale,
    };
    let sgd = config.finetune_sgd.rescaled(config.finetune_sgd.total_iterations / 4);
    for it in 0..sgd.total_iterations {
        let (loss, g) = head.loss_and_grads(&x, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                stage: "coco-init",
                iteration: it,
                detail: format!("loss became {loss}"),
            });
        }
        sgd_update(head.weights.as_mut_slice(), g.weights.as_slice(), sgd.lr_at(it));
    }
    Ok(head.weights)
}

/// Pre-trained novel-head accuracy on its own training set.
pub fn novel_pretrain_accuracy(rows: &Matrix, set: &FinetuneSet, config: &TrainConfig) -> Result<f64> {
    let head = ClassifierHead {
        kind: config.head_kind,
        weights: rows.clone(),
        scale: config.cosine_scale,
    };
    let mut total = 0;
    let mut correct = 0;
    for c in set.novel.clone() {
        let refs: Vec<&[f64]> = set.features[c].iter().map(|v| v.as_slice()).collect();
        for (row, _) in head.predict(&Matrix::from_rows(&refs)?)? {
            total += 1;
            correct += usize::from(row + set.novel.start == c);
        }
    }
    Ok(correct as f64 / total as f64)
}

struct Streams {
    batches: Rng,
    halluc: Rng,
    compose: Rng,
    halluc_phase: Rng,
}

struct Tuning<'a> {
    base: &'a BaseState,
    set: &'a FinetuneSet,
    config: &'a TrainConfig,
    head: ClassifierHead,
    hallucinator: Option<Hallucinator>,
    prototypes: PrototypeRegistry,
    streams: Streams,
}

impl<'a> Tuning<'a> {
    fn new(base: &'a BaseState, set: &'a FinetuneSet, config: &'a TrainConfig, rng: &Rng) -> Result<Self> {
        let d = base.head.dim();
        let novel_rows = match config.init_mode {
            InitMode::VocRandom => Matrix::from_vec(
                set.novel.len(),
                d,
                rng.fork("novel-init").normal_vec(set.novel.len() * d, config.novel_init_std),
            )?,
            InitMode::CocoNovelPretrain => coco_style_novel_init(set, config, &mut rng.fork("coco-init"))?,
        };
        let head = base.head.with_extra_classes(&novel_rows)?;
        let hallucinator = if config.hallucinates() {
            let h = base
                .hallucinator
                .clone()
                .ok_or_else(|| Error::Contract("base stage produced no hallucinator".into()))?;
            if Some(h.variant()) != config.variant.variant() {
                return Err(Error::Contract(format!(
                    "base hallucinator is {}, run asks for {}",
                    h.variant().as_str(),
                    config.variant.as_str()
                )));
            }
            Some(h)
        } else {
            None
        };
        let mut prototypes = base.prototypes.clone();
        if hallucinator.is_some() {
            for (c, v) in set.novel_examples() {
                prototypes.update(c, v)?;
            }
        }
        Ok(Self {
            base,
            set,
            config,
            head,
            hallucinator,
            prototypes,
            streams: Streams {
                batches: rng.fork("batches"),
                halluc: rng.fork("halluc"),
                compose: rng.fork("compose"),
                halluc_phase: rng.fork("halluc-phase"),
            },
        })
    }

    /// All novel classes and a random subset of base classes.
    fn batch_classes(set: &FinetuneSet, config: &TrainConfig, rng: &mut Rng) -> Vec<usize> {
        let mut classes: Vec<usize> = set.novel.clone().collect();
        let k = config.base_classes_per_batch.min(set.base_classes);
        classes.extend(rng.choose_distinct(set.base_classes, k));
        classes
    }

    fn requests<'s>(set: &'s FinetuneSet, classes: &[usize], m: usize, rng: &mut Rng) -> Vec<(usize, &'s [f64])> {
        let mut out = Vec::with_capacity(classes.len() * m);
        for &c in classes {
            let pool = &set.seeds[c];
            for _ in 0..m {
                out.push((c, pool[rng.index(pool.len())].as_slice()));
            }
        }
        out
    }

    /// Hallucinations mapped into the classifier's input space, with the raw
    /// generator outputs.
    fn generate(&self, inputs: &HallucinationInputs) -> Result<(Vec<LabeledFeature>, Matrix)> {
        let h = self.hallucinator.as_ref().expect("generation requires a hallucinator");
        let out = h.apply(&inputs.inputs)?;
        let feats = if self.base.hallucinates_raw() {
            self.base.transform.apply(&out, Activation::Relu)?
        } else {
            out.clone()
        };
        let gen = feats
            .row_iter()
            .zip(&inputs.classes)
            .map(|(v, &c)| LabeledFeature {
                vector: v.to_vec(),
                label: Label::Class(c),
                origin: Origin::Hallucinated,
            })
            .collect();
        Ok((gen, out))
    }

    fn sample_real(&mut self, classes: &[usize]) -> (Vec<LabeledFeature>, Vec<LabeledFeature>) {
        let fg_total = ((self.config.batch_size as f64) * self.config.foreground_fraction).round() as usize;
        let per = fg_total / classes.len();
        let extra = fg_total % classes.len();
        let rng = &mut self.streams.batches;
        let mut pos = Vec::with_capacity(fg_total);
        for (i, &c) in classes.iter().enumerate() {
            let pool = &self.set.features[c];
            for _ in 0..per + usize::from(i < extra) {
                pos.push(LabeledFeature::real(pool[rng.index(pool.len())].clone(), Label::Class(c)));
            }
        }
        let neg = (0..self.config.batch_size - fg_total)
            .map(|_| {
                let v = &self.set.background[rng.index(self.set.background.len())];
                LabeledFeature::real(v.clone(), Label::Background)
            })
            .collect();
        (pos, neg)
    }

    /// One classifier step; in joint mode the hallucinator also steps on the
    /// same hallucinations, against the head as it was before this step.
    fn classifier_step(&mut self, lr: f64, halluc_lr: Option<f64>, iteration: usize) -> Result<f64> {
        let classes = Self::batch_classes(self.set, self.config, &mut self.streams.batches);
        let (pos, neg) = self.sample_real(&classes);
        let mut gen = Vec::new();
        if self.hallucinator.is_some() {
            let novel: Vec<usize> = self.set.novel.clone().collect();
            let reqs = Self::requests(self.set, &novel, self.config.m, &mut self.streams.halluc);
            let inputs = HallucinationInputs::build(&self.prototypes, &reqs, &self.base.noise, &mut self.streams.halluc)?;
            let (g, raw) = self.generate(&inputs)?;
            for (v, &c) in raw.row_iter().zip(&inputs.classes) {
                self.prototypes.update(c, v)?;
            }
            if let Some(hlr) = halluc_lr {
                let base_classes: Vec<usize> = classes[self.set.novel.len()..].to_vec();
                let base_reqs = Self::requests(self.set, &base_classes, self.config.m, &mut self.streams.halluc);
                let base_inputs =
                    HallucinationInputs::build(&self.prototypes, &base_reqs, &self.base.noise, &mut self.streams.halluc)?;
                let all = HallucinationInputs {
                    inputs: Matrix::vstack(&[&inputs.inputs, &base_inputs.inputs])?,
                    classes: inputs.classes.iter().chain(&base_inputs.classes).copied().collect(),
                };
                self.halluc_step(&all, hlr, iteration)?;
            }
            gen = g;
        }
        let batch = compose_batch(pos, neg, gen, &mut self.streams.compose);
        let (loss, grads) = head_loss_and_grads(&self.head, &batch)?;
        finite("finetune-classifier", iteration, loss)?;
        sgd_update(self.head.weights.as_mut_slice(), grads.weights.as_slice(), lr);
        Ok(loss)
    }

    fn halluc_step(&mut self, inputs: &HallucinationInputs, lr: f64, iteration: usize) -> Result<f64> {
        let transform = self.base.hallucinates_raw().then_some(&self.base.transform);
        let h = self.hallucinator.as_mut().expect("hallucinator present");
        let (loss, grads) = hallucination_loss(h, transform, &self.head, inputs)?;
        finite("finetune-hallucinator", iteration, loss)?;
        let mut p = h.flatten();
        sgd_update(&mut p, &grads.flatten(), lr);
        h.load(&p);
        Ok(loss)
    }

    fn classifier_phase(&mut self, sgd: &SgdConfig) -> Result<()> {
        for it in 0..sgd.total_iterations {
            self.classifier_step(sgd.lr_at(it), None, it)?;
        }
        Ok(())
    }

    /// Classifier frozen; the hallucinator learns to produce examples the
    /// current head classifies correctly. Prototypes are only read.
    fn hallucinator_phase(&mut self, sgd: &SgdConfig) -> Result<()> {
        for it in 0..sgd.total_iterations {
            let classes = Self::batch_classes(self.set, self.config, &mut self.streams.halluc_phase);
            let reqs = Self::requests(self.set, &classes, self.config.m, &mut self.streams.halluc_phase);
            let inputs =
                HallucinationInputs::build(&self.prototypes, &reqs, &self.base.noise, &mut self.streams.halluc_phase)?;
            self.halluc_step(&inputs, sgd.lr_at(it), it)?;
        }
        Ok(())
    }

    fn halluc_sgd(&self, sgd: &SgdConfig) -> SgdConfig {
        SgdConfig {
            learning_rate: self.config.halluc_finetune_lr,
            ..sgd.clone()
        }
    }

    fn finish(self, episode: &Episode) -> Result<FinetuneOutcome> {
        let report = evaluate_pool(self.base, &self.head, episode, self.config)?;
        Ok(FinetuneOutcome {
            head: self.head,
            hallucinator: self.hallucinator,
            prototypes: self.prototypes,
            report,
        })
    }
}

fn finite(stage: &'static str, iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            stage,
            iteration,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Alternates classifier training with hallucinator fine-tuning, for
/// `em_iterations` classifier trainings.
pub fn finetune_em(base: &BaseState, episode: &Episode, config: &TrainConfig, rng: &Rng) -> Result<FinetuneOutcome> {
    config.validate()?;
    let set = FinetuneSet::build(base, episode, config)?;
    let mut t = Tuning::new(base, &set, config, rng)?;
    let sgd = config.finetune_sgd.clone();
    t.classifier_phase(&sgd)?;
    for _ in 1..config.em_iterations {
        if t.hallucinator.is_some() {
            let hs = t.halluc_sgd(&sgd);
            t.hallucinator_phase(&hs)?;
        }
        t.classifier_phase(&sgd)?;
    }
    t.finish(episode)
}

/// Updates classifier and hallucinator in the same steps, for as many
/// classifier steps as the EM schedule would take.
pub fn finetune_joint(base: &BaseState, episode: &Episode, config: &TrainConfig, rng: &Rng) -> Result<FinetuneOutcome> {
    config.validate()?;
    let set = FinetuneSet::build(base, episode, config)?;
    let mut t = Tuning::new(base, &set, config, rng)?;
    let total = config.finetune_sgd.total_iterations * config.em_iterations;
    let sgd = config.finetune_sgd.rescaled(total);
    let hs = t.halluc_sgd(&sgd);
    for it in 0..sgd.total_iterations {
        let hlr = t.hallucinator.is_some().then(|| hs.lr_at(it));
        t.classifier_step(sgd.lr_at(it), hlr, it)?;
    }
    t.finish(episode)
}

/// Dispatches on the configured schedule.
pub fn finetune(base: &BaseState, episode: &Episode, config: &TrainConfig, rng: &Rng) -> Result<FinetuneOutcome> {
    match config.schedule {
        Schedule::Em => finetune_em(base, episode, config, rng),
        Schedule::Joint => finetune_joint(base, episode, config, rng),
    }
}

