use std::ops::Range;

use crate::error::{Error, Result};
use crate::heads::ClassifierHead;
use crate::numerics::{Activation, Matrix};
use crate::synthworld::{Episode, Label};

use super::base::BaseState;
use super::config::TrainConfig;
use super::finetune::Proposer;

/// Detection quality of one head on one test pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// AP-analog per novel class, in class order.
    pub per_class_ap: Vec<f64>,
    pub mean_novel_ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Ranking AP: mean of precision at each relevant rank, over all positives.
/// `ranked` holds relevance flags in descending score order.
pub fn average_precision(ranked: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Scores per-feature predictions. `predictions[i]` is `None` when feature
/// `i` was never proposed, otherwise its argmax head row and max probability.
/// Ties in score keep pool order.
pub fn evaluate_predictions(
    predictions: &[Option<(usize, f64)>],
    labels: &[Label],
    novel: Range<usize>,
    score_threshold: f64,
) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Argument("test pool is empty or mislabeled".into()));
    }
    let mut per_class_ap = Vec::with_capacity(novel.len());
    let mut tp = 0;
    let mut fp = 0;
    for c in novel.clone() {
        let mut cands: Vec<(usize, f64)> = predictions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.filter(|(row, _)| *row == c).map(|(_, s)| (i, s)))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let ranked: Vec<bool> = cands.iter().map(|&(i, _)| labels[i] == Label::Class(c)).collect();
        let positives = labels.iter().filter(|&&l| l == Label::Class(c)).count();
        per_class_ap.push(average_precision(&ranked, positives));
        for (&(_, s), &rel) in cands.iter().zip(&ranked) {
            if s >= score_threshold {
                if rel {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
    }
    let mean_novel_ap = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        mean_novel_ap,
        true_positives: tp,
        false_positives: fp,
    })
}

/// Classifies features already in the head's input space; every feature counts
/// as proposed.
pub fn evaluate(head: &ClassifierHead, features: &Matrix, labels: &[Label], novel: Range<usize>, score_threshold: f64) -> Result<EvalReport> {
    let preds: Vec<Option<(usize, f64)>> = head
        .predict(features)?
        .into_iter()
        .map(|(row, s)| (row != head.background_row()).then_some((row, s)))
        .collect();
    evaluate_predictions(&preds, labels, novel, score_threshold)
}

/// Filters the episode's test pool through the configured proposer, maps it
/// through the frozen transform and evaluates the head on the survivors.
pub fn evaluate_pool(base: &BaseState, head: &ClassifierHead, episode: &Episode, config: &TrainConfig) -> Result<EvalReport> {
    if episode.test_pool.is_empty() {
        return Err(Error::Argument("empty test pool".into()));
    }
    let rows: Vec<&[f64]> = episode.test_pool.iter().map(|f| f.vector.as_slice()).collect();
    let x = Matrix::from_rows(&rows)?;
    let kept = Proposer::from_base(base, config.proposal).scores(&x)?;
    let z = base.transform.apply(&x, Activation::Relu)?;
    let preds: Vec<Option<(usize, f64)>> = head
        .predict(&z)?
        .into_iter()
        .zip(kept)
        .map(|((row, s), k)| (k >= config.proposal_threshold && row != head.background_row()).then_some((row, s)))
        .collect();
    let labels: Vec<Label> = episode.test_pool.iter().map(|f| f.label).collect();
    let novel = head.num_classes() - episode.novel_seeds.len() / episode.shot..head.num_classes();
    evaluate_predictions(&preds, &labels, novel, config.score_threshold)
}
