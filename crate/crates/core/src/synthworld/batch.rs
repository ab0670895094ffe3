use log::warn;

use crate::numerics::Rng;

use super::{LabeledFeature, Origin};

/// A classifier training batch `[S_pos, S_gen; S_neg]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub pos: Vec<LabeledFeature>,
    pub gen: Vec<LabeledFeature>,
    pub neg: Vec<LabeledFeature>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pos.len() + self.gen.len() + self.neg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Foreground, then hallucinated, then background examples.
    pub fn iter(&self) -> impl Iterator<Item = &LabeledFeature> {
        self.pos.iter().chain(&self.gen).chain(&self.neg)
    }
}

/// Replaces `|gen|` uniformly chosen background examples with the hallucinated
/// ones, keeping the batch size fixed.
///
/// When `gen` outnumbers `neg` it is truncated to `|neg|`. An empty `gen`
/// consumes no randomness.
pub fn compose_batch(
    pos: Vec<LabeledFeature>,
    neg: Vec<LabeledFeature>,
    mut gen: Vec<LabeledFeature>,
    rng: &mut Rng,
) -> Batch {
    debug_assert!(gen.iter().all(|g| g.origin == Origin::Hallucinated));
    if gen.is_empty() {
        return Batch { pos, gen, neg };
    }
    if gen.len() > neg.len() {
        warn!(
            "{} hallucinated examples exceed {} background slots; truncating",
            gen.len(),
            neg.len()
        );
        gen.truncate(neg.len());
    }
    let mut drop = vec![false; neg.len()];
    for i in rng.choose_distinct(neg.len(), gen.len()) {
        drop[i] = true;
    }
    let neg = neg
        .into_iter()
        .zip(drop)
        .filter_map(|(f, d)| (!d).then_some(f))
        .collect();
    Batch { pos, gen, neg }
}
