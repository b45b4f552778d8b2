//! Contrastive and matching objectives: triplet sampling, the region-level and
//! street-view triplet losses, the fusion matching loss and their sum.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::stack_channels;
use crate::nn::{Bound, FeedForward, ParamStore};
use crate::tape::{Activation, SparseMat, Tape, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("need at least {needed} regions, got {found}")]
    TooFewRegions { needed: usize, found: usize },
    #[error("no anchor has a non-adjacent region to use as negative")]
    NoValidNegative,
    #[error("negative map sends region {0} to itself")]
    DegenerateNegative(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletLevel {
    Agg,
    Sv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub level: TripletLevel,
    /// Anchors left out because they have no neighbor or no non-neighbor.
    pub skipped: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn with_level(&self, level: TripletLevel) -> Self {
        Self { level, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

/// `per_anchor` triplets for every region with at least one neighbor and one
/// non-neighbor; positives and negatives are uniform over those sets.
pub fn sample_triplets_with(
    adjacency: &Array2<bool>,
    per_anchor: usize,
    rng: &mut impl Rng,
) -> Result<TripletBatch, ObjectiveError> {
    let n = adjacency.nrows();
    if n < 3 {
        return Err(ObjectiveError::TooFewRegions { needed: 3, found: n });
    }
    let mut batch = TripletBatch {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
        level: TripletLevel::Agg,
        skipped: Vec::new(),
    };
    let mut lacked_negative = false;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && adjacency[[i, j]]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| j != i && !adjacency[[i, j]]).collect();
        if pos.is_empty() || neg.is_empty() {
            lacked_negative |= !pos.is_empty();
            batch.skipped.push(i);
            continue;
        }
        for _ in 0..per_anchor {
            batch.anchors.push(i);
            batch.positives.push(*pos.choose(rng).expect("non-empty"));
            batch.negatives.push(*neg.choose(rng).expect("non-empty"));
        }
    }
    if batch.anchors.is_empty() && lacked_negative {
        return Err(ObjectiveError::NoValidNegative);
    }
    Ok(batch)
}

pub fn sample_triplets(adjacency: &Array2<bool>, seed: u64) -> Result<TripletBatch, ObjectiveError> {
    sample_triplets_with(adjacency, 1, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `s(i)` uniform over every other region.
pub fn sample_negative_map(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>, ObjectiveError> {
    if n < 2 {
        return Err(ObjectiveError::TooFewRegions { needed: 2, found: n });
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Mean of the six aggregated-level channels.
pub fn aggregated_anchor(tape: &mut Tape, hats: &[Var]) -> Var {
    let mut acc = hats[0];
    for &h in &hats[1..] {
        acc = tape.add(acc, h);
    }
    tape.scale(acc, 1.0 / hats.len() as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], gamma: f64) -> f64 {
    (euclidean(anchor, positive) - euclidean(anchor, negative) + gamma).max(0.0)
}

/// Hinge triplet loss over a batch of rows of `emb`. Empty batches give 0.
pub fn batch_triplet_loss(
    tape: &mut Tape,
    emb: Var,
    batch: &TripletBatch,
    gamma: f64,
    reduction: LossReduction,
) -> Var {
    if batch.is_empty() {
        return tape.constant_scalar(0.0);
    }
    let n = tape.value(emb).nrows();
    let a = tape.sparse(&Rc::new(SparseMat::gather(&batch.anchors, n)), emb);
    let pos = tape.sparse(&Rc::new(SparseMat::gather(&batch.positives, n)), emb);
    let neg = tape.sparse(&Rc::new(SparseMat::gather(&batch.negatives, n)), emb);
    let dp = tape.sub(a, pos);
    let dp = tape.row_norm(dp);
    let dn = tape.sub(a, neg);
    let dn = tape.row_norm(dn);
    let diff = tape.sub(dp, dn);
    let margin = tape.add_const(diff, gamma);
    let hinge = tape.act(margin, Activation::Relu);
    reduce(tape, hinge, reduction)
}

fn reduce(tape: &mut Tape, x: Var, reduction: LossReduction) -> Var {
    match reduction {
        LossReduction::Mean => tape.mean_all(x),
        LossReduction::Sum => tape.sum_all(x),
    }
}

/// Matching function Φ: `[m̂_i, ℋ_j]` (2·d_hid) → d_hid → 1 logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherParams {
    pub mlp: FeedForward,
}

impl MatcherParams {
    pub fn new(store: &mut ParamStore, d_hid: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(store, d_hid, 2 * d_hid, rng)
    }

    pub fn with_hidden(store: &mut ParamStore, d_hid: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: FeedForward::new(store, "matcher", (2 * d_hid, d_ff, 1), rng) }
    }

    /// Logits (before the sigmoid) for every row pair.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, channel: Var, fused: Var) -> Var {
        let x = tape.concat_cols(&[channel, fused]);
        self.mlp.forward(tape, p, x)
    }
}

/// Binary cross-entropy of Φ on (channel, own region) positives and
/// (channel, region s(i)) negatives, over every channel and region.
/// The mean form divides by (number of channels)·N.
pub fn fusion_bce_loss(
    tape: &mut Tape,
    hats: &[Var],
    fused: Var,
    matcher: &MatcherParams,
    negatives: &[usize],
    reduction: LossReduction,
    p: &Bound,
) -> Result<Var, ObjectiveError> {
    if let Some(i) = negatives.iter().enumerate().position(|(i, &s)| s == i) {
        return Err(ObjectiveError::DegenerateNegative(i));
    }
    let n = tape.value(fused).nrows();
    let c = hats.len();
    let tokens = stack_channels(tape, hats);
    let own: Vec<usize> = (0..n * c).map(|t| t / c).collect();
    let other: Vec<usize> = (0..n * c).map(|t| negatives[t / c]).collect();
    let h_own = tape.sparse(&Rc::new(SparseMat::gather(&own, n)), fused);
    let h_other = tape.sparse(&Rc::new(SparseMat::gather(&other, n)), fused);
    let z_pos = matcher.logits(tape, p, tokens, h_own);
    let z_neg = matcher.logits(tape, p, tokens, h_other);
    // -log σ(z) = softplus(-z), -log(1 - σ(z)) = softplus(z)
    let neg_pos = tape.scale(z_pos, -1.0);
    let l_pos = tape.act(neg_pos, Activation::Softplus);
    let l_neg = tape.act(z_neg, Activation::Softplus);
    let both = tape.add(l_pos, l_neg);
    Ok(reduce(tape, both, reduction))
}

pub fn total_loss(l_agg: f64, l_sv: f64, l_f: f64) -> f64 {
    l_agg + l_sv + l_f
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_agg: f64,
    pub l_sv: f64,
    pub l_f: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_agg: f64, l_sv: f64, l_f: f64) -> Self {
        Self { l_agg, l_sv, l_f, l_total: total_loss(l_agg, l_sv, l_f) }
    }
}

pub fn write_train_log(path: &Path, losses: &[LossReport]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,l_agg,l_sv,l_f,l_total")?;
    for (e, r) in losses.iter().enumerate() {
        writeln!(f, "{},{},{},{},{}", e + 1, r.l_agg, r.l_sv, r.l_f, r.l_total)?;
    }
    f.flush()
}
