//! Semantic alignment and supervised contrastive learning: the text-anchored
//! NT-Xent loss, the cosine similarity index, label-aware pair retrieval,
//! and the joint training objective.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GlobalVars;
use crate::tensor::{Tape, Tensor, Var};

/// Time-pooled per-sample features of one dataset entry (frozen bank copy).
#[derive(Clone, Debug)]
pub struct GlobalFeature {
    pub xt: Tensor,
    pub xa: Tensor,
    pub xv: Tensor,
    pub h: Tensor,
}

/// The four contrasted views of a sample.
#[derive(Clone, Copy, Debug)]
pub enum FeatureView {
    Text,
    Audio,
    Vision,
    Multi,
}

pub const VIEWS: [FeatureView; 4] = [
    FeatureView::Text,
    FeatureView::Audio,
    FeatureView::Vision,
    FeatureView::Multi,
];

impl GlobalFeature {
    pub fn view(&self, v: FeatureView) -> &Tensor {
        match v {
            FeatureView::Text => &self.xt,
            FeatureView::Audio => &self.xa,
            FeatureView::Vision => &self.xv,
            FeatureView::Multi => &self.h,
        }
    }
}

impl GlobalVars {
    pub fn view(&self, v: FeatureView) -> Var {
        match v {
            FeatureView::Text => self.xt,
            FeatureView::Audio => self.xa,
            FeatureView::Vision => self.xv,
            FeatureView::Multi => self.h,
        }
    }
}

/// Per-epoch frozen pooled features of the training split, indexed by
/// dataset position. Supplies the retrieved positive/negative features for
/// the supervised terms; gradients flow only through the anchor side.
pub struct FeatureBank {
    pub features: Vec<GlobalFeature>,
}

/// Average over the time axis: `[T, d] -> [d]`.
pub fn pool_global(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "pool_global",
            lhs: features.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(&features.data()[r * d..(r + 1) * d]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= t as f64;
    }
    Tensor::from_vec(vec![d], out)
}

// ---------------------------------------------------------------------------
// NT-Xent

/// One NT-Xent anchor term on the tape:
/// `sum_{p in P} -log( exp(sim(a,p)/tau) / sum_{k in N u P} exp(sim(a,k)/tau) )`
/// with `sim` the dot product. The denominator ranges over the union
/// exactly; negatives may be empty.
pub fn ntxent_term(
    tape: &mut Tape,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    if positives.is_empty() {
        return Err(Error::Config("ntxent: empty positive set".into()));
    }
    let mut sims = Vec::with_capacity(positives.len() + negatives.len());
    for &p in positives {
        sims.push(tape.dot(anchor, p)?);
    }
    let pos_sims = sims.clone();
    for &n in negatives {
        sims.push(tape.dot(anchor, n)?);
    }
    let all = tape.stack_scalars(&sims)?;
    let scaled = tape.scale(all, 1.0 / tau)?;
    let lse = tape.logsumexp(scaled)?;

    let pos = tape.stack_scalars(&pos_sims)?;
    let pos_sum = tape.sum(pos)?;
    let neg_part = tape.scale(pos_sum, -1.0 / tau)?;
    let lse_part = tape.scale(lse, positives.len() as f64)?;
    tape.add(neg_part, lse_part)
}

/// Value-level NT-Xent over plain tensors (same route as [`ntxent_term`],
/// evaluated on a scratch tape).
pub fn ntxent_loss(
    anchor: &Tensor,
    positives: &[Tensor],
    negatives: &[Tensor],
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(anchor.clone());
    let ps: Vec<Var> = positives.iter().map(|t| tape.leaf(t.clone())).collect();
    let ns: Vec<Var> = negatives.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = ntxent_term(&mut tape, a, &ps, &ns, tau)?;
    Ok(tape.value(loss).item())
}

// ---------------------------------------------------------------------------
// similarity index and pair retrieval

/// Three-way sentiment class: sign bands of the continuous label with a
/// neutral band `|y| < 0.1 * label_scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SentimentClass {
    Negative,
    Neutral,
    Positive,
}

pub fn class_of(y: f64, label_scale: f64) -> SentimentClass {
    let band = 0.1 * label_scale;
    if y.abs() < band {
        SentimentClass::Neutral
    } else if y < 0.0 {
        SentimentClass::Negative
    } else {
        SentimentClass::Positive
    }
}

/// Pairwise cosine similarity table plus class labels.
pub struct SimilarityIndex {
    n: usize,
    sim: Vec<f64>,
    classes: Vec<SentimentClass>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    // zero vectors compare as 0 against everything
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Build the full cosine table over per-sample reference features and assign
/// the sign-band class per label.
pub fn build_similarity_index(
    features: &[Tensor],
    labels: &[f64],
    label_scale: f64,
) -> Result<SimilarityIndex> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "similarity index needs >= 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Config("features/labels length mismatch".into()));
    }
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        sim[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c = cosine(features[i].data(), features[j].data());
            sim[i * n + j] = c;
            sim[j * n + i] = c;
        }
    }
    let classes = labels.iter().map(|&y| class_of(y, label_scale)).collect();
    Ok(SimilarityIndex { n, sim, classes })
}

impl SimilarityIndex {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }

    pub fn class(&self, i: usize) -> SentimentClass {
        self.classes[i]
    }
}

/// An anchor with its retrieved positives (same class) and negatives
/// (different class; two feature-similar, two feature-dissimilar).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub anchor: usize,
    pub positives: [usize; 2],
    pub negatives: [usize; 4],
}

impl PairSet {
    /// Type invariants: no index equals the anchor, positives share the
    /// anchor's class, negatives differ in class.
    pub fn validate(&self, index: &SimilarityIndex) -> bool {
        let c = index.class(self.anchor);
        self.positives
            .iter()
            .all(|&p| p != self.anchor && index.class(p) == c)
            && self
                .negatives
                .iter()
                .all(|&nn| nn != self.anchor && index.class(nn) != c)
    }
}

fn quantile_len(n: usize, min: usize) -> usize {
    n.div_ceil(4).max(min).min(n)
}

/// Draw two pool members: distinct when the pool has at least two entries,
/// with replacement otherwise (the documented small-pool fallback).
fn draw_two(pool: &[usize], rng: &mut ChaCha8Rng) -> [usize; 2] {
    if pool.len() >= 2 {
        let i = rng.random_range(0..pool.len());
        let mut j = rng.random_range(0..pool.len() - 1);
        if j >= i {
            j += 1;
        }
        [pool[i], pool[j]]
    } else {
        [pool[0], pool[0]]
    }
}

/// Retrieve the positive/negative sets for `anchor`.
///
/// Positives: two uniform draws from the top-quartile same-class candidates
/// by cosine similarity (all candidates when two or fewer exist; a single
/// candidate is duplicated). Negatives: two draws from the most-similar
/// quartile of different-class candidates plus two from the least-similar
/// quartile. Returns `None` (anchor skipped, not fatal) when the anchor has
/// no same-class peer or fewer than two different-class samples exist.
pub fn sample_pairs(
    index: &SimilarityIndex,
    anchor: usize,
    rng: &mut ChaCha8Rng,
) -> Option<PairSet> {
    let c = index.class(anchor);
    let mut same: Vec<usize> = Vec::new();
    let mut diff: Vec<usize> = Vec::new();
    for j in 0..index.len() {
        if j == anchor {
            continue;
        }
        if index.class(j) == c {
            same.push(j);
        } else {
            diff.push(j);
        }
    }
    if same.is_empty() || diff.len() < 2 {
        return None;
    }
    let by_sim_desc = |list: &mut Vec<usize>| {
        list.sort_by(|&a, &b| {
            index
                .similarity(anchor, b)
                .partial_cmp(&index.similarity(anchor, a))
                .expect("finite cosine similarities")
                .then(a.cmp(&b))
        });
    };
    by_sim_desc(&mut same);
    by_sim_desc(&mut diff);

    let positives = if same.len() <= 2 {
        [same[0], same[same.len() - 1]]
    } else {
        draw_two(&same[..quantile_len(same.len(), 2)], rng)
    };

    let q = quantile_len(diff.len(), 1);
    let top = draw_two(&diff[..q], rng);
    let bottom = draw_two(&diff[diff.len() - q..], rng);

    Some(PairSet {
        anchor,
        positives,
        negatives: [top[0], top[1], bottom[0], bottom[1]],
    })
}

// ---------------------------------------------------------------------------
// batch objective

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveCfg {
    pub tau: f64,
    /// Text-anchored semantic alignment terms (text-audio, text-vision).
    pub semantic: bool,
    /// Supervised terms over retrieved pairs, per view.
    pub scl: bool,
    pub semantic_weight: f64,
    pub scl_weight: f64,
}

impl ContrastiveCfg {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            semantic: true,
            scl: true,
            semantic_weight: 1.0,
            scl_weight: 1.0,
        }
    }
}

/// Joint contrastive loss over one batch: mean over samples of the
/// semantic-alignment terms (anchor `x_t(i)` against the matching audio /
/// vision view, in-batch negatives) plus the supervised terms (anchor view
/// `f(i)` against the retrieved `P_i` / `N_i` features of the same view,
/// taken from the frozen bank).
pub fn contrastive_batch_loss(
    tape: &mut Tape,
    globals: &[GlobalVars],
    pair_sets: &[Option<PairSet>],
    bank: Option<&FeatureBank>,
    cfg: &ContrastiveCfg,
) -> Result<Var> {
    let n = globals.len();
    if n == 0 || pair_sets.len() != n {
        return Err(Error::Config(
            "contrastive_batch_loss: inconsistent batch".into(),
        ));
    }
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let mut terms: Vec<Var> = Vec::new();
        if cfg.semantic {
            for view in [FeatureView::Audio, FeatureView::Vision] {
                let anchor = globals[i].xt;
                let positives = [globals[i].view(view)];
                let negatives: Vec<Var> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| globals[j].view(view))
                    .collect();
                let t = ntxent_term(tape, anchor, &positives, &negatives, cfg.tau)?;
                terms.push(tape.scale(t, cfg.semantic_weight)?);
            }
        }
        if cfg.scl {
            if let Some(pairs) = &pair_sets[i] {
                let bank = bank.ok_or_else(|| {
                    Error::Config("supervised contrastive terms need a feature bank".into())
                })?;
                for view in VIEWS {
                    let anchor = globals[i].view(view);
                    let positives: Vec<Var> = pairs
                        .positives
                        .iter()
                        .map(|&p| tape.leaf(bank.features[p].view(view).clone()))
                        .collect();
                    let negatives: Vec<Var> = pairs
                        .negatives
                        .iter()
                        .map(|&nn| tape.leaf(bank.features[nn].view(view).clone()))
                        .collect();
                    let t = ntxent_term(tape, anchor, &positives, &negatives, cfg.tau)?;
                    terms.push(tape.scale(t, cfg.scl_weight)?);
                }
            }
        }
        let li = if terms.is_empty() {
            tape.leaf(Tensor::scalar(0.0))
        } else {
            let stacked = tape.stack_scalars(&terms)?;
            tape.sum(stacked)?
        };
        per_sample.push(li);
    }
    let stacked = tape.stack_scalars(&per_sample)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `L_all = MSE(predictions, labels) + lambda * contrastive`.
pub fn total_loss(
    predictions: &[f64],
    labels: &[f64],
    contrastive: f64,
    lambda: f64,
) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::Config(format!(
            "total_loss: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse + lambda * contrastive)
}
