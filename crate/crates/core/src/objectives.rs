//! Training objectives: cross-entropy, cluster/separation, coherence,
//! orthogonality, the slot-pruning objective and the last-layer sparsity
//! objective. Each has a plain evaluator and a graph builder; the batch
//! evaluators combine them and return parameter gradients.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{ImageTensor, TokenGrid};
use crate::error::{Error, Result};
use crate::matching::{score_image, AdjacencyParams, MatchResult};
use crate::model::{EvidenceLayer, GroupSet, Model, ParamGroup};
use crate::prototypes::PrototypeBank;

/// Loss coefficients. `clst` multiplies the cluster loss as written (which
/// already carries its own minus sign), so a positive value rewards
/// correct-class similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub coh: f64,
    pub orth: f64,
    pub coh_prune: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, clst: 0.8, sep: 0.09, coh: 3e-3, orth: 1e-3, coh_prune: 5e-5, l1: 1e-2 }
    }
}

/// Per-term loss values of one evaluation. Terms that an objective does not
/// use are still reported when they are cheap to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub coh: f64,
    pub orth: f64,
    pub l1: f64,
    pub total: f64,
}

/// Which objective a stage minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// CE + λ₁ clst + λ₂ sep + λ₃ coh + λ₄ orth.
    Joint(LossWeights),
    /// CE + λ₅ coh.
    Prune { coh_weight: f64 },
    /// CE + λ₆ · off-class L1 of the evidence weights.
    LastLayer { l1_weight: f64 },
}

/// Gradients aligned with [`Model::param_tensors`]; frozen groups are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Array2<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self { tensors: model.param_tensors().into_iter().map(|(_, _, t)| Array2::zeros(t.dim())).collect() }
    }

    pub fn group<'a>(&'a self, model: &'a Model, group: ParamGroup) -> impl Iterator<Item = &'a Array2<f64>> + 'a {
        model
            .param_tensors()
            .into_iter()
            .zip(&self.tensors)
            .filter(move |((_, g, _), _)| *g == group)
            .map(|(_, t)| t)
    }
}

// ---------------------------------------------------------------------------
// Plain evaluators

pub(crate) fn class_max(matches: &[MatchResult], class_of: &[usize], pick: impl Fn(usize) -> bool) -> Option<f64> {
    matches
        .iter()
        .zip(class_of)
        .filter(|(_, &c)| pick(c))
        .flat_map(|(m, _)| m.assignment.iter().zip(&m.cosines).filter(|(a, _)| a.is_some()).map(|(_, &c)| c))
        .fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))))
}

fn check_labels(labels: &[usize], grids: usize, num_classes: usize) -> Result<()> {
    if labels.len() != grids || labels.is_empty() {
        return Err(Error::Dimension(format!("{} labels for {grids} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// `-(1/n) Σ_i max` over correct-class prototypes and their matched
/// sub-prototype cosines. Slot gates do not enter.
pub fn cluster_loss(grids: &[TokenGrid], labels: &[usize], bank: &PrototypeBank, adjacency: &AdjacencyParams) -> Result<f64> {
    check_labels(labels, grids.len(), bank.num_classes())?;
    let mut sum = 0.0;
    for (grid, &y) in grids.iter().zip(labels) {
        let (_, matches) = score_image(grid, bank, adjacency)?;
        sum += class_max(&matches, &bank.class_of, |c| c == y).unwrap_or(0.0);
    }
    Ok(-sum / grids.len() as f64)
}

/// `(1/n) Σ_i max` over wrong-class prototypes; 0 when no wrong class exists.
pub fn separation_loss(grids: &[TokenGrid], labels: &[usize], bank: &PrototypeBank, adjacency: &AdjacencyParams) -> Result<f64> {
    check_labels(labels, grids.len(), bank.num_classes())?;
    let mut sum = 0.0;
    for (grid, &y) in grids.iter().zip(labels) {
        let (_, matches) = score_image(grid, bank, adjacency)?;
        sum += class_max(&matches, &bank.class_of, |c| c != y).unwrap_or(0.0);
    }
    Ok(sum / grids.len() as f64)
}

/// Mean over prototypes of the largest gated cosine distance between two of
/// its sub-prototypes, using the soft gates.
pub fn coherence_loss(bank: &PrototypeBank) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(bank.vectors.clone());
    let ind = g.constant(bank.soft_indicators().values);
    let v = coherence_var(&mut g, p, ind, bank.len(), bank.slots());
    g.scalar(v)
}

/// `Σ_l ‖P̂_l P̂_lᵀ − I‖_F²` over each class's flattened prototypes, rows
/// unit-normalized when `normalize` is set.
pub fn orthogonality_loss(bank: &PrototypeBank, normalize: bool) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(bank.vectors.clone());
    let v = orthogonality_var(&mut g, p, &bank.class_of, bank.slots(), normalize);
    g.scalar(v)
}

/// `Σ_l Σ_{j: class(j) ≠ l} |W[l, j]|`.
pub fn offclass_l1(evidence: &EvidenceLayer, class_of: &[usize]) -> f64 {
    evidence
        .weights
        .indexed_iter()
        .filter(|((l, j), _)| class_of[*j] != *l)
        .map(|(_, w)| w.abs())
        .sum()
}

// ---------------------------------------------------------------------------
// Graph builders

/// Coherence term from an `(m·K)×d` prototype node and an `m×K` gate node.
pub fn coherence_var(g: &mut Graph, protos: Var, indicators: Var, m: usize, k: usize) -> Var {
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    if pairs.is_empty() {
        return g.constant(Array2::zeros((1, 1)));
    }
    let np = pairs.len();
    let pn = g.normalize_rows(protos);
    let left: Vec<usize> = (0..m).flat_map(|j| pairs.iter().map(move |&(a, _)| j * k + a)).collect();
    let right: Vec<usize> = (0..m).flat_map(|j| pairs.iter().map(move |&(_, b)| j * k + b)).collect();
    let a = g.gather_rows(pn, left);
    let b = g.gather_rows(pn, right);
    let prod = g.mul(a, b);
    let cos = g.sum_rows(prod);
    let cos = g.reshape(cos, m, np);
    let neg = g.scale(cos, -1.0);
    let dist = g.offset(neg, 1.0);
    let ia = g.gather(indicators, (0..m).flat_map(|j| pairs.iter().map(move |&(a, _)| (j, a))).collect(), m, np);
    let ib = g.gather(indicators, (0..m).flat_map(|j| pairs.iter().map(move |&(_, b)| (j, b))).collect(), m, np);
    let gated = g.mul(dist, ia);
    let gated = g.mul(gated, ib);
    let worst = g.max_rows(gated);
    g.mean_all(worst)
}

/// Orthogonality term from an `(m·K)×d` prototype node.
pub fn orthogonality_var(g: &mut Graph, protos: Var, class_of: &[usize], k: usize, normalize: bool) -> Var {
    let m = class_of.len();
    let d = g.value(protos).ncols();
    let flat = g.reshape(protos, m, k * d);
    let flat = if normalize { g.normalize_rows(flat) } else { flat };
    let classes = class_of.iter().max().map_or(0, |c| c + 1);
    let mut total: Option<Var> = None;
    for l in 0..classes {
        let rows: Vec<usize> = (0..m).filter(|&j| class_of[j] == l).collect();
        let rho = rows.len();
        let pl = g.gather_rows(flat, rows);
        let gram = g.matmul_nt(pl, pl);
        let eye = g.constant(Array2::eye(rho));
        let diff = g.sub(gram, eye);
        let sq = g.square(diff);
        let s = g.sum_all(sq);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.unwrap_or_else(|| g.constant(Array2::zeros((1, 1))))
}

/// Off-class L1 of a `C×m` evidence weight node.
pub fn offclass_l1_var(g: &mut Graph, weights: Var, class_of: &[usize]) -> Var {
    let (c, m) = g.value(weights).dim();
    let mask = Array2::from_shape_fn((c, m), |(l, j)| if class_of[j] != l { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let off = g.mul(weights, mask);
    let a = g.abs(off);
    g.sum_all(a)
}

/// Max of the matched cosines of the prototypes selected by `pick`, over
/// matched slots only. `None` if nothing qualifies.
fn class_max_var(
    g: &mut Graph,
    cosines: Var,
    matches: &[MatchResult],
    class_of: &[usize],
    pick: impl Fn(usize) -> bool,
) -> Option<Var> {
    let idx: Vec<(usize, usize)> = matches
        .iter()
        .enumerate()
        .filter(|(j, _)| pick(class_of[*j]))
        .flat_map(|(j, m)| m.assignment.iter().enumerate().filter(|(_, a)| a.is_some()).map(move |(s, _)| (j, s)))
        .collect();
    if idx.is_empty() {
        return None;
    }
    let n = idx.len();
    let vals = g.gather(cosines, idx, 1, n);
    Some(g.max_rows(vals))
}

// ---------------------------------------------------------------------------
// Batch evaluators

struct ImageTerms {
    ce: f64,
    clst: f64,
    sep: f64,
    grads: Vec<Option<Array2<f64>>>,
}

fn add_into(acc: &mut [Array2<f64>], grads: Vec<Option<Array2<f64>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            *a += &g;
        }
    }
}

/// Evaluate `objective` on a batch of images. Only the groups in
/// `trainable` receive gradients. Per-image work runs in parallel; results
/// are reduced in input order, so the outcome is deterministic.
pub fn evaluate_batch(
    model: &Model,
    images: &[&ImageTensor],
    labels: &[usize],
    objective: Objective,
    trainable: GroupSet,
) -> Result<(LossBreakdown, ModelGrads)> {
    check_labels(labels, images.len(), model.num_classes())?;
    let n = images.len() as f64;
    let (ce_w, clst_w, sep_w) = match objective {
        Objective::Joint(w) => (w.ce, w.clst, w.sep),
        _ => (1.0, 0.0, 0.0),
    };
    let class_of = &model.bank.class_of;

    let per_image: Vec<Result<ImageTerms>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &y)| {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, trainable);
            let fwd = model.forward_image(&mut g, &vars, img)?;
            let ce = g.cross_entropy(fwd.logits, &[y]);
            let clst = class_max_var(&mut g, fwd.cosines, &fwd.matches, class_of, |c| c == y);
            let sep = class_max_var(&mut g, fwd.cosines, &fwd.matches, class_of, |c| c != y);
            let mut loss = g.scale(ce, ce_w / n);
            if let Some(c) = clst.filter(|_| clst_w != 0.0) {
                let t = g.scale(c, -clst_w / n);
                loss = g.add(loss, t);
            }
            if let Some(s) = sep.filter(|_| sep_w != 0.0) {
                let t = g.scale(s, sep_w / n);
                loss = g.add(loss, t);
            }
            let mut grads = g.backward(loss);
            Ok(ImageTerms {
                ce: g.scalar(ce),
                clst: clst.map_or(0.0, |c| -g.scalar(c)),
                sep: sep.map_or(0.0, |s| g.scalar(s)),
                grads: vars.iter().map(|&v| grads.take(v)).collect(),
            })
        })
        .collect();

    let mut out = ModelGrads::zeros_like(model);
    let mut br = LossBreakdown::default();
    for terms in per_image {
        let t = terms?;
        br.ce += t.ce / n;
        br.clst += t.clst / n;
        br.sep += t.sep / n;
        add_into(&mut out.tensors, t.grads);
    }

    // terms that depend on the parameters only
    let mut g = Graph::new();
    let vars = model.bind(&mut g, trainable);
    let n_enc = vars.len() - 3;
    let (protos, slots, weights) = (vars[n_enc], vars[n_enc + 1], vars[n_enc + 2]);
    let scaled = g.scale(slots, model.bank.tau);
    let soft = g.sigmoid(scaled);
    let coh = coherence_var(&mut g, protos, soft, model.bank.len(), model.bank.slots());
    let orth = orthogonality_var(&mut g, protos, class_of, model.bank.slots(), true);
    let l1 = offclass_l1_var(&mut g, weights, class_of);
    br.coh = g.scalar(coh);
    br.orth = g.scalar(orth);
    br.l1 = g.scalar(l1);
    let (param_loss, param_total) = match objective {
        Objective::Joint(w) => {
            let a = g.scale(coh, w.coh);
            let b = g.scale(orth, w.orth);
            (g.add(a, b), ce_w * br.ce + w.clst * br.clst + w.sep * br.sep + w.coh * br.coh + w.orth * br.orth)
        }
        Objective::Prune { coh_weight } => (g.scale(coh, coh_weight), br.ce + coh_weight * br.coh),
        Objective::LastLayer { l1_weight } => (g.scale(l1, l1_weight), br.ce + l1_weight * br.l1),
    };
    br.total = param_total;
    if g.requires_grad(param_loss) {
        let mut grads = g.backward(param_loss);
        add_into(&mut out.tensors, vars.iter().map(|&v| grads.take(v)).collect());
    }
    Ok((br, out))
}

/// Stage-one objective; gradients for the encoder and prototypes.
pub fn total_loss(model: &Model, images: &[&ImageTensor], labels: &[usize], weights: LossWeights) -> Result<(LossBreakdown, ModelGrads)> {
    let groups = GroupSet { encoder: true, prototypes: true, ..GroupSet::none() };
    evaluate_batch(model, images, labels, Objective::Joint(weights), groups)
}

/// Slot-pruning objective; gradients for the slot parameters only.
pub fn prune_loss(model: &Model, images: &[&ImageTensor], labels: &[usize], coh_weight: f64) -> Result<(LossBreakdown, ModelGrads)> {
    let groups = GroupSet { slots: true, ..GroupSet::none() };
    evaluate_batch(model, images, labels, Objective::Prune { coh_weight }, groups)
}

/// Matched cosines of every prototype as an `m×K` array.
pub fn cosine_matrix(matches: &[MatchResult]) -> Array2<f64> {
    let k = matches.first().map_or(0, |m| m.cosines.len());
    Array2::from_shape_fn((matches.len(), k), |(j, s)| matches[j].cosines[s])
}

/// Slot-pruning objective on cached matched cosines (the encoder and
/// prototypes are frozen during pruning, so the matches do not change).
/// Returns the breakdown and the gradient for the `m×K` slot parameters.
pub fn prune_loss_cached(
    cosines: &[Array2<f64>],
    labels: &[usize],
    bank: &PrototypeBank,
    evidence: &EvidenceLayer,
    coh_weight: f64,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_labels(labels, cosines.len(), evidence.num_classes())?;
    let k = bank.slots();
    let mut g = Graph::new();
    let slots = g.param(bank.slot_params.clone());
    let scaled = g.scale(slots, bank.tau);
    let ind = g.sigmoid(scaled);
    let w = g.constant(evidence.weights.clone());
    let den = g.sum_rows(ind);
    let mut rows = Vec::with_capacity(cosines.len());
    for cos in cosines {
        let c = g.constant(cos.clone());
        let weighted = g.mul(c, ind);
        let num = g.sum_rows(weighted);
        let ratio = g.div(num, den);
        let scores = g.scale(ratio, k as f64);
        let col = g.matmul(w, scores);
        rows.push(g.transpose(col));
    }
    let logits = g.concat_rows(&rows);
    let ce = g.cross_entropy(logits, labels);
    let p = g.constant(bank.vectors.clone());
    let coh = coherence_var(&mut g, p, ind, bank.len(), k);
    let t = g.scale(coh, coh_weight);
    let total = g.add(ce, t);
    let mut grads = g.backward(total);
    let br = LossBreakdown { ce: g.scalar(ce), coh: g.scalar(coh), total: g.scalar(total), ..Default::default() };
    let grad = grads.take(slots).unwrap_or_else(|| Array2::zeros(bank.slot_params.dim()));
    Ok((br, grad))
}

/// Last-layer objective on fixed prototype scores (`n×m`). Returns the
/// breakdown and the gradient for the `C×m` evidence weights.
pub fn last_layer_loss(
    scores: &Array2<f64>,
    labels: &[usize],
    evidence: &EvidenceLayer,
    class_of: &[usize],
    l1_weight: f64,
) -> Result<(LossBreakdown, Array2<f64>)> {
    check_labels(labels, scores.nrows(), evidence.num_classes())?;
    if scores.ncols() != class_of.len() || evidence.weights.ncols() != class_of.len() {
        return Err(Error::Dimension("scores, evidence and prototypes disagree on m".into()));
    }
    let mut g = Graph::new();
    let w = g.param(evidence.weights.clone());
    let s = g.constant(scores.clone());
    let logits = g.matmul_nt(s, w);
    let ce = g.cross_entropy(logits, labels);
    let l1 = offclass_l1_var(&mut g, w, class_of);
    let t = g.scale(l1, l1_weight);
    let total = g.add(ce, t);
    let mut grads = g.backward(total);
    let br = LossBreakdown { ce: g.scalar(ce), l1: g.scalar(l1), total: g.scalar(total), ..Default::default() };
    Ok((br, grads.take(w).expect("evidence weights require grad")))
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let ce = g.cross_entropy(z, labels);
    g.scalar(ce)
}

/// Row-stack a list of equally long score vectors.
pub fn stack_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut out = Array2::zeros((rows.len(), cols));
    for (mut r, v) in out.axis_iter_mut(Axis(0)).zip(rows) {
        r.assign(&ndarray::ArrayView1::from(v.as_slice()));
    }
    out
}
