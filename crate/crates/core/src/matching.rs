//! Greedy matching of sub-prototypes to latent tokens under an adjacency
//! mask, and the slot-reweighted similarity built from the matched cosines.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;

/// Similarity written over masked-out pairs before each greedy pick.
pub const MASKED: f64 = -1e9;

static ZERO_VECTOR_COSINES: AtomicU64 = AtomicU64::new(0);

/// How many times [`cosine`] has been asked about an all-zero vector.
pub fn zero_vector_cosines() -> u64 {
    ZERO_VECTOR_COSINES.load(Ordering::Relaxed)
}

/// Which earlier picks the adjacency mask is centred on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyAnchor {
    /// Only the most recently selected token.
    Last,
    /// Any previously selected token.
    Union,
}

impl std::str::FromStr for AdjacencyAnchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "union" => Ok(Self::Union),
            other => Err(Error::Config(format!("adjacency_anchor must be last|union, got {other}"))),
        }
    }
}

impl std::fmt::Display for AdjacencyAnchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::Union => "union",
        })
    }
}

/// Chebyshev radius of the adjacency mask. `None` disables masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjacencyParams {
    pub radius: Option<usize>,
    pub anchor: AdjacencyAnchor,
}

impl AdjacencyParams {
    pub fn new(radius: usize) -> Self {
        Self { radius: Some(radius), anchor: AdjacencyAnchor::Last }
    }

    pub fn unmasked() -> Self {
        Self { radius: None, anchor: AdjacencyAnchor::Last }
    }

    pub fn with_anchor(mut self, anchor: AdjacencyAnchor) -> Self {
        self.anchor = anchor;
        self
    }

    fn allows(&self, from: usize, to: usize, cols: usize) -> bool {
        match self.radius {
            None => true,
            Some(r) => chebyshev(from, to, cols) <= r,
        }
    }
}

/// Outcome of matching one prototype against one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Token matched by each sub-prototype, in sub-prototype order; `None`
    /// for slots switched off in a frozen bank.
    pub assignment: Vec<Option<usize>>,
    /// Cosine of each matched pair (0 for skipped slots).
    pub cosines: Vec<f64>,
    /// Reweighted summed similarity.
    pub total: f64,
    /// Sub-prototype indices in the order they were picked.
    pub selection_order: Vec<usize>,
}

impl MatchResult {
    pub fn matched_tokens(&self) -> Vec<usize> {
        self.assignment.iter().flatten().copied().collect()
    }
}

pub fn chebyshev(a: usize, b: usize, cols: usize) -> usize {
    let (ar, ac) = (a / cols, a % cols);
    let (br, bc) = (b / cols, b % cols);
    ar.abs_diff(br).max(ac.abs_diff(bc))
}

/// All in-grid cells within Chebyshev distance `r` of `index`, centre
/// included, ascending.
pub fn neighborhood(index: usize, grid_rows: usize, grid_cols: usize, r: usize) -> Vec<usize> {
    let (row, col) = (index / grid_cols, index % grid_cols);
    let rows = row.saturating_sub(r)..=(row + r).min(grid_rows - 1);
    let mut out = Vec::new();
    for rr in rows {
        for cc in col.saturating_sub(r)..=(col + r).min(grid_cols - 1) {
            out.push(rr * grid_cols + cc);
        }
    }
    out
}

/// `aᵀb / (‖a‖‖b‖)` clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        ZERO_VECTOR_COSINES.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Greedy matching on a precomputed `K×N` similarity matrix.
///
/// Each round masks tokens that are already taken or fall outside the
/// adjacency window of the anchor pick, takes the best remaining token per
/// unmatched sub-prototype, and keeps the best of those pairs. Ties go to the
/// lowest token index, then the lowest sub-prototype index. `active` limits
/// matching to a subset of sub-prototypes; the rest are reported as skipped.
/// `total` is the plain sum of the matched cosines.
pub fn greedy_match_similarity(
    sim: ArrayView2<'_, f64>,
    grid_cols: usize,
    adjacency: &AdjacencyParams,
    active: Option<&[bool]>,
) -> Result<MatchResult> {
    let (k, n) = sim.dim();
    let mut remaining: Vec<bool> = match active {
        Some(a) => a.to_vec(),
        None => vec![true; k],
    };
    let picks = remaining.iter().filter(|&&a| a).count();
    if picks > n {
        return Err(Error::Dimension(format!("{picks} sub-prototypes cannot match {n} tokens without replacement")));
    }
    let mut taken = vec![false; n];
    let mut assignment = vec![None; k];
    let mut cosines = vec![0.0; k];
    let mut order = Vec::with_capacity(picks);
    let mut selected_tokens: Vec<usize> = Vec::with_capacity(picks);

    let mut masked = vec![MASKED; n];
    for step in 0..picks {
        for (t, m) in masked.iter_mut().enumerate() {
            let eligible = !taken[t]
                && match (selected_tokens.last(), adjacency.anchor) {
                    (None, _) => true,
                    (Some(&last), AdjacencyAnchor::Last) => adjacency.allows(last, t, grid_cols),
                    (Some(_), AdjacencyAnchor::Union) => {
                        selected_tokens.iter().any(|&s| adjacency.allows(s, t, grid_cols))
                    }
                };
            *m = if eligible { 1.0 } else { MASKED };
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for t in 0..n {
            for (s, rem) in remaining.iter().enumerate() {
                if !rem {
                    continue;
                }
                let v = if masked[t] == MASKED { MASKED } else { sim[[s, t]] };
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, s, t));
                }
            }
        }
        let (v, s, t) = best.expect("at least one remaining sub-prototype");
        if v <= MASKED {
            return Err(Error::InfeasibleNeighborhood { step, radius: adjacency.radius.unwrap_or(usize::MAX) });
        }
        remaining[s] = false;
        taken[t] = true;
        assignment[s] = Some(t);
        cosines[s] = v;
        order.push(s);
        selected_tokens.push(t);
    }
    let total = cosines.iter().sum();
    Ok(MatchResult { assignment, cosines, total, selection_order: order })
}

/// Cosine matrix between the `K` rows of `prototype` and every token.
pub fn similarity_matrix(tokens: &TokenGrid, prototype: ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
    let normalize = |m: ArrayView2<'_, f64>| {
        let mut m = m.to_owned();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            } else {
                ZERO_VECTOR_COSINES.fetch_add(1, Ordering::Relaxed);
            }
        }
        m
    };
    let p = normalize(prototype);
    let z = normalize(tokens.tokens.view());
    p.dot(&z.t()).mapv(|v| v.clamp(-1.0, 1.0))
}

/// Greedy matching of one `K×d` prototype against a token grid, all slots
/// active.
pub fn greedy_match(tokens: &TokenGrid, prototype: ArrayView2<'_, f64>, adjacency: &AdjacencyParams) -> Result<MatchResult> {
    if prototype.ncols() != tokens.dim() {
        return Err(Error::Dimension(format!(
            "prototype width {} does not match token width {}",
            prototype.ncols(),
            tokens.dim()
        )));
    }
    let sim = similarity_matrix(tokens, prototype);
    greedy_match_similarity(sim.view(), tokens.grid_cols, adjacency, None)
}

/// `(K / Σ 1̃) · Σ cos_k · 1̃_k`.
pub fn reweighted_similarity(cosines: &[f64], indicators: &[f64]) -> Result<f64> {
    if cosines.len() != indicators.len() {
        return Err(Error::Dimension("cosines and indicators differ in length".into()));
    }
    let mass: f64 = indicators.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::Contract("every slot indicator is zero".into()));
    }
    let weighted: f64 = cosines.iter().zip(indicators).map(|(c, i)| c * i).sum();
    Ok(cosines.len() as f64 / mass * weighted)
}

/// Match every prototype of the bank against one image and score it.
/// Prototypes are independent of each other.
pub fn score_image(tokens: &TokenGrid, bank: &PrototypeBank, adjacency: &AdjacencyParams) -> Result<(Vec<f64>, Vec<MatchResult>)> {
    if bank.dim() != tokens.dim() {
        return Err(Error::Dimension(format!("bank width {} vs token width {}", bank.dim(), tokens.dim())));
    }
    let normalize = |m: ArrayView2<'_, f64>| {
        let mut m = m.to_owned();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            }
        }
        m
    };
    let sim = normalize(bank.vectors.view())
        .dot(&normalize(tokens.tokens.view()).t())
        .mapv(|v| v.clamp(-1.0, 1.0));
    match_all(sim.view(), bank, tokens.grid_cols, adjacency)
}

/// Greedy matching and reweighting for every prototype given the stacked
/// `(m·K)×N` similarity matrix.
pub fn match_all(
    sim: ArrayView2<'_, f64>,
    bank: &PrototypeBank,
    grid_cols: usize,
    adjacency: &AdjacencyParams,
) -> Result<(Vec<f64>, Vec<MatchResult>)> {
    let k = bank.slots();
    let ind = bank.indicators();
    let mut scores = Vec::with_capacity(bank.len());
    let mut matches = Vec::with_capacity(bank.len());
    for j in 0..bank.len() {
        let rows = sim.slice(ndarray::s![j * k..(j + 1) * k, ..]);
        let active = ind.rounded.then(|| ind.values.row(j).iter().map(|&v| v >= 0.5).collect::<Vec<_>>());
        let mut m = greedy_match_similarity(rows, grid_cols, adjacency, active.as_deref())?;
        m.total = reweighted_similarity(&m.cosines, &ind.row(j))?;
        scores.push(m.total);
        matches.push(m);
    }
    Ok((scores, matches))
}

/// Graph form of the reweighted similarity for a fixed set of matches.
///
/// `sim` is the `(m·K)×N` cosine node, `indicators` an `m×K` node. Gradients
/// flow through the matched cosines only. Returns the `m×1` score column and
/// the `m×K` matched-cosine node.
pub fn reweighted_scores_var(g: &mut Graph, sim: Var, matches: &[MatchResult], indicators: Var, k: usize) -> (Var, Var) {
    let m = matches.len();
    let mut idx = Vec::with_capacity(m * k);
    for (j, r) in matches.iter().enumerate() {
        for (s, t) in r.assignment.iter().enumerate() {
            // skipped slots carry a zero indicator; any token works here
            idx.push((j * k + s, t.unwrap_or(0)));
        }
    }
    let cos = g.gather(sim, idx, m, k);
    let weighted = g.mul(cos, indicators);
    let num = g.sum_rows(weighted);
    let den = g.sum_rows(indicators);
    let ratio = g.div(num, den);
    (g.scale(ratio, k as f64), cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn cosine_examples() {
        let x = array![0.3, -2.0, 5.0];
        assert!((cosine(x.view(), x.view()) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
        // 32 / (sqrt(14) sqrt(77))
        let c = cosine(array![1.0, 2.0, 3.0].view(), array![4.0, 5.0, 6.0].view());
        assert!((c - 0.974_631_846_197_076_2).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_cosine_is_zero_and_counted() {
        let before = zero_vector_cosines();
        assert_eq!(cosine(array![0.0, 0.0].view(), array![1.0, 0.0].view()), 0.0);
        assert!(zero_vector_cosines() > before);
    }

    #[test]
    fn neighborhoods() {
        assert_eq!(neighborhood(0, 14, 14, 1), vec![0, 1, 14, 15]);
        assert_eq!(neighborhood(15, 14, 14, 1).len(), 9);
        assert_eq!(neighborhood(37, 14, 14, 0), vec![37]);
        assert_eq!(neighborhood(5, 3, 3, 10).len(), 9);
    }

    #[test]
    fn hand_traced_two_by_two() {
        let sim = array![[0.9, 0.1, 0.2, 0.3], [0.8, 0.7, 0.6, 0.5]];
        let r = greedy_match_similarity(sim.view(), 2, &AdjacencyParams::new(1), None).unwrap();
        assert_eq!(r.assignment, vec![Some(0), Some(1)]);
        assert_eq!(r.cosines, vec![0.9, 0.7]);
        assert_eq!(r.selection_order, vec![0, 1]);
    }

    #[test]
    fn order_is_restored() {
        // second sub-prototype is picked first
        let sim = array![[0.2, 0.5, 0.1], [0.9, 0.1, 0.0]];
        let r = greedy_match_similarity(sim.view(), 3, &AdjacencyParams::new(1), None).unwrap();
        assert_eq!(r.selection_order, vec![1, 0]);
        assert_eq!(r.assignment, vec![Some(1), Some(0)]);
        assert_eq!(r.cosines, vec![0.5, 0.9]);
    }

    #[test]
    fn ties_prefer_low_token_then_low_slot() {
        let sim = array![[0.5, 0.5], [0.5, 0.5]];
        let r = greedy_match_similarity(sim.view(), 2, &AdjacencyParams::unmasked(), None).unwrap();
        assert_eq!(r.assignment, vec![Some(0), Some(1)]);
        assert_eq!(r.selection_order, vec![0, 1]);
    }

    #[test]
    fn corner_with_tiny_radius_is_infeasible() {
        // 1x3 strip, r=0: after the first pick nothing is adjacent
        let sim = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let err = greedy_match_similarity(sim.view(), 3, &AdjacencyParams::new(0), None).unwrap_err();
        assert!(matches!(err, Error::InfeasibleNeighborhood { step: 1, .. }));
    }

    #[test]
    fn full_grid_is_a_permutation() {
        let sim = Array2::from_shape_fn((9, 9), |(a, b)| ((a * 7 + b * 3) % 11) as f64 / 11.0);
        let r = greedy_match_similarity(sim.view(), 3, &AdjacencyParams::new(2), None).unwrap();
        let mut t = r.matched_tokens();
        t.sort();
        assert_eq!(t, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn inactive_slots_are_skipped() {
        let sim = array![[0.9, 0.1], [0.2, 0.95]];
        let r = greedy_match_similarity(sim.view(), 2, &AdjacencyParams::new(1), Some(&[true, false])).unwrap();
        assert_eq!(r.assignment, vec![Some(0), None]);
        assert_eq!(r.cosines, vec![0.9, 0.0]);
    }

    #[test]
    fn reweighting_examples() {
        let c = [0.5, 0.4, 0.3, 0.2];
        assert!((reweighted_similarity(&c, &[1.0; 4]).unwrap() - 1.4).abs() < 1e-12);
        assert!((reweighted_similarity(&c, &[1.0, 1.0, 0.0, 0.0]).unwrap() - 1.8).abs() < 1e-12);
        assert_eq!(reweighted_similarity(&[1.0; 4], &[0.3, 0.9, 0.0, 0.2]).unwrap(), 4.0);
        assert!(matches!(reweighted_similarity(&c, &[0.0; 4]), Err(Error::Contract(_))));
    }

    #[test]
    fn perfect_match_and_duplicates() {
        let tokens = Array2::from_shape_fn((9, 4), |(i, j)| ((i + 1) * (j + 2) % 7) as f64 - 2.5);
        let grid = TokenGrid::new(tokens.clone(), 3, 3, 1).unwrap();
        let mut bank = PrototypeBank::init(2, 1, 2, 4, 0).unwrap();
        // prototype 0 copies tokens 4 and 5 (adjacent); prototype 1 duplicates it
        for (s, t) in [(0, 4), (1, 5)] {
            bank.vectors.row_mut(s).assign(&tokens.row(t));
            bank.vectors.row_mut(2 + s).assign(&tokens.row(t));
        }
        let (scores, matches) = score_image(&grid, &bank, &AdjacencyParams::new(1)).unwrap();
        assert!((scores[0] - 2.0).abs() < 1e-12);
        assert_eq!(scores[0], scores[1]);
        assert_eq!(matches[0], matches[1]);
    }

    #[test]
    fn unmasked_equals_large_radius() {
        let tokens = Array2::from_shape_fn((16, 3), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
        let grid = TokenGrid::new(tokens, 4, 4, 1).unwrap();
        let proto = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 2 + j) % 5) as f64 - 1.5);
        let a = greedy_match(&grid, proto.view(), &AdjacencyParams::unmasked()).unwrap();
        let b = greedy_match(&grid, proto.view(), &AdjacencyParams::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tokens = Array2::from_shape_fn((9, 5), |_| rng.random_range(-1.0..1.0));
        let grid = TokenGrid::new(tokens.clone(), 3, 3, 1).unwrap();
        let bank = PrototypeBank::init(1, 2, 3, 5, 4).unwrap();
        let (_, matches) = score_image(&grid, &bank, &AdjacencyParams::new(1)).unwrap();
        let ind = Array2::from_shape_fn((2, 3), |(j, s)| 0.3 + 0.2 * (j + s) as f64);

        let eval = |protos: &Array2<f64>| -> (f64, Option<Array2<f64>>) {
            let mut g = Graph::new();
            let p = g.param(protos.clone());
            let z = g.constant(tokens.clone());
            let pn = g.normalize_rows(p);
            let zn = g.normalize_rows(z);
            let sim = g.matmul_nt(pn, zn);
            let i = g.constant(ind.clone());
            let (scores, _) = reweighted_scores_var(&mut g, sim, &matches, i, 3);
            let total = g.sum_all(scores);
            let grads = g.backward(total);
            (g.scalar(total), grads.get(p).cloned())
        };
        let (_, grad) = eval(&bank.vectors);
        let grad = grad.unwrap();
        let h = 1e-6;
        for r in 0..bank.vectors.nrows() {
            for c in 0..bank.vectors.ncols() {
                let mut plus = bank.vectors.clone();
                plus[[r, c]] += h;
                let mut minus = bank.vectors.clone();
                minus[[r, c]] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = grad[[r, c]];
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "({r},{c}) {a} vs {fd}");
            }
        }
    }
}
