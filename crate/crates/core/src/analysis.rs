//! Explanations and robustness probes for a trained model: nearest
//! prototypes of an image, nearest images of a prototype, per-class
//! evidence breakdowns, masking and re-matching, and the location-change
//! statistic.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{write_png, Dataset};
use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::model::{Inference, Model};
use crate::prototypes::Provenance;

/// Default number of entries in local and global rankings.
pub const DEFAULT_Q: usize = 3;
/// Default mask fill value (mid-gray).
pub const DEFAULT_FILL: f64 = 0.5;

/// Pixel rectangle of one grid cell: top, left, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PatchBox {
    pub token: usize,
    pub row: usize,
    pub col: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

fn boxes(tokens: &[usize], grid_cols: usize, patch_side: usize) -> Vec<PatchBox> {
    tokens
        .iter()
        .map(|&t| {
            let (row, col) = (t / grid_cols, t % grid_cols);
            PatchBox { token: t, row, col, top: row * patch_side, left: col * patch_side, size: patch_side }
        })
        .collect()
}

fn model_boxes(model: &Model, m: &MatchResult) -> Vec<PatchBox> {
    let cfg = &model.encoder.config;
    boxes(&m.matched_tokens(), cfg.grid_side(), cfg.patch_side)
}

/// One prototype in a local ranking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalEntry {
    pub prototype: usize,
    pub class: usize,
    pub score: f64,
    /// Matched token per sub-prototype; `None` for switched-off slots.
    pub assignment: Vec<Option<usize>>,
    pub boxes: Vec<PatchBox>,
    pub provenance: Vec<Option<Provenance>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalAnalysis {
    pub image_id: usize,
    pub predicted: usize,
    pub entries: Vec<LocalEntry>,
}

/// Prototype ids by descending score, lowest id first on ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

pub fn local_analysis_of(model: &Model, inference: &Inference, image_id: usize, q: usize) -> LocalAnalysis {
    let k = model.bank.slots();
    let entries = ranking(&inference.scores)
        .into_iter()
        .take(q)
        .map(|j| {
            let m = &inference.matches[j];
            LocalEntry {
                prototype: j,
                class: model.bank.class_of[j],
                score: inference.scores[j],
                assignment: m.assignment.clone(),
                boxes: model_boxes(model, m),
                provenance: model.bank.provenance[j * k..(j + 1) * k].to_vec(),
            }
        })
        .collect();
    LocalAnalysis { image_id, predicted: inference.label(), entries }
}

/// The `q` prototypes most similar to `image` with where they match.
pub fn local_analysis(model: &Model, image: &ImageTensor, image_id: usize, q: usize) -> Result<LocalAnalysis> {
    let inf = model.infer(image)?;
    Ok(local_analysis_of(model, &inf, image_id, q))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalEntry {
    pub image_id: usize,
    pub label: usize,
    pub score: f64,
    pub assignment: Vec<Option<usize>>,
    pub boxes: Vec<PatchBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalAnalysis {
    pub prototype: usize,
    pub class: usize,
    /// Projection source removed from the ranking, if any.
    pub excluded_image: Option<usize>,
    pub entries: Vec<GlobalEntry>,
}

/// The image a prototype was projected from.
pub fn source_image(model: &Model, prototype: usize) -> Option<usize> {
    let k = model.bank.slots();
    model.bank.provenance[prototype * k..(prototype + 1) * k].iter().flatten().map(|p| p.image_id).next()
}

/// Inference on every image of a corpus, in corpus order.
pub fn infer_corpus(model: &Model, corpus: &Dataset) -> Result<Vec<Inference>> {
    corpus.samples.par_iter().map(|s| model.infer(&s.image)).collect()
}

/// Global ranking from precomputed inferences (see [`infer_corpus`]).
pub fn global_analysis_of(
    model: &Model,
    corpus: &Dataset,
    inferences: &[Inference],
    prototype: usize,
    q: usize,
    exclude_source: bool,
) -> Result<GlobalAnalysis> {
    if prototype >= model.bank.len() {
        return Err(Error::UnknownPrototype(prototype));
    }
    let excluded = if exclude_source { source_image(model, prototype) } else { None };
    let mut order: Vec<usize> = (0..corpus.len()).filter(|&i| Some(corpus.samples[i].id) != excluded).collect();
    order.sort_by(|&a, &b| {
        inferences[b].scores[prototype]
            .total_cmp(&inferences[a].scores[prototype])
            .then(corpus.samples[a].id.cmp(&corpus.samples[b].id))
    });
    let entries = order
        .into_iter()
        .take(q)
        .map(|i| {
            let m = &inferences[i].matches[prototype];
            GlobalEntry {
                image_id: corpus.samples[i].id,
                label: corpus.samples[i].label,
                score: inferences[i].scores[prototype],
                assignment: m.assignment.clone(),
                boxes: model_boxes(model, m),
            }
        })
        .collect();
    Ok(GlobalAnalysis { prototype, class: model.bank.class_of[prototype], excluded_image: excluded, entries })
}

/// The `q` corpus images most similar to one prototype. With
/// `exclude_source`, the image the prototype was projected from is left
/// out of the ranking.
pub fn global_analysis(model: &Model, corpus: &Dataset, prototype: usize, q: usize, exclude_source: bool) -> Result<GlobalAnalysis> {
    if prototype >= model.bank.len() {
        return Err(Error::UnknownPrototype(prototype));
    }
    let infs = infer_corpus(model, corpus)?;
    global_analysis_of(model, corpus, &infs, prototype, q, exclude_source)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contribution {
    pub prototype: usize,
    pub prototype_class: usize,
    pub score: f64,
    pub weight: f64,
    pub contribution: f64,
    pub boxes: Vec<PatchBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReasoning {
    pub class: usize,
    pub logit: f64,
    /// Every prototype's weighted score, largest magnitude first.
    pub contributions: Vec<Contribution>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReasoningReport {
    pub predicted: usize,
    pub logits: Vec<f64>,
    pub classes: Vec<ClassReasoning>,
}

/// Per-class evidence for the `top_classes` highest logits.
pub fn reasoning_report(model: &Model, image: &ImageTensor, top_classes: usize) -> Result<ReasoningReport> {
    let inf = model.infer(image)?;
    let mut classes: Vec<usize> = (0..inf.logits.len()).collect();
    classes.sort_by(|&a, &b| inf.logits[b].total_cmp(&inf.logits[a]).then(a.cmp(&b)));
    let reports = classes
        .into_iter()
        .take(top_classes)
        .map(|l| {
            let mut contributions: Vec<Contribution> = (0..model.bank.len())
                .map(|j| {
                    let weight = model.evidence.weights[[l, j]];
                    Contribution {
                        prototype: j,
                        prototype_class: model.bank.class_of[j],
                        score: inf.scores[j],
                        weight,
                        contribution: weight * inf.scores[j],
                        boxes: model_boxes(model, &inf.matches[j]),
                    }
                })
                .collect();
            let total = contributions.iter().map(|c| c.contribution).sum();
            contributions.sort_by(|a, b| b.contribution.abs().total_cmp(&a.contribution.abs()).then(a.prototype.cmp(&b.prototype)));
            ClassReasoning { class: l, logit: inf.logits[l], contributions, total }
        })
        .collect();
    Ok(ReasoningReport { predicted: inf.label(), logits: inf.logits, classes: reports })
}

/// Copy of `image` with the given grid cells set to `fill`.
pub fn mask_patches(image: &ImageTensor, patches: &[usize], patch_side: usize, fill: f64) -> ImageTensor {
    let mut out = image.clone();
    for &p in patches {
        out.fill_patch(p, patch_side, fill);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationEntry {
    pub prototype: usize,
    pub original_tokens: Vec<usize>,
    pub masked_tokens: Vec<usize>,
    pub new_tokens: Vec<usize>,
    pub location_changed: bool,
    pub score_before: f64,
    pub score_after: f64,
    pub delta: f64,
}

fn perturbation_entry(prototype: usize, before: &Inference, after: &Inference, masked: Vec<usize>) -> PerturbationEntry {
    let original: BTreeSet<usize> = before.matches[prototype].matched_tokens().into_iter().collect();
    let new: BTreeSet<usize> = after.matches[prototype].matched_tokens().into_iter().collect();
    let (sb, sa) = (before.scores[prototype], after.scores[prototype]);
    PerturbationEntry {
        prototype,
        location_changed: original != new,
        original_tokens: original.into_iter().collect(),
        masked_tokens: masked,
        new_tokens: new.into_iter().collect(),
        score_before: sb,
        score_after: sa,
        delta: sa - sb,
    }
}

/// Fill the patches `prototype` matches in `image` and match again.
pub fn mask_and_rematch(model: &Model, image: &ImageTensor, prototype: usize, fill: f64) -> Result<PerturbationEntry> {
    if prototype >= model.bank.len() {
        return Err(Error::UnknownPrototype(prototype));
    }
    let before = model.infer(image)?;
    let mut region = before.matches[prototype].matched_tokens();
    region.sort_unstable();
    mask_region_and_rematch(model, image, &before, prototype, &region, fill)
}

/// Fill an explicit set of patches and report how `prototype` moves.
pub fn mask_region_and_rematch(
    model: &Model,
    image: &ImageTensor,
    before: &Inference,
    prototype: usize,
    region: &[usize],
    fill: f64,
) -> Result<PerturbationEntry> {
    let masked = mask_patches(image, region, model.encoder.config.patch_side, fill);
    let after = if region.is_empty() { before.clone() } else { model.infer(&masked)? };
    Ok(perturbation_entry(prototype, before, &after, region.to_vec()))
}

/// Input perturbation used by the location-change statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Perturbation {
    Identity,
    /// Fill each examined prototype's own matched patches.
    MaskMatched { fill: f64 },
    /// Fill a random `fraction` of all patches; the draw depends only on
    /// `seed` and the image id.
    RandomPatches { fraction: f64, fill: f64, seed: u64 },
}

/// Jaccard distance `1 − |A∩B| / |A∪B|`; 0 for two empty sets.
pub fn jaccard_distance(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

/// Prototypes whose score is in the top tenth of the image's scores
/// (at least one).
pub fn top_activated(scores: &[f64]) -> Vec<usize> {
    let n = scores.len().div_ceil(10).max(1);
    ranking(scores).into_iter().take(n).collect()
}

fn random_region(image_id: usize, patches: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = ((patches as f64 * fraction).round() as usize).min(patches);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (image_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut region = sample(&mut rng, patches, count).into_vec();
    region.sort_unstable();
    region
}

/// Location-change statistic of one image: mean Jaccard distance between
/// the matched token sets before and after perturbation, over the image's
/// top-activated prototypes.
pub fn image_location_change(model: &Model, image: &ImageTensor, image_id: usize, perturbation: Perturbation) -> Result<f64> {
    let before = model.infer(image)?;
    let top = top_activated(&before.scores);
    let patches = model.encoder.config.num_patches();
    let side = model.encoder.config.patch_side;
    let shared = match perturbation {
        Perturbation::Identity => Some(before.clone()),
        Perturbation::RandomPatches { fraction, fill, seed } => {
            let region = random_region(image_id, patches, fraction, seed);
            Some(model.infer(&mask_patches(image, &region, side, fill))?)
        }
        Perturbation::MaskMatched { .. } => None,
    };
    let mut sum = 0.0;
    for &j in &top {
        let after_tokens = match (&shared, perturbation) {
            (Some(after), _) => after.matches[j].matched_tokens(),
            (None, Perturbation::MaskMatched { fill }) => {
                let mut region = before.matches[j].matched_tokens();
                region.sort_unstable();
                mask_region_and_rematch(model, image, &before, j, &region, fill)?.new_tokens
            }
            (None, _) => unreachable!("only MaskMatched has no shared perturbed image"),
        };
        sum += jaccard_distance(&before.matches[j].matched_tokens(), &after_tokens);
    }
    Ok(sum / top.len() as f64)
}

/// Mean location change over a labelled set, in `[0, 1]`. Per-image values
/// are combined in image-id order, so the result does not depend on the
/// order of the set.
pub fn plc(model: &Model, data: &Dataset, perturbation: Perturbation) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut per_image: Vec<(usize, f64)> = data
        .samples
        .par_iter()
        .map(|s| image_location_change(model, &s.image, s.id, perturbation).map(|v| (s.id, v)))
        .collect::<Result<_>>()?;
    per_image.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(per_image.iter().map(|(_, v)| v).sum::<f64>() / per_image.len() as f64)
}

const BOX_COLORS: [[f64; 3]; 6] = [
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

/// Draw one-pixel outlines around patch boxes; `groups[i]` gets colour `i`.
pub fn render_overlay(image: &ImageTensor, groups: &[Vec<PatchBox>]) -> ImageTensor {
    let mut out = image.clone();
    let c = image.channels().min(3);
    for (gi, group) in groups.iter().enumerate() {
        let color = BOX_COLORS[gi % BOX_COLORS.len()];
        for b in group {
            let (bottom, right) = (b.top + b.size - 1, b.left + b.size - 1);
            for y in b.top..=bottom {
                for x in b.left..=right {
                    if y == b.top || y == bottom || x == b.left || x == right {
                        for (ch, &v) in color.iter().enumerate().take(c) {
                            out.set(y, x, ch, v);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write a local analysis as `<stem>.json` plus one overlay per entry.
pub fn write_local(analysis: &LocalAnalysis, image: &ImageTensor, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(analysis, &dir.join(format!("{stem}.json")))?;
    for (rank, e) in analysis.entries.iter().enumerate() {
        let img = render_overlay(image, std::slice::from_ref(&e.boxes));
        write_png(&img, &dir.join(format!("{stem}_rank{rank}_proto{}.png", e.prototype)))?;
    }
    Ok(())
}
