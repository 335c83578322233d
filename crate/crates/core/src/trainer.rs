//! The staged training procedure: warm-up, joint optimization, slot
//! pruning, prototype projection and last-layer fine-tuning.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, StageSettings};
use crate::data::{augment, Dataset, Sample};
use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::model::{argmax, GroupSet, Inference, Model, ParamGroup};
use crate::objectives::{
    class_max, coherence_loss, cosine_matrix, cross_entropy, evaluate_batch, last_layer_loss, offclass_l1,
    orthogonality_loss, prune_loss_cached, stack_rows, LossBreakdown, LossWeights, Objective,
};
use crate::optim::Optimizer;
use crate::prototypes::{PrototypeBank, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Warmup,
    Joint,
    Prune,
    Project,
    Last,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Warmup, Stage::Joint, Stage::Prune, Stage::Project, Stage::Last];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Prune => "prune",
            Stage::Project => "project",
            Stage::Last => "last",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }

    pub fn from_code(code: u64) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Progress through the stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainState {
    pub last_stage: Option<Stage>,
    /// Optimizer steps taken over all stages.
    pub steps: u64,
}

impl TrainState {
    pub fn stage_code(&self) -> u64 {
        self.last_stage.map_or(0, Stage::code)
    }

    /// Whether `stage` may run now. Stages never go backwards; warm-up,
    /// joint, projection and last-layer runs may repeat, pruning may not.
    pub fn check(&self, stage: Stage) -> Result<()> {
        let last = self.last_stage;
        if let Some(prev) = last {
            if stage < prev || (stage == Stage::Prune && prev == Stage::Prune) {
                return Err(Error::Contract(format!("cannot run {stage} after {prev}")));
            }
        }
        let need = match stage {
            Stage::Project => Some(Stage::Prune),
            Stage::Last => Some(Stage::Project),
            _ => None,
        };
        if let Some(need) = need {
            if last.is_none_or(|p| p < need) {
                return Err(Error::Contract(format!("{stage} requires {need} to have run")));
            }
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "stage,epoch,step,ce,clst,sep,coh,orth,l1,total";

impl MetricsLog {
    pub fn extend(&mut self, rows: Vec<MetricsRow>) {
        self.rows.extend(rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.stage, r.epoch, r.step, l.ce, l.clst, l.sep, l.coh, l.orth, l.l1, l.total
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &p| (h ^ p).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17))
}

/// Seed-determined visiting order of the training set for one epoch.
fn epoch_order(len: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, stage.code(), epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// The training view of a sample: each configured operation is applied
/// with probability one half, driven by a per-sample seed.
fn training_image(sample: &Sample, cfg: &RunConfig, stage: Stage, epoch: usize) -> ImageTensor {
    if cfg.augment.is_empty() {
        return sample.image.clone();
    }
    let seed = mix(&[cfg.seed, stage.code(), epoch as u64, sample.id as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops: Vec<_> = cfg.augment.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    augment(&sample.image, &ops, seed)
}

fn group_lr(settings: &StageSettings, group: ParamGroup) -> f64 {
    match group {
        ParamGroup::Encoder => settings.lr_encoder,
        ParamGroup::Prototypes => settings.lr_prototypes,
        ParamGroup::Slots => settings.lr_slots,
        ParamGroup::Evidence => settings.lr_evidence,
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, weight: f64) {
    acc.ce += weight * b.ce;
    acc.clst += weight * b.clst;
    acc.sep += weight * b.sep;
    acc.coh += weight * b.coh;
    acc.orth += weight * b.orth;
    acc.l1 += weight * b.l1;
    acc.total += weight * b.total;
}

/// Run one stage on `train`, updating `model` and `state` in place.
/// Returns one metrics row per epoch.
pub fn run_stage(stage: Stage, model: &mut Model, state: &mut TrainState, train: &Dataset, cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    state.check(stage)?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sched = &cfg.schedule;
    let rows = match stage {
        Stage::Warmup | Stage::Joint => {
            let settings = if stage == Stage::Warmup { sched.warmup } else { sched.joint };
            joint_epochs(stage, &settings, model, state, train, cfg)?
        }
        Stage::Prune => {
            let rows = prune_epochs(&sched.prune, model, state, train, cfg)?;
            model.bank = model.bank.round_and_freeze_slots()?;
            rows
        }
        Stage::Project => {
            model.bank = project_prototypes(model, train)?;
            Vec::new()
        }
        Stage::Last => last_epochs(&sched.last, model, state, train, cfg)?,
    };
    state.last_stage = Some(stage);
    Ok(rows)
}

fn joint_epochs(
    stage: Stage,
    settings: &StageSettings,
    model: &mut Model,
    state: &mut TrainState,
    train: &Dataset,
    cfg: &RunConfig,
) -> Result<Vec<MetricsRow>> {
    let groups = GroupSet { encoder: settings.lr_encoder != 0.0, prototypes: settings.lr_prototypes != 0.0, ..GroupSet::none() };
    let lrs: Vec<f64> = model
        .param_tensors()
        .iter()
        .map(|(_, g, _)| if groups.contains(*g) { group_lr(settings, *g) } else { 0.0 })
        .collect();
    let mut opt = Optimizer::new(settings.optimizer, cfg.schedule.momentum, lrs.len());
    let objective = Objective::Joint(cfg.effective_weights());
    let mut rows = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let order = epoch_order(train.len(), cfg.seed, stage, epoch);
        let mut mean = LossBreakdown::default();
        for batch in batches(&order, cfg.schedule.batch_size) {
            let images: Vec<ImageTensor> = batch
                .par_iter()
                .map(|&i| training_image(&train.samples[i], cfg, stage, epoch))
                .collect();
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.samples[i].label).collect();
            let (br, grads) = evaluate_batch(model, &refs, &labels, objective, groups)?;
            accumulate(&mut mean, &br, batch.len() as f64 / train.len() as f64);
            let mut params: Vec<&mut Array2<f64>> = model.param_tensors_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params, &grads.tensors, &lrs)?;
            state.steps += 1;
        }
        log::info!("{stage} epoch {epoch}: total {:.5} ce {:.5}", mean.total, mean.ce);
        rows.push(MetricsRow { stage, epoch, step: state.steps, loss: mean });
    }
    Ok(rows)
}

/// Matched cosines (`m×K`) of every training image. Encoder and prototypes
/// stay fixed while the slots are tuned, so the matches can be cached.
fn cached_cosines(model: &Model, train: &Dataset) -> Result<Vec<Array2<f64>>> {
    train
        .samples
        .par_iter()
        .map(|s| model.infer(&s.image).map(|inf| cosine_matrix(&inf.matches)))
        .collect()
}

fn prune_epochs(settings: &StageSettings, model: &mut Model, state: &mut TrainState, train: &Dataset, cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let cosines = cached_cosines(model, train)?;
    let labels = train.labels();
    let mut opt = Optimizer::new(settings.optimizer, cfg.schedule.momentum, 1);
    let mut rows = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let order = epoch_order(train.len(), cfg.seed, Stage::Prune, epoch);
        let mut mean = LossBreakdown::default();
        for batch in batches(&order, cfg.schedule.batch_size) {
            let cos: Vec<Array2<f64>> = batch.iter().map(|&i| cosines[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (br, grad) = prune_loss_cached(&cos, &ys, &model.bank, &model.evidence, cfg.weights.coh_prune)?;
            accumulate(&mut mean, &br, batch.len() as f64 / train.len() as f64);
            opt.step(&mut [&mut model.bank.slot_params], &[grad], &[settings.lr_slots])?;
            state.steps += 1;
        }
        rows.push(MetricsRow { stage: Stage::Prune, epoch, step: state.steps, loss: mean });
    }
    Ok(rows)
}

fn last_epochs(settings: &StageSettings, model: &mut Model, state: &mut TrainState, train: &Dataset, cfg: &RunConfig) -> Result<Vec<MetricsRow>> {
    let scores: Vec<Vec<f64>> = train
        .samples
        .par_iter()
        .map(|s| model.infer(&s.image).map(|inf| inf.scores))
        .collect::<Result<_>>()?;
    let labels = train.labels();
    let mut opt = Optimizer::new(settings.optimizer, cfg.schedule.momentum, 1);
    let mut rows = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let order = epoch_order(train.len(), cfg.seed, Stage::Last, epoch);
        let mut mean = LossBreakdown::default();
        for batch in batches(&order, cfg.schedule.batch_size) {
            let s = stack_rows(&batch.iter().map(|&i| scores[i].clone()).collect::<Vec<_>>());
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (br, grad) = last_layer_loss(&s, &ys, &model.evidence, &model.bank.class_of, cfg.weights.l1)?;
            accumulate(&mut mean, &br, batch.len() as f64 / train.len() as f64);
            opt.step(&mut [&mut model.evidence.weights], &[grad], &[settings.lr_evidence])?;
            state.steps += 1;
        }
        rows.push(MetricsRow { stage: Stage::Last, epoch, step: state.steps, loss: mean });
    }
    Ok(rows)
}

/// Run every stage with at least one epoch (projection always runs).
pub fn run_all(model: &mut Model, state: &mut TrainState, train: &Dataset, cfg: &RunConfig) -> Result<MetricsLog> {
    let mut log = MetricsLog::default();
    let s = &cfg.schedule;
    for stage in Stage::ALL {
        let skip = match stage {
            Stage::Warmup => s.warmup.epochs == 0,
            Stage::Joint => s.joint.epochs == 0,
            Stage::Last => s.last.epochs == 0,
            _ => false,
        };
        if !skip {
            log.extend(run_stage(stage, model, state, train, cfg)?);
        }
    }
    Ok(log)
}

/// Replace the active sub-prototypes of every prototype with the latent
/// tokens they match in the training image that scores highest for it
/// (earliest image id on ties). Inactive slots keep their vectors and get
/// no provenance.
pub fn project_prototypes(model: &Model, corpus: &Dataset) -> Result<PrototypeBank> {
    if !model.bank.slots_frozen {
        return Err(Error::Contract("projection requires rounded and frozen slots".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_image: Vec<(Vec<f64>, Vec<MatchResult>)> = corpus
        .samples
        .par_iter()
        .map(|s| model.infer(&s.image).map(|inf| (inf.scores, inf.matches)))
        .collect::<Result<_>>()?;
    let m = model.bank.len();
    let k = model.bank.slots();
    let mut best: Vec<(f64, usize)> = vec![(f64::NEG_INFINITY, usize::MAX); m];
    for (pos, (scores, _)) in per_image.iter().enumerate() {
        let id = corpus.samples[pos].id;
        for (j, &s) in scores.iter().enumerate() {
            let (bs, bpos) = best[j];
            let bid = if bpos == usize::MAX { usize::MAX } else { corpus.samples[bpos].id };
            if s > bs || (s == bs && id < bid) {
                best[j] = (s, pos);
            }
        }
    }
    let mut winners: Vec<usize> = best.iter().map(|&(_, p)| p).collect();
    winners.sort_unstable();
    winners.dedup();
    let tokens: Vec<(usize, Array2<f64>)> = winners
        .par_iter()
        .map(|&p| model.feature_tokens(&corpus.samples[p].image).map(|t| (p, t.tokens)))
        .collect::<Result<_>>()?;
    let mut bank = model.bank.clone();
    for (j, &(_, pos)) in best.iter().enumerate() {
        let grid = &tokens.iter().find(|(p, _)| *p == pos).expect("winner tokens computed").1;
        let matched = &per_image[pos].1[j];
        for (s, t) in matched.assignment.iter().enumerate() {
            if let Some(t) = *t {
                bank.vectors.row_mut(j * k + s).assign(&grid.row(t));
                bank.provenance[j * k + s] = Some(Provenance { image_id: corpus.samples[pos].id, token: t });
            } else {
                bank.provenance[j * k + s] = None;
            }
        }
    }
    Ok(bank)
}

pub fn predict(model: &Model, image: &ImageTensor) -> Result<Inference> {
    model.infer(image)
}

/// Accuracy and loss terms of a model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: LossBreakdown,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "accuracy,ce,clst,sep,coh,orth,l1,total"
    }

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{},{}", self.accuracy, l.ce, l.clst, l.sep, l.coh, l.orth, l.l1, l.total)
    }
}

pub fn evaluate(model: &Model, data: &Dataset, weights: &LossWeights) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let infs: Vec<Inference> = data.samples.par_iter().map(|s| model.infer(&s.image)).collect::<Result<_>>()?;
    let n = data.len() as f64;
    let labels = data.labels();
    let predictions: Vec<usize> = infs.iter().map(|i| argmax(&i.logits)).collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let logits = stack_rows(&infs.iter().map(|i| i.logits.clone()).collect::<Vec<_>>());
    let class_of = &model.bank.class_of;
    let mut loss = LossBreakdown { ce: cross_entropy(&logits, &labels), ..Default::default() };
    for (inf, &y) in infs.iter().zip(&labels) {
        loss.clst -= class_max(&inf.matches, class_of, |c| c == y).unwrap_or(0.0) / n;
        loss.sep += class_max(&inf.matches, class_of, |c| c != y).unwrap_or(0.0) / n;
    }
    loss.coh = coherence_loss(&model.bank);
    loss.orth = orthogonality_loss(&model.bank, true);
    loss.l1 = offclass_l1(&model.evidence, class_of);
    loss.total = weights.ce * loss.ce + weights.clst * loss.clst + weights.sep * loss.sep + weights.coh * loss.coh + weights.orth * loss.orth;
    Ok(EvalReport { accuracy: correct as f64 / n, loss, predictions })
}
