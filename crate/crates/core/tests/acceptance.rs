//! Acceptance battery. Runs without the libtest harness so the per-criterion
//! summary is always printed; the process exits non-zero if any check fails.

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use protovit::analysis::{plc, Perturbation};
use protovit::checkpoint::Checkpoint;
use protovit::config::RunConfig;
use protovit::data::{generate_synthetic, Dataset};
use protovit::encoder::{ImageTensor, TokenGrid};
use protovit::matching::{chebyshev, greedy_match_similarity, reweighted_similarity, AdjacencyParams};
use protovit::model::{argmax, Model, ParamGroup};
use protovit::objectives::{
    cluster_loss, coherence_loss, last_layer_loss, orthogonality_loss, prune_loss, separation_loss, total_loss,
    LossWeights,
};
use protovit::prototypes::PrototypeBank;
use protovit::trainer::{evaluate, run_all, run_stage, MetricsLog, Stage, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// Reference matchers

/// Step-by-step greedy: list every admissible (sub-prototype, token) pair,
/// keep the largest, ties to lower token then lower sub-prototype.
fn naive_greedy(sim: ArrayView2<'_, f64>, cols: usize, radius: Option<usize>) -> Option<Vec<usize>> {
    let (k, n) = sim.dim();
    let mut assignment: Vec<Option<usize>> = vec![None; k];
    let mut last: Option<usize> = None;
    for _ in 0..k {
        let mut candidates = Vec::new();
        for s in (0..k).filter(|&s| assignment[s].is_none()) {
            for t in 0..n {
                let used = assignment.contains(&Some(t));
                let near = match (last, radius) {
                    (Some(a), Some(r)) => chebyshev(a, t, cols) <= r,
                    _ => true,
                };
                if !used && near {
                    candidates.push((sim[[s, t]], t, s));
                }
            }
        }
        // Signed zeros tie.
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let &(_, t, s) = candidates.first()?;
        assignment[s] = Some(t);
        last = Some(t);
    }
    Some(assignment.into_iter().map(|a| a.unwrap()).collect())
}

/// Best total over every pick order and token chain that obeys the same
/// adjacency rule.
fn exhaustive_best(sim: ArrayView2<'_, f64>, cols: usize, radius: Option<usize>) -> Option<f64> {
    fn go(
        sim: ArrayView2<'_, f64>,
        cols: usize,
        radius: Option<usize>,
        left: &mut Vec<usize>,
        used: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<f64>,
    ) {
        if left.is_empty() {
            *best = Some(best.map_or(acc, |b: f64| b.max(acc)));
            return;
        }
        for i in 0..left.len() {
            let s = left.remove(i);
            for t in 0..sim.ncols() {
                let ok = !used.contains(&t)
                    && match (used.last(), radius) {
                        (Some(&a), Some(r)) => chebyshev(a, t, cols) <= r,
                        _ => true,
                    };
                if ok {
                    used.push(t);
                    go(sim, cols, radius, left, used, acc + sim[[s, t]], best);
                    used.pop();
                }
            }
            left.insert(i, s);
        }
    }
    let mut best = None;
    go(sim, cols, radius, &mut (0..sim.nrows()).collect(), &mut Vec::new(), 0.0, &mut best);
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let radii = [Some(0), Some(1), Some(2), None];
    let (mut agree, mut bounded, mut infeasible, mut total) = (0, 0, 0, 0);
    for case in 0..1200 {
        let rows = rng.random_range(1..=4usize);
        let cols = rng.random_range(1..=(16 / rows).min(4));
        let n = rows * cols;
        let k = rng.random_range(1..=3usize.min(n));
        let radius = radii[case % radii.len()];
        // Coarse values so ties are common.
        let coarse = case % 3 == 0;
        let sim = Array2::from_shape_fn((k, n), |_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if coarse { (v * 4.0).round() / 4.0 } else { v }
        });
        let adjacency = match radius {
            Some(r) => AdjacencyParams::new(r),
            None => AdjacencyParams::unmasked(),
        };
        let fast = greedy_match_similarity(sim.view(), cols, &adjacency, None).ok();
        let slow = naive_greedy(sim.view(), cols, radius);
        total += 1;
        let fast_assignment = fast.as_ref().map(|m| m.assignment.iter().map(|a| a.unwrap()).collect::<Vec<_>>());
        if fast_assignment == slow {
            agree += 1;
        }
        match (fast, exhaustive_best(sim.view(), cols, radius)) {
            (Some(m), Some(best)) => {
                let sum: f64 = m.assignment.iter().enumerate().map(|(s, t)| sim[[s, t.unwrap()]]).sum();
                if m.total <= best + 1e-12 && (sum - m.total).abs() < 1e-12 {
                    bounded += 1;
                }
            }
            (None, _) => {
                infeasible += 1;
                bounded += 1;
            }
            (Some(_), None) => {}
        }
    }
    let elapsed = start.elapsed();
    outcome(
        agree == total && bounded == total && elapsed < Duration::from_secs(60),
        format!(
            "{agree}/{total} equal to reference, {bounded}/{total} within optimum ({infeasible} infeasible on both), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = rng.random_range(1..=8usize);
        let cos: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = reweighted_similarity(&cos, &vec![1.0; k]).unwrap();
        worst = worst.max((all - cos.iter().sum::<f64>()).abs());

        let a = rng.random_range(1..=k);
        let c: f64 = rng.random_range(-1.0..1.0);
        let mut gates = vec![0.0; k];
        for i in rand::seq::index::sample(&mut rng, k, a) {
            gates[i] = 1.0;
        }
        let partial = reweighted_similarity(&vec![c; k], &gates).unwrap();
        worst = worst.max((partial - k as f64 * c).abs());
    }
    outcome(worst <= 1e-12, format!("200 cases, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// Gradients

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    for (k, v) in [
        ("image_size", "16"),
        ("patch_side", "4"),
        ("embed_dim", "12"),
        ("depth", "1"),
        ("heads", "2"),
        ("num_classes", "3"),
        ("per_class", "2"),
        ("slots", "3"),
        ("tau", "10"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn random_images(n: usize, side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| {
            let data = (0..side * side * channels).map(|_| rng.random_range(0.0..1.0)).collect();
            ImageTensor::new(side, side, channels, data).unwrap()
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences on random coordinates of the listed groups. Returns
/// the worst relative error and how many coordinates were checked.
fn check_model_grads(
    model: &Model,
    groups: &[ParamGroup],
    coords: usize,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(&Model) -> (f64, Vec<Array2<f64>>),
) -> (f64, usize) {
    let (_, grads) = eval(model);
    let slots: Vec<usize> = model
        .param_tensors()
        .iter()
        .enumerate()
        .filter(|(_, (_, g, _))| groups.contains(g))
        .map(|(i, _)| i)
        .collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let ti = slots[rng.random_range(0..slots.len())];
        let dim = model.param_tensors()[ti].2.dim();
        let at = (rng.random_range(0..dim.0), rng.random_range(0..dim.1));
        let bumped = |delta: f64| {
            let mut m = model.clone();
            m.param_tensors_mut()[ti].1[at] += delta;
            eval(&m).0
        };
        let numeric = (bumped(h) - bumped(-h)) / (2.0 * h);
        worst = worst.max(rel_err(grads[ti][at], numeric));
    }
    (worst, coords)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = cfg.build_model().unwrap();
    // Spread the gates so the slot gradients are not vanishingly small.
    model.bank.slot_params = Array2::from_shape_fn(model.bank.slot_params.dim(), |_| rng.random_range(-0.2..0.2));
    let images = random_images(3, 16, cfg.encoder.channels, &mut rng);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let labels = vec![0, 1, 2];
    let weights = LossWeights { coh: 0.5, orth: 0.1, ..LossWeights::default() };

    let (joint, n1) = check_model_grads(&model, &[ParamGroup::Encoder, ParamGroup::Prototypes], 30, &mut rng, |m| {
        let (br, g) = total_loss(m, &refs, &labels, weights).unwrap();
        (br.total, g.tensors)
    });
    let (prune, n2) = check_model_grads(&model, &[ParamGroup::Slots], 20, &mut rng, |m| {
        let (br, g) = prune_loss(m, &refs, &labels, 0.5).unwrap();
        (br.total, g.tensors)
    });

    let mm = model.bank.len();
    let scores = Array2::from_shape_fn((6, mm), |_| rng.random_range(-1.0..3.0));
    let last_labels = vec![0, 1, 2, 0, 1, 2];
    let class_of = model.bank.class_of.clone();
    let mut evidence = model.evidence.clone();
    evidence.weights.mapv_inplace(|w| w + rng.random_range(-0.1..0.1));
    let (_, grad) = last_layer_loss(&scores, &last_labels, &evidence, &class_of, 0.1).unwrap();
    let mut last: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..20 {
        let at = (rng.random_range(0..evidence.weights.nrows()), rng.random_range(0..mm));
        let f = |delta: f64| {
            let mut e = evidence.clone();
            e.weights[at] += delta;
            last_layer_loss(&scores, &last_labels, &e, &class_of, 0.1).unwrap().0.total
        };
        last = last.max(rel_err(grad[at], (f(h) - f(-h)) / (2.0 * h)));
    }
    let elapsed = start.elapsed();
    outcome(
        joint <= 1e-4 && prune <= 1e-4 && last <= 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "max rel err total {joint:.1e} ({n1} coords), prune {prune:.1e} ({n2}), last layer {last:.1e} (20), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Loss identities

fn unit_rows(a: Array2<f64>) -> Array2<f64> {
    let mut a = a;
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| x / n);
    }
    a
}

/// Max matched cosine over prototypes picked by `pick`, from naive matching
/// on explicitly computed cosines.
fn oracle_class_max(grid: &TokenGrid, bank: &PrototypeBank, radius: Option<usize>, pick: impl Fn(usize) -> bool) -> f64 {
    let k = bank.slots();
    let p = unit_rows(bank.vectors.clone());
    let z = unit_rows(grid.tokens.clone());
    let mut best = f64::NEG_INFINITY;
    for j in (0..bank.len()).filter(|&j| pick(bank.class_of[j])) {
        let sim = Array2::from_shape_fn((k, z.nrows()), |(s, t)| p.row(j * k + s).dot(&z.row(t)).clamp(-1.0, 1.0));
        let picks = naive_greedy(sim.view(), grid.grid_cols, radius).unwrap();
        for (s, t) in picks.into_iter().enumerate() {
            best = best.max(sim[[s, t]]);
        }
    }
    if best.is_finite() { best } else { 0.0 }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut notes = Vec::new();
    let mut pass = true;

    let mut bank = PrototypeBank::init(2, 2, 3, 5, 7).unwrap();
    for j in 0..bank.len() {
        let row = bank.vectors.row(j * 3).to_owned();
        for s in 1..3 {
            bank.vectors.row_mut(j * 3 + s).assign(&row);
        }
    }
    let identical = coherence_loss(&bank);
    let random = PrototypeBank::init(2, 2, 3, 5, 8).unwrap();
    let mut scaled = random.clone();
    for (i, mut r) in scaled.vectors.rows_mut().into_iter().enumerate() {
        r.mapv_inplace(|x| x * (0.1 + 3.0 * i as f64));
    }
    let scale_gap = (coherence_loss(&random) - coherence_loss(&scaled)).abs();
    pass &= identical.abs() < 1e-12 && scale_gap < 1e-12;
    notes.push(format!("coh identical {identical:.1e}, scale gap {scale_gap:.1e}"));

    // Two classes, two prototypes each, flattened prototypes orthonormal.
    let mut ortho = PrototypeBank::init(2, 2, 2, 4, 9).unwrap();
    ortho.vectors.fill(0.0);
    for j in 0..4 {
        let (row, col) = (j * 2 + j % 2, j / 2 * 2);
        ortho.vectors[[row, col]] = 1.0;
    }
    let orth_zero = orthogonality_loss(&ortho, true);
    let mut dup = PrototypeBank::init(1, 2, 2, 4, 10).unwrap();
    let first = dup.vectors.slice(ndarray::s![0..2, ..]).to_owned();
    dup.vectors.slice_mut(ndarray::s![2..4, ..]).assign(&first);
    let orth_dup = orthogonality_loss(&dup, true);
    pass &= orth_zero.abs() < 1e-12 && (orth_dup - 2.0).abs() < 1e-12;
    notes.push(format!("orth orthonormal {orth_zero:.1e}, duplicated {orth_dup:.12}"));

    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let classes = rng.random_range(2..=3usize);
        let per_class = rng.random_range(1..=6 / classes);
        let k = rng.random_range(1..=3usize);
        let (rows, cols) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
        let dim = rng.random_range(2..=6usize);
        let bank = PrototypeBank::init(classes, per_class, k, dim, case).unwrap();
        let radius = [Some(1), Some(2), None][case as usize % 3];
        let adjacency = radius.map_or(AdjacencyParams::unmasked(), AdjacencyParams::new);
        let n = rng.random_range(1..=4usize);
        let grids: Vec<TokenGrid> = (0..n)
            .map(|_| {
                let t = Array2::from_shape_fn((rows * cols, dim), |_| rng.random_range(-1.0..1.0));
                TokenGrid::new(t, rows, cols, 1).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let clst = cluster_loss(&grids, &labels, &bank, &adjacency).unwrap();
        let sep = separation_loss(&grids, &labels, &bank, &adjacency).unwrap();
        let mut oc = 0.0;
        let mut os = 0.0;
        for (g, &y) in grids.iter().zip(&labels) {
            oc += oracle_class_max(g, &bank, radius, |c| c == y);
            os += oracle_class_max(g, &bank, radius, |c| c != y);
        }
        worst = worst.max((clst + oc / n as f64).abs()).max((sep - os / n as f64).abs());
    }
    pass &= worst < 1e-12;
    notes.push(format!("clst/sep vs oracle on 100 instances, max gap {worst:.1e}"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// Pipeline criteria

struct Pipeline {
    cfg: RunConfig,
    test: Dataset,
    model: Model,
    /// Model and state right before the pruning stage.
    pre_prune: (Model, TrainState),
    train: Dataset,
    acc_before_projection: f64,
    acc_after_projection: f64,
    elapsed: Duration,
}

fn accuracy(model: &Model, data: &Dataset, cfg: &RunConfig) -> f64 {
    evaluate(model, data, &cfg.effective_weights()).unwrap().accuracy
}

fn pipeline(cfg: RunConfig) -> Pipeline {
    let start = Instant::now();
    let (train, test) = generate_synthetic(&cfg.synthetic_spec()).unwrap();
    let mut model = cfg.build_model().unwrap();
    let mut state = TrainState::default();
    for stage in [Stage::Warmup, Stage::Joint] {
        run_stage(stage, &mut model, &mut state, &train, &cfg).unwrap();
    }
    let pre_prune = (model.clone(), state);
    run_stage(Stage::Prune, &mut model, &mut state, &train, &cfg).unwrap();
    let acc_before_projection = accuracy(&model, &test, &cfg);
    run_stage(Stage::Project, &mut model, &mut state, &train, &cfg).unwrap();
    let acc_after_projection = accuracy(&model, &test, &cfg);
    run_stage(Stage::Last, &mut model, &mut state, &train, &cfg).unwrap();
    Pipeline {
        cfg,
        test,
        model,
        pre_prune,
        train,
        acc_before_projection,
        acc_after_projection,
        elapsed: start.elapsed(),
    }
}

fn glyph_overlap(model: &Model, data: &Dataset) -> f64 {
    let hits = data
        .samples
        .iter()
        .filter(|s| {
            let inf = model.infer(&s.image).unwrap();
            let top = argmax(&inf.scores);
            inf.matches[top].matched_tokens().iter().any(|t| s.gt_patches.contains(t))
        })
        .count();
    hits as f64 / data.len() as f64
}

fn criterion_5(p: &Pipeline) -> Outcome {
    let acc = accuracy(&p.model, &p.test, &p.cfg);
    let drop = p.acc_before_projection - p.acc_after_projection;
    let overlap = glyph_overlap(&p.model, &p.test);
    outcome(
        acc >= 0.95 && drop <= 0.02 && overlap >= 0.8 && p.elapsed < Duration::from_secs(900),
        format!(
            "test acc {acc:.3}, projection {:.3} -> {:.3}, glyph overlap {overlap:.3}, {:.1}s",
            p.acc_before_projection,
            p.acc_after_projection,
            p.elapsed.as_secs_f64()
        ),
    )
}

fn pruned_slots(model: &Model) -> usize {
    (0..model.bank.len()).map(|j| model.bank.active_slots(j).iter().filter(|a| !**a).count()).sum()
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let soft = p.model.bank.soft_indicators().values;
    let crisp = soft.iter().filter(|&&v| (v - v.round()).abs() < 0.05).count() as f64 / soft.len() as f64;
    let all_keep_one = (0..p.model.bank.len()).all(|j| p.model.bank.active_slots(j).contains(&true));
    let default_pruned = pruned_slots(&p.model);

    let mut heavy = p.cfg.clone();
    heavy.weights.coh_prune *= 100.0;
    let (mut model, mut state) = p.pre_prune.clone();
    run_stage(Stage::Prune, &mut model, &mut state, &p.train, &heavy).unwrap();
    let heavy_pruned = pruned_slots(&model);
    outcome(
        crisp >= 0.99 && all_keep_one && heavy_pruned > default_pruned,
        format!(
            "crisp {:.1}%, every prototype keeps a slot: {all_keep_one}, pruned {default_pruned} at default vs {heavy_pruned} at 100x",
            crisp * 100.0
        ),
    )
}

fn criterion_7(seed0_on: &Pipeline) -> Outcome {
    let perturbation = |seed| Perturbation::RandomPatches { fraction: 0.25, fill: 0.5, seed };
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in 0..3u64 {
        for enabled in [true, false] {
            let value = if seed == 0 && enabled {
                plc(&seed0_on.model, &seed0_on.test, perturbation(seed)).unwrap()
            } else {
                let mut cfg = seed0_on.cfg.clone();
                cfg.seed = seed;
                cfg.use_adjacency = enabled;
                cfg.use_coherence = enabled;
                let p = pipeline(cfg);
                plc(&p.model, &p.test, perturbation(seed)).unwrap()
            };
            if enabled { on.push(value) } else { off.push(value) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = on.iter().zip(&off).filter(|(a, b)| a <= b).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        mean(&on) <= mean(&off),
        format!(
            "PLC on [{}] mean {:.3}, off [{}] mean {:.3}, on <= off in {wins}/3 seeds",
            fmt(&on),
            mean(&on),
            fmt(&off),
            mean(&off)
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut cfg = small_config();
    cfg.synthetic.train_per_class = 12;
    cfg.synthetic.test_per_class = 4;
    cfg.synthetic.glyph_cells = 1;
    cfg.schedule.batch_size = 8;
    cfg.augment = protovit::data::AugmentOp::parse_list("flip,rotate").unwrap();
    let run = || {
        let (train, _) = generate_synthetic(&cfg.synthetic_spec()).unwrap();
        let mut model = cfg.build_model().unwrap();
        let mut state = TrainState::default();
        let log: MetricsLog = run_all(&mut model, &mut state, &train, &cfg).unwrap();
        (log.to_csv(), Checkpoint::new(cfg.clone(), model, state))
    };
    let (csv_a, ck_a) = run();
    let (csv_b, ck_b) = run();
    let same_csv = csv_a == csv_b;
    let rows = csv_a.lines().count() - 1;

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.pvit");
    let second = dir.path().join("b.pvit");
    ck_a.save(&first).unwrap();
    Checkpoint::load(&first).unwrap().save(&second).unwrap();
    let bytes_a = std::fs::read(&first).unwrap();
    let bytes_b = std::fs::read(&second).unwrap();
    let same_bytes = bytes_a == bytes_b && ck_a.to_bytes() == ck_b.to_bytes();
    outcome(
        same_csv && same_bytes && rows > 0,
        format!("metrics CSVs identical: {same_csv} ({rows} rows), checkpoint bytes identical: {same_bytes} ({} bytes)", bytes_a.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        println!("criterion {id}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let main_run = pipeline(RunConfig::desk());
    report(5, criterion_5(&main_run));
    report(6, criterion_6(&main_run));
    report(7, criterion_7(&main_run));
    report(8, criterion_8());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
