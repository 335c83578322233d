use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use protovit::analysis::{
    self, global_analysis_of, infer_corpus, local_analysis_of, plc, reasoning_report, write_json, write_local,
    Perturbation, DEFAULT_FILL, DEFAULT_Q,
};
use protovit::checkpoint::Checkpoint;
use protovit::config::RunConfig;
use protovit::data::{generate_synthetic, read_png, write_synthetic, Dataset, DatasetManifest, MANIFEST_FILE};
use protovit::matching::{greedy_match_similarity, AdjacencyParams};
use protovit::trainer::{evaluate, predict, run_stage, MetricsLog, Stage, TrainState};
use protovit::Error;

const CHECKPOINT_FILE: &str = "checkpoint.pvit";

#[derive(Parser)]
#[command(name = "protovit", version, about = "Train and explain prototype-based patch-token classifiers")]
struct Cli {
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Directory for every file the command writes.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root holding manifest.json or a folder-per-class tree. When
    /// absent, the synthetic task of the configuration is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic glyph dataset as PNG files plus manifest.
    GenData,
    /// Warm-up and joint stages from a fresh model (or --checkpoint).
    Train(DataArgs),
    /// Slot-pruning stage; rounds and freezes the slots.
    Prune(DataArgs),
    /// Project prototypes onto training tokens.
    Project(DataArgs),
    /// Last-layer stage.
    TuneLast(DataArgs),
    /// Classify one PNG image.
    Predict {
        #[arg(long)]
        image: PathBuf,
    },
    /// Nearest prototypes of one test image.
    AnalyzeLocal {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = DEFAULT_Q)]
        q: usize,
    },
    /// Nearest images of one prototype.
    AnalyzeGlobal {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        prototype: usize,
        #[arg(long, default_value_t = DEFAULT_Q)]
        q: usize,
    },
    /// Per-class evidence breakdown for one PNG image.
    Report {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 3)]
        top_classes: usize,
    },
    /// Location-change statistics under masking.
    PerturbEval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_FILL)]
        fill: f64,
    },
    /// Greedy matching on a plain-text similarity matrix (one row per
    /// sub-prototype, whitespace separated).
    MatchDebug {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        /// Chebyshev radius, or `inf`.
        #[arg(long, default_value = "1")]
        radius: String,
    },
    /// Accuracy and loss breakdown as CSV.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn load_config(cli: &Cli) -> protovit::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Checkpoint if given, otherwise a fresh model from the configuration.
fn load_run(cli: &Cli) -> protovit::Result<Checkpoint> {
    match &cli.checkpoint {
        Some(p) => Checkpoint::load(p),
        None => {
            let cfg = load_config(cli)?;
            let model = cfg.build_model()?;
            Ok(Checkpoint::new(cfg, model, TrainState::default()))
        }
    }
}

fn load_split(cfg: &RunConfig, data: &DataArgs, split: &str) -> protovit::Result<Dataset> {
    match &data.data {
        Some(root) => {
            let manifest_path = root.join(MANIFEST_FILE);
            let manifest = if manifest_path.exists() {
                DatasetManifest::load(&manifest_path)?
            } else {
                DatasetManifest::from_folder_tree(root, &["train", "test"])?
            };
            manifest.load_split(split)
        }
        None => {
            let (train, test) = generate_synthetic(&cfg.synthetic_spec())?;
            match split {
                "train" => Ok(train),
                "test" => Ok(test),
                other => Err(Error::Config(format!("unknown split {other:?}"))),
            }
        }
    }
}

fn out_path(cli: &Cli, name: &str) -> protovit::Result<PathBuf> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io { path: cli.out_dir.clone(), source: e })?;
    Ok(cli.out_dir.join(name))
}

fn run_stages(cli: &Cli, data: &DataArgs, stages: &[Stage]) -> protovit::Result<()> {
    let mut run = load_run(cli)?;
    let train = load_split(&run.config, data, "train")?;
    let mut log = MetricsLog::default();
    for &stage in stages {
        log.extend(run_stage(stage, &mut run.model, &mut run.state, &train, &run.config)?);
    }
    let tag = stages.last().map_or("none", |s| s.name());
    log.write(&out_path(cli, &format!("metrics_{tag}.csv"))?)?;
    let path = out_path(cli, CHECKPOINT_FILE)?;
    run.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn parse_matrix(path: &Path) -> protovit::Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Config(format!("bad number {v:?} in {}", path.display()))))
                .collect()
        })
        .collect::<protovit::Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("similarity matrix rows must be non-empty and equally long".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols, cols), flat).map_err(|e| Error::Dimension(e.to_string()))
}


fn execute(cli: &Cli) -> protovit::Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let m = write_synthetic(&cfg.synthetic_spec(), &cli.out_dir)?;
            for (split, items) in &m.splits {
                println!("{split}: {}", items.len());
            }
        }
        Command::Train(d) => run_stages(cli, d, &[Stage::Warmup, Stage::Joint])?,
        Command::Prune(d) => run_stages(cli, d, &[Stage::Prune])?,
        Command::Project(d) => run_stages(cli, d, &[Stage::Project])?,
        Command::TuneLast(d) => run_stages(cli, d, &[Stage::Last])?,
        Command::Predict { image } => {
            let run = load_run(cli)?;
            let inf = predict(&run.model, &read_png(image)?)?;
            println!("label,{}", inf.label());
            let logits: Vec<String> = inf.logits.iter().map(|l| l.to_string()).collect();
            println!("logits,{}", logits.join(","));
        }
        Command::AnalyzeLocal { data, split, index, q } => {
            let run = load_run(cli)?;
            let set = load_split(&run.config, data, split)?;
            let sample = set
                .samples
                .get(*index)
                .ok_or_else(|| Error::Config(format!("index {index} outside the {split} split")))?;
            let inf = run.model.infer(&sample.image)?;
            let la = local_analysis_of(&run.model, &inf, sample.id, *q);
            std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io { path: cli.out_dir.clone(), source: e })?;
            write_local(&la, &sample.image, &cli.out_dir, &format!("local_{split}_{index}"))?;
            println!("{}", serde_json::to_string(&la)?);
        }
        Command::AnalyzeGlobal { data, split, prototype, q } => {
            let run = load_run(cli)?;
            let set = load_split(&run.config, data, split)?;
            let infs = infer_corpus(&run.model, &set)?;
            let ga = global_analysis_of(&run.model, &set, &infs, *prototype, *q, split == "train")?;
            write_json(&ga, &out_path(cli, &format!("global_proto{prototype}_{split}.json"))?)?;
            for e in &ga.entries {
                let s = set.samples.iter().find(|s| s.id == e.image_id).expect("ranked image is in the corpus");
                let img = analysis::render_overlay(&s.image, std::slice::from_ref(&e.boxes));
                protovit::data::write_png(&img, &out_path(cli, &format!("global_proto{prototype}_img{}.png", e.image_id))?)?;
            }
            println!("{}", serde_json::to_string(&ga)?);
        }
        Command::Report { image, top_classes } => {
            let run = load_run(cli)?;
            let report = reasoning_report(&run.model, &read_png(image)?, *top_classes)?;
            write_json(&report, &out_path(cli, "report.json")?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::PerturbEval { data, split, fraction, fill } => {
            let run = load_run(cli)?;
            let set = load_split(&run.config, data, split)?;
            let random = plc(&run.model, &set, Perturbation::RandomPatches { fraction: *fraction, fill: *fill, seed: run.config.seed })?;
            let matched = plc(&run.model, &set, Perturbation::MaskMatched { fill: *fill })?;
            println!("perturbation,plc");
            println!("random_patches,{random}");
            println!("mask_matched,{matched}");
        }
        Command::MatchDebug { sim, rows, cols, radius } => {
            let s = parse_matrix(sim)?;
            if s.ncols() != rows * cols {
                return Err(Error::Config(format!("matrix has {} columns, grid has {} cells", s.ncols(), rows * cols)));
            }
            let adjacency = match radius.as_str() {
                "inf" => AdjacencyParams::unmasked(),
                r => AdjacencyParams::new(r.parse().map_err(|_| Error::Config(format!("bad radius {r:?}")))?),
            };
            let m = greedy_match_similarity(s.view(), *cols, &adjacency, None)?;
            for (k, t) in m.assignment.iter().enumerate() {
                if let Some(t) = t {
                    println!("({k},{t}) {}", m.cosines[k]);
                }
            }
            println!("total {}", m.total);
        }
        Command::Eval { data, split } => {
            let run = load_run(cli)?;
            let set = load_split(&run.config, data, split)?;
            let report = evaluate(&run.model, &set, &run.config.effective_weights())?;
            println!("{}", protovit::trainer::EvalReport::csv_header());
            println!("{}", report.csv_row());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Contract(_) | Error::InfeasibleNeighborhood { .. } | Error::EmptyCorpus | Error::UnknownPrototype(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
