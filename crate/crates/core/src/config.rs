//! Run configuration as a flat `key = value` file.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AugmentOp, SyntheticSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::matching::{AdjacencyAnchor, AdjacencyParams};
use crate::model::Model;
use crate::objectives::LossWeights;
use crate::optim::OptimizerKind;
use crate::prototypes::{PrototypeBank, DEFAULT_TAU};

/// Epoch count and per-group learning rates of one training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_prototypes: f64,
    pub lr_slots: f64,
    pub lr_evidence: f64,
    pub optimizer: OptimizerKind,
}

impl StageSettings {
    fn new(epochs: usize) -> Self {
        Self { epochs, lr_encoder: 0.0, lr_prototypes: 0.0, lr_slots: 0.0, lr_evidence: 0.0, optimizer: OptimizerKind::Sgd }
    }
}

/// Learning-rate and epoch schedule of the four optimizing stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub warmup: StageSettings,
    pub joint: StageSettings,
    pub prune: StageSettings,
    pub last: StageSettings,
    pub batch_size: usize,
    /// SGD momentum, or the first-moment decay of Adam.
    pub momentum: f64,
}

impl StageSchedule {
    /// Schedule used for the full-size fine-tuning setting (pretrained
    /// backbone, batch 128).
    pub fn full() -> Self {
        Self {
            warmup: StageSettings { lr_encoder: 1e-7, lr_prototypes: 3e-3, ..StageSettings::new(5) },
            joint: StageSettings { lr_encoder: 5e-5, lr_prototypes: 3e-3, ..StageSettings::new(10) },
            prune: StageSettings { lr_slots: 8e-5, ..StageSettings::new(10) },
            last: StageSettings { lr_evidence: 1e-4, ..StageSettings::new(15) },
            batch_size: 128,
            momentum: 0.9,
        }
    }

    /// Small-scale schedule for training the encoder from scratch on the
    /// synthetic task on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            warmup: StageSettings { lr_encoder: 1e-4, lr_prototypes: 3e-3, optimizer: OptimizerKind::Adam, ..StageSettings::new(2) },
            joint: StageSettings { lr_encoder: 1e-5, lr_prototypes: 1e-3, optimizer: OptimizerKind::Adam, ..StageSettings::new(5) },
            prune: StageSettings { lr_slots: 0.02, ..StageSettings::new(10) },
            last: StageSettings { lr_evidence: 1e-2, ..StageSettings::new(15) },
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

/// Every knob of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub slots: usize,
    /// `None` is an infinite radius.
    pub radius: Option<usize>,
    pub per_class: usize,
    pub tau: f64,
    pub adjacency_anchor: AdjacencyAnchor,
    pub use_adjacency: bool,
    pub use_coherence: bool,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
    pub augment: Vec<AugmentOp>,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            num_classes: 4,
            slots: 4,
            radius: Some(1),
            per_class: 10,
            tau: DEFAULT_TAU,
            adjacency_anchor: AdjacencyAnchor::Last,
            use_adjacency: true,
            use_coherence: true,
            weights: LossWeights::default(),
            schedule: StageSchedule::full(),
            augment: Vec::new(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// The desk-scale preset: default knobs with the small-scale schedule,
    /// a two-block encoder and four prototypes per class.
    pub fn desk() -> Self {
        let encoder = EncoderConfig { depth: 2, ..EncoderConfig::default() };
        Self { per_class: 4, encoder, schedule: StageSchedule::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.slots == 0 {
            return Err(Error::Config("slots must be at least 1".into()));
        }
        if self.per_class == 0 || self.num_classes == 0 {
            return Err(Error::Config("per_class and num_classes must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.synthetic.image_size != self.encoder.image_size || self.synthetic.patch_side != self.encoder.patch_side {
            return Err(Error::Config("synthetic image and patch size must match the encoder".into()));
        }
        Ok(())
    }

    pub fn adjacency(&self) -> AdjacencyParams {
        let radius = if self.use_adjacency { self.radius } else { None };
        AdjacencyParams { radius, anchor: self.adjacency_anchor }
    }

    /// Loss weights with the ablation flags applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_coherence {
            w.coh = 0.0;
        }
        w
    }

    /// Fresh model: encoder from `seed`, prototypes from `seed + 1`.
    pub fn build_model(&self) -> Result<Model> {
        self.validate()?;
        let encoder = Encoder::new(EncoderConfig { seed: self.seed, ..self.encoder.clone() })?;
        let mut bank = PrototypeBank::init(self.num_classes, self.per_class, self.slots, self.encoder.embed_dim, self.seed.wrapping_add(1))?;
        bank.tau = self.tau;
        Model::new(encoder, bank, self.adjacency())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { num_classes: self.num_classes, seed: self.seed, ..self.synthetic.clone() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let s = &mut self.schedule;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "image_size" => self.encoder.image_size = parse_num(key, v)?,
            "channels" => self.encoder.channels = parse_num(key, v)?,
            "patch_side" => self.encoder.patch_side = parse_num(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse_num(key, v)?,
            "depth" => self.encoder.depth = parse_num(key, v)?,
            "heads" => self.encoder.heads = parse_num(key, v)?,
            "mlp_ratio" => self.encoder.mlp_ratio = parse_num(key, v)?,
            "use_class_token" => self.encoder.use_class_token = parse_bool(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "slots" => self.slots = parse_num(key, v)?,
            "radius" => self.radius = if matches!(v, "inf" | "none") { None } else { Some(parse_num(key, v)?) },
            "per_class" => self.per_class = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "adjacency_anchor" => self.adjacency_anchor = v.parse()?,
            "use_adjacency" => self.use_adjacency = parse_bool(key, v)?,
            "use_coherence" => self.use_coherence = parse_bool(key, v)?,
            "w_ce" => self.weights.ce = parse_num(key, v)?,
            "w_clst" => self.weights.clst = parse_num(key, v)?,
            "w_sep" => self.weights.sep = parse_num(key, v)?,
            "w_coh" => self.weights.coh = parse_num(key, v)?,
            "w_orth" => self.weights.orth = parse_num(key, v)?,
            "w_coh_prune" => self.weights.coh_prune = parse_num(key, v)?,
            "w_l1" => self.weights.l1 = parse_num(key, v)?,
            "warmup_optimizer" => s.warmup.optimizer = v.parse()?,
            "joint_optimizer" => s.joint.optimizer = v.parse()?,
            "prune_optimizer" => s.prune.optimizer = v.parse()?,
            "last_optimizer" => s.last.optimizer = v.parse()?,
            "momentum" => s.momentum = parse_num(key, v)?,
            "batch_size" => s.batch_size = parse_num(key, v)?,
            "warmup_epochs" => s.warmup.epochs = parse_num(key, v)?,
            "warmup_lr_encoder" => s.warmup.lr_encoder = parse_num(key, v)?,
            "warmup_lr_prototypes" => s.warmup.lr_prototypes = parse_num(key, v)?,
            "joint_epochs" => s.joint.epochs = parse_num(key, v)?,
            "joint_lr_encoder" => s.joint.lr_encoder = parse_num(key, v)?,
            "joint_lr_prototypes" => s.joint.lr_prototypes = parse_num(key, v)?,
            "prune_epochs" => s.prune.epochs = parse_num(key, v)?,
            "prune_lr_slots" => s.prune.lr_slots = parse_num(key, v)?,
            "last_epochs" => s.last.epochs = parse_num(key, v)?,
            "last_lr_evidence" => s.last.lr_evidence = parse_num(key, v)?,
            "augment" => self.augment = AugmentOp::parse_list(v)?,
            "synth_train_per_class" => self.synthetic.train_per_class = parse_num(key, v)?,
            "synth_test_per_class" => self.synthetic.test_per_class = parse_num(key, v)?,
            "synth_glyph_cells" => self.synthetic.glyph_cells = parse_num(key, v)?,
            "synth_noise" => self.synthetic.noise = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        if matches!(key, "image_size" | "patch_side") {
            self.synthetic.image_size = self.encoder.image_size;
            self.synthetic.patch_side = self.encoder.patch_side;
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; later keys override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parse a config file. A `preset = desk` line, if present, must come
    /// first and selects the base values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| {
            let l = l.split('#').next().unwrap_or("").trim();
            !l.is_empty()
        });
        let mut cfg = Self::default();
        let mut rest = text;
        if let Some(first) = lines.next() {
            if let Some((k, v)) = first.split_once('=') {
                if k.trim() == "preset" {
                    cfg = match v.split('#').next().unwrap_or("").trim() {
                        "desk" => Self::desk(),
                        "full" => Self::default(),
                        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
                    };
                    let at = text.find(first).map_or(0, |i| i + first.len());
                    rest = &text[at..];
                }
            }
        }
        cfg.apply_text(rest)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        let e = &self.encoder;
        let w = &self.weights;
        let radius = self.radius.map_or("inf".to_string(), |r| r.to_string());
        let augment = if self.augment.is_empty() {
            "none".to_string()
        } else {
            self.augment.iter().map(AugmentOp::name).collect::<Vec<_>>().join(",")
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("image_size", e.image_size.to_string()),
            ("channels", e.channels.to_string()),
            ("patch_side", e.patch_side.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("depth", e.depth.to_string()),
            ("heads", e.heads.to_string()),
            ("mlp_ratio", e.mlp_ratio.to_string()),
            ("use_class_token", e.use_class_token.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("slots", self.slots.to_string()),
            ("radius", radius),
            ("per_class", self.per_class.to_string()),
            ("tau", self.tau.to_string()),
            ("adjacency_anchor", self.adjacency_anchor.to_string()),
            ("use_adjacency", self.use_adjacency.to_string()),
            ("use_coherence", self.use_coherence.to_string()),
            ("w_ce", w.ce.to_string()),
            ("w_clst", w.clst.to_string()),
            ("w_sep", w.sep.to_string()),
            ("w_coh", w.coh.to_string()),
            ("w_orth", w.orth.to_string()),
            ("w_coh_prune", w.coh_prune.to_string()),
            ("w_l1", w.l1.to_string()),
            ("momentum", s.momentum.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("warmup_epochs", s.warmup.epochs.to_string()),
            ("warmup_optimizer", s.warmup.optimizer.to_string()),
            ("warmup_lr_encoder", s.warmup.lr_encoder.to_string()),
            ("warmup_lr_prototypes", s.warmup.lr_prototypes.to_string()),
            ("joint_epochs", s.joint.epochs.to_string()),
            ("joint_optimizer", s.joint.optimizer.to_string()),
            ("joint_lr_encoder", s.joint.lr_encoder.to_string()),
            ("joint_lr_prototypes", s.joint.lr_prototypes.to_string()),
            ("prune_epochs", s.prune.epochs.to_string()),
            ("prune_optimizer", s.prune.optimizer.to_string()),
            ("prune_lr_slots", s.prune.lr_slots.to_string()),
            ("last_epochs", s.last.epochs.to_string()),
            ("last_optimizer", s.last.optimizer.to_string()),
            ("last_lr_evidence", s.last.lr_evidence.to_string()),
            ("augment", augment),
            ("synth_train_per_class", self.synthetic.train_per_class.to_string()),
            ("synth_test_per_class", self.synthetic.test_per_class.to_string()),
            ("synth_glyph_cells", self.synthetic.glyph_cells.to_string()),
            ("synth_noise", self.synthetic.noise.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
