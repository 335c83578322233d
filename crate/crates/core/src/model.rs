//! The full classifier: encoder, greedy matching layer and evidence layer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{feature_tokens_var, patchify, Backbone, Encoder, ImageTensor, TokenGrid};
use crate::error::{Error, Result};
use crate::matching::{match_all, reweighted_scores_var, AdjacencyParams, MatchResult};
use crate::prototypes::PrototypeBank;

/// Evidence weights `W`, `C×m`: logit `l` is `Σ_j W[l, j] · g_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceLayer {
    pub weights: Array2<f64>,
}

impl EvidenceLayer {
    /// `+1` from a prototype to its own class, `-0.5` to every other class.
    pub fn init(class_of: &[usize], num_classes: usize) -> Self {
        let weights = Array2::from_shape_fn((num_classes, class_of.len()), |(l, j)| {
            if class_of[j] == l {
                1.0
            } else {
                -0.5
            }
        });
        Self { weights }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, scores: &[f64]) -> Vec<f64> {
        self.weights.dot(&Array1::from(scores.to_vec())).to_vec()
    }
}

/// Parameter groups trained (or frozen) together by a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Prototypes,
    Slots,
    Evidence,
}

/// Which groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet {
    pub encoder: bool,
    pub prototypes: bool,
    pub slots: bool,
    pub evidence: bool,
}

impl GroupSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Prototypes => self.prototypes,
            ParamGroup::Slots => self.slots,
            ParamGroup::Evidence => self.evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub bank: PrototypeBank,
    pub evidence: EvidenceLayer,
    pub adjacency: AdjacencyParams,
}

/// Nodes produced by one image's forward pass.
pub struct ImageForward {
    /// `1×C`
    pub logits: Var,
    /// `m×1` reweighted similarities.
    pub scores: Var,
    /// `m×K` matched cosines (entries of skipped slots are meaningless).
    pub cosines: Var,
    /// `m×K` slot gates.
    pub indicators: Var,
    pub matches: Vec<MatchResult>,
}

/// Result of running a model on one image outside of training.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub matches: Vec<MatchResult>,
    pub tokens: TokenGrid,
}

impl Inference {
    /// Argmax of the logits, lowest class on ties.
    pub fn label(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(encoder: Encoder, bank: PrototypeBank, adjacency: AdjacencyParams) -> Result<Self> {
        bank.validate()?;
        if bank.dim() != encoder.embed_dim() {
            return Err(Error::Dimension(format!(
                "prototype width {} does not match encoder width {}",
                bank.dim(),
                encoder.embed_dim()
            )));
        }
        let evidence = EvidenceLayer::init(&bank.class_of, bank.num_classes());
        Ok(Self { encoder, bank, evidence, adjacency })
    }

    pub fn num_classes(&self) -> usize {
        self.evidence.num_classes()
    }

    /// Every trainable tensor with its name and group, in binding order.
    pub fn param_tensors(&self) -> Vec<(String, ParamGroup, &Array2<f64>)> {
        let mut out: Vec<_> = self
            .encoder
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, ParamGroup::Encoder, t))
            .collect();
        out.push(("proto.vectors".into(), ParamGroup::Prototypes, &self.bank.vectors));
        out.push(("proto.slot_params".into(), ParamGroup::Slots, &self.bank.slot_params));
        out.push(("evidence.weights".into(), ParamGroup::Evidence, &self.evidence.weights));
        out
    }

    /// Hash of the exact bit patterns of one parameter group.
    pub fn group_fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, g, t) in self.param_tensors() {
            if g == group {
                name.hash(&mut h);
                t.dim().hash(&mut h);
                t.iter().for_each(|v| v.to_bits().hash(&mut h));
            }
        }
        h.finish()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Array2<f64>)> {
        let mut out: Vec<_> = self.encoder.tensors_mut().into_iter().map(|t| (ParamGroup::Encoder, t)).collect();
        out.push((ParamGroup::Prototypes, &mut self.bank.vectors));
        out.push((ParamGroup::Slots, &mut self.bank.slot_params));
        out.push((ParamGroup::Evidence, &mut self.evidence.weights));
        out
    }

    /// Put every parameter on `g`; only groups in `trainable` require grads.
    pub fn bind(&self, g: &mut Graph, trainable: GroupSet) -> Vec<Var> {
        self.param_tensors()
            .into_iter()
            .map(|(_, group, t)| g.leaf(t.clone(), trainable.contains(group)))
            .collect()
    }

    pub fn image_patches(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        let cfg = &self.encoder.config;
        if image.height() != cfg.image_size || image.width() != cfg.image_size || image.channels() != cfg.channels {
            return Err(Error::Dimension(format!(
                "model expects {0}x{0}x{1} images, got {2}x{3}x{4}",
                cfg.image_size,
                cfg.channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        patchify(image, cfg.patch_side)
    }

    /// Latent feature tokens `z_f` as a graph node (`N×d`).
    pub fn tokens_var(&self, g: &mut Graph, vars: &[Var], patches: Var) -> Var {
        let n_enc = vars.len() - 3;
        let (cls, tokens) = self.encoder.forward(g, &vars[..n_enc], patches);
        feature_tokens_var(g, cls, tokens)
    }

    /// Matching and evidence layers on top of a token node.
    pub fn head_forward(&self, g: &mut Graph, vars: &[Var], tokens: Var) -> Result<ImageForward> {
        let n_enc = vars.len() - 3;
        let (protos, slots, weights) = (vars[n_enc], vars[n_enc + 1], vars[n_enc + 2]);
        let k = self.bank.slots();

        let pn = g.normalize_rows(protos);
        let zn = g.normalize_rows(tokens);
        let sim = g.matmul_nt(pn, zn);
        let grid_cols = self.encoder.config.grid_side();
        let (_, matches) = match_all(g.value(sim).view(), &self.bank, grid_cols, &self.adjacency)?;

        let indicators = if self.bank.slots_frozen {
            g.constant(self.bank.indicators().values)
        } else {
            let scaled = g.scale(slots, self.bank.tau);
            g.sigmoid(scaled)
        };
        let (scores, cosines) = reweighted_scores_var(g, sim, &matches, indicators, k);
        let col = g.matmul(weights, scores);
        let logits = g.transpose(col);
        Ok(ImageForward { logits, scores, cosines, indicators, matches })
    }

    pub fn forward_image(&self, g: &mut Graph, vars: &[Var], image: &ImageTensor) -> Result<ImageForward> {
        let patches = self.image_patches(image)?;
        let patches = g.constant(patches);
        let tokens = self.tokens_var(g, vars, patches);
        self.head_forward(g, vars, tokens)
    }

    /// Latent feature tokens of one image.
    pub fn feature_tokens(&self, image: &ImageTensor) -> Result<TokenGrid> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, GroupSet::none());
        let patches = g.constant(self.image_patches(image)?);
        let t = self.tokens_var(&mut g, &vars, patches);
        let side = self.encoder.config.grid_side();
        TokenGrid::new(g.value(t).clone(), side, side, self.encoder.config.patch_side)
    }

    /// Scores, matches and logits for precomputed feature tokens.
    pub fn infer_tokens(&self, tokens: TokenGrid) -> Result<Inference> {
        let (scores, matches) = crate::matching::score_image(&tokens, &self.bank, &self.adjacency)?;
        let logits = self.evidence.logits(&scores);
        Ok(Inference { logits, scores, matches, tokens })
    }

    pub fn infer(&self, image: &ImageTensor) -> Result<Inference> {
        let tokens = self.feature_tokens(image)?;
        self.infer_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    pub(crate) fn tiny_model() -> Model {
        let cfg = EncoderConfig {
            image_size: 8,
            channels: 3,
            patch_side: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            use_class_token: true,
            seed: 1,
        };
        let enc = Encoder::new(cfg).unwrap();
        let bank = PrototypeBank::init(3, 2, 2, 8, 2).unwrap();
        Model::new(enc, bank, AdjacencyParams::new(1)).unwrap()
    }

    #[test]
    fn evidence_init_layout() {
        let bank = PrototypeBank::init(3, 2, 1, 2, 0).unwrap();
        let w = EvidenceLayer::init(&bank.class_of, 3).weights;
        assert_eq!(w.dim(), (3, 6));
        assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(w.iter().filter(|&&v| v == -0.5).count(), 12);
    }

    #[test]
    fn evidence_one_hot_and_ties() {
        let bank = PrototypeBank::init(3, 2, 1, 2, 0).unwrap();
        let ev = EvidenceLayer::init(&bank.class_of, 3);
        let mut g = vec![0.0; 6];
        g[3] = 1.0;
        assert_eq!(argmax(&ev.logits(&g)), 1);
        let logits = ev.logits(&[0.5; 6]);
        assert!(logits.iter().all(|&l| (l - logits[0]).abs() < 1e-15));
        assert_eq!(argmax(&logits), 0);
    }

    #[test]
    fn graph_forward_agrees_with_inference() {
        let model = tiny_model();
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let img = ImageTensor::new(8, 8, 3, data).unwrap();
        let inf = model.infer(&img).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, GroupSet::none());
        let fwd = model.forward_image(&mut g, &vars, &img).unwrap();
        let logits = g.value(fwd.logits);
        for (a, b) in logits.iter().zip(&inf.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fwd.matches.iter().map(|m| &m.assignment).collect::<Vec<_>>(), inf.matches.iter().map(|m| &m.assignment).collect::<Vec<_>>());
    }

    #[test]
    fn single_class_model_always_predicts_it() {
        let cfg = EncoderConfig { image_size: 4, patch_side: 2, embed_dim: 4, depth: 1, heads: 1, ..Default::default() };
        let enc = Encoder::new(cfg).unwrap();
        let bank = PrototypeBank::init(1, 2, 2, 4, 0).unwrap();
        let model = Model::new(enc, bank, AdjacencyParams::new(1)).unwrap();
        for s in 0..5 {
            let data = (0..48).map(|i| ((i * (s + 3)) % 13) as f64 / 13.0).collect();
            let img = ImageTensor::new(4, 4, 3, data).unwrap();
            assert_eq!(model.infer(&img).unwrap().label(), 0);
        }
    }
}
