//! Two separate MLP branches (visual and audio) projecting into one
//! embedding space, plus a classifier matrix shared by both modalities.
//!
//! Gradients are computed by hand: forward passes record a [`ForwardTape`]
//! per input, and [`backward`] replays the tapes in reverse given the loss
//! gradients with respect to each embedding and each set of class logits.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{axpy, relu_scalar, softmax, DenseMatrix, DenseVector, Rng};
use crate::trainer::TrainingConfig;

/// Stream id used to derive the initialization generator from the run seed.
pub const INIT_STREAM: u64 = 1;

/// Pairs per gradient-accumulation chunk. Fixed so the summation order does
/// not depend on the number of worker threads.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: DenseVector, activation: Activation) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: weights.rows(),
                actual: bias.len(),
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchNetwork {
    layers: Vec<DenseLayer>,
}

impl BranchNetwork {
    /// Checks that the layers chain and that the last one is linear.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::Contract("branch needs at least one layer".into()))?;
        if last.activation != Activation::Identity {
            return Err(Error::Contract(
                "embedding layer must use the identity activation".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        Ok(BranchNetwork { layers })
    }

    /// Hidden ReLU layers of the given widths followed by a linear projection
    /// to `embedding_dim`. Weights are Gaussian with variance `2 / fan_in`
    /// (`1 / fan_in` for the projection); biases start at zero.
    pub fn init(input_dim: usize, widths: &[usize], embedding_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = Vec::with_capacity(widths.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(widths);
        dims.push(embedding_dim);
        if dims.contains(&0) {
            return Err(Error::Config(format!("non-positive layer dimension in {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let (activation, gain) = if l + 1 == n {
                    (Activation::Identity, 1.0)
                } else {
                    (Activation::Relu, 2.0)
                };
                let std = (gain / fan_in as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                DenseLayer::new(
                    DenseMatrix::from_vec(fan_out, fan_in, values)?,
                    DenseVector::zeros(fan_out),
                    activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        BranchNetwork::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Embedding only, without recording a tape.
    pub fn embed(&self, features: &[f64]) -> Result<DenseVector> {
        self.check_input(features)?;
        let mut x = features.to_vec();
        for layer in &self.layers {
            let mut z = vec![0.0; layer.output_dim()];
            layer.weights.matvec_into(&x, &mut z);
            for (zi, bi) in z.iter_mut().zip(layer.bias.iter()) {
                *zi += bi;
            }
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = relu_scalar(*v));
            }
            x = z;
        }
        Ok(DenseVector::new(x))
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "branch input",
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        Ok(())
    }
}

/// Per-layer inputs and pre-activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    fn matches(&self, branch: &BranchNetwork) -> bool {
        self.inputs.len() == branch.layers.len()
            && self
                .inputs
                .iter()
                .zip(&self.pre_activations)
                .zip(&branch.layers)
                .all(|((x, z), l)| x.len() == l.input_dim() && z.len() == l.output_dim())
    }
}

pub fn forward_branch(branch: &BranchNetwork, features: &[f64]) -> Result<(DenseVector, ForwardTape)> {
    branch.check_input(features)?;
    let n = branch.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut x = features.to_vec();
    for layer in &branch.layers {
        let mut z = vec![0.0; layer.output_dim()];
        layer.weights.matvec_into(&x, &mut z);
        for (zi, bi) in z.iter_mut().zip(layer.bias.iter()) {
            *zi += bi;
        }
        let out = match layer.activation {
            Activation::Relu => z.iter().map(|&v| relu_scalar(v)).collect(),
            Activation::Identity => z.clone(),
        };
        inputs.push(std::mem::replace(&mut x, out));
        pre_activations.push(z);
    }
    let tape = ForwardTape {
        inputs,
        pre_activations,
        output: x.clone(),
    };
    Ok((DenseVector::new(x), tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub visual: BranchNetwork,
    pub audio: BranchNetwork,
    /// `num_classes × embedding_dim`, applied to both modalities.
    pub classifier: DenseMatrix,
}

pub fn init_model(config: &TrainingConfig, rng: &mut Rng) -> Result<JointModel> {
    if config.num_classes == 0 || config.embedding_dim == 0 {
        return Err(Error::Config("num_classes and embedding_dim must be positive".into()));
    }
    let visual = BranchNetwork::init(
        config.visual_input_dim,
        &config.visual_widths,
        config.embedding_dim,
        rng,
    )?;
    let audio = BranchNetwork::init(config.audio_input_dim, &config.audio_widths, config.embedding_dim, rng)?;
    let std = (1.0 / config.embedding_dim as f64).sqrt();
    let values = (0..config.num_classes * config.embedding_dim)
        .map(|_| std * rng.normal())
        .collect();
    let classifier = DenseMatrix::from_vec(config.num_classes, config.embedding_dim, values)?;
    JointModel::new(visual, audio, classifier)
}

impl JointModel {
    pub fn new(visual: BranchNetwork, audio: BranchNetwork, classifier: DenseMatrix) -> Result<Self> {
        if visual.embedding_dim() != audio.embedding_dim() {
            return Err(Error::DimensionMismatch {
                context: "branch embedding dims",
                expected: visual.embedding_dim(),
                actual: audio.embedding_dim(),
            });
        }
        if classifier.cols() != visual.embedding_dim() {
            return Err(Error::DimensionMismatch {
                context: "classifier columns",
                expected: visual.embedding_dim(),
                actual: classifier.cols(),
            });
        }
        Ok(JointModel {
            visual,
            audio,
            classifier,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.visual.embedding_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn branch(&self, modality: Modality) -> &BranchNetwork {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn class_logits(&self, embedding: &[f64]) -> Result<DenseVector> {
        crate::numerics::matvec(&self.classifier, embedding)
    }

    /// Class probabilities `softmax(W · embedding)`.
    pub fn forward_classifier(&self, embedding: &[f64]) -> Result<DenseVector> {
        Ok(softmax(&self.class_logits(embedding)?))
    }

    /// Parameter blocks in canonical order: visual layers (weights, bias),
    /// audio layers (weights, bias), classifier.
    pub fn param_blocks(&self) -> Vec<(BlockId, &[f64])> {
        let mut out = Vec::new();
        for (modality, branch) in [(Modality::Visual, &self.visual), (Modality::Audio, &self.audio)] {
            for (i, layer) in branch.layers.iter().enumerate() {
                out.push((BlockId::Weights(modality, i), layer.weights.as_slice()));
                out.push((BlockId::Bias(modality, i), &layer.bias[..]));
            }
        }
        out.push((BlockId::Classifier, self.classifier.as_slice()));
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<(BlockId, &mut [f64])> {
        let mut out = Vec::new();
        for (modality, branch) in [(Modality::Visual, &mut self.visual), (Modality::Audio, &mut self.audio)] {
            for (i, layer) in branch.layers.iter_mut().enumerate() {
                out.push((BlockId::Weights(modality, i), layer.weights.as_mut_slice()));
                out.push((BlockId::Bias(modality, i), &mut layer.bias[..]));
            }
        }
        out.push((BlockId::Classifier, self.classifier.as_mut_slice()));
        out
    }

    /// `(rows, cols)` of every block, biases reported as `(len, 1)`.
    pub fn block_shapes(&self) -> Vec<(BlockId, (usize, usize))> {
        let mut out = Vec::new();
        for (modality, branch) in [(Modality::Visual, &self.visual), (Modality::Audio, &self.audio)] {
            for (i, layer) in branch.layers.iter().enumerate() {
                out.push((BlockId::Weights(modality, i), layer.weights.shape()));
                out.push((BlockId::Bias(modality, i), (layer.bias.len(), 1)));
            }
        }
        out.push((BlockId::Classifier, self.classifier.shape()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.param_blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockId {
    Weights(Modality, usize),
    Bias(Modality, usize),
    Classifier,
}

impl BlockId {
    /// Whether the L2 penalty applies to this block.
    pub fn is_penalized(&self, include_classifier: bool) -> bool {
        match self {
            BlockId::Weights(..) => true,
            BlockId::Bias(..) => false,
            BlockId::Classifier => include_classifier,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Weights(m, i) => write!(f, "{m}.{i}.weights"),
            BlockId::Bias(m, i) => write!(f, "{m}.{i}.bias"),
            BlockId::Classifier => f.write_str("classifier"),
        }
    }
}

/// `coefficient · Σ w²` over branch weight matrices, and the classifier when
/// `include_classifier` is set. Biases are never penalized.
pub fn l2_penalty(model: &JointModel, coefficient: f64, include_classifier: bool) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    let sum: f64 = model
        .param_blocks()
        .into_iter()
        .filter(|(id, _)| id.is_penalized(include_classifier))
        .map(|(_, w)| w.iter().map(|v| v * v).sum::<f64>())
        .sum();
    coefficient * sum
}

/// Gradient arrays laid out exactly like a [`JointModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    blocks: Vec<(BlockId, (usize, usize), Vec<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(model: &JointModel) -> Self {
        GradientSet {
            blocks: model
                .block_shapes()
                .into_iter()
                .map(|(id, (r, c))| (id, (r, c), vec![0.0; r * c]))
                .collect(),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockId, &[f64])> {
        self.blocks.iter().map(|(id, _, g)| (*id, g.as_slice()))
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = (BlockId, &mut [f64])> {
        self.blocks.iter_mut().map(|(id, _, g)| (*id, g.as_mut_slice()))
    }

    pub fn block(&self, id: BlockId) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(b, _, _)| *b == id)
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn is_congruent(&self, model: &JointModel) -> bool {
        let shapes = model.block_shapes();
        shapes.len() == self.blocks.len()
            && shapes
                .iter()
                .zip(&self.blocks)
                .all(|((id, s), (gid, gs, g))| id == gid && s == gs && g.len() == s.0 * s.1)
    }

    /// First block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<BlockId> {
        self.blocks
            .iter()
            .find(|(_, _, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(id, _, _)| *id)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|(_, _, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for ((_, _, a), (_, _, b)) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    // Index layout: per branch 2 blocks per layer, classifier last.
    fn branch_offset(&self, model: &JointModel, modality: Modality) -> usize {
        match modality {
            Modality::Visual => 0,
            Modality::Audio => 2 * model.visual.layers.len(),
        }
    }
}

/// Forward tapes for both sides of one training pair.
#[derive(Debug, Clone)]
pub struct PairTape {
    pub visual: ForwardTape,
    pub audio: ForwardTape,
}

/// Loss gradients flowing into one pair: with respect to each embedding, and
/// optionally with respect to each modality's class logits.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub d_visual: Vec<f64>,
    pub d_audio: Vec<f64>,
    pub d_logits_visual: Option<Vec<f64>>,
    pub d_logits_audio: Option<Vec<f64>>,
}

/// Exact gradients of `Σ_pairs loss + l2_coefficient · Σ w²`.
///
/// The shared classifier collects `d_logits ⊗ Φ` from both modalities, and
/// `Wᵀ d_logits` is added to each embedding gradient before the branch is
/// back-propagated.
pub fn backward(
    model: &JointModel,
    tapes: &[PairTape],
    upstream: &[Upstream],
    l2_coefficient: f64,
    l2_on_classifier: bool,
) -> Result<GradientSet> {
    if tapes.len() != upstream.len() {
        return Err(Error::DimensionMismatch {
            context: "backward tapes vs upstream",
            expected: tapes.len(),
            actual: upstream.len(),
        });
    }
    for (tape, up) in tapes.iter().zip(upstream) {
        check_pair(model, tape, up)?;
    }

    let partials: Vec<GradientSet> = tapes
        .par_chunks(GRAD_CHUNK)
        .zip(upstream.par_chunks(GRAD_CHUNK))
        .map(|(tapes, ups)| {
            let mut grads = GradientSet::zeros_like(model);
            for (tape, up) in tapes.iter().zip(ups) {
                accumulate_pair(model, tape, up, &mut grads);
            }
            grads
        })
        .collect();

    let mut grads = GradientSet::zeros_like(model);
    for p in &partials {
        grads.add_assign(p);
    }

    if l2_coefficient != 0.0 {
        for ((id, g), (_, w)) in grads.blocks_mut().zip(model.param_blocks()) {
            if id.is_penalized(l2_on_classifier) {
                axpy(2.0 * l2_coefficient, w, g);
            }
        }
    }
    Ok(grads)
}

fn check_pair(model: &JointModel, tape: &PairTape, up: &Upstream) -> Result<()> {
    if !tape.visual.matches(&model.visual) || !tape.audio.matches(&model.audio) {
        return Err(Error::Contract("forward tape does not match model shape".into()));
    }
    let d = model.embedding_dim();
    let k = model.num_classes();
    let lens_ok = up.d_visual.len() == d
        && up.d_audio.len() == d
        && up.d_logits_visual.as_ref().is_none_or(|g| g.len() == k)
        && up.d_logits_audio.as_ref().is_none_or(|g| g.len() == k);
    if !lens_ok {
        return Err(Error::Contract("upstream gradient has the wrong length".into()));
    }
    Ok(())
}

fn accumulate_pair(model: &JointModel, tape: &PairTape, up: &Upstream, grads: &mut GradientSet) {
    let sides = [
        (Modality::Visual, &tape.visual, &up.d_visual, &up.d_logits_visual),
        (Modality::Audio, &tape.audio, &up.d_audio, &up.d_logits_audio),
    ];
    let classifier_idx = grads.blocks.len() - 1;
    for (modality, tape, d_embed, d_logits) in sides {
        let mut delta = d_embed.clone();
        if let Some(d_logits) = d_logits {
            let g = &mut grads.blocks[classifier_idx].2;
            let cols = model.classifier.cols();
            for (&s, row) in d_logits.iter().zip(g.chunks_exact_mut(cols)) {
                if s != 0.0 {
                    axpy(s, tape.output(), row);
                }
            }
            model.classifier.matvec_transpose_acc(d_logits, &mut delta);
        }
        let offset = grads.branch_offset(model, modality);
        backprop_branch(model.branch(modality), tape, delta, &mut grads.blocks[offset..]);
    }
}

fn backprop_branch(
    branch: &BranchNetwork,
    tape: &ForwardTape,
    mut delta: Vec<f64>,
    blocks: &mut [(BlockId, (usize, usize), Vec<f64>)],
) {
    for l in (0..branch.layers.len()).rev() {
        let layer = &branch.layers[l];
        if layer.activation == Activation::Relu {
            for (d, z) in delta.iter_mut().zip(&tape.pre_activations[l]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let input = &tape.inputs[l];
        {
            let gw = &mut blocks[2 * l].2;
            for (&s, row) in delta.iter().zip(gw.chunks_exact_mut(layer.input_dim())) {
                if s != 0.0 {
                    axpy(s, input, row);
                }
            }
        }
        axpy(1.0, &delta, &mut blocks[2 * l + 1].2);
        if l > 0 {
            let mut next = vec![0.0; layer.input_dim()];
            layer.weights.matvec_transpose_acc(&delta, &mut next);
            delta = next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            visual_input_dim: 5,
            audio_input_dim: 3,
            visual_widths: vec![4, 4],
            audio_widths: vec![4],
            embedding_dim: 8,
            num_classes: 3,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn default_config_shapes() {
        let config = TrainingConfig::default();
        let model = init_model(&config, &mut Rng::new(0)).unwrap();
        let v = model.visual.layers();
        assert_eq!(v.len(), 5);
        let shapes: Vec<_> = v.iter().map(|l| l.weights.shape()).collect();
        assert_eq!(
            shapes,
            [(2000, 1024), (2000, 2000), (700, 2000), (700, 700), (250, 700)]
        );
        let a: Vec<_> = model.audio.layers().iter().map(|l| l.weights.shape()).collect();
        assert_eq!(a, [(450, 128), (450, 450), (200, 450), (200, 200), (250, 200)]);
        assert_eq!(model.classifier.shape(), (32, 250));
        assert!(v.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let config = tiny_config();
        let a = init_model(&config, &mut Rng::new(7)).unwrap();
        let b = init_model(&config, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        let c = init_model(&config, &mut Rng::new(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_chain() {
        let branch = BranchNetwork::init(6, &[4, 4], 8, &mut Rng::new(1)).unwrap();
        let shapes: Vec<_> = branch.layers().iter().map(|l| l.weights.shape()).collect();
        assert_eq!(shapes, [(4, 6), (4, 4), (8, 4)]);
        assert_eq!(branch.layers()[2].activation, Activation::Identity);
        assert!(BranchNetwork::init(6, &[0], 8, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn branch_constructor_checks() {
        let l1 = DenseLayer::new(DenseMatrix::zeros(3, 2), DenseVector::zeros(3), Activation::Relu).unwrap();
        let l2 = DenseLayer::new(DenseMatrix::zeros(2, 4), DenseVector::zeros(2), Activation::Identity).unwrap();
        assert!(BranchNetwork::new(vec![l1.clone(), l2]).is_err());
        assert!(BranchNetwork::new(vec![l1]).is_err());
        assert!(DenseLayer::new(DenseMatrix::zeros(3, 2), DenseVector::zeros(2), Activation::Relu).is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut branch = BranchNetwork::init(3, &[4], 2, &mut Rng::new(0)).unwrap();
        for l in branch.layers_mut() {
            l.weights.as_mut_slice().fill(0.0);
        }
        let (e, _) = forward_branch(&branch, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(e.as_ref(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let layer = DenseLayer::new(DenseMatrix::identity(2), DenseVector::zeros(2), Activation::Identity).unwrap();
        let branch = BranchNetwork::new(vec![layer]).unwrap();
        let (e, _) = forward_branch(&branch, &[1.0, -2.0]).unwrap();
        assert_eq!(e.as_ref(), &[1.0, -2.0]);
    }

    #[test]
    fn toy_branch_matches_hand_computation() {
        // h = relu([[1,-1],[0.5,2]]·x + [0.1,-0.2]), y = [[1,1],[-1,0.5]]·h + [0,0.3]
        let l1 = DenseLayer::new(
            DenseMatrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap(),
            DenseVector::new(vec![0.1, -0.2]),
            Activation::Relu,
        )
        .unwrap();
        let l2 = DenseLayer::new(
            DenseMatrix::from_rows(&[&[1.0, 1.0], &[-1.0, 0.5]]).unwrap(),
            DenseVector::new(vec![0.0, 0.3]),
            Activation::Identity,
        )
        .unwrap();
        let branch = BranchNetwork::new(vec![l1, l2]).unwrap();
        // x = [1, 2]: z1 = [-0.9, 4.3] -> h = [0, 4.3]; y = [4.3, 2.45]
        let (e, tape) = forward_branch(&branch, &[1.0, 2.0]).unwrap();
        assert!((e[0] - 4.3).abs() < 1e-12);
        assert!((e[1] - 2.45).abs() < 1e-12);
        assert_eq!(tape.output(), &e[..]);
        assert_eq!(branch.embed(&[1.0, 2.0]).unwrap(), e);
        assert!(forward_branch(&branch, &[1.0]).is_err());
    }

    #[test]
    fn classifier_examples() {
        let mut model = init_model(&tiny_config(), &mut Rng::new(3)).unwrap();
        let p = model.forward_classifier(&[0.0; 8]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0], &[3.0, 0.5]]).unwrap();
        let branch = |d| BranchNetwork::init(d, &[], 2, &mut Rng::new(0)).unwrap();
        model = JointModel::new(branch(2), branch(2), w).unwrap();
        // logits for [1, 0] are the first column: [1, 0, 3]
        let p = model.forward_classifier(&[1.0, 0.0]).unwrap();
        let e = [1f64.exp(), 1.0, 3f64.exp()];
        let s: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((p[i] - e[i] / s).abs() < 1e-15);
        }
        assert!(model.forward_classifier(&[1.0]).is_err());

        model.classifier.as_mut_slice().fill(0.0);
        let p = model.forward_classifier(&[5.0, -1.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn l2_penalty_examples() {
        let mut model = init_model(&tiny_config(), &mut Rng::new(5)).unwrap();
        let brute: f64 = model
            .visual
            .layers()
            .iter()
            .chain(model.audio.layers())
            .flat_map(|l| l.weights.as_slice().iter())
            .map(|w| w * w)
            .sum();
        assert!((l2_penalty(&model, 0.3, false) - 0.3 * brute).abs() < 1e-12);
        let with_w = brute + model.classifier.as_slice().iter().map(|w| w * w).sum::<f64>();
        assert!((l2_penalty(&model, 0.3, true) - 0.3 * with_w).abs() < 1e-12);

        for (_, block) in model.param_blocks_mut() {
            block.fill(0.0);
        }
        assert_eq!(l2_penalty(&model, 0.3, true), 0.0);
        model.visual.layers_mut()[0].weights.set(0, 0, 2.0);
        model.visual.layers_mut()[0].bias[0] = 9.0;
        assert_eq!(l2_penalty(&model, 0.5, false), 2.0);
    }

    fn pair_tapes(model: &JointModel, rng: &mut Rng, n: usize) -> Vec<PairTape> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
                let a: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                PairTape {
                    visual: forward_branch(&model.visual, &v).unwrap().1,
                    audio: forward_branch(&model.audio, &a).unwrap().1,
                }
            })
            .collect()
    }

    #[test]
    fn zero_upstream_gives_zero_or_pure_l2() {
        let model = init_model(&tiny_config(), &mut Rng::new(11)).unwrap();
        let tapes = pair_tapes(&model, &mut Rng::new(12), 3);
        let up = vec![
            Upstream {
                d_visual: vec![0.0; 8],
                d_audio: vec![0.0; 8],
                d_logits_visual: Some(vec![0.0; 3]),
                d_logits_audio: None,
            };
            3
        ];
        let g = backward(&model, &tapes, &up, 0.0, false).unwrap();
        assert!(g.is_congruent(&model));
        assert_eq!(g.max_abs(), 0.0);

        let g = backward(&model, &tapes, &up, 0.25, false).unwrap();
        for ((id, grad), (_, w)) in g.blocks().zip(model.param_blocks()) {
            for (gi, wi) in grad.iter().zip(w) {
                let expected = if id.is_penalized(false) { 0.5 * wi } else { 0.0 };
                assert_eq!(*gi, expected);
            }
        }
    }

    #[test]
    fn shared_classifier_gradient_is_sum_of_paths() {
        let model = init_model(&tiny_config(), &mut Rng::new(21)).unwrap();
        let tapes = pair_tapes(&model, &mut Rng::new(22), 2);
        let mut rng = Rng::new(23);
        let mut r = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<_>>();
        let both: Vec<Upstream> = (0..2)
            .map(|_| Upstream {
                d_visual: r(8),
                d_audio: r(8),
                d_logits_visual: Some(r(3)),
                d_logits_audio: Some(r(3)),
            })
            .collect();
        let only = |visual: bool| -> Vec<Upstream> {
            both.iter()
                .map(|u| Upstream {
                    d_visual: if visual { u.d_visual.clone() } else { vec![0.0; 8] },
                    d_audio: if visual { vec![0.0; 8] } else { u.d_audio.clone() },
                    d_logits_visual: if visual { u.d_logits_visual.clone() } else { None },
                    d_logits_audio: if visual { None } else { u.d_logits_audio.clone() },
                })
                .collect()
        };
        let g_both = backward(&model, &tapes, &both, 0.0, false).unwrap();
        let g_v = backward(&model, &tapes, &only(true), 0.0, false).unwrap();
        let g_a = backward(&model, &tapes, &only(false), 0.0, false).unwrap();
        let w = g_both.block(BlockId::Classifier).unwrap();
        let wv = g_v.block(BlockId::Classifier).unwrap();
        let wa = g_a.block(BlockId::Classifier).unwrap();
        for i in 0..w.len() {
            assert!((w[i] - (wv[i] + wa[i])).abs() < 1e-12);
        }
        // Branch blocks only receive gradient from their own modality.
        assert!(g_v
            .block(BlockId::Weights(Modality::Audio, 0))
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        assert!(g_a
            .block(BlockId::Weights(Modality::Visual, 0))
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_stale_tapes() {
        let model = init_model(&tiny_config(), &mut Rng::new(1)).unwrap();
        let other = init_model(
            &TrainingConfig {
                visual_widths: vec![2],
                ..tiny_config()
            },
            &mut Rng::new(1),
        )
        .unwrap();
        let tapes = pair_tapes(&other, &mut Rng::new(2), 1);
        let up = vec![Upstream {
            d_visual: vec![0.0; 8],
            d_audio: vec![0.0; 8],
            ..Default::default()
        }];
        assert!(matches!(
            backward(&model, &tapes, &up, 0.0, false),
            Err(Error::Contract(_))
        ));
        let tapes = pair_tapes(&model, &mut Rng::new(2), 1);
        let short = vec![Upstream {
            d_visual: vec![0.0; 7],
            d_audio: vec![0.0; 8],
            ..Default::default()
        }];
        assert!(backward(&model, &tapes, &short, 0.0, false).is_err());
    }

    #[test]
    fn branch_separation() {
        let model = init_model(&tiny_config(), &mut Rng::new(31)).unwrap();
        let v = [0.3, -1.0, 2.0, 0.1, 0.7];
        let a = [1.0, 0.5, -0.4];
        let mut perturbed = model.clone();
        for l in perturbed.audio.layers_mut() {
            l.weights.as_mut_slice().iter_mut().for_each(|w| *w += 0.1);
        }
        assert_eq!(model.visual.embed(&v).unwrap(), perturbed.visual.embed(&v).unwrap());
        assert_ne!(model.audio.embed(&a).unwrap(), perturbed.audio.embed(&a).unwrap());

        let mut perturbed = model.clone();
        perturbed.visual.layers_mut()[0].bias[0] += 1.0;
        assert_eq!(model.audio.embed(&a).unwrap(), perturbed.audio.embed(&a).unwrap());
    }

    #[test]
    fn classifier_is_shared_state() {
        let mut model = init_model(&tiny_config(), &mut Rng::new(41)).unwrap();
        let phi_v = model.visual.embed(&[1.0, 0.0, 0.5, -0.3, 0.2]).unwrap();
        let phi_a = model.audio.embed(&[0.2, 0.1, -0.9]).unwrap();
        let before = (
            model.forward_classifier(&phi_v).unwrap(),
            model.forward_classifier(&phi_a).unwrap(),
        );
        model.classifier.as_mut_slice().iter_mut().for_each(|w| *w *= 1.5);
        assert_ne!(model.forward_classifier(&phi_v).unwrap(), before.0);
        assert_ne!(model.forward_classifier(&phi_a).unwrap(), before.1);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = init_model(&tiny_config(), &mut Rng::new(51)).unwrap();
        let x = [0.25, -0.5, 1.5, 0.0, 3.0];
        let a = forward_branch(&model.visual, &x).unwrap().0;
        let b = forward_branch(&model.visual, &x).unwrap().0;
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
