//! Central-difference check of the analytic gradients on tiny random models.

use super::{evaluate_batch, TrainingConfig, TrainingPair};
use crate::losses::{label_distribution, ClassTargets, PairLabel};
use crate::network::{forward_branch, init_model, GradientSet, JointModel};
use crate::numerics::{cosine_similarity, Rng};

/// Relative error below which an analytic partial counts as correct.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Absolute error treated as zero (keeps tiny partials from blowing up the
/// relative error).
pub const ABSOLUTE_FLOOR: f64 = 1e-7;
const STEP: f64 = 1e-5;
/// Inputs closer than this to a ReLU or hinge kink are redrawn.
const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
    /// Block and index of the worst partial, e.g. `audio.0.weights[3]`.
    pub worst: String,
    pub passed: bool,
}

/// Builds `trials` random models with every dimension in `2..=8`, batches of
/// one to four pairs, and compares each analytic partial derivative of the
/// batch objective against a central difference.
#[derive(Debug, Clone)]
pub struct GradientChecker {
    pub lambda: f64,
    pub margin_alpha: f64,
    pub l2_coefficient: f64,
    pub l2_on_classifier: bool,
    pub class_loss_on_negatives: bool,
    pub trials: usize,
    pub seed: u64,
}

impl GradientChecker {
    pub fn from_config(config: &TrainingConfig, lambda: f64, trials: usize) -> Self {
        GradientChecker {
            lambda,
            margin_alpha: config.margin_alpha,
            l2_coefficient: config.l2_coefficient,
            l2_on_classifier: config.l2_on_classifier,
            class_loss_on_negatives: config.class_loss_on_negatives,
            trials,
            seed: config.seed,
        }
    }

    pub fn run(&self) -> GradCheckReport {
        self.run_with_tamper(|_| {})
    }

    /// Like [`run`](Self::run) but lets the caller modify the analytic
    /// gradients before comparison.
    pub fn run_with_tamper(&self, tamper: impl Fn(&mut GradientSet)) -> GradCheckReport {
        let mut rng = Rng::stream(self.seed, 0x6752_6164);
        let mut report = GradCheckReport {
            trials: self.trials,
            parameters_checked: 0,
            max_relative_error: 0.0,
            worst: String::new(),
            passed: true,
        };
        for _ in 0..self.trials {
            let (model, pairs, config) = self.draw_trial(&mut rng);
            let eval = evaluate_batch(&model, &pairs, &config, self.lambda, true).expect("trial shapes are consistent");
            let mut grads = eval.grads.expect("gradients requested");
            tamper(&mut grads);

            let objective = |m: &JointModel| {
                evaluate_batch(m, &pairs, &config, self.lambda, false)
                    .expect("trial shapes are consistent")
                    .loss
                    .total
            };
            let mut probe = model.clone();
            for (bi, (id, analytic)) in grads.blocks().enumerate() {
                for (j, &a) in analytic.iter().enumerate() {
                    let original = probe.param_blocks()[bi].1[j];
                    probe.param_blocks_mut()[bi].1[j] = original + STEP;
                    let up = objective(&probe);
                    probe.param_blocks_mut()[bi].1[j] = original - STEP;
                    let down = objective(&probe);
                    probe.param_blocks_mut()[bi].1[j] = original;
                    let numeric = (up - down) / (2.0 * STEP);

                    let err = relative_error(a, numeric);
                    report.parameters_checked += 1;
                    if err.is_nan() || err > report.max_relative_error {
                        report.max_relative_error = err;
                        report.worst = format!("{id}[{j}]");
                    }
                }
            }
        }
        report.passed = report.max_relative_error < GRADIENT_TOLERANCE;
        report
    }

    fn draw_trial(&self, rng: &mut Rng) -> (JointModel, Vec<TrainingPair>, TrainingConfig) {
        loop {
            let mut dim = || 2 + rng.below(7);
            let config = TrainingConfig {
                visual_input_dim: dim(),
                audio_input_dim: dim(),
                visual_widths: vec![dim(), dim()],
                audio_widths: vec![dim()],
                embedding_dim: dim(),
                num_classes: dim(),
                margin_alpha: self.margin_alpha,
                l2_coefficient: self.l2_coefficient,
                l2_on_classifier: self.l2_on_classifier,
                class_loss_on_negatives: self.class_loss_on_negatives,
                ..TrainingConfig::default()
            };
            let mut model = init_model(&config, rng).expect("valid dims");
            for layer in model.visual.layers_mut().iter_mut().chain(model.audio.layers_mut()) {
                layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
            }
            let batch = 1 + rng.below(4);
            let pairs: Vec<TrainingPair> = (0..batch).map(|_| self.draw_pair(&config, rng)).collect();
            if self.clear_of_kinks(&model, &pairs) {
                return (model, pairs, config);
            }
        }
    }

    fn draw_pair(&self, config: &TrainingConfig, rng: &mut Rng) -> TrainingPair {
        let k = config.num_classes;
        let label = if rng.bernoulli(0.5) {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        };
        let first = rng.below(k) as u32;
        let second = match label {
            PairLabel::Positive => first,
            PairLabel::Negative => (first + 1 + rng.below(k - 1) as u32) % k as u32,
        };
        let targets = (label == PairLabel::Positive || self.class_loss_on_negatives).then(|| {
            ClassTargets::new(
                label_distribution(&[first], k).unwrap(),
                label_distribution(&[second], k).unwrap(),
            )
            .unwrap()
        });
        TrainingPair {
            visual: (0..config.visual_input_dim).map(|_| rng.normal()).collect(),
            audio: (0..config.audio_input_dim).map(|_| rng.normal()).collect(),
            label,
            targets,
        }
    }

    fn clear_of_kinks(&self, model: &JointModel, pairs: &[TrainingPair]) -> bool {
        pairs.iter().all(|p| {
            let (phi_i, tape_v) = forward_branch(&model.visual, &p.visual).unwrap();
            let (phi_a, tape_a) = forward_branch(&model.audio, &p.audio).unwrap();
            let relu_clear = [(&model.visual, &p.visual), (&model.audio, &p.audio)]
                .iter()
                .all(|(branch, x)| pre_activations_clear(branch, x));
            let _ = (tape_v, tape_a);
            let hinge_clear = p.label == PairLabel::Positive
                || (cosine_similarity(&phi_a, &phi_i).unwrap().value - self.margin_alpha).abs() > KINK_CLEARANCE;
            relu_clear && hinge_clear && phi_i.norm() > KINK_CLEARANCE && phi_a.norm() > KINK_CLEARANCE
        })
    }
}

fn pre_activations_clear(branch: &crate::network::BranchNetwork, x: &[f64]) -> bool {
    let mut h = x.to_vec();
    for layer in branch.layers() {
        let mut z = crate::numerics::matvec(&layer.weights, &h).unwrap().into_inner();
        for (zi, b) in z.iter_mut().zip(layer.bias.iter()) {
            *zi += b;
        }
        if layer.activation == crate::network::Activation::Relu {
            if z.iter().any(|v| v.abs() < KINK_CLEARANCE) {
                return false;
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    true
}

/// `|a − n| / max(|a|, |n|)`, with differences under [`ABSOLUTE_FLOOR`]
/// scaled so they always pass.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic
        .abs()
        .max(numeric.abs())
        .max(ABSOLUTE_FLOOR / GRADIENT_TOLERANCE);
    (analytic - numeric).abs() / scale
}

/// Gradient check with the loss settings of `config` and its λ value.
pub fn check_gradients(config: &TrainingConfig, trials: usize) -> GradCheckReport {
    GradientChecker::from_config(config, config.lambda_value, trials.max(1)).run()
}
