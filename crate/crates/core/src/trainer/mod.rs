//! Optimization loop: λ schedule, batch objective, optimizer updates and a
//! finite-difference gradient checker.

mod config;
mod gradcheck;
mod optimizer;

use std::fmt::Write as _;

use rayon::prelude::*;

pub use config::{parse_widths, OptimizerKind, TrainingConfig};
pub use gradcheck::{check_gradients, GradCheckReport, GradientChecker};
pub use optimizer::OptimizerState;

use crate::dataio::Corpus;
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_from_logits, cosine_embedding_loss, ClassTargets, LossBreakdown, PairLabel, PairLossInput,
};
use crate::network::{
    backward, forward_branch, init_model, l2_penalty, GradientSet, JointModel, PairTape, Upstream, INIT_STREAM,
};
use crate::numerics::Rng;
use crate::sampling::{epoch_iterator, BatchSpec, PairSample};

/// Classification weight at `step`: zero before the activation step,
/// `lambda_value` from then on.
pub fn lambda_at(step: u64, config: &TrainingConfig) -> f64 {
    if step < config.lambda_activation_step {
        0.0
    } else {
        config.lambda_value
    }
}

/// One pair as the objective sees it: features in f64, the pair label, and
/// the class targets when the classification term applies.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub label: PairLabel,
    pub targets: Option<ClassTargets>,
}

impl TrainingPair {
    pub fn from_sample(sample: &PairSample<'_>, config: &TrainingConfig) -> Result<Self> {
        let applies = sample.label == PairLabel::Positive || config.class_loss_on_negatives;
        let targets = if applies {
            Some(ClassTargets::from_labels(
                &sample.visual.labels,
                &sample.audio.labels,
                config.num_classes,
            )?)
        } else {
            None
        };
        Ok(TrainingPair {
            visual: sample.visual.visual_f64(),
            audio: sample.audio.audio_f64(),
            label: sample.label,
            targets,
        })
    }
}

/// Value (and optionally gradient) of the mean batch objective.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub grads: Option<GradientSet>,
    /// Pairs where an embedding had zero norm.
    pub degenerate_pairs: usize,
}

/// Mean over pairs of `l_cos + λ·l_class`, plus the L2 penalty.
pub fn evaluate_batch(
    model: &JointModel,
    pairs: &[TrainingPair],
    config: &TrainingConfig,
    lambda: f64,
    with_grads: bool,
) -> Result<BatchEvaluation> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    struct PairOut {
        l_cos: f64,
        l_class: f64,
        degenerate: bool,
        tape: PairTape,
        upstream: Upstream,
    }
    let outs: Vec<PairOut> = pairs
        .par_iter()
        .map(|pair| -> Result<PairOut> {
            let (phi_i, tape_v) = forward_branch(&model.visual, &pair.visual)?;
            let (phi_a, tape_a) = forward_branch(&model.audio, &pair.audio)?;
            let cos = cosine_embedding_loss(&PairLossInput {
                phi_a: &phi_a,
                phi_i: &phi_i,
                y: pair.label,
                margin_alpha: config.margin_alpha,
            })?;
            let mut upstream = Upstream {
                d_visual: cos.d_phi_i.iter().map(|g| g * scale).collect(),
                d_audio: cos.d_phi_a.iter().map(|g| g * scale).collect(),
                ..Upstream::default()
            };
            let mut l_class = 0.0;
            if let Some(targets) = &pair.targets {
                let class = classification_loss_from_logits(
                    &model.class_logits(&phi_i)?,
                    &model.class_logits(&phi_a)?,
                    targets,
                )?;
                l_class = class.value;
                if lambda != 0.0 {
                    let s = lambda * scale;
                    upstream.d_logits_visual = Some(class.d_logits_i.iter().map(|g| g * s).collect());
                    upstream.d_logits_audio = Some(class.d_logits_a.iter().map(|g| g * s).collect());
                }
            }
            Ok(PairOut {
                l_cos: cos.value,
                l_class,
                degenerate: cos.degenerate,
                tape: PairTape {
                    visual: tape_v,
                    audio: tape_a,
                },
                upstream,
            })
        })
        .collect::<Result<_>>()?;

    let l_cos = outs.iter().map(|o| o.l_cos).sum::<f64>() * scale;
    let l_class = outs.iter().map(|o| o.l_class).sum::<f64>() * scale;
    let degenerate_pairs = outs.iter().filter(|o| o.degenerate).count();
    let l2 = l2_penalty(model, config.l2_coefficient, config.l2_on_classifier);
    let loss = LossBreakdown::new(l_cos, l_class, l2, lambda);

    let grads = if with_grads {
        let (tapes, ups): (Vec<_>, Vec<_>) = outs.into_iter().map(|o| (o.tape, o.upstream)).unzip();
        Some(backward(
            model,
            &tapes,
            &ups,
            config.l2_coefficient,
            config.l2_on_classifier,
        )?)
    } else {
        None
    };
    Ok(BatchEvaluation {
        loss,
        grads,
        degenerate_pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: JointModel,
    pub optimizer: OptimizerState,
    /// Batches processed so far.
    pub global_step: u64,
    pub last_loss: Option<LossBreakdown>,
}

impl TrainState {
    pub fn new(config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let model = init_model(config, &mut Rng::stream(config.seed, INIT_STREAM))?;
        let optimizer = OptimizerState::new(config.optimizer, &model);
        Ok(TrainState {
            model,
            optimizer,
            global_step: 0,
            last_loss: None,
        })
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub degenerate_pairs: usize,
}

impl LogRow {
    pub const HEADER: &'static str = "step,lambda,l_cos,l_class,l2,total";

    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.step, l.lambda, l.l_cos, l.l_class, l.l2, l.total
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_delimited(&self) -> String {
        let mut out = String::from(LogRow::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }
}

/// Applies one optimizer update from the mean gradient of `batch`.
pub fn train_step(state: &mut TrainState, batch: &[PairSample<'_>], config: &TrainingConfig) -> Result<LogRow> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let pairs = batch
        .iter()
        .map(|s| TrainingPair::from_sample(s, config))
        .collect::<Result<Vec<_>>>()?;
    train_step_pairs(state, &pairs, config)
}

pub fn train_step_pairs(state: &mut TrainState, pairs: &[TrainingPair], config: &TrainingConfig) -> Result<LogRow> {
    let step = state.global_step;
    let lambda = lambda_at(step, config);
    let eval = evaluate_batch(&state.model, pairs, config, lambda, true)?;
    let grads = eval.grads.expect("gradients requested");
    let loss = eval.loss;
    let non_finite = |block: String| Error::NonFinite {
        step,
        block,
        l_cos: loss.l_cos,
        l_class: loss.l_class,
        l2: loss.l2,
    };
    if !loss.is_finite() {
        return Err(non_finite("loss".into()));
    }
    if let Some(block) = grads.first_non_finite() {
        return Err(non_finite(block.to_string()));
    }
    if eval.degenerate_pairs > 0 {
        log::warn!(
            "step {step}: {} pairs with a zero-norm embedding",
            eval.degenerate_pairs
        );
    }
    state.optimizer.step(&mut state.model, &grads, config.learning_rate);
    state.global_step += 1;
    state.last_loss = Some(loss);
    Ok(LogRow {
        step,
        loss,
        degenerate_pairs: eval.degenerate_pairs,
    })
}

/// Drives training over a corpus. Batches of epoch `e` are a pure function of
/// `(corpus, seed, e)`, so a run can stop after any step and resume from a
/// saved [`TrainState`] on exactly the same trajectory.
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    config: TrainingConfig,
    state: TrainState,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, config: TrainingConfig) -> Result<Self> {
        let state = TrainState::new(&config)?;
        Self::resume(corpus, config, state)
    }

    pub fn resume(corpus: &'c Corpus, config: TrainingConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        check_corpus(corpus, &config)?;
        if !state.optimizer.is_congruent(&state.model) {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        let model_matches = state.model.visual.input_dim() == config.visual_input_dim
            && state.model.audio.input_dim() == config.audio_input_dim
            && state.model.num_classes() == config.num_classes
            && state.model.embedding_dim() == config.embedding_dim;
        if !model_matches {
            return Err(Error::Contract("model shape does not match the configuration".into()));
        }
        Ok(Trainer { corpus, config, state })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.corpus.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    /// Trains until `stop_at` (or the end of the last epoch), calling
    /// `on_step` after every update.
    pub fn run(&mut self, stop_at: Option<u64>, mut on_step: impl FnMut(&LogRow)) -> Result<TrainingLog> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        let spe = self.steps_per_epoch();
        let spec = BatchSpec {
            batch_size: self.config.batch_size,
            p_negative: self.config.p_negative,
            max_attempts: self.config.max_rejection_attempts,
        };
        let records = self.corpus.records();
        let mut log = TrainingLog::default();
        while self.state.global_step < end {
            let epoch = self.state.global_step / spe;
            let skip = (self.state.global_step % spe) as usize;
            let mut batches = epoch_iterator(records, &spec, self.config.seed, epoch)?;
            for _ in 0..skip {
                batches.next().transpose()?;
            }
            for batch in batches {
                if self.state.global_step >= end {
                    break;
                }
                let row = train_step(&mut self.state, &batch?, &self.config)?;
                on_step(&row);
                log.rows.push(row);
            }
        }
        Ok(log)
    }
}

fn check_corpus(corpus: &Corpus, config: &TrainingConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    if corpus.visual_dim() != config.visual_input_dim {
        return Err(Error::DimensionMismatch {
            context: "corpus visual dim vs config",
            expected: config.visual_input_dim,
            actual: corpus.visual_dim(),
        });
    }
    if corpus.audio_dim() != config.audio_input_dim {
        return Err(Error::DimensionMismatch {
            context: "corpus audio dim vs config",
            expected: config.audio_input_dim,
            actual: corpus.audio_dim(),
        });
    }
    if corpus.num_classes() > config.num_classes {
        return Err(Error::Config(format!(
            "corpus has {} classes but the model only {}",
            corpus.num_classes(),
            config.num_classes
        )));
    }
    if corpus.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds corpus size {}",
            config.batch_size,
            corpus.len()
        )));
    }
    Ok(())
}

/// Trains from scratch and returns the final model with its per-step log.
pub fn fit(corpus: &Corpus, config: &TrainingConfig) -> Result<(JointModel, TrainingLog)> {
    let mut trainer = Trainer::new(corpus, config.clone())?;
    let log = trainer.run(None, |_| {})?;
    Ok((trainer.into_state().model, log))
}
