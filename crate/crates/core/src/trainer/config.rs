use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

/// Every knob of a training run. `Default` carries the reference settings
/// (batch 1024, margin 0.2, 60% negatives, λ = 0.02 switched on at step
/// 10 000, a single epoch, 2000-2000-700-700 / 450-450-200-200 branches and
/// 250-dimensional embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub margin_alpha: f64,
    pub p_negative: f64,
    pub batch_size: usize,
    pub lambda_value: f64,
    pub lambda_activation_step: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub l2_coefficient: f64,
    /// Include the shared classifier matrix in the L2 penalty.
    pub l2_on_classifier: bool,
    /// Evaluate the classification term on negative pairs too (each side
    /// against its own record's labels).
    pub class_loss_on_negatives: bool,
    pub visual_widths: Vec<usize>,
    pub audio_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub visual_input_dim: usize,
    pub audio_input_dim: usize,
    pub max_rejection_attempts: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            margin_alpha: 0.2,
            p_negative: 0.6,
            batch_size: 1024,
            lambda_value: 0.02,
            lambda_activation_step: 10_000,
            epochs: 1,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::ADAM_DEFAULT,
            l2_coefficient: 1e-5,
            l2_on_classifier: false,
            class_loss_on_negatives: false,
            visual_widths: vec![2000, 2000, 700, 700],
            audio_widths: vec![450, 450, 200, 200],
            embedding_dim: 250,
            num_classes: 32,
            visual_input_dim: 1024,
            audio_input_dim: 128,
            max_rejection_attempts: 1000,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.margin_alpha) {
            return bad(format!("margin_alpha {} outside [0, 1)", self.margin_alpha));
        }
        if !(0.0..=1.0).contains(&self.p_negative) {
            return bad(format!("p_negative {} outside [0, 1]", self.p_negative));
        }
        for (name, v) in [
            ("lambda_value", self.lambda_value),
            ("learning_rate", self.learning_rate),
            ("l2_coefficient", self.l2_coefficient),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("embedding_dim", self.embedding_dim),
            ("num_classes", self.num_classes),
            ("visual_input_dim", self.visual_input_dim),
            ("audio_input_dim", self.audio_input_dim),
            ("max_rejection_attempts", self.max_rejection_attempts),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.visual_widths.contains(&0) || self.audio_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return bad("adam betas must lie in [0, 1) and epsilon be > 0".into());
            }
        }
        Ok(())
    }

    /// Serializes to the `key = value` format read by [`TrainingConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let widths = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("margin_alpha", self.margin_alpha.to_string());
        put("p_negative", self.p_negative.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lambda_value", self.lambda_value.to_string());
        put("lambda_activation_step", self.lambda_activation_step.to_string());
        put("epochs", self.epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("optimizer", self.optimizer.name().to_string());
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            put("adam_beta1", beta1.to_string());
            put("adam_beta2", beta2.to_string());
            put("adam_epsilon", epsilon.to_string());
        }
        put("l2_coefficient", self.l2_coefficient.to_string());
        put("l2_on_classifier", self.l2_on_classifier.to_string());
        put("class_loss_on_negatives", self.class_loss_on_negatives.to_string());
        put("visual_widths", widths(&self.visual_widths));
        put("audio_widths", widths(&self.audio_widths));
        put("embedding_dim", self.embedding_dim.to_string());
        put("num_classes", self.num_classes.to_string());
        put("visual_input_dim", self.visual_input_dim.to_string());
        put("audio_input_dim", self.audio_input_dim.to_string());
        put("max_rejection_attempts", self.max_rejection_attempts.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Parses `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are an error.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut adam = match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, epsilon } => (beta1, beta2, epsilon),
            OptimizerKind::Sgd => (0.9, 0.999, 1e-8),
        };
        let mut use_adam = matches!(self.optimizer, OptimizerKind::Adam { .. });
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let err = |e: String| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("{e} ({v:?})"))
            }
            match key {
                "margin_alpha" => self.margin_alpha = num(value).map_err(err)?,
                "p_negative" => self.p_negative = num(value).map_err(err)?,
                "batch_size" => self.batch_size = num(value).map_err(err)?,
                "lambda_value" => self.lambda_value = num(value).map_err(err)?,
                "lambda_activation_step" => self.lambda_activation_step = num(value).map_err(err)?,
                "epochs" => self.epochs = num(value).map_err(err)?,
                "learning_rate" => self.learning_rate = num(value).map_err(err)?,
                "optimizer" => match value {
                    "adam" => use_adam = true,
                    "sgd" => use_adam = false,
                    other => return Err(err(format!("unknown optimizer {other:?}"))),
                },
                "adam_beta1" => adam.0 = num(value).map_err(err)?,
                "adam_beta2" => adam.1 = num(value).map_err(err)?,
                "adam_epsilon" => adam.2 = num(value).map_err(err)?,
                "l2_coefficient" => self.l2_coefficient = num(value).map_err(err)?,
                "l2_on_classifier" => self.l2_on_classifier = num(value).map_err(err)?,
                "class_loss_on_negatives" => self.class_loss_on_negatives = num(value).map_err(err)?,
                "visual_widths" => self.visual_widths = parse_widths(value).map_err(err)?,
                "audio_widths" => self.audio_widths = parse_widths(value).map_err(err)?,
                "embedding_dim" => self.embedding_dim = num(value).map_err(err)?,
                "num_classes" => self.num_classes = num(value).map_err(err)?,
                "visual_input_dim" => self.visual_input_dim = num(value).map_err(err)?,
                "audio_input_dim" => self.audio_input_dim = num(value).map_err(err)?,
                "max_rejection_attempts" => self.max_rejection_attempts = num(value).map_err(err)?,
                "seed" => self.seed = num(value).map_err(err)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        self.optimizer = if use_adam {
            OptimizerKind::Adam {
                beta1: adam.0,
                beta2: adam.1,
                epsilon: adam.2,
            }
        } else {
            OptimizerKind::Sgd
        };
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = TrainingConfig::default();
        config.apply_kv(text)?;
        Ok(config)
    }
}

/// Parses a comma-separated width list; an empty string means no hidden layers.
pub fn parse_widths(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("{e} ({w:?})")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_settings() {
        let c = TrainingConfig::default();
        assert_eq!(c.batch_size, 1024);
        assert_eq!(c.margin_alpha, 0.2);
        assert_eq!(c.p_negative, 0.6);
        assert_eq!(c.lambda_value, 0.02);
        assert_eq!(c.lambda_activation_step, 10_000);
        assert_eq!(c.epochs, 1);
        assert_eq!(c.visual_widths, [2000, 2000, 700, 700]);
        assert_eq!(c.audio_widths, [450, 450, 200, 200]);
        assert_eq!(c.embedding_dim, 250);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let c = TrainingConfig {
            margin_alpha: 0.123456789012345,
            optimizer: OptimizerKind::Sgd,
            audio_widths: vec![],
            seed: u64::MAX,
            learning_rate: 3.3e-7,
            ..TrainingConfig::default()
        };
        assert_eq!(TrainingConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn kv_rejects_unknown_keys_and_junk() {
        assert!(TrainingConfig::from_kv("bogus = 1").is_err());
        assert!(TrainingConfig::from_kv("batch_size 12").is_err());
        assert!(TrainingConfig::from_kv("batch_size = -1").is_err());
        let c = TrainingConfig::from_kv("# comment\n\nbatch_size = 12\n").unwrap();
        assert_eq!(c.batch_size, 12);
    }

    #[test]
    fn validate_catches_bad_values() {
        let mut c = TrainingConfig {
            margin_alpha: 1.0,
            ..TrainingConfig::default()
        };
        assert!(c.validate().is_err());
        c.margin_alpha = 0.2;
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 1;
        c.visual_widths = vec![4, 0];
        assert!(c.validate().is_err());
        c.visual_widths = vec![4];
        c.learning_rate = f64::NAN;
        assert!(c.validate().is_err());
    }
}
