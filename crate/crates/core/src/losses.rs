//! Margin cosine loss, two-modality cross-entropy and the λ-weighted total.

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, dot, log_sum_exp, norm, softmax};

/// `y` of a training pair: +1 when both sides come from the same video,
/// −1 for a mismatched pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Positive,
    Negative,
}

impl PairLabel {
    pub fn y(self) -> i8 {
        match self {
            PairLabel::Positive => 1,
            PairLabel::Negative => -1,
        }
    }

    pub fn from_y(y: i8) -> Result<Self> {
        match y {
            1 => Ok(PairLabel::Positive),
            -1 => Ok(PairLabel::Negative),
            other => Err(Error::Contract(format!("pair label must be +1 or -1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PairLossInput<'a> {
    pub phi_a: &'a [f64],
    pub phi_i: &'a [f64],
    pub y: PairLabel,
    pub margin_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineLoss {
    pub value: f64,
    pub d_phi_a: Vec<f64>,
    pub d_phi_i: Vec<f64>,
    /// Either embedding had zero norm; cosine was taken as 0 and the
    /// gradient is zero.
    pub degenerate: bool,
}

/// `1 − cos` for positives and `max(0, cos − α)` for negatives, with exact
/// gradients. Exactly at `cos == α` the negative branch returns gradient 0.
pub fn cosine_embedding_loss(input: &PairLossInput<'_>) -> Result<CosineLoss> {
    let PairLossInput {
        phi_a,
        phi_i,
        y,
        margin_alpha,
    } = *input;
    if !(0.0..1.0).contains(&margin_alpha) {
        return Err(Error::Contract(format!("margin {margin_alpha} outside [0, 1)")));
    }
    let cos = cosine_similarity(phi_a, phi_i)?;
    let d = phi_a.len();
    let (value, scale) = match y {
        PairLabel::Positive => (1.0 - cos.value, -1.0),
        PairLabel::Negative if cos.value > margin_alpha => (cos.value - margin_alpha, 1.0),
        PairLabel::Negative => (0.0, 0.0),
    };
    if cos.degenerate || scale == 0.0 {
        return Ok(CosineLoss {
            value,
            d_phi_a: vec![0.0; d],
            d_phi_i: vec![0.0; d],
            degenerate: cos.degenerate,
        });
    }
    // d cos / d a = b / (|a||b|) − cos · a / |a|²
    let (na, ni) = (norm(phi_a), norm(phi_i));
    // Unclamped cosine keeps the gradient consistent with the loss surface.
    let c = dot(phi_a, phi_i) / (na * ni);
    let grad = |x: &[f64], other: &[f64], nx: f64, no: f64| -> Vec<f64> {
        x.iter()
            .zip(other)
            .map(|(xi, oi)| scale * (oi / (nx * no) - c * xi / (nx * nx)))
            .collect()
    };
    Ok(CosineLoss {
        value,
        d_phi_a: grad(phi_a, phi_i, na, ni),
        d_phi_i: grad(phi_i, phi_a, ni, na),
        degenerate: false,
    })
}

/// Target class distributions for the image side (`c_i`) and the audio side
/// (`c_a`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    pub c_i: Vec<f64>,
    pub c_a: Vec<f64>,
}

impl ClassTargets {
    pub fn new(c_i: Vec<f64>, c_a: Vec<f64>) -> Result<Self> {
        check_distribution(&c_i, "c_i")?;
        check_distribution(&c_a, "c_a")?;
        if c_i.len() != c_a.len() {
            return Err(Error::DimensionMismatch {
                context: "class targets",
                expected: c_i.len(),
                actual: c_a.len(),
            });
        }
        Ok(ClassTargets { c_i, c_a })
    }

    /// Normalized multi-hot targets built from label sets.
    pub fn from_labels(visual: &[u32], audio: &[u32], num_classes: usize) -> Result<Self> {
        Self::new(
            label_distribution(visual, num_classes)?,
            label_distribution(audio, num_classes)?,
        )
    }
}

/// Multi-hot vector over `num_classes` normalized to sum to one.
pub fn label_distribution(labels: &[u32], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Contract("empty label set".into()));
    }
    let mut c = vec![0.0; num_classes];
    for &l in labels {
        let slot = c
            .get_mut(l as usize)
            .ok_or_else(|| Error::Contract(format!("label {l} out of range for {num_classes} classes")))?;
        *slot = 1.0;
    }
    let total: f64 = c.iter().sum();
    c.iter_mut().for_each(|v| *v /= total);
    Ok(c)
}

fn check_distribution(c: &[f64], name: &str) -> Result<()> {
    let sum: f64 = c.iter().sum();
    if c.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("{name} is not a probability distribution")));
    }
    Ok(())
}

/// `−Σ_k c_k log p_k`; terms with `c_k == 0` contribute nothing.
pub fn cross_entropy(p: &[f64], c: &[f64]) -> f64 {
    -p.iter()
        .zip(c)
        .filter(|(_, &ck)| ck != 0.0)
        .map(|(pk, ck)| ck * pk.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub value: f64,
    pub d_logits_i: Vec<f64>,
    pub d_logits_a: Vec<f64>,
}

/// Cross-entropy of both modalities from already-normalized probabilities.
/// Gradients are with respect to the logits that produced `p_i` / `p_a`.
pub fn classification_loss(p_i: &[f64], p_a: &[f64], targets: &ClassTargets) -> Result<ClassificationLoss> {
    check_lengths(p_i, p_a, targets)?;
    let diff = |p: &[f64], c: &[f64]| p.iter().zip(c).map(|(p, c)| p - c).collect();
    Ok(ClassificationLoss {
        value: cross_entropy(p_i, &targets.c_i) + cross_entropy(p_a, &targets.c_a),
        d_logits_i: diff(p_i, &targets.c_i),
        d_logits_a: diff(p_a, &targets.c_a),
    })
}

/// Same loss as [`classification_loss`] evaluated directly from logits as
/// `Σ_k c_k (logsumexp(z) − z_k)`, which stays finite for saturated
/// softmax outputs.
pub fn classification_loss_from_logits(
    logits_i: &[f64],
    logits_a: &[f64],
    targets: &ClassTargets,
) -> Result<ClassificationLoss> {
    check_lengths(logits_i, logits_a, targets)?;
    let side = |z: &[f64], c: &[f64]| -> (f64, Vec<f64>) {
        let lse = log_sum_exp(z);
        let value = z
            .iter()
            .zip(c)
            .filter(|(_, &ck)| ck != 0.0)
            .map(|(zk, ck)| ck * (lse - zk))
            .sum();
        let grad = softmax(z).iter().zip(c).map(|(p, c)| p - c).collect();
        (value, grad)
    };
    let (vi, gi) = side(logits_i, &targets.c_i);
    let (va, ga) = side(logits_a, &targets.c_a);
    Ok(ClassificationLoss {
        value: vi + va,
        d_logits_i: gi,
        d_logits_a: ga,
    })
}

fn check_lengths(i: &[f64], a: &[f64], targets: &ClassTargets) -> Result<()> {
    let k = targets.c_i.len();
    for (len, what) in [(i.len(), "image"), (a.len(), "audio"), (targets.c_a.len(), "c_a")] {
        if len != k {
            return Err(Error::Contract(format!(
                "{what} vector has length {len}, expected {k} classes"
            )));
        }
    }
    Ok(())
}

/// Components of the training objective `l_cos + λ·l_class + l2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_cos: f64,
    pub l_class: f64,
    pub l2: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cos: f64, l_class: f64, l2: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_cos,
            l_class,
            l2,
            lambda,
            total: l_cos + lambda * l_class + l2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cos, self.l_class, self.l2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Probabilities and targets for the classification term of one pair.
#[derive(Debug, Clone, Copy)]
pub struct ClassificationInput<'a> {
    pub p_i: &'a [f64],
    pub p_a: &'a [f64],
    pub targets: &'a ClassTargets,
}

/// Loss of a single pair. `class` is `None` when the classification term does
/// not apply (negative pairs by default), in which case `l_class` is 0.
pub fn combined_loss(
    pair: &PairLossInput<'_>,
    class: Option<ClassificationInput<'_>>,
    lambda: f64,
    l2: f64,
) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let l_cos = cosine_embedding_loss(pair)?.value;
    let l_class = match class {
        Some(c) => classification_loss(c.p_i, c.p_a, c.targets)?.value,
        None => 0.0,
    };
    Ok(LossBreakdown::new(l_cos, l_class, l2, lambda))
}
