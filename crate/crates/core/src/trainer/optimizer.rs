use super::config::OptimizerKind;
use crate::network::{GradientSet, JointModel};

/// Moment estimates for Adam (empty for SGD), one buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Updates applied so far (Adam bias correction uses `t + 1`).
    pub t: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &JointModel) -> Self {
        let zeros = || -> Vec<Vec<f64>> {
            match kind {
                OptimizerKind::Adam { .. } => model.param_blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect(),
                OptimizerKind::Sgd => Vec::new(),
            }
        };
        OptimizerState {
            kind,
            t: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn is_congruent(&self, model: &JointModel) -> bool {
        match self.kind {
            OptimizerKind::Sgd => self.first_moment.is_empty() && self.second_moment.is_empty(),
            OptimizerKind::Adam { .. } => {
                let blocks = model.param_blocks();
                [&self.first_moment, &self.second_moment]
                    .iter()
                    .all(|m| m.len() == blocks.len() && m.iter().zip(&blocks).all(|(a, (_, b))| a.len() == b.len()))
            }
        }
    }

    /// Applies one update. With `learning_rate == 0` the moments advance but
    /// the parameters are left untouched.
    pub fn step(&mut self, model: &mut JointModel, grads: &GradientSet, learning_rate: f64) {
        self.t += 1;
        let apply = learning_rate != 0.0;
        match self.kind {
            OptimizerKind::Sgd => {
                if apply {
                    for ((_, p), (_, g)) in model.param_blocks_mut().into_iter().zip(grads.blocks()) {
                        for (pi, gi) in p.iter_mut().zip(g) {
                            *pi -= learning_rate * gi;
                        }
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let blocks = model.param_blocks_mut().into_iter().zip(grads.blocks());
                for (((_, p), (_, g)), (m, v)) in
                    blocks.zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        if apply {
                            let m_hat = m[i] / c1;
                            let v_hat = v[i] / c2;
                            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                        }
                    }
                }
            }
        }
    }
}
