//! Flow-matching pretraining on the linear interpolation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::graph::{evaluate_and_backward, Graph, NodeId};
use crate::velocity::{Condition, VelocityField};

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::shape(
            "interpolate",
            format!("{} vs {}", x0.len(), x1.len()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange(t));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 2000,
            lr: 1e-3,
            cond_dropout: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("pretrain.batch_size".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push("pretrain.lr".to_string());
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            bad.push("pretrain.cond_dropout".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

/// One sampled regression problem: inputs `x_t`, times, conditions (possibly
/// nulled by dropout) and targets `x1 - x0`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FmBatch {
    pub dim: usize,
    pub x_t: Vec<f64>,
    pub t: Vec<f64>,
    pub conds: Vec<Condition>,
    pub target: Vec<f64>,
}

impl FmBatch {
    /// Draws `t ~ U[0, 1]` and `x1 ~ N(0, I)` for every item, nulling each
    /// condition independently with probability `dropout`.
    pub fn sample<R: Rng>(
        items: &[(Vec<f64>, Condition)],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::InvalidArgument("empty flow-matching batch".into()));
        };
        let dim = first.0.len();
        let mut b = FmBatch {
            dim,
            x_t: Vec::with_capacity(items.len() * dim),
            t: Vec::with_capacity(items.len()),
            conds: Vec::with_capacity(items.len()),
            target: Vec::with_capacity(items.len() * dim),
        };
        for (x0, c) in items {
            if x0.len() != dim {
                return Err(Error::shape("fm_batch", "items have different sizes"));
            }
            let t: f64 = rng.random();
            let x1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            b.x_t.extend(interpolate(x0, &x1, t)?);
            b.target.extend(x1.iter().zip(x0).map(|(a, b)| a - b));
            b.t.push(t);
            let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
            b.conds.push(if drop { c.to_null() } else { c.clone() });
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    pub fn null_count(&self) -> usize {
        self.conds.iter().filter(|c| c.null_flag).count()
    }
}

/// Mean squared error averaged over rows and dimensions.
pub fn fm_loss_values(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        / pred.len() as f64
}

/// Differentiable flow-matching loss on a pre-sampled batch.
pub fn fm_loss_graph(model: &VelocityField, g: &mut Graph, batch: &FmBatch) -> Result<NodeId> {
    let x = g.constant(vec![batch.rows(), batch.dim], batch.x_t.clone())?;
    let v = model.forward(g, x, &batch.conds, &batch.t)?;
    let target = g.constant(vec![batch.rows(), batch.dim], batch.target.clone())?;
    let d = g.sub(v, target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Samples a batch from `rng` and returns the loss node.
pub fn fm_loss<R: Rng>(
    model: &VelocityField,
    g: &mut Graph,
    items: &[(Vec<f64>, Condition)],
    rng: &mut R,
) -> Result<NodeId> {
    let batch = FmBatch::sample(items, 0.0, rng)?;
    fm_loss_graph(model, g, &batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub losses: Vec<f64>,
    pub null_rows: usize,
    pub total_rows: usize,
}

/// Adam on the flow-matching loss over minibatches drawn with replacement.
pub fn pretrain(
    model: &mut VelocityField,
    dataset: &[(Vec<f64>, Condition)],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "pretraining dataset is empty".into(),
        ));
    }
    config
        .validate()
        .map_err(|keys| Error::Config(keys.join(", ")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamState::new(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let (mut null_rows, mut total_rows) = (0, 0);
    model.params.zero_grad();
    for step in 0..config.steps {
        let items: Vec<(Vec<f64>, Condition)> = (0..config.batch_size)
            .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
            .collect();
        let batch = FmBatch::sample(&items, config.cond_dropout, &mut rng)?;
        null_rows += batch.null_count();
        total_rows += batch.rows();
        let mut g = Graph::new();
        let loss = fm_loss_graph(model, &mut g, &batch).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let value = evaluate_and_backward(&g, loss, &mut model.params)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "flow-matching loss is not finite".into(),
            });
        }
        losses.push(value);
        adam_step(&mut model.params, &mut opt)?;
        model.params.zero_grad();
    }
    Ok(PretrainOutcome {
        losses,
        null_rows,
        total_rows,
    })
}
