//! Expert trajectories: mini-batch SGD on real data with per-epoch checkpoints.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Number of epochs K; the trajectory holds K + 1 checkpoints.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub num_experts: usize,
    pub base_seed: u64,
    /// Also accumulate the per-mini-batch update norms within each epoch.
    pub record_minibatch_norms: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            num_experts: 5,
            base_seed: 0,
            record_minibatch_norms: false,
        }
    }
}

impl ExpertConfig {
    /// A zero learning rate is accepted here (it yields a frozen trajectory);
    /// callers that need progress should require `lr > 0` themselves.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid expert learning rate {}", self.lr)));
        }
        if self.num_experts == 0 {
            return Err(Error::InvalidArgument("need at least one expert".into()));
        }
        Ok(())
    }
}

/// A full expert trajectory: checkpoints after every epoch plus the per-group
/// L2 norms of the differences between consecutive checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct MttBuffer {
    pub id: u32,
    pub spec: ModelSpec,
    checkpoints: Vec<ParamVector>,
    delta_norms: Vec<Vec<f64>>,
    /// Validation accuracy of each checkpoint, when computed.
    pub val_accuracy: Option<Vec<f64>>,
    /// Sum over the mini-batch updates of each epoch of the per-group update norm.
    pub minibatch_norms: Option<Vec<Vec<f64>>>,
}

/// Per-group norms of `next - prev`.
pub fn delta_norms(prev: &ParamVector, next: &ParamVector) -> Result<Vec<f64>> {
    Ok(next.sub(prev)?.group_norms())
}

impl MttBuffer {
    /// Builds a buffer from checkpoints, computing the delta norms.
    pub fn from_checkpoints(id: u32, spec: ModelSpec, checkpoints: Vec<ParamVector>) -> Result<Self> {
        if checkpoints.len() < 2 {
            return Err(Error::InvalidArgument(
                "a trajectory needs at least two checkpoints".into(),
            ));
        }
        let norms = checkpoints
            .windows(2)
            .map(|w| delta_norms(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::with_delta_norms(id, spec, checkpoints, norms)
    }

    /// Builds a buffer from checkpoints and previously computed delta norms.
    pub fn with_delta_norms(
        id: u32,
        spec: ModelSpec,
        checkpoints: Vec<ParamVector>,
        delta_norms: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if checkpoints.len() < 2 || delta_norms.len() + 1 != checkpoints.len() {
            return Err(Error::InvalidArgument(format!(
                "{} checkpoints need {} delta-norm rows, got {}",
                checkpoints.len(),
                checkpoints.len().saturating_sub(1),
                delta_norms.len()
            )));
        }
        let shapes = spec.group_shapes();
        for c in &checkpoints {
            if c.groups().iter().map(|g| g.shape().to_vec()).ne(shapes.iter().cloned()) {
                return Err(Error::InvalidArgument(
                    "checkpoint shapes do not match the model spec".into(),
                ));
            }
        }
        let groups = shapes.len();
        if delta_norms
            .iter()
            .any(|row| row.len() != groups || row.iter().any(|&v| !(v >= 0.0)))
        {
            return Err(Error::InvalidArgument(
                "delta norms must be non-negative with one entry per group".into(),
            ));
        }
        Ok(MttBuffer {
            id,
            spec,
            checkpoints,
            delta_norms,
            val_accuracy: None,
            minibatch_norms: None,
        })
    }

    /// Number of epochs K (one less than the number of checkpoints).
    pub fn epochs(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn num_groups(&self) -> usize {
        self.spec.num_groups()
    }

    pub fn checkpoints(&self) -> &[ParamVector] {
        &self.checkpoints
    }

    pub fn checkpoint(&self, t: usize) -> &ParamVector {
        &self.checkpoints[t]
    }

    /// `[K][groups]` norms of consecutive checkpoint differences.
    pub fn delta_norms(&self) -> &[Vec<f64>] {
        &self.delta_norms
    }

    pub fn recompute_delta_norms(&self) -> Result<Vec<Vec<f64>>> {
        self.checkpoints
            .windows(2)
            .map(|w| delta_norms(&w[0], &w[1]))
            .collect()
    }
}

/// Trains one expert from a fresh initialization derived from `seed`.
///
/// Checkpoint 0 is the initialization and checkpoint `t` the state after
/// epoch `t`. Checkpoints are rounded to `f32` precision (the storage
/// precision) while training itself continues in `f64`.
pub fn train_expert(
    train: &LabeledDataset,
    val: &LabeledDataset,
    spec: &ModelSpec,
    config: &ExpertConfig,
    seed: u64,
) -> Result<MttBuffer> {
    config.validate()?;
    spec.validate()?;
    if train.feature_dim() != spec.input_dim || train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training data has dimension {} but the model expects {}",
            train.feature_dim(),
            spec.input_dim
        )));
    }

    let mut params = model::init_params(spec, rng::derive_seed(seed, "expert/init"));
    let mut batch_rng = rng::stream(seed, "expert/batches");
    let mut checkpoints = Vec::with_capacity(config.epochs + 1);
    checkpoints.push(params.to_f32_precision());
    let mut minibatch_norms = config.record_minibatch_norms.then(Vec::new);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut batch_rng);
        let mut epoch_norms = vec![0.0; spec.num_groups()];
        for batch in order.chunks(config.batch_size) {
            let x = train.features().gather_rows(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, grads) = model::loss_and_grad(&params, &x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let next = model::sgd_update(&params, &grads, config.lr)?;
            if minibatch_norms.is_some() {
                for (acc, n) in epoch_norms.iter_mut().zip(delta_norms(&params, &next)?) {
                    *acc += n;
                }
            }
            params = next;
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        checkpoints.push(params.to_f32_precision());
        if let Some(m) = minibatch_norms.as_mut() {
            m.push(epoch_norms);
        }
    }

    let val_accuracy = checkpoints
        .iter()
        .map(|c| model::accuracy(c, val))
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = MttBuffer::from_checkpoints(seed as u32, spec.clone(), checkpoints)?;
    buffer.val_accuracy = Some(val_accuracy);
    buffer.minibatch_norms = minibatch_norms;
    Ok(buffer)
}

/// Trains `config.num_experts` experts in parallel; expert `i` uses seed
/// `config.base_seed + i`. The result is ordered by expert index.
pub fn train_expert_ensemble(
    train: &LabeledDataset,
    val: &LabeledDataset,
    spec: &ModelSpec,
    config: &ExpertConfig,
) -> Result<Vec<MttBuffer>> {
    config.validate()?;
    (0..config.num_experts)
        .into_par_iter()
        .map(|i| {
            let mut b = train_expert(train, val, spec, config, config.base_seed + i as u64)
                .map_err(|e| Error::Expert {
                    index: i,
                    source: Box::new(e),
                })?;
            b.id = i as u32;
            Ok(b)
        })
        .collect()
}
