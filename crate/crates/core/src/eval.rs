//! Retraining-based evaluation, convergence/stability metrics and PCA
//! projection of trajectories.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::distill::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng;

/// Mean and spread of retrained accuracies at one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Final validation accuracy of every repeat, in `[0, 1]`.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
    pub convergence_iteration: Option<usize>,
    pub post_convergence_std: Option<f64>,
    pub baseline_accuracy: Option<f64>,
}

impl EvalReport {
    fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        EvalReport {
            accuracies,
            mean,
            std,
            convergence_iteration: None,
            post_convergence_std: None,
            baseline_accuracy: None,
        }
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains a fresh network per repeat (init seed `seed + r`) with `train_iters`
/// full-batch SGD steps at the synthetic learning rate and reports validation
/// accuracies. Repeats run in parallel; the result does not depend on scheduling.
pub fn evaluate_synthetic(
    synthetic: &SyntheticDataset,
    val: &LabeledDataset,
    spec: &ModelSpec,
    repeats: usize,
    train_iters: usize,
    seed: u64,
) -> Result<EvalReport> {
    if repeats == 0 || train_iters == 0 {
        return Err(Error::InvalidArgument("repeats and train_iters must be at least 1".into()));
    }
    if synthetic.feature_dim() != spec.input_dim || synthetic.num_classes() != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "synthetic set ({} features, {} classes) does not fit the model",
            synthetic.feature_dim(),
            synthetic.num_classes()
        )));
    }
    let data = synthetic.as_labeled();
    let accuracies = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut params = model::init_params(spec, rng::derive_seed(seed.wrapping_add(r as u64), "eval/init"));
            for step in 0..train_iters {
                let (loss, grads) = model::loss_and_grad(&params, data.features(), data.labels())?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteInner { step, loss });
                }
                params = model::sgd_update(&params, &grads, synthetic.alpha())?;
            }
            model::accuracy(&params, val)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accuracies))
}

/// Seeded sample of `ipc` real examples per class, trained at learning rate
/// `alpha` and evaluated exactly like a distilled set.
#[allow(clippy::too_many_arguments)]
pub fn random_subset_baseline(
    train: &LabeledDataset,
    ipc: usize,
    val: &LabeledDataset,
    spec: &ModelSpec,
    alpha: f64,
    repeats: usize,
    train_iters: usize,
    seed: u64,
) -> Result<EvalReport> {
    let subset = SyntheticDataset::from_real(train, ipc, alpha, rng::derive_seed(seed, "baseline/subset"))?;
    evaluate_synthetic(&subset, val, spec, repeats, train_iters, seed)
}

/// Smallest recorded iteration after which every accuracy stays strictly
/// within `epsilon` of the trace maximum. Accuracies and `epsilon` share units.
/// `None` for an empty or non-finite trace.
pub fn convergence_iteration(trace: &[(usize, f64)], epsilon: f64) -> Option<usize> {
    let max = trace.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut first = None;
    for &(it, acc) in trace.iter().rev() {
        if max - acc < epsilon {
            first = Some(it);
        } else {
            break;
        }
    }
    first
}

/// Sample standard deviation of the last `tail` accuracies.
pub fn stability_metric(accuracies: &[f64], tail: usize) -> Result<f64> {
    if tail < 2 || tail > accuracies.len() {
        return Err(Error::InvalidArgument(format!(
            "tail {tail} must be in [2, {}]",
            accuracies.len()
        )));
    }
    Ok(mean_std(&accuracies[accuracies.len() - tail..]).1)
}

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Unit principal directions, one per component.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
    /// `[T][num_components]` coordinates of the centered points.
    pub projections: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top principal directions of `points` by power iteration on the implicit
/// covariance with deflation. `seed` only picks the starting vectors.
pub fn pca(points: &[Vec<f64>], num_components: usize, seed: u64) -> Result<Pca> {
    let t = points.len();
    if t < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 points, got {t}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) || num_components == 0 || num_components > dim {
        return Err(Error::InvalidArgument("PCA points differ in length or too many components".into()));
    }
    let mut mean = vec![0.0; dim];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let total: f64 = centered.iter().map(|c| dot(c, c)).sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("all points are identical; PCA is undefined".into()));
    }

    // X^T X v
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for row in &centered {
            let s = dot(row, v);
            out.iter_mut().zip(row).for_each(|(o, r)| *o += s * r);
        }
        out
    };
    let deflate = |v: &mut [f64], found: &[Vec<f64>]| {
        for c in found {
            let s = dot(v, c);
            v.iter_mut().zip(c).for_each(|(x, ci)| *x -= s * ci);
        }
    };

    let mut rng = rng::stream(seed, "pca/init");
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(num_components);
    let mut variances = Vec::with_capacity(num_components);
    for _ in 0..num_components {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        deflate(&mut v, &components);
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERS {
            let mut w = apply(&v);
            deflate(&mut w, &components);
            lambda = normalize(&mut w);
            if lambda == 0.0 {
                // remaining variance is exactly zero; keep an orthonormal direction
                break;
            }
            let sign = if dot(&w, &v) < 0.0 { -1.0 } else { 1.0 };
            let diff = w.iter().zip(&v).map(|(a, b)| (a - sign * b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if diff < PCA_TOLERANCE {
                break;
            }
        }
        // re-orthogonalize against rounding drift
        deflate(&mut v, &components);
        normalize(&mut v);
        let proj_sq: f64 = centered.iter().map(|c| dot(c, &v).powi(2)).sum();
        variances.push(if lambda == 0.0 { 0.0 } else { proj_sq / (t - 1) as f64 });
        components.push(v);
    }
    let projections = centered
        .iter()
        .map(|c| components.iter().map(|v| dot(c, v)).collect())
        .collect();
    Ok(Pca {
        components,
        variances,
        projections,
    })
}

/// One row of a trajectory projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub index: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub one_minus_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryProjection {
    pub rows: Vec<PcaRow>,
    pub variances: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projects flattened waypoints onto their top two principal directions and
/// attaches each waypoint's validation error.
pub fn pca_project_trajectory(waypoints: &[ParamVector], val: &LabeledDataset, seed: u64) -> Result<TrajectoryProjection> {
    let flat: Vec<Vec<f64>> = waypoints.iter().map(ParamVector::flatten).collect();
    let p = pca(&flat, 2, seed)?;
    let rows = waypoints
        .iter()
        .zip(&p.projections)
        .enumerate()
        .map(|(index, (w, proj))| {
            Ok(PcaRow {
                index,
                pc1: proj[0],
                pc2: proj[1],
                one_minus_val_acc: 1.0 - model::accuracy(w, val)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut comps = p.components.into_iter();
    Ok(TrajectoryProjection {
        rows,
        variances: [p.variances[0], p.variances[1]],
        components: [comps.next().unwrap(), comps.next().unwrap()],
    })
}
