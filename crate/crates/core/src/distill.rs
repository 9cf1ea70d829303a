//! Trajectory-matching distillation.
//!
//! Each outer iteration picks an expert, samples a start point and a target
//! `M` epochs further along its trajectory, trains a student from the start
//! point for `N` full-batch SGD steps on the synthetic set, and scores the
//! result with the normalized squared distance to the target. The whole
//! unroll is recorded on one tape, so the loss is differentiated directly
//! with respect to the synthetic features and the student learning rate.

use std::time::Instant;

use rand::Rng as _;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalPoint};
use crate::expert::MttBuffer;
use crate::model::{self, ModelSpec, ParamVector};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::trajectory::ConvexTrajectory;

/// Lower bound the student learning rate is projected onto after each update.
pub const MIN_ALPHA: f64 = 1e-6;
/// Attempts at drawing a non-degenerate start/target pair.
pub const MAX_RESAMPLES: usize = 10;

/// Learnable synthetic examples (`ipc` per class, class-major order) together
/// with the learnable student learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    ipc: usize,
    alpha: f64,
}

impl SyntheticDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, ipc: usize, alpha: f64) -> Result<Self> {
        if ipc == 0 || num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need ipc >= 1 and at least 2 classes, got ipc {ipc} and {num_classes} classes"
            )));
        }
        if features.rank() != 2 || features.rows() != labels.len() || labels.len() != num_classes * ipc {
            return Err(Error::InvalidArgument(format!(
                "features {:?} and {} labels do not hold {ipc} examples for each of {num_classes} classes",
                features.shape(),
                labels.len()
            )));
        }
        let mut counts = vec![0; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
            counts[l] += 1;
        }
        if counts.iter().any(|&c| c != ipc) {
            return Err(Error::InvalidArgument(format!("class counts {counts:?}, expected {ipc} each")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("student learning rate must be positive, got {alpha}")));
        }
        Ok(SyntheticDataset {
            features,
            labels,
            num_classes,
            ipc,
            alpha,
        })
    }

    /// `ipc` distinct real examples per class, chosen by `seed`.
    pub fn from_real(train: &LabeledDataset, ipc: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "synthetic/init");
        let mut indices = Vec::with_capacity(ipc * train.num_classes());
        let mut labels = Vec::with_capacity(ipc * train.num_classes());
        for (class, members) in train.indices_by_class().iter().enumerate() {
            if members.len() < ipc {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} examples, fewer than ipc = {ipc}",
                    members.len()
                )));
            }
            let mut picked: Vec<usize> = sample(&mut rng, members.len(), ipc).into_iter().map(|k| members[k]).collect();
            picked.sort_unstable();
            indices.extend(picked);
            labels.extend(std::iter::repeat_n(class, ipc));
        }
        let features = train.features().gather_rows(&indices)?;
        SyntheticDataset::new(features, labels, train.num_classes(), ipc, alpha)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn as_labeled(&self) -> LabeledDataset {
        LabeledDataset::new(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            crate::datasets::Split::Train,
        )
        .expect("synthetic set is a valid labeled dataset")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Discrete checkpoints of the raw expert trajectory.
    Mtt,
    /// Convexified trajectory, optionally sampled at real-valued epochs.
    Mct,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Mtt => "mtt",
            Mode::Mct => "mct",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: Mode,
    pub ipc: usize,
    /// Expert epochs between start and target (M).
    pub expert_steps: usize,
    /// Student SGD steps per unroll (N).
    pub student_steps: usize,
    pub max_start_epoch: f64,
    pub outer_lr_features: f64,
    pub outer_lr_alpha: f64,
    /// Initial student learning rate; `None` uses the expert learning rate.
    pub alpha_init: Option<f64>,
    pub outer_iters: usize,
    pub eval_every: usize,
    pub eval_repeats: usize,
    pub eval_train_iters: usize,
    /// MCT only: sample real-valued start epochs instead of integers.
    pub continuous_sampling: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: Mode::Mct,
            ipc: 1,
            expert_steps: 2,
            student_steps: 10,
            max_start_epoch: 18.0,
            outer_lr_features: 0.3,
            outer_lr_alpha: 1e-4,
            alpha_init: None,
            outer_iters: 1000,
            eval_every: 50,
            eval_repeats: 5,
            eval_train_iters: 300,
            continuous_sampling: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.expert_steps == 0 || self.student_steps == 0 {
            return bad("expert and student steps must be at least 1".into());
        }
        if self.ipc == 0 {
            return bad("ipc must be at least 1".into());
        }
        if !(self.max_start_epoch >= 0.0 && self.max_start_epoch <= epochs as f64) {
            return bad(format!(
                "max start epoch {} outside [0, K = {epochs}]",
                self.max_start_epoch
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.outer_lr_features >= 0.0 && self.outer_lr_alpha >= 0.0) {
            return bad("outer learning rates must be non-negative".into());
        }
        Ok(())
    }
}

/// Expert trajectories in the form each mode consumes.
#[derive(Clone, Debug)]
pub enum Experts {
    Mtt(Vec<MttBuffer>),
    Mct(Vec<ConvexTrajectory>),
}

impl Experts {
    pub fn mode(&self) -> Mode {
        match self {
            Experts::Mtt(_) => Mode::Mtt,
            Experts::Mct(_) => Mode::Mct,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Experts::Mtt(b) => b.len(),
            Experts::Mct(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        match self {
            Experts::Mtt(b) => b.first().map(|b| &b.spec),
            Experts::Mct(t) => t.first().map(|t| &t.spec),
        }
    }

    pub fn epochs(&self, expert: usize) -> usize {
        match self {
            Experts::Mtt(b) => b[expert].epochs(),
            Experts::Mct(t) => t[expert].epochs(),
        }
    }

    fn min_epochs(&self) -> usize {
        (0..self.len()).map(|i| self.epochs(i)).min().unwrap_or(0)
    }
}

/// A sampled start point and its matching target.
#[derive(Clone, Debug, PartialEq)]
pub struct StartSample {
    pub start: ParamVector,
    pub target: ParamVector,
    /// Start epoch (an integer except for continuous MCT sampling).
    pub start_epoch: f64,
    pub target_epoch: f64,
}

/// Draws a start epoch and returns the start/target parameters of expert
/// `expert`. Targets beyond the end of the trajectory are clamped to `K`.
/// Draws whose start equals the target are redrawn up to [`MAX_RESAMPLES`] times.
pub fn sample_start(experts: &Experts, expert: usize, config: &DistillConfig, rng: &mut Rng) -> Result<StartSample> {
    let epochs = experts.epochs(expert);
    let max_start = config.max_start_epoch.min(epochs as f64);
    let continuous = matches!(experts, Experts::Mct(_)) && config.continuous_sampling;
    for _ in 0..MAX_RESAMPLES {
        let c = if continuous {
            rng.random_range(0.0..=max_start)
        } else {
            rng.random_range(0..=max_start.floor() as usize) as f64
        };
        let target_epoch = (c + config.expert_steps as f64).min(epochs as f64);
        let (start, target) = match experts {
            Experts::Mtt(b) => {
                let b = &b[expert];
                (b.checkpoint(c as usize).clone(), b.checkpoint(target_epoch as usize).clone())
            }
            Experts::Mct(t) => {
                let t = &t[expert];
                (t.sample_continuous(c)?, t.sample_continuous(target_epoch)?)
            }
        };
        if target.sub(&start)?.squared_norm() > 0.0 {
            return Ok(StartSample {
                start,
                target,
                start_epoch: c,
                target_epoch,
            });
        }
    }
    Err(Error::DegenerateSegment(format!(
        "expert {expert}: start equals target in {MAX_RESAMPLES} consecutive draws"
    )))
}

fn squared_distance<'t>(a: &[Var<'t>], b: &ParamVector) -> Result<Var<'t>> {
    let tape = a[0].tape();
    let mut total: Option<Var<'t>> = None;
    for (&v, g) in a.iter().zip(b.groups()) {
        let term = v.sub(tape.leaf(g.clone()))?.square().sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty parameter vector".into()))
}

fn check_groups(student_end: &[Var<'_>], p: &ParamVector) -> Result<()> {
    if student_end.len() != p.num_groups() || student_end.iter().zip(p.groups()).any(|(v, g)| v.shape() != g.shape()) {
        return Err(Error::InvalidArgument("student and expert parameters differ in shape".into()));
    }
    Ok(())
}

fn segment_length(target: &ParamVector, start: &ParamVector) -> Result<f64> {
    let denom = target.sub(start)?.squared_norm();
    if denom == 0.0 {
        return Err(Error::DegenerateSegment("start equals target".into()));
    }
    Ok(denom)
}

/// `|student_end - target|^2 / |start - target|^2` over all parameters,
/// differentiable in `student_end`.
pub fn matching_loss<'t>(student_end: &[Var<'t>], target: &ParamVector, start: &ParamVector) -> Result<Var<'t>> {
    check_groups(student_end, target)?;
    let denom = segment_length(target, start)?;
    let tape = student_end[0].tape();
    squared_distance(student_end, target)?.div(tape.scalar(denom))
}

/// The same loss written in update vectors: `|V_S - V_T|^2 / |V_T|^2` with
/// `V_S = student_end - start` and `V_T = target - start`.
pub fn reformulated_loss<'t>(student_end: &[Var<'t>], target: &ParamVector, start: &ParamVector) -> Result<Var<'t>> {
    check_groups(student_end, target)?;
    let v_t = target.sub(start)?;
    let denom = segment_length(target, start)?;
    let tape = student_end[0].tape();
    let v_s = student_end
        .iter()
        .zip(start.groups())
        .map(|(&v, s)| v.sub(tape.leaf(s.clone())))
        .collect::<Result<Vec<_>>>()?;
    squared_distance(&v_s, &v_t)?.div(tape.scalar(denom))
}

/// `steps` full-batch SGD steps from `start` on the synthetic batch, recorded
/// on the tape of `features`.
pub fn inner_unroll<'t>(
    start: &ParamVector,
    features: Var<'t>,
    labels: &[usize],
    alpha: Var<'t>,
    steps: usize,
) -> Result<Vec<Var<'t>>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("the unroll needs at least one step".into()));
    }
    let tape = features.tape();
    let mut params = start.to_tape(tape);
    for step in 0..steps {
        let loss = model::forward_loss(&params, features, labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteInner { step, loss: value });
        }
        let grads = tape.grad(loss, &params)?;
        params = model::sgd_step(&params, &grads, alpha)?;
    }
    Ok(params)
}

/// Matching loss and its gradients with respect to the synthetic features and
/// the student learning rate.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub loss: f64,
    pub features: Tensor,
    pub alpha: f64,
}

pub fn meta_gradient(
    synthetic: &SyntheticDataset,
    start: &ParamVector,
    target: &ParamVector,
    steps: usize,
) -> Result<MetaGradient> {
    let tape = Tape::new();
    let feats = tape.leaf(synthetic.features.clone());
    let alpha = tape.scalar(synthetic.alpha);
    let end = inner_unroll(start, feats, &synthetic.labels, alpha, steps)?;
    let loss = matching_loss(&end, target, start)?;
    let grads = tape.grad(loss, &[feats, alpha])?;
    Ok(MetaGradient {
        loss: loss.item(),
        features: grads[0].value(),
        alpha: grads[1].item(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub mode: Mode,
    pub ipc: usize,
    /// Matching loss of every outer iteration.
    pub losses: Vec<f64>,
    /// Student learning rate after every outer iteration.
    pub alphas: Vec<f64>,
    /// Sampled start epoch of every outer iteration.
    pub start_epochs: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub convergence_iteration: Option<usize>,
    pub wall_time_secs: f64,
}

impl DistillReport {
    /// `(iteration, mean accuracy in percent)` of every evaluation.
    pub fn accuracy_trace(&self) -> Vec<(usize, f64)> {
        self.evals.iter().map(|e| (e.iteration, 100.0 * e.mean_acc)).collect()
    }
}

/// Where and how periodic evaluations run. Without one, no evaluations are recorded.
pub struct EvalContext<'a> {
    pub val: &'a LabeledDataset,
    pub spec: &'a ModelSpec,
    /// Accuracy gap in percentage points for the convergence iteration.
    pub epsilon: f64,
}

/// Runs the outer optimization.
///
/// `alpha_init` defaults to `expert_lr` when the config leaves it unset.
pub fn distill(
    experts: &Experts,
    train: &LabeledDataset,
    expert_lr: f64,
    config: &DistillConfig,
    eval_ctx: Option<&EvalContext<'_>>,
) -> Result<(SyntheticDataset, DistillReport)> {
    if experts.is_empty() {
        return Err(Error::InvalidArgument("need at least one expert trajectory".into()));
    }
    if experts.mode() != config.mode {
        return Err(Error::InvalidArgument(format!(
            "config asks for {} but the experts are {} trajectories",
            config.mode,
            experts.mode()
        )));
    }
    config.validate(experts.min_epochs())?;
    let clock = Instant::now();
    let alpha0 = config.alpha_init.unwrap_or(expert_lr);
    let mut synthetic = SyntheticDataset::from_real(train, config.ipc, alpha0, config.seed)?;
    let mut rng = rng::stream(config.seed, "distill/sampling");
    let mut report = DistillReport {
        mode: config.mode,
        ipc: config.ipc,
        losses: Vec::with_capacity(config.outer_iters),
        alphas: Vec::with_capacity(config.outer_iters),
        start_epochs: Vec::with_capacity(config.outer_iters),
        evals: Vec::new(),
        convergence_iteration: None,
        wall_time_secs: 0.0,
    };
    let evaluate = |s: &SyntheticDataset, iteration: usize| -> Result<Option<EvalPoint>> {
        let Some(ctx) = eval_ctx else { return Ok(None) };
        let r = eval::evaluate_synthetic(
            s,
            ctx.val,
            ctx.spec,
            config.eval_repeats,
            config.eval_train_iters,
            rng::derive_seed(config.seed, "distill/eval"),
        )?;
        Ok(Some(EvalPoint {
            iteration,
            mean_acc: r.mean,
            std_acc: r.std,
        }))
    };

    for it in 0..config.outer_iters {
        let wrap = |e: Error| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        };
        if it % config.eval_every == 0 {
            report.evals.extend(evaluate(&synthetic, it).map_err(wrap)?);
        }
        let expert = rng.random_range(0..experts.len());
        let sample = sample_start(experts, expert, config, &mut rng).map_err(wrap)?;
        let mg = meta_gradient(&synthetic, &sample.start, &sample.target, config.student_steps).map_err(wrap)?;
        if !mg.loss.is_finite() || !mg.features.is_finite() || !mg.alpha.is_finite() {
            return Err(wrap(Error::NonFiniteInner {
                step: config.student_steps,
                loss: mg.loss,
            }));
        }
        let step = mg.features.scale(config.outer_lr_features);
        synthetic.features = synthetic.features.sub(&step).map_err(wrap)?;
        synthetic.alpha = (synthetic.alpha - config.outer_lr_alpha * mg.alpha).max(MIN_ALPHA);
        report.losses.push(mg.loss);
        report.alphas.push(synthetic.alpha);
        report.start_epochs.push(sample.start_epoch);
    }
    if config.outer_iters.is_multiple_of(config.eval_every) {
        let it = config.outer_iters;
        if report.evals.last().map(|e| e.iteration) != Some(it) {
            report.evals.extend(evaluate(&synthetic, it)?);
        }
    }
    if let Some(ctx) = eval_ctx {
        report.convergence_iteration = eval::convergence_iteration(&report.accuracy_trace(), ctx.epsilon);
    }
    report.wall_time_secs = clock.elapsed().as_secs_f64();
    Ok((synthetic, report))
}
