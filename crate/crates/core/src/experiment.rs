//! The desk-scale MTT vs MCT comparison: one seed trains experts, distills
//! with both modes from the same experts and evaluates a random-subset baseline.

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetConfig;
use crate::distill::{self, DistillConfig, DistillReport, EvalContext, Experts, Mode};
use crate::error::Result;
use crate::eval::{self, EvalReport};
use crate::expert::{self, ExpertConfig, MttBuffer};
use crate::model::ModelSpec;
use crate::rng;
use crate::trajectory::{self, ConvexifyOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskSetup {
    pub dataset: DatasetConfig,
    pub hidden_widths: Vec<usize>,
    pub expert: ExpertConfig,
    pub anchors: String,
    pub convexify: ConvexifyOptions,
    pub distill: DistillConfig,
    /// Convergence gap in percentage points.
    pub epsilon: f64,
    /// Number of trailing evaluations in the stability metric.
    pub tail: usize,
}

impl Default for DeskSetup {
    fn default() -> Self {
        DeskSetup {
            dataset: DatasetConfig::default(),
            hidden_widths: vec![64, 64],
            expert: ExpertConfig::default(),
            anchors: "0,K".into(),
            convexify: ConvexifyOptions::default(),
            distill: DistillConfig::default(),
            epsilon: 2.0,
            tail: 10,
        }
    }
}

/// Summary of one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub final_acc: f64,
    pub final_std: f64,
    pub convergence_iteration: Option<usize>,
    /// Sample std (percentage points) of the last `tail` evaluations.
    pub tail_std: f64,
    pub report: DistillReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub expert_final_acc: Vec<f64>,
    pub baseline: EvalReport,
    pub mtt: RunSummary,
    pub mct: RunSummary,
}

impl DeskSetup {
    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.dataset.dim, self.hidden_widths.clone(), self.dataset.classes)
    }

    /// This setup with every seed derived from `seed`.
    pub fn seeded(&self, seed: u64) -> DeskSetup {
        let mut s = self.clone();
        s.dataset.seed = seed;
        s.expert.base_seed = rng::derive_seed(seed, "desk/experts");
        s.distill.seed = seed;
        s
    }

    pub fn experts_for(&self, mode: Mode, buffers: &[MttBuffer]) -> Result<Experts> {
        Ok(match mode {
            Mode::Mtt => Experts::Mtt(buffers.to_vec()),
            Mode::Mct => Experts::Mct(
                buffers
                    .iter()
                    .map(|b| {
                        let anchors = trajectory::parse_anchors(&self.anchors, b.epochs())?;
                        trajectory::convexify_with(b, &anchors, self.convexify)
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Runs experts, both distillation modes and the baseline for `seed`.
    pub fn run_seed(&self, seed: u64) -> Result<SeedOutcome> {
        let setup = self.seeded(seed);
        let spec = setup.spec()?;
        let (train, val) = setup.dataset.load()?;
        let buffers = expert::train_expert_ensemble(&train, &val, &spec, &setup.expert)?;
        let expert_final_acc = buffers
            .iter()
            .map(|b| b.val_accuracy.as_ref().and_then(|v| v.last().copied()).unwrap_or(f64::NAN))
            .collect();
        let ctx = EvalContext {
            val: &val,
            spec: &spec,
            epsilon: setup.epsilon,
        };
        let run = |mode: Mode| -> Result<RunSummary> {
            let config = DistillConfig { mode, ..setup.distill.clone() };
            let experts = setup.experts_for(mode, &buffers)?;
            let (_, report) = distill::distill(&experts, &train, setup.expert.lr, &config, Some(&ctx))?;
            setup.summarize(report)
        };
        let mtt = run(Mode::Mtt)?;
        let mct = run(Mode::Mct)?;
        let d = &setup.distill;
        let baseline = eval::random_subset_baseline(
            &train,
            d.ipc,
            &val,
            &spec,
            d.alpha_init.unwrap_or(setup.expert.lr),
            d.eval_repeats,
            d.eval_train_iters,
            seed,
        )?;
        Ok(SeedOutcome {
            seed,
            expert_final_acc,
            baseline,
            mtt,
            mct,
        })
    }

    pub fn summarize(&self, report: DistillReport) -> Result<RunSummary> {
        let accs: Vec<f64> = report.evals.iter().map(|e| 100.0 * e.mean_acc).collect();
        let last = report.evals.last();
        Ok(RunSummary {
            mode: report.mode,
            final_acc: last.map_or(f64::NAN, |e| e.mean_acc),
            final_std: last.map_or(f64::NAN, |e| e.std_acc),
            convergence_iteration: report.convergence_iteration,
            tail_std: eval::stability_metric(&accs, self.tail.min(accs.len()))?,
            report,
        })
    }
}

/// Median of the values, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
