//! One distillation run in either mode, printing the evaluation trace.
//!
//! `cargo run --release --example distill_once -- [mtt|mct] [iters]`

use mct::distill::{DistillConfig, EvalContext, Mode, distill};
use mct::eval::random_subset_baseline;
use mct::experiment::DeskSetup;
use mct::expert::train_expert_ensemble;

fn main() -> mct::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode = match args.next().as_deref() {
        Some("mtt") => Mode::Mtt,
        _ => Mode::Mct,
    };
    let iters = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let setup = DeskSetup::default();
    let spec = setup.spec()?;
    let (train, val) = setup.dataset.load()?;
    let buffers = train_expert_ensemble(&train, &val, &spec, &setup.expert)?;
    let experts = setup.experts_for(mode, &buffers)?;
    let config = DistillConfig {
        mode,
        outer_iters: iters,
        ..setup.distill.clone()
    };
    let ctx = EvalContext { val: &val, spec: &spec, epsilon: 2.0 };
    let (synthetic, report) = distill(&experts, &train, setup.expert.lr, &config, Some(&ctx))?;
    for e in &report.evals {
        println!("{:5}  acc {:.3} ± {:.3}", e.iteration, e.mean_acc, e.std_acc);
    }
    let base = random_subset_baseline(&train, 1, &val, &spec, setup.expert.lr, 5, config.eval_train_iters, 0)?;
    println!(
        "{mode}: learned alpha_S {:.4}, first loss {:.3}, last loss {:.3}, baseline {:.3}, {:.1}s",
        synthetic.alpha(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        base.mean,
        report.wall_time_secs
    );
    Ok(())
}
