//! MTT vs MCT at desk scale over three seeds, with a random-subset baseline.
//!
//! `cargo run --release --example desk_experiment [seeds]`

use mct::experiment::{DeskSetup, median};

fn fmt_conv(c: Option<usize>) -> String {
    c.map_or_else(|| "never".into(), |c| c.to_string())
}

fn main() -> mct::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let setup = DeskSetup::default();
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let o = setup.run_seed(seed)?;
        println!(
            "seed {seed}: baseline {:.3} | mtt {:.3} conv {} tail {:.3} | mct {:.3} conv {} tail {:.3}",
            o.baseline.mean,
            o.mtt.final_acc,
            fmt_conv(o.mtt.convergence_iteration),
            o.mtt.tail_std,
            o.mct.final_acc,
            fmt_conv(o.mct.convergence_iteration),
            o.mct.tail_std,
        );
        rows.push(o);
    }
    let med = |f: &dyn Fn(&mct::experiment::SeedOutcome) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    println!(
        "median: baseline {:.3}, mtt {:.3}, mct {:.3}",
        med(&|o| o.baseline.mean),
        med(&|o| o.mtt.final_acc),
        med(&|o| o.mct.final_acc)
    );
    println!("\neval trace of the last seed (iteration, mtt, mct):");
    if let Some(o) = rows.last() {
        for (a, b) in o.mtt.report.evals.iter().zip(&o.mct.report.evals) {
            println!("{:5} {:.3} {:.3}", a.iteration, a.mean_acc, b.mean_acc);
        }
    }
    Ok(())
}
