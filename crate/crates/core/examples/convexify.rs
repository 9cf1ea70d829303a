//! Convexifies an expert trajectory, samples it at fractional epochs and
//! compares storage.

use mct::datasets::DatasetConfig;
use mct::expert::{ExpertConfig, train_expert};
use mct::model::ModelSpec;
use mct::store::storage_report;
use mct::trajectory::{BetaGranularity, ConvexifyOptions, convexify_with, parse_anchors};

fn main() -> mct::Result<()> {
    let (train, val) = DatasetConfig::default().load()?;
    let spec = ModelSpec::new(16, vec![64, 64], 4)?;
    let buffer = train_expert(&train, &val, &spec, &ExpertConfig::default(), 0)?;
    for text in ["0,K", "0,6,K"] {
        let anchors = parse_anchors(text, buffer.epochs())?;
        for granularity in [BetaGranularity::PerGroup, BetaGranularity::Global] {
            let opts = ConvexifyOptions { granularity, ..Default::default() };
            let traj = convexify_with(&buffer, &anchors, opts)?;
            let col: Vec<String> = traj.beta().iter().map(|row| format!("{:.2}", row[0])).collect();
            let r = storage_report(&buffer, &traj);
            println!("anchors {anchors:?} {granularity:?}: storage ratio {:.4}", r.ratio);
            println!("  beta column 0: {}", col.join(" "));
            let mid = traj.sample_continuous(2.5)?;
            let lo = traj.waypoint(2)?;
            let hi = traj.waypoint(3)?;
            println!(
                "  |theta(2.5) - theta(2)| = {:.4}, |theta(3) - theta(2.5)| = {:.4}",
                mid.sub(&lo)?.squared_norm().sqrt(),
                hi.sub(&mid)?.squared_norm().sqrt()
            );
        }
    }
    Ok(())
}
