//! PCA projection of an expert trajectory and of its convexified version.

use mct::datasets::DatasetConfig;
use mct::eval::pca_project_trajectory;
use mct::expert::{ExpertConfig, train_expert};
use mct::model::ModelSpec;
use mct::trajectory::{BetaGranularity, ConvexifyOptions, convexify_with};

fn main() -> mct::Result<()> {
    let (train, val) = DatasetConfig::default().load()?;
    let spec = ModelSpec::new(16, vec![64, 64], 4)?;
    let buffer = train_expert(&train, &val, &spec, &ExpertConfig::default(), 0)?;
    let k = buffer.epochs();
    let raw = pca_project_trajectory(buffer.checkpoints(), &val, 0)?;
    println!("expert: pc2/pc1 variance {:.3e}", raw.variances[1] / raw.variances[0]);
    for g in [BetaGranularity::PerGroup, BetaGranularity::Global] {
        let traj = convexify_with(&buffer, &[0, k], ConvexifyOptions { granularity: g, ..Default::default() })?;
        let waypoints = (0..=k).map(|t| traj.waypoint(t)).collect::<mct::Result<Vec<_>>>()?;
        let p = pca_project_trajectory(&waypoints, &val, 0)?;
        println!("convex ({g:?}): pc2/pc1 variance {:.3e}", p.variances[1] / p.variances[0]);
    }
    println!("index,pc1,pc2,one_minus_val_acc");
    for r in &raw.rows {
        println!("{},{:.4},{:.4},{:.4}", r.index, r.pc1, r.pc2, r.one_minus_val_acc);
    }
    Ok(())
}
