//! Writes an expert buffer, its convex trajectory and a synthetic set to disk,
//! reads them back and checks the round trips.

use mct::datasets::DatasetConfig;
use mct::distill::SyntheticDataset;
use mct::expert::{ExpertConfig, train_expert};
use mct::model::ModelSpec;
use mct::store;
use mct::trajectory::convexify;

fn main() -> mct::Result<()> {
    let (train, val) = DatasetConfig::default().load()?;
    let spec = ModelSpec::new(16, vec![64, 64], 4)?;
    let cfg = ExpertConfig { epochs: 10, ..Default::default() };
    let buffer = train_expert(&train, &val, &spec, &cfg, 0)?;
    let traj = convexify(&buffer, &[0, 10])?;
    let synthetic = SyntheticDataset::from_real(&train, 2, 0.05, 0)?;

    let dir = std::env::temp_dir().join(format!("mct-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| mct::Error::io(&dir, e))?;
    let (b, c, s) = (dir.join("e.mttb"), dir.join("e.mctb"), dir.join("s.synd"));
    store::write_buffer(&b, &buffer)?;
    store::write_convex(&c, &traj)?;
    store::write_synthetic(&s, &synthetic)?;
    let mut back = store::read_buffer(&b)?;
    back.id = buffer.id;
    back.val_accuracy = buffer.val_accuracy.clone();
    assert_eq!(back, buffer);
    assert_eq!(store::read_convex(&c)?, traj);
    assert_eq!(store::read_synthetic(&s)?, synthetic);
    let r = store::storage_report_files(&b, &c)?;
    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
