//! Trains a small ensemble of experts and prints their validation accuracy
//! and per-epoch step norms.

use mct::datasets::DatasetConfig;
use mct::expert::{ExpertConfig, train_expert_ensemble};
use mct::model::ModelSpec;

fn main() -> mct::Result<()> {
    let (train, val) = DatasetConfig::default().load()?;
    let spec = ModelSpec::new(16, vec![64, 64], 4)?;
    let config = ExpertConfig {
        num_experts: 3,
        ..ExpertConfig::default()
    };
    let buffers = train_expert_ensemble(&train, &val, &spec, &config)?;
    for b in &buffers {
        let acc = b.val_accuracy.as_deref().unwrap_or_default();
        let dips = acc.windows(2).filter(|w| w[1] < w[0]).count();
        println!(
            "expert {}: K = {}, acc {:.3} -> {:.3}, {dips} epochs with lower accuracy than the one before",
            b.id,
            b.epochs(),
            acc[0],
            acc[acc.len() - 1]
        );
        let norms: Vec<String> = b.delta_norms().iter().map(|n| format!("{:.3}", n[0])).collect();
        println!("  layer0.weight step norms: {}", norms.join(" "));
    }
    Ok(())
}
