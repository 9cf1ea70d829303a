//! The TOML run configuration used by the `mct` binary: defaults, partial
//! files and the round trip of the effective settings.

use mct::cli::RunConfig;

fn main() -> anyhow::Result<()> {
    let partial = "[expert]\nepochs = 50\n\n[distill]\nmode = \"mtt\"\nexpert_steps = 3\n";
    let cfg = RunConfig::from_toml(partial)?;
    assert_eq!(RunConfig::from_toml(&cfg.to_toml())?, cfg);
    print!("{}", cfg.to_toml());
    match RunConfig::from_toml("[distill]\nouter_lr = 1.0\n") {
        Ok(_) => unreachable!("unknown keys are rejected"),
        Err(e) => eprintln!("rejected: {e}"),
    }
    Ok(())
}
