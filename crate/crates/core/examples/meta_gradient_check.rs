//! Checks the meta-gradient of the matching loss against central finite
//! differences, for every synthetic feature and for the student learning rate.

use mct::datasets::gen_blobs;
use mct::distill::{SyntheticDataset, meta_gradient};
use mct::model::{ModelSpec, init_params};
use mct::numeric::{Tensor, central_difference, max_relative_error};

fn main() -> mct::Result<()> {
    let spec = ModelSpec::new(4, vec![8], 3)?;
    let data = gen_blobs(3, 5, 4, 0.5, 1)?;
    let synthetic = SyntheticDataset::from_real(&data, 1, 0.2, 3)?;
    let start = init_params(&spec, 10);
    let target = init_params(&spec, 11);

    for steps in [1, 3, 5] {
        let mg = meta_gradient(&synthetic, &start, &target, steps)?;
        let loss_at = |features: &Tensor, alpha: f64| -> mct::Result<f64> {
            let s = SyntheticDataset::new(features.clone(), synthetic.labels().to_vec(), 3, 1, alpha)?;
            Ok(meta_gradient(&s, &start, &target, steps)?.loss)
        };
        let fd = central_difference(|f| loss_at(f, synthetic.alpha()), synthetic.features(), 1e-5)?;
        let a = Tensor::scalar(synthetic.alpha());
        let fd_alpha = central_difference(|a| loss_at(synthetic.features(), a.data()[0]), &a, 1e-6)?;
        println!(
            "N = {steps}: loss {:.6}, features rel err {:.2e}, alpha grad {:.6} (rel err {:.2e})",
            mg.loss,
            max_relative_error(&mg.features, &fd),
            mg.alpha,
            max_relative_error(&Tensor::scalar(mg.alpha), &fd_alpha),
        );
    }
    Ok(())
}
