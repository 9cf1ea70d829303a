//! Multilayer perceptron surrogate: parameters, cross-entropy loss, SGD.
//!
//! Parameters are kept as an ordered list of groups, one weight matrix
//! `[fan_in, fan_out]` followed by one bias vector `[fan_out]` per layer.
//! Everything that works per group (delta norms, interpolation weights,
//! serialization) uses this order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_widths,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn num_groups(&self) -> usize {
        2 * self.num_layers()
    }

    pub fn group_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Model parameters partitioned into groups in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    groups: Vec<Tensor>,
}

impl ParamVector {
    pub fn from_groups(spec: &ModelSpec, groups: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.group_shapes();
        if groups.len() != shapes.len()
            || groups.iter().zip(&shapes).any(|(g, s)| g.shape() != s.as_slice())
        {
            return Err(Error::InvalidArgument(format!(
                "parameter groups {:?} do not match model {:?}",
                groups.iter().map(|g| g.shape().to_vec()).collect::<Vec<_>>(),
                shapes
            )));
        }
        Ok(ParamVector { groups })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamVector {
            groups: spec.group_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn groups(&self) -> &[Tensor] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &Tensor {
        &self.groups[g]
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(Tensor::numel).sum()
    }

    /// `(name, weight, bias)` per layer.
    pub fn layers(&self) -> impl Iterator<Item = (String, &Tensor, &Tensor)> {
        self.groups
            .chunks(2)
            .enumerate()
            .map(|(l, wb)| (format!("layer{l}"), &wb[0], &wb[1]))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for g in &self.groups {
            out.extend_from_slice(g.data());
        }
        out
    }

    pub fn unflatten(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                spec.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        let groups = spec
            .group_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product::<usize>();
                let t = Tensor::new(shape, flat[at..at + n].to_vec());
                at += n;
                t
            })
            .collect::<Result<_>>()?;
        Ok(ParamVector { groups })
    }

    fn zip_groups(&self, other: &ParamVector, f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<ParamVector> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter vectors have {} and {} groups",
                self.groups.len(),
                other.groups.len()
            )));
        }
        Ok(ParamVector {
            groups: self
                .groups
                .iter()
                .zip(&other.groups)
                .map(|(a, b)| f(a, b))
                .collect::<Result<_>>()?,
        })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_groups(other, Tensor::sub)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_groups(other, Tensor::add)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            groups: self.groups.iter().map(|g| g.scale(c)).collect(),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups.iter().map(Tensor::squared_norm).sum()
    }

    /// L2 norm of every group.
    pub fn group_norms(&self) -> Vec<f64> {
        self.groups.iter().map(Tensor::norm).collect()
    }

    /// Per-group affine combination `(1 - w_g) * self_g + w_g * other_g`.
    pub fn lerp_groups(&self, other: &ParamVector, weights: &[f64]) -> Result<ParamVector> {
        if weights.len() != self.groups.len() {
            return Err(Error::InvalidArgument(format!(
                "{} interpolation weights for {} groups",
                weights.len(),
                self.groups.len()
            )));
        }
        let mut groups = Vec::with_capacity(self.groups.len());
        for ((a, b), &w) in self.groups.iter().zip(&other.groups).zip(weights) {
            if a.shape() != b.shape() {
                return Err(Error::shape("lerp", &[a.shape(), b.shape()]));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (1.0 - w) * x + w * y)
                .collect();
            groups.push(Tensor::new(a.shape().to_vec(), data)?);
        }
        Ok(ParamVector { groups })
    }

    /// Rounds every entry to the nearest `f32`, the precision checkpoints are stored at.
    pub fn to_f32_precision(&self) -> ParamVector {
        ParamVector {
            groups: self
                .groups
                .iter()
                .map(|g| {
                    let data = g.data().iter().map(|&v| f64::from(v as f32)).collect();
                    Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(Tensor::is_finite)
    }

    /// Records every group as a leaf on `tape`.
    pub fn to_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.groups.iter().map(|g| tape.leaf(g.clone())).collect()
    }

    pub fn from_vars(vars: &[Var<'_>]) -> ParamVector {
        ParamVector {
            groups: vars.iter().map(Var::value).collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "model/init");
    let mut groups = Vec::with_capacity(spec.num_groups());
    for (fan_in, fan_out) in spec.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        groups.push(Tensor::matrix(fan_in, fan_out, w).expect("consistent shape"));
        groups.push(Tensor::zeros(&[fan_out]));
    }
    ParamVector { groups }
}

/// Logits `[batch, num_classes]` on a tape.
pub fn forward_logits<'t>(params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let layers = params.len() / 2;
    let mut h = x;
    for (l, wb) in params.chunks(2).enumerate() {
        let batch = h.shape()[0];
        h = h.matmul(wb[0])?.add(wb[1].broadcast_axis(0, batch)?)?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        data[i * num_classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, data)
}

/// Mean softmax cross-entropy of the batch `x` with integer `labels`.
pub fn forward_loss<'t>(params: &[Var<'t>], x: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let logits = forward_logits(params, x)?;
    let num_classes = logits.shape()[1];
    let targets = x.tape().leaf(one_hot(labels, num_classes)?);
    let picked = logits.log_softmax()?.mul(targets)?.sum();
    Ok(picked.scale(-1.0 / labels.len() as f64))
}

/// One SGD update `params - lr * grads`, differentiable in all three inputs.
pub fn sgd_step<'t>(params: &[Var<'t>], grads: &[Var<'t>], lr: Var<'t>) -> Result<Vec<Var<'t>>> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter groups but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| p.sub(g.mul_scalar(lr)?))
        .collect()
}

/// Loss value and parameter gradient on a fresh tape.
pub fn loss_and_grad(params: &ParamVector, x: &Tensor, labels: &[usize]) -> Result<(f64, ParamVector)> {
    let tape = Tape::new();
    let vars = params.to_tape(&tape);
    let xv = tape.leaf(x.clone());
    let loss = forward_loss(&vars, xv, labels)?;
    let grads = tape.grad(loss, &vars)?;
    Ok((loss.item(), ParamVector::from_vars(&grads)))
}

/// Plain SGD update outside any tape.
pub fn sgd_update(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    params.zip_groups(grads, |p, g| {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", &[p.shape(), g.shape()]));
        }
        let data = p.data().iter().zip(g.data()).map(|(&a, &b)| a - lr * b).collect();
        Tensor::new(p.shape().to_vec(), data)
    })
}

/// Logits without recording a tape.
pub fn logits(params: &ParamVector, x: &Tensor) -> Result<Tensor> {
    let layers = params.num_groups() / 2;
    let mut h = x.clone();
    for (l, (_, w, b)) in params.layers().enumerate() {
        h = h.matmul(w)?.add(&b.broadcast_axis(0, h.rows())?)?;
        if l + 1 < layers {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Mean cross-entropy without recording a tape.
pub fn eval_loss(params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    let ls = logits(params, data.features())?.log_softmax()?;
    let c = ls.cols();
    let mut total = 0.0;
    for (i, &l) in data.labels().iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, num_classes: c });
        }
        total -= ls.data()[i * c + l];
    }
    Ok(total / data.len() as f64)
}

/// Fraction of examples whose arg-max logit (lowest index on ties) equals the label.
pub fn accuracy(params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds = logits(params, data.features())?.argmax_rows();
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_blobs, Split};
    use crate::numeric::finite_difference_check;

    fn spec() -> ModelSpec {
        ModelSpec::new(3, vec![5], 2).unwrap()
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let s = ModelSpec::new(4, vec![8, 6], 3).unwrap();
        let a = init_params(&s, 3);
        assert_eq!(a, init_params(&s, 3));
        assert_ne!(a, init_params(&s, 4));
        for (_, _, b) in a.layers() {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.num_params(), s.num_params());
        assert_eq!(s.group_names()[3], "layer1.bias");
    }

    #[test]
    fn init_weight_mean_is_within_three_sigma() {
        let s = ModelSpec::new(128, vec![], 128).unwrap();
        let p = init_params(&s, 42);
        let w = p.group(0).data();
        let limit = (6.0f64 / 256.0).sqrt();
        let sigma = limit / (3.0 * w.len() as f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
        assert!(w.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_weights_give_log_two() {
        let p = ParamVector::zeros(&spec());
        let tape = Tape::new();
        let vars = p.to_tape(&tape);
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let loss = forward_loss(&vars, x, &[0, 1]).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let s = ModelSpec::new(1, vec![], 2).unwrap();
        let w = Tensor::matrix(1, 2, vec![50.0, 0.0]).unwrap();
        let p = ParamVector::from_groups(&s, vec![w, Tensor::zeros(&[2])]).unwrap();
        let tape = Tape::new();
        let vars = p.to_tape(&tape);
        let x = tape.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        assert!(forward_loss(&vars, x, &[0]).unwrap().item() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let p = ParamVector::zeros(&spec());
        let tape = Tape::new();
        let vars = p.to_tape(&tape);
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            forward_loss(&vars, x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let s = ModelSpec::new(3, vec![6], 3).unwrap();
        let p = init_params(&s, 5);
        let x = Tensor::matrix(2, 3, vec![0.4, -0.9, 1.3, -0.2, 0.7, 0.1]).unwrap();
        let err = finite_difference_check(
            |tape, xv| {
                let vars = p.to_tape(tape);
                forward_loss(&vars, xv, &[2, 0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sgd_step_definition() {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.leaf(Tensor::vector(vec![10.0, -10.0]));
        let out = sgd_step(&[theta], &[g], tape.scalar(0.1)).unwrap();
        assert_eq!(out[0].value().data(), &[0.0, 3.0]);
        let same = sgd_step(&[theta], &[g], tape.scalar(0.0)).unwrap();
        assert_eq!(same[0].value(), theta.value());
    }

    #[test]
    fn sgd_step_lr_derivative_is_minus_grad() {
        let gvals = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let theta = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let tape = Tape::new();
        let lr = tape.scalar(0.3);
        let th = tape.leaf(theta.clone());
        let g = tape.leaf(gvals.clone());
        let out = sgd_step(&[th], &[g], lr).unwrap()[0];
        for i in 0..3 {
            // d(theta'_i)/d(lr) via a weighted sum that picks coordinate i.
            let mut pick = vec![0.0; 3];
            pick[i] = 1.0;
            let sel = out.mul(tape.leaf(Tensor::vector(pick))).unwrap().sum();
            let d = tape.grad(sel, &[lr]).unwrap()[0].item();
            let h = 1e-6;
            let f = |a: f64| theta.data()[i] - a * gvals.data()[i];
            let fd = (f(0.3 + h) - f(0.3 - h)) / (2.0 * h);
            assert_eq!(d, -gvals.data()[i]);
            assert!((fd - d).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_logits_predict_class_zero() {
        let p = ParamVector::zeros(&spec());
        let x = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        let d = LabeledDataset::new(x, vec![0, 1, 0, 1], 2, Split::Val).unwrap();
        assert_eq!(accuracy(&p, &d).unwrap(), 0.5);
    }

    #[test]
    fn random_init_accuracy_is_near_chance() {
        let data = gen_blobs(4, 100, 8, 0.5, 3).unwrap();
        let s = ModelSpec::new(8, vec![16], 4).unwrap();
        let mean = (0..20)
            .map(|seed| accuracy(&init_params(&s, seed), &data).unwrap())
            .sum::<f64>()
            / 20.0;
        assert!((mean - 0.25).abs() <= 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn plain_and_tape_forward_agree() {
        let s = ModelSpec::new(3, vec![4, 4], 3).unwrap();
        let p = init_params(&s, 1);
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.3, 0.8, 1.0]).unwrap();
        let tape = Tape::new();
        let vars = p.to_tape(&tape);
        let lv = forward_logits(&vars, tape.leaf(x.clone())).unwrap().value();
        assert_eq!(lv, logits(&p, &x).unwrap());
    }
}
