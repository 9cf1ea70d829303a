//! Convexified expert trajectories and continuous sampling.
//!
//! A [`ConvexTrajectory`] keeps only a few anchor checkpoints of an expert
//! trajectory. Between two consecutive anchors every parameter group moves on
//! the straight line joining them, and the position along that line at epoch
//! `t` is the fraction of the expert's path length (sum of per-epoch step
//! norms) covered by `t`. Positions are stored as a `β` table with one row per
//! epoch and one column per parameter group.
//!
//! Segment convention: at an interior anchor `a_j` the table stores the end
//! value of the segment that finishes there (1); a segment that starts at
//! `a_j` reads its own start value as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::MttBuffer;
use crate::model::{ModelSpec, ParamVector};

/// Whether interpolation weights are computed per parameter group or once
/// for the whole parameter vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaGranularity {
    #[default]
    PerGroup,
    Global,
}

/// Which step norms drive the interpolation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSource {
    /// Norms between consecutive stored (per-epoch) checkpoints.
    #[default]
    Checkpoints,
    /// Summed per-mini-batch update norms; the buffer must have recorded them.
    MiniBatches,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexifyOptions {
    pub granularity: BetaGranularity,
    pub norm_source: NormSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexTrajectory {
    pub spec: ModelSpec,
    epochs: usize,
    anchors: Vec<usize>,
    anchor_params: Vec<ParamVector>,
    beta: Vec<Vec<f64>>,
}

/// Parses an anchor list such as `"0,6,25,K"`; `K` expands to `epochs`.
pub fn parse_anchors(text: &str, epochs: usize) -> Result<Vec<usize>> {
    let anchors = text
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok.eq_ignore_ascii_case("k") {
                Ok(epochs)
            } else {
                tok.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad anchor `{tok}` in `{text}`")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    validate_anchors(&anchors, epochs)?;
    Ok(anchors)
}

pub fn validate_anchors(anchors: &[usize], epochs: usize) -> Result<()> {
    let ok = anchors.len() >= 2
        && anchors[0] == 0
        && *anchors.last().unwrap() == epochs
        && anchors.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "anchors {anchors:?} must increase strictly from 0 to K = {epochs}"
        )));
    }
    Ok(())
}

/// Convexifies `buffer` with per-group weights from checkpoint norms.
pub fn convexify(buffer: &MttBuffer, anchors: &[usize]) -> Result<ConvexTrajectory> {
    convexify_with(buffer, anchors, ConvexifyOptions::default())
}

pub fn convexify_with(
    buffer: &MttBuffer,
    anchors: &[usize],
    options: ConvexifyOptions,
) -> Result<ConvexTrajectory> {
    let epochs = buffer.epochs();
    validate_anchors(anchors, epochs)?;
    let norms: &[Vec<f64>] = match options.norm_source {
        NormSource::Checkpoints => buffer.delta_norms(),
        NormSource::MiniBatches => buffer.minibatch_norms.as_deref().ok_or_else(|| {
            Error::InvalidArgument("buffer has no per-mini-batch norms recorded".into())
        })?,
    };
    let norms: Vec<Vec<f64>> = match options.granularity {
        BetaGranularity::PerGroup => norms.to_vec(),
        BetaGranularity::Global => {
            // The norm of the whole difference follows from the per-group norms.
            let groups = buffer.num_groups();
            norms
                .iter()
                .map(|row| vec![row.iter().map(|v| v * v).sum::<f64>().sqrt(); groups])
                .collect()
        }
    };
    let beta = beta_table(&norms, anchors)?;
    ConvexTrajectory::new(
        buffer.spec.clone(),
        anchors.to_vec(),
        anchors.iter().map(|&a| buffer.checkpoint(a).clone()).collect(),
        beta,
    )
}

/// Cumulative step-norm fractions per segment; `norms` is `[K][groups]`.
pub fn beta_table(norms: &[Vec<f64>], anchors: &[usize]) -> Result<Vec<Vec<f64>>> {
    let epochs = norms.len();
    validate_anchors(anchors, epochs)?;
    let groups = norms.first().map_or(0, Vec::len);
    let mut beta = vec![vec![0.0; groups]; epochs + 1];
    for seg in anchors.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        for g in 0..groups {
            let total: f64 = norms[a..b].iter().map(|row| row[g]).sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::DegenerateSegment(format!(
                    "segment [{a}, {b}] has total step norm {total} in group {g}"
                )));
            }
            let mut cum = 0.0;
            for t in a + 1..=b {
                cum += norms[t - 1][g];
                beta[t][g] = cum / total;
            }
        }
    }
    Ok(beta)
}

impl ConvexTrajectory {
    pub fn new(
        spec: ModelSpec,
        anchors: Vec<usize>,
        anchor_params: Vec<ParamVector>,
        beta: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let epochs = beta.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidArgument("beta table must have at least one row".into())
        })?;
        validate_anchors(&anchors, epochs)?;
        if anchor_params.len() != anchors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} anchors but {} anchor checkpoints",
                anchors.len(),
                anchor_params.len()
            )));
        }
        let groups = spec.num_groups();
        if beta.iter().any(|row| row.len() != groups) {
            return Err(Error::InvalidArgument(format!(
                "beta rows must have {groups} entries"
            )));
        }
        for p in &anchor_params {
            ParamVector::from_groups(&spec, p.groups().to_vec())?;
        }
        let traj = ConvexTrajectory {
            spec,
            epochs,
            anchors,
            anchor_params,
            beta,
        };
        traj.check_beta()?;
        Ok(traj)
    }

    fn check_beta(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.beta[0].iter().any(|&v| v != 0.0) {
            return bad("beta at t = 0 must be zero".into());
        }
        for seg in self.anchors.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            for g in 0..self.spec.num_groups() {
                let mut prev = 0.0;
                for t in a + 1..=b {
                    let v = self.beta[t][g];
                    if !(0.0..=1.0).contains(&v) || v < prev {
                        return bad(format!("beta[{t}][{g}] = {v} breaks monotonicity in [0, 1]"));
                    }
                    prev = v;
                }
                if (self.beta[b][g] - 1.0).abs() > 1e-12 {
                    return bad(format!("beta at segment end {b} is {} in group {g}", self.beta[b][g]));
                }
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn anchor_params(&self) -> &[ParamVector] {
        &self.anchor_params
    }

    /// `[(K + 1)][groups]` interpolation weights.
    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    /// Index of the segment holding `c`; anchor positions belong to the
    /// segment they start, except `K`.
    fn segment_of(&self, c: f64) -> usize {
        let segments = self.anchors.len() - 1;
        (0..segments)
            .rev()
            .find(|&j| self.anchors[j] as f64 <= c)
            .unwrap_or(0)
    }

    fn local_beta(&self, segment: usize, t: usize, g: usize) -> f64 {
        if t == self.anchors[segment] {
            0.0
        } else {
            self.beta[t][g]
        }
    }

    /// Parameters at a real-valued epoch `c in [0, K]`.
    pub fn sample_continuous(&self, c: f64) -> Result<ParamVector> {
        if !(c >= 0.0 && c <= self.epochs as f64) {
            return Err(Error::InvalidArgument(format!(
                "timestep {c} outside [0, {}]",
                self.epochs
            )));
        }
        let j = self.segment_of(c);
        let lo = c.floor() as usize;
        let hi = c.ceil() as usize;
        let eta = c - c.floor();
        let weights: Vec<f64> = (0..self.spec.num_groups())
            .map(|g| (1.0 - eta) * self.local_beta(j, lo, g) + eta * self.local_beta(j, hi, g))
            .collect();
        self.anchor_params[j].lerp_groups(&self.anchor_params[j + 1], &weights)
    }

    /// The discrete waypoint at integer epoch `t`.
    pub fn waypoint(&self, t: usize) -> Result<ParamVector> {
        self.sample_continuous(t as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    /// Smallest model (a 1x1 weight and a 1-entry bias), both groups
    /// following the same scalar path.
    fn scalar_buffer(values: &[f64]) -> MttBuffer {
        let spec = ModelSpec::new(1, vec![], 1).unwrap();
        let cps = values
            .iter()
            .map(|&v| {
                ParamVector::from_groups(
                    &spec,
                    vec![Tensor::matrix(1, 1, vec![v]).unwrap(), Tensor::vector(vec![v])],
                )
                .unwrap()
            })
            .collect();
        MttBuffer::from_checkpoints(0, spec, cps).unwrap()
    }

    #[test]
    fn hand_computed_beta() {
        let b = scalar_buffer(&[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(b.delta_norms()[1], vec![2.0, 2.0]);
        let traj = convexify(&b, &[0, 3]).unwrap();
        let col: Vec<f64> = traj.beta().iter().map(|r| r[0]).collect();
        assert_eq!(col, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn hand_computed_continuous_sample() {
        let b = scalar_buffer(&[0.0, 1.0, 3.0, 4.0]);
        let traj = convexify(&b, &[0, 3]).unwrap();
        let p = traj.sample_continuous(1.5).unwrap();
        assert_eq!(p.group(0).data(), &[2.0]);
        assert_eq!(traj.sample_continuous(0.0).unwrap(), *b.checkpoint(0));
        assert_eq!(traj.sample_continuous(3.0).unwrap(), *b.checkpoint(3));
        assert!(traj.sample_continuous(3.5).is_err());
        assert!(traj.sample_continuous(-0.1).is_err());
        assert!(traj.sample_continuous(f64::NAN).is_err());
    }

    #[test]
    fn single_epoch_trajectory() {
        let b = scalar_buffer(&[2.0, -1.0]);
        let traj = convexify(&b, &[0, 1]).unwrap();
        assert_eq!(traj.beta(), &[vec![0.0, 0.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn piecewise_segments_hit_interior_anchors() {
        let b = scalar_buffer(&[0.0, 2.0, 1.0, 5.0, 6.0]);
        let traj = convexify(&b, &[0, 2, 4]).unwrap();
        // Segment [0, 2]: norms 2, 1 -> beta 2/3 at t = 1.
        assert!((traj.beta()[1][0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(traj.waypoint(2).unwrap(), *b.checkpoint(2));
        // Interior anchors are reached from both sides.
        let just_before = traj.sample_continuous(2.0 - 1e-12).unwrap().group(0).data()[0];
        assert!((just_before - 1.0).abs() < 1e-9);
        // Segment [2, 4]: norms 4, 1 -> waypoint 3 at 1 + 0.8 * 5 = 5.
        assert!((traj.waypoint(3).unwrap().group(0).data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_segment_is_an_error() {
        let b = scalar_buffer(&[1.0, 1.0, 2.0]);
        assert!(matches!(convexify(&b, &[0, 1, 2]), Err(Error::DegenerateSegment(_))));
        assert!(convexify(&b, &[0, 2]).is_ok());
    }

    #[test]
    fn anchor_parsing() {
        assert_eq!(parse_anchors("0,K", 20).unwrap(), vec![0, 20]);
        assert_eq!(parse_anchors("0, 6,25,k", 50).unwrap(), vec![0, 6, 25, 50]);
        assert!(parse_anchors("0,x,K", 20).is_err());
        assert!(parse_anchors("0,10,5,K", 20).is_err());
        assert!(parse_anchors("1,K", 20).is_err());
        assert!(parse_anchors("0,30", 20).is_err());
    }

    #[test]
    fn minibatch_source_requires_recorded_norms() {
        let b = scalar_buffer(&[0.0, 1.0, 3.0]);
        let opts = ConvexifyOptions {
            norm_source: NormSource::MiniBatches,
            ..Default::default()
        };
        assert!(convexify_with(&b, &[0, 2], opts).is_err());
    }
}
