//! Central finite-difference verification of the tape's gradients.
//!
//! The function under test is evaluated on `Graph<f64>`, so both the analytic
//! pass and the perturbed evaluations run at double precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
    /// Lower bound on the error denominator, so inputs whose gradient is
    /// structurally zero compare rounding noise against this scale.
    pub min_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_coords: None,
            min_scale: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|, min_scale)`
    /// over the checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ± perturbations straddled an activation kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_kink_tracking(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).item()?, g.kink_signature()))
}

fn coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m > 0 && numel > m => {
            let stride = numel as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compares reverse-mode gradients of a scalar-valued `f` against central
/// differences, for every tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::InvalidInput(format!(
            "grad_check needs a scalar output, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let h = config.step;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut max_mag = 0.0f64;
        let mut checked = 0;
        let mut skipped = 0;
        for c in coords(input.numel(), config.max_coords) {
            let orig = input.data()[c];
            work[idx].data_mut()[c] = orig + h;
            let (plus, sig_plus) = evaluate(&f, &work)?;
            work[idx].data_mut()[c] = orig - h;
            let (minus, sig_minus) = evaluate(&f, &work)?;
            work[idx].data_mut()[c] = orig;
            if sig_plus != sig_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[idx].data()[c];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        let max_rel_err = max_diff / max_mag.max(config.min_scale);
        reports.push(InputReport {
            max_rel_err,
            checked,
            skipped,
        });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        inputs: reports,
        max_rel_err,
        tolerance: config.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_toy_graph_passes() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.61).sin());
        let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.37).cos());
        let b = Tensor::from_fn(&[2], |i| i as f64 - 0.5);
        let proj = Tensor::from_fn(&[6], |i| 1.0 + i as f64 * 0.1);
        let report = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                g.weighted_sum(y, &proj)
            },
            &[x, w, b],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.inputs.len(), 3);
    }

    #[test]
    fn constant_graph_has_zero_gradients() {
        let x = Tensor::from_fn(&[5], |i| i as f64);
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.inputs[0].checked, 5);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::from_fn(&[3], |i| i as f64);
        let err = grad_check(|g, v| g.relu(v[0]), &[x], &GradCheckConfig::default());
        assert!(matches!(err, Err(TensorError::InvalidInput(_))));
    }

    #[test]
    fn kink_straddling_coordinate_is_skipped() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let w = Tensor::ones(&[2]);
        let report = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.weighted_sum(y, &w)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.inputs[0].skipped, 1);
        assert_eq!(report.inputs[0].checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn coordinate_subsampling() {
        assert_eq!(coords(10, Some(4)), vec![0, 2, 5, 7]);
        assert_eq!(coords(3, Some(4)), vec![0, 1, 2]);
    }
}
