//! Finite-difference verification of backward rules at 64-bit precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Entries whose analytic and numeric derivatives are both below this
/// magnitude are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Number of input coordinates compared.
    pub checked: usize,
    /// Coordinates left out because the perturbation crossed a kink.
    pub skipped: usize,
}

/// Central-difference gradient checker.
///
/// The operation output `y` is projected onto a fixed random direction `r`
/// so that the checked scalar is `Σ r·y`. Each numeric derivative divides by
/// the step actually realized in floating point, `(x + h) − (x − h)`, which
/// makes the check exact for operations that are exactly linear.
///
/// Piecewise operations (ReLU, max pooling, the cross-entropy clamp) report
/// which piece is active. A coordinate whose `±step` perturbation changes
/// any piece straddles a non-differentiable point and is skipped.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub seed: u64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            seed: 0x6772_6164,
            max_coords: None,
        }
    }
}

impl GradCheck {
    pub fn run<F>(&self, op: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let mut graph = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let out = op(&mut graph, &vars)?;
        let projection: Vec<f64> = (0..graph.value(out).numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = graph.weighted_sum(out, projection.clone())?;
        graph.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| graph.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();

        let evaluate = |values: &[Tensor<f64>]| -> Result<(Vec<f64>, Option<u64>)> {
            let mut g = Graph::new();
            g.track_pattern();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let y = op(&mut g, &vars)?;
            let pattern = g.pattern();
            let y = g.value(y);
            if !y.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            Ok((y.data().to_vec(), pattern))
        };
        let (_, base_pattern) = evaluate(inputs)?;

        let mut max_rel_err = 0.0f64;
        let mut checked = 0;
        let mut skipped = 0;
        let mut perturbed = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(limit) if limit < n => {
                    let mut c = sample(&mut rng, n, limit).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let x = input.data()[j];
                let (hi, lo) = (x + self.step, x - self.step);
                perturbed[i].data_mut()[j] = hi;
                let (y_hi, p_hi) = evaluate(&perturbed)?;
                perturbed[i].data_mut()[j] = lo;
                let (y_lo, p_lo) = evaluate(&perturbed)?;
                perturbed[i].data_mut()[j] = x;
                if p_hi != base_pattern || p_lo != base_pattern {
                    skipped += 1;
                    continue;
                }

                let realized = hi - lo;
                let numeric = y_hi
                    .iter()
                    .zip(&y_lo)
                    .zip(&projection)
                    .map(|((p, q), r)| r * ((p - q) / realized))
                    .sum::<f64>();
                let a = analytic[i][j];
                let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
                max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
                checked += 1;
            }
        }
        Ok(GradCheckReport {
            max_rel_err,
            pass: max_rel_err < tolerance,
            checked,
            skipped,
        })
    }
}

/// Checks a single-input operation with default settings.
pub fn grad_check<F>(op: F, input: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    GradCheck::default().run(|g, v| op(g, v[0]), std::slice::from_ref(input), tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::seeded_uniform([3, 4], -2.0, 2.0, 9).unwrap();
        let report = grad_check(|g, v| g.reshape(v, [12]), &x, 1e-12).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.pass);
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn detects_wrong_backward_rule() {
        // forward doubles, backward claims triple
        let x = Tensor::seeded_uniform([5], -1.0, 1.0, 3).unwrap();
        let report = grad_check(
            |g, v| {
                let out = Tensor::from_vec([5], g.value(v).data().iter().map(|a| 2.0 * a).collect())?;
                g.record(
                    "bogus",
                    out,
                    &[v],
                    |_, _, gr, _| {
                        vec![Some(gr.iter().map(|a| 3.0 * a).collect())]
                    },
                )
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn subsampled_coordinates() {
        let x = Tensor::seeded_uniform([50], -1.0, 1.0, 3).unwrap();
        let check = GradCheck {
            max_coords: Some(7),
            ..GradCheck::default()
        };
        let report = check
            .run(
                |g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    g.sum(sq)
                },
                &[x],
                1e-6,
            )
            .unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::from_vec([3], vec![5e-5, -0.5, 0.5]).unwrap();
        let report = grad_check(|g, v| g.relu(v), &x, 1e-9).unwrap();
        assert_eq!((report.checked, report.skipped), (2, 1));
        assert!(report.pass, "{report:?}");
    }
}
