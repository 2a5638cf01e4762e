use crate::error::{Error, Result};
use crate::msnorm::{standardize_affine, Grouping, NormStats};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::Mode;

/// Exponential running averages used by batch normalization in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
        }
    }

    pub fn update(&mut self, batch: &NormStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = T::from_f64_lossy((1.0 - m) * r.into_f64() + m * b);
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = T::from_f64_lossy((1.0 - m) * r.into_f64() + m * b);
        }
    }
}

impl<T: Real> Graph<T> {
    /// Batch normalization over the slice axis: in train mode each channel
    /// is standardized with statistics pooled over `(S, H, W)`, and the
    /// batch statistics are returned so the caller can update its running
    /// averages. Eval mode applies the running averages.
    pub fn batchnorm_slices(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<NormStats>)> {
        if mode == Mode::Train {
            let (y, stats) = standardize_affine(self, "batchnorm_slices", x, gamma, beta, eps, Grouping::Channel)?;
            return Ok((y, Some(stats)));
        }

        let input = self.value(x);
        let (_, c, h, w) = input.shape().as_scwh("batchnorm_slices")?;
        if running.mean.len() != c || self.value(gamma).dims() != [c] || self.value(beta).dims() != [c] {
            return Err(Error::shape("batchnorm_slices", format!("parameters do not match {c} channels")));
        }
        let plane = h * w;
        let inv_std: Vec<T> = running
            .var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.into_f64() + eps).sqrt()))
            .collect();
        let mean = running.mean.clone();
        let xhat: Vec<T> = input
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / plane) % c;
                (*v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| {
                let ch = (i / plane) % c;
                gm[ch] * *xh + bt[ch]
            })
            .collect();
        let out = Tensor::from_parts(input.shape().clone(), data);
        let y = self.record("batchnorm_slices", out, &[x, gamma, beta], move |inputs, _, grad, needs| {
            let gm = inputs[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (g, xh)) in grad.iter().zip(&xhat).enumerate() {
                let ch = (i / plane) % c;
                dgamma[ch] += *g * *xh;
                dbeta[ch] += *g;
            }
            let dx = needs[0].then(|| {
                grad.iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let ch = (i / plane) % c;
                        *g * gm[ch] * inv_std[ch]
                    })
                    .collect()
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        })?;
        Ok((y, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msnorm::{norm_stats, NormVariant, DEFAULT_EPS};
    use crate::tensor::gradcheck::GradCheck;

    fn bn(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], mode: Mode) -> (Tensor<f64>, Option<NormStats>) {
        let c = gamma.len();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = g.constant(Tensor::from_vec([c], gamma.to_vec()).unwrap());
        let bv = g.constant(Tensor::from_vec([c], beta.to_vec()).unwrap());
        let running = RunningStats::new(c);
        let (y, stats) = g.batchnorm_slices(xv, gv, bv, &running, mode, DEFAULT_EPS).unwrap();
        (g.value(y).clone(), stats)
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full([3, 2, 4, 4], -2.0).unwrap();
        let (y, _) = bn(&x, &[1.5, 0.5], &[0.25, -1.0], Mode::Train);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if (i / 16) % 2 == 0 { 0.25 } else { -1.0 });
        }
    }

    #[test]
    fn standardizes_each_channel_across_slices() {
        let x = Tensor::seeded_uniform([4, 3, 5, 5], -3.0, 5.0, 2).unwrap();
        let (y, stats) = bn(&x, &[1.0; 3], &[0.0; 3], Mode::Train);
        assert_eq!(stats.unwrap().mean.len(), 3);
        let post = norm_stats(&y, NormVariant::Batch).unwrap();
        for (m, v) in post.mean.iter().zip(&post.var) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn single_slice_equals_per_channel_spatial_standardization() {
        let x = Tensor::seeded_uniform([1, 3, 4, 4], -1.0, 1.0, 3).unwrap();
        let (y, _) = bn(&x, &[1.0; 3], &[0.0; 3], Mode::Train);
        for (c, plane) in x.data().chunks(16).enumerate() {
            let mean = plane.iter().sum::<f64>() / 16.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for (i, v) in plane.iter().enumerate() {
                let expected = (v - mean) / (var + DEFAULT_EPS).sqrt();
                assert!((y.data()[c * 16 + i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::seeded_uniform([2, 2, 3, 3], -1.0, 1.0, 4).unwrap();
        let (y, stats) = bn(&x, &[2.0, 2.0], &[1.0, 1.0], Mode::Eval);
        assert!(stats.is_none());
        // fresh running stats are mean 0, var 1
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (2.0 * b / (1.0 + DEFAULT_EPS).sqrt() + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn running_update() {
        let mut r = RunningStats::<f64>::new(1);
        r.update(&NormStats {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((r.mean[0] - 0.2).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let x = Tensor::seeded_uniform([3, 2, 3, 3], -2.0, 2.0, seed).unwrap();
            let gm = Tensor::seeded_uniform([2], 0.5, 1.5, seed + 1).unwrap();
            let bt = Tensor::seeded_uniform([2], -1.0, 1.0, seed + 2).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let running = RunningStats::new(2);
                let report = GradCheck::default()
                    .run(
                        |g, v| Ok(g.batchnorm_slices(v[0], v[1], v[2], &running, mode, DEFAULT_EPS)?.0),
                        &[x.clone(), gm.clone(), bt.clone()],
                        1e-4,
                    )
                    .unwrap();
                assert!(report.pass, "{mode:?} {report:?}");
            }
        }
    }
}
