//! Multi-slice normalization.
//!
//! Both variants standardize each slice of an `(S, C, H, W)` activation on
//! its own, so the slice axis never mixes statistics:
//!
//! * layer variant: one mean/variance per slice, over all `(C, H, W)`;
//! * contrast variant: one mean/variance per `(slice, channel)` plane.
//!
//! The standardized value `x̂` then goes through a per-channel affine map
//! `y = γ_c · x̂ + β_c`. Variances are biased (divided by the group size).

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// ε used by every normalization layer unless overridden.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    /// Statistics per slice.
    Layer,
    /// Statistics per (slice, channel).
    Contrast,
    /// Statistics per channel across all slices (ablation baseline).
    Batch,
}

impl NormVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            NormVariant::Layer => "layer",
            NormVariant::Contrast => "contrast",
            NormVariant::Batch => "batch",
        }
    }
}

impl std::str::FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(NormVariant::Layer),
            "contrast" => Ok(NormVariant::Contrast),
            "batch" => Ok(NormVariant::Batch),
            other => Err(Error::invalid(format!("unknown normalization variant {other:?}"))),
        }
    }
}

/// Learned affine parameters of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> NormParams<T> {
    /// γ = 1, β = 0, ε = 1e-8.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: Tensor::full([channels], T::one())?,
            beta: Tensor::zeros([channels])?,
            eps: DEFAULT_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Which elements share a mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Grouping {
    Slice,
    SliceChannel,
    Channel,
}

impl Grouping {
    fn groups(self, slices: usize, channels: usize) -> usize {
        match self {
            Grouping::Slice => slices,
            Grouping::SliceChannel => slices * channels,
            Grouping::Channel => channels,
        }
    }

    fn group_of(self, slice: usize, channel: usize, channels: usize) -> usize {
        match self {
            Grouping::Slice => slice,
            Grouping::SliceChannel => slice * channels + channel,
            Grouping::Channel => channel,
        }
    }
}

/// Per-group means and biased variances from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn group_stats<T: Real>(x: &Tensor<T>, grouping: Grouping) -> Result<NormStats> {
    let (s, c, h, w) = x.shape().as_scwh("normalization")?;
    let plane = h * w;
    let groups = grouping.groups(s, c);
    let count = (x.numel() / groups) as f64;
    let mut sum = vec![0.0f64; groups];
    for (p, chunk) in x.data().chunks(plane).enumerate() {
        let g = grouping.group_of(p / c, p % c, c);
        sum[g] += chunk.iter().map(|v| v.into_f64()).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
    let mut sq = vec![0.0f64; groups];
    for (p, chunk) in x.data().chunks(plane).enumerate() {
        let g = grouping.group_of(p / c, p % c, c);
        let m = mean[g];
        sq[g] += chunk.iter().map(|v| (v.into_f64() - m).powi(2)).sum::<f64>();
    }
    let var = sq.iter().map(|v| v / count).collect();
    Ok(NormStats { mean, var })
}

fn check_affine<T: Real>(g: &Graph<T>, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
    let (_, c, _, _) = g.value(x).shape().as_scwh(op)?;
    for p in [gamma, beta] {
        if g.value(p).dims() != [c] {
            return Err(Error::shape(
                op,
                format!("affine parameter {} does not match {c} channels", g.value(p).shape()),
            ));
        }
    }
    Ok(c)
}

/// Standardizes `x` per group and applies the per-channel affine map.
/// Gradients flow through the statistics.
pub(crate) fn standardize_affine<T: Real>(
    g: &mut Graph<T>,
    op: &'static str,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    grouping: Grouping,
) -> Result<(Var, NormStats)> {
    if eps <= 0.0 {
        return Err(Error::invalid(format!("{op}: eps must be positive")));
    }
    let c = check_affine(g, op, x, gamma, beta)?;
    let input = g.value(x);
    let (s, _, h, w) = input.shape().as_scwh(op)?;
    let plane = h * w;
    let stats = group_stats(input, grouping)?;
    let inv_std: Vec<T> = stats
        .var
        .iter()
        .map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
        .collect();
    let mean: Vec<T> = stats.mean.iter().map(|m| T::from_f64_lossy(*m)).collect();
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());

    let mut xhat = vec![T::zero(); input.numel()];
    let mut out = vec![T::zero(); input.numel()];
    for p in 0..s * c {
        let ch = p % c;
        let grp = grouping.group_of(p / c, ch, c);
        let range = p * plane..(p + 1) * plane;
        for ((xh, y), v) in xhat[range.clone()]
            .iter_mut()
            .zip(&mut out[range.clone()])
            .zip(&input.data()[range])
        {
            *xh = (*v - mean[grp]) * inv_std[grp];
            *y = gm[ch] * *xh + bt[ch];
        }
    }
    let out = Tensor::from_parts(input.shape().clone(), out);
    let groups = grouping.groups(s, c);
    let count = T::from_f64_lossy((s * c * plane / groups) as f64);

    let var = g.record(op, out, &[x, gamma, beta], move |inputs, _, grad, needs| {
        let gm = inputs[1].data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut m1 = vec![T::zero(); groups];
        let mut m2 = vec![T::zero(); groups];
        for p in 0..s * c {
            let ch = p % c;
            let grp = grouping.group_of(p / c, ch, c);
            let range = p * plane..(p + 1) * plane;
            for (gy, xh) in grad[range.clone()].iter().zip(&xhat[range]) {
                dgamma[ch] += *gy * *xh;
                dbeta[ch] += *gy;
                let dxh = *gy * gm[ch];
                m1[grp] += dxh;
                m2[grp] += dxh * *xh;
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); grad.len()];
            for p in 0..s * c {
                let ch = p % c;
                let grp = grouping.group_of(p / c, ch, c);
                let (a, b) = (m1[grp] / count, m2[grp] / count);
                let range = p * plane..(p + 1) * plane;
                for ((d, gy), xh) in dx[range.clone()].iter_mut().zip(&grad[range.clone()]).zip(&xhat[range]) {
                    *d = inv_std[grp] * (*gy * gm[ch] - a - *xh * b);
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    })?;
    Ok((var, stats))
}

impl<T: Real> Graph<T> {
    /// Layer variant: one mean and variance per slice over all `(C, H, W)`.
    pub fn layer_norm_slices(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        standardize_affine(self, "layer_norm_slices", x, gamma, beta, eps, Grouping::Slice).map(|(v, _)| v)
    }

    /// Contrast variant: one mean and variance per `(slice, channel)` plane.
    pub fn contrast_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        standardize_affine(self, "contrast_norm", x, gamma, beta, eps, Grouping::SliceChannel).map(|(v, _)| v)
    }
}

/// Statistics a forward pass of the given variant would use on `x`.
pub fn norm_stats<T: Real>(x: &Tensor<T>, variant: NormVariant) -> Result<NormStats> {
    let grouping = match variant {
        NormVariant::Layer => Grouping::Slice,
        NormVariant::Contrast => Grouping::SliceChannel,
        NormVariant::Batch => Grouping::Channel,
    };
    group_stats(x, grouping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    fn run(
        x: &Tensor<f64>,
        params: &NormParams<f64>,
        f: fn(&mut Graph<f64>, Var, Var, Var, f64) -> Result<Var>,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = g.constant(params.gamma.clone());
        let bv = g.constant(params.beta.clone());
        let y = f(&mut g, xv, gv, bv, params.eps).unwrap();
        g.value(y).clone()
    }

    fn params(c: usize, seed: u64) -> NormParams<f64> {
        NormParams {
            gamma: Tensor::seeded_uniform([c], 0.5, 2.0, seed).unwrap(),
            beta: Tensor::seeded_uniform([c], -1.0, 1.0, seed + 1).unwrap(),
            eps: DEFAULT_EPS,
        }
    }

    #[test]
    fn init_values() {
        let p = NormParams::<f32>::new(3).unwrap();
        assert_eq!(p.gamma.data(), &[1.0; 3]);
        assert_eq!(p.beta.data(), &[0.0; 3]);
        assert_eq!(p.eps, 1e-8);
    }

    #[test]
    fn constant_slice_maps_to_beta() {
        let x = Tensor::full([2, 3, 4, 4], 7.5).unwrap();
        let p = params(3, 4);
        for f in [Graph::layer_norm_slices, Graph::contrast_norm] {
            let y = run(&x, &p, f);
            for (i, v) in y.data().iter().enumerate() {
                assert_eq!(*v, p.beta.data()[(i / 16) % 3]);
            }
        }
    }

    #[test]
    fn two_value_hand_computation() {
        // values [0, 2]: mean 1, variance 1
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let p = NormParams {
            gamma: Tensor::from_vec([1], vec![3.0]).unwrap(),
            beta: Tensor::from_vec([1], vec![0.5]).unwrap(),
            eps: DEFAULT_EPS,
        };
        let y = run(&x, &p, Graph::layer_norm_slices);
        let xh = 1.0 / (1.0f64 + 1e-8).sqrt();
        assert!((y.data()[0] - (-3.0 * xh + 0.5)).abs() < 1e-12);
        assert!((y.data()[1] - (3.0 * xh + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn contrast_equals_layer_for_one_channel() {
        let x = Tensor::seeded_uniform([4, 1, 5, 6], -3.0, 3.0, 8).unwrap();
        let p = params(1, 2);
        assert_eq!(run(&x, &p, Graph::layer_norm_slices), run(&x, &p, Graph::contrast_norm));
    }

    #[test]
    fn contrast_planes_are_independent_and_scale_invariant() {
        let x = Tensor::seeded_uniform([2, 3, 5, 5], -1.0, 1.0, 10).unwrap();
        let p = params(3, 5);
        let base = run(&x, &p, Graph::contrast_norm);
        // scale plane (s=1, c=2) by 10
        let mut scaled = x.clone();
        let plane = 25;
        let offset = (3 + 2) * plane;
        scaled.data_mut()[offset..offset + plane].iter_mut().for_each(|v| *v *= 10.0);
        let y = run(&scaled, &p, Graph::contrast_norm);
        for (a, b) in base.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_slices_are_independent() {
        let x = Tensor::seeded_uniform([3, 2, 4, 4], -1.0, 1.0, 12).unwrap();
        let p = params(2, 6);
        let base = run(&x, &p, Graph::layer_norm_slices);
        let mut other = x.clone();
        other.data_mut()[..32].iter_mut().for_each(|v| *v = *v * 4.0 + 1.0);
        let y = run(&other, &p, Graph::layer_norm_slices);
        assert_eq!(base.data()[32..], y.data()[32..]);
    }

    #[test]
    fn affine_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3, 2, 2]).unwrap());
        let gm = g.constant(Tensor::zeros([2]).unwrap());
        let bt = g.constant(Tensor::zeros([3]).unwrap());
        assert!(g.layer_norm_slices(x, gm, bt, 1e-8).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let x = Tensor::seeded_uniform([2, 3, 4, 4], -2.0, 2.0, seed).unwrap();
            let p = params(3, 20 + seed);
            for f in [Graph::layer_norm_slices, Graph::contrast_norm] {
                let report = GradCheck::default()
                    .run(
                        |g, v| f(g, v[0], v[1], v[2], DEFAULT_EPS),
                        &[x.clone(), p.gamma.clone(), p.beta.clone()],
                        1e-4,
                    )
                    .unwrap();
                assert!(report.pass, "{report:?}");
            }
        }
    }
}
