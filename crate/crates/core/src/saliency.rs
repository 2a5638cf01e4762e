//! Full-gradient saliency maps and most-informative-slice selection.
//!
//! For a piecewise-linear network with additive biases the output splits
//! exactly into an input term and one term per bias:
//! `f(x) = <grad_x f, x> + sum_l <grad_{b_l} f, b_l>`. The heat-map
//! aggregates the spatial versions of those terms. In ELNet the additive
//! biases are the normalization shifts β; the classifier bias is a single
//! number with no spatial extent, so it enters [`Decomposition`] but not the
//! map. Normalization divides by an input-dependent σ, so for the full
//! network the decomposition is only approximately complete.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::resize::resize_plane;
use crate::error::{Error, Result};
use crate::model::{ElNet, ForwardOptions};
use crate::tensor::{Graph, Tensor, Var};

/// Raw terms of the full-gradient split of a scalar output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub output: f64,
    /// `<grad_x f, x>`.
    pub input_term: f64,
    /// `<grad_b f, b>` per bias, in the order given.
    pub bias_terms: Vec<f64>,
}

impl Decomposition {
    /// `output - (input_term + sum of bias terms)`.
    pub fn residual(&self) -> f64 {
        self.output - self.input_term - self.bias_terms.iter().sum::<f64>()
    }
}

/// Back-propagates `output` and splits it. `input` and every bias must
/// require gradients.
pub fn decompose(g: &mut Graph<f64>, output: Var, input: Var, biases: &[Var]) -> Result<Decomposition> {
    let value = g.value(output).item()?;
    g.backward(output)?;
    let dot = |g: &Graph<f64>, v: Var| -> Result<f64> {
        let grad = g
            .grad(v)
            .ok_or_else(|| Error::invalid("decomposition leaf does not require gradients"))?;
        Ok(grad.iter().zip(g.value(v).data()).map(|(a, b)| a * b).sum())
    };
    Ok(Decomposition {
        output: value,
        input_term: dot(g, input)?,
        bias_terms: biases.iter().map(|b| dot(g, *b)).collect::<Result<_>>()?,
    })
}

/// Per-slice heat in `[0, 1]` for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume {
    /// `(S, H, W)`.
    pub heat: Tensor<f32>,
    /// Total heat of every slice.
    pub slice_scores: Vec<f64>,
    pub target: usize,
    pub decomposition: Decomposition,
}

/// Absolute value, then min-max rescaling over the whole tensor; a
/// constant tensor maps to zeros.
fn psi(values: &[f64]) -> Vec<f64> {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; abs.len()];
    }
    abs.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// FullGrad heat-map of `target`'s logit for `input: (S, 1, H, W)`,
/// computed at 64-bit in eval mode.
pub fn fullgrad(net: &ElNet, input: &Tensor<f32>, target: usize) -> Result<HeatmapVolume> {
    if target > 1 {
        return Err(Error::invalid(format!("class {target} out of range for 2 classes")));
    }
    let dims = input.dims().to_vec();
    let mut g = Graph::<f64>::new();
    let opts = ForwardOptions {
        track_input: true,
        track_params: true,
        ..ForwardOptions::eval()
    };
    let out = net.forward(&mut g, input.cast(), &opts)?;
    for site in &out.norm_sites {
        g.retain_grad(site.output);
    }
    let f = g.select(out.logits, target)?;
    let mut biases: Vec<Var> = out.norm_sites.iter().map(|s| out.params[s.beta]).collect();
    biases.push(*out.params.last().expect("classifier bias"));
    let decomposition = decompose(&mut g, f, out.input, &biases)?;

    let (s, h, w) = (dims[0], dims[2], dims[3]);
    let x = g.value(out.input).data();
    let gx = g.grad(out.input).expect("input gradient");
    let mut heat = psi(&x.iter().zip(gx).map(|(a, b)| a * b).collect::<Vec<_>>());

    for site in &out.norm_sites {
        let y = g.value(site.output);
        let (_, c, sh, sw) = y.shape().as_scwh("fullgrad")?;
        let gy = g.grad(site.output).expect("retained gradient");
        let beta = g.value(out.params[site.beta]).data();
        let plane = sh * sw;
        let contrib: Vec<f64> = gy.iter().enumerate().map(|(i, v)| v * beta[(i / plane) % c]).collect();
        let mapped = psi(&contrib);
        let planes: Vec<Vec<f64>> = mapped
            .par_chunks(plane)
            .map(|p| resize_plane(p, [sh, sw], [h, w]))
            .collect();
        for (i, p) in planes.iter().enumerate() {
            let slice = &mut heat[(i / c) * h * w..(i / c + 1) * h * w];
            for (dst, v) in slice.iter_mut().zip(p) {
                *dst += v;
            }
        }
    }

    let max = heat.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        heat.iter_mut().for_each(|v| *v /= max);
    }
    let slice_scores = heat.chunks(h * w).map(|p| p.iter().sum()).collect();
    Ok(HeatmapVolume {
        heat: Tensor::from_vec([s, h, w], heat.into_iter().map(|v| v as f32).collect())?,
        slice_scores,
        target,
        decomposition,
    })
}

/// Heat-maps of several volumes, computed in parallel.
pub fn fullgrad_all(net: &ElNet, inputs: &[Tensor<f32>], target: usize) -> Result<Vec<HeatmapVolume>> {
    inputs.par_iter().map(|x| fullgrad(net, x, target)).collect()
}

/// Index of the slice with the largest total heat; the lowest index wins
/// ties.
pub fn most_informative_slice(h: &HeatmapVolume) -> usize {
    let mut best = 0;
    for (i, v) in h.slice_scores.iter().enumerate() {
        if *v > h.slice_scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize)]
struct Sidecar<'a> {
    target: usize,
    shape: &'a [usize],
    slice_scores: &'a [f64],
    most_informative_slice: usize,
    slice_files: Vec<String>,
    decomposition: &'a Decomposition,
}

/// Writes `slice_NNN.pgm` (8-bit binary PGM) per slice and `saliency.json`.
pub fn write_heatmaps(h: &HeatmapVolume, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let d = h.heat.dims();
    let (height, width) = (d[1], d[2]);
    let mut files = Vec::new();
    for (i, plane) in h.heat.data().chunks(height * width).enumerate() {
        let name = format!("slice_{i:03}.pgm");
        let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
        bytes.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(dir.join(&name), bytes)?;
        files.push(name);
    }
    let sidecar = Sidecar {
        target: h.target,
        shape: d,
        slice_scores: &h.slice_scores,
        most_informative_slice: most_informative_slice(h),
        slice_files: files.clone(),
        decomposition: &h.decomposition,
    };
    std::fs::write(dir.join("saliency.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blurpool::BlurPoolSpec;
    use crate::model::ModelConfig;

    fn tiny_net() -> ElNet {
        ElNet::new(ModelConfig {
            k: 1,
            input: [32, 32],
            blur: BlurPoolSpec::uniform(3),
            depth: 2,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn input(s: usize, seed: u64) -> Tensor<f32> {
        Tensor::seeded_uniform([s, 1, 32, 32], 0.0, 1.0, seed).unwrap()
    }

    fn randomize_biases(net: &mut ElNet) {
        let idx: Vec<usize> = (0..net.layout().len())
            .filter(|&i| net.layout()[i].name.ends_with("beta") || net.layout()[i].name == "fc.bias")
            .collect();
        for (n, i) in idx.into_iter().enumerate() {
            let dims = net.params()[i].dims().to_vec();
            net.params_mut()[i] = Tensor::seeded_uniform(dims, -0.5, 0.5, 100 + n as u64).unwrap();
        }
    }

    #[test]
    fn shape_range_and_normalization() {
        let mut net = tiny_net();
        randomize_biases(&mut net);
        for s in [1, 3] {
            let h = fullgrad(&net, &input(s, 1), 1).unwrap();
            assert_eq!(h.heat.dims(), &[s, 32, 32]);
            assert!(h.heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(h.heat.max_abs(), 1.0);
            assert_eq!(h.slice_scores.len(), s);
        }
        assert!(fullgrad(&net, &input(2, 1), 2).is_err());
    }

    #[test]
    fn deterministic() {
        let mut net = tiny_net();
        randomize_biases(&mut net);
        let x = input(3, 2);
        assert_eq!(fullgrad(&net, &x, 0).unwrap(), fullgrad(&net, &x, 0).unwrap());
    }

    #[test]
    fn zero_biases_leave_only_the_input_term() {
        let net = tiny_net();
        let x = input(2, 4);
        let h = fullgrad(&net, &x, 1).unwrap();

        // independent evaluation of |grad_x f * x|, rescaled
        let mut g = Graph::<f64>::new();
        let opts = ForwardOptions {
            track_input: true,
            ..ForwardOptions::eval()
        };
        let out = net.forward(&mut g, x.cast(), &opts).unwrap();
        let f = g.select(out.logits, 1).unwrap();
        g.backward(f).unwrap();
        let prod: Vec<f64> = g
            .grad(out.input)
            .unwrap()
            .iter()
            .zip(g.value(out.input).data())
            .map(|(a, b)| (a * b).abs())
            .collect();
        let (lo, hi) = prod.iter().fold((f64::INFINITY, 0.0f64), |(l, u), v| (l.min(*v), u.max(*v)));
        for (got, p) in h.heat.data().iter().zip(&prod) {
            assert!((*got as f64 - (p - lo) / (hi - lo)).abs() < 1e-6);
        }
        assert!(h.decomposition.bias_terms.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn slice_selection_rules() {
        let mk = |scores: Vec<f64>| HeatmapVolume {
            heat: Tensor::zeros([scores.len(), 1, 1]).unwrap(),
            slice_scores: scores,
            target: 1,
            decomposition: Decomposition {
                output: 0.0,
                input_term: 0.0,
                bias_terms: vec![],
            },
        };
        assert_eq!(most_informative_slice(&mk(vec![0.3])), 0);
        assert_eq!(most_informative_slice(&mk(vec![1.0; 5])), 0);
        assert_eq!(most_informative_slice(&mk(vec![0.1, 0.5, 0.9, 0.9, 0.2])), 2);
    }

    #[test]
    fn files_are_written() {
        let mut net = tiny_net();
        randomize_biases(&mut net);
        let h = fullgrad(&net, &input(2, 5), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_heatmaps(&h, dir.path()).unwrap();
        assert_eq!(files, vec!["slice_000.pgm", "slice_001.pgm"]);
        let pgm = std::fs::read(dir.path().join("slice_001.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(pgm.len(), 13 + 32 * 32);
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("saliency.json")).unwrap()).unwrap();
        assert_eq!(json["most_informative_slice"].as_u64().unwrap() as usize, most_informative_slice(&h));
    }
}
