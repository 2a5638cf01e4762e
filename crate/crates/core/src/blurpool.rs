//! Anti-aliased downsampling: a normalized binomial low-pass filter applied
//! depthwise, evaluated only at every second position (stride 2, no padding).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Number of downsampling stages in the network.
pub const STAGES: usize = 5;

/// Default binomial kernel size; with it, 128 → 62 → 29 → 13 → 5 → 1.
pub const DEFAULT_KERNEL: usize = 5;

pub const STRIDE: usize = 2;

/// Binomial kernel size for each of the five downsampling stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct BlurPoolSpec {
    pub kernels: [usize; STAGES],
}

impl Default for BlurPoolSpec {
    fn default() -> Self {
        BlurPoolSpec::uniform(DEFAULT_KERNEL)
    }
}

impl BlurPoolSpec {
    pub fn uniform(b: usize) -> Self {
        BlurPoolSpec { kernels: [b; STAGES] }
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.kernels {
            binomial_kernel(b)?;
        }
        Ok(())
    }
}

/// Row `b - 1` of Pascal's triangle, normalized to sum 1.
pub fn binomial_kernel(b: usize) -> Result<Vec<f64>> {
    if b < 2 {
        return Err(Error::invalid(format!("binomial kernel size must be at least 2, got {b}")));
    }
    let mut row = vec![1.0f64];
    for _ in 1..b {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    Ok(row.into_iter().map(|v| v / total).collect())
}

/// Output extent of a blur-pool stage, `None` when the input is smaller
/// than the kernel.
pub fn blurpool_out_dim(input: usize, b: usize) -> Option<usize> {
    (input >= b).then(|| (input - b) / STRIDE + 1)
}

impl<T: Real> Graph<T> {
    /// Depthwise binomial blur with stride 2 and no padding:
    /// `(S, C, H, W) -> (S, C, (H - B) / 2 + 1, (W - B) / 2 + 1)`.
    pub fn blurpool2d(&mut self, x: Var, b: usize) -> Result<Var> {
        let k1 = binomial_kernel(b)?;
        let input = self.value(x);
        let (s, c, h, w) = input.shape().as_scwh("blurpool2d")?;
        let (Some(ho), Some(wo)) = (blurpool_out_dim(h, b), blurpool_out_dim(w, b)) else {
            return Err(Error::shape("blurpool2d", format!("{h}x{w} input is smaller than kernel {b}")));
        };
        let kernel: Vec<T> = k1
            .iter()
            .flat_map(|a| k1.iter().map(move |c| T::from_f64_lossy(a * c)))
            .collect();

        let (plane, out_plane) = (h * w, ho * wo);
        let mut out = vec![T::zero(); s * c * out_plane];
        out.par_chunks_mut(out_plane)
            .zip(input.data().par_chunks(plane))
            .for_each(|(dst, src)| {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for dy in 0..b {
                            let row = (oy * STRIDE + dy) * w + ox * STRIDE;
                            for dx in 0..b {
                                acc += kernel[dy * b + dx] * src[row + dx];
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            });

        let out = Tensor::from_parts(Shape::new([s, c, ho, wo])?, out);
        self.record("blurpool2d", out, &[x], move |_, _, grad, _| {
            let mut gx = vec![T::zero(); s * c * plane];
            gx.par_chunks_mut(plane)
                .zip(grad.par_chunks(out_plane))
                .for_each(|(dst, g)| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[oy * wo + ox];
                            for dy in 0..b {
                                let row = (oy * STRIDE + dy) * w + ox * STRIDE;
                                for dx in 0..b {
                                    dst[row + dx] += kernel[dy * b + dx] * go;
                                }
                            }
                        }
                    }
                });
            vec![Some(gx)]
        })
    }
}
