use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Geometry of a square-kernel, bias-free 2D convolution applied slice by slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    slices: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// 1×1, stride 1, no padding: the input slice already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let npix = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * npix..][..npix];
                    for oh in 0..self.h_out {
                        let ih = (oh * s + ki) as isize - p as isize;
                        let dst = &mut row[oh * self.w_out..(oh + 1) * self.w_out];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * s + kj) as isize - p as isize;
                            *d = if iw >= 0 && iw < self.w as isize {
                                src[iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let npix = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * npix..][..npix];
                    for oh in 0..self.h_out {
                        let ih = (oh * s + ki) as isize - p as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in row[oh * self.w_out..(oh + 1) * self.w_out].iter().enumerate() {
                            let iw = (ow * s + kj) as isize - p as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Real>(&self, x: &[T], weights: &[T]) -> Vec<T> {
        let (rows, npix) = (self.cols_rows(), self.out_pixels());
        let mut out = vec![T::zero(); self.slices * self.c_out * npix];
        out.par_chunks_mut(self.c_out * npix)
            .zip(x.par_chunks(self.in_plane()))
            .for_each_init(
                || Vec::new(),
                |cols, (o, xs)| {
                    let cols_ref: &[T] = if self.is_pointwise() {
                        xs
                    } else {
                        cols.resize(rows * npix, T::zero());
                        self.im2col(xs, cols);
                        cols
                    };
                    T::gemm(self.c_out, rows, npix, weights, false, cols_ref, false, o, false);
                },
            );
        out
    }

    fn backward<T: Real>(
        &self,
        x: &[T],
        weights: &[T],
        grad: &[T],
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (rows, npix) = (self.cols_rows(), self.out_pixels());
        let wlen = self.c_out * rows;
        let per_slice: Vec<(Vec<T>, Vec<T>)> = x
            .par_chunks(self.in_plane())
            .zip(grad.par_chunks(self.c_out * npix))
            .map(|(xs, gs)| {
                let mut gx = Vec::new();
                let mut gw = Vec::new();
                if need_w {
                    gw = vec![T::zero(); wlen];
                    if self.is_pointwise() {
                        T::gemm(self.c_out, npix, rows, gs, false, xs, true, &mut gw, false);
                    } else {
                        let mut cols = vec![T::zero(); rows * npix];
                        self.im2col(xs, &mut cols);
                        T::gemm(self.c_out, npix, rows, gs, false, &cols, true, &mut gw, false);
                    }
                }
                if need_x {
                    if self.is_pointwise() {
                        gx = vec![T::zero(); self.in_plane()];
                        T::gemm(rows, self.c_out, npix, weights, true, gs, false, &mut gx, false);
                    } else {
                        let mut gcols = vec![T::zero(); rows * npix];
                        T::gemm(rows, self.c_out, npix, weights, true, gs, false, &mut gcols, false);
                        gx = vec![T::zero(); self.in_plane()];
                        self.col2im(&gcols, &mut gx);
                    }
                }
                (gx, gw)
            })
            .collect();

        let gx = need_x.then(|| per_slice.iter().flat_map(|(gx, _)| gx.iter().copied()).collect());
        let gw = need_w.then(|| {
            // fixed slice order keeps the reduction independent of the worker count
            let mut acc = vec![T::zero(); wlen];
            for (_, gw) in &per_slice {
                acc.iter_mut().zip(gw).for_each(|(a, g)| *a += *g);
            }
            acc
        });
        (gx, gw)
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Real> Graph<T> {
    /// Bias-free 2D convolution of every slice of `x: (S, C_in, H, W)` with
    /// `weights: (C_out, C_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, weights: Var, stride: usize, pad: usize) -> Result<Var> {
        let (slices, c_in, h, w) = self.value(x).shape().as_scwh("conv2d")?;
        let (c_out, wc_in, kh, kw) = self.value(weights).shape().as_scwh("conv2d")?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, weights expect {wc_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        let out_dims = (conv_out_dim(h, kh, stride, pad), conv_out_dim(w, kw, stride, pad));
        let (Some(h_out), Some(w_out)) = out_dims else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} stride {stride} pad {pad} does not fit {h}x{w}"),
            ));
        };
        let geom = ConvGeom {
            slices,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        };
        let data = geom.forward(self.value(x).data(), self.value(weights).data());
        let out = Tensor::from_parts(Shape::new([slices, c_out, h_out, w_out])?, data);
        self.record(
            "conv2d",
            out,
            &[x, weights],
            move |inputs, _, grad, needs| {
                let (gx, gw) = geom.backward(inputs[0].data(), inputs[1].data(), grad, needs[0], needs[1]);
                vec![gx, gw]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::GradCheck;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (s, ci, h, wd) = x.shape().as_scwh("t").unwrap();
        let (co, _, k, _) = w.shape().as_scwh("t").unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; s * co * ho * wo];
        for si in 0..s {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xx * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((si * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((si * co + o) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        Tensor::from_vec([s, co, ho, wo], out).unwrap()
    }

    fn integer_tensor(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let t = Tensor::<f64>::seeded_uniform(dims, -8.0, 8.0, seed).unwrap();
        let d = t.data().iter().map(|v| v.round()).collect();
        Tensor::from_vec(dims, d).unwrap()
    }

    fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn stem_shape() {
        let x = Tensor::<f32>::zeros([2, 1, 256, 256]).unwrap();
        let w = Tensor::<f32>::zeros([8, 1, 7, 7]).unwrap();
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv2d(xv, wv, 2, 3).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 8, 128, 128]);
    }

    #[test]
    fn pointwise_identity_kernel() {
        let x = Tensor::<f64>::seeded_uniform([2, 3, 4, 5], -1.0, 1.0, 5).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::from_vec([3, 3, 1, 1], eye).unwrap();
        assert_eq!(run_conv(&x, &w, 1, 0).data(), x.data());
    }

    #[test]
    fn matches_nested_loops_exactly_on_integers() {
        // integer-valued operands keep every partial sum exact in f64,
        // so equality holds regardless of summation order
        for (seed, (stride, pad)) in [(1, 1), (2, 0), (1, 0), (2, 1)].into_iter().enumerate() {
            let x = integer_tensor([2, 3, 5, 5], seed as u64);
            let w = integer_tensor([4, 3, 3, 3], 100 + seed as u64);
            assert_eq!(run_conv(&x, &w, stride, pad), naive_conv(&x, &w, stride, pad));
        }
        let x = integer_tensor([2, 4, 8, 8], 7);
        let w = integer_tensor([4, 4, 5, 5], 8);
        assert_eq!(run_conv(&x, &w, 1, 2), naive_conv(&x, &w, 1, 2));
    }

    #[test]
    fn matches_nested_loops_on_reals() {
        let x = Tensor::<f64>::seeded_uniform([2, 3, 5, 5], -1.0, 1.0, 11).unwrap();
        let w = Tensor::<f64>::seeded_uniform([2, 3, 3, 3], -1.0, 1.0, 12).unwrap();
        let fast = run_conv(&x, &w, 1, 1);
        let slow = naive_conv(&x, &w, 1, 1);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn slices_are_independent() {
        let x = Tensor::<f64>::seeded_uniform([3, 2, 6, 6], -1.0, 1.0, 1).unwrap();
        let w = Tensor::<f64>::seeded_uniform([3, 2, 3, 3], -1.0, 1.0, 2).unwrap();
        let base = run_conv(&x, &w, 1, 1);
        let mut x2 = x.clone();
        let plane = 2 * 6 * 6;
        x2.data_mut()[..plane].iter_mut().for_each(|v| *v *= -3.0);
        let changed = run_conv(&x2, &w, 1, 1);
        let out_plane = 3 * 6 * 6;
        assert_eq!(base.data()[out_plane..], changed.data()[out_plane..]);
        assert_ne!(base.data()[..out_plane], changed.data()[..out_plane]);
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]).unwrap());
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]).unwrap());
        assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::ShapeMismatch { .. })));
        let w = g.constant(Tensor::zeros([1, 2, 7, 7]).unwrap());
        assert!(g.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, (k, stride, pad)) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 1, 2), (7, 2, 3)]
            .into_iter()
            .enumerate()
        {
            let x = Tensor::<f64>::seeded_uniform([2, 2, 7, 7], -1.0, 1.0, seed as u64).unwrap();
            let w = Tensor::<f64>::seeded_uniform([3, 2, k, k], -1.0, 1.0, 50 + seed as u64).unwrap();
            let report = GradCheck::default()
                .run(|g, v| g.conv2d(v[0], v[1], stride, pad), &[x, w], 1e-6)
                .unwrap();
            assert!(report.pass, "k={k}: {report:?}");
        }
    }
}
