use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Routes gradient entries to the positions that produced each maximum.
fn scatter<T: Real>(len: usize, argmax: &[usize], grad: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&i, g) in argmax.iter().zip(grad) {
        out[i] += *g;
    }
    out
}

impl<T: Real> Graph<T> {
    /// Windowed maximum over each `(slice, channel)` plane. Ties resolve to
    /// the first position in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let input = self.value(x);
        let (s, c, h, w) = input.shape().as_scwh("maxpool2d")?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} stride {stride} does not fit {h}x{w}"),
            ));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = Vec::with_capacity(s * c * ho * wo);
        let mut argmax = Vec::with_capacity(s * c * ho * wo);
        let data = input.data();
        for p in 0..s * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let len = input.numel();
        let out = Tensor::from_parts(Shape::new([s, c, ho, wo])?, out);
        self.note_pattern(argmax.iter().copied());
        self.record("maxpool2d", out, &[x], move |_, _, grad, _| {
            vec![Some(scatter(len, &argmax, grad))]
        })
    }

    /// Maximum over each whole `(H, W)` plane: `(S, C, H, W) -> (S, C)`.
    pub fn global_maxpool2d(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (s, c, h, w) = input.shape().as_scwh("global_maxpool2d")?;
        let plane = h * w;
        let mut out = Vec::with_capacity(s * c);
        let mut argmax = Vec::with_capacity(s * c);
        for (p, chunk) in input.data().chunks(plane).enumerate() {
            let mut best = 0;
            for (i, v) in chunk.iter().enumerate() {
                if *v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(p * plane + best);
        }
        let len = input.numel();
        let out = Tensor::from_parts(Shape::new([s, c])?, out);
        self.note_pattern(argmax.iter().copied());
        self.record("global_maxpool2d", out, &[x], move |_, _, grad, _| {
            vec![Some(scatter(len, &argmax, grad))]
        })
    }

    /// Elementwise maximum across the slice axis: `(S, D) -> (D)`.
    pub fn slice_maxpool(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (s, d) = match input.dims() {
            [s, d] => (*s, *d),
            other => return Err(Error::shape("slice_maxpool", format!("expected (S, D), got {other:?}"))),
        };
        let data = input.data();
        let mut out = data[..d].to_vec();
        let mut argmax: Vec<usize> = (0..d).collect();
        for si in 1..s {
            for j in 0..d {
                let v = data[si * d + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = si * d + j;
                }
            }
        }
        let len = input.numel();
        let out = Tensor::from_parts(Shape::new([d])?, out);
        self.note_pattern(argmax.iter().copied());
        self.record("slice_maxpool", out, &[x], move |_, _, grad, _| {
            vec![Some(scatter(len, &argmax, grad))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(x: Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn window_max_matches_brute_force() {
        let x = Tensor::<f64>::seeded_uniform([1, 1, 4, 4], -1.0, 1.0, 3).unwrap();
        let d = x.data().to_vec();
        let y = eval(x, |g, v| g.maxpool2d(v, 2, 2));
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| d[(2 * oy + a) * 4 + 2 * ox + b])
                    .fold(f64::MIN, f64::max);
                assert_eq!(y.data()[oy * 2 + ox], m);
            }
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let y = eval(Tensor::full([2, 3, 6, 6], 4.0).unwrap(), |g, v| g.maxpool2d(v, 2, 2));
        assert!(y.data().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn window_too_large() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros([1, 1, 3, 3]).unwrap());
        assert!(g.maxpool2d(v, 4, 1).is_err());
    }

    #[test]
    fn global_pool_shape() {
        let y = eval(Tensor::seeded_uniform([3, 64, 5, 5], 0.0, 1.0, 1).unwrap(), |g, v| {
            g.global_maxpool2d(v)
        });
        assert_eq!(y.dims(), &[3, 64]);
    }

    #[test]
    fn slice_pool_definition() {
        let y = eval(Tensor::from_vec([2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(), |g, v| {
            g.slice_maxpool(v)
        });
        assert_eq!(y.data(), &[3.0, 5.0]);
        let row = Tensor::from_vec([1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(eval(row, |g, v| g.slice_maxpool(v)).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn slice_pool_permutation_invariant() {
        let x = Tensor::<f64>::seeded_uniform([7, 64], -1.0, 1.0, 9).unwrap();
        let base = eval(x.clone(), |g, v| g.slice_maxpool(v));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..7).collect();
            order.shuffle(&mut rng);
            let permuted: Vec<f64> = order
                .iter()
                .flat_map(|&s| x.data()[s * 64..(s + 1) * 64].to_vec())
                .collect();
            let y = eval(Tensor::from_vec([7, 64], permuted).unwrap(), |g, v| g.slice_maxpool(v));
            assert_eq!(y, base);
        }
    }

    /// Shuffled, evenly spaced values: no two entries lie within a
    /// finite-difference step of each other, so no pooling window has a tie.
    fn distinct(dims: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let mut values: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Tensor::from_vec(dims.to_vec(), values).unwrap()
    }

    #[test]
    fn pooling_gradients() {
        for seed in 0..3 {
            let x = distinct(&[2, 2, 6, 6], seed);
            assert!(grad_check(|g, v| g.maxpool2d(v, 2, 2), &x, 1e-6).unwrap().pass);
            assert!(grad_check(|g, v| g.maxpool2d(v, 3, 1), &x, 1e-6).unwrap().pass);
            assert!(grad_check(|g, v| g.global_maxpool2d(v), &x, 1e-6).unwrap().pass);
            let rows = distinct(&[5, 8], seed + 10);
            let r = grad_check(|g, v| g.slice_maxpool(v), &rows, 1e-6).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
