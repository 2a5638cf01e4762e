use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Probabilities are clamped from below before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

impl<T: Real> Graph<T> {
    /// `W v + b` for `v: (D)`, `W: (out, D)`, `b: (out)`.
    pub fn linear(&mut self, v: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(v), self.value(weights), self.value(bias));
        let d = x.numel();
        let (out_dim, in_dim) = match w.dims() {
            [o, i] => (*o, *i),
            other => return Err(Error::shape("linear", format!("weights must be (out, in), got {other:?}"))),
        };
        if x.dims() != [in_dim] || b.dims() != [out_dim] {
            return Err(Error::shape(
                "linear",
                format!("input {} / bias {} vs weights {}", x.shape(), b.shape(), w.shape()),
            ));
        }
        let out: Vec<T> = (0..out_dim)
            .map(|o| {
                w.data()[o * d..(o + 1) * d]
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| *a * *b)
                    .sum::<T>()
                    + b.data()[o]
            })
            .collect();
        let out = Tensor::from_parts(Shape::new([out_dim])?, out);
        self.record("linear", out, &[v, weights, bias], move |inputs, _, grad, needs| {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            let gx = needs[0].then(|| {
                (0..d)
                    .map(|i| (0..out_dim).map(|o| w[o * d + i] * grad[o]).sum::<T>())
                    .collect()
            });
            let gw = needs[1].then(|| {
                (0..out_dim)
                    .flat_map(|o| x.iter().map(move |xi| *xi * grad[o]))
                    .collect()
            });
            vec![gx, gw, needs[2].then(|| grad.to_vec())]
        })
    }

    /// Adds a per-channel bias to `x: (S, C, H, W)`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).shape().as_scwh("add_channel_bias")?;
        if self.value(bias).dims() != [c] {
            return Err(Error::shape("add_channel_bias", format!("bias must have {c} entries")));
        }
        let plane = h * w;
        let b = self.value(bias).data();
        let input = self.value(x);
        let data = input
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[(i / plane) % c])
            .collect();
        let out = Tensor::from_parts(input.shape().clone(), data);
        self.record("add_channel_bias", out, &[x, bias], move |_, _, grad, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for (p, chunk) in grad.chunks(plane).enumerate() {
                    gb[p % c] += chunk.iter().copied().sum::<T>();
                }
                gb
            });
            vec![needs[0].then(|| grad.to_vec()), gb]
        })
    }

    /// Numerically stable softmax of a 1-D logit vector.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().rank() != 1 {
            return Err(Error::shape("softmax", format!("expected a vector, got {}", z.shape())));
        }
        let max = z.data().iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let exp: Vec<T> = z.data().iter().map(|v| (*v - max).exp()).collect();
        let total = exp.iter().copied().sum::<T>();
        let probs = exp.into_iter().map(|e| e / total).collect();
        let out = Tensor::from_parts(z.shape().clone(), probs);
        self.record("softmax", out, &[logits], |_, out, grad, _| {
            let p = out.data();
            let dot = p.iter().zip(grad).map(|(p, g)| *p * *g).sum::<T>();
            vec![Some(p.iter().zip(grad).map(|(p, g)| *p * (*g - dot)).collect())]
        })
    }

    /// Fully-connected layer followed by softmax.
    pub fn linear_softmax(&mut self, v: Var, weights: Var, bias: Var) -> Result<Var> {
        let logits = self.linear(v, weights, bias)?;
        self.softmax(logits)
    }

    /// `-ln(max(probs[label], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let p = self.value(probs);
        if p.shape().rank() != 1 {
            return Err(Error::shape("cross_entropy", format!("expected a vector, got {}", p.shape())));
        }
        if label >= p.numel() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", p.numel())));
        }
        let floor = T::from_f64_lossy(PROB_FLOOR);
        let pl = p.data()[label];
        let loss = -pl.max(floor).ln();
        let n = p.numel();
        self.note_pattern([(pl >= floor) as usize]);
        self.record("cross_entropy", Tensor::scalar(loss), &[probs], move |inputs, _, grad, _| {
            let mut gp = vec![T::zero(); n];
            let pl = inputs[0].data()[label];
            if pl >= floor {
                gp[label] = -grad[0] / pl;
            }
            vec![Some(gp)]
        })
    }
}
