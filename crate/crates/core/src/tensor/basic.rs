//! Elementwise and reduction primitives.

use crate::error::{Error, Result};

use super::{Graph, Real, Tensor, Var};

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::from_parts(x.shape().clone(), data);
        self.record(
            "add",
            out,
            &[a, b],
            |_, _, g, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::from_parts(x.shape().clone(), data);
        self.record(
            "mul",
            out,
            &[a, b],
            |inputs, _, g, needs| {
                let (x, y) = (inputs[0].data(), inputs[1].data());
                let ga = needs[0].then(|| g.iter().zip(y).map(|(g, y)| *g * *y).collect());
                let gb = needs[1].then(|| g.iter().zip(x).map(|(g, x)| *g * *x).collect());
                vec![ga, gb]
            },
        )
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().clone(), x.data().iter().map(|v| *v * factor).collect());
        self.record(
            "scale",
            out,
            &[a],
            move |_, _, g, _| {
                vec![Some(g.iter().map(|v| *v * factor).collect())]
            },
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.record(
            "sum",
            Tensor::scalar(total),
            &[a],
            |inputs, _, g, _| vec![Some(vec![g[0]; inputs[0].numel()])],
        )
    }

    /// `Σ weights[i] · a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let x = self.value(a);
        if weights.len() != x.numel() {
            return Err(Error::LengthMismatch {
                expected: x.numel(),
                actual: weights.len(),
            });
        }
        let total = x.data().iter().zip(&weights).map(|(v, w)| *v * *w).sum::<T>();
        self.record(
            "weighted_sum",
            Tensor::scalar(total),
            &[a],
            move |_, _, g, _| {
                vec![Some(weights.iter().map(|w| *w * g[0]).collect())]
            },
        )
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        self.record(
            "reshape",
            out,
            &[a],
            |_, _, g, _| vec![Some(g.to_vec())],
        )
    }

    /// Picks element `index` of the flattened tensor as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        let value = *x
            .data()
            .get(index)
            .ok_or_else(|| Error::invalid(format!("index {index} out of range for {}", x.shape())))?;
        self.record(
            "select",
            Tensor::scalar(value),
            &[a],
            move |inputs, _, g, _| {
                let mut out = vec![T::zero(); inputs[0].numel()];
                out[index] = g[0];
                vec![Some(out)]
            },
        )
    }
}
