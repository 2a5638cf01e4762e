use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Whether stochastic and batch-statistic layers behave as in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let data = input.data().iter().map(|v| v.max(T::zero())).collect();
        let out = Tensor::from_parts(input.shape().clone(), data);
        if self.pattern().is_some() {
            let active: Vec<usize> = (0..input.numel()).filter(|&i| input.data()[i] > T::zero()).collect();
            self.note_pattern(active);
        }
        self.record("relu", out, &[x], |inputs, _, grad, _| {
            let gx = inputs[0]
                .data()
                .iter()
                .zip(grad)
                .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
    /// mask is a pure function of `seed`. Eval mode is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let input = self.value(x);
        let mask: Vec<T> = (0..input.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::from_parts(input.shape().clone(), data);
        self.record("dropout", out, &[x], move |_, _, grad, _| {
            vec![Some(grad.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]
        })
    }
}
