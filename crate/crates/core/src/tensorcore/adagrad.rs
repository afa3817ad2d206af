//! Adagrad with per-coordinate accumulators.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::TensorError;

/// One Adagrad update:
/// `acc += g²; p -= lr * g / (sqrt(acc) + eps)` — accumulate first, then
/// scale, with `eps` added to the root (not under it).
pub fn adagrad_step(
    param: &mut Tensor,
    grad: &Tensor,
    acc: &mut Tensor,
    lr: f32,
    eps: f32,
) -> Result<(), TensorError> {
    if param.dims() != grad.dims() || param.dims() != acc.dims() {
        return Err(TensorError::DimMismatch {
            op: "adagrad_step",
            lhs: param.dims().to_vec(),
            rhs: grad.dims().to_vec(),
        });
    }
    let p = param.data_mut();
    let a = acc.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        a[i] += g * g;
        p[i] -= lr * g / (a[i].sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for a named parameter set. Accumulators are created on
/// first sight of a name and kept across steps; `lr`/`eps` are fixed at
/// construction.
pub struct Adagrad {
    lr: f32,
    eps: f32,
    accum: BTreeMap<String, Tensor>,
}

impl Adagrad {
    pub fn new(lr: f32, eps: f32) -> Self {
        Adagrad {
            lr,
            eps,
            accum: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<(), TensorError> {
        let acc = self
            .accum
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.dims()));
        adagrad_step(param, grad, acc, self.lr, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        // zero accumulator, g = 2, lr = 0.1:
        // acc -> 4, step = 0.1 * 2 / (2 + 1e-8) ≈ 0.1
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut acc = Tensor::scalar(0.0);
        adagrad_step(&mut p, &g, &mut acc, 0.1, 1e-8).unwrap();
        assert_eq!(acc.data()[0], 4.0);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn repeated_identical_grads_shrink_steps() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut acc = Tensor::scalar(0.0);
        let mut prev = 0.0f32;
        let mut deltas = Vec::new();
        for _ in 0..5 {
            adagrad_step(&mut p, &g, &mut acc, 0.1, 1e-8).unwrap();
            deltas.push((prev - p.data()[0]).abs());
            prev = p.data()[0];
        }
        for w in deltas.windows(2) {
            assert!(w[1] < w[0], "step sizes must be strictly decreasing");
        }
    }

    #[test]
    fn named_state_is_independent() {
        let mut opt = Adagrad::new(0.1, 1e-8);
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        opt.step("a", &mut a, &g).unwrap();
        opt.step("a", &mut a, &g).unwrap();
        opt.step("b", &mut b, &g).unwrap();
        // b saw a fresh accumulator, its first step is the big one
        assert!((b.data()[0] - 0.9).abs() < 1e-6);
        assert!(a.data()[0] < b.data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut acc = Tensor::zeros(&[2]);
        assert!(adagrad_step(&mut p, &g, &mut acc, 0.1, 1e-8).is_err());
    }
}
