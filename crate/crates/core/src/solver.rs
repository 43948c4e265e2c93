//! SGD update rule: step size, momentum, and weight decay, applied once per
//! (layer, clock) at the aggregation point.
//!
//! Sign convention: gradients handed to `apply_update` are loss gradients and
//! the solver subtracts them (standard descent):
//!
//! ```text
//! v      <- momentum * v - lr(t) * (grad_sum + weight_decay * params)
//! params <- params + v
//! ```
//!
//! Workers scale their local mean gradient by 1/P before pushing, so the
//! server-side sum over P workers equals the mean gradient over the union
//! batch of P*K samples; a distributed BSP run is then numerically equivalent
//! to a single-process run with batch P*K.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrPolicy {
    Fixed,
    /// lr = epsilon * gamma^floor(t / step_size)
    Step {
        gamma: f64,
        step_size: u32,
    },
    /// lr = epsilon * (1 - t/total_iters)^power
    Polynomial {
        power: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Base step size; must be positive.
    pub epsilon: f64,
    /// In [0, 1).
    pub momentum: f64,
    /// Non-negative L2 coefficient.
    pub weight_decay: f64,
    pub lr_policy: LrPolicy,
    pub total_iters: u32,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at 0-based iteration `t`. The boundary `t == total_iters`
/// is accepted so the polynomial policy can be evaluated at its endpoint.
pub fn lr_at(cfg: &SolverConfig, t: u32) -> Result<f64> {
    if t > cfg.total_iters {
        return Err(Error::config(format!(
            "iteration {} out of range (total_iters {})",
            t, cfg.total_iters
        )));
    }
    let lr = match cfg.lr_policy {
        LrPolicy::Fixed => cfg.epsilon,
        LrPolicy::Step { gamma, step_size } => {
            cfg.epsilon * gamma.powi((t / step_size.max(1)) as i32)
        }
        LrPolicy::Polynomial { power } => {
            let frac = 1.0 - t as f64 / cfg.total_iters as f64;
            cfg.epsilon * frac.powf(power)
        }
    };
    Ok(lr)
}

/// Elementwise momentum-SGD step over flat buffers. `velocity` must alias the
/// parameter shape.
pub fn apply_update_slice<S: Scalar>(
    params: &mut [S],
    grad_sum: &[S],
    velocity: &mut [S],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grad_sum.len());
    debug_assert_eq!(params.len(), velocity.len());
    let lr = S::from_f64_lossy(lr);
    let m = S::from_f64_lossy(momentum);
    let wd = S::from_f64_lossy(weight_decay);
    for ((p, &g), v) in params
        .iter_mut()
        .zip(grad_sum.iter())
        .zip(velocity.iter_mut())
    {
        let step = g + wd * *p;
        *v = m * *v - lr * step;
        *p = *p + *v;
    }
}

/// Applies one aggregated update to a parameter matrix for clock-iteration
/// `t` (0-based, selects the learning rate).
pub fn apply_update<S: Scalar>(
    params: &mut DenseMatrix<S>,
    grad_sum: &DenseMatrix<S>,
    velocity: &mut DenseMatrix<S>,
    cfg: &SolverConfig,
    t: u32,
) -> Result<()> {
    if !params.same_shape(grad_sum) || !params.same_shape(velocity) {
        return Err(Error::shape(format!(
            "update shapes: params {}x{}, grad {}x{}, velocity {}x{}",
            params.rows(),
            params.cols(),
            grad_sum.rows(),
            grad_sum.cols(),
            velocity.rows(),
            velocity.cols()
        )));
    }
    let lr = lr_at(cfg, t)?;
    apply_update_slice(
        params.as_mut_slice(),
        grad_sum.as_slice(),
        velocity.as_mut_slice(),
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    Ok(())
}

/// Same step over a weights-plus-bias bundle. Every aggregation point
/// (server or peer replica) runs exactly this, in the same order, so
/// replicated applications stay bit-identical.
pub fn apply_tensor_update<S: Scalar>(
    params: &mut crate::network::LayerTensor<S>,
    grad_sum: &crate::network::LayerTensor<S>,
    velocity: &mut crate::network::LayerTensor<S>,
    cfg: &SolverConfig,
    t: u32,
) -> Result<()> {
    apply_update(&mut params.weights, &grad_sum.weights, &mut velocity.weights, cfg, t)?;
    match (&mut params.bias, &grad_sum.bias, &mut velocity.bias) {
        (Some(p), Some(g), Some(v)) => {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::shape("bias length mismatch in update"));
            }
            let lr = lr_at(cfg, t)?;
            apply_update_slice(
                p.as_mut_slice(),
                g.as_slice(),
                v.as_mut_slice(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
        (None, None, None) => {}
        _ => return Err(Error::shape("bias presence mismatch in update")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epsilon: f64, momentum: f64, weight_decay: f64, policy: LrPolicy) -> SolverConfig {
        SolverConfig {
            epsilon,
            momentum,
            weight_decay,
            lr_policy: policy,
            total_iters: 100,
        }
    }

    #[test]
    fn plain_descent_step() {
        let c = cfg(0.1, 0.0, 0.0, LrPolicy::Fixed);
        let mut params = DenseMatrix::<f64>::zeros(2, 2);
        let grad = DenseMatrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut vel = DenseMatrix::zeros(2, 2);
        apply_update(&mut params, &grad, &mut vel, &c, 0).unwrap();
        for (p, g) in params.as_slice().iter().zip(grad.as_slice()) {
            assert_eq!(*p, -0.1 * g);
        }
    }

    #[test]
    fn zero_gradient_zero_velocity_leaves_params() {
        let c = cfg(0.1, 0.9, 0.0, LrPolicy::Fixed);
        let mut params = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let before = params.clone();
        let grad = DenseMatrix::zeros(1, 3);
        let mut vel = DenseMatrix::zeros(1, 3);
        apply_update(&mut params, &grad, &mut vel, &c, 0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn momentum_matches_scalar_recurrence_oracle() {
        let c = cfg(0.05, 0.9, 0.01, LrPolicy::Fixed);
        let mut params = DenseMatrix::from_vec(2, 2, vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let grads = [
            DenseMatrix::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap(),
            DenseMatrix::from_vec(2, 2, vec![-0.5, 0.1, 0.2, 0.0]).unwrap(),
            DenseMatrix::from_vec(2, 2, vec![0.05, -0.05, 0.15, -0.25]).unwrap(),
        ];
        let mut vel = DenseMatrix::zeros(2, 2);

        // Hand-rolled per-element recurrence.
        let mut want_p: [f64; 4] = [0.3, -0.1, 0.7, 0.2];
        let mut want_v = [0.0f64; 4];
        for g in &grads {
            for i in 0..4 {
                want_v[i] = 0.9 * want_v[i] - 0.05 * (g.as_slice()[i] + 0.01 * want_p[i]);
                want_p[i] += want_v[i];
            }
        }

        for g in &grads {
            apply_update(&mut params, g, &mut vel, &c, 0).unwrap();
        }
        for i in 0..4 {
            assert!((params.as_slice()[i] - want_p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_fixed() {
        let c = cfg(0.007, 0.0, 0.0, LrPolicy::Fixed);
        for t in [0, 1, 50, 99] {
            assert_eq!(lr_at(&c, t).unwrap(), 0.007);
        }
    }

    #[test]
    fn lr_step() {
        let c = cfg(
            0.005,
            0.0,
            0.0,
            LrPolicy::Step {
                gamma: 0.1,
                step_size: 10,
            },
        );
        let lr = lr_at(&c, 25).unwrap();
        assert!((lr - 0.00005).abs() < 1e-18);
    }

    #[test]
    fn lr_polynomial_hits_zero_at_end() {
        let mut c = cfg(0.01, 0.0, 0.0, LrPolicy::Polynomial { power: 0.5 });
        c.total_iters = 40;
        assert_eq!(lr_at(&c, 40).unwrap(), 0.0);
        let frac: f64 = 1.0 - 39.0 / 40.0;
        assert_eq!(lr_at(&c, 39).unwrap(), 0.01 * frac.sqrt());
    }

    #[test]
    fn lr_out_of_range_is_config_error() {
        let c = cfg(0.01, 0.0, 0.0, LrPolicy::Fixed);
        assert!(matches!(lr_at(&c, 101), Err(Error::Config(_))));
    }

    #[test]
    fn two_half_steps_equal_one_full_step_on_dyadic_values() {
        // With momentum = 0 and weight decay = 0, halving the step size is an
        // exact scaling, so two half-steps land exactly on the full step when
        // products are exactly representable.
        let full = cfg(0.25, 0.0, 0.0, LrPolicy::Fixed);
        let half = cfg(0.125, 0.0, 0.0, LrPolicy::Fixed);
        let grad = DenseMatrix::from_vec(1, 4, vec![1.0, -2.0, 0.5, 4.0]).unwrap();

        let mut p_full = DenseMatrix::from_vec(1, 4, vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let mut p_half = p_full.clone();
        let mut v1 = DenseMatrix::zeros(1, 4);
        let mut v2 = DenseMatrix::zeros(1, 4);

        apply_update(&mut p_full, &grad, &mut v1, &full, 0).unwrap();
        apply_update(&mut p_half, &grad, &mut v2, &half, 0).unwrap();
        apply_update(&mut p_half, &grad, &mut v2, &half, 0).unwrap();
        assert_eq!(p_full, p_half);
    }
}
