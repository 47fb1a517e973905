//! Euler integration of the learned ODE.

use ndarray::Array3;

use super::net::VelocityNet;
use super::{scalar, FlowError, Scalar};

/// Anything that evaluates a velocity field `u(x, t)`; implemented by the
/// trained network and by analytic oracles in tests.
pub trait VelocityModel<T: Scalar> {
    fn velocity(&self, x: &Array3<T>, t: T) -> Result<Array3<T>, FlowError>;
}

impl<T: Scalar> VelocityModel<T> for VelocityNet<T> {
    fn velocity(&self, x: &Array3<T>, t: T) -> Result<Array3<T>, FlowError> {
        self.forward(x, t)
    }
}

/// Iterates `x ← x + (1/n)·u(x, k/n)` for `k = 1..n` and returns the final
/// state. Deterministic given the model, the start state and `n`.
pub fn euler_sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x0: &Array3<T>,
    n: usize,
) -> Result<Array3<T>, FlowError> {
    if n == 0 {
        return Err(FlowError::BadSteps);
    }
    let h: T = scalar(1.0 / n as f64);
    let mut x = x0.clone();
    for k in 1..=n {
        let t: T = scalar(k as f64 / n as f64);
        let u = model.velocity(&x, t)?;
        x.zip_mut_with(&u, |a, &b| *a = *a + b * h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FlowError::NonFiniteState);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle: the constant field `x1 − x0`, which transports `x0` to `x1`
    /// exactly under any step count.
    struct ConstantField {
        u: Array3<f64>,
    }

    impl VelocityModel<f64> for ConstantField {
        fn velocity(&self, _x: &Array3<f64>, _t: f64) -> Result<Array3<f64>, FlowError> {
            Ok(self.u.clone())
        }
    }

    #[test]
    fn constant_oracle_reaches_target_for_any_step_count() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let x1 = Array3::from_shape_fn((2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let oracle = ConstantField { u: &x1 - &x0 };
        for n in [1usize, 2, 7, 96] {
            let out = euler_sample(&oracle, &x0, n).unwrap();
            let err = out
                .iter()
                .zip(x1.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9, "n={n}: max err {err}");
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let oracle = ConstantField {
            u: Array3::zeros((1, 2, 2)),
        };
        assert!(matches!(
            euler_sample(&oracle, &Array3::zeros((1, 2, 2)), 0),
            Err(FlowError::BadSteps)
        ));
    }

    struct ExplodingField;

    impl VelocityModel<f32> for ExplodingField {
        fn velocity(&self, x: &Array3<f32>, _t: f32) -> Result<Array3<f32>, FlowError> {
            Ok(x.mapv(|v| v * 1e30 + 1e30))
        }
    }

    #[test]
    fn non_finite_state_detected() {
        let x0 = Array3::from_elem((1, 2, 2), 1.0f32);
        assert!(matches!(
            euler_sample(&ExplodingField, &x0, 8),
            Err(FlowError::NonFiniteState)
        ));
    }

    #[test]
    fn sampling_deterministic_for_fixed_inputs() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = NetConfig {
            channels: 2,
            hidden: vec![6, 8],
            time_dim: 8,
            time_hidden: 8,
        };
        let mut net = crate::flow::VelocityNet::<f32>::init(cfg, &mut rng);
        for s in net.param_slices_mut() {
            for v in s {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        let x0 = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-0.5..0.5f32));
        let a = euler_sample(&net, &x0, 24).unwrap();
        let b = euler_sample(&net, &x0, 24).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn halving_step_size_shrinks_the_update_gap() {
        // For a smooth trained field the n → 2n difference decays like 1/n;
        // train a few steps so the field is nonlinear in t, then compare.
        use crate::flow::{LrSchedule, TrainConfig, TrainState};
        use crate::map::VisibilityMask;
        use rand::Rng as _;

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = NetConfig {
            channels: 2,
            hidden: vec![6, 8],
            time_dim: 8,
            time_hidden: 8,
        };
        let net = crate::flow::VelocityNet::<f32>::init(cfg, &mut rng);
        let x0 = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-0.3..0.3f32));
        let x1 = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(0.0..1.0f32));
        let coupling = crate::coupling::TrainingCoupling {
            x0: x0.clone(),
            x1,
            mask: VisibilityMask::new_unobserved(8, 8),
        };
        let mut state = TrainState::new(
            net,
            TrainConfig {
                base_lr: 2e-3,
                warmup_epochs: 0,
                ..TrainConfig::default()
            },
            LrSchedule {
                base_lr: 2e-3,
                warmup_steps: 0,
                total_steps: 60,
            },
        );
        let batch = vec![coupling];
        for _ in 0..60 {
            state.backward_and_step(&batch, &mut rng).unwrap();
        }

        let max_abs = |a: &Array3<f32>, b: &Array3<f32>| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max)
        };
        let s12 = euler_sample(&state.ema, &x0, 12).unwrap();
        let s24 = euler_sample(&state.ema, &x0, 24).unwrap();
        let s96 = euler_sample(&state.ema, &x0, 96).unwrap();
        let s192 = euler_sample(&state.ema, &x0, 192).unwrap();
        assert!(max_abs(&s96, &s192) <= max_abs(&s12, &s24));
    }
}
