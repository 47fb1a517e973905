//! Flow-matching training: the MSE objective over coupling velocities, an
//! AdamW step with decoupled weight decay, warmup + cosine learning rate,
//! and the EMA shadow used at sampling time.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{NetConfig, VelocityNet};
use super::{scalar, FlowError, Scalar};
use crate::coupling::TrainingCoupling;
use crate::tensor::{load_tensor, save_tensor};

/// Optimizer and schedule hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            ema_decay: 0.999,
            warmup_epochs: 2,
            epochs: 20,
            batch_size: 64,
        }
    }
}

/// Linear warmup to the base rate, then cosine decay to zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        LrSchedule {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    /// Learning rate applied at (0-indexed) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64
            / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean squared error between the predicted velocity at `x_t` and the
/// coupling's constant velocity `x1 − x0`; generic over precision.
pub fn fm_loss_parts<T: Scalar>(
    net: &VelocityNet<T>,
    x0: &Array3<T>,
    x1: &Array3<T>,
    t: f64,
) -> Result<T, FlowError> {
    if x0.shape() != x1.shape() {
        return Err(FlowError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let tt: T = scalar(t);
    let a = T::one() - tt;
    let mut xt = x0.clone();
    xt.zip_mut_with(x1, |o, &b| *o = *o * a + b * tt);
    let u = net.forward(&xt, tt)?;
    let numel = scalar::<T>(u.len() as f64);
    let mut acc = T::zero();
    for ((&up, &b), &av) in u.iter().zip(x1.iter()).zip(x0.iter()) {
        let diff = (b - av) - up;
        acc = acc + diff * diff;
    }
    Ok(acc / numel)
}

/// [`fm_loss_parts`] over a stored f32 coupling.
pub fn fm_loss(
    net: &VelocityNet<f32>,
    coupling: &TrainingCoupling,
    t: f64,
) -> Result<f32, FlowError> {
    fm_loss_parts(net, &coupling.x0, &coupling.x1, t)
}

/// Model parameters plus everything the optimizer owns.
pub struct TrainState {
    pub net: VelocityNet<f32>,
    pub ema: VelocityNet<f32>,
    moments_m: Vec<Vec<f32>>,
    moments_v: Vec<Vec<f32>>,
    pub step: usize,
    pub schedule: LrSchedule,
    pub cfg: TrainConfig,
}

impl TrainState {
    pub fn new(net: VelocityNet<f32>, cfg: TrainConfig, schedule: LrSchedule) -> Self {
        let shapes: Vec<usize> = net.param_tensors().iter().map(|(_, _, s)| s.len()).collect();
        TrainState {
            ema: net.clone(),
            net,
            moments_m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            moments_v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            schedule,
            cfg,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One optimization step over a batch: per-sample `t ~ U[0,1]`,
    /// reverse-mode gradients of the batch-mean loss, AdamW with decoupled
    /// weight decay, then the EMA update. Returns the batch loss.
    ///
    /// Per-sample gradients are computed independently and reduced in batch
    /// order, so results are deterministic for a fixed seed regardless of
    /// worker count.
    pub fn backward_and_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[TrainingCoupling],
        rng: &mut R,
    ) -> Result<f32, FlowError> {
        assert!(!batch.is_empty(), "empty batch");
        let ts: Vec<f64> = (0..batch.len()).map(|_| rng.gen_range(0.0..1.0)).collect();

        let net = &self.net;
        let results: Vec<Result<(f32, VelocityNet<f32>), FlowError>> = {
            use rayon::prelude::*;
            batch
                .par_iter()
                .zip(ts.par_iter())
                .map(|(coupling, &t)| sample_loss_and_grads(net, coupling, t))
                .collect()
        };

        let inv_b = 1.0 / batch.len() as f32;
        let mut total_loss = 0.0f32;
        let mut grads = self.net.zeros_like();
        for r in results {
            let (loss, g) = r?;
            total_loss += loss * inv_b;
            grads.accumulate_scaled(&g, inv_b);
        }

        let grad_tensors = grads.param_tensors();
        if grad_tensors
            .iter()
            .any(|(_, _, s)| s.iter().any(|v| !v.is_finite()))
        {
            return Err(FlowError::NonFiniteGradient);
        }

        // AdamW with decoupled weight decay.
        let lr = self.lr() as f32;
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let bc1 = (1.0 - self.cfg.beta1.powf(t)) as f32;
        let bc2 = (1.0 - self.cfg.beta2.powf(t)) as f32;
        let eps = self.cfg.eps as f32;
        let wd = self.cfg.weight_decay as f32;

        let gslices: Vec<&[f32]> = grad_tensors.iter().map(|(_, _, s)| *s).collect();
        for (((param, grad), m), v) in self
            .net
            .param_slices_mut()
            .into_iter()
            .zip(gslices)
            .zip(self.moments_m.iter_mut())
            .zip(self.moments_v.iter_mut())
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * param[i]);
            }
        }

        // EMA shadow: θ̄ ← d·θ̄ + (1−d)·θ.
        let d = self.cfg.ema_decay as f32;
        let net_tensors = self.net.param_tensors();
        let nslices: Vec<&[f32]> = net_tensors.iter().map(|(_, _, s)| *s).collect();
        for (shadow, live) in self.ema.param_slices_mut().into_iter().zip(nslices) {
            for (s, &p) in shadow.iter_mut().zip(live.iter()) {
                *s = d * *s + (1.0 - d) * p;
            }
        }

        Ok(total_loss)
    }
}

fn sample_loss_and_grads(
    net: &VelocityNet<f32>,
    coupling: &TrainingCoupling,
    t: f64,
) -> Result<(f32, VelocityNet<f32>), FlowError> {
    let tt = t as f32;
    let a = 1.0 - tt;
    let mut xt = coupling.x0.clone();
    xt.zip_mut_with(&coupling.x1, |o, &b| *o = *o * a + b * tt);
    let (u, cache) = net.forward_cached(&xt, tt)?;
    let numel = u.len() as f32;
    let mut loss = 0.0f32;
    let mut d_out = u;
    ndarray::Zip::from(&mut d_out)
        .and(&coupling.x1)
        .and(&coupling.x0)
        .for_each(|g, &b, &av| {
            let diff = *g - (b - av);
            loss += diff * diff / numel;
            *g = 2.0 * diff / numel;
        });
    let grads = net.backward(&cache, &d_out);
    Ok((loss, grads))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    has_ema: bool,
    config: NetConfig,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `header.json` plus one GOALT1 tensor per parameter (`raw/` and
/// `ema/` subdirectories).
pub fn save_checkpoint(
    dir: &Path,
    net: &VelocityNet<f32>,
    ema: &VelocityNet<f32>,
    step: usize,
) -> Result<(), FlowError> {
    std::fs::create_dir_all(dir.join("raw"))?;
    std::fs::create_dir_all(dir.join("ema"))?;
    let mut entries = Vec::new();
    for (variant, model) in [("raw", net), ("ema", ema)] {
        for (name, shape, values) in model.param_tensors() {
            let arr = ndarray::ArrayD::from_shape_vec(shape.clone(), values.to_vec())
                .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
            save_tensor(dir.join(variant).join(format!("{name}.gt1")), arr.view())
                .map_err(|e| FlowError::Checkpoint(e.to_string()))?;
            if variant == "raw" {
                entries.push(CheckpointEntry { name, shape });
            }
        }
    }
    let header = CheckpointHeader {
        step,
        has_ema: true,
        config: net.config().clone(),
        params: entries,
    };
    std::fs::write(
        dir.join("header.json"),
        serde_json::to_vec_pretty(&header).map_err(|e| FlowError::Checkpoint(e.to_string()))?,
    )?;
    Ok(())
}

/// Loads a checkpoint; `use_ema` selects the EMA shadow weights.
pub fn load_checkpoint(dir: &Path, use_ema: bool) -> Result<(VelocityNet<f32>, usize), FlowError> {
    let header: CheckpointHeader =
        serde_json::from_slice(&std::fs::read(dir.join("header.json"))?)
            .map_err(|e| FlowError::Checkpoint(format!("bad header: {e}")))?;
    let variant = if use_ema && header.has_ema { "ema" } else { "raw" };

    // Parameter shapes are determined by the config; build then fill.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut net: VelocityNet<f32> = VelocityNet::init(header.config.clone(), &mut rng);

    let names: Vec<String> = net
        .param_tensors()
        .iter()
        .map(|(n, _, _)| n.clone())
        .collect();
    for (idx, name) in names.iter().enumerate() {
        let tensor = load_tensor(dir.join(variant).join(format!("{name}.gt1")))
            .map_err(|e| FlowError::Checkpoint(format!("{name}: {e}")))?;
        let expected = header
            .params
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| FlowError::Checkpoint(format!("{name} missing from header")))?;
        if tensor.shape() != expected.shape.as_slice() {
            return Err(FlowError::Checkpoint(format!(
                "{name}: shape {:?} vs header {:?}",
                tensor.shape(),
                expected.shape
            )));
        }
        let flat: Vec<f32> = tensor.iter().copied().collect();
        let mut slices = net.param_slices_mut();
        if slices[idx].len() != flat.len() {
            return Err(FlowError::Checkpoint(format!(
                "{name}: size {} vs model {}",
                flat.len(),
                slices[idx].len()
            )));
        }
        slices[idx].copy_from_slice(&flat);
    }
    Ok((net, header.step))
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::VisibilityMask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_coupling(seed: u64, size: usize) -> TrainingCoupling {
        // Noisy source, smooth blobby target: the shape of real couplings.
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array3::from_shape_fn((2, size, size), |_| rng.gen_range(-0.02..0.02f32));
        let centers: Vec<(f32, f32)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.0..size as f32),
                    rng.gen_range(0.0..size as f32),
                )
            })
            .collect();
        let x1 = Array3::from_shape_fn((2, size, size), |(ch, r, c)| {
            let (cr, cc) = centers[ch];
            let d2 = (r as f32 - cr).powi(2) + (c as f32 - cc).powi(2);
            (-d2 / 8.0).exp()
        });
        TrainingCoupling {
            x0,
            x1,
            mask: VisibilityMask::new_unobserved(size, size),
        }
    }

    fn tiny_net(seed: u64) -> VelocityNet<f32> {
        let cfg = NetConfig {
            channels: 2,
            hidden: vec![6, 8],
            time_dim: 8,
            time_hidden: 12,
        };
        VelocityNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn loss_zero_for_oracle_predictor() {
        // A zero-velocity coupling (x1 = x0) makes the zero-initialized net
        // an exact oracle.
        let mut c = toy_coupling(1, 6);
        c.x1 = c.x0.clone();
        let net = tiny_net(2);
        let loss = fm_loss(&net, &c, 0.4).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_closed_form_for_zero_predictor() {
        // Zero-initialized net predicts 0, so loss = mean((x1 − x0)²).
        let c = toy_coupling(3, 6);
        let net = tiny_net(4);
        let loss = fm_loss(&net, &c, 0.8).unwrap();
        let expect: f32 = c
            .x0
            .iter()
            .zip(c.x1.iter())
            .map(|(&a, &b)| (b - a) * (b - a))
            .sum::<f32>()
            / c.x0.len() as f32;
        assert!((loss - expect).abs() < 1e-6);
    }

    #[test]
    fn loss_nonnegative_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng as _;
        let mut net = tiny_net(6);
        for s in net.param_slices_mut() {
            for v in s {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        for seed in 0..5 {
            let c = toy_coupling(seed, 5);
            assert!(fm_loss(&net, &c, rng.gen_range(0.0..1.0)).unwrap() >= 0.0);
        }
    }

    #[test]
    fn warmup_then_cosine_shape() {
        let sched = LrSchedule {
            base_lr: 1.5e-4,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert!(sched.lr_at(0) < sched.lr_at(9));
        assert!((sched.lr_at(9) - 1.5e-4).abs() < 1e-12);
        assert!(sched.lr_at(50) < sched.lr_at(10));
        assert!(sched.lr_at(99) < sched.lr_at(50));
        assert!(sched.lr_at(150) <= sched.lr_at(99).max(1e-12));
    }

    #[test]
    fn overfit_single_coupling_drops_loss_tenfold() {
        // 200 steps on one fixed coupling: self-consistency of the trainer.
        let net = tiny_net(7);
        let cfg = TrainConfig {
            base_lr: 2e-3,
            warmup_epochs: 0,
            epochs: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let sched = LrSchedule {
            base_lr: cfg.base_lr,
            warmup_steps: 0,
            total_steps: 200,
        };
        let mut state = TrainState::new(net, cfg, sched);
        let coupling = toy_coupling(8, 8);
        let batch = vec![coupling];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            last = state.backward_and_step(&batch, &mut rng).unwrap();
            first.get_or_insert(last);
        }
        let first = first.unwrap();
        assert!(
            last <= first / 10.0,
            "loss {first} → {last}, less than 10× drop"
        );
    }

    #[test]
    fn ema_decay_extremes() {
        let coupling = toy_coupling(10, 6);
        let batch = vec![coupling];

        // decay 1.0: the shadow never moves.
        let net = tiny_net(11);
        let frozen_before: Vec<f32> = net
            .param_tensors()
            .iter()
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect();
        let cfg = TrainConfig {
            ema_decay: 1.0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let sched = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 0,
            total_steps: 10,
        };
        let mut state = TrainState::new(net, cfg, sched);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        state.backward_and_step(&batch, &mut rng).unwrap();
        let frozen_after: Vec<f32> = state
            .ema
            .param_tensors()
            .iter()
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect();
        assert_eq!(frozen_before, frozen_after);

        // decay 0.0: the shadow equals the live weights after one step.
        let net = tiny_net(13);
        let cfg = TrainConfig {
            ema_decay: 0.0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(net, cfg, sched);
        state.backward_and_step(&batch, &mut rng).unwrap();
        let live: Vec<f32> = state
            .net
            .param_tensors()
            .iter()
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect();
        let shadow: Vec<f32> = state
            .ema
            .param_tensors()
            .iter()
            .flat_map(|(_, _, s)| s.iter().copied())
            .collect();
        assert_eq!(live, shadow);
    }

    #[test]
    fn training_on_null_transport_drives_predictions_to_zero() {
        let mut c = toy_coupling(14, 6);
        c.x1 = c.x0.clone();
        let net = tiny_net(15);
        let cfg = TrainConfig {
            base_lr: 1e-3,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let sched = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 0,
            total_steps: 50,
        };
        let mut state = TrainState::new(net, cfg, sched);
        let batch = vec![c];
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut last = f32::INFINITY;
        for _ in 0..50 {
            last = state.backward_and_step(&batch, &mut rng).unwrap();
        }
        assert!(last < 1e-5, "null-transport loss {last}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = tiny_net(17);
        let mut ema = net.clone();
        // Perturb the shadow so raw and ema are distinguishable.
        ema.param_slices_mut()[0][0] += 1.0;
        save_checkpoint(dir.path(), &net, &ema, 42).unwrap();

        let (raw, step) = load_checkpoint(dir.path(), false).unwrap();
        assert_eq!(step, 42);
        let (shadow, _) = load_checkpoint(dir.path(), true).unwrap();

        let flat = |n: &VelocityNet<f32>| -> Vec<f32> {
            n.param_tensors()
                .iter()
                .flat_map(|(_, _, s)| s.iter().copied())
                .collect()
        };
        assert_eq!(flat(&raw), flat(&net));
        assert_eq!(flat(&shadow), flat(&ema));
        assert_ne!(flat(&raw), flat(&shadow));
    }
}
