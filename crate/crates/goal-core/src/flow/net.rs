//! The time-conditioned convolutional velocity network.
//!
//! Architecture: a stack of same-padding 3×3 convolutions
//! `N_c → h1 → h2 → h3 → h4 → N_c`. Each hidden layer is modulated by a
//! per-channel scale-and-shift derived from a sinusoidal embedding of `t`
//! through a two-layer perceptron, followed by SiLU. The final projection is
//! zero-initialized so the network starts as the identity transport.
//!
//! Convolutions run as im2col + GEMM; the backward pass is written out by
//! hand and checked against central finite differences in the tests.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{scalar, FlowError, Scalar};

/// SiLU activation `x · σ(x)`.
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Derivative of SiLU: `σ(x)·(1 + x·(1 − σ(x)))`.
pub fn silu_prime<T: Scalar>(x: T) -> T {
    let sig = T::one() / (T::one() + (-x).exp());
    sig * (T::one() + x * (T::one() - sig))
}

/// Sinusoidal embedding of `t ∈ [0,1]`: `dim/2` frequencies log-spaced over
/// `10⁰..10⁴`, interleaved `sin`/`cos`.
pub fn time_embedding<T: Scalar>(t: T, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let exponent = if half > 1 {
            4.0 * k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq: T = scalar(10f64.powf(exponent));
        let phase = freq * t;
        out[2 * k] = phase.sin();
        out[2 * k + 1] = phase.cos();
    }
    out
}

/// Network hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetConfig {
    /// Semantic channels in and out.
    pub channels: usize,
    /// Hidden conv widths.
    pub hidden: Vec<usize>,
    /// Sinusoidal embedding dimension.
    pub time_dim: usize,
    /// Hidden width of the time perceptron.
    pub time_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 8,
            hidden: vec![32, 64, 64, 32],
            time_dim: 32,
            time_hidden: 64,
        }
    }
}

/// 3×3 same-padding convolution; the kernel is stored flattened as
/// `(c_out, c_in·9)` ready for GEMM against im2col patches.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub cin: usize,
    pub cout: usize,
}

impl<T: Scalar> Conv2d<T> {
    fn he_init<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let weight = Array2::from_shape_fn((cout, cin * 9), |_| scalar(dist.sample(rng)));
        Conv2d {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
        }
    }

    fn zero_init(cin: usize, cout: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((cout, cin * 9)),
            bias: Array1::zeros(cout),
            cin,
            cout,
        }
    }

    fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            cin: self.cin,
            cout: self.cout,
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let cols = im2col(x);
        let mut y = self.weight.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((self.cout, h, w)).unwrap()
    }

    /// Gradients of loss w.r.t. input, kernel and bias given `dy` and the
    /// forward input `x` (patches are re-extracted rather than cached).
    pub fn backward(&self, x: &Array3<T>, dy: &Array3<T>) -> (Array3<T>, Array2<T>, Array1<T>) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let cols = im2col(x);
        let dy_mat = dy
            .to_owned()
            .into_shape_with_order((self.cout, hw))
            .unwrap();
        let dw = dy_mat.dot(&cols.t());
        let db = dy_mat.sum_axis(ndarray::Axis(1));
        let dcols = self.weight.t().dot(&dy_mat);
        let dx = col2im(&dcols, self.cin, h, w);
        (dx, dw, db)
    }
}

/// Extracts 3×3 zero-padded patches: output is `(c_in·9, h·w)` with patch
/// row index `c_in·9 + (kr·3 + kc)`.
fn im2col<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for c in 0..cin {
        let in_base = c * hw;
        for k in 0..9 {
            let kr = (k / 3) as isize - 1;
            let kc = (k % 3) as isize - 1;
            let out_base = (c * 9 + k) * hw;
            // Valid output columns for this kernel offset.
            let c0 = (-kc).max(0) as usize;
            let c1 = (w as isize).min(w as isize - kc) as usize;
            if c0 >= c1 {
                continue;
            }
            for r in 0..h {
                let sr = r as isize + kr;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let src = in_base + sr as usize * w + (c0 as isize + kc) as usize;
                let dst = out_base + r * w + c0;
                let len = c1 - c0;
                cols[dst..dst + len].copy_from_slice(&xs[src..src + len]);
            }
        }
    }
    Array2::from_shape_vec((cin * 9, hw), cols).unwrap()
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im<T: Scalar>(dcols: &Array2<T>, cin: usize, h: usize, w: usize) -> Array3<T> {
    let hw = h * w;
    let ds = dcols.as_slice().expect("standard layout");
    let mut dx = vec![T::zero(); cin * hw];
    for c in 0..cin {
        let in_base = c * hw;
        for k in 0..9 {
            let kr = (k / 3) as isize - 1;
            let kc = (k % 3) as isize - 1;
            let out_base = (c * 9 + k) * hw;
            let c0 = (-kc).max(0) as usize;
            let c1 = (w as isize).min(w as isize - kc) as usize;
            if c0 >= c1 {
                continue;
            }
            for r in 0..h {
                let sr = r as isize + kr;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let src = out_base + r * w + c0;
                let dst = in_base + sr as usize * w + (c0 as isize + kc) as usize;
                for i in 0..(c1 - c0) {
                    dx[dst + i] = dx[dst + i] + ds[src + i];
                }
            }
        }
    }
    Array3::from_shape_vec((cin, h, w), dx).unwrap()
}

/// The velocity network `u_θ(x, t)`.
#[derive(Clone, Debug)]
pub struct VelocityNet<T> {
    cfg: NetConfig,
    pub convs: Vec<Conv2d<T>>,
    pub out_conv: Conv2d<T>,
    pub time_w1: Array2<T>,
    pub time_b1: Array1<T>,
    pub time_w2: Array2<T>,
    pub time_b2: Array1<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    emb: Array1<T>,
    mlp_pre: Array1<T>,
    mlp_hid: Array1<T>,
    /// Inputs to each conv; index `n_hidden` is the out-conv input.
    layer_inputs: Vec<Array3<T>>,
    /// Conv outputs before modulation, per hidden layer.
    pre_film: Vec<Array3<T>>,
    /// Modulated values before SiLU, per hidden layer.
    pre_act: Vec<Array3<T>>,
    /// FiLM vector `W2·hid + b2`.
    film: Array1<T>,
}

impl<T: Scalar> VelocityNet<T> {
    /// Random initialization; the output projection starts at zero so the
    /// initial velocity field is identically zero, and the FiLM head starts
    /// neutral.
    pub fn init<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Self {
        assert!(!cfg.hidden.is_empty(), "need at least one hidden layer");
        assert!(cfg.time_dim % 2 == 0, "time embedding dim must be even");
        let mut convs = Vec::new();
        let mut cin = cfg.channels;
        for &width in &cfg.hidden {
            convs.push(Conv2d::he_init(cin, width, rng));
            cin = width;
        }
        let out_conv = Conv2d::zero_init(cin, cfg.channels);

        let film_dim: usize = cfg.hidden.iter().map(|w| 2 * w).sum();
        let std1 = (2.0 / (cfg.time_dim + cfg.time_hidden) as f64).sqrt();
        let dist = Normal::new(0.0, std1).unwrap();
        let time_w1 =
            Array2::from_shape_fn((cfg.time_hidden, cfg.time_dim), |_| scalar(dist.sample(rng)));
        VelocityNet {
            convs,
            out_conv,
            time_w1,
            time_b1: Array1::zeros(cfg.time_hidden),
            time_w2: Array2::zeros((film_dim, cfg.time_hidden)),
            time_b2: Array1::zeros(film_dim),
            cfg,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Same structure with all parameters zero; used as gradient storage.
    pub fn zeros_like(&self) -> Self {
        VelocityNet {
            cfg: self.cfg.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            out_conv: self.out_conv.zeros_like(),
            time_w1: Array2::zeros(self.time_w1.raw_dim()),
            time_b1: Array1::zeros(self.time_b1.raw_dim()),
            time_w2: Array2::zeros(self.time_w2.raw_dim()),
            time_b2: Array1::zeros(self.time_b2.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    /// Parameters in canonical order as `(name, shape, values)`.
    pub fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                c.weight.shape().to_vec(),
                c.weight.as_slice().unwrap(),
            ));
            out.push((
                format!("conv{i}.bias"),
                c.bias.shape().to_vec(),
                c.bias.as_slice().unwrap(),
            ));
        }
        out.push((
            "out.weight".into(),
            self.out_conv.weight.shape().to_vec(),
            self.out_conv.weight.as_slice().unwrap(),
        ));
        out.push((
            "out.bias".into(),
            self.out_conv.bias.shape().to_vec(),
            self.out_conv.bias.as_slice().unwrap(),
        ));
        out.push((
            "time.w1".into(),
            self.time_w1.shape().to_vec(),
            self.time_w1.as_slice().unwrap(),
        ));
        out.push((
            "time.b1".into(),
            self.time_b1.shape().to_vec(),
            self.time_b1.as_slice().unwrap(),
        ));
        out.push((
            "time.w2".into(),
            self.time_w2.shape().to_vec(),
            self.time_w2.as_slice().unwrap(),
        ));
        out.push((
            "time.b2".into(),
            self.time_b2.shape().to_vec(),
            self.time_b2.as_slice().unwrap(),
        ));
        out
    }

    /// Mutable parameter slices in the same canonical order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(c.weight.as_slice_mut().unwrap());
            out.push(c.bias.as_slice_mut().unwrap());
        }
        out.push(self.out_conv.weight.as_slice_mut().unwrap());
        out.push(self.out_conv.bias.as_slice_mut().unwrap());
        out.push(self.time_w1.as_slice_mut().unwrap());
        out.push(self.time_b1.as_slice_mut().unwrap());
        out.push(self.time_w2.as_slice_mut().unwrap());
        out.push(self.time_b2.as_slice_mut().unwrap());
        out
    }

    fn film_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::new();
        let mut off = 0;
        for &w in &self.cfg.hidden {
            ranges.push((off, w));
            off += 2 * w;
        }
        ranges
    }

    fn check_time(t: T) -> Result<(), FlowError> {
        let tf = t.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&tf) {
            return Err(FlowError::TimeDomain(tf));
        }
        Ok(())
    }

    /// Predicted velocity; deterministic in `(θ, x, t)`.
    pub fn forward(&self, x: &Array3<T>, t: T) -> Result<Array3<T>, FlowError> {
        Ok(self.forward_cached(x, t)?.0)
    }

    /// Forward pass retaining the activations the backward pass needs.
    pub fn forward_cached(
        &self,
        x: &Array3<T>,
        t: T,
    ) -> Result<(Array3<T>, ForwardCache<T>), FlowError> {
        Self::check_time(t)?;
        if x.shape()[0] != self.cfg.channels {
            return Err(FlowError::ShapeMismatch(format!(
                "input has {} channels, net expects {}",
                x.shape()[0],
                self.cfg.channels
            )));
        }

        let emb = time_embedding(t, self.cfg.time_dim);
        let mlp_pre = self.time_w1.dot(&emb) + &self.time_b1;
        let mlp_hid = mlp_pre.mapv(silu);
        let film = self.time_w2.dot(&mlp_hid) + &self.time_b2;

        let ranges = self.film_ranges();
        let mut layer_inputs = Vec::with_capacity(self.convs.len() + 1);
        let mut pre_film = Vec::with_capacity(self.convs.len());
        let mut pre_act = Vec::with_capacity(self.convs.len());

        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            layer_inputs.push(h.clone());
            let y = conv.forward(&h);
            let (off, width) = ranges[i];
            let mut z = y.clone();
            for ch in 0..width {
                let scale = T::one() + film[off + ch];
                let shift = film[off + width + ch];
                z.index_axis_mut(ndarray::Axis(0), ch)
                    .mapv_inplace(|v| v * scale + shift);
            }
            let a = z.mapv(silu);
            pre_film.push(y);
            pre_act.push(z);
            h = a;
        }
        layer_inputs.push(h.clone());
        let out = self.out_conv.forward(&h);

        Ok((
            out,
            ForwardCache {
                emb,
                mlp_pre,
                mlp_hid,
                layer_inputs,
                pre_film,
                pre_act,
                film,
            },
        ))
    }

    /// Reverse-mode gradients for every parameter given `d_out = ∂L/∂u`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Array3<T>) -> VelocityNet<T> {
        let mut grads = self.zeros_like();
        let n = self.convs.len();
        let ranges = self.film_ranges();
        let mut dfilm = Array1::<T>::zeros(cache.film.raw_dim());

        // Output projection.
        let (mut dh, dw, db) = self
            .out_conv
            .backward(&cache.layer_inputs[n], d_out);
        grads.out_conv.weight = dw;
        grads.out_conv.bias = db;

        // Hidden layers, last to first.
        for i in (0..n).rev() {
            let (off, width) = ranges[i];
            let z = &cache.pre_act[i];
            let y = &cache.pre_film[i];

            // Through SiLU.
            let mut dz = dh;
            dz.zip_mut_with(z, |g, &zv| *g = *g * silu_prime(zv));

            // Through FiLM: per-channel scale/shift.
            let mut dy = dz.clone();
            for ch in 0..width {
                let scale = T::one() + cache.film[off + ch];
                let dz_ch = dz.index_axis(ndarray::Axis(0), ch);
                let y_ch = y.index_axis(ndarray::Axis(0), ch);
                let mut ds = T::zero();
                let mut dt = T::zero();
                for (&g, &yv) in dz_ch.iter().zip(y_ch.iter()) {
                    ds = ds + g * yv;
                    dt = dt + g;
                }
                dfilm[off + ch] = dfilm[off + ch] + ds;
                dfilm[off + width + ch] = dfilm[off + width + ch] + dt;
                dy.index_axis_mut(ndarray::Axis(0), ch)
                    .mapv_inplace(|v| v * scale);
            }

            // Through the convolution.
            let (dx, dw, db) = self.convs[i].backward(&cache.layer_inputs[i], &dy);
            grads.convs[i].weight = dw;
            grads.convs[i].bias = db;
            dh = dx;
        }

        // Time perceptron.
        grads.time_b2 = dfilm.clone();
        grads.time_w2 = outer(&dfilm, &cache.mlp_hid);
        let mut dhid = self.time_w2.t().dot(&dfilm);
        dhid.zip_mut_with(&cache.mlp_pre, |g, &p| *g = *g * silu_prime(p));
        grads.time_b1 = dhid.clone();
        grads.time_w1 = outer(&dhid, &cache.emb);

        grads
    }

    /// Element-wise accumulate `self += other * scale` over all parameters.
    pub fn accumulate_scaled(&mut self, other: &VelocityNet<T>, scale: T) {
        let other_params: Vec<&[T]> = other.param_tensors().iter().map(|(_, _, s)| *s).collect();
        for (mine, theirs) in self.param_slices_mut().into_iter().zip(other_params) {
            for (m, &t) in mine.iter_mut().zip(theirs.iter()) {
                *m = *m + t * scale;
            }
        }
    }

    /// Converts parameters to another scalar type (e.g. f32 → f64 for
    /// gradient checking).
    pub fn cast<U: Scalar>(&self) -> VelocityNet<U> {
        let conv_cast = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            bias: c.bias.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            cin: c.cin,
            cout: c.cout,
        };
        VelocityNet {
            cfg: self.cfg.clone(),
            convs: self.convs.iter().map(conv_cast).collect(),
            out_conv: conv_cast(&self.out_conv),
            time_w1: self.time_w1.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            time_b1: self.time_b1.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            time_w2: self.time_w2.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
            time_b2: self.time_b2.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap()),
        }
    }
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[[i, j]] = av * bv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            channels: 2,
            hidden: vec![4, 6, 6, 4],
            time_dim: 8,
            time_hidden: 8,
        }
    }

    #[test]
    fn zero_initialized_output_layer_gives_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        let x = Array3::from_shape_fn((2, 6, 6), |(c, r, q)| (c + r + q) as f32 * 0.1);
        let u = net.forward(&x, 0.3).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        let x = Array3::from_shape_fn((2, 5, 5), |(c, r, q)| (c * 25 + r * 5 + q) as f32 * 0.01);
        let a = net.forward(&x, 0.7).unwrap();
        let b = net.forward(&x, 0.7).unwrap();
        assert_eq!(a, b);
    }

    fn randomize_net(net: &mut VelocityNet<f32>, rng: &mut ChaCha8Rng) {
        use rand::Rng as _;
        for slice in net.param_slices_mut() {
            for v in slice.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn time_conditioning_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        randomize_net(&mut net, &mut rng); // nonzero FiLM weights
        let x = Array3::from_shape_fn((2, 5, 5), |(c, r, q)| (c * 25 + r * 5 + q) as f32 * 0.01);
        let u0 = net.forward(&x, 0.0).unwrap();
        let u1 = net.forward(&x, 1.0).unwrap();
        let diff: f32 = u0
            .iter()
            .zip(u1.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(diff > 1e-6, "time had no effect: {diff}");
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        for size in [1usize, 3, 8] {
            let x = Array3::zeros((2, size, size));
            let u = net.forward(&x, 0.5).unwrap();
            assert_eq!(u.shape(), &[2, size, size]);
        }
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        let x = Array3::zeros((3, 4, 4));
        assert!(matches!(
            net.forward(&x, 0.5),
            Err(FlowError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        let x = Array3::zeros((2, 4, 4));
        assert!(matches!(
            net.forward(&x, 1.5),
            Err(FlowError::TimeDomain(_))
        ));
    }

    #[test]
    fn im2col_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng as _;
        let conv = Conv2d::<f64>::he_init(3, 2, &mut rng);
        let x = Array3::from_shape_fn((3, 5, 6), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward(&x);

        // Direct nested-loop convolution with zero padding.
        for co in 0..2 {
            for r in 0..5 {
                for c in 0..6 {
                    let mut acc = conv.bias[co];
                    for ci in 0..3 {
                        for k in 0..9 {
                            let (kr, kc) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                            let (sr, sc) = (r as isize + kr, c as isize + kc);
                            if sr >= 0 && sc >= 0 && sr < 5 && sc < 6 {
                                acc += conv.weight[[co, ci * 9 + k]]
                                    * x[[ci, sr as usize, sc as usize]];
                            }
                        }
                    }
                    assert!((y[[co, r, c]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn param_count_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net: VelocityNet<f32> = VelocityNet::init(tiny_cfg(), &mut rng);
        // convs: 2→4→6→6→4, out 4→2, film dim = 2(4+6+6+4)=40.
        let expected = (2 * 9 * 4 + 4)
            + (4 * 9 * 6 + 6)
            + (6 * 9 * 6 + 6)
            + (6 * 9 * 4 + 4)
            + (4 * 9 * 2 + 2)
            + (8 * 8 + 8)
            + (40 * 8 + 40);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn gradients_match_central_finite_differences_f64() {
        // 4×4 input, all parameters, 64-bit: max relative error ≤ 1e−3.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = NetConfig {
            channels: 2,
            hidden: vec![3, 4],
            time_dim: 4,
            time_hidden: 5,
        };
        let mut net32: VelocityNet<f32> = VelocityNet::init(cfg, &mut rng);
        randomize_net(&mut net32, &mut rng);
        let net: VelocityNet<f64> = net32.cast();

        use rand::Rng as _;
        let x0 = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-0.5..0.5f64));
        let x1 = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-0.5..0.5f64));
        let t = 0.37f64;

        let loss_of = |net: &VelocityNet<f64>| -> f64 {
            super::super::fm_loss_parts(net, &x0, &x1, t).unwrap()
        };

        // Analytic gradients.
        let xt = {
            let a = 1.0 - t;
            let mut out = x0.clone();
            out.zip_mut_with(&x1, |o, &b| *o = *o * a + b * t);
            out
        };
        let target = &x1 - &x0;
        let (u, cache) = net.forward_cached(&xt, t).unwrap();
        let numel = u.len() as f64;
        let mut d_out = u.clone();
        d_out.zip_mut_with(&target, |g, &tv| *g = 2.0 * (*g - tv) / numel);
        let grads = net.backward(&cache, &d_out);

        let h = 1e-5;
        let grad_tensors = grads.param_tensors();
        let mut checked = 0usize;
        let mut max_rel = 0.0f64;
        for (pi, (name, _, gslice)) in grad_tensors.iter().enumerate() {
            for ei in 0..gslice.len() {
                let mut plus = net.clone();
                plus.param_slices_mut()[pi][ei] += h;
                let mut minus = net.clone();
                minus.param_slices_mut()[pi][ei] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let g = gslice[ei];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "{name}[{ei}]: analytic {g} vs fd {fd} (rel {rel})"
                );
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        assert!(checked > 300, "checked only {checked} params");
    }
}
