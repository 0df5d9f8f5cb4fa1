//! Small fully connected networks with hand-written reverse mode.
//!
//! Hidden layers use ReLU. The output head is one of: linear, `π·tanh`
//! (phases in `(−π, π)`), or a Gaussian head whose output rows are the
//! mean followed by the clamped log standard deviation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, ForgeError, Result};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    /// `π·tanh(z)`.
    Squash,
    /// First half of the outputs is the mean, second half the log-std
    /// clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    Gaussian,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::Linear => 0,
            Head::Squash => 1,
            Head::Gaussian => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Head::Linear),
            1 => Some(Head::Squash),
            2 => Some(Head::Gaussian),
            _ => None,
        }
    }
}

/// Affine layer, `y = x·Wᵀ + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    head: Head,
}

/// Intermediates of a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Array2<f64>>,
}

/// Per-layer parameter gradients, same shapes as the layers.
pub type Grads = Vec<Layer>;

impl DenseNet {
    /// Fan-in uniform initialization `U(−1/√in, 1/√in)`; the last layer is
    /// further scaled by `last_scale`.
    pub fn new(sizes: &[usize], head: Head, last_scale: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return config(format!("invalid layer sizes {sizes:?}"));
        }
        if head == Head::Gaussian && !sizes[sizes.len() - 1].is_multiple_of(2) {
            return config("gaussian head needs an even output width");
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt() * if l + 1 == n { last_scale } else { 1.0 };
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound));
                Layer { w, b }
            })
            .collect();
        Ok(Self { layers, head })
    }

    pub fn from_layers(layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return config("network needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return config("layer dimensions do not chain");
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return config("bias length differs from layer width");
            }
        }
        Ok(Self { layers, head })
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].w.ncols()).chain(self.layers.iter().map(|l| l.w.nrows())).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    /// Forward pass over a batch (one row per sample).
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Cache) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            let next = if l + 1 < n { z.mapv(|v| v.max(0.0)) } else { self.apply_head(&z) };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        (a, Cache { inputs, pre })
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            a = if l + 1 < n {
                z.mapv_inplace(|v| v.max(0.0));
                z
            } else {
                self.apply_head(&z)
            };
        }
        a
    }

    /// Continues a forward pass from the pre-activation `z` of layer `l`.
    fn resume(&self, l: usize, mut z: Array2<f64>) -> Array2<f64> {
        for layer in &self.layers[l + 1..] {
            z.mapv_inplace(|v| v.max(0.0));
            let mut next = z.dot(&layer.w.t());
            next += &layer.b;
            z = next;
        }
        self.apply_head(&z)
    }

    fn apply_head(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Linear => z.clone(),
            Head::Squash => z.mapv(|v| PI * v.tanh()),
            Head::Gaussian => {
                let half = z.ncols() / 2;
                let mut y = z.clone();
                y.slice_mut(s![.., half..]).mapv_inplace(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
                y
            }
        }
    }

    /// Reverse pass. `upstream` is `∂L/∂output`; returns parameter
    /// gradients (summed over the batch) when `want_params`, and `∂L/∂input`.
    pub fn backward(&self, cache: &Cache, upstream: ArrayView2<f64>, want_params: bool) -> (Option<Grads>, Array2<f64>) {
        let n = self.layers.len();
        let mut delta = self.head_grad(&cache.pre[n - 1], upstream);
        let mut grads = want_params.then(|| Vec::with_capacity(n));
        for l in (0..n).rev() {
            if let Some(g) = grads.as_mut() {
                g.push(Layer { w: delta.t().dot(&cache.inputs[l]), b: delta.sum_axis(Axis(0)) });
            }
            let mut back = delta.dot(&self.layers[l].w);
            if l > 0 {
                Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = back;
        }
        if let Some(g) = grads.as_mut() {
            g.reverse();
        }
        (grads, delta)
    }

    fn head_grad(&self, z: &Array2<f64>, up: ArrayView2<f64>) -> Array2<f64> {
        match self.head {
            Head::Linear => up.to_owned(),
            Head::Squash => {
                let mut d = up.to_owned();
                Zip::from(&mut d).and(z).for_each(|d, &z| {
                    let t = z.tanh();
                    *d *= PI * (1.0 - t * t);
                });
                d
            }
            Head::Gaussian => {
                let half = z.ncols() / 2;
                let mut d = up.to_owned();
                Zip::from(d.slice_mut(s![.., half..])).and(z.slice(s![.., half..])).for_each(|d, &z| {
                    if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&z) {
                        *d = 0.0;
                    }
                });
                d
            }
        }
    }

    /// Copies every parameter of `other` (same shapes).
    pub fn copy_from(&mut self, other: &DenseNet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.assign(&b.w);
            a.b.assign(&b.b);
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let sizes = self.sizes();
        let mut buf = Vec::with_capacity(16 + 4 * sizes.len() + 8 * self.num_params());
        buf.extend_from_slice(b"DNET");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.push(self.head.code());
        buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in &sizes {
            buf.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for x in layer.w.iter().chain(layer.b.iter()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: &str| ForgeError::Format { offset: offset as u64, message: message.into() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(fail(pos, "truncated checkpoint"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != b"DNET" {
            return Err(fail(0, "bad magic, expected \"DNET\""));
        }
        if u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) != 1 {
            return Err(fail(4, "unsupported checkpoint version"));
        }
        let head = Head::from_code(take(1)?[0]).ok_or_else(|| fail(6, "unknown output head"))?;
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if !(2..=64).contains(&count) {
            return Err(fail(7, "layer count out of range"));
        }
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let s = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            if s == 0 || s > 1 << 16 {
                return Err(fail(pos - 4, "layer size out of range"));
            }
            sizes.push(s);
        }
        let mut layers = Vec::with_capacity(count - 1);
        for pair in sizes.windows(2) {
            let mut read = |len: usize| -> Result<Vec<f64>> {
                let raw = take(8 * len)?;
                Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            };
            let w = Array2::from_shape_vec((pair[1], pair[0]), read(pair[0] * pair[1])?).expect("shape");
            let b = Array1::from_vec(read(pair[1])?);
            layers.push(Layer { w, b });
        }
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes after parameters"));
        }
        Self::from_layers(layers, head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Adam with decoupled weight decay on weight matrices (biases are not
/// decayed).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

fn zeros_like(net: &DenseNet) -> Vec<Layer> {
    net.layers
        .iter()
        .map(|l| Layer { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
        .collect()
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros_like(net),
            second: zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update of `grads` (already averaged over the batch).
    pub fn step(&mut self, net: &mut DenseNet, grads: &[Layer]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let shrink = 1.0 - lr * self.weight_decay;
        for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut layer.w).and(&g.w).and(&mut m.w).and(&mut v.w).for_each(|p, &g, m, v| update(p, g, m, v, shrink));
            Zip::from(&mut layer.b).and(&g.b).and(&mut m.b).and(&mut v.b).for_each(|p, &g, m, v| update(p, g, m, v, 1.0));
        }
    }
}

/// Scalar Adam for SAC's log-temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAdam {
    pub lr: f64,
    m: f64,
    v: f64,
    step: u64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self { lr, m: 0.0, v: 0.0, step: 0 }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.step += 1;
        let t = self.step as i32;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let m_hat = self.m / (1.0 - 0.9f64.powi(t));
        let v_hat = self.v / (1.0 - 0.999f64.powi(t));
        *param -= self.lr * m_hat / (v_hat.sqrt() + 1e-8);
    }
}

/// Online network with a slowly tracking target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub online: DenseNet,
    pub target: DenseNet,
    pub tau: f64,
}

impl TargetPair {
    pub fn new(online: DenseNet, tau: f64) -> Self {
        Self { target: online.clone(), online, tau }
    }

    /// `target ← τ·online + (1 − τ)·target`, evaluated as
    /// `target + τ·(online − target)` so equal networks stay bit-identical.
    pub fn soft_update(&mut self) {
        let tau = self.tau;
        if tau == 1.0 {
            self.target.copy_from(&self.online);
            return;
        }
        for (t, o) in self.target.layers.iter_mut().zip(&self.online.layers) {
            Zip::from(&mut t.w).and(&o.w).for_each(|t, &o| *t += tau * (o - *t));
            Zip::from(&mut t.b).and(&o.b).for_each(|t, &o| *t += tau * (o - *t));
        }
    }
}

/// A batch of reparameterized draws from the squashed Gaussian policy.
#[derive(Debug, Clone)]
pub struct GaussianDraw {
    /// `π·tanh(z)`, strictly inside `(−π, π)`.
    pub action: Array2<f64>,
    /// Log density of `action`, one value per row.
    pub log_prob: Array1<f64>,
    pub z: Array2<f64>,
    pub eps: Array2<f64>,
    pub std: Array2<f64>,
}

/// `log(1 − tanh²(z))`, stable for large `|z|`.
pub fn log_one_minus_tanh_sq(z: f64) -> f64 {
    let a = z.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Largest |action| representable as strictly less than π after squashing.
const ACTION_LIMIT: f64 = PI * (1.0 - 1e-12);

/// Draws `z ~ N(mean, exp(log_std)²)` and squashes to `π·tanh(z)`. The
/// log-probability includes the `tanh` and `π` change-of-variables terms.
pub fn gaussian_sample(mean: ArrayView2<f64>, log_std: ArrayView2<f64>, rng: &mut Rng) -> GaussianDraw {
    let eps = Array2::from_shape_simple_fn(mean.raw_dim(), || StandardNormal.sample(rng));
    gaussian_with_noise(mean, log_std, eps)
}

/// Deterministic part of [`gaussian_sample`] for a given standard-normal draw.
pub fn gaussian_with_noise(mean: ArrayView2<f64>, log_std: ArrayView2<f64>, eps: Array2<f64>) -> GaussianDraw {
    let log_std = log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let std = log_std.mapv(f64::exp);
    let z = &mean + &(&std * &eps);
    let action = z.mapv(|v| (PI * v.tanh()).clamp(-ACTION_LIMIT, ACTION_LIMIT));
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let mut log_prob = Array1::zeros(mean.nrows());
    for (r, lp) in log_prob.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..mean.ncols() {
            let e = eps[[r, c]];
            acc += -0.5 * e * e - log_std[[r, c]] - half_ln_2pi - PI.ln() - log_one_minus_tanh_sq(z[[r, c]]);
        }
        *lp = acc;
    }
    GaussianDraw { action, log_prob, z, eps, std }
}

/// Splits a Gaussian-head output into `(mean, log_std)` views.
pub fn split_gaussian(out: &Array2<f64>) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
    let half = out.ncols() / 2;
    (out.slice(s![.., ..half]), out.slice(s![.., half..]))
}

/// Largest relative discrepancy between [`DenseNet::backward`] and central
/// finite differences of `L = Σ upstream ⊙ forward(x)`, over every
/// parameter and every input entry. Relative error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(net: &DenseNet, x: ArrayView2<f64>, upstream: ArrayView2<f64>, step: f64) -> f64 {
    let loss = |n: &DenseNet, x: ArrayView2<f64>| (&n.predict(x) * &upstream).sum();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let (_, cache) = net.forward(x);
    let (grads, dx) = net.backward(&cache, upstream, true);
    let grads = grads.expect("requested");
    let mut worst = 0.0f64;
    // a parameter of layer l only moves column j of that layer's
    // pre-activation, so the forward pass resumes from there
    let perturbed = |l: usize, j: usize, delta: ArrayView1<f64>| {
        let mut z = cache.pre[l].clone();
        z.column_mut(j).scaled_add(1.0, &delta);
        (&net.resume(l, z) * &upstream).sum()
    };
    let ones = Array1::<f64>::ones(x.nrows());
    for (l, g) in grads.iter().enumerate() {
        let input = &cache.inputs[l];
        for ((j, i), &analytic) in g.w.indexed_iter() {
            let col = input.column(i);
            let up = perturbed(l, j, (&col * step).view());
            let down = perturbed(l, j, (&col * -step).view());
            worst = worst.max(rel(analytic, (up - down) / (2.0 * step)));
        }
        for (j, &analytic) in g.b.indexed_iter() {
            let up = perturbed(l, j, (&ones * step).view());
            let down = perturbed(l, j, (&ones * -step).view());
            worst = worst.max(rel(analytic, (up - down) / (2.0 * step)));
        }
    }
    let mut xp = x.to_owned();
    for (idx, &analytic) in dx.indexed_iter() {
        let orig = xp[idx];
        xp[idx] = orig + step;
        let up = loss(net, xp.view());
        xp[idx] = orig - step;
        let down = loss(net, xp.view());
        xp[idx] = orig;
        worst = worst.max(rel(analytic, (up - down) / (2.0 * step)));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rng(seed: u64) -> Rng {
        stream(seed, Stream::Agents, 99)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut r = rng(7);
        for (i, head) in [Head::Linear, Head::Squash, Head::Gaussian].into_iter().enumerate() {
            let net = DenseNet::new(&[4, 16, 16, 4], head, 1.0, &mut r).unwrap();
            let x = Array2::from_shape_simple_fn((3, 4), || r.random_range(-1.0..1.0));
            let up = Array2::from_shape_simple_fn((3, 4), || r.random_range(-1.0..1.0));
            let err = gradient_check(&net, x.view(), up.view(), 1e-5);
            assert!(err < 1e-4, "head {i}: {err}");
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = DenseNet::new(&[3, 4, 2], Head::Linear, 1.0, &mut rng(0)).unwrap();
        for l in net.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let (y, _) = net.forward(array![[1.0, -2.0, 3.0]].view());
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn single_linear_layer() {
        let net = DenseNet::from_layers(vec![Layer { w: array![[2.0]], b: array![1.0] }], Head::Linear).unwrap();
        assert_eq!(net.predict(array![[3.0]].view()), array![[7.0]]);
    }

    #[test]
    fn squash_head_is_bounded() {
        let net = DenseNet::from_layers(vec![Layer { w: array![[1.0]], b: array![0.0] }], Head::Squash).unwrap();
        let y = net.predict(array![[50.0], [-50.0], [5.0]].view());
        assert!(y.iter().all(|v| v.abs() <= PI));
        assert_abs_diff_eq!(y[[0, 0]], PI, epsilon = 1e-12);
        assert!(y[[2, 0]].abs() < PI);
    }

    #[test]
    fn relu_gradient_vanishes_for_negative_preactivation() {
        let net = DenseNet::from_layers(
            vec![Layer { w: array![[1.0]], b: array![-5.0] }, Layer { w: array![[3.0]], b: array![0.0] }],
            Head::Linear,
        )
        .unwrap();
        let (_, cache) = net.forward(array![[1.0]].view());
        let (g, dx) = net.backward(&cache, array![[1.0]].view(), true);
        let g = g.unwrap();
        assert_eq!(dx[[0, 0]], 0.0);
        assert_eq!(g[0].w[[0, 0]], 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = DenseNet::new(&[4, 8, 3], Head::Squash, 1.0, &mut rng(3)).unwrap();
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let (_, cache) = net.forward(x.view());
        let up = Array2::from_shape_fn((2, 3), |(i, j)| 0.1 + i as f64 - 0.2 * j as f64);
        let (g1, d1) = net.backward(&cache, up.view(), true);
        let (g2, d2) = net.backward(&cache, (&up * 2.5).view(), true);
        for (a, b) in d1.iter().zip(&d2) {
            assert_abs_diff_eq!(2.5 * a, b, epsilon = 1e-12);
        }
        for (a, b) in g1.unwrap().iter().zip(&g2.unwrap()) {
            for (x, y) in a.w.iter().zip(&b.w) {
                assert_abs_diff_eq!(2.5 * x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let mut net = DenseNet::new(&[2, 3, 1], Head::Linear, 1.0, &mut rng(1)).unwrap();
        let before = net.clone();
        let mut opt = AdamState::new(&net, 3e-3, 0.0);
        let zeros = zeros_like(&net);
        opt.step(&mut net, &zeros);
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
        opt.step(&mut net, &zeros);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_decay_skips_biases() {
        let mut net = DenseNet::from_layers(vec![Layer { w: array![[1.0]], b: array![1.0] }], Head::Linear).unwrap();
        let mut opt = AdamState::new(&net, 0.1, 0.5);
        let zeros = zeros_like(&net);
        opt.step(&mut net, &zeros);
        assert_abs_diff_eq!(net.layers()[0].w[[0, 0]], 0.95, epsilon = 1e-15);
        assert_eq!(net.layers()[0].b[0], 1.0);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(p) = p², run as a 1×1 linear layer weight
        let mut net = DenseNet::from_layers(vec![Layer { w: array![[1.0]], b: array![0.0] }], Head::Linear).unwrap();
        let mut opt = AdamState::new(&net, 3e-3, 0.0);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let p = net.layers()[0].w[[0, 0]];
            losses.push(p * p);
            let g = vec![Layer { w: array![[2.0 * p]], b: array![0.0] }];
            opt.step(&mut net, &g);
        }
        let p = net.layers()[0].w[[0, 0]];
        assert!(p.abs() < 0.5, "p = {p}");
        let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in windows.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn soft_update_limits() {
        let a = DenseNet::new(&[3, 5, 2], Head::Linear, 1.0, &mut rng(4)).unwrap();
        let b = DenseNet::new(&[3, 5, 2], Head::Linear, 1.0, &mut rng(5)).unwrap();
        let mut pair = TargetPair { online: a.clone(), target: b.clone(), tau: 1.0 };
        pair.soft_update();
        assert_eq!(pair.target, a);
        let mut pair = TargetPair { online: a.clone(), target: b.clone(), tau: 0.0 };
        pair.soft_update();
        assert_eq!(pair.target, b);
        let mut pair = TargetPair::new(a.clone(), 0.3);
        pair.soft_update();
        assert_eq!(pair.target, a);

        let tau = 0.2;
        let mut pair = TargetPair { online: a.clone(), target: b, tau };
        let diff = |p: &TargetPair| (&p.online.layers()[0].w - &p.target.layers()[0].w).mapv(f64::abs).sum();
        let mut prev = diff(&pair);
        for _ in 0..10 {
            pair.soft_update();
            let d = diff(&pair);
            assert_abs_diff_eq!(d, (1.0 - tau) * prev, epsilon = 1e-10);
            prev = d;
        }
    }

    #[test]
    fn degenerate_gaussian_is_deterministic() {
        let mean = array![[0.3, -1.2]];
        let log_std = array![[-20.0, -20.0]];
        let draw = gaussian_sample(mean.view(), log_std.view(), &mut rng(6));
        for (a, m) in draw.action.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(*a, PI * m.tanh(), epsilon = 1e-7);
        }
    }

    #[test]
    fn gaussian_actions_inside_open_interval_with_finite_log_prob() {
        let mut r = rng(7);
        for _ in 0..1000 {
            let mean = Array2::from_shape_simple_fn((100, 1), || r.random_range(-30.0..30.0));
            let log_std = Array2::from_shape_simple_fn((100, 1), || r.random_range(-25.0..5.0));
            let draw = gaussian_sample(mean.view(), log_std.view(), &mut r);
            assert!(draw.action.iter().all(|a| a.abs() < PI));
            assert!(draw.log_prob.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn log_prob_matches_density_by_quadrature() {
        // integrate exp(log_prob) over the action range for one dimension
        let (mean, log_std) = (0.4f64, -0.3f64);
        let n = 200_000;
        let mut total = 0.0;
        for i in 0..n {
            let a = -PI + (i as f64 + 0.5) * 2.0 * PI / n as f64;
            let z = (a / PI).atanh();
            let eps = (z - mean) / log_std.exp();
            let draw = gaussian_with_noise(array![[mean]].view(), array![[log_std]].view(), array![[eps]]);
            total += draw.log_prob[0].exp() * 2.0 * PI / n as f64;
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let net = DenseNet::new(&[4, 7, 6], Head::Gaussian, 0.01, &mut rng(8)).unwrap();
        let mut bytes = Vec::new();
        net.write(&mut bytes).unwrap();
        assert_eq!(DenseNet::decode(&bytes).unwrap(), net);
        assert!(DenseNet::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DenseNet::decode(&bad), Err(ForgeError::Format { offset: 0, .. })));
    }
}
