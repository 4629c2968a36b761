//! Small MLP with Gaussian Fourier time features, reverse-mode gradients and Adam.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::{normal, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub n_freq: usize,
    pub freq_scale: f64,
}

impl NetConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self { dim, hidden: vec![128, 128], n_freq: 64, freq_scale: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `(fan_in, fan_out)`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

/// MLP on `[x | sin(2πωt) | cos(2πωt)]`; the frequencies ω are frozen at init.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet<T> {
    pub dim: usize,
    pub freqs: Array1<T>,
    pub layers: Vec<Dense<T>>,
}

/// Activations kept for the backward pass.
pub struct Cache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

impl<T: Scalar> ScoreNet<T> {
    /// LeCun-normal weights, zero biases, ω ~ N(0, freq_scale²).
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> Self {
        let freqs = Array1::from_shape_fn(cfg.n_freq, |_| T::of(cfg.freq_scale) * normal::<T>(rng));
        let mut widths = vec![cfg.dim + 2 * cfg.n_freq];
        widths.extend(&cfg.hidden);
        widths.push(cfg.dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = T::of(1.0 / (w[0] as f64).sqrt());
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| scale * normal::<T>(rng)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { dim: cfg.dim, freqs, layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Trainable parameters in layer order (w row-major, then b).
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[T]) {
        let mut it = p.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().expect("parameter count"));
        }
    }

    pub fn embed(&self, t: &[T]) -> Array2<T> {
        let two_pi = T::of(2.0) * T::PI();
        let f = self.freqs.len();
        let mut e = Array2::zeros((t.len(), 2 * f));
        for (r, &tv) in t.iter().enumerate() {
            for k in 0..f {
                let a = two_pi * self.freqs[k] * tv;
                e[[r, k]] = a.sin();
                e[[r, f + k]] = a.cos();
            }
        }
        e
    }

    /// Network output for a batch; rejects non-finite inputs.
    pub fn forward(&self, x: ArrayView2<T>, t: &[T]) -> Result<Array2<T>> {
        if x.iter().chain(t).any(|v| !v.is_finite()) {
            return invalid("non-finite network input");
        }
        Ok(self.forward_cached(x, t).0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>, t: &[T]) -> (Array2<T>, Cache<T>) {
        assert_eq!(x.ncols(), self.dim, "input dimension");
        assert_eq!(x.nrows(), t.len(), "batch size");
        let mut h = concatenate(Axis(1), &[x, self.embed(t).view()]).expect("same row count");
        let mut cache = Cache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::new() };
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w) + &layer.b;
            cache.inputs.push(h);
            if l == last {
                return (z, cache);
            }
            h = z.mapv(silu);
            cache.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients of Σ ⟨grad_out, output⟩ with respect to every layer.
    pub fn backward(&self, cache: &Cache<T>, grad_out: ArrayView2<T>) -> Vec<Dense<T>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads.push(Dense { w: input.t().dot(&g), b: g.sum_axis(Axis(0)) });
            if l > 0 {
                let mut back = g.dot(&self.layers[l].w.t());
                Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|b, &z| *b *= silu_grad(z));
                g = back;
            }
        }
        grads.reverse();
        grads
    }

    /// Zero network (zero weights and biases, frequencies kept).
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.w.fill(T::zero());
            l.b.fill(T::zero());
        }
        z
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    pub fn update(&mut self, net: &mut ScoreNet<T>, grads: &[Dense<T>]) {
        self.step += 1;
        let b1t = T::one() - self.beta1.powi(self.step as i32);
        let b2t = T::one() - self.beta2.powi(self.step as i32);
        let mut k = 0;
        for (layer, g) in net.layers.iter_mut().zip(grads) {
            for (p, &gv) in layer.w.iter_mut().chain(layer.b.iter_mut()).zip(g.w.iter().chain(g.b.iter())) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (T::one() - self.beta1) * gv;
                *v = self.beta2 * *v + (T::one() - self.beta2) * gv * gv;
                *p -= self.lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// ema ← decay·ema + (1 − decay)·net
pub fn ema_update<T: Scalar>(ema: &mut ScoreNet<T>, net: &ScoreNet<T>, decay: T) {
    for (e, n) in ema.layers.iter_mut().zip(&net.layers) {
        Zip::from(&mut e.w).and(&n.w).for_each(|a, &b| *a = decay * *a + (T::one() - decay) * b);
        Zip::from(&mut e.b).and(&n.b).for_each(|a, &b| *a = decay * *a + (T::one() - decay) * b);
    }
}

/// Rows of `data` drawn uniformly with replacement.
pub fn draw_rows<T: Scalar>(data: ArrayView2<T>, n: usize, rng: &mut Rng) -> Array2<T> {
    let mut out = Array2::zeros((n, data.ncols()));
    for r in 0..n {
        let k = rng.random_range(0..data.nrows());
        out.slice_mut(s![r, ..]).assign(&data.row(k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;

    fn small() -> NetConfig {
        NetConfig { dim: 2, hidden: vec![8, 8], n_freq: 4, freq_scale: 16.0 }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = ScoreNet::<f64>::new(&small(), &mut substream(0, 0)).zeroed();
        let out = net.forward(array![[0.3, -2.0], [1.0, 5.0]].view(), &[0.1, 0.9]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ScoreNet::<f64>::new(&small(), &mut substream(3, 0));
        let b = ScoreNet::<f64>::new(&small(), &mut substream(3, 0));
        let x = array![[0.3, -2.0]];
        assert_eq!(a.forward(x.view(), &[0.4]).unwrap(), b.forward(x.view(), &[0.4]).unwrap());
        assert!(a.forward(array![[f64::NAN, 0.0]].view(), &[0.4]).is_err());
    }

    #[test]
    fn param_round_trip() {
        let mut a = ScoreNet::<f64>::new(&small(), &mut substream(3, 0));
        let p = a.params();
        assert_eq!(p.len(), a.n_params());
        let mut q = p.clone();
        q[5] += 1.0;
        a.set_params(&q);
        assert_eq!(a.params(), q);
    }

    #[test]
    fn single_weight_perturbation_is_second_order() {
        let net = ScoreNet::<f64>::new(&small(), &mut substream(9, 0));
        let x = array![[0.4, -0.7]];
        let t = [0.37];
        let (y0, cache) = net.forward_cached(x.view(), &t);
        let grads = net.backward(&cache, array![[1.0, 0.0]].view());
        let g = grads[0].w[[1, 3]];
        let mut errs = Vec::new();
        for h in [1e-2, 5e-3] {
            let mut p = net.clone();
            p.layers[0].w[[1, 3]] += h;
            let y1 = p.forward(x.view(), &t).unwrap();
            errs.push((y1[[0, 0]] - y0[[0, 0]] - h * g).abs());
        }
        // halving h divides the remainder by ~4
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
    }
}
