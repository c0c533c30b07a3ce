use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, invalid, Result};
use crate::rng::standard_normal;

/// Number of sinusoidal time features appended after input normalisation.
pub const TIME_FEATURES: usize = 8;

/// Sinusoidal embedding of `t in [0, 1]`: `sin(w_k t), cos(w_k t)` for
/// `w_k = 4^k`, `k = 0..4`.
pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    let mut e = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = 4f64.powi(k as i32);
        e[2 * k] = (w * t).sin();
        e[2 * k + 1] = (w * t).cos();
    }
    e
}

/// Fully connected tanh network over `[normalise(x), embed(t)]`.
///
/// All weights live in one flat vector so optimisers, hashing and finite
/// difference checks can treat the parameters uniformly. Layer `l` stores a
/// row-major `fan_out x fan_in` weight block followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input_dim: usize,
    widths: Vec<usize>,
    norm_shift: Vec<f64>,
    norm_scale: Vec<f64>,
    params: Vec<f64>,
}

/// Low-rank deltas `W_l + A_l B_l^T` plus an optional bias row added to the
/// first pre-activation. `layer_offsets[l]` locates `A_l` (`fan_out x r`),
/// immediately followed by `B_l` (`fan_in x r`), inside `params`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterView<'a> {
    pub rank: usize,
    pub params: &'a [f64],
    pub layer_offsets: &'a [Option<usize>],
    pub first_bias_offset: Option<usize>,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
    lowrank: Vec<Option<Vec<f64>>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient with respect to the base parameters, if requested.
    pub params: Option<Vec<f64>>,
    /// Gradient with respect to the adapter parameter vector, if present.
    pub adapter: Option<Vec<f64>>,
    /// Gradient with respect to the raw input `x`.
    pub input: Vec<f64>,
}

impl Mlp {
    /// `hidden` widths between the (input + time) layer and `output_dim`.
    /// The last layer is scaled by `output_scale` at init so fresh networks
    /// start close to a zero output.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        let mut widths = vec![input_dim + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let mut params = Vec::new();
        let n_layers = widths.len() - 1;
        for l in 0..n_layers {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let mut s = (1.0 / fi as f64).sqrt();
            if l + 1 == n_layers {
                s *= output_scale;
            }
            params.extend(standard_normal(rng, fi * fo).into_iter().map(|z| s * z));
            params.extend(std::iter::repeat(0.0).take(fo));
        }
        Ok(Self {
            input_dim,
            widths,
            norm_shift: vec![0.0; input_dim],
            norm_scale: vec![1.0; input_dim],
            params,
        })
    }

    /// Fix the input standardisation `(x - shift) * scale`.
    pub fn set_normalization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        check_dim(self.input_dim, shift.len())?;
        check_dim(self.input_dim, scale.len())?;
        self.norm_shift = shift;
        self.norm_scale = scale;
        Ok(())
    }

    /// Standardisation fitted to the per-coordinate mean and spread of `data`.
    pub fn normalize_to(&mut self, data: &[Vec<f64>]) -> Result<()> {
        let mean = crate::linalg::mean(data);
        let n = data.len().max(1) as f64;
        let scale = (0..self.input_dim)
            .map(|j| {
                let var = data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                1.0 / var.sqrt().max(1.0)
            })
            .collect();
        self.set_normalization(mean, scale)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l], self.widths[l + 1])
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.widths[k + 1] * (self.widths[k] + 1)).sum()
    }

    /// SHA-256 over the raw parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.trace(x, t, None)?.output)
    }

    pub fn trace(&self, x: &[f64], t: f64, adapter: Option<&AdapterView<'_>>) -> Result<Trace> {
        check_dim(self.input_dim, x.len())?;
        let mut h: Vec<f64> = x
            .iter()
            .zip(self.norm_shift.iter().zip(&self.norm_scale))
            .map(|(xi, (m, s))| (xi - m) * s)
            .collect();
        h.extend_from_slice(&time_embedding(t));
        let n_layers = self.num_layers();
        let mut acts = Vec::with_capacity(n_layers);
        let mut lowrank = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fi, fo) = self.layer_shape(l);
            let off = self.layer_offset(l);
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + fi * fo + fo];
            let mut z: Vec<f64> = (0..fo)
                .map(|o| b[o] + crate::linalg::dot(&w[o * fi..(o + 1) * fi], &h))
                .collect();
            let mut u_keep = None;
            if let Some(a) = adapter {
                if let Some(aoff) = a.layer_offsets.get(l).copied().flatten() {
                    let r = a.rank;
                    let am = &a.params[aoff..aoff + fo * r];
                    let bm = &a.params[aoff + fo * r..aoff + fo * r + fi * r];
                    let mut u = vec![0.0; r];
                    for (i, hi) in h.iter().enumerate() {
                        for k in 0..r {
                            u[k] += bm[i * r + k] * hi;
                        }
                    }
                    for (o, zo) in z.iter_mut().enumerate() {
                        *zo += crate::linalg::dot(&am[o * r..(o + 1) * r], &u);
                    }
                    u_keep = Some(u);
                }
                if l == 0 {
                    if let Some(boff) = a.first_bias_offset {
                        for (zo, bo) in z.iter_mut().zip(&a.params[boff..boff + fo]) {
                            *zo += bo;
                        }
                    }
                }
            }
            acts.push(h);
            lowrank.push(u_keep);
            h = if l + 1 < n_layers { z.into_iter().map(f64::tanh).collect() } else { z };
        }
        Ok(Trace { acts, lowrank, output: h })
    }

    /// Backpropagate `grad_output = dL/d(output)` through a trace.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: &[f64],
        adapter: Option<&AdapterView<'_>>,
        want_param_grad: bool,
    ) -> Result<Gradients> {
        check_dim(self.output_dim(), grad_output.len())?;
        let mut gp = want_param_grad.then(|| vec![0.0; self.params.len()]);
        let mut ga = adapter.map(|a| vec![0.0; a.params.len()]);
        let mut delta = grad_output.to_vec();
        let mut input = Vec::new();
        for l in (0..self.num_layers()).rev() {
            let (fi, fo) = self.layer_shape(l);
            let off = self.layer_offset(l);
            let h = &trace.acts[l];
            let w = &self.params[off..off + fi * fo];
            if let Some(g) = gp.as_mut() {
                for o in 0..fo {
                    let d = delta[o];
                    for i in 0..fi {
                        g[off + o * fi + i] += d * h[i];
                    }
                    g[off + fi * fo + o] += d;
                }
            }
            let mut dh = vec![0.0; fi];
            for o in 0..fo {
                let d = delta[o];
                if d != 0.0 {
                    crate::linalg::axpy(d, &w[o * fi..(o + 1) * fi], &mut dh);
                }
            }
            if let (Some(a), Some(g)) = (adapter, ga.as_mut()) {
                if let (Some(aoff), Some(u)) = (a.layer_offsets.get(l).copied().flatten(), &trace.lowrank[l]) {
                    let r = a.rank;
                    let am = &a.params[aoff..aoff + fo * r];
                    let bm = &a.params[aoff + fo * r..aoff + fo * r + fi * r];
                    let mut du = vec![0.0; r];
                    for o in 0..fo {
                        for k in 0..r {
                            g[aoff + o * r + k] += delta[o] * u[k];
                            du[k] += am[o * r + k] * delta[o];
                        }
                    }
                    let boff = aoff + fo * r;
                    for i in 0..fi {
                        for k in 0..r {
                            g[boff + i * r + k] += h[i] * du[k];
                            dh[i] += bm[i * r + k] * du[k];
                        }
                    }
                }
                if l == 0 {
                    if let Some(boff) = a.first_bias_offset {
                        for o in 0..fo {
                            g[boff + o] += delta[o];
                        }
                    }
                }
            }
            if l > 0 {
                delta = dh.iter().zip(h).map(|(d, a)| d * (1.0 - a * a)).collect();
            } else {
                input = dh[..self.input_dim]
                    .iter()
                    .zip(&self.norm_scale)
                    .map(|(d, s)| d * s)
                    .collect();
            }
        }
        Ok(Gradients { params: gp, adapter: ga, input })
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn loss(net: &Mlp, x: &[f64], t: f64, adapter: Option<&AdapterView<'_>>, w: &[f64]) -> f64 {
        let y = net.trace(x, t, adapter).unwrap().output;
        y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = crate::linalg::norm(a).max(crate::linalg::norm(b)).max(1e-12);
        num / den
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let mut rng = stream(5, 0);
        let mut net = Mlp::new(3, &[5, 4], 2, 1.0, &mut rng).unwrap();
        net.set_normalization(vec![0.1, -0.2, 0.3], vec![0.8, 1.1, 0.5]).unwrap();
        let x = [0.4, -0.7, 1.2];
        let t = 0.37;
        let w = [0.3, -1.1];
        let tr = net.trace(&x, t, None).unwrap();
        let gout: Vec<f64> = tr.output.iter().zip(&w).map(|(y, wi)| y + wi).collect();
        let g = net.backward(&tr, &gout, None, true).unwrap();
        let analytic = g.params.unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..net.num_params())
            .map(|i| {
                let mut p = net.clone();
                p.params_mut()[i] += h;
                let mut m = net.clone();
                m.params_mut()[i] -= h;
                (loss(&p, &x, t, None, &w) - loss(&m, &x, t, None, &w)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&analytic, &numeric) < 1e-4);
        let nx: Vec<f64> = (0..3)
            .map(|i| {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                (loss(&net, &xp, t, None, &w) - loss(&net, &xm, t, None, &w)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&g.input, &nx) < 1e-4);
    }

    #[test]
    fn adapter_gradients_match_central_differences() {
        let mut rng = stream(6, 0);
        let net = Mlp::new(2, &[4, 3], 2, 1.0, &mut rng).unwrap();
        let r = 2;
        // layer 0: A 4x2, B 10x2 ; layer 1: A 3x2, B 4x2 ; bias row of 4
        let l0 = 4 * r + 10 * r;
        let l1 = 3 * r + 4 * r;
        let offsets = vec![Some(0), Some(l0), None];
        let mut ap = standard_normal(&mut rng, l0 + l1 + 4);
        ap.iter_mut().for_each(|v| *v *= 0.3);
        let x = [0.5, -0.25];
        let t = 0.6;
        let w = [1.0, -0.5];
        let view = |p: &[f64]| -> f64 {
            let v = AdapterView { rank: r, params: p, layer_offsets: &offsets, first_bias_offset: Some(l0 + l1) };
            loss(&net, &x, t, Some(&v), &w)
        };
        let v = AdapterView { rank: r, params: &ap, layer_offsets: &offsets, first_bias_offset: Some(l0 + l1) };
        let tr = net.trace(&x, t, Some(&v)).unwrap();
        let gout: Vec<f64> = tr.output.iter().zip(&w).map(|(y, wi)| y + wi).collect();
        let g = net.backward(&tr, &gout, Some(&v), false).unwrap();
        let analytic = g.adapter.unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..ap.len())
            .map(|i| {
                let mut p = ap.clone();
                p[i] += h;
                let mut m = ap.clone();
                m[i] -= h;
                (view(&p) - view(&m)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn zero_adapter_leaves_output_unchanged() {
        let mut rng = stream(7, 0);
        let net = Mlp::new(2, &[6], 2, 1.0, &mut rng).unwrap();
        let zeros = vec![0.0; 6 * 2 + 10 * 2 + 6];
        let offsets = vec![Some(0), None];
        let v = AdapterView { rank: 2, params: &zeros, layer_offsets: &offsets, first_bias_offset: Some(32) };
        let a = net.trace(&[0.3, 0.1], 0.2, Some(&v)).unwrap().output;
        let b = net.forward(&[0.3, 0.1], 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_and_digest() {
        let net = Mlp::new(2, &[16, 16], 3, 1.0, &mut stream(0, 0)).unwrap();
        assert_eq!(net.num_params(), (10 * 16 + 16) + (16 * 16 + 16) + (16 * 3 + 3));
        let mut other = net.clone();
        assert_eq!(net.digest(), other.digest());
        other.params_mut()[0] += 1e-12;
        assert_ne!(net.digest(), other.digest());
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }
}
