//! The trainable embedding MLP and the linear classifier head.
//!
//! The embedding net is a stack of affine layers with ReLU between them (no
//! activation after the last layer). Depth 2 is the default architecture;
//! depth 0 is the identity map and carries no parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot_unchecked, Mat, Rng};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Raw proposal feature dimension.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Number of affine layers.
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 64,
            hidden_dim: 512,
            embed_dim: 128,
            depth: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("input_dim and embed_dim must be positive"));
        }
        if self.depth >= 2 && self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim must be positive"));
        }
        if self.depth == 0 && self.input_dim != self.embed_dim {
            return Err(Error::config(
                "depth 0 (identity) requires embed_dim == input_dim",
            ));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.depth {
            0 => vec![],
            1 => vec![(self.embed_dim, self.input_dim)],
            k => {
                let mut dims = vec![(self.hidden_dim, self.input_dim)];
                dims.extend(std::iter::repeat_n(
                    (self.hidden_dim, self.hidden_dim),
                    k - 2,
                ));
                dims.push((self.embed_dim, self.hidden_dim));
                dims
            }
        }
    }
}

/// Affine map `y = W x + b`, `W` stored as out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Linear {
            weight: Mat {
                rows: out_dim,
                cols: in_dim,
                data,
            },
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        axpy(1.0, &self.bias, &mut y);
        Ok(y)
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grads`.
    fn accumulate(&self, x: &[f64], dy: &[f64], grads: &mut Linear) {
        grads.weight.add_outer(1.0, dy, x);
        axpy(1.0, dy, &mut grads.bias);
    }

    fn check(&self) -> Result<()> {
        if self.bias.len() != self.weight.rows
            || self.weight.data.len() != self.weight.rows * self.weight.cols
        {
            return Err(Error::shape("linear layer bias/weight disagree"));
        }
        Ok(())
    }

    fn zeros_like(&self) -> Linear {
        Linear::zeros(self.out_dim(), self.in_dim())
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    fn slices(&self) -> [&[f64]; 2] {
        [&self.weight.data, &self.bias]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight.data, &mut self.bias]
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    /// Input to each layer; entry 0 is the raw feature.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer except the last.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub input_dim: usize,
    pub layers: Vec<Linear>,
}

impl EmbeddingNet {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_dims()
            .into_iter()
            .map(|(o, i)| Linear::glorot(o, i, rng))
            .collect();
        Ok(EmbeddingNet {
            input_dim: cfg.input_dim,
            layers,
        })
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Linear>) -> Result<Self> {
        let mut prev = input_dim;
        for (k, l) in layers.iter().enumerate() {
            l.check()?;
            if l.in_dim() != prev {
                return Err(Error::shape(format!(
                    "layer {k} expects input dim {} but receives {prev}",
                    l.in_dim()
                )));
            }
            prev = l.out_dim();
        }
        Ok(EmbeddingNet { input_dim, layers })
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Linear::out_dim)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.input_dim {
            return Err(Error::shape(format!(
                "feature of dim {} for a net with input dim {}",
                v.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass without retaining activations.
    pub fn embed(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(v)?;
        let mut x = v.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if k < last {
                relu_in_place(&mut x);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, v: &[f64]) -> Result<(Vec<f64>, EmbedCache)> {
        self.check_input(v)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n.saturating_sub(1));
        let mut x = v.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&x)?;
            inputs.push(std::mem::take(&mut x));
            if k + 1 < n {
                let mut a = y.clone();
                relu_in_place(&mut a);
                pre.push(y);
                x = a;
            } else {
                x = y;
            }
        }
        if n == 0 {
            inputs.push(v.to_vec());
        }
        Ok((x, EmbedCache { inputs, pre }))
    }

    /// Gradients of a scalar w.r.t. parameters and input, given `dq = ∂L/∂q`.
    pub fn backward(&self, cache: &EmbedCache, dq: &[f64]) -> Result<(Vec<Linear>, Vec<f64>)> {
        let mut grads = self.zero_grads();
        let dv = self.accumulate_backward(cache, dq, &mut grads, true)?;
        Ok((grads, dv.expect("input gradient requested")))
    }

    pub fn zero_grads(&self) -> Vec<Linear> {
        self.layers.iter().map(Linear::zeros_like).collect()
    }

    /// Adds parameter gradients into `grads`; returns `∂L/∂v` when asked.
    pub fn accumulate_backward(
        &self,
        cache: &EmbedCache,
        dq: &[f64],
        grads: &mut [Linear],
        want_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        let n = self.layers.len();
        let stale = grads.len() != n
            || cache.pre.len() != n.saturating_sub(1)
            || cache.inputs.len() != n.max(1)
            || dq.len() != self.embed_dim()
            || cache.inputs[0].len() != self.input_dim;
        if stale {
            return Err(Error::shape(
                "backward with a cache or gradient that does not match the net",
            ));
        }
        let mut delta = dq.to_vec();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if delta.iter().all(|&d| d == 0.0) && !want_input_grad {
                break;
            }
            layer.accumulate(&cache.inputs[k], &delta, &mut grads[k]);
            if k == 0 && !want_input_grad {
                break;
            }
            let mut dx = layer.weight.matvec_t(&delta)?;
            if k > 0 {
                for (g, &z) in dx.iter_mut().zip(&cache.pre[k - 1]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(want_input_grad.then_some(delta))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Linear::is_finite)
    }
}

#[inline]
fn relu_in_place(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

/// Shallow linear head over embeddings; output `k` scores `classes[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub classes: Vec<ClassId>,
    pub layer: Linear,
}

impl LinearClassifier {
    pub fn new(classes: Vec<ClassId>, embed_dim: usize, rng: &mut Rng) -> Self {
        let layer = Linear::glorot(classes.len(), embed_dim, rng);
        LinearClassifier { classes, layer }
    }

    pub fn zeros(classes: Vec<ClassId>, embed_dim: usize) -> Self {
        let layer = Linear::zeros(classes.len(), embed_dim);
        LinearClassifier { classes, layer }
    }

    pub fn logits(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.layer.in_dim() {
            return Err(Error::shape(format!(
                "embedding of dim {} for a classifier over dim {}",
                q.len(),
                self.layer.in_dim()
            )));
        }
        self.layer.forward(q)
    }

    /// Accumulates head gradients for `dlogits`; returns `∂L/∂q`.
    pub fn backward(&self, q: &[f64], dlogits: &[f64], grads: &mut Linear) -> Vec<f64> {
        self.layer.accumulate(q, dlogits, grads);
        let mut dq = vec![0.0; q.len()];
        for (k, &g) in dlogits.iter().enumerate() {
            if g != 0.0 {
                axpy(g, self.layer.weight.row(k), &mut dq);
            }
        }
        dq
    }

    pub fn num_outputs(&self) -> usize {
        self.classes.len()
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub net: EmbeddingNet,
    pub clf: LinearClassifier,
}

/// Gradients shaped like [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub embedder: Vec<Linear>,
    pub classifier: Linear,
}

impl Model {
    pub fn new(cfg: &NetConfig, classes: Vec<ClassId>, rng: &mut Rng) -> Result<Self> {
        let net = EmbeddingNet::new(cfg, rng)?;
        let clf = LinearClassifier::new(classes, net.embed_dim(), rng);
        Ok(Model { net, clf })
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            embedder: self.net.zero_grads(),
            classifier: self.clf.layer.zeros_like(),
        }
    }

    /// Parameter blocks in a fixed order, with stable names.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (k, l) in self.net.layers.iter().enumerate() {
            let [w, b] = l.slices();
            out.push((format!("embedder.layer{k}.weight"), w));
            out.push((format!("embedder.layer{k}.bias"), b));
        }
        let [w, b] = self.clf.layer.slices();
        out.push(("classifier.weight".to_string(), w));
        out.push(("classifier.bias".to_string(), b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.net.layers.iter_mut() {
            out.extend(l.slices_mut());
        }
        out.extend(self.clf.layer.slices_mut());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.clf.layer.is_finite()
    }
}

impl ParamGrads {
    /// Blocks in the same order as [`Model::blocks`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.embedder {
            out.extend(l.slices());
        }
        out.extend(self.classifier.slices());
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.embedder.iter_mut() {
            out.extend(l.slices_mut());
        }
        out.extend(self.classifier.slices_mut());
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|b| dot_unchecked(b, b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedder.iter().all(Linear::is_finite) && self.classifier.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(depth: usize) -> NetConfig {
        NetConfig {
            input_dim: 5,
            hidden_dim: 7,
            embed_dim: 4,
            depth,
        }
    }

    fn scalar_objective(q: &[f64], w: &[f64]) -> f64 {
        q.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = Rng::new(0);
        let mut net = EmbeddingNet::new(&small_cfg(2), &mut rng).unwrap();
        for l in net.layers.iter_mut() {
            *l = Linear::zeros(l.out_dim(), l.in_dim());
        }
        let q = net.embed(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert_eq!(q, vec![0.0; 4]);
    }

    #[test]
    fn identity_layers_pass_positive_input() {
        let layers = vec![
            Linear {
                weight: Mat::identity(3),
                bias: vec![0.0; 3],
            },
            Linear {
                weight: Mat::identity(3),
                bias: vec![0.0; 3],
            },
        ];
        let net = EmbeddingNet::from_layers(3, layers).unwrap();
        let v = vec![0.5, 2.0, 7.25];
        assert_eq!(net.embed(&v).unwrap(), v);
        let (q, _) = net.forward(&v).unwrap();
        assert_eq!(q, v);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(5);
        let net = EmbeddingNet::new(&small_cfg(3), &mut rng).unwrap();
        let v = rng.normal_vec(5, 1.0);
        let a = net.embed(&v).unwrap();
        let b = net.forward(&v).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, net.embed(&v).unwrap());
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let mut rng = Rng::new(5);
        let net = EmbeddingNet::new(&small_cfg(2), &mut rng).unwrap();
        assert!(net.embed(&[1.0, 2.0]).is_err());
        let (_, cache) = net.forward(&[0.0; 5]).unwrap();
        assert!(net.backward(&cache, &[1.0; 3]).is_err());

        let other = EmbeddingNet::new(&small_cfg(3), &mut rng).unwrap();
        assert!(other.backward(&cache, &[1.0; 4]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(8);
        let net = EmbeddingNet::new(&small_cfg(2), &mut rng).unwrap();
        let (_, cache) = net.forward(&rng.normal_vec(5, 1.0)).unwrap();
        let (grads, dv) = net.backward(&cache, &[0.0; 4]).unwrap();
        assert!(dv.iter().all(|&g| g == 0.0));
        for g in grads {
            assert!(g.weight.data.iter().all(|&x| x == 0.0));
            assert!(g.bias.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let mut rng = Rng::new(2);
        let net = EmbeddingNet::new(&small_cfg(1), &mut rng).unwrap();
        let v = rng.normal_vec(5, 1.0);
        let dq = rng.normal_vec(4, 1.0);
        let (_, cache) = net.forward(&v).unwrap();
        let (grads, _) = net.backward(&cache, &dq).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(grads[0].weight.get(r, c), dq[r] * v[c]);
            }
        }
        assert_eq!(grads[0].bias, dq);
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-6;
        for depth in 1..=4 {
            for seed in 0..5u64 {
                let mut rng = Rng::new(100 + seed);
                let mut net = EmbeddingNet::new(&small_cfg(depth), &mut rng).unwrap();
                for l in net.layers.iter_mut() {
                    l.bias = rng.normal_vec(l.bias.len(), 0.3);
                }
                let v = rng.normal_vec(5, 1.0);
                let w = rng.normal_vec(4, 1.0);
                let (_, cache) = net.forward(&v).unwrap();
                let (grads, dv) = net.backward(&cache, &w).unwrap();

                for k in 0..net.layers.len() {
                    for idx in 0..net.layers[k].weight.data.len() {
                        let orig = net.layers[k].weight.data[idx];
                        net.layers[k].weight.data[idx] = orig + h;
                        let fp = scalar_objective(&net.embed(&v).unwrap(), &w);
                        net.layers[k].weight.data[idx] = orig - h;
                        let fm = scalar_objective(&net.embed(&v).unwrap(), &w);
                        net.layers[k].weight.data[idx] = orig;
                        let fd = (fp - fm) / (2.0 * h);
                        let an = grads[k].weight.data[idx];
                        assert!(
                            rel_err(an, fd) < 1e-5,
                            "depth {depth} layer {k} w{idx}: {an} vs {fd}"
                        );
                    }
                }
                for i in 0..5 {
                    let mut vp = v.clone();
                    vp[i] += h;
                    let mut vm = v.clone();
                    vm[i] -= h;
                    let fd = (scalar_objective(&net.embed(&vp).unwrap(), &w)
                        - scalar_objective(&net.embed(&vm).unwrap(), &w))
                        / (2.0 * h);
                    assert!(rel_err(dv[i], fd) < 1e-5);
                }
            }
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn classifier_examples() {
        let clf = LinearClassifier::zeros(vec![ClassId(0), ClassId(1), ClassId(2)], 3);
        let logits = clf.logits(&[1.0, 2.0, 3.0]).unwrap();
        let p = crate::numeric::softmax(&logits).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let q = [2.0, 0.0, 0.0];
        let mut clf = LinearClassifier::zeros(vec![ClassId(0), ClassId(1)], 3);
        let n2 = 4.0;
        for c in 0..3 {
            clf.layer.weight.data[3 + c] = q[c] / n2;
        }
        assert_eq!(clf.logits(&q).unwrap()[1], 1.0);
        assert!(clf.logits(&[1.0]).is_err());
    }

    #[test]
    fn identity_net_has_no_params() {
        let mut rng = Rng::new(1);
        let cfg = NetConfig {
            input_dim: 3,
            hidden_dim: 0,
            embed_dim: 3,
            depth: 0,
        };
        let net = EmbeddingNet::new(&cfg, &mut rng).unwrap();
        assert_eq!(net.num_params(), 0);
        let (q, cache) = net.forward(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(q, vec![1.0, -1.0, 2.0]);
        let (_, dv) = net.backward(&cache, &[0.5, 0.25, 1.0]).unwrap();
        assert_eq!(dv, vec![0.5, 0.25, 1.0]);
        assert!(EmbeddingNet::new(
            &NetConfig {
                embed_dim: 2,
                ..cfg
            },
            &mut rng
        )
        .is_err());
    }
}
