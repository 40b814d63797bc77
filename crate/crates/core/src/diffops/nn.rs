//! Small network building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Xavier-uniform weight `[fan_in, fan_out]` and zero bias `[1, fan_out]`.
pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("sized"));
    store.insert(format!("{name}.b"), Tensor::row(vec![0.0; fan_out]));
}

/// Affine map `x W + b` with parameters `{name}.w`, `{name}.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
}

impl Linear {
    pub fn new(name: impl Into<String>) -> Self {
        Linear { name: name.into() }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R, fan_in: usize, fan_out: usize) {
        init_linear(store, rng, &self.name, fan_in, fan_out);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.bind(store, &format!("{}.w", self.name))?;
        let b = g.bind(store, &format!("{}.b", self.name))?;
        g.linear(x, w, b)
    }

    /// Zeroes weight and bias, making the layer output identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for suffix in ["w", "b"] {
            if let Some(t) = store.get_mut(&format!("{}.{suffix}", self.name)) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Stack of linear layers with relu between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = (0..dims.len() - 1).map(|i| Linear::new(format!("{name}.l{i}"))).collect();
        Mlp { layers, dims: dims.to_vec() }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for (i, l) in self.layers.iter().enumerate() {
            l.init(store, rng, self.dims[i], self.dims[i + 1]);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("nonempty")
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::shape("mh_attention (dim % heads)", &[dim], &[heads]));
        }
        Ok(MultiHeadAttention { name: name.into(), dim, heads })
    }

    fn proj(&self, p: &str) -> Linear {
        Linear::new(format!("{}.{p}", self.name))
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for p in ["q", "k", "v", "o"] {
            self.proj(p).init(store, rng, self.dim, self.dim);
        }
    }

    /// `queries [nq, D]`, `keys`/`values [nk, D]` -> `[nq, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, values: Var) -> Result<Var> {
        for v in [queries, keys, values] {
            if g.value(v).cols() != self.dim {
                return Err(Error::shape("mh_attention input", g.shape(v), &[self.dim]));
            }
        }
        if g.value(keys).rows() != g.value(values).rows() {
            return Err(Error::shape("mh_attention keys/values", g.shape(keys), g.shape(values)));
        }
        let q = self.proj("q").forward(g, store, queries)?;
        let k = self.proj("k").forward(g, store, keys)?;
        let v = self.proj("v").forward(g, store, values)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.proj("o").forward(g, store, cat)
    }
}

/// Functional form of [`MultiHeadAttention::forward`].
pub fn mh_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    queries: Var,
    keys: Var,
    values: Var,
) -> Result<Var> {
    attn.forward(g, store, queries, keys, values)
}
