use rand::Rng;

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(in_dim, out_dim, bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Layer normalisation with learned per-feature scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// 1-D temporal convolution, kernel 3, zero "same" padding. Input is a
/// sequence of `T` matrices (one row per batch element).
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub lin: Linear,
}

impl TemporalConv {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin: Linear::new(store, name, 3 * in_dim, out_dim, rng),
        }
    }

    /// Convolution over constant inputs: windows are assembled directly.
    pub fn forward_const(&self, g: &mut Graph, seq: &[Tensor]) -> Vec<Var> {
        let t_len = seq.len();
        let (rows, cols) = seq[0].shape();
        (0..t_len)
            .map(|t| {
                let mut win = Tensor::zeros(rows, 3 * cols);
                for (k, off) in [-1isize, 0, 1].iter().enumerate() {
                    let s = t as isize + off;
                    if s < 0 || s >= t_len as isize {
                        continue;
                    }
                    let src = &seq[s as usize];
                    for r in 0..rows {
                        win.data[r * 3 * cols + k * cols..r * 3 * cols + (k + 1) * cols]
                            .copy_from_slice(src.row(r));
                    }
                }
                let x = g.constant(win);
                let y = self.lin.forward(g, x);
                g.relu(y)
            })
            .collect()
    }
}

/// Gated recurrent cell with update and reset gates.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.x"), in_dim, 3 * hidden, rng),
            wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gx = self.wx.forward(g, x);
        let gh = self.wh.forward(g, h);
        let gx_zr = g.slice_cols(gx, 0, 2 * hd);
        let gh_zr = g.slice_cols(gh, 0, 2 * hd);
        let zr_pre = g.add(gx_zr, gh_zr);
        let zr = g.sigmoid(zr_pre);
        let z = g.slice_cols(zr, 0, hd);
        let r = g.slice_cols(zr, hd, hd);
        let gx_n = g.slice_cols(gx, 2 * hd, hd);
        let gh_n = g.slice_cols(gh, 2 * hd, hd);
        let rn = g.mul(r, gh_n);
        let n_pre = g.add(gx_n, rn);
        let n = g.tanh(n_pre);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    /// Runs the sequence from a zero state and returns the final hidden state.
    pub fn run(&self, g: &mut Graph, seq: &[Var]) -> Var {
        let rows = g.shape(seq[0]).0;
        let mut h = g.constant(Tensor::zeros(rows, self.hidden));
        for &x in seq {
            h = self.step(g, x, h);
        }
        h
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let hd = self.dim / self.heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let outs: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, hd);
                let kh = g.slice_cols(k, h * hd, hd);
                let vh = g.slice_cols(v, h * hd, hd);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, inv);
                let a = g.softmax_rows(s);
                g.matmul(a, vh)
            })
            .collect();
        let cat = g.concat_cols(&outs);
        self.o.forward(g, cat)
    }
}
