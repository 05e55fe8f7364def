//! Parameter-name-based building blocks shared by the CF, LM and projector
//! models. A layer only stores the names of its parameters; values live in a
//! [`ParamStore`] and are pulled onto a tape at forward time, so the same
//! layer runs in f32 training and f64 gradient checks.

use rand::Rng as _;
use softslot_numerics::{Float, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;
const MASK_VALUE: f64 = -1e9;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn named(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            fan_in,
            fan_out,
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let l = Self::named(prefix, fan_in, fan_out);
        store.insert(&l.weight, Tensor::uniform(&[fan_in, fan_out], xavier(fan_in, fan_out), rng))?;
        store.insert(&l.bias, Tensor::zeros(&[fan_out]))?;
        Ok(l)
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight)?;
        let b = tape.param(&self.bias)?;
        Ok(tape.add_row(tape.matmul(x, w)?, b)?)
    }

    /// Plain forward on one row, outside any tape.
    pub fn apply_row(&self, store: &ParamStore, x: &[f32]) -> Result<Vec<f32>> {
        let w = store.require(&self.weight)?.data();
        let mut out = store.require(&self.bias)?.data().to_vec();
        for (p, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(&w[p * self.fan_out..(p + 1) * self.fan_out]) {
                *o += xv * wv;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn named(prefix: &str) -> Self {
        LayerNorm {
            gain: format!("{prefix}.g"),
            bias: format!("{prefix}.b"),
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let l = Self::named(prefix);
        store.insert(&l.gain, Tensor::filled(&[dim], 1.0))?;
        store.insert(&l.bias, Tensor::zeros(&[dim]))?;
        Ok(l)
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain)?;
        let b = tape.param(&self.bias)?;
        Ok(tape.layer_norm(x, g, b, Self::EPS)?)
    }

    pub fn apply_row(&self, store: &ParamStore, x: &[f32]) -> Result<Vec<f32>> {
        let g = store.require(&self.gain)?.data();
        let b = store.require(&self.bias)?.data();
        let m = x.len() as f32;
        let mean = x.iter().sum::<f32>() / m;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m;
        let is = 1.0 / (var + Self::EPS as f32).sqrt();
        Ok(x.iter().enumerate().map(|(j, &v)| (v - mean) * is * g[j] + b[j]).collect())
    }
}

/// Inverted dropout. Disabled when constructed with [`Dropout::off`].
pub struct Dropout {
    rate: f64,
    rng: Option<Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply<T: Float>(&mut self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let shape = tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = T::c(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random_bool(self.rate) { T::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

/// `[n, n]` additive mask: 0 on and below the diagonal, a large negative value above.
pub fn causal_mask<T: Float>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::c(MASK_VALUE);
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Multi-head causal self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn named(prefix: &str, dim: usize, heads: usize) -> Self {
        Attention {
            q: Linear::named(&format!("{prefix}.q"), dim, dim),
            k: Linear::named(&format!("{prefix}.k"), dim, dim),
            v: Linear::named(&format!("{prefix}.v"), dim, dim),
            o: Linear::named(&format!("{prefix}.o"), dim, dim),
            heads,
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        for part in ["q", "k", "v", "o"] {
            Linear::init(store, &format!("{prefix}.{part}"), dim, dim, rng)?;
        }
        Ok(Self::named(prefix, dim, heads))
    }

    /// `x: [n, dim]`, `mask: [n, n]` additive.
    pub fn forward<T: Float>(&self, tape: &Tape<T>, x: Var, mask: Var, drop: &mut Dropout) -> Result<Var> {
        let dim = self.q.fan_out;
        let dh = dim / self.heads;
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, a, b)?, tape.slice_cols(k, a, b)?, tape.slice_cols(v, a, b)?)
            };
            let scores = tape.add(tape.scale(tape.matmul_t(qh, kh)?, scale)?, mask)?;
            let p = drop.apply(tape, tape.softmax_rows(scores)?)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, cat)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + ff(ln2(h))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn named(prefix: &str, dim: usize, heads: usize, ff: usize) -> Self {
        Block {
            ln1: LayerNorm::named(&format!("{prefix}.ln1")),
            attn: Attention::named(&format!("{prefix}.attn"), dim, heads),
            ln2: LayerNorm::named(&format!("{prefix}.ln2")),
            ff1: Linear::named(&format!("{prefix}.ff1"), dim, ff),
            ff2: Linear::named(&format!("{prefix}.ff2"), ff, dim),
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, ff: usize, rng: &mut Rng) -> Result<Self> {
        LayerNorm::init(store, &format!("{prefix}.ln1"), dim)?;
        Attention::init(store, &format!("{prefix}.attn"), dim, heads, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln2"), dim)?;
        Linear::init(store, &format!("{prefix}.ff1"), dim, ff, rng)?;
        Linear::init(store, &format!("{prefix}.ff2"), ff, dim, rng)?;
        Ok(Self::named(prefix, dim, heads, ff))
    }

    pub fn forward<T: Float>(&self, tape: &Tape<T>, x: Var, mask: Var, drop: &mut Dropout) -> Result<Var> {
        let a = self.attn.forward(tape, self.ln1.forward(tape, x)?, mask, drop)?;
        let h = tape.add(x, drop.apply(tape, a)?)?;
        let f = self.ff1.forward(tape, self.ln2.forward(tape, h)?)?;
        let f = self.ff2.forward(tape, tape.relu(f)?)?;
        Ok(tape.add(h, drop.apply(tape, f)?)?)
    }
}

/// Row-wise dot product of two `[n, d]` matrices, as `[n, 1]`.
pub fn row_dot<T: Float>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    Ok(tape.sum_rows(tape.mul(a, b)?)?)
}

/// Mean over rows of `[n, d]`, as `[1, d]`.
pub fn mean_rows<T: Float>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let w = tape.constant(Tensor::filled(&[1, n], T::c(1.0 / n as f64)));
    Ok(tape.matmul(w, x)?)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
