//! Named parameter storage and the small layers built on the tape.

use circuits_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`, differentiable when `trainable`.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("shape and length agree")
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
    .expect("shape and length agree")
}

/// Affine map `x W + b` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => tape.add(y, p[b])?,
            None => y,
        })
    }
}

/// Stack of linear layers with tanh between them (not after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i + 1 < self.layers.len() {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide the model width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng),
            heads,
            dim,
        }
    }

    /// `mask`, when given, is added to the `[queries, keys]` logits of every
    /// head; use `-inf` to exclude a key. Fully masked rows produce zeros.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        xq: Var,
        xkv: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, xq)?;
        let k = self.k.forward(tape, p, xkv)?;
        let v = self.v.forward(tape, p, xkv)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.out.forward(tape, p, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_attention(
        store: &ParamStore,
        mha: &MultiHeadAttention,
        xq: &Tensor,
        xkv: &Tensor,
        mask: Option<&Tensor>,
    ) -> Vec<f64> {
        let t = store.tensors();
        let lin = |l: &Linear, x: &Tensor| -> Vec<Vec<f64>> {
            (0..x.rows())
                .map(|i| {
                    (0..l.fan_out)
                        .map(|j| {
                            let mut s = l.b.map_or(0.0, |b| t[b].data()[j]);
                            for k in 0..l.fan_in {
                                s += x.at(i, k) * t[l.w].at(k, j);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (lin(&mha.q, xq), lin(&mha.k, xkv), lin(&mha.v, xkv));
        let hd = mha.dim / mha.heads;
        let mut cat = vec![vec![0.0; mha.dim]; xq.rows()];
        for h in 0..mha.heads {
            for i in 0..xq.rows() {
                let logits: Vec<f64> = (0..xkv.rows())
                    .map(|j| {
                        let dot: f64 = (h * hd..(h + 1) * hd).map(|d| q[i][d] * k[j][d]).sum();
                        dot / (hd as f64).sqrt() + mask.map_or(0.0, |m| m.at(i, j))
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for d in h * hd..(h + 1) * hd {
                    cat[i][d] = (0..xkv.rows()).map(|j| w[j] / z * v[j][d]).sum();
                }
            }
        }
        let cat = Tensor::from_rows(&cat);
        lin(&mha.out, &cat).into_iter().flatten().collect()
    }

    #[test]
    fn attention_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 6, 2, &mut rng);
        let xq = normal(&mut rng, &[3, 6], 1.0);
        let xkv = normal(&mut rng, &[5, 6], 1.0);
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[
            vec![0.0, ninf, 0.0, 0.0, ninf],
            vec![ninf; 5],
            vec![0.0; 5],
        ]);
        let mut tape = Tape::new();
        let p = store.load(&mut tape, false);
        let (q, kv, m) = (
            tape.constant(xq.clone()),
            tape.constant(xkv.clone()),
            tape.constant(mask.clone()),
        );
        let out = mha.forward(&mut tape, &p, q, kv, Some(m)).unwrap();
        let want = brute_attention(&store, &mha, &xq, &xkv, Some(&mask));
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // The fully masked row is exactly zero.
        assert!(tape.value(out).row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_keys_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 4, 2, &mut rng);
        let mut tape = Tape::new();
        let p = store.load(&mut tape, false);
        let q = tape.constant(normal(&mut rng, &[3, 4], 1.0));
        let kv = tape.constant(Tensor::zeros(&[0, 4]));
        let out = mha.forward(&mut tape, &p, q, kv, None).unwrap();
        assert_eq!(tape.shape(out), &[3, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }
}
