//! Attention encoder from observation triplets to channel states, query
//! embeddings and circuit mixing weights.
//!
//! Mixing weights are computed from the observations alone; queries only
//! enter through `e_q`, whose rows are computed independently of each other.

use circuits_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::data::{Observation, Query};
use crate::error::Result;
use crate::nn::{normal, Linear, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderDims {
    pub channels: usize,
    /// Mixture components `K`.
    pub components: usize,
    /// Model width `D = K * D'`.
    pub width: usize,
    pub d_time: usize,
    pub d_chan: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub dims: EncoderDims,
    omega: usize,
    phase: usize,
    e_chan: usize,
    e_proto: usize,
    e_cw: usize,
    input: Linear,
    intra: MultiHeadAttention,
    inter: MultiHeadAttention,
    weights: MultiHeadAttention,
    proj_qry: Linear,
    proj_root: Linear,
    proj_w: Linear,
}

/// Tape handles for one encoded instance.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Channel context states `[C, D]`, rows by channel index.
    pub h_tilde: Var,
    /// Query embeddings `[|Q|, D]` in the order the queries were given.
    pub e_q: Var,
    /// Log root weights `[K]`.
    pub log_w_root: Var,
    /// Log sum-layer weights `[K^2, K]` for circuit positions `1..C`,
    /// column-normalized; entry `(i * K + j, k)`.
    pub log_w: Vec<Var>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, rng: &mut impl Rng) -> Self {
        let EncoderDims {
            channels: c,
            components: k,
            width: d,
            d_time,
            d_chan,
            heads,
        } = dims;
        let omega = store.add("time.omega", normal(rng, &[d_time], 3.0));
        let phase = store.add("time.phase", normal(rng, &[d_time], 1.0));
        let e_chan = store.add("embed.channel", normal(rng, &[c, d_chan], 1.0));
        let e_proto = store.add("embed.prototype", normal(rng, &[c, d], 1.0));
        let e_cw = store.add("embed.circuit", normal(rng, &[c, d], 1.0));
        let input = Linear::new(store, "input", d_time + d_chan + 1, d, true, rng);
        let intra = MultiHeadAttention::new(store, "intra", d, heads, rng);
        let inter = MultiHeadAttention::new(store, "inter", d, heads, rng);
        let weights = MultiHeadAttention::new(store, "weights", d, heads, rng);
        let proj_qry = Linear::new(store, "proj.query", d_time + d, d, true, rng);
        let proj_root = Linear::new(store, "proj.root", d, k, true, rng);
        let proj_w = Linear::new(store, "proj.sum", d, k * k * k, true, rng);
        Self {
            dims,
            omega,
            phase,
            e_chan,
            e_proto,
            e_cw,
            input,
            intra,
            inter,
            weights,
            proj_qry,
            proj_root,
            proj_w,
        }
    }

    /// `[lin, sin, sin, ...]` embedding of a column of timestamps `[N, 1]`.
    pub fn time_embed(&self, tape: &mut Tape, p: &[Var], t: Var) -> Result<Var> {
        let x = tape.mul(t, p[self.omega])?;
        let x = tape.add(x, p[self.phase])?;
        let lin = tape.slice_cols(x, 0, 1)?;
        let per = tape.slice_cols(x, 1, self.dims.d_time)?;
        let per = tape.sin(per);
        Ok(tape.concat_cols(&[lin, per])?)
    }

    pub fn embed_observations(&self, tape: &mut Tape, p: &[Var], obs: &[Observation]) -> Result<Var> {
        let n = obs.len();
        let t = tape.constant(Tensor::matrix(n, 1, obs.iter().map(|o| o.t).collect()));
        let y = tape.constant(Tensor::matrix(n, 1, obs.iter().map(|o| o.y).collect()));
        let phi = self.time_embed(tape, p, t)?;
        let chans: Vec<usize> = obs.iter().map(|o| o.c).collect();
        let e = tape.gather_rows(p[self.e_chan], &chans)?;
        let x = tape.concat_cols(&[phi, e, y])?;
        self.input.forward(tape, p, x)
    }

    pub fn intra_channel(&self, tape: &mut Tape, p: &[Var], h_obs: Var, obs: &[Observation]) -> Result<Var> {
        let c = self.dims.channels;
        let mut mask = Tensor::full(&[c, obs.len()], f64::NEG_INFINITY);
        for (n, o) in obs.iter().enumerate() {
            mask.data_mut()[o.c * obs.len() + n] = 0.0;
        }
        let mask = tape.constant(mask);
        let att = self.intra.forward(tape, p, p[self.e_proto], h_obs, Some(mask))?;
        Ok(tape.add(p[self.e_proto], att)?)
    }

    pub fn inter_channel(&self, tape: &mut Tape, p: &[Var], h_chan: Var) -> Result<Var> {
        let att = self.inter.forward(tape, p, h_chan, h_chan, None)?;
        Ok(tape.add(h_chan, att)?)
    }

    pub fn query_embeddings(&self, tape: &mut Tape, p: &[Var], queries: &[Query], h_tilde: Var) -> Result<Var> {
        let n = queries.len();
        let t = tape.constant(Tensor::matrix(n, 1, queries.iter().map(|q| q.t).collect()));
        let phi = self.time_embed(tape, p, t)?;
        let chans: Vec<usize> = queries.iter().map(|q| q.c).collect();
        let h = tape.gather_rows(h_tilde, &chans)?;
        let x = tape.concat_cols(&[phi, h])?;
        self.proj_qry.forward(tape, p, x)
    }

    /// Root and sum-layer log weights. `root_shift`, when given, is added to
    /// the root logits (used only by the negative-control fixture).
    pub fn circuit_weights(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h_tilde: Var,
        root_shift: Option<&[f64]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (c, k) = (self.dims.channels, self.dims.components);
        let z = self.weights.forward(tape, p, p[self.e_cw], h_tilde, None)?;
        let z0 = tape.slice_rows(z, 0, 1)?;
        let mut logits = self.proj_root.forward(tape, p, z0)?;
        if let Some(shift) = root_shift {
            let s = tape.constant(Tensor::matrix(1, k, shift.to_vec()));
            logits = tape.add(logits, s)?;
        }
        let log_root = tape.log_softmax(logits, 1)?;
        let log_root = tape.reshape(log_root, &[k])?;
        let mut log_w = Vec::with_capacity(c.saturating_sub(1));
        if c > 1 {
            let rest = tape.slice_rows(z, 1, c)?;
            let raw = self.proj_w.forward(tape, p, rest)?;
            for pos in 0..c - 1 {
                let row = tape.slice_rows(raw, pos, pos + 1)?;
                let m = tape.reshape(row, &[k * k, k])?;
                log_w.push(tape.log_softmax(m, 0)?);
            }
        }
        Ok((log_root, log_w))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        obs: &[Observation],
        queries: &[Query],
        root_shift: Option<&[f64]>,
    ) -> Result<EncoderOutput> {
        let h_obs = self.embed_observations(tape, p, obs)?;
        let h_chan = self.intra_channel(tape, p, h_obs, obs)?;
        let h_tilde = self.inter_channel(tape, p, h_chan)?;
        let (log_w_root, log_w) = self.circuit_weights(tape, p, h_tilde, root_shift)?;
        let e_q = self.query_embeddings(tape, p, queries, h_tilde)?;
        Ok(EncoderOutput {
            h_tilde,
            e_q,
            log_w_root,
            log_w,
        })
    }
}
