//! Full conditional density model: encoder, leaf networks and circuit.

use std::ops::Range;

use circuits_autodiff::{Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{aggregate_tape, stack_scalars, zero_leaf};
use crate::data::{Query, SeriesInstance};
use crate::density::{ConditionalDensity, QueryLeaf};
use crate::encoder::{Encoder, EncoderDims};
use crate::error::{CoreError, Result};
use crate::leaf::{correlation_tape, dsf_tape, gaussian_tape, DsfParams, Marginal, U_CLAMP};
use crate::nn::{Mlp, ParamStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Single mixture component.
    pub no_spn: bool,
    /// Gaussian marginals instead of flows.
    pub no_dsf: bool,
    /// Identity copula.
    pub no_gc: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "no_spn" => a.no_spn = true,
            "no_dsf" => a.no_dsf = true,
            "no_gc" => a.no_gc = true,
            other => return Err(CoreError::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub components: usize,
    /// Per-component embedding width `D'`.
    pub d_component: usize,
    pub d_time: usize,
    pub d_chan: usize,
    pub heads: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub conditioner_hidden: usize,
    /// Feature width `H` of the copula correlation map.
    pub corr_dim: usize,
    pub ablation: Ablation,
    /// Channel at each circuit position (0-based); empty means ascending.
    pub channel_order: Vec<usize>,
    pub init_seed: u64,
    /// Negative-control fixture: makes the root weights depend on the number
    /// of queries, which breaks marginalization consistency on purpose.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub fixture_query_dependent_root: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            components: 2,
            d_component: 32,
            d_time: 16,
            d_chan: 15,
            heads: 2,
            flow_layers: 2,
            flow_hidden: 10,
            conditioner_hidden: 32,
            corr_dim: 16,
            ablation: Ablation::default(),
            channel_order: Vec::new(),
            init_seed: 0,
            fixture_query_dependent_root: false,
        }
    }
}

impl ModelConfig {
    /// Number of mixture components actually used.
    pub fn k(&self) -> usize {
        if self.ablation.no_spn {
            1
        } else {
            self.components
        }
    }

    pub fn width(&self) -> usize {
        self.k() * self.d_component
    }

    pub fn order(&self) -> Vec<usize> {
        if self.channel_order.is_empty() {
            (0..self.channels).collect()
        } else {
            self.channel_order.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if !(1..=4).contains(&self.k()) {
            return fail(format!("components must be in 1..=4, got {}", self.k()));
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return fail(format!("heads {} must divide width {}", self.heads, self.width()));
        }
        if self.flow_layers == 0 || self.flow_hidden == 0 || self.d_time < 2 || self.corr_dim == 0 {
            return fail("flow_layers, flow_hidden, corr_dim must be positive and d_time >= 2".into());
        }
        let order = self.order();
        let mut seen = order.clone();
        seen.sort_unstable();
        if seen != (0..self.channels).collect::<Vec<_>>() {
            return fail(format!("channel_order {order:?} is not a permutation of 0..{}", self.channels));
        }
        Ok(())
    }

    pub fn flow_params_per_row(&self) -> usize {
        3 * self.flow_hidden * self.flow_layers
    }
}

/// Parses a comma-separated 1-based channel permutation such as `"3,1,2"`.
pub fn parse_channel_order(s: &str, channels: usize) -> Result<Vec<usize>> {
    let order: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&c| c >= 1 && c <= channels)
                .map(|c| c - 1)
                .ok_or_else(|| CoreError::Config(format!("bad channel {p:?} in order {s:?}")))
        })
        .collect::<Result<_>>()?;
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..channels).collect::<Vec<_>>() {
        return Err(CoreError::Config(format!("{s:?} is not a permutation of 1..={channels}")));
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
enum Marginals {
    Flow { conditioner: Mlp },
    Gaussian { mean: Mlp, log_std: Mlp },
}

/// Queries grouped by circuit position.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayout {
    /// Original query index for each grouped row.
    pub perm: Vec<usize>,
    /// Grouped-row range of each circuit position.
    pub ranges: Vec<Range<usize>>,
}

impl QueryLayout {
    pub fn new(queries: &[Query], position_of_channel: &[usize]) -> Self {
        let positions = position_of_channel.len();
        let mut perm: Vec<usize> = (0..queries.len()).collect();
        perm.sort_by_key(|&i| position_of_channel[queries[i].c]);
        let mut ranges = Vec::with_capacity(positions);
        let mut start = 0;
        for p in 0..positions {
            let mut end = start;
            while end < perm.len() && position_of_channel[queries[perm[end]].c] == p {
                end += 1;
            }
            ranges.push(start..end);
            start = end;
        }
        Self { perm, ranges }
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub joint: Var,
    pub log_w_root: Var,
    pub log_w: Vec<Var>,
    /// Per circuit position, `[K]` leaf log-densities.
    pub leaves: Vec<Var>,
    pub layout: QueryLayout,
    /// Univariate log-densities `[K |Q|]`; row `k * |Q| + r` holds
    /// component `k` of grouped query `r`, as do the per-row tensors below.
    pub log_p: Var,
    pub flow_raw: Option<Var>,
    pub gauss: Option<(Var, Var)>,
    pub features: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    marginals: Marginals,
    corr: Option<Mlp>,
    position_of_channel: Vec<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ParamStore::new();
        let dims = EncoderDims {
            channels: cfg.channels,
            components: cfg.k(),
            width: cfg.width(),
            d_time: cfg.d_time,
            d_chan: cfg.d_chan,
            heads: cfg.heads,
        };
        let encoder = Encoder::new(&mut params, dims, &mut rng);
        let (dc, hid) = (cfg.d_component, cfg.conditioner_hidden);
        let marginals = if cfg.ablation.no_dsf {
            Marginals::Gaussian {
                mean: Mlp::new(&mut params, "leaf.mean", &[dc, hid, 1], &mut rng),
                log_std: Mlp::new(&mut params, "leaf.log_std", &[dc, hid, 1], &mut rng),
            }
        } else {
            Marginals::Flow {
                conditioner: Mlp::new(
                    &mut params,
                    "leaf.flow",
                    &[dc, hid, hid, cfg.flow_params_per_row()],
                    &mut rng,
                ),
            }
        };
        let corr = (!cfg.ablation.no_gc).then(|| Mlp::new(&mut params, "leaf.corr", &[dc, hid, cfg.corr_dim], &mut rng));
        let mut position_of_channel = vec![0; cfg.channels];
        for (p, &c) in cfg.order().iter().enumerate() {
            position_of_channel[c] = p;
        }
        Ok(Self {
            cfg,
            params,
            encoder,
            marginals,
            corr,
            position_of_channel,
        })
    }

    /// Rebuilds the model and installs `tensors` (checked against the
    /// freshly initialized names and shapes).
    pub fn with_params(cfg: ModelConfig, names: &[String], tensors: Vec<Tensor>) -> Result<Self> {
        let mut m = Model::new(cfg)?;
        if names != m.params.names() {
            return Err(CoreError::Checkpoint("parameter names do not match the configuration".into()));
        }
        for (dst, src) in m.params.tensors_mut().iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(m)
    }

    pub fn position_of_channel(&self) -> &[usize] {
        &self.position_of_channel
    }

    pub fn k(&self) -> usize {
        self.cfg.k()
    }

    fn check_instance(&self, inst: &SeriesInstance) -> Result<()> {
        if inst.channels != self.cfg.channels {
            return Err(CoreError::InvalidRecord {
                series_id: inst.series_id.clone(),
                reason: format!("{} channels, model expects {}", inst.channels, self.cfg.channels),
            });
        }
        if inst.queries.is_empty() {
            return Err(CoreError::EmptyQuerySet);
        }
        Ok(())
    }

    fn root_shift(&self, n_queries: usize) -> Option<Vec<f64>> {
        self.cfg
            .fixture_query_dependent_root
            .then(|| (0..self.k()).map(|k| 0.1 * n_queries as f64 * k as f64).collect())
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], inst: &SeriesInstance) -> Result<Forward> {
        self.check_instance(inst)?;
        let k = self.k();
        let dc = self.cfg.d_component;
        let layout = QueryLayout::new(&inst.queries, &self.position_of_channel);
        let grouped: Vec<Query> = layout.perm.iter().map(|&i| inst.queries[i]).collect();
        let nq = grouped.len();
        let shift = self.root_shift(nq);
        let enc = self
            .encoder
            .forward(tape, p, &inst.observations, &grouped, shift.as_deref())?;

        // Component-major stacking: row k * nq + r.
        let parts: Vec<Var> = (0..k)
            .map(|c| tape.slice_cols(enc.e_q, c * dc, (c + 1) * dc))
            .collect::<circuits_autodiff::Result<_>>()?;
        let e = if k == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let y_rows: Vec<f64> = (0..k)
            .flat_map(|_| layout.perm.iter().map(|&i| inst.targets[i]))
            .collect();
        let y = tape.constant(Tensor::matrix(k * nq, 1, y_rows));

        let (log_p, z, flow_raw, gauss) = match &self.marginals {
            Marginals::Flow { conditioner } => {
                let raw = conditioner.forward(tape, p, e)?;
                let (lp, logit) = dsf_tape(tape, raw, y, self.cfg.flow_layers, self.cfg.flow_hidden)?;
                let z = if self.corr.is_some() {
                    Some(tape.normal_quantile_of_logit(logit, U_CLAMP))
                } else {
                    None
                };
                (lp, z, Some(raw), None)
            }
            Marginals::Gaussian { mean, log_std } => {
                let mu = mean.forward(tape, p, e)?;
                let ls = log_std.forward(tape, p, e)?;
                let (lp, z) = gaussian_tape(tape, mu, ls, y)?;
                (lp, Some(z), None, Some((mu, ls)))
            }
        };
        let features = match &self.corr {
            Some(mlp) => {
                let v = mlp.forward(tape, p, e)?;
                Some(tape.tanh(v))
            }
            None => None,
        };

        let lp_col = tape.reshape(log_p, &[k * nq, 1])?;
        let z_col = match z {
            Some(z) => Some(tape.reshape(z, &[k * nq, 1])?),
            None => None,
        };
        let mut leaves = Vec::with_capacity(layout.ranges.len());
        for range in &layout.ranges {
            if range.is_empty() {
                leaves.push(zero_leaf(tape, k));
                continue;
            }
            let n = range.len();
            let mut comps = Vec::with_capacity(k);
            for c in 0..k {
                let (lo, hi) = (c * nq + range.start, c * nq + range.end);
                let rows = tape.slice_rows(lp_col, lo, hi)?;
                let mut leaf = tape.sum(rows);
                if let (Some(v), Some(z_col)) = (features, z_col) {
                    if n >= 2 {
                        let vg = tape.slice_rows(v, lo, hi)?;
                        let r = correlation_tape(tape, vg)?;
                        let zg = tape.slice_rows(z_col, lo, hi)?;
                        let zg = tape.reshape(zg, &[n])?;
                        let cop = tape.gaussian_copula_loglik(zg, r)?;
                        leaf = tape.add(leaf, cop)?;
                    }
                }
                comps.push(leaf);
            }
            leaves.push(stack_scalars(tape, &comps)?);
        }
        let joint = aggregate_tape(tape, &leaves, &enc.log_w, enc.log_w_root)?;
        Ok(Forward {
            joint,
            log_w_root: enc.log_w_root,
            log_w: enc.log_w,
            leaves,
            layout,
            log_p,
            flow_raw,
            gauss,
            features,
        })
    }

    /// `log p(targets | queries, observations)` without building gradients.
    pub fn joint_loglik(&self, inst: &SeriesInstance) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, false);
        let f = self.forward(&mut tape, &p, inst)?;
        Ok(tape.item(f.joint))
    }

    pub fn njnll(&self, inst: &SeriesInstance) -> Result<f64> {
        Ok(-self.joint_loglik(inst)? / inst.queries.len() as f64)
    }

    /// njNLL of one instance and its gradient for every parameter.
    pub fn njnll_and_grad(&self, inst: &SeriesInstance) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, true);
        let f = self.forward(&mut tape, &p, inst)?;
        let loss = tape.scale(f.joint, -1.0 / inst.queries.len() as f64);
        let grads: Gradients = tape.backward(loss)?;
        Ok((tape.item(loss), p.iter().map(|&v| grads.get(v)).collect()))
    }

    /// Extracts every per-query leaf parameter and the circuit weights for
    /// `inst`, so densities of any query subset and samples can be computed
    /// without further network evaluations.
    pub fn prepare(&self, inst: &SeriesInstance) -> Result<ConditionalDensity> {
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, false);
        let f = self.forward(&mut tape, &p, inst)?;
        let k = self.k();
        let nq = inst.queries.len();
        let mut per_query: Vec<Option<QueryLeaf>> = vec![None; nq];
        for (r, &qi) in f.layout.perm.iter().enumerate() {
            let mut marginals = Vec::with_capacity(k);
            let mut feats = Vec::with_capacity(k);
            for c in 0..k {
                let row = c * nq + r;
                let m = match (f.flow_raw, f.gauss) {
                    (Some(raw), _) => Marginal::Dsf(DsfParams::from_raw(
                        tape.value(raw).row(row),
                        self.cfg.flow_layers,
                        self.cfg.flow_hidden,
                    )),
                    (None, Some((mu, ls))) => Marginal::Gaussian {
                        mean: tape.value(mu).data()[row],
                        log_std: tape.value(ls).data()[row],
                    },
                    (None, None) => unreachable!("one marginal family is always present"),
                };
                marginals.push(m);
                if let Some(v) = f.features {
                    feats.push(tape.value(v).row(row).to_vec());
                }
            }
            per_query[qi] = Some(QueryLeaf {
                position: self.position_of_channel[inst.queries[qi].c],
                marginals,
                features: f.features.map(|_| feats),
            });
        }
        Ok(ConditionalDensity {
            k,
            positions: self.cfg.channels,
            log_w_root: tape.value(f.log_w_root).data().to_vec(),
            log_w: f.log_w.iter().map(|&w| tape.value(w).data().to_vec()).collect(),
            queries: per_query.into_iter().map(|q| q.expect("every query placed")).collect(),
        })
    }
}
