//! Synthetic bifurcating random-walk benchmark and its exact density.
//!
//! Each channel is stationary noise around 0 until the bifurcation step,
//! then a drifted random walk restarted from 0 whose drift sign is a fair
//! coin. Raw timestamps are the 1-based step indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Observation, Query, SeriesInstance};
use crate::error::{CoreError, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifurcationConfig {
    pub n_series: usize,
    pub n_channels: usize,
    pub n_steps: usize,
    pub noise_std: f64,
    pub drift_mag: f64,
    pub bifurcation_step: usize,
    pub drop_rate: f64,
    pub obs_fraction: f64,
    pub seed: u64,
}

impl Default for BifurcationConfig {
    fn default() -> Self {
        Self {
            n_series: 10_000,
            n_channels: 4,
            n_steps: 50,
            noise_std: 0.1,
            drift_mag: 0.1,
            bifurcation_step: 18,
            drop_rate: 0.05,
            obs_fraction: 0.25,
            seed: 0,
        }
    }
}

impl BifurcationConfig {
    /// Number of leading steps that become observations.
    pub fn obs_steps(&self) -> usize {
        (self.obs_fraction * self.n_steps as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.obs_fraction > 0.0 && self.obs_fraction < 1.0) {
            return fail("obs_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail("drop_rate must lie in [0, 1)");
        }
        if self.n_channels == 0 {
            return fail("n_channels must be positive");
        }
        if self.bifurcation_step <= self.obs_steps() || self.bifurcation_step > self.n_steps {
            return fail("bifurcation_step must fall after the observation window and within n_steps");
        }
        if !(self.noise_std > 0.0) {
            return fail("noise_std must be positive");
        }
        Ok(())
    }
}

/// Generates one series; the RNG stream is derived from `seed + index`.
pub fn gen_series(cfg: &BifurcationConfig, index: usize) -> SeriesInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let obs_steps = cfg.obs_steps();
    let mut observations = Vec::new();
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for c in 0..cfg.n_channels {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let mut prev = 0.0;
        let mut values = Vec::with_capacity(cfg.n_steps);
        for k in 1..=cfg.n_steps {
            let eps: f64 = rng.sample(StandardNormal);
            let y = if k < cfg.bifurcation_step {
                cfg.noise_std * eps
            } else {
                prev + sign * cfg.drift_mag + cfg.noise_std * eps
            };
            if k >= cfg.bifurcation_step {
                prev = y;
            }
            values.push(y);
        }
        for (i, &y) in values.iter().enumerate() {
            let k = i + 1;
            if rng.gen::<f64>() < cfg.drop_rate {
                continue;
            }
            let t = k as f64;
            if k <= obs_steps {
                observations.push(Observation { t, c, y });
            } else {
                queries.push(Query { t, c });
                targets.push(y);
            }
        }
    }
    SeriesInstance {
        series_id: format!("bif-{index:06}"),
        channels: cfg.n_channels,
        observations,
        queries,
        targets,
    }
}

pub fn gen_bifurcation(cfg: &BifurcationConfig) -> Result<Vec<SeriesInstance>> {
    cfg.validate()?;
    Ok((0..cfg.n_series).map(|i| gen_series(cfg, i)).collect())
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var - 0.5 * var.ln() - LN_SQRT_2PI
}

/// Exact `log p(targets | queries)` for a raw-space instance.
pub fn oracle_log_density(inst: &SeriesInstance, cfg: &BifurcationConfig) -> f64 {
    let var = cfg.noise_std * cfg.noise_std;
    let b = cfg.bifurcation_step;
    let mut total = 0.0;
    for c in 0..inst.channels {
        let mut post: Vec<(usize, f64)> = Vec::new();
        for (q, &y) in inst.queries.iter().zip(&inst.targets) {
            if q.c != c {
                continue;
            }
            let k = q.t.round() as usize;
            if k < b {
                total += normal_logpdf(y, 0.0, var);
            } else {
                post.push((k + 1 - b, y));
            }
        }
        if post.is_empty() {
            continue;
        }
        post.sort_by_key(|p| p.0);
        let branch = |sign: f64| {
            let (mut n0, mut y0, mut lp) = (0usize, 0.0, 0.0);
            for &(n, y) in &post {
                let dn = (n - n0) as f64;
                lp += normal_logpdf(y - y0, sign * cfg.drift_mag * dn, var * dn);
                n0 = n;
                y0 = y;
            }
            lp
        };
        let (lp, lm) = (branch(1.0), branch(-1.0));
        let m = lp.max(lm);
        total += m + ((lp - m).exp() + (lm - m).exp()).ln() + 0.5f64.ln();
    }
    total
}

pub fn oracle_njnll(inst: &SeriesInstance, cfg: &BifurcationConfig) -> f64 {
    -oracle_log_density(inst, cfg) / inst.queries.len() as f64
}

/// Oracle njNLL of a standardized instance, measured in standardized space.
pub fn oracle_njnll_standardized(
    inst: &SeriesInstance,
    stats: &ChannelStats,
    cfg: &BifurcationConfig,
) -> f64 {
    let raw = stats.denormalize(inst);
    let jacobian: f64 = inst.queries.iter().map(|q| stats.std[q.c].ln()).sum();
    -(oracle_log_density(&raw, cfg) + jacobian) / inst.queries.len() as f64
}
