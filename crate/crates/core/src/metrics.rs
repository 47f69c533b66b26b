//! Likelihood and sample-based scores, aggregated into a JSON report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SeriesInstance;
use crate::error::Result;
use crate::model::Model;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sample energy score of `samples` (`S x |Q|`) against `y`.
pub fn energy_score(samples: &[Vec<f64>], y: &[f64]) -> f64 {
    let s = samples.len() as f64;
    let first: f64 = samples.iter().map(|x| dist(x, y)).sum::<f64>() / s;
    let mut pair = 0.0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            pair += dist(a, b);
        }
    }
    // Off-diagonal pairs counted once above, twice in the double sum.
    first - pair / (s * s)
}

/// Sample CRPS of one coordinate; uses the sorted form of the pairwise term.
pub fn crps_1d(samples: &mut [f64], y: f64) -> f64 {
    let s = samples.len() as f64;
    let first: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
    samples.sort_unstable_by(f64::total_cmp);
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - S + 1) x_(i)
    let pair: f64 = samples
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - s + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    first - pair / (2.0 * s * s)
}

/// Mean over queries of the per-coordinate sample CRPS.
pub fn crps(samples: &[Vec<f64>], y: &[f64]) -> f64 {
    let mut col = vec![0.0; samples.len()];
    let total: f64 = (0..y.len())
        .map(|q| {
            for (c, s) in col.iter_mut().zip(samples) {
                *c = s[q];
            }
            crps_1d(&mut col, y[q])
        })
        .sum();
    total / y.len() as f64
}

/// Mean over queries of the squared error of the sample mean.
pub fn mse_of_means(samples: &[Vec<f64>], y: &[f64]) -> f64 {
    let s = samples.len() as f64;
    let total: f64 = (0..y.len())
        .map(|q| {
            let mean = samples.iter().map(|x| x[q]).sum::<f64>() / s;
            (mean - y[q]).powi(2)
        })
        .sum();
    total / y.len() as f64
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_digest(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_instance: Vec<f64>,
}

impl MetricSummary {
    pub fn new(per_instance: Vec<f64>) -> Self {
        let mean = per_instance.iter().sum::<f64>() / per_instance.len() as f64;
        Self { mean, per_instance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub series_ids: Vec<String>,
    pub njnll: MetricSummary,
    pub mnll: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crps: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_score: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_of_means: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_njnll: Option<MetricSummary>,
    pub samples: usize,
    pub seed: u64,
    /// Instances without queries, excluded from every metric.
    pub skipped: usize,
    pub config_digest: String,
}

struct InstanceScores {
    njnll: f64,
    mnll: f64,
    sampled: Option<(f64, f64, f64)>,
}

fn score(model: &Model, inst: &SeriesInstance, samples: usize, seed: u64, index: usize) -> Result<InstanceScores> {
    let density = model.prepare(inst)?;
    let njnll = model.njnll(inst)?;
    let mnll = density.mnll(&inst.targets)?;
    let sampled = if samples == 0 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let draws = density.sample(&mut rng, samples)?;
        let y = &inst.targets;
        Some((crps(&draws, y), energy_score(&draws, y), mse_of_means(&draws, y)))
    };
    Ok(InstanceScores { njnll, mnll, sampled })
}

/// Scores every instance with queries. Sample metrics use `samples` draws
/// per instance from a stream derived from `(seed, instance index)`.
pub fn evaluate(
    model: &Model,
    instances: &[SeriesInstance],
    samples: usize,
    seed: u64,
    config_digest: String,
) -> Result<MetricsReport> {
    let scored: Vec<(usize, InstanceScores)> = instances
        .par_iter()
        .enumerate()
        .filter(|(_, inst)| !inst.queries.is_empty())
        .map(|(i, inst)| score(model, inst, samples, seed, i).map(|s| (i, s)))
        .collect::<Result<_>>()?;
    let skipped = instances.len() - scored.len();
    if skipped > 0 {
        log::warn!("{skipped} instances without queries skipped");
    }
    let pick = |f: &dyn Fn(&InstanceScores) -> f64| MetricSummary::new(scored.iter().map(|(_, s)| f(s)).collect());
    let sampled = |j: usize| {
        (samples > 0).then(|| {
            pick(&|s: &InstanceScores| {
                let t = s.sampled.expect("sampled when samples > 0");
                [t.0, t.1, t.2][j]
            })
        })
    };
    Ok(MetricsReport {
        series_ids: scored.iter().map(|(i, _)| instances[*i].series_id.clone()).collect(),
        njnll: pick(&|s| s.njnll),
        mnll: pick(&|s| s.mnll),
        crps: sampled(0),
        energy_score: sampled(1),
        mse_of_means: sampled(2),
        oracle_njnll: None,
        samples,
        seed,
        skipped,
        config_digest,
    })
}
