#![allow(dead_code)]

use circuits_core::bifurcation::{gen_series, BifurcationConfig};
use circuits_core::data::{ChannelStats, Observation, Query, SeriesInstance};
use circuits_core::model::{Ablation, Model, ModelConfig};
use rand::Rng;
use rand_distr::StandardNormal;

/// Mean closed-form njNLL, in standardized space, of the test split of the
/// default bifurcation dataset (10000 series, 70/10/20 split, seed 0).
pub const ORACLE_TEST_NJNLL: f64 = -1.328_910_011_341_290_4;

/// Small dimensions so tests stay fast; the structure is the full model.
pub fn small_config(channels: usize, components: usize, ablation: Ablation, seed: u64) -> ModelConfig {
    ModelConfig {
        channels,
        components,
        d_component: 4,
        d_time: 4,
        d_chan: 3,
        heads: 2,
        flow_layers: 2,
        flow_hidden: 3,
        conditioner_hidden: 6,
        corr_dim: 3,
        ablation,
        channel_order: Vec::new(),
        init_seed: seed,
        fixture_query_dependent_root: false,
    }
}

pub fn small_model(channels: usize, components: usize, ablation: Ablation, seed: u64) -> Model {
    Model::new(small_config(channels, components, ablation, seed)).unwrap()
}

/// Random instance with up to `max_obs` observations and `1..=max_q` queries
/// scattered over channels at random times in `[0, 1]`.
pub fn random_instance(rng: &mut impl Rng, channels: usize, max_obs: usize, max_q: usize) -> SeriesInstance {
    let n_obs = rng.gen_range(0..=max_obs);
    let n_q = rng.gen_range(1..=max_q);
    let normal = |rng: &mut dyn rand::RngCore| -> f64 { rng.sample(StandardNormal) };
    let observations = (0..n_obs)
        .map(|_| Observation {
            t: rng.gen::<f64>(),
            c: rng.gen_range(0..channels),
            y: normal(rng),
        })
        .collect();
    let queries = (0..n_q)
        .map(|_| Query {
            t: rng.gen::<f64>(),
            c: rng.gen_range(0..channels),
        })
        .collect();
    SeriesInstance {
        series_id: format!("r{}", rng.gen::<u32>()),
        channels,
        observations,
        queries,
        targets: (0..n_q).map(|_| normal(rng)).collect(),
    }
}

pub fn ablations() -> Vec<Ablation> {
    let mut out = vec![Ablation::default()];
    for name in ["no_spn", "no_dsf", "no_gc"] {
        out.push(Ablation::parse(name).unwrap());
    }
    out
}

/// Two-channel bifurcation series, standardized, cut to its first 3 queries.
pub fn tiny_instance() -> SeriesInstance {
    let cfg = BifurcationConfig {
        n_series: 8,
        n_channels: 2,
        ..Default::default()
    };
    let raw: Vec<SeriesInstance> = (0..8).map(|i| gen_series(&cfg, i)).collect();
    let mut inst = ChannelStats::fit(&raw).unwrap().apply(&raw[0]);
    inst.queries.truncate(3);
    inst.targets.truncate(3);
    inst
}
