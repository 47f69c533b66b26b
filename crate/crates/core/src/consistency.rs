//! Executable marginalization-consistency audit.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::data::SeriesInstance;
use crate::error::Result;
use crate::model::Model;
use crate::quadrature::integrate;

/// Maximum allowed log-density gap between marginalizing the full circuit
/// and evaluating the reduced instance directly.
pub const CONSISTENCY_TOL: f64 = 1e-9;
/// Relative tolerance of the quadrature check.
pub const QUADRATURE_TOL: f64 = 1e-3;
pub const QUADRATURE_RANGE: f64 = 50.0;

/// Uniform nonempty strict subset of `0..n` (requires `n >= 2`).
pub fn random_drop_set(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    assert!(n >= 2, "a strict nonempty drop set needs two queries");
    let size = rng.gen_range(1..n);
    let mut drop = index::sample(rng, n, size).into_vec();
    drop.sort_unstable();
    drop
}

/// `|marginalize_eval(drop) - joint_loglik(reduced)|` for one instance.
pub fn structural_gap(model: &Model, inst: &SeriesInstance, drop: &[usize]) -> Result<f64> {
    let marginal = model.prepare(inst)?.marginalize_eval(&inst.targets, drop)?;
    let reduced = model.joint_loglik(&inst.without_queries(drop))?;
    Ok((marginal - reduced).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub series_id: String,
    pub drop: Vec<usize>,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureCheck {
    pub series_id: String,
    pub integral: f64,
    pub reduced_density: f64,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub trials: usize,
    pub max_discrepancy: f64,
    /// First trial exceeding the tolerance.
    pub violation: Option<Violation>,
    pub quadrature: Option<QuadratureCheck>,
    pub passed: bool,
}

/// Integrates the joint density of a two-query instance over the value of
/// query `m` and compares with the density of the remaining query.
pub fn quadrature_check(model: &Model, inst: &SeriesInstance, m: usize) -> Result<QuadratureCheck> {
    assert_eq!(inst.queries.len(), 2, "quadrature check needs exactly two queries");
    let density = model.prepare(inst)?;
    let other = 1 - m;
    let reduced = density.marginalize_eval(&inst.targets, &[m])?.exp();
    let mut y = inst.targets.clone();
    let mut failed = None;
    let q = integrate(
        |v| {
            y[m] = v;
            match density.joint_loglik(&y) {
                Ok(l) => l.exp(),
                Err(e) => {
                    failed.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        -QUADRATURE_RANGE,
        QUADRATURE_RANGE,
        400,
        1e-8,
        2_000_000,
    );
    if let Some(e) = failed {
        return Err(e);
    }
    let relative_error = (q.value - reduced).abs() / reduced.abs().max(f64::MIN_POSITIVE);
    log::debug!("quadrature on {} (query {other} kept): {q:?}", inst.series_id);
    Ok(QuadratureCheck {
        series_id: inst.series_id.clone(),
        integral: q.value,
        reduced_density: reduced,
        relative_error,
        passed: relative_error <= QUADRATURE_TOL,
    })
}

/// Runs `trials` random (instance, drop set) comparisons over instances with
/// at least two queries, plus one quadrature check on the first such
/// instance cut down to two queries.
pub fn consistency_check(
    model: &Model,
    instances: &[SeriesInstance],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<ConsistencyReport> {
    let eligible: Vec<&SeriesInstance> = instances.iter().filter(|i| i.queries.len() >= 2).collect();
    let mut max_discrepancy: f64 = 0.0;
    let mut violation = None;
    if !eligible.is_empty() {
        for _ in 0..trials {
            let inst = eligible[rng.gen_range(0..eligible.len())];
            let drop = random_drop_set(rng, inst.queries.len());
            let gap = structural_gap(model, inst, &drop)?;
            // NaN gaps count as violations.
            if !(gap <= CONSISTENCY_TOL) && violation.is_none() {
                violation = Some(Violation {
                    series_id: inst.series_id.clone(),
                    drop,
                    discrepancy: gap,
                });
            }
            max_discrepancy = if gap.is_nan() || max_discrepancy.is_nan() {
                f64::NAN
            } else {
                max_discrepancy.max(gap)
            };
        }
    }
    let quadrature = match eligible.first() {
        Some(inst) => {
            let n = inst.queries.len();
            let pair = inst.without_queries(&(2..n).collect::<Vec<_>>());
            Some(quadrature_check(model, &pair, 0)?)
        }
        None => None,
    };
    let passed = violation.is_none() && quadrature.as_ref().map_or(true, |q| q.passed);
    Ok(ConsistencyReport {
        trials,
        max_discrepancy,
        violation,
        quadrature,
        passed,
    })
}
