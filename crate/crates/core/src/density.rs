//! Plain evaluation of a prepared conditional density: marginalization,
//! per-query marginals and ancestral sampling.

use circuits_autodiff::linalg;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::circuit::recursive_aggregate;
use crate::error::{CoreError, Result};
use crate::leaf::{copula_loglik, copula_sample_scores, correlation_matrix, Marginal};

/// Leaf parameters of one query, one entry per mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLeaf {
    pub position: usize,
    pub marginals: Vec<Marginal>,
    /// Correlation feature rows, absent when the copula is disabled.
    pub features: Option<Vec<Vec<f64>>>,
}

/// Everything needed to evaluate `p(y | Q, X)` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDensity {
    pub k: usize,
    pub positions: usize,
    pub log_w_root: Vec<f64>,
    /// Flattened `[K^2, K]` log weights for positions `1..C`.
    pub log_w: Vec<Vec<f64>>,
    /// In the instance's query order.
    pub queries: Vec<QueryLeaf>,
}

impl ConditionalDensity {
    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    fn check_len(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.queries.len() {
            return Err(CoreError::Config(format!(
                "{} values for {} queries",
                y.len(),
                self.queries.len()
            )));
        }
        Ok(())
    }

    /// Kept query indices at each position, in query order.
    fn groups(&self, keep: &[bool]) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.positions];
        for (i, q) in self.queries.iter().enumerate() {
            if keep[i] {
                groups[q.position].push(i);
            }
        }
        groups
    }

    /// `C x K` leaf log-densities of the kept queries.
    pub fn leaf_matrix(&self, y: &[f64], keep: &[bool]) -> Result<Vec<Vec<f64>>> {
        self.check_len(y)?;
        let mut leaves = vec![vec![0.0; self.k]; self.positions];
        for (p, group) in self.groups(keep).iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            for c in 0..self.k {
                let mut lp = Vec::with_capacity(group.len());
                let mut z = Vec::with_capacity(group.len());
                for &i in group {
                    let (l, s) = self.queries[i].marginals[c].log_pdf_and_score(y[i]);
                    lp.push(l);
                    z.push(s);
                }
                let mut leaf: f64 = lp.iter().sum();
                if group.len() >= 2 {
                    if let Some(rows) = self.feature_rows(group, c) {
                        let r = correlation_matrix(&rows);
                        leaf += copula_loglik(&z, &r)?;
                    }
                }
                leaves[p][c] = leaf;
            }
        }
        Ok(leaves)
    }

    fn feature_rows(&self, group: &[usize], c: usize) -> Option<Vec<&[f64]>> {
        group
            .iter()
            .map(|&i| self.queries[i].features.as_ref().map(|f| f[c].as_slice()))
            .collect()
    }

    /// Log-density of the kept queries with the others integrated out.
    pub fn log_density(&self, y: &[f64], keep: &[bool]) -> Result<f64> {
        if !keep.iter().any(|&b| b) {
            return Err(CoreError::InvalidDropSet("every query is dropped".into()));
        }
        let leaves = self.leaf_matrix(y, keep)?;
        Ok(recursive_aggregate(&leaves, &self.log_w, &self.log_w_root))
    }

    pub fn joint_loglik(&self, y: &[f64]) -> Result<f64> {
        self.log_density(y, &vec![true; self.queries.len()])
    }

    /// Marginal log-density after dropping the queries in `drop`, which must
    /// be a strict subset of the query indices.
    pub fn marginalize_eval(&self, y: &[f64], drop: &[usize]) -> Result<f64> {
        let keep = keep_mask(self.queries.len(), drop)?;
        self.log_density(y, &keep)
    }

    /// `log p(y_m)` for every query `m`, each with all other queries dropped.
    pub fn marginal_loglik_per_query(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.queries.len();
        (0..n)
            .map(|m| {
                let mut keep = vec![false; n];
                keep[m] = true;
                self.log_density(y, &keep)
            })
            .collect()
    }

    /// Mean negative marginal log-likelihood. Summed per position in circuit
    /// order so that a factorized model reproduces njNLL exactly.
    pub fn mnll(&self, y: &[f64]) -> Result<f64> {
        let per_query = self.marginal_loglik_per_query(y)?;
        let groups = self.groups(&vec![true; self.queries.len()]);
        let mut total = 0.0;
        for (p, group) in groups.iter().enumerate() {
            let s: f64 = group.iter().map(|&i| per_query[i]).sum();
            total = if p == 0 { s } else { total + s };
        }
        Ok(-total / self.queries.len() as f64)
    }

    /// Probability that query `q` is drawn from each leaf component.
    pub fn component_weights(&self, q: usize) -> Vec<f64> {
        let pos = self.queries[q].position;
        let mut leaves = vec![vec![0.0; self.k]; self.positions];
        (0..self.k)
            .map(|c| {
                leaves[pos] = (0..self.k)
                    .map(|j| if j == c { 0.0 } else { f64::NEG_INFINITY })
                    .collect();
                recursive_aggregate(&leaves, &self.log_w, &self.log_w_root).exp()
            })
            .collect()
    }

    /// Mixture CDF of query `q` alone.
    pub fn marginal_cdf(&self, q: usize, y: f64) -> f64 {
        self.component_weights(q)
            .iter()
            .zip(&self.queries[q].marginals)
            .map(|(w, m)| w * m.cdf(y))
            .sum()
    }

    /// Draws `samples` joint samples, each aligned with the query order.
    pub fn sample(&self, rng: &mut impl Rng, samples: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.k;
        let root = categorical(&self.log_w_root)?;
        let columns: Vec<Vec<WeightedIndex<f64>>> = self
            .log_w
            .iter()
            .map(|w| {
                (0..k)
                    .map(|col| categorical(&(0..k * k).map(|m| w[m * k + col]).collect::<Vec<_>>()))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let groups = self.groups(&vec![true; self.queries.len()]);
        // Cholesky factors per (position, component), only where correlated.
        let mut chol: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; k]; self.positions];
        for (p, group) in groups.iter().enumerate() {
            if group.len() < 2 {
                continue;
            }
            for (c, slot) in chol[p].iter_mut().enumerate() {
                if let Some(rows) = self.feature_rows(group, c) {
                    let r = correlation_matrix(&rows);
                    *slot = Some(linalg::cholesky(&r, group.len())?.0);
                }
            }
        }

        let mut out = Vec::with_capacity(samples);
        let mut comp = vec![0usize; self.positions];
        for _ in 0..samples {
            let mut state = root.sample(rng);
            for p in (1..self.positions).rev() {
                let m = columns[p - 1][state].sample(rng);
                comp[p] = m % k;
                state = m / k;
            }
            comp[0] = state;
            let mut values = vec![0.0; self.queries.len()];
            for (p, group) in groups.iter().enumerate() {
                if group.is_empty() {
                    continue;
                }
                let c = comp[p];
                let eps: Vec<f64> = group.iter().map(|_| rng.sample(StandardNormal)).collect();
                let z = match &chol[p][c] {
                    Some(l) => copula_sample_scores(l, group.len(), &eps),
                    None => eps,
                };
                for (&i, &zi) in group.iter().zip(&z) {
                    values[i] = self.queries[i].marginals[c].from_score(zi)?;
                }
            }
            out.push(values);
        }
        Ok(out)
    }
}

fn categorical(log_w: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(log_w.iter().map(|l| l.exp()))
        .map_err(|e| CoreError::Config(format!("invalid mixture weights: {e}")))
}

/// Keep-mask for dropping `drop` from `n` queries; rejects out-of-range,
/// duplicate or exhaustive drop sets.
pub fn keep_mask(n: usize, drop: &[usize]) -> Result<Vec<bool>> {
    let mut keep = vec![true; n];
    for &d in drop {
        if d >= n {
            return Err(CoreError::InvalidDropSet(format!("index {d} out of range for {n} queries")));
        }
        if !keep[d] {
            return Err(CoreError::InvalidDropSet(format!("index {d} repeated")));
        }
        keep[d] = false;
    }
    if !keep.iter().any(|&b| b) {
        return Err(CoreError::InvalidDropSet("every query is dropped".into()));
    }
    Ok(keep)
}
