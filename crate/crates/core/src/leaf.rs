//! Leaf densities: Deep Sigmoidal Flow marginals (or Gaussian marginals)
//! coupled by a Gaussian copula.
//!
//! Every flow block maps `x` to `logit(sum_j w_j sigmoid(a_j x + b_j))`
//! with positive `a` and simplex `w`, so the composition is a bijection of
//! the real line and `F = sigmoid(x_L)` is a proper CDF. The per-row flow
//! parameters are laid out per block as `[a_raw (h), b (h), w_raw (h)]`.

use circuits_autodiff::special::{log_sigmoid, normal_log_cdf, normal_quantile_of_logit, softplus};
use circuits_autodiff::{linalg, Tape, Var};

use crate::error::{CoreError, Result};

/// Floor added to softplus to keep flow slopes strictly positive.
pub const SLOPE_FLOOR: f64 = 1e-4;
/// Tail clamp on copula probabilities before the normal quantile.
pub const U_CLAMP: f64 = 1e-12;
/// Largest |y| explored when bracketing a flow inverse.
pub const INVERT_LIMIT: f64 = 1e6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Tape evaluation of a batch of flows.
///
/// `raw` is `[R, 3 * hidden * layers]`, `y` is `[R, 1]`. Returns the log
/// density `[R]` and `logit F(y)` `[R]`.
pub fn dsf_tape(tape: &mut Tape, raw: Var, y: Var, layers: usize, hidden: usize) -> Result<(Var, Var)> {
    let rows = tape.shape(y)[0];
    let mut x = y;
    let mut log_det: Option<Var> = None;
    let mut logit = x;
    for l in 0..layers {
        let off = 3 * hidden * l;
        let a_raw = tape.slice_cols(raw, off, off + hidden)?;
        let b = tape.slice_cols(raw, off + hidden, off + 2 * hidden)?;
        let w_raw = tape.slice_cols(raw, off + 2 * hidden, off + 3 * hidden)?;
        let a = tape.softplus(a_raw);
        let a = tape.add_scalar(a, SLOPE_FLOOR);
        let ax = tape.mul(a, x)?;
        let s = tape.add(ax, b)?;
        let log_w = tape.log_softmax(w_raw, 1)?;
        let ls = tape.log_sigmoid(s);
        let neg_s = tape.neg(s);
        let lns = tape.log_sigmoid(neg_s);
        let t_m = tape.add(log_w, ls)?;
        let log_m = tape.logsumexp(t_m, 1)?;
        let t_1m = tape.add(log_w, lns)?;
        let log_1m = tape.logsumexp(t_1m, 1)?;
        let log_a = tape.log(a)?;
        let slope = tape.add(ls, lns)?;
        let slope = tape.add(slope, log_a)?;
        let slope = tape.add(slope, log_w)?;
        let mut term = tape.logsumexp(slope, 1)?;
        let next = tape.sub(log_m, log_1m)?;
        if l + 1 < layers {
            let norm = tape.add(log_m, log_1m)?;
            term = tape.sub(term, norm)?;
            x = tape.reshape(next, &[rows, 1])?;
        } else {
            logit = next;
        }
        log_det = Some(match log_det {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let log_det = log_det.expect("at least one flow layer");
    Ok((log_det, logit))
}

/// Gaussian marginals: returns `(log p [R], z [R])` for `mean`, `log_std`,
/// `y`, all `[R, 1]`.
pub fn gaussian_tape(tape: &mut Tape, mean: Var, log_std: Var, y: Var) -> Result<(Var, Var)> {
    let rows = tape.shape(y)[0];
    let d = tape.sub(y, mean)?;
    let neg = tape.neg(log_std);
    let inv = tape.exp(neg);
    let z = tape.mul(d, inv)?;
    let z2 = tape.mul(z, z)?;
    let half = tape.scale(z2, -0.5);
    let lp = tape.sub(half, log_std)?;
    let lp = tape.add_scalar(lp, -LN_SQRT_2PI);
    let lp = tape.reshape(lp, &[rows])?;
    let z = tape.reshape(z, &[rows])?;
    Ok((lp, z))
}

/// Correlation matrix `R = V V^T / H` with the diagonal set to one, for
/// features `V` of shape `[n, H]`.
pub fn correlation_tape(tape: &mut Tape, v: Var) -> Result<Var> {
    let h = tape.shape(v)[1];
    let g = tape.matmul_nt(v, v)?;
    let g = tape.scale(g, 1.0 / h as f64);
    Ok(tape.unit_diagonal(g)?)
}

/// Flow parameters of one query under one component, after the positivity
/// and simplex transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct DsfParams {
    pub layers: usize,
    pub hidden: usize,
    pub a: Vec<f64>,
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    pub log_w: Vec<f64>,
}

/// Forward evaluation of a flow at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsfEval {
    pub log_p: f64,
    /// `logit F(y)`.
    pub logit: f64,
    /// `ln d logit F / dy`.
    pub log_dlogit: f64,
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl DsfParams {
    /// Builds parameters from one conditioner output row.
    pub fn from_raw(raw: &[f64], layers: usize, hidden: usize) -> Self {
        assert_eq!(raw.len(), 3 * hidden * layers, "raw flow parameter count");
        let mut p = DsfParams {
            layers,
            hidden,
            a: Vec::with_capacity(layers * hidden),
            log_a: Vec::with_capacity(layers * hidden),
            b: Vec::with_capacity(layers * hidden),
            log_w: Vec::with_capacity(layers * hidden),
        };
        for l in 0..layers {
            let blk = &raw[3 * hidden * l..3 * hidden * (l + 1)];
            for &r in &blk[..hidden] {
                let a = softplus(r) + SLOPE_FLOOR;
                p.a.push(a);
                p.log_a.push(a.ln());
            }
            p.b.extend_from_slice(&blk[hidden..2 * hidden]);
            let w = &blk[2 * hidden..];
            let norm = lse(w.iter().copied());
            p.log_w.extend(w.iter().map(|&v| v - norm));
        }
        p
    }

    /// Single sigmoid block `F(y) = sigmoid(a y + b)`.
    pub fn sigmoid(a: f64, b: f64) -> Self {
        DsfParams {
            layers: 1,
            hidden: 1,
            a: vec![a],
            log_a: vec![a.ln()],
            b: vec![b],
            log_w: vec![0.0],
        }
    }

    pub fn eval(&self, y: f64) -> DsfEval {
        let h = self.hidden;
        let mut x = y;
        let mut log_det = 0.0;
        let mut out = DsfEval {
            log_p: 0.0,
            logit: 0.0,
            log_dlogit: 0.0,
        };
        let mut s = vec![0.0; h];
        let mut ls = vec![0.0; h];
        let mut lns = vec![0.0; h];
        for l in 0..self.layers {
            let r = l * h..(l + 1) * h;
            let (a, la, b, lw) = (&self.a[r.clone()], &self.log_a[r.clone()], &self.b[r.clone()], &self.log_w[r]);
            for j in 0..h {
                s[j] = a[j] * x + b[j];
                ls[j] = log_sigmoid(s[j]);
                lns[j] = log_sigmoid(-s[j]);
            }
            let log_m = lse((0..h).map(|j| lw[j] + ls[j]));
            let log_1m = lse((0..h).map(|j| lw[j] + lns[j]));
            let term = lse((0..h).map(|j| lw[j] + (ls[j] + lns[j] + la[j])));
            x = log_m - log_1m;
            if l + 1 < self.layers {
                log_det += term - (log_m + log_1m);
            } else {
                log_det += term;
                out.log_dlogit = log_det - (log_m + log_1m);
            }
        }
        out.log_p = log_det;
        out.logit = x;
        out
    }

    pub fn cdf(&self, y: f64) -> f64 {
        circuits_autodiff::special::sigmoid(self.eval(y).logit)
    }

    /// Solves `logit F(y) = target` by Newton steps safeguarded with
    /// bisection inside a doubling bracket.
    pub fn invert_logit(&self, target: f64) -> Result<f64> {
        let g = |y: f64| self.eval(y).logit - target;
        let fail = || CoreError::InversionBracket {
            u: circuits_autodiff::special::sigmoid(target),
            limit: INVERT_LIMIT,
        };
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while g(lo) > 0.0 {
            lo *= 2.0;
            if lo < -INVERT_LIMIT {
                return Err(fail());
            }
        }
        while g(hi) < 0.0 {
            hi *= 2.0;
            if hi > INVERT_LIMIT {
                return Err(fail());
            }
        }
        let mut y = 0.5 * (lo + hi);
        for _ in 0..400 {
            let e = self.eval(y);
            let gv = e.logit - target;
            if gv.abs() <= 1e-12 * (1.0 + target.abs()) {
                return Ok(y);
            }
            if gv < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let step = gv / e.log_dlogit.exp();
            let newton = y - step;
            y = if step.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * y.abs().max(1.0) {
                break;
            }
        }
        Ok(y)
    }

    /// Inverse CDF for `u` strictly inside (0, 1).
    pub fn invert(&self, u: f64) -> Result<f64> {
        self.invert_logit((u / (1.0 - u)).ln())
    }
}

/// Per-query marginal of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub enum Marginal {
    Dsf(DsfParams),
    Gaussian { mean: f64, log_std: f64 },
}

impl Marginal {
    /// `(log p(y), z)` where `z` is the normal score fed to the copula.
    pub fn log_pdf_and_score(&self, y: f64) -> (f64, f64) {
        match self {
            Marginal::Dsf(p) => {
                let e = p.eval(y);
                (e.log_p, normal_quantile_of_logit(e.logit, U_CLAMP).0)
            }
            Marginal::Gaussian { mean, log_std } => {
                let z = (y - mean) * (-log_std).exp();
                (-0.5 * (z * z) - log_std - LN_SQRT_2PI, z)
            }
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            Marginal::Dsf(p) => p.cdf(y),
            Marginal::Gaussian { mean, log_std } => {
                circuits_autodiff::special::normal_cdf((y - mean) * (-log_std).exp())
            }
        }
    }

    /// Value whose normal score is `z`.
    pub fn from_score(&self, z: f64) -> Result<f64> {
        match self {
            Marginal::Dsf(p) => p.invert_logit(normal_log_cdf(z) - normal_log_cdf(-z)),
            Marginal::Gaussian { mean, log_std } => Ok(mean + log_std.exp() * z),
        }
    }
}

/// Dense `R = V V^T / H` with unit diagonal from feature rows.
pub fn correlation_matrix(features: &[&[f64]]) -> Vec<f64> {
    let n = features.len();
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            r[i * n + j] = if i == j {
                1.0
            } else {
                let h = features[i].len();
                let mut s = 0.0;
                for (x, y) in features[i].iter().zip(features[j]) {
                    s += x * y;
                }
                s * (1.0 / h as f64)
            };
        }
    }
    r
}

/// Gaussian copula log-density of normal scores `z` under correlation `r`.
pub fn copula_loglik(z: &[f64], r: &[f64]) -> Result<f64> {
    let n = z.len();
    if n == 0 {
        return Ok(0.0);
    }
    let (l, _) = linalg::cholesky(r, n)?;
    let alpha = linalg::cholesky_solve(&l, n, z);
    let quad: f64 = z.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let zz: f64 = z.iter().map(|a| a * a).sum();
    Ok(-0.5 * linalg::cholesky_log_det(&l, n) - 0.5 * (quad - zz))
}

/// Draws correlated normal scores `L eps` given the Cholesky factor of `R`.
pub fn copula_sample_scores(chol: &[f64], n: usize, eps: &[f64]) -> Vec<f64> {
    linalg::lower_mul_vec(chol, n, eps)
}
