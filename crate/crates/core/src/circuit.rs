//! Channel-chained sum-product circuit in log space.
//!
//! Positions `0..C` follow the configured channel order. Position 0 holds
//! `K` leaf components; each later position `p` forms the `K^2` products of
//! the previous state with its own leaves and mixes them back down to `K`
//! states with `W_p` (`[K^2, K]`, column-stochastic, flattened row index
//! `i * K + j` for previous state `i` and leaf `j`). The root mixes the final
//! `K` states with `w_root`.

use std::collections::BTreeSet;

use circuits_autodiff::{Tape, Tensor, Var};

use crate::error::Result;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sequential recursion. `leaves` is `C x K`, `log_w` holds `C - 1`
/// flattened `[K^2, K]` matrices for positions `1..C`.
pub fn recursive_aggregate(leaves: &[Vec<f64>], log_w: &[Vec<f64>], log_w_root: &[f64]) -> f64 {
    let k = log_w_root.len();
    let mut phi = leaves[0].clone();
    let mut buf = vec![0.0; k * k];
    for (p, w) in log_w.iter().enumerate() {
        let leaf = &leaves[p + 1];
        let mut next = vec![0.0; k];
        for (out, col) in next.iter_mut().zip(0..k) {
            for i in 0..k {
                for j in 0..k {
                    let m = i * k + j;
                    buf[m] = (phi[i] + leaf[j]) + w[m * k + col];
                }
            }
            *out = log_sum_exp(&buf);
        }
        phi = next;
    }
    let root: Vec<f64> = phi.iter().zip(log_w_root).map(|(a, b)| a + b).collect();
    log_sum_exp(&root)
}

/// `log M_p[i][k] = LSE_j(leaf_p[j] + log W_p[(i, j), k])`, row-major `K x K`.
pub fn transition_matrices(leaves: &[Vec<f64>], log_w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    log_w
        .iter()
        .enumerate()
        .map(|(p, w)| {
            let k = leaves[p + 1].len();
            let leaf = &leaves[p + 1];
            let mut m = vec![0.0; k * k];
            let mut terms = vec![0.0; k];
            for i in 0..k {
                for col in 0..k {
                    for j in 0..k {
                        terms[j] = leaf[j] + w[(i * k + j) * k + col];
                    }
                    m[i * k + col] = log_sum_exp(&terms);
                }
            }
            m
        })
        .collect()
}

/// Log-semiring product of two `K x K` matrices.
pub fn log_matmul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    let mut terms = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            for (m, t) in terms.iter_mut().enumerate() {
                *t = a[i * k + m] + b[m * k + j];
            }
            out[i * k + j] = log_sum_exp(&terms);
        }
    }
    out
}

/// Log-semiring row-vector times matrix.
pub fn log_vecmat(v: &[f64], m: &[f64], k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let terms: Vec<f64> = (0..k).map(|i| v[i] + m[i * k + j]).collect();
            log_sum_exp(&terms)
        })
        .collect()
}

/// Inclusive Hillis-Steele prefix scan of the transition matrices under the
/// log-semiring product, then the root mixture.
pub fn parallel_scan(phi1: &[f64], transitions: &[Vec<f64>], log_w_root: &[f64]) -> f64 {
    let k = phi1.len();
    let mut cur: Vec<Vec<f64>> = transitions.to_vec();
    let n = cur.len();
    let mut stride = 1;
    while stride < n {
        // Each round reads only the previous round's buffer.
        let prev = cur.clone();
        for i in stride..n {
            cur[i] = log_matmul(&prev[i - stride], &prev[i], k);
        }
        stride *= 2;
    }
    let phi = match cur.last() {
        Some(total) => log_vecmat(phi1, total, k),
        None => phi1.to_vec(),
    };
    let root: Vec<f64> = phi.iter().zip(log_w_root).map(|(a, b)| a + b).collect();
    log_sum_exp(&root)
}

/// Exhaustive sum over all latent paths `(z_0..z_{C-1}, j_0..j_{C-1})` with
/// `j_0 = z_0`; exponential in `C`, for testing.
pub fn brute_force(leaves: &[Vec<f64>], log_w: &[Vec<f64>], log_w_root: &[f64]) -> f64 {
    let c = leaves.len();
    let k = log_w_root.len();
    // Free indices: z_0..z_{C-1} and j_1..j_{C-1}.
    let free = 2 * c - 1;
    let total = k.pow(free as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; free];
    for _ in 0..total {
        let z = &idx[..c];
        let j = &idx[c..];
        let mut lp = log_w_root[z[c - 1]] + leaves[0][z[0]];
        for p in 1..c {
            let jp = j[p - 1];
            lp += leaves[p][jp] + log_w[p - 1][(z[p - 1] * k + jp) * k + z[p]];
        }
        terms.push(lp);
        for d in 0..free {
            idx[d] += 1;
            if idx[d] < k {
                break;
            }
            idx[d] = 0;
        }
    }
    log_sum_exp(&terms)
}

/// Tape version of [`recursive_aggregate`]. `leaves[p]` is a `[K]` vector.
pub fn aggregate_tape(tape: &mut Tape, leaves: &[Var], log_w: &[Var], log_w_root: Var) -> Result<Var> {
    let k = tape.shape(log_w_root)[0];
    let mut phi = leaves[0];
    for (p, &w) in log_w.iter().enumerate() {
        let a = tape.reshape(phi, &[k, 1])?;
        let b = tape.reshape(leaves[p + 1], &[1, k])?;
        let psi = tape.add(a, b)?;
        let psi = tape.reshape(psi, &[k * k, 1])?;
        let t = tape.add(psi, w)?;
        phi = tape.logsumexp(t, 0)?;
    }
    let root = tape.add(phi, log_w_root)?;
    Ok(tape.logsumexp(root, 0)?)
}

/// Builds a `[K]` vector from per-component scalar handles.
pub fn stack_scalars(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let cols: Vec<Var> = parts
        .iter()
        .map(|&v| tape.reshape(v, &[1, 1]))
        .collect::<circuits_autodiff::Result<_>>()?;
    let row = tape.concat_cols(&cols)?;
    Ok(tape.reshape(row, &[parts.len()])?)
}

pub fn zero_leaf(tape: &mut Tape, k: usize) -> Var {
    tape.constant(Tensor::zeros(&[k]))
}

/// Explicit node-level description of the circuit, used to check validity.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf { channel: usize, component: usize },
    Product(Vec<usize>),
    Sum(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub nodes: Vec<Node>,
    pub root: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StructureError {
    #[error("sum node {0} mixes children with different scopes")]
    NotSmooth(usize),
    #[error("product node {0} joins children with overlapping scopes")]
    NotDecomposable(usize),
    #[error("node {node} references later or missing child {child}")]
    BadEdge { node: usize, child: usize },
}

impl CircuitGraph {
    /// The chain circuit over `order` (channel per position) with `k` components.
    pub fn chain(order: &[usize], k: usize) -> Self {
        let mut nodes = Vec::new();
        let push = |n: Node, nodes: &mut Vec<Node>| {
            nodes.push(n);
            nodes.len() - 1
        };
        let mut phi: Vec<usize> = (0..k)
            .map(|j| {
                push(
                    Node::Leaf {
                        channel: order[0],
                        component: j,
                    },
                    &mut nodes,
                )
            })
            .collect();
        for &ch in &order[1..] {
            let leaves: Vec<usize> = (0..k)
                .map(|j| push(Node::Leaf { channel: ch, component: j }, &mut nodes))
                .collect();
            let mut products = Vec::with_capacity(k * k);
            for &pi in &phi {
                for &lj in &leaves {
                    products.push(push(Node::Product(vec![pi, lj]), &mut nodes));
                }
            }
            phi = (0..k).map(|_| push(Node::Sum(products.clone()), &mut nodes)).collect();
        }
        let root = push(Node::Sum(phi), &mut nodes);
        Self { nodes, root }
    }

    /// Checks smoothness and decomposability, returning each node's scope.
    pub fn validate(&self) -> std::result::Result<Vec<BTreeSet<usize>>, StructureError> {
        let mut scopes: Vec<BTreeSet<usize>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let children = match node {
                Node::Leaf { channel, .. } => {
                    scopes.push(BTreeSet::from([*channel]));
                    continue;
                }
                Node::Product(ch) | Node::Sum(ch) => ch,
            };
            for &c in children {
                if c >= i {
                    return Err(StructureError::BadEdge { node: i, child: c });
                }
            }
            let scope = match node {
                Node::Sum(ch) => {
                    let first = &scopes[ch[0]];
                    if ch.iter().any(|&c| &scopes[c] != first) {
                        return Err(StructureError::NotSmooth(i));
                    }
                    first.clone()
                }
                Node::Product(ch) => {
                    let mut acc = BTreeSet::new();
                    for &c in ch {
                        if !acc.is_disjoint(&scopes[c]) {
                            return Err(StructureError::NotDecomposable(i));
                        }
                        acc.extend(scopes[c].iter().copied());
                    }
                    acc
                }
                Node::Leaf { .. } => unreachable!(),
            };
            scopes.push(scope);
        }
        Ok(scopes)
    }
}
