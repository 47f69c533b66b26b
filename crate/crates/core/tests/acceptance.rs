//! Acceptance criteria A1-A8. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line.
//!
//! `CIRCUITS_ACCEPTANCE=A1,A3` restricts the run; `CIRCUITS_A7_FULL=1`
//! additionally runs the two-hour full-size benchmark.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use circuits_autodiff::special::{normal_cdf, normal_log_cdf, normal_quantile, normal_quantile_of_logit};
use circuits_autodiff::{grad_check, Tape, Tensor, Var};
use circuits_core::bifurcation::{gen_bifurcation, oracle_njnll_standardized, BifurcationConfig};
use circuits_core::checkpoint::Checkpoint;
use circuits_core::circuit::{brute_force, parallel_scan, recursive_aggregate, transition_matrices, CircuitGraph};
use circuits_core::consistency::{quadrature_check, random_drop_set, structural_gap};
use circuits_core::data::{fit_and_apply_normalization, split, Query, SeriesInstance};
use circuits_core::leaf::{correlation_matrix, DsfParams, Marginal};
use circuits_core::model::{Ablation, Model, ModelConfig};
use circuits_core::quadrature::integrate;
use circuits_core::train::{mean_njnll, train, EpochLog, TrainConfig};
use common::{random_instance, small_config, tiny_instance, ORACLE_TEST_NJNLL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const A1_TOL: f64 = 1e-9;
const A2_TOL: f64 = 1e-3;
const A3_TOL: f64 = 1e-10;
const A4_GRAD_TOL: f64 = 1e-4;
const A4_FD_STEP: f64 = 1e-5;
const A4_MASS_TOL: f64 = 1e-3;
const A4_ROUND_TRIP_TOL: f64 = 1e-9;
const A5_KS_ALPHA: f64 = 0.01;
const A5_COV_TOL: f64 = 0.05;
const A7_SMOKE_TARGET: f64 = -1.00;
const A7_FULL_TARGET: f64 = -1.15;
const A7_ORACLE_GAP: f64 = 0.15;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_ablation(rng: &mut impl Rng) -> Ablation {
    Ablation {
        no_spn: rng.gen_bool(0.2),
        no_dsf: rng.gen_bool(0.3),
        no_gc: rng.gen_bool(0.2),
    }
}

fn with_two_queries(mut inst: SeriesInstance, rng: &mut impl Rng) -> SeriesInstance {
    while inst.queries.len() < 2 {
        inst.queries.push(Query {
            t: rng.gen(),
            c: rng.gen_range(0..inst.channels),
        });
        inst.targets.push(rng.sample(StandardNormal));
    }
    inst
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let c = rng.gen_range(1..=4);
        let mut cfg = small_config(c, rng.gen_range(1..=4), random_ablation(&mut rng), trial);
        cfg.channel_order = {
            let mut o: Vec<usize> = (0..c).collect();
            rand::seq::SliceRandom::shuffle(o.as_mut_slice(), &mut rng);
            o
        };
        let model = Model::new(cfg).unwrap();
        let inst = with_two_queries(random_instance(&mut rng, c, 12, 12), &mut rng);
        let drop = random_drop_set(&mut rng, inst.queries.len());
        let gap = structural_gap(&model, &inst, &drop).unwrap();
        if !(gap <= A1_TOL) {
            return Err(format!("trial {trial}: gap {gap:.3e} > {A1_TOL:e} (drop {drop:?})"));
        }
        worst = worst.max(gap);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        secs < 60.0,
        format!("1000 triples, max gap {worst:.2e} <= {A1_TOL:e}, {secs:.1}s (< 60s)"),
    )
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let c = rng.gen_range(1..=4);
        let cfg = ModelConfig {
            channels: c,
            ablation: random_ablation(&mut rng),
            init_seed: 500 + trial,
            ..Default::default()
        };
        let model = Model::new(cfg).unwrap();
        let mut inst = random_instance(&mut rng, c, 10, 1);
        inst.queries = vec![
            Query { t: rng.gen(), c: rng.gen_range(0..c) },
            Query { t: rng.gen(), c: rng.gen_range(0..c) },
        ];
        inst.targets = vec![rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let check = quadrature_check(&model, &inst, rng.gen_range(0..2)).unwrap();
        if !(check.relative_error <= A2_TOL) {
            return Err(format!("trial {trial}: {check:?}"));
        }
        worst = worst.max(check.relative_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        secs < 60.0,
        format!("20 two-query instances, max relative error {worst:.2e} <= {A2_TOL:e}, {secs:.1}s (< 60s)"),
    )
}

fn random_circuit(rng: &mut impl Rng, c: usize, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let normal = |rng: &mut dyn rand::RngCore, s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
    let leaves = (0..c).map(|_| (0..k).map(|_| normal(rng, 3.0)).collect()).collect();
    let log_softmax_cols = |logits: Vec<f64>, rows: usize| -> Vec<f64> {
        let mut out = logits.clone();
        for col in 0..k {
            let m = (0..rows).map(|r| logits[r * k + col]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..rows).map(|r| (logits[r * k + col] - m).exp()).sum();
            for r in 0..rows {
                out[r * k + col] = logits[r * k + col] - m - z.ln();
            }
        }
        out
    };
    let log_w = (1..c)
        .map(|_| log_softmax_cols((0..k * k * k).map(|_| normal(rng, 2.0)).collect(), k * k))
        .collect();
    let root_logits: Vec<f64> = (0..k).map(|_| normal(rng, 2.0)).collect();
    let m = root_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = root_logits.iter().map(|l| (l - m).exp()).sum();
    let root = root_logits.iter().map(|l| l - m - z.ln()).collect();
    (leaves, log_w, root)
}

fn a3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_scan: f64 = 0.0;
    for trial in 0..1000 {
        let c = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=4);
        let (leaves, log_w, root) = random_circuit(&mut rng, c, k);
        let seq = recursive_aggregate(&leaves, &log_w, &root);
        let scan = parallel_scan(&leaves[0], &transition_matrices(&leaves, &log_w), &root);
        let gap = (seq - scan).abs();
        if !(gap <= A3_TOL) {
            return Err(format!("scan trial {trial} (C={c}, K={k}): gap {gap:.3e}"));
        }
        worst_scan = worst_scan.max(gap);
    }
    let mut worst_brute: f64 = 0.0;
    for c in 1..=3 {
        for k in 1..=3 {
            for _ in 0..20 {
                let (leaves, log_w, root) = random_circuit(&mut rng, c, k);
                let gap = (recursive_aggregate(&leaves, &log_w, &root) - brute_force(&leaves, &log_w, &root)).abs();
                if !(gap <= A3_TOL) {
                    return Err(format!("brute force C={c}, K={k}: gap {gap:.3e}"));
                }
                worst_brute = worst_brute.max(gap);
            }
            let order: Vec<usize> = (0..c).rev().collect();
            if let Err(e) = CircuitGraph::chain(&order, k).validate() {
                return Err(format!("chain circuit C={c}, K={k} invalid: {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        secs < 60.0,
        format!(
            "scan max gap {worst_scan:.2e}, brute-force max gap {worst_brute:.2e} (<= {A3_TOL:e}), chain circuits smooth+decomposable, {secs:.1}s (< 60s)"
        ),
    )
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> circuits_autodiff::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    use circuits_autodiff::Result as R;
    fn b<F: Fn(&mut Tape, &[Var]) -> R<Var> + 'static>(f: F) -> OpFn {
        Box::new(f)
    }
    let m23 = vec![2, 3];
    vec![
        ("neg", vec![m23.clone()], b(|t, v| Ok(t.neg(v[0])))),
        ("exp", vec![m23.clone()], b(|t, v| Ok(t.exp(v[0])))),
        ("log", vec![m23.clone()], b(|t, v| {
            let x = t.mul(v[0], v[0])?;
            let x = t.add_scalar(x, 0.5);
            t.log(x)
        })),
        ("sigmoid", vec![m23.clone()], b(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", vec![m23.clone()], b(|t, v| Ok(t.tanh(v[0])))),
        ("sin", vec![m23.clone()], b(|t, v| Ok(t.sin(v[0])))),
        ("softplus", vec![m23.clone()], b(|t, v| Ok(t.softplus(v[0])))),
        ("log_sigmoid", vec![m23.clone()], b(|t, v| Ok(t.log_sigmoid(v[0])))),
        ("add", vec![m23.clone(), m23.clone()], b(|t, v| t.add(v[0], v[1]))),
        ("add_row_broadcast", vec![m23.clone(), vec![3]], b(|t, v| t.add(v[0], v[1]))),
        ("sub_col_broadcast", vec![m23.clone(), vec![2, 1]], b(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![m23.clone(), m23.clone()], b(|t, v| t.mul(v[0], v[1]))),
        ("mul_scalar_broadcast", vec![m23.clone(), vec![]], b(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![m23.clone(), m23.clone()], b(|t, v| {
            let d = t.mul(v[1], v[1])?;
            let d = t.add_scalar(d, 1.0);
            t.div(v[0], d)
        })),
        ("scale", vec![m23.clone()], b(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![m23.clone()], b(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("matmul", vec![m23.clone(), vec![3, 4]], b(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![m23.clone(), vec![4, 3]], b(|t, v| t.matmul_nt(v[0], v[1]))),
        ("transpose", vec![m23.clone()], b(|t, v| t.transpose(v[0]))),
        ("reshape", vec![m23.clone()], b(|t, v| t.reshape(v[0], &[3, 2]))),
        ("sum", vec![m23.clone()], b(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![m23.clone()], b(|t, v| Ok(t.mean(v[0])))),
        ("sum_axis0", vec![m23.clone()], b(|t, v| t.sum_axis(v[0], 0))),
        ("sum_axis1", vec![m23.clone()], b(|t, v| t.sum_axis(v[0], 1))),
        ("logsumexp0", vec![m23.clone()], b(|t, v| t.logsumexp(v[0], 0))),
        ("logsumexp1", vec![m23.clone()], b(|t, v| t.logsumexp(v[0], 1))),
        ("softmax0", vec![m23.clone()], b(|t, v| t.softmax(v[0], 0))),
        ("softmax1", vec![m23.clone()], b(|t, v| t.softmax(v[0], 1))),
        ("log_softmax0", vec![m23.clone()], b(|t, v| t.log_softmax(v[0], 0))),
        ("log_softmax1", vec![m23.clone()], b(|t, v| t.log_softmax(v[0], 1))),
        ("slice_rows", vec![vec![4, 3]], b(|t, v| t.slice_rows(v[0], 1, 3))),
        ("slice_cols", vec![vec![4, 3]], b(|t, v| t.slice_cols(v[0], 1, 3))),
        ("concat_rows", vec![m23.clone(), vec![1, 3]], b(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![m23.clone(), vec![2, 2]], b(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("gather_rows", vec![vec![4, 3]], b(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
        ("unit_diagonal", vec![vec![3, 3]], b(|t, v| t.unit_diagonal(v[0]))),
        ("gaussian_copula_loglik", vec![vec![3], vec![3, 4]], b(|t, v| {
            let f = t.tanh(v[1]);
            let g = t.matmul_nt(f, f)?;
            let g = t.scale(g, 0.25);
            let r = t.unit_diagonal(g)?;
            t.gaussian_copula_loglik(v[0], r)
        })),
        ("normal_quantile_of_logit", vec![m23.clone()], b(|t, v| Ok(t.normal_quantile_of_logit(v[0], 1e-12)))),
    ]
}

fn dsf_mass(p: &DsfParams) -> f64 {
    let mut half = 50.0;
    while p.cdf(half) - p.cdf(-half) < 1.0 - 1e-9 && half < 1e7 {
        half *= 2.0;
    }
    integrate(|y| p.eval(y).log_p.exp(), -half, half, 2000, 1e-9, 4_000_000).value
}

fn a4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures: Vec<String> = Vec::new();
    let mut worst_op: (f64, &str) = (0.0, "");
    let cases = op_cases();
    for (name, shapes, f) in &cases {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product::<usize>().max(1);
                Tensor::new(s.clone(), (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
            })
            .collect();
        // Random weighted projection onto a scalar.
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            let n = tape.value(out).len();
            Tensor::new(tape.shape(out).to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let report = grad_check(
            |t, v| {
                let out = f(t, v)?;
                let w = t.constant(probe.clone());
                let prod = t.mul(out, w)?;
                Ok(t.sum(prod))
            },
            &inputs,
            A4_FD_STEP,
        )
        .unwrap();
        if !(report.max_rel_error < A4_GRAD_TOL) {
            failures.push(format!("op {name}: {report:?}"));
        }
        if report.max_rel_error > worst_op.0 {
            worst_op = (report.max_rel_error, name);
        }
    }

    let inst = tiny_instance();
    let mut worst_model: f64 = 0.0;
    for (i, ab) in [
        Ablation::default(),
        Ablation { no_spn: true, ..Default::default() },
        Ablation { no_dsf: true, ..Default::default() },
        Ablation { no_gc: true, ..Default::default() },
    ]
    .into_iter()
    .enumerate()
    {
        let model = Model::new(small_config(2, 2, ab, 40 + i as u64)).unwrap();
        let report = grad_check(
            |t, p| {
                let f = model.forward(t, p, &inst).expect("forward");
                Ok(t.scale(f.joint, -1.0 / 3.0))
            },
            model.params.tensors(),
            A4_FD_STEP,
        )
        .unwrap();
        if !(report.max_rel_error < A4_GRAD_TOL) {
            let loss = -model.joint_loglik(&inst).unwrap() / 3.0;
            failures.push(format!(
                "tiny model {ab:?}: rel error {:.2e} at a coordinate with gradient {:.3e} (numeric {:.3e}, abs gap {:.1e}; central-difference round-off ~ eps*|f|/h = {:.1e})",
                report.max_rel_error,
                report.analytic,
                report.numeric,
                (report.analytic - report.numeric).abs(),
                f64::EPSILON * loss.abs() / A4_FD_STEP
            ));
        }
        worst_model = worst_model.max(report.max_rel_error);
    }

    // Flows from a freshly initialized full-size conditioner and from raw
    // standard-normal parameter rows.
    let model = Model::new(ModelConfig::default()).unwrap();
    let probe_inst = random_instance(&mut rng, 4, 12, 8);
    let mut flows: Vec<DsfParams> = model
        .prepare(&probe_inst)
        .unwrap()
        .queries
        .iter()
        .flat_map(|q| q.marginals.iter())
        .filter_map(|m| match m {
            Marginal::Dsf(p) => Some(p.clone()),
            _ => None,
        })
        .collect();
    for layers in [2, 3] {
        for hidden in [10, 20] {
            for _ in 0..5 {
                let raw: Vec<f64> = (0..3 * hidden * layers).map(|_| rng.sample(StandardNormal)).collect();
                flows.push(DsfParams::from_raw(&raw, layers, hidden));
            }
        }
    }
    let mut worst_mass: f64 = 0.0;
    for (i, p) in flows.iter().enumerate() {
        let err = (dsf_mass(p) - 1.0).abs();
        if !(err <= A4_MASS_TOL) {
            failures.push(format!("flow {i} integrates to 1 {err:+.3e}"));
        }
        worst_mass = worst_mass.max(err);
    }

    let mut worst_rt: f64 = 0.0;
    for i in 1..10_000 {
        let p = i as f64 / 10_000.0;
        worst_rt = worst_rt.max((normal_cdf(normal_quantile(p)) - p).abs());
    }
    for e in 1..=12 {
        let p = 10f64.powi(-e);
        worst_rt = worst_rt.max((normal_cdf(normal_quantile(p)) - p).abs() / p);
    }
    for i in -800..=800 {
        let x = i as f64 / 100.0;
        let logit = normal_log_cdf(x) - normal_log_cdf(-x);
        worst_rt = worst_rt.max((normal_quantile_of_logit(logit, 1e-300).0 - x).abs());
    }
    if !(worst_rt < A4_ROUND_TRIP_TOL) {
        failures.push(format!("quantile round trip error {worst_rt:.3e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "{} ops (worst {} {:.1e}), tiny model worst {worst_model:.1e} (< {A4_GRAD_TOL:e}), {} flows mass err {worst_mass:.1e}, quantile round trip {worst_rt:.1e}, {secs:.1}s (< 120s)",
        cases.len(),
        worst_op.1,
        worst_op.0,
        flows.len()
    );
    if secs >= 120.0 {
        failures.push("runtime".into());
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failed: {}", failures.join("; ")))
    }
}

/// Asymptotic Kolmogorov p-value with the small-sample correction of Stephens.
fn ks_p_value(mut u: Vec<f64>) -> (f64, f64) {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i as f64 + 1.0) / n - x))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        p += 2.0 * if j % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * jf * jf * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

fn a5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut inst = random_instance(&mut rng, 4, 12, 1);
    inst.queries = vec![Query { t: 0.8, c: 2 }];
    let d = model.prepare(&inst).unwrap();
    let draws = d.sample(&mut rng, 10_000).unwrap();
    let u: Vec<f64> = draws.iter().map(|s| d.marginal_cdf(0, s[0])).collect();
    let (ks_d, p) = ks_p_value(u);
    if !(p > A5_KS_ALPHA) {
        return Err(format!("PIT KS statistic {ks_d:.4}, p = {p:.4} <= {A5_KS_ALPHA}"));
    }

    let cfg = ModelConfig {
        channels: 1,
        ablation: Ablation { no_dsf: true, ..Default::default() },
        init_seed: 7,
        ..Default::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut inst = random_instance(&mut rng, 1, 12, 1);
    inst.queries = vec![Query { t: 0.5, c: 0 }, Query { t: 0.6, c: 0 }, Query { t: 0.9, c: 0 }];
    inst.targets = vec![0.0; 3];
    let d = model.prepare(&inst).unwrap();
    let n = 3;
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n * n];
    for (k, lw) in d.log_w_root.iter().enumerate() {
        let pi = lw.exp();
        let (mu, sd): (Vec<f64>, Vec<f64>) = d
            .queries
            .iter()
            .map(|q| match q.marginals[k] {
                Marginal::Gaussian { mean, log_std } => (mean, log_std.exp()),
                _ => unreachable!(),
            })
            .unzip();
        let rows: Vec<&[f64]> = d.queries.iter().map(|q| q.features.as_ref().unwrap()[k].as_slice()).collect();
        let r = correlation_matrix(&rows);
        for i in 0..n {
            mean[i] += pi * mu[i];
            for j in 0..n {
                second[i * n + j] += pi * (sd[i] * sd[j] * r[i * n + j] + mu[i] * mu[j]);
            }
        }
    }
    let draws = d.sample(&mut rng, 10_000).unwrap();
    let s = draws.len() as f64;
    let emp_mean: Vec<f64> = (0..n).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / s).collect();
    let mut worst_cov: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let analytic = second[i * n + j] - mean[i] * mean[j];
            let emp = draws
                .iter()
                .map(|x| (x[i] - emp_mean[i]) * (x[j] - emp_mean[j]))
                .sum::<f64>()
                / (s - 1.0);
            worst_cov = worst_cov.max((emp - analytic).abs());
        }
    }
    if !(worst_cov <= A5_COV_TOL) {
        return Err(format!("covariance entry off by {worst_cov:.4} > {A5_COV_TOL}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        secs < 120.0,
        format!("PIT KS D={ks_d:.4} p={p:.3} (> {A5_KS_ALPHA}), max covariance error {worst_cov:.4} (<= {A5_COV_TOL}), {secs:.1}s (< 120s)"),
    )
}

fn a6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for trial in 0..30 {
        let c = rng.gen_range(1..=4);
        let inst = random_instance(&mut rng, c, 12, 12);

        let k1 = Model::new(ModelConfig {
            channels: c,
            ablation: Ablation { no_spn: true, no_dsf: rng.gen_bool(0.5), no_gc: false },
            init_seed: trial,
            ..Default::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let p = k1.params.load(&mut tape, false);
        let f = k1.forward(&mut tape, &p, &inst).unwrap();
        let mut total = tape.value(f.leaves[0]).data()[0];
        for leaf in &f.leaves[1..] {
            total += tape.value(*leaf).data()[0];
        }
        if tape.item(f.joint) != total {
            return Err(format!("K=1 trial {trial}: joint {} != leaf sum {total}", tape.item(f.joint)));
        }

        let indep = Model::new(ModelConfig {
            channels: c,
            ablation: Ablation { no_spn: false, no_dsf: rng.gen_bool(0.5), no_gc: true },
            init_seed: 100 + trial,
            ..Default::default()
        })
        .unwrap();
        let mut tape = Tape::new();
        let p = indep.params.load(&mut tape, false);
        let f = indep.forward(&mut tape, &p, &inst).unwrap();
        let nq = inst.queries.len();
        let lp = tape.value(f.log_p).data().to_vec();
        for (pos, range) in f.layout.ranges.iter().enumerate() {
            let leaf = tape.value(f.leaves[pos]).data().to_vec();
            for (k, value) in leaf.iter().enumerate() {
                let want: f64 = lp[k * nq + range.start..k * nq + range.end].iter().sum();
                if *value != want {
                    return Err(format!("R=I trial {trial}: leaf {value} != univariate sum {want}"));
                }
            }
        }

        let factorized = Model::new(ModelConfig {
            channels: c,
            ablation: Ablation { no_spn: true, no_dsf: rng.gen_bool(0.5), no_gc: true },
            init_seed: 200 + trial,
            ..Default::default()
        })
        .unwrap();
        let mnll = factorized.prepare(&inst).unwrap().mnll(&inst.targets).unwrap();
        let njnll = factorized.njnll(&inst).unwrap();
        if mnll != njnll {
            return Err(format!("K=1, R=I trial {trial}: mNLL {mnll} != njNLL {njnll}"));
        }
        checked += 1;
    }
    Ok(format!("{checked} instances: K=1 joint = leaf sum, R=I leaf = univariate sum, mNLL = njNLL (all bitwise)"))
}

struct Benchmark {
    test_njnll: f64,
    oracle: f64,
    epochs: usize,
    elapsed: Duration,
}

fn run_benchmark(n_series: usize, max_epochs: usize, train_budget: f64) -> Benchmark {
    let start = Instant::now();
    let bcfg = BifurcationConfig { n_series, ..Default::default() };
    let (tr, va, te) = split(gen_bifurcation(&bcfg).unwrap(), [70, 10, 20], bcfg.seed).unwrap();
    let (tr, rest, stats) = fit_and_apply_normalization(&tr, &[&va, &te]).unwrap();
    let oracle = rest[1].iter().map(|i| oracle_njnll_standardized(i, &stats, &bcfg)).sum::<f64>() / rest[1].len() as f64;
    let tc = TrainConfig {
        max_epochs,
        max_seconds: Some(train_budget),
        ..Default::default()
    };
    let out = train(Model::new(ModelConfig::default()).unwrap(), &tc, &tr, &rest[0], |e| {
        log::info!("{}", e.csv_row())
    })
    .unwrap();
    Benchmark {
        test_njnll: mean_njnll(&out.model, &rest[1]).unwrap(),
        oracle,
        epochs: out.history.len(),
        elapsed: start.elapsed(),
    }
}

fn a7() -> Outcome {
    // Smoke variant: 2000 series, at most 200 epochs, 15 minutes end to end.
    let smoke = run_benchmark(2000, 200, 15.0 * 60.0 - 120.0);
    let secs = smoke.elapsed.as_secs_f64();
    let mut msg = format!(
        "smoke: test njNLL {:.4} (<= {A7_SMOKE_TARGET}), oracle {:.4}, {} epochs, {secs:.0}s (<= 900s)",
        smoke.test_njnll, smoke.oracle, smoke.epochs
    );
    let mut ok = smoke.test_njnll <= A7_SMOKE_TARGET && secs <= 900.0;
    if std::env::var("CIRCUITS_A7_FULL").is_ok_and(|v| v == "1") {
        let full = run_benchmark(10_000, 2000, 2.0 * 3600.0 - 300.0);
        let secs = full.elapsed.as_secs_f64();
        let gap = full.test_njnll - full.oracle;
        let oracle_drift = (full.oracle - ORACLE_TEST_NJNLL).abs();
        msg += &format!(
            "; full: test njNLL {:.4} (<= {A7_FULL_TARGET}), oracle {:.4} (stored {ORACLE_TEST_NJNLL:.4}), gap {gap:.4} (<= {A7_ORACLE_GAP}), {} epochs, {secs:.0}s (<= 7200s)",
            full.test_njnll, full.oracle, full.epochs
        );
        ok &= full.test_njnll <= A7_FULL_TARGET && gap <= A7_ORACLE_GAP && secs <= 7200.0 && oracle_drift < 1e-9;
    } else {
        msg += "; full-size run not requested (CIRCUITS_A7_FULL=1)";
    }
    ensure(ok, msg)
}

fn a8() -> Outcome {
    let bcfg = BifurcationConfig { n_series: 60, ..Default::default() };
    let (tr, va, te) = split(gen_bifurcation(&bcfg).unwrap(), [70, 10, 20], 0).unwrap();
    let (tr, rest, stats) = fit_and_apply_normalization(&tr, &[&va, &te]).unwrap();
    let tc = TrainConfig {
        max_epochs: 3,
        batch_size: 16,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut log = vec![EpochLog::CSV_HEADER.to_string()];
        let out = train(Model::new(ModelConfig::default()).unwrap(), &tc, &tr, &rest[0], |e| log.push(e.csv_row())).unwrap();
        (log.join("\n"), out)
    };
    let (log_a, out) = run();
    let (log_b, _) = run();
    if log_a != log_b {
        return Err(format!("training logs differ:\n{log_a}\n---\n{log_b}"));
    }
    let before = mean_njnll(&out.model, &rest[1]).unwrap();
    let ckpt = Checkpoint {
        model: out.model,
        train: tc.clone(),
        stats: Some(stats),
        best_val_njnll: out.best_val_njnll,
        epoch: out.best_epoch,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let after = mean_njnll(&loaded.model, &rest[1]).unwrap();
    ensure(
        before.to_bits() == after.to_bits() && loaded == ckpt,
        format!("identical logs over {} epochs; test njNLL before/after reload {before} / {after} (bitwise)", out.history.len()),
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let only: Option<Vec<String>> = std::env::var("CIRCUITS_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
    ];
    let mut failed = 0;
    for (id, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(m) => println!("{id} PASS: {m}"),
            Err(m) => {
                failed += 1;
                println!("{id} FAIL: {m}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
