//! Self-check suites: invariants of the solver, gradient exactness and the
//! zero-network equivalence, runnable outside the test harness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dual::{directional_pass, Direction};
use crate::dual::{
    dual_objective, feasibility_residual, feasibility_tolerance, nonparam_update, run, sweep,
    DualProblem, DualState, SnapshotMode, SolverParams, Workspace,
};
use crate::grad::{
    finite_difference_check, loss_and_grad, nonparam_backward, round_backward_with, run_recorded,
    Faults, FdError, GradState, Probes,
};
use crate::model::fixtures::tiny;
use crate::model::{
    enumerate_optimum, generate_independent_set, Constraint, IlpInstance, Relation,
};
use crate::net::{
    compute_features, gnn_backward, gnn_forward, transform, transform_backward, Arch,
    FeatureHistory, LstmState, NetOutput, Weights, LSTM_DIM,
};
use crate::train::{compute_metrics, inference, relative_gap, InferenceConfig, NetPair, Prepared};

/// A deliberately broken component, used to confirm the suites notice it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negated gradient routed to the deferred min-marginals.
    GradSign,
    /// Redistribution reads the live deferred mass instead of the pass snapshot.
    LiveSnapshot,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grad-sign" => Ok(Fault::GradSign),
            "live-snapshot" => Ok(Fault::LiveSnapshot),
            _ => Err(format!(
                "unknown fault `{s}` (expected grad-sign or live-snapshot)"
            )),
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::GradSign => "grad-sign",
            Fault::LiveSnapshot => "live-snapshot",
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub fault: Option<Fault>,
}

impl CheckOptions {
    fn snapshot(&self) -> SnapshotMode {
        if self.fault == Some(Fault::LiveSnapshot) {
            SnapshotMode::Live
        } else {
            SnapshotMode::Frozen
        }
    }

    fn faults(&self) -> Faults {
        Faults {
            flip_deferred_grad: self.fault == Some(Fault::GradSign),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const SUITES: [&str; 7] = [
    "feasibility",
    "monotonicity",
    "validity",
    "convergence",
    "gradient",
    "zero-network",
    "metrics",
];

/// Runs one suite by name.
pub fn run_suite(name: &str, opts: &CheckOptions) -> Option<SuiteResult> {
    let start = Instant::now();
    let (passed, detail) = match name {
        "feasibility" => feasibility(opts),
        "monotonicity" => monotonicity(opts),
        "validity" => validity(opts),
        "convergence" => convergence(opts),
        "gradient" => gradient(opts),
        "zero-network" => zero_network(),
        "metrics" => metrics(),
        _ => return None,
    };
    let name = SUITES.iter().find(|s| **s == name).copied()?;
    Some(SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(opts: &CheckOptions) -> Vec<SuiteResult> {
    SUITES.iter().filter_map(|s| run_suite(s, opts)).collect()
}

// ---------------------------------------------------------------- instances

/// 200 independent-set instances (n = 12, p = 0.25) followed by TINY.
pub fn invariant_suite() -> Vec<IlpInstance> {
    let mut v: Vec<IlpInstance> = (0..200)
        .map(|k| generate_independent_set(12, 0.25, k))
        .collect();
    v.push(tiny());
    v
}

/// Small random instance with mixed `≤`/`=` rows of width 2–4 and small
/// integer coefficients; resampled until feasible.
pub fn random_instance(n: usize, seed: u64) -> IlpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let m = rng.gen_range(n / 2..=n);
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            let width = rng.gen_range(2..=4.min(n));
            let mut vars: Vec<usize> = (0..n).collect();
            for a in 0..width {
                let b = rng.gen_range(a..n);
                vars.swap(a, b);
            }
            vars.truncate(width);
            let coeffs: Vec<f64> = (0..width)
                .map(|_| f64::from(rng.gen_range(1..=3)))
                .collect();
            let total: f64 = coeffs.iter().sum();
            let eq = rng.gen_bool(0.2);
            let rhs = if eq { coeffs[0] } else { (total / 2.0).floor() };
            let rel = if eq { Relation::Eq } else { Relation::Le };
            rows.push(Constraint::new(vars, coeffs, rel, rhs));
        }
        let Ok(inst) = IlpInstance::new(c, rows) else {
            continue;
        };
        if enumerate_optimum(&inst).is_ok() && DualProblem::new(&inst).is_ok() {
            return inst;
        }
    }
}

fn random_params(p: &DualProblem, rng: &mut ChaCha8Rng) -> SolverParams {
    let e = p.num_edges();
    let alpha = (0..e).map(|_| rng.gen_range(0.01..1.0)).collect();
    let omega = (0..e).map(|_| rng.gen_range(0.01..0.99)).collect();
    SolverParams::new(p, alpha, omega).expect("valid random parameters")
}

fn random_theta(p: &DualProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..p.num_edges())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect()
}

fn tol(x: f64) -> f64 {
    1e-9 * (1.0 + x.abs())
}

// ---------------------------------------------------------------- suites

/// Lifted identities after init, after every directional pass and after
/// every non-parametric update.
fn feasibility(opts: &CheckOptions) -> (bool, String) {
    let insts = invariant_suite();
    let worst = insts
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let p = DualProblem::new(inst).expect("generated instances decompose");
            let limit = feasibility_tolerance(&p);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let mut s = DualState::init(&p);
            let mut ws = Workspace::new(&p);
            let mut worst = feasibility_residual(&p, &s) / limit;
            for round in 0..3 {
                if round > 0 {
                    nonparam_update(&p, &mut s, &random_theta(&p, &mut rng));
                    worst = worst.max(feasibility_residual(&p, &s) / limit);
                }
                let mut params = if round == 0 {
                    SolverParams::defaults(&p)
                } else {
                    random_params(&p, &mut rng)
                };
                params.snapshot = opts.snapshot();
                for _ in 0..3 {
                    for dir in [Direction::Forward, Direction::Reverse] {
                        directional_pass(&p, &mut s, &mut ws, &params, dir).expect("pass");
                        worst = worst.max(feasibility_residual(&p, &s) / limit);
                    }
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    (
        worst <= 1.0,
        format!(
            "{} instances, worst residual {worst:.3e} x tolerance",
            insts.len()
        ),
    )
}

/// The bound never decreases over a directional pass.
fn monotonicity(opts: &CheckOptions) -> (bool, String) {
    let insts = invariant_suite();
    let (drops, passes) = insts
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let p = DualProblem::new(inst).expect("generated instances decompose");
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
            let mut ws = Workspace::new(&p);
            let (mut drops, mut passes) = (0usize, 0usize);
            for draw in 0..=50 {
                let mut params = if draw == 0 {
                    SolverParams::defaults(&p)
                } else {
                    random_params(&p, &mut rng)
                };
                params.snapshot = opts.snapshot();
                let mut s = DualState::init(&p);
                let mut prev = dual_objective(&p, &s);
                for _ in 0..2 {
                    for dir in [Direction::Forward, Direction::Reverse] {
                        let cur =
                            directional_pass(&p, &mut s, &mut ws, &params, dir).expect("pass");
                        if cur < prev - tol(prev) {
                            drops += 1;
                        }
                        passes += 1;
                        prev = cur;
                    }
                }
            }
            (drops, passes)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (drops == 0, format!("{passes} passes, {drops} decreases"))
}

/// Every bound stays below the enumerated optimum; a single subproblem
/// covering all variables starts at the optimum.
fn validity(opts: &CheckOptions) -> (bool, String) {
    let mut insts = invariant_suite();
    insts.extend((0..40).map(|k| random_instance(6 + (k as usize % 9), 7000 + k)));
    let (violations, bounds) = insts
        .par_iter()
        .enumerate()
        .map(|(k, inst)| {
            let opt = enumerate_optimum(inst)
                .expect("small instances enumerate")
                .value;
            let p = DualProblem::new(inst).expect("instances decompose");
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + k as u64);
            let mut s = DualState::init(&p);
            let mut ws = Workspace::new(&p);
            let mut seen = vec![dual_objective(&p, &s)];
            for round in 0..3 {
                if round > 0 {
                    nonparam_update(&p, &mut s, &random_theta(&p, &mut rng));
                    seen.push(dual_objective(&p, &s));
                }
                let mut params = random_params(&p, &mut rng);
                params.snapshot = opts.snapshot();
                for _ in 0..4 {
                    let (a, b) = sweep(&p, &mut s, &mut ws, &params).expect("sweep");
                    seen.extend([a, b]);
                }
            }
            let bad = seen.iter().filter(|&&b| b > opt + tol(opt)).count();
            (bad, seen.len())
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mut single_mismatch = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let n = rng.gen_range(2..=10);
        let c: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-5..=5))).collect();
        let coeffs: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(1..=4))).collect();
        let rhs = (coeffs.iter().sum::<f64>() / 2.0).floor();
        let inst = IlpInstance::new(
            c,
            vec![Constraint::new((0..n).collect(), coeffs, Relation::Le, rhs)],
        )
        .expect("valid single row");
        let p = DualProblem::new(&inst).expect("single row decomposes");
        let opt = enumerate_optimum(&inst).expect("enumerable").value;
        if dual_objective(&p, &DualState::init(&p)) != opt {
            single_mismatch += 1;
        }
    }
    (
        violations == 0 && single_mismatch == 0,
        format!("{bounds} bounds, {violations} above optimum; single-subproblem mismatches {single_mismatch}"),
    )
}

fn convergence(opts: &CheckOptions) -> (bool, String) {
    let p = DualProblem::new(&tiny()).expect("TINY decomposes");
    let mut params = SolverParams::defaults(&p);
    params.snapshot = opts.snapshot();
    let mut s = DualState::init(&p);
    let trace = run(&p, &mut s, &params, 50).expect("run");
    let reached = trace.bounds.iter().position(|b| (b + 2.0).abs() <= 1e-6);
    let last = *trace.bounds.last().expect("non-empty trace");
    match reached {
        Some(k) if (last + 2.0).abs() <= 1e-6 => {
            (true, format!("TINY at -2 after {k} sweeps, final {last}"))
        }
        _ => (false, format!("TINY ends at {last} after 50 sweeps")),
    }
}

// ---------------------------------------------------------------- gradients

/// Inputs of one solver round: lifted costs, deferred mass and the raw
/// predictor outputs `(α̂, ω̂, θ̂)`.
#[derive(Clone)]
struct RoundPoint {
    hi: Vec<f64>,
    lo: Vec<f64>,
    m: Vec<f64>,
    raw: Vec<[f64; 3]>,
}

const ROUND_SWEEPS: usize = 3;

fn round_start(p: &DualProblem, pt: &RoundPoint, out: &NetOutput) -> (DualState, SolverParams) {
    let n = p.num_vars();
    let mut s = DualState {
        hi: pt.hi.clone(),
        lo: pt.lo.clone(),
        deferred: pt.m.clone(),
        snap_pos: vec![0.0; n],
        snap_neg: vec![0.0; n],
        sweeps: 0,
    };
    nonparam_update(p, &mut s, &out.theta);
    let params = SolverParams::new(p, out.alpha.clone(), out.omega.clone())
        .expect("transformed outputs are valid");
    (s, params)
}

fn round_loss(prep: &Prepared, pt: &RoundPoint) -> f64 {
    let out = transform(&prep.topo, pt.raw.clone(), None);
    let (mut s, params) = round_start(&prep.problem, pt, &out);
    let mut ws = Workspace::new(&prep.problem);
    for _ in 0..ROUND_SWEEPS {
        sweep(&prep.problem, &mut s, &mut ws, &params).expect("sweep");
    }
    dual_objective(&prep.problem, &s)
}

/// Analytic gradient w.r.t. `(hi, lo, α̂, ω̂, θ̂)`.
fn round_gradient(
    prep: &Prepared,
    pt: &RoundPoint,
    faults: Faults,
) -> (Vec<f64>, Vec<f64>, Vec<[f64; 3]>) {
    let p = &prep.problem;
    let out = transform(&prep.topo, pt.raw.clone(), None);
    let (mut s, params) = round_start(p, pt, &out);
    let (tape, _) = run_recorded(p, &mut s, &params, ROUND_SWEEPS).expect("recorded run");
    let (_, d_hi, d_lo) = loss_and_grad(p, &s);
    let mut g = GradState::from_cost_grads(d_hi, d_lo);
    round_backward_with(p, &tape, &params, &mut g, faults).expect("backward");
    let d_theta = nonparam_backward(p, &g.d_hi);
    let d_raw = transform_backward(&prep.topo, &out, &g.d_alpha, &g.d_omega, &d_theta);
    (g.d_hi, g.d_lo, d_raw)
}

fn random_round_point(p: &DualProblem, rng: &mut ChaCha8Rng) -> RoundPoint {
    let mut s = DualState::init(p);
    for h in s.hi.iter_mut() {
        *h += rng.gen_range(-0.5..0.5);
    }
    run(p, &mut s, &SolverParams::defaults(p), 2).expect("warm-up sweeps");
    let raw = (0..p.num_edges())
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    RoundPoint {
        hi: s.hi,
        lo: s.lo,
        m: s.deferred,
        raw,
    }
}

/// Worst relative error over all coordinates, `None` at a degenerate point.
fn round_fd_error(prep: &Prepared, pt: &RoundPoint, faults: Faults) -> Option<f64> {
    let (d_hi, d_lo, d_raw) = round_gradient(prep, pt, faults);
    let mut worst: f64 = 0.0;
    for block in 0..5 {
        let (x, grad): (Vec<f64>, Vec<f64>) = match block {
            0 => (pt.hi.clone(), d_hi.clone()),
            1 => (pt.lo.clone(), d_lo.clone()),
            k => (
                pt.raw.iter().map(|r| r[k - 2]).collect(),
                d_raw.iter().map(|r| r[k - 2]).collect(),
            ),
        };
        let f = |v: &[f64]| {
            let mut q = pt.clone();
            match block {
                0 => q.hi.copy_from_slice(v),
                1 => q.lo.copy_from_slice(v),
                k => q.raw.iter_mut().zip(v).for_each(|(r, &x)| r[k - 2] = x),
            }
            round_loss(prep, &q)
        };
        match finite_difference_check(f, &x, &grad, 1e-6, Probes::Coordinates) {
            Ok(err) => worst = worst.max(err),
            Err(FdError::Degenerate(_)) => return None,
            Err(e) => panic!("{e}"),
        }
    }
    Some(worst)
}

/// Random linear functional of the network outputs and outgoing state.
struct OutputProbe {
    coef: Vec<[f64; 3]>,
    state: Option<LstmState>,
}

impl OutputProbe {
    fn value(&self, out: &NetOutput) -> f64 {
        let mut s = 0.0;
        for (e, c) in self.coef.iter().enumerate() {
            s += c[0] * out.alpha[e] + c[1] * out.omega[e] + c[2] * out.theta[e];
        }
        if let (Some(p), Some(o)) = (&self.state, &out.state) {
            s += p.h.iter().zip(&o.h).map(|(a, b)| a * b).sum::<f64>();
            s += p.c.iter().zip(&o.c).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }
}

/// Network weight gradients on a real instance graph, all coordinates.
fn network_fd_error(prep: &Prepared, arch: Arch, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DualState::init(&prep.problem);
    run(
        &prep.problem,
        &mut s,
        &SolverParams::defaults(&prep.problem),
        2,
    )
    .expect("sweeps");
    let mut hist = FeatureHistory::default();
    let feats = compute_features(&prep.problem, &prep.stat, &s, &mut hist);
    let mut w = Weights::init(arch, seed);
    for x in w.data.iter_mut() {
        *x += rng.gen_range(-0.2..0.2);
    }
    let nv = prep.problem.num_vars();
    let mut rand_vec = |n: usize| {
        (0..n)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let lstm = (arch == Arch::DogeM).then(|| LstmState {
        h: rand_vec(nv * LSTM_DIM),
        c: rand_vec(nv * LSTM_DIM),
    });
    let probe = OutputProbe {
        coef: (0..prep.problem.num_edges())
            .map(|_| {
                let v = rand_vec(3);
                [v[0], v[1], v[2]]
            })
            .collect(),
        state: (arch == Arch::DogeM).then(|| LstmState {
            h: rand_vec(nv * LSTM_DIM),
            c: rand_vec(nv * LSTM_DIM),
        }),
    };
    let (out, cache) = gnn_forward(&w, &prep.topo, &feats, lstm.as_ref()).expect("forward");
    let ca: Vec<f64> = probe.coef.iter().map(|c| c[0]).collect();
    let cw: Vec<f64> = probe.coef.iter().map(|c| c[1]).collect();
    let ct: Vec<f64> = probe.coef.iter().map(|c| c[2]).collect();
    let d_raw = transform_backward(&prep.topo, &out, &ca, &cw, &ct);
    let (grad, _) = gnn_backward(&w, &prep.topo, &cache, &d_raw, probe.state.as_ref());
    let f = |x: &[f64]| {
        let w2 = Weights {
            arch,
            data: x.to_vec(),
        };
        probe.value(
            &gnn_forward(&w2, &prep.topo, &feats, lstm.as_ref())
                .expect("forward")
                .0,
        )
    };
    match finite_difference_check(f, &w.data, &grad, 1e-6, Probes::Coordinates) {
        Ok(err) => Some(err),
        Err(FdError::Degenerate(_)) => None,
        Err(e) => panic!("{e}"),
    }
}

const GRADIENT_INSTANCES: usize = 20;
const GRADIENT_TOLERANCE: f64 = 1e-4;

fn gradient(opts: &CheckOptions) -> (bool, String) {
    let faults = opts.faults();
    // Seeds are scanned in parallel chunks; degenerate points are skipped.
    let mut round_errors = Vec::new();
    let mut seed = 0u64;
    while round_errors.len() < GRADIENT_INSTANCES && seed < 400 {
        let chunk: Vec<Option<f64>> = (seed..seed + 16)
            .into_par_iter()
            .map(|k| {
                let inst = random_instance(6 + (k as usize % 5), 40_000 + k);
                let prep = Prepared::new("fd", inst).expect("instance prepares");
                let mut rng = ChaCha8Rng::seed_from_u64(k);
                let pt = random_round_point(&prep.problem, &mut rng);
                round_fd_error(&prep, &pt, faults)
            })
            .collect();
        round_errors.extend(chunk.into_iter().flatten());
        seed += 16;
    }
    round_errors.truncate(GRADIENT_INSTANCES);
    let round_worst = round_errors.iter().copied().fold(0.0, f64::max);
    let mut net_errors = Vec::new();
    for arch in [Arch::Doge, Arch::DogeM] {
        let mut found = 0;
        for k in 0..40u64 {
            let prep =
                Prepared::new("fd", random_instance(7, 50_000 + k)).expect("instance prepares");
            if let Some(e) = network_fd_error(&prep, arch, k) {
                net_errors.push(e);
                found += 1;
                if found == 2 {
                    break;
                }
            }
        }
    }
    let net_worst = net_errors.iter().copied().fold(0.0, f64::max);
    let passed = round_errors.len() >= GRADIENT_INSTANCES
        && net_errors.len() == 4
        && round_worst <= GRADIENT_TOLERANCE
        && net_worst <= GRADIENT_TOLERANCE;
    (
        passed,
        format!(
            "solver round: {} instances, worst {round_worst:.2e}; network: {} points, worst {net_worst:.2e}",
            round_errors.len(),
            net_errors.len()
        ),
    )
}

// ---------------------------------------------------------------- pipeline

/// Zero-weight inference equals the plain solver bit for bit.
fn zero_network() -> (bool, String) {
    let insts = invariant_suite();
    let cfg = InferenceConfig {
        sweeps: 5,
        max_rounds: 6,
        time_limit: None,
    };
    let mismatches: usize = insts
        .par_iter()
        .map(|inst| {
            let prep = Prepared::new("z", inst.clone()).expect("instance prepares");
            let (s0, t0) = inference(&prep, None, &cfg).expect("plain run");
            [Arch::Doge, Arch::DogeM]
                .iter()
                .filter(|&&arch| {
                    let (s1, t1) =
                        inference(&prep, Some(&NetPair::zeros(arch)), &cfg).expect("zero-net run");
                    s1 != s0 || t1.bounds != t0.bounds || t1.round_bounds != t0.round_bounds
                })
                .count()
        })
        .sum();
    (
        mismatches == 0,
        format!(
            "{} instances x 2 architectures, {mismatches} mismatches",
            insts.len()
        ),
    )
}

fn metrics() -> (bool, String) {
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };
    expect("gap", relative_gap(-2.5, -2.0, -3.0), 0.5);
    expect("gap at optimum", relative_gap(-2.0, -2.0, -3.0), 0.0);
    expect("gap below init", relative_gap(-4.0, -2.0, -3.0), 1.0);
    expect("degenerate gap", relative_gap(-2.5, -3.0, -3.0), 0.0);
    let m = compute_metrics(&[0.0, 1.0, 2.0], &[-2.0, -2.0, -2.0], -2.0, -3.0, 1);
    expect("integral at optimum", m.g_integral, 0.0);
    let m = compute_metrics(
        &[0.0, 1.0, 2.0, 4.0],
        &[-3.0, -2.5, -2.25, -2.0],
        -2.0,
        -3.0,
        1,
    );
    expect("trapezoid", m.g_integral, 0.625);
    expect("best bound", m.best_bound, -2.0);
    expect("best time", m.best_time, 4.0);
    let n = failures.len();
    (
        n == 0,
        if n == 0 {
            "8 cases".into()
        } else {
            failures.join("; ")
        },
    )
}
