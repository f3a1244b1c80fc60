//! Reverse-mode differentiation through deferred min-marginal averaging.
//!
//! The forward solver is piecewise linear in `(hi, lo, M, α, ω)`; this module
//! propagates (super)gradients of the dual objective back through it. Dual
//! states are checkpointed at every directional-pass boundary and the level
//! updates of a pass are replayed on demand to recover the branch taken and
//! the restricted minimizers `s(i, β)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::bdd::BddError;
use crate::dual::{
    level_update, pass_levels, split_by_offsets, take_snapshot, Direction, DualError, DualProblem,
    DualState, LevelInputs, LevelRecord, SolverParams,
};

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error("replay of pass {0} does not reproduce the recorded state")]
    TapeMismatch(usize),
    #[error("gradient length {got}, expected {expected}")]
    Shape { expected: usize, got: usize },
}

/// Gradients of a scalar loss w.r.t. the solver state and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradState {
    pub d_hi: Vec<f64>,
    pub d_lo: Vec<f64>,
    pub d_m: Vec<f64>,
    /// Accumulated over every update that used `α` (post-normalization).
    pub d_alpha: Vec<f64>,
    /// Accumulated over every update that used `ω`.
    pub d_omega: Vec<f64>,
}

impl GradState {
    pub fn zeros(num_edges: usize) -> Self {
        GradState {
            d_hi: vec![0.0; num_edges],
            d_lo: vec![0.0; num_edges],
            d_m: vec![0.0; num_edges],
            d_alpha: vec![0.0; num_edges],
            d_omega: vec![0.0; num_edges],
        }
    }

    /// Starts backpropagation from gradients w.r.t. the final costs.
    pub fn from_cost_grads(d_hi: Vec<f64>, d_lo: Vec<f64>) -> Self {
        let e = d_hi.len();
        GradState {
            d_hi,
            d_lo,
            ..GradState::zeros(e)
        }
    }
}

/// Solver state saved at a pass boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hi: Vec<f64>,
    pub lo: Vec<f64>,
    pub deferred: Vec<f64>,
}

impl Checkpoint {
    pub fn of(state: &DualState) -> Self {
        Checkpoint {
            hi: state.hi.clone(),
            lo: state.lo.clone(),
            deferred: state.deferred.clone(),
        }
    }

    fn matches(&self, state: &DualState) -> bool {
        self.hi == state.hi && self.lo == state.lo && self.deferred == state.deferred
    }
}

/// Checkpoints of a run: `states[p]` is the state entering pass `p`, the last
/// entry is the final state.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub states: Vec<Checkpoint>,
    pub directions: Vec<Direction>,
}

impl Tape {
    pub fn num_passes(&self) -> usize {
        self.directions.len()
    }
}

/// Runs `sweeps` sweeps like [`crate::dual::run`] while recording a tape;
/// returns the bound after each sweep.
pub fn run_recorded(
    problem: &DualProblem,
    state: &mut DualState,
    params: &SolverParams,
    sweeps: usize,
) -> Result<(Tape, Vec<f64>), DualError> {
    let mut ws = crate::dual::Workspace::new(problem);
    let mut tape = Tape::default();
    let mut bounds = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        for dir in [Direction::Forward, Direction::Reverse] {
            tape.states.push(Checkpoint::of(state));
            tape.directions.push(dir);
            let b = crate::dual::directional_pass(problem, state, &mut ws, params, dir)?;
            if dir == Direction::Reverse {
                bounds.push(b);
            }
        }
        state.sweeps += 1;
    }
    tape.states.push(Checkpoint::of(state));
    Ok((tape, bounds))
}

/// Replayed internals of one directional pass.
#[derive(Debug, Clone)]
pub struct PassTape {
    pub direction: Direction,
    /// `records[j][t]` for level `t` of subproblem `j`.
    pub records: Vec<Vec<LevelRecord>>,
    /// Pass-start `M`.
    pub deferred_in: Vec<f64>,
    /// Frozen snapshot sums gathered per edge.
    pub pos_edge: Vec<f64>,
    pub neg_edge: Vec<f64>,
}

/// Re-executes one pass from `start`, recording every level update.
pub fn replay_pass(
    problem: &DualProblem,
    start: &Checkpoint,
    params: &SolverParams,
    dir: Direction,
) -> Result<(PassTape, DualState), DualError> {
    let n = problem.num_vars();
    let mut state = DualState {
        hi: start.hi.clone(),
        lo: start.lo.clone(),
        deferred: start.deferred.clone(),
        snap_pos: vec![0.0; n],
        snap_neg: vec![0.0; n],
        sweeps: 0,
    };
    take_snapshot(problem, &mut state);
    let dec = &problem.dec;
    let pos_edge: Vec<f64> = (0..dec.num_dual_vars)
        .map(|e| state.snap_pos[dec.edge_var[e]])
        .collect();
    let neg_edge: Vec<f64> = (0..dec.num_dual_vars)
        .map(|e| state.snap_neg[dec.edge_var[e]])
        .collect();
    let offsets = &dec.edge_offset;
    let his = split_by_offsets(&mut state.hi, offsets);
    let los = split_by_offsets(&mut state.lo, offsets);
    let ms = split_by_offsets(&mut state.deferred, offsets);
    let records = his
        .into_par_iter()
        .zip(los)
        .zip(ms)
        .enumerate()
        .map(|(j, ((hi, lo), m))| {
            let bdd = &problem.bdds[j];
            let mut costs = bdd.compute_shortest_paths(hi, lo);
            let k = bdd.num_levels();
            let mut recs: Vec<Option<LevelRecord>> = vec![None; k];
            for t in pass_levels(k, dir) {
                let e = offsets[j] + t;
                let inp = LevelInputs {
                    alpha: params.alpha[e],
                    omega: params.omega[e],
                    pos: pos_edge[e],
                    neg: neg_edge[e],
                };
                recs[t] = level_update(bdd, &mut costs, hi, lo, m, t, inp, dir, true).map_err(
                    |source: BddError| DualError::Subproblem {
                        subproblem: j,
                        row: problem.dec.subproblem_rows[j],
                        source,
                    },
                )?;
            }
            Ok(recs
                .into_iter()
                .map(|r| r.expect("every level recorded"))
                .collect())
        })
        .collect::<Result<Vec<Vec<LevelRecord>>, DualError>>()?;
    Ok((
        PassTape {
            direction: dir,
            records,
            deferred_in: start.deferred.clone(),
            pos_edge,
            neg_edge,
        },
        state,
    ))
}

/// Per-edge gradients w.r.t. the frozen snapshot sums of the current pass.
#[derive(Debug, Clone)]
pub struct SnapshotGrads {
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

impl SnapshotGrads {
    pub fn zeros(num_edges: usize) -> Self {
        SnapshotGrads {
            d_pos: vec![0.0; num_edges],
            d_neg: vec![0.0; num_edges],
        }
    }
}

/// Test-only fault switches for the backward pass.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negates the gradient routed to the pass-start `M`.
    pub flip_deferred_grad: bool,
}

/// Backpropagates through `B_t` of one replayed pass.
///
/// `grads` holds gradients w.r.t. the state after the block; on return they
/// are w.r.t. the state before it. `α` and `ω` gradients accumulate, and the
/// gradient w.r.t. the frozen snapshot is collected in `snap`.
pub fn block_update_backward(
    problem: &DualProblem,
    tape: &PassTape,
    t: usize,
    params: &SolverParams,
    grads: &mut GradState,
    snap: &mut SnapshotGrads,
) {
    let offsets = &problem.dec.edge_offset;
    let d_his = split_by_offsets(&mut grads.d_hi, offsets);
    let d_los = split_by_offsets(&mut grads.d_lo, offsets);
    let d_ms = split_by_offsets(&mut grads.d_m, offsets);
    let d_alphas = split_by_offsets(&mut grads.d_alpha, offsets);
    let d_omegas = split_by_offsets(&mut grads.d_omega, offsets);
    let d_poss = split_by_offsets(&mut snap.d_pos, offsets);
    let d_negs = split_by_offsets(&mut snap.d_neg, offsets);
    d_his
        .into_par_iter()
        .zip(d_los)
        .zip(d_ms)
        .zip(d_alphas)
        .zip(d_omegas)
        .zip(d_poss)
        .zip(d_negs)
        .enumerate()
        .for_each(
            |(j, ((((((d_hi, d_lo), d_m), d_alpha), d_omega), d_pos), d_neg))| {
                if t >= problem.bdds[j].num_levels() {
                    return;
                }
                let e = offsets[j] + t;
                let rec = &tape.records[j][t];
                let (gh, gl) = (d_hi[t], d_lo[t]);
                let alpha = params.alpha[e];
                let omega = params.omega[e];

                // hi' = hi − [d>0]·M_new + α·P,  lo' = lo + [d≤0]·M_new − α·N,  M' = M_new.
                let g_removed = d_m[t] + if rec.hi_side { -gh } else { gl };
                d_alpha[t] += gh * tape.pos_edge[e] - gl * tape.neg_edge[e];
                d_pos[t] += alpha * gh;
                d_neg[t] -= alpha * gl;
                d_m[t] = 0.0;

                // M_new = ω·(m¹ − m⁰), ∂m^β/∂hi_p = s_p(β), ∂m^β/∂lo_p = 1 − s_p(β).
                d_omega[t] += g_removed * rec.diff;
                if !rec.saturated {
                    let g_diff = g_removed * omega;
                    for (p, (&s1, &s0)) in rec.argmin1.iter().zip(&rec.argmin0).enumerate() {
                        let delta = f64::from(s1) - f64::from(s0);
                        if delta != 0.0 {
                            d_hi[p] += g_diff * delta;
                            d_lo[p] -= g_diff * delta;
                        }
                    }
                }
            },
        );
}

/// Routes the snapshot gradients of a finished pass onto the pass-start `M`.
fn close_pass(
    problem: &DualProblem,
    tape: &PassTape,
    grads: &mut GradState,
    snap: &SnapshotGrads,
    faults: Faults,
) {
    let sign = if faults.flip_deferred_grad { -1.0 } else { 1.0 };
    for i in 0..problem.num_vars() {
        let g_pos = problem.var_sum(i, |e| snap.d_pos[e]);
        let g_neg = problem.var_sum(i, |e| snap.d_neg[e]);
        for &e in &problem.dec.var_edges[i] {
            let m = tape.deferred_in[e];
            if m > 0.0 {
                grads.d_m[e] += sign * g_pos;
            } else if m < 0.0 {
                grads.d_m[e] += sign * g_neg;
            }
        }
    }
}

/// Backpropagates through one whole directional pass.
pub fn pass_backward(
    problem: &DualProblem,
    tape: &PassTape,
    params: &SolverParams,
    grads: &mut GradState,
    faults: Faults,
) {
    let mut snap = SnapshotGrads::zeros(problem.num_edges());
    let u = problem
        .bdds
        .iter()
        .map(|b| b.num_levels())
        .max()
        .unwrap_or(0);
    let forward: Vec<usize> = pass_levels(u, tape.direction).collect();
    for &t in forward.iter().rev() {
        block_update_backward(problem, tape, t, params, grads, &mut snap);
    }
    close_pass(problem, tape, grads, &snap, faults);
}

/// Backpropagates through every pass recorded in `tape`, last pass first.
/// `grads` enters as the gradient w.r.t. the final state and leaves as the
/// gradient w.r.t. the state entering the round.
pub fn round_backward(
    problem: &DualProblem,
    tape: &Tape,
    params: &SolverParams,
    grads: &mut GradState,
) -> Result<(), GradError> {
    round_backward_with(problem, tape, params, grads, Faults::default())
}

#[doc(hidden)]
pub fn round_backward_with(
    problem: &DualProblem,
    tape: &Tape,
    params: &SolverParams,
    grads: &mut GradState,
    faults: Faults,
) -> Result<(), GradError> {
    let e = problem.num_edges();
    for v in [
        &grads.d_hi,
        &grads.d_lo,
        &grads.d_m,
        &grads.d_alpha,
        &grads.d_omega,
    ] {
        if v.len() != e {
            return Err(GradError::Shape {
                expected: e,
                got: v.len(),
            });
        }
    }
    for p in (0..tape.num_passes()).rev() {
        let (pass, end) = replay_pass(problem, &tape.states[p], params, tape.directions[p])?;
        if !tape.states[p + 1].matches(&end) {
            return Err(GradError::TapeMismatch(p));
        }
        pass_backward(problem, &pass, params, grads, faults);
    }
    Ok(())
}

/// `E^j` and a minimizer of every subproblem; minimizers are concatenated in
/// edge order and use the lo-preferring tie-break.
pub fn subproblem_solutions(problem: &DualProblem, state: &DualState) -> (Vec<f64>, Vec<u8>) {
    let offsets = &problem.dec.edge_offset;
    let per: Vec<(f64, Vec<u8>)> = (0..problem.num_subproblems())
        .into_par_iter()
        .map(|j| {
            let r = offsets[j]..offsets[j + 1];
            let (hi, lo) = (&state.hi[r.clone()], &state.lo[r]);
            let bdd = &problem.bdds[j];
            let costs = bdd.compute_shortest_paths(hi, lo);
            let (x, value) = bdd.optimal_assignment(&costs, hi, lo);
            (value, x)
        })
        .collect();
    let mut values = Vec::with_capacity(per.len());
    let mut bits = Vec::with_capacity(problem.num_edges());
    for (v, x) in per {
        values.push(v);
        bits.extend(x);
    }
    (values, bits)
}

/// Dual objective and its supergradient: `∂L/∂hi = x*`, `∂L/∂lo = 1 − x*`
/// for the subproblem minimizers `x*`.
pub fn loss_and_grad(problem: &DualProblem, state: &DualState) -> (f64, Vec<f64>, Vec<f64>) {
    let (values, bits) = subproblem_solutions(problem, state);
    let loss = values.iter().sum::<f64>() + problem.isolated_offset;
    let d_hi: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
    let d_lo = d_hi.iter().map(|g| 1.0 - g).collect();
    (loss, d_hi, d_lo)
}

/// Transpose of the mean-centred update: `∂θ_ij = g_ij − mean_{k∈J_i} g_ik`.
pub fn nonparam_backward(problem: &DualProblem, d_hi: &[f64]) -> Vec<f64> {
    let mut d_theta = vec![0.0; problem.num_edges()];
    for i in 0..problem.num_vars() {
        let edges = &problem.dec.var_edges[i];
        if edges.is_empty() {
            continue;
        }
        let mean = problem.var_sum(i, |e| d_hi[e]) / edges.len() as f64;
        for &e in edges {
            d_theta[e] = d_hi[e] - mean;
        }
    }
    d_theta
}

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("a kink lies within one step of the point along probe {0}")]
    Degenerate(usize),
    #[error("gradient has length {got}, point has length {expected}")]
    Shape { expected: usize, got: usize },
}

/// Relative one-sided slope mismatch treated as a kink. Smooth curvature
/// contributes about `step·f''`, far below this at the steps used.
pub const KINK_TOLERANCE: f64 = 1e-5;

/// Probe directions for [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probes {
    Coordinates,
    /// Random unit directions with Gaussian-like entries.
    Directions {
        count: usize,
        seed: u64,
    },
}

/// Central-difference check of `grad` at `x` for a piecewise-linear `f`.
///
/// Returns the largest `|fd − ⟨grad, v⟩| / (1 + |fd|)` over the probes. A
/// probe whose forward and backward one-sided slopes disagree by more than
/// [`KINK_TOLERANCE`] straddles a kink; the point is reported as degenerate
/// and should be resampled.
pub fn finite_difference_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    grad: &[f64],
    step: f64,
    probes: Probes,
) -> Result<f64, FdError> {
    if grad.len() != x.len() {
        return Err(FdError::Shape {
            expected: x.len(),
            got: grad.len(),
        });
    }
    let dirs: Vec<Vec<f64>> = match probes {
        Probes::Coordinates => (0..x.len())
            .map(|k| {
                let mut v = vec![0.0; x.len()];
                v[k] = 1.0;
                v
            })
            .collect(),
        Probes::Directions { count, seed } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..x.len())
                        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>())
                        .collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|a| a / norm).collect()
                })
                .collect()
        }
    };
    let f0 = f(x);
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for (k, v) in dirs.iter().enumerate() {
        let mut eval = |scale: f64, probe: &mut Vec<f64>| {
            for ((p, &a), &d) in probe.iter_mut().zip(x).zip(v) {
                *p = a + scale * d;
            }
            f(probe)
        };
        let plus = eval(step, &mut probe);
        let minus = eval(-step, &mut probe);
        let fwd = (plus - f0) / step;
        let bwd = (f0 - minus) / step;
        let fd = (plus - minus) / (2.0 * step);
        if (fwd - bwd).abs() > KINK_TOLERANCE * (1.0 + fd.abs()) {
            return Err(FdError::Degenerate(k));
        }
        let analytic: f64 = grad.iter().zip(v).map(|(g, d)| g * d).sum();
        worst = worst.max((fd - analytic).abs() / (1.0 + fd.abs()));
    }
    Ok(worst)
}
