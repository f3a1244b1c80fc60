//! Deferred min-marginal averaging on the lifted (hi/lo arc cost) dual.
//!
//! Each dual variable `(i, j)` owns a one-side cost `hi` and a zero-side cost
//! `lo` at the level of `i` in subproblem `j`, plus the deferred min-marginal
//! difference `M`. After init, after every directional pass and after every
//! non-parametric update the state satisfies, per primal variable `i`,
//!
//! ```text
//! Σ_j hi_ij + Σ_j max(M_ij, 0) = c_i        Σ_j lo_ij − Σ_j min(M_ij, 0) = 0
//! ```
//!
//! so `Σ_j E^j(hi, lo)` is a lower bound on the integer optimum at all times.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::bdd::{build_bdd, Bdd, BddError, NodeCosts, INF};
use crate::model::{decompose, Decomposition, IlpInstance, Relation};

pub const OMEGA_MIN: f64 = 1e-6;
pub const OMEGA_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DualError {
    #[error("subproblem {subproblem} (row {row}): {source}")]
    Subproblem {
        subproblem: usize,
        row: usize,
        #[source]
        source: BddError,
    },
    #[error("row {0} has no variables and is violated")]
    InfeasibleEmptyRow(usize),
    #[error("parameter vector has length {got}, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("invalid solver parameter: {0}")]
    InvalidParam(String),
}

/// An instance prepared for the dual solver: decomposition plus one diagram
/// per subproblem.
#[derive(Debug, Clone)]
pub struct DualProblem {
    pub objective: Vec<f64>,
    pub dec: Decomposition,
    pub bdds: Vec<Bdd>,
    /// `Σ min(c_i, 0)` over variables in no constraint.
    pub isolated_offset: f64,
}

impl DualProblem {
    pub fn new(instance: &IlpInstance) -> Result<Self, DualError> {
        let dec = decompose(instance);
        for &row in &dec.empty_rows {
            let c = &instance.constraints[row];
            if !c.rel.holds(0.0, c.rhs) {
                return Err(DualError::InfeasibleEmptyRow(row));
            }
        }
        let bdds = (0..dec.num_subproblems())
            .into_par_iter()
            .map(|j| {
                let row = &instance.constraints[dec.subproblem_rows[j]];
                build_bdd(
                    &dec.subproblem_vars[j],
                    &dec.subproblem_coeffs[j],
                    row.rel,
                    row.rhs,
                )
                .map_err(|source| DualError::Subproblem {
                    subproblem: j,
                    row: dec.subproblem_rows[j],
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let isolated_offset = dec
            .isolated
            .iter()
            .map(|&i| instance.objective[i].min(0.0))
            .sum();
        Ok(DualProblem {
            objective: instance.objective.clone(),
            dec,
            bdds,
            isolated_offset,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.dec.num_dual_vars
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_subproblems(&self) -> usize {
        self.bdds.len()
    }

    pub fn cost_norm(&self) -> f64 {
        self.objective.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Row type of subproblem `j`.
    pub fn is_equality(&self, instance: &IlpInstance, j: usize) -> bool {
        instance.constraints[self.dec.subproblem_rows[j]].rel == Relation::Eq
    }

    /// Sum over `J_i` of a per-edge quantity, in fixed `J_i` order.
    pub fn var_sum(&self, i: usize, f: impl Fn(usize) -> f64) -> f64 {
        self.dec.var_edges[i].iter().fold(0.0, |acc, &e| acc + f(e))
    }
}

/// Lifted dual iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub hi: Vec<f64>,
    pub lo: Vec<f64>,
    /// Deferred min-marginal differences `M`.
    pub deferred: Vec<f64>,
    /// Pass-start snapshot `Σ_j max(M_ij, 0)` per primal variable.
    pub snap_pos: Vec<f64>,
    /// Pass-start snapshot `Σ_j min(M_ij, 0)` per primal variable.
    pub snap_neg: Vec<f64>,
    pub sweeps: usize,
}

impl DualState {
    /// `hi_ij = c_i / |J_i|`, `lo = 0`, `M = 0`.
    pub fn init(problem: &DualProblem) -> DualState {
        let dec = &problem.dec;
        let hi = (0..dec.num_dual_vars)
            .map(|e| {
                let i = dec.edge_var[e];
                problem.objective[i] / dec.var_subproblems[i].len() as f64
            })
            .collect();
        let n = problem.num_vars();
        DualState {
            hi,
            lo: vec![0.0; dec.num_dual_vars],
            deferred: vec![0.0; dec.num_dual_vars],
            snap_pos: vec![0.0; n],
            snap_neg: vec![0.0; n],
            sweeps: 0,
        }
    }

    /// Plain Lagrange multipliers `λ = hi − lo`.
    pub fn lambda(&self) -> Vec<f64> {
        self.hi.iter().zip(&self.lo).map(|(h, l)| h - l).collect()
    }
}

/// Averaging weights `α` and damping factors `ω`, one per dual variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    #[doc(hidden)]
    pub snapshot: SnapshotMode,
}

/// Source of the redistributed mass within a directional pass.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnapshotMode {
    /// Sums frozen at the start of the pass.
    #[default]
    Frozen,
    /// Sums read from the live `M` at every update. Breaks feasibility; only
    /// used to check that the invariant checks catch it.
    Live,
}

impl SolverParams {
    /// Validates shapes and ranges and renormalizes `α` over each `J_i`.
    pub fn new(problem: &DualProblem, alpha: Vec<f64>, omega: Vec<f64>) -> Result<Self, DualError> {
        let e = problem.num_edges();
        for v in [&alpha, &omega] {
            if v.len() != e {
                return Err(DualError::Shape {
                    expected: e,
                    got: v.len(),
                });
            }
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(DualError::InvalidParam(
                "alpha must be finite and non-negative".into(),
            ));
        }
        if omega.iter().any(|w| !w.is_finite() || *w < 0.0 || *w > 1.0) {
            return Err(DualError::InvalidParam("omega must lie in [0, 1]".into()));
        }
        let mut alpha = alpha;
        for edges in &problem.dec.var_edges {
            let total = edges.iter().fold(0.0, |acc, &k| acc + alpha[k]);
            if total <= 0.0 {
                let uniform = 1.0 / edges.len() as f64;
                edges.iter().for_each(|&k| alpha[k] = uniform);
            } else {
                edges.iter().for_each(|&k| alpha[k] /= total);
            }
        }
        Ok(SolverParams {
            alpha,
            omega,
            snapshot: SnapshotMode::Frozen,
        })
    }

    /// `ω = 0.5`, `α_ij = 1/|J_i|`.
    pub fn defaults(problem: &DualProblem) -> Self {
        Self::uniform(problem, 0.5)
    }

    pub fn uniform(problem: &DualProblem, omega: f64) -> Self {
        let alpha = (0..problem.num_edges())
            .map(|e| 1.0 / problem.dec.edge_degree(e) as f64)
            .collect();
        Self::new(problem, alpha, vec![omega; problem.num_edges()])
            .expect("uniform parameters are valid")
    }
}

/// Range applied to predicted damping factors before use.
pub fn clamp_omega(w: f64) -> f64 {
    w.clamp(OMEGA_MIN, OMEGA_MAX)
}

/// Pass direction over the block schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// `B_t` holds the `t`-th dual variable of every subproblem long enough.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSchedule {
    pub blocks: Vec<Vec<usize>>,
}

impl BlockSchedule {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn build_schedule(dec: &Decomposition) -> BlockSchedule {
    let u = dec.subproblem_vars.iter().map(Vec::len).max().unwrap_or(0);
    let mut blocks = vec![Vec::new(); u];
    for j in 0..dec.num_subproblems() {
        for (t, e) in dec.edges_of(j).enumerate() {
            blocks[t].push(e);
        }
    }
    BlockSchedule { blocks }
}

/// What one level update did, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    /// `m¹ − m⁰` (0 when one branch is infeasible).
    pub diff: f64,
    /// Removed mass was taken from the hi side (`diff > 0`).
    pub hi_side: bool,
    /// One branch is infeasible; the update moved no mass.
    pub saturated: bool,
    /// Restricted minimizers `s(i, 0)` and `s(i, 1)` over the subproblem.
    pub argmin0: Vec<u8>,
    pub argmin1: Vec<u8>,
}

/// Reusable per-subproblem shortest-path tables.
#[derive(Debug, Clone)]
pub struct Workspace {
    costs: Vec<NodeCosts>,
    values: Vec<f64>,
    pos_edge: Vec<f64>,
    neg_edge: Vec<f64>,
}

impl Workspace {
    pub fn new(problem: &DualProblem) -> Self {
        Workspace {
            costs: problem.bdds.iter().map(NodeCosts::allocate).collect(),
            values: vec![0.0; problem.num_subproblems()],
            pos_edge: vec![0.0; problem.num_edges()],
            neg_edge: vec![0.0; problem.num_edges()],
        }
    }
}

/// Splits `data` into consecutive mutable chunks delimited by `offsets`.
pub(crate) fn split_by_offsets<'a, T>(
    mut data: &'a mut [T],
    offsets: &[usize],
) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let (head, tail) = data.split_at_mut(w[1] - w[0]);
        out.push(head);
        data = tail;
    }
    out
}

/// Inputs of one level update that come from outside the subproblem.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LevelInputs {
    pub alpha: f64,
    pub omega: f64,
    pub pos: f64,
    pub neg: f64,
}

/// The per-dual-variable update at level `t` of one subproblem; `hi`, `lo`,
/// `m` are that subproblem's slices. `costs` must be current for level `t`.
pub(crate) fn level_update(
    bdd: &Bdd,
    costs: &mut NodeCosts,
    hi: &mut [f64],
    lo: &mut [f64],
    m: &mut [f64],
    t: usize,
    inp: LevelInputs,
    dir: Direction,
    record: bool,
) -> Result<Option<LevelRecord>, BddError> {
    let (m0, m1) = bdd.min_marginals_unchecked(costs, t, hi[t], lo[t]);
    if m0 == INF && m1 == INF {
        return Err(BddError::BrokenDiagram(t));
    }
    let saturated = m0 == INF || m1 == INF;
    let diff = if saturated { 0.0 } else { m1 - m0 };
    let rec = if record {
        let k = bdd.num_levels();
        let (mut s0, mut s1) = (vec![0u8; k], vec![0u8; k]);
        if !saturated {
            bdd.argmin_restricted_into(costs, hi, lo, t, 0, &mut s0)?;
            bdd.argmin_restricted_into(costs, hi, lo, t, 1, &mut s1)?;
        }
        Some(LevelRecord {
            diff,
            hi_side: diff > 0.0,
            saturated,
            argmin0: s0,
            argmin1: s1,
        })
    } else {
        None
    };
    let removed = inp.omega * diff;
    if diff > 0.0 {
        hi[t] -= removed;
    } else {
        lo[t] += removed;
    }
    hi[t] += inp.alpha * inp.pos;
    lo[t] -= inp.alpha * inp.neg;
    m[t] = removed;
    match dir {
        Direction::Forward => bdd.forward_level(costs, t, hi[t], lo[t]),
        Direction::Reverse => bdd.backward_level(costs, t, hi[t], lo[t]),
    }
    Ok(rec)
}

/// Levels of a `k`-level subproblem in pass order.
pub(crate) fn pass_levels(k: usize, dir: Direction) -> Box<dyn Iterator<Item = usize>> {
    match dir {
        Direction::Forward => Box::new(0..k),
        Direction::Reverse => Box::new((0..k).rev()),
    }
}

/// Freezes the per-variable positive/negative parts of `M`.
pub fn take_snapshot(problem: &DualProblem, state: &mut DualState) {
    for i in 0..problem.num_vars() {
        state.snap_pos[i] = problem.var_sum(i, |e| state.deferred[e].max(0.0));
        state.snap_neg[i] = problem.var_sum(i, |e| state.deferred[e].min(0.0));
    }
}

fn refresh_costs(problem: &DualProblem, state: &DualState, ws: &mut Workspace) {
    let offsets = &problem.dec.edge_offset;
    ws.costs.par_iter_mut().enumerate().for_each(|(j, costs)| {
        let range = offsets[j]..offsets[j + 1];
        *costs = problem.bdds[j].compute_shortest_paths(&state.hi[range.clone()], &state.lo[range]);
    });
}

/// Runs `block_update` for `B_t` on every subproblem that has a level `t`.
///
/// `ws` must hold costs that are current for level `t` in direction `dir`,
/// as set up by [`begin_pass`]. Blocks touch each subproblem at most once, so
/// the subproblems are processed concurrently.
pub fn block_update(
    problem: &DualProblem,
    state: &mut DualState,
    ws: &mut Workspace,
    t: usize,
    params: &SolverParams,
    dir: Direction,
) -> Result<(), DualError> {
    let offsets = &problem.dec.edge_offset;
    let his = split_by_offsets(&mut state.hi, offsets);
    let los = split_by_offsets(&mut state.lo, offsets);
    let ms = split_by_offsets(&mut state.deferred, offsets);
    let pos_edge = &ws.pos_edge;
    let neg_edge = &ws.neg_edge;
    ws.costs
        .par_iter_mut()
        .zip(his)
        .zip(los)
        .zip(ms)
        .enumerate()
        .try_for_each(|(j, (((costs, hi), lo), m))| {
            let bdd = &problem.bdds[j];
            if t >= bdd.num_levels() {
                return Ok(());
            }
            let e = offsets[j] + t;
            let inp = LevelInputs {
                alpha: params.alpha[e],
                omega: params.omega[e],
                pos: pos_edge[e],
                neg: neg_edge[e],
            };
            level_update(bdd, costs, hi, lo, m, t, inp, dir, false)
                .map(|_| ())
                .map_err(|source| DualError::Subproblem {
                    subproblem: j,
                    row: problem.dec.subproblem_rows[j],
                    source,
                })
        })
}

/// Snapshots `M` and recomputes all shortest-path tables for a new pass.
pub fn begin_pass(problem: &DualProblem, state: &mut DualState, ws: &mut Workspace) {
    take_snapshot(problem, state);
    for e in 0..problem.num_edges() {
        let i = problem.dec.edge_var[e];
        ws.pos_edge[e] = state.snap_pos[i];
        ws.neg_edge[e] = state.snap_neg[i];
    }
    refresh_costs(problem, state, ws);
}

/// One directional pass; returns the dual objective after it.
pub fn directional_pass(
    problem: &DualProblem,
    state: &mut DualState,
    ws: &mut Workspace,
    params: &SolverParams,
    dir: Direction,
) -> Result<f64, DualError> {
    if params.snapshot == SnapshotMode::Live {
        return live_pass(problem, state, ws, params, dir);
    }
    begin_pass(problem, state, ws);
    let offsets = &problem.dec.edge_offset;
    let his = split_by_offsets(&mut state.hi, offsets);
    let los = split_by_offsets(&mut state.lo, offsets);
    let ms = split_by_offsets(&mut state.deferred, offsets);
    let pos_edge = &ws.pos_edge;
    let neg_edge = &ws.neg_edge;
    ws.costs
        .par_iter_mut()
        .zip(ws.values.par_iter_mut())
        .zip(his)
        .zip(los)
        .zip(ms)
        .enumerate()
        .try_for_each(|(j, ((((costs, value), hi), lo), m))| {
            let bdd = &problem.bdds[j];
            for t in pass_levels(bdd.num_levels(), dir) {
                let e = offsets[j] + t;
                let inp = LevelInputs {
                    alpha: params.alpha[e],
                    omega: params.omega[e],
                    pos: pos_edge[e],
                    neg: neg_edge[e],
                };
                level_update(bdd, costs, hi, lo, m, t, inp, dir, false).map_err(|source| {
                    DualError::Subproblem {
                        subproblem: j,
                        row: problem.dec.subproblem_rows[j],
                        source,
                    }
                })?;
            }
            *value = subproblem_value_after_pass(bdd, costs, hi, lo, dir);
            Ok(())
        })?;
    Ok(ws.values.iter().sum::<f64>() + problem.isolated_offset)
}

fn subproblem_value_after_pass(
    bdd: &Bdd,
    costs: &mut NodeCosts,
    hi: &[f64],
    lo: &[f64],
    dir: Direction,
) -> f64 {
    match dir {
        // to_top was refreshed level by level down to the root.
        Direction::Reverse => bdd.optimum(costs),
        Direction::Forward => {
            let last = bdd.num_levels() - 1;
            bdd.backward_level(costs, last, hi[last], lo[last]);
            costs.from_root[last]
                .iter()
                .zip(&costs.to_top[last])
                .map(|(a, b)| a + b)
                .fold(INF, f64::min)
        }
    }
}

/// Block-by-block pass reading the redistributed mass from the live `M`.
fn live_pass(
    problem: &DualProblem,
    state: &mut DualState,
    ws: &mut Workspace,
    params: &SolverParams,
    dir: Direction,
) -> Result<f64, DualError> {
    refresh_costs(problem, state, ws);
    let schedule = build_schedule(&problem.dec);
    let blocks: Vec<usize> = pass_levels(schedule.len(), dir).collect();
    for t in blocks {
        take_snapshot(problem, state);
        for e in 0..problem.num_edges() {
            let i = problem.dec.edge_var[e];
            ws.pos_edge[e] = state.snap_pos[i];
            ws.neg_edge[e] = state.snap_neg[i];
        }
        block_update(problem, state, ws, t, params, dir)?;
    }
    Ok(dual_objective(problem, state))
}

/// Forward pass then reverse pass; returns the bound after each.
pub fn sweep(
    problem: &DualProblem,
    state: &mut DualState,
    ws: &mut Workspace,
    params: &SolverParams,
) -> Result<(f64, f64), DualError> {
    let fwd = directional_pass(problem, state, ws, params, Direction::Forward)?;
    let rev = directional_pass(problem, state, ws, params, Direction::Reverse)?;
    state.sweeps += 1;
    Ok((fwd, rev))
}

/// Lower bounds and wall-clock offsets, one entry per sweep plus the start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub bounds: Vec<f64>,
    pub seconds: Vec<f64>,
}

/// `T` sweeps; the trace starts with the bound of the incoming state.
pub fn run(
    problem: &DualProblem,
    state: &mut DualState,
    params: &SolverParams,
    sweeps: usize,
) -> Result<RunTrace, DualError> {
    let mut ws = Workspace::new(problem);
    let start = Instant::now();
    let mut trace = RunTrace {
        bounds: vec![dual_objective(problem, state)],
        seconds: vec![0.0],
    };
    for _ in 0..sweeps {
        let (_, bound) = sweep(problem, state, &mut ws, params)?;
        trace.bounds.push(bound);
        trace.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(trace)
}

/// `E^j` for every subproblem.
pub fn subproblem_values(problem: &DualProblem, state: &DualState) -> Vec<f64> {
    let offsets = &problem.dec.edge_offset;
    (0..problem.num_subproblems())
        .into_par_iter()
        .map(|j| {
            let r = offsets[j]..offsets[j + 1];
            let costs = problem.bdds[j].compute_shortest_paths(&state.hi[r.clone()], &state.lo[r]);
            problem.bdds[j].optimum(&costs)
        })
        .collect()
}

/// `Σ_j E^j(hi, lo)` plus the isolated-variable offset.
pub fn dual_objective(problem: &DualProblem, state: &DualState) -> f64 {
    subproblem_values(problem, state).iter().sum::<f64>() + problem.isolated_offset
}

/// Mean-centred update `hi_ij += θ_ij − mean_{k∈J_i} θ_ik`.
pub fn nonparam_update(problem: &DualProblem, state: &mut DualState, theta: &[f64]) {
    for i in 0..problem.num_vars() {
        let edges = &problem.dec.var_edges[i];
        if edges.is_empty() {
            continue;
        }
        let mean = problem.var_sum(i, |e| theta[e]) / edges.len() as f64;
        for &e in edges {
            state.hi[e] += theta[e] - mean;
        }
    }
}

/// Largest violation of the two lifted feasibility identities.
pub fn feasibility_residual(problem: &DualProblem, state: &DualState) -> f64 {
    (0..problem.num_vars())
        .filter(|&i| !problem.dec.var_edges[i].is_empty())
        .map(|i| {
            let one = problem.var_sum(i, |e| state.hi[e] + state.deferred[e].max(0.0));
            let zero = problem.var_sum(i, |e| state.lo[e] - state.deferred[e].min(0.0));
            (one - problem.objective[i]).abs().max(zero.abs())
        })
        .fold(0.0, f64::max)
}

/// Tolerance used for the feasibility identities.
pub fn feasibility_tolerance(problem: &DualProblem) -> f64 {
    1e-9 * (1.0 + problem.cost_norm())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::fixtures::tiny;
    use crate::model::{enumerate_optimum, generate_independent_set, Constraint};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_problem() -> DualProblem {
        DualProblem::new(&tiny()).unwrap()
    }

    #[test]
    fn init_tiny() {
        let p = tiny_problem();
        let s = DualState::init(&p);
        assert_eq!(s.hi, vec![-1.0, -0.5, -0.5, -1.0]);
        assert_eq!(feasibility_residual(&p, &s), 0.0);
        assert_eq!(dual_objective(&p, &s), -2.0);
    }

    #[test]
    fn init_single_membership_copies_costs() {
        let inst = IlpInstance::new(
            vec![1.5, -2.0],
            vec![Constraint::new(
                vec![0, 1],
                vec![1.0, 1.0],
                Relation::Le,
                1.0,
            )],
        )
        .unwrap();
        let p = DualProblem::new(&inst).unwrap();
        assert_eq!(DualState::init(&p).hi, inst.objective);
        // m = 1: E^1(c) is the integer optimum.
        assert_eq!(
            dual_objective(&p, &DualState::init(&p)),
            enumerate_optimum(&inst).unwrap().value
        );
    }

    #[test]
    fn schedule_shapes() {
        let dec = decompose(&tiny());
        assert_eq!(build_schedule(&dec).blocks, vec![vec![0, 2], vec![1, 3]]);

        let one = IlpInstance::new(
            vec![0.0; 4],
            vec![Constraint::new(
                vec![0, 1, 2, 3],
                vec![1.0; 4],
                Relation::Le,
                2.0,
            )],
        )
        .unwrap();
        let s = build_schedule(&decompose(&one));
        assert_eq!(s.len(), 4);
        assert!(s.blocks.iter().all(|b| b.len() == 1));

        let two = IlpInstance::new(
            vec![0.0; 4],
            vec![
                Constraint::new(vec![0, 1], vec![1.0; 2], Relation::Le, 1.0),
                Constraint::new(vec![2, 3], vec![1.0; 2], Relation::Le, 1.0),
            ],
        )
        .unwrap();
        let s = build_schedule(&decompose(&two));
        assert_eq!(s.len(), 2);
        assert!(s.blocks.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn first_block_on_tiny() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        let mut ws = Workspace::new(&p);
        let params = SolverParams::defaults(&p);
        begin_pass(&p, &mut s, &mut ws);
        block_update(&p, &mut s, &mut ws, 0, &params, Direction::Forward).unwrap();
        // (1,1): d = -0.5 -> M = -0.25 taken from the zero side.
        assert_eq!(s.deferred[0], -0.25);
        assert_eq!(s.lo[0], -0.25);
        assert_eq!(s.hi[0] - s.lo[0], -0.75);
        // (2,2): d = +0.5 -> M = +0.25 taken from the one side.
        assert_eq!(s.deferred[2], 0.25);
        assert_eq!(s.hi[2] - s.lo[2], -0.75);
    }

    #[test]
    fn tiny_sweep_keeps_feasibility() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        let mut ws = Workspace::new(&p);
        let params = SolverParams::defaults(&p);
        let before = dual_objective(&p, &s);
        let (fwd, rev) = sweep(&p, &mut s, &mut ws, &params).unwrap();
        assert!(feasibility_residual(&p, &s) < 1e-15);
        let lam = s.lambda();
        assert!((lam[1] + lam[2] + s.deferred[1] + s.deferred[2] + 1.0).abs() < 1e-15);
        assert!(before <= fwd && fwd <= rev);
        assert_eq!(rev, dual_objective(&p, &s));
    }

    #[test]
    fn block_by_block_equals_pass() {
        let inst = random_instance(11, 3);
        let p = DualProblem::new(&inst).unwrap();
        let params = SolverParams::defaults(&p);
        let sched = build_schedule(&p.dec);
        let mut a = DualState::init(&p);
        let mut b = a.clone();
        let mut ws = Workspace::new(&p);
        for _ in 0..3 {
            sweep(&p, &mut a, &mut ws, &params).unwrap();
            for dir in [Direction::Forward, Direction::Reverse] {
                begin_pass(&p, &mut b, &mut ws);
                let order: Vec<usize> = pass_levels(sched.len(), dir).collect();
                for t in order {
                    block_update(&p, &mut b, &mut ws, t, &params, dir).unwrap();
                }
            }
            b.sweeps += 1;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_converges() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        let trace = run(&p, &mut s, &SolverParams::defaults(&p), 50).unwrap();
        assert_eq!(trace.bounds.len(), 51);
        assert!((trace.bounds[50] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_sweeps_leave_state() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        let trace = run(&p, &mut s, &SolverParams::defaults(&p), 0).unwrap();
        assert_eq!(trace.bounds, vec![-2.0]);
        assert_eq!(s, DualState::init(&p));
    }

    #[test]
    fn tiny_damping_limit() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        let mut ws = Workspace::new(&p);
        let params = SolverParams::new(&p, vec![0.5; 4], vec![1e-9; 4]).unwrap();
        let init = s.clone();
        sweep(&p, &mut s, &mut ws, &params).unwrap();
        for (a, b) in s.lambda().iter().zip(init.lambda()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_schedule_is_noop() {
        let inst = generate_independent_set(4, 0.0, 1);
        let p = DualProblem::new(&inst).unwrap();
        let mut s = DualState::init(&p);
        let trace = run(&p, &mut s, &SolverParams::defaults(&p), 3).unwrap();
        assert!(trace.bounds.iter().all(|&b| b == -4.0));
    }

    #[test]
    fn nonparam_cases() {
        let p = tiny_problem();
        let mut s = DualState::init(&p);
        nonparam_update(&p, &mut s, &[0.0; 4]);
        assert_eq!(s, DualState::init(&p));
        nonparam_update(&p, &mut s, &[7.0, 1.0, 0.0, -3.0]);
        // Variables 1 and 3 have |J_i| = 1.
        assert_eq!(s.hi[0], -1.0);
        assert_eq!(s.hi[3], -1.0);
        assert_eq!(s.hi[1], 0.0);
        assert_eq!(s.hi[2], -1.0);
        assert_eq!(feasibility_residual(&p, &s), 0.0);
    }

    #[test]
    fn live_snapshot_breaks_feasibility() {
        let p = tiny_problem();
        let mut params = SolverParams::defaults(&p);
        params.snapshot = SnapshotMode::Live;
        let mut s = DualState::init(&p);
        let mut ws = Workspace::new(&p);
        sweep(&p, &mut s, &mut ws, &params).unwrap();
        assert!(feasibility_residual(&p, &s) > 1e-3);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = tiny_problem();
        assert!(SolverParams::new(&p, vec![1.0; 3], vec![0.5; 4]).is_err());
        assert!(SolverParams::new(&p, vec![-1.0; 4], vec![0.5; 4]).is_err());
        assert!(SolverParams::new(&p, vec![1.0; 4], vec![1.5; 4]).is_err());
        let ok = SolverParams::new(&p, vec![3.0, 1.0, 3.0, 1.0], vec![0.25; 4]).unwrap();
        assert_eq!(ok.alpha, vec![1.0, 0.25, 0.75, 1.0]);
        assert_eq!(clamp_omega(0.0), OMEGA_MIN);
        assert_eq!(clamp_omega(1.0), OMEGA_MAX);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        let inst = IlpInstance::new(
            vec![1.0],
            vec![Constraint::new(vec![0], vec![1.0], Relation::Le, -1.0)],
        )
        .unwrap();
        assert!(matches!(
            DualProblem::new(&inst),
            Err(DualError::Subproblem { .. })
        ));
        let inst = IlpInstance::new(
            vec![1.0],
            vec![Constraint::new(vec![], vec![], Relation::Eq, 1.0)],
        )
        .unwrap();
        assert_eq!(
            DualProblem::new(&inst).unwrap_err(),
            DualError::InfeasibleEmptyRow(0)
        );
    }

    #[test]
    fn isolated_variables_enter_the_bound() {
        let inst = IlpInstance::new(
            vec![-1.0, -1.0, 2.0, -0.5],
            vec![Constraint::new(
                vec![0, 1],
                vec![1.0, 1.0],
                Relation::Le,
                1.0,
            )],
        )
        .unwrap();
        let p = DualProblem::new(&inst).unwrap();
        assert_eq!(p.isolated_offset, -0.5);
        assert_eq!(dual_objective(&p, &DualState::init(&p)), -1.5);
    }

    /// Random 0/1 program with mixed ≤ / = rows of width ≤ 4.
    pub(crate) fn random_instance(n: usize, seed: u64) -> IlpInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..1.0)).collect();
            let m = rng.gen_range(n / 2..=n);
            let mut rows = Vec::new();
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
                rows.push(Constraint::new(
                    vars,
                    coeffs,
                    if eq { Relation::Eq } else { Relation::Le },
                    rhs,
                ));
            }
            let inst = IlpInstance::new(c, rows).unwrap();
            if enumerate_optimum(&inst).is_ok() && DualProblem::new(&inst).is_ok() {
                return inst;
            }
        }
    }

    /// Non-lifted reference: λ-costs only, min-marginals by enumeration.
    fn reference_lambda_run(
        inst: &IlpInstance,
        p: &DualProblem,
        params: &SolverParams,
        sweeps: usize,
    ) -> Vec<f64> {
        let dec = &p.dec;
        let feasible: Vec<Vec<Vec<u8>>> = p.bdds.iter().map(|b| b.feasible_assignments()).collect();
        let mut lambda: Vec<f64> = (0..dec.num_dual_vars)
            .map(|e| inst.objective[dec.edge_var[e]] / dec.edge_degree(e) as f64)
            .collect();
        let mut m = vec![0.0; dec.num_dual_vars];
        let sched = build_schedule(dec);
        for _ in 0..sweeps {
            for dir in [Direction::Forward, Direction::Reverse] {
                let snap: Vec<f64> = (0..p.num_vars()).map(|i| p.var_sum(i, |e| m[e])).collect();
                let order: Vec<usize> = pass_levels(sched.len(), dir).collect();
                for t in order {
                    for &e in &sched.blocks[t] {
                        let j = dec.edge_subproblem[e];
                        let r = dec.edges_of(j);
                        let mm = |beta: u8| {
                            feasible[j]
                                .iter()
                                .filter(|x| x[t] == beta)
                                .map(|x| {
                                    x.iter()
                                        .zip(&lambda[r.clone()])
                                        .map(|(&b, &l)| f64::from(b) * l)
                                        .sum::<f64>()
                                })
                                .fold(INF, f64::min)
                        };
                        let (m0, m1) = (mm(0), mm(1));
                        let d = if m0 == INF || m1 == INF { 0.0 } else { m1 - m0 };
                        let mnew = params.omega[e] * d;
                        lambda[e] += -mnew + params.alpha[e] * snap[dec.edge_var[e]];
                        m[e] = mnew;
                    }
                }
            }
        }
        lambda
    }

    #[test]
    fn lambda_view_matches_reference() {
        for seed in 0..5 {
            let inst = random_instance(7, 100 + seed);
            let p = DualProblem::new(&inst).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alpha: Vec<f64> = (0..p.num_edges())
                .map(|_| rng.gen_range(0.1..1.0))
                .collect();
            let omega: Vec<f64> = (0..p.num_edges())
                .map(|_| rng.gen_range(0.1..0.9))
                .collect();
            let params = SolverParams::new(&p, alpha, omega).unwrap();
            let mut s = DualState::init(&p);
            run(&p, &mut s, &params, 4).unwrap();
            let expected = reference_lambda_run(&inst, &p, &params, 4);
            for (a, b) in s.lambda().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn monotone_feasible_and_valid(seed in any::<u64>(), n in 4usize..10) {
            let inst = random_instance(n, seed);
            let opt = enumerate_optimum(&inst).unwrap().value;
            let p = DualProblem::new(&inst).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let alpha: Vec<f64> = (0..p.num_edges()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let omega: Vec<f64> = (0..p.num_edges()).map(|_| rng.gen_range(0.01..0.99)).collect();
            let params = SolverParams::new(&p, alpha, omega).unwrap();
            let mut s = DualState::init(&p);
            let mut ws = Workspace::new(&p);
            let tol = feasibility_tolerance(&p);
            let mut last = dual_objective(&p, &s);
            for _ in 0..15 {
                for dir in [Direction::Forward, Direction::Reverse] {
                    let b = directional_pass(&p, &mut s, &mut ws, &params, dir).unwrap();
                    prop_assert!(feasibility_residual(&p, &s) <= tol);
                    prop_assert!(b >= last - 1e-9 * (1.0 + last.abs()));
                    prop_assert!(b <= opt + 1e-9 * (1.0 + opt.abs()));
                    prop_assert!((b - dual_objective(&p, &s)).abs() < 1e-9);
                    last = b;
                }
            }
        }
    }
}
