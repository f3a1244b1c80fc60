//! Training of the early/late network pair, inference with stage switching
//! and convergence metrics.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{
    dual_objective, nonparam_update, DualError, DualProblem, DualState, SolverParams,
};
use crate::grad::{
    loss_and_grad, nonparam_backward, round_backward, run_recorded, GradError, GradState, Tape,
};
use crate::model::{enumerate_optimum, IlpInstance};
use crate::net::{
    compute_features, gnn_backward, gnn_forward, note_update, transform, transform_backward, Arch,
    FeatureHistory, ForwardCache, LstmState, NetError, NetOutput, Predict, StaticFeatures,
    Topology, Weights, NORM_EPS,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Relative per-round improvement below which inference switches stage or stops.
pub const IMPROVEMENT_TOL: f64 = 1e-6;
const PAIR_MAGIC: &[u8; 8] = b"DOGEPAIR";
const PAIR_VERSION: u32 = 1;
/// Largest instance solved by enumeration for the reference value.
pub const ENUMERATION_LIMIT: usize = 25;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Maximum rounds per instance `R`.
    pub rounds: usize,
    /// Sweeps per round `T`.
    pub sweeps: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub iters: usize,
    pub seed: u64,
    /// Which predicted quantities are used (ablation switch).
    #[serde(default)]
    pub predict: Predict,
}

impl TrainConfig {
    pub fn new(arch: Arch) -> TrainConfig {
        TrainConfig {
            arch,
            rounds: 20,
            sweeps: 20,
            lr: 1e-3,
            batch: 4,
            clip: 50.0,
            iters: 100,
            seed: 0,
            predict: Predict::All,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rounds < 2 {
            return Err(TrainError::Config("rounds must be at least 2".into()));
        }
        if self.sweeps < 1 {
            return Err(TrainError::Config("sweeps must be at least 1".into()));
        }
        if !(self.clip > 0.0) {
            return Err(TrainError::Config("clip norm must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Rounds differentiated per sample: the last three for `DogeM`.
    pub fn backprop_rounds(&self) -> usize {
        match self.arch {
            Arch::Doge => 1,
            Arch::DogeM => 3,
        }
    }

    /// Round `r` (1-based) belongs to the early stage when `r ≤ ⌈R/2⌉`.
    pub fn is_early(&self, r: usize) -> bool {
        r <= self.rounds.div_ceil(2)
    }
}

/// Networks for the early and late stage of solving.
#[derive(Debug, Clone, PartialEq)]
pub struct NetPair {
    pub early: Weights,
    pub late: Weights,
    pub predict: Predict,
}

impl NetPair {
    pub fn zeros(arch: Arch) -> NetPair {
        NetPair {
            early: Weights::zeros(arch),
            late: Weights::zeros(arch),
            predict: Predict::All,
        }
    }

    pub fn init(arch: Arch, seed: u64) -> NetPair {
        NetPair {
            early: Weights::init(arch, seed),
            late: Weights::init(arch, seed.wrapping_add(1)),
            predict: Predict::All,
        }
    }

    pub fn arch(&self) -> Arch {
        self.early.arch
    }

    /// `PAIR_MAGIC`, u32 version, u8 prediction mode, then the early and late
    /// weight files each prefixed by their u64 byte length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PAIR_MAGIC);
        out.extend_from_slice(&PAIR_VERSION.to_le_bytes());
        out.push(match self.predict {
            Predict::All => 0,
            Predict::Param => 1,
            Predict::NonParam => 2,
        });
        for w in [&self.early, &self.late] {
            let b = w.to_bytes();
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NetPair, NetError> {
        let corrupt = |m: &str| NetError::Corrupt(m.to_string());
        if bytes.len() < 13 || &bytes[..8] != PAIR_MAGIC {
            return Err(corrupt("missing pair header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != PAIR_VERSION {
            return Err(NetError::Version {
                found: version,
                expected: PAIR_VERSION,
            });
        }
        let predict = match bytes[12] {
            0 => Predict::All,
            1 => Predict::Param,
            2 => Predict::NonParam,
            _ => return Err(corrupt("unknown prediction mode")),
        };
        let mut rest = &bytes[13..];
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            if rest.len() < 8 {
                return Err(corrupt("truncated pair"));
            }
            let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
            rest = &rest[8..];
            if rest.len() < len {
                return Err(corrupt("truncated pair"));
            }
            nets.push(Weights::from_bytes(&rest[..len])?);
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let late = nets.pop().expect("two nets");
        let early = nets.pop().expect("two nets");
        if early.arch != late.arch {
            return Err(corrupt("stage networks differ in architecture"));
        }
        Ok(NetPair {
            early,
            late,
            predict,
        })
    }

    pub fn stage(&self, early: bool) -> &Weights {
        if early {
            &self.early
        } else {
            &self.late
        }
    }
}

// ---------------------------------------------------------------- adam

/// Scales `g` in place so its l2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected ascent step on `w` along `g`.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for k in 0..w.len() {
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g[k];
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mh = self.m[k] / b1;
            let vh = self.v[k] / b2;
            w[k] += lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------- rounds

/// An instance with everything the solver and network need precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub instance: IlpInstance,
    pub problem: DualProblem,
    pub stat: StaticFeatures,
    pub topo: Topology,
}

impl Prepared {
    pub fn new(name: impl Into<String>, instance: IlpInstance) -> Result<Prepared, TrainError> {
        let problem = DualProblem::new(&instance)?;
        let stat = StaticFeatures::new(&instance, &problem);
        let topo = Topology::of(&problem);
        Ok(Prepared {
            name: name.into(),
            instance,
            problem,
            stat,
            topo,
        })
    }
}

/// Solver state of one instance across rounds.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    pub prep: &'a Prepared,
    pub state: DualState,
    pub history: FeatureHistory,
    pub lstm: Option<LstmState>,
    pub predict: Predict,
}

/// What backpropagation through one round needs.
pub struct RoundTape {
    out: NetOutput,
    cache: ForwardCache,
    tape: Tape,
    params: SolverParams,
    uses_early: bool,
    predict: Predict,
}

impl<'a> Session<'a> {
    pub fn new(prep: &'a Prepared) -> Session<'a> {
        Session {
            prep,
            state: DualState::init(&prep.problem),
            history: FeatureHistory::default(),
            lstm: None,
            predict: Predict::All,
        }
    }

    pub fn with_predict(prep: &'a Prepared, predict: Predict) -> Session<'a> {
        Session {
            predict,
            ..Session::new(prep)
        }
    }

    fn predict(
        &mut self,
        net: &Weights,
    ) -> Result<(NetOutput, ForwardCache, SolverParams), TrainError> {
        let p = self.prep;
        let feats = compute_features(&p.problem, &p.stat, &self.state, &mut self.history);
        let (mut out, cache) = gnn_forward(net, &p.topo, &feats, self.lstm.as_ref())?;
        if self.predict != Predict::All {
            let mut raw = out.raw;
            self.predict.mask(&mut raw);
            out = transform(&p.topo, raw, out.state);
        }
        nonparam_update(&p.problem, &mut self.state, &out.theta);
        note_update(&p.problem, &self.state, &mut self.history);
        let params = SolverParams::new(&p.problem, out.alpha.clone(), out.omega.clone())?;
        self.lstm = out.state.clone();
        Ok((out, cache, params))
    }

    /// Network forward, non-parametric update, `sweeps` sweeps. Returns the
    /// bound after every sweep.
    pub fn round(&mut self, net: &Weights, sweeps: usize) -> Result<Vec<f64>, TrainError> {
        let (_, _, params) = self.predict(net)?;
        let mut ws = crate::dual::Workspace::new(&self.prep.problem);
        let mut bounds = Vec::with_capacity(sweeps);
        for _ in 0..sweeps {
            bounds
                .push(crate::dual::sweep(&self.prep.problem, &mut self.state, &mut ws, &params)?.1);
        }
        Ok(bounds)
    }

    /// Like [`Session::round`] but keeps what backpropagation needs.
    pub fn round_recorded(
        &mut self,
        net: &Weights,
        sweeps: usize,
        uses_early: bool,
    ) -> Result<RoundTape, TrainError> {
        let (out, cache, params) = self.predict(net)?;
        let (tape, _) = run_recorded(&self.prep.problem, &mut self.state, &params, sweeps)?;
        Ok(RoundTape {
            out,
            cache,
            tape,
            params,
            uses_early,
            predict: self.predict,
        })
    }
}

/// Gradients w.r.t. the state entering a round and the network weights.
pub struct RoundGrads {
    pub state: GradState,
    pub weights: Vec<f64>,
    pub lstm: Option<LstmState>,
}

/// Backpropagates through one recorded round. `d_state` is the gradient
/// w.r.t. the state after the round, `d_lstm` w.r.t. the emitted LSTM state.
pub fn round_backward_full(
    prep: &Prepared,
    net: &Weights,
    rt: &RoundTape,
    d_state: GradState,
    d_lstm: Option<&LstmState>,
) -> Result<RoundGrads, TrainError> {
    let mut g = d_state;
    g.d_alpha.iter_mut().for_each(|x| *x = 0.0);
    g.d_omega.iter_mut().for_each(|x| *x = 0.0);
    round_backward(&prep.problem, &rt.tape, &rt.params, &mut g)?;
    let d_theta = nonparam_backward(&prep.problem, &g.d_hi);
    let mut d_raw = transform_backward(&prep.topo, &rt.out, &g.d_alpha, &g.d_omega, &d_theta);
    rt.predict.mask(&mut d_raw);
    let (weights, lstm) = gnn_backward(net, &prep.topo, &rt.cache, &d_raw, d_lstm);
    Ok(RoundGrads {
        state: g,
        weights,
        lstm,
    })
}

/// Result of differentiating one training sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub early: Option<Vec<f64>>,
    pub late: Option<Vec<f64>>,
}

/// Runs `r − k` rounds without gradients, `k` recorded rounds, and returns
/// the summed loss after each recorded round with its weight gradients.
pub fn sample_gradient(
    prep: &Prepared,
    nets: &NetPair,
    cfg: &TrainConfig,
    r: usize,
) -> Result<SampleGrad, TrainError> {
    let k = cfg.backprop_rounds().min(r);
    let mut session = Session::with_predict(prep, nets.predict);
    for round in 1..=r - k {
        session.round(nets.stage(cfg.is_early(round)), cfg.sweeps)?;
    }
    let mut tapes = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    let mut loss_grads = Vec::with_capacity(k);
    for round in r - k + 1..=r {
        let early = cfg.is_early(round);
        tapes.push(session.round_recorded(nets.stage(early), cfg.sweeps, early)?);
        let (l, d_hi, d_lo) = loss_and_grad(&prep.problem, &session.state);
        losses.push(l);
        loss_grads.push((d_hi, d_lo));
    }
    let target_early = cfg.is_early(r);
    let ne = prep.problem.num_edges();
    let mut d_state = GradState::zeros(ne);
    let mut d_lstm: Option<LstmState> = None;
    let mut acc = vec![0.0; nets.early.data.len()];
    for (rt, (d_hi, d_lo)) in tapes.iter().zip(loss_grads).rev() {
        for e in 0..ne {
            d_state.d_hi[e] += d_hi[e];
            d_state.d_lo[e] += d_lo[e];
        }
        let net = nets.stage(rt.uses_early);
        let g = round_backward_full(prep, net, rt, d_state, d_lstm.as_ref())?;
        if rt.uses_early == target_early {
            acc.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
        }
        d_state = g.state;
        d_lstm = g.lstm;
    }
    let loss = losses.iter().sum::<f64>();
    if !loss.is_finite() || acc.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    Ok(if target_early {
        SampleGrad {
            loss,
            early: Some(acc),
            late: None,
        }
    } else {
        SampleGrad {
            loss,
            early: None,
            late: Some(acc),
        }
    })
}

/// Optimizer state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: NetPair,
    pub adam_early: Adam,
    pub adam_late: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    pub loss: f64,
    pub mean_rounds: f64,
    pub grad_norm_early: f64,
    pub grad_norm_late: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let mut nets = NetPair::init(cfg.arch, cfg.seed);
        nets.predict = cfg.predict;
        let n = nets.early.data.len();
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7A1E),
            cfg,
            nets,
            adam_early: Adam::new(n),
            adam_late: Adam::new(n),
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.cfg.batch.min(n);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step on a batch drawn from `data`. A non-finite loss or
    /// gradient leaves the weights untouched and is returned as an error.
    pub fn step(&mut self, data: &[Prepared], iter: usize) -> Result<StepLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let batch = self.next_batch(data.len());
        let rs: Vec<usize> = batch
            .iter()
            .map(|_| self.rng.gen_range(1..=self.cfg.rounds))
            .collect();
        let results: Vec<Result<SampleGrad, TrainError>> = batch
            .par_iter()
            .zip(&rs)
            .map(|(&b, &r)| sample_gradient(&data[b], &self.nets, &self.cfg, r))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let n = self.nets.early.data.len();
        let (mut ge, mut gl) = (vec![0.0; n], vec![0.0; n]);
        let (mut any_e, mut any_l) = (false, false);
        let mut loss = 0.0;
        for res in results {
            let s = res?;
            loss += s.loss * scale;
            if let Some(g) = s.early {
                any_e = true;
                ge.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
            }
            if let Some(g) = s.late {
                any_l = true;
                gl.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
            }
        }
        let norm_e = clip_global(&mut ge, self.cfg.clip);
        let norm_l = clip_global(&mut gl, self.cfg.clip);
        if any_e {
            self.adam_early
                .step(&mut self.nets.early.data, &ge, self.cfg.lr);
        }
        if any_l {
            self.adam_late
                .step(&mut self.nets.late.data, &gl, self.cfg.lr);
        }
        Ok(StepLog {
            iter,
            loss,
            mean_rounds: rs.iter().sum::<usize>() as f64 / rs.len() as f64,
            grad_norm_early: norm_e,
            grad_norm_late: norm_l,
        })
    }
}

// ---------------------------------------------------------------- inference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub sweeps: usize,
    pub max_rounds: usize,
    /// Wall-clock cap in seconds; `None` keeps runs reproducible.
    pub time_limit: Option<f64>,
}

/// Bounds of one inference run; entry 0 is the initial bound.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub bounds: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Bound after every round, starting with the initial bound.
    pub round_bounds: Vec<f64>,
    /// Round index (1-based) at which the late network took over.
    pub switched_at: Option<usize>,
}

impl Trace {
    pub fn sweep_axis(&self) -> Vec<f64> {
        (0..self.bounds.len()).map(|s| s as f64).collect()
    }
}

fn relative_improvement(prev: f64, cur: f64) -> f64 {
    (cur - prev) / prev.abs().max(NORM_EPS)
}

/// Solver rounds with the early net until the per-round relative improvement
/// falls below [`IMPROVEMENT_TOL`], then the late net until it does so again
/// or a cap is reached. `nets = None` runs the plain solver with default
/// parameters under the same round structure.
pub fn inference(
    prep: &Prepared,
    nets: Option<&NetPair>,
    cfg: &InferenceConfig,
) -> Result<(DualState, Trace), TrainError> {
    let start = Instant::now();
    let problem = &prep.problem;
    let mut session = Session::with_predict(prep, nets.map_or(Predict::All, |n| n.predict));
    let d0 = dual_objective(problem, &session.state);
    let mut trace = Trace {
        bounds: vec![d0],
        seconds: vec![0.0],
        round_bounds: vec![d0],
        switched_at: None,
    };
    let defaults = SolverParams::defaults(problem);
    let mut ws = crate::dual::Workspace::new(problem);
    let mut early = true;
    let mut prev = d0;
    for round in 1..=cfg.max_rounds {
        if let Some(limit) = cfg.time_limit {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let bounds = match nets {
            Some(n) => session.round(n.stage(early), cfg.sweeps)?,
            None => {
                let mut b = Vec::with_capacity(cfg.sweeps);
                for _ in 0..cfg.sweeps {
                    b.push(crate::dual::sweep(problem, &mut session.state, &mut ws, &defaults)?.1);
                }
                b
            }
        };
        let elapsed = start.elapsed().as_secs_f64();
        for b in &bounds {
            trace.bounds.push(*b);
            trace.seconds.push(elapsed);
        }
        let cur = bounds.last().copied().unwrap_or(prev);
        trace.round_bounds.push(cur);
        if relative_improvement(prev, cur) < IMPROVEMENT_TOL {
            if early {
                early = false;
                trace.switched_at = Some(round + 1);
            } else {
                break;
            }
        }
        prev = cur;
    }
    Ok((session.state, trace))
}

// ---------------------------------------------------------------- metrics

/// `g = min((d* − d)/(d* − d_init), 1)`, floored at 0; 0 when the gap is
/// degenerate (`d* ≤ d_init`).
pub fn relative_gap(d: f64, d_star: f64, d_init: f64) -> f64 {
    if d_star <= d_init {
        return 0.0;
    }
    ((d_star - d) / (d_star - d_init)).min(1.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub times: Vec<f64>,
    pub bounds: Vec<f64>,
    pub d_init: f64,
    pub d_star: f64,
    pub gaps: Vec<f64>,
    /// Trapezoidal `∫ g dt` from the warmup sample to the end.
    pub g_integral: f64,
    pub best_bound: f64,
    pub best_time: f64,
    /// `d* ≤ d_init`: gaps are reported as 0.
    pub degenerate: bool,
}

/// Metrics of a bound trace sampled at `times`; integration starts at index
/// `warmup`.
pub fn compute_metrics(
    times: &[f64],
    bounds: &[f64],
    d_star: f64,
    d_init: f64,
    warmup: usize,
) -> RunMetrics {
    assert_eq!(times.len(), bounds.len(), "one time per bound");
    let gaps: Vec<f64> = bounds
        .iter()
        .map(|&d| relative_gap(d, d_star, d_init))
        .collect();
    let mut g_integral = 0.0;
    for k in warmup.max(1)..gaps.len() {
        if k - 1 >= warmup {
            g_integral += 0.5 * (gaps[k - 1] + gaps[k]) * (times[k] - times[k - 1]);
        }
    }
    let (mut best_bound, mut best_time) = (f64::NEG_INFINITY, 0.0);
    for (&b, &t) in bounds.iter().zip(times) {
        if b > best_bound {
            best_bound = b;
            best_time = t;
        }
    }
    RunMetrics {
        times: times.to_vec(),
        bounds: bounds.to_vec(),
        d_init,
        d_star,
        gaps,
        g_integral,
        best_bound,
        best_time,
        degenerate: d_star <= d_init,
    }
}

impl RunMetrics {
    pub fn final_bound(&self) -> f64 {
        self.bounds.last().copied().unwrap_or(self.d_init)
    }
}

/// Optimum by enumeration when small enough.
pub fn exact_reference(instance: &IlpInstance) -> Option<f64> {
    if instance.num_vars <= ENUMERATION_LIMIT {
        enumerate_optimum(instance).ok().map(|s| s.value)
    } else {
        None
    }
}

/// Per-instance comparison of a trained pair against the default solver.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub name: String,
    pub learned: RunMetrics,
    pub baseline: RunMetrics,
}

/// `a` is at least `b` up to `1e-9·(1 + |b|)`.
pub fn bound_not_worse(a: f64, b: f64) -> bool {
    a >= b - 1e-9 * (1.0 + b.abs())
}

/// Dataset averages of the metric triple `(g_I, E, t)` per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub instances: usize,
    pub learned_g_integral: f64,
    pub baseline_g_integral: f64,
    pub learned_best: f64,
    pub baseline_best: f64,
    pub learned_best_time: f64,
    pub baseline_best_time: f64,
    /// Instances where the learned final bound is not worse (see
    /// [`bound_not_worse`]).
    pub not_worse: usize,
}

impl EvalSummary {
    pub fn new(results: &[EvalResult]) -> EvalSummary {
        let n = results.len();
        let mean = |f: &dyn Fn(&EvalResult) -> f64| {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalSummary {
            instances: n,
            learned_g_integral: mean(&|r| r.learned.g_integral),
            baseline_g_integral: mean(&|r| r.baseline.g_integral),
            learned_best: mean(&|r| r.learned.best_bound),
            baseline_best: mean(&|r| r.baseline.best_bound),
            learned_best_time: mean(&|r| r.learned.best_time),
            baseline_best_time: mean(&|r| r.baseline.best_time),
            not_worse: results
                .iter()
                .filter(|r| bound_not_worse(r.learned.final_bound(), r.baseline.final_bound()))
                .count(),
        }
    }
}

/// Runs both methods on every instance. Time is measured in sweeps so the
/// results are reproducible; `d*` is the enumerated optimum where possible,
/// otherwise the best bound either method reached.
pub fn evaluate(
    data: &[Prepared],
    nets: &NetPair,
    cfg: &InferenceConfig,
    warmup_rounds: usize,
) -> Result<Vec<EvalResult>, TrainError> {
    data.par_iter()
        .map(|prep| {
            let (_, learned) = inference(prep, Some(nets), cfg)?;
            let (_, base) = inference(prep, None, cfg)?;
            let d_init = base.bounds[0];
            let best = |t: &Trace| t.bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let d_star =
                exact_reference(&prep.instance).unwrap_or_else(|| best(&learned).max(best(&base)));
            let warmup = warmup_rounds * cfg.sweeps;
            Ok(EvalResult {
                name: prep.name.clone(),
                learned: compute_metrics(
                    &learned.sweep_axis(),
                    &learned.bounds,
                    d_star,
                    d_init,
                    warmup,
                ),
                baseline: compute_metrics(&base.sweep_axis(), &base.bounds, d_star, d_init, warmup),
            })
        })
        .collect()
}
