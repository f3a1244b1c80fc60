//! Features and the parameter-prediction network.
//!
//! A bipartite attention network embeds subproblems and primal variables, an
//! optional LSTM carries a per-variable state across rounds, and a per-edge
//! MLP predicts `(α̂, ω̂, θ)` for every dual variable. All weights live in one
//! flat vector; [`Layout`] records where each block sits.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{clamp_omega, DualProblem, DualState, OMEGA_MAX, OMEGA_MIN};
use crate::grad::subproblem_solutions;
use crate::model::{IlpInstance, Relation};

pub const F_I: usize = 2;
pub const F_J: usize = 7;
pub const F_E: usize = 5;
pub const NODE_DIM: usize = 16;
pub const EDGE_DIM: usize = 8;
pub const LSTM_DIM: usize = 16;
pub const PHI_HIDDEN: usize = 32;
pub const PHI_IN: usize = F_I + NODE_DIM + LSTM_DIM + F_J + NODE_DIM + F_E + EDGE_DIM;
pub const EMA_FACTOR: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-9;
pub const THETA_SCALE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
const WEIGHTS_MAGIC: &[u8; 8] = b"DOGEWTS\0";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("weight file: {0}")]
    Corrupt(String),
    #[error("weight file version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Network variant: `Doge` has no recurrent state, `DogeM` adds the LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "doge")]
    Doge,
    #[serde(rename = "doge-m")]
    DogeM,
}

impl Arch {
    fn code(self) -> u8 {
        match self {
            Arch::Doge => 0,
            Arch::DogeM => 1,
        }
    }

    fn from_code(c: u8) -> Option<Arch> {
        match c {
            0 => Some(Arch::Doge),
            1 => Some(Arch::DogeM),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Doge => "doge",
            Arch::DogeM => "doge-m",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doge" => Ok(Arch::Doge),
            "doge-m" => Ok(Arch::DogeM),
            _ => Err(format!(
                "unknown architecture '{s}' (expected doge or doge-m)"
            )),
        }
    }
}

// ---------------------------------------------------------------- layout

/// `y = W x (+ b)` with `W` row-major `out × inp` at `w`.
#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: Option<usize>,
    out: usize,
    inp: usize,
}

impl Affine {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        (0..self.out)
            .map(|r| {
                let row = &p[self.w + r * self.inp..self.w + (r + 1) * self.inp];
                let acc = self.b.map_or(0.0, |b| p[b + r]);
                row.iter().zip(x).fold(acc, |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// Accumulates parameter gradients into `g` and, if given, `Wᵀ dy` into `dx`.
    fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        dy: &[f64],
        g: &mut [f64],
        mut dx: Option<&mut [f64]>,
    ) {
        for (r, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let base = self.w + r * self.inp;
            for c in 0..self.inp {
                g[base + c] += d * x[c];
            }
            if let Some(b) = self.b {
                g[b + r] += d;
            }
            if let Some(dx) = dx.as_deref_mut() {
                for c in 0..self.inp {
                    dx[c] += p[base + c] * d;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MpLayout {
    q: Affine,
    k: Affine,
    v: Affine,
    /// Edge projection shared by keys and values (no bias).
    e: Affine,
    s: Affine,
    ln_gain: usize,
    ln_bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct LstmLayout {
    x: Affine,
    h: Affine,
}

#[derive(Debug, Clone, Copy)]
enum Fill {
    Glorot { fan_in: usize, fan_out: usize },
    Const(f64),
}

/// Offsets of every weight block for one architecture.
#[derive(Debug, Clone)]
pub struct Layout {
    pub arch: Arch,
    enc: Affine,
    to_sub: MpLayout,
    to_var: MpLayout,
    lstm: Option<LstmLayout>,
    phi: [Affine; 4],
    len: usize,
    fills: Vec<(usize, usize, Fill)>,
}

struct Builder {
    len: usize,
    fills: Vec<(usize, usize, Fill)>,
}

impl Builder {
    fn block(&mut self, n: usize, fill: Fill) -> usize {
        let at = self.len;
        self.fills.push((at, n, fill));
        self.len += n;
        at
    }

    fn affine(&mut self, out: usize, inp: usize, bias: bool) -> Affine {
        self.affine_with(
            out,
            inp,
            bias,
            Fill::Glorot {
                fan_in: inp,
                fan_out: out,
            },
        )
    }

    fn affine_with(&mut self, out: usize, inp: usize, bias: bool, fill: Fill) -> Affine {
        let w = self.block(out * inp, fill);
        let b = bias.then(|| self.block(out, Fill::Const(0.0)));
        Affine { w, b, out, inp }
    }

    fn mp(&mut self, src: usize, dst: usize) -> MpLayout {
        MpLayout {
            q: self.affine(NODE_DIM, dst, true),
            k: self.affine(NODE_DIM, src, true),
            v: self.affine(NODE_DIM, src, true),
            e: self.affine(NODE_DIM, EDGE_DIM, false),
            s: self.affine(NODE_DIM, dst, true),
            ln_gain: self.block(NODE_DIM, Fill::Const(1.0)),
            ln_bias: self.block(NODE_DIM, Fill::Const(0.0)),
        }
    }
}

impl Layout {
    pub fn new(arch: Arch) -> Layout {
        let mut b = Builder {
            len: 0,
            fills: Vec::new(),
        };
        let enc = b.affine(EDGE_DIM, F_E, true);
        let to_sub = b.mp(F_I, F_J);
        let to_var = b.mp(F_J + NODE_DIM, F_I);
        let lstm = (arch == Arch::DogeM).then(|| {
            let x = b.affine(4 * LSTM_DIM, NODE_DIM, true);
            let h = b.affine(4 * LSTM_DIM, LSTM_DIM, false);
            // Forget-gate bias.
            b.fills
                .push((x.b.unwrap() + LSTM_DIM, LSTM_DIM, Fill::Const(1.0)));
            LstmLayout { x, h }
        });
        let phi = [
            b.affine(PHI_HIDDEN, PHI_IN, true),
            b.affine(PHI_HIDDEN, PHI_HIDDEN, true),
            b.affine(PHI_HIDDEN, PHI_HIDDEN, true),
            // The output layer starts at zero so an untrained net predicts the
            // default parameters.
            b.affine_with(3, PHI_HIDDEN, true, Fill::Const(0.0)),
        ];
        Layout {
            arch,
            enc,
            to_sub,
            to_var,
            lstm,
            phi,
            len: b.len,
            fills: b.fills,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

// ---------------------------------------------------------------- weights

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub arch: Arch,
    pub data: Vec<f64>,
}

impl Weights {
    pub fn zeros(arch: Arch) -> Weights {
        Weights {
            arch,
            data: vec![0.0; Layout::new(arch).len()],
        }
    }

    /// Uniform `±sqrt(6/(fan_in+fan_out))` per matrix, zero biases, unit
    /// layer-norm gains, forget-gate bias 1, zero predictor output layer.
    pub fn init(arch: Arch, seed: u64) -> Weights {
        let layout = Layout::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.len()];
        for &(at, n, fill) in &layout.fills {
            for x in &mut data[at..at + n] {
                *x = match fill {
                    Fill::Glorot { fan_in, fan_out } => {
                        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        rng.gen_range(-r..r)
                    }
                    Fill::Const(c) => c,
                };
            }
        }
        Weights { arch, data }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.arch)
    }

    /// Binary layout: magic, `u32` version, `u8` arch, `u64` count, then the
    /// weights as little-endian `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), NetError> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&[self.arch.code()])?;
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Weights, NetError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Weights, NetError> {
        if bytes.len() < 21 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(NetError::Corrupt("missing header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(NetError::Version {
                found: version,
                expected: WEIGHTS_VERSION,
            });
        }
        let arch = Arch::from_code(bytes[12])
            .ok_or_else(|| NetError::Corrupt("unknown architecture".into()))?;
        let count = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
        let expected = Layout::new(arch).len();
        if count != expected {
            return Err(NetError::Corrupt(format!(
                "{count} weights, {arch} needs {expected}"
            )));
        }
        let body = &bytes[21..];
        if body.len() != 8 * count {
            return Err(NetError::Corrupt("truncated or oversized body".into()));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NetError::Corrupt("non-finite weight".into()));
        }
        Ok(Weights { arch, data })
    }
}

// ---------------------------------------------------------------- graph

/// Bipartite incidence between variables and subproblems; edges are dual
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub edge_var: Vec<usize>,
    pub edge_sub: Vec<usize>,
    pub var_edges: Vec<Vec<usize>>,
    pub sub_edges: Vec<Vec<usize>>,
}

impl Topology {
    pub fn new(
        num_vars: usize,
        num_subs: usize,
        edge_var: Vec<usize>,
        edge_sub: Vec<usize>,
    ) -> Topology {
        let mut var_edges = vec![Vec::new(); num_vars];
        let mut sub_edges = vec![Vec::new(); num_subs];
        for (e, (&i, &j)) in edge_var.iter().zip(&edge_sub).enumerate() {
            var_edges[i].push(e);
            sub_edges[j].push(e);
        }
        Topology {
            edge_var,
            edge_sub,
            var_edges,
            sub_edges,
        }
    }

    pub fn of(problem: &DualProblem) -> Topology {
        let dec = &problem.dec;
        Topology::new(
            dec.num_vars(),
            dec.num_subproblems(),
            dec.edge_var.clone(),
            dec.edge_subproblem.clone(),
        )
    }

    pub fn num_vars(&self) -> usize {
        self.var_edges.len()
    }

    pub fn num_subs(&self) -> usize {
        self.sub_edges.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_var.len()
    }
}

// ---------------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub var: Vec<[f64; F_I]>,
    pub sub: Vec<[f64; F_J]>,
    pub edge: Vec<[f64; F_E]>,
}

/// Features that do not change while solving.
#[derive(Debug, Clone)]
pub struct StaticFeatures {
    var: Vec<[f64; F_I]>,
    sub: Vec<[f64; 3]>,
    coeff: Vec<f64>,
    scale: f64,
}

impl StaticFeatures {
    pub fn new(instance: &IlpInstance, problem: &DualProblem) -> StaticFeatures {
        let dec = &problem.dec;
        let norm = problem.cost_norm();
        let var = (0..dec.num_vars())
            .map(|i| {
                let c = if norm > NORM_EPS {
                    problem.objective[i] / norm
                } else {
                    0.0
                };
                [c, dec.var_subproblems[i].len() as f64]
            })
            .collect();
        let sub = (0..dec.num_subproblems())
            .map(|j| {
                let row = &instance.constraints[dec.subproblem_rows[j]];
                let eq = if row.rel == Relation::Eq { 1.0 } else { 0.0 };
                [dec.subproblem_vars[j].len() as f64, row.rhs, eq]
            })
            .collect();
        let coeff = dec.subproblem_coeffs.iter().flatten().copied().collect();
        StaticFeatures {
            var,
            sub,
            coeff,
            scale: norm.max(NORM_EPS),
        }
    }
}

/// Running statistics behind the dynamic features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureHistory {
    ema_bit: Vec<f64>,
    prev_value: Vec<f64>,
    prev_delta: Vec<f64>,
    ema_d1: Vec<f64>,
    ema_d2: Vec<f64>,
    after_update: Vec<f64>,
}

fn ema(prev: f64, x: f64) -> f64 {
    EMA_FACTOR * prev + (1.0 - EMA_FACTOR) * x
}

/// Features of the current state; advances `history` by one observation.
pub fn compute_features(
    problem: &DualProblem,
    stat: &StaticFeatures,
    state: &DualState,
    history: &mut FeatureHistory,
) -> Features {
    let (values, bits) = subproblem_solutions(problem, state);
    let first = history.prev_value.is_empty();
    let m = values.len();
    let delta: Vec<f64> = if first {
        vec![0.0; m]
    } else {
        values
            .iter()
            .zip(&history.prev_value)
            .map(|(a, b)| a - b)
            .collect()
    };
    let delta2: Vec<f64> = if first {
        vec![0.0; m]
    } else {
        delta
            .iter()
            .zip(&history.prev_delta)
            .map(|(a, b)| a - b)
            .collect()
    };
    if first {
        history.ema_bit = bits.iter().map(|&b| f64::from(b)).collect();
        history.ema_d1 = delta.clone();
        history.ema_d2 = delta2.clone();
    } else {
        for (e, &b) in history.ema_bit.iter_mut().zip(&bits) {
            *e = ema(*e, f64::from(b));
        }
        for (e, &d) in history.ema_d1.iter_mut().zip(&delta) {
            *e = ema(*e, d);
        }
        for (e, &d) in history.ema_d2.iter_mut().zip(&delta2) {
            *e = ema(*e, d);
        }
    }
    let since_update: Vec<f64> = if history.after_update.is_empty() {
        vec![0.0; m]
    } else {
        values
            .iter()
            .zip(&history.after_update)
            .map(|(a, b)| a - b)
            .collect()
    };

    let s = stat.scale;
    let sub = (0..m)
        .map(|j| {
            let [deg, rhs, eq] = stat.sub[j];
            [
                deg,
                rhs,
                eq,
                values[j] / s,
                history.ema_d1[j] / s,
                history.ema_d2[j] / s,
                since_update[j] / s,
            ]
        })
        .collect();
    let denom = state
        .hi
        .iter()
        .zip(&state.lo)
        .zip(&state.deferred)
        .map(|((h, l), d)| (h - l + d).abs())
        .fold(0.0, f64::max)
        + NORM_EPS;
    let edge = (0..problem.num_edges())
        .map(|e| {
            [
                f64::from(bits[e]),
                history.ema_bit[e],
                stat.coeff[e],
                (state.hi[e] - state.lo[e]) / denom,
                state.deferred[e] / denom,
            ]
        })
        .collect();

    history.prev_value = values;
    history.prev_delta = delta;
    Features {
        var: stat.var.clone(),
        sub,
        edge,
    }
}

/// Records `E^j` right after a non-parametric update.
pub fn note_update(problem: &DualProblem, state: &DualState, history: &mut FeatureHistory) {
    history.after_update = subproblem_solutions(problem, state).0;
}

// ---------------------------------------------------------------- forward

/// Recurrent per-variable state, row-major `num_vars × LSTM_DIM`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(num_vars: usize) -> LstmState {
        LstmState {
            h: vec![0.0; num_vars * LSTM_DIM],
            c: vec![0.0; num_vars * LSTM_DIM],
        }
    }
}

/// Transformed predictions, one entry per dual variable.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// Untransformed predictor outputs `(α̂, ω̂, θ/scale)`.
    pub raw: Vec<[f64; 3]>,
    pub state: Option<LstmState>,
}

#[derive(Debug, Clone)]
struct MpCache {
    src: Vec<f64>,
    src_dim: usize,
    dst: Vec<f64>,
    dst_dim: usize,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LstmCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations `i, f, g, o` per variable.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Activations kept by [`gnn_forward`] for [`gnn_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    f_edge: Vec<f64>,
    h_edge: Vec<f64>,
    to_sub: MpCache,
    to_var: MpCache,
    lstm: Option<LstmCache>,
    /// Predictor input and the three hidden activations per edge.
    phi: Vec<[Vec<f64>; 4]>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn flatten<const N: usize>(rows: &[[f64; N]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn mp_forward(
    p: &[f64],
    l: &MpLayout,
    src: Vec<f64>,
    src_dim: usize,
    dst: Vec<f64>,
    dst_dim: usize,
    h_edge: &[f64],
    incident: &[Vec<usize>],
    src_of: &[usize],
) -> MpCache {
    let d = NODE_DIM;
    let scale = 1.0 / (d as f64).sqrt();
    let num_edges = src_of.len();
    let num_src = src.len() / src_dim;
    let kp: Vec<Vec<f64>> = (0..num_src)
        .map(|s| l.k.forward(p, &src[s * src_dim..(s + 1) * src_dim]))
        .collect();
    let vp: Vec<Vec<f64>> = (0..num_src)
        .map(|s| l.v.forward(p, &src[s * src_dim..(s + 1) * src_dim]))
        .collect();
    let mut k = vec![0.0; num_edges * d];
    let mut v = vec![0.0; num_edges * d];
    for e in 0..num_edges {
        let ep = l.e.forward(p, &h_edge[e * EDGE_DIM..(e + 1) * EDGE_DIM]);
        let s = src_of[e];
        for c in 0..d {
            k[e * d + c] = kp[s][c] + ep[c];
            v[e * d + c] = vp[s][c] + ep[c];
        }
    }
    let num_dst = incident.len();
    let mut q = vec![0.0; num_dst * d];
    let mut attn = vec![0.0; num_edges];
    let mut xhat = vec![0.0; num_dst * d];
    let mut inv_std = vec![0.0; num_dst];
    let mut out = vec![0.0; num_dst * d];
    let gain = &p[l.ln_gain..l.ln_gain + d];
    let bias = &p[l.ln_bias..l.ln_bias + d];
    for (t, edges) in incident.iter().enumerate() {
        let x = &dst[t * dst_dim..(t + 1) * dst_dim];
        let qt = l.q.forward(p, x);
        let mut pre = l.s.forward(p, x);
        if !edges.is_empty() {
            let scores: Vec<f64> = edges
                .iter()
                .map(|&e| {
                    scale
                        * qt.iter()
                            .zip(&k[e * d..(e + 1) * d])
                            .fold(0.0, |a, (x, y)| a + x * y)
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (&e, w) in edges.iter().zip(&ex) {
                let a = w / z;
                attn[e] = a;
                for c in 0..d {
                    pre[c] += a * v[e * d + c];
                }
            }
        }
        let mean = pre.iter().sum::<f64>() / d as f64;
        let var = pre.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for c in 0..d {
            let xh = (pre[c] - mean) * is;
            xhat[t * d + c] = xh;
            out[t * d + c] = relu(gain[c] * xh + bias[c]);
        }
        q[t * d..(t + 1) * d].copy_from_slice(&qt);
    }
    MpCache {
        src,
        src_dim,
        dst,
        dst_dim,
        q,
        k,
        v,
        attn,
        xhat,
        inv_std,
        out,
    }
}

/// Runs the network. `state` is the incoming recurrent state (`DogeM`
/// only; zeros when absent).
pub fn gnn_forward(
    weights: &Weights,
    topo: &Topology,
    features: &Features,
    state: Option<&LstmState>,
) -> Result<(NetOutput, ForwardCache), NetError> {
    let (nv, ns, ne) = (topo.num_vars(), topo.num_subs(), topo.num_edges());
    if features.var.len() != nv || features.sub.len() != ns || features.edge.len() != ne {
        return Err(NetError::Shape("features do not match the topology".into()));
    }
    let layout = weights.layout();
    if weights.data.len() != layout.len() {
        return Err(NetError::Shape(format!(
            "{} weights, {} expected",
            weights.data.len(),
            layout.len()
        )));
    }
    let p = &weights.data;
    let f_edge = flatten(&features.edge);
    let mut h_edge = Vec::with_capacity(ne * EDGE_DIM);
    for e in 0..ne {
        h_edge.extend(
            layout
                .enc
                .forward(p, &features.edge[e])
                .into_iter()
                .map(relu),
        );
    }

    let to_sub = mp_forward(
        p,
        &layout.to_sub,
        flatten(&features.var),
        F_I,
        flatten(&features.sub),
        F_J,
        &h_edge,
        &topo.sub_edges,
        &topo.edge_var,
    );
    let mut src2 = Vec::with_capacity(ns * (F_J + NODE_DIM));
    for j in 0..ns {
        src2.extend_from_slice(&features.sub[j]);
        src2.extend_from_slice(&to_sub.out[j * NODE_DIM..(j + 1) * NODE_DIM]);
    }
    let to_var = mp_forward(
        p,
        &layout.to_var,
        src2,
        F_J + NODE_DIM,
        flatten(&features.var),
        F_I,
        &h_edge,
        &topo.var_edges,
        &topo.edge_sub,
    );
    let h_var = &to_var.out;
    let h_sub = &to_sub.out;

    let (z_var, lstm_cache, state_out) = match layout.lstm {
        None => (h_var.clone(), None, None),
        Some(ll) => {
            let zeros;
            let st = match state {
                Some(s) => {
                    if s.h.len() != nv * LSTM_DIM || s.c.len() != nv * LSTM_DIM {
                        return Err(NetError::Shape(
                            "recurrent state does not match the topology".into(),
                        ));
                    }
                    s
                }
                None => {
                    zeros = LstmState::zeros(nv);
                    &zeros
                }
            };
            let h4 = 4 * LSTM_DIM;
            let mut gates = vec![0.0; nv * h4];
            let mut tanh_c = vec![0.0; nv * LSTM_DIM];
            let mut out = LstmState::zeros(nv);
            for i in 0..nv {
                let r = i * LSTM_DIM..(i + 1) * LSTM_DIM;
                let gx = ll.x.forward(p, &h_var[i * NODE_DIM..(i + 1) * NODE_DIM]);
                let gh = ll.h.forward(p, &st.h[r.clone()]);
                for c in 0..LSTM_DIM {
                    let ig = sigmoid(gx[c] + gh[c]);
                    let fg = sigmoid(gx[LSTM_DIM + c] + gh[LSTM_DIM + c]);
                    let gg = (gx[2 * LSTM_DIM + c] + gh[2 * LSTM_DIM + c]).tanh();
                    let og = sigmoid(gx[3 * LSTM_DIM + c] + gh[3 * LSTM_DIM + c]);
                    let cn = fg * st.c[i * LSTM_DIM + c] + ig * gg;
                    let tc = cn.tanh();
                    let g = &mut gates[i * h4..(i + 1) * h4];
                    g[c] = ig;
                    g[LSTM_DIM + c] = fg;
                    g[2 * LSTM_DIM + c] = gg;
                    g[3 * LSTM_DIM + c] = og;
                    tanh_c[i * LSTM_DIM + c] = tc;
                    out.c[i * LSTM_DIM + c] = cn;
                    out.h[i * LSTM_DIM + c] = og * tc;
                }
            }
            let cache = LstmCache {
                h_prev: st.h.clone(),
                c_prev: st.c.clone(),
                gates,
                tanh_c,
            };
            (out.h.clone(), Some(cache), Some(out))
        }
    };

    let mut raw = Vec::with_capacity(ne);
    let mut phi = Vec::with_capacity(ne);
    for e in 0..ne {
        let (i, j) = (topo.edge_var[e], topo.edge_sub[e]);
        let mut x = Vec::with_capacity(PHI_IN);
        x.extend_from_slice(&features.var[i]);
        x.extend_from_slice(&h_var[i * NODE_DIM..(i + 1) * NODE_DIM]);
        x.extend_from_slice(&z_var[i * LSTM_DIM..(i + 1) * LSTM_DIM]);
        x.extend_from_slice(&features.sub[j]);
        x.extend_from_slice(&h_sub[j * NODE_DIM..(j + 1) * NODE_DIM]);
        x.extend_from_slice(&features.edge[e]);
        x.extend_from_slice(&h_edge[e * EDGE_DIM..(e + 1) * EDGE_DIM]);
        let a1: Vec<f64> = layout.phi[0].forward(p, &x).into_iter().map(relu).collect();
        let a2: Vec<f64> = layout.phi[1]
            .forward(p, &a1)
            .into_iter()
            .map(relu)
            .collect();
        let a3: Vec<f64> = layout.phi[2]
            .forward(p, &a2)
            .into_iter()
            .map(relu)
            .collect();
        let o = layout.phi[3].forward(p, &a3);
        raw.push([o[0], o[1], o[2]]);
        phi.push([x, a1, a2, a3]);
    }

    let out = transform(topo, raw, state_out);
    Ok((
        out,
        ForwardCache {
            f_edge,
            h_edge,
            to_sub,
            to_var,
            lstm: lstm_cache,
            phi,
        },
    ))
}

/// Softmax over each `J_i`, clamped sigmoid, scaled identity.
pub fn transform(topo: &Topology, raw: Vec<[f64; 3]>, state: Option<LstmState>) -> NetOutput {
    let ne = raw.len();
    let mut alpha = vec![0.0; ne];
    for edges in &topo.var_edges {
        if edges.is_empty() {
            continue;
        }
        let mx = edges
            .iter()
            .map(|&e| raw[e][0])
            .fold(f64::NEG_INFINITY, f64::max);
        let z = edges
            .iter()
            .fold(0.0, |acc, &e| acc + (raw[e][0] - mx).exp());
        for &e in edges {
            alpha[e] = (raw[e][0] - mx).exp() / z;
        }
    }
    let omega = raw.iter().map(|r| clamp_omega(sigmoid(r[1]))).collect();
    let theta = raw.iter().map(|r| THETA_SCALE * r[2]).collect();
    NetOutput {
        alpha,
        omega,
        theta,
        raw,
        state,
    }
}

/// Which outputs of the predictor are used; the others stay at defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predict {
    #[default]
    All,
    /// `α` and `ω` only; `θ = 0`.
    Param,
    /// `θ` only; `α` and `ω` at defaults.
    NonParam,
}

impl Predict {
    fn keeps(self) -> [bool; 3] {
        match self {
            Predict::All => [true; 3],
            Predict::Param => [true, true, false],
            Predict::NonParam => [false, false, true],
        }
    }

    /// Zeroes the raw components this mode ignores.
    pub fn mask(self, raw: &mut [[f64; 3]]) {
        let keep = self.keeps();
        for r in raw {
            for k in 0..3 {
                if !keep[k] {
                    r[k] = 0.0;
                }
            }
        }
    }
}

impl fmt::Display for Predict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predict::All => "all",
            Predict::Param => "param",
            Predict::NonParam => "non-param",
        })
    }
}

impl FromStr for Predict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Predict::All),
            "param" => Ok(Predict::Param),
            "non-param" => Ok(Predict::NonParam),
            _ => Err(format!(
                "unknown prediction mode `{s}` (expected all, param or non-param)"
            )),
        }
    }
}

/// Pulls gradients w.r.t. `(α, ω, θ)` back to the raw predictor outputs.
pub fn transform_backward(
    topo: &Topology,
    out: &NetOutput,
    d_alpha: &[f64],
    d_omega: &[f64],
    d_theta: &[f64],
) -> Vec<[f64; 3]> {
    let ne = out.raw.len();
    let mut d_raw = vec![[0.0; 3]; ne];
    for edges in &topo.var_edges {
        let dot = edges
            .iter()
            .fold(0.0, |acc, &e| acc + out.alpha[e] * d_alpha[e]);
        for &e in edges {
            d_raw[e][0] = out.alpha[e] * (d_alpha[e] - dot);
        }
    }
    for e in 0..ne {
        let s = sigmoid(out.raw[e][1]);
        if s > OMEGA_MIN && s < OMEGA_MAX {
            d_raw[e][1] = d_omega[e] * s * (1.0 - s);
        }
        d_raw[e][2] = THETA_SCALE * d_theta[e];
    }
    d_raw
}

// ---------------------------------------------------------------- backward

/// Returns `(d_src, d_h_edge)` contributions and accumulates weight grads.
fn mp_backward(
    p: &[f64],
    l: &MpLayout,
    c: &MpCache,
    d_out: &[f64],
    incident: &[Vec<usize>],
    src_of: &[usize],
    g: &mut [f64],
    d_src: Option<&mut [f64]>,
    d_h_edge: &mut [f64],
    h_edge: &[f64],
) {
    let d = NODE_DIM;
    let scale = 1.0 / (d as f64).sqrt();
    let num_edges = src_of.len();
    let mut d_k = vec![0.0; num_edges * d];
    let mut d_v = vec![0.0; num_edges * d];
    for (t, edges) in incident.iter().enumerate() {
        // ReLU and layer norm.
        let mut d_xhat = [0.0; NODE_DIM];
        for k in 0..d {
            let idx = t * d + k;
            if c.out[idx] <= 0.0 {
                continue;
            }
            let dy = d_out[idx];
            g[l.ln_gain + k] += dy * c.xhat[idx];
            g[l.ln_bias + k] += dy;
            d_xhat[k] = dy * p[l.ln_gain + k];
        }
        let xh = &c.xhat[t * d..(t + 1) * d];
        let s1: f64 = d_xhat.iter().sum();
        let s2: f64 = d_xhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = c.inv_std[t];
        let d_pre: Vec<f64> = (0..d)
            .map(|k| is * (d_xhat[k] - s1 / d as f64 - xh[k] * s2 / d as f64))
            .collect();

        let x = &c.dst[t * c.dst_dim..(t + 1) * c.dst_dim];
        l.s.backward(p, x, &d_pre, g, None);
        if edges.is_empty() {
            continue;
        }
        let q = &c.q[t * d..(t + 1) * d];
        let d_a: Vec<f64> = edges
            .iter()
            .map(|&e| {
                c.v[e * d..(e + 1) * d]
                    .iter()
                    .zip(&d_pre)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let mean_da: f64 = edges.iter().zip(&d_a).map(|(&e, da)| c.attn[e] * da).sum();
        let mut d_q = vec![0.0; d];
        for (&e, da) in edges.iter().zip(&d_a) {
            let a = c.attn[e];
            let ds = a * (da - mean_da) * scale;
            for k in 0..d {
                d_v[e * d + k] += a * d_pre[k];
                d_q[k] += ds * c.k[e * d + k];
                d_k[e * d + k] += ds * q[k];
            }
        }
        l.q.backward(p, x, &d_q, g, None);
    }
    let mut d_src = d_src;
    for e in 0..num_edges {
        let s = src_of[e];
        let x = &c.src[s * c.src_dim..(s + 1) * c.src_dim];
        let dk = &d_k[e * d..(e + 1) * d];
        let dv = &d_v[e * d..(e + 1) * d];
        let dx = d_src
            .as_deref_mut()
            .map(|v| &mut v[s * c.src_dim..(s + 1) * c.src_dim]);
        match dx {
            Some(dx) => {
                l.k.backward(p, x, dk, g, Some(&mut *dx));
                l.v.backward(p, x, dv, g, Some(dx));
            }
            None => {
                l.k.backward(p, x, dk, g, None);
                l.v.backward(p, x, dv, g, None);
            }
        }
        let de: Vec<f64> = dk.iter().zip(dv).map(|(a, b)| a + b).collect();
        l.e.backward(
            p,
            &h_edge[e * EDGE_DIM..(e + 1) * EDGE_DIM],
            &de,
            g,
            Some(&mut d_h_edge[e * EDGE_DIM..(e + 1) * EDGE_DIM]),
        );
    }
}

/// Gradients of a loss w.r.t. every weight, given its gradients w.r.t. the
/// raw predictor outputs and (for `DogeM`) the outgoing recurrent state.
/// Also returns the gradient w.r.t. the incoming recurrent state.
pub fn gnn_backward(
    weights: &Weights,
    topo: &Topology,
    cache: &ForwardCache,
    d_raw: &[[f64; 3]],
    d_state: Option<&LstmState>,
) -> (Vec<f64>, Option<LstmState>) {
    let layout = weights.layout();
    let p = &weights.data;
    let mut g = vec![0.0; layout.len()];
    let (nv, ns, ne) = (topo.num_vars(), topo.num_subs(), topo.num_edges());

    let mut d_h_var = vec![0.0; nv * NODE_DIM];
    let mut d_z_var = vec![0.0; nv * LSTM_DIM];
    let mut d_h_sub = vec![0.0; ns * NODE_DIM];
    let mut d_h_edge = vec![0.0; ne * EDGE_DIM];
    for e in 0..ne {
        let [x, a1, a2, a3] = &cache.phi[e];
        let mut d3 = vec![0.0; PHI_HIDDEN];
        layout.phi[3].backward(p, a3, &d_raw[e], &mut g, Some(&mut d3));
        d3.iter_mut().zip(a3).for_each(|(d, a)| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        let mut d2 = vec![0.0; PHI_HIDDEN];
        layout.phi[2].backward(p, a2, &d3, &mut g, Some(&mut d2));
        d2.iter_mut().zip(a2).for_each(|(d, a)| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        let mut d1 = vec![0.0; PHI_HIDDEN];
        layout.phi[1].backward(p, a1, &d2, &mut g, Some(&mut d1));
        d1.iter_mut().zip(a1).for_each(|(d, a)| {
            if *a <= 0.0 {
                *d = 0.0
            }
        });
        let mut dx = vec![0.0; PHI_IN];
        layout.phi[0].backward(p, x, &d1, &mut g, Some(&mut dx));

        let (i, j) = (topo.edge_var[e], topo.edge_sub[e]);
        let mut at = F_I;
        for k in 0..NODE_DIM {
            d_h_var[i * NODE_DIM + k] += dx[at + k];
        }
        at += NODE_DIM;
        for k in 0..LSTM_DIM {
            d_z_var[i * LSTM_DIM + k] += dx[at + k];
        }
        at += LSTM_DIM + F_J;
        for k in 0..NODE_DIM {
            d_h_sub[j * NODE_DIM + k] += dx[at + k];
        }
        at += NODE_DIM + F_E;
        for k in 0..EDGE_DIM {
            d_h_edge[e * EDGE_DIM + k] += dx[at + k];
        }
    }

    let d_state_in = match (layout.lstm, &cache.lstm) {
        (Some(ll), Some(lc)) => {
            let h4 = 4 * LSTM_DIM;
            let mut d_in = LstmState::zeros(nv);
            for i in 0..nv {
                let gt = &lc.gates[i * h4..(i + 1) * h4];
                let mut d_pre = vec![0.0; h4];
                for c in 0..LSTM_DIM {
                    let idx = i * LSTM_DIM + c;
                    let (ig, fg, gg, og) = (
                        gt[c],
                        gt[LSTM_DIM + c],
                        gt[2 * LSTM_DIM + c],
                        gt[3 * LSTM_DIM + c],
                    );
                    let tc = lc.tanh_c[idx];
                    let dh = d_z_var[idx] + d_state.map_or(0.0, |s| s.h[idx]);
                    let dc = d_state.map_or(0.0, |s| s.c[idx]) + dh * og * (1.0 - tc * tc);
                    d_pre[c] = dc * gg * ig * (1.0 - ig);
                    d_pre[LSTM_DIM + c] = dc * lc.c_prev[idx] * fg * (1.0 - fg);
                    d_pre[2 * LSTM_DIM + c] = dc * ig * (1.0 - gg * gg);
                    d_pre[3 * LSTM_DIM + c] = dh * tc * og * (1.0 - og);
                    d_in.c[idx] = dc * fg;
                }
                let r = i * NODE_DIM..(i + 1) * NODE_DIM;
                let hv = &cache.to_var.out[r.clone()];
                ll.x.backward(p, hv, &d_pre, &mut g, Some(&mut d_h_var[r]));
                let rh = i * LSTM_DIM..(i + 1) * LSTM_DIM;
                ll.h.backward(
                    p,
                    &lc.h_prev[rh.clone()],
                    &d_pre,
                    &mut g,
                    Some(&mut d_in.h[rh]),
                );
            }
            Some(d_in)
        }
        _ => {
            d_h_var.iter_mut().zip(&d_z_var).for_each(|(a, b)| *a += b);
            None
        }
    };

    let mut d_src2 = vec![0.0; ns * (F_J + NODE_DIM)];
    mp_backward(
        p,
        &layout.to_var,
        &cache.to_var,
        &d_h_var,
        &topo.var_edges,
        &topo.edge_sub,
        &mut g,
        Some(&mut d_src2),
        &mut d_h_edge,
        &cache.h_edge,
    );
    for j in 0..ns {
        for k in 0..NODE_DIM {
            d_h_sub[j * NODE_DIM + k] += d_src2[j * (F_J + NODE_DIM) + F_J + k];
        }
    }
    mp_backward(
        p,
        &layout.to_sub,
        &cache.to_sub,
        &d_h_sub,
        &topo.sub_edges,
        &topo.edge_var,
        &mut g,
        None,
        &mut d_h_edge,
        &cache.h_edge,
    );
    for e in 0..ne {
        let mut dy = d_h_edge[e * EDGE_DIM..(e + 1) * EDGE_DIM].to_vec();
        for (k, d) in dy.iter_mut().enumerate() {
            if cache.h_edge[e * EDGE_DIM + k] <= 0.0 {
                *d = 0.0;
            }
        }
        layout
            .enc
            .backward(p, &cache.f_edge[e * F_E..(e + 1) * F_E], &dy, &mut g, None);
    }
    (g, d_state_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{run, SolverParams};
    use crate::grad::{finite_difference_check, Probes};
    use crate::model::fixtures::tiny;

    fn random_features(topo: &Topology, rng: &mut ChaCha8Rng) -> Features {
        let mut row = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        Features {
            var: (0..topo.num_vars())
                .map(|_| row(F_I).try_into().unwrap())
                .collect(),
            sub: (0..topo.num_subs())
                .map(|_| row(F_J).try_into().unwrap())
                .collect(),
            edge: (0..topo.num_edges())
                .map(|_| row(F_E).try_into().unwrap())
                .collect(),
        }
    }

    /// Perturbs every weight so no block sits at zero or at its init pattern.
    fn random_weights(arch: Arch, seed: u64) -> Weights {
        let mut w = Weights::init(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        for x in &mut w.data {
            *x += rng.gen_range(-0.3..0.3);
        }
        w
    }

    fn small_topology() -> Topology {
        // 4 variables, 3 subproblems, one variable with a single subproblem.
        Topology::new(4, 3, vec![0, 1, 1, 2, 3, 0, 2], vec![0, 0, 1, 1, 1, 2, 2])
    }

    fn random_state(nv: usize, rng: &mut ChaCha8Rng) -> LstmState {
        LstmState {
            h: (0..nv * LSTM_DIM)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
            c: (0..nv * LSTM_DIM)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect(),
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Layout::new(Arch::DogeM).len(), 8179);
        assert_eq!(Layout::new(Arch::Doge).len(), 6067);
    }

    #[test]
    fn zero_weights_give_defaults() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&topo, &mut rng);
        for arch in [Arch::Doge, Arch::DogeM] {
            let (out, _) = gnn_forward(&Weights::zeros(arch), &topo, &f, None).unwrap();
            assert_eq!(out.omega, vec![0.5; 7]);
            assert_eq!(out.theta, vec![0.0; 7]);
            assert_eq!(out.alpha, vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5]);
        }
    }

    #[test]
    fn untrained_net_predicts_defaults() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&topo, &mut rng);
        let (out, _) = gnn_forward(&Weights::init(Arch::DogeM, 3), &topo, &f, None).unwrap();
        assert_eq!(out.omega, vec![0.5; 7]);
        assert_eq!(out.theta, vec![0.0; 7]);
    }

    #[test]
    fn single_membership_alpha_is_one() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&topo, &mut rng);
        let (out, _) = gnn_forward(&random_weights(Arch::Doge, 4), &topo, &f, None).unwrap();
        assert_eq!(out.alpha[4], 1.0);
        for edges in &topo.var_edges {
            let s: f64 = edges.iter().map(|&e| out.alpha[e]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(out.omega.iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Weights::init(Arch::DogeM, 7), Weights::init(Arch::DogeM, 7));
        assert_ne!(Weights::init(Arch::DogeM, 7), Weights::init(Arch::DogeM, 8));
        let w = Weights::init(Arch::DogeM, 7);
        let l = w.layout();
        let fb = l.lstm.unwrap().x.b.unwrap() + LSTM_DIM;
        assert!(w.data[fb..fb + LSTM_DIM].iter().all(|&b| b == 1.0));
    }

    #[test]
    fn save_load_roundtrip() {
        let w = random_weights(Arch::DogeM, 9);
        let bytes = w.to_bytes();
        let back = Weights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Weights::from_bytes(&bad),
            Err(NetError::Version { found: 9, .. })
        ));
        assert!(matches!(
            Weights::from_bytes(&bytes[..100]),
            Err(NetError::Corrupt(_))
        ));
        let mut wrong_arch = bytes;
        wrong_arch[12] = 0;
        assert!(matches!(
            Weights::from_bytes(&wrong_arch),
            Err(NetError::Corrupt(_))
        ));
    }

    #[test]
    fn attention_single_and_symmetric() {
        // One subproblem over one variable: attention weight is 1.
        let topo = Topology::new(1, 1, vec![0], vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&topo, &mut rng);
        let (_, c) = gnn_forward(&random_weights(Arch::Doge, 5), &topo, &f, None).unwrap();
        assert_eq!(c.to_sub.attn, vec![1.0]);
        // Two identical variables feeding one subproblem: equal keys.
        let topo = Topology::new(2, 1, vec![0, 1], vec![0, 0]);
        let mut f = random_features(&topo, &mut rng);
        f.var[1] = f.var[0];
        f.edge[1] = f.edge[0];
        let (_, c) = gnn_forward(&random_weights(Arch::Doge, 6), &topo, &f, None).unwrap();
        assert_eq!(c.to_sub.attn, vec![0.5, 0.5]);
    }

    #[test]
    fn isolated_destination_uses_skip_only() {
        let topo = Topology::new(2, 1, vec![0], vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_features(&topo, &mut rng);
        let w = random_weights(Arch::Doge, 11);
        let (_, c) = gnn_forward(&w, &topo, &f, None).unwrap();
        let l = w.layout();
        let pre = l.to_var.s.forward(&w.data, &f.var[1]);
        let reference = dense_layer_norm_relu(&pre, &w.data, &l.to_var);
        for k in 0..NODE_DIM {
            assert!((c.to_var.out[NODE_DIM + k] - reference[k]).abs() < 1e-14);
        }
    }

    // ---- dense reference forward: every node pair, masked.

    fn matvec(p: &[f64], a: &Affine, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; a.out];
        for r in 0..a.out {
            let mut s = 0.0;
            for c in 0..a.inp {
                s += p[a.w + r * a.inp + c] * x[c];
            }
            if let Some(b) = a.b {
                s += p[b + r];
            }
            y[r] = s;
        }
        y
    }

    fn dense_layer_norm_relu(x: &[f64], p: &[f64], l: &MpLayout) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(k, v)| {
                (p[l.ln_gain + k] * (v - mu) / (var + 1e-5).sqrt() + p[l.ln_bias + k]).max(0.0)
            })
            .collect()
    }

    fn dense_mp(
        p: &[f64],
        l: &MpLayout,
        src: &[Vec<f64>],
        dst: &[Vec<f64>],
        edge_of: &dyn Fn(usize, usize) -> Option<usize>,
        h_edge: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        dst.iter()
            .enumerate()
            .map(|(t, fd)| {
                let q = matvec(p, &l.q, fd);
                let mut scores = Vec::new();
                let mut vals = Vec::new();
                for (s, fs) in src.iter().enumerate() {
                    if let Some(e) = edge_of(s, t) {
                        let ee = matvec(p, &l.e, &h_edge[e]);
                        let k: Vec<f64> = matvec(p, &l.k, fs)
                            .iter()
                            .zip(&ee)
                            .map(|(a, b)| a + b)
                            .collect();
                        let v: Vec<f64> = matvec(p, &l.v, fs)
                            .iter()
                            .zip(&ee)
                            .map(|(a, b)| a + b)
                            .collect();
                        scores.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 4.0);
                        vals.push(v);
                    }
                }
                let mut out = matvec(p, &l.s, fd);
                if !scores.is_empty() {
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (s, v) in scores.iter().zip(&vals) {
                        let a = (s - m).exp() / z;
                        for k in 0..NODE_DIM {
                            out[k] += a * v[k];
                        }
                    }
                }
                dense_layer_norm_relu(&out, p, l)
            })
            .collect()
    }

    fn dense_forward(
        w: &Weights,
        topo: &Topology,
        f: &Features,
        st: Option<&LstmState>,
    ) -> Vec<[f64; 3]> {
        let p = &w.data;
        let l = w.layout();
        let h_edge: Vec<Vec<f64>> = f
            .edge
            .iter()
            .map(|x| matvec(p, &l.enc, x).into_iter().map(relu).collect())
            .collect();
        let find = |i: usize, j: usize| {
            (0..topo.num_edges()).find(|&e| topo.edge_var[e] == i && topo.edge_sub[e] == j)
        };
        let fv: Vec<Vec<f64>> = f.var.iter().map(|x| x.to_vec()).collect();
        let fs: Vec<Vec<f64>> = f.sub.iter().map(|x| x.to_vec()).collect();
        let h_sub = dense_mp(p, &l.to_sub, &fv, &fs, &|s, t| find(s, t), &h_edge);
        let src2: Vec<Vec<f64>> = fs
            .iter()
            .zip(&h_sub)
            .map(|(a, b)| [a.as_slice(), b].concat())
            .collect();
        let h_var = dense_mp(p, &l.to_var, &src2, &fv, &|s, t| find(t, s), &h_edge);
        let z_var: Vec<Vec<f64>> = match l.lstm {
            None => h_var.clone(),
            Some(ll) => (0..topo.num_vars())
                .map(|i| {
                    let hp = st.map_or(vec![0.0; LSTM_DIM], |s| {
                        s.h[i * LSTM_DIM..(i + 1) * LSTM_DIM].to_vec()
                    });
                    let cp = st.map_or(vec![0.0; LSTM_DIM], |s| {
                        s.c[i * LSTM_DIM..(i + 1) * LSTM_DIM].to_vec()
                    });
                    let a: Vec<f64> = matvec(p, &ll.x, &h_var[i])
                        .iter()
                        .zip(matvec(p, &ll.h, &hp))
                        .map(|(x, y)| x + y)
                        .collect();
                    (0..LSTM_DIM)
                        .map(|c| {
                            let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
                            let cn =
                                sg(a[LSTM_DIM + c]) * cp[c] + sg(a[c]) * a[2 * LSTM_DIM + c].tanh();
                            sg(a[3 * LSTM_DIM + c]) * cn.tanh()
                        })
                        .collect()
                })
                .collect(),
        };
        (0..topo.num_edges())
            .map(|e| {
                let (i, j) = (topo.edge_var[e], topo.edge_sub[e]);
                let mut x = fv[i].clone();
                x.extend(&h_var[i]);
                x.extend(&z_var[i]);
                x.extend(&fs[j]);
                x.extend(&h_sub[j]);
                x.extend(&f.edge[e]);
                x.extend(&h_edge[e]);
                for layer in &l.phi[..3] {
                    x = matvec(p, layer, &x).into_iter().map(relu).collect();
                }
                let o = matvec(p, &l.phi[3], &x);
                [o[0], o[1], o[2]]
            })
            .collect()
    }

    #[test]
    fn forward_matches_dense_reference() {
        let topo = small_topology();
        for (arch, seed) in [(Arch::Doge, 21), (Arch::DogeM, 22)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&topo, &mut rng);
            let st = random_state(4, &mut rng);
            let w = random_weights(arch, seed);
            let (out, _) = gnn_forward(&w, &topo, &f, Some(&st)).unwrap();
            let reference = dense_forward(&w, &topo, &f, Some(&st));
            for (a, b) in out.raw.iter().zip(&reference) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn forward_on_tiny_matches_dense_reference() {
        let inst = tiny();
        let problem = DualProblem::new(&inst).unwrap();
        let stat = StaticFeatures::new(&inst, &problem);
        let mut hist = FeatureHistory::default();
        let f = compute_features(&problem, &stat, &DualState::init(&problem), &mut hist);
        let topo = Topology::of(&problem);
        let w = random_weights(Arch::DogeM, 30);
        let (out, _) = gnn_forward(&w, &topo, &f, None).unwrap();
        let reference = dense_forward(&w, &topo, &f, None);
        for (a, b) in out.raw.iter().zip(&reference) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_features_at_init() {
        let inst = tiny();
        let problem = DualProblem::new(&inst).unwrap();
        let stat = StaticFeatures::new(&inst, &problem);
        let mut hist = FeatureHistory::default();
        let state = DualState::init(&problem);
        let f = compute_features(&problem, &stat, &state, &mut hist);
        // Subproblem 1 over (x1, x2) at costs (-1, -0.5): minimizer (1, 0).
        assert_eq!(f.edge[0][0], 1.0);
        assert_eq!(f.edge[1][0], 0.0);
        assert_eq!(f.edge[0][1], f.edge[0][0]);
        for row in &f.sub {
            assert_eq!(row[4], 0.0);
            assert_eq!(row[5], 0.0);
            assert_eq!(row[6], 0.0);
        }
        assert_eq!(f.var[0], [-1.0, 1.0]);
        assert_eq!(f.var[1], [-1.0, 2.0]);
        // Second observation after some sweeps updates the moving averages.
        let mut s2 = state.clone();
        run(&problem, &mut s2, &SolverParams::defaults(&problem), 1).unwrap();
        let f2 = compute_features(&problem, &stat, &s2, &mut hist);
        let (v1, v2) = (f.sub[0][3], f2.sub[0][3]);
        assert!((f2.sub[0][4] - 0.1 * (v2 - v1)).abs() < 1e-15);
    }

    #[test]
    fn zero_costs_give_zero_cost_feature() {
        let mut inst = tiny();
        inst.objective = vec![0.0; 3];
        let problem = DualProblem::new(&inst).unwrap();
        let stat = StaticFeatures::new(&inst, &problem);
        let f = compute_features(
            &problem,
            &stat,
            &DualState::init(&problem),
            &mut FeatureHistory::default(),
        );
        assert!(f.var.iter().all(|r| r[0] == 0.0));
        assert!(f.edge.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn permutation_equivariance() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let f = random_features(&topo, &mut rng);
        let st = random_state(4, &mut rng);
        let w = random_weights(Arch::DogeM, 40);
        let (out, _) = gnn_forward(&w, &topo, &f, Some(&st)).unwrap();
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let perm = |n: usize, rng: &mut ChaCha8Rng| {
                let mut v: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    v.swap(i, rng.gen_range(0..=i));
                }
                v
            };
            let (pv, ps, pe) = (perm(4, &mut rng), perm(3, &mut rng), perm(7, &mut rng));
            // pe[new] = old edge index.
            let edge_var = pe.iter().map(|&e| pv[topo.edge_var[e]]).collect();
            let edge_sub = pe.iter().map(|&e| ps[topo.edge_sub[e]]).collect();
            let t2 = Topology::new(4, 3, edge_var, edge_sub);
            let mut f2 = f.clone();
            let mut st2 = st.clone();
            for i in 0..4 {
                f2.var[pv[i]] = f.var[i];
                for k in 0..LSTM_DIM {
                    st2.h[pv[i] * LSTM_DIM + k] = st.h[i * LSTM_DIM + k];
                    st2.c[pv[i] * LSTM_DIM + k] = st.c[i * LSTM_DIM + k];
                }
            }
            for j in 0..3 {
                f2.sub[ps[j]] = f.sub[j];
            }
            for (new, &old) in pe.iter().enumerate() {
                f2.edge[new] = f.edge[old];
            }
            let (o2, _) = gnn_forward(&w, &t2, &f2, Some(&st2)).unwrap();
            for (new, &old) in pe.iter().enumerate() {
                assert!((o2.alpha[new] - out.alpha[old]).abs() < 1e-12);
                assert!((o2.omega[new] - out.omega[old]).abs() < 1e-12);
                assert!((o2.theta[new] - out.theta[old]).abs() < 1e-12);
            }
            let s_out = out.state.as_ref().unwrap();
            let s2 = o2.state.as_ref().unwrap();
            for i in 0..4 {
                for k in 0..LSTM_DIM {
                    assert!((s2.h[pv[i] * LSTM_DIM + k] - s_out.h[i * LSTM_DIM + k]).abs() < 1e-12);
                }
            }
        }
    }

    /// Random linear functional of the outputs and the outgoing state.
    struct Probe {
        ca: Vec<f64>,
        cw: Vec<f64>,
        ct: Vec<f64>,
        ch: Vec<f64>,
        cc: Vec<f64>,
    }

    impl Probe {
        fn new(ne: usize, nv: usize, rng: &mut ChaCha8Rng) -> Probe {
            let mut v = |n: usize| {
                (0..n)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            Probe {
                ca: v(ne),
                cw: v(ne),
                ct: v(ne),
                ch: v(nv * LSTM_DIM),
                cc: v(nv * LSTM_DIM),
            }
        }

        fn value(&self, out: &NetOutput) -> f64 {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut s =
                dot(&self.ca, &out.alpha) + dot(&self.cw, &out.omega) + dot(&self.ct, &out.theta);
            if let Some(st) = &out.state {
                s += dot(&self.ch, &st.h) + dot(&self.cc, &st.c);
            }
            s
        }
    }

    fn weight_fd(arch: Arch, seed: u64) -> f64 {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(&topo, &mut rng);
        let st = random_state(4, &mut rng);
        let probe = Probe::new(7, 4, &mut rng);
        let w = random_weights(arch, seed);
        let (out, cache) = gnn_forward(&w, &topo, &f, Some(&st)).unwrap();
        let d_raw = transform_backward(&topo, &out, &probe.ca, &probe.cw, &probe.ct);
        let d_state = LstmState {
            h: probe.ch.clone(),
            c: probe.cc.clone(),
        };
        let (g, _) = gnn_backward(&w, &topo, &cache, &d_raw, Some(&d_state));
        let fun = |x: &[f64]| {
            let w2 = Weights {
                arch,
                data: x.to_vec(),
            };
            probe.value(&gnn_forward(&w2, &topo, &f, Some(&st)).unwrap().0)
        };
        // The net is smooth away from ReLU kinks; a kink hit by a probe shows
        // up as Degenerate and is not expected at these random points.
        finite_difference_check(fun, &w.data, &g, 1e-6, Probes::Coordinates).unwrap()
    }

    #[test]
    fn weight_gradients_match_fd_doge() {
        let err = weight_fd(Arch::Doge, 50);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn weight_gradients_match_fd_doge_m() {
        let err = weight_fd(Arch::DogeM, 51);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn state_gradient_matches_fd() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let f = random_features(&topo, &mut rng);
        let st = random_state(4, &mut rng);
        let probe = Probe::new(7, 4, &mut rng);
        let w = random_weights(Arch::DogeM, 60);
        let (out, cache) = gnn_forward(&w, &topo, &f, Some(&st)).unwrap();
        let d_raw = transform_backward(&topo, &out, &probe.ca, &probe.cw, &probe.ct);
        let d_state = LstmState {
            h: probe.ch.clone(),
            c: probe.cc.clone(),
        };
        let (_, d_in) = gnn_backward(&w, &topo, &cache, &d_raw, Some(&d_state));
        let d_in = d_in.unwrap();
        let flat: Vec<f64> = st.h.iter().chain(&st.c).copied().collect();
        let grad: Vec<f64> = d_in.h.iter().chain(&d_in.c).copied().collect();
        let n = st.h.len();
        let fun = |x: &[f64]| {
            let s = LstmState {
                h: x[..n].to_vec(),
                c: x[n..].to_vec(),
            };
            probe.value(&gnn_forward(&w, &topo, &f, Some(&s)).unwrap().0)
        };
        let err = finite_difference_check(fun, &flat, &grad, 1e-6, Probes::Coordinates).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let f = random_features(&topo, &mut rng);
        let w = random_weights(Arch::DogeM, 70);
        let (_, cache) = gnn_forward(&w, &topo, &f, None).unwrap();
        let (g, d_in) = gnn_backward(&w, &topo, &cache, &vec![[0.0; 3]; 7], None);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(d_in.unwrap().h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dead_relu_weight_has_zero_gradient() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let f = random_features(&topo, &mut rng);
        let mut w = random_weights(Arch::Doge, 80);
        let l = w.layout();
        // Kill hidden unit 0 of the last hidden layer for every input.
        let a = l.phi[2];
        for c in 0..a.inp {
            w.data[a.w + c] = 0.0;
        }
        w.data[a.b.unwrap()] = -1.0;
        let (out, cache) = gnn_forward(&w, &topo, &f, None).unwrap();
        let probe = Probe::new(7, 4, &mut rng);
        let d_raw = transform_backward(&topo, &out, &probe.ca, &probe.cw, &probe.ct);
        let (g, _) = gnn_backward(&w, &topo, &cache, &d_raw, None);
        // Output weights reading the dead unit.
        let o = l.phi[3];
        for r in 0..3 {
            assert_eq!(g[o.w + r * o.inp], 0.0);
        }
        let before = probe.value(&out);
        for r in 0..3 {
            w.data[o.w + r * o.inp] += 0.7;
        }
        let after = probe.value(&gnn_forward(&w, &topo, &f, None).unwrap().0);
        assert_eq!(before, after);
    }

    #[test]
    fn transform_backward_matches_fd() {
        let topo = small_topology();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let raw: Vec<[f64; 3]> = (0..7)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let probe = Probe::new(7, 4, &mut rng);
        let out = transform(&topo, raw.clone(), None);
        let d = transform_backward(&topo, &out, &probe.ca, &probe.cw, &probe.ct);
        let flat: Vec<f64> = raw.iter().flatten().copied().collect();
        let grad: Vec<f64> = d.iter().flatten().copied().collect();
        let fun = |x: &[f64]| {
            let r: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            probe.value(&transform(&topo, r, None))
        };
        let err = finite_difference_check(fun, &flat, &grad, 1e-6, Probes::Coordinates).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn predict_modes_parse_and_mask() {
        for m in [Predict::All, Predict::Param, Predict::NonParam] {
            assert_eq!(m.to_string().parse::<Predict>().unwrap(), m);
        }
        assert!("theta".parse::<Predict>().is_err());
        let mut raw = vec![[1.0, 2.0, 3.0]; 2];
        Predict::Param.mask(&mut raw);
        assert_eq!(raw, vec![[1.0, 2.0, 0.0]; 2]);
        let mut raw = vec![[1.0, 2.0, 3.0]];
        Predict::NonParam.mask(&mut raw);
        assert_eq!(raw, vec![[0.0, 0.0, 3.0]]);
        let mut raw = vec![[1.0, 2.0, 3.0]];
        Predict::All.mask(&mut raw);
        assert_eq!(raw, vec![[1.0, 2.0, 3.0]]);
    }
}
