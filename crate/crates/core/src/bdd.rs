//! Quasi-reduced binary decision diagrams for single linear constraints, with
//! the shortest-path machinery used by the dual solver: node potentials,
//! min-marginals, minimizing paths and restricted minimizers.
//!
//! Every root-to-⊤ path visits exactly one node per level, so all arcs leaving
//! a level carry that level's (hi, lo) cost pair.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::Relation;

/// Unreachable / infeasible marker in shortest-path tables.
pub const INF: f64 = f64::INFINITY;

/// Cap on distinct partial sums per level during construction.
pub const MAX_STATES_PER_LEVEL: usize = 1 << 22;

#[derive(Debug, Error, PartialEq)]
pub enum BddError {
    #[error("constraint has no feasible 0/1 assignment")]
    Infeasible,
    #[error("constraint produces more than {MAX_STATES_PER_LEVEL} partial sums at one level")]
    TooManyStates,
    #[error("variable order does not match the row")]
    OrderMismatch,
    #[error("both min-marginals are infinite at level {0}")]
    BrokenDiagram(usize),
    #[error("branch x = {beta} at level {level} admits no feasible completion")]
    InfeasibleBranch { level: usize, beta: u8 },
}

/// Arc target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Child {
    Node(u32),
    Top,
    Bot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BddNode {
    pub lo: Child,
    pub hi: Child,
}

impl BddNode {
    pub fn child(&self, beta: u8) -> Child {
        if beta == 0 {
            self.lo
        } else {
            self.hi
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bdd {
    /// Variable of each level (global indices, in level order).
    pub vars: Vec<usize>,
    /// Nodes per level; the root is `levels[0][0]`.
    pub levels: Vec<Vec<BddNode>>,
}

/// Builds the quasi-reduced diagram of `Σ coeffs[t]·x_t (≤|=) rhs`.
///
/// Forward pass: distinct reachable partial sums per level. Backward pass:
/// each partial sum maps to the node `(child(s), child(s + a_t))` through a
/// per-level unique table, so two sums share a node iff they admit the same
/// feasible completions; sums with no feasible completion collapse to ⊥.
pub fn build_bdd(vars: &[usize], coeffs: &[f64], rel: Relation, rhs: f64) -> Result<Bdd, BddError> {
    if vars.len() != coeffs.len() || vars.is_empty() {
        return Err(BddError::OrderMismatch);
    }
    let k = vars.len();
    // Partial sums before level t, keyed by bit pattern for exact merging.
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    sums.push(vec![0.0]);
    for t in 0..k {
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut next = Vec::new();
        for &s in &sums[t] {
            for v in [s, s + coeffs[t]] {
                let key = normalize_zero(v).to_bits();
                if seen.insert(key, ()).is_none() {
                    next.push(normalize_zero(v));
                }
            }
        }
        if next.len() > MAX_STATES_PER_LEVEL {
            return Err(BddError::TooManyStates);
        }
        sums.push(next);
    }

    let terminal = |s: f64| {
        if rel.holds(s, rhs) {
            Child::Top
        } else {
            Child::Bot
        }
    };
    let index_of = |level: &[f64]| -> HashMap<u64, usize> {
        level
            .iter()
            .enumerate()
            .map(|(idx, s)| (s.to_bits(), idx))
            .collect()
    };

    // Child of every partial sum at level t+1, built bottom-up.
    let mut below: Vec<Child> = sums[k].iter().map(|&s| terminal(s)).collect();
    let mut raw_levels: Vec<Vec<BddNode>> = vec![Vec::new(); k];
    for t in (0..k).rev() {
        let next_index = index_of(&sums[t + 1]);
        let mut unique: HashMap<BddNode, u32> = HashMap::new();
        let mut nodes = Vec::new();
        let mut here = Vec::with_capacity(sums[t].len());
        for &s in &sums[t] {
            let lo = below[next_index[&normalize_zero(s).to_bits()]];
            let hi = below[next_index[&normalize_zero(s + coeffs[t]).to_bits()]];
            if lo == Child::Bot && hi == Child::Bot {
                here.push(Child::Bot);
                continue;
            }
            let node = BddNode { lo, hi };
            let id = *unique.entry(node).or_insert_with(|| {
                nodes.push(node);
                (nodes.len() - 1) as u32
            });
            here.push(Child::Node(id));
        }
        raw_levels[t] = nodes;
        below = here;
    }
    let root = below[0];
    if root == Child::Bot {
        return Err(BddError::Infeasible);
    }
    Ok(renumber_from_root(vars.to_vec(), raw_levels, root))
}

fn normalize_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Keeps only nodes reachable from `root` and numbers them in discovery order
/// (lo arc before hi arc), so node ids are canonical.
fn renumber_from_root(vars: Vec<usize>, raw: Vec<Vec<BddNode>>, root: Child) -> Bdd {
    let k = raw.len();
    let mut levels: Vec<Vec<BddNode>> = Vec::with_capacity(k);
    let mut frontier: Vec<u32> = match root {
        Child::Node(id) => vec![id],
        _ => unreachable!("root is a decision node"),
    };
    for t in 0..k {
        let mut next_ids: HashMap<u32, u32> = HashMap::new();
        let mut next_frontier = Vec::new();
        let mut nodes = Vec::with_capacity(frontier.len());
        for &old in &frontier {
            let node = raw[t][old as usize];
            let mut map = |c: Child| match c {
                Child::Node(id) => {
                    let fresh = *next_ids.entry(id).or_insert_with(|| {
                        next_frontier.push(id);
                        (next_frontier.len() - 1) as u32
                    });
                    Child::Node(fresh)
                }
                other => other,
            };
            let lo = map(node.lo);
            let hi = map(node.hi);
            nodes.push(BddNode { lo, hi });
        }
        levels.push(nodes);
        frontier = next_frontier;
    }
    Bdd { vars, levels }
}

impl Bdd {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Merges nodes with identical children level by level (bottom-up) and
    /// drops nodes whose both children are ⊥. A diagram from [`build_bdd`]
    /// is already reduced, so this returns an identical copy.
    pub fn reduce(&self) -> Bdd {
        let k = self.levels.len();
        let mut remap_below: Vec<Child> = Vec::new();
        let mut raw: Vec<Vec<BddNode>> = vec![Vec::new(); k];
        for t in (0..k).rev() {
            let mut unique: HashMap<BddNode, u32> = HashMap::new();
            let mut nodes = Vec::new();
            let mut remap = Vec::with_capacity(self.levels[t].len());
            for node in &self.levels[t] {
                let fix = |c: Child| match c {
                    Child::Node(id) => remap_below[id as usize],
                    other => other,
                };
                let mapped = BddNode {
                    lo: fix(node.lo),
                    hi: fix(node.hi),
                };
                if mapped.lo == Child::Bot && mapped.hi == Child::Bot {
                    remap.push(Child::Bot);
                    continue;
                }
                let id = *unique.entry(mapped).or_insert_with(|| {
                    nodes.push(mapped);
                    (nodes.len() - 1) as u32
                });
                remap.push(Child::Node(id));
            }
            raw[t] = nodes;
            remap_below = remap;
        }
        renumber_from_root(self.vars.clone(), raw, remap_below[0])
    }

    /// All assignments (in level order) along root-to-⊤ paths.
    pub fn feasible_assignments(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(self.num_levels());
        self.collect_paths(0, 0, &mut path, &mut out);
        out.sort();
        out
    }

    fn collect_paths(&self, t: usize, id: u32, path: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let node = self.levels[t][id as usize];
        for beta in 0..2u8 {
            path.push(beta);
            match node.child(beta) {
                Child::Top => out.push(path.clone()),
                Child::Node(next) => self.collect_paths(t + 1, next, path, out),
                Child::Bot => {}
            }
            path.pop();
        }
    }

    /// Graphviz rendering; solid arcs are hi (x = 1), dashed arcs lo.
    pub fn to_dot(&self, name: &str) -> String {
        use std::fmt::Write as _;
        let mut out = format!("digraph \"{name}\" {{\n  top [shape=box,label=\"⊤\"];\n");
        for (t, nodes) in self.levels.iter().enumerate() {
            for (id, node) in nodes.iter().enumerate() {
                let _ = writeln!(out, "  n{t}_{id} [label=\"x{}\"];", self.vars[t] + 1);
                for (beta, style) in [(0u8, "dashed"), (1u8, "solid")] {
                    let target = match node.child(beta) {
                        Child::Node(c) => format!("n{}_{c}", t + 1),
                        Child::Top => "top".to_string(),
                        Child::Bot => continue,
                    };
                    let _ = writeln!(out, "  n{t}_{id} -> {target} [style={style}];");
                }
            }
        }
        out.push_str("}\n");
        out
    }

    /// Full forward and backward DP for the given per-level costs.
    pub fn compute_shortest_paths(&self, hi: &[f64], lo: &[f64]) -> NodeCosts {
        let mut costs = NodeCosts::allocate(self);
        costs.from_root[0][0] = 0.0;
        for t in 0..self.num_levels() {
            self.forward_level(&mut costs, t, hi[t], lo[t]);
        }
        for t in (0..self.num_levels()).rev() {
            self.backward_level(&mut costs, t, hi[t], lo[t]);
        }
        costs
    }

    /// Recomputes `from_root` (and predecessors) of level `t + 1` from level
    /// `t`. Ties prefer a lo arc, then the smaller parent id.
    pub fn forward_level(&self, costs: &mut NodeCosts, t: usize, hi: f64, lo: f64) {
        if t + 1 >= self.num_levels() {
            return;
        }
        let (head, tail) = costs.from_root.split_at_mut(t + 1);
        let from = &head[t];
        let next = &mut tail[0];
        let pred = &mut costs.pred[t + 1];
        next.iter_mut().for_each(|v| *v = INF);
        for (id, node) in self.levels[t].iter().enumerate() {
            for beta in 0..2u8 {
                if let Child::Node(c) = node.child(beta) {
                    let cand = from[id] + if beta == 1 { hi } else { lo };
                    let slot = c as usize;
                    let better =
                        cand < next[slot] || (cand == next[slot] && beta == 0 && pred[slot].1 == 1);
                    if better {
                        next[slot] = cand;
                        pred[slot] = (id as u32, beta);
                    }
                }
            }
        }
    }

    /// Recomputes `to_top` of level `t` from level `t + 1`.
    pub fn backward_level(&self, costs: &mut NodeCosts, t: usize, hi: f64, lo: f64) {
        let (head, tail) = costs.to_top.split_at_mut(t + 1);
        let below: &[f64] = tail.first().map_or(&[], |v| v.as_slice());
        for (id, node) in self.levels[t].iter().enumerate() {
            let via = |c: Child, cost: f64| match c {
                Child::Top => cost,
                Child::Bot => INF,
                Child::Node(n) => cost + below[n as usize],
            };
            head[t][id] = via(node.lo, lo).min(via(node.hi, hi));
        }
    }

    fn to_top_of(&self, costs: &NodeCosts, t: usize, c: Child) -> f64 {
        match c {
            Child::Top => 0.0,
            Child::Bot => INF,
            Child::Node(n) => costs.to_top[t + 1][n as usize],
        }
    }

    /// `(m⁰, m¹)` at level `t`: the cheapest path forced through a lo (resp. hi)
    /// arc of that level.
    pub fn min_marginals(
        &self,
        costs: &NodeCosts,
        t: usize,
        hi: f64,
        lo: f64,
    ) -> Result<(f64, f64), BddError> {
        let (m0, m1) = self.min_marginals_unchecked(costs, t, hi, lo);
        if m0 == INF && m1 == INF {
            return Err(BddError::BrokenDiagram(t));
        }
        Ok((m0, m1))
    }

    pub(crate) fn min_marginals_unchecked(
        &self,
        costs: &NodeCosts,
        t: usize,
        hi: f64,
        lo: f64,
    ) -> (f64, f64) {
        let mut m = [INF, INF];
        for (id, node) in self.levels[t].iter().enumerate() {
            let base = costs.from_root[t][id];
            for beta in 0..2u8 {
                let cost = if beta == 1 { hi } else { lo };
                let v = base + cost + self.to_top_of(costs, t, node.child(beta));
                if v < m[beta as usize] {
                    m[beta as usize] = v;
                }
            }
        }
        (m[0], m[1])
    }

    /// Subproblem optimum `E^j` (value at the root).
    pub fn optimum(&self, costs: &NodeCosts) -> f64 {
        costs.to_top[0][0]
    }

    /// Greedy completion from `c` (a node of level `start`) down to ⊤,
    /// preferring lo.
    fn trace_down(
        &self,
        costs: &NodeCosts,
        hi: &[f64],
        lo: &[f64],
        start: usize,
        mut c: Child,
        out: &mut [u8],
    ) {
        let mut level = start;
        while let Child::Node(id) = c {
            let node = self.levels[level][id as usize];
            let via_lo = lo[level] + self.to_top_of(costs, level, node.lo);
            let via_hi = hi[level] + self.to_top_of(costs, level, node.hi);
            let beta = u8::from(via_hi < via_lo);
            out[level] = beta;
            c = node.child(beta);
            level += 1;
        }
    }

    /// Prefix of the cheapest root path to node `id` at level `t`.
    fn trace_up(&self, costs: &NodeCosts, t: usize, mut id: u32, out: &mut [u8]) {
        for level in (1..=t).rev() {
            let (parent, beta) = costs.pred[level][id as usize];
            out[level - 1] = beta;
            id = parent;
        }
    }

    /// One shortest root-to-⊤ path (lo preferred on ties) and its cost.
    pub fn optimal_assignment(&self, costs: &NodeCosts, hi: &[f64], lo: &[f64]) -> (Vec<u8>, f64) {
        let mut x = vec![0u8; self.num_levels()];
        self.trace_down(costs, hi, lo, 0, Child::Node(0), &mut x);
        (x, self.optimum(costs))
    }

    /// Minimizer `s(t, β)`: a shortest root-to-⊤ path forced through a β-arc at
    /// level `t`. Among nodes of level `t` the smaller id wins ties.
    pub fn argmin_restricted(
        &self,
        costs: &NodeCosts,
        hi: &[f64],
        lo: &[f64],
        t: usize,
        beta: u8,
    ) -> Result<Vec<u8>, BddError> {
        let mut x = vec![0u8; self.num_levels()];
        self.argmin_restricted_into(costs, hi, lo, t, beta, &mut x)?;
        Ok(x)
    }

    pub(crate) fn argmin_restricted_into(
        &self,
        costs: &NodeCosts,
        hi: &[f64],
        lo: &[f64],
        t: usize,
        beta: u8,
        out: &mut [u8],
    ) -> Result<(), BddError> {
        let cost = if beta == 1 { hi[t] } else { lo[t] };
        let mut best = (INF, 0u32);
        for (id, node) in self.levels[t].iter().enumerate() {
            let v = costs.from_root[t][id] + cost + self.to_top_of(costs, t, node.child(beta));
            if v < best.0 {
                best = (v, id as u32);
            }
        }
        if best.0 == INF {
            return Err(BddError::InfeasibleBranch { level: t, beta });
        }
        self.trace_up(costs, t, best.1, out);
        out[t] = beta;
        let child = self.levels[t][best.1 as usize].child(beta);
        self.trace_down(costs, hi, lo, t + 1, child, out);
        Ok(())
    }
}

/// Node potentials of one diagram under one cost assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCosts {
    /// `shp(r, v)` per level and node.
    pub from_root: Vec<Vec<f64>>,
    /// `shp(v, ⊤)` per level and node.
    pub to_top: Vec<Vec<f64>>,
    /// Best incoming arc `(parent id, bit)` per node, for path tracing.
    pub pred: Vec<Vec<(u32, u8)>>,
}

impl NodeCosts {
    pub fn allocate(bdd: &Bdd) -> NodeCosts {
        let shape = |fill: f64| -> Vec<Vec<f64>> {
            bdd.levels.iter().map(|l| vec![fill; l.len()]).collect()
        };
        let mut from_root = shape(INF);
        from_root[0][0] = 0.0;
        NodeCosts {
            from_root,
            to_top: shape(INF),
            pred: bdd.levels.iter().map(|l| vec![(0, 1); l.len()]).collect(),
        }
    }
}
