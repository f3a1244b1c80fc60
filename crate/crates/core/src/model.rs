//! Binary integer programs: representation, LP/JSON input, random
//! independent-set instances, per-constraint decomposition and a brute-force
//! oracle for small instances.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest instance the exhaustive oracle accepts.
pub const MAX_ENUMERATION_VARS: usize = 25;

const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported section `{0}`")]
    UnsupportedSection(String),
    #[error("variable `{0}` is not declared binary")]
    NotBinary(String),
    #[error("unsupported relation `{0}`")]
    UnsupportedRelation(String),
    #[error("variable `{var}` appears twice in row {row}")]
    DuplicateVariable { row: String, var: String },
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("instance is infeasible")]
    Infeasible,
    #[error("{0} variables exceed the enumeration limit of {MAX_ENUMERATION_VARS}")]
    TooLarge(usize),
    #[error("json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "le")]
    Le,
    #[serde(rename = "eq")]
    Eq,
}

impl Relation {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Relation::Le => lhs <= rhs + FEAS_TOL,
            Relation::Eq => (lhs - rhs).abs() <= FEAS_TOL,
        }
    }
}

/// One linear row `Σ coeffs[k]·x[vars[k]] (≤|=) rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub vars: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub rel: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(vars: Vec<usize>, coeffs: Vec<f64>, rel: Relation, rhs: f64) -> Self {
        Constraint {
            vars,
            coeffs,
            rel,
            rhs,
        }
    }

    pub fn is_satisfied(&self, x: &[u8]) -> bool {
        let lhs: f64 = self
            .vars
            .iter()
            .zip(&self.coeffs)
            .map(|(&v, &a)| a * f64::from(x[v]))
            .sum();
        self.rel.holds(lhs, self.rhs)
    }
}

/// `min ⟨c, x⟩` over `x ∈ {0,1}^n` subject to linear rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    #[serde(rename = "n")]
    pub num_vars: usize,
    #[serde(rename = "c")]
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl IlpInstance {
    pub fn new(objective: Vec<f64>, constraints: Vec<Constraint>) -> Result<Self, ModelError> {
        let inst = IlpInstance {
            num_vars: objective.len(),
            objective,
            constraints,
            names: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.objective.len() != self.num_vars {
            return Err(ModelError::Invalid(format!(
                "objective has {} entries for {} variables",
                self.objective.len(),
                self.num_vars
            )));
        }
        if let Some(names) = &self.names {
            if names.len() != self.num_vars {
                return Err(ModelError::Invalid("name list length mismatch".into()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::Invalid(
                "non-finite objective coefficient".into(),
            ));
        }
        for (j, row) in self.constraints.iter().enumerate() {
            if row.vars.len() != row.coeffs.len() {
                return Err(ModelError::Invalid(format!(
                    "row {j}: vars/coeffs length mismatch"
                )));
            }
            if !row.rhs.is_finite() || row.coeffs.iter().any(|a| !a.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "row {j}: non-finite coefficient"
                )));
            }
            let mut seen = vec![false; self.num_vars];
            for &v in &row.vars {
                if v >= self.num_vars {
                    return Err(ModelError::Invalid(format!(
                        "row {j}: variable index {v} out of range"
                    )));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(ModelError::DuplicateVariable {
                        row: j.to_string(),
                        var: self.var_name(v),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn var_name(&self, i: usize) -> String {
        match &self.names {
            Some(names) => names[i].clone(),
            None => format!("x{}", i + 1),
        }
    }

    pub fn is_feasible(&self, x: &[u8]) -> bool {
        self.constraints.iter().all(|row| row.is_satisfied(x))
    }

    pub fn value(&self, x: &[u8]) -> f64 {
        self.objective
            .iter()
            .zip(x)
            .map(|(&c, &b)| c * f64::from(b))
            .sum()
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let inst: IlpInstance =
            serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }

    /// Writes the instance in the LP subset accepted by [`parse_lp`].
    ///
    /// Every variable is listed in the objective (zero costs included) so that
    /// re-parsing reproduces the variable order.
    pub fn to_lp(&self) -> String {
        let mut out = String::from("Minimize\n obj:");
        for i in 0..self.num_vars {
            write_term(&mut out, self.objective[i], &self.var_name(i));
        }
        out.push_str("\nSubject To\n");
        for (j, row) in self.constraints.iter().enumerate() {
            let _ = write!(out, " c{}:", j + 1);
            for (&v, &a) in row.vars.iter().zip(&row.coeffs) {
                write_term(&mut out, a, &self.var_name(v));
            }
            let rel = match row.rel {
                Relation::Le => "<=",
                Relation::Eq => "=",
            };
            let _ = writeln!(out, " {rel} {}", row.rhs);
        }
        out.push_str("Binary\n");
        for i in 0..self.num_vars {
            let _ = writeln!(out, " {}", self.var_name(i));
        }
        out.push_str("End\n");
        out
    }
}

fn write_term(out: &mut String, coeff: f64, name: &str) {
    if coeff < 0.0 || (coeff == 0.0 && coeff.is_sign_negative()) {
        let _ = write!(out, " - {} {name}", -coeff);
    } else {
        let _ = write!(out, " + {coeff} {name}");
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Label(String),
    Ident(String),
    Number(f64),
    Sign(f64),
    Rel(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    Preamble,
    Objective,
    Constraints,
    Binary,
    End,
}

fn section_keyword(line: &str) -> Option<Result<(Section, bool), String>> {
    let lower = line.trim().to_ascii_lowercase();
    let first = lower.split_whitespace().next().unwrap_or("");
    let norm = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    match norm.as_str() {
        "minimize" | "minimise" | "minimum" | "min" => Some(Ok((Section::Objective, false))),
        "maximize" | "maximise" | "maximum" | "max" => Some(Ok((Section::Objective, true))),
        "subject to" | "such that" | "st" | "s.t." => Some(Ok((Section::Constraints, false))),
        "binary" | "binaries" | "bin" => Some(Ok((Section::Binary, false))),
        "end" => Some(Ok((Section::End, false))),
        _ => match first {
            "bounds" | "bound" | "general" | "generals" | "gen" | "integer" | "integers"
            | "semi-continuous" | "semis" | "semi" | "sos" => Some(Err(first.to_string())),
            _ => None,
        },
    }
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Token>, ModelError> {
    let chars: Vec<char> = line.chars().collect();
    let mut tokens = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let ch = chars[k];
        if ch.is_whitespace() {
            k += 1;
        } else if ch == '+' || ch == '-' {
            tokens.push(Token::Sign(if ch == '-' { -1.0 } else { 1.0 }));
            k += 1;
        } else if ch == '<' || ch == '>' || ch == '=' {
            let mut rel = ch.to_string();
            if k + 1 < chars.len() && matches!(chars[k + 1], '<' | '>' | '=') {
                rel.push(chars[k + 1]);
                k += 1;
            }
            tokens.push(Token::Rel(rel));
            k += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = k;
            while k < chars.len()
                && (chars[k].is_ascii_digit()
                    || chars[k] == '.'
                    || ((chars[k] == 'e' || chars[k] == 'E') && k > start)
                    || ((chars[k] == '+' || chars[k] == '-')
                        && k > start
                        && (chars[k - 1] == 'e' || chars[k - 1] == 'E')))
            {
                k += 1;
            }
            let text: String = chars[start..k].iter().collect();
            let value = text.parse::<f64>().map_err(|_| ModelError::Parse {
                line: lineno,
                msg: format!("bad number `{text}`"),
            })?;
            tokens.push(Token::Number(value));
        } else if is_name_char(ch) {
            let start = k;
            while k < chars.len() && is_name_char(chars[k]) {
                k += 1;
            }
            let name: String = chars[start..k].iter().collect();
            let mut j = k;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j] == ':' {
                tokens.push(Token::Label(name));
                k = j + 1;
            } else {
                tokens.push(Token::Ident(name));
            }
        } else {
            return Err(ModelError::Parse {
                line: lineno,
                msg: format!("unexpected character `{ch}`"),
            });
        }
    }
    Ok(tokens)
}

fn is_name_char(ch: char) -> bool {
    ch.is_alphanumeric() || "_.[]{}!\"#$%&()/,;?@'`|~^".contains(ch)
}

struct VarTable {
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl VarTable {
    fn id(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

/// Parses linear terms `[sign] [coef] name ...` until a relation token.
fn parse_terms(
    tokens: &[(Token, usize)],
    pos: &mut usize,
    vars: &mut VarTable,
    row: &str,
) -> Result<Vec<(usize, f64)>, ModelError> {
    let mut terms: Vec<(usize, f64)> = Vec::new();
    while *pos < tokens.len() {
        let (tok, line) = &tokens[*pos];
        if matches!(tok, Token::Rel(_) | Token::Label(_)) {
            break;
        }
        let mut sign = 1.0;
        let mut coeff = None;
        while let Some((Token::Sign(s), _)) = tokens.get(*pos) {
            sign *= s;
            *pos += 1;
        }
        if let Some((Token::Number(v), _)) = tokens.get(*pos) {
            coeff = Some(*v);
            *pos += 1;
        }
        match tokens.get(*pos) {
            Some((Token::Ident(name), _)) => {
                let v = vars.id(name);
                if terms.iter().any(|&(u, _)| u == v) {
                    return Err(ModelError::DuplicateVariable {
                        row: row.to_string(),
                        var: name.clone(),
                    });
                }
                terms.push((v, sign * coeff.unwrap_or(1.0)));
                *pos += 1;
            }
            _ => {
                return Err(ModelError::Parse {
                    line: *line,
                    msg: format!("expected a variable in row `{row}`"),
                })
            }
        }
    }
    Ok(terms)
}

/// Parses the supported LP-format subset.
///
/// Sections: `Minimize`/`Maximize`, `Subject To`, `Binary`, `End`. Rows use
/// `<=`, `=` or `>=`; `>=` rows are negated into `<=` form and a maximization
/// objective is negated into a minimization.
pub fn parse_lp(text: &str) -> Result<IlpInstance, ModelError> {
    let mut section = Section::Preamble;
    let mut maximize = false;
    let mut obj_tokens: Vec<(Token, usize)> = Vec::new();
    let mut row_tokens: Vec<(Token, usize)> = Vec::new();
    let mut binaries: Vec<String> = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = match raw.find('\\') {
            Some(p) => &raw[..p],
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(kw) = section_keyword(line) {
            match kw {
                Ok((s, max)) => {
                    section = s;
                    if s == Section::Objective {
                        maximize = max;
                    }
                }
                Err(name) => return Err(ModelError::UnsupportedSection(name)),
            }
            continue;
        }
        match section {
            Section::Preamble => {
                return Err(ModelError::Parse {
                    line: lineno,
                    msg: "content before the objective section".into(),
                })
            }
            Section::Objective => {
                obj_tokens.extend(tokenize(line, lineno)?.into_iter().map(|t| (t, lineno)))
            }
            Section::Constraints => {
                row_tokens.extend(tokenize(line, lineno)?.into_iter().map(|t| (t, lineno)))
            }
            Section::Binary => binaries.extend(line.split_whitespace().map(str::to_string)),
            Section::End => {
                return Err(ModelError::Parse {
                    line: lineno,
                    msg: "content after End".into(),
                })
            }
        }
    }

    let mut vars = VarTable {
        index: HashMap::new(),
        names: Vec::new(),
    };

    let mut pos = 0;
    if let Some((Token::Label(_), _)) = obj_tokens.first() {
        pos = 1;
    }
    let obj_terms = parse_terms(&obj_tokens, &mut pos, &mut vars, "objective")?;
    if let Some((_, line)) = obj_tokens.get(pos) {
        return Err(ModelError::Parse {
            line: *line,
            msg: "unexpected token in objective".into(),
        });
    }

    let mut rows: Vec<(Vec<(usize, f64)>, Relation, f64)> = Vec::new();
    let mut pos = 0;
    while pos < row_tokens.len() {
        let name = match &row_tokens[pos].0 {
            Token::Label(l) => {
                pos += 1;
                l.clone()
            }
            _ => format!("R{}", rows.len() + 1),
        };
        let terms = parse_terms(&row_tokens, &mut pos, &mut vars, &name)?;
        let (rel, line) = match row_tokens.get(pos) {
            Some((Token::Rel(r), line)) => (r.clone(), *line),
            _ => {
                return Err(ModelError::Parse {
                    line: row_tokens.last().map_or(0, |t| t.1),
                    msg: format!("row `{name}` has no relation"),
                })
            }
        };
        pos += 1;
        let mut sign = 1.0;
        while let Some((Token::Sign(s), _)) = row_tokens.get(pos) {
            sign *= s;
            pos += 1;
        }
        let rhs = match row_tokens.get(pos) {
            Some((Token::Number(v), _)) => sign * v,
            _ => {
                return Err(ModelError::Parse {
                    line,
                    msg: format!("row `{name}` has no numeric right-hand side"),
                })
            }
        };
        pos += 1;
        let (relation, flip) = match rel.as_str() {
            "<=" | "=<" => (Relation::Le, false),
            ">=" | "=>" => (Relation::Le, true),
            "=" => (Relation::Eq, false),
            other => return Err(ModelError::UnsupportedRelation(other.to_string())),
        };
        if flip {
            let negated = terms.into_iter().map(|(v, a)| (v, -a)).collect();
            rows.push((negated, relation, -rhs));
        } else {
            rows.push((terms, relation, rhs));
        }
    }

    let declared: std::collections::HashSet<&str> = binaries.iter().map(String::as_str).collect();
    if let Some(name) = vars.names.iter().find(|n| !declared.contains(n.as_str())) {
        return Err(ModelError::NotBinary(name.clone()));
    }
    for name in &binaries {
        vars.id(name);
    }

    let n = vars.names.len();
    let mut objective = vec![0.0; n];
    for (v, a) in obj_terms {
        objective[v] = if maximize { -a } else { a };
    }
    let constraints = rows
        .into_iter()
        .map(|(terms, rel, rhs)| {
            let (vs, cs) = terms.into_iter().unzip();
            Constraint::new(vs, cs, rel, rhs)
        })
        .collect();
    let inst = IlpInstance {
        num_vars: n,
        objective,
        constraints,
        names: Some(vars.names),
    };
    inst.validate()?;
    Ok(inst)
}

/// Independent-set ILP on a seeded Erdős–Rényi graph `G(n, p)`.
///
/// Pairs `(u, v)`, `u < v`, are visited in lexicographic order and each draws
/// one uniform sample from a ChaCha8 stream seeded with `seed`.
pub fn generate_independent_set(n: usize, p: f64, seed: u64) -> IlpInstance {
    assert!(n >= 1, "vertex count must be positive");
    assert!(
        (0.0..=1.0).contains(&p),
        "edge probability must lie in [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut constraints = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                constraints.push(Constraint::new(
                    vec![u, v],
                    vec![1.0, 1.0],
                    Relation::Le,
                    1.0,
                ));
            }
        }
    }
    IlpInstance {
        num_vars: n,
        objective: vec![-1.0; n],
        constraints,
        names: None,
    }
}

/// Per-constraint decomposition: `I_j` per subproblem and `J_i` per variable.
///
/// Dual variables (edges `(i, j)`) are numbered subproblem-major: edge
/// `edge_offset[j] + t` is the `t`-th variable of `I_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub subproblem_vars: Vec<Vec<usize>>,
    /// Coefficients aligned with `subproblem_vars`.
    pub subproblem_coeffs: Vec<Vec<f64>>,
    /// Source constraint of each subproblem.
    pub subproblem_rows: Vec<usize>,
    pub var_subproblems: Vec<Vec<usize>>,
    /// Edge ids of each variable, in `J_i` order.
    pub var_edges: Vec<Vec<usize>>,
    pub edge_offset: Vec<usize>,
    pub edge_var: Vec<usize>,
    pub edge_subproblem: Vec<usize>,
    /// Variables in no constraint; excluded from the dual.
    pub isolated: Vec<usize>,
    /// Constraints with no variables.
    pub empty_rows: Vec<usize>,
    pub num_dual_vars: usize,
}

impl Decomposition {
    pub fn num_subproblems(&self) -> usize {
        self.subproblem_vars.len()
    }

    pub fn num_vars(&self) -> usize {
        self.var_subproblems.len()
    }

    pub fn edge(&self, j: usize, t: usize) -> usize {
        self.edge_offset[j] + t
    }

    pub fn edges_of(&self, j: usize) -> std::ops::Range<usize> {
        self.edge_offset[j]..self.edge_offset[j + 1]
    }

    /// Degree `|J_i|` of the variable owning edge `e`.
    pub fn edge_degree(&self, e: usize) -> usize {
        self.var_subproblems[self.edge_var[e]].len()
    }

    /// Position `t` of edge `e` within its subproblem.
    pub fn edge_level(&self, e: usize) -> usize {
        e - self.edge_offset[self.edge_subproblem[e]]
    }
}

pub fn decompose(instance: &IlpInstance) -> Decomposition {
    let n = instance.num_vars;
    let mut subproblem_vars = Vec::new();
    let mut subproblem_coeffs = Vec::new();
    let mut subproblem_rows = Vec::new();
    let mut empty_rows = Vec::new();
    for (row_id, row) in instance.constraints.iter().enumerate() {
        if row.vars.is_empty() {
            empty_rows.push(row_id);
            continue;
        }
        let mut pairs: Vec<(usize, f64)> = row
            .vars
            .iter()
            .copied()
            .zip(row.coeffs.iter().copied())
            .collect();
        pairs.sort_by_key(|&(v, _)| v);
        let (vs, cs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        subproblem_vars.push(vs);
        subproblem_coeffs.push(cs);
        subproblem_rows.push(row_id);
    }

    let mut edge_offset = Vec::with_capacity(subproblem_vars.len() + 1);
    let mut edge_var = Vec::new();
    let mut edge_subproblem = Vec::new();
    let mut var_subproblems = vec![Vec::new(); n];
    let mut var_edges = vec![Vec::new(); n];
    edge_offset.push(0);
    for (j, vars) in subproblem_vars.iter().enumerate() {
        for &i in vars {
            var_subproblems[i].push(j);
            var_edges[i].push(edge_var.len());
            edge_var.push(i);
            edge_subproblem.push(j);
        }
        edge_offset.push(edge_var.len());
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| var_subproblems[i].is_empty()).collect();
    if !isolated.is_empty() {
        log::warn!(
            "{} variable(s) appear in no constraint and are excluded from the dual: {:?}",
            isolated.len(),
            isolated
                .iter()
                .map(|&i| instance.var_name(i))
                .collect::<Vec<_>>()
        );
    }
    Decomposition {
        num_dual_vars: edge_var.len(),
        subproblem_vars,
        subproblem_coeffs,
        subproblem_rows,
        var_subproblems,
        var_edges,
        edge_offset,
        edge_var,
        edge_subproblem,
        isolated,
        empty_rows,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub assignment: Vec<u8>,
    pub value: f64,
}

/// Exhaustive minimization over all `2^n` assignments.
///
/// Assignments are visited in lexicographic order (`x_1` most significant)
/// and only a strict improvement replaces the incumbent, so ties resolve to
/// the lexicographically smallest minimizer.
pub fn enumerate_optimum(instance: &IlpInstance) -> Result<ExactSolution, ModelError> {
    let n = instance.num_vars;
    if n > MAX_ENUMERATION_VARS {
        return Err(ModelError::TooLarge(n));
    }
    let mut best: Option<ExactSolution> = None;
    let mut x = vec![0u8; n];
    for code in 0u64..(1u64 << n) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = ((code >> (n - 1 - i)) & 1) as u8;
        }
        if !instance.is_feasible(&x) {
            continue;
        }
        let value = instance.value(&x);
        if best.as_ref().map_or(true, |b| value < b.value) {
            best = Some(ExactSolution {
                assignment: x.clone(),
                value,
            });
        }
    }
    best.ok_or(ModelError::Infeasible)
}

/// Small reference instances.
pub mod fixtures {
    use super::*;

    /// min −x1−x2−x3 s.t. x1+x2 ≤ 1, x2+x3 ≤ 1.
    pub const TINY_LP: &str = "\\ three-variable path\nMinimize\n obj: - x1 - x2 - x3\nSubject To\n c1: x1 + x2 <= 1\n c2: x2 + x3 <= 1\nBinary\n x1 x2 x3\nEnd\n";

    pub fn tiny() -> IlpInstance {
        IlpInstance::new(
            vec![-1.0, -1.0, -1.0],
            vec![
                Constraint::new(vec![0, 1], vec![1.0, 1.0], Relation::Le, 1.0),
                Constraint::new(vec![1, 2], vec![1.0, 1.0], Relation::Le, 1.0),
            ],
        )
        .unwrap()
    }
}
