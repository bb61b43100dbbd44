//! Linearized radial distribution network.
//!
//! The feeder is a tree rooted at the substation (node 0). Every non-root node
//! `j` has exactly one branch feeding it, and the quantities attached to that
//! branch are indexed by the branch. With `d_j` the net active withdrawal at
//! node `j` and `Q_j` its reactive load:
//!
//! ```text
//!   p_j = d_j + Σ_{c child of j} p_c
//!   q_j = Q_j + Σ_{c child of j} q_c
//!   v_j = v_parent(j) − (R_j p_j + X_j q_j) / v_ref
//! ```
//!
//! On a chain this is exactly the node-by-node recursion `p^{i+1} = p^i − d^i`.
//! All flows and voltages are per-unit; withdrawals are given in kW/kvar and
//! scaled by the feeder's `s_base_kva`.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{LinearRow, QpBuilder};

pub const DEFAULT_S_BASE_KVA: f64 = 1000.0;
pub const DEFAULT_V_BASE_KV: f64 = 12.66;
pub const DEFAULT_V_MIN: f64 = 0.95;
pub const DEFAULT_V_MAX: f64 = 1.05;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cannot read feeder file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("feeder file {path}, record {record}: {message}")]
    Parse {
        path: String,
        record: usize,
        message: String,
    },
    #[error("feeder has no branches")]
    Empty,
    #[error("cycle detected at branch {from}->{to}")]
    Cycle { from: usize, to: usize },
    #[error("duplicate branch between nodes {from} and {to}")]
    DuplicateBranch { from: usize, to: usize },
    #[error("node {0} is not connected to the substation")]
    Disconnected(usize),
    #[error("invalid feeder data: {0}")]
    Invalid(String),
}

/// One row of the feeder file, in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    /// Symmetric active flow limit; `None` means unlimited.
    #[serde(default)]
    pub pmax_kw: Option<f64>,
    #[serde(default)]
    pub qmax_kvar: Option<f64>,
}

/// Base quantities and voltage limits applied when building a [`FeederModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeederSettings {
    pub s_base_kva: f64,
    pub v_base_kv: f64,
    pub v_ref: f64,
    /// Either one value for all nodes or one per node.
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
}

impl Default for FeederSettings {
    fn default() -> Self {
        Self {
            s_base_kva: DEFAULT_S_BASE_KVA,
            v_base_kv: DEFAULT_V_BASE_KV,
            v_ref: 1.0,
            v_min: vec![DEFAULT_V_MIN],
            v_max: vec![DEFAULT_V_MAX],
        }
    }
}

/// A branch oriented from parent to child, in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub nodes: usize,
    /// Branches in breadth-first order from the root, so every branch appears
    /// after the branch feeding its parent.
    pub branches: Vec<Branch>,
    /// Index of the branch feeding each node (`None` for the root).
    pub branch_into: Vec<Option<usize>>,
    pub parent: Vec<Option<usize>>,
    /// Child branches of each node.
    pub children: Vec<Vec<usize>>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub v_ref: f64,
    pub s_base_kva: f64,
    pub v_base_kv: f64,
    /// Input rows as given, kept for lossless serialization.
    pub specs: Vec<BranchSpec>,
}

fn per_node(values: &[f64], nodes: usize, what: &str) -> Result<Vec<f64>, NetworkError> {
    match values.len() {
        1 => Ok(vec![values[0]; nodes]),
        n if n == nodes => Ok(values.to_vec()),
        n => Err(NetworkError::Invalid(format!(
            "{what} has {n} entries, expected 1 or {nodes}"
        ))),
    }
}

impl FeederModel {
    pub fn from_branches(specs: Vec<BranchSpec>, settings: &FeederSettings) -> Result<Self, NetworkError> {
        if specs.is_empty() {
            return Err(NetworkError::Empty);
        }
        if !(settings.s_base_kva > 0.0) || !(settings.v_base_kv > 0.0) || !(settings.v_ref > 0.0) {
            return Err(NetworkError::Invalid(
                "s_base_kva, v_base_kv and v_ref must be positive".into(),
            ));
        }
        let nodes = specs.iter().map(|b| b.from.max(b.to)).max().unwrap() + 1;
        let mut seen = HashSet::new();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (k, b) in specs.iter().enumerate() {
            if b.from == b.to {
                return Err(NetworkError::Cycle { from: b.from, to: b.to });
            }
            if !seen.insert((b.from.min(b.to), b.from.max(b.to))) {
                return Err(NetworkError::DuplicateBranch { from: b.from, to: b.to });
            }
            for (what, v) in [("r_ohm", b.r_ohm), ("x_ohm", b.x_ohm)] {
                if !v.is_finite() || v < 0.0 {
                    return Err(NetworkError::Invalid(format!(
                        "branch {}->{}: {what} must be finite and nonnegative",
                        b.from, b.to
                    )));
                }
            }
            for (what, v) in [("pmax_kw", b.pmax_kw), ("qmax_kvar", b.qmax_kvar)] {
                if matches!(v, Some(x) if !(x >= 0.0)) {
                    return Err(NetworkError::Invalid(format!(
                        "branch {}->{}: {what} must be nonnegative",
                        b.from, b.to
                    )));
                }
            }
            adj[b.from].push((b.to, k));
            adj[b.to].push((b.from, k));
        }

        let z_base = settings.v_base_kv * settings.v_base_kv * 1000.0 / settings.s_base_kva;
        let mut parent = vec![None; nodes];
        let mut branch_into = vec![None; nodes];
        let mut children = vec![Vec::new(); nodes];
        let mut visited = vec![false; nodes];
        // spec row through which each node was reached
        let mut via: Vec<Option<usize>> = vec![None; nodes];
        let mut branches = Vec::with_capacity(specs.len());
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(n) = queue.pop_front() {
            for &(m, k) in &adj[n] {
                if via[n] == Some(k) {
                    continue;
                }
                if visited[m] {
                    let b = &specs[k];
                    return Err(NetworkError::Cycle { from: b.from, to: b.to });
                }
                visited[m] = true;
                via[m] = Some(k);
                parent[m] = Some(n);
                let spec = &specs[k];
                let pmax = spec.pmax_kw.map_or(f64::INFINITY, |v| v / settings.s_base_kva);
                let qmax = spec.qmax_kvar.map_or(f64::INFINITY, |v| v / settings.s_base_kva);
                branch_into[m] = Some(branches.len());
                children[n].push(branches.len());
                branches.push(Branch {
                    from: n,
                    to: m,
                    r: spec.r_ohm / z_base,
                    x: spec.x_ohm / z_base,
                    p_min: -pmax,
                    p_max: pmax,
                    q_min: -qmax,
                    q_max: qmax,
                });
                queue.push_back(m);
            }
        }
        if let Some(n) = visited.iter().position(|v| !v) {
            return Err(NetworkError::Disconnected(n));
        }
        let v_min = per_node(&settings.v_min, nodes, "v_min")?;
        let v_max = per_node(&settings.v_max, nodes, "v_max")?;
        for n in 0..nodes {
            if v_min[n] > v_max[n] {
                return Err(NetworkError::Invalid(format!("node {n}: v_min > v_max")));
            }
        }
        if settings.v_ref < v_min[0] || settings.v_ref > v_max[0] {
            return Err(NetworkError::Invalid(
                "substation voltage reference outside its bounds".into(),
            ));
        }
        Ok(Self {
            nodes,
            branches,
            branch_into,
            parent,
            children,
            v_min,
            v_max,
            v_ref: settings.v_ref,
            s_base_kva: settings.s_base_kva,
            v_base_kv: settings.v_base_kv,
            specs,
        })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Settings that reproduce this model from its `specs`.
    pub fn settings(&self) -> FeederSettings {
        FeederSettings {
            s_base_kva: self.s_base_kva,
            v_base_kv: self.v_base_kv,
            v_ref: self.v_ref,
            v_min: self.v_min.clone(),
            v_max: self.v_max.clone(),
        }
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }

    /// Nodes on the path from `node` up to (excluding) the root.
    pub fn path_to_root(&self, mut node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        while let Some(p) = self.parent[node] {
            path.push(node);
            node = p;
        }
        path
    }
}

#[derive(Debug, Deserialize)]
struct FeederRecord {
    from: usize,
    to: usize,
    r_ohm: f64,
    x_ohm: f64,
    pmax_kw: Option<String>,
    qmax_kvar: Option<String>,
}

fn parse_limit(raw: Option<String>) -> Result<Option<f64>, String> {
    match raw.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) if s.eq_ignore_ascii_case("inf") => Ok(None),
        Some(s) => s.parse::<f64>().map(Some).map_err(|e| e.to_string()),
    }
}

/// Reads the branch table (`from,to,r_ohm,x_ohm,pmax_kw,qmax_kvar`).
/// Empty or `inf` limits mean unlimited.
pub fn read_branch_specs(path: &Path) -> Result<Vec<BranchSpec>, NetworkError> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => NetworkError::Io {
                path: shown.clone(),
                source,
            },
            other => NetworkError::Parse {
                path: shown.clone(),
                record: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut specs = Vec::new();
    for (k, rec) in rdr.deserialize::<FeederRecord>().enumerate() {
        let err = |message: String| NetworkError::Parse {
            path: shown.clone(),
            record: k + 1,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        specs.push(BranchSpec {
            from: rec.from,
            to: rec.to,
            r_ohm: rec.r_ohm,
            x_ohm: rec.x_ohm,
            pmax_kw: parse_limit(rec.pmax_kw).map_err(err)?,
            qmax_kvar: parse_limit(rec.qmax_kvar).map_err(err)?,
        });
    }
    Ok(specs)
}

pub fn load_feeder(path: &Path) -> Result<FeederModel, NetworkError> {
    load_feeder_with(path, &FeederSettings::default())
}

pub fn load_feeder_with(path: &Path, settings: &FeederSettings) -> Result<FeederModel, NetworkError> {
    FeederModel::from_branches(read_branch_specs(path)?, settings)
}

/// Net withdrawals per node and slot. Active entries are
/// `p_grid + p_ETB − p_ETS − p_B2G − p_re,feed` summed over the communities at
/// the node (kW); reactive entries are the reactive load (kvar).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeInjection {
    pub active: Vec<Vec<f64>>,
    pub reactive: Vec<Vec<f64>>,
}

impl NodeInjection {
    pub fn zeros(nodes: usize, slots: usize) -> Self {
        Self {
            active: vec![vec![0.0; slots]; nodes],
            reactive: vec![vec![0.0; slots]; nodes],
        }
    }

    pub fn slots(&self) -> usize {
        self.active.first().map_or(0, Vec::len)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect();
        Self {
            active: s(&self.active),
            reactive: s(&self.reactive),
        }
    }
}

/// Branch flows are indexed `[branch][slot]`, voltages `[node][slot]` with the
/// root included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub branch_active: Vec<Vec<f64>>,
    pub branch_reactive: Vec<Vec<f64>>,
    pub node_voltage: Vec<Vec<f64>>,
}

/// Evaluates the linearized flow equations for given withdrawals. No limits are
/// enforced.
pub fn solve_flow(f: &FeederModel, inj: &NodeInjection) -> NetworkState {
    let slots = inj.slots();
    let nb = f.num_branches();
    let mut p = vec![vec![0.0; slots]; nb];
    let mut q = vec![vec![0.0; slots]; nb];
    // Reverse BFS order visits every subtree before its feeding branch.
    for b in (0..nb).rev() {
        let j = f.branches[b].to;
        for t in 0..slots {
            let mut pa = f.kw_to_pu(inj.active[j][t]);
            let mut qa = f.kw_to_pu(inj.reactive[j][t]);
            for &c in &f.children[j] {
                pa += p[c][t];
                qa += q[c][t];
            }
            p[b][t] = pa;
            q[b][t] = qa;
        }
    }
    let mut v = vec![vec![f.v_ref; slots]; f.nodes];
    for (b, br) in f.branches.iter().enumerate() {
        for t in 0..slots {
            v[br.to][t] = v[br.from][t] - (br.r * p[b][t] + br.x * q[b][t]) / f.v_ref;
        }
    }
    NetworkState {
        branch_active: p,
        branch_reactive: q,
        node_voltage: v,
    }
}

/// Column layout of a [`LinearConstraintBlock`].
///
/// Variables, each for every slot: branch active flow, branch reactive flow,
/// voltage of each non-root node, and active / reactive withdrawal of each
/// non-root node (per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkLayout {
    pub branches: usize,
    pub nodes: usize,
    pub slots: usize,
    pub offset: usize,
}

impl NetworkLayout {
    pub fn num_vars(&self) -> usize {
        let nb = self.branches * self.slots;
        let nn = (self.nodes - 1) * self.slots;
        2 * nb + 3 * nn
    }

    pub fn p(&self, b: usize, t: usize) -> usize {
        self.offset + b * self.slots + t
    }

    pub fn q(&self, b: usize, t: usize) -> usize {
        self.offset + (self.branches + b) * self.slots + t
    }

    /// Voltage of non-root node `node` (≥ 1).
    pub fn v(&self, node: usize, t: usize) -> usize {
        self.offset + 2 * self.branches * self.slots + (node - 1) * self.slots + t
    }

    pub fn inj_p(&self, node: usize, t: usize) -> usize {
        self.offset + (2 * self.branches + self.nodes - 1) * self.slots + (node - 1) * self.slots + t
    }

    pub fn inj_q(&self, node: usize, t: usize) -> usize {
        self.offset + (2 * self.branches + 2 * (self.nodes - 1)) * self.slots + (node - 1) * self.slots + t
    }

    pub fn with_offset(self, offset: usize) -> Self {
        Self { offset, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarBound {
    pub var: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Network equations and limits over the variables of a [`NetworkLayout`]
/// (indices relative to offset 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintBlock {
    pub layout: NetworkLayout,
    pub eq_rows: Vec<LinearRow>,
    pub bounds: Vec<VarBound>,
}

pub fn network_constraints(f: &FeederModel, slots: usize) -> LinearConstraintBlock {
    let lay = NetworkLayout {
        branches: f.num_branches(),
        nodes: f.nodes,
        slots,
        offset: 0,
    };
    let mut eq_rows = Vec::with_capacity(3 * lay.branches * slots);
    let mut bounds = Vec::with_capacity(3 * lay.branches * slots);
    for (b, br) in f.branches.iter().enumerate() {
        let j = br.to;
        for t in 0..slots {
            let mut pt = vec![(lay.p(b, t), 1.0), (lay.inj_p(j, t), -1.0)];
            let mut qt = vec![(lay.q(b, t), 1.0), (lay.inj_q(j, t), -1.0)];
            for &c in &f.children[j] {
                pt.push((lay.p(c, t), -1.0));
                qt.push((lay.q(c, t), -1.0));
            }
            eq_rows.push(LinearRow::new(pt, 0.0));
            eq_rows.push(LinearRow::new(qt, 0.0));

            let mut vt = vec![
                (lay.v(j, t), 1.0),
                (lay.p(b, t), br.r / f.v_ref),
                (lay.q(b, t), br.x / f.v_ref),
            ];
            let rhs = if br.from == 0 {
                f.v_ref
            } else {
                vt.push((lay.v(br.from, t), -1.0));
                0.0
            };
            eq_rows.push(LinearRow::new(vt, rhs));

            bounds.push(VarBound {
                var: lay.p(b, t),
                lower: br.p_min,
                upper: br.p_max,
            });
            bounds.push(VarBound {
                var: lay.q(b, t),
                lower: br.q_min,
                upper: br.q_max,
            });
            bounds.push(VarBound {
                var: lay.v(j, t),
                lower: f.v_min[j],
                upper: f.v_max[j],
            });
        }
    }
    LinearConstraintBlock {
        layout: lay,
        eq_rows,
        bounds,
    }
}

impl LinearConstraintBlock {
    /// Appends the block's variables and rows to `builder`; returns the layout
    /// shifted to the builder's indices. Withdrawal variables are left free.
    pub fn append_to(&self, builder: &mut QpBuilder, name: &str) -> NetworkLayout {
        let offset = builder.num_vars();
        let lay = self.layout.with_offset(offset);
        for k in 0..self.layout.num_vars() {
            builder.add_var(format!("{name}[{k}]"), f64::NEG_INFINITY, f64::INFINITY);
        }
        for vb in &self.bounds {
            builder.set_bounds(offset + vb.var, vb.lower, vb.upper);
        }
        for row in &self.eq_rows {
            builder.add_eq(row.terms.iter().map(|&(j, a)| (offset + j, a)).collect(), row.rhs);
        }
        lay
    }

    /// Stacks a flow solution and its withdrawals into the block's variable vector.
    pub fn point(&self, f: &FeederModel, state: &NetworkState, inj: &NodeInjection) -> Vec<f64> {
        let lay = self.layout;
        let mut x = vec![0.0; lay.num_vars()];
        for b in 0..lay.branches {
            for t in 0..lay.slots {
                x[lay.p(b, t)] = state.branch_active[b][t];
                x[lay.q(b, t)] = state.branch_reactive[b][t];
            }
        }
        for n in 1..lay.nodes {
            for t in 0..lay.slots {
                x[lay.v(n, t)] = state.node_voltage[n][t];
                x[lay.inj_p(n, t)] = f.kw_to_pu(inj.active[n][t]);
                x[lay.inj_q(n, t)] = f.kw_to_pu(inj.reactive[n][t]);
            }
        }
        x
    }

    pub fn max_eq_residual(&self, x: &[f64]) -> f64 {
        self.eq_rows.iter().map(|r| r.residual(x).abs()).fold(0.0, f64::max)
    }
}
