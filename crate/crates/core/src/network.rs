//! Flow network topology and the mass-balance solve.
//!
//! Every process node `i` has a throughput `z_i`. Mass leaves node `i` along
//! its outgoing edges in proportions `phi_ij`, and external inflows `q_i`
//! enter selected nodes. Conservation at node `j` reads
//!
//! ```text
//! sum_i phi_ij * z_i + q_j = z_j      =>      (I - Phi^T) z = q
//! ```
//!
//! Nodes without outgoing edges are terminal sinks (end-use sectors, exports,
//! losses). They absorb mass, so their allocation rows are exempt from the
//! sum-to-one rule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted 1-norm condition number of `I - Phi^T`.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Tolerance on allocation row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network has no nodes")]
    Empty,
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node index {0} out of range")]
    NodeIndexOutOfRange(usize),
    #[error("unknown edge {0} -> {1}")]
    UnknownEdge(String, String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("self loop on node `{0}`")]
    SelfLoop(String),
    #[error("node `{0}` is not an inflow node")]
    NotAnInflowNode(String),
    #[error("allocation vector has {got} entries, network has {expected} edges")]
    AllocationLength { expected: usize, got: usize },
    #[error("allocation fraction {value} on edge {src} -> {dst} outside [0, 1]")]
    FractionOutOfRange { src: String, dst: String, value: f64 },
    #[error("allocation fractions leaving `{node}` sum to {sum}, expected 1")]
    RowSum { node: String, sum: f64 },
    #[error("inflow vector has {got} entries, network has {expected} inflow nodes")]
    InflowLength { expected: usize, got: usize },
    #[error("negative or non-finite inflow {value} at `{node}`")]
    NegativeInflow { node: String, value: f64 },
    #[error("mass balance system is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularSystem { condition: f64 },
    #[error("solved throughput of `{node}` is negative ({value})")]
    NegativeThroughput { node: String, value: f64 },
}

/// A process node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Node {
    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.id)
    }
}

/// Directed edge between two node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// Directed graph of processes with the set of nodes that receive external
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    inflow_nodes: Vec<usize>,
    node_index: HashMap<String, usize>,
    edge_index: HashMap<Edge, usize>,
    /// Edge indices leaving each node, in declaration order.
    out_edges: Vec<Vec<usize>>,
    /// Position of each node in `inflow_nodes`, if any.
    inflow_slot: Vec<Option<usize>>,
}

impl FlowNetwork {
    pub fn new(
        nodes: Vec<Node>,
        edges: Vec<(usize, usize)>,
        inflow_nodes: Vec<usize>,
    ) -> Result<Self, NetworkError> {
        if nodes.is_empty() {
            return Err(NetworkError::Empty);
        }
        let n = nodes.len();
        let mut node_index = HashMap::with_capacity(n);
        for (i, node) in nodes.iter().enumerate() {
            if node_index.insert(node.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateNode(node.id.clone()));
            }
        }
        let mut edge_index = HashMap::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); n];
        let mut edge_list = Vec::with_capacity(edges.len());
        for (k, &(src, dst)) in edges.iter().enumerate() {
            for idx in [src, dst] {
                if idx >= n {
                    return Err(NetworkError::NodeIndexOutOfRange(idx));
                }
            }
            if src == dst {
                return Err(NetworkError::SelfLoop(nodes[src].id.clone()));
            }
            let edge = Edge { src, dst };
            if edge_index.insert(edge, k).is_some() {
                return Err(NetworkError::DuplicateEdge(
                    nodes[src].id.clone(),
                    nodes[dst].id.clone(),
                ));
            }
            out_edges[src].push(k);
            edge_list.push(edge);
        }
        let mut inflow_slot = vec![None; n];
        for (slot, &i) in inflow_nodes.iter().enumerate() {
            if i >= n {
                return Err(NetworkError::NodeIndexOutOfRange(i));
            }
            if inflow_slot[i].is_some() {
                return Err(NetworkError::DuplicateNode(nodes[i].id.clone()));
            }
            inflow_slot[i] = Some(slot);
        }
        Ok(Self {
            nodes,
            edges: edge_list,
            inflow_nodes,
            node_index,
            edge_index,
            out_edges,
            inflow_slot,
        })
    }

    /// Builds a network from node ids and edges given by id.
    pub fn from_ids(
        nodes: &[&str],
        edges: &[(&str, &str)],
        inflow_nodes: &[&str],
    ) -> Result<Self, NetworkError> {
        let node_list: Vec<Node> = nodes
            .iter()
            .map(|id| Node {
                id: (*id).to_string(),
                name: None,
            })
            .collect();
        let lookup = |id: &str| {
            nodes
                .iter()
                .position(|n| *n == id)
                .ok_or_else(|| NetworkError::UnknownNode(id.to_string()))
        };
        let edge_list = edges
            .iter()
            .map(|(s, d)| Ok((lookup(s)?, lookup(d)?)))
            .collect::<Result<Vec<_>, NetworkError>>()?;
        let inflows = inflow_nodes
            .iter()
            .map(|id| lookup(id))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(node_list, edge_list, inflows)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn inflow_nodes(&self) -> &[usize] {
        &self.inflow_nodes
    }

    pub fn node_id(&self, id: &str) -> Result<usize, NetworkError> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::UnknownNode(id.to_string()))
    }

    pub fn edge_id(&self, src: &str, dst: &str) -> Result<usize, NetworkError> {
        let edge = Edge {
            src: self.node_id(src)?,
            dst: self.node_id(dst)?,
        };
        self.edge_index
            .get(&edge)
            .copied()
            .ok_or_else(|| NetworkError::UnknownEdge(src.to_string(), dst.to_string()))
    }

    pub fn edge_position(&self, src: usize, dst: usize) -> Option<usize> {
        self.edge_index.get(&Edge { src, dst }).copied()
    }

    /// Edge indices leaving node `i`.
    pub fn out_edges(&self, i: usize) -> &[usize] {
        &self.out_edges[i]
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.out_edges[i].is_empty()
    }

    /// Nodes with at least one outgoing edge, in index order.
    pub fn source_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| !self.out_edges[i].is_empty())
    }

    pub fn inflow_slot(&self, i: usize) -> Option<usize> {
        self.inflow_slot[i]
    }

    /// Dense `I - Phi^T`, row-major.
    pub fn balance_matrix(&self, phi: &AllocationMatrix) -> Vec<f64> {
        let n = self.nodes.len();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        for (k, e) in self.edges.iter().enumerate() {
            a[e.dst * n + e.src] -= phi.values[k];
        }
        a
    }
}

/// Allocation fractions, one per network edge in edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    values: Vec<f64>,
}

impl AllocationMatrix {
    /// Validates fractions against the network: each in `[0, 1]`, and every
    /// non-terminal row summing to one.
    pub fn new(net: &FlowNetwork, values: Vec<f64>) -> Result<Self, NetworkError> {
        if values.len() != net.edges.len() {
            return Err(NetworkError::AllocationLength {
                expected: net.edges.len(),
                got: values.len(),
            });
        }
        for (k, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                let e = net.edges[k];
                return Err(NetworkError::FractionOutOfRange {
                    src: net.nodes[e.src].id.clone(),
                    dst: net.nodes[e.dst].id.clone(),
                    value: v,
                });
            }
        }
        for i in net.source_nodes() {
            let sum: f64 = net.out_edges[i].iter().map(|&k| values[k]).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(NetworkError::RowSum {
                    node: net.nodes[i].id.clone(),
                    sum,
                });
            }
        }
        Ok(Self { values })
    }

    /// Builds fractions from `(src id, dst id, value)` triples; unlisted
    /// edges are zero.
    pub fn from_pairs(net: &FlowNetwork, pairs: &[(&str, &str, f64)]) -> Result<Self, NetworkError> {
        let mut values = vec![0.0; net.edges.len()];
        for &(s, d, v) in pairs {
            values[net.edge_id(s, d)?] = v;
        }
        Self::new(net, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, edge: usize) -> f64 {
        self.values[edge]
    }
}

/// External inflows, one per inflow node in declaration order (Mt).
#[derive(Debug, Clone, PartialEq)]
pub struct InflowVector {
    values: Vec<f64>,
}

impl InflowVector {
    pub fn new(net: &FlowNetwork, values: Vec<f64>) -> Result<Self, NetworkError> {
        if values.len() != net.inflow_nodes.len() {
            return Err(NetworkError::InflowLength {
                expected: net.inflow_nodes.len(),
                got: values.len(),
            });
        }
        for (slot, &v) in values.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NetworkError::NegativeInflow {
                    node: net.nodes[net.inflow_nodes[slot]].id.clone(),
                    value: v,
                });
            }
        }
        Ok(Self { values })
    }

    pub fn from_pairs(net: &FlowNetwork, pairs: &[(&str, f64)]) -> Result<Self, NetworkError> {
        let mut values = vec![0.0; net.inflow_nodes.len()];
        for &(id, v) in pairs {
            let i = net.node_id(id)?;
            let slot = net.inflow_slot[i].ok_or_else(|| NetworkError::NotAnInflowNode(id.to_string()))?;
            values[slot] = v;
        }
        Self::new(net, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Inflow at each node (zero where the node takes no external input).
    pub fn dense(&self, net: &FlowNetwork) -> Vec<f64> {
        let mut q = vec![0.0; net.n_nodes()];
        for (slot, &i) in net.inflow_nodes.iter().enumerate() {
            q[i] = self.values[slot];
        }
        q
    }
}

/// Solved nodal throughputs and per-edge flows (Mt).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub z: Vec<f64>,
    pub edge_flows: Vec<f64>,
}

impl FlowSolution {
    /// Largest relative nodal imbalance `|sum_in + q_j - z_j| / max(z_j, q_j, in_j)`.
    pub fn max_imbalance(&self, net: &FlowNetwork, q: &InflowVector) -> f64 {
        let dense_q = q.dense(net);
        let mut inflow = dense_q.clone();
        for (k, e) in net.edges.iter().enumerate() {
            inflow[e.dst] += self.edge_flows[k];
        }
        (0..net.n_nodes())
            .map(|j| {
                let scale = self.z[j].abs().max(inflow[j].abs()).max(f64::MIN_POSITIVE);
                (inflow[j] - self.z[j]).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Options for [`solve_flows_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub condition_cap: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            condition_cap: DEFAULT_CONDITION_CAP,
        }
    }
}

/// Solves `(I - Phi^T) z = q` and returns throughputs and edge flows.
pub fn solve_flows(
    net: &FlowNetwork,
    phi: &AllocationMatrix,
    q: &InflowVector,
) -> Result<FlowSolution, NetworkError> {
    solve_flows_with(net, phi, q, SolveOptions::default())
}

pub fn solve_flows_with(
    net: &FlowNetwork,
    phi: &AllocationMatrix,
    q: &InflowVector,
    options: SolveOptions,
) -> Result<FlowSolution, NetworkError> {
    let n = net.n_nodes();
    let a = net.balance_matrix(phi);
    let norm = one_norm(&a, n);
    let lu = Lu::factor(a, n).ok_or(NetworkError::SingularSystem {
        condition: f64::INFINITY,
    })?;
    let condition = norm * lu.inverse_one_norm_estimate();
    if !(condition.is_finite() && condition <= options.condition_cap) {
        return Err(NetworkError::SingularSystem { condition });
    }
    let mut z = q.dense(net);
    lu.solve(&mut z);
    let scale = z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for (i, v) in z.iter_mut().enumerate() {
        if !v.is_finite() || *v < -1e-12 * scale.max(1.0) {
            return Err(NetworkError::NegativeThroughput {
                node: net.nodes[i].id.clone(),
                value: *v,
            });
        }
        // roundoff below zero
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let edge_flows = net
        .edges
        .iter()
        .enumerate()
        .map(|(k, e)| phi.values[k] * z[e.src])
        .collect();
    Ok(FlowSolution { z, edge_flows })
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Dense LU factorization with partial pivoting, `P A = L U`.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize) -> Option<Self> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, a[i * n + k].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let d = a[k * n + k];
            for i in (k + 1)..n {
                let f = a[i * n + k] / d;
                if f == 0.0 {
                    continue;
                }
                a[i * n + k] = f;
                for j in (k + 1)..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        Some(Self { n, lu: a, perm })
    }

    /// Solves `A x = b` in place.
    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }

    /// Solves `A^T x = b` in place.
    fn solve_transpose(&self, b: &mut [f64]) {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T y = b, L^T w = y, x = P^T w.
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.lu[j * n + i] * y[j];
            }
            y[i] = s;
        }
        for (k, &p) in self.perm.iter().enumerate() {
            b[p] = y[k];
        }
    }

    /// Hager's estimate of `||A^-1||_1`.
    fn inverse_one_norm_estimate(&self) -> f64 {
        let n = self.n;
        let mut x = vec![1.0 / n as f64; n];
        let mut estimate = 0.0;
        for _ in 0..5 {
            let mut y = x.clone();
            self.solve(&mut y);
            let norm: f64 = y.iter().map(|v| v.abs()).sum();
            if !norm.is_finite() {
                return f64::INFINITY;
            }
            if norm <= estimate {
                break;
            }
            estimate = norm;
            let mut w: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            self.solve_transpose(&mut w);
            let (j, wmax) = w
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
            let wx: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            if wmax <= wx {
                break;
            }
            x.iter_mut().for_each(|v| *v = 0.0);
            x[j] = 1.0;
        }
        estimate
    }
}

/// A model prediction bound to the network by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum QoIQuery {
    NodalThroughput { node: String },
    EdgeFlow { src: String, dst: String },
    EdgeRatio { src: String, dst: String },
    ExternalInput { node: String },
    SumOfEdgeFlows { edges: Vec<(String, String)> },
}

impl QoIQuery {
    pub fn resolve(&self, net: &FlowNetwork) -> Result<ResolvedQuery, NetworkError> {
        Ok(match self {
            QoIQuery::NodalThroughput { node } => ResolvedQuery::NodalThroughput(net.node_id(node)?),
            QoIQuery::EdgeFlow { src, dst } => ResolvedQuery::EdgeFlow(net.edge_id(src, dst)?),
            QoIQuery::EdgeRatio { src, dst } => ResolvedQuery::EdgeRatio(net.edge_id(src, dst)?),
            QoIQuery::ExternalInput { node } => {
                let i = net.node_id(node)?;
                let slot = net.inflow_slot(i).ok_or_else(|| NetworkError::NotAnInflowNode(node.clone()))?;
                ResolvedQuery::ExternalInput(slot)
            }
            QoIQuery::SumOfEdgeFlows { edges } => ResolvedQuery::SumOfEdgeFlows(
                edges
                    .iter()
                    .map(|(s, d)| net.edge_id(s, d))
                    .collect::<Result<_, _>>()?,
            ),
        })
    }
}

impl std::fmt::Display for QoIQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QoIQuery::NodalThroughput { node } => write!(f, "node:{node}"),
            QoIQuery::EdgeFlow { src, dst } => write!(f, "flow:{src}>{dst}"),
            QoIQuery::EdgeRatio { src, dst } => write!(f, "ratio:{src}>{dst}"),
            QoIQuery::ExternalInput { node } => write!(f, "input:{node}"),
            QoIQuery::SumOfEdgeFlows { edges } => {
                write!(f, "sum:")?;
                for (k, (s, d)) in edges.iter().enumerate() {
                    if k > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{s}>{d}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::str::FromStr for QoIQuery {
    type Err = String;

    /// Parses the compact binding syntax used in observation tables:
    /// `node:ID`, `flow:SRC>DST`, `ratio:SRC>DST`, `input:ID`, `sum:A>B+C>D`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| format!("query `{s}` lacks a `kind:` prefix"))?;
        let edge = |t: &str| -> Result<(String, String), String> {
            let (a, b) = t
                .split_once('>')
                .ok_or_else(|| format!("edge `{t}` must be written SRC>DST"))?;
            let (a, b) = (a.trim(), b.trim());
            if a.is_empty() || b.is_empty() {
                return Err(format!("edge `{t}` has an empty endpoint"));
            }
            Ok((a.to_string(), b.to_string()))
        };
        let id = |t: &str| -> Result<String, String> {
            let t = t.trim();
            if t.is_empty() {
                Err(format!("query `{s}` has an empty node id"))
            } else {
                Ok(t.to_string())
            }
        };
        match kind.trim() {
            "node" => Ok(QoIQuery::NodalThroughput { node: id(rest)? }),
            "input" => Ok(QoIQuery::ExternalInput { node: id(rest)? }),
            "flow" => edge(rest).map(|(src, dst)| QoIQuery::EdgeFlow { src, dst }),
            "ratio" => edge(rest).map(|(src, dst)| QoIQuery::EdgeRatio { src, dst }),
            "sum" => Ok(QoIQuery::SumOfEdgeFlows {
                edges: rest.split('+').map(edge).collect::<Result<_, _>>()?,
            }),
            other => Err(format!("unknown query kind `{other}`")),
        }
    }
}

/// A [`QoIQuery`] with ids replaced by edge, node, or inflow-slot indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedQuery {
    NodalThroughput(usize),
    EdgeFlow(usize),
    EdgeRatio(usize),
    ExternalInput(usize),
    SumOfEdgeFlows(Vec<usize>),
}

impl ResolvedQuery {
    /// Whether evaluating the query needs a flow solve.
    pub fn needs_solution(&self) -> bool {
        matches!(
            self,
            ResolvedQuery::NodalThroughput(_) | ResolvedQuery::EdgeFlow(_) | ResolvedQuery::SumOfEdgeFlows(_)
        )
    }

    pub fn evaluate(&self, phi: &AllocationMatrix, q: &InflowVector, sol: &FlowSolution) -> f64 {
        match self {
            ResolvedQuery::NodalThroughput(i) => sol.z[*i],
            ResolvedQuery::EdgeFlow(k) => sol.edge_flows[*k],
            ResolvedQuery::EdgeRatio(k) => phi.values[*k],
            ResolvedQuery::ExternalInput(slot) => q.values[*slot],
            ResolvedQuery::SumOfEdgeFlows(ks) => ks.iter().map(|&k| sol.edge_flows[k]).sum(),
        }
    }
}

/// Model prediction `G(phi, q)` for one query.
pub fn evaluate_qoi(
    net: &FlowNetwork,
    phi: &AllocationMatrix,
    q: &InflowVector,
    query: &QoIQuery,
) -> Result<f64, NetworkError> {
    let resolved = query.resolve(net)?;
    match resolved {
        ResolvedQuery::EdgeRatio(k) => Ok(phi.values[k]),
        ResolvedQuery::ExternalInput(slot) => Ok(q.values[slot]),
        _ => {
            let sol = solve_flows(net, phi, q)?;
            Ok(resolved.evaluate(phi, q, &sol))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn chain() -> FlowNetwork {
        FlowNetwork::from_ids(&["a", "b", "c"], &[("a", "b"), ("a", "c")], &["a"]).unwrap()
    }

    fn recycle() -> FlowNetwork {
        FlowNetwork::from_ids(
            &["p", "r", "sink"],
            &[("p", "r"), ("r", "p"), ("r", "sink")],
            &["p"],
        )
        .unwrap()
    }

    #[test]
    fn zero_allocation_is_identity() {
        let net = FlowNetwork::from_ids(&["a", "b", "c"], &[], &["a"]).unwrap();
        let phi = AllocationMatrix::new(&net, vec![]).unwrap();
        let q = InflowVector::new(&net, vec![7.0]).unwrap();
        let sol = solve_flows(&net, &phi, &q).unwrap();
        assert_eq!(sol.z, vec![7.0, 0.0, 0.0]);
    }

    #[test]
    fn chain_forward_substitution() {
        let net = chain();
        let phi = AllocationMatrix::from_pairs(&net, &[("a", "b", 0.4), ("a", "c", 0.6)]).unwrap();
        let q = InflowVector::new(&net, vec![10.0]).unwrap();
        let sol = solve_flows(&net, &phi, &q).unwrap();
        assert_abs_diff_eq!(sol.z[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[1], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[2], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.edge_flows[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.edge_flows[1], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn recycle_loop_geometric_series() {
        let net = recycle();
        let phi = AllocationMatrix::from_pairs(&net, &[("p", "r", 1.0), ("r", "p", 0.5), ("r", "sink", 0.5)])
            .unwrap();
        let q = InflowVector::new(&net, vec![1.0]).unwrap();
        let sol = solve_flows(&net, &phi, &q).unwrap();
        assert_abs_diff_eq!(sol.z[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.z[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_loop_is_singular() {
        let net = FlowNetwork::from_ids(&["a", "b"], &[("a", "b"), ("b", "a")], &["a"]).unwrap();
        let phi = AllocationMatrix::new(&net, vec![1.0, 1.0]).unwrap();
        let q = InflowVector::new(&net, vec![1.0]).unwrap();
        assert!(matches!(
            solve_flows(&net, &phi, &q),
            Err(NetworkError::SingularSystem { .. })
        ));
    }

    #[test]
    fn near_closed_loop_exceeds_condition_cap() {
        let net = FlowNetwork::from_ids(&["a", "b", "s"], &[("a", "b"), ("b", "a"), ("b", "s")], &["a"]).unwrap();
        let phi = AllocationMatrix::new(&net, vec![1.0, 1.0 - 1e-14, 1e-14]).unwrap();
        let q = InflowVector::new(&net, vec![1.0]).unwrap();
        assert!(matches!(
            solve_flows(&net, &phi, &q),
            Err(NetworkError::SingularSystem { .. })
        ));
        let loose = SolveOptions { condition_cap: 1e20 };
        assert!(solve_flows_with(&net, &phi, &q, loose).is_ok());
    }

    #[test]
    fn qoi_queries() {
        let net = chain();
        let phi = AllocationMatrix::from_pairs(&net, &[("a", "b", 0.4), ("a", "c", 0.6)]).unwrap();
        let q = InflowVector::new(&net, vec![10.0]).unwrap();
        let ratio = QoIQuery::EdgeRatio { src: "a".into(), dst: "b".into() };
        assert_eq!(evaluate_qoi(&net, &phi, &q, &ratio).unwrap(), 0.4);
        let flow = QoIQuery::EdgeFlow { src: "a".into(), dst: "c".into() };
        assert_abs_diff_eq!(evaluate_qoi(&net, &phi, &q, &flow).unwrap(), 6.0, epsilon = 1e-12);
        let input = QoIQuery::ExternalInput { node: "a".into() };
        assert_eq!(evaluate_qoi(&net, &phi, &q, &input).unwrap(), 10.0);
        let missing = QoIQuery::EdgeFlow { src: "b".into(), dst: "c".into() };
        assert!(matches!(
            evaluate_qoi(&net, &phi, &q, &missing),
            Err(NetworkError::UnknownEdge(..))
        ));
        let ghost = QoIQuery::NodalThroughput { node: "zz".into() };
        assert!(matches!(
            evaluate_qoi(&net, &phi, &q, &ghost),
            Err(NetworkError::UnknownNode(_))
        ));
    }

    #[test]
    fn sum_of_loop_edges() {
        let net = recycle();
        let phi = AllocationMatrix::from_pairs(&net, &[("p", "r", 1.0), ("r", "p", 0.5), ("r", "sink", 0.5)])
            .unwrap();
        let q = InflowVector::new(&net, vec![1.0]).unwrap();
        // Oracle: z_p = z_r = 2 by the geometric series, so p>r carries 2 and
        // r>p carries 0.5 * 2 = 1.
        let query: QoIQuery = "sum:p>r+r>p".parse().unwrap();
        assert_abs_diff_eq!(evaluate_qoi(&net, &phi, &q, &query).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn row_sum_gate() {
        let net = chain();
        assert!(matches!(
            AllocationMatrix::new(&net, vec![0.4, 0.6 + 1e-11]),
            Err(NetworkError::RowSum { .. })
        ));
        assert!(AllocationMatrix::new(&net, vec![0.4, 0.6 + 1e-14]).is_ok());
        assert!(matches!(
            AllocationMatrix::new(&net, vec![-0.1, 1.1]),
            Err(NetworkError::FractionOutOfRange { .. })
        ));
    }

    #[test]
    fn structural_validation() {
        assert!(matches!(
            FlowNetwork::from_ids(&["a", "b"], &[("a", "b"), ("a", "b")], &[]),
            Err(NetworkError::DuplicateEdge(..))
        ));
        assert!(matches!(
            FlowNetwork::new(vec![Node { id: "a".into(), name: None }], vec![(0, 3)], vec![]),
            Err(NetworkError::NodeIndexOutOfRange(3))
        ));
        assert!(matches!(
            FlowNetwork::from_ids(&["a", "a"], &[], &[]),
            Err(NetworkError::DuplicateNode(_))
        ));
        let net = chain();
        assert!(matches!(
            InflowVector::new(&net, vec![-1.0]),
            Err(NetworkError::NegativeInflow { .. })
        ));
    }

    #[test]
    fn nine_node_balance_pattern() {
        // Topology of the nine-process illustration: inputs at nodes 1 and 2.
        let ids = ["1", "2", "3", "4", "5", "6", "7", "8", "9"];
        let edges = [
            ("1", "3"),
            ("1", "4"),
            ("2", "4"),
            ("2", "5"),
            ("3", "6"),
            ("4", "6"),
            ("4", "7"),
            ("4", "8"),
            ("5", "9"),
        ];
        let net = FlowNetwork::from_ids(&ids, &edges, &["1", "2"]).unwrap();
        let phi = AllocationMatrix::from_pairs(
            &net,
            &[
                ("1", "3", 0.3),
                ("1", "4", 0.7),
                ("2", "4", 0.6),
                ("2", "5", 0.4),
                ("3", "6", 1.0),
                ("4", "6", 0.2),
                ("4", "7", 0.5),
                ("4", "8", 0.3),
                ("5", "9", 1.0),
            ],
        )
        .unwrap();
        let a = net.balance_matrix(&phi);
        let n = 9;
        // Row j holds -phi_ij in column i for every edge i -> j, ones on the
        // diagonal, zeros elsewhere.
        let mut expected = vec![0.0; n * n];
        for i in 0..n {
            expected[i * n + i] = 1.0;
        }
        let set = |m: &mut Vec<f64>, row: usize, col: usize, v: f64| m[(row - 1) * n + (col - 1)] = -v;
        set(&mut expected, 3, 1, 0.3);
        set(&mut expected, 4, 1, 0.7);
        set(&mut expected, 4, 2, 0.6);
        set(&mut expected, 5, 2, 0.4);
        set(&mut expected, 6, 3, 1.0);
        set(&mut expected, 6, 4, 0.2);
        set(&mut expected, 7, 4, 0.5);
        set(&mut expected, 8, 4, 0.3);
        set(&mut expected, 9, 5, 1.0);
        assert_eq!(a, expected);
    }

    #[test]
    fn query_syntax_round_trip() {
        for s in ["node:a", "flow:a>b", "ratio:a>c", "input:a", "sum:a>b+a>c"] {
            let q: QoIQuery = s.parse().unwrap();
            assert_eq!(q.to_string(), s);
        }
        assert!("flow:ab".parse::<QoIQuery>().is_err());
        assert!("weird:a".parse::<QoIQuery>().is_err());
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let a = vec![4.0, 1.0, 2.0, 0.5, 3.0, 1.0, 2.0, 0.0, 5.0];
        let lu = Lu::factor(a.clone(), 3).unwrap();
        let b = [1.0, 2.0, 3.0];
        let mut x = b.to_vec();
        lu.solve_transpose(&mut x);
        for j in 0..3 {
            let r: f64 = (0..3).map(|i| a[i * 3 + j] * x[i]).sum();
            assert_abs_diff_eq!(r, b[j], epsilon = 1e-12);
        }
    }
}
