//! Gaussian observation model linking published data to network predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    solve_flows, AllocationMatrix, FlowNetwork, FlowSolution, InflowVector, NetworkError, QoIQuery, ResolvedQuery,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("observation `{id}`: {source}")]
    Binding { id: String, source: NetworkError },
    #[error("observation `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("observation `{id}` refers to unknown noise group `{group}`")]
    UnknownSigmaGroup { id: String, group: String },
    #[error("expected {expected} noise values, got {got}")]
    SigmaLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObservationKind {
    ExternalInput,
    Flow,
    Ratio,
}

impl std::str::FromStr for ObservationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "externalinput" | "input" => Ok(Self::ExternalInput),
            "flow" => Ok(Self::Flow),
            "ratio" => Ok(Self::Ratio),
            _ => Err(format!("unknown observation kind `{s}`")),
        }
    }
}

impl std::fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ExternalInput => "ExternalInput",
            Self::Flow => "Flow",
            Self::Ratio => "Ratio",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseModel {
    /// `y = G (1 + e)`, sigma dimensionless.
    #[default]
    Relative,
    /// `y = G + e`, sigma in the datum's units.
    Additive,
}

impl std::str::FromStr for NoiseModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relative" => Ok(Self::Relative),
            "additive" => Ok(Self::Additive),
            _ => Err(format!("unknown noise model `{s}`")),
        }
    }
}

impl std::fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relative => "relative",
            Self::Additive => "additive",
        })
    }
}

/// Noise magnitude of a record: a named, inferred group or a fixed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRef {
    Group(String),
    Fixed(f64),
}

impl std::str::FromStr for SigmaRef {
    type Err = String;

    /// `fixed:0.05` or a group name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(v) = s.strip_prefix("fixed:") {
            let v: f64 = v.trim().parse().map_err(|_| format!("bad fixed sigma `{s}`"))?;
            return Ok(SigmaRef::Fixed(v));
        }
        if s.is_empty() {
            return Err("empty sigma group".into());
        }
        Ok(SigmaRef::Group(s.to_string()))
    }
}

impl std::fmt::Display for SigmaRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaRef::Group(g) => f.write_str(g),
            SigmaRef::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

/// One published datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub id: String,
    pub description: String,
    pub kind: ObservationKind,
    pub query: QoIQuery,
    pub value: f64,
    pub year: i32,
    pub source: String,
    pub noise: NoiseModel,
    pub sigma: SigmaRef,
}

impl ObservationRecord {
    /// Checks value ranges and that the query matches the record kind.
    pub fn validate(&self) -> Result<(), LikelihoodError> {
        let bad = |reason: String| {
            Err(LikelihoodError::InvalidRecord {
                id: self.id.clone(),
                reason,
            })
        };
        if !self.value.is_finite() {
            return bad(format!("value {} is not finite", self.value));
        }
        if self.noise == NoiseModel::Relative && self.value <= 0.0 {
            return bad(format!("relative noise needs a positive value, got {}", self.value));
        }
        let kind_ok = match (&self.kind, &self.query) {
            (ObservationKind::Ratio, QoIQuery::EdgeRatio { .. }) => true,
            (ObservationKind::ExternalInput, QoIQuery::ExternalInput { .. }) => true,
            (
                ObservationKind::Flow,
                QoIQuery::EdgeFlow { .. } | QoIQuery::NodalThroughput { .. } | QoIQuery::SumOfEdgeFlows { .. },
            ) => true,
            _ => false,
        };
        if !kind_ok {
            return bad(format!("{} record cannot bind to `{}`", self.kind, self.query));
        }
        if self.kind == ObservationKind::Ratio && !(0.0..=1.0).contains(&self.value) {
            return bad(format!("ratio {} outside [0, 1]", self.value));
        }
        if let SigmaRef::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("fixed sigma {s} must be positive"));
            }
        }
        Ok(())
    }
}

/// Distinct noise groups referenced by `records`, sorted.
pub fn sigma_groups(records: &[ObservationRecord]) -> Vec<String> {
    let groups: std::collections::BTreeSet<&str> = records
        .iter()
        .filter_map(|r| match &r.sigma {
            SigmaRef::Group(g) => Some(g.as_str()),
            SigmaRef::Fixed(_) => None,
        })
        .collect();
    groups.into_iter().map(str::to_string).collect()
}

/// Named noise magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    values: BTreeMap<String, f64>,
}

impl NoiseParams {
    pub fn new<I: IntoIterator<Item = (String, f64)>>(pairs: I) -> Self {
        Self {
            values: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.values.get(group).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSlot {
    /// Position in the noise vector passed at evaluation time.
    Index(usize),
    Fixed(f64),
}

/// A record with its query resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledObservation {
    pub query: ResolvedQuery,
    pub value: f64,
    pub noise: NoiseModel,
    pub sigma: SigmaSlot,
}

/// Records bound to one network and one noise-group ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    items: Vec<CompiledObservation>,
    needs_solution: bool,
}

impl ObservationSet {
    /// Resolves every record; `sigma_groups[k]` names noise slot `k`.
    pub fn compile<S: AsRef<str>>(
        net: &FlowNetwork,
        records: &[ObservationRecord],
        sigma_groups: &[S],
    ) -> Result<Self, LikelihoodError> {
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            r.validate()?;
            let query = r.query.resolve(net).map_err(|source| LikelihoodError::Binding {
                id: r.id.clone(),
                source,
            })?;
            let sigma = match &r.sigma {
                SigmaRef::Fixed(v) => SigmaSlot::Fixed(*v),
                SigmaRef::Group(g) => SigmaSlot::Index(
                    sigma_groups
                        .iter()
                        .position(|s| s.as_ref() == g)
                        .ok_or_else(|| LikelihoodError::UnknownSigmaGroup {
                            id: r.id.clone(),
                            group: g.clone(),
                        })?,
                ),
            };
            items.push(CompiledObservation {
                query,
                value: r.value,
                noise: r.noise,
                sigma,
            });
        }
        let needs_solution = items.iter().any(|o| o.query.needs_solution());
        Ok(Self { items, needs_solution })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CompiledObservation] {
        &self.items
    }

    /// Log likelihood; `-inf` for structurally invalid parameters.
    pub fn log_likelihood(&self, net: &FlowNetwork, phi: &AllocationMatrix, q: &InflowVector, sigma: &[f64]) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        let solution = if self.needs_solution {
            match solve_flows(net, phi, q) {
                Ok(s) => s,
                Err(_) => return f64::NEG_INFINITY,
            }
        } else {
            FlowSolution {
                z: Vec::new(),
                edge_flows: Vec::new(),
            }
        };
        self.log_likelihood_solved(phi, q, &solution, sigma)
    }

    /// As [`Self::log_likelihood`] with the flows already solved.
    pub fn log_likelihood_solved(
        &self,
        phi: &AllocationMatrix,
        q: &InflowVector,
        solution: &FlowSolution,
        sigma: &[f64],
    ) -> f64 {
        let mut total = 0.0;
        for o in &self.items {
            let s = match o.sigma {
                SigmaSlot::Fixed(v) => v,
                SigmaSlot::Index(k) => match sigma.get(k) {
                    Some(&v) => v,
                    None => return f64::NEG_INFINITY,
                },
            };
            let g = o.query.evaluate(phi, q, solution);
            total += datum_log_density(o.value, g, s, o.noise);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }
}

/// Log density of one datum `y` given prediction `g` and noise `sigma`.
pub fn datum_log_density(y: f64, g: f64, sigma: f64, noise: NoiseModel) -> f64 {
    if !(sigma > 0.0 && sigma.is_finite() && g.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let r = match noise {
        NoiseModel::Relative => {
            if g <= 0.0 {
                return f64::NEG_INFINITY;
            }
            y / g - 1.0
        }
        NoiseModel::Additive => y - g,
    };
    -HALF_LN_2PI - sigma.ln() - r * r / (2.0 * sigma * sigma)
}

/// Log likelihood of `data` at `(phi, q, sigma)`, resolving bindings on the fly.
pub fn log_likelihood(
    net: &FlowNetwork,
    phi: &AllocationMatrix,
    q: &InflowVector,
    sigma: &NoiseParams,
    data: &[ObservationRecord],
) -> Result<f64, LikelihoodError> {
    let groups: Vec<&String> = sigma.values.keys().collect();
    let set = ObservationSet::compile(net, data, &groups)?;
    let values: Vec<f64> = sigma.values.values().copied().collect();
    Ok(set.log_likelihood(net, phi, q, &values))
}

/// `beta * log_l`, keeping `-inf` at every temperature.
pub fn tempered_log_likelihood(log_l: f64, beta: f64) -> f64 {
    if log_l == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if beta == 0.0 {
        0.0
    } else {
        beta * log_l
    }
}
