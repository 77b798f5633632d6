//! Posterior targets: the parameter layout plus a likelihood over it.
//!
//! [`MfaModel`] flattens one or more years of a flow study into a single
//! parameter vector. Allocation fractions and noise groups can be tied
//! across years (one copy shared by all years) or replicated per year;
//! inflows are always per year.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::likelihood::{LikelihoodError, ObservationRecord, ObservationSet};
use crate::network::{AllocationMatrix, FlowNetwork, FlowSolution, InflowVector, NetworkError};
use crate::priors::{Layout, LayoutBuilder, ParamPrior, PriorAssembly, PriorError, RowPrior};

/// A distribution known up to a constant through its prior and likelihood.
pub trait Target: Sync {
    fn layout(&self) -> &Layout;

    /// Log likelihood at natural-space parameters; `-inf` if invalid.
    fn log_likelihood(&self, theta: &[f64]) -> f64;

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.layout().log_prior(theta)
    }

    fn dim(&self) -> usize {
        self.layout().dim()
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("allocation row `{0}` has no prior")]
    MissingRow(String),
    #[error("row `{node}` lists destinations {listed:?} but the network has {actual:?}")]
    RowMismatch {
        node: String,
        listed: Vec<String>,
        actual: Vec<String>,
    },
    #[error("inflow node `{0}` has no prior")]
    MissingInflow(String),
    #[error("observation year {0} is not among the model years")]
    UnknownYear(i32),
}

/// Which blocks are shared across years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tying {
    pub phi: bool,
    pub sigma: bool,
}

impl Tying {
    pub const ALL: Tying = Tying { phi: true, sigma: true };
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Theta(usize),
    Fixed(f64),
}

#[derive(Debug, Clone)]
struct RowSlots {
    edges: Vec<usize>,
    /// Offset of the Dirichlet block, or `None` for a fixed row.
    offset: Option<usize>,
    fixed: Vec<f64>,
}

#[derive(Debug, Clone)]
struct YearBlock {
    year: i32,
    rows: Vec<RowSlots>,
    inflows: Vec<Slot>,
    sigmas: Vec<Slot>,
    data: ObservationSet,
}

/// A flow study over one or more years.
#[derive(Debug, Clone)]
pub struct MfaModel {
    net: FlowNetwork,
    layout: Layout,
    years: Vec<YearBlock>,
    sigma_groups: Vec<String>,
    tying: Tying,
}

impl MfaModel {
    /// Builds the model for the years present in `records`, or a single
    /// data-free year when there are none.
    pub fn new(
        net: FlowNetwork,
        assembly: &PriorAssembly,
        records: &[ObservationRecord],
        tying: Tying,
    ) -> Result<Self, ModelError> {
        let years: BTreeSet<i32> = records.iter().map(|r| r.year).collect();
        let years: Vec<i32> = if years.is_empty() { vec![0] } else { years.into_iter().collect() };
        Self::with_years(net, assembly, records, &years, tying)
    }

    pub fn with_years(
        net: FlowNetwork,
        assembly: &PriorAssembly,
        records: &[ObservationRecord],
        years: &[i32],
        tying: Tying,
    ) -> Result<Self, ModelError> {
        assembly.validate()?;
        if let Some(r) = records.iter().find(|r| !years.contains(&r.year)) {
            return Err(ModelError::UnknownYear(r.year));
        }
        let multi = years.len() > 1;
        let suffix = |shared: bool, y: i32| if multi && !shared { format!("@{y}") } else { String::new() };

        // Row priors in network order, checked against the edge set.
        let mut rows = Vec::new();
        for i in net.source_nodes() {
            let id = &net.node(i).id;
            let a = assembly
                .allocations
                .iter()
                .find(|a| &a.source == id)
                .ok_or_else(|| ModelError::MissingRow(id.clone()))?;
            let actual: Vec<String> = net.out_edges(i).iter().map(|&k| net.node(net.edges()[k].dst).id.clone()).collect();
            let mut edges = Vec::with_capacity(a.destinations.len());
            for d in &a.destinations {
                match actual.iter().position(|x| x == d) {
                    Some(p) => edges.push(net.out_edges(i)[p]),
                    None => {
                        return Err(ModelError::RowMismatch {
                            node: id.clone(),
                            listed: a.destinations.clone(),
                            actual,
                        })
                    }
                }
            }
            if edges.len() != actual.len() {
                return Err(ModelError::RowMismatch {
                    node: id.clone(),
                    listed: a.destinations.clone(),
                    actual,
                });
            }
            rows.push((a, edges));
        }
        let inflow_priors = net
            .inflow_nodes()
            .iter()
            .map(|&i| {
                let id = &net.node(i).id;
                assembly
                    .inflows
                    .iter()
                    .find(|p| &p.node == id)
                    .ok_or_else(|| ModelError::MissingInflow(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sigma_groups: Vec<String> = assembly.sigmas.iter().map(|s| s.group.clone()).collect();

        let mut b = LayoutBuilder::default();
        let mut shared_rows: Option<Vec<RowSlots>> = None;
        let mut shared_sigmas: Option<Vec<Slot>> = None;
        let mut blocks = Vec::with_capacity(years.len());
        for &y in years {
            let year_rows = match (&shared_rows, tying.phi) {
                (Some(r), true) => r.clone(),
                _ => {
                    let mut out = Vec::with_capacity(rows.len());
                    for (a, edges) in &rows {
                        let slot = match &a.prior {
                            RowPrior::Fixed { fixed } => RowSlots {
                                edges: edges.clone(),
                                offset: None,
                                fixed: fixed.clone(),
                            },
                            RowPrior::Dirichlet { alpha } => {
                                let names = a
                                    .destinations
                                    .iter()
                                    .map(|d| format!("phi[{}>{}]{}", a.source, d, suffix(tying.phi, y)))
                                    .collect();
                                RowSlots {
                                    edges: edges.clone(),
                                    offset: Some(b.dirichlet(names, alpha.clone())),
                                    fixed: Vec::new(),
                                }
                            }
                        };
                        out.push(slot);
                    }
                    if tying.phi {
                        shared_rows = Some(out.clone());
                    }
                    out
                }
            };
            let inflows = inflow_priors
                .iter()
                .map(|p| match &p.prior {
                    ParamPrior::Fixed { fixed } => Slot::Fixed(*fixed),
                    ParamPrior::Distribution(d) => {
                        Slot::Theta(b.scalar(format!("q[{}]{}", p.node, suffix(false, y)), d.clone()))
                    }
                })
                .collect();
            let sigmas = match (&shared_sigmas, tying.sigma) {
                (Some(s), true) => s.clone(),
                _ => {
                    let out: Vec<Slot> = assembly
                        .sigmas
                        .iter()
                        .map(|s| match &s.prior {
                            ParamPrior::Fixed { fixed } => Slot::Fixed(*fixed),
                            ParamPrior::Distribution(d) => Slot::Theta(
                                b.scalar(format!("sigma[{}]{}", s.group, suffix(tying.sigma, y)), d.clone()),
                            ),
                        })
                        .collect();
                    if tying.sigma {
                        shared_sigmas = Some(out.clone());
                    }
                    out
                }
            };
            let year_records: Vec<ObservationRecord> = records.iter().filter(|r| r.year == y).cloned().collect();
            let data = ObservationSet::compile(&net, &year_records, &sigma_groups)?;
            blocks.push(YearBlock {
                year: y,
                rows: year_rows,
                inflows,
                sigmas,
                data,
            });
        }
        Ok(Self {
            net,
            layout: b.finish(),
            years: blocks,
            sigma_groups,
            tying,
        })
    }

    pub fn network(&self) -> &FlowNetwork {
        &self.net
    }

    pub fn years(&self) -> Vec<i32> {
        self.years.iter().map(|y| y.year).collect()
    }

    pub fn sigma_groups(&self) -> &[String] {
        &self.sigma_groups
    }

    pub fn tying(&self) -> Tying {
        self.tying
    }

    pub fn n_observations(&self) -> usize {
        self.years.iter().map(|y| y.data.len()).sum()
    }

    /// Allocation fractions of year index `k`.
    pub fn allocation(&self, theta: &[f64], k: usize) -> Result<AllocationMatrix, NetworkError> {
        let mut values = vec![0.0; self.net.edges().len()];
        for row in &self.years[k].rows {
            match row.offset {
                Some(off) => {
                    for (j, &e) in row.edges.iter().enumerate() {
                        values[e] = theta[off + j];
                    }
                }
                None => {
                    for (&e, &v) in row.edges.iter().zip(&row.fixed) {
                        values[e] = v;
                    }
                }
            }
        }
        AllocationMatrix::new(&self.net, values)
    }

    pub fn inflows(&self, theta: &[f64], k: usize) -> Result<InflowVector, NetworkError> {
        let values = self.years[k].inflows.iter().map(|s| resolve(*s, theta)).collect();
        InflowVector::new(&self.net, values)
    }

    pub fn sigmas(&self, theta: &[f64], k: usize) -> Vec<f64> {
        self.years[k].sigmas.iter().map(|s| resolve(*s, theta)).collect()
    }

    /// Log likelihood of year index `k` alone.
    pub fn year_log_likelihood(&self, theta: &[f64], k: usize) -> f64 {
        let block = &self.years[k];
        if block.data.is_empty() {
            return 0.0;
        }
        let (Ok(phi), Ok(q)) = (self.allocation(theta, k), self.inflows(theta, k)) else {
            return f64::NEG_INFINITY;
        };
        block.data.log_likelihood(&self.net, &phi, &q, &self.sigmas(theta, k))
    }

    /// Flow solution of year index `k`.
    pub fn solve(&self, theta: &[f64], k: usize) -> Result<FlowSolution, NetworkError> {
        let phi = self.allocation(theta, k)?;
        let q = self.inflows(theta, k)?;
        crate::network::solve_flows(&self.net, &phi, &q)
    }
}

fn resolve(slot: Slot, theta: &[f64]) -> f64 {
    match slot {
        Slot::Theta(i) => theta[i],
        Slot::Fixed(v) => v,
    }
}

impl Target for MfaModel {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn log_likelihood(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.layout.dim() {
            return f64::NEG_INFINITY;
        }
        let mut total = 0.0;
        for k in 0..self.years.len() {
            total += self.year_log_likelihood(theta, k);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }
}
