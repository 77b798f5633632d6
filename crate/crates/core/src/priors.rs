//! Prior families, hyperparameter fitting, and the flattened parameter
//! layout shared by the samplers.
//!
//! Allocation rows get Dirichlet priors whose marginals are Beta
//! distributions; hyperparameters are fitted by least squares between the
//! Beta bin masses and the pooled expert histograms. Inflows and noise
//! magnitudes get univariate priors with non-negative support.

use std::f64::consts::{FRAC_2_PI, PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::elicitation::ElicitedHistogram;
use crate::network::FlowNetwork;
use crate::optimize::NelderMead;

/// Objective value above which a Dirichlet fit is rejected.
pub const DEFAULT_FIT_THRESHOLD: f64 = 0.5;

/// Largest CDF residual accepted by the quantile fit.
pub const QUANTILE_FIT_TOLERANCE: f64 = 1e-3;

/// Upper bound of the default flat inflow prior (Mt).
pub const DEFAULT_INFLOW_CAP: f64 = 200.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior: {0}")]
    Invalid(String),
    #[error("Dirichlet fit objective {objective} exceeds threshold {threshold}")]
    FitDiverged { objective: f64, threshold: f64 },
    #[error("quantile constraints infeasible: {0}")]
    Infeasible(String),
    #[error("no prior for {0}")]
    Missing(String),
    #[error("parameter vector has {got} entries, layout expects {expected}")]
    Dimension { expected: usize, got: usize },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Univariate prior family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScalarPrior {
    /// Normal(`mu`, `sd`) restricted to `[lower, upper]`; a missing bound is
    /// infinite.
    TruncatedNormal {
        mu: f64,
        sd: f64,
        #[serde(default)]
        lower: Option<f64>,
        #[serde(default)]
        upper: Option<f64>,
    },
    Uniform {
        lower: f64,
        upper: f64,
    },
    HalfCauchy {
        scale: f64,
    },
}

impl ScalarPrior {
    pub fn truncated_normal(mu: f64, sd: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        ScalarPrior::TruncatedNormal { mu, sd, lower, upper }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let ok = match *self {
            ScalarPrior::TruncatedNormal { mu, sd, lower, upper } => {
                let (a, b) = (lower.unwrap_or(f64::NEG_INFINITY), upper.unwrap_or(f64::INFINITY));
                mu.is_finite() && sd > 0.0 && sd.is_finite() && a < b && self.log_mass() > f64::NEG_INFINITY
            }
            ScalarPrior::Uniform { lower, upper } => lower.is_finite() && upper.is_finite() && lower < upper,
            ScalarPrior::HalfCauchy { scale } => scale > 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(PriorError::Invalid(format!("{self:?}")))
        }
    }

    /// Support `[lower, upper]`, possibly infinite.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ScalarPrior::TruncatedNormal { lower, upper, .. } => {
                (lower.unwrap_or(f64::NEG_INFINITY), upper.unwrap_or(f64::INFINITY))
            }
            ScalarPrior::Uniform { lower, upper } => (lower, upper),
            ScalarPrior::HalfCauchy { .. } => (0.0, f64::INFINITY),
        }
    }

    /// Log of the normal mass inside the truncation bounds.
    fn log_mass(&self) -> f64 {
        match *self {
            ScalarPrior::TruncatedNormal { mu, sd, lower, upper } => {
                let a = lower.map_or(f64::NEG_INFINITY, |l| (l - mu) / sd);
                let b = upper.map_or(f64::INFINITY, |u| (u - mu) / sd);
                let z = if a > 0.0 {
                    std_normal_sf(a) - std_normal_sf(b)
                } else {
                    std_normal_cdf(b) - std_normal_cdf(a)
                };
                z.ln()
            }
            _ => 0.0,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if !(x >= lo && x <= hi) {
            return f64::NEG_INFINITY;
        }
        match *self {
            ScalarPrior::TruncatedNormal { mu, sd, .. } => {
                let t = (x - mu) / sd;
                -LN_SQRT_2PI - sd.ln() - 0.5 * t * t - self.log_mass()
            }
            ScalarPrior::Uniform { lower, upper } => -(upper - lower).ln(),
            ScalarPrior::HalfCauchy { scale } => {
                let t = x / scale;
                (2.0 / (PI * scale)).ln() - t.mul_add(t, 1.0).ln()
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        match *self {
            ScalarPrior::TruncatedNormal { mu, sd, lower, .. } => {
                let a = lower.map_or(f64::NEG_INFINITY, |l| (l - mu) / sd);
                let t = (x - mu) / sd;
                let z = self.log_mass().exp();
                let inside = if a > 0.0 {
                    std_normal_sf(a) - std_normal_sf(t)
                } else {
                    std_normal_cdf(t) - std_normal_cdf(a)
                };
                (inside / z).clamp(0.0, 1.0)
            }
            ScalarPrior::Uniform { lower, upper } => (x - lower) / (upper - lower),
            ScalarPrior::HalfCauchy { scale } => FRAC_2_PI * (x / scale).atan(),
        }
    }

    /// Inverse CDF for `u` in `(0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support();
        let x = match *self {
            ScalarPrior::TruncatedNormal { mu, sd, lower, upper } => {
                let a = lower.map_or(f64::NEG_INFINITY, |l| (l - mu) / sd);
                let b = upper.map_or(f64::INFINITY, |v| (v - mu) / sd);
                let t = if a > 0.0 {
                    // upper tail: work with survival probabilities
                    let (sa, sb) = (std_normal_sf(a), std_normal_sf(b));
                    -std_normal_quantile(sa - u * (sa - sb))
                } else {
                    let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
                    std_normal_quantile(fa + u * (fb - fa))
                };
                mu + sd * t
            }
            ScalarPrior::Uniform { lower, upper } => lower + u * (upper - lower),
            ScalarPrior::HalfCauchy { scale } => scale * (0.5 * PI * u).tan(),
        };
        x.clamp(lo, hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.support();
        loop {
            let u: f64 = rng.random();
            if u == 0.0 {
                continue;
            }
            let x = self.quantile(u);
            // keep draws in the open support so transforms stay finite
            if x > lo && x < hi {
                return x;
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ScalarPrior::TruncatedNormal { mu, sd, lower, upper } => {
                let a = lower.map_or(f64::NEG_INFINITY, |l| (l - mu) / sd);
                let b = upper.map_or(f64::INFINITY, |v| (v - mu) / sd);
                let pdf = |t: f64| if t.is_finite() { (-0.5 * t * t - LN_SQRT_2PI).exp() } else { 0.0 };
                mu + sd * (pdf(a) - pdf(b)) / self.log_mass().exp()
            }
            ScalarPrior::Uniform { lower, upper } => 0.5 * (lower + upper),
            ScalarPrior::HalfCauchy { .. } => f64::INFINITY,
        }
    }
}

/// Dirichlet prior over one allocation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    pub alpha: Vec<f64>,
}

impl DirichletPrior {
    pub fn new(alpha: Vec<f64>) -> Result<Self, PriorError> {
        let d = Self { alpha };
        d.validate()?;
        Ok(d)
    }

    pub fn flat(k: usize) -> Self {
        Self { alpha: vec![1.0; k] }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if self.alpha.len() < 2 || self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(PriorError::Invalid(format!(
                "Dirichlet needs at least two positive concentrations, got {:?}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Log density with respect to Lebesgue measure on the first `k - 1`
    /// coordinates of the simplex.
    pub fn ln_pdf(&self, phi: &[f64]) -> f64 {
        if phi.len() != self.alpha.len() || phi.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = phi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return f64::NEG_INFINITY;
        }
        let a0: f64 = self.alpha.iter().sum();
        let norm = ln_gamma(a0) - self.alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
        norm + self
            .alpha
            .iter()
            .zip(phi)
            .map(|(&a, &p)| if a == 1.0 { 0.0 } else { (a - 1.0) * p.ln() })
            .sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        for _ in 0..64 {
            let draws: Vec<f64> = self
                .alpha
                .iter()
                .map(|&a| Gamma::new(a, 1.0).expect("validated concentration").sample(rng))
                .collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 && draws.iter().all(|&g| g / total > 0.0) {
                return normalized(draws, total);
            }
        }
        // Concentrations this small underflow every gamma draw; fall back to
        // the mean rather than loop forever.
        let a0: f64 = self.alpha.iter().sum();
        self.alpha.iter().map(|a| a / a0).collect()
    }

    pub fn marginal_mean(&self, i: usize) -> f64 {
        self.alpha[i] / self.alpha.iter().sum::<f64>()
    }

    pub fn marginal_variance(&self, i: usize) -> f64 {
        let a0: f64 = self.alpha.iter().sum();
        let m = self.alpha[i] / a0;
        m * (1.0 - m) / (a0 + 1.0)
    }
}

fn normalized(mut v: Vec<f64>, total: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// CDF of the Beta marginal of component `i`: `Beta(alpha_i, sum_{k!=i} alpha_k)`.
pub fn beta_marginal_cdf(alpha: &[f64], i: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = alpha[i];
    let b: f64 = alpha.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| v).sum();
    beta_reg(a, b, x)
}

/// Result of fitting one allocation row.
#[derive(Debug, Clone, PartialEq)]
pub enum RowFit {
    /// The row has a single destination, so its fraction is fixed at one.
    Fixed,
    Dirichlet(DirichletFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFit {
    pub alpha: Vec<f64>,
    pub objective: f64,
    /// Objective at each multi-start initial point.
    pub start_objectives: Vec<f64>,
}

/// Sum over edges and bins of squared differences between Beta-marginal bin
/// masses and the histogram bin masses.
pub fn dirichlet_fit_objective(alpha: &[f64], histograms: &[ElicitedHistogram]) -> f64 {
    histograms
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let edges = h.edges();
            let cdf: Vec<f64> = edges.iter().map(|&x| beta_marginal_cdf(alpha, i, x)).collect();
            h.probs()
                .iter()
                .enumerate()
                .map(|(b, p)| {
                    let r = cdf[b + 1] - cdf[b] - p;
                    r * r
                })
                .sum::<f64>()
        })
        .sum()
}

/// Moment-matched concentrations from marginal histograms.
pub fn moment_matched_alpha(histograms: &[ElicitedHistogram]) -> Vec<f64> {
    let means: Vec<f64> = histograms.iter().map(|h| h.mean().clamp(1e-3, 1.0 - 1e-3)).collect();
    let msum: f64 = means.iter().sum();
    let means: Vec<f64> = means.iter().map(|m| m / msum).collect();
    let totals: Vec<f64> = histograms
        .iter()
        .zip(&means)
        .filter_map(|(h, &m)| {
            let v = h.variance();
            (v > 0.0).then(|| m * (1.0 - m) / v - 1.0).filter(|a0| *a0 > 0.0)
        })
        .collect();
    let a0 = if totals.is_empty() {
        histograms.len() as f64
    } else {
        (totals.iter().sum::<f64>() / totals.len() as f64).clamp(0.1, 1e4)
    };
    means.iter().map(|m| (m * a0).max(1e-3)).collect()
}

/// Fits Dirichlet concentrations for one source node from the pooled
/// marginal histogram of each outgoing edge (each on `[0, 1]`).
pub fn fit_dirichlet(histograms: &[ElicitedHistogram], threshold: f64) -> Result<RowFit, PriorError> {
    if histograms.is_empty() {
        return Err(PriorError::Invalid("no histograms to fit".into()));
    }
    if histograms.len() == 1 {
        return Ok(RowFit::Fixed);
    }
    if let Some(h) = histograms.iter().find(|h| h.lower() != 0.0 || h.upper() != 1.0) {
        return Err(PriorError::Invalid(format!(
            "allocation histograms must cover [0, 1], got [{}, {}]",
            h.lower(),
            h.upper()
        )));
    }
    let base = moment_matched_alpha(histograms);
    let objective = |log_alpha: &[f64]| {
        if log_alpha.iter().any(|v| v.abs() > 12.0) {
            return f64::INFINITY;
        }
        let alpha: Vec<f64> = log_alpha.iter().map(|v| v.exp()).collect();
        dirichlet_fit_objective(&alpha, histograms)
    };
    let optimizer = NelderMead {
        max_iter: 3000,
        f_tol: 1e-20,
        initial_step: 0.3,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut start_objectives = Vec::new();
    for scale in [1.0, 0.5, 2.0, 0.25, 4.0] {
        let start: Vec<f64> = base.iter().map(|a| (a * scale).ln().clamp(-11.0, 11.0)).collect();
        start_objectives.push(objective(&start));
        let m = optimizer.minimize(objective, &start);
        // polish from the best point
        let m = optimizer.minimize(objective, &m.x);
        if best.as_ref().is_none_or(|(_, v)| m.value < *v) {
            best = Some((m.x, m.value));
        }
    }
    let (x, value) = best.expect("at least one start");
    if !(value <= threshold) {
        return Err(PriorError::FitDiverged {
            objective: value,
            threshold,
        });
    }
    Ok(RowFit::Dirichlet(DirichletFit {
        alpha: x.iter().map(|v| v.exp()).collect(),
        objective: value,
        start_objectives,
    }))
}

/// Truncated normal fitted to CDF constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub prior: ScalarPrior,
    /// Largest absolute CDF mismatch over the constraints.
    pub residual: f64,
}

/// Finds `(mu, sd)` of a normal truncated to `[lower, upper]` whose CDF
/// passes through every `(x, level)` constraint.
pub fn fit_truncnormal_quantiles(
    constraints: &[(f64, f64)],
    lower: Option<f64>,
    upper: Option<f64>,
) -> Result<QuantileFit, PriorError> {
    if constraints.len() < 2 {
        return Err(PriorError::Infeasible("need at least two constraints".into()));
    }
    for &(x, c) in constraints {
        if !(c > 0.0 && c < 1.0 && x.is_finite()) {
            return Err(PriorError::Infeasible(format!("constraint ({x}, {c}) out of range")));
        }
        if lower.is_some_and(|l| x <= l) || upper.is_some_and(|u| x >= u) {
            return Err(PriorError::Infeasible(format!("constraint point {x} outside the truncation bounds")));
        }
    }
    let mut sorted = constraints.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| !(w[1].1 > w[0].1 && w[1].0 > w[0].0)) {
        return Err(PriorError::Infeasible(
            "CDF levels must increase strictly with x".into(),
        ));
    }
    let make = |p: &[f64]| ScalarPrior::truncated_normal(p[0], p[1].exp(), lower, upper);
    let residuals = |prior: &ScalarPrior| -> Vec<f64> { sorted.iter().map(|&(x, c)| prior.cdf(x) - c).collect() };
    let objective = |p: &[f64]| {
        let prior = make(p);
        if prior.validate().is_err() {
            return f64::INFINITY;
        }
        residuals(&prior).iter().map(|r| r * r).sum::<f64>()
    };

    let (x1, c1) = sorted[0];
    let (x2, c2) = sorted[sorted.len() - 1];
    let (z1, z2) = (std_normal_quantile(c1), std_normal_quantile(c2));
    let sd0 = ((x2 - x1) / (z2 - z1)).max(1e-6);
    let mu0 = x1 - sd0 * z1;
    let optimizer = NelderMead {
        max_iter: 4000,
        f_tol: 1e-24,
        initial_step: 0.2,
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (dm, ds) in [(0.0, 0.0), (0.5, 0.0), (-0.5, 0.0), (0.0, 0.5), (0.0, -0.5)] {
        let start = [mu0 + dm * sd0, sd0.ln() + ds];
        let m = optimizer.minimize(objective, &start);
        let m = optimizer.minimize(objective, &m.x);
        if best.as_ref().is_none_or(|(_, v)| m.value < *v) {
            best = Some((m.x, m.value));
        }
    }
    let (p, _) = best.expect("at least one start");
    let prior = make(&p);
    let residual = residuals(&prior).iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    if !(residual <= QUANTILE_FIT_TOLERANCE) {
        return Err(PriorError::Infeasible(format!("best residual {residual:.3e}")));
    }
    Ok(QuantileFit { prior, residual })
}

/// Least-squares truncated normal on histogram bin masses.
pub fn fit_truncnormal_histogram(
    h: &ElicitedHistogram,
    lower: Option<f64>,
    upper: Option<f64>,
) -> Result<(ScalarPrior, f64), PriorError> {
    let edges = h.edges();
    let make = |p: &[f64]| ScalarPrior::truncated_normal(p[0], p[1].exp(), lower, upper);
    let objective = |p: &[f64]| {
        let prior = make(p);
        if prior.validate().is_err() {
            return f64::INFINITY;
        }
        let cdf: Vec<f64> = edges.iter().map(|&x| prior.cdf(x)).collect();
        h.probs()
            .iter()
            .enumerate()
            .map(|(b, p)| (cdf[b + 1] - cdf[b] - p).powi(2))
            .sum::<f64>()
    };
    let sd0 = h.variance().sqrt().max(h.bin_width() / 4.0);
    let m = NelderMead {
        max_iter: 4000,
        f_tol: 1e-22,
        initial_step: 0.3,
    }
    .minimize(objective, &[h.mean(), sd0.ln()]);
    let prior = make(&m.x);
    prior.validate()?;
    Ok((prior, m.value))
}

/// Default noise prior: normal truncated to `[0, 0.5]` with `P(sigma <= 0.1)
/// = 0.5` and `P(sigma <= 0.3) = 0.95`.
pub fn default_sigma_prior() -> ScalarPrior {
    static PRIOR: OnceLock<ScalarPrior> = OnceLock::new();
    PRIOR
        .get_or_init(|| {
            fit_truncnormal_quantiles(&[(0.1, 0.5), (0.3, 0.95)], Some(0.0), Some(0.5))
                .expect("default noise constraints are feasible")
                .prior
        })
        .clone()
}

/// Prior on one allocation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowPrior {
    Fixed { fixed: Vec<f64> },
    Dirichlet { alpha: Vec<f64> },
}

/// Prior on a scalar parameter, or a fixed value excluded from inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamPrior {
    Fixed { fixed: f64 },
    Distribution(ScalarPrior),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPrior {
    pub source: String,
    pub destinations: Vec<String>,
    pub prior: RowPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowPrior {
    pub node: String,
    pub prior: ParamPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaPrior {
    pub group: String,
    pub prior: ParamPrior,
}

/// Priors for every parameter of one study: allocation rows, inflows, and
/// noise groups.
///
/// Flattening order: Dirichlet rows in declaration order (all components of
/// a row, destinations in declared order), then non-fixed inflows, then
/// non-fixed noise groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAssembly {
    #[serde(default)]
    pub allocations: Vec<AllocationPrior>,
    #[serde(default)]
    pub inflows: Vec<InflowPrior>,
    #[serde(default)]
    pub sigmas: Vec<SigmaPrior>,
}

impl PriorAssembly {
    /// Flat Dirichlet rows, fixed single-destination rows, `Uniform(0, cap)`
    /// inflows, and the default noise prior for each named group.
    pub fn weakly_informative<S: AsRef<str>>(net: &FlowNetwork, sigma_groups: &[S], inflow_cap: f64) -> Self {
        let allocations = net
            .source_nodes()
            .map(|i| {
                let dests: Vec<String> = net
                    .out_edges(i)
                    .iter()
                    .map(|&k| net.node(net.edges()[k].dst).id.clone())
                    .collect();
                let prior = if dests.len() == 1 {
                    RowPrior::Fixed { fixed: vec![1.0] }
                } else {
                    RowPrior::Dirichlet {
                        alpha: vec![1.0; dests.len()],
                    }
                };
                AllocationPrior {
                    source: net.node(i).id.clone(),
                    destinations: dests,
                    prior,
                }
            })
            .collect();
        let inflows = net
            .inflow_nodes()
            .iter()
            .map(|&i| InflowPrior {
                node: net.node(i).id.clone(),
                prior: ParamPrior::Distribution(ScalarPrior::Uniform {
                    lower: 0.0,
                    upper: inflow_cap,
                }),
            })
            .collect();
        let sigma = default_sigma_prior();
        let sigmas = sigma_groups
            .iter()
            .map(|g| SigmaPrior {
                group: g.as_ref().to_string(),
                prior: ParamPrior::Distribution(sigma.clone()),
            })
            .collect();
        Self {
            allocations,
            inflows,
            sigmas,
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        for a in &self.allocations {
            match &a.prior {
                RowPrior::Dirichlet { alpha } => {
                    DirichletPrior { alpha: alpha.clone() }.validate()?;
                    if alpha.len() != a.destinations.len() {
                        return Err(PriorError::Invalid(format!(
                            "row `{}` has {} destinations but {} concentrations",
                            a.source,
                            a.destinations.len(),
                            alpha.len()
                        )));
                    }
                }
                RowPrior::Fixed { fixed } => {
                    let sum: f64 = fixed.iter().sum();
                    if fixed.len() != a.destinations.len()
                        || fixed.iter().any(|v| !(0.0..=1.0).contains(v))
                        || (sum - 1.0).abs() > 1e-12
                    {
                        return Err(PriorError::Invalid(format!("fixed row `{}` is not a valid allocation", a.source)));
                    }
                }
            }
        }
        for p in self.inflows.iter().map(|p| &p.prior).chain(self.sigmas.iter().map(|s| &s.prior)) {
            if let ParamPrior::Distribution(d) = p {
                d.validate()?;
            }
        }
        for s in &self.sigmas {
            let bad = match &s.prior {
                ParamPrior::Fixed { fixed } => !(*fixed > 0.0),
                ParamPrior::Distribution(d) => d.support().0 < 0.0,
            };
            if bad {
                return Err(PriorError::Invalid(format!("noise group `{}` must have positive support", s.group)));
            }
        }
        Ok(())
    }

    /// Layout of the parameter vector with a single copy of every block.
    pub fn layout(&self) -> Layout {
        let mut b = LayoutBuilder::default();
        for a in &self.allocations {
            if let RowPrior::Dirichlet { alpha } = &a.prior {
                let names = a
                    .destinations
                    .iter()
                    .map(|d| format!("phi[{}>{}]", a.source, d))
                    .collect();
                b.dirichlet(names, alpha.clone());
            }
        }
        for q in &self.inflows {
            if let ParamPrior::Distribution(d) = &q.prior {
                b.scalar(format!("q[{}]", q.node), d.clone());
            }
        }
        for s in &self.sigmas {
            if let ParamPrior::Distribution(d) = &s.prior {
                b.scalar(format!("sigma[{}]", s.group), d.clone());
            }
        }
        b.finish()
    }
}

/// Pooled-histogram key of the allocation fraction on `src > dst`.
pub fn allocation_key(src: &str, dst: &str) -> String {
    format!("ratio:{src}>{dst}")
}

/// Pooled-histogram key of the external inflow at `node`.
pub fn inflow_key(node: &str) -> String {
    format!("input:{node}")
}

/// Options for [`assemble_priors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    pub inflow_cap: f64,
    pub fit_threshold: f64,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            inflow_cap: DEFAULT_INFLOW_CAP,
            fit_threshold: DEFAULT_FIT_THRESHOLD,
        }
    }
}

/// Builds priors from pooled histograms keyed by [`allocation_key`] and
/// [`inflow_key`]. Rows with every destination elicited get a fitted
/// Dirichlet, other rows and inflows fall back to the weakly-informative
/// defaults. Returns the assembly and one note per fallback.
pub fn assemble_priors<S: AsRef<str>>(
    net: &FlowNetwork,
    pooled: &std::collections::BTreeMap<String, ElicitedHistogram>,
    sigma_groups: &[S],
    options: AssemblyOptions,
) -> Result<(PriorAssembly, Vec<String>), PriorError> {
    let mut assembly = PriorAssembly::weakly_informative(net, sigma_groups, options.inflow_cap);
    let mut notes = Vec::new();
    for a in &mut assembly.allocations {
        let keys: Vec<String> = a.destinations.iter().map(|d| allocation_key(&a.source, d)).collect();
        let found: Vec<&ElicitedHistogram> = keys.iter().filter_map(|k| pooled.get(k)).collect();
        if found.is_empty() || a.destinations.len() == 1 {
            continue;
        }
        if found.len() < keys.len() {
            notes.push(format!(
                "row `{}`: {} of {} destinations elicited, using a flat Dirichlet",
                a.source,
                found.len(),
                keys.len()
            ));
            continue;
        }
        let hists: Vec<ElicitedHistogram> = found.into_iter().cloned().collect();
        match fit_dirichlet(&hists, options.fit_threshold)? {
            RowFit::Fixed => a.prior = RowPrior::Fixed { fixed: vec![1.0] },
            RowFit::Dirichlet(fit) => {
                log::info!("row `{}`: alpha {:?}, objective {:.3e}", a.source, fit.alpha, fit.objective);
                a.prior = RowPrior::Dirichlet { alpha: fit.alpha };
            }
        }
    }
    for q in &mut assembly.inflows {
        if let Some(h) = pooled.get(&inflow_key(&q.node)) {
            let (prior, objective) = fit_truncnormal_histogram(h, Some(0.0), None)?;
            log::info!("inflow `{}`: {:?}, objective {:.3e}", q.node, prior, objective);
            q.prior = ParamPrior::Distribution(prior);
        } else {
            notes.push(format!("inflow `{}` not elicited, using Uniform(0, {})", q.node, options.inflow_cap));
        }
    }
    Ok((assembly, notes))
}

/// Log prior density of a flattened parameter vector.
pub fn prior_logpdf(assembly: &PriorAssembly, theta: &[f64]) -> f64 {
    assembly.layout().log_prior(theta)
}

/// `n` i.i.d. prior draws, reproducible from `seed`.
pub fn prior_sample(assembly: &PriorAssembly, seed: u64, n: usize) -> Vec<Vec<f64>> {
    let layout = assembly.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| layout.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind {
    Dirichlet(DirichletPrior),
    Scalar(ScalarPrior),
}

/// A contiguous run of parameters sharing one prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub names: Vec<String>,
    pub kind: BlockKind,
    /// Offset in the natural parameter vector.
    pub offset: usize,
    /// Offset in the unconstrained vector.
    pub unconstrained_offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn unconstrained_len(&self) -> usize {
        match self.kind {
            BlockKind::Dirichlet(_) => self.names.len() - 1,
            BlockKind::Scalar(_) => 1,
        }
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    blocks: Vec<Block>,
    dim: usize,
    udim: usize,
}

impl LayoutBuilder {
    /// Adds a Dirichlet block and returns its offset.
    pub fn dirichlet(&mut self, names: Vec<String>, alpha: Vec<f64>) -> usize {
        let offset = self.dim;
        let block = Block {
            kind: BlockKind::Dirichlet(DirichletPrior { alpha }),
            offset,
            unconstrained_offset: self.udim,
            names,
        };
        self.dim += block.len();
        self.udim += block.unconstrained_len();
        self.blocks.push(block);
        offset
    }

    /// Adds a scalar block and returns its offset.
    pub fn scalar(&mut self, name: String, prior: ScalarPrior) -> usize {
        let offset = self.dim;
        self.blocks.push(Block {
            names: vec![name],
            kind: BlockKind::Scalar(prior),
            offset,
            unconstrained_offset: self.udim,
        });
        self.dim += 1;
        self.udim += 1;
        offset
    }

    pub fn finish(self) -> Layout {
        Layout {
            blocks: self.blocks,
            dim: self.dim,
            udim: self.udim,
        }
    }
}

/// Flattened parameter vector description with priors and the bijection to
/// an unconstrained space used by random-walk proposals.
///
/// Scalars with a one-sided bound move on the log scale, two-sided bounds on
/// the logit scale, and Dirichlet rows in additive log-ratio coordinates
/// (last component as reference).
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    blocks: Vec<Block>,
    dim: usize,
    udim: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unconstrained_dim(&self) -> usize {
        self.udim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.names.iter().cloned()).collect()
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.dim {
            return f64::NEG_INFINITY;
        }
        let mut total = 0.0;
        for b in &self.blocks {
            let v = &theta[b.offset..b.offset + b.len()];
            total += match &b.kind {
                BlockKind::Dirichlet(d) => d.ln_pdf(v),
                BlockKind::Scalar(s) => s.ln_pdf(v[0]),
            };
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        total
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            match &b.kind {
                BlockKind::Dirichlet(d) => theta.extend(d.sample(rng)),
                BlockKind::Scalar(s) => theta.push(s.sample(rng)),
            }
        }
        theta
    }

    pub fn to_unconstrained(&self, theta: &[f64]) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.udim);
        for b in &self.blocks {
            let v = &theta[b.offset..b.offset + b.len()];
            match &b.kind {
                BlockKind::Dirichlet(_) => {
                    let last = v[v.len() - 1].ln();
                    u.extend(v[..v.len() - 1].iter().map(|p| p.ln() - last));
                }
                BlockKind::Scalar(s) => u.push(scalar_forward(s.support(), v[0])),
            }
        }
        u
    }

    /// Maps back to the natural space and returns the log absolute
    /// Jacobian determinant of that map.
    pub fn from_unconstrained(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut theta = Vec::with_capacity(self.dim);
        let mut log_jac = 0.0;
        for b in &self.blocks {
            let w = &u[b.unconstrained_offset..b.unconstrained_offset + b.unconstrained_len()];
            match &b.kind {
                BlockKind::Dirichlet(_) => {
                    let max = w.iter().copied().fold(0.0_f64, f64::max);
                    let mut e: Vec<f64> = w.iter().map(|x| (x - max).exp()).collect();
                    e.push((-max).exp());
                    let total: f64 = e.iter().sum();
                    let log_total = total.ln();
                    // log phi_i = w_i - max - log_total, reference has w = 0
                    log_jac += w.iter().map(|x| x - max - log_total).sum::<f64>() + (-max - log_total);
                    theta.extend(normalized(e, total));
                }
                BlockKind::Scalar(s) => {
                    let (x, lj) = scalar_inverse(s.support(), w[0]);
                    theta.push(x);
                    log_jac += lj;
                }
            }
        }
        (theta, log_jac)
    }
}

fn scalar_forward((lo, hi): (f64, f64), x: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let s = (x - lo) / (hi - lo);
            (s / (1.0 - s)).ln()
        }
        (true, false) => (x - lo).ln(),
        (false, true) => (hi - x).ln(),
        (false, false) => x,
    }
}

fn scalar_inverse((lo, hi): (f64, f64), u: f64) -> (f64, f64) {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let width = hi - lo;
            // log s and log(1 - s) computed stably
            let log_s = -softplus(-u);
            let log_1s = -softplus(u);
            let x = lo + width * log_s.exp();
            (x.clamp(lo, hi), width.ln() + log_s + log_1s)
        }
        (true, false) => (lo + u.exp(), u),
        (false, true) => (hi - u.exp(), u),
        (false, false) => (u, 0.0),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
