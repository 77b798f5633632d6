//! Expert scoring and opinion pooling for fixed-interval elicitation.
//!
//! Each expert answers every question with a histogram over equal-width bins
//! of a declared support. Seeding questions have known answers and drive
//! Cooke's classical weights `w ∝ C · K`:
//!
//! * `K` (information) is the mean KL divergence of the expert's seeding
//!   histograms from the uniform histogram on the same bins.
//! * `C` (calibration) is the chi-square p-value of `2 n D_KL(P || Q)`, where
//!   `P` holds the fractions of observed answers falling in each of the
//!   expert's interquantile intervals and `Q` is the nominal interval mass.
//!
//! Weighted histograms are then combined with a linear or logarithmic pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities must sum to one within this tolerance.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default number of fixed intervals per question.
pub const DEFAULT_BINS: usize = 10;

/// Nominal interquantile masses for the 5 %, 50 % and 95 % quantiles.
pub const DEFAULT_INTERQUANTILE: [f64; 4] = [0.05, 0.45, 0.45, 0.05];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElicitationError {
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("P has mass {p} at index {index} where Q is zero")]
    SupportMismatch { index: usize, p: f64 },
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("expert `{0}` has no seeding responses")]
    NoSeeding(String),
    #[error("no observation recorded for seeding question `{0}`")]
    MissingObservation(String),
    #[error("invalid interquantile probabilities: {0}")]
    InvalidInterquantile(String),
    #[error("no experts supplied")]
    NoExperts,
    #[error("weights: {0}")]
    InvalidWeights(String),
    #[error("histograms do not share a bin grid")]
    GridMismatch,
    #[error("logarithmic pool has zero mass in every bin")]
    DegeneratePool,
    #[error("target support [{lower}, {upper}] truncates {lost} of the histogram mass")]
    TargetTooNarrow { lower: f64, upper: f64, lost: f64 },
}

/// One fixed-interval answer: equal-width bins on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHistogram")]
pub struct ElicitedHistogram {
    lower: f64,
    upper: f64,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawHistogram {
    lower: f64,
    upper: f64,
    probs: Vec<f64>,
}

impl TryFrom<RawHistogram> for ElicitedHistogram {
    type Error = ElicitationError;

    fn try_from(raw: RawHistogram) -> Result<Self, Self::Error> {
        Self::new(raw.lower, raw.upper, raw.probs)
    }
}

impl ElicitedHistogram {
    pub fn new(lower: f64, upper: f64, probs: Vec<f64>) -> Result<Self, ElicitationError> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(ElicitationError::InvalidHistogram(format!(
                "support [{lower}, {upper}] is not an ordered finite interval"
            )));
        }
        if probs.is_empty() {
            return Err(ElicitationError::InvalidHistogram("no bins".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(ElicitationError::InvalidHistogram(format!(
                "bin probability {p} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ElicitationError::InvalidHistogram(format!(
                "bin probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { lower, upper, probs })
    }

    /// Uniform histogram with `n` bins.
    pub fn uniform(lower: f64, upper: f64, n: usize) -> Result<Self, ElicitationError> {
        Self::new(lower, upper, vec![1.0 / n as f64; n])
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_bins(&self) -> usize {
        self.probs.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper - self.lower) / self.probs.len() as f64
    }

    /// `n_bins + 1` bin edges.
    pub fn edges(&self) -> Vec<f64> {
        let n = self.probs.len();
        (0..=n)
            .map(|k| {
                if k == n {
                    self.upper
                } else {
                    self.lower + k as f64 * self.bin_width()
                }
            })
            .collect()
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.probs.len() == other.probs.len() && self.lower == other.lower && self.upper == other.upper
    }

    /// Piecewise-linear CDF (uniform density within each bin).
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        let w = self.bin_width();
        let pos = (x - self.lower) / w;
        let k = (pos.floor() as usize).min(self.probs.len() - 1);
        let below: f64 = self.probs[..k].iter().sum();
        (below + self.probs[k] * (pos - k as f64)).min(1.0)
    }

    /// Smallest `x` with `cdf(x) = level`, interpolating linearly within bins.
    pub fn quantile(&self, level: f64) -> f64 {
        let edges = self.edges();
        let mut cum = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > 0.0 && cum + p >= level {
                let frac = ((level - cum) / p).clamp(0.0, 1.0);
                return edges[k] + frac * (edges[k + 1] - edges[k]);
            }
            cum += p;
        }
        // Level above the accumulated mass (roundoff): last non-empty bin edge.
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        edges[last + 1]
    }

    /// Upper edge of the highest bin with positive mass.
    pub fn upper_mass_bound(&self) -> f64 {
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.edges()[last + 1]
    }

    pub fn mean(&self) -> f64 {
        let w = self.bin_width();
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| p * (self.lower + (k as f64 + 0.5) * w))
            .sum()
    }

    /// Variance under uniform-within-bin density.
    pub fn variance(&self) -> f64 {
        let w = self.bin_width();
        let m = self.mean();
        let second: f64 = self
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let c = self.lower + (k as f64 + 0.5) * w;
                p * (c * c + w * w / 12.0)
            })
            .sum();
        (second - m * m).max(0.0)
    }
}

/// Answer to one seeding question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedingResponse {
    pub question_id: String,
    #[serde(flatten)]
    pub histogram: ElicitedHistogram,
    #[serde(default = "default_interquantile")]
    pub interquantile_probs: Vec<f64>,
}

fn default_interquantile() -> Vec<f64> {
    DEFAULT_INTERQUANTILE.to_vec()
}

impl SeedingResponse {
    pub fn new(question_id: impl Into<String>, histogram: ElicitedHistogram) -> Self {
        Self {
            question_id: question_id.into(),
            histogram,
            interquantile_probs: default_interquantile(),
        }
    }

    /// Quantile edges at the cumulative levels implied by the interquantile
    /// probabilities (5 %, 50 %, 95 % by default).
    pub fn quantile_edges(&self) -> Result<Vec<f64>, ElicitationError> {
        let levels = cumulative_levels(&self.interquantile_probs)?;
        Ok(levels.iter().map(|&c| self.histogram.quantile(c)).collect())
    }
}

fn cumulative_levels(q: &[f64]) -> Result<Vec<f64>, ElicitationError> {
    if q.len() < 2 {
        return Err(ElicitationError::InvalidInterquantile("need at least two intervals".into()));
    }
    if q.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(ElicitationError::InvalidInterquantile(
            "interval probabilities must be positive".into(),
        ));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(ElicitationError::InvalidInterquantile(format!("sum to {sum}, expected 1")));
    }
    Ok(q[..q.len() - 1]
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect())
}

/// All answers from one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertResponseSet {
    pub expert_id: String,
    pub seeding: Vec<SeedingResponse>,
    /// Target quantity id to the elicited histogram.
    #[serde(default)]
    pub targets: BTreeMap<String, ElicitedHistogram>,
}

/// Cooke scores and the normalized weight of one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeight {
    pub expert_id: String,
    pub calibration: f64,
    pub information: f64,
    pub weight: f64,
}

/// `sum p_i ln(p_i / q_i)` with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, ElicitationError> {
    if p.len() != q.len() {
        return Err(ElicitationError::LengthMismatch(p.len(), q.len()));
    }
    let mut d = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(ElicitationError::SupportMismatch { index, p: pi });
            }
            d += pi * (pi / qi).ln();
        }
    }
    Ok(d.max(0.0))
}

/// Mean KL divergence of the seeding histograms from uniform.
pub fn information_score(expert: &ExpertResponseSet) -> Result<f64, ElicitationError> {
    if expert.seeding.is_empty() {
        return Err(ElicitationError::NoSeeding(expert.expert_id.clone()));
    }
    let mut total = 0.0;
    for r in &expert.seeding {
        let n = r.histogram.n_bins();
        let uniform = vec![1.0 / n as f64; n];
        total += kl_divergence(r.histogram.probs(), &uniform)?;
    }
    Ok(total / expert.seeding.len() as f64)
}

/// Survival function of the chi-square distribution, `P(X > s)`.
pub fn chi_square_survival(s: f64, dof: usize) -> f64 {
    if s <= 0.0 {
        return 1.0;
    }
    if s.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(dof as f64 / 2.0, s / 2.0)
}

/// Breakdown of one expert's calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub score: f64,
    /// Likelihood-ratio statistic `2 n D_KL(P || Q)`.
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    /// Empirical interval fractions `P`.
    pub interval_fractions: Vec<f64>,
    /// Seeding questions whose observation lay outside the declared support;
    /// they are counted in the adjacent tail interval.
    pub outside_support: Vec<String>,
}

/// Cooke calibration score of one expert against observed seeding answers.
pub fn calibration(
    expert: &ExpertResponseSet,
    observations: &BTreeMap<String, f64>,
) -> Result<Calibration, ElicitationError> {
    let first = expert
        .seeding
        .first()
        .ok_or_else(|| ElicitationError::NoSeeding(expert.expert_id.clone()))?;
    let q = &first.interquantile_probs;
    cumulative_levels(q)?;
    let mut counts = vec![0usize; q.len()];
    let mut outside = Vec::new();
    for r in &expert.seeding {
        if r.interquantile_probs != *q {
            return Err(ElicitationError::InvalidInterquantile(format!(
                "question `{}` uses different interval probabilities",
                r.question_id
            )));
        }
        let x = *observations
            .get(&r.question_id)
            .ok_or_else(|| ElicitationError::MissingObservation(r.question_id.clone()))?;
        if x < r.histogram.lower() || x > r.histogram.upper() {
            outside.push(r.question_id.clone());
        }
        let edges = r.quantile_edges()?;
        let interval = edges.iter().filter(|&&t| x > t).count();
        counts[interval] += 1;
    }
    let n = expert.seeding.len() as f64;
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let statistic = 2.0 * n * kl_divergence(&p, q)?;
    let dof = q.len() - 1;
    Ok(Calibration {
        score: chi_square_survival(statistic, dof),
        statistic,
        degrees_of_freedom: dof,
        interval_fractions: p,
        outside_support: outside,
    })
}

pub fn calibration_score(
    expert: &ExpertResponseSet,
    observations: &BTreeMap<String, f64>,
) -> Result<f64, ElicitationError> {
    calibration(expert, observations).map(|c| c.score)
}

/// Cooke's classical weights `w_l ∝ C_l K_l`, falling back to equal weights
/// when every product is zero.
pub fn cooke_weights(
    experts: &[ExpertResponseSet],
    observations: &BTreeMap<String, f64>,
) -> Result<Vec<ExpertWeight>, ElicitationError> {
    if experts.is_empty() {
        return Err(ElicitationError::NoExperts);
    }
    let scores = experts
        .iter()
        .map(|e| Ok((calibration_score(e, observations)?, information_score(e)?)))
        .collect::<Result<Vec<_>, ElicitationError>>()?;
    Ok(weights_from_scores(experts, &scores))
}

fn weights_from_scores(experts: &[ExpertResponseSet], scores: &[(f64, f64)]) -> Vec<ExpertWeight> {
    let total: f64 = scores.iter().map(|(c, k)| c * k).sum();
    let equal = !(total > 0.0 && total.is_finite());
    if equal {
        log::warn!("all calibration x information products are zero; using equal expert weights");
    }
    experts
        .iter()
        .zip(scores)
        .map(|(e, &(c, k))| ExpertWeight {
            expert_id: e.expert_id.clone(),
            calibration: c,
            information: k,
            weight: if equal {
                1.0 / experts.len() as f64
            } else {
                c * k / total
            },
        })
        .collect()
}

fn check_pool_inputs(histograms: &[ElicitedHistogram], weights: &[f64]) -> Result<(), ElicitationError> {
    let first = histograms.first().ok_or(ElicitationError::NoExperts)?;
    if histograms.len() != weights.len() {
        return Err(ElicitationError::InvalidWeights(format!(
            "{} weights for {} histograms",
            weights.len(),
            histograms.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(ElicitationError::InvalidWeights("weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(ElicitationError::InvalidWeights(format!("weights sum to {sum}, expected 1")));
    }
    if histograms.iter().any(|h| !h.same_grid(first)) {
        return Err(ElicitationError::GridMismatch);
    }
    Ok(())
}

/// Weighted mixture, bin by bin.
pub fn pool_linear(histograms: &[ElicitedHistogram], weights: &[f64]) -> Result<ElicitedHistogram, ElicitationError> {
    check_pool_inputs(histograms, weights)?;
    let first = &histograms[0];
    let mut probs = vec![0.0; first.n_bins()];
    for (h, &w) in histograms.iter().zip(weights) {
        for (acc, p) in probs.iter_mut().zip(h.probs()) {
            *acc += w * p;
        }
    }
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    ElicitedHistogram::new(first.lower, first.upper, probs)
}

/// Weighted geometric mean, bin by bin, renormalized. A zero-weight expert
/// does not constrain the pool.
pub fn pool_logarithmic(
    histograms: &[ElicitedHistogram],
    weights: &[f64],
) -> Result<ElicitedHistogram, ElicitationError> {
    check_pool_inputs(histograms, weights)?;
    let first = &histograms[0];
    let n = first.n_bins();
    let log_mass: Vec<f64> = (0..n)
        .map(|b| {
            histograms
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(h, &w)| {
                    let p = h.probs()[b];
                    if p > 0.0 {
                        w * p.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .sum()
        })
        .collect();
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ElicitationError::DegeneratePool);
    }
    let unnorm: Vec<f64> = log_mass.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    ElicitedHistogram::new(first.lower, first.upper, unnorm.iter().map(|u| u / z).collect())
}

/// Pooling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Linear,
    Logarithmic,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Pooling::Linear),
            "logarithmic" | "log" => Ok(Pooling::Logarithmic),
            other => Err(format!("unknown pooling `{other}` (expected linear or logarithmic)")),
        }
    }
}

/// Reassigns mass onto `target_bins` equal bins of `[lower, upper]`,
/// assuming uniform density within each source bin.
pub fn rebin(
    h: &ElicitedHistogram,
    target: (f64, f64),
    target_bins: usize,
) -> Result<ElicitedHistogram, ElicitationError> {
    let (lower, upper) = target;
    if !(lower < upper) || target_bins == 0 {
        return Err(ElicitationError::InvalidHistogram(format!(
            "target grid [{lower}, {upper}] with {target_bins} bins"
        )));
    }
    let src = h.edges();
    let width = (upper - lower) / target_bins as f64;
    let dst: Vec<f64> = (0..=target_bins)
        .map(|k| if k == target_bins { upper } else { lower + k as f64 * width })
        .collect();
    let mut out = vec![0.0; target_bins];
    for (i, &p) in h.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let (a, b) = (src[i], src[i + 1]);
        let density = p / (b - a);
        for (k, slot) in out.iter_mut().enumerate() {
            let overlap = b.min(dst[k + 1]) - a.max(dst[k]);
            if overlap > 0.0 {
                *slot += density * overlap;
            }
        }
    }
    let kept: f64 = out.iter().sum();
    let lost = 1.0 - kept;
    if lost > 1e-12 {
        return Err(ElicitationError::TargetTooNarrow { lower, upper, lost });
    }
    out.iter_mut().for_each(|p| *p /= kept);
    ElicitedHistogram::new(lower, upper, out)
}

/// Rebins every histogram onto the union of their supports with
/// `n_bins` bins, then pools.
pub fn pool(
    histograms: &[ElicitedHistogram],
    weights: &[f64],
    method: Pooling,
    n_bins: usize,
) -> Result<ElicitedHistogram, ElicitationError> {
    let first = histograms.first().ok_or(ElicitationError::NoExperts)?;
    let grid = if histograms.iter().all(|h| h.same_grid(first)) {
        histograms.to_vec()
    } else {
        let lower = histograms.iter().map(|h| h.lower()).fold(f64::INFINITY, f64::min);
        let upper = histograms.iter().map(|h| h.upper()).fold(f64::NEG_INFINITY, f64::max);
        histograms
            .iter()
            .map(|h| rebin(h, (lower, upper), n_bins))
            .collect::<Result<Vec<_>, _>>()?
    };
    match method {
        Pooling::Linear => pool_linear(&grid, weights),
        Pooling::Logarithmic => pool_logarithmic(&grid, weights),
    }
}

/// Pools every target quantity answered by at least one expert, renormalizing
/// weights over the experts who answered it.
pub fn aggregate_targets(
    experts: &[ExpertResponseSet],
    weights: &[ExpertWeight],
    method: Pooling,
) -> Result<BTreeMap<String, ElicitedHistogram>, ElicitationError> {
    let by_id: BTreeMap<&str, f64> = weights.iter().map(|w| (w.expert_id.as_str(), w.weight)).collect();
    let mut quantities: BTreeMap<&str, Vec<(&ElicitedHistogram, f64)>> = BTreeMap::new();
    for e in experts {
        let w = *by_id
            .get(e.expert_id.as_str())
            .ok_or_else(|| ElicitationError::InvalidWeights(format!("no weight for expert `{}`", e.expert_id)))?;
        for (id, h) in &e.targets {
            quantities.entry(id).or_default().push((h, w));
        }
    }
    let mut out = BTreeMap::new();
    for (id, answers) in quantities {
        let total: f64 = answers.iter().map(|(_, w)| w).sum();
        let n = answers.len() as f64;
        let ws: Vec<f64> = answers
            .iter()
            .map(|(_, w)| if total > 0.0 { w / total } else { 1.0 / n })
            .collect();
        let hs: Vec<ElicitedHistogram> = answers.iter().map(|(h, _)| (*h).clone()).collect();
        let n_bins = hs.iter().map(|h| h.n_bins()).max().unwrap_or(DEFAULT_BINS);
        out.insert(id.to_string(), pool(&hs, &ws, method, n_bins)?);
    }
    Ok(out)
}
