//! Model evidence by prior Monte Carlo and Bayes factors between tying
//! hypotheses.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::likelihood::ObservationRecord;
use crate::model::{MfaModel, ModelError, Target, Tying};
use crate::network::FlowNetwork;
use crate::priors::PriorAssembly;
use crate::smc::{logsumexp, particle_rng};

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("need at least two prior samples, got {0}")]
    TooFewSamples(usize),
    #[error("every prior draw has zero likelihood")]
    AllInvalid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvidenceEstimate {
    pub log_evidence: f64,
    /// Delta-method standard error of `log_evidence`.
    pub mc_std_err: f64,
    pub n_samples: usize,
}

/// Evidence from log-likelihood values of prior draws.
pub fn evidence_from_log_likelihoods(log_l: &[f64]) -> Result<EvidenceEstimate, EvidenceError> {
    let n = log_l.len();
    if n < 2 {
        return Err(EvidenceError::TooFewSamples(n));
    }
    let lse = logsumexp(log_l);
    if lse == f64::NEG_INFINITY {
        return Err(EvidenceError::AllInvalid);
    }
    let nf = n as f64;
    let log_evidence = lse - nf.ln();
    // Ratios L_j / mean(L) have mean one; their spread gives the relative
    // error of the mean.
    let ratios: Vec<f64> = log_l.iter().map(|l| (l - log_evidence).exp()).collect();
    let var = ratios.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(EvidenceEstimate {
        log_evidence,
        mc_std_err: (var / nf).sqrt(),
        n_samples: n,
    })
}

/// `log((1/N) sum_j L(theta_j))` over `n_samples` prior draws of `target`.
pub fn estimate_log_evidence<T: Target + ?Sized>(
    target: &T,
    n_samples: usize,
    seed: u64,
) -> Result<EvidenceEstimate, EvidenceError> {
    if n_samples < 2 {
        return Err(EvidenceError::TooFewSamples(n_samples));
    }
    let layout = target.layout();
    let log_l: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|j| {
            let theta = layout.sample(&mut particle_rng(seed, 0, j));
            target.log_likelihood(&theta)
        })
        .collect();
    evidence_from_log_likelihoods(&log_l)
}

/// Summary of repeated evidence estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub trials: usize,
}

impl TrialSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / n.max(1) as f64,
            trials: n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EvidenceStrength {
    Extreme,
    VeryStrong,
    Strong,
    Moderate,
    Anecdotal,
    None,
}

/// Log Bayes factor with its interpretation on the Jeffreys scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesFactor {
    pub log_bf: f64,
    pub strength: EvidenceStrength,
    /// Whether the evidence favours the first model.
    pub favours_first: bool,
}

impl BayesFactor {
    pub fn label(&self) -> String {
        self.label_for("M1", "M2")
    }

    /// Jeffreys-scale reading with the two model names substituted.
    pub fn label_for(&self, first: &str, second: &str) -> String {
        let who = if self.favours_first { first } else { second };
        let grade = match self.strength {
            EvidenceStrength::None => return "no evidence either way".into(),
            EvidenceStrength::Extreme => "extreme",
            EvidenceStrength::VeryStrong => "very strong",
            EvidenceStrength::Strong => "strong",
            EvidenceStrength::Moderate => "moderate",
            EvidenceStrength::Anecdotal => "anecdotal",
        };
        format!("{grade} evidence for {who}")
    }
}

/// `log_ev_1 - log_ev_2` graded on the Jeffreys scale (thresholds 3, 10,
/// 30, 100 on the factor, symmetric for factors below one).
pub fn bayes_factor(log_ev_1: f64, log_ev_2: f64) -> BayesFactor {
    let log_bf = log_ev_1 - log_ev_2;
    let m = log_bf.abs();
    let strength = if log_bf == 0.0 {
        EvidenceStrength::None
    } else if m > 100f64.ln() {
        EvidenceStrength::Extreme
    } else if m > 30f64.ln() {
        EvidenceStrength::VeryStrong
    } else if m > 10f64.ln() {
        EvidenceStrength::Strong
    } else if m > 3f64.ln() {
        EvidenceStrength::Moderate
    } else {
        EvidenceStrength::Anecdotal
    };
    BayesFactor {
        log_bf,
        strength,
        favours_first: log_bf >= 0.0,
    }
}

/// Posterior model probabilities under equal prior model probabilities.
pub fn posterior_model_probabilities(log_evidences: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_evidences);
    log_evidences.iter().map(|l| (l - lse).exp()).collect()
}

/// A tying hypothesis over a multi-year study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelHypothesis {
    pub id: String,
    pub phi_time_invariant: bool,
    pub sigma_time_invariant: bool,
}

impl ModelHypothesis {
    pub fn new(id: impl Into<String>, phi_time_invariant: bool, sigma_time_invariant: bool) -> Self {
        Self {
            id: id.into(),
            phi_time_invariant,
            sigma_time_invariant,
        }
    }

    /// The four standard hypotheses: both shared (M1), shared fractions
    /// (M2), shared noise (M3), nothing shared (M4).
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("M1", true, true),
            Self::new("M2", true, false),
            Self::new("M3", false, true),
            Self::new("M4", false, false),
        ]
    }

    pub fn tying(&self) -> Tying {
        Tying {
            phi: self.phi_time_invariant,
            sigma: self.sigma_time_invariant,
        }
    }

    pub fn build(
        &self,
        net: &FlowNetwork,
        assembly: &PriorAssembly,
        records: &[ObservationRecord],
    ) -> Result<MfaModel, ModelError> {
        MfaModel::new(net.clone(), assembly, records, self.tying())
    }
}

/// Evidence of every hypothesis over repeated trials plus the pairwise
/// Bayes factors of the trial means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelComparison {
    pub hypotheses: Vec<ModelHypothesis>,
    pub dims: Vec<usize>,
    /// `log_evidence[m][t]` for hypothesis `m`, trial `t`.
    pub log_evidence: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    pub n_samples: usize,
}

impl ModelComparison {
    pub fn summary(&self, m: usize) -> TrialSummary {
        TrialSummary::from_values(&self.log_evidence[m])
    }

    /// Log Bayes factor of `a` over `b` per trial.
    pub fn log_bf_trials(&self, a: usize, b: usize) -> Vec<f64> {
        self.log_evidence[a]
            .iter()
            .zip(&self.log_evidence[b])
            .map(|(x, y)| x - y)
            .collect()
    }

    pub fn mean_bayes_factor(&self, a: usize, b: usize) -> BayesFactor {
        bayes_factor(self.summary(a).mean, self.summary(b).mean)
    }

    pub fn posterior_probabilities(&self) -> Vec<f64> {
        let means: Vec<f64> = (0..self.hypotheses.len()).map(|m| self.summary(m).mean).collect();
        posterior_model_probabilities(&means)
    }
}

/// Estimates evidence for each hypothesis over `trials` seeds derived from
/// `seed`. Trial `t` uses the same stream for every hypothesis.
pub fn compare_models(
    net: &FlowNetwork,
    assembly: &PriorAssembly,
    records: &[ObservationRecord],
    hypotheses: &[ModelHypothesis],
    n_samples: usize,
    trials: usize,
    seed: u64,
) -> Result<ModelComparison, EvidenceError> {
    let models = hypotheses
        .iter()
        .map(|h| h.build(net, assembly, records))
        .collect::<Result<Vec<_>, _>>()?;
    let mut log_evidence = vec![Vec::with_capacity(trials); models.len()];
    let mut std_err = vec![Vec::with_capacity(trials); models.len()];
    for t in 0..trials {
        let trial_seed = seed.wrapping_add(t as u64);
        for (m, model) in models.iter().enumerate() {
            let e = estimate_log_evidence(model, n_samples, trial_seed)?;
            log_evidence[m].push(e.log_evidence);
            std_err[m].push(e.mc_std_err);
        }
    }
    Ok(ModelComparison {
        hypotheses: hypotheses.to_vec(),
        dims: models.iter().map(|m| m.dim()).collect(),
        log_evidence,
        std_err,
        n_samples,
    })
}
