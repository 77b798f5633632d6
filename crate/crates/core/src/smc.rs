//! Tempered Sequential Monte Carlo.
//!
//! Particles start as prior draws at `beta = 0`. Each stage picks the next
//! temperature by bisection on the conditional effective sample size,
//! reweights, resamples when the ESS drops below the threshold, and then
//! runs random-walk Metropolis moves in the unconstrained space of the
//! target's layout. The last stage always resamples at `beta = 1`.
//!
//! Every particle owns a ChaCha stream derived from `(seed, stage, index)`,
//! so results do not depend on how many worker threads run the moves.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::likelihood::tempered_log_likelihood;
use crate::model::Target;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmcError {
    #[error("invalid SMC configuration: {0}")]
    Config(String),
    #[error("population degenerated at stage {stage} (beta = {beta:.3e}, ESS = {ess:.3})")]
    Degenerate { stage: usize, beta: f64, ess: f64 },
    #[error("could not build worker pool: {0}")]
    Workers(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Metropolis moves per particle per stage.
    pub mh_steps: usize,
    /// Resample when the ESS falls below this; `None` means `N / 2`.
    pub ess_threshold: Option<f64>,
    /// Conditional ESS fraction targeted when choosing the next temperature.
    pub target_rel_ess: f64,
    pub seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    /// Initial random-walk scale multiplier; `None` means `2.38 / sqrt(d)`.
    pub initial_scale: Option<f64>,
    /// Whether to adapt the scale toward the target acceptance rate.
    pub adapt_scale: bool,
    pub target_acceptance: f64,
    pub max_stages: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            mh_steps: 10,
            ess_threshold: None,
            target_rel_ess: 0.5,
            seed: 0,
            workers: None,
            initial_scale: None,
            adapt_scale: true,
            target_acceptance: 0.25,
            max_stages: 10_000,
        }
    }
}

impl SmcConfig {
    pub fn with_particles(n: usize, seed: u64) -> Self {
        Self {
            n_particles: n,
            seed,
            ..Self::default()
        }
    }

    pub fn threshold(&self) -> f64 {
        self.ess_threshold.unwrap_or(self.n_particles as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<(), SmcError> {
        let n = self.n_particles as f64;
        let t = self.threshold();
        if self.n_particles < 2 {
            return Err(SmcError::Config("need at least two particles".into()));
        }
        if !(t > 0.0 && t <= n) {
            return Err(SmcError::Config(format!("ESS threshold {t} must lie in (0, {n}]")));
        }
        if self.mh_steps == 0 {
            return Err(SmcError::Config("mh_steps must be at least 1".into()));
        }
        if !(self.target_rel_ess > 0.0 && self.target_rel_ess <= 1.0) {
            return Err(SmcError::Config(format!(
                "target relative ESS {} must lie in (0, 1]",
                self.target_rel_ess
            )));
        }
        if self.workers == Some(0) {
            return Err(SmcError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Weighted particles at one temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePopulation {
    pub particles: Vec<Vec<f64>>,
    /// Normalized so that their log-sum-exp is zero.
    pub log_weights: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub beta: f64,
    pub stage: usize,
}

impl ParticlePopulation {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights())
    }

    /// Weighted mean of coordinate `j`.
    pub fn mean(&self, j: usize) -> f64 {
        self.particles.iter().zip(self.weights()).map(|(p, w)| w * p[j]).sum()
    }

    /// Weighted standard deviation of coordinate `j`.
    pub fn std(&self, j: usize) -> f64 {
        let m = self.mean(j);
        self.particles
            .iter()
            .zip(self.weights())
            .map(|(p, w)| w * (p[j] - m).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub beta: f64,
    /// ESS right after reweighting.
    pub ess: f64,
    pub resampled: bool,
    pub acceptance: f64,
    pub scale: f64,
    /// Running log-evidence estimate.
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmcDiagnostics {
    pub stages: Vec<StageDiagnostics>,
    pub log_evidence: f64,
    /// Particles whose prior draw had zero likelihood.
    pub invalid_initial: usize,
}

impl SmcDiagnostics {
    pub fn betas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.beta).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcResult {
    pub population: ParticlePopulation,
    pub names: Vec<String>,
    pub diagnostics: SmcDiagnostics,
}

/// Normalizes log weights in place and returns their log-sum-exp.
pub fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let lse = logsumexp(log_w);
    if lse.is_finite() {
        log_w.iter_mut().for_each(|w| *w -= lse);
    }
    lse
}

/// `ln(sum(exp(x)))`, stable for large negative entries; `-inf` when every
/// entry is `-inf`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `1 / sum(w^2)` for normalized weights.
pub fn ess(w: &[f64]) -> f64 {
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let direct = 1.0 / s2;
    let n = w.len() as f64;
    let scaled = n / (n * s2);
    debug_assert!((direct - scaled).abs() <= 1e-12 * direct.max(1.0));
    direct
}

fn increment(delta: f64, log_l: f64) -> f64 {
    if log_l == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        delta * log_l
    }
}

/// Conditional ESS fraction of reweighting normalized `log_w` by
/// `delta * log_l`: `(sum W w)^2 / sum W w^2`, in `[0, 1]`.
pub fn conditional_rel_ess(log_w: &[f64], log_l: &[f64], delta: f64) -> f64 {
    let inc: Vec<f64> = log_l.iter().map(|&l| increment(delta, l)).collect();
    let max = inc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for (&lw, &i) in log_w.iter().zip(&inc) {
        let w = lw.exp();
        let v = (i - max).exp();
        s1 += w * v;
        s2 += w * v * v;
    }
    if s2 == 0.0 {
        0.0
    } else {
        s1 * s1 / s2
    }
}

/// Largest `beta'` in `(beta, 1]` whose reweighting keeps the conditional
/// ESS fraction at or above `target`, found by 50 bisection steps; at least
/// `beta + 1e-6`.
pub fn adapt_beta(log_w: &[f64], log_l: &[f64], beta: f64, target: f64) -> f64 {
    const MIN_STEP: f64 = 1e-6;
    let span = 1.0 - beta;
    if span <= 0.0 {
        return 1.0;
    }
    if conditional_rel_ess(log_w, log_l, span) >= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, span);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if conditional_rel_ess(log_w, log_l, mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (beta + lo.max(MIN_STEP)).min(1.0)
}

/// Systematic resampling with a given stratum offset `u0` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], n_out: usize, u0: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n_out);
    let mut cum = 0.0;
    let mut i = 0;
    for k in 0..n_out {
        let u = (u0 + k as f64) / n_out as f64 * total;
        while i + 1 < weights.len() && cum + weights[i] <= u {
            cum += weights[i];
            i += 1;
        }
        // skip zero-weight tail entries left by roundoff
        while weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        out.push(i);
    }
    out
}

/// Systematic resampling: one uniform draw shifts `n_out` evenly spaced
/// strata over the cumulative weights.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], n_out: usize, rng: &mut R) -> Vec<usize> {
    let u0: f64 = rng.random();
    systematic_indices(weights, n_out, u0)
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one particle at one stage.
pub fn particle_rng(seed: u64, stage: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(stage as u64)) ^ index as u64))
}

struct Walker {
    u: Vec<f64>,
    theta: Vec<f64>,
    /// Log prior plus log Jacobian at `u`.
    log_base: f64,
    log_l: f64,
}

/// Runs `n_steps` random-walk moves on one particle targeting
/// `prior * L^beta` and returns the number accepted.
fn mh_walk<T: Target + ?Sized>(
    target: &T,
    w: &mut Walker,
    beta: f64,
    step: &[f64],
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    let layout = target.layout();
    let mut accepted = 0;
    for _ in 0..n_steps {
        let proposal: Vec<f64> = w
            .u
            .iter()
            .zip(step)
            .map(|(x, s)| x + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (theta, log_jac) = layout.from_unconstrained(&proposal);
        let lp = target.log_prior(&theta);
        let log_u: f64 = rng.random::<f64>().ln();
        if lp == f64::NEG_INFINITY || !log_jac.is_finite() {
            continue;
        }
        let base = lp + log_jac;
        let log_l = target.log_likelihood(&theta);
        let log_ratio = base + tempered_log_likelihood(log_l, beta) - w.log_base - tempered_log_likelihood(w.log_l, beta);
        if log_ratio.is_nan() || log_u >= log_ratio {
            continue;
        }
        w.u = proposal;
        w.theta = theta;
        w.log_base = base;
        w.log_l = log_l;
        accepted += 1;
    }
    accepted
}

/// Advances every particle of `population` by `n_steps` Metropolis moves at
/// its current temperature. `scale` multiplies the per-coordinate weighted
/// spread of the population in unconstrained space. Returns the acceptance
/// rate.
pub fn mh_perturb<T: Target + ?Sized>(
    target: &T,
    population: &mut ParticlePopulation,
    n_steps: usize,
    scale: f64,
    seed: u64,
) -> f64 {
    let layout = target.layout();
    let us: Vec<Vec<f64>> = population.particles.iter().map(|t| layout.to_unconstrained(t)).collect();
    let step = proposal_steps(&us, &population.weights(), scale);
    let beta = population.beta;
    let stage = population.stage;
    let results: Vec<(Walker, usize)> = us
        .into_par_iter()
        .zip(population.particles.par_iter())
        .zip(population.log_likelihoods.par_iter())
        .enumerate()
        .map(|(i, ((u, theta), &log_l))| {
            let mut rng = particle_rng(seed, stage, i);
            let (_, log_jac) = layout.from_unconstrained(&u);
            let mut w = Walker {
                log_base: target.log_prior(theta) + log_jac,
                theta: theta.clone(),
                u,
                log_l,
            };
            let a = mh_walk(target, &mut w, beta, &step, n_steps, &mut rng);
            (w, a)
        })
        .collect();
    let mut accepted = 0;
    for (i, (w, a)) in results.into_iter().enumerate() {
        population.particles[i] = w.theta;
        population.log_likelihoods[i] = w.log_l;
        accepted += a;
    }
    let tried = (population.len() * n_steps).max(1);
    accepted as f64 / tried as f64
}

fn proposal_steps(us: &[Vec<f64>], weights: &[f64], scale: f64) -> Vec<f64> {
    let d = us.first().map_or(0, Vec::len);
    (0..d)
        .map(|j| {
            let mean: f64 = us.iter().zip(weights).map(|(u, w)| w * u[j]).sum();
            let var: f64 = us.iter().zip(weights).map(|(u, w)| w * (u[j] - mean).powi(2)).sum();
            scale * var.sqrt().max(1e-6)
        })
        .collect()
}

/// Runs the sampler from the prior of `target` to its posterior.
pub fn run_smc<T: Target + ?Sized>(target: &T, config: &SmcConfig) -> Result<SmcResult, SmcError> {
    config.validate()?;
    match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| SmcError::Workers(e.to_string()))?
            .install(|| run_inner(target, config)),
        None => run_inner(target, config),
    }
}

fn run_inner<T: Target + ?Sized>(target: &T, config: &SmcConfig) -> Result<SmcResult, SmcError> {
    let n = config.n_particles;
    let layout = target.layout();
    let d = layout.unconstrained_dim();
    let particles: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| layout.sample(&mut particle_rng(config.seed, 0, i)))
        .collect();
    let log_likelihoods: Vec<f64> = particles.par_iter().map(|t| target.log_likelihood(t)).collect();
    let invalid_initial = log_likelihoods.iter().filter(|l| **l == f64::NEG_INFINITY).count();
    let mut pop = ParticlePopulation {
        particles,
        log_weights: vec![-(n as f64).ln(); n],
        log_likelihoods,
        beta: 0.0,
        stage: 0,
    };
    let mut scale = config.initial_scale.unwrap_or(2.38 / (d.max(1) as f64).sqrt());
    let mut log_evidence = 0.0;
    let mut stages = Vec::new();
    let threshold = config.threshold();

    while pop.beta < 1.0 {
        if pop.stage >= config.max_stages {
            return Err(SmcError::Degenerate {
                stage: pop.stage,
                beta: pop.beta,
                ess: pop.ess(),
            });
        }
        pop.stage += 1;
        let next = adapt_beta(&pop.log_weights, &pop.log_likelihoods, pop.beta, config.target_rel_ess);
        let delta = next - pop.beta;
        for (w, &l) in pop.log_weights.iter_mut().zip(&pop.log_likelihoods) {
            *w += increment(delta, l);
        }
        let lse = normalize_log_weights(&mut pop.log_weights);
        log_evidence += lse;
        pop.beta = next;
        let current_ess = if lse.is_finite() { pop.ess() } else { 0.0 };
        if !(current_ess >= 2.0) {
            return Err(SmcError::Degenerate {
                stage: pop.stage,
                beta: pop.beta,
                ess: current_ess,
            });
        }
        let resampled = current_ess < threshold || pop.beta >= 1.0;
        if resampled {
            let mut rng = particle_rng(config.seed, pop.stage, usize::MAX);
            let idx = systematic_resample(&pop.weights(), n, &mut rng);
            pop.particles = idx.iter().map(|&i| pop.particles[i].clone()).collect();
            pop.log_likelihoods = idx.iter().map(|&i| pop.log_likelihoods[i]).collect();
            pop.log_weights = vec![-(n as f64).ln(); n];
        }
        let acceptance = mh_perturb(target, &mut pop, config.mh_steps, scale, config.seed);
        stages.push(StageDiagnostics {
            stage: pop.stage,
            beta: pop.beta,
            ess: current_ess,
            resampled,
            acceptance,
            scale,
            log_evidence,
        });
        log::debug!(
            "stage {} beta {:.4e} ess {:.1} acc {:.3} scale {:.3}",
            pop.stage,
            pop.beta,
            current_ess,
            acceptance,
            scale
        );
        if config.adapt_scale {
            scale = (scale * (2.0 * (acceptance - config.target_acceptance)).exp()).clamp(1e-3, 10.0);
        }
    }
    Ok(SmcResult {
        population: pop,
        names: layout.names(),
        diagnostics: SmcDiagnostics {
            stages,
            log_evidence,
            invalid_initial,
        },
    })
}
