//! `bayesmfa`: command-line driver for the elicitation, prior fitting,
//! inference, and model comparison pipeline. Stages talk to each other only
//! through files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use bayesmfa::elicitation::{aggregate_targets, cooke_weights};
use bayesmfa::ingest::{self, StudyPaths};
use bayesmfa::likelihood::sigma_groups;
use bayesmfa::model_selection::{compare_models, ModelHypothesis};
use bayesmfa::priors::{assemble_priors, AssemblyOptions, PriorAssembly, DEFAULT_FIT_THRESHOLD, DEFAULT_INFLOW_CAP};
use bayesmfa::{run_smc, MfaModel, Pooling, SmcConfig, StudyBundle, Target, Tying};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "bayesmfa", version, about = "Bayesian material flow analysis")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and cross-check a study without running anything.
    Validate {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long = "responses")]
        responses: Vec<PathBuf>,
        #[arg(long)]
        seeding_key: Option<PathBuf>,
    },
    /// Score experts on the seeding questions (Cooke's classical model).
    WeightExperts {
        #[arg(long = "responses", required = true)]
        responses: Vec<PathBuf>,
        #[arg(long)]
        seeding_key: PathBuf,
        /// Output weights table (CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pool the experts' target histograms with their weights.
    AggregatePriors {
        #[arg(long = "responses", required = true)]
        responses: Vec<PathBuf>,
        /// Weights table written by `weight-experts`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value = "linear")]
        pooling: Pooling,
        /// Output pooled histograms (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit Dirichlet and truncated-normal priors to pooled histograms.
    FitPriors {
        #[command(flatten)]
        study: StudyArgs,
        /// Pooled histograms written by `aggregate-priors`; weakly
        /// informative defaults when omitted.
        #[arg(long)]
        pooled: Option<PathBuf>,
        /// Upper bound (Mt) of the default uniform inflow prior.
        #[arg(long, default_value_t = DEFAULT_INFLOW_CAP)]
        inflow_cap: f64,
        /// Largest acceptable Dirichlet fit objective.
        #[arg(long, default_value_t = DEFAULT_FIT_THRESHOLD)]
        fit_threshold: f64,
        /// Output prior file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the posterior with tempered SMC.
    Infer {
        #[command(flatten)]
        study: StudyArgs,
        #[command(flatten)]
        smc: SmcArgs,
        #[command(flatten)]
        tying: TyingArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare time-invariance hypotheses by Monte Carlo evidence.
    BayesFactor {
        #[command(flatten)]
        study: StudyArgs,
        /// Prior samples per trial.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Compare only these of M1..M4; all four by default.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Output comparison (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the summary and Sankey exports from a posterior dump.
    Report {
        #[command(flatten)]
        study: StudyArgs,
        #[command(flatten)]
        tying: TyingArgs,
        /// Posterior dump written by `infer`.
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    network: PathBuf,
    /// Observation table; repeat once per file (typically per year).
    #[arg(long = "observations")]
    observations: Vec<PathBuf>,
    /// Prior file; weakly informative defaults when omitted.
    #[arg(long)]
    priors: Option<PathBuf>,
}

#[derive(Args)]
struct SmcArgs {
    #[arg(long, default_value_t = 10_000)]
    particles: usize,
    #[arg(long, default_value_t = 10)]
    mh_steps: usize,
    /// Resampling threshold on the ESS; N/2 when omitted.
    #[arg(long)]
    ess_threshold: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TyingArgs {
    /// Share allocation fractions across years.
    #[arg(long)]
    tie_phi: bool,
    /// Share noise levels across years.
    #[arg(long)]
    tie_sigma: bool,
}

impl TyingArgs {
    fn tying(&self) -> Tying {
        Tying {
            phi: self.tie_phi,
            sigma: self.tie_sigma,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ingest::IngestError> for Failure {
    fn from(e: ingest::IngestError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type Outcome = Result<(), Failure>;

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Validation(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Validate {
            study,
            responses,
            seeding_key,
        } => validate(&study, responses, seeding_key),
        Command::WeightExperts {
            responses,
            seeding_key,
            out,
        } => weight_experts(&responses, &seeding_key, &out),
        Command::AggregatePriors {
            responses,
            weights,
            pooling,
            out,
        } => aggregate(&responses, &weights, pooling, &out),
        Command::FitPriors {
            study,
            pooled,
            inflow_cap,
            fit_threshold,
            out,
        } => fit_priors(&study, pooled.as_deref(), inflow_cap, fit_threshold, &out),
        Command::Infer { study, smc, tying, out } => infer(&study, &smc, tying.tying(), &out),
        Command::BayesFactor {
            study,
            samples,
            trials,
            seed,
            workers,
            models,
            out,
        } => bayes_factor(&study, samples, trials, seed, workers, &models, out.as_deref()),
        Command::Report {
            study,
            tying,
            posterior,
            out,
        } => report(&study, tying.tying(), &posterior, &out),
    }
}

fn study_paths(study: &StudyArgs) -> StudyPaths {
    StudyPaths {
        network: study.network.clone(),
        observations: study.observations.clone(),
        priors: study.priors.clone(),
        ..Default::default()
    }
}

/// Loads the study and fills in weakly-informative priors when none were
/// given.
fn load_with_priors(study: &StudyArgs) -> Result<(StudyBundle, PriorAssembly), Failure> {
    let bundle = ingest::load_study(&study_paths(study))?;
    let priors = match &bundle.priors {
        Some(p) => p.clone(),
        None => {
            let groups = sigma_groups(&bundle.records());
            log::info!("no prior file given; using weakly-informative defaults");
            PriorAssembly::weakly_informative(&bundle.network, &groups, DEFAULT_INFLOW_CAP)
        }
    };
    Ok((bundle, priors))
}

fn validate(study: &StudyArgs, responses: Vec<PathBuf>, seeding_key: Option<PathBuf>) -> Outcome {
    let mut paths = study_paths(study);
    paths.responses = responses;
    paths.seeding_key = seeding_key;
    let bundle = ingest::load_study(&paths)?;
    println!(
        "network: {} nodes, {} edges, {} inflow nodes",
        bundle.network.n_nodes(),
        bundle.network.edges().len(),
        bundle.network.inflow_nodes().len()
    );
    for (year, records) in &bundle.observations {
        println!("observations {year}: {} records", records.len());
    }
    if !bundle.experts.is_empty() {
        println!("experts: {}", bundle.experts.len());
    }
    if let Some(p) = &bundle.priors {
        println!("priors: {} parameters", p.layout().dim());
    }
    for w in &bundle.warnings {
        println!("warning: {w}");
    }
    println!("ok: 0 errors, {} warnings", bundle.warnings.len());
    Ok(())
}

fn read_experts(paths: &[PathBuf]) -> Result<Vec<bayesmfa::ExpertResponseSet>, Failure> {
    Ok(paths.iter().map(|p| ingest::read_responses(p)).collect::<Result<Vec<_>, _>>()?)
}

fn weight_experts(responses: &[PathBuf], seeding_key: &Path, out: &Path) -> Outcome {
    let experts = read_experts(responses)?;
    let key = ingest::read_seeding_key(seeding_key)?;
    if key.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "seeding key {} has no questions",
            seeding_key.display()
        )));
    }
    let weights = cooke_weights(&experts, &key).map_err(validation)?;
    ingest::write_weights(out, &weights)?;
    println!("{:<16} {:>12} {:>12} {:>8}", "expert", "calibration", "information", "weight");
    for w in &weights {
        println!(
            "{:<16} {:>12.4e} {:>12.4} {:>8.4}",
            w.expert_id, w.calibration, w.information, w.weight
        );
    }
    Ok(())
}

fn aggregate(responses: &[PathBuf], weights: &Path, pooling: Pooling, out: &Path) -> Outcome {
    let experts = read_experts(responses)?;
    let weights = ingest::read_weights(weights)?;
    let pooled = aggregate_targets(&experts, &weights, pooling).map_err(validation)?;
    ingest::write_pooled(out, pooling, &pooled)?;
    for (q, h) in &pooled {
        println!("{q}: mean {:.4}, sd {:.4}", h.mean(), h.variance().sqrt());
    }
    Ok(())
}

fn fit_priors(study: &StudyArgs, pooled: Option<&Path>, inflow_cap: f64, fit_threshold: f64, out: &Path) -> Outcome {
    let bundle = ingest::load_study(&study_paths(study))?;
    let groups = sigma_groups(&bundle.records());
    let pooled = match pooled {
        Some(p) => ingest::read_pooled(p)?,
        None => BTreeMap::new(),
    };
    let options = AssemblyOptions {
        inflow_cap,
        fit_threshold,
    };
    let (assembly, notes) = assemble_priors(&bundle.network, &pooled, &groups, options).map_err(validation)?;
    for n in &notes {
        println!("note: {n}");
    }
    ingest::write_priors(out, &assembly)?;
    println!("wrote {} ({} parameters)", out.display(), assembly.layout().dim());
    Ok(())
}

fn write_exports(out: &Path, model: &MfaModel, particles: &[Vec<f64>]) -> Result<usize, Failure> {
    let summary = ingest::summarize_posterior(model, particles);
    ingest::write_json(&out.join("summary.json"), &summary)?;
    for year in &summary.years {
        let sankey = ingest::sankey_export(model.network(), year);
        let imbalance = sankey.max_imbalance();
        if imbalance > 1e-6 {
            log::warn!("sankey {}: posterior-mean flows imbalanced by {imbalance:.2e}", year.year);
        }
        ingest::write_json(&out.join(format!("sankey_{}.json", year.year)), &sankey)?;
        let total: f64 = year.inflows.iter().map(|q| q.moments.mean).sum();
        println!("year {}: external input {total:.3} Mt", year.year);
    }
    Ok(summary.dropped_particles)
}

fn infer(study: &StudyArgs, smc: &SmcArgs, tying: Tying, out: &Path) -> Outcome {
    let (bundle, priors) = load_with_priors(study)?;
    let model = MfaModel::new(bundle.network.clone(), &priors, &bundle.records(), tying).map_err(validation)?;
    let config = SmcConfig {
        n_particles: smc.particles,
        mh_steps: smc.mh_steps,
        ess_threshold: smc.ess_threshold,
        seed: smc.seed,
        workers: smc.workers,
        ..Default::default()
    };
    config.validate().map_err(|e| Failure::Usage(e.into()))?;
    println!(
        "inferring {} parameters from {} observations over {} year(s)",
        model.dim(),
        model.n_observations(),
        model.years().len()
    );
    let result = run_smc(&model, &config).map_err(runtime)?;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    ingest::write_posterior(&out.join("posterior.csv"), &result)?;
    ingest::write_diagnostics(&out.join("diagnostics.csv"), &result.diagnostics)?;
    ingest::write_priors(&out.join("priors_used.json"), &priors)?;
    let dropped = write_exports(out, &model, &result.population.particles)?;
    println!(
        "stages: {}, log evidence {:.4}, dropped particles: {dropped}",
        result.diagnostics.stages.len(),
        result.diagnostics.log_evidence
    );
    if dropped > 0 {
        return Err(runtime(anyhow!("{dropped} posterior particles could not be solved")));
    }
    Ok(())
}

fn bayes_factor(
    study: &StudyArgs,
    samples: usize,
    trials: usize,
    seed: u64,
    workers: Option<usize>,
    models: &[String],
    out: Option<&Path>,
) -> Outcome {
    if trials == 0 {
        return Err(Failure::Usage(anyhow!("--trials must be at least 1")));
    }
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(runtime)?;
    }
    let mut hypotheses = ModelHypothesis::standard();
    if !models.is_empty() {
        for m in models {
            if !hypotheses.iter().any(|h| &h.id == m) {
                return Err(Failure::Usage(anyhow!("unknown model `{m}`; expected M1..M4")));
            }
        }
        hypotheses.retain(|h| models.contains(&h.id));
    }
    let (bundle, priors) = load_with_priors(study)?;
    let records = bundle.records();
    let cmp = compare_models(&bundle.network, &priors, &records, &hypotheses, samples, trials, seed).map_err(runtime)?;
    println!("{:<4} {:>5} {:>12} {:>12} {:>12}", "model", "dim", "min", "mean", "max");
    for (m, h) in cmp.hypotheses.iter().enumerate() {
        let s = cmp.summary(m);
        println!("{:<4} {:>5} {:>12.4} {:>12.4} {:>12.4}", h.id, cmp.dims[m], s.min, s.mean, s.max);
    }
    for a in 0..cmp.hypotheses.len() {
        for b in a + 1..cmp.hypotheses.len() {
            let bf = cmp.mean_bayes_factor(a, b);
            let (ida, idb) = (&cmp.hypotheses[a].id, &cmp.hypotheses[b].id);
            println!("log BF({ida}:{idb}) = {:.4}  {}", bf.log_bf, bf.label_for(ida, idb));
        }
    }
    if let Some(out) = out {
        ingest::write_json(out, &cmp)?;
    }
    Ok(())
}

fn report(study: &StudyArgs, tying: Tying, posterior: &Path, out: &Path) -> Outcome {
    let (bundle, priors) = load_with_priors(study)?;
    let model = MfaModel::new(bundle.network.clone(), &priors, &bundle.records(), tying).map_err(validation)?;
    let (names, particles) = ingest::read_posterior(posterior)?;
    if names != model.layout().names() {
        return Err(validation(anyhow!(
            "posterior columns do not match the model parameters; check --tie-phi/--tie-sigma and --priors"
        )));
    }
    if particles.is_empty() {
        return Err(validation(anyhow!("{} has no particles", posterior.display())));
    }
    let dropped = write_exports(out, &model, &particles)?;
    println!("{} particles summarized, {dropped} dropped", particles.len());
    Ok(())
}
