//! Bayesian material flow analysis: mass-balance networks, expert-elicited
//! priors, tempered Sequential Monte Carlo, and Bayes-factor model
//! comparison.

pub mod elicitation;
pub mod ingest;
pub mod likelihood;
pub mod model;
pub mod model_selection;
pub mod network;
mod optimize;
pub mod priors;
pub mod smc;

pub use elicitation::{ElicitedHistogram, ExpertResponseSet, ExpertWeight, Pooling, SeedingResponse};
pub use ingest::{IngestError, PosteriorSummary, SankeyExport, StudyBundle, StudyPaths};
pub use likelihood::{NoiseModel, ObservationKind, ObservationRecord, ObservationSet, SigmaRef};
pub use model::{MfaModel, Target, Tying};
pub use model_selection::{BayesFactor, EvidenceEstimate, ModelComparison, ModelHypothesis};
pub use network::{solve_flows, AllocationMatrix, FlowNetwork, FlowSolution, InflowVector, Node, QoIQuery};
pub use priors::{DirichletPrior, Layout, PriorAssembly, ScalarPrior};
pub use smc::{run_smc, ParticlePopulation, SmcConfig, SmcResult};
