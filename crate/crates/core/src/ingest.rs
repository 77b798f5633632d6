//! File formats: reading and cross-checking study inputs, and writing
//! posterior dumps, summaries, and Sankey exports.
//!
//! Every JSON document carries a `schema` string; CSV tables have fixed
//! headers. Masses are in Mt throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::elicitation::{ElicitedHistogram, ExpertResponseSet, ExpertWeight, Pooling, SeedingResponse};
use crate::likelihood::{NoiseModel, ObservationKind, ObservationRecord, SigmaRef};
use crate::model::{MfaModel, Target, Tying};
use crate::network::{FlowNetwork, Node};
use crate::priors::{allocation_key, PriorAssembly};
use crate::smc::{SmcDiagnostics, SmcResult};

pub const NETWORK_SCHEMA: &str = "bayesmfa-network/1";
pub const RESPONSES_SCHEMA: &str = "bayesmfa-responses/1";
pub const PRIORS_SCHEMA: &str = "bayesmfa-priors/1";
pub const POOLED_SCHEMA: &str = "bayesmfa-pooled/1";
pub const SUMMARY_SCHEMA: &str = "bayesmfa-summary/1";
pub const SANKEY_SCHEMA: &str = "bayesmfa-sankey/1";
pub const RUN_SCHEMA: &str = "bayesmfa-run/1";

pub const OBSERVATION_HEADER: [&str; 9] = ["id", "description", "kind", "value", "year", "source", "query", "noise", "sigma"];
pub const SEEDING_HEADER: [&str; 3] = ["question_id", "value", "source"];
pub const WEIGHTS_HEADER: [&str; 4] = ["expert_id", "calibration", "information", "weight"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    Table {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}:{line}: observation `{id}` does not bind to the network: {message}")]
    DanglingBinding {
        path: PathBuf,
        line: u64,
        id: String,
        message: String,
    },
    #[error("{0}")]
    Validation(String),
}

impl IngestError {
    /// Whether the error is a problem with the inputs rather than the
    /// environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, IngestError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), IngestError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, IngestError> {
    serde_json::from_str(text).map_err(|e| IngestError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IngestError> {
    parse_json(path, &read_text(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IngestError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IngestError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn check_schema(path: &Path, found: &str, expected: &str) -> Result<(), IngestError> {
    if found != expected {
        return Err(IngestError::Schema {
            path: path.to_path_buf(),
            message: format!("schema `{found}`, expected `{expected}`"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------- network

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub schema: String,
    pub nodes: Vec<Node>,
    /// `[source id, destination id]` pairs.
    pub edges: Vec<(String, String)>,
    pub inflow_nodes: Vec<String>,
}

impl NetworkFile {
    pub fn from_network(net: &FlowNetwork) -> Self {
        Self {
            schema: NETWORK_SCHEMA.into(),
            nodes: net.nodes().to_vec(),
            edges: net
                .edges()
                .iter()
                .map(|e| (net.node(e.src).id.clone(), net.node(e.dst).id.clone()))
                .collect(),
            inflow_nodes: net.inflow_nodes().iter().map(|&i| net.node(i).id.clone()).collect(),
        }
    }

    pub fn to_network(&self) -> Result<FlowNetwork, crate::network::NetworkError> {
        let index: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| crate::network::NetworkError::UnknownNode(id.to_string()))
        };
        let edges = self
            .edges
            .iter()
            .map(|(s, d)| Ok((lookup(s)?, lookup(d)?)))
            .collect::<Result<Vec<_>, crate::network::NetworkError>>()?;
        let inflows = self
            .inflow_nodes
            .iter()
            .map(|id| lookup(id))
            .collect::<Result<Vec<_>, _>>()?;
        FlowNetwork::new(self.nodes.clone(), edges, inflows)
    }
}

pub fn read_network(path: &Path) -> Result<FlowNetwork, IngestError> {
    let file: NetworkFile = read_json(path)?;
    check_schema(path, &file.schema, NETWORK_SCHEMA)?;
    file.to_network().map_err(|e| IngestError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_network(path: &Path, net: &FlowNetwork) -> Result<(), IngestError> {
    write_json(path, &NetworkFile::from_network(net))
}

// ----------------------------------------------------------- observations

#[derive(Debug, Deserialize)]
struct ObservationRow {
    id: String,
    #[serde(default)]
    description: String,
    kind: String,
    value: f64,
    year: i32,
    #[serde(default)]
    source: String,
    query: String,
    #[serde(default)]
    noise: String,
    sigma: String,
}

fn table_reader(path: &Path, text: &str, header: &[&str]) -> Result<csv::Reader<std::io::Cursor<Vec<u8>>>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(std::io::Cursor::new(text.as_bytes().to_vec()));
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    for h in header {
        if !found.iter().any(|f| f == h) {
            return Err(IngestError::Table {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column `{h}` (header is {found:?})"),
            });
        }
    }
    Ok(reader)
}

/// A parsed observation with the line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocatedRecord {
    pub line: u64,
    pub record: ObservationRecord,
}

pub fn parse_observations(path: &Path, text: &str) -> Result<Vec<LocatedRecord>, IngestError> {
    let mut reader = table_reader(path, text, &OBSERVATION_HEADER)?;
    let headers = reader.headers().cloned().map_err(|e| IngestError::Table {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| IngestError::Table {
            path: path.to_path_buf(),
            line,
            message,
        };
        let raw: ObservationRow = row.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        let kind: ObservationKind = raw.kind.parse().map_err(fail)?;
        let query = raw.query.parse().map_err(fail)?;
        let noise: NoiseModel = if raw.noise.is_empty() {
            NoiseModel::Relative
        } else {
            raw.noise.parse().map_err(fail)?
        };
        let sigma: SigmaRef = raw.sigma.parse().map_err(fail)?;
        if !ids.insert(raw.id.clone()) {
            return Err(fail(format!("duplicate observation id `{}`", raw.id)));
        }
        let record = ObservationRecord {
            id: raw.id,
            description: raw.description,
            kind,
            query,
            value: raw.value,
            year: raw.year,
            source: raw.source,
            noise,
            sigma,
        };
        record.validate().map_err(|e| fail(e.to_string()))?;
        out.push(LocatedRecord { line, record });
    }
    Ok(out)
}

pub fn read_observations(path: &Path) -> Result<Vec<ObservationRecord>, IngestError> {
    Ok(parse_observations(path, &read_text(path)?)?
        .into_iter()
        .map(|r| r.record)
        .collect())
}

pub fn write_observations(path: &Path, records: &[ObservationRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(OBSERVATION_HEADER).map_err(fail)?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.description.clone(),
            r.kind.to_string(),
            format_f64(r.value),
            r.year.to_string(),
            r.source.clone(),
            r.query.to_string(),
            r.noise.to_string(),
            r.sigma.to_string(),
        ])
        .map_err(fail)?;
    }
    finish_csv(path, w)
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<(), IngestError> {
    let bytes = w.into_inner().map_err(|e| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    write_text(path, &String::from_utf8_lossy(&bytes))
}

/// Shortest decimal that parses back to the same value.
fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

// ---------------------------------------------------------------- experts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseFile {
    schema: String,
    expert_id: String,
    seeding: Vec<SeedingResponse>,
    #[serde(default)]
    targets: BTreeMap<String, ElicitedHistogram>,
}

pub fn parse_responses(path: &Path, text: &str) -> Result<ExpertResponseSet, IngestError> {
    let file: ResponseFile = parse_json(path, text)?;
    check_schema(path, &file.schema, RESPONSES_SCHEMA)?;
    let mut seen = BTreeSet::new();
    for s in &file.seeding {
        if !seen.insert(&s.question_id) {
            return Err(IngestError::Schema {
                path: path.to_path_buf(),
                message: format!("seeding question `{}` answered twice", s.question_id),
            });
        }
    }
    Ok(ExpertResponseSet {
        expert_id: file.expert_id,
        seeding: file.seeding,
        targets: file.targets,
    })
}

pub fn read_responses(path: &Path) -> Result<ExpertResponseSet, IngestError> {
    parse_responses(path, &read_text(path)?)
}

pub fn write_responses(path: &Path, expert: &ExpertResponseSet) -> Result<(), IngestError> {
    write_json(
        path,
        &ResponseFile {
            schema: RESPONSES_SCHEMA.into(),
            expert_id: expert.expert_id.clone(),
            seeding: expert.seeding.clone(),
            targets: expert.targets.clone(),
        },
    )
}

#[derive(Debug, Deserialize)]
struct SeedingRow {
    question_id: String,
    value: f64,
}

/// Realized answers to the seeding questions.
pub fn read_seeding_key(path: &Path) -> Result<BTreeMap<String, f64>, IngestError> {
    let text = read_text(path)?;
    let mut reader = table_reader(path, &text, &SEEDING_HEADER[..2])?;
    let headers = reader.headers().cloned().unwrap_or_default();
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| IngestError::Table {
            path: path.to_path_buf(),
            line,
            message,
        };
        let r: SeedingRow = row.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        if !r.value.is_finite() {
            return Err(fail(format!("value {} is not finite", r.value)));
        }
        if out.insert(r.question_id.clone(), r.value).is_some() {
            return Err(fail(format!("duplicate question `{}`", r.question_id)));
        }
    }
    Ok(out)
}

pub fn write_seeding_key(path: &Path, key: &BTreeMap<String, f64>) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(SEEDING_HEADER).map_err(fail)?;
    for (q, v) in key {
        w.write_record([q.as_str(), &format_f64(*v), ""]).map_err(fail)?;
    }
    finish_csv(path, w)
}

pub fn write_weights(path: &Path, weights: &[ExpertWeight]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(WEIGHTS_HEADER).map_err(fail)?;
    for x in weights {
        w.write_record([
            x.expert_id.clone(),
            format_f64(x.calibration),
            format_f64(x.information),
            format_f64(x.weight),
        ])
        .map_err(fail)?;
    }
    finish_csv(path, w)
}

pub fn read_weights(path: &Path) -> Result<Vec<ExpertWeight>, IngestError> {
    let text = read_text(path)?;
    let mut reader = table_reader(path, &text, &WEIGHTS_HEADER)?;
    let headers = reader.headers().cloned().unwrap_or_default();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        out.push(row.deserialize(Some(&headers)).map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Pooled histograms per target quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PooledFile {
    pub schema: String,
    pub pooling: String,
    pub quantities: BTreeMap<String, ElicitedHistogram>,
}

pub fn write_pooled(path: &Path, pooling: Pooling, quantities: &BTreeMap<String, ElicitedHistogram>) -> Result<(), IngestError> {
    write_json(
        path,
        &PooledFile {
            schema: POOLED_SCHEMA.into(),
            pooling: match pooling {
                Pooling::Linear => "linear".into(),
                Pooling::Logarithmic => "logarithmic".into(),
            },
            quantities: quantities.clone(),
        },
    )
}

pub fn read_pooled(path: &Path) -> Result<BTreeMap<String, ElicitedHistogram>, IngestError> {
    let file: PooledFile = read_json(path)?;
    check_schema(path, &file.schema, POOLED_SCHEMA)?;
    Ok(file.quantities)
}

// ----------------------------------------------------------------- priors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PriorFile {
    schema: String,
    #[serde(flatten)]
    assembly: PriorAssembly,
}

pub fn read_priors(path: &Path) -> Result<PriorAssembly, IngestError> {
    let file: PriorFile = read_json(path)?;
    check_schema(path, &file.schema, PRIORS_SCHEMA)?;
    file.assembly.validate().map_err(|e| IngestError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(file.assembly)
}

pub fn write_priors(path: &Path, assembly: &PriorAssembly) -> Result<(), IngestError> {
    write_json(
        path,
        &PriorFile {
            schema: PRIORS_SCHEMA.into(),
            assembly: assembly.clone(),
        },
    )
}

// ------------------------------------------------------------ run config

/// Sampler settings stored alongside a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub schema: String,
    pub particles: usize,
    pub mh_steps: usize,
    #[serde(default)]
    pub ess_threshold: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub tie_phi: bool,
    #[serde(default)]
    pub tie_sigma: bool,
}

impl RunSettings {
    pub fn smc_config(&self) -> crate::smc::SmcConfig {
        crate::smc::SmcConfig {
            n_particles: self.particles,
            mh_steps: self.mh_steps,
            ess_threshold: self.ess_threshold,
            seed: self.seed,
            workers: self.workers,
            ..Default::default()
        }
    }
}

// ------------------------------------------------------------------ study

/// Input locations of a study. Observation files may hold several years.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyPaths {
    pub network: PathBuf,
    #[serde(default)]
    pub observations: Vec<PathBuf>,
    #[serde(default)]
    pub responses: Vec<PathBuf>,
    #[serde(default)]
    pub seeding_key: Option<PathBuf>,
    #[serde(default)]
    pub priors: Option<PathBuf>,
    #[serde(default)]
    pub run: Option<PathBuf>,
}

/// Cross-checked inputs of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBundle {
    pub network: FlowNetwork,
    pub observations: BTreeMap<i32, Vec<ObservationRecord>>,
    pub experts: Vec<ExpertResponseSet>,
    pub seeding_key: BTreeMap<String, f64>,
    pub priors: Option<PriorAssembly>,
    pub run: Option<RunSettings>,
    /// Non-fatal findings such as infeasible allocation upper bounds.
    pub warnings: Vec<String>,
}

impl StudyBundle {
    pub fn records(&self) -> Vec<ObservationRecord> {
        self.observations.values().flatten().cloned().collect()
    }

    pub fn years(&self) -> Vec<i32> {
        self.observations.keys().copied().collect()
    }
}

/// Loads and cross-validates every file of a study.
pub fn load_study(paths: &StudyPaths) -> Result<StudyBundle, IngestError> {
    let network = read_network(&paths.network)?;
    let mut observations: BTreeMap<i32, Vec<ObservationRecord>> = BTreeMap::new();
    let mut ids: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in &paths.observations {
        for LocatedRecord { line, record } in parse_observations(path, &read_text(path)?)? {
            if let Err(e) = record.query.resolve(&network) {
                return Err(IngestError::DanglingBinding {
                    path: path.clone(),
                    line,
                    id: record.id,
                    message: e.to_string(),
                });
            }
            if let Some(prev) = ids.insert(record.id.clone(), path.clone()) {
                return Err(IngestError::Table {
                    path: path.clone(),
                    line,
                    message: format!("observation id `{}` already defined in {}", record.id, prev.display()),
                });
            }
            observations.entry(record.year).or_default().push(record);
        }
    }
    let experts = paths
        .responses
        .iter()
        .map(|p| read_responses(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut expert_ids = BTreeSet::new();
    for (e, p) in experts.iter().zip(&paths.responses) {
        if !expert_ids.insert(&e.expert_id) {
            return Err(IngestError::Schema {
                path: p.clone(),
                message: format!("expert `{}` appears twice", e.expert_id),
            });
        }
    }
    let seeding_key = match &paths.seeding_key {
        Some(p) => read_seeding_key(p)?,
        None => BTreeMap::new(),
    };
    let priors = paths.priors.as_deref().map(read_priors).transpose()?;
    let run: Option<RunSettings> = match &paths.run {
        Some(p) => {
            let r: RunSettings = read_json(p)?;
            check_schema(p, &r.schema, RUN_SCHEMA)?;
            Some(r)
        }
        None => None,
    };
    let bundle = StudyBundle {
        network,
        observations,
        experts,
        seeding_key,
        priors,
        run,
        warnings: Vec::new(),
    };
    cross_validate(bundle)
}

fn cross_validate(mut bundle: StudyBundle) -> Result<StudyBundle, IngestError> {
    if !bundle.seeding_key.is_empty() {
        for e in &bundle.experts {
            for s in &e.seeding {
                if !bundle.seeding_key.contains_key(&s.question_id) {
                    return Err(IngestError::Validation(format!(
                        "expert `{}` answered seeding question `{}` which has no key",
                        e.expert_id, s.question_id
                    )));
                }
            }
        }
    }
    let records = bundle.records();
    if let Some(priors) = &bundle.priors {
        let groups: BTreeSet<&str> = priors.sigmas.iter().map(|s| s.group.as_str()).collect();
        for r in &records {
            if let SigmaRef::Group(g) = &r.sigma {
                if !groups.contains(g.as_str()) {
                    return Err(IngestError::Validation(format!(
                        "observation `{}` uses noise group `{g}` which has no prior",
                        r.id
                    )));
                }
            }
        }
        MfaModel::new(bundle.network.clone(), priors, &records, Tying::ALL)
            .map_err(|e| IngestError::Validation(e.to_string()))?;
    }
    let targets: BTreeSet<String> = bundle
        .network
        .edges()
        .iter()
        .map(|e| allocation_key(&bundle.network.node(e.src).id, &bundle.network.node(e.dst).id))
        .chain(
            bundle
                .network
                .inflow_nodes()
                .iter()
                .map(|&i| crate::priors::inflow_key(&bundle.network.node(i).id)),
        )
        .collect();
    for e in &bundle.experts {
        for t in e.targets.keys() {
            if !targets.contains(t) {
                return Err(IngestError::Validation(format!(
                    "expert `{}` answered `{t}`, which is not a network quantity",
                    e.expert_id
                )));
            }
        }
    }
    bundle.warnings = allocation_bound_warnings(&bundle.network, &bundle.experts);
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    Ok(bundle)
}

/// Flags experts whose allocation answers for one source node cannot sum
/// to one: the upper edges of their highest non-empty bins add up to less
/// than one.
pub fn allocation_bound_warnings(net: &FlowNetwork, experts: &[ExpertResponseSet]) -> Vec<String> {
    let mut out = Vec::new();
    for e in experts {
        for i in net.source_nodes() {
            let src = &net.node(i).id;
            let hs: Vec<&ElicitedHistogram> = net
                .out_edges(i)
                .iter()
                .filter_map(|&k| e.targets.get(&allocation_key(src, &net.node(net.edges()[k].dst).id)))
                .collect();
            if hs.len() < net.out_edges(i).len() || hs.is_empty() {
                continue;
            }
            let bound: f64 = hs.iter().map(|h| h.upper_mass_bound()).sum();
            if bound < 1.0 - 1e-12 {
                out.push(format!(
                    "expert `{}`: allocation upper bounds out of `{src}` sum to {bound:.3} < 1",
                    e.expert_id
                ));
            }
        }
    }
    out
}

/// Writes every part of `bundle` into `dir` and returns the paths.
pub fn save_study(dir: &Path, bundle: &StudyBundle) -> Result<StudyPaths, IngestError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let network = dir.join("network.json");
    write_network(&network, &bundle.network)?;
    let mut observations = Vec::new();
    for (year, records) in &bundle.observations {
        let p = dir.join(format!("observations_{year}.csv"));
        write_observations(&p, records)?;
        observations.push(p);
    }
    let mut responses = Vec::new();
    for (k, e) in bundle.experts.iter().enumerate() {
        let p = dir.join(format!("expert_{k:02}.json"));
        write_responses(&p, e)?;
        responses.push(p);
    }
    let seeding_key = if bundle.seeding_key.is_empty() {
        None
    } else {
        let p = dir.join("seeding_key.csv");
        write_seeding_key(&p, &bundle.seeding_key)?;
        Some(p)
    };
    let priors = match &bundle.priors {
        Some(a) => {
            let p = dir.join("priors.json");
            write_priors(&p, a)?;
            Some(p)
        }
        None => None,
    };
    let run = match &bundle.run {
        Some(r) => {
            let p = dir.join("run.json");
            write_json(&p, r)?;
            Some(p)
        }
        None => None,
    };
    Ok(StudyPaths {
        network,
        observations,
        responses,
        seeding_key,
        priors,
        run,
    })
}

// ---------------------------------------------------------------- outputs

/// Weighted-free summary of one scalar over equal-weight particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub q05: f64,
    pub q95: f64,
}

impl Moments {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            std: var.sqrt(),
            q05: empirical_quantile(&sorted, 0.05),
            q95: empirical_quantile(&sorted, 0.95),
        }
    }

    /// `100 * std / mean`, when the mean is positive.
    pub fn uncertainty_pct(&self) -> Option<f64> {
        (self.mean > 0.0).then(|| 100.0 * self.std / self.mean)
    }

    /// Whether the central interval misses the mean.
    pub fn skewed(&self) -> bool {
        !(self.q05 <= self.mean && self.mean <= self.q95)
    }
}

/// Linear interpolation between order statistics.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    #[serde(flatten)]
    pub moments: Moments,
    pub skewed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub src: String,
    pub dst: String,
    #[serde(flatten)]
    pub moments: Moments,
    pub uncertainty_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: String,
    #[serde(flatten)]
    pub moments: Moments,
    pub uncertainty_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSummary {
    pub year: i32,
    pub flows: Vec<FlowSummary>,
    pub throughputs: Vec<NodeSummary>,
    pub inflows: Vec<NodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub schema: String,
    pub n_particles: usize,
    /// Particles whose flows could not be solved; zero for a valid posterior.
    pub dropped_particles: usize,
    pub parameters: Vec<ParameterSummary>,
    pub years: Vec<YearSummary>,
}

/// Pushes every equal-weight particle through the flow solve and
/// summarizes parameters, edge flows, throughputs, and inflows.
pub fn summarize_posterior(model: &MfaModel, particles: &[Vec<f64>]) -> PosteriorSummary {
    use rayon::prelude::*;
    let net = model.network();
    let names = model.layout().names();
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col: Vec<f64> = particles.iter().map(|p| p[j]).collect();
            let moments = Moments::from_values(&col);
            ParameterSummary {
                name: name.clone(),
                skewed: moments.skewed(),
                moments,
            }
        })
        .collect();
    let mut dropped = BTreeSet::new();
    let mut years = Vec::new();
    for (k, year) in model.years().into_iter().enumerate() {
        let solved: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>> = particles
            .par_iter()
            .map(|p| {
                let sol = model.solve(p, k).ok()?;
                let q = model.inflows(p, k).ok()?;
                Some((sol.edge_flows, sol.z, q.values().to_vec()))
            })
            .collect();
        for (i, s) in solved.iter().enumerate() {
            if s.is_none() {
                dropped.insert(i);
            }
        }
        let ok: Vec<&(Vec<f64>, Vec<f64>, Vec<f64>)> = solved.iter().flatten().collect();
        if ok.is_empty() {
            years.push(YearSummary {
                year,
                flows: Vec::new(),
                throughputs: Vec::new(),
                inflows: Vec::new(),
            });
            continue;
        }
        let column = |f: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> f64| -> Moments {
            Moments::from_values(&ok.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        let flows = net
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let moments = column(&|s| s.0[e]);
                FlowSummary {
                    src: net.node(edge.src).id.clone(),
                    dst: net.node(edge.dst).id.clone(),
                    uncertainty_pct: moments.uncertainty_pct(),
                    moments,
                }
            })
            .collect();
        let throughputs = (0..net.n_nodes())
            .map(|i| {
                let moments = column(&|s| s.1[i]);
                NodeSummary {
                    node: net.node(i).id.clone(),
                    uncertainty_pct: moments.uncertainty_pct(),
                    moments,
                }
            })
            .collect();
        let inflows = net
            .inflow_nodes()
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let moments = column(&|s| s.2[slot]);
                NodeSummary {
                    node: net.node(i).id.clone(),
                    uncertainty_pct: moments.uncertainty_pct(),
                    moments,
                }
            })
            .collect();
        years.push(YearSummary {
            year,
            flows,
            throughputs,
            inflows,
        });
    }
    if !dropped.is_empty() {
        log::warn!("{} particles could not be solved and were dropped", dropped.len());
    }
    PosteriorSummary {
        schema: SUMMARY_SCHEMA.into(),
        n_particles: particles.len(),
        dropped_particles: dropped.len(),
        parameters,
        years,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyNode {
    pub id: String,
    pub name: String,
}

/// One band of the diagram. External inputs use `source = None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyLink {
    pub source: Option<String>,
    pub target: String,
    /// Posterior mean mass (Mt).
    pub value: f64,
    pub std: f64,
    /// Colour key: standard deviation as a percentage of the mean.
    pub uncertainty_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SankeyExport {
    pub schema: String,
    pub year: i32,
    pub nodes: Vec<SankeyNode>,
    pub links: Vec<SankeyLink>,
}

impl SankeyExport {
    /// Largest relative difference between incoming and outgoing link mass
    /// over nodes that have both.
    pub fn max_imbalance(&self) -> f64 {
        let mut inflow: BTreeMap<&str, f64> = BTreeMap::new();
        let mut outflow: BTreeMap<&str, f64> = BTreeMap::new();
        for l in &self.links {
            *inflow.entry(&l.target).or_default() += l.value;
            if let Some(s) = &l.source {
                *outflow.entry(s).or_default() += l.value;
            }
        }
        outflow
            .iter()
            .map(|(n, out)| {
                let inn = inflow.get(n).copied().unwrap_or(0.0);
                let scale = inn.abs().max(out.abs()).max(f64::MIN_POSITIVE);
                (inn - out).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

pub fn sankey_export(net: &FlowNetwork, year: &YearSummary) -> SankeyExport {
    let nodes = net
        .nodes()
        .iter()
        .map(|n| SankeyNode {
            id: n.id.clone(),
            name: n.display_name().to_string(),
        })
        .collect();
    let mut links: Vec<SankeyLink> = year
        .inflows
        .iter()
        .map(|q| SankeyLink {
            source: None,
            target: q.node.clone(),
            value: q.moments.mean,
            std: q.moments.std,
            uncertainty_pct: q.uncertainty_pct,
        })
        .collect();
    links.extend(year.flows.iter().map(|f| SankeyLink {
        source: Some(f.src.clone()),
        target: f.dst.clone(),
        value: f.moments.mean,
        std: f.moments.std,
        uncertainty_pct: f.uncertainty_pct,
    }));
    SankeyExport {
        schema: SANKEY_SCHEMA.into(),
        year: year.year,
        nodes,
        links,
    }
}

/// One row per particle, columns named after the layout plus the log
/// likelihood.
pub fn write_posterior(path: &Path, result: &SmcResult) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    let mut header = result.names.clone();
    header.push("log_likelihood".into());
    w.write_record(&header).map_err(fail)?;
    for (p, l) in result.population.particles.iter().zip(&result.population.log_likelihoods) {
        let mut row: Vec<String> = p.iter().map(|v| format_f64(*v)).collect();
        row.push(format_f64(*l));
        w.write_record(&row).map_err(fail)?;
    }
    finish_csv(path, w)
}

/// Reads a posterior dump back into column names and particles.
pub fn read_posterior(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), IngestError> {
    let text = read_text(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut names: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let has_ll = names.last().is_some_and(|n| n == "log_likelihood");
    if has_ll {
        names.pop();
    }
    let mut particles = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Table {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let values = row
            .iter()
            .take(names.len())
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IngestError::Table {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
        particles.push(values);
    }
    Ok((names, particles))
}

pub fn write_diagnostics(path: &Path, diagnostics: &SmcDiagnostics) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| IngestError::Table {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    for s in &diagnostics.stages {
        w.serialize(s).map_err(fail)?;
    }
    if diagnostics.stages.is_empty() {
        w.write_record(["stage", "beta", "ess", "resampled", "acceptance", "scale", "log_evidence"])
            .map_err(fail)?;
    }
    finish_csv(path, w)
}
