//! Synthetic studies shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use bayesmfa::likelihood::{NoiseModel, ObservationKind, ObservationRecord, SigmaRef};
use bayesmfa::priors::{InflowPrior, ParamPrior};
use bayesmfa::network::evaluate_qoi;
use bayesmfa::{AllocationMatrix, FlowNetwork, InflowVector, PriorAssembly, ScalarPrior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn steel_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/steel")
}

pub fn record(id: &str, kind: ObservationKind, query: &str, value: f64, year: i32, sigma: SigmaRef) -> ObservationRecord {
    ObservationRecord {
        id: id.into(),
        description: id.into(),
        kind,
        query: query.parse().unwrap(),
        value,
        year,
        source: "synthetic".into(),
        noise: NoiseModel::Relative,
        sigma,
    }
}

/// Upstream iron and steel network with ground-truth parameters.
pub struct SteelShaped {
    pub net: FlowNetwork,
    pub phi: AllocationMatrix,
    pub q: InflowVector,
    /// (group, true sigma)
    pub sigmas: Vec<(&'static str, f64)>,
    /// (group, kind, query)
    pub observed: Vec<(&'static str, ObservationKind, &'static str)>,
}

pub const STEEL_ALLOCATIONS: &[(&str, &str, f64)] = &[
    ("ore_prod", "export", 0.2),
    ("ore_prod", "ore_cons", 0.8),
    ("ore_cons", "bf", 1.0),
    ("dri", "export", 0.05),
    ("dri", "bof", 0.45),
    ("dri", "eaf", 0.5),
    ("bf", "pig_iron", 1.0),
    ("pig_iron", "export", 0.02),
    ("pig_iron", "bof", 0.8),
    ("pig_iron", "eaf", 0.15),
    ("pig_iron", "cupola", 0.03),
    ("scrap_col", "export", 0.3),
    ("scrap_col", "scrap_cons", 0.7),
    ("scrap_cons", "bf", 0.04),
    ("scrap_cons", "bof", 0.14),
    ("scrap_cons", "eaf", 0.8),
    ("scrap_cons", "cupola", 0.02),
    ("bof", "steel", 1.0),
    ("eaf", "steel", 1.0),
    ("cupola", "castings", 1.0),
];

pub fn steel_shaped() -> SteelShaped {
    let nodes = [
        "ore_prod", "ore_cons", "dri", "bf", "pig_iron", "scrap_col", "scrap_cons", "bof", "eaf", "cupola", "export",
        "steel", "castings",
    ];
    let edges: Vec<(&str, &str)> = STEEL_ALLOCATIONS.iter().map(|&(a, b, _)| (a, b)).collect();
    let inflows = ["ore_prod", "ore_cons", "dri", "pig_iron", "scrap_col", "scrap_cons"];
    let net = FlowNetwork::from_ids(&nodes, &edges, &inflows).unwrap();
    let phi = AllocationMatrix::from_pairs(&net, STEEL_ALLOCATIONS).unwrap();
    let q = InflowVector::from_pairs(
        &net,
        &[
            ("ore_prod", 54.7),
            ("ore_cons", 5.2),
            ("dri", 2.5),
            ("pig_iron", 4.3),
            ("scrap_col", 71.0),
            ("scrap_cons", 3.7),
        ],
    )
    .unwrap();
    use ObservationKind::*;
    SteelShaped {
        net,
        phi,
        q,
        sigmas: vec![("ore", 0.05), ("scrap", 0.08), ("steel", 0.05)],
        observed: vec![
            ("ore", ExternalInput, "input:ore_prod"),
            ("ore", ExternalInput, "input:ore_cons"),
            ("ore", Flow, "flow:ore_prod>export"),
            ("ore", Flow, "flow:ore_prod>ore_cons"),
            ("ore", Flow, "flow:ore_cons>bf"),
            ("scrap", ExternalInput, "input:dri"),
            ("scrap", Flow, "flow:dri>export"),
            ("scrap", Flow, "flow:dri>bof"),
            ("scrap", Flow, "flow:dri>eaf"),
            ("scrap", ExternalInput, "input:scrap_col"),
            ("scrap", ExternalInput, "input:scrap_cons"),
            ("scrap", Flow, "flow:scrap_col>export"),
            ("scrap", Flow, "flow:scrap_col>scrap_cons"),
            ("scrap", Flow, "flow:scrap_cons>bf"),
            ("scrap", Flow, "flow:scrap_cons>bof"),
            ("scrap", Flow, "flow:scrap_cons>eaf"),
            ("scrap", Flow, "flow:scrap_cons>cupola"),
            ("steel", ExternalInput, "input:pig_iron"),
            ("steel", Flow, "flow:bf>pig_iron"),
            ("steel", Flow, "flow:pig_iron>export"),
            ("steel", Flow, "flow:pig_iron>bof"),
            ("steel", Flow, "flow:pig_iron>eaf"),
            ("steel", Flow, "flow:pig_iron>cupola"),
            ("steel", Flow, "node:steel"),
        ],
    }
}

impl SteelShaped {
    /// Allocation parameters whose edge is observed directly.
    pub fn observed_phi(&self) -> Vec<String> {
        self.observed
            .iter()
            .filter_map(|(_, _, q)| q.strip_prefix("flow:"))
            .filter(|e| {
                let src = e.split('>').next().unwrap();
                STEEL_ALLOCATIONS.iter().filter(|a| a.0 == src).count() > 1
            })
            .map(|e| format!("phi[{e}]"))
            .collect()
    }

    /// Flat Dirichlet rows, default noise priors, and inflow priors of the
    /// kind experts produce: truncated normals 10 % off the truth with a
    /// 25 % spread.
    pub fn priors(&self) -> PriorAssembly {
        let groups: Vec<&str> = self.sigmas.iter().map(|s| s.0).collect();
        let mut priors = PriorAssembly::weakly_informative(&self.net, &groups, 200.0);
        for (p, &q) in priors.inflows.iter_mut().zip(self.q.values()) {
            p.prior = ParamPrior::Distribution(ScalarPrior::truncated_normal(1.1 * q, 0.25 * q, Some(0.0), None));
        }
        priors
    }

    /// Data for `years` with inflows scaled by a few percent per year and
    /// relative Gaussian noise at the true sigmas.
    pub fn records(&self, years: &[i32], seed: u64) -> Vec<ObservationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (k, &year) in years.iter().enumerate() {
            let scale = 1.0 + 0.03 * k as f64;
            let q = InflowVector::new(&self.net, self.q.values().iter().map(|v| v * scale).collect()).unwrap();
            for (j, (group, kind, query)) in self.observed.iter().enumerate() {
                let truth = evaluate_qoi(&self.net, &self.phi, &q, &query.parse().unwrap()).unwrap();
                let sigma = self.sigmas.iter().find(|s| s.0 == *group).unwrap().1;
                let eps: f64 = StandardNormal.sample(&mut rng);
                let value = truth * (1.0 + sigma * eps);
                out.push(record(
                    &format!("{year}-{j:02}"),
                    *kind,
                    query,
                    value,
                    year,
                    SigmaRef::Group(group.to_string()),
                ));
            }
        }
        out
    }
}

/// Source splitting into three sinks with a fixed inflow, observed through
/// ratios every year.
pub fn three_way_split(years: &[i32], phi: [f64; 3], sigma: f64, seed: u64) -> (FlowNetwork, PriorAssembly, Vec<ObservationRecord>) {
    let net = FlowNetwork::from_ids(&["s", "a", "b", "c"], &[("s", "a"), ("s", "b"), ("s", "c")], &["s"]).unwrap();
    let mut priors = PriorAssembly::weakly_informative(&net, &["g"], 200.0);
    priors.inflows = vec![InflowPrior {
        node: "s".into(),
        prior: ParamPrior::Fixed { fixed: 10.0 },
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for &year in years {
        for (d, p) in ["a", "b", "c"].iter().zip(phi) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            records.push(record(
                &format!("{year}-{d}"),
                ObservationKind::Ratio,
                &format!("ratio:s>{d}"),
                (p * (1.0 + sigma * eps)).clamp(1e-6, 1.0),
                year,
                SigmaRef::Group("g".into()),
            ));
        }
    }
    (net, priors, records)
}
