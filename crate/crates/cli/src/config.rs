//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wpo_core::baselines::BaselineSpec;
use wpo_core::forecaster::TrainConfig;
use wpo_core::grid::{ieee33_original, load_ieee33, CostProfile, Network};
use wpo_core::scenarios::{Case, GeneratorConfig};
use wpo_core::surrogate::SurrogateTrainConfig;
use wpo_core::wpo::{DescentConfig, WpoConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const BUILTIN_IEEE33: &str = "builtin:ieee33";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `builtin:ieee33` or a path to a network JSON file.
    pub source: String,
    /// Overrides the costs stored with the network.
    #[serde(default)]
    pub costs: Option<CostProfile>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterSection {
    /// Single-task training (retraining at chosen weights, `train`).
    pub stl: TrainConfig,
    /// Joint training over the weight settings.
    pub mtl: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpoSection {
    pub n_weight_settings: usize,
    pub dirichlet_alpha: f64,
    pub include_uniform: bool,
    pub sparse_settings: usize,
    pub sparse_alpha: f64,
    pub eval_samples: usize,
    pub report_eval_samples: usize,
    pub retrains: usize,
    pub surrogate: SurrogateTrainConfig,
    pub descent: DescentConfig,
}

impl Default for WpoSection {
    fn default() -> Self {
        let d = WpoConfig::default();
        WpoSection {
            n_weight_settings: d.n_weight_settings,
            dirichlet_alpha: d.dirichlet_alpha,
            include_uniform: d.include_uniform,
            sparse_settings: d.sparse_settings,
            sparse_alpha: d.sparse_alpha,
            eval_samples: d.eval_samples,
            report_eval_samples: d.report_eval_samples,
            retrains: d.retrains,
            surrogate: d.surrogate,
            descent: d.descent,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub network: NetworkSection,
    #[serde(default)]
    pub scenario: GeneratorConfig,
    /// Authoritative over `scenario.case`.
    pub case: Case,
    #[serde(default)]
    pub forecaster: ForecasterSection,
    #[serde(default)]
    pub wpo: WpoSection,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineSpec>,
    /// Master seeds used by `compare` (one row per method per seed).
    #[serde(default = "default_compare_seeds")]
    pub compare_seeds: Vec<u64>,
    pub out: PathBuf,
    pub seed: u64,
}

fn default_baselines() -> Vec<BaselineSpec> {
    vec![
        BaselineSpec::Uniform,
        BaselineSpec::Margin,
        BaselineSpec::feeder_end_default(),
    ]
}

fn default_compare_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

const FIELDS: [&str; 10] = [
    "schema_version",
    "network",
    "scenario",
    "case",
    "forecaster",
    "wpo",
    "baselines",
    "compare_seeds",
    "out",
    "seed",
];

/// A parsed config with the digest of its source bytes.
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub hash: String,
    /// Directory relative paths in the config resolve against.
    pub base: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = parse(&text).with_context(|| format!("config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded {
        cfg,
        hash: sha256_hex(text.as_bytes()),
        base,
    })
}

/// Parses and validates; errors name the offending field and its line.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| anyhow!("invalid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| anyhow!("config must be a JSON object"))?;
    for key in obj.keys() {
        if !FIELDS.contains(&key.as_str()) {
            bail!("unknown field `{key}`{}", line_of(text, key));
        }
    }
    for key in ["schema_version", "network", "case", "out", "seed"] {
        if !obj.contains_key(key) {
            bail!("missing field `{key}`");
        }
    }
    let cfg: ExperimentConfig = match serde_json::from_value(value.clone()) {
        Ok(c) => c,
        Err(e) => {
            // re-run field by field so the message names the culprit
            for key in FIELDS {
                if let Some(v) = obj.get(key) {
                    if let Err(fe) = check_field(key, v) {
                        bail!("field `{key}`{}: {fe}", line_of(text, key));
                    }
                }
            }
            bail!("{e}");
        }
    };
    if cfg.schema_version != SCHEMA_VERSION {
        bail!(
            "field `schema_version`{}: unsupported version {} (expected {SCHEMA_VERSION})",
            line_of(text, "schema_version"),
            cfg.schema_version
        );
    }
    if cfg.compare_seeds.is_empty() {
        bail!("field `compare_seeds`: needs at least one seed");
    }
    Ok(cfg)
}

fn check_field(key: &str, v: &serde_json::Value) -> std::result::Result<(), serde_json::Error> {
    use serde_json::from_value as fv;
    let v = v.clone();
    match key {
        "schema_version" => fv::<u32>(v).map(drop),
        "network" => fv::<NetworkSection>(v).map(drop),
        "scenario" => fv::<GeneratorConfig>(v).map(drop),
        "case" => fv::<Case>(v).map(drop),
        "forecaster" => fv::<ForecasterSection>(v).map(drop),
        "wpo" => fv::<WpoSection>(v).map(drop),
        "baselines" => fv::<Vec<BaselineSpec>>(v).map(drop),
        "compare_seeds" => fv::<Vec<u64>>(v).map(drop),
        "out" => fv::<PathBuf>(v).map(drop),
        "seed" => fv::<u64>(v).map(drop),
        _ => Ok(()),
    }
}

fn line_of(text: &str, key: &str) -> String {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| format!(" (line {})", i + 1))
        .unwrap_or_default()
}

impl ExperimentConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            case: self.case.clone(),
            ..self.scenario.clone()
        }
    }

    /// Stage configuration for one master seed.
    pub fn wpo_config(&self, master: u64, jobs: usize) -> WpoConfig {
        let w = &self.wpo;
        WpoConfig {
            n_weight_settings: w.n_weight_settings,
            dirichlet_alpha: w.dirichlet_alpha,
            include_uniform: w.include_uniform,
            sparse_settings: w.sparse_settings,
            sparse_alpha: w.sparse_alpha,
            mtl: self.forecaster.mtl.clone(),
            stl: self.forecaster.stl.clone(),
            eval_samples: w.eval_samples,
            report_eval_samples: w.report_eval_samples,
            retrains: w.retrains,
            surrogate: w.surrogate.clone(),
            descent: w.descent.clone(),
            seed: master,
            jobs,
        }
        .seeded(master)
    }

    /// The experiment network and the network used for the margin baseline.
    pub fn networks(&self, base: &Path) -> Result<(Network, Network)> {
        let (mut net, mut margin) = if self.network.source == BUILTIN_IEEE33 {
            (load_ieee33(), ieee33_original())
        } else {
            let p = base.join(&self.network.source);
            let net = Network::load(&p)
                .with_context(|| format!("field `network`: loading {}", p.display()))?;
            (net.clone(), net)
        };
        if let Some(c) = self.network.costs {
            net = net.with_costs(c.costs());
            margin = margin.with_costs(c.costs());
        }
        Ok((net, margin))
    }
}
