//! Pipeline configuration: one TOML file with sections mirroring the module
//! names, plus `ATTRPIPE_<SECTION>_<KEY>` environment overrides applied to
//! the parsed document before deserialization.
//!
//! Validation collects every violation with its field path instead of
//! stopping at the first; a config is either fully valid or rejected whole.
//! Relative paths resolve against the config file's directory, so bundled
//! fixture configs work from any working directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use attrpipe_core::distillation::DistillationConfig;
use attrpipe_core::replay::WorldConfig;

pub const ENV_PREFIX: &str = "ATTRPIPE_";

const SECTIONS: &[&str] = &[
    "corpus",
    "attributes",
    "backend",
    "scheduler",
    "distillation",
    "index",
    "gating",
    "simulation",
    "seeds",
];

/// One config violation, named by the field that caused it.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

impl Violation {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: String,
    pub dim: usize,
    /// Skip and report bad lines instead of failing the whole ingest.
    pub lenient: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: String::new(),
            dim: 8,
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributesSection {
    pub path: String,
}

impl Default for AttributesSection {
    fn default() -> Self {
        Self {
            path: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// "synthetic" or "remote".
    pub kind: String,
    pub endpoint: String,
    /// Synthetic scorer sharpness.
    pub sharpness: f64,
    /// Timestamp stamped on synthetic annotations.
    pub clock: i64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: "synthetic".to_string(),
            endpoint: String::new(),
            sharpness: 4.0,
            clock: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub budget: usize,
    pub batch_size: usize,
    pub parallelism: usize,
    pub w_new: f64,
    pub w_trending: f64,
    pub w_impact: f64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            budget: 1000,
            batch_size: 16,
            parallelism: 2,
            w_new: 1.0,
            w_trending: 1.0,
            w_impact: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_fraction: f64,
    pub hidden_dim: usize,
}

impl Default for DistillationSection {
    fn default() -> Self {
        let d = DistillationConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            split_fraction: d.split_fraction,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub clusters: usize,
    pub probes: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            clusters: 16,
            probes: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingSection {
    pub tau: f64,
    pub gamma: f64,
    /// Slate slots reserved per triggered attribute; absent means ceil(k/4).
    pub quota: Option<usize>,
}

impl Default for GatingSection {
    fn default() -> Self {
        Self {
            tau: 0.3,
            gamma: 0.9,
            quota: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub dim: usize,
    pub n_videos: usize,
    pub n_users: usize,
    pub attributes: Vec<String>,
    pub alpha: f64,
    pub sigma: f64,
    pub sharpness: f64,
    pub decision_threshold: f64,
    pub history_len: usize,
    pub favorite_share: f64,
    pub decoy_share: f64,
    pub p_match: f64,
    pub p_base: f64,
    pub sessions_per_user: usize,
    pub k: usize,
    pub golden_size: usize,
    pub silver_budget: usize,
    pub held_out_size: usize,
    pub fidelity_gate: f64,
    pub fidelity_gap_limit: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            dim: w.dim,
            n_videos: w.n_videos,
            n_users: w.n_users,
            attributes: w.attributes,
            alpha: w.alpha,
            sigma: w.sigma,
            sharpness: w.sharpness,
            decision_threshold: w.decision_threshold,
            history_len: w.history_len,
            favorite_share: w.favorite_share,
            decoy_share: w.decoy_share,
            p_match: w.p_match,
            p_base: w.p_base,
            sessions_per_user: 3,
            k: 20,
            golden_size: 200,
            silver_budget: 5000,
            held_out_size: 1000,
            fidelity_gate: 0.95,
            fidelity_gap_limit: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub world: u64,
    pub index: u64,
    pub distillation: u64,
    pub backend: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self {
            world: 42,
            index: 42,
            distillation: 42,
            backend: 42,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub attributes: AttributesSection,
    pub backend: BackendSection,
    pub scheduler: SchedulerSection,
    pub distillation: DistillationSection,
    pub index: IndexSection,
    pub gating: GatingSection,
    pub simulation: SimulationSection,
    pub seeds: SeedsSection,
}

impl PipelineConfig {
    /// The world the simulation section describes, under the given seed.
    pub fn world_config(&self, seed: u64) -> WorldConfig {
        let s = &self.simulation;
        WorldConfig {
            seed,
            dim: s.dim,
            n_videos: s.n_videos,
            n_users: s.n_users,
            attributes: s.attributes.clone(),
            alpha: s.alpha,
            sigma: s.sigma,
            sharpness: s.sharpness,
            decision_threshold: s.decision_threshold,
            history_len: s.history_len,
            favorite_share: s.favorite_share,
            decoy_share: s.decoy_share,
            p_match: s.p_match,
            p_base: s.p_base,
        }
    }

    pub fn distillation_config(&self, seed: u64) -> DistillationConfig {
        let d = &self.distillation;
        DistillationConfig {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed,
            split_fraction: d.split_fraction,
            hidden_dim: d.hidden_dim,
        }
    }
}

/// Environment overrides: `ATTRPIPE_<SECTION>_<KEY>` patches one key in one
/// section. Values are coerced to the type already present at that key, or
/// inferred (bool, then integer, then float, then string) for keys the file
/// left to defaults.
fn apply_env_overrides(
    doc: &mut toml::Table,
    env: &[(String, String)],
    violations: &mut Vec<Violation>,
) {
    for (key, value) in env {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section, field)) = rest.split_once('_') else {
            violations.push(Violation::new(
                key,
                "expected ATTRPIPE_<SECTION>_<KEY>".to_string(),
            ));
            continue;
        };
        let section = section.to_ascii_lowercase();
        let field = field.to_ascii_lowercase();
        if !SECTIONS.contains(&section.as_str()) {
            violations.push(Violation::new(key, format!("unknown section '{section}'")));
            continue;
        }
        let table = doc
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(table) = table.as_table_mut() else {
            violations.push(Violation::new(&section, "section is not a table"));
            continue;
        };
        let path = format!("{section}.{field}");
        let coerced = match table.get(&field) {
            Some(toml::Value::Boolean(_)) => value
                .parse::<bool>()
                .map(toml::Value::Boolean)
                .map_err(|_| format!("environment override '{value}' is not a boolean")),
            Some(toml::Value::Integer(_)) => value
                .parse::<i64>()
                .map(toml::Value::Integer)
                .map_err(|_| format!("environment override '{value}' is not an integer")),
            Some(toml::Value::Float(_)) => value
                .parse::<f64>()
                .map(toml::Value::Float)
                .map_err(|_| format!("environment override '{value}' is not a number")),
            _ => Ok(infer_value(value)),
        };
        match coerced {
            Ok(v) => {
                table.insert(field, v);
            }
            Err(reason) => violations.push(Violation::new(&path, reason)),
        }
    }
}

fn infer_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn section<T: Default + serde::de::DeserializeOwned>(
    doc: &toml::Table,
    name: &str,
    violations: &mut Vec<Violation>,
) -> T {
    match doc.get(name) {
        None => T::default(),
        Some(value) => match value.clone().try_into::<T>() {
            Ok(parsed) => parsed,
            Err(e) => {
                violations.push(Violation::new(name, e.to_string()));
                T::default()
            }
        },
    }
}

fn resolve(base: &Path, raw: &str) -> String {
    let p = Path::new(raw);
    if raw.is_empty() || p.is_absolute() {
        raw.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

fn check_path(field: &str, path: &str, required: bool, violations: &mut Vec<Violation>) {
    if path.is_empty() {
        if required {
            violations.push(Violation::new(field, "path is required"));
        }
        return;
    }
    if !Path::new(path).exists() {
        violations.push(Violation::new(field, format!("path '{path}' does not exist")));
    }
}

fn check_unit(field: &str, value: f64, violations: &mut Vec<Violation>) {
    if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
        violations.push(Violation::new(field, format!("must be in [0, 1], got {value}")));
    }
}

fn check_positive(field: &str, value: f64, violations: &mut Vec<Violation>) {
    if !(value.is_finite() && value > 0.0) {
        violations.push(Violation::new(field, format!("must be > 0, got {value}")));
    }
}

fn check_weight(field: &str, value: f64, violations: &mut Vec<Violation>) {
    if !(value.is_finite() && value >= 0.0) {
        violations.push(Violation::new(field, format!("must be >= 0, got {value}")));
    }
}

fn check_at_least(field: &str, value: usize, min: usize, violations: &mut Vec<Violation>) {
    if value < min {
        violations.push(Violation::new(field, format!("must be >= {min}, got {value}")));
    }
}

/// Loads, patches with environment overrides, resolves paths, and validates.
/// Either every check passes and the full config comes back, or the complete
/// violation list does.
pub fn validate_config(path: &Path) -> Result<PipelineConfig, Vec<Violation>> {
    let env: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    validate_config_with_env(path, &env)
}

pub fn validate_config_with_env(
    path: &Path,
    env: &[(String, String)],
) -> Result<PipelineConfig, Vec<Violation>> {
    let mut violations = Vec::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            return Err(vec![Violation::new(
                "config",
                format!("cannot read '{}': {e}", path.display()),
            )]);
        }
    };
    let mut doc: toml::Table = match text.parse() {
        Ok(d) => d,
        Err(e) => return Err(vec![Violation::new("config", e.to_string())]),
    };
    for key in doc.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            violations.push(Violation::new(key, "unknown section"));
        }
    }
    apply_env_overrides(&mut doc, env, &mut violations);

    let mut config = PipelineConfig {
        corpus: section(&doc, "corpus", &mut violations),
        attributes: section(&doc, "attributes", &mut violations),
        backend: section(&doc, "backend", &mut violations),
        scheduler: section(&doc, "scheduler", &mut violations),
        distillation: section(&doc, "distillation", &mut violations),
        index: section(&doc, "index", &mut violations),
        gating: section(&doc, "gating", &mut violations),
        simulation: section(&doc, "simulation", &mut violations),
        seeds: section(&doc, "seeds", &mut violations),
    };

    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    config.corpus.path = resolve(&base, &config.corpus.path);
    config.attributes.path = resolve(&base, &config.attributes.path);

    check_path("corpus.path", &config.corpus.path, true, &mut violations);
    check_at_least("corpus.dim", config.corpus.dim, 1, &mut violations);
    check_path(
        "attributes.path",
        &config.attributes.path,
        true,
        &mut violations,
    );

    match config.backend.kind.as_str() {
        "synthetic" => {}
        "remote" => {
            if config.backend.endpoint.is_empty() {
                violations.push(Violation::new(
                    "backend.endpoint",
                    "required for backend.kind = \"remote\"",
                ));
            }
        }
        other => violations.push(Violation::new(
            "backend.kind",
            format!("must be \"synthetic\" or \"remote\", got \"{other}\""),
        )),
    }
    check_positive("backend.sharpness", config.backend.sharpness, &mut violations);

    check_at_least("scheduler.budget", config.scheduler.budget, 1, &mut violations);
    check_at_least(
        "scheduler.batch_size",
        config.scheduler.batch_size,
        1,
        &mut violations,
    );
    check_at_least(
        "scheduler.parallelism",
        config.scheduler.parallelism,
        1,
        &mut violations,
    );
    check_weight("scheduler.w_new", config.scheduler.w_new, &mut violations);
    check_weight(
        "scheduler.w_trending",
        config.scheduler.w_trending,
        &mut violations,
    );
    check_weight("scheduler.w_impact", config.scheduler.w_impact, &mut violations);

    check_positive(
        "distillation.learning_rate",
        config.distillation.learning_rate,
        &mut violations,
    );
    check_at_least("distillation.epochs", config.distillation.epochs, 1, &mut violations);
    check_at_least(
        "distillation.batch_size",
        config.distillation.batch_size,
        1,
        &mut violations,
    );
    if !(config.distillation.split_fraction.is_finite()
        && config.distillation.split_fraction > 0.0
        && config.distillation.split_fraction < 1.0)
    {
        violations.push(Violation::new(
            "distillation.split_fraction",
            format!("must be in (0, 1), got {}", config.distillation.split_fraction),
        ));
    }
    check_at_least(
        "distillation.hidden_dim",
        config.distillation.hidden_dim,
        1,
        &mut violations,
    );

    check_at_least("index.clusters", config.index.clusters, 1, &mut violations);
    check_at_least("index.probes", config.index.probes, 1, &mut violations);

    check_unit("gating.tau", config.gating.tau, &mut violations);
    if !(config.gating.gamma.is_finite()
        && config.gating.gamma > 0.0
        && config.gating.gamma < 1.0)
    {
        violations.push(Violation::new(
            "gating.gamma",
            format!("must be in (0, 1), got {}", config.gating.gamma),
        ));
    }

    let sim = &config.simulation;
    if let Err(e) = config.world_config(config.seeds.world).validate() {
        violations.push(Violation::new("simulation", e.to_string()));
    }
    check_at_least(
        "simulation.sessions_per_user",
        sim.sessions_per_user,
        1,
        &mut violations,
    );
    check_at_least("simulation.k", sim.k, 1, &mut violations);
    check_at_least("simulation.golden_size", sim.golden_size, 1, &mut violations);
    check_at_least("simulation.silver_budget", sim.silver_budget, 1, &mut violations);
    check_at_least("simulation.held_out_size", sim.held_out_size, 1, &mut violations);
    check_unit("simulation.fidelity_gate", sim.fidelity_gate, &mut violations);
    check_weight(
        "simulation.fidelity_gap_limit",
        sim.fidelity_gap_limit,
        &mut violations,
    );

    if violations.is_empty() {
        Ok(config)
    } else {
        Err(violations)
    }
}

/// Stable echo of the knobs a run depended on, for report files.
pub fn config_echo(config: &PipelineConfig) -> BTreeMap<String, serde_json::Value> {
    let mut echo = BTreeMap::new();
    let value = serde_json::to_value(config).expect("config serializes");
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            echo.insert(k, v);
        }
    }
    echo
}
