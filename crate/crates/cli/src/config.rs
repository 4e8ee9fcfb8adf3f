//! Experiment configuration: JSON ingestion, overrides, defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use twoscale::network::TopologyKind;

use crate::CliError;

pub const DEFAULT_ALPHA0: f64 = 0.5;
pub const DEFAULT_BETA0: f64 = 0.1;
pub const DEFAULT_REPLICAS: usize = 32;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUTPUT: &str = "runs";
pub const DEFAULT_DELTA_MARGIN: f64 = 0.5;
pub const DEFAULT_ISO_NOISE: f64 = 0.1;
pub const DEFAULT_FIT_WINDOW: [u64; 2] = [1_000, 100_000];
pub const DEFAULT_CONSENSUS_WINDOW: [u64; 2] = [1_000, 10_000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Random {
        d: usize,
        nodes: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_margin")]
        delta_margin: f64,
        /// Size of the zero-mean per-node block perturbations.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        heterogeneity: Option<f64>,
    },
    Gtd {
        transitions: Vec<Vec<f64>>,
        /// One reward table per agent.
        rewards: Vec<Vec<f64>>,
        features: Vec<Vec<f64>>,
        gamma: f64,
    },
    GtdRandom {
        states: usize,
        d: usize,
        agents: usize,
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

fn default_margin() -> f64 {
    DEFAULT_DELTA_MARGIN
}

impl SystemSpec {
    pub fn is_gtd(&self) -> bool {
        matches!(self, SystemSpec::Gtd { .. } | SystemSpec::GtdRandom { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Name(TopologyKind),
    Full {
        kind: TopologyKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edge_prob: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
}

impl TopologySpec {
    pub fn kind(&self) -> TopologyKind {
        match self {
            TopologySpec::Name(k) | TopologySpec::Full { kind: k, .. } => *k,
        }
    }

    pub fn edge_prob(&self) -> Option<f64> {
        match self {
            TopologySpec::Name(_) => None,
            TopologySpec::Full { edge_prob, .. } => *edge_prob,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TopologySpec::Name(_) => 0,
            TopologySpec::Full { seed, .. } => *seed,
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.edge_prob() {
            Some(p) => write!(f, "{}(p={p}, seed={})", self.kind(), self.seed()),
            None => write!(f, "{}", self.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// No noise.
    None,
    /// Noise induced by sampling transitions; GTD systems only.
    Sampled,
    /// `Γ = v·I`.
    Iso(f64),
    /// Full `2d×2d` covariance.
    Gamma(Vec<Vec<f64>>),
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub topology: TopologySpec,
    pub topology_v: TopologySpec,
    pub laziness: f64,
    pub laziness_v: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub delta: Option<f64>,
    pub noise: NoiseSpec,
    pub iterations: usize,
    pub record_every: usize,
    pub replicas: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Requested proof audit. The effective flag is [`LoadedConfig::audit_enabled`].
    pub audit: bool,
    pub fit_window: [u64; 2],
    pub consensus_window: [u64; 2],
    pub d0: Option<f64>,
    pub d1: Option<f64>,
}

/// Config as written by the user; every field except the system, topology
/// and iteration count is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: SystemSpec,
    topology: TopologySpec,
    topology_v: Option<TopologySpec>,
    laziness: Option<f64>,
    laziness_v: Option<f64>,
    alpha0: Option<f64>,
    beta0: Option<f64>,
    delta: Option<f64>,
    noise: Option<NoiseSpec>,
    #[serde(alias = "K")]
    iterations: usize,
    record_every: Option<usize>,
    replicas: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    audit: Option<bool>,
    fit_window: Option<[u64; 2]>,
    consensus_window: Option<[u64; 2]>,
    d0: Option<f64>,
    d1: Option<f64>,
}

/// A validated config with the defaults that were filled in and any
/// non-fatal warnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub defaults_applied: Vec<String>,
    pub warnings: Vec<String>,
}

impl LoadedConfig {
    /// The proof audit runs only when requested and `β₀ ≤ α₀`.
    pub fn audit_enabled(&self) -> bool {
        self.config.audit && self.config.beta0 <= self.config.alpha0
    }
}

/// Reads a config file, applies `--set` overrides and validates it.
/// Relative system file paths are resolved against the config's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    apply_overrides(&mut value, overrides)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config_from_value(value, Some(base))
}

/// Applies `path.to.key=value` edits. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Override(format!("expected path=value, got `{item}`")))?;
        let new: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(value, path, new)?;
    }
    Ok(())
}

pub fn set_path(value: &mut Value, path: &str, new: Value) -> Result<(), CliError> {
    let mut keys: Vec<&str> = path.split('.').collect();
    if keys.len() == 1 && matches!(keys[0], "K" | "iterations") {
        if let Some(map) = value.as_object_mut() {
            map.remove("K");
        }
        keys[0] = "iterations";
    }
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Override(format!("malformed key path `{path}`")));
    }
    let mut cur = value;
    for (i, key) in keys.iter().enumerate() {
        if !cur.is_object() {
            return Err(CliError::Override(format!(
                "`{}` is not an object",
                keys[..i].join(".")
            )));
        }
        let map = cur.as_object_mut().expect("checked above");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), new);
            return Ok(());
        }
        cur = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key path has at least one element")
}

/// Validates a JSON document and fills in defaults. All semantic problems
/// are reported together.
pub fn config_from_value(value: Value, base: Option<&Path>) -> Result<LoadedConfig, CliError> {
    let raw: RawConfig = serde_json::from_value(value).map_err(|e| CliError::Parse {
        source_name: "config".into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut defaults = Vec::new();
    let mut warnings = Vec::new();
    let mut errors = Vec::new();

    macro_rules! or_default {
        ($field:expr, $name:literal, $default:expr) => {
            match $field {
                Some(v) => v,
                None => {
                    let v = $default;
                    defaults.push(format!("{} = {}", $name, serde_json::json!(v)));
                    v
                }
            }
        };
    }

    let k = raw.iterations;
    let topology_v = or_default!(raw.topology_v, "topology_v", raw.topology.clone());
    let laziness = or_default!(raw.laziness, "laziness", 0.0);
    let laziness_v = or_default!(raw.laziness_v, "laziness_v", laziness);
    let alpha0 = or_default!(raw.alpha0, "alpha0", DEFAULT_ALPHA0);
    let beta0 = or_default!(raw.beta0, "beta0", DEFAULT_BETA0);
    let noise_default = if raw.system.is_gtd() {
        NoiseSpec::Sampled
    } else {
        NoiseSpec::Iso(DEFAULT_ISO_NOISE)
    };
    let noise = or_default!(raw.noise, "noise", noise_default);
    let record_every = or_default!(raw.record_every, "record_every", (k / 1000).max(1));
    let replicas = or_default!(raw.replicas, "replicas", DEFAULT_REPLICAS);
    let seed = or_default!(raw.seed, "seed", DEFAULT_SEED);
    let output = or_default!(raw.output, "output", PathBuf::from(DEFAULT_OUTPUT));
    let audit = or_default!(raw.audit, "audit", true);
    let fit_window = or_default!(raw.fit_window, "fit_window", DEFAULT_FIT_WINDOW);
    let consensus_window = or_default!(
        raw.consensus_window,
        "consensus_window",
        DEFAULT_CONSENSUS_WINDOW
    );
    if raw.delta.is_none() {
        defaults.push("delta = (1 + sigma)/2".into());
    }

    if k < 1 {
        errors.push("iterations must be at least 1".to_string());
    }
    if record_every < 1 {
        errors.push("record_every must be at least 1".to_string());
    }
    if replicas < 1 {
        errors.push("replicas must be at least 1".to_string());
    }
    for (name, v) in [("alpha0", alpha0), ("beta0", beta0)] {
        if !(v > 0.0 && v.is_finite()) {
            errors.push(format!("{name} must be positive and finite, got {v}"));
        }
    }
    if beta0 > alpha0 {
        warnings.push(format!(
            "beta0 = {beta0} exceeds alpha0 = {alpha0}; the time scales are inverted and the proof audit is disabled"
        ));
    }
    for (name, v) in [("laziness", laziness), ("laziness_v", laziness_v)] {
        if !(0.0..1.0).contains(&v) {
            errors.push(format!("{name} must lie in [0, 1), got {v}"));
        }
    }
    if let Some(delta) = raw.delta {
        if !(delta > 0.0 && delta < 1.0) {
            errors.push(format!("delta must lie in (0, 1), got {delta}"));
        }
    }
    for (name, v) in [("d0", raw.d0), ("d1", raw.d1)] {
        if let Some(v) = v {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be nonnegative and finite, got {v}"));
            }
        }
    }
    for (name, w) in [
        ("fit_window", fit_window),
        ("consensus_window", consensus_window),
    ] {
        if w[0] < 1 || w[0] >= w[1] {
            errors.push(format!("{name} must satisfy 1 ≤ lo < hi, got {w:?}"));
        }
    }
    for (name, t) in [("topology", &raw.topology), ("topology_v", &topology_v)] {
        if let Some(p) = t.edge_prob() {
            if !(p > 0.0 && p <= 1.0) {
                errors.push(format!("{name}.edge_prob must lie in (0, 1], got {p}"));
            }
        }
    }
    match &noise {
        NoiseSpec::Sampled if !raw.system.is_gtd() => {
            errors.push("noise \"sampled\" requires a gtd or gtd_random system".into())
        }
        NoiseSpec::Iso(v) if !(*v >= 0.0 && v.is_finite()) => {
            errors.push(format!("noise.iso must be nonnegative, got {v}"))
        }
        _ => {}
    }
    let system = match raw.system {
        SystemSpec::File { path } => SystemSpec::File {
            path: match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path,
            },
        },
        other => other,
    };
    match &system {
        SystemSpec::Random {
            d,
            nodes,
            delta_margin,
            heterogeneity,
            ..
        } => {
            if *d < 1 || *nodes < 1 {
                errors.push(format!(
                    "system needs d ≥ 1 and nodes ≥ 1, got d = {d}, nodes = {nodes}"
                ));
            }
            if !(*delta_margin > 0.0) {
                errors.push(format!(
                    "system.delta_margin must be positive, got {delta_margin}"
                ));
            }
            if let Some(h) = heterogeneity {
                if !(*h >= 0.0 && h.is_finite()) {
                    errors.push(format!("system.heterogeneity must be nonnegative, got {h}"));
                }
            }
        }
        SystemSpec::Gtd { gamma, .. } | SystemSpec::GtdRandom { gamma, .. } => {
            if !(0.0..1.0).contains(gamma) {
                errors.push(format!("system.gamma must lie in [0, 1), got {gamma}"));
            }
        }
        SystemSpec::File { .. } => {}
    }

    if !errors.is_empty() {
        return Err(CliError::Invalid(errors));
    }
    Ok(LoadedConfig {
        config: ExperimentConfig {
            system,
            topology: raw.topology,
            topology_v,
            laziness,
            laziness_v,
            alpha0,
            beta0,
            delta: raw.delta,
            noise,
            iterations: k,
            record_every,
            replicas,
            seed,
            output,
            audit,
            fit_window,
            consensus_window,
            d0: raw.d0,
            d1: raw.d1,
        },
        defaults_applied: defaults,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "system": {"kind": "random", "d": 2, "nodes": 4},
            "topology": "ring",
            "iterations": 1000
        })
    }

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = config_from_value(minimal(), None).unwrap();
        assert_eq!(c.config.alpha0, 0.5);
        assert_eq!(c.config.beta0, 0.1);
        assert_eq!(c.config.replicas, 32);
        assert_eq!(c.config.seed, 0);
        assert_eq!(c.config.record_every, 1);
        assert_eq!(c.config.topology_v, c.config.topology);
        assert!(c.defaults_applied.iter().any(|d| d.starts_with("alpha0")));
        assert!(c.warnings.is_empty());
        assert!(c.audit_enabled());
    }

    #[test]
    fn k_alias_is_accepted() {
        let c = config_from_value(
            json!({"system": {"kind": "random", "d": 2, "nodes": 4}, "topology": "ring", "K": 50000}),
            None,
        )
        .unwrap();
        assert_eq!(c.config.iterations, 50000);
        assert_eq!(c.config.record_every, 50);
    }

    #[test]
    fn inverted_steps_warn_and_disable_audit() {
        let mut v = minimal();
        v["beta0"] = json!(0.9);
        let c = config_from_value(v, None).unwrap();
        assert_eq!(c.warnings.len(), 1);
        assert!(!c.audit_enabled());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut v = minimal();
        v["alpha_zero"] = json!(0.3);
        let err = config_from_value(v, None).unwrap_err().to_string();
        assert!(err.contains("alpha_zero"), "{err}");
    }

    #[test]
    fn semantic_errors_are_exhaustive() {
        let mut v = minimal();
        v["replicas"] = json!(0);
        v["alpha0"] = json!(-1.0);
        v["laziness"] = json!(1.5);
        v["iterations"] = json!(0);
        match config_from_value(v, None).unwrap_err() {
            CliError::Invalid(errs) => assert_eq!(errs.len(), 5, "{errs:?}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn overrides_edit_nested_keys() {
        let mut v = minimal();
        apply_overrides(
            &mut v,
            &[
                "system.nodes=8".into(),
                "topology=star".into(),
                "noise.iso=0.2".into(),
            ],
        )
        .unwrap();
        let c = config_from_value(v, None).unwrap();
        assert_eq!(c.config.topology.kind(), TopologyKind::Star);
        assert_eq!(c.config.noise, NoiseSpec::Iso(0.2));
        assert!(matches!(
            c.config.system,
            SystemSpec::Random { nodes: 8, .. }
        ));
        let mut v = minimal();
        assert!(apply_overrides(&mut v, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut v, &["topology.kind=ring".into()]).is_err());
    }

    #[test]
    fn sampled_noise_needs_gtd() {
        let mut v = minimal();
        v["noise"] = json!("sampled");
        assert!(config_from_value(v, None).is_err());
    }

    #[test]
    fn topology_object_form() {
        let mut v = minimal();
        v["topology"] = json!({"kind": "erdos_renyi", "edge_prob": 0.4, "seed": 3});
        let c = config_from_value(v, None).unwrap();
        assert_eq!(c.config.topology.edge_prob(), Some(0.4));
        assert_eq!(c.config.topology.seed(), 3);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = config_from_value(minimal(), None).unwrap().config;
        let back: ExperimentConfig =
            serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
