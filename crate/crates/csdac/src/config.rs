//! TOML configuration with one section per module, environment-variable
//! overrides, and resolved-config snapshots.
//!
//! Power fields hold watts. In config files (and overrides) they also accept
//! strings with an explicit unit suffix — `"44 dBm"`, `"20 mW"`, `"0.1 W"` —
//! which are converted to watts while loading, so a resolved snapshot always
//! serializes plain numbers and round-trips to the identical run.
//!
//! Overrides come from environment variables named
//! `CSDAC_<SECTION>__<KEY>` (for example `CSDAC_AGENT__TOTAL_STEPS=4000`,
//! `CSDAC_NETWORK__P_CST_W="17 dBm"`); `CSDAC_<KEY>` overrides a top-level
//! key such as `seed`.

use crate::agent::Hyper;
use crate::env::{DeliveryMode, RewardParams};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::plant::PlantParams;
use crate::train::{EvalConfig, TrainSetup};
use std::path::Path;
use toml::Value;

/// Environment-variable override prefix.
pub const ENV_PREFIX: &str = "CSDAC_";

/// Reward weights and delivery semantics of the joint environment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnvSection {
    /// Update-cost weight in the base-module reward.
    pub mu1: f64,
    /// Penalty for violating the power budget.
    pub mu2: f64,
    /// Per-satisfied-user QoS bonus.
    pub mu3: f64,
    /// Whether control updates require URLLC delivery ("coupled") or always
    /// arrive ("decoupled").
    pub mode: DeliveryMode,
}

impl Default for EnvSection {
    fn default() -> Self {
        let r = RewardParams::default();
        EnvSection {
            mu1: r.mu1,
            mu2: r.mu2,
            mu3: r.mu3,
            mode: DeliveryMode::Coupled,
        }
    }
}

impl EnvSection {
    pub fn rewards(&self) -> RewardParams {
        RewardParams {
            mu1: self.mu1,
            mu2: self.mu2,
            mu3: self.mu3,
        }
    }
}

/// Evaluation protocol.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub episodes: usize,
    pub episode_len: usize,
    /// Residual-set radius for the boundedness check.
    pub rho: f64,
    /// Settling horizon of the boundedness check, in steps.
    pub t_settle: usize,
    /// Fraction of episodes that must settle.
    pub uub_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 50,
            episode_len: 300,
            rho: 0.05,
            t_settle: 100,
            uub_fraction: 0.9,
        }
    }
}

/// Event-trigger thresholds of the model-based baseline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BaselineSection {
    pub trigger_sigma: f64,
    pub trigger_eps0: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            trigger_sigma: crate::baseline::TRIGGER_SIGMA,
            trigger_eps0: crate::baseline::TRIGGER_EPS0,
        }
    }
}

/// Reward-weight sweep grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub mu3: Vec<f64>,
    /// Seeds per grid point.
    pub seeds: usize,
    /// Training step budget per run (kept short).
    pub steps: usize,
    /// Evaluation episodes per trained run.
    pub eval_episodes: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        let r = RewardParams::default();
        SweepSection {
            mu1: vec![0.1, r.mu1, 1.0],
            mu2: vec![r.mu2],
            mu3: vec![r.mu3],
            seeds: 5,
            steps: 4096,
            eval_episodes: 5,
        }
    }
}

/// The complete experiment configuration: one section per module plus the
/// top-level seed.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub plant: PlantParams,
    pub network: NetworkConfig,
    pub env: EnvSection,
    pub agent: Hyper,
    pub eval: EvalSection,
    pub baseline: BaselineSection,
    pub sweep: SweepSection,
}

impl AppConfig {
    /// Collect all domain problems at once, named by section and field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.network.validate() {
            problems.push(format!("network: {e}"));
        }
        if let Err(e) = self.agent.validate() {
            problems.push(format!("agent: {e}"));
        }
        for (field, v) in [
            ("plant.cart_mass", self.plant.cart_mass),
            ("plant.pole_mass", self.plant.pole_mass),
            ("plant.pole_half_length", self.plant.pole_half_length),
            ("plant.control_period", self.plant.control_period),
            ("plant.u_max", self.plant.u_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{field}: must be positive and finite, got {v}"));
            }
        }
        if self.plant.substeps == 0 {
            problems.push("plant.substeps: must be at least 1".into());
        }
        if self.plant.disturbance_std < 0.0 {
            problems.push(format!(
                "plant.disturbance_std: must be nonnegative, got {}",
                self.plant.disturbance_std
            ));
        }
        for (field, v) in [
            ("env.mu1", self.env.mu1),
            ("env.mu2", self.env.mu2),
            ("env.mu3", self.env.mu3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{field}: must be nonnegative and finite, got {v}"));
            }
        }
        if self.eval.episode_len == 0 {
            problems.push("eval.episode_len: must be at least 1".into());
        }
        if !(self.eval.rho > 0.0 && self.eval.rho.is_finite()) {
            problems.push(format!(
                "eval.rho: must be positive and finite, got {}",
                self.eval.rho
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.uub_fraction) {
            problems.push(format!(
                "eval.uub_fraction: must lie in [0, 1], got {}",
                self.eval.uub_fraction
            ));
        }
        for (field, v) in [
            ("baseline.trigger_sigma", self.baseline.trigger_sigma),
            ("baseline.trigger_eps0", self.baseline.trigger_eps0),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{field}: must be nonnegative and finite, got {v}"));
            }
        }
        if self.sweep.seeds == 0 {
            problems.push("sweep.seeds: must be at least 1".into());
        }
        if self.sweep.mu1.is_empty() || self.sweep.mu2.is_empty() || self.sweep.mu3.is_empty() {
            problems.push("sweep: every weight grid needs at least one value".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Assemble the training setup, with the seed optionally overridden.
    pub fn train_setup(&self, seed: Option<u64>) -> TrainSetup {
        TrainSetup {
            plant: self.plant,
            network: self.network.clone(),
            rewards: self.env.rewards(),
            hyper: self.agent.clone(),
            mode: self.env.mode,
            seed: seed.unwrap_or(self.seed),
            diag_dir: None,
        }
    }

    /// Assemble the evaluation protocol, with optional overrides.
    pub fn eval_config(
        &self,
        episodes: Option<usize>,
        mode: Option<DeliveryMode>,
        seed: Option<u64>,
    ) -> EvalConfig {
        EvalConfig {
            episodes: episodes.unwrap_or(self.eval.episodes),
            episode_len: self.eval.episode_len,
            mode: mode.unwrap_or(self.env.mode),
            seed: seed.unwrap_or(self.seed),
            record_traces: false,
        }
    }
}

/// Convert a power string with an explicit unit suffix to watts.
/// Accepts `dBm`, `mW`, and `W` (case-insensitive), e.g. `"44 dBm"` -> 25.12,
/// `"-62 dBm"` -> 6.31e-10, `"0.1 W"` -> 0.1.
pub fn parse_power(text: &str) -> Result<f64> {
    let t = text.trim();
    let lower = t.to_ascii_lowercase();
    let (digits, unit): (&str, &str) = if let Some(stripped) = lower.strip_suffix("dbm") {
        (&t[..stripped.len()], "dbm")
    } else if let Some(stripped) = lower.strip_suffix("mw") {
        (&t[..stripped.len()], "mw")
    } else if let Some(stripped) = lower.strip_suffix('w') {
        (&t[..stripped.len()], "w")
    } else {
        return Err(Error::Config(format!(
            "'{text}' has no power unit suffix (expected dBm, mW, or W)"
        )));
    };
    let value: f64 = digits
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("'{text}' is not a number with a power unit")))?;
    let watts = match unit {
        "dbm" => 10f64.powf((value - 30.0) / 10.0),
        "mw" => value * 1e-3,
        _ => value,
    };
    if !watts.is_finite() {
        return Err(Error::Config(format!("'{text}' converts to a non-finite power")));
    }
    Ok(watts)
}

/// Replace every string leaf that parses as a power quantity with its value
/// in watts. Other strings are left alone.
fn normalize_powers(value: &mut Value) {
    match value {
        Value::Table(table) => {
            for (_, v) in table.iter_mut() {
                normalize_powers(v);
            }
        }
        Value::Array(items) => {
            for v in items.iter_mut() {
                normalize_powers(v);
            }
        }
        Value::String(s) => {
            if let Ok(w) = parse_power(s) {
                *value = Value::Float(w);
            }
        }
        _ => {}
    }
}

/// Parse one override value: integers, floats, booleans, and power strings
/// become their typed values; anything else stays a string.
fn parse_override_value(raw: &str) -> Value {
    let t = raw.trim();
    if let Ok(i) = t.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = t.parse::<f64>() {
        return Value::Float(f);
    }
    if let Ok(b) = t.parse::<bool>() {
        return Value::Boolean(b);
    }
    if let Ok(w) = parse_power(t) {
        return Value::Float(w);
    }
    Value::String(t.to_string())
}

/// Apply `CSDAC_SECTION__KEY` / `CSDAC_KEY` overrides to a parsed table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        if rest.is_empty() {
            continue;
        }
        let value = parse_override_value(&raw);
        match rest.split_once("__") {
            Some((section, key)) if !section.is_empty() && !key.is_empty() => {
                let section = section.to_ascii_lowercase();
                let key = key.to_ascii_lowercase();
                let entry = table
                    .entry(section.clone())
                    .or_insert_with(|| Value::Table(toml::Table::new()));
                let Value::Table(sec) = entry else {
                    return Err(Error::Config(format!(
                        "override {name} targets '{section}', which is not a section"
                    )));
                };
                sec.insert(key, value);
            }
            _ => {
                table.insert(rest.to_ascii_lowercase(), value);
            }
        }
    }
    Ok(())
}

/// Parse a config document, normalize power strings, apply overrides, and
/// validate. `source` names the document in error messages.
pub fn config_from_str<I>(text: &str, source: &str, vars: I) -> Result<AppConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut value: Value = text
        .parse()
        .map_err(|e| Error::Config(format!("{source}: {e}")))?;
    let Value::Table(ref mut table) = value else {
        return Err(Error::Config(format!("{source}: not a TOML table")));
    };
    apply_overrides(table, vars)?;
    normalize_powers(&mut value);
    let config: AppConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("{source}: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Load a config file, applying overrides from the process environment.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    load_config_with(path, std::env::vars())
}

/// Load a config file with an explicit override set (for tests).
pub fn load_config_with<I>(path: &Path, vars: I) -> Result<AppConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    config_from_str(&text, &path.display().to_string(), vars)
}

/// Serialize the fully resolved configuration (all powers in watts).
pub fn resolved_toml(config: &AppConfig) -> Result<String> {
    toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("cannot serialize resolved config: {e}")))
}

/// Write a resolved-config snapshot next to a run's outputs.
pub fn write_snapshot(path: &Path, config: &AppConfig) -> Result<()> {
    std::fs::write(path, resolved_toml(config)?)?;
    Ok(())
}
