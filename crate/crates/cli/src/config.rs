//! Experiment configuration: flat dotted JSON keys, defaults per experiment and model,
//! command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};
use urbm_core::lattice::Boundary;
use urbm_core::tvmc::{PhaseGauge, Regularization, Sampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Ite,
    Quench,
    Open,
    GradientScan,
    NoiseScan,
    Autocorr,
    CircuitCheck,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Ite => "ite",
            Experiment::Quench => "quench",
            Experiment::Open => "open",
            Experiment::GradientScan => "gradient_scan",
            Experiment::NoiseScan => "noise_scan",
            Experiment::Autocorr => "autocorr",
            Experiment::CircuitCheck => "circuit_check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Tfi,
    Heisenberg,
    Tafi2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Variational,
    Exact,
}

/// A configuration problem; always reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Every key accepted by some experiment.
const KNOWN_KEYS: &[&str] = &[
    "experiment",
    "model",
    "boundary",
    "N",
    "M",
    "alpha",
    "Lx",
    "Ly",
    "h",
    "h_i",
    "h_f",
    "Jz_i",
    "Jz_f",
    "hz",
    "gamma",
    "dt",
    "dtau",
    "ite_steps",
    "t_max",
    "record_every",
    "init_std",
    "seed",
    "gauge",
    "sampling.mode",
    "sampling.n_exp",
    "sampling.burn_in",
    "regularization.ridge",
    "regularization.diag_shift",
    "regularization.svd_cutoff",
    "ite.diag_shift",
    "n_traj",
    "engine",
    "N_list",
    "n_init",
    "deltas",
    "L_list",
    "temperature",
    "n_sweeps",
    "n_seeds",
    "max_lag",
    "n_draws",
    "max_N",
    "max_M",
];

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Every key after defaults and overrides; echoed into the run metadata.
    pub values: BTreeMap<String, Value>,
    pub model: Model,
    pub boundary: Boundary,
    pub n: usize,
    pub m: usize,
    pub lx: usize,
    pub ly: usize,
    pub dt: f64,
    pub dtau: f64,
    pub ite_steps: usize,
    pub t_max: f64,
    pub record_every: usize,
    pub init_std: f64,
    pub seed: u64,
    pub gauge: PhaseGauge,
    pub sampling: Sampling,
    pub regularization: Regularization,
    pub ite_regularization: Regularization,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let Some((k, v)) = s.split_once('=') else {
        return err(format!("--set expects key=value, got '{s}'"));
    };
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn defaults(experiment: Experiment, model: Model) -> Vec<(&'static str, Value)> {
    use serde_json::json;
    let mut d: Vec<(&str, Value)> = vec![("seed", json!(0))];
    let dynamics = |d: &mut Vec<(&'static str, Value)>| {
        d.push(("init_std", json!(0.1)));
        d.push(("dtau", json!(0.01)));
        d.push(("ite_steps", json!(2500)));
        d.push(("record_every", json!(20)));
        d.push(("gauge", json!("free")));
        d.push(("sampling.mode", json!("exact")));
        d.push(("sampling.n_exp", json!(1000)));
        d.push(("sampling.burn_in", json!(100)));
        d.push(("regularization.ridge", json!(1e-6)));
        d.push(("regularization.diag_shift", json!(0.0)));
        d.push(("regularization.svd_cutoff", json!(1e-8)));
        d.push(("ite.diag_shift", json!(1e-3)));
    };
    let model_params = |d: &mut Vec<(&'static str, Value)>| match model {
        Model::Tfi => {
            d.push(("boundary", json!("periodic")));
            d.push(("h_i", json!(0.5)));
            d.push(("h_f", json!(1.0)));
        }
        Model::Heisenberg => {
            d.push(("boundary", json!("periodic")));
            d.push(("Jz_i", json!(1.0)));
            d.push(("Jz_f", json!(0.5)));
            d.push(("hz", json!(1.0)));
        }
        Model::Tafi2d => {
            d.push(("Lx", json!(4)));
            d.push(("Ly", json!(3)));
            d.push(("h_i", json!(0.5)));
            d.push(("h_f", json!(1.0)));
        }
    };
    match experiment {
        Experiment::Quench | Experiment::NoiseScan | Experiment::Ite => {
            dynamics(&mut d);
            model_params(&mut d);
            if model != Model::Tafi2d {
                d.push(("N", json!(if experiment == Experiment::Quench { 8 } else { 6 })));
            }
            if experiment != Experiment::Ite {
                let (dt, t_max) = match model {
                    Model::Tfi => (0.0005, 2.0),
                    Model::Heisenberg => (0.0002, 1.0),
                    Model::Tafi2d => (0.0005, 1.5),
                };
                d.push(("dt", json!(dt)));
                d.push(("t_max", json!(t_max)));
            }
            if experiment == Experiment::NoiseScan {
                d.push(("deltas", json!([1e-4, 1e-3, 1e-2])));
            }
        }
        Experiment::Open => {
            dynamics(&mut d);
            d.push(("N", json!(6)));
            d.push(("boundary", json!("open")));
            d.push(("h", json!(1.0)));
            d.push(("gamma", json!(0.05)));
            d.push(("dt", json!(0.0005)));
            d.push(("t_max", json!(2.0)));
            d.push(("n_traj", json!(2000)));
            d.push(("engine", json!("variational")));
        }
        Experiment::GradientScan => {
            d.push(("boundary", json!("periodic")));
            d.push(("h", json!(1.0)));
            d.push(("N_list", json!([6, 8, 10, 12])));
            d.push(("n_init", json!(100)));
            d.push(("init_std", json!(0.1)));
            d.push(("regularization.ridge", json!(1e-6)));
            d.push(("regularization.diag_shift", json!(0.0)));
            d.push(("regularization.svd_cutoff", json!(1e-8)));
        }
        Experiment::Autocorr => {
            d.push(("L_list", json!([6, 12])));
            d.push(("temperature", json!(0.3)));
            d.push(("n_sweeps", json!(100_000)));
            d.push(("n_seeds", json!(5)));
            d.push(("max_lag", json!(1000)));
        }
        Experiment::CircuitCheck => {
            d.push(("n_draws", json!(50)));
            d.push(("max_N", json!(5)));
            d.push(("max_M", json!(4)));
            d.push(("init_std", json!(0.5)));
        }
    }
    d
}

/// Default hidden-unit density when neither `M` nor `alpha` is given.
fn default_alpha(experiment: Experiment) -> Option<u64> {
    match experiment {
        Experiment::Quench | Experiment::NoiseScan | Experiment::Ite => Some(4),
        Experiment::Open => Some(6),
        Experiment::GradientScan => None,
        _ => None,
    }
}

impl ExperimentConfig {
    /// Merges the optional config file, `--set` overrides and `--seed` (in that order of precedence).
    pub fn load(
        experiment: Experiment,
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("config: cannot read {}: {e}", path.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("config: {}: {e}", path.display())))?;
            if !v.is_object() {
                return err("config: top level must be a JSON object");
            }
            flatten("", &v, &mut values);
        }
        for s in overrides {
            let (k, v) = parse_override(s)?;
            values.insert(k, v);
        }
        if let Some(s) = seed {
            values.insert("seed".into(), Value::from(s));
        }
        Self::from_values(experiment, values)
    }

    pub fn from_values(experiment: Experiment, mut values: BTreeMap<String, Value>) -> Result<Self, ConfigError> {
        for k in values.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return err(format!("{k}: unknown key"));
            }
        }
        match values.get("experiment") {
            Some(Value::String(s)) if s == experiment.as_str() => {}
            Some(v) => return err(format!("experiment: config says {v}, command line says {}", experiment.as_str())),
            None => {
                values.insert("experiment".into(), Value::from(experiment.as_str()));
            }
        }
        let model = match values.get("model") {
            None => Model::Tfi,
            Some(v) => match v.as_str() {
                Some("tfi") => Model::Tfi,
                Some("heisenberg") => Model::Heisenberg,
                Some("tafi2d") => Model::Tafi2d,
                _ => return err(format!("model: expected tfi, heisenberg or tafi2d, got {v}")),
            },
        };
        match experiment {
            Experiment::Quench | Experiment::NoiseScan | Experiment::Ite => {
                values.entry("model".into()).or_insert_with(|| Value::from("tfi"));
            }
            Experiment::Open | Experiment::GradientScan => {
                if model != Model::Tfi {
                    return err(format!("model: {} only supports tfi", experiment.as_str()));
                }
                values.entry("model".into()).or_insert_with(|| Value::from("tfi"));
            }
            Experiment::Autocorr | Experiment::CircuitCheck => {
                if values.contains_key("model") {
                    return err(format!("model: not used by {}", experiment.as_str()));
                }
            }
        }
        if values.contains_key("M") && values.contains_key("alpha") {
            return err("M/alpha: set exactly one of M and alpha");
        }
        for (k, v) in defaults(experiment, model) {
            values.entry(k.to_string()).or_insert(v);
        }
        if experiment == Experiment::GradientScan {
            if values.contains_key("alpha") {
                return err("alpha: gradient_scan keeps M fixed across sizes; set M");
            }
            values.entry("M".into()).or_insert(Value::from(6));
        }

        let mut cfg = Self {
            experiment,
            values,
            model,
            boundary: Boundary::Periodic,
            n: 0,
            m: 0,
            lx: 0,
            ly: 0,
            dt: 0.0,
            dtau: 0.0,
            ite_steps: 0,
            t_max: 0.0,
            record_every: 1,
            init_std: 0.0,
            seed: 0,
            gauge: PhaseGauge::Free,
            sampling: Sampling::Exact,
            regularization: Regularization::default(),
            ite_regularization: Regularization::imaginary_time(),
        };
        cfg.seed = cfg.uint("seed")?.unwrap_or(0);
        if let Some(b) = cfg.str("boundary")? {
            cfg.boundary = match b.as_str() {
                "periodic" => Boundary::Periodic,
                "open" => Boundary::Open,
                _ => return err(format!("boundary: expected periodic or open, got {b}")),
            };
        }
        if model == Model::Tafi2d && cfg.values.contains_key("Lx") {
            cfg.lx = cfg.req_uint("Lx")? as usize;
            cfg.ly = cfg.req_uint("Ly")? as usize;
            if cfg.values.contains_key("N") {
                return err("N: the tafi2d size is set through Lx and Ly");
            }
            cfg.n = cfg.lx * cfg.ly;
            cfg.values.insert("N".into(), Value::from(cfg.n));
        } else if let Some(n) = cfg.uint("N")? {
            if n == 0 {
                return err("N: must be positive");
            }
            cfg.n = n as usize;
        }
        cfg.m = cfg.resolve_hidden()?;
        for key in ["dt", "dtau"] {
            if let Some(v) = cfg.float(key)? {
                if !(v > 0.0) || !v.is_finite() {
                    return err(format!("{key}: must be positive, got {v}"));
                }
            }
        }
        cfg.dt = cfg.float("dt")?.unwrap_or(0.0);
        cfg.dtau = cfg.float("dtau")?.unwrap_or(0.0);
        cfg.ite_steps = cfg.uint("ite_steps")?.unwrap_or(0) as usize;
        cfg.t_max = cfg.nonneg("t_max")?.unwrap_or(0.0);
        cfg.record_every = cfg.uint("record_every")?.unwrap_or(1) as usize;
        if cfg.record_every == 0 {
            return err("record_every: must be at least 1");
        }
        cfg.init_std = cfg.nonneg("init_std")?.unwrap_or(0.0);
        for key in ["gamma", "temperature"] {
            cfg.nonneg(key)?;
        }
        if let Some(g) = cfg.str("gauge")? {
            cfg.gauge = match g.as_str() {
                "free" => PhaseGauge::Free,
                "pinned" => PhaseGauge::Pinned,
                _ => return err(format!("gauge: expected free or pinned, got {g}")),
            };
        }
        if let Some(mode) = cfg.str("sampling.mode")? {
            cfg.sampling = match mode.as_str() {
                "exact" => Sampling::Exact,
                "mc" => {
                    let n_exp = cfg.req_uint("sampling.n_exp")? as usize;
                    if n_exp == 0 {
                        return err("sampling.n_exp: must be positive");
                    }
                    Sampling::MonteCarlo { n_exp, burn_in: cfg.req_uint("sampling.burn_in")? as usize, seed: cfg.seed }
                }
                _ => return err(format!("sampling.mode: expected exact or mc, got {mode}")),
            };
        }
        if cfg.values.contains_key("regularization.ridge") {
            cfg.regularization = Regularization {
                ridge: cfg.req_nonneg("regularization.ridge")?,
                diag_shift: cfg.req_nonneg("regularization.diag_shift")?,
                svd_cutoff: cfg.req_nonneg("regularization.svd_cutoff")?,
            };
        }
        if let Some(shift) = cfg.nonneg("ite.diag_shift")? {
            cfg.ite_regularization = Regularization { diag_shift: shift, ..cfg.regularization };
        }
        Ok(cfg)
    }

    fn resolve_hidden(&mut self) -> Result<usize, ConfigError> {
        if let Some(m) = self.uint("M")? {
            return Ok(m as usize);
        }
        let alpha = match self.values.get("alpha") {
            Some(v) => v.as_f64().ok_or_else(|| ConfigError(format!("alpha: expected a number, got {v}")))?,
            None => match default_alpha(self.experiment) {
                Some(a) => {
                    self.values.insert("alpha".into(), Value::from(a));
                    a as f64
                }
                None => return Ok(0),
            },
        };
        if !(alpha > 0.0) {
            return err(format!("alpha: must be positive, got {alpha}"));
        }
        let m = alpha * self.n as f64;
        if (m - m.round()).abs() > 1e-9 {
            return err(format!("alpha: alpha * N = {m} is not an integer"));
        }
        Ok(m.round() as usize)
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| ConfigError(format!("{key}: expected a number, got {v}"))),
        }
    }

    pub fn req_float(&self, key: &str) -> Result<f64, ConfigError> {
        self.float(key)?.ok_or_else(|| ConfigError(format!("{key}: missing")))
    }

    fn nonneg(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.float(key)? {
            Some(v) if !(v >= 0.0) || !v.is_finite() => err(format!("{key}: must be non-negative, got {v}")),
            other => Ok(other),
        }
    }

    fn req_nonneg(&self, key: &str) -> Result<f64, ConfigError> {
        self.nonneg(key)?.ok_or_else(|| ConfigError(format!("{key}: missing")))
    }

    pub fn uint(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| ConfigError(format!("{key}: expected a non-negative integer, got {v}"))),
        }
    }

    pub fn req_uint(&self, key: &str) -> Result<u64, ConfigError> {
        self.uint(key)?.ok_or_else(|| ConfigError(format!("{key}: missing")))
    }

    pub fn str(&self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => err(format!("{key}: expected a string, got {v}")),
        }
    }

    pub fn uint_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let v = self.values.get(key).ok_or_else(|| ConfigError(format!("{key}: missing")))?;
        let list = v.as_array().ok_or_else(|| ConfigError(format!("{key}: expected a list, got {v}")))?;
        if list.is_empty() {
            return err(format!("{key}: must not be empty"));
        }
        list.iter()
            .map(|x| x.as_u64().map(|u| u as usize).ok_or_else(|| ConfigError(format!("{key}: bad entry {x}"))))
            .collect()
    }

    pub fn float_list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let v = self.values.get(key).ok_or_else(|| ConfigError(format!("{key}: missing")))?;
        let list = v.as_array().ok_or_else(|| ConfigError(format!("{key}: expected a list, got {v}")))?;
        if list.is_empty() {
            return err(format!("{key}: must not be empty"));
        }
        list.iter().map(|x| x.as_f64().ok_or_else(|| ConfigError(format!("{key}: bad entry {x}")))).collect()
    }

    pub fn engine(&self) -> Result<Engine, ConfigError> {
        match self.str("engine")?.as_deref() {
            Some("variational") | None => Ok(Engine::Variational),
            Some("exact") => Ok(Engine::Exact),
            Some(other) => err(format!("engine: expected variational or exact, got {other}")),
        }
    }

    /// The echo written into `metadata.json`.
    pub fn echo(&self) -> Value {
        Value::Object(self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<Map<_, _>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn values(v: Value) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &v, &mut out);
        out
    }

    #[test]
    fn minimal_quench_fills_defaults() {
        let v = values(json!({"experiment": "quench", "model": "tfi", "N": 8, "alpha": 4, "h_i": 0.5, "h_f": 1.0}));
        let cfg = ExperimentConfig::from_values(Experiment::Quench, v).unwrap();
        assert_eq!(cfg.m, 32);
        assert_eq!(cfg.dt, 0.0005);
        assert_eq!(cfg.dtau, 0.01);
        assert_eq!(cfg.ite_steps, 2500);
        assert_eq!(cfg.values.get("t_max"), Some(&json!(2.0)));
    }

    #[test]
    fn heisenberg_default_step() {
        let cfg = ExperimentConfig::from_values(Experiment::Quench, values(json!({"model": "heisenberg"}))).unwrap();
        assert_eq!(cfg.dt, 0.0002);
    }

    #[test]
    fn alpha_eight_at_fourteen_spins() {
        let cfg = ExperimentConfig::from_values(Experiment::Quench, values(json!({"N": 14, "alpha": 8}))).unwrap();
        assert_eq!(cfg.m, 112);
    }

    #[test]
    fn rejects_bad_configs() {
        for (v, field) in [
            (json!({"N": 8, "alpha": 4, "M": 32}), "M/alpha"),
            (json!({"N": 5, "alpha": 0.5}), "alpha"),
            (json!({"dt": 0.0}), "dt"),
            (json!({"dt": -1.0}), "dt"),
            (json!({"colour": "red"}), "colour"),
            (json!({"experiment": "open"}), "experiment"),
        ] {
            let e = ExperimentConfig::from_values(Experiment::Quench, values(v)).unwrap_err();
            assert!(e.0.starts_with(field), "{e}");
        }
    }

    #[test]
    fn nested_objects_flatten_to_dotted_keys() {
        let cfg =
            ExperimentConfig::from_values(Experiment::Quench, values(json!({"sampling": {"mode": "mc", "n_exp": 50}})))
                .unwrap();
        assert_eq!(cfg.sampling, Sampling::MonteCarlo { n_exp: 50, burn_in: 100, seed: 0 });
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("N=6").unwrap(), ("N".into(), json!(6)));
        assert_eq!(parse_override("model=heisenberg").unwrap(), ("model".into(), json!("heisenberg")));
        assert_eq!(parse_override("deltas=[0.1,0.2]").unwrap(), ("deltas".into(), json!([0.1, 0.2])));
        assert!(parse_override("N").is_err());
    }

    #[test]
    fn tafi_size_from_lattice() {
        let cfg = ExperimentConfig::from_values(Experiment::Quench, values(json!({"model": "tafi2d"}))).unwrap();
        assert_eq!((cfg.n, cfg.m), (12, 48));
    }
}
