//! Scenario files, presets and the resolved sweep description.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rfcal::hyperopt::Criterion;
use rfcal::{Activation, EstimatorKind};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{usage, CliError};

const PRESETS: [(&str, &str); 5] = [
    ("fig1", include_str!("../presets/fig1.toml")),
    ("fig2", include_str!("../presets/fig2.toml")),
    ("appE1", include_str!("../presets/appE1.toml")),
    ("appE2", include_str!("../presets/appE2.toml")),
    ("fig1-points", include_str!("../presets/fig1-points.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    POverN,
    Lambda,
    Temperature,
    Level,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::POverN => "p_over_n",
            Axis::Lambda => "lambda",
            Axis::Temperature => "temperature",
            Axis::Level => "level",
        }
    }
}

/// Either an explicit list or an evenly spaced range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Range {
        start: f64,
        stop: f64,
        num: usize,
        #[serde(default)]
        log: bool,
    },
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridSpec::List(v) => v.clone(),
            GridSpec::Range { start, stop, num, log } => {
                let n = *num;
                if n == 1 {
                    return vec![*start];
                }
                (0..n)
                    .map(|k| {
                        let t = k as f64 / (n - 1) as f64;
                        if *log {
                            (start.ln() + t * (stop.ln() - start.ln())).exp()
                        } else {
                            // round to kill the drift of start + k h
                            let x = start + t * (stop - start);
                            (x * 1e12).round() / 1e12
                        }
                    })
                    .collect()
            }
        }
    }
}

/// How an estimator's regularization is chosen at each grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Fixed(f64),
    Optimal(Criterion),
    /// bo has no regularization.
    None,
}

impl LambdaRule {
    pub fn label(&self) -> String {
        match self {
            LambdaRule::Fixed(x) => format!("{x:e}"),
            LambdaRule::Optimal(c) => c.name().to_string(),
            LambdaRule::None => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLambda {
    Number(f64),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    kind: String,
    #[serde(default)]
    lambda: Option<RawLambda>,
    #[serde(default)]
    temperature_scaling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorEntry {
    pub kind: EstimatorKind,
    pub lambda: LambdaRule,
    pub temperature_scaling: bool,
}

impl EstimatorEntry {
    pub fn scaling_label(&self) -> &'static str {
        if self.temperature_scaling {
            "temperature"
        } else {
            "none"
        }
    }

    fn from_raw(raw: &RawEstimator) -> Result<Self, CliError> {
        let kind = EstimatorKind::from_str(&raw.kind).map_err(|e| CliError::Usage(e.to_string()))?;
        let lambda = match (&raw.lambda, kind) {
            (_, EstimatorKind::Bo) => LambdaRule::None,
            (None, _) => return usage(format!("estimator {} needs a lambda", kind.name())),
            (Some(RawLambda::Number(x)), _) => {
                if !(*x > 0.0) || !x.is_finite() {
                    return usage(format!("lambda must be > 0, got {x}"));
                }
                LambdaRule::Fixed(*x)
            }
            (Some(RawLambda::Name(s)), _) => {
                let c = Criterion::from_str(s).map_err(|e| CliError::Usage(e.to_string()))?;
                if c == Criterion::Evidence && kind != EstimatorKind::Eb {
                    return usage("the evidence rule applies to eb only");
                }
                LambdaRule::Optimal(c)
            }
        };
        Ok(EstimatorEntry { kind, lambda, temperature_scaling: raw.temperature_scaling })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_over_d: f64,
    pub tau0: f64,
    #[serde(default = "one")]
    pub teacher_norm_sq: f64,
    /// Used when the sweep axis is not p/n.
    #[serde(default = "one")]
    pub p_over_n: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Eigenvalues of F F^T / d, one per line; replaces Marchenko-Pastur.
    #[serde(default)]
    pub eigenvalues: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    axis: Axis,
    grid: GridSpec,
    #[serde(default = "default_levels")]
    levels: Vec<f64>,
}

fn default_levels() -> Vec<f64> {
    rfcal::metrics::DEFAULT_LEVELS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub d: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_val() -> usize {
    400
}
fn default_n_test() -> usize {
    10_000
}
fn default_trials() -> usize {
    30
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings { d: 200, n_val: default_n_val(), n_test: default_n_test(), trials: default_trials(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperoptSettings {
    #[serde(default = "default_criterion")]
    pub criterion: String,
}

fn default_criterion() -> String {
    "error".into()
}

impl Default for HyperoptSettings {
    fn default() -> Self {
        HyperoptSettings { criterion: default_criterion() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GampSettings {
    #[serde(default = "default_gamp_estimator")]
    pub estimator: String,
    #[serde(default = "default_gamp_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub whiten: bool,
    #[serde(default = "default_gamp_iter")]
    pub max_iter: usize,
    #[serde(default = "default_gamp_tol")]
    pub tol: f64,
    #[serde(default = "default_gamp_damping")]
    pub damping: f64,
}

fn default_gamp_estimator() -> String {
    "erm".into()
}
fn default_gamp_lambda() -> f64 {
    0.1
}
fn default_gamp_iter() -> usize {
    3000
}
fn default_gamp_tol() -> f64 {
    1e-7
}
fn default_gamp_damping() -> f64 {
    0.7
}

impl Default for GampSettings {
    fn default() -> Self {
        GampSettings {
            estimator: default_gamp_estimator(),
            lambda: default_gamp_lambda(),
            whiten: false,
            max_iter: default_gamp_iter(),
            tol: default_gamp_tol(),
            damping: default_gamp_damping(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    preset: Option<String>,
    scenario: Scenario,
    sweep: RawSweep,
    #[serde(default)]
    estimators: Vec<RawEstimator>,
    #[serde(default)]
    mc: McSettings,
    #[serde(default)]
    hyperopt: HyperoptSettings,
    #[serde(default)]
    gamp: GampSettings,
}

/// A fully resolved sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub name: String,
    pub scenario: Scenario,
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub levels: Vec<f64>,
    pub estimators: Vec<EstimatorEntry>,
    pub mc: McSettings,
    pub hyperopt: HyperoptSettings,
    pub gamp: GampSettings,
}

/// Command-line values that take precedence over the files.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

/// Tables merge key by key; everything else is replaced.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(text: &str, origin: &str) -> Result<Value, CliError> {
    text.parse::<Value>().map_err(|e| CliError::Usage(format!("{origin}: {e}")))
}

/// Preset, then config file, then overrides.
pub fn load_spec(preset: Option<&str>, config: Option<&Path>, ov: &Overrides) -> Result<SweepSpec, CliError> {
    let file = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Some(parse_toml(&text, &p.display().to_string())?)
        }
        None if preset.is_none() => return usage("give --preset or --config"),
        None => None,
    };
    layer(preset, file, ov)
}

/// Parses a config document; a `preset` key inside it names the base.
pub fn spec_from_str(text: &str, ov: &Overrides) -> Result<SweepSpec, CliError> {
    layer(None, Some(parse_toml(text, "config")?), ov)
}

fn layer(preset: Option<&str>, file: Option<Value>, ov: &Overrides) -> Result<SweepSpec, CliError> {
    let from_file = file.as_ref().and_then(|v| v.get("preset")).and_then(|v| v.as_str()).map(str::to_string);
    let preset = preset.map(str::to_string).or(from_file);
    let mut value = match &preset {
        Some(name) => {
            let src = preset_source(name)
                .ok_or_else(|| CliError::Usage(format!("unknown preset '{name}' (known: {})", preset_names().join(", "))))?;
            parse_toml(src, name)?
        }
        None => Value::Table(Default::default()),
    };
    if let Some(Value::Table(mut f)) = file {
        f.remove("preset");
        // a file that lists estimators replaces the preset's list
        if f.contains_key("estimators") {
            if let Value::Table(t) = &mut value {
                t.remove("estimators");
            }
        }
        merge(&mut value, Value::Table(f));
    }
    let raw: RawSpec = value.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    resolve(raw, preset, ov)
}

fn resolve(raw: RawSpec, preset: Option<String>, ov: &Overrides) -> Result<SweepSpec, CliError> {
    let grid = raw.sweep.grid.values();
    if grid.is_empty() {
        return usage("grid is empty");
    }
    if grid.iter().any(|x| !x.is_finite()) || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return usage("grid must be finite and strictly increasing");
    }
    let positive = |name: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { usage(format!("{name} must be > 0, got {x}")) };
    match raw.sweep.axis {
        Axis::POverN | Axis::Lambda | Axis::Temperature => {
            if grid[0] <= 0.0 {
                return usage(format!("{} grid must be positive", raw.sweep.axis.name()));
            }
        }
        Axis::Level => {
            if grid[0] <= 0.0 || grid[grid.len() - 1] >= 1.0 {
                return usage("level grid must lie in (0, 1)");
            }
        }
    }
    let s = &raw.scenario;
    positive("n_over_d", s.n_over_d)?;
    positive("teacher_norm_sq", s.teacher_norm_sq)?;
    positive("p_over_n", s.p_over_n)?;
    if !(s.tau0 >= 0.0) {
        return usage("tau0 must be >= 0");
    }
    if s.eigenvalues.is_some() && raw.sweep.axis == Axis::POverN {
        return usage("an eigenvalue file fixes p/d; sweep another axis");
    }
    s.activation.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let levels = if raw.sweep.axis == Axis::Level { grid.clone() } else { raw.sweep.levels.clone() };
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return usage("levels must lie in (0, 1)");
    }
    if raw.estimators.is_empty() {
        return usage("no estimators given");
    }
    let estimators = raw.estimators.iter().map(EstimatorEntry::from_raw).collect::<Result<Vec<_>, _>>()?;
    let mut mc = raw.mc.clone();
    if let Some(seed) = ov.seed {
        mc.seed = seed;
    }
    if let Some(t) = ov.trials {
        mc.trials = t;
    }
    if mc.trials == 0 || mc.d == 0 {
        return usage("trials and d must be positive");
    }
    Criterion::from_str(&raw.hyperopt.criterion).map_err(|e| CliError::Usage(e.to_string()))?;
    EstimatorKind::from_str(&raw.gamp.estimator).map_err(|e| CliError::Usage(e.to_string()))?;
    let name = raw.name.or(preset).unwrap_or_else(|| "custom".into());
    Ok(SweepSpec {
        name,
        scenario: raw.scenario,
        axis: raw.sweep.axis,
        grid,
        levels,
        estimators,
        mc,
        hyperopt: raw.hyperopt,
        gamp: raw.gamp,
    })
}

impl SweepSpec {
    /// p/n at grid point `i`.
    pub fn p_over_n(&self, i: usize) -> f64 {
        match self.axis {
            Axis::POverN => self.grid[i],
            _ => self.scenario.p_over_n,
        }
    }

    /// Number of theory/MC rows per estimator; level and temperature axes reuse one fit.
    pub fn fit_points(&self) -> usize {
        match self.axis {
            Axis::POverN | Axis::Lambda => self.grid.len(),
            Axis::Temperature | Axis::Level => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            let s = load_spec(Some(name), None, &Overrides::default()).unwrap();
            assert!(!s.estimators.is_empty(), "{name}");
            assert_eq!(s.name, name);
        }
        let f = load_spec(Some("fig1"), None, &Overrides::default()).unwrap();
        assert_eq!(f.grid.len(), 50);
        assert_eq!(f.grid[0], 0.1);
        assert_eq!(f.grid[49], 5.0);
        assert_eq!(f.scenario.n_over_d, 2.0);
        let e2 = load_spec(Some("appE2"), None, &Overrides::default()).unwrap();
        assert_eq!(e2.scenario.teacher_norm_sq, 50.0);
        assert_eq!(e2.scenario.n_over_d, 20.0);
    }

    #[test]
    fn overrides_and_merge() {
        let text = "preset = \"fig1\"\n[mc]\nd = 64\n[sweep]\naxis = \"p_over_n\"\ngrid = [0.5, 1.0]\n";
        let s = spec_from_str(text, &Overrides { seed: Some(9), trials: Some(3) }).unwrap();
        assert_eq!(s.grid, vec![0.5, 1.0]);
        assert_eq!((s.mc.d, s.mc.seed, s.mc.trials), (64, 9, 3));
        // untouched preset values survive
        assert_eq!(s.scenario.tau0, 0.5);
        assert_eq!(s.mc.n_test, 10_000);
    }

    #[test]
    fn usage_errors() {
        let bad = [
            "preset = \"fig1\"\nestimators = []\n",
            "preset = \"fig1\"\n[sweep]\naxis = \"p_over_n\"\ngrid = [1.0, 0.5]\n",
            "preset = \"fig1\"\n[sweep]\naxis = \"p_over_n\"\ngrid = []\n",
            "preset = \"fig1\"\n[[estimators]]\nkind = \"erm\"\nlambda = \"evidence\"\n",
            "preset = \"fig1\"\n[[estimators]]\nkind = \"erm\"\n",
            "preset = \"nope\"\n",
        ];
        for b in bad {
            assert!(matches!(spec_from_str(b, &Overrides::default()), Err(CliError::Usage(_))), "{b}");
        }
    }

    #[test]
    fn log_grid() {
        let g = GridSpec::Range { start: 1e-4, stop: 1.0, num: 5, log: true }.values();
        assert!((g[1] - 1e-3).abs() < 1e-15 && (g[4] - 1.0).abs() < 1e-12);
    }
}
