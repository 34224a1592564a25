//! Run configuration: TOML with every field defaulted.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use ghost_couette::kinetic_ref::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Operator,
    Transport,
    Hydro,
    Milne,
    Expand,
    Kinetic,
    Converge,
    Ghost,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Operator => "operator",
            Command::Transport => "transport",
            Command::Hydro => "hydro",
            Command::Milne => "milne",
            Command::Expand => "expand",
            Command::Kinetic => "kinetic",
            Command::Converge => "converge",
            Command::Ghost => "ghost",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Bgk,
    Hs,
}

/// Rejected configuration: names the field and the violated condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration field `{}`: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

fn reject(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), reason: reason.into() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub bgk_extent: f64,
    pub bgk_points: usize,
    pub hard_sphere: bool,
    pub hs_extent: f64,
    pub hs_points: usize,
    pub hs_samples_per_row: usize,
    pub memory_cap_mb: usize,
    pub symmetry_probes: usize,
    /// largest delta of the hydrodynamic solutions feeding the perturbation fields
    pub lj_delta: f64,
    /// channel positions sampled for perturbation fields
    pub lj_sites: usize,
    pub lj_extent: f64,
    pub lj_points: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            bgk_extent: 6.0,
            bgk_points: 11,
            hard_sphere: true,
            hs_extent: 5.0,
            hs_points: 9,
            hs_samples_per_row: 8 * 729,
            memory_cap_mb: 512,
            symmetry_probes: 8,
            lj_delta: 0.1,
            lj_sites: 5,
            lj_extent: 6.0,
            lj_points: 9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub extent: f64,
    pub points: usize,
    pub rate: f64,
    pub temperatures: Vec<f64>,
    /// nodes of the one-dimensional oracle quadrature
    pub oracle_nodes: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { extent: 10.0, points: 31, rate: 1.0, temperatures: vec![0.8, 0.9, 1.0, 1.1, 1.25], oracle_nodes: 4001 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HydroConfig {
    pub deltas: Vec<f64>,
    pub c_const: f64,
    pub u_minus: f64,
    pub u_plus: f64,
    pub ny: usize,
    /// velocity grid used for the Maxwellian distances
    pub v_extent: f64,
    pub v_points: usize,
}

impl Default for HydroConfig {
    fn default() -> Self {
        Self { deltas: vec![0.0125, 0.025, 0.05, 0.1], c_const: 1.0, u_minus: 0.0, u_plus: 2.0 * PI, ny: 257, v_extent: 6.0, v_points: 11 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilneConfig {
    pub eps: f64,
    pub gamma: f64,
    pub c_const: f64,
    pub order: usize,
    pub v_extent: f64,
    pub v_points: usize,
    pub ny: usize,
    pub slab_length: f64,
}

impl Default for MilneConfig {
    fn default() -> Self {
        Self { eps: 0.05, gamma: 0.1, c_const: 10.0, order: 2, v_extent: 6.0, v_points: 11, ny: 65, slab_length: 60.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpandConfig {
    pub eps_sweep: Vec<f64>,
    pub gamma: f64,
    pub c_const: f64,
    pub order: usize,
    pub v_extent: f64,
    pub v_points: usize,
    pub ny: usize,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self { eps_sweep: vec![0.1, 0.05, 0.025], gamma: 0.1, c_const: 10.0, order: 2, v_extent: 6.0, v_points: 11, ny: 65 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticConfig {
    pub eps: f64,
    pub gamma: f64,
    pub c_const: f64,
    pub u_minus: f64,
    pub u_plus: f64,
    pub layout: Layout,
    pub v_extent: f64,
    pub v_points: usize,
    pub tol: f64,
}

impl Default for KineticConfig {
    fn default() -> Self {
        Self { eps: 0.05, gamma: 0.1, c_const: 10.0, u_minus: 0.0, u_plus: 2.0 * PI, layout: Layout::Reduced2D, v_extent: 7.0, v_points: 29, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub eps_sweep: Vec<f64>,
    pub gamma: f64,
    pub c_const: f64,
    pub order: usize,
    pub v_extent: f64,
    pub v_points: usize,
    pub ny: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self { eps_sweep: vec![0.1, 0.07, 0.05, 0.035], gamma: 0.1, c_const: 10.0, order: 2, v_extent: 6.0, v_points: 15, ny: 65 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhostConfig {
    pub eps_sweep: Vec<f64>,
    pub gamma: f64,
    pub c_const: f64,
    pub v_extent: f64,
    pub v_points: usize,
}

impl Default for GhostConfig {
    fn default() -> Self {
        Self { eps_sweep: vec![1e-2, 3e-3, 1e-3], gamma: 0.5, c_const: 1.0, v_extent: 6.0, v_points: 21 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// worker threads; 0 picks the machine default
    pub workers: usize,
    pub model: Model,
    pub operator: OperatorConfig,
    pub transport: TransportConfig,
    pub hydro: HydroConfig,
    pub milne: MilneConfig,
    pub expand: ExpandConfig,
    pub kinetic: KineticConfig,
    pub converge: ConvergeConfig,
    pub ghost: GhostConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Converge,
            output_dir: PathBuf::from("ghost-output"),
            seed: 7,
            workers: 0,
            model: Model::Bgk,
            operator: OperatorConfig::default(),
            transport: TransportConfig::default(),
            hydro: HydroConfig::default(),
            milne: MilneConfig::default(),
            expand: ExpandConfig::default(),
            kinetic: KineticConfig::default(),
            converge: ConvergeConfig::default(),
            ghost: GhostConfig::default(),
        }
    }
}

/// Command-line values that replace configuration entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// a single value sets `eps`; several replace the sweep
    pub eps: Vec<f64>,
    pub gamma: Option<f64>,
    pub c_const: Option<f64>,
    pub order: Option<usize>,
    pub model: Option<Model>,
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(reject(field, format!("must be > 0, got {v}")))
    }
}

fn grid(field: &str, extent: f64, points: usize) -> Result<(), ConfigError> {
    positive(&format!("{field}_extent"), extent)?;
    if points < 5 || points % 2 == 0 {
        return Err(reject(format!("{field}_points"), format!("must be odd and >= 5, got {points}")));
    }
    Ok(())
}

fn eps_value(field: &str, eps: f64) -> Result<(), ConfigError> {
    if eps > 0.0 && eps <= 0.2 {
        Ok(())
    } else {
        Err(reject(field, format!("must lie in (0, 0.2], got {eps}")))
    }
}

fn gamma_value(field: &str, gamma: f64) -> Result<(), ConfigError> {
    if gamma > 0.0 && gamma <= 0.5 {
        Ok(())
    } else {
        Err(reject(field, format!("must lie in (0, 0.5], got {gamma}")))
    }
}

fn order_value(field: &str, order: usize) -> Result<(), ConfigError> {
    let max = ghost_couette::expansion::MAX_ORDER;
    if (1..=max).contains(&order) {
        Ok(())
    } else {
        Err(reject(field, format!("must lie in 1..={max}, got {order}")))
    }
}

fn sweep(field: &str, values: &[f64], min_len: usize, check: impl Fn(&str, f64) -> Result<(), ConfigError>) -> Result<(), ConfigError> {
    if values.len() < min_len {
        return Err(reject(field, format!("needs at least {min_len} values for a slope fit, got {}", values.len())));
    }
    for v in values {
        check(field, *v)?;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing configuration")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(m) = o.model {
            self.model = m;
        }
        let single = if o.eps.len() == 1 { Some(o.eps[0]) } else { None };
        let many = if o.eps.is_empty() { None } else { Some(o.eps.clone()) };
        match self.command {
            Command::Milne => {
                set(&mut self.milne.eps, single);
                set(&mut self.milne.gamma, o.gamma);
                set(&mut self.milne.c_const, o.c_const);
                set(&mut self.milne.order, o.order);
            }
            Command::Kinetic => {
                set(&mut self.kinetic.eps, single);
                set(&mut self.kinetic.gamma, o.gamma);
                set(&mut self.kinetic.c_const, o.c_const);
            }
            Command::Expand => {
                set(&mut self.expand.eps_sweep, many);
                set(&mut self.expand.gamma, o.gamma);
                set(&mut self.expand.c_const, o.c_const);
                set(&mut self.expand.order, o.order);
            }
            Command::Converge => {
                set(&mut self.converge.eps_sweep, many);
                set(&mut self.converge.gamma, o.gamma);
                set(&mut self.converge.c_const, o.c_const);
                set(&mut self.converge.order, o.order);
            }
            Command::Ghost => {
                set(&mut self.ghost.eps_sweep, many);
                set(&mut self.ghost.gamma, o.gamma);
                set(&mut self.ghost.c_const, o.c_const);
            }
            Command::Hydro => set(&mut self.hydro.c_const, o.c_const),
            Command::Operator | Command::Transport => {}
        }
    }

    /// Checks the section used by `command` before any computation starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bgk_only = |what: &str| -> Result<(), ConfigError> {
            if self.model == Model::Hs {
                Err(reject("model", format!("the {what} study supports the bgk model only")))
            } else {
                Ok(())
            }
        };
        match self.command {
            Command::Operator => {
                let c = &self.operator;
                grid("operator.bgk", c.bgk_extent, c.bgk_points)?;
                grid("operator.hs", c.hs_extent, c.hs_points)?;
                grid("operator.lj", c.lj_extent, c.lj_points)?;
                if c.symmetry_probes < 2 {
                    return Err(reject("operator.symmetry_probes", "must be >= 2"));
                }
                if c.hs_samples_per_row == 0 {
                    return Err(reject("operator.hs_samples_per_row", "must be > 0"));
                }
                if c.memory_cap_mb == 0 {
                    return Err(reject("operator.memory_cap_mb", "must be > 0"));
                }
                if !(c.lj_delta > 0.0 && c.lj_delta <= 0.1) {
                    return Err(reject("operator.lj_delta", format!("must lie in (0, 0.1], got {}", c.lj_delta)));
                }
                if c.lj_sites == 0 {
                    return Err(reject("operator.lj_sites", "must be > 0"));
                }
                self.validate_walls("hydro", self.hydro.c_const, self.hydro.u_minus, self.hydro.u_plus)?;
            }
            Command::Transport => {
                let c = &self.transport;
                grid("transport", c.extent, c.points)?;
                positive("transport.rate", c.rate)?;
                sweep("transport.temperatures", &c.temperatures, 3, |f, t| {
                    if (0.5..=2.0).contains(&t) {
                        Ok(())
                    } else {
                        Err(reject(f, format!("temperatures must lie in [0.5, 2], got {t}")))
                    }
                })?;
                if c.oracle_nodes < 101 {
                    return Err(reject("transport.oracle_nodes", "must be >= 101"));
                }
            }
            Command::Hydro => {
                bgk_only("hydro")?;
                let c = &self.hydro;
                sweep("hydro.deltas", &c.deltas, 3, |f, d| {
                    if (0.0..=0.5).contains(&d) {
                        Ok(())
                    } else {
                        Err(reject(f, format!("delta must lie in [0, 0.5], got {d}")))
                    }
                })?;
                self.validate_walls("hydro", c.c_const, c.u_minus, c.u_plus)?;
                if c.ny < 9 {
                    return Err(reject("hydro.ny", "must be >= 9"));
                }
                grid("hydro.v", c.v_extent, c.v_points)?;
            }
            Command::Milne => {
                bgk_only("milne")?;
                let c = &self.milne;
                eps_value("milne.eps", c.eps)?;
                gamma_value("milne.gamma", c.gamma)?;
                positive("milne.c_const", c.c_const).map_err(|e| reject(e.field, "C must be > 0"))?;
                order_value("milne.order", c.order)?;
                grid("milne.v", c.v_extent, c.v_points)?;
                positive("milne.slab_length", c.slab_length)?;
            }
            Command::Expand => {
                bgk_only("expansion")?;
                let c = &self.expand;
                sweep("expand.eps_sweep", &c.eps_sweep, 3, eps_value)?;
                gamma_value("expand.gamma", c.gamma)?;
                positive("expand.c_const", c.c_const).map_err(|e| reject(e.field, "C must be > 0"))?;
                order_value("expand.order", c.order)?;
                grid("expand.v", c.v_extent, c.v_points)?;
            }
            Command::Kinetic => {
                bgk_only("kinetic")?;
                let c = &self.kinetic;
                eps_value("kinetic.eps", c.eps)?;
                gamma_value("kinetic.gamma", c.gamma)?;
                self.validate_walls("kinetic", c.c_const, c.u_minus, c.u_plus)?;
                grid("kinetic.v", c.v_extent, c.v_points)?;
                positive("kinetic.tol", c.tol)?;
            }
            Command::Converge => {
                bgk_only("convergence")?;
                let c = &self.converge;
                sweep("converge.eps_sweep", &c.eps_sweep, 3, eps_value)?;
                gamma_value("converge.gamma", c.gamma)?;
                positive("converge.c_const", c.c_const).map_err(|e| reject(e.field, "C must be > 0"))?;
                order_value("converge.order", c.order)?;
                grid("converge.v", c.v_extent, c.v_points)?;
            }
            Command::Ghost => {
                bgk_only("ghost-effect")?;
                let c = &self.ghost;
                sweep("ghost.eps_sweep", &c.eps_sweep, 2, eps_value)?;
                gamma_value("ghost.gamma", c.gamma)?;
                positive("ghost.c_const", c.c_const).map_err(|e| reject(e.field, "C must be > 0"))?;
                grid("ghost.v", c.v_extent, c.v_points)?;
            }
        }
        Ok(())
    }

    fn validate_walls(&self, section: &str, c_const: f64, um: f64, up: f64) -> Result<(), ConfigError> {
        positive(&format!("{section}.c_const"), c_const).map_err(|e| reject(e.field, format!("C must be > 0, got {c_const}")))?;
        if !(um.is_finite() && up.is_finite()) {
            return Err(reject(format!("{section}.u_plus"), "wall velocities must be finite"));
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.command, Command::Converge);
        assert_eq!(cfg.converge.eps_sweep, vec![0.1, 0.07, 0.05, 0.035]);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig { command: Command::Ghost, ..Default::default() };
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.command, Command::Ghost);
        assert_eq!(back.ghost.eps_sweep, cfg.ghost.eps_sweep);
    }

    #[test]
    fn zero_c_names_the_field() {
        let cfg = RunConfig::from_toml_str("command = \"converge\"\n[converge]\nc_const = 0.0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.field, "converge.c_const");
        assert!(err.to_string().contains("C must be > 0"));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_toml_str("[hydro]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides_target_the_command() {
        let mut cfg = RunConfig { command: Command::Kinetic, ..Default::default() };
        cfg.apply(&Overrides { eps: vec![0.02], gamma: Some(0.2), ..Default::default() });
        assert_eq!(cfg.kinetic.eps, 0.02);
        assert_eq!(cfg.kinetic.gamma, 0.2);
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { eps: vec![0.1, 0.05, 0.025], ..Default::default() });
        assert_eq!(cfg.converge.eps_sweep.len(), 3);
    }

    #[test]
    fn hard_sphere_only_for_operator_studies() {
        let cfg = RunConfig { command: Command::Converge, model: Model::Hs, ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "model");
        let cfg = RunConfig { command: Command::Operator, model: Model::Hs, ..Default::default() };
        cfg.validate().unwrap();
    }
}
