//! TOML run configuration. Every section is optional except `[grid]` and
//! `[model]`; unknown keys are rejected so a typo can never silently change
//! a bound check.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use bidomain_core::experiments::StationarySettings;
use bidomain_core::mesh::Grid;
use bidomain_core::sim::Electrode;
use bidomain_core::{
    make_grid, Conductivity, ConductivitySpec, DecayRule, Field, IonicModel, McConfig, Scheme, SimConfig, Source,
    State,
};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub dimension: usize,
    /// Side lengths; one per axis.
    #[serde(default)]
    pub extent: Vec<f64>,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

/// A conductivity is either a scalar or a uniform 2-D tensor `[s11, s12, s22]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaValue {
    Scalar(f64),
    Tensor([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivityConfig {
    #[serde(default = "default_sigma")]
    pub sigma_i: SigmaValue,
    #[serde(default = "default_sigma")]
    pub sigma_e: SigmaValue,
    /// `[lower, upper]`; derived from the sigmas when absent.
    #[serde(default)]
    pub ellipticity_bounds: Option<[f64; 2]>,
}

impl Default for ConductivityConfig {
    fn default() -> Self {
        ConductivityConfig { sigma_i: default_sigma(), sigma_e: default_sigma(), ellipticity_bounds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default)]
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Number of driven modes; defaults to every non-constant mode, capped at 256.
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "one_f")]
    pub scale: f64,
    #[serde(default = "two_f")]
    pub exponent: f64,
    /// Explicit `γ_1..γ_K`; overrides the power law.
    #[serde(default)]
    pub gammas: Option<Vec<f64>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { modes: None, scale: 1.0, exponent: 2.0, gammas: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub amplitude: f64,
    #[serde(default)]
    pub t_on: f64,
    #[serde(default = "default_t_off")]
    pub t_off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "one_f")]
    pub t_final: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial `u = u0_mean + u0_amplitude·cos(u0_mode·π·x/L)` along the first axis.
    #[serde(default)]
    pub u0_mean: f64,
    #[serde(default)]
    pub u0_amplitude: f64,
    #[serde(default = "one")]
    pub u0_mode: usize,
    #[serde(default)]
    pub w0: f64,
    /// Uniform applied current.
    #[serde(default)]
    pub current: f64,
    #[serde(default)]
    pub electrodes: Vec<ElectrodeConfig>,
}

impl Default for SimSection {
    fn default() -> Self {
        toml::from_str("").expect("all sim keys have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_ladder")]
    pub epsilons: Vec<f64>,
    /// Tail radius; chosen so that the analytic bound is 0.3 when absent.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_eps1")]
    pub eps1: f64,
    #[serde(default = "default_eps2")]
    pub eps2: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub stationarity_hypotheses: bool,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all experiment keys have defaults")
    }
}

/// Fully resolved configuration. Serialising it and parsing the result gives
/// the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    #[serde(default)]
    pub conductivity: ConductivityConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}
fn default_nodes() -> usize {
    65
}
fn default_sigma() -> SigmaValue {
    SigmaValue::Scalar(1.0)
}
fn default_dt() -> f64 {
    0.01
}
fn default_scheme() -> String {
    "imex_spectral".into()
}
fn default_t_off() -> f64 {
    f64::MAX
}
fn default_replicas() -> usize {
    200
}
fn default_confidence() -> f64 {
    4.0
}
fn default_ladder() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_eps1() -> f64 {
    0.2
}
fn default_eps2() -> f64 {
    0.1
}
fn default_burn_in() -> f64 {
    5.0
}
fn default_horizon() -> f64 {
    20.0
}
fn default_horizons() -> Vec<f64> {
    vec![10.0, 20.0, 40.0]
}

impl Config {
    /// Parses and resolves every default. Errors carry the TOML line number.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    fn resolve(&mut self) -> Result<(), ConfigError> {
        let g = &mut self.grid;
        if g.dimension != 1 && g.dimension != 2 {
            return fail(format!("grid.dimension must be 1 or 2, got {}", g.dimension));
        }
        if g.extent.is_empty() {
            g.extent = vec![PI; g.dimension];
        }
        if g.extent.len() != g.dimension {
            return fail(format!("grid.extent needs {} entries, got {}", g.dimension, g.extent.len()));
        }
        if g.nodes < 2 {
            return fail(format!("grid.nodes must be >= 2, got {}", g.nodes));
        }

        let c = &mut self.conductivity;
        if c.ellipticity_bounds.is_none() {
            let eig = |s: &SigmaValue| match *s {
                SigmaValue::Scalar(v) => (v, v),
                SigmaValue::Tensor([a, b, d]) => {
                    let m = 0.5 * (a + d);
                    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
                    (m - r, m + r)
                }
            };
            let (li, hi) = eig(&c.sigma_i);
            let (le, he) = eig(&c.sigma_e);
            c.ellipticity_bounds = Some([li.min(le), hi.max(he)]);
        }

        let m = &mut self.model;
        let defaults: &[(&str, f64)] = match m.name.as_str() {
            "fitzhugh_nagumo" => &[("eta", 1.0), ("a", 0.1), ("b", 1.0), ("c", 1.0)],
            "aliev_panfilov" => &[("eta", 1.0), ("k", 8.0), ("a", 0.15)],
            "rogers_mcculloch" => &[("eta", 1.0), ("a", 0.13), ("b", 1.0), ("c", 0.26), ("d", 0.1)],
            "allen_cahn" => &[("eta", 1.0)],
            other => {
                return fail(format!(
                    "model.name `{other}` is not one of fitzhugh_nagumo, aliev_panfilov, rogers_mcculloch, allen_cahn"
                ))
            }
        };
        let name = m.name.clone();
        for key in ["eta", "a", "b", "c", "d", "k"] {
            let slot = match key {
                "eta" => &mut m.eta,
                "a" => &mut m.a,
                "b" => &mut m.b,
                "c" => &mut m.c,
                "d" => &mut m.d,
                _ => &mut m.k,
            };
            match defaults.iter().find(|(k, _)| *k == key) {
                Some((_, v)) => {
                    slot.get_or_insert(*v);
                }
                None if slot.is_some() => return fail(format!("model.{key} does not apply to {name}")),
                None => {}
            }
        }

        let max_modes = self.node_count() - 1;
        let n = &mut self.noise;
        match &n.gammas {
            Some(g) => {
                if n.modes.is_some_and(|k| k != g.len()) {
                    return fail("noise.modes disagrees with the length of noise.gammas");
                }
                n.modes = Some(g.len());
            }
            None => {
                n.modes.get_or_insert(max_modes.min(256));
            }
        }

        let s = &self.sim;
        if !(s.dt > 0.0) {
            return fail(format!("sim.dt must be > 0 (SimConfig requires a positive step), got {}", s.dt));
        }
        if !(s.t_final >= s.dt) {
            return fail(format!("sim.t_final must be >= sim.dt, got {} < {}", s.t_final, s.dt));
        }
        if !(s.epsilon >= 0.0) {
            return fail(format!("sim.epsilon must be >= 0, got {}", s.epsilon));
        }
        if s.record_every == 0 {
            return fail("sim.record_every must be >= 1");
        }
        self.scheme()?;
        for e in &s.electrodes {
            if e.lower.len() != self.grid.dimension || e.upper.len() != self.grid.dimension {
                return fail("sim.electrodes bounds need one entry per axis");
            }
        }
        if self.experiment.replicas < 2 {
            return fail("experiment.replicas must be >= 2");
        }
        Ok(())
    }

    fn node_count(&self) -> usize {
        self.grid.nodes.pow(self.grid.dimension as u32)
    }

    pub fn grid(&self) -> Result<Arc<Grid>, bidomain_core::Error> {
        make_grid(self.grid.dimension, &self.grid.extent, self.grid.nodes)
    }

    pub fn conductivity(&self, grid: &Grid) -> ConductivitySpec {
        let field = |s: &SigmaValue| match *s {
            SigmaValue::Scalar(v) => Conductivity::uniform_scalar(grid, v),
            SigmaValue::Tensor(t) => Conductivity::uniform_tensor(grid, t),
        };
        let [lo, hi] = self.conductivity.ellipticity_bounds.expect("resolved");
        ConductivitySpec {
            sigma_i: field(&self.conductivity.sigma_i),
            sigma_e: field(&self.conductivity.sigma_e),
            ellipticity_bounds: (lo, hi),
        }
    }

    pub fn model(&self) -> IonicModel {
        let m = &self.model;
        let v = |x: Option<f64>| x.expect("resolved");
        match m.name.as_str() {
            "fitzhugh_nagumo" => IonicModel::FitzHughNagumo { eta: v(m.eta), a: v(m.a), b: v(m.b), c: v(m.c) },
            "aliev_panfilov" => IonicModel::AlievPanfilov { eta: v(m.eta), k: v(m.k), a: v(m.a) },
            "rogers_mcculloch" => {
                IonicModel::RogersMcCulloch { eta: v(m.eta), b: v(m.b), a: v(m.a), c: v(m.c), d: v(m.d) }
            }
            _ => IonicModel::AllenCahn { eta: v(m.eta) },
        }
    }

    pub fn decay_rule(&self) -> (DecayRule, usize) {
        let n = &self.noise;
        let modes = n.modes.expect("resolved");
        match &n.gammas {
            Some(g) => (DecayRule::Explicit { gammas: g.clone() }, modes),
            None => (DecayRule::PowerLaw { scale: n.scale, exponent: n.exponent }, modes),
        }
    }

    fn scheme(&self) -> Result<Scheme, ConfigError> {
        match self.sim.scheme.as_str() {
            "imex_spectral" => Ok(Scheme::ImexSpectral),
            "explicit_em" => Ok(Scheme::ExplicitEm),
            other => fail(format!("sim.scheme `{other}` is not one of imex_spectral, explicit_em")),
        }
    }

    pub fn sim_config(&self, grid: &Grid) -> SimConfig {
        let s = &self.sim;
        let mut cfg = SimConfig::new(s.dt, s.t_final);
        cfg.scheme = self.scheme().expect("resolved");
        cfg.epsilon = s.epsilon;
        cfg.record_every = s.record_every;
        cfg.source = if !s.electrodes.is_empty() {
            Source::Electrodes {
                electrodes: s
                    .electrodes
                    .iter()
                    .map(|e| {
                        let pad = |v: &[f64]| [v[0], v.get(1).copied().unwrap_or(0.0)];
                        Electrode {
                            lower: pad(&e.lower),
                            upper: pad(&e.upper),
                            amplitude: e.amplitude,
                            t_on: e.t_on,
                            t_off: if e.t_off == f64::MAX { f64::INFINITY } else { e.t_off },
                        }
                    })
                    .collect(),
            }
        } else if s.current != 0.0 {
            Source::Constant { values: vec![s.current; grid.len()] }
        } else {
            Source::Zero
        };
        cfg
    }

    pub fn initial_state(&self, grid: &Arc<Grid>) -> State {
        let s = &self.sim;
        let len = self.grid.extent[0];
        let k = s.u0_mode as f64;
        let u = grid.sample(|x, _| s.u0_mean + s.u0_amplitude * (k * PI * x / len).cos());
        let w = Field::constant(grid, s.w0);
        State { u, w, t: 0.0 }
    }

    pub fn mc(&self) -> McConfig {
        let mut mc = McConfig::new(self.experiment.replicas, self.sim.seed);
        mc.confidence = self.experiment.confidence;
        mc
    }

    pub fn stationary(&self) -> StationarySettings {
        let e = &self.experiment;
        StationarySettings {
            eps1: e.eps1,
            eps2: e.eps2,
            burn_in: e.burn_in,
            horizon: e.horizon,
            stationarity_hypotheses: e.stationarity_hypotheses,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let cfg = Config::parse("[grid]\nnodes = 9\n[model]\nname = \"aliev_panfilov\"\n").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn foreign_parameter_is_rejected() {
        let err = Config::parse("[grid]\n[model]\nname = \"allen_cahn\"\nk = 2.0\n").unwrap_err();
        assert!(err.0.contains("model.k"), "{err}");
    }

    #[test]
    fn tensor_bounds_use_eigenvalues() {
        let cfg = Config::parse(
            "[grid]\ndimension = 2\nnodes = 5\n[conductivity]\nsigma_i = [2.0, 1.0, 2.0]\nsigma_e = 1.5\n[model]\nname = \"allen_cahn\"\n",
        )
        .unwrap();
        assert_eq!(cfg.conductivity.ellipticity_bounds, Some([1.0, 3.0]));
    }
}
