//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [forcing]
//! eps = 1e-3
//! [run]
//! mode = closed-loop
//! ```
//!
//! Every key may be overridden by an environment variable
//! `CHAOSPUMP_<SECTION>_<KEY>` (upper case, `-` as `_`).

use crate::error::{Error, Result};
use crate::experiments::{BarrierKind, ControllerMode, ExperimentConfig};
use crate::potential::BilliardTable;
use std::collections::BTreeMap;
use std::path::Path;

pub const ENV_PREFIX: &str = "CHAOSPUMP_";

/// Low-energy regime used for the history manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSettings {
    pub eps: f64,
    /// Energy above the potential minimum spanned by the region.
    pub energy: f64,
    /// Width of the exponential walls of the bowl.
    pub sigma: f64,
    pub nodes: usize,
    pub phase_nodes: usize,
    pub steps: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        ManifoldSettings { eps: 1e-3, energy: 1.25e-3, sigma: 0.3, nodes: 4, phase_nodes: 8, steps: 10, max_iter: 20, tol: 1e-13 }
    }
}

/// Sample sizes and horizons of the standalone checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub mc_samples: usize,
    pub conserve_time: f64,
    pub limit_samples: usize,
    pub limit_spread: f64,
    pub rate_windows: usize,
    pub dissipate_time: f64,
    pub code_words: usize,
    pub code_length: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            mc_samples: 10_000_000,
            conserve_time: 1e3,
            limit_samples: 100,
            limit_spread: 0.05,
            rate_windows: 10,
            dissipate_time: 200.0,
            code_words: 20,
            code_length: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub manifold: ManifoldSettings,
    pub checks: CheckSettings,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key}: must be positive and finite")))
    }
}

fn parse_circles(v: &str) -> Result<BilliardTable> {
    let mut circles = Vec::new();
    for item in v.split(';').filter(|s| !s.trim().is_empty()) {
        let f: Vec<f64> = item.split_whitespace().map(|x| num("table.circles", x)).collect::<Result<_>>()?;
        if f.len() != 3 {
            return Err(Error::Config("table.circles: expected `y z radius` triples separated by `;`".into()));
        }
        circles.push(([f[0], f[1]], f[2]));
    }
    BilliardTable::from_circles(&circles).map_err(|e| Error::Config(format!("table.circles: {e}")))
}

impl Config {
    /// Parses configuration text, applying overrides from `env`.
    pub fn parse(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Config> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside a section", n + 1)));
            }
            entries.insert(format!("{section}.{}", k.trim()), v.trim().trim_matches('"').to_string());
        }
        for key in KEYS {
            let var = format!("{ENV_PREFIX}{}", key.replace(['.', '-'], "_").to_uppercase());
            if let Some(v) = env(&var) {
                entries.insert(key.to_string(), v);
            }
        }
        let mut cfg = Config::default();
        let e = &mut cfg.experiment;
        let (m, c) = (&mut cfg.manifold, &mut cfg.checks);
        for (key, v) in &entries {
            let k = key.as_str();
            match k {
                "table.circles" => e.table = parse_circles(v)?,
                "table.barrier" => {
                    e.barrier = match v.as_str() {
                        "singular" => BarrierKind::Singular,
                        "exponential" => BarrierKind::Exponential,
                        _ => return Err(Error::Config(format!("{k}: expected singular or exponential"))),
                    }
                }
                "coupling.a0" => e.coupling.a0 = num(k, v)?,
                "coupling.a1" => e.coupling.a1 = num(k, v)?,
                "coupling.a2" => e.coupling.a2 = num(k, v)?,
                "forcing.eps" => e.eps = num(k, v)?,
                "forcing.omega" => e.omega = positive(k, num(k, v)?)?,
                "forcing.a_omega" => e.a_omega = num(k, v)?,
                "run.h0" => e.h0 = positive(k, num(k, v)?)?,
                "run.h1" => e.h1 = positive(k, num(k, v)?)?,
                "run.delta_margin" => e.delta_margin = num(k, v)?,
                "run.mode" => {
                    e.mode = match v.as_str() {
                        "closed-loop" => ControllerMode::ClosedLoop,
                        "exact-code" => ControllerMode::ExactCode,
                        _ => return Err(Error::Config(format!("{k}: expected closed-loop or exact-code"))),
                    }
                }
                "run.eta" => e.eta = num(k, v)?,
                "run.n_block" => e.n_block = num(k, v)?,
                "run.horizon" => e.horizon = num(k, v)?,
                "run.max_windows" => e.max_windows = num(k, v)?,
                "run.samples_per_window" => e.samples_per_window = num(k, v)?,
                "run.rtol" => e.rtol = positive(k, num(k, v)?)?,
                "run.seed" => e.seed = num(k, v)?,
                "run.theta0" => e.theta0 = num(k, v)?,
                "run.offset_a" => e.offsets[0] = num(k, v)?,
                "run.offset_b" => e.offsets[1] = num(k, v)?,
                "run.model_grid" => e.model_grid = num(k, v)?,
                "manifold.eps" => m.eps = num(k, v)?,
                "manifold.energy" => m.energy = positive(k, num(k, v)?)?,
                "manifold.sigma" => m.sigma = positive(k, num(k, v)?)?,
                "manifold.nodes" => m.nodes = num(k, v)?,
                "manifold.phase_nodes" => m.phase_nodes = num(k, v)?,
                "manifold.steps" => m.steps = num(k, v)?,
                "manifold.max_iter" => m.max_iter = num(k, v)?,
                "manifold.tol" => m.tol = positive(k, num(k, v)?)?,
                "checks.mc_samples" => c.mc_samples = num(k, v)?,
                "checks.conserve_time" => c.conserve_time = positive(k, num(k, v)?)?,
                "checks.limit_samples" => c.limit_samples = num(k, v)?,
                "checks.limit_spread" => c.limit_spread = positive(k, num(k, v)?)?,
                "checks.rate_windows" => c.rate_windows = num(k, v)?,
                "checks.dissipate_time" => c.dissipate_time = positive(k, num(k, v)?)?,
                "checks.code_words" => c.code_words = num(k, v)?,
                "checks.code_length" => c.code_length = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        // defaults tied to other keys
        if !entries.contains_key("run.eta") {
            e.eta = e.eps / 100.0;
        }
        if !entries.contains_key("run.delta_margin") {
            e.delta_margin = ExperimentConfig::default_margin(&e.table, &e.coupling, e.a_omega);
        }
        e.validate()?;
        if m.nodes < 4 || m.phase_nodes % 2 != 0 || m.phase_nodes < 2 || m.steps < 4 {
            return Err(Error::Config("manifold grid needs nodes >= 4, an even phase_nodes and steps >= 4".into()));
        }
        Ok(cfg)
    }

    /// Canonical text of every setting, defaults included.
    pub fn render(&self) -> String {
        let e = &self.experiment;
        let (m, c) = (&self.manifold, &self.checks);
        let circles: Vec<String> = e.table.arcs.iter().map(|a| format!("{:?} {:?} {:?}", a.center[0], a.center[1], a.radius)).collect();
        let barrier = match e.barrier {
            BarrierKind::Singular => "singular",
            BarrierKind::Exponential => "exponential",
        };
        let mode = match e.mode {
            ControllerMode::ClosedLoop => "closed-loop",
            ControllerMode::ExactCode => "exact-code",
        };
        format!(
            "[table]\ncircles = {}\nbarrier = {barrier}\n\n\
             [coupling]\na0 = {:?}\na1 = {:?}\na2 = {:?}\n\n\
             [forcing]\neps = {:?}\nomega = {:?}\na_omega = {:?}\n\n\
             [run]\nh0 = {:?}\nh1 = {:?}\ndelta_margin = {:?}\nmode = {mode}\neta = {:?}\nn_block = {}\nhorizon = {}\n\
             max_windows = {}\nsamples_per_window = {}\nrtol = {:?}\nseed = {}\ntheta0 = {:?}\noffset_a = {:?}\noffset_b = {:?}\nmodel_grid = {}\n\n\
             [manifold]\neps = {:?}\nenergy = {:?}\nsigma = {:?}\nnodes = {}\nphase_nodes = {}\nsteps = {}\nmax_iter = {}\ntol = {:?}\n\n\
             [checks]\nmc_samples = {}\nconserve_time = {:?}\nlimit_samples = {}\nlimit_spread = {:?}\nrate_windows = {}\n\
             dissipate_time = {:?}\ncode_words = {}\ncode_length = {}\n",
            circles.join("; "),
            e.coupling.a0,
            e.coupling.a1,
            e.coupling.a2,
            e.eps,
            e.omega,
            e.a_omega,
            e.h0,
            e.h1,
            e.delta_margin,
            e.eta,
            e.n_block,
            e.horizon,
            e.max_windows,
            e.samples_per_window,
            e.rtol,
            e.seed,
            e.theta0,
            e.offsets[0],
            e.offsets[1],
            e.model_grid,
            m.eps,
            m.energy,
            m.sigma,
            m.nodes,
            m.phase_nodes,
            m.steps,
            m.max_iter,
            m.tol,
            c.mc_samples,
            c.conserve_time,
            c.limit_samples,
            c.limit_spread,
            c.rate_windows,
            c.dissipate_time,
            c.code_words,
            c.code_length,
        )
    }
}

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "table.circles",
    "table.barrier",
    "coupling.a0",
    "coupling.a1",
    "coupling.a2",
    "forcing.eps",
    "forcing.omega",
    "forcing.a_omega",
    "run.h0",
    "run.h1",
    "run.delta_margin",
    "run.mode",
    "run.eta",
    "run.n_block",
    "run.horizon",
    "run.max_windows",
    "run.samples_per_window",
    "run.rtol",
    "run.seed",
    "run.theta0",
    "run.offset_a",
    "run.offset_b",
    "run.model_grid",
    "manifold.eps",
    "manifold.energy",
    "manifold.sigma",
    "manifold.nodes",
    "manifold.phase_nodes",
    "manifold.steps",
    "manifold.max_iter",
    "manifold.tol",
    "checks.mc_samples",
    "checks.conserve_time",
    "checks.limit_samples",
    "checks.limit_spread",
    "checks.rate_windows",
    "checks.dissipate_time",
    "checks.code_words",
    "checks.code_length",
];

/// Reads and validates a configuration file, with environment overrides.
pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Config::parse(&text, |k| std::env::var(k).ok())
}
