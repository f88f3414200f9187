//! Phase-controlled acceleration runs, control arms and drift measurement.

use crate::billiard::{default_orbits, orbit_average};
use crate::dynamics::{
    backward_history, integrate_dde, integrate_shortened, DdeIntegrator, DenseStep, EnergyTrace, OscState, Oscillator, Phase, Sampler,
    StepperOptions, DIM,
};
use crate::error::{Error, Result};
use crate::potential::{BilliardTable, InteractionCoefficient, PotentialModel};
use crate::quad::integrate16;
use crate::symbolic::{
    billiard_line_return, build_cross_form_model, calibrated_sections, contract_code_biased, default_sections, detect_crossings,
    find_coded_orbit_from, heteroclinic_seed, line_return, Closure, CrossFormModel, Symbol, SymbolSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::PathBuf;

/// Below this magnitude `A cos(theta)` keeps the current symbol.
pub const PHASE_TIE: f64 = 1e-12;

/// Symbol demanded by the forcing phase: `a` while `A cos(theta) > 0`, `b` while negative.
pub fn phase_code(theta: f64, a_omega: f64, current: Symbol) -> Symbol {
    let v = a_omega * theta.cos();
    if v.abs() < PHASE_TIE {
        current
    } else if v > 0.0 {
        Symbol::A
    } else {
        Symbol::B
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    ClosedLoop,
    ExactCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierKind {
    Singular,
    Exponential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub table: BilliardTable,
    pub barrier: BarrierKind,
    pub coupling: InteractionCoefficient,
    pub eps: f64,
    pub omega: f64,
    pub a_omega: f64,
    pub h0: f64,
    pub h1: f64,
    pub delta_margin: f64,
    pub mode: ControllerMode,
    /// Largest correction per crossing, in section coordinates.
    pub eta: f64,
    pub n_block: usize,
    pub horizon: usize,
    /// Run length cap in forcing periods.
    pub max_windows: usize,
    pub samples_per_window: usize,
    pub rtol: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Forcing phase at the start.
    pub theta0: f64,
    /// Section anchors along the two orbits.
    pub offsets: [f64; 2],
    /// Cross-form sampling grid per axis.
    pub model_grid: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let table = BilliardTable::default_table();
        let delta_margin = Self::default_margin(&table, &InteractionCoefficient::default(), 1.0);
        let eps = 1e-3;
        ExperimentConfig {
            table,
            barrier: BarrierKind::Singular,
            coupling: InteractionCoefficient::default(),
            eps,
            omega: 1.0,
            a_omega: 1.0,
            h0: 100.0,
            h1: 101.0,
            delta_margin,
            mode: ControllerMode::ClosedLoop,
            eta: eps / 100.0,
            n_block: 8,
            horizon: 12,
            max_windows: 32,
            samples_per_window: 64,
            rtol: 1e-13,
            seed: 0,
            out_dir: PathBuf::from("out"),
            theta0: 0.0,
            offsets: [0.0, 0.2],
            model_grid: 11,
        }
    }
}

impl ExperimentConfig {
    /// `0.1 |A| (v_a - v_b) / 2 pi`, or zero when the default orbits are unavailable.
    pub fn default_margin(table: &BilliardTable, coupling: &InteractionCoefficient, a_omega: f64) -> f64 {
        default_orbits(table)
            .map(|(la, lb, _, _)| 0.1 * a_omega.abs() * (orbit_average(&la, coupling) - orbit_average(&lb, coupling)).abs() / (2.0 * PI))
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h1 > self.h0) {
            return Err(Error::Config("h1 must exceed h0".into()));
        }
        if !(self.eps >= 0.0) || !(self.omega > 0.0) {
            return Err(Error::Config("eps must be non-negative and omega positive".into()));
        }
        if self.eps > 0.0 && !(self.eta < self.eps / 10.0) {
            return Err(Error::Config("correction budget must satisfy eta < eps/10".into()));
        }
        if self.n_block == 0 || self.horizon < 2 || self.samples_per_window < 2 {
            return Err(Error::Config("n_block, horizon and samples_per_window must be positive".into()));
        }
        Ok(())
    }

    /// Same setup with `eps` replaced and the correction cap rescaled.
    pub fn with_eps(&self, eps: f64) -> Self {
        let mut c = self.clone();
        c.eta = if self.eps > 0.0 { self.eta * eps / self.eps } else { eps / 100.0 };
        c.eps = eps;
        c
    }

    pub fn window(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn potential(&self) -> PotentialModel {
        match self.barrier {
            BarrierKind::Singular => PotentialModel::singular(self.table.clone(), self.h1),
            BarrierKind::Exponential => PotentialModel::exponential(self.table.clone(), self.h1),
        }
    }

    pub fn oscillator(&self) -> Oscillator {
        Oscillator { potential: self.potential(), coupling: self.coupling, eps: self.eps, omega: self.omega, a_omega: self.a_omega }
    }

    fn opts(&self) -> StepperOptions {
        StepperOptions { rtol: self.rtol, atol: self.rtol, ..Default::default() }
    }
}

/// Fixed ingredients shared by the runs of one configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: CrossFormModel,
    pub v_a: f64,
    pub v_b: f64,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Setup> {
        cfg.validate()?;
        let (la, lb, hab, hba) = default_orbits(&cfg.table)?;
        let v_a = orbit_average(&la, &cfg.coupling);
        let v_b = orbit_average(&lb, &cfg.coupling);
        if (v_a - v_b).abs() < 1e-12 {
            return Err(Error::Domain("orbit averages coincide: no pumping possible".into()));
        }
        let osc = cfg.oscillator().with_eps(0.0);
        let secs = calibrated_sections(&osc, cfg.h0, cfg.offsets[0], cfg.offsets[1])?;
        let missing = || Error::NoConvergence("heteroclinic does not cross the section patch".into());
        let seeds = [heteroclinic_seed(&hab, &secs[0]).ok_or_else(missing)?, heteroclinic_seed(&hba, &secs[1]).ok_or_else(missing)?];
        let model = build_cross_form_model(&osc, &secs, cfg.h0, seeds, cfg.model_grid)?;
        Ok(Setup { model, v_a, v_b })
    }

    pub fn spread(&self) -> f64 {
        self.v_a - self.v_b
    }
}

/// Which symbols the controller asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Phase { reversed: bool },
    Constant(Symbol),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlArm {
    ConstantA,
    ConstantB,
    EpsilonZero,
}

/// One correction applied at a section crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub t: f64,
    pub symbol: Symbol,
    pub dw: f64,
    /// Change of the coupled energy caused by the correction.
    pub dh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    ReachedTarget,
    Escaped { t: f64, reason: String },
    BudgetExhausted { t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub window: f64,
    pub delta_h: Vec<f64>,
    pub mean_delta_h: f64,
    /// Least-squares slope of `h(t)`.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Fraction of consecutive window means that increase.
    pub monotone_fraction: f64,
    /// `eps (|A| (v_a - v_b) - 2 pi delta_margin)`.
    pub bound: f64,
    /// Sum of `|dh|` over all corrections.
    pub budget: f64,
    pub corrections: usize,
    pub bound_met: bool,
    pub budget_ok: bool,
}

impl DriftReport {
    fn with_bound(mut self, bound: f64, corrections: &[Correction]) -> Self {
        self.bound = bound;
        self.budget = corrections.iter().map(|c| c.dh.abs()).sum();
        self.corrections = corrections.len();
        self.bound_met = self.mean_delta_h > bound;
        let gain = self.mean_delta_h * self.delta_h.len() as f64;
        self.budget_ok = self.budget < 0.1 * gain.abs();
        self
    }

    pub fn budget_ratio(&self) -> f64 {
        let gain = (self.mean_delta_h * self.delta_h.len() as f64).abs();
        if gain > 0.0 {
            self.budget / gain
        } else {
            f64::INFINITY
        }
    }
}

/// Energy change over consecutive `2 pi / omega` windows and a linear fit of `h(t)`.
pub fn measure_drift(trace: &EnergyTrace, omega: f64) -> Result<DriftReport> {
    let window = 2.0 * PI / omega;
    if trace.len() < 2 {
        return Err(Error::InsufficientData("trace has fewer than two samples".into()));
    }
    let t0 = trace.t[0];
    let span = trace.t[trace.len() - 1] - t0;
    let windows = (span / window * (1.0 + 1e-12)).floor() as usize;
    if windows < 5 {
        return Err(Error::InsufficientData(format!("trace spans {windows} forcing periods, need 5")));
    }
    let h_at = |t: f64| -> f64 {
        let i = trace.t.partition_point(|&s| s < t);
        if i == 0 {
            return trace.h[0];
        }
        if i >= trace.len() {
            return trace.h[trace.len() - 1];
        }
        let (ta, tb) = (trace.t[i - 1], trace.t[i]);
        if (tb - t).abs() < 1e-9 * window {
            return trace.h[i];
        }
        let f = (t - ta) / (tb - ta);
        trace.h[i - 1] + f * (trace.h[i] - trace.h[i - 1])
    };
    let bounds: Vec<f64> = (0..=windows).map(|k| h_at(t0 + k as f64 * window)).collect();
    let delta_h: Vec<f64> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_delta_h = delta_h.iter().sum::<f64>() / windows as f64;

    let n = trace.len() as f64;
    let mt = trace.t.iter().sum::<f64>() / n;
    let mh = trace.h.iter().sum::<f64>() / n;
    let (mut stt, mut sth, mut shh) = (0.0, 0.0, 0.0);
    for (t, h) in trace.t.iter().zip(&trace.h) {
        stt += (t - mt) * (t - mt);
        sth += (t - mt) * (h - mh);
        shh += (h - mh) * (h - mh);
    }
    let slope = if stt > 0.0 { sth / stt } else { 0.0 };
    let intercept = mh - slope * mt;
    let r2 = if shh > 0.0 { sth * sth / (stt * shh) } else { 1.0 };

    let mut means = vec![(0.0, 0usize); windows];
    for (t, h) in trace.t.iter().zip(&trace.h) {
        let k = ((t - t0) / window).floor() as usize;
        if k < windows {
            means[k].0 += h;
            means[k].1 += 1;
        }
    }
    let means: Vec<f64> = means.iter().filter(|m| m.1 > 0).map(|m| m.0 / m.1 as f64).collect();
    let ups = means.windows(2).filter(|w| w[1] > w[0]).count();
    let monotone_fraction = if means.len() > 1 { ups as f64 / (means.len() - 1) as f64 } else { 0.0 };

    Ok(DriftReport {
        window,
        delta_h,
        mean_delta_h,
        slope,
        intercept,
        r2,
        monotone_fraction,
        bound: 0.0,
        budget: 0.0,
        corrections: 0,
        bound_met: false,
        budget_ok: false,
    })
}

/// Output of one experiment.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub name: String,
    pub trace: EnergyTrace,
    pub report: DriftReport,
    pub corrections: Vec<Correction>,
    pub symbols: Vec<(f64, Symbol)>,
    pub status: RunStatus,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        matches!(self.status, RunStatus::Completed | RunStatus::ReachedTarget) && self.report.bound_met && self.report.budget_ok
    }
}

struct Planner<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a CrossFormModel,
    strategy: Strategy,
    /// Running estimate of the one-step model error per transition.
    bias: [[f64; 2]; 4],
    last: Option<(Symbol, [f64; 2])>,
}

impl<'a> Planner<'a> {
    fn desired(&self, theta: f64, current: Symbol) -> Symbol {
        match self.strategy {
            Strategy::Constant(s) => s,
            Strategy::Phase { reversed } => {
                let s = phase_code(theta, self.cfg.a_omega, current);
                if reversed {
                    s.other()
                } else {
                    s
                }
            }
        }
    }

    /// Symbols for the next `horizon` crossings, held in blocks of at least `n_block`.
    fn plan(&self, current: Symbol, run_len: usize, theta: f64) -> Vec<Symbol> {
        let mut word = vec![current];
        let (mut prev, mut run, mut th) = (current, run_len, theta);
        for _ in 0..self.cfg.horizon {
            let stay = self.model.map(prev, prev).mean_time;
            let want = self.desired(th + self.cfg.omega * stay, prev);
            let next = if want != prev && run < self.cfg.n_block { prev } else { want };
            th += self.cfg.omega * self.model.map(prev, next).mean_time;
            run = if next == prev { run + 1 } else { 1 };
            prev = next;
            word.push(next);
        }
        word
    }

    /// Updates the model-error estimate from the crossing just reached.
    fn learn(&mut self, symbol: Symbol, uw: [f64; 2]) {
        const GAIN: f64 = 0.5;
        if let Some((s, prev)) = self.last {
            let map = self.model.map(s, symbol);
            let k = s.index() * 2 + symbol.index();
            let b = self.bias[k];
            if let Some(pred) = map.forward(prev[0], prev[1], uw[1] - b[1]) {
                let r = [uw[0] - pred[0], uw[1] - pred[1]];
                if r[0].abs().max(r[1].abs()) < self.model.sections[symbol.index()].patch {
                    self.bias[k] = [(1.0 - GAIN) * b[0] + GAIN * r[0], (1.0 - GAIN) * b[1] + GAIN * r[1]];
                }
            }
        }
    }

    /// Planned section points for `word`, starting at `u` on the current section.
    fn target_nodes(&self, word: &[Symbol], u: f64) -> Vec<[f64; 2]> {
        let code = SymbolSequence { symbols: word.to_vec(), closure: Closure::FreeEnds };
        contract_code_biased(self.model, &code, u, 0.0, &self.bias, 100).nodes
    }
}

fn corrected_state(model: &CrossFormModel, osc: &Oscillator, symbol: Symbol, x: &Phase, uw: [f64; 2]) -> Phase {
    let sec = &model.sections[symbol.index()];
    let raw = sec.uw_to_raw(uw);
    let speed = x[2].hypot(x[3]);
    let q = [sec.anchor[0] + raw[0] * sec.tangent[0], sec.anchor[1] + raw[0] * sec.tangent[1]];
    let (c, s) = (raw[1].cos(), raw[1].sin());
    let d = [c * sec.normal[0] + s * sec.tangent[0], c * sec.normal[1] + s * sec.tangent[1]];
    let _ = osc;
    [q[0], q[1], speed * d[0], speed * d[1], x[4]]
}

/// Solves, on the delayed flow itself, for the `w` at the current crossing
/// that makes the next crossing, on `next`, arrive at `w = target`.
#[allow(clippy::too_many_arguments)]
fn shoot_transit(
    integ: &mut DdeIntegrator,
    osc: &Oscillator,
    model: &CrossFormModel,
    current: Symbol,
    next: Symbol,
    uw: [f64; 2],
    guess: f64,
    target: f64,
    max_time: f64,
) -> Option<f64> {
    let secs = &model.sections;
    let to = next.index();
    let rho = secs[to].patch;
    let x = integ.stepper.x;
    let t_start = integ.t();
    let mut arrive = |w: f64| -> Option<f64> {
        let cp = integ.checkpoint();
        integ.set_state(corrected_state(model, osc, current, &x, [uw[0], w]));
        let mut found = None;
        while found.is_none() && integ.t() < t_start + max_time {
            let Ok(step) = integ.step(None) else { break };
            found = detect_crossings(&step, secs).into_iter().find(|c| c.section == to && c.uw[0].abs() <= rho).map(|c| c.uw[1]);
        }
        integ.restore(&cp);
        found
    };
    let tol = 1e-4 * rho;
    let (mut w0, mut w1) = (guess, guess + 1e-10);
    let mut f0 = arrive(w0)? - target;
    if f0.abs() < tol {
        return Some(w0);
    }
    let mut f1 = arrive(w1)? - target;
    for _ in 0..12 {
        if f1.abs() < tol {
            return Some(w1);
        }
        if f1 == f0 {
            return None;
        }
        let w2 = w1 - f1 * (w1 - w0) / (f1 - f0);
        w0 = w1;
        f0 = f1;
        w1 = w2;
        f1 = arrive(w1)? - target;
    }
    (f1.abs() < tol).then_some(w1)
}

fn initial_state(cfg: &ExperimentConfig, setup: &Setup, osc: &Oscillator) -> Result<OscState> {
    let sec = &setup.model.sections[0];
    sec.state_uw(osc, [0.0, 0.0], cfg.h0, cfg.theta0, 0.0)
        .ok_or_else(|| Error::Domain("starting point lies above the energy surface".into()))
}

fn finish(name: &str, cfg: &ExperimentConfig, setup: &Setup, mut out: RunOutput) -> Result<RunOutput> {
    let bound = cfg.eps * (cfg.a_omega.abs() * setup.spread().abs() - 2.0 * PI * cfg.delta_margin);
    out.report = match measure_drift(&out.trace, cfg.omega) {
        Ok(r) => r.with_bound(bound, &out.corrections),
        // a failed run keeps its diagnostics even when too short to measure
        Err(_) if !matches!(out.status, RunStatus::Completed | RunStatus::ReachedTarget) => empty_report(),
        Err(e) => return Err(e),
    };
    out.name = name.to_string();
    Ok(out)
}

/// Closed-loop shadowing run on the delayed system.
fn run_closed_loop(cfg: &ExperimentConfig, setup: &Setup, strategy: Strategy) -> Result<RunOutput> {
    let osc = cfg.oscillator();
    let model = &setup.model;
    let secs = &model.sections;
    let start = initial_state(cfg, setup, &osc)?;
    let history = backward_history(&osc, &start, cfg.opts())?;
    let delta = cfg.eps * cfg.eps;
    let mut integ = DdeIntegrator::new(&osc, delta, &history, cfg.opts())?;
    let window = cfg.window();
    let t_cap = window * cfg.max_windows as f64;
    let mut sampler = Sampler::new(0.0, window / cfg.samples_per_window as f64);
    let mut trace = EnergyTrace::default();
    let mut corrections = Vec::new();
    let mut symbols = Vec::new();
    let mut planner = Planner { cfg, model, strategy, bias: [[0.0; 2]; 4], last: None };
    let mut current = Symbol::A;
    let mut run_len = 0usize;
    let mut last_cross = f64::NEG_INFINITY;
    let lost_after = 40.0 * secs[0].period.max(secs[1].period);
    let budget_cap = 0.1 * cfg.eps * cfg.a_omega.abs() * setup.spread().abs() * cfg.max_windows as f64;
    let mut status = RunStatus::Completed;
    let mut first = true;

    while integ.t() < t_cap - 1e-12 {
        let cp = integ.checkpoint();
        let step = integ.step(Some(t_cap))?;
        let hit = detect_crossings(&step, secs).into_iter().find(|c| c.in_patch && (first || c.t > last_cross + 1e-6));
        let Some(c) = hit else {
            sampler.take(&step, |t, x| trace.push(&osc, t, x));
            integ.trim();
            if integ.t() - last_cross.max(0.0) > lost_after {
                status = RunStatus::Escaped { t: integ.t(), reason: format!("no section crossing since t = {last_cross:.6}") };
                break;
            }
            continue;
        };
        integ.restore(&cp);
        while integ.t() < c.t {
            let s = integ.step(Some(c.t))?;
            sampler.take(&s, |t, x| trace.push(&osc, t, x));
        }
        first = false;
        last_cross = c.t;
        let x = integ.stepper.x;
        let uw = secs[c.section].uw(&x);
        planner.learn(c.symbol, uw);
        run_len = if c.symbol == current { run_len + 1 } else { 1 };
        current = c.symbol;
        symbols.push((c.t, c.symbol));
        let word = planner.plan(current, run_len, x[4]);
        let nodes = planner.target_nodes(&word, uw[0]);
        let mut w_req = nodes[0][1];
        if let Some(w) = shoot_transit(&mut integ, &osc, model, current, word[1], uw, w_req, nodes[1][1], lost_after) {
            w_req = w;
        }
        let dw = (w_req - uw[1]).clamp(-cfg.eta, cfg.eta);
        log::debug!("t = {:.4} theta = {:.3} at {} uw = ({:.3e}, {:.3e}) dw = {:.2e}", c.t, x[4], c.symbol.as_char(), uw[0], uw[1], dw);
        let applied = [uw[0], uw[1] + dw];
        if dw != 0.0 {
            let nx = corrected_state(model, &osc, current, &x, applied);
            let dh = osc.coupled_energy(&nx) - osc.coupled_energy(&x);
            integ.set_state(nx);
            corrections.push(Correction { t: c.t, symbol: current, dw, dh });
        }
        planner.last = Some((current, applied));
        integ.trim();
        let spent: f64 = corrections.iter().map(|c| c.dh.abs()).sum();
        if spent > budget_cap {
            status = RunStatus::BudgetExhausted { t: c.t };
            break;
        }
        if osc.coupled_energy(&integ.stepper.x) >= cfg.h1 {
            status = RunStatus::ReachedTarget;
            break;
        }
    }
    let out = RunOutput { name: String::new(), trace, report: empty_report(), corrections, symbols, status };
    Ok(out)
}

fn empty_report() -> DriftReport {
    DriftReport {
        window: 0.0,
        delta_h: Vec::new(),
        mean_delta_h: 0.0,
        slope: 0.0,
        intercept: 0.0,
        r2: 0.0,
        monotone_fraction: 0.0,
        bound: 0.0,
        budget: 0.0,
        corrections: 0,
        bound_met: false,
        budget_ok: false,
    }
}

/// Exact-code run: splices orbits with the planned code on the shortened flow.
fn run_exact(cfg: &ExperimentConfig, setup: &Setup, strategy: Strategy) -> Result<RunOutput> {
    const SEGMENT: usize = 24;
    let osc = cfg.oscillator();
    let model = &setup.model;
    let window = cfg.window();
    let t_cap = window * cfg.max_windows as f64;
    let mut sampler = Sampler::new(0.0, window / cfg.samples_per_window as f64);
    let mut trace = EnergyTrace::default();
    let mut corrections = Vec::new();
    let mut symbols = Vec::new();
    let planner = Planner { cfg: &ExperimentConfig { horizon: SEGMENT - 1, ..cfg.clone() }, model, strategy, bias: [[0.0; 2]; 4], last: None };
    let mut state = initial_state(cfg, setup, &osc)?;
    let mut current = Symbol::A;
    let mut run_len = 1usize;
    let mut status = RunStatus::Completed;
    'outer: while state.t < t_cap {
        let x = state.phase();
        let sec = &model.sections[current.index()];
        let uw = sec.uw(&x);
        let word = planner.plan(current, run_len, state.theta);
        let code = SymbolSequence { symbols: word.clone(), closure: Closure::FreeEnds };
        let h = osc.energy(&x);
        let orbit = match find_coded_orbit_from(&osc, model, &code, uw[0], h, state.theta, state.t) {
            Ok(o) => o,
            Err(e) => {
                log::debug!("coded orbit failed at t = {} from uw = {uw:?}: {e}", state.t);
                status = RunStatus::Escaped { t: state.t, reason: e.to_string() };
                break;
            }
        };
        let dw = orbit.nodes[0][1] - uw[1];
        let jump = orbit.segment_starts[0].phase();
        corrections.push(Correction { t: state.t, symbol: current, dw, dh: osc.coupled_energy(&jump) - osc.coupled_energy(&x) });
        // follow half of the segment, then replan from the node reached
        let keep = (SEGMENT / 2).min(orbit.segment_starts.len());
        for i in 0..keep {
            let s0 = &orbit.segment_starts[i];
            if i > 0 {
                let prev_end = orbit.events[i].state;
                let dh = osc.coupled_energy(&s0.phase()) - osc.coupled_energy(&prev_end);
                if dh != 0.0 {
                    corrections.push(Correction { t: s0.t, symbol: word[i], dw: 0.0, dh });
                }
            }
            let t_end = orbit.events[i + 1].t;
            integrate_shortened(&osc, s0, t_end, cfg.opts(), |step: &DenseStep<DIM>| {
                sampler.take(step, |t, x| trace.push(&osc, t, x));
                ControlFlow::Continue(())
            })?;
            symbols.push((s0.t, word[i]));
            let next = word[i + 1];
            run_len = if next == current { run_len + 1 } else { 1 };
            current = next;
            let end = orbit.events[i + 1];
            state = OscState::from_phase(end.t, &end.state);
            if state.t >= t_cap {
                break 'outer;
            }
            if osc.coupled_energy(&end.state) >= cfg.h1 {
                status = RunStatus::ReachedTarget;
                break 'outer;
            }
        }
    }
    Ok(RunOutput { name: String::new(), trace, report: empty_report(), corrections, symbols, status })
}

fn run_strategy(cfg: &ExperimentConfig, setup: &Setup, strategy: Strategy) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.a_omega == 0.0 && matches!(strategy, Strategy::Phase { .. }) {
        return Err(Error::Domain("forcing amplitude vanishes: phase control undefined".into()));
    }
    match cfg.mode {
        ControllerMode::ClosedLoop => run_closed_loop(cfg, setup, strategy),
        ControllerMode::ExactCode => run_exact(cfg, setup, strategy),
    }
}

/// Phase-controlled acceleration run; `reversed` swaps the symbol rule.
pub fn run_acceleration(cfg: &ExperimentConfig, setup: &Setup, reversed: bool) -> Result<RunOutput> {
    let out = run_strategy(cfg, setup, Strategy::Phase { reversed })?;
    finish(if reversed { "reversed" } else { "acceleration" }, cfg, setup, out)
}

/// Control arms: constant code, or the phase controller without forcing.
pub fn run_control(cfg: &ExperimentConfig, setup: &Setup, arm: ControlArm) -> Result<RunOutput> {
    let (c, strategy, name) = match arm {
        ControlArm::ConstantA => (cfg.clone(), Strategy::Constant(Symbol::A), "constant-a"),
        ControlArm::ConstantB => (cfg.clone(), Strategy::Constant(Symbol::B), "constant-b"),
        ControlArm::EpsilonZero => (ExperimentConfig { eps: 0.0, eta: 0.0, ..cfg.clone() }, Strategy::Phase { reversed: false }, "epsilon-zero"),
    };
    let out = run_strategy(&c, setup, strategy)?;
    finish(name, &c, setup, out)
}

/// Exploratory trend of the energy under the delay force alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipationReport {
    pub slope: f64,
    /// Standard error of the slope.
    pub slope_se: f64,
    pub r2: f64,
    pub duration: f64,
}

/// Runs the delayed system without forcing and fits the energy trend.
pub fn run_dissipation(cfg: &ExperimentConfig, duration: f64) -> Result<(EnergyTrace, DissipationReport)> {
    let osc = Oscillator { a_omega: 0.0, ..cfg.oscillator() };
    let table = &cfg.table;
    let (q, _) = table.incenter();
    let start = osc
        .state_at_energy(q, [0.6, 0.8], cfg.h0, cfg.theta0, 0.0)
        .ok_or_else(|| Error::Domain("starting point lies above the energy surface".into()))?;
    let history = backward_history(&osc, &start, cfg.opts())?;
    let mut trace = EnergyTrace::default();
    let mut sampler = Sampler::new(0.0, cfg.window() / cfg.samples_per_window as f64);
    integrate_dde(&osc, cfg.eps * cfg.eps, &history, duration, cfg.opts(), |step| {
        sampler.take(step, |t, x| trace.push(&osc, t, x));
        ControlFlow::Continue(())
    })?;
    let n = trace.len() as f64;
    if n < 3.0 {
        return Err(Error::InsufficientData("dissipation run too short".into()));
    }
    let mt = trace.t.iter().sum::<f64>() / n;
    let mh = trace.h.iter().sum::<f64>() / n;
    let (mut stt, mut sth, mut shh) = (0.0, 0.0, 0.0);
    for (t, h) in trace.t.iter().zip(&trace.h) {
        stt += (t - mt).powi(2);
        sth += (t - mt) * (h - mh);
        shh += (h - mh).powi(2);
    }
    let slope = sth / stt;
    let resid = (shh - slope * sth).max(0.0);
    let slope_se = (resid / (n - 2.0) / stt).sqrt();
    let r2 = if shh > 0.0 { sth * sth / (stt * shh) } else { 1.0 };
    Ok((trace, DissipationReport { slope, slope_se, r2, duration }))
}

/// Windowed check of the energy law `dh/dt = eps omega A k cos(theta)` on the delayed system.
#[derive(Debug, Clone, PartialEq)]
pub struct RateResidual {
    pub eps: f64,
    /// `|delta h - int eps omega A k cos(theta) dt| / window` per window.
    pub windows: Vec<f64>,
}

impl RateResidual {
    /// Root mean square over the windows.
    pub fn rms(&self) -> f64 {
        (self.windows.iter().map(|r| r * r).sum::<f64>() / self.windows.len().max(1) as f64).sqrt()
    }
}

/// Integrates the delayed system from energy `h` for `n_windows` forcing
/// periods and compares each window's energy change with the integrated rate.
pub fn energy_rate_residual(osc: &Oscillator, h: f64, n_windows: usize, opts: StepperOptions) -> Result<RateResidual> {
    let (q, _) = osc.potential.table.incenter();
    let start = osc
        .state_at_energy(q, [0.6, 0.8], h, 0.0, 0.0)
        .ok_or_else(|| Error::Domain("starting point lies above the energy surface".into()))?;
    let history = backward_history(osc, &start, opts)?;
    let mut integ = DdeIntegrator::new(osc, osc.eps * osc.eps, &history, opts)?;
    let window = 2.0 * PI / osc.omega;
    let mut windows = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let t_end = (w + 1) as f64 * window;
        let h_start = osc.coupled_energy(&integ.stepper.x);
        let mut gain = 0.0;
        while integ.t() < t_end {
            let step = integ.step(Some(t_end))?;
            let (lo, hi) = step.interval();
            gain += integrate16(lo, hi, |t| osc.energy_rate(&step.eval(t)));
            integ.trim();
        }
        let dh = osc.coupled_energy(&integ.stepper.x) - h_start;
        windows.push((dh - gain).abs() / window);
    }
    Ok(RateResidual { eps: osc.eps, windows })
}

/// Distance between smooth and billiard returns to the `a` section line at each energy.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitReport {
    pub energies: Vec<f64>,
    /// Sup over the sample of the max-norm distance in `(zeta, psi)`.
    pub distances: Vec<f64>,
}

impl LimitReport {
    pub fn monotone(&self) -> bool {
        self.distances.windows(2).all(|d| d[1] < d[0])
    }
}

/// Compares smooth-flow and billiard returns from `samples` seeded points near
/// the `a` orbit, with the barrier fixed by the largest energy.
pub fn billiard_limit(table: &BilliardTable, energies: &[f64], samples: usize, spread: f64, seed: u64) -> Result<LimitReport> {
    let h_max = energies.iter().cloned().fold(f64::MIN, f64::max);
    let osc = Oscillator {
        potential: PotentialModel::singular(table.clone(), h_max),
        coupling: InteractionCoefficient::default(),
        eps: 0.0,
        omega: 1.0,
        a_omega: 0.0,
    };
    let secs = default_sections(table, 0.0, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<[f64; 2]> = (0..samples).map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread)]).collect();
    let exact: Vec<[f64; 2]> = points.iter().map(|p| billiard_line_return(table, &secs[0], *p, 8)).collect::<Result<_>>()?;
    let mut distances = Vec::with_capacity(energies.len());
    for &h in energies {
        let mut worst: f64 = 0.0;
        for (p, e) in points.iter().zip(&exact) {
            let (r, _) = line_return(&osc, &secs, 0, *p, h)?;
            worst = worst.max((r[0] - e[0]).abs()).max((r[1] - e[1]).abs());
        }
        distances.push(worst);
    }
    Ok(LimitReport { energies: energies.to_vec(), distances })
}

/// Fixed-width scientific format with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_csv(trace: &EnergyTrace) -> String {
    let mut s = String::from("t,h,y,z,p_y,p_z,theta\n");
    for (i, t) in trace.t.iter().enumerate() {
        let x = &trace.states[i];
        let _ = writeln!(s, "{},{},{},{},{},{},{}", fmt_num(*t), fmt_num(trace.h[i]), fmt_num(x[0]), fmt_num(x[1]), fmt_num(x[2]), fmt_num(x[3]), fmt_num(x[4]));
    }
    s
}

pub fn report_csv(report: &DriftReport) -> String {
    let mut s = String::from("window,delta_h\n");
    for (i, d) in report.delta_h.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_num(*d));
    }
    s
}

pub fn corrections_csv(corr: &[Correction]) -> String {
    let mut s = String::from("t,symbol,dw,dh\n");
    for c in corr {
        let _ = writeln!(s, "{},{},{},{}", fmt_num(c.t), c.symbol.as_char(), fmt_num(c.dw), fmt_num(c.dh));
    }
    s
}

pub fn verdict(out: &RunOutput) -> String {
    let r = &out.report;
    let status = match &out.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::ReachedTarget => "reached_target".to_string(),
        RunStatus::Escaped { t, reason } => format!("escaped at t = {t:.6}: {reason}"),
        RunStatus::BudgetExhausted { t } => format!("budget_exhausted at t = {t:.6}"),
    };
    let mut s = String::new();
    let _ = writeln!(s, "run = {}", out.name);
    let _ = writeln!(s, "status = {status}");
    let _ = writeln!(s, "windows = {}", r.delta_h.len());
    let _ = writeln!(s, "mean_delta_h = {}", fmt_num(r.mean_delta_h));
    let _ = writeln!(s, "slope = {}", fmt_num(r.slope));
    let _ = writeln!(s, "r2 = {}", fmt_num(r.r2));
    let _ = writeln!(s, "monotone_fraction = {}", fmt_num(r.monotone_fraction));
    let _ = writeln!(s, "bound = {}", fmt_num(r.bound));
    let _ = writeln!(s, "bound_met = {}", r.bound_met);
    let _ = writeln!(s, "budget = {}", fmt_num(r.budget));
    let _ = writeln!(s, "budget_ratio = {}", fmt_num(r.budget_ratio()));
    let _ = writeln!(s, "budget_ok = {}", r.budget_ok);
    let _ = writeln!(s, "corrections = {}", r.corrections);
    let _ = writeln!(s, "pass = {}", out.passed());
    s
}

/// One-page plot of `h(t)` with the fitted line and the bound slope.
pub fn drift_svg(trace: &EnergyTrace, report: &DriftReport) -> String {
    let (w, h) = (640.0, 400.0);
    let (t0, t1) = (trace.t.first().copied().unwrap_or(0.0), trace.t.last().copied().unwrap_or(1.0));
    let hmin = trace.h.iter().copied().fold(f64::INFINITY, f64::min);
    let hmax = trace.h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hmax > hmin { hmax - hmin } else { 1.0 };
    let tspan = if t1 > t0 { t1 - t0 } else { 1.0 };
    let px = |t: f64| 50.0 + (t - t0) / tspan * (w - 70.0);
    let py = |v: f64| h - 40.0 - (v - hmin) / span * (h - 70.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut pts = String::new();
    let stride = (trace.len() / 2000).max(1);
    for i in (0..trace.len()).step_by(stride) {
        let _ = write!(pts, "{:.2},{:.2} ", px(trace.t[i]), py(trace.h[i]));
    }
    let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="1" points="{pts}"/>"#);
    let fit = |t: f64| report.intercept + report.slope * t;
    let _ = writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="red"/>"#, px(t0), py(fit(t0)), px(t1), py(fit(t1)));
    let bslope = report.bound / report.window.max(1e-300);
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="blue" stroke-dasharray="4 3"/>"#,
        px(t0),
        py(fit(t0)),
        px(t1),
        py(fit(t0) + bslope * (t1 - t0))
    );
    let _ = writeln!(s, r#"<text x="50" y="20" font-size="12">h(t): mean gain per period {:.3e}, bound {:.3e}, R2 {:.4}</text>"#, report.mean_delta_h, report.bound, report.r2);
    let _ = writeln!(s, "</svg>");
    s
}
