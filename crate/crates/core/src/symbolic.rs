//! Symbolic dynamics near the heteroclinic cycle: transverse sections,
//! numerical Poincaré maps, cross-form models and orbits with a prescribed code.

use crate::billiard::{hyperbolicity, Heteroclinic, Mat2};
use crate::dynamics::{integrate_shortened, DenseStep, OscState, Oscillator, Phase, StepperOptions, DIM};
use crate::error::{Error, Result};
use crate::potential::{BilliardTable, Vec2};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::ops::ControlFlow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    A,
    B,
}

impl Symbol {
    pub fn index(self) -> usize {
        match self {
            Symbol::A => 0,
            Symbol::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Symbol {
        if i == 0 {
            Symbol::A
        } else {
            Symbol::B
        }
    }

    pub fn other(self) -> Symbol {
        match self {
            Symbol::A => Symbol::B,
            Symbol::B => Symbol::A,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::A => 'a',
            Symbol::B => 'b',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Closure {
    Periodic,
    FreeEnds,
}

/// Finite word over `{a, b}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolSequence {
    pub symbols: Vec<Symbol>,
    pub closure: Closure,
}

impl SymbolSequence {
    pub fn parse(word: &str, closure: Closure) -> Result<Self> {
        let symbols = word
            .chars()
            .map(|c| match c {
                'a' => Ok(Symbol::A),
                'b' => Ok(Symbol::B),
                _ => Err(Error::Domain(format!("symbol '{c}' is not in {{a, b}}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if symbols.is_empty() {
            return Err(Error::Domain("empty code".into()));
        }
        Ok(SymbolSequence { symbols, closure })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

impl fmt::Display for SymbolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.symbols {
            write!(f, "{}", s.as_char())?;
        }
        Ok(())
    }
}

/// Line section `n . (q - anchor) = 0` crossed with `n . p > 0`, carrying
/// eigen-coordinates `(u, w)` of the return map of its periodic orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub symbol: Symbol,
    pub anchor: Vec2,
    pub normal: Vec2,
    pub tangent: Vec2,
    /// Half-width of the patch in `(u, w)`.
    pub patch: f64,
    /// Raw coordinates `(zeta, psi)` of the periodic orbit.
    pub fixed: [f64; 2],
    /// Columns: stable and unstable directions in raw coordinates.
    pub basis: Mat2,
    inverse: Mat2,
    /// Expanding multiplier of the return map.
    pub lambda: f64,
    /// Return time of the periodic orbit.
    pub period: f64,
    pub h_ref: f64,
}

impl CrossSection {
    pub fn new(symbol: Symbol, anchor: Vec2, normal: Vec2, patch: f64) -> Self {
        let l = normal[0].hypot(normal[1]);
        let n = [normal[0] / l, normal[1] / l];
        CrossSection {
            symbol,
            anchor,
            normal: n,
            tangent: [-n[1], n[0]],
            patch,
            fixed: [0.0, 0.0],
            basis: [[1.0, 0.0], [0.0, 1.0]],
            inverse: [[1.0, 0.0], [0.0, 1.0]],
            lambda: 1.0,
            period: 0.0,
            h_ref: 0.0,
        }
    }

    #[inline]
    pub fn signed_distance(&self, x: &Phase) -> f64 {
        self.normal[0] * (x[0] - self.anchor[0]) + self.normal[1] * (x[1] - self.anchor[1])
    }

    /// `(zeta, psi)`: offset along the section and direction relative to the normal.
    pub fn raw(&self, x: &Phase) -> [f64; 2] {
        let zeta = self.tangent[0] * (x[0] - self.anchor[0]) + self.tangent[1] * (x[1] - self.anchor[1]);
        let pn = self.normal[0] * x[2] + self.normal[1] * x[3];
        let pt = self.tangent[0] * x[2] + self.tangent[1] * x[3];
        [zeta, pt.atan2(pn)]
    }

    pub fn raw_to_uw(&self, raw: [f64; 2]) -> [f64; 2] {
        let d = [raw[0] - self.fixed[0], raw[1] - self.fixed[1]];
        [
            self.inverse[0][0] * d[0] + self.inverse[0][1] * d[1],
            self.inverse[1][0] * d[0] + self.inverse[1][1] * d[1],
        ]
    }

    pub fn uw_to_raw(&self, uw: [f64; 2]) -> [f64; 2] {
        [
            self.fixed[0] + self.basis[0][0] * uw[0] + self.basis[0][1] * uw[1],
            self.fixed[1] + self.basis[1][0] * uw[0] + self.basis[1][1] * uw[1],
        ]
    }

    pub fn uw(&self, x: &Phase) -> [f64; 2] {
        self.raw_to_uw(self.raw(x))
    }

    pub fn in_patch(&self, uw: [f64; 2]) -> bool {
        uw[0].abs() <= self.patch && uw[1].abs() <= self.patch
    }

    /// Point on the section with raw coordinates `raw` at energy `h`.
    pub fn state_raw(&self, osc: &Oscillator, raw: [f64; 2], h: f64, theta: f64, t: f64) -> Option<OscState> {
        let q = [self.anchor[0] + raw[0] * self.tangent[0], self.anchor[1] + raw[0] * self.tangent[1]];
        let (c, s) = (raw[1].cos(), raw[1].sin());
        let dir = [c * self.normal[0] + s * self.tangent[0], c * self.normal[1] + s * self.tangent[1]];
        osc.state_at_energy(q, dir, h, theta, t)
    }

    pub fn state_uw(&self, osc: &Oscillator, uw: [f64; 2], h: f64, theta: f64, t: f64) -> Option<OscState> {
        self.state_raw(osc, self.uw_to_raw(uw), h, theta, t)
    }
}

/// Section crossing found on a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub section: usize,
    pub symbol: Symbol,
    pub t: f64,
    pub state: Phase,
    pub uw: [f64; 2],
    pub in_patch: bool,
}

const GRAZING_TOL: f64 = 1e-8;

fn refine_root(step: &DenseStep<DIM>, sec: &CrossSection, mut a: f64, mut b: f64) -> f64 {
    let g = |t: f64| sec.signed_distance(&step.eval(t));
    let (mut fa, mut fb) = (g(a), g(b));
    let mut side = 0;
    for _ in 0..200 {
        if (b - a).abs() < 1e-15 * (1.0 + a.abs()) {
            break;
        }
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a.min(b) && c < a.max(b)) {
            c = 0.5 * (a + b);
        }
        let fc = g(c);
        if fc == 0.0 {
            return c;
        }
        if (fc > 0.0) == (fb > 0.0) {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    0.5 * (a + b)
}

/// All crossings of `sections` inside one dense step, in time order.
pub fn detect_crossings(step: &DenseStep<DIM>, sections: &[CrossSection]) -> Vec<Crossing> {
    const SUB: usize = 4;
    let mut out = Vec::new();
    let times: Vec<f64> = (0..=SUB).map(|k| step.t0 + step.h * k as f64 / SUB as f64).collect();
    for (si, sec) in sections.iter().enumerate() {
        let g: Vec<f64> = times.iter().map(|&t| sec.signed_distance(&step.eval(t))).collect();
        for k in 0..SUB {
            let forward = step.h > 0.0;
            let (g0, g1) = (g[k], g[k + 1]);
            let crosses = if forward { g0 < 0.0 && g1 >= 0.0 } else { g0 >= 0.0 && g1 < 0.0 };
            if !crosses {
                continue;
            }
            let t = refine_root(step, sec, times[k], times[k + 1]);
            let x = step.eval(t);
            let pn = sec.normal[0] * x[2] + sec.normal[1] * x[3];
            let speed = x[2].hypot(x[3]);
            if pn <= GRAZING_TOL * speed.max(1e-300) {
                continue;
            }
            let uw = sec.uw(&x);
            out.push(Crossing { section: si, symbol: sec.symbol, t, state: x, uw, in_patch: sec.in_patch(uw) });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

/// Which crossing ends a Poincaré map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// First crossing of the given section line, inside the patch or not.
    Line(usize),
    /// First crossing inside any patch.
    AnyPatch,
}

/// Integrates the shortened flow from `start` to the first crossing selected by `target`.
pub fn next_crossing(
    osc: &Oscillator,
    sections: &[CrossSection],
    start: &OscState,
    target: Target,
    max_time: f64,
    opts: StepperOptions,
) -> Result<Crossing> {
    let mut found = None;
    let t_min = start.t + 1e-9;
    integrate_shortened(osc, start, start.t + max_time, opts, |step| {
        for c in detect_crossings(step, sections) {
            if c.t <= t_min {
                continue;
            }
            let hit = match target {
                Target::Line(i) => c.section == i,
                Target::AnyPatch => c.in_patch,
            };
            if hit {
                found = Some(c);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    found.ok_or_else(|| Error::NoConvergence(format!("left neighborhood: no crossing within t = {max_time}")))
}

/// Event-to-event Poincaré map: from `start` to the next in-patch crossing.
pub fn numeric_poincare(osc: &Oscillator, sections: &[CrossSection], start: &OscState, max_time: f64, opts: StepperOptions) -> Result<Crossing> {
    next_crossing(osc, sections, start, Target::AnyPatch, max_time, opts)
}

/// Default integration options for section maps.
pub fn section_opts() -> StepperOptions {
    StepperOptions { rtol: 1e-12, atol: 1e-12, ..Default::default() }
}

pub(crate) fn line_return(osc: &Oscillator, sec: &[CrossSection], idx: usize, raw: [f64; 2], h: f64) -> Result<([f64; 2], f64)> {
    let s = sec[idx].state_raw(osc, raw, h, 0.0, 0.0).ok_or_else(|| Error::Domain("section point above energy".into()))?;
    let c = next_crossing(osc, sec, &s, Target::Line(idx), 50.0 / (2.0 * h).sqrt().max(1e-3), section_opts())?;
    Ok((sec[idx].raw(&c.state), c.t))
}

/// Locates the periodic orbit through section `idx` at energy `h` and
/// installs its eigen-coordinates.
pub fn calibrate_section(osc: &Oscillator, sections: &mut [CrossSection], idx: usize, h: f64) -> Result<()> {
    let free = osc.with_eps(0.0);
    let mut x = sections[idx].fixed;
    let d = 1e-7;
    let jac = |x: [f64; 2], secs: &[CrossSection]| -> Result<Mat2> {
        let mut m = [[0.0; 2]; 2];
        for col in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += d;
            xm[col] -= d;
            let (rp, _) = line_return(&free, secs, idx, xp, h)?;
            let (rm, _) = line_return(&free, secs, idx, xm, h)?;
            for row in 0..2 {
                m[row][col] = (rp[row] - rm[row]) / (2.0 * d);
            }
        }
        Ok(m)
    };
    for _ in 0..20 {
        let (r, _) = line_return(&free, sections, idx, x, h)?;
        let res = [r[0] - x[0], r[1] - x[1]];
        if res[0].abs().max(res[1].abs()) < 1e-13 {
            break;
        }
        let j = jac(x, sections)?;
        let a = [[j[0][0] - 1.0, j[0][1]], [j[1][0], j[1][1] - 1.0]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let dx = [(-a[1][1] * res[0] + a[0][1] * res[1]) / det, (a[1][0] * res[0] - a[0][0] * res[1]) / det];
        x = [x[0] + dx[0], x[1] + dx[1]];
    }
    let (r, period) = line_return(&free, sections, idx, x, h)?;
    if (r[0] - x[0]).abs().max((r[1] - x[1]).abs()) > 1e-10 {
        return Err(Error::NoConvergence("periodic orbit on section not found".into()));
    }
    let hy = hyperbolicity(&jac(x, sections)?)?;
    let sec = &mut sections[idx];
    sec.fixed = x;
    sec.basis = [[hy.stable[0], hy.unstable[0]], [hy.stable[1], hy.unstable[1]]];
    let det = sec.basis[0][0] * sec.basis[1][1] - sec.basis[0][1] * sec.basis[1][0];
    sec.inverse = [[sec.basis[1][1] / det, -sec.basis[0][1] / det], [-sec.basis[1][0] / det, sec.basis[0][0] / det]];
    sec.lambda = hy.lambda.abs();
    sec.period = period;
    sec.h_ref = h;
    Ok(())
}

/// Sections of the default table: `Sigma_a` across the horizontal orbit at
/// `y = offset_a`, `Sigma_b` across the vertical orbit at `z = offset_b`.
pub fn default_sections(table: &BilliardTable, offset_a: f64, offset_b: f64) -> Vec<CrossSection> {
    let r = 1e-2 * table.diameter();
    let yb = table.arcs[1].center[0];
    vec![
        CrossSection::new(Symbol::A, [offset_a, 0.0], [1.0, 0.0], r),
        CrossSection::new(Symbol::B, [yb, offset_b], [0.0, 1.0], r),
    ]
}

/// Calibrated default sections at energy `h`.
pub fn calibrated_sections(osc: &Oscillator, h: f64, offset_a: f64, offset_b: f64) -> Result<Vec<CrossSection>> {
    let mut s = default_sections(&osc.potential.table, offset_a, offset_b);
    calibrate_section(osc, &mut s, 0, h)?;
    calibrate_section(osc, &mut s, 1, h)?;
    Ok(s)
}

/// Label word of the in-patch crossings.
pub fn encode(events: &[Crossing]) -> Result<SymbolSequence> {
    let symbols: Vec<Symbol> = events.iter().filter(|c| c.in_patch).map(|c| c.symbol).collect();
    if symbols.is_empty() {
        return Err(Error::NoCrossings);
    }
    Ok(SymbolSequence { symbols, closure: Closure::FreeEnds })
}

/// Bivariate cubic polynomial in scaled variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Cubic {
    pub coeffs: [f64; 10],
    pub scale: f64,
}

const EXPONENTS: [(i32, i32); 10] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];

impl Cubic {
    pub fn eval(&self, u: f64, w: f64) -> f64 {
        let (x, y) = (u / self.scale, w / self.scale);
        EXPONENTS.iter().zip(&self.coeffs).map(|(&(a, b), c)| c * x.powi(a) * y.powi(b)).sum::<f64>() * self.scale
    }

    pub fn gradient(&self, u: f64, w: f64) -> [f64; 2] {
        let (x, y) = (u / self.scale, w / self.scale);
        let mut g = [0.0; 2];
        for (&(a, b), c) in EXPONENTS.iter().zip(&self.coeffs) {
            if a > 0 {
                g[0] += c * a as f64 * x.powi(a - 1) * y.powi(b);
            }
            if b > 0 {
                g[1] += c * b as f64 * x.powi(a) * y.powi(b - 1);
            }
        }
        g
    }

    fn fit(samples: &[([f64; 2], f64)], scale: f64) -> Result<Self> {
        let n = samples.len();
        let a = DMatrix::from_fn(n, 10, |i, j| {
            let (x, y) = (samples[i].0[0] / scale, samples[i].0[1] / scale);
            x.powi(EXPONENTS[j].0) * y.powi(EXPONENTS[j].1)
        });
        let b = DVector::from_iterator(n, samples.iter().map(|s| s.1 / scale));
        let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::NoConvergence(e.to_string()))?;
        let mut coeffs = [0.0; 10];
        coeffs.copy_from_slice(sol.as_slice());
        Ok(Cubic { coeffs, scale })
    }
}

/// Sampled transition `(u_i, w_i) -> (u_{i+1}, w_{i+1})` from `Sigma_c` to `Sigma_c'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSample {
    pub from: [f64; 2],
    pub to: [f64; 2],
    /// Flight time between the two crossings.
    pub time: f64,
}

/// Cross form `u' = f(u, w')`, `w = g(u, w')` of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossForm {
    pub from: Symbol,
    pub to: Symbol,
    pub f: Cubic,
    pub g: Cubic,
    /// Sup over the patch of the row-sum norm of the Jacobian of `(f, g)`.
    pub lambda: f64,
    /// Largest error on held-out samples.
    pub residual: f64,
    pub samples: usize,
    /// Mean flight time of the samples.
    pub mean_time: f64,
}

impl CrossForm {
    pub fn apply(&self, u: f64, w_next: f64) -> (f64, f64) {
        (self.f.eval(u, w_next), self.g.eval(u, w_next))
    }

    /// Forward map `(u, w) -> (u', w')`, inverting `g` in its second argument by Newton.
    pub fn forward(&self, u: f64, w: f64, guess: f64) -> Option<[f64; 2]> {
        let mut wn = guess;
        for _ in 0..50 {
            let r = self.g.eval(u, wn) - w;
            let d = self.g.gradient(u, wn)[1];
            if d == 0.0 || !d.is_finite() {
                return None;
            }
            let step = r / d;
            wn -= step;
            if step.abs() <= 1e-15 * (1.0 + wn.abs()) {
                return Some([self.f.eval(u, wn), wn]);
            }
        }
        None
    }
}

/// Fits a cross form to at least 100 sampled transitions; every fifth sample is held out.
pub fn fit_cross_form(from: Symbol, to: Symbol, samples: &[TransitionSample], patch: f64) -> Result<CrossForm> {
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!("{} transition samples, need 100", samples.len())));
    }
    let (mut train_f, mut train_g, mut held) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if i % 5 == 4 {
            held.push(*s);
        } else {
            train_f.push(([s.from[0], s.to[1]], s.to[0]));
            train_g.push(([s.from[0], s.to[1]], s.from[1]));
        }
    }
    let f = Cubic::fit(&train_f, patch)?;
    let g = Cubic::fit(&train_g, patch)?;
    let residual = held
        .iter()
        .map(|s| (f.eval(s.from[0], s.to[1]) - s.to[0]).abs().max((g.eval(s.from[0], s.to[1]) - s.from[1]).abs()))
        .fold(0.0, f64::max);
    let mut lambda: f64 = 0.0;
    let m = 24;
    for i in 0..=m {
        for j in 0..=m {
            let u = patch * (2.0 * i as f64 / m as f64 - 1.0);
            let w = patch * (2.0 * j as f64 / m as f64 - 1.0);
            let (gf, gg) = (f.gradient(u, w), g.gradient(u, w));
            lambda = lambda.max(gf[0].abs() + gf[1].abs()).max(gg[0].abs() + gg[1].abs());
        }
    }
    let mean_time = samples.iter().map(|s| s.time).sum::<f64>() / samples.len() as f64;
    let model = CrossForm { from, to, f, g, lambda, residual, samples: samples.len(), mean_time };
    if lambda >= 1.0 {
        return Err(Error::Domain(format!("hyperbolicity violated: cross-form norm {lambda:.3} for {}{}", from.as_char(), to.as_char())));
    }
    Ok(model)
}

/// Cross forms of all four transitions together with their sections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFormModel {
    pub sections: Vec<CrossSection>,
    /// Indexed by `from.index() * 2 + to.index()`.
    pub maps: Vec<CrossForm>,
    /// Centers of the `w` strips leaving each section towards the other one.
    pub exit_strips: [(f64, f64); 2],
    pub h_ref: f64,
}

impl CrossFormModel {
    pub fn map(&self, from: Symbol, to: Symbol) -> &CrossForm {
        &self.maps[from.index() * 2 + to.index()]
    }

    pub fn lambda(&self) -> f64 {
        self.maps.iter().map(|m| m.lambda).fold(0.0, f64::max)
    }
}

fn sample_map(osc: &Oscillator, secs: &[CrossSection], from: usize, uw: [f64; 2], h: f64) -> Result<Crossing> {
    let s = secs[from].state_uw(osc, uw, h, 0.0, 0.0).ok_or_else(|| Error::Domain("section point above energy".into()))?;
    numeric_poincare(osc, secs, &s, transit_time(secs), section_opts())
}

fn transit_time(secs: &[CrossSection]) -> f64 {
    40.0 * secs[0].period.max(secs[1].period)
}

/// First crossing of `Sigma_to` with `|u| <= rho` after leaving `start`.
fn arrival_crossing(osc: &Oscillator, secs: &[CrossSection], start: &OscState, to: usize, rho: f64, max_time: f64) -> Result<Crossing> {
    let mut found = None;
    let t_min = start.t + 1e-9;
    integrate_shortened(osc, start, start.t + max_time, section_opts(), |step| {
        for c in detect_crossings(step, secs) {
            if c.t > t_min && c.section == to && c.uw[0].abs() <= rho {
                found = Some(c);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    found.ok_or_else(|| Error::NoConvergence(format!("left neighborhood: no crossing within t = {max_time}")))
}

/// `w` at the first crossing of `Sigma_to` with `|u| <= rho`, starting from `uw` on `Sigma_from`.
fn arrival_w(osc: &Oscillator, secs: &[CrossSection], from: usize, to: usize, uw: [f64; 2], h: f64, rho: f64) -> Option<[f64; 2]> {
    let s = secs[from].state_uw(osc, uw, h, 0.0, 0.0)?;
    arrival_crossing(osc, secs, &s, to, rho, transit_time(secs)).ok().map(|c| c.uw)
}

/// Solves `w` so that the orbit from `(u, w)` on `Sigma_from` arrives on
/// `Sigma_to` with `w = target`.
fn solve_entry(osc: &Oscillator, secs: &[CrossSection], from: usize, to: usize, u: f64, target: f64, guess: f64, h: f64) -> Option<(f64, [f64; 2])> {
    let rho = secs[to].patch;
    let f = |w: f64| arrival_w(osc, secs, from, to, [u, w], h, rho);
    let mut w = guess;
    let mut y = f(w)?;
    let d = 1e-10;
    let mut slope = (f(w + d)?[1] - y[1]) / d;
    let tol = 1e-6 * rho;
    for _ in 0..40 {
        let err = y[1] - target;
        if err.abs() < tol {
            return Some((w, y));
        }
        let wn = w - err / slope;
        let yn = f(wn)?;
        if (wn - w).abs() > 0.0 {
            let s = (yn[1] - y[1]) / (wn - w);
            if s.is_finite() && s != 0.0 {
                slope = s;
            }
        }
        w = wn;
        y = yn;
    }
    ((y[1] - target).abs() < tol).then_some((w, y))
}

/// `w` on `Sigma_from` (at `u = 0`) of the orbit that lands on the stable
/// manifold of `Sigma_to`, searched near `seed`.
fn locate_exit(osc: &Oscillator, secs: &[CrossSection], from: usize, to: usize, seed: f64, h: f64) -> Result<f64> {
    let rho = 3.0 * secs[to].patch;
    let g = |w: f64| arrival_w(osc, secs, from, to, [0.0, w], h, rho).map(|y| y[1]);
    let r = secs[from].patch;
    for widen in [0.2, 0.5, 1.0] {
        let lo = (seed.abs() * (1.0 - widen)).max(0.5 * r / secs[from].lambda) * seed.signum();
        let hi = (seed.abs() * (1.0 + widen)).min(r) * seed.signum();
        let n = 80;
        let pts: Vec<(f64, Option<f64>)> = (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).map(|w| (w, g(w))).collect();
        let mut best: Option<(f64, f64)> = None;
        for pair in pts.windows(2) {
            if let ((a, Some(ga)), (b, Some(gb))) = (pair[0], pair[1]) {
                if ga.signum() != gb.signum() {
                    let (mut a, mut b, mut ga) = (a, b, ga);
                    for _ in 0..60 {
                        let m = 0.5 * (a + b);
                        match g(m) {
                            Some(gm) if gm.signum() == ga.signum() => {
                                a = m;
                                ga = gm;
                            }
                            Some(_) => b = m,
                            None => break,
                        }
                    }
                    let w = 0.5 * (a + b);
                    if best.is_none_or(|(bw, _)| (w - seed).abs() < (bw - seed).abs()) {
                        best = Some((w, ga));
                    }
                }
            }
        }
        if let Some((w, _)) = best {
            return Ok(w);
        }
    }
    Err(Error::NoConvergence(format!("no transition {from} -> {to} near w = {seed:e}")))
}

/// Continues the exit point `w(u)` (arrival on `w = 0`) from `u = 0` to each of `us`.
fn follow_exit(osc: &Oscillator, secs: &[CrossSection], from: usize, to: usize, us: &[f64], w0: f64, h: f64) -> Result<Vec<f64>> {
    let (w_origin, _) = solve_entry(osc, secs, from, to, 0.0, 0.0, w0, h)
        .ok_or_else(|| Error::NoConvergence(format!("transition {from} -> {to} not resolved at u = 0")))?;
    let mut out = Vec::with_capacity(us.len());
    for &target in us {
        let (mut u, mut w, mut du) = (0.0, w_origin, target / 4.0);
        while (target - u).abs() > 0.0 {
            let un = if (target - u).abs() <= du.abs() { target } else { u + du };
            match solve_entry(osc, secs, from, to, un, 0.0, w, h) {
                Some((wn, _)) => {
                    u = un;
                    w = wn;
                }
                None if du.abs() > 1e-6 * secs[from].patch => du *= 0.5,
                None => return Err(Error::NoConvergence(format!("transition {from} -> {to} lost at u = {un:e}"))),
            }
        }
        out.push(w);
    }
    Ok(out)
}

/// Last point of a billiard heteroclinic on `Sigma_from` inside the patch, in `(u, w)`.
pub fn heteroclinic_seed(het: &Heteroclinic, sec: &CrossSection) -> Option<[f64; 2]> {
    let mut seed = None;
    for i in 0..het.bridge.min(het.points.len() - 1) {
        let (p0, p1) = (het.points[i], het.points[i + 1]);
        let g0 = sec.signed_distance(&[p0[0], p0[1], 0.0, 0.0, 0.0]);
        let g1 = sec.signed_distance(&[p1[0], p1[1], 0.0, 0.0, 0.0]);
        if g0 < 0.0 && g1 >= 0.0 {
            let tau = -g0 / (g1 - g0);
            let d = [p1[0] - p0[0], p1[1] - p0[1]];
            let x = [p0[0] + tau * d[0], p0[1] + tau * d[1], d[0], d[1], 0.0];
            let uw = sec.uw(&x);
            if sec.in_patch(uw) {
                seed = Some(uw);
            }
        }
    }
    seed
}

/// Samples all four transitions at energy `h` on a grid in `(u, w')` and fits
/// their cross forms. `seeds[c]` is the exit point of the billiard heteroclinic
/// leaving `Sigma_c`.
pub fn build_cross_form_model(osc: &Oscillator, sections: &[CrossSection], h: f64, seeds: [[f64; 2]; 2], grid: usize) -> Result<CrossFormModel> {
    let free = osc.with_eps(0.0);
    let secs = sections.to_vec();
    let mut maps = Vec::new();
    let mut strips = [(0.0, 0.0); 2];
    for from in 0..2 {
        for to in 0..2 {
            let r = secs[from].patch;
            let w_exit = if from == to { 0.0 } else { locate_exit(&free, &secs, from, to, seeds[from][1], h)? };
            let us: Vec<f64> = (0..grid).map(|i| r * (2.0 * (i as f64 + 0.5) / grid as f64 - 1.0)).collect();
            let exits = follow_exit(&free, &secs, from, to, &us, w_exit, h)?;
            let mut samples = Vec::new();
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for (&u, &w0) in us.iter().zip(&exits) {
                let mut guess = w0;
                for j in 0..grid {
                    let target = r * (2.0 * (j as f64 + 0.5) / grid as f64 - 1.0);
                    let Some((w, _)) = solve_entry(&free, &secs, from, to, u, target, guess, h) else { continue };
                    guess = w;
                    if let Ok(c) = sample_map(&free, &secs, from, [u, w], h) {
                        if c.section == to && secs[from].in_patch([u, w]) {
                            lo = lo.min(w);
                            hi = hi.max(w);
                            samples.push(TransitionSample { from: [u, w], to: c.uw, time: c.t });
                        }
                    }
                }
            }
            if from != to {
                strips[from] = (lo, hi);
            }
            maps.push(fit_cross_form(Symbol::from_index(from), Symbol::from_index(to), &samples, r)?);
        }
    }
    Ok(CrossFormModel { sections: secs, maps, exit_strips: strips, h_ref: h })
}

/// Result of the sequence-space contraction on the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRun {
    pub nodes: Vec<[f64; 2]>,
    /// Sup-norm change of each sweep.
    pub changes: Vec<f64>,
}

impl ContractionRun {
    /// Largest ratio of consecutive sweep changes above round-off.
    pub fn contraction_factor(&self) -> f64 {
        self.changes
            .windows(2)
            .filter(|w| w[0] > 1e-13)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }
}

/// Iterates `u_i <- f(u_{i-1}, w_i)`, `w_i <- g(u_i, w_{i+1})` for `code`.
/// Free ends hold `u_0 = u_start` and `w_last = w_end`.
pub fn contract_code(model: &CrossFormModel, code: &SymbolSequence, u_start: f64, w_end: f64, max_sweeps: usize) -> ContractionRun {
    contract_code_biased(model, code, u_start, w_end, &[[0.0; 2]; 4], max_sweeps)
}

/// As [`contract_code`] for the forward maps shifted by `bias[from * 2 + to]`.
pub fn contract_code_biased(model: &CrossFormModel, code: &SymbolSequence, u_start: f64, w_end: f64, bias: &[[f64; 2]; 4], max_sweeps: usize) -> ContractionRun {
    let n = code.len();
    let s = &code.symbols;
    let periodic = code.closure == Closure::Periodic;
    let mut x = vec![[0.0; 2]; n];
    if !periodic {
        x[0][0] = u_start;
        x[n - 1][1] = w_end;
    }
    let mut changes = Vec::new();
    for _ in 0..max_sweeps {
        let mut y = x.clone();
        for i in 0..n {
            let prev = if i > 0 { Some(i - 1) } else if periodic { Some(n - 1) } else { None };
            let next = if i + 1 < n { Some(i + 1) } else if periodic { Some(0) } else { None };
            if let Some(p) = prev {
                let b = bias[s[p].index() * 2 + s[i].index()];
                y[i][0] = model.map(s[p], s[i]).f.eval(x[p][0], x[i][1] - b[1]) + b[0];
            }
            if let Some(q) = next {
                let b = bias[s[i].index() * 2 + s[q].index()];
                y[i][1] = model.map(s[i], s[q]).g.eval(x[i][0], x[q][1] - b[1]);
            }
        }
        let change = x.iter().zip(&y).map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs())).fold(0.0, f64::max);
        x = y;
        changes.push(change);
        if change < 1e-15 {
            break;
        }
    }
    ContractionRun { nodes: x, changes }
}

/// Orbit with a prescribed code, as a chain of flow segments between section points.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedOrbit {
    pub code: SymbolSequence,
    /// Model-level solution used as the initial guess.
    pub model_nodes: Vec<[f64; 2]>,
    pub contraction: ContractionRun,
    /// Refined section points on the true flow.
    pub nodes: Vec<[f64; 2]>,
    /// Section crossings ending each segment (plus the initial point).
    pub events: Vec<Crossing>,
    /// Initial state of each flow segment.
    pub segment_starts: Vec<OscState>,
    /// Largest junction mismatch in `(u, w)`.
    pub mismatch: f64,
}

/// Junction tolerance of multiple shooting, relative to the patch size.
/// Transit maps stretch integration error by about `1e4`.
pub const SHOOTING_TOL: f64 = 1e-7;

/// Default cap on the code length for exact construction.
pub const CODE_LENGTH_CAP: usize = 64;

/// Builds the orbit with code `code` at energy `h` (shortened flow, phase
/// `theta0`) by contraction on the model followed by multiple shooting.
pub fn find_coded_orbit(osc: &Oscillator, model: &CrossFormModel, code: &SymbolSequence, h: f64, theta0: f64) -> Result<CodedOrbit> {
    find_coded_orbit_from(osc, model, code, 0.0, h, theta0, 0.0)
}

/// As [`find_coded_orbit`] with the first node held at `u = u_start` and time `t0`.
pub fn find_coded_orbit_from(osc: &Oscillator, model: &CrossFormModel, code: &SymbolSequence, u_start: f64, h: f64, theta0: f64, t0: f64) -> Result<CodedOrbit> {
    let n = code.len();
    if n > CODE_LENGTH_CAP {
        return Err(Error::Domain(format!("code length {n} exceeds cap {CODE_LENGTH_CAP}")));
    }
    let periodic = code.closure == Closure::Periodic;
    if n < 2 {
        return Err(Error::Domain("code needs at least two symbols".into()));
    }
    let contraction = contract_code(model, code, u_start, 0.0, 200);
    let secs = &model.sections;
    let s = &code.symbols;
    let tmax = transit_time(secs);
    let segs = if periodic { n } else { n - 1 };
    let mut x = contraction.nodes.clone();

    // segment map from node i; energy and phase are carried along the chain
    let run_segment = |i: usize, uw: [f64; 2], hh: f64, th: f64, t: f64| -> Result<Crossing> {
        let sec = &secs[s[i].index()];
        let st = sec.state_uw(osc, uw, hh, th, t).ok_or_else(|| Error::SingularOrbit("node above energy surface".into()))?;
        let expect = s[(i + 1) % n];
        arrival_crossing(osc, secs, &st, expect.index(), secs[expect.index()].patch, tmax)
    };
    // the converged chain must also hit the patches in the prescribed order
    let verify = |i: usize, start: &OscState, end: &Crossing| -> Result<()> {
        let c = numeric_poincare(osc, secs, start, tmax, section_opts())?;
        if c.symbol != s[(i + 1) % n] || (c.t - end.t).abs() > 1e-6 {
            return Err(Error::SingularOrbit(format!("segment {i} reached {} first", c.symbol.as_char())));
        }
        Ok(())
    };

    let mut mismatch = f64::MAX;
    let mut events = Vec::new();
    let mut segment_starts = Vec::new();
    for _iter in 0..30 {
        // forward sweep establishing energies and phases
        let mut starts = Vec::with_capacity(segs);
        let mut ends = Vec::with_capacity(segs);
        let (mut hh, mut th, mut t) = (h, theta0, t0);
        for i in 0..segs {
            starts.push((hh, th, t));
            let c = run_segment(i, x[i], hh, th, t)?;
            hh = osc.energy(&c.state);
            th = c.state[4];
            t = c.t;
            ends.push(c);
        }
        let res: Vec<[f64; 2]> = (0..segs)
            .map(|i| {
                let nx = x[(i + 1) % n];
                [ends[i].uw[0] - nx[0], ends[i].uw[1] - nx[1]]
            })
            .collect();
        mismatch = res.iter().map(|r| r[0].abs().max(r[1].abs())).fold(0.0, f64::max);
        if mismatch < SHOOTING_TOL * secs[0].patch {
            let first = secs[s[0].index()].state_uw(osc, x[0], h, theta0, t0).unwrap();
            events.clear();
            segment_starts = starts.iter().enumerate().map(|(i, &(hh, th, t))| secs[s[i].index()].state_uw(osc, x[i], hh, th, t).unwrap()).collect();
            for (i, st) in segment_starts.iter().enumerate() {
                verify(i, st, &ends[i])?;
            }
            events.push(Crossing {
                section: s[0].index(),
                symbol: s[0],
                t: t0,
                state: first.phase(),
                uw: x[0],
                in_patch: secs[s[0].index()].in_patch(x[0]),
            });
            events.extend(ends);
            break;
        }
        // Newton on the stacked junction conditions; unknowns: u_i, w_i (minus fixed ends)
        let unknowns: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| [(i, 0), (i, 1)])
            .filter(|&(i, c)| periodic || !((i == 0 && c == 0) || (i == n - 1 && c == 1)))
            .collect();
        let col_of = |i: usize, c: usize| unknowns.iter().position(|&k| k == (i, c));
        let m = 2 * segs;
        let mut jac = DMatrix::zeros(m, unknowns.len());
        let d = 1e-8;
        for i in 0..segs {
            let (hh, th, t) = starts[i];
            for c in 0..2 {
                if let Some(col) = col_of(i, c) {
                    let mut xp = x[i];
                    let mut xm = x[i];
                    xp[c] += d;
                    xm[c] -= d;
                    let cp = run_segment(i, xp, hh, th, t)?;
                    let cm = run_segment(i, xm, hh, th, t)?;
                    for r in 0..2 {
                        jac[(2 * i + r, col)] += (cp.uw[r] - cm.uw[r]) / (2.0 * d);
                    }
                }
                if let Some(col) = col_of((i + 1) % n, c) {
                    jac[(2 * i + c, col)] -= 1.0;
                }
            }
        }
        let rhs = DVector::from_iterator(m, res.iter().flat_map(|r| [-r[0], -r[1]]));
        let dx = jac
            .svd(true, true)
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::NoConvergence(e.to_string()))?;
        for (k, &(i, c)) in unknowns.iter().enumerate() {
            x[i][c] += dx[k];
        }
    }
    if events.is_empty() {
        return Err(Error::NoConvergence(format!("multiple shooting stalled at mismatch {mismatch:e}")));
    }
    Ok(CodedOrbit { code: code.clone(), model_nodes: contraction.nodes.clone(), contraction, nodes: x, events, segment_starts, mismatch })
}

/// Raw-coordinate return of the billiard flow to a section line, for
/// comparison with the smooth flow.
pub fn billiard_line_return(table: &BilliardTable, sec: &CrossSection, raw: [f64; 2], max_bounces: usize) -> Result<[f64; 2]> {
    use crate::billiard::{advance_billiard, BilliardState};
    let q = [sec.anchor[0] + raw[0] * sec.tangent[0], sec.anchor[1] + raw[0] * sec.tangent[1]];
    let (c, s) = (raw[1].cos(), raw[1].sin());
    let dir = [c * sec.normal[0] + s * sec.tangent[0], c * sec.normal[1] + s * sec.tangent[1]];
    let mut state = BilliardState { pos: q, dir };
    for _ in 0..max_bounces {
        let b = advance_billiard(table, &state, 1)?[0];
        // crossing on the flight from state.pos to b.point
        let g0 = sec.normal[0] * (state.pos[0] - sec.anchor[0]) + sec.normal[1] * (state.pos[1] - sec.anchor[1]);
        let g1 = sec.normal[0] * (b.point[0] - sec.anchor[0]) + sec.normal[1] * (b.point[1] - sec.anchor[1]);
        let pn = sec.normal[0] * state.dir[0] + sec.normal[1] * state.dir[1];
        if g0 < 0.0 && g1 >= 0.0 && pn > 0.0 {
            let tau = -g0 / pn;
            let x = [state.pos[0] + tau * state.dir[0], state.pos[1] + tau * state.dir[1], state.dir[0], state.dir[1], 0.0];
            return Ok(sec.raw(&x));
        }
        state = BilliardState { pos: b.point, dir: b.dir_out };
    }
    Err(Error::NoConvergence("billiard orbit did not return to the section".into()))
}
