//! Stored past of the oscillator and the retarded self-interaction integral
//! `I(t) = int_0^2 k(X(t - s)) P(s) ds`.

use super::dop853::{DenseStep, StepperOptions};
use super::{integrate_shortened, OscState, Oscillator, Phase, DIM};
use crate::error::{Error, Result};
use crate::field::{kernel_eval, kernel_partial, DELAY, KERNEL_COEFFS};
use crate::potential::InteractionCoefficient;
use crate::quad::{gauss16, integrate16};
use std::ops::ControlFlow;

const TIME_TOL: f64 = 1e-12;

/// Piecewise dense representation of the oscillator over a time interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistorySegment {
    pieces: Vec<DenseStep<DIM>>,
}

impl HistorySegment {
    /// Builds a segment from contiguous steps in any order and orientation.
    pub fn from_steps(mut pieces: Vec<DenseStep<DIM>>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InsufficientData("empty history".into()));
        }
        pieces.sort_by(|a, b| a.interval().0.total_cmp(&b.interval().0));
        for w in pieces.windows(2) {
            if (w[0].interval().1 - w[1].interval().0).abs() > TIME_TOL * w[1].interval().0.abs().max(1.0) {
                return Err(Error::InsufficientData("history pieces are not contiguous".into()));
            }
        }
        Ok(HistorySegment { pieces })
    }

    pub fn pieces(&self) -> &[DenseStep<DIM>] {
        &self.pieces
    }

    pub fn t_start(&self) -> f64 {
        self.pieces[0].interval().0
    }

    pub fn t_end(&self) -> f64 {
        self.pieces.last().unwrap().interval().1
    }

    pub fn covers(&self, a: f64, b: f64) -> bool {
        let tol = TIME_TOL * b.abs().max(1.0);
        a >= self.t_start() - tol && b <= self.t_end() + tol
    }

    fn index(&self, t: f64) -> usize {
        let j = self.pieces.partition_point(|p| p.interval().1 < t);
        j.min(self.pieces.len() - 1)
    }

    pub fn eval(&self, t: f64) -> Result<Phase> {
        if !self.covers(t, t) {
            return Err(Error::HistoryTooShort(t));
        }
        Ok(self.pieces[self.index(t)].eval(t))
    }

    /// State at the right end of the segment.
    pub fn end_state(&self) -> OscState {
        let t = self.t_end();
        OscState::from_phase(t, &self.pieces.last().unwrap().eval(t))
    }

    /// Appends steps that continue the segment forward in time.
    pub fn extend(&mut self, steps: impl IntoIterator<Item = DenseStep<DIM>>) {
        self.pieces.extend(steps);
    }
}

/// Direct evaluation of `I(t)` with a 16-point Gauss rule on every piece.
pub fn delay_integral(history: &HistorySegment, coupling: &InteractionCoefficient, t: f64) -> Result<f64> {
    if !history.covers(t - DELAY, t) {
        return Err(Error::HistoryTooShort(t - DELAY));
    }
    let mut total = 0.0;
    for p in history.pieces() {
        let (lo, hi) = p.interval();
        let a = lo.max(t - DELAY);
        let b = hi.min(t);
        if b <= a {
            continue;
        }
        total += integrate16(a, b, |tau| {
            let x = p.eval(tau);
            coupling.value([x[0], x[1]]) * kernel_eval((t - tau).clamp(0.0, DELAY))
        });
    }
    Ok(total)
}

/// History produced by running the uncoupled flow backward over one delay window.
pub fn backward_history(osc: &Oscillator, state: &OscState, opts: StepperOptions) -> Result<HistorySegment> {
    let free = osc.with_eps(0.0);
    let mut steps = Vec::new();
    integrate_shortened(&free, state, state.t - DELAY, opts, |s| {
        steps.push(s.clone());
        ControlFlow::Continue(())
    })?;
    HistorySegment::from_steps(steps)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Append-only store of past steps with running moments of `k(X)`, giving
/// `I(t)` in logarithmic time for the method of steps.
#[derive(Debug, Clone)]
pub struct DelayMemory {
    coupling: InteractionCoefficient,
    steps: Vec<DenseStep<DIM>>,
    bounds: Vec<(f64, f64)>,
    /// Moments `int k(X(tau)) (tau - lo)^b dtau` of each piece.
    local: Vec<[f64; 5]>,
    /// Prefix sums of moments about `origin`.
    prefix: Vec<[f64; 5]>,
    origin: f64,
    k_end: f64,
}

impl DelayMemory {
    pub fn new(coupling: InteractionCoefficient, history: &HistorySegment) -> Self {
        let mut m = DelayMemory {
            coupling,
            steps: Vec::new(),
            bounds: Vec::new(),
            local: Vec::new(),
            prefix: vec![[0.0; 5]],
            origin: history.t_start(),
            k_end: 0.0,
        };
        for p in history.pieces() {
            m.push(p.clone());
        }
        m
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.bounds[0].0
    }

    pub fn t_end(&self) -> f64 {
        self.bounds.last().unwrap().1
    }

    pub fn steps(&self) -> &[DenseStep<DIM>] {
        &self.steps
    }

    fn shifted(&self, lo: f64, local: &[f64; 5]) -> [f64; 5] {
        let d = lo - self.origin;
        let mut out = [0.0; 5];
        for (b, o) in out.iter_mut().enumerate() {
            for (i, l) in local.iter().enumerate().take(b + 1) {
                *o += binom(b, i) * d.powi((b - i) as i32) * l;
            }
        }
        out
    }

    /// Appends a step that starts where the stored past ends.
    pub fn push(&mut self, step: DenseStep<DIM>) {
        let (lo, hi) = step.interval();
        let (x, w) = gauss16();
        let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut local = [0.0; 5];
        for i in 0..16 {
            let tau = c + r * x[i];
            let s = step.eval(tau);
            let kv = self.coupling.value([s[0], s[1]]) * w[i] * r;
            let u = tau - lo;
            let mut pw = 1.0;
            for l in local.iter_mut() {
                *l += kv * pw;
                pw *= u;
            }
        }
        let sh = self.shifted(lo, &local);
        let last = *self.prefix.last().unwrap();
        self.prefix.push(std::array::from_fn(|b| last[b] + sh[b]));
        let xe = step.eval(hi);
        self.k_end = self.coupling.value([xe[0], xe[1]]);
        self.steps.push(step);
        self.bounds.push((lo, hi));
        self.local.push(local);
    }

    /// Drops the newest pieces so that `len() == n`.
    pub fn truncate(&mut self, n: usize) {
        self.steps.truncate(n);
        self.bounds.truncate(n);
        self.local.truncate(n);
        self.prefix.truncate(n + 1);
        if let Some(s) = self.steps.last() {
            let xe = s.eval(self.bounds[n - 1].1);
            self.k_end = self.coupling.value([xe[0], xe[1]]);
        }
    }

    /// Forgets pieces that end before `t_min` and rebases the running moments.
    pub fn trim(&mut self, t_min: f64) {
        let drop = self.bounds.partition_point(|b| b.1 <= t_min);
        if drop == 0 || drop >= self.steps.len() {
            return;
        }
        self.steps.drain(..drop);
        self.bounds.drain(..drop);
        self.local.drain(..drop);
        self.origin = self.bounds[0].0;
        self.prefix.clear();
        self.prefix.push([0.0; 5]);
        for j in 0..self.steps.len() {
            let sh = self.shifted(self.bounds[j].0, &self.local[j]);
            let last = *self.prefix.last().unwrap();
            self.prefix.push(std::array::from_fn(|b| last[b] + sh[b]));
        }
    }

    /// State at a stored time.
    pub fn eval(&self, t: f64) -> Result<Phase> {
        let tol = TIME_TOL * t.abs().max(1.0);
        if t < self.t_start() - tol || t > self.t_end() + tol {
            return Err(Error::HistoryTooShort(t));
        }
        let j = self.bounds.partition_point(|b| b.1 < t).min(self.steps.len() - 1);
        Ok(self.steps[j].eval(t))
    }

    /// `I(t)` for `t` at or beyond the stored past; the part of the window
    /// after the stored past is interpolated linearly towards `k_now`.
    pub fn integral(&self, t: f64, k_now: f64) -> Result<f64> {
        let a = t - DELAY;
        let tol = TIME_TOL * t.abs().max(1.0);
        if a < self.t_start() - tol {
            return Err(Error::HistoryTooShort(a));
        }
        let te = self.t_end();
        if t < te - tol {
            return self.integral_inside(t);
        }
        let n = self.steps.len();
        let j = self.bounds.partition_point(|b| b.1 <= a).min(n - 1);
        let mut m = [0.0; 5];
        for (b, mb) in m.iter_mut().enumerate() {
            *mb = self.prefix[n][b] - self.prefix[j + 1][b];
        }
        let (lo_j, hi_j) = self.bounds[j];
        let from = a.max(lo_j);
        if hi_j > from {
            let step = &self.steps[j];
            let (x, w) = gauss16();
            let (c, r) = (0.5 * (from + hi_j), 0.5 * (hi_j - from));
            for i in 0..16 {
                let tau = c + r * x[i];
                let s = step.eval(tau);
                let kv = self.coupling.value([s[0], s[1]]) * w[i] * r;
                let u = tau - self.origin;
                let mut pw = 1.0;
                for mb in m.iter_mut() {
                    *mb += kv * pw;
                    pw *= u;
                }
            }
        }
        // P(t - tau) as a polynomial in u = tau - origin
        let tt = t - self.origin;
        let mut total = 0.0;
        for (b, mb) in m.iter().enumerate() {
            let mut d = 0.0;
            for (mm, c) in KERNEL_COEFFS.iter().enumerate().skip(b) {
                d += c * binom(mm, b) * tt.powi((mm - b) as i32);
            }
            if b % 2 == 1 {
                d = -d;
            }
            total += d * mb;
        }
        let gap = t - te;
        if gap > 0.0 {
            let (m0, m1) = kernel_partial(gap);
            total += k_now * m0 + (self.k_end - k_now) / gap * m1;
        }
        Ok(total)
    }

    fn integral_inside(&self, t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (step, &(lo, hi)) in self.steps.iter().zip(&self.bounds) {
            let a = lo.max(t - DELAY);
            let b = hi.min(t);
            if b <= a {
                continue;
            }
            total += integrate16(a, b, |tau| {
                let x = step.eval(tau);
                self.coupling.value([x[0], x[1]]) * kernel_eval((t - tau).clamp(0.0, DELAY))
            });
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::dde::DdeIntegrator;
    use crate::potential::{BilliardTable, PotentialModel};

    fn oscillator() -> Oscillator {
        Oscillator {
            potential: PotentialModel::singular(BilliardTable::default_table(), 10.0),
            coupling: InteractionCoefficient { a0: 0.3, a1: 1.0, a2: -0.5 },
            eps: 1e-2,
            omega: 1.0,
            a_omega: 1.0,
        }
    }

    #[test]
    fn constant_coupling_gives_kernel_mass() {
        let osc = Oscillator { coupling: InteractionCoefficient { a0: 2.0, a1: 0.0, a2: 0.0 }, ..oscillator() };
        let s = osc.state_at_energy([0.0, 0.1], [0.6, 0.8], 1.0, 0.0, 0.0).unwrap();
        let h = backward_history(&osc, &s, StepperOptions::default()).unwrap();
        let i = delay_integral(&h, &osc.coupling, 0.0).unwrap();
        assert!((i - 2.0 * crate::field::kernel_mass()).abs() < 1e-13);
        let m = DelayMemory::new(osc.coupling, &h);
        assert!((m.integral(0.0, 2.0).unwrap() - i).abs() < 1e-13);
    }

    #[test]
    fn memory_matches_direct_quadrature() {
        let osc = oscillator();
        let s = osc.state_at_energy([0.05, 0.1], [0.6, 0.8], 5.0, 0.3, 0.0).unwrap();
        let h = backward_history(&osc, &s, StepperOptions::default()).unwrap();
        assert!(delay_integral(&h, &osc.coupling, 0.5).is_err());
        let mut integ = DdeIntegrator::new(&osc, 1e-4, &h, StepperOptions::default()).unwrap();
        let mut steps = Vec::new();
        while integ.t() < 6.0 {
            steps.push(integ.step(Some(6.0)).unwrap());
            integ.trim();
        }
        let mut full = h.clone();
        full.extend(steps);
        for &t in &[5.2, 5.7, 5.99, 6.0] {
            let direct = delay_integral(&full, &osc.coupling, t).unwrap();
            let x = full.eval(t).unwrap();
            let fast = integ.sys.memory.integral(t, osc.coupling.value([x[0], x[1]])).unwrap();
            assert!((direct - fast).abs() < 1e-12, "{t}: {direct} {fast}");
        }
    }

    #[test]
    fn checkpoint_restores_exactly() {
        let osc = oscillator();
        let s = osc.state_at_energy([0.05, 0.1], [0.6, 0.8], 5.0, 0.3, 0.0).unwrap();
        let h = backward_history(&osc, &s, StepperOptions::default()).unwrap();
        let mut integ = DdeIntegrator::new(&osc, 1e-2, &h, StepperOptions::default()).unwrap();
        for _ in 0..5 {
            integ.step(None).unwrap();
        }
        let cp = integ.checkpoint();
        let mut a = Vec::new();
        for _ in 0..10 {
            a.push(integ.step(None).unwrap().end());
        }
        integ.restore(&cp);
        for x in a {
            assert_eq!(integ.step(None).unwrap().end(), x);
        }
    }
}
