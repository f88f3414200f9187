//! Oscillator dynamics: the shortened (delay-free) system, the delayed
//! system solved by the method of steps, and energy bookkeeping.

pub mod dde;
pub mod dop853;
pub mod history;
pub mod symplectic;

pub use dde::{integrate_dde, DdeCheckpoint, DdeIntegrator, DelaySystem};
pub use dop853::{DenseStep, OdeSystem, StepStats, Stepper, StepperOptions};
pub use history::{backward_history, delay_integral, DelayMemory, HistorySegment};

use crate::error::Result;
use crate::potential::{InteractionCoefficient, PotentialModel};
use std::ops::ControlFlow;

/// Phase-space dimension: `(y, z, p_y, p_z, theta)`.
pub const DIM: usize = 5;
pub type Phase = [f64; DIM];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscState {
    pub y: f64,
    pub z: f64,
    pub p_y: f64,
    pub p_z: f64,
    pub theta: f64,
    pub t: f64,
}

impl OscState {
    pub fn phase(&self) -> Phase {
        [self.y, self.z, self.p_y, self.p_z, self.theta]
    }

    pub fn from_phase(t: f64, x: &Phase) -> Self {
        OscState { y: x[0], z: x[1], p_y: x[2], p_z: x[3], theta: x[4], t }
    }
}

/// Oscillator in a billiard-like potential, forced through the coupling `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Oscillator {
    pub potential: PotentialModel,
    pub coupling: InteractionCoefficient,
    pub eps: f64,
    pub omega: f64,
    pub a_omega: f64,
}

impl Oscillator {
    /// Same oscillator with a different coupling strength.
    pub fn with_eps(&self, eps: f64) -> Self {
        Oscillator { eps, ..self.clone() }
    }

    /// Uncoupled energy `|p|^2 / 2 + V`.
    #[inline]
    pub fn energy(&self, x: &Phase) -> f64 {
        0.5 * (x[2] * x[2] + x[3] * x[3]) + self.potential.value([x[0], x[1]])
    }

    /// Energy including the instantaneous coupling `eps A k sin theta`.
    #[inline]
    pub fn coupled_energy(&self, x: &Phase) -> f64 {
        self.energy(x) + self.eps * self.a_omega * self.coupling.value([x[0], x[1]]) * x[4].sin()
    }

    /// Leading-order energy rate `eps omega A k cos theta`.
    #[inline]
    pub fn energy_rate(&self, x: &Phase) -> f64 {
        self.eps * self.omega * self.a_omega * self.coupling.value([x[0], x[1]]) * x[4].cos()
    }

    #[inline]
    pub(crate) fn shortened_rhs(&self, x: &Phase, dx: &mut Phase) {
        let (_, g) = self.potential.eval([x[0], x[1]]);
        let gk = self.coupling.grad();
        let c = self.eps * self.a_omega * x[4].sin();
        dx[0] = x[2];
        dx[1] = x[3];
        dx[2] = -g[0] - c * gk[0];
        dx[3] = -g[1] - c * gk[1];
        dx[4] = self.omega;
    }

    /// State with position `q`, unit direction `dir` and momentum fixed by energy `h`.
    pub fn state_at_energy(&self, q: [f64; 2], dir: [f64; 2], h: f64, theta: f64, t: f64) -> Option<OscState> {
        let v = self.potential.value(q);
        if h <= v {
            return None;
        }
        let s = (2.0 * (h - v)).sqrt();
        Some(OscState { y: q[0], z: q[1], p_y: s * dir[0], p_z: s * dir[1], theta, t })
    }
}

/// Free function form of [`Oscillator::energy`].
pub fn energy(osc: &Oscillator, state: &OscState) -> f64 {
    osc.energy(&state.phase())
}

/// The shortened system as an ODE.
pub struct ShortenedSystem<'a> {
    pub osc: &'a Oscillator,
}

impl OdeSystem<DIM> for ShortenedSystem<'_> {
    #[inline]
    fn eval(&mut self, _t: f64, x: &Phase, dx: &mut Phase) {
        self.osc.shortened_rhs(x, dx);
    }
}

/// Integrates the shortened system from `start` to `t_end`, handing every
/// accepted step to `observer`, which may stop the integration early.
pub fn integrate_shortened<F>(
    osc: &Oscillator,
    start: &OscState,
    t_end: f64,
    opts: StepperOptions,
    mut observer: F,
) -> Result<(OscState, StepStats)>
where
    F: FnMut(&DenseStep<DIM>) -> ControlFlow<()>,
{
    let mut sys = ShortenedSystem { osc };
    let dir = (t_end - start.t).signum();
    let mut st = Stepper::new(&mut sys, start.t, start.phase(), opts, dir);
    while (t_end - st.t) * dir > 0.0 {
        let step = st.step(&mut sys, Some(t_end))?;
        if observer(&step).is_break() {
            break;
        }
    }
    Ok((OscState::from_phase(st.t, &st.x), st.stats))
}

/// Uniformly sampled trajectory with its energy record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyTrace {
    pub t: Vec<f64>,
    pub states: Vec<Phase>,
    /// Coupled energy at each sample.
    pub h: Vec<f64>,
}

impl EnergyTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, osc: &Oscillator, t: f64, x: Phase) {
        self.t.push(t);
        self.h.push(osc.coupled_energy(&x));
        self.states.push(x);
    }

    /// Largest relative deviation of the energy from its initial value.
    pub fn relative_drift(&self) -> f64 {
        let h0 = self.h[0];
        self.h.iter().map(|h| ((h - h0) / h0).abs()).fold(0.0, f64::max)
    }
}

/// Samples `step` at the grid points `t0 + k dt` falling inside it.
pub(crate) struct Sampler {
    pub t0: f64,
    pub dt: f64,
    pub next: usize,
}

impl Sampler {
    pub fn new(t0: f64, dt: f64) -> Self {
        Sampler { t0, dt, next: 0 }
    }

    pub fn take(&mut self, step: &DenseStep<DIM>, mut sink: impl FnMut(f64, Phase)) {
        let (lo, hi) = step.interval();
        loop {
            let t = self.t0 + self.next as f64 * self.dt;
            if t > hi + 1e-12 * hi.abs().max(1.0) {
                break;
            }
            if t >= lo - 1e-12 * lo.abs().max(1.0) {
                sink(t, step.eval(t));
            }
            self.next += 1;
        }
    }
}

/// Integrates the shortened system and records a uniformly sampled energy trace.
pub fn shortened_trace(osc: &Oscillator, start: &OscState, t_end: f64, dt: f64, opts: StepperOptions) -> Result<EnergyTrace> {
    let mut trace = EnergyTrace::default();
    let mut sampler = Sampler::new(start.t, dt);
    integrate_shortened(osc, start, t_end, opts, |step| {
        sampler.take(step, |t, x| trace.push(osc, t, x));
        ControlFlow::Continue(())
    })?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::BilliardTable;

    struct Harmonic;
    impl OdeSystem<2> for Harmonic {
        fn eval(&mut self, _t: f64, x: &[f64; 2], dx: &mut [f64; 2]) {
            dx[0] = x[1];
            dx[1] = -x[0];
        }
    }

    #[test]
    fn dop853_harmonic_oscillator() {
        let opts = StepperOptions { rtol: 1e-12, atol: 1e-12, ..Default::default() };
        let mut sys = Harmonic;
        let mut st = Stepper::new(&mut sys, 0.0, [1.0, 0.0], opts, 1.0);
        let mut worst_dense: f64 = 0.0;
        while st.t < 20.0 {
            let step = st.step(&mut sys, Some(20.0)).unwrap();
            for k in 0..=10 {
                let t = step.t0 + step.h * k as f64 / 10.0;
                let x = step.eval(t);
                worst_dense = worst_dense.max((x[0] - t.cos()).abs());
            }
        }
        assert_eq!(st.t, 20.0);
        assert!((st.x[0] - 20f64.cos()).abs() < 1e-10);
        assert!(worst_dense < 1e-9, "{worst_dense}");
    }

    #[test]
    fn dop853_backward() {
        let mut sys = Harmonic;
        let mut st = Stepper::new(&mut sys, 0.0, [1.0, 0.0], StepperOptions::default(), -1.0);
        while st.t > -3.0 {
            st.step(&mut sys, Some(-3.0)).unwrap();
        }
        assert!((st.x[0] - 3f64.cos()).abs() < 1e-8);
        assert!((st.x[1] - 3f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn free_flight_conserves_energy() {
        let table = BilliardTable::default_table();
        let osc = Oscillator {
            potential: PotentialModel::singular(table, 100.0),
            coupling: InteractionCoefficient::default(),
            eps: 0.0,
            omega: 1.0,
            a_omega: 1.0,
        };
        let s = osc.state_at_energy([0.0, 0.0], [0.6, 0.8], 1.0, 0.0, 0.0).unwrap();
        let trace = shortened_trace(&osc, &s, 20.0, 0.5, StepperOptions::default()).unwrap();
        assert_eq!(trace.len(), 41);
        assert!(trace.relative_drift() < 1e-8);
    }
}
