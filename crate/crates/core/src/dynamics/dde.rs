//! Method of steps for the delayed oscillator
//! `p' = -grad V - eps A grad k sin(theta) - delta grad k I(t)`.

use super::dop853::{DenseStep, OdeSystem, StepStats, Stepper, StepperOptions};
use super::history::{DelayMemory, HistorySegment};
use super::{OscState, Oscillator, Phase, DIM};
use crate::error::{Error, Result};
use crate::field::DELAY;
use std::ops::ControlFlow;

/// Largest step used for the delayed system.
pub const DDE_MAX_STEP: f64 = 0.25;

pub struct DelaySystem<'a> {
    pub osc: &'a Oscillator,
    /// Strength of the retarded self-interaction (`eps^2` for the physical system).
    pub delta: f64,
    pub memory: DelayMemory,
    fault: Option<Error>,
}

impl<'a> DelaySystem<'a> {
    pub fn new(osc: &'a Oscillator, delta: f64, history: &HistorySegment) -> Self {
        DelaySystem { osc, delta, memory: DelayMemory::new(osc.coupling, history), fault: None }
    }

    /// Retarded integral at `(t, x)` with `x` the current state.
    pub fn self_interaction(&self, t: f64, x: &Phase) -> Result<f64> {
        self.memory.integral(t, self.osc.coupling.value([x[0], x[1]]))
    }
}

impl OdeSystem<DIM> for DelaySystem<'_> {
    #[inline]
    fn eval(&mut self, t: f64, x: &Phase, dx: &mut Phase) {
        self.osc.shortened_rhs(x, dx);
        if self.delta == 0.0 {
            return;
        }
        match self.self_interaction(t, x) {
            Ok(i) => {
                let gk = self.osc.coupling.grad();
                dx[2] -= self.delta * gk[0] * i;
                dx[3] -= self.delta * gk[1] * i;
            }
            Err(e) => {
                self.fault.get_or_insert(e);
                dx[2] = f64::NAN;
            }
        }
    }
}

/// Saved integrator position for trial integrations.
#[derive(Debug, Clone)]
pub struct DdeCheckpoint {
    stepper: Stepper<DIM>,
    memory_len: usize,
}

/// Step-by-step integrator of the delayed system; every accepted step is
/// appended to the stored past.
pub struct DdeIntegrator<'a> {
    pub sys: DelaySystem<'a>,
    pub stepper: Stepper<DIM>,
}

impl<'a> DdeIntegrator<'a> {
    /// Starts at the right end of `history`.
    pub fn new(osc: &'a Oscillator, delta: f64, history: &HistorySegment, mut opts: StepperOptions) -> Result<Self> {
        opts.h_max = opts.h_max.min(DDE_MAX_STEP);
        let mut sys = DelaySystem::new(osc, delta, history);
        let s = history.end_state();
        let stepper = Stepper::new(&mut sys, s.t, s.phase(), opts, 1.0);
        if let Some(e) = sys.fault.take() {
            return Err(e);
        }
        Ok(DdeIntegrator { sys, stepper })
    }

    pub fn state(&self) -> OscState {
        OscState::from_phase(self.stepper.t, &self.stepper.x)
    }

    pub fn t(&self) -> f64 {
        self.stepper.t
    }

    pub fn stats(&self) -> StepStats {
        self.stepper.stats
    }

    fn after_step(&mut self, step: &DenseStep<DIM>) -> Result<()> {
        if let Some(e) = self.sys.fault.take() {
            return Err(e);
        }
        self.sys.memory.push(step.clone());
        self.stepper.refresh(&mut self.sys);
        Ok(())
    }

    /// One adaptive step, not passing `t_limit`.
    pub fn step(&mut self, t_limit: Option<f64>) -> Result<DenseStep<DIM>> {
        let step = match self.stepper.step(&mut self.sys, t_limit) {
            Ok(s) => s,
            Err(e) => return Err(self.sys.fault.take().unwrap_or(e)),
        };
        self.after_step(&step)?;
        Ok(step)
    }

    /// One step of prescribed size without error control.
    pub fn step_fixed(&mut self, h: f64) -> Result<DenseStep<DIM>> {
        let step = self.stepper.step_fixed(&mut self.sys, h);
        self.after_step(&step)?;
        Ok(step)
    }

    /// Replaces the current state by `x`, as for an impulsive correction.
    pub fn set_state(&mut self, x: Phase) {
        self.stepper.set_state(&mut self.sys, x);
    }

    pub fn checkpoint(&self) -> DdeCheckpoint {
        DdeCheckpoint { stepper: self.stepper.clone(), memory_len: self.sys.memory.len() }
    }

    pub fn restore(&mut self, cp: &DdeCheckpoint) {
        self.sys.memory.truncate(cp.memory_len);
        self.stepper = cp.stepper.clone();
    }

    /// Releases stored past that no longer enters the delay window.
    pub fn trim(&mut self) {
        let t_min = self.stepper.t - DELAY - 1.0;
        if self.sys.memory.t_start() < t_min - 1.0 {
            self.sys.memory.trim(t_min);
        }
    }
}

/// Integrates the delayed system from the end of `history` to `t_end`.
pub fn integrate_dde<F>(
    osc: &Oscillator,
    delta: f64,
    history: &HistorySegment,
    t_end: f64,
    opts: StepperOptions,
    mut observer: F,
) -> Result<(OscState, StepStats)>
where
    F: FnMut(&DenseStep<DIM>) -> ControlFlow<()>,
{
    let mut integ = DdeIntegrator::new(osc, delta, history, opts)?;
    while integ.t() < t_end {
        let step = integ.step(Some(t_end))?;
        integ.trim();
        if observer(&step).is_break() {
            break;
        }
    }
    Ok((integ.state(), integ.stats()))
}
