//! Fixed-step sixth-order symplectic composition (Yoshida) for the shortened
//! system, treating the forcing phase as an extended coordinate.

use super::{OscState, Oscillator};

const W1: f64 = -1.177_679_984_178_87;
const W2: f64 = 0.235_573_213_359_357;
const W3: f64 = 0.784_513_610_477_560;

fn leapfrog(osc: &Oscillator, x: &mut [f64; 5], dt: f64) {
    let kick = |x: &mut [f64; 5], h: f64| {
        let (_, g) = osc.potential.eval([x[0], x[1]]);
        let c = osc.eps * osc.a_omega * x[4].sin();
        let gk = osc.coupling.grad();
        x[2] -= h * (g[0] + c * gk[0]);
        x[3] -= h * (g[1] + c * gk[1]);
    };
    kick(x, 0.5 * dt);
    x[0] += dt * x[2];
    x[1] += dt * x[3];
    x[4] += dt * osc.omega;
    kick(x, 0.5 * dt);
}

/// Advances `state` by `n` steps of size `dt`.
pub fn integrate_symplectic(osc: &Oscillator, state: &OscState, dt: f64, n: usize, mut observer: impl FnMut(f64, &[f64; 5])) -> OscState {
    let w0 = 1.0 - 2.0 * (W1 + W2 + W3);
    let seq = [W3, W2, W1, w0, W1, W2, W3];
    let mut x = state.phase();
    let mut t = state.t;
    for i in 0..n {
        for w in seq {
            leapfrog(osc, &mut x, w * dt);
        }
        t = state.t + (i + 1) as f64 * dt;
        observer(t, &x);
    }
    OscState::from_phase(t, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{BilliardTable, InteractionCoefficient, PotentialModel};

    #[test]
    fn sixth_order_convergence() {
        let osc = Oscillator {
            potential: PotentialModel::exponential(BilliardTable::default_table(), 1.0),
            coupling: InteractionCoefficient::default(),
            eps: 0.0,
            omega: 1.0,
            a_omega: 0.0,
        };
        let s = osc.state_at_energy([0.1, 0.05], [0.6, 0.8], 0.5, 0.0, 0.0).unwrap();
        let run = |n: usize| integrate_symplectic(&osc, &s, 2.0 / n as f64, n, |_, _| {}).phase();
        let reference = run(8000);
        let e1 = (run(500)[0] - reference[0]).abs();
        let e2 = (run(1000)[0] - reference[0]).abs();
        assert!(e1 / e2 > 30.0, "{e1} {e2}");
    }
}
