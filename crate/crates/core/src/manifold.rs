//! Invariant history manifold of the delayed system on a compact region.
//!
//! The history `mu(X, s)` (state `s` time units in the past of the current
//! state `X`) is the backward flow of the reduced equation
//! `X' = F(X) - delta grad k J(X)`, `J(X) = int_0^2 k(mu(X, s)) P(s) ds`,
//! and is found as the fixed point of that construction by Picard iteration.
//! Nodes form a tensor grid: cubic Lagrange in `(y, z, p_y, p_z)`,
//! trigonometric in the phase.

use crate::dynamics::{
    DdeIntegrator, DenseStep, EnergyTrace, HistorySegment, OdeSystem, OscState, Oscillator, Phase, Sampler, Stepper, StepperOptions, DIM,
};
use crate::error::{Error, Result};
use crate::field::{kernel_eval, DELAY};
use crate::quad::gauss16;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

/// Box in `(y, z, p_y, p_z)` times the phase circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub center: [f64; 4],
    pub half_width: [f64; 4],
}

impl Region {
    pub fn contains(&self, x: &Phase, margin: f64) -> bool {
        (0..4).all(|i| (x[i] - self.center[i]).abs() <= self.half_width[i] * (1.0 + margin))
    }

    /// Low-energy box around the minimum of the potential, sized by the
    /// harmonic amplitudes at energy `de` above the minimum.
    pub fn around_minimum(osc: &Oscillator, de: f64) -> Result<Region> {
        let mut q = osc.potential.table.incenter().0;
        let hess = |q: [f64; 2]| -> [[f64; 2]; 2] {
            let d = 1e-5;
            let mut m = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[j] += d;
                qm[j] -= d;
                let (gp, gm) = (osc.potential.eval(qp).1, osc.potential.eval(qm).1);
                for i in 0..2 {
                    m[i][j] = (gp[i] - gm[i]) / (2.0 * d);
                }
            }
            m
        };
        for _ in 0..50 {
            let g = osc.potential.eval(q).1;
            let m = hess(q);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det <= 0.0 || m[0][0] <= 0.0 {
                return Err(Error::Domain("potential has no interior minimum".into()));
            }
            let dq = [(m[1][1] * g[0] - m[0][1] * g[1]) / det, (m[0][0] * g[1] - m[1][0] * g[0]) / det];
            q = [q[0] - dq[0], q[1] - dq[1]];
            if dq[0].hypot(dq[1]) < 1e-14 {
                break;
            }
        }
        let m = hess(q);
        let pmax = (2.0 * de).sqrt();
        Ok(Region { center: [q[0], q[1], 0.0, 0.0], half_width: [pmax / m[0][0].sqrt(), pmax / m[1][1].sqrt(), pmax, pmax] })
    }
}

/// Grid layout and integration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldGrid {
    pub region: Region,
    /// Nodes per position/momentum axis (at least 4).
    pub nodes: usize,
    /// Nodes on the phase circle (even).
    pub phase_nodes: usize,
    /// Fixed steps per delay interval.
    pub steps: usize,
    /// Worker threads for the node sweep.
    pub threads: usize,
}

impl ManifoldGrid {
    pub fn new(region: Region, nodes: usize, phase_nodes: usize, steps: usize) -> Result<Self> {
        if nodes < 4 || phase_nodes < 2 || phase_nodes % 2 != 0 || steps < 4 {
            return Err(Error::Domain("grid needs >= 4 nodes per axis, an even phase count and >= 4 steps".into()));
        }
        Ok(ManifoldGrid { region, nodes, phase_nodes, steps, threads: 1 })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.pow(4) * self.phase_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> f64 {
        DELAY / self.steps as f64
    }

    fn axis(&self, i: usize, k: usize) -> f64 {
        let r = &self.region;
        r.center[i] - r.half_width[i] + 2.0 * r.half_width[i] * k as f64 / (self.nodes - 1) as f64
    }

    /// Node state with index `idx`.
    pub fn node(&self, idx: usize) -> Phase {
        let n = self.nodes;
        let mut rest = idx;
        let mut x = [0.0; DIM];
        for i in 0..4 {
            x[i] = self.axis(i, rest % n);
            rest /= n;
        }
        x[4] = 2.0 * PI * rest as f64 / self.phase_nodes as f64;
        x
    }

    /// Sparse interpolation weights `(node index, weight)` at `x`.
    fn weights(&self, x: &Phase) -> Vec<(usize, f64)> {
        let n = self.nodes;
        let mut axes: [[(usize, f64); 4]; 4] = [[(0, 0.0); 4]; 4];
        for i in 0..4 {
            let r = &self.region;
            let hstep = 2.0 * r.half_width[i] / (n - 1) as f64;
            let xi = (x[i] - (r.center[i] - r.half_width[i])) / hstep;
            let base = (xi.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
            for a in 0..4 {
                let mut w = 1.0;
                for b in 0..4 {
                    if a != b {
                        w *= (xi - (base + b) as f64) / (a as f64 - b as f64);
                    }
                }
                axes[i][a] = (base + a, w);
            }
        }
        let m = self.phase_nodes;
        let tw: Vec<f64> = (0..m).map(|j| trig_weight(x[4] - 2.0 * PI * j as f64 / m as f64, m)).collect();
        let mut out = Vec::with_capacity(256 * m);
        for (j, &wt) in tw.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for a3 in &axes[3] {
                for a2 in &axes[2] {
                    for a1 in &axes[1] {
                        for a0 in &axes[0] {
                            let idx = a0.0 + n * (a1.0 + n * (a2.0 + n * (a3.0 + n * j)));
                            out.push((idx, a0.1 * a1.1 * a2.1 * a3.1 * wt));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trigonometric interpolation weight on `m` equispaced phase nodes (`m` even).
fn trig_weight(d: f64, m: usize) -> f64 {
    let half = 0.5 * d;
    let s = half.sin();
    if s.abs() < 1e-14 {
        // d is a multiple of 2 pi
        return if (half / PI).round() as i64 % 2 == 0 { 1.0 } else { ((m as f64) * half).cos() / half.cos() };
    }
    ((m as f64) * half).sin() * half.cos() / (s * m as f64)
}

/// Histories on the grid together with the retarded integral `J` at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldMap {
    pub grid: ManifoldGrid,
    pub delta: f64,
    /// `mu(node, j h)` for `j = 0..=steps`, node-major, phase stored relative to the node.
    pub samples: Vec<Phase>,
    pub j: Vec<f64>,
    /// Nodes whose backward orbit leaves the region.
    pub flagged: Vec<bool>,
}

impl ManifoldMap {
    fn stride(&self) -> usize {
        self.grid.steps + 1
    }

    /// Interpolated retarded integral at `x`.
    pub fn j_at(&self, x: &Phase) -> f64 {
        self.grid.weights(x).iter().map(|&(i, w)| w * self.j[i]).sum()
    }

    /// Stored history of grid node `idx` at `s = j h`.
    pub fn node_sample(&self, idx: usize, j: usize) -> Phase {
        let mut y = self.samples[idx * self.stride() + j];
        y[4] += self.grid.node(idx)[4];
        y
    }

    /// Interpolated `mu(x, s)`.
    pub fn eval(&self, x: &Phase, s: f64) -> Result<Phase> {
        if !(0.0..=DELAY).contains(&s) {
            return Err(Error::Domain(format!("delay {s} outside [0, 2]")));
        }
        let h = self.grid.step();
        let m = self.grid.steps;
        let si = s / h;
        let base = (si.floor() as isize - 1).clamp(0, m as isize - 3) as usize;
        let mut ws = [0.0; 4];
        for (a, w) in ws.iter_mut().enumerate() {
            *w = 1.0;
            for b in 0..4 {
                if a != b {
                    *w *= (si - (base + b) as f64) / (a as f64 - b as f64);
                }
            }
        }
        let mut out = [0.0; DIM];
        for (idx, w) in self.grid.weights(x) {
            let row = &self.samples[idx * self.stride()..];
            for (a, wa) in ws.iter().enumerate() {
                let v = &row[base + a];
                for c in 0..DIM {
                    out[c] += w * wa * v[c];
                }
            }
        }
        out[4] += x[4];
        Ok(out)
    }

    pub fn flagged_fraction(&self) -> f64 {
        self.flagged.iter().filter(|&&f| f).count() as f64 / self.flagged.len().max(1) as f64
    }

    /// Writes the node values of `J` with a metadata header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let r = &self.grid.region;
        let _ = writeln!(s, "# delta = {:.16e}", self.delta);
        let _ = writeln!(s, "# center = {:?}", r.center);
        let _ = writeln!(s, "# half_width = {:?}", r.half_width);
        let _ = writeln!(s, "# nodes = {}, phase_nodes = {}, steps = {}", self.grid.nodes, self.grid.phase_nodes, self.grid.steps);
        let _ = writeln!(s, "# flagged_fraction = {:.16e}", self.flagged_fraction());
        s.push_str("y,z,p_y,p_z,theta,J,flagged\n");
        for (i, jv) in self.j.iter().enumerate() {
            let x = self.grid.node(i);
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}", x[0], x[1], x[2], x[3], x[4], jv, self.flagged[i] as u8);
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Reduced equation `X' = F(X) - delta grad k J(X)` on the manifold.
pub struct ReducedSystem<'a> {
    pub osc: &'a Oscillator,
    pub delta: f64,
    pub j: Option<&'a ManifoldMap>,
    warned: bool,
}

impl<'a> ReducedSystem<'a> {
    pub fn new(osc: &'a Oscillator, delta: f64, j: Option<&'a ManifoldMap>) -> Self {
        ReducedSystem { osc, delta, j, warned: false }
    }
}

impl OdeSystem<DIM> for ReducedSystem<'_> {
    #[inline]
    fn eval(&mut self, _t: f64, x: &Phase, dx: &mut Phase) {
        self.osc.shortened_rhs(x, dx);
        if let Some(m) = self.j {
            if self.delta != 0.0 {
                if !self.warned && !m.grid.region.contains(x, 0.0) {
                    log::warn!("reduced field extrapolated outside the region at {x:?}");
                    self.warned = true;
                }
                let jv = m.j_at(x);
                let gk = self.osc.coupling.grad();
                dx[2] -= self.delta * gk[0] * jv;
                dx[3] -= self.delta * gk[1] * jv;
            }
        }
    }
}

/// Right-hand side of the reduced equation for `mu` solved at `delta = eps^2`.
pub fn reduced_vector_field<'a>(osc: &'a Oscillator, map: &'a ManifoldMap) -> ReducedSystem<'a> {
    ReducedSystem::new(osc, map.delta, Some(map))
}

fn fixed_opts() -> StepperOptions {
    StepperOptions::default()
}

/// Integrates the reduced equation from `start` to `t_end` in steps of at
/// most the grid step, sampling the energy every `dt`.
pub fn integrate_reduced(osc: &Oscillator, mu: &ManifoldMap, start: &OscState, t_end: f64, dt: f64) -> Result<EnergyTrace> {
    if t_end < start.t {
        return Err(Error::Domain("reduced runs go forward in time".into()));
    }
    let mut sys = reduced_vector_field(osc, mu);
    let n = ((t_end - start.t) / mu.grid.step()).ceil().max(1.0) as usize;
    let h = (t_end - start.t) / n as f64;
    let mut st = Stepper::new(&mut sys, start.t, start.phase(), fixed_opts(), 1.0);
    let mut trace = EnergyTrace::default();
    let mut sampler = Sampler::new(start.t, dt);
    for _ in 0..n {
        let step = st.step_fixed(&mut sys, h);
        sampler.take(&step, |t, x| trace.push(osc, t, x));
    }
    Ok(trace)
}

/// Backward orbit of `x` under the reduced equation over the delay, in fixed steps.
pub fn backward_orbit(sys: &mut ReducedSystem, x: Phase, steps: usize) -> Vec<DenseStep<DIM>> {
    let h = DELAY / steps as f64;
    let mut st = Stepper::new(sys, 0.0, x, fixed_opts(), -1.0);
    (0..steps).map(|_| st.step_fixed(sys, -h)).collect()
}

fn retarded_integral(osc: &Oscillator, steps: &[DenseStep<DIM>]) -> f64 {
    let (nodes, weights) = gauss16();
    let mut acc = 0.0;
    for st in steps {
        // s = -t along the backward orbit
        let (lo, hi) = st.interval();
        let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (xg, wg) in nodes.iter().zip(weights) {
            let t = c + r * xg;
            let y = st.eval(t);
            acc += wg * r * osc.coupling.value([y[0], y[1]]) * kernel_eval(-t);
        }
    }
    acc
}

/// One application of the backward-flow construction: histories under the
/// reduced equation with `J` taken from `mu` (or zero when `mu` is absent).
pub fn backward_flow_map(osc: &Oscillator, grid: &ManifoldGrid, mu: Option<&ManifoldMap>, delta: f64) -> ManifoldMap {
    let n = grid.len();
    let stride = grid.steps + 1;
    let mut samples = vec![[0.0; DIM]; n * stride];
    let mut j = vec![0.0; n];
    let mut flagged = vec![false; n];
    let chunk = n.div_ceil(grid.threads);
    let sweep = |first: usize, samples: &mut [Phase], j: &mut [f64], flagged: &mut [bool]| {
        let mut sys = ReducedSystem { osc, delta, j: mu, warned: true };
        for (off, jv) in j.iter_mut().enumerate() {
            let x = grid.node(first + off);
            let steps = backward_orbit(&mut sys, x, grid.steps);
            let row = &mut samples[off * stride..(off + 1) * stride];
            row[0] = [x[0], x[1], x[2], x[3], 0.0];
            for (k, st) in steps.iter().enumerate() {
                let mut y = st.end();
                flagged[off] |= !grid.region.contains(&y, 0.1);
                y[4] -= x[4];
                row[k + 1] = y;
            }
            *jv = retarded_integral(osc, &steps);
        }
    };
    std::thread::scope(|scope| {
        let parts = samples.chunks_mut(chunk * stride).zip(j.chunks_mut(chunk)).zip(flagged.chunks_mut(chunk));
        for (i, ((s, jj), f)) in parts.enumerate() {
            let sweep = &sweep;
            if grid.threads == 1 {
                sweep(i * chunk, s, jj, f);
            } else {
                scope.spawn(move || sweep(i * chunk, s, jj, f));
            }
        }
    });
    ManifoldMap { grid: *grid, delta, samples, j, flagged }
}

fn sup_difference(a: &ManifoldMap, b: &ManifoldMap) -> f64 {
    a.samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    /// `sup |mu_{n+1} - mu_n|` for each iterate.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub flagged_fraction: f64,
}

impl PicardReport {
    /// Ratio of the second to the first residual.
    pub fn first_ratio(&self) -> Option<f64> {
        (self.residuals.len() >= 2 && self.residuals[0] > 0.0).then(|| self.residuals[1] / self.residuals[0])
    }
}

/// Picard iteration `mu_{n+1} = phi(mu_n, delta)` from `mu_0 = phi(., 0)`.
pub fn solve_invariant_history(osc: &Oscillator, grid: &ManifoldGrid, delta: f64, max_iter: usize, tol: f64) -> Result<(ManifoldMap, PicardReport)> {
    let mut mu = backward_flow_map(osc, grid, None, delta);
    let mut residuals = Vec::new();
    for it in 0..max_iter {
        let next = backward_flow_map(osc, grid, Some(&mu), delta);
        let r = sup_difference(&next, &mu);
        residuals.push(r);
        mu = next;
        if r < tol {
            let flagged_fraction = mu.flagged_fraction();
            return Ok((mu, PicardReport { residuals, converged: true, flagged_fraction }));
        }
        if it >= 2 {
            let n = residuals.len();
            let ratio = residuals[n - 1] / residuals[n - 2];
            if ratio >= 1.0 {
                return Err(Error::NoConvergence(format!(
                    "Picard iteration does not contract (ratio {ratio:.3}); reduce delta or shrink the region"
                )));
            }
        }
    }
    let flagged_fraction = mu.flagged_fraction();
    Ok((mu, PicardReport { residuals, converged: false, flagged_fraction }))
}

/// Sup over `t, s` in `[0, 2]` of `|mu(X(t), s) - X(t - s)|` along reduced
/// orbits from the test points, with the past before `0` read from `mu(X(0), .)`.
pub fn invariance_defect(osc: &Oscillator, mu: &ManifoldMap, points: &[Phase]) -> Result<f64> {
    let steps = mu.grid.steps;
    let h = mu.grid.step();
    let mut sys = reduced_vector_field(osc, mu);
    let mut worst: f64 = 0.0;
    for x0 in points {
        let mut st = Stepper::new(&mut sys, 0.0, *x0, fixed_opts(), 1.0);
        let mut traj = vec![*x0];
        for _ in 0..steps {
            traj.push(st.step_fixed(&mut sys, h).end());
        }
        for (k, xt) in traj.iter().enumerate() {
            for jdx in 0..=steps {
                let s = jdx as f64 * h;
                let past = if jdx <= k { traj[k - jdx] } else { mu.eval(x0, (jdx - k) as f64 * h)? };
                let m = mu.eval(xt, s)?;
                for c in 0..DIM {
                    worst = worst.max((m[c] - past[c]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Past of `x0` on the manifold as a history for the delayed integrator.
pub fn manifold_history(osc: &Oscillator, mu: &ManifoldMap, x0: Phase) -> Result<HistorySegment> {
    let mut sys = reduced_vector_field(osc, mu);
    HistorySegment::from_steps(backward_orbit(&mut sys, x0, mu.grid.steps))
}

/// Sup-distance over `[0, duration]` between the delayed system started on
/// the manifold at `x0` and the reduced equation, both advanced with the
/// same fixed steps.
pub fn reduction_divergence(osc: &Oscillator, mu: &ManifoldMap, x0: Phase, duration: f64) -> Result<f64> {
    let n = (duration / mu.grid.step()).ceil() as usize;
    let h = duration / n as f64;
    let history = manifold_history(osc, mu, x0)?;
    let mut dde = DdeIntegrator::new(osc, mu.delta, &history, fixed_opts())?;
    let mut sys = reduced_vector_field(osc, mu);
    let mut red = Stepper::new(&mut sys, 0.0, x0, fixed_opts(), 1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = dde.step_fixed(h)?.end();
        let b = red.step_fixed(&mut sys, h).end();
        if !mu.grid.region.contains(&b, 0.0) {
            return Err(Error::Domain("reduced orbit left the region".into()));
        }
        for c in 0..DIM {
            worst = worst.max((a[c] - b[c]).abs());
        }
    }
    Ok(worst)
}
