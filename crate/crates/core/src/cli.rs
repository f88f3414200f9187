//! Subcommand pipelines, output files and the run manifest.

use crate::billiard::{default_orbits, hyperbolicity, monodromy, orbit_average};
use crate::config::Config;
use crate::dynamics::{shortened_trace, Oscillator, Phase, StepperOptions};
use crate::error::{Error, Result};
use crate::experiments::{
    billiard_limit, corrections_csv, drift_svg, energy_rate_residual, fmt_num, report_csv, run_acceleration, run_control, run_dissipation,
    trace_csv, verdict, ControlArm, RunOutput, Setup,
};
use crate::field::{ball_cosine_integral, ball_cosine_shells, ball_cosine_zero, compute_a_omega, kernel_first_moment, kernel_mass, kernel_oracle_mc, kernel_p};
use crate::manifold::{invariance_defect, reduction_divergence, solve_invariant_history, ManifoldGrid, Region};
use crate::potential::{gradient_defect, BarrierProfile, PotentialModel};
use crate::quad::integrate16;
use crate::symbolic::{contract_code, encode, find_coded_orbit, Closure, Symbol, SymbolSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Relative tolerance of the conservation check.
pub const CONSERVE_RTOL: f64 = 1e-14;

/// Forcing frequencies of the amplitude check.
pub const FORCING_OMEGAS: [f64; 4] = [0.5, 1.0, 2.0, PI];

/// Coupling strengths of the energy-rate check.
pub const RATE_EPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Delay strengths of the Picard ratio check.
pub const PICARD_DELTAS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Energies of the billiard-limit check.
pub const LIMIT_ENERGIES: [f64; 3] = [1e2, 1e3, 1e4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    KernelCheck,
    Forcing,
    Table,
    Orbits,
    Conserve,
    Limit,
    Rate,
    Reduce,
    CodeOrbit,
    Accelerate,
    Control,
    Dissipate,
    Report,
}

impl Command {
    pub const ALL: [Command; 13] = [
        Command::KernelCheck,
        Command::Forcing,
        Command::Table,
        Command::Orbits,
        Command::Conserve,
        Command::Limit,
        Command::Rate,
        Command::Reduce,
        Command::CodeOrbit,
        Command::Accelerate,
        Command::Control,
        Command::Dissipate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::KernelCheck => "kernel-check",
            Command::Forcing => "forcing",
            Command::Table => "table",
            Command::Orbits => "orbits",
            Command::Conserve => "conserve",
            Command::Limit => "limit",
            Command::Rate => "rate",
            Command::Reduce => "reduce",
            Command::CodeOrbit => "code-orbit",
            Command::Accelerate => "accelerate",
            Command::Control => "control",
            Command::Dissipate => "dissipate",
            Command::Report => "report",
        }
    }
}

/// Result of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub command: Command,
    pub passed: bool,
    /// `key = value` lines of the verdict file.
    pub verdict: Vec<(String, String)>,
    pub files: Vec<PathBuf>,
}

/// Configuration snapshot, version, seed and hashes of the written files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub version: String,
    pub seed: u64,
    /// File names relative to the output directory with their SHA-256.
    pub files: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: Command, cfg: &Config, out: &Path, files: &[PathBuf]) -> Result<Self> {
        let mut hashed = Vec::with_capacity(files.len());
        for f in files {
            let bytes = std::fs::read(f)?;
            let name = f.strip_prefix(out).unwrap_or(f).display().to_string();
            hashed.push((name, hex::encode(Sha256::digest(&bytes))));
        }
        Ok(RunManifest {
            command: command.name().into(),
            config: cfg.render(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.experiment.seed,
            files: hashed,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("command = {}\nversion = {}\nseed = {}\n", self.command, self.version, self.seed);
        for (name, hash) in &self.files {
            let _ = writeln!(s, "file = {name} sha256:{hash}");
        }
        s.push_str("\n# configuration\n");
        s.push_str(&self.config);
        s
    }

    /// Rehashes the listed files under `out` and reports the names that changed.
    pub fn verify(&self, out: &Path) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for (name, hash) in &self.files {
            let bytes = std::fs::read(out.join(name))?;
            if hex::encode(Sha256::digest(&bytes)) != *hash {
                changed.push(name.clone());
            }
        }
        Ok(changed)
    }
}

struct Artifacts<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, content)?;
        self.files.push(path);
        Ok(())
    }
}

struct Verdict {
    lines: Vec<(String, String)>,
}

impl Verdict {
    fn new() -> Self {
        Verdict { lines: Vec::new() }
    }

    fn num(&mut self, key: &str, v: f64) {
        self.lines.push((key.into(), fmt_num(v)));
    }

    fn flag(&mut self, key: &str, v: bool) -> bool {
        self.lines.push((key.into(), v.to_string()));
        v
    }

    fn text(&mut self, key: &str, v: impl ToString) {
        self.lines.push((key.into(), v.to_string()));
    }
}

/// Runs `command` with `cfg`, writing CSV files, a verdict file and the manifest into `out`.
pub fn dispatch(command: Command, cfg: &Config, out: &Path, threads: usize) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    let mut art = Artifacts { out, files: Vec::new() };
    let mut v = Verdict::new();
    let passed = match command {
        Command::KernelCheck => kernel_check(cfg, &mut art, &mut v)?,
        Command::Forcing => forcing(&mut art, &mut v)?,
        Command::Table => table(cfg, &mut art, &mut v)?,
        Command::Orbits => orbits(cfg, &mut art, &mut v)?,
        Command::Conserve => conserve(cfg, &mut art, &mut v)?,
        Command::Limit => limit(cfg, &mut art, &mut v)?,
        Command::Rate => rate(cfg, &mut art, &mut v)?,
        Command::Reduce => reduce(cfg, threads, &mut art, &mut v)?,
        Command::CodeOrbit => code_orbit(cfg, &mut art, &mut v)?,
        Command::Accelerate => accelerate(cfg, &mut art, &mut v)?,
        Command::Control => control(cfg, &mut art, &mut v)?,
        Command::Dissipate => dissipate(cfg, &mut art, &mut v)?,
        Command::Report => report(out, &mut art, &mut v)?,
    };
    let mut text = format!("command = {}\npassed = {passed}\n", command.name());
    for (k, val) in &v.lines {
        let _ = writeln!(text, "{k} = {val}");
    }
    art.write(&format!("{}.verdict", command.name()), &text)?;
    let manifest = RunManifest::new(command, cfg, out, &art.files)?;
    std::fs::write(out.join(format!("{}.manifest", command.name())), manifest.render())?;
    Ok(Outcome { command, passed, verdict: v.lines, files: art.files })
}

fn kernel_check(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let mut csv = String::from("s,closed_form,monte_carlo,standard_error,z\n");
    let mut worst_z: f64 = 0.0;
    for i in 1..=7 {
        let s = 0.25 * i as f64;
        let exact = kernel_p(s)?;
        let (mc, se) = kernel_oracle_mc(s, cfg.checks.mc_samples, cfg.experiment.seed.wrapping_add(i as u64))?;
        let z = (mc - exact) / se;
        worst_z = worst_z.max(z.abs());
        let _ = writeln!(csv, "{},{},{},{},{}", fmt_num(s), fmt_num(exact), fmt_num(mc), fmt_num(se), fmt_num(z));
    }
    art.write("kernel-check.csv", &csv)?;
    let mass = integrate16(0.0, 2.0, |s| kernel_p(s).unwrap_or(f64::NAN));
    let moment = integrate16(0.0, 2.0, |s| s * kernel_p(s).unwrap_or(f64::NAN));
    let mass_err = (mass - 8.0 * PI / 15.0).abs().max((kernel_mass() - 8.0 * PI / 15.0).abs());
    let moment_err = (moment - 4.0 * PI / 9.0).abs().max((kernel_first_moment() - 4.0 * PI / 9.0).abs());
    v.num("max_abs_z", worst_z);
    v.num("mass_error", mass_err);
    v.num("first_moment_error", moment_err);
    let a = v.flag("mc_within_3se", worst_z < 3.0);
    let b = v.flag("moments_ok", mass_err < 1e-6 && moment_err < 1e-6);
    Ok(a && b)
}

fn forcing(art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let mut csv = String::from("omega,closed_form,shell_quadrature,relative_error,a_omega\n");
    let mut worst: f64 = 0.0;
    for w in FORCING_OMEGAS {
        let c = ball_cosine_integral(w);
        let q = ball_cosine_shells(w, 48);
        let rel = ((c - q) / q).abs();
        worst = worst.max(rel);
        let _ = writeln!(csv, "{},{},{},{},{}", fmt_num(w), fmt_num(c), fmt_num(q), fmt_num(rel), fmt_num(compute_a_omega(1.0, 1.0, w).value));
    }
    art.write("forcing.csv", &csv)?;
    let w0 = ball_cosine_zero(1);
    let a0 = compute_a_omega(1.0, 1.0, w0);
    v.num("max_relative_error", worst);
    v.num("first_zero", w0);
    v.num("a_omega_at_zero", a0.value);
    let a = v.flag("closed_form_ok", worst < 1e-6);
    let b = v.flag("zero_detected", a0.degenerate && (w0.tan() - w0).abs() < 1e-6);
    Ok(a && b)
}

fn table(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let t = &cfg.experiment.table;
    let mut csv = String::from("arc,center_y,center_z,radius,phi_mid,half_width,corner_angle\n");
    let mut ok = true;
    for (j, a) in t.arcs.iter().enumerate() {
        let corner = t.corner_angle(j);
        ok &= corner > 0.0;
        let _ = writeln!(
            csv,
            "{j},{},{},{},{},{},{}",
            fmt_num(a.center[0]),
            fmt_num(a.center[1]),
            fmt_num(a.radius),
            fmt_num(a.phi_mid),
            fmt_num(a.half_width),
            fmt_num(corner)
        );
    }
    art.write("table.csv", &csv)?;
    let (c, r) = t.incenter();
    v.num("diameter", t.diameter());
    v.num("incenter_y", c[0]);
    v.num("incenter_z", c[1]);
    v.num("inradius", r);
    Ok(v.flag("corners_nondegenerate", ok))
}

fn orbits(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let t = &cfg.experiment.table;
    let (la, lb, hab, hba) = default_orbits(t)?;
    let k = cfg.experiment.coupling;
    let mut csv = String::from("orbit,closure,length,trace,det,average_k\n");
    let mut ok = true;
    for (name, o) in [("a", &la), ("b", &lb)] {
        let hy = hyperbolicity(&monodromy(t, o, 0))?;
        ok &= o.closure < 1e-10 && hy.trace.abs() > 2.0 && (hy.det - 1.0).abs() < 1e-8;
        let _ = writeln!(csv, "{name},{},{},{},{},{}", fmt_num(o.closure), fmt_num(o.length), fmt_num(hy.trace), fmt_num(hy.det), fmt_num(orbit_average(o, &k)));
    }
    let mut hcsv = String::from("connection,angle,mismatch,bounces\n");
    for (name, h) in [("ab", &hab), ("ba", &hba)] {
        ok &= h.angle > 1e-3 && h.mismatch < 1e-10;
        let _ = writeln!(hcsv, "{name},{},{},{}", fmt_num(h.angle), fmt_num(h.mismatch), h.arcs.len());
    }
    art.write("orbits.csv", &csv)?;
    art.write("orbits-heteroclinic.csv", &hcsv)?;
    let (va, vb) = (orbit_average(&la, &k), orbit_average(&lb, &k));
    v.num("v_a", va);
    v.num("v_b", vb);
    let a = v.flag("orbits_ok", ok);
    let b = v.flag("averages_separated", (va - vb).abs() > 0.05);
    Ok(a && b)
}

fn conserve(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let osc = cfg.experiment.oscillator().with_eps(0.0);
    let (q, _) = osc.potential.table.incenter();
    let opts = StepperOptions { rtol: CONSERVE_RTOL, atol: CONSERVE_RTOL, ..Default::default() };
    let mut csv = String::from("energy,duration,relative_drift\n");
    let mut worst: f64 = 0.0;
    for h in [1.0, cfg.experiment.h0] {
        let s = osc
            .state_at_energy(q, [0.6, 0.8], h, 0.0, 0.0)
            .ok_or_else(|| Error::Domain("starting point lies above the energy surface".into()))?;
        let drift = shortened_trace(&osc, &s, cfg.checks.conserve_time, 1.0, opts)?.relative_drift();
        worst = worst.max(drift);
        let _ = writeln!(csv, "{},{},{}", fmt_num(h), fmt_num(cfg.checks.conserve_time), fmt_num(drift));
    }
    art.write("conserve.csv", &csv)?;
    let g = gradient_defect(&osc.potential, 1000, cfg.experiment.seed);
    v.num("max_relative_drift", worst);
    v.num("gradient_defect", g);
    let a = v.flag("energy_conserved", worst < 1e-9);
    let b = v.flag("gradient_ok", g < 1e-6);
    Ok(a && b)
}

fn limit(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let r = billiard_limit(&cfg.experiment.table, &LIMIT_ENERGIES, cfg.checks.limit_samples, cfg.checks.limit_spread, cfg.experiment.seed)?;
    let mut csv = String::from("energy,sup_distance\n");
    for (h, d) in r.energies.iter().zip(&r.distances) {
        let _ = writeln!(csv, "{},{}", fmt_num(*h), fmt_num(*d));
    }
    art.write("limit.csv", &csv)?;
    Ok(v.flag("monotone_decrease", r.monotone()))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn rate(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let opts = StepperOptions { rtol: cfg.experiment.rtol, atol: cfg.experiment.rtol, ..Default::default() };
    let base = cfg.experiment.oscillator();
    let mut csv = String::from("eps,rms_residual,max_residual\n");
    let mut res = Vec::new();
    for eps in RATE_EPS {
        let r = energy_rate_residual(&base.with_eps(eps), 1.0, cfg.checks.rate_windows, opts)?;
        let max = r.windows.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(csv, "{},{},{}", fmt_num(eps), fmt_num(r.rms()), fmt_num(max));
        res.push(r.rms());
    }
    art.write("rate.csv", &csv)?;
    let slope = loglog_slope(&RATE_EPS, &res);
    v.num("slope", slope);
    Ok(v.flag("quadratic_in_eps", (slope - 2.0).abs() <= 0.2))
}

/// Oscillator of the low-energy bowl used for the history manifold.
pub fn bowl_oscillator(cfg: &Config) -> Oscillator {
    let e = &cfg.experiment;
    Oscillator {
        potential: PotentialModel::new(e.table.clone(), BarrierProfile::Exponential { b: 1.0, sigma: cfg.manifold.sigma }, 1e6),
        coupling: e.coupling,
        eps: cfg.manifold.eps,
        omega: e.omega,
        a_omega: e.a_omega,
    }
}

/// Seeded points of the region with position and momentum offsets at most
/// `scale` half-widths.
pub fn region_points(region: &Region, n: usize, scale: f64, seed: u64) -> Vec<Phase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut x = [0.0; 5];
            for i in 0..4 {
                x[i] = region.center[i] + scale * region.half_width[i] * rng.random_range(-1.0..1.0);
            }
            x[4] = rng.random_range(0.0..2.0 * PI);
            x
        })
        .collect()
}

fn reduce(cfg: &Config, threads: usize, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let m = &cfg.manifold;
    let osc = bowl_oscillator(cfg);
    let region = Region::around_minimum(&osc, m.energy)?;
    let grid = ManifoldGrid::new(region, m.nodes, m.phase_nodes, m.steps)?.with_threads(threads);
    let mut csv = String::from("delta,iterations,first_residual,second_residual,ratio,flagged_fraction\n");
    let mut ratios = Vec::new();
    for delta in PICARD_DELTAS {
        let (_, rep) = solve_invariant_history(&osc, &grid, delta, m.max_iter, m.tol)?;
        let ratio = rep.first_ratio().ok_or_else(|| Error::InsufficientData("Picard stopped before two residuals".into()))?;
        ratios.push(ratio);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            fmt_num(delta),
            rep.residuals.len(),
            fmt_num(rep.residuals[0]),
            fmt_num(rep.residuals[1]),
            fmt_num(ratio),
            fmt_num(rep.flagged_fraction)
        );
    }
    art.write("reduce.csv", &csv)?;
    let slope = loglog_slope(&PICARD_DELTAS, &ratios);
    let (mu, rep) = solve_invariant_history(&osc, &grid, m.eps * m.eps, m.max_iter, m.tol)?;
    let manifold_path = art.out.join("reduce-manifold.csv");
    mu.write_csv(&manifold_path)?;
    art.files.push(manifold_path);
    let points = region_points(&region, 5, 0.3, cfg.experiment.seed);
    let defect = invariance_defect(&osc, &mu, &points)?;
    let x0 = region_points(&region, 1, 0.3, cfg.experiment.seed.wrapping_add(1))[0];
    let period = 2.0 * PI / osc.omega;
    let div = reduction_divergence(&osc, &mu, x0, period)?;
    let half = osc.with_eps(0.5 * m.eps);
    let (mu_half, _) = solve_invariant_history(&half, &grid, half.eps * half.eps, m.max_iter, m.tol)?;
    let div_half = reduction_divergence(&half, &mu_half, x0, period)?;
    let quarter = div / div_half;
    v.num("ratio_slope", slope);
    v.num("final_residual", *rep.residuals.last().unwrap_or(&0.0));
    v.num("flagged_fraction", rep.flagged_fraction);
    v.num("invariance_defect", defect);
    v.num("divergence", div);
    v.num("divergence_half_eps", div_half);
    v.num("divergence_ratio", quarter);
    let a = v.flag("ratio_linear_in_delta", (slope - 1.0).abs() <= 0.2);
    let b = v.flag("converged", rep.converged);
    let c = v.flag("defect_ok", defect < 1e-6);
    let d = v.flag("divergence_ok", div < 1e-6);
    let e = v.flag("divergence_quarters", (quarter / 4.0 - 1.0).abs() <= 0.3);
    Ok(a && b && c && d && e)
}

/// Seeded random words over `{a, b}` with lengths in `[2, max_len]`.
pub fn random_words(n: usize, max_len: usize, seed: u64) -> Vec<SymbolSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=max_len.max(2));
            let symbols = (0..len).map(|_| if rng.random_bool(0.5) { Symbol::A } else { Symbol::B }).collect();
            SymbolSequence { symbols, closure: Closure::FreeEnds }
        })
        .collect()
}

fn code_orbit(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let e = &cfg.experiment;
    let setup = Setup::build(e)?;
    let model = &setup.model;
    let mut csv = String::from("from,to,lambda,residual,samples,mean_time\n");
    let mut fits_ok = true;
    for from in [Symbol::A, Symbol::B] {
        for to in [Symbol::A, Symbol::B] {
            let f = model.map(from, to);
            fits_ok &= f.lambda < 1.0;
            let _ = writeln!(csv, "{},{},{},{},{},{}", from.as_char(), to.as_char(), fmt_num(f.lambda), fmt_num(f.residual), f.samples, fmt_num(f.mean_time));
        }
    }
    art.write("code-orbit-maps.csv", &csv)?;
    let lambda = model.lambda();
    let osc = e.oscillator().with_eps(0.0);
    let mut wcsv = String::from("word,length,contraction_factor,mismatch,round_trip\n");
    let (mut contract_ok, mut trips) = (true, 0);
    let words = random_words(cfg.checks.code_words, cfg.checks.code_length, e.seed);
    for word in &words {
        let run = contract_code(model, word, 0.0, 0.0, 200);
        let factor = run.contraction_factor();
        contract_ok &= factor <= lambda;
        let orbit = find_coded_orbit(&osc, model, word, e.h0, e.theta0)?;
        let round = encode(&orbit.events)?.symbols == word.symbols;
        trips += round as usize;
        let _ = writeln!(wcsv, "{word},{},{},{},{round}", word.len(), fmt_num(factor), fmt_num(orbit.mismatch));
    }
    art.write("code-orbit-words.csv", &wcsv)?;
    v.num("lambda", lambda);
    v.text("round_trips", format!("{trips}/{}", words.len()));
    let a = v.flag("lambda_below_one", fits_ok);
    let b = v.flag("contraction_within_lambda", contract_ok);
    let c = v.flag("round_trip_exact", trips == words.len());
    Ok(a && b && c)
}

fn write_run(art: &mut Artifacts, out: &RunOutput) -> Result<()> {
    art.write(&format!("{}-trace.csv", out.name), &trace_csv(&out.trace))?;
    art.write(&format!("{}-report.csv", out.name), &report_csv(&out.report))?;
    art.write(&format!("{}-corrections.csv", out.name), &corrections_csv(&out.corrections))?;
    art.write(&format!("{}-verdict.txt", out.name), &verdict(out))?;
    Ok(())
}

fn accelerate(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let e = &cfg.experiment;
    let setup = Setup::build(e)?;
    let run = run_acceleration(e, &setup, false)?;
    write_run(art, &run)?;
    if !run.trace.is_empty() {
        art.write("accelerate.svg", &drift_svg(&run.trace, &run.report))?;
    }
    let mut csv = String::from("eps,mean_delta_h,per_eps\n");
    let mut per_eps = Vec::new();
    for f in [0.5, 1.0, 2.0] {
        let eps = e.eps * f;
        let mean = if f == 1.0 { run.report.mean_delta_h } else { run_acceleration(&e.with_eps(eps), &setup, false)?.report.mean_delta_h };
        per_eps.push(mean / eps);
        let _ = writeln!(csv, "{},{},{}", fmt_num(eps), fmt_num(mean), fmt_num(mean / eps));
    }
    art.write("accelerate-sweep.csv", &csv)?;
    let r = &run.report;
    let bound = 0.5 * e.eps * e.a_omega.abs() * setup.spread();
    let reference = per_eps[1];
    let linear = reference > 0.0 && per_eps.iter().all(|p| (p / reference - 1.0).abs() <= 0.2);
    v.text("status", format!("{:?}", run.status));
    v.num("mean_delta_h", r.mean_delta_h);
    v.num("half_bound", bound);
    v.num("r2", r.r2);
    v.num("monotone_fraction", r.monotone_fraction);
    v.num("budget_ratio", r.budget_ratio());
    v.text("windows", r.delta_h.len());
    let a = v.flag("run_passed", run.passed());
    let b = v.flag("gain_above_half_bound", r.mean_delta_h >= bound && r.delta_h.len() >= 30 && r.r2 > 0.9);
    let c = v.flag("budget_below_tenth", r.budget_ratio() < 0.1);
    let d = v.flag("monotone", r.monotone_fraction >= 0.8);
    let g = v.flag("linear_in_eps", linear);
    Ok(a && b && c && d && g)
}

fn control(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let e = &cfg.experiment;
    let setup = Setup::build(e)?;
    let tenth = 0.1 * e.eps * e.a_omega.abs() * setup.spread();
    let mut ok = true;
    for (arm, key) in [(ControlArm::ConstantA, "constant_a"), (ControlArm::ConstantB, "constant_b")] {
        let run = run_control(e, &setup, arm)?;
        write_run(art, &run)?;
        v.num(&format!("{key}_mean_delta_h"), run.report.mean_delta_h);
        let completed = run.report.delta_h.len() >= 30;
        ok &= v.flag(&format!("{key}_ok"), completed && run.report.mean_delta_h.abs() <= tenth);
    }
    let zero = run_control(e, &setup, ControlArm::EpsilonZero)?;
    write_run(art, &zero)?;
    let worst = zero.report.delta_h.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    v.num("epsilon_zero_max_delta_h", worst);
    ok &= v.flag("epsilon_zero_ok", !zero.report.delta_h.is_empty() && worst < 1e-8);
    let normal = run_acceleration(e, &setup, false)?;
    let reversed = run_acceleration(e, &setup, true)?;
    write_run(art, &reversed)?;
    let ratio = reversed.report.mean_delta_h / normal.report.mean_delta_h;
    v.num("reversed_ratio", ratio);
    ok &= v.flag("reversed_ok", (-1.5..=-0.5).contains(&ratio));
    Ok(ok)
}

fn dissipate(cfg: &Config, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let (trace, rep) = run_dissipation(&cfg.experiment, cfg.checks.dissipate_time)?;
    art.write("dissipate-trace.csv", &trace_csv(&trace))?;
    v.num("slope", rep.slope);
    v.num("slope_standard_error", rep.slope_se);
    v.num("r2", rep.r2);
    v.text("exploratory", true);
    Ok(true)
}

fn report(out: &Path, art: &mut Artifacts, v: &mut Verdict) -> Result<bool> {
    let mut csv = String::from("command,passed\n");
    let (mut all, mut seen) = (true, 0);
    for c in Command::ALL.iter().filter(|c| **c != Command::Report) {
        let path = out.join(format!("{}.verdict", c.name()));
        let Ok(text) = std::fs::read_to_string(&path) else { continue };
        let passed = text.lines().any(|l| l.trim() == "passed = true");
        all &= passed;
        seen += 1;
        let _ = writeln!(csv, "{},{passed}", c.name());
    }
    art.write("report.csv", &csv)?;
    v.text("verdicts", seen);
    Ok(v.flag("all_passed", all && seen > 0))
}
