use chaospump::billiard::{default_orbits, hyperbolicity, monodromy, orbit_average};
use chaospump::cli::{bowl_oscillator, dispatch, region_points, Command, CONSERVE_RTOL, FORCING_OMEGAS, LIMIT_ENERGIES, PICARD_DELTAS, RATE_EPS};
use chaospump::config::Config;
use chaospump::dynamics::{shortened_trace, StepperOptions};
use chaospump::experiments::{billiard_limit, energy_rate_residual, run_acceleration, run_control, ControlArm, DriftReport, Setup};
use chaospump::field::{ball_cosine_integral, ball_cosine_zero, compute_a_omega, kernel_first_moment, kernel_mass, kernel_p};
use chaospump::manifold::{invariance_defect, reduction_divergence, solve_invariant_history, ManifoldGrid, Region};
use chaospump::potential::{BilliardTable, PotentialModel};
use chaospump::symbolic::{contract_code, encode, find_coded_orbit, Closure, Symbol, SymbolSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

type Check = Result<(bool, String), String>;

fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn slope_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

fn loglog(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    slope_fit(&lx, &ly).0
}

/// Hit-or-miss volume of two unit balls at distance `s`, times `s`.
fn overlap_mc(s: f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 1.0 - 0.5 * s;
    let box_vol = 2.0 * half * 4.0;
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-1.0..1.0);
        let z = rng.random_range(-1.0..1.0);
        let r = y * y + z * z;
        if (x - 0.5 * s).powi(2) + r <= 1.0 && (x + 0.5 * s).powi(2) + r <= 1.0 {
            hits += 1;
        }
    }
    let f = hits as f64 / samples as f64;
    (s * box_vol * f, s * box_vol * (f * (1.0 - f) / samples as f64).sqrt())
}

fn c1_kernel() -> Check {
    let mut worst: f64 = 0.0;
    for i in 1..=7 {
        let s = 0.25 * i as f64;
        let (mc, se) = overlap_mc(s, 10_000_000, 1000 + i);
        let p = kernel_p(s).map_err(|e| e.to_string())?;
        worst = worst.max(((mc - p) / se).abs());
    }
    let mass = simpson(0.0, 2.0, 2000, |s| kernel_p(s).unwrap());
    let moment = simpson(0.0, 2.0, 2000, |s| s * kernel_p(s).unwrap());
    let mass_err = (mass - 8.0 * PI / 15.0).abs().max((kernel_mass() - 8.0 * PI / 15.0).abs());
    let moment_err = (moment - 4.0 * PI / 9.0).abs().max((kernel_first_moment() - 4.0 * PI / 9.0).abs());
    let ok = worst < 3.0 && mass_err < 1e-6 && moment_err < 1e-6;
    Ok((ok, format!("max |z| {worst:.3}, mass error {mass_err:.1e}, first moment error {moment_err:.1e}")))
}

/// Root of `tan w = w` on its first positive branch by bisection of `sin w - w cos w`.
fn first_tan_root() -> f64 {
    let f = |w: f64| w.sin() - w * w.cos();
    let (mut a, mut b) = (PI + 0.1, 1.5 * PI - 1e-9);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(a) * f(m) <= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

fn c2_forcing() -> Check {
    let mut worst: f64 = 0.0;
    for w in FORCING_OMEGAS {
        let slab = simpson(-1.0, 1.0, 4000, |y| (w * y).cos() * PI * (1.0 - y * y));
        worst = worst.max(((ball_cosine_integral(w) - slab) / slab).abs());
    }
    let root = first_tan_root();
    let w0 = ball_cosine_zero(1);
    let a0 = compute_a_omega(1.0, 1.0, w0);
    let ok = worst < 1e-6 && (w0 - root).abs() < 1e-6 && a0.degenerate;
    Ok((ok, format!("max relative error {worst:.1e}, zero {w0:.10} vs bisection {root:.10}, degenerate {}", a0.degenerate)))
}

fn fd_gradient_defect(pot: &PotentialModel, table: &BilliardTable, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut seen = 0;
    while seen < n {
        let q = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
        if !table.contains(q) || pot.value(q) >= 0.5 * pot.saturation {
            continue;
        }
        seen += 1;
        let gap = table.arcs.iter().map(|a| ((q[0] - a.center[0]).hypot(q[1] - a.center[1]) - a.radius).abs()).fold(f64::INFINITY, f64::min);
        let d = 1e-3 * gap.min(pot.sigma());
        let (_, g) = pot.eval(q);
        for i in 0..2 {
            let at = |k: f64| {
                let mut x = q;
                x[i] += k * d;
                pot.value(x)
            };
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * d);
            worst = worst.max((g[i] - fd).abs() / (1.0 + g[i].abs()));
        }
    }
    worst
}

fn c3_conserve(cfg: &Config) -> Check {
    let osc = cfg.experiment.oscillator().with_eps(0.0);
    let table = &osc.potential.table;
    let (q, _) = table.incenter();
    let opts = StepperOptions { rtol: CONSERVE_RTOL, atol: CONSERVE_RTOL, ..Default::default() };
    let mut worst: f64 = 0.0;
    for h in [1.0, 100.0] {
        let s = osc.state_at_energy(q, [0.6, 0.8], h, 0.0, 0.0).ok_or("start above the energy surface")?;
        let trace = shortened_trace(&osc, &s, 1e3, 1.0, opts).map_err(|e| e.to_string())?;
        let h0 = trace.h[0];
        let drift = trace.h.iter().map(|e| ((e - h0) / h0).abs()).fold(0.0, f64::max);
        worst = worst.max(drift);
    }
    let g = fd_gradient_defect(&osc.potential, table, 1000, 7);
    Ok((worst < 1e-9 && g < 1e-6, format!("max relative drift {worst:.2e}, gradient defect {g:.2e}")))
}

fn c4_billiard(cfg: &Config) -> Check {
    let t = &cfg.experiment.table;
    let (la, lb, hab, hba) = default_orbits(t).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, o, i, j) in [("a", &la, 0, 2), ("b", &lb, 1, 3)] {
        let (ci, cj) = (t.arcs[i].center, t.arcs[j].center);
        let r = t.arcs[i].radius;
        let flight = (ci[0] - cj[0]).hypot(ci[1] - cj[1]) - 2.0 * r;
        let expect = (2.0 + 2.0 * flight / r).powi(2) - 2.0;
        let hy = hyperbolicity(&monodromy(t, o, 0)).map_err(|e| e.to_string())?;
        let mid = [0.5 * (ci[0] + cj[0]), 0.5 * (ci[1] + cj[1])];
        let k = &cfg.experiment.coupling;
        let v = orbit_average(o, k);
        let v_expect = k.a0 + k.a1 * mid[0] + k.a2 * mid[1];
        ok &= o.closure < 1e-10
            && hy.trace.abs() > 2.0
            && (hy.det - 1.0).abs() < 1e-8
            && (hy.trace.abs() / expect - 1.0).abs() < 1e-8
            && (o.length - 2.0 * flight).abs() < 1e-10
            && (v - v_expect).abs() < 1e-10;
        notes.push(format!("L_{name} trace {:.6} (expected {expect:.6})", hy.trace.abs()));
    }
    for h in [&hab, &hba] {
        ok &= h.angle > 1e-3 && h.mismatch < 1e-10;
    }
    let spread = (orbit_average(&la, &cfg.experiment.coupling) - orbit_average(&lb, &cfg.experiment.coupling)).abs();
    ok &= spread > 0.05;
    notes.push(format!("angles {:.3e}/{:.3e}, |v_a - v_b| {spread:.3}", hab.angle, hba.angle));
    Ok((ok, notes.join(", ")))
}

fn c5_limit(cfg: &Config) -> Check {
    let r = billiard_limit(&cfg.experiment.table, &LIMIT_ENERGIES, 100, cfg.checks.limit_spread, cfg.experiment.seed).map_err(|e| e.to_string())?;
    let monotone = r.distances.windows(2).all(|w| w[1] < w[0]);
    let list: Vec<String> = r.distances.iter().map(|d| format!("{d:.2e}")).collect();
    Ok((monotone, format!("sup distances {}", list.join(" > "))))
}

fn c6_reduce(cfg: &Config) -> Check {
    let m = &cfg.manifold;
    let osc = bowl_oscillator(cfg);
    let region = Region::around_minimum(&osc, m.energy).map_err(|e| e.to_string())?;
    let grid = ManifoldGrid::new(region.clone(), m.nodes, m.phase_nodes, m.steps).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for delta in PICARD_DELTAS {
        let (_, rep) = solve_invariant_history(&osc, &grid, delta, m.max_iter, m.tol).map_err(|e| e.to_string())?;
        ratios.push(rep.residuals[1] / rep.residuals[0]);
    }
    let slope = loglog(&PICARD_DELTAS, &ratios);
    let (mu, rep) = solve_invariant_history(&osc, &grid, m.eps * m.eps, m.max_iter, m.tol).map_err(|e| e.to_string())?;
    let points = region_points(&region, 5, 0.3, cfg.experiment.seed);
    let defect = invariance_defect(&osc, &mu, &points).map_err(|e| e.to_string())?;
    let x0 = region_points(&region, 1, 0.3, cfg.experiment.seed + 1)[0];
    let period = 2.0 * PI / osc.omega;
    let div = reduction_divergence(&osc, &mu, x0, period).map_err(|e| e.to_string())?;
    let half = osc.with_eps(0.5 * m.eps);
    let (mu_half, _) = solve_invariant_history(&half, &grid, half.eps * half.eps, m.max_iter, m.tol).map_err(|e| e.to_string())?;
    let div_half = reduction_divergence(&half, &mu_half, x0, period).map_err(|e| e.to_string())?;
    let quarter = div / div_half;
    let ok = (slope - 1.0).abs() <= 0.2 && rep.converged && defect < 1e-6 && div < 1e-6 && (quarter / 4.0 - 1.0).abs() <= 0.3;
    Ok((ok, format!("ratio slope {slope:.3}, defect {defect:.2e}, divergence {div:.2e}, halving ratio {quarter:.2}")))
}

fn c7_rate(cfg: &Config) -> Check {
    let opts = StepperOptions { rtol: cfg.experiment.rtol, atol: cfg.experiment.rtol, ..Default::default() };
    let base = cfg.experiment.oscillator();
    let mut res = Vec::new();
    for eps in RATE_EPS {
        let r = energy_rate_residual(&base.with_eps(eps), 1.0, cfg.checks.rate_windows, opts).map_err(|e| e.to_string())?;
        let rms = (r.windows.iter().map(|w| w * w).sum::<f64>() / r.windows.len() as f64).sqrt();
        res.push(rms);
    }
    let slope = loglog(&RATE_EPS, &res);
    Ok(((slope - 2.0).abs() <= 0.2, format!("log-log slope {slope:.3}")))
}

fn random_word(rng: &mut ChaCha8Rng, max_len: usize) -> SymbolSequence {
    let len = rng.random_range(2..=max_len);
    let symbols = (0..len).map(|_| if rng.random_bool(0.5) { Symbol::A } else { Symbol::B }).collect();
    SymbolSequence { symbols, closure: Closure::FreeEnds }
}

fn c8_symbolic(cfg: &Config, setup: &Setup) -> Check {
    let e = &cfg.experiment;
    let model = &setup.model;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for from in [Symbol::A, Symbol::B] {
        for to in [Symbol::A, Symbol::B] {
            let l = model.map(from, to).lambda;
            worst = worst.max(l);
            ok &= l < 1.0;
        }
    }
    let lambda = model.lambda();
    let osc = e.oscillator().with_eps(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut trips = 0;
    let n = 20;
    for _ in 0..n {
        let word = random_word(&mut rng, 32);
        ok &= contract_code(model, &word, 0.0, 0.0, 200).contraction_factor() <= lambda;
        let orbit = find_coded_orbit(&osc, model, &word, e.h0, e.theta0).map_err(|err| format!("{word}: {err}"))?;
        if encode(&orbit.events).map_err(|err| err.to_string())?.symbols == word.symbols {
            trips += 1;
        }
    }
    ok &= trips == n;
    Ok((ok, format!("max lambda {worst:.4}, round trips {trips}/{n}")))
}

/// Mean gain per window and the R² of cumulative energy against window count.
fn gain_and_r2(r: &DriftReport) -> (f64, f64) {
    let n = r.delta_h.len();
    let mean = r.delta_h.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = (0..=n).map(|k| k as f64).collect();
    let mut y = vec![0.0];
    for d in &r.delta_h {
        y.push(y.last().unwrap() + d);
    }
    (mean, slope_fit(&x, &y).1)
}

fn c9_acceleration(cfg: &Config, setup: &Setup) -> Check {
    let e = &cfg.experiment;
    let bound = e.eps * e.a_omega.abs() * setup.spread();
    let normal = run_acceleration(e, setup, false).map_err(|err| err.to_string())?;
    let (mean, r2) = gain_and_r2(&normal.report);
    let windows = normal.report.delta_h.len();
    let budget = normal.report.budget_ratio();
    let mut ok = windows >= 30 && mean >= 0.5 * bound && r2 > 0.9 && budget < 0.1;
    let mut notes = vec![format!("gain {mean:.3e} vs half bound {:.3e} over {windows} windows, R2 {r2:.4}, budget {budget:.2e}", 0.5 * bound)];
    for (arm, name) in [(ControlArm::ConstantA, "a"), (ControlArm::ConstantB, "b")] {
        let run = run_control(e, setup, arm).map_err(|err| err.to_string())?;
        let (m, _) = gain_and_r2(&run.report);
        ok &= run.report.delta_h.len() >= 30 && m.abs() <= 0.1 * bound;
        notes.push(format!("constant-{name} {m:.2e}"));
    }
    let reversed = run_acceleration(e, setup, true).map_err(|err| err.to_string())?;
    let ratio = gain_and_r2(&reversed.report).0 / mean;
    ok &= (-1.5..=-0.5).contains(&ratio);
    notes.push(format!("reversed ratio {ratio:.3}"));
    let mut per_eps = Vec::new();
    for f in [0.5, 2.0] {
        let run = run_acceleration(&e.with_eps(e.eps * f), setup, false).map_err(|err| err.to_string())?;
        per_eps.push(gain_and_r2(&run.report).0 / (e.eps * f));
    }
    let reference = mean / e.eps;
    let linear = per_eps.iter().all(|p| (p / reference - 1.0).abs() <= 0.2);
    ok &= linear;
    notes.push(format!("gain/eps {:.4} {reference:.4} {:.4}", per_eps[0], per_eps[1]));
    Ok((ok, notes.join(", ")))
}

const LIGHT: &str = "\
[checks]
mc_samples = 100000
conserve_time = 50
limit_samples = 10
rate_windows = 3
dissipate_time = 20
code_words = 2
code_length = 6
[manifold]
phase_nodes = 4
steps = 4
max_iter = 6
[run]
max_windows = 6
";

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn c10_determinism() -> Check {
    let cfg = Config::parse(LIGHT, |_| None).map_err(|e| e.to_string())?;
    let root = std::env::temp_dir().join(format!("chaospump-determinism-{}", std::process::id()));
    let dirs: Vec<PathBuf> = (0..2).map(|i| root.join(i.to_string())).collect();
    let mut differing = Vec::new();
    for command in Command::ALL {
        for d in &dirs {
            dispatch(command, &cfg, d, 1).map_err(|e| format!("{}: {e}", command.name()))?;
        }
    }
    let (a, b) = (csv_files(&dirs[0]), csv_files(&dirs[1]));
    let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        if na != nb || ba != bb {
            differing.push(na.clone());
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    let ok = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    Ok((ok, format!("{} csv files compared, {} differ {:?}", names.len(), differing.len(), differing)))
}

fn main() -> ExitCode {
    let cfg = Config::default();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, res: Check| {
        let secs = start.elapsed().as_secs_f64();
        let line = match res {
            Ok((true, detail)) => format!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1} s]"),
            Ok((false, detail)) => {
                failures += 1;
                format!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1} s]")
            }
            Err(err) => {
                failures += 1;
                format!("criterion {n:>2} {name}: FAIL (error: {err}) [{secs:.1} s]")
            }
        };
        println!("{line}");
    };
    let t = Instant::now();
    report(1, "kernel identity", t, c1_kernel());
    let t = Instant::now();
    report(2, "forcing amplitude", t, c2_forcing());
    let t = Instant::now();
    report(3, "conservative core", t, c3_conserve(&cfg));
    let t = Instant::now();
    report(4, "billiard structure", t, c4_billiard(&cfg));
    let t = Instant::now();
    report(5, "billiard limit", t, c5_limit(&cfg));
    let t = Instant::now();
    report(6, "history reduction", t, c6_reduce(&cfg));
    let t = Instant::now();
    report(7, "energy-rate law", t, c7_rate(&cfg));
    let t = Instant::now();
    let setup = Setup::build(&cfg.experiment);
    let setup_secs = t.elapsed().as_secs_f64();
    match &setup {
        Ok(s) => {
            let t = Instant::now();
            report(8, "symbolic machinery", t, c8_symbolic(&cfg, s));
            let t = Instant::now();
            report(9, "phase-controlled acceleration", t, c9_acceleration(&cfg, s));
        }
        Err(e) => {
            let t = Instant::now();
            report(8, "symbolic machinery", t, Err(e.to_string()));
            report(9, "phase-controlled acceleration", t, Err(e.to_string()));
        }
    }
    println!("(cross-form model built in {setup_secs:.1} s)");
    let t = Instant::now();
    report(10, "determinism", t, c10_determinism());
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
