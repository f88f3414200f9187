//! Exact billiard dynamics on a curvilinear table: specular flow, periodic
//! orbits as critical points of chord length, their linearization, and
//! heteroclinic connections between them.

use crate::error::{Error, Result};
use crate::potential::{dot, norm, sub, BilliardTable, InteractionCoefficient, Vec2};
use nalgebra::{DMatrix, DVector};

/// Hits closer than this to a grazing angle are treated as singular.
pub const TANGENCY_TOL: f64 = 1e-3;
const CORNER_TOL: f64 = 1e-9;

pub type Mat2 = [[f64; 2]; 2];

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

pub fn mat_vec(a: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

pub fn det2(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn inv2(a: &Mat2) -> Mat2 {
    let d = det2(a);
    [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
}

/// Point particle moving with unit speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilliardState {
    pub pos: Vec2,
    pub dir: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounce {
    pub arc: usize,
    pub phi: f64,
    pub point: Vec2,
    /// Direction after reflection.
    pub dir_out: Vec2,
    /// Angle between the incoming ray and the inward normal.
    pub incidence: f64,
    /// Length of the flight leading to this bounce.
    pub flight: f64,
}

/// First boundary hit of the ray from `state`, without reflecting.
pub fn next_hit(table: &BilliardTable, state: &BilliardState) -> Result<(usize, f64, Vec2, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, arc) in table.arcs.iter().enumerate() {
        let f = sub(state.pos, arc.center);
        let b = dot(f, state.dir);
        let c = dot(f, f) - arc.radius * arc.radius;
        let disc = b * b - c;
        if b >= 0.0 || disc <= 0.0 {
            continue;
        }
        let t = -b - disc.sqrt();
        if t > 1e-13 && best.map_or(true, |(_, tb)| t < tb) {
            best = Some((j, t));
        }
    }
    let (j, t) = best.ok_or_else(|| Error::SingularOrbit("ray leaves the table".into()))?;
    let arc = &table.arcs[j];
    let p = [state.pos[0] + t * state.dir[0], state.pos[1] + t * state.dir[1]];
    let phi = (p[1] - arc.center[1]).atan2(p[0] - arc.center[0]);
    let off = arc.angular_offset(phi).abs();
    if off > arc.half_width - CORNER_TOL {
        return Err(Error::SingularOrbit(format!("hit near corner of arc {j}")));
    }
    Ok((j, phi, p, t))
}

/// Advances the billiard flow by `n_bounces` reflections.
pub fn advance_billiard(table: &BilliardTable, state: &BilliardState, n_bounces: usize) -> Result<Vec<Bounce>> {
    let mut s = *state;
    let mut out = Vec::with_capacity(n_bounces);
    for _ in 0..n_bounces {
        let (arc_idx, phi, p, t) = next_hit(table, &s)?;
        let n = table.arcs[arc_idx].normal(phi);
        let cos_in = -dot(s.dir, n);
        let incidence = cos_in.clamp(-1.0, 1.0).acos();
        if std::f64::consts::FRAC_PI_2 - incidence < TANGENCY_TOL {
            return Err(Error::SingularOrbit(format!("tangential hit on arc {arc_idx}")));
        }
        let d = [s.dir[0] + 2.0 * cos_in * n[0], s.dir[1] + 2.0 * cos_in * n[1]];
        let dn = norm(d);
        let d = [d[0] / dn, d[1] / dn];
        out.push(Bounce { arc: arc_idx, phi, point: p, dir_out: d, incidence, flight: t });
        s = BilliardState { pos: p, dir: d };
    }
    Ok(out)
}

/// Billiard map in `(phi, p)` coordinates, `p` being the tangential component
/// of the outgoing unit velocity.
pub fn billiard_map(table: &BilliardTable, arc: usize, phi: f64, p: f64) -> Result<(usize, f64, f64)> {
    if p.abs() >= 1.0 {
        return Err(Error::SingularOrbit("tangential launch".into()));
    }
    let a = &table.arcs[arc];
    let (t, n) = (a.tangent(phi), a.normal(phi));
    let q = (1.0 - p * p).sqrt();
    let dir = [p * t[0] + q * n[0], p * t[1] + q * n[1]];
    let b = advance_billiard(table, &BilliardState { pos: a.point(phi), dir }, 1)?[0];
    let tn = table.arcs[b.arc].tangent(b.phi);
    Ok((b.arc, b.phi, dot(b.dir_out, tn)))
}

/// Second derivatives of the chord length between two boundary points with
/// respect to their polar angles: `(L_aa, L_ab, L_bb)`.
fn chord_hessian(table: &BilliardTable, a: usize, pa: f64, b: usize, pb: f64) -> (f64, f64, f64, f64, f64, f64) {
    let (ca, cb) = (&table.arcs[a], &table.arcs[b]);
    let (xa, xb) = (ca.point(pa), cb.point(pb));
    let d = sub(xb, xa);
    let l = norm(d);
    let u = [d[0] / l, d[1] / l];
    let ta = [-ca.radius * pa.sin(), ca.radius * pa.cos()];
    let tb = [-cb.radius * pb.sin(), cb.radius * pb.cos()];
    let ta2 = [-ca.radius * pa.cos(), -ca.radius * pa.sin()];
    let tb2 = [-cb.radius * pb.cos(), -cb.radius * pb.sin()];
    let (uta, utb) = (dot(u, ta), dot(u, tb));
    let laa = (dot(ta, ta) - uta * uta) / l - dot(u, ta2);
    let lbb = (dot(tb, tb) - utb * utb) / l + dot(u, tb2);
    let lab = -(dot(ta, tb) - uta * utb) / l;
    (l, -uta, utb, laa, lab, lbb)
}

/// Length, gradient and Hessian of the total chord length of a bounce sequence.
fn length_derivatives(table: &BilliardTable, arcs: &[usize], phis: &[f64], cyclic: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = arcs.len();
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let mut total = 0.0;
    let segs = if cyclic { n } else { n - 1 };
    for i in 0..segs {
        let j = (i + 1) % n;
        let (l, ga, gb, laa, lab, lbb) = chord_hessian(table, arcs[i], phis[i], arcs[j], phis[j]);
        total += l;
        g[i] += ga;
        g[j] += gb;
        h[(i, i)] += laa;
        h[(j, j)] += lbb;
        h[(i, j)] += lab;
        h[(j, i)] += lab;
    }
    (total, g, h)
}

fn newton_critical_point(
    table: &BilliardTable,
    arcs: &[usize],
    phis: &mut [f64],
    cyclic: bool,
    pinned: &[usize],
    max_iter: usize,
) -> Result<f64> {
    let free: Vec<usize> = (0..arcs.len()).filter(|i| !pinned.contains(i)).collect();
    let m = free.len();
    for _ in 0..max_iter {
        let (_, g, h) = length_derivatives(table, arcs, phis, cyclic);
        let gf = DVector::from_iterator(m, free.iter().map(|&i| g[i]));
        let hf = DMatrix::from_fn(m, m, |r, c| h[(free[r], free[c])]);
        let step = hf
            .lu()
            .solve(&(-gf.clone()))
            .ok_or_else(|| Error::NoConvergence("singular length Hessian".into()))?;
        let max = step.amax();
        let scale = if max > 0.2 { 0.2 / max } else { 1.0 };
        for (k, &i) in free.iter().enumerate() {
            phis[i] += scale * step[k];
        }
        if max < 1e-15 || (scale == 1.0 && gf.amax() < 1e-15) {
            break;
        }
    }
    let (_, g, _) = length_derivatives(table, arcs, phis, cyclic);
    let res = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
    if res > 1e-11 {
        return Err(Error::NoConvergence(format!("length gradient {res:e}")));
    }
    Ok(res)
}

/// Checks that consecutive bounce points are joined by admissible flights
/// obeying the reflection law.
fn check_itinerary(table: &BilliardTable, arcs: &[usize], phis: &[f64], cyclic: bool) -> Result<f64> {
    let n = arcs.len();
    let pts: Vec<Vec2> = (0..n).map(|i| table.arcs[arcs[i]].point(phis[i])).collect();
    let segs = if cyclic { n } else { n - 1 };
    let mut worst: f64 = 0.0;
    for i in 0..segs {
        let j = (i + 1) % n;
        let d = sub(pts[j], pts[i]);
        let l = norm(d);
        let dir = [d[0] / l, d[1] / l];
        let (arc, _, p, _) = next_hit(table, &BilliardState { pos: pts[i], dir })?;
        if arc != arcs[j] {
            return Err(Error::SingularOrbit(format!("flight {i} blocked by arc {arc}")));
        }
        worst = worst.max(norm(sub(p, pts[j])));
        let b = advance_billiard(table, &BilliardState { pos: pts[i], dir }, 1)?[0];
        if cyclic || j + 1 < n {
            let k = (j + 1) % n;
            let d2 = sub(pts[k], pts[j]);
            let l2 = norm(d2);
            worst = worst.max(norm(sub(b.dir_out, [d2[0] / l2, d2[1] / l2])));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub arcs: Vec<usize>,
    pub phis: Vec<f64>,
    pub points: Vec<Vec2>,
    /// Total flight length of one period.
    pub length: f64,
    /// Mismatch after replaying one period with the billiard flow.
    pub closure: f64,
}

impl PeriodicOrbit {
    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    /// Outgoing direction at bounce `i`.
    pub fn direction(&self, i: usize) -> Vec2 {
        let j = (i + 1) % self.len();
        let d = sub(self.points[j], self.points[i]);
        let l = norm(d);
        [d[0] / l, d[1] / l]
    }

    /// Index of the first bounce on `arc`.
    pub fn index_of_arc(&self, arc: usize) -> Option<usize> {
        self.arcs.iter().position(|&a| a == arc)
    }
}

/// Finds the periodic orbit with the given cyclic arc itinerary by Newton
/// iteration on the stationarity of total chord length.
pub fn find_periodic_orbit(table: &BilliardTable, code: &[usize], guess: Option<&[f64]>) -> Result<PeriodicOrbit> {
    if code.len() < 2 {
        return Err(Error::Domain("period must be at least two".into()));
    }
    if code.iter().any(|&a| a >= table.len()) {
        return Err(Error::Domain("unknown arc in code".into()));
    }
    let mut phis: Vec<f64> = match guess {
        Some(g) if g.len() == code.len() => g.to_vec(),
        Some(_) => return Err(Error::Domain("guess length differs from code length".into())),
        None => code.iter().map(|&a| table.arcs[a].phi_mid).collect(),
    };
    newton_critical_point(table, code, &mut phis, true, &[], 50)?;
    for (i, &a) in code.iter().enumerate() {
        if !table.arcs[a].contains_angle(phis[i]) {
            return Err(Error::SingularOrbit(format!("bounce {i} falls off arc {a}")));
        }
    }
    check_itinerary(table, code, &phis, true)?;
    let points: Vec<Vec2> = code.iter().zip(&phis).map(|(&a, &p)| table.arcs[a].point(p)).collect();
    let (length, _, _) = length_derivatives(table, code, &phis, true);
    let mut orbit = PeriodicOrbit { arcs: code.to_vec(), phis, points, length, closure: 0.0 };
    let start = BilliardState { pos: orbit.points[0], dir: orbit.direction(0) };
    let replay = advance_billiard(table, &start, code.len())?;
    let last = replay.last().unwrap();
    orbit.closure = norm(sub(last.point, orbit.points[0])).max(norm(sub(last.dir_out, start.dir)));
    if replay.iter().zip(code.iter().cycle().skip(1)).any(|(b, &a)| b.arc != a) {
        return Err(Error::SingularOrbit("replay follows a different itinerary".into()));
    }
    Ok(orbit)
}

/// Jacobian of the billiard map from bounce `(a, pa)` to bounce `(b, pb)` in
/// arclength / tangential-momentum coordinates.
pub fn bounce_jacobian(table: &BilliardTable, a: usize, pa: f64, b: usize, pb: f64) -> Mat2 {
    let (_, _, _, laa, lab, lbb) = chord_hessian(table, a, pa, b, pb);
    let (ra, rb) = (table.arcs[a].radius, table.arcs[b].radius);
    let (x, y, z) = (laa / (ra * ra), lab / (ra * rb), lbb / (rb * rb));
    [[-x / y, -1.0 / y], [y - x * z / y, -z / y]]
}

/// Linearized return map of `orbit` based at bounce `start`.
pub fn monodromy(table: &BilliardTable, orbit: &PeriodicOrbit, start: usize) -> Mat2 {
    let n = orbit.len();
    let mut m: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
    for k in 0..n {
        let i = (start + k) % n;
        let j = (i + 1) % n;
        let jac = bounce_jacobian(table, orbit.arcs[i], orbit.phis[i], orbit.arcs[j], orbit.phis[j]);
        m = mat_mul(&jac, &m);
    }
    m
}

/// Eigen-data of a hyperbolic 2x2 map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperbolicity {
    pub trace: f64,
    pub det: f64,
    /// Expanding eigenvalue.
    pub lambda: f64,
    pub unstable: [f64; 2],
    pub stable: [f64; 2],
}

pub fn hyperbolicity(m: &Mat2) -> Result<Hyperbolicity> {
    let tr = m[0][0] + m[1][1];
    let det = det2(m);
    let disc = tr * tr - 4.0 * det;
    if disc <= 0.0 {
        return Err(Error::Domain(format!("elliptic or parabolic map (trace {tr})")));
    }
    let sq = disc.sqrt();
    let (l1, l2) = ((tr + sq) / 2.0, (tr - sq) / 2.0);
    let (lu, ls) = if l1.abs() > l2.abs() { (l1, l2) } else { (l2, l1) };
    let vec = |l: f64| -> [f64; 2] {
        let v = if (l - m[0][0]).abs() + m[0][1].abs() > (l - m[1][1]).abs() + m[1][0].abs() {
            [m[0][1], l - m[0][0]]
        } else {
            [l - m[1][1], m[1][0]]
        };
        let n = v[0].hypot(v[1]);
        [v[0] / n, v[1] / n]
    };
    Ok(Hyperbolicity { trace: tr, det, lambda: lu, unstable: vec(lu), stable: vec(ls) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heteroclinic {
    pub arcs: Vec<usize>,
    pub phis: Vec<f64>,
    pub points: Vec<Vec2>,
    /// Index of the first bounce of the arrival itinerary.
    pub bridge: usize,
    /// Angle between the pushed-forward unstable and pulled-back stable directions.
    pub angle: f64,
    /// Largest position or reflection-law mismatch along the itinerary.
    pub mismatch: f64,
}

fn rotated(orbit: &PeriodicOrbit, first: usize) -> Vec<usize> {
    let n = orbit.len();
    (0..n).map(|k| (first + k) % n).collect()
}

/// Finds a connection leaving `from` after a bounce on arc `from_exit` and
/// entering `to` with a bounce on arc `to_entry`, as a pinned bounce sequence
/// with `reps` periods on each side.
pub fn find_heteroclinic(
    table: &BilliardTable,
    from: &PeriodicOrbit,
    from_exit: usize,
    to: &PeriodicOrbit,
    to_entry: usize,
    reps: usize,
) -> Result<Heteroclinic> {
    let exit = from.index_of_arc(from_exit).ok_or_else(|| Error::Domain("exit arc not on orbit".into()))?;
    let entry = to.index_of_arc(to_entry).ok_or_else(|| Error::Domain("entry arc not on orbit".into()))?;
    let from_idx = rotated(from, (exit + 1) % from.len());
    let to_idx = rotated(to, entry);
    let mut arcs = Vec::new();
    let mut phis = Vec::new();
    for _ in 0..reps {
        for &i in &from_idx {
            arcs.push(from.arcs[i]);
            phis.push(from.phis[i]);
        }
    }
    let bridge = arcs.len();
    for _ in 0..reps {
        for &i in &to_idx {
            arcs.push(to.arcs[i]);
            phis.push(to.phis[i]);
        }
    }
    let n = arcs.len();
    newton_critical_point(table, &arcs, &mut phis, false, &[0, n - 1], 100)?;
    for (i, &a) in arcs.iter().enumerate() {
        if !table.arcs[a].contains_angle(phis[i]) {
            return Err(Error::SingularOrbit(format!("bounce {i} falls off arc {a}")));
        }
    }
    let mismatch = check_itinerary(table, &arcs, &phis, false)?;

    let mu = hyperbolicity(&monodromy(table, from, from_idx[0]))?;
    let ms = hyperbolicity(&monodromy(table, to, to_idx[0]))?;
    let mut vu = mu.unstable;
    for i in 0..bridge {
        vu = mat_vec(&bounce_jacobian(table, arcs[i], phis[i], arcs[i + 1], phis[i + 1]), vu);
        let l = vu[0].hypot(vu[1]);
        vu = [vu[0] / l, vu[1] / l];
    }
    // the last pinned bounce sits on `to` at its base point after `reps` periods
    let mut vs = ms.stable;
    for i in (bridge..n - 1).rev() {
        let jac = bounce_jacobian(table, arcs[i], phis[i], arcs[i + 1], phis[i + 1]);
        vs = mat_vec(&inv2(&jac), vs);
        let l = vs[0].hypot(vs[1]);
        vs = [vs[0] / l, vs[1] / l];
    }
    let angle = (vu[0] * vs[0] + vu[1] * vs[1]).abs().min(1.0).acos();
    let points = arcs.iter().zip(&phis).map(|(&a, &p)| table.arcs[a].point(p)).collect();
    Ok(Heteroclinic { arcs, phis, points, bridge, angle, mismatch })
}

/// Time average of `k` along a periodic orbit traversed at unit speed.
pub fn orbit_average(orbit: &PeriodicOrbit, k: &InteractionCoefficient) -> f64 {
    let n = orbit.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let (a, b) = (orbit.points[i], orbit.points[(i + 1) % n]);
        let l = norm(sub(b, a));
        num += l * k.value([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        den += l;
    }
    num / den
}

/// The two hyperbolic two-bounce orbits of the default table and their
/// connections, in the order `(L_a, L_b, a->b, b->a)`.
pub fn default_orbits(table: &BilliardTable) -> Result<(PeriodicOrbit, PeriodicOrbit, Heteroclinic, Heteroclinic)> {
    let la = find_periodic_orbit(table, &[0, 2], None)?;
    let lb = find_periodic_orbit(table, &[1, 3], None)?;
    let hab = find_heteroclinic(table, &la, 0, &lb, 1, 8)?;
    let hba = find_heteroclinic(table, &lb, 3, &la, 0, 8)?;
    Ok((la, lb, hab, hba))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bounce_orbits() {
        let t = BilliardTable::default_table();
        let (la, lb, hab, hba) = default_orbits(&t).unwrap();
        assert!(la.closure < 1e-10 && lb.closure < 1e-10);
        assert!((la.length - 2.0).abs() < 1e-12);
        assert!((lb.length - 1.8).abs() < 1e-12);
        let k = InteractionCoefficient::default();
        assert!(orbit_average(&la, &k).abs() < 1e-14);
        assert!((orbit_average(&lb, &k) + 0.2).abs() < 1e-14);
        assert!(hab.angle > 1e-3 && hba.angle > 1e-3);
        assert!(hab.mismatch < 1e-10 && hba.mismatch < 1e-10);
    }

    #[test]
    fn monodromy_matches_finite_differences() {
        let t = BilliardTable::default_table();
        let la = find_periodic_orbit(&t, &[0, 2], None).unwrap();
        let m = monodromy(&t, &la, 0);
        let hy = hyperbolicity(&m).unwrap();
        assert!((hy.det - 1.0).abs() < 1e-10);
        assert!(hy.trace.abs() > 2.0);
        let r = t.arcs[la.arcs[0]].radius;
        let map = |ds: f64, dp: f64| {
            let mut state = (la.arcs[0], la.phis[0] + ds / r, dp);
            for _ in 0..2 {
                state = billiard_map(&t, state.0, state.1, state.2).unwrap();
            }
            (crate::potential::wrap_angle(state.1 - la.phis[0]) * r, state.2)
        };
        let h = 1e-6;
        for col in 0..2 {
            let (dp, dm) = if col == 0 { (map(h, 0.0), map(-h, 0.0)) } else { (map(0.0, h), map(0.0, -h)) };
            let fd = [(dp.0 - dm.0) / (2.0 * h), (dp.1 - dm.1) / (2.0 * h)];
            for row in 0..2 {
                assert!((fd[row] - m[row][col]).abs() < 1e-5 * m[row][col].abs().max(1.0));
            }
        }
    }

    #[test]
    fn grazing_hit_is_singular() {
        let t = BilliardTable::default_table();
        let arc = &t.arcs[0];
        let (phi, n, tang) = (arc.phi_mid, arc.normal(arc.phi_mid), arc.tangent(arc.phi_mid));
        let p = arc.point(phi);
        let pos = [p[0] + 0.1 * tang[0] - 1e-8 * n[0], p[1] + 0.1 * tang[1] - 1e-8 * n[1]];
        let grazing = BilliardState { pos, dir: [-tang[0], -tang[1]] };
        assert!(matches!(advance_billiard(&t, &grazing, 1), Err(Error::SingularOrbit(_))));
        let steep = BilliardState { pos: [0.0, 0.0], dir: [1.0, 0.0] };
        let b = advance_billiard(&t, &steep, 3).unwrap();
        assert_eq!(b.iter().map(|b| b.arc).collect::<Vec<_>>(), vec![0, 2, 0]);
    }
}
