//! Curvilinear billiard tables bounded by concave circular arcs, and smooth
//! potentials that steepen into hard walls along those arcs.

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

#[inline]
pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}
#[inline]
pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
#[inline]
pub(crate) fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Boundary arc lying on a circle; the disk interior is outside the table.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub center: Vec2,
    pub radius: f64,
    /// Polar angle of the arc midpoint, measured at the circle center.
    pub phi_mid: f64,
    /// Angular half-width of the arc.
    pub half_width: f64,
}

impl Arc {
    pub fn point(&self, phi: f64) -> Vec2 {
        [self.center[0] + self.radius * phi.cos(), self.center[1] + self.radius * phi.sin()]
    }

    /// Unit normal pointing into the table.
    pub fn normal(&self, phi: f64) -> Vec2 {
        [phi.cos(), phi.sin()]
    }

    /// Unit tangent in the direction of increasing `phi`.
    pub fn tangent(&self, phi: f64) -> Vec2 {
        [-phi.sin(), phi.cos()]
    }

    /// Signed distance from the circle, positive on the table side.
    pub fn gap(&self, q: Vec2) -> f64 {
        norm(sub(q, self.center)) - self.radius
    }

    /// Offset of `phi` from the arc midpoint, wrapped to `(-pi, pi]`.
    pub fn angular_offset(&self, phi: f64) -> f64 {
        wrap_angle(phi - self.phi_mid)
    }

    pub fn contains_angle(&self, phi: f64) -> bool {
        self.angular_offset(phi).abs() <= self.half_width
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut x = a.rem_euclid(tau);
    if x > std::f64::consts::PI {
        x -= tau;
    }
    x
}

/// Closed table `D` bounded by consecutive arcs; arc `j` meets arc `j+1` at `corners[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilliardTable {
    pub arcs: Vec<Arc>,
    pub corners: Vec<Vec2>,
}

impl BilliardTable {
    /// Builds a table from circles listed counterclockwise around the table.
    pub fn from_circles(circles: &[(Vec2, f64)]) -> Result<Self> {
        let n = circles.len();
        if n < 3 {
            return Err(Error::InvalidTable("need at least three arcs".into()));
        }
        if circles.iter().any(|c| !(c.1 > 0.0)) {
            return Err(Error::InvalidTable("radii must be positive".into()));
        }
        let centroid = {
            let s = circles.iter().fold([0.0, 0.0], |acc, c| [acc[0] + c.0[0], acc[1] + c.0[1]]);
            [s[0] / n as f64, s[1] / n as f64]
        };
        let mut corners = Vec::with_capacity(n);
        for j in 0..n {
            let (c0, r0) = circles[j];
            let (c1, r1) = circles[(j + 1) % n];
            let d = norm(sub(c1, c0));
            if d >= r0 + r1 || d <= (r0 - r1).abs() {
                return Err(Error::InvalidTable(format!("circles {j} and {} do not intersect", (j + 1) % n)));
            }
            let a = (r0 * r0 - r1 * r1 + d * d) / (2.0 * d);
            let h = (r0 * r0 - a * a).sqrt();
            let e = [(c1[0] - c0[0]) / d, (c1[1] - c0[1]) / d];
            let m = [c0[0] + a * e[0], c0[1] + a * e[1]];
            let p1 = [m[0] - h * e[1], m[1] + h * e[0]];
            let p2 = [m[0] + h * e[1], m[1] - h * e[0]];
            let pick = if norm(sub(p1, centroid)) < norm(sub(p2, centroid)) { p1 } else { p2 };
            corners.push(pick);
        }
        let mut arcs = Vec::with_capacity(n);
        for j in 0..n {
            let (c, r) = circles[j];
            let start = corners[(j + n - 1) % n];
            let end = corners[j];
            let a0 = (start[1] - c[1]).atan2(start[0] - c[0]);
            let a1 = (end[1] - c[1]).atan2(end[0] - c[0]);
            let span = wrap_angle(a1 - a0);
            arcs.push(Arc {
                center: c,
                radius: r,
                phi_mid: wrap_angle(a0 + 0.5 * span),
                half_width: 0.5 * span.abs(),
            });
        }
        let table = BilliardTable { arcs, corners };
        for j in 0..n {
            let ang = table.corner_angle(j);
            if !(ang > 1e-3) {
                return Err(Error::InvalidTable(format!("corner {j} is cusp-like (angle {ang})")));
            }
        }
        for (j, arc) in table.arcs.iter().enumerate() {
            let mid = arc.point(arc.phi_mid);
            for (i, other) in table.arcs.iter().enumerate() {
                if i != j && other.gap(mid) <= 0.0 {
                    return Err(Error::InvalidTable(format!("arc {j} is covered by circle {i}")));
                }
            }
        }
        Ok(table)
    }

    /// Four-arc dispersing table with two hyperbolic two-bounce orbits:
    /// a horizontal one along `z = 0` and a vertical one along `y = -0.2`.
    pub fn default_table() -> Self {
        let (r, gap_a, gap_b, yb) = (2.0, 0.5, 0.45, -0.2);
        Self::from_circles(&[
            ([gap_a + r, 0.0], r),
            ([yb, gap_b + r], r),
            ([-(gap_a + r), 0.0], r),
            ([yb, -(gap_b + r)], r),
        ])
        .expect("default table is valid")
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    /// Interior angle between the tangents of the two arcs meeting at `corners[j]`.
    pub fn corner_angle(&self, j: usize) -> f64 {
        let n = self.arcs.len();
        let p = self.corners[j];
        let t0 = tangent_at(&self.arcs[j], p);
        let t1 = tangent_at(&self.arcs[(j + 1) % n], p);
        dot(t0, t1).abs().min(1.0).acos()
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for a in &self.corners {
            for b in &self.corners {
                d = d.max(norm(sub(*a, *b)));
            }
        }
        d
    }

    /// True when `q` lies strictly inside the table.
    pub fn contains(&self, q: Vec2) -> bool {
        !self.arcs.iter().any(|a| a.gap(q) <= 0.0) && self.in_corner_polygon(q)
    }

    /// True when `q` lies strictly inside the polygon of the corners.
    pub fn in_corner_polygon(&self, q: Vec2) -> bool {
        let n = self.corners.len();
        let mut sign = 0.0;
        for j in 0..n {
            let a = self.corners[j];
            let b = self.corners[(j + 1) % n];
            let cr = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            if sign == 0.0 {
                sign = cr.signum();
            } else if cr * sign < 0.0 {
                return false;
            }
        }
        true
    }

    /// Largest inscribed disk radius estimated on a grid, with its center.
    pub fn incenter(&self) -> (Vec2, f64) {
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for c in &self.corners {
            for i in 0..2 {
                lo[i] = lo[i].min(c[i]);
                hi[i] = hi[i].max(c[i]);
            }
        }
        let mut best = ([0.0, 0.0], f64::MIN);
        let mut center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let mut span = [hi[0] - lo[0], hi[1] - lo[1]];
        for _ in 0..30 {
            for i in 0..=20 {
                for j in 0..=20 {
                    let q = [
                        center[0] + span[0] * (i as f64 / 20.0 - 0.5),
                        center[1] + span[1] * (j as f64 / 20.0 - 0.5),
                    ];
                    if !self.contains(q) {
                        continue;
                    }
                    let r = self.arcs.iter().map(|a| a.gap(q)).fold(f64::MAX, f64::min);
                    if r > best.1 {
                        best = (q, r);
                    }
                }
            }
            center = best.0;
            span = [span[0] * 0.3, span[1] * 0.3];
        }
        best
    }
}

fn tangent_at(arc: &Arc, p: Vec2) -> Vec2 {
    let phi = (p[1] - arc.center[1]).atan2(p[0] - arc.center[0]);
    arc.tangent(phi)
}

/// Wall profile `W(Q)` as a function of the distance `Q` from an arc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BarrierProfile {
    /// `B exp(-Q / sigma)`.
    Exponential { b: f64, sigma: f64 },
    /// `B (sigma / Q) exp(1 - Q / sigma)`, infinite on the arc.
    Singular { b: f64, sigma: f64 },
}

impl BarrierProfile {
    pub fn sigma(&self) -> f64 {
        match *self {
            BarrierProfile::Exponential { sigma, .. } | BarrierProfile::Singular { sigma, .. } => sigma,
        }
    }

    /// Value and derivative `(W, W')`.
    #[inline]
    pub fn eval(&self, q: f64) -> (f64, f64) {
        match *self {
            BarrierProfile::Exponential { b, sigma } => {
                let w = b * (-q / sigma).exp();
                (w, -w / sigma)
            }
            BarrierProfile::Singular { b, sigma } => {
                let w = b * (sigma / q) * (1.0 - q / sigma).exp();
                (w, -w * (1.0 / q + 1.0 / sigma))
            }
        }
    }

    /// Smallest distance at which `W` stays at or below `cap`.
    pub fn distance_at(&self, cap: f64) -> f64 {
        match *self {
            BarrierProfile::Exponential { b, sigma } => -sigma * (cap / b).ln(),
            BarrierProfile::Singular { sigma, .. } => {
                // W is decreasing on (0, inf); bisect in log space
                if self.eval(1e-300_f64.max(sigma * 1e-250)).0 <= cap {
                    return 0.0;
                }
                let (mut lo, mut hi) = (sigma * 1e-250, sigma);
                while self.eval(hi).0 > cap {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = (lo * hi).sqrt();
                    if self.eval(mid).0 > cap {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }
}

/// Smooth potential `V = sum_j W(Q_j)` on a table, capped at a saturation level.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialModel {
    pub table: BilliardTable,
    pub profile: BarrierProfile,
    /// Cap applied outside the evaluation neighborhood; the gradient vanishes there.
    pub saturation: f64,
    q_min: f64,
}

impl PotentialModel {
    pub fn new(table: BilliardTable, profile: BarrierProfile, saturation: f64) -> Self {
        let q_min = profile.distance_at(saturation);
        PotentialModel { table, profile, saturation, q_min }
    }

    /// Singular walls with `B = 1`, `sigma = 1e-2 diameter` and saturation `1e3 h1`.
    pub fn singular(table: BilliardTable, h1: f64) -> Self {
        let sigma = 1e-2 * table.diameter();
        Self::new(table, BarrierProfile::Singular { b: 1.0, sigma }, 1e3 * h1)
    }

    /// Exponential walls with `B = 1`, `sigma = 1e-2 diameter` and saturation `1e3 h1`.
    pub fn exponential(table: BilliardTable, h1: f64) -> Self {
        let sigma = 1e-2 * table.diameter();
        Self::new(table, BarrierProfile::Exponential { b: 1.0, sigma }, 1e3 * h1)
    }

    pub fn sigma(&self) -> f64 {
        self.profile.sigma()
    }

    /// Distance from the arcs below which the potential is saturated.
    pub fn wall_margin(&self) -> f64 {
        self.q_min
    }

    /// Potential value.
    #[inline]
    pub fn value(&self, q: Vec2) -> f64 {
        self.eval(q).0
    }

    /// Potential value and gradient.
    #[inline]
    pub fn eval(&self, q: Vec2) -> (f64, Vec2) {
        let mut v = 0.0;
        let mut g = [0.0, 0.0];
        for arc in &self.table.arcs {
            let dy = q[0] - arc.center[0];
            let dz = q[1] - arc.center[1];
            let r = dy.hypot(dz);
            let gap = r - arc.radius;
            if gap <= self.q_min {
                return (self.saturation, [0.0, 0.0]);
            }
            let (w, dw) = self.profile.eval(gap);
            v += w;
            g[0] += dw * dy / r;
            g[1] += dw * dz / r;
        }
        let exterior = || !self.table.in_corner_polygon(q) && self.table.arcs.iter().all(|a| a.gap(q) > 0.0);
        if v >= self.saturation || exterior() {
            return (self.saturation, [0.0, 0.0]);
        }
        (v, g)
    }

    /// Whether `q` is in the unsaturated evaluation neighborhood of the table.
    pub fn in_neighborhood(&self, q: Vec2) -> bool {
        self.eval(q).0 < self.saturation
    }
}

/// Affine coupling coefficient `k(y, z) = a0 + a1 y + a2 z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionCoefficient {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Default for InteractionCoefficient {
    fn default() -> Self {
        InteractionCoefficient { a0: 0.0, a1: 1.0, a2: 0.0 }
    }
}

impl InteractionCoefficient {
    /// Returns `(k, dk/dy, dk/dz)`.
    #[inline]
    pub fn eval(&self, q: Vec2) -> (f64, f64, f64) {
        (self.value(q), self.a1, self.a2)
    }

    #[inline]
    pub fn value(&self, q: Vec2) -> f64 {
        self.a0 + self.a1 * q[0] + self.a2 * q[1]
    }

    #[inline]
    pub fn grad(&self) -> Vec2 {
        [self.a1, self.a2]
    }
}

/// Largest relative mismatch `|grad V - D V| / (1 + |grad V|)` between the
/// analytic gradient and a five-point central difference at `samples` seeded
/// points of the table below the saturation level.
pub fn gradient_defect(potential: &PotentialModel, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let table = &potential.table;
    let (lo, hi) = table.corners.iter().fold(([f64::MAX; 2], [f64::MIN; 2]), |(lo, hi), c| {
        ([lo[0].min(c[0]), lo[1].min(c[1])], [hi[0].max(c[0]), hi[1].max(c[1])])
    });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut taken = 0;
    while taken < samples {
        let q = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
        if !table.contains(q) || potential.value(q) >= 0.5 * potential.saturation {
            continue;
        }
        taken += 1;
        let gap = table.arcs.iter().map(|a| a.gap(q).abs()).fold(f64::MAX, f64::min);
        let d = 1e-3 * gap.min(potential.sigma());
        let g = potential.eval(q).1;
        for i in 0..2 {
            let at = |k: f64| {
                let mut x = q;
                x[i] += k * d;
                potential.value(x)
            };
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * d);
            worst = worst.max((g[i] - fd).abs() / (1.0 + g[i].abs()));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_geometry() {
        let t = BilliardTable::default_table();
        assert_eq!(t.len(), 4);
        for j in 0..4 {
            assert!(t.corner_angle(j) > 0.5);
            for arc in [&t.arcs[j], &t.arcs[(j + 1) % 4]] {
                assert!(arc.gap(t.corners[j]).abs() < 1e-12);
            }
        }
        assert!(t.contains([0.0, 0.0]));
        assert!(!t.contains([0.6, 0.0]));
        assert!(!t.contains([2.0, 2.0]));
        assert!(t.diameter() > 1.5 && t.diameter() < 1.7);
    }

    #[test]
    fn arc_midpoints_face_the_table() {
        let t = BilliardTable::default_table();
        for arc in &t.arcs {
            let p = arc.point(arc.phi_mid);
            let n = arc.normal(arc.phi_mid);
            assert!(t.contains([p[0] + 1e-3 * n[0], p[1] + 1e-3 * n[1]]));
        }
    }

    #[test]
    fn rejects_disjoint_circles() {
        let r = BilliardTable::from_circles(&[([3.0, 0.0], 1.0), ([0.0, 3.0], 1.0), ([-3.0, 0.0], 1.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn exponential_profile_examples() {
        let t = BilliardTable::default_table();
        let m = PotentialModel::exponential(t.clone(), 100.0);
        let sigma = m.sigma();
        // far from every other arc, on arc 0's midpoint
        let arc = &t.arcs[0];
        let p = arc.point(arc.phi_mid);
        let others: f64 = t.arcs[1..].iter().map(|a| (-a.gap(p) / sigma).exp()).sum();
        assert!((m.value(p) - 1.0 - others).abs() < 1e-12);
        assert!(others < 1e-8);
        // W(-sigma ln 2) = 2 B on the wall side
        let n = arc.normal(arc.phi_mid);
        let q = [p[0] + sigma * 2f64.ln() * n[0], p[1] + sigma * 2f64.ln() * n[1]];
        assert!((m.profile.eval(-sigma * 2f64.ln()).0 - 2.0).abs() < 1e-12);
        assert!((m.value(q) - 0.5 - others).abs() < 1e-6);
        let (c, _) = t.incenter();
        assert!(m.value(c) < 1e-8);
    }

    #[test]
    fn coupling_example() {
        let k = InteractionCoefficient::default();
        assert_eq!(k.eval([0.3, -0.1]), (0.3, 1.0, 0.0));
    }
}
