//! Dormand–Prince 8(5,3) with 7th-order dense output.

use crate::error::{Error, Result};

pub trait OdeSystem<const N: usize> {
    fn eval(&mut self, t: f64, x: &[f64; N], dx: &mut [f64; N]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub h_min: f64,
}

impl Default for StepperOptions {
    fn default() -> Self {
        StepperOptions { rtol: 1e-10, atol: 1e-10, h_max: f64::INFINITY, h_min: 1e-14 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

/// Interpolant of one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    pub cont: [[f64; N]; 8],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Interval covered by the step, ordered.
    pub fn interval(&self) -> (f64, f64) {
        let t1 = self.t1();
        if self.h >= 0.0 {
            (self.t0, t1)
        } else {
            (t1, self.t0)
        }
    }

    pub fn start(&self) -> [f64; N] {
        self.cont[0]
    }

    pub fn end(&self) -> [f64; N] {
        let mut x = self.cont[0];
        for (xi, di) in x.iter_mut().zip(self.cont[1].iter()) {
            *xi += di;
        }
        x
    }

    #[inline]
    pub fn eval(&self, t: f64) -> [f64; N] {
        let mut out = [0.0; N];
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let c = &self.cont;
        for i in 0..N {
            let conpar = c[4][i] + (c[5][i] + (c[6][i] + c[7][i] * s) * s1) * s;
            out[i] = c[0][i] + (c[1][i] + (c[2][i] + (c[3][i] + conpar * s1) * s) * s1) * s;
        }
        out
    }

    #[inline]
    pub fn eval_component(&self, t: f64, i: usize) -> f64 {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let c = &self.cont;
        let conpar = c[4][i] + (c[5][i] + (c[6][i] + c[7][i] * s) * s1) * s;
        c[0][i] + (c[1][i] + (c[2][i] + (c[3][i] + conpar * s1) * s) * s1) * s
    }
}

/// Adaptive single-step driver; keeps the current point and its derivative.
#[derive(Debug, Clone)]
pub struct Stepper<const N: usize> {
    pub t: f64,
    pub x: [f64; N],
    f: [f64; N],
    pub h: f64,
    pub opts: StepperOptions,
    pub stats: StepStats,
    facold: f64,
    last_rejected: bool,
    comp: [f64; N],
    tcomp: f64,
}

impl<const N: usize> Stepper<N> {
    /// `direction` selects forward (`> 0`) or backward (`< 0`) integration.
    pub fn new<S: OdeSystem<N>>(sys: &mut S, t: f64, x: [f64; N], opts: StepperOptions, direction: f64) -> Self {
        let mut f = [0.0; N];
        sys.eval(t, &x, &mut f);
        let mut st = Stepper {
            t,
            x,
            f,
            h: 0.0,
            opts,
            stats: StepStats { evals: 1, ..Default::default() },
            facold: 1e-4,
            last_rejected: false,
            comp: [0.0; N],
            tcomp: 0.0,
        };
        st.h = st.initial_step(sys, direction.signum());
        st
    }

    /// Derivative at the current point.
    pub fn derivative(&self) -> &[f64; N] {
        &self.f
    }

    /// Re-evaluates the derivative after the system or the state changed.
    pub fn refresh<S: OdeSystem<N>>(&mut self, sys: &mut S) {
        sys.eval(self.t, &self.x, &mut self.f);
        self.stats.evals += 1;
    }

    /// Replaces the current state, e.g. after an impulsive correction.
    pub fn set_state<S: OdeSystem<N>>(&mut self, sys: &mut S, x: [f64; N]) {
        self.x = x;
        self.comp = [0.0; N];
        self.refresh(sys);
    }

    fn sk(&self, y0: &[f64; N], y1: &[f64; N], i: usize) -> f64 {
        self.opts.atol + self.opts.rtol * y0[i].abs().max(y1[i].abs())
    }

    fn initial_step<S: OdeSystem<N>>(&mut self, sys: &mut S, dir: f64) -> f64 {
        let (mut dnf, mut dny) = (0.0, 0.0);
        for i in 0..N {
            let sk = self.sk(&self.x, &self.x, i);
            dnf += (self.f[i] / sk).powi(2);
            dny += (self.x[i] / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
        h = h.min(self.opts.h_max);
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = self.x[i] + dir * h * self.f[i];
        }
        let mut f1 = [0.0; N];
        sys.eval(self.t + dir * h, &y1, &mut f1);
        self.stats.evals += 1;
        let mut der2 = 0.0;
        for i in 0..N {
            let sk = self.sk(&self.x, &self.x, i);
            der2 += ((f1[i] - self.f[i]) / sk).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.abs().max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(1.0 / 8.0) };
        dir * (100.0 * h).min(h1).min(self.opts.h_max)
    }

    fn stages<S: OdeSystem<N>>(&self, sys: &mut S, h: f64, k: &mut [[f64; N]; 12], y_new: &mut [f64; N]) {
        let x = &self.x;
        let t = self.t;
        k[0] = self.f;
        let mut y = [0.0; N];
        macro_rules! stage {
            ($idx:expr, $c:expr, [$(($j:expr, $a:expr)),*]) => {{
                for i in 0..N {
                    y[i] = x[i] + h * (0.0 $(+ $a * k[$j][i])*);
                }
                let mut out = [0.0; N];
                sys.eval(t + $c * h, &y, &mut out);
                k[$idx] = out;
            }};
        }
        stage!(1, C2, [(0, A21)]);
        stage!(2, C3, [(0, A31), (1, A32)]);
        stage!(3, C4, [(0, A41), (2, A43)]);
        stage!(4, C5, [(0, A51), (2, A53), (3, A54)]);
        stage!(5, C6, [(0, A61), (3, A64), (4, A65)]);
        stage!(6, C7, [(0, A71), (3, A74), (4, A75), (5, A76)]);
        stage!(7, C8, [(0, A81), (3, A84), (4, A85), (5, A86), (6, A87)]);
        stage!(8, C9, [(0, A91), (3, A94), (4, A95), (5, A96), (6, A97), (7, A98)]);
        stage!(9, C10, [(0, A101), (3, A104), (4, A105), (5, A106), (6, A107), (7, A108), (8, A109)]);
        stage!(10, C11, [(0, A111), (3, A114), (4, A115), (5, A116), (6, A117), (7, A118), (8, A119), (9, A1110)]);
        stage!(11, 1.0, [(0, A121), (3, A124), (4, A125), (5, A126), (6, A127), (7, A128), (8, A129), (9, A1210), (10, A1211)]);
        *y_new = y;
    }

    fn finish_step<S: OdeSystem<N>>(&mut self, sys: &mut S, h: f64, k: &[[f64; N]; 12], incr: &[f64; N]) -> DenseStep<N> {
        let x_old = self.x;
        let f_old = self.f;
        let t_old = self.t;
        let mut x_new = [0.0; N];
        for i in 0..N {
            let d = h * incr[i] + self.comp[i];
            x_new[i] = x_old[i] + d;
            self.comp[i] = d - (x_new[i] - x_old[i]);
        }
        let dt = h + self.tcomp;
        let t_new = t_old + dt;
        self.tcomp = dt - (t_new - t_old);
        let mut f_new = [0.0; N];
        sys.eval(t_new, &x_new, &mut f_new);

        let mut cont = [[0.0; N]; 8];
        for i in 0..N {
            let ydiff = x_new[i] - x_old[i];
            let bspl = h * f_old[i] - ydiff;
            cont[0][i] = x_old[i];
            cont[1][i] = ydiff;
            cont[2][i] = bspl;
            cont[3][i] = ydiff - h * f_new[i] - bspl;
            cont[4][i] = D41 * k[0][i] + D46 * k[5][i] + D47 * k[6][i] + D48 * k[7][i] + D49 * k[8][i] + D410 * k[9][i] + D411 * k[10][i] + D412 * k[11][i];
            cont[5][i] = D51 * k[0][i] + D56 * k[5][i] + D57 * k[6][i] + D58 * k[7][i] + D59 * k[8][i] + D510 * k[9][i] + D511 * k[10][i] + D512 * k[11][i];
            cont[6][i] = D61 * k[0][i] + D66 * k[5][i] + D67 * k[6][i] + D68 * k[7][i] + D69 * k[8][i] + D610 * k[9][i] + D611 * k[10][i] + D612 * k[11][i];
            cont[7][i] = D71 * k[0][i] + D76 * k[5][i] + D77 * k[6][i] + D78 * k[7][i] + D79 * k[8][i] + D710 * k[9][i] + D711 * k[10][i] + D712 * k[11][i];
        }
        let mut y = [0.0; N];
        let mut k14 = [0.0; N];
        for i in 0..N {
            y[i] = x_old[i]
                + h * (A141 * k[0][i] + A147 * k[6][i] + A148 * k[7][i] + A149 * k[8][i] + A1410 * k[9][i] + A1411 * k[10][i] + A1412 * k[11][i] + A1413 * f_new[i]);
        }
        sys.eval(t_old + C14 * h, &y, &mut k14);
        let mut k15 = [0.0; N];
        for i in 0..N {
            y[i] = x_old[i]
                + h * (A151 * k[0][i] + A156 * k[5][i] + A157 * k[6][i] + A158 * k[7][i] + A1511 * k[10][i] + A1512 * k[11][i] + A1513 * f_new[i] + A1514 * k14[i]);
        }
        sys.eval(t_old + C15 * h, &y, &mut k15);
        let mut k16 = [0.0; N];
        for i in 0..N {
            y[i] = x_old[i]
                + h * (A161 * k[0][i] + A166 * k[5][i] + A167 * k[6][i] + A168 * k[7][i] + A169 * k[8][i] + A1613 * f_new[i] + A1614 * k14[i] + A1615 * k15[i]);
        }
        sys.eval(t_old + C16 * h, &y, &mut k16);
        for i in 0..N {
            cont[4][i] = h * (cont[4][i] + D413 * f_new[i] + D414 * k14[i] + D415 * k15[i] + D416 * k16[i]);
            cont[5][i] = h * (cont[5][i] + D513 * f_new[i] + D514 * k14[i] + D515 * k15[i] + D516 * k16[i]);
            cont[6][i] = h * (cont[6][i] + D613 * f_new[i] + D614 * k14[i] + D615 * k15[i] + D616 * k16[i]);
            cont[7][i] = h * (cont[7][i] + D713 * f_new[i] + D714 * k14[i] + D715 * k15[i] + D716 * k16[i]);
        }
        self.stats.evals += 4;
        self.stats.accepted += 1;
        self.t = t_new;
        self.x = x_new;
        self.f = f_new;
        DenseStep { t0: t_old, h, cont }
    }

    fn increment(k: &[[f64; N]; 12]) -> [f64; N] {
        let mut incr = [0.0; N];
        for i in 0..N {
            incr[i] = B1 * k[0][i] + B6 * k[5][i] + B7 * k[6][i] + B8 * k[7][i] + B9 * k[8][i] + B10 * k[9][i] + B11 * k[10][i] + B12 * k[11][i];
        }
        incr
    }

    /// Takes one step of size `h` without error control.
    pub fn step_fixed<S: OdeSystem<N>>(&mut self, sys: &mut S, h: f64) -> DenseStep<N> {
        let mut k = [[0.0; N]; 12];
        let mut y_stage = [0.0; N];
        self.stages(sys, h, &mut k, &mut y_stage);
        self.stats.evals += 11;
        let incr = Self::increment(&k);
        self.finish_step(sys, h, &k, &incr)
    }

    /// Takes one error-controlled step, never stepping past `t_limit`.
    pub fn step<S: OdeSystem<N>>(&mut self, sys: &mut S, t_limit: Option<f64>) -> Result<DenseStep<N>> {
        let dir = self.h.signum();
        let mut rejects = 0usize;
        loop {
            let mut h = self.h;
            if h.abs() > self.opts.h_max {
                h = dir * self.opts.h_max;
            }
            let mut clamped = false;
            if let Some(tl) = t_limit {
                if (self.t + h - tl) * dir >= 0.0 {
                    h = tl - self.t;
                    clamped = true;
                }
            }
            if h.abs() < self.opts.h_min.max(16.0 * f64::EPSILON * self.t.abs()) && !clamped {
                return Err(Error::Integration { t: self.t, reason: format!("step size {h:e} underflow") });
            }
            let mut k = [[0.0; N]; 12];
            let mut y12 = [0.0; N];
            self.stages(sys, h, &mut k, &mut y12);
            self.stats.evals += 11;
            let incr = Self::increment(&k);
            let (mut err, mut err2) = (0.0, 0.0);
            for i in 0..N {
                let y1 = self.x[i] + h * incr[i];
                let sk = self.opts.atol + self.opts.rtol * self.x[i].abs().max(y1.abs());
                let e2 = incr[i] - BHH1 * k[0][i] - BHH2 * k[8][i] - BHH3 * k[11][i];
                err2 += (e2 / sk).powi(2);
                let e = ER1 * k[0][i] + ER6 * k[5][i] + ER7 * k[6][i] + ER8 * k[7][i] + ER9 * k[8][i] + ER10 * k[9][i] + ER11 * k[10][i] + ER12 * k[11][i];
                err += (e / sk).powi(2);
            }
            let mut deno = err + 0.01 * err2;
            if deno <= 0.0 {
                deno = 1.0;
            }
            let err = h.abs() * err * (1.0 / (deno * N as f64)).sqrt();
            if !err.is_finite() {
                return Err(Error::Integration { t: self.t, reason: "non-finite derivative".into() });
            }
            let fac11 = err.powf(1.0 / 8.0);
            let fac = (1.0 / 6.0f64).max(3.0f64.min(fac11 / 0.9));
            let mut h_new = h / fac;
            if err <= 1.0 {
                self.facold = err.max(1e-4);
                if self.last_rejected {
                    h_new = if dir > 0.0 { h_new.min(h) } else { h_new.max(h) };
                }
                self.last_rejected = false;
                let step = self.finish_step(sys, h, &k, &incr);
                // a clamped final step must not shrink the next proposal
                self.h = if clamped && h_new.abs() < self.h.abs() { self.h } else { h_new };
                return Ok(step);
            }
            self.h = h / 3.0f64.min(fac11 / 0.9);
            self.last_rejected = true;
            self.stats.rejected += 1;
            rejects += 1;
            if rejects > 200 {
                return Err(Error::Integration { t: self.t, reason: "too many rejected steps".into() });
            }
        }
    }
}

const C2: f64 = 0.526001519587677318785587544488E-01;
const C3: f64 = 0.789002279381515978178381316732E-01;
const C4: f64 = 0.118350341907227396726757197510E+00;
const C5: f64 = 0.281649658092772603273242802490E+00;
const C6: f64 = 0.333333333333333333333333333333E+00;
const C7: f64 = 0.25E+00;
const C8: f64 = 0.307692307692307692307692307692E+00;
const C9: f64 = 0.651282051282051282051282051282E+00;
const C10: f64 = 0.6E+00;
const C11: f64 = 0.857142857142857142857142857142E+00;
const C14: f64 = 0.1E+00;
const C15: f64 = 0.2E+00;
const C16: f64 = 0.777777777777777777777777777778E+00;
const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;
const A141: f64 = 5.61675022830479523392909219681E-2;
const A147: f64 = 2.53500210216624811088794765333E-1;
const A148: f64 = -2.46239037470802489917441475441E-1;
const A149: f64 = -1.24191423263816360469010140626E-1;
const A1410: f64 = 1.5329179827876569731206322685E-1;
const A1411: f64 = 8.20105229563468988491666602057E-3;
const A1412: f64 = 7.56789766054569976138603589584E-3;
const A1413: f64 = -8.298E-3;
const A151: f64 = 3.18346481635021405060768473261E-2;
const A156: f64 = 2.83009096723667755288322961402E-2;
const A157: f64 = 5.35419883074385676223797384372E-2;
const A158: f64 = -5.49237485713909884646569340306E-2;
const A1511: f64 = -1.08347328697249322858509316994E-4;
const A1512: f64 = 3.82571090835658412954920192323E-4;
const A1513: f64 = -3.40465008687404560802977114492E-4;
const A1514: f64 = 1.41312443674632500278074618366E-1;
const A161: f64 = -4.28896301583791923408573538692E-1;
const A166: f64 = -4.69762141536116384314449447206E0;
const A167: f64 = 7.68342119606259904184240953878E0;
const A168: f64 = 4.06898981839711007970213554331E0;
const A169: f64 = 3.56727187455281109270669543021E-1;
const A1613: f64 = -1.39902416515901462129418009734E-3;
const A1614: f64 = 2.9475147891527723389556272149E0;
const A1615: f64 = -9.15095847217987001081870187138E0;
const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;
const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;
const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;
const D41: f64 = -0.84289382761090128651353491142E+01;
const D46: f64 = 0.56671495351937776962531783590E+00;
const D47: f64 = -0.30689499459498916912797304727E+01;
const D48: f64 = 0.23846676565120698287728149680E+01;
const D49: f64 = 0.21170345824450282767155149946E+01;
const D410: f64 = -0.87139158377797299206789907490E+00;
const D411: f64 = 0.22404374302607882758541771650E+01;
const D412: f64 = 0.63157877876946881815570249290E+00;
const D413: f64 = -0.88990336451333310820698117400E-01;
const D414: f64 = 0.18148505520854727256656404962E+02;
const D415: f64 = -0.91946323924783554000451984436E+01;
const D416: f64 = -0.44360363875948939664310572000E+01;
const D51: f64 = 0.10427508642579134603413151009E+02;
const D56: f64 = 0.24228349177525818288430175319E+03;
const D57: f64 = 0.16520045171727028198505394887E+03;
const D58: f64 = -0.37454675472269020279518312152E+03;
const D59: f64 = -0.22113666853125306036270938578E+02;
const D510: f64 = 0.77334326684722638389603898808E+01;
const D511: f64 = -0.30674084731089398182061213626E+02;
const D512: f64 = -0.93321305264302278729567221706E+01;
const D513: f64 = 0.15697238121770843886131091075E+02;
const D514: f64 = -0.31139403219565177677282850411E+02;
const D515: f64 = -0.93529243588444783865713862664E+01;
const D516: f64 = 0.35816841486394083752465898540E+02;
const D61: f64 = 0.19985053242002433820987653617E+02;
const D66: f64 = -0.38703730874935176555105901742E+03;
const D67: f64 = -0.18917813819516756882830838328E+03;
const D68: f64 = 0.52780815920542364900561016686E+03;
const D69: f64 = -0.11573902539959630126141871134E+02;
const D610: f64 = 0.68812326946963000169666922661E+01;
const D611: f64 = -0.10006050966910838403183860980E+01;
const D612: f64 = 0.77771377980534432092869265740E+00;
const D613: f64 = -0.27782057523535084065932004339E+01;
const D614: f64 = -0.60196695231264120758267380846E+02;
const D615: f64 = 0.84320405506677161018159903784E+02;
const D616: f64 = 0.11992291136182789328035130030E+02;
const D71: f64 = -0.25693933462703749003312586129E+02;
const D76: f64 = -0.15418974869023643374053993627E+03;
const D77: f64 = -0.23152937917604549567536039109E+03;
const D78: f64 = 0.35763911791061412378285349910E+03;
const D79: f64 = 0.93405324183624310003907691704E+02;
const D710: f64 = -0.37458323136451633156875139351E+02;
const D711: f64 = 0.10409964950896230045147246184E+03;
const D712: f64 = 0.29840293426660503123344363579E+02;
const D713: f64 = -0.43533456590011143754432175058E+02;
const D714: f64 = 0.96324553959188282948394950600E+02;
const D715: f64 = -0.39177261675615439165231486172E+02;
const D716: f64 = -0.14972683625798562581422125276E+03;
