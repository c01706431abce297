use nalgebra::{DMatrix, DVector};

use crate::error::{EconError, Result};

/// A smooth program
///
/// ```text
/// minimize  f(x)
/// s.t.      g(x) <= 0,  h(x) = 0,  x >= lb
/// ```
///
/// Multiplier convention: the Lagrangian is `f + y'h + z'g - v'(x - lb)` with
/// `z >= 0` and `v >= 0`. An inequality multiplier is therefore the marginal
/// decrease of the optimal objective per unit relaxation of its constraint.
pub trait SmoothProgram {
    fn dim(&self) -> usize;

    fn num_inequalities(&self) -> usize {
        0
    }

    fn num_equalities(&self) -> usize {
        0
    }

    /// Lower bounds; `f64::NEG_INFINITY` marks a free variable.
    fn lower_bounds(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY; self.dim()]
    }

    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> DVector<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;

    fn inequalities(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// Rows are constraints, columns variables.
    fn inequality_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(0, self.dim())
    }

    /// `sum_i weights[i] * hess g_i(x)`.
    fn inequality_hessian(&self, _x: &[f64], _weights: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn equalities(&self, _x: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn equality_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(0, self.dim())
    }

    fn equality_hessian(&self, _x: &[f64], _weights: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.stationarity, self.primal, self.dual, self.complementarity]
    }
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub inequality_multipliers: Vec<f64>,
    pub equality_multipliers: Vec<f64>,
    /// Zero for unbounded variables.
    pub bound_multipliers: Vec<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

const FRACTION_TO_BOUNDARY: f64 = 0.995;
const BARRIER_KAPPA: f64 = 10.0;
const MU_SHRINK: f64 = 0.2;
/// Barrier residual below which full Newton steps are judged by the
/// residual rather than the merit function.
const NEAR_SOLUTION: f64 = 1e-4;
/// A run that stalls short of `tol` still succeeds if its best iterate is
/// within this factor of it.
const ACCEPTABLE_FACTOR: f64 = 100.0;

struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    v: DVector<f64>,
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    g: DVector<f64>,
    jg: DMatrix<f64>,
    h: DVector<f64>,
    jh: DMatrix<f64>,
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn evaluate<P: SmoothProgram + ?Sized>(p: &P, x: &[f64]) -> Option<Eval> {
    let f = p.objective(x);
    let grad = p.gradient(x);
    let g = p.inequalities(x);
    let jg = p.inequality_jacobian(x);
    let h = p.equalities(x);
    let jh = p.equality_jacobian(x);
    let ok = f.is_finite()
        && all_finite(grad.as_slice())
        && all_finite(g.as_slice())
        && all_finite(jg.as_slice())
        && all_finite(h.as_slice())
        && all_finite(jh.as_slice());
    ok.then_some(Eval { f, grad, g, jg, h, jh })
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
}

struct Residual {
    rd: DVector<f64>,
    rg: DVector<f64>,
    sz: DVector<f64>,
    xv: DVector<f64>,
}

fn residual(it: &Iterate, ev: &Eval, lb: &[f64]) -> Residual {
    let mut rd = &ev.grad + ev.jg.transpose() * &it.z + ev.jh.transpose() * &it.y;
    let mut xv = DVector::zeros(it.x.len());
    for i in 0..it.x.len() {
        if lb[i].is_finite() {
            rd[i] -= it.v[i];
            xv[i] = (it.x[i] - lb[i]) * it.v[i];
        }
    }
    let rg = &ev.g + &it.s;
    let sz = it.s.component_mul(&it.z);
    Residual { rd, rg, sz, xv }
}

fn barrier_error(r: &Residual, h: &DVector<f64>, lb: &[f64], mu: f64) -> f64 {
    let mut e = inf_norm(&r.rd).max(inf_norm(&r.rg)).max(inf_norm(h));
    for a in r.sz.iter() {
        e = e.max((a - mu).abs());
    }
    for (i, a) in r.xv.iter().enumerate() {
        if lb[i].is_finite() {
            e = e.max((a - mu).abs());
        }
    }
    e
}

/// Log-barrier objective plus an exact l1 penalty on constraint violation.
fn merit(x: &DVector<f64>, s: &DVector<f64>, ev: &Eval, lb: &[f64], mu: f64, penalty: f64) -> f64 {
    let mut m = ev.f;
    for si in s.iter() {
        m -= mu * si.ln();
    }
    for (i, l) in lb.iter().enumerate() {
        if l.is_finite() {
            m -= mu * (x[i] - l).ln();
        }
    }
    m + penalty * violation(s, ev)
}

fn violation(s: &DVector<f64>, ev: &Eval) -> f64 {
    (&ev.g + s).iter().chain(ev.h.iter()).map(|c| c.abs()).sum()
}

/// Directional derivative of the barrier part of [`merit`].
fn barrier_slope(it: &Iterate, ev: &Eval, lb: &[f64], mu: f64, dx: &DVector<f64>, ds: &DVector<f64>) -> f64 {
    let mut d = ev.grad.dot(dx);
    for i in 0..ds.len() {
        d -= mu * ds[i] / it.s[i];
    }
    for (i, l) in lb.iter().enumerate() {
        if l.is_finite() {
            d -= mu * dx[i] / (it.x[i] - l);
        }
    }
    d
}

fn true_residuals(it: &Iterate, ev: &Eval, r: &Residual, lb: &[f64]) -> KktResiduals {
    let mut primal = inf_norm(&ev.h);
    for gi in ev.g.iter() {
        primal = primal.max(gi.max(0.0));
    }
    for (i, l) in lb.iter().enumerate() {
        if l.is_finite() {
            primal = primal.max((l - it.x[i]).max(0.0));
        }
    }
    let mut dual = 0.0_f64;
    let mut comp = 0.0_f64;
    for i in 0..it.z.len() {
        dual = dual.max((-it.z[i]).max(0.0));
        comp = comp.max((it.z[i] * ev.g[i]).abs()).max(r.sz[i].abs());
    }
    for (i, l) in lb.iter().enumerate() {
        if l.is_finite() {
            dual = dual.max((-it.v[i]).max(0.0));
            comp = comp.max(r.xv[i].abs());
        }
    }
    KktResiduals { stationarity: inf_norm(&r.rd), primal: primal.max(inf_norm(&r.rg)), dual, complementarity: comp }
}

fn max_step(values: &DVector<f64>, deltas: &DVector<f64>, mask: Option<&[f64]>) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..values.len() {
        if let Some(lb) = mask {
            if !lb[i].is_finite() {
                continue;
            }
        }
        if deltas[i] < 0.0 {
            alpha = alpha.min(-FRACTION_TO_BOUNDARY * values[i] / deltas[i]);
        }
    }
    alpha
}

/// Solves a smooth program with a primal-dual interior point method.
///
/// The start point is projected strictly inside the bounds. Inequalities are
/// handled with slacks so the start need not satisfy them. On budget
/// exhaustion the error carries the best iterate found and its residuals.
pub fn kkt_solve<P: SmoothProgram + ?Sized>(
    program: &P,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<KktSolution> {
    let n = program.dim();
    let m = program.num_inequalities();
    let p = program.num_equalities();
    assert_eq!(start.len(), n, "start point has wrong dimension");
    let lb = program.lower_bounds();

    let mut x = DVector::from_column_slice(start);
    for i in 0..n {
        if lb[i].is_finite() {
            let push = 1e-2 * (1.0 + lb[i].abs());
            if !(x[i] - lb[i] >= push) || !x[i].is_finite() {
                x[i] = lb[i] + push;
            }
        } else if !x[i].is_finite() {
            x[i] = 0.0;
        }
    }
    let ev0 = evaluate(program, x.as_slice())
        .ok_or_else(|| EconError::NonFiniteEvaluation("objective or constraints at the start point".into()))?;
    let s = ev0.g.map(|gi| (-gi).max(1e-2));
    let it = Iterate {
        x,
        s,
        z: DVector::from_element(m, 1.0),
        y: DVector::zeros(p),
        v: DVector::from_iterator(n, lb.iter().map(|l| if l.is_finite() { 1.0 } else { 0.0 })),
    };
    let nb = lb.iter().filter(|l| l.is_finite()).count();
    let mu = {
        let r = residual(&it, &ev0, &lb);
        let total: f64 = r.sz.sum() + r.xv.sum();
        if m + nb > 0 {
            (total / (m + nb) as f64).max(1e-2)
        } else {
            0.0
        }
    };
    primal_dual(program, it, ev0, &lb, mu, tol, max_iter, false)
}

/// Primal-dual iterations from a given iterate and barrier parameter.
fn primal_dual<P: SmoothProgram + ?Sized>(
    program: &P,
    mut it: Iterate,
    mut ev: Eval,
    lb: &[f64],
    mut mu: f64,
    tol: f64,
    max_iter: usize,
    warm: bool,
) -> Result<KktSolution> {
    let m = it.s.len();
    let nb = lb.iter().filter(|l| l.is_finite()).count();
    let lb = lb.to_vec();

    let mut best: Option<(f64, KktSolution)> = None;
    let mut penalty = 1.0_f64;
    let mut iterations = 0;
    for iter in 0..max_iter {
        iterations = iter;
        let r = residual(&it, &ev, &lb);
        let tr = true_residuals(&it, &ev, &r, &lb);
        let err = tr.max();
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, finish(program, &it, &lb, tr, iter)));
        }
        if err <= tol {
            return Ok(finish(program, &it, &lb, tr, iter));
        }
        while m + nb > 0 && barrier_error(&r, &ev.h, &lb, mu) <= BARRIER_KAPPA * mu && mu > tol / 10.0 {
            // A warm start sits on the central path already; large cuts in
            // mu would throw it off the path Newton can follow.
            let next = if warm { MU_SHRINK * mu } else { (MU_SHRINK * mu).min(mu.powf(1.5)) };
            mu = (tol / 10.0).max(next);
        }

        let c0 = &ev.g + &it.s;
        let (dx, dy) = newton_direction(program, &it, &ev, &lb, mu, &c0, &ev.h)?;
        let (ds, dz, dv) = companion_steps(&it, &ev, &lb, mu, &dx, &c0);
        // Primal step on the penalized barrier merit; duals move with
        // their own fraction-to-boundary step.
        let alpha_primal = primal_step_limit(&it, &lb, &dx, &ds);
        let slope = barrier_slope(&it, &ev, &lb, mu, &dx, &ds);
        let viol = violation(&it.s, &ev);
        let dual_size = inf_norm(&it.z).max(inf_norm(&it.y));
        penalty = penalty.max(1.1 * dual_size);
        if viol > 0.0 && slope > 0.0 {
            penalty = penalty.max(2.0 * slope / viol);
        }
        let m0 = merit(&it.x, &it.s, &ev, &lb, mu, penalty);
        let d0 = slope - penalty * viol;
        let sufficient = |alpha: f64, m1: f64| m1 <= m0 + 1e-4 * alpha * d0.min(0.0);
        let accept = |tx: DVector<f64>,
                      ts: DVector<f64>,
                      dy: &DVector<f64>,
                      dz: &DVector<f64>,
                      dv: &DVector<f64>,
                      alpha: f64| {
            let ad = max_step(&it.z, dz, None).min(max_step(&it.v, dv, Some(&lb))).min(1.0);
            Iterate { x: tx, s: ts, z: &it.z + ad * dz, y: &it.y + alpha * dy, v: &it.v + ad * dv }
        };
        let mut alpha = alpha_primal;
        let mut accepted = None;
        // Near a solution the full step is taken whenever it shrinks the
        // barrier residual, which avoids the merit function's habit of
        // cutting Newton steps on curved constraints.
        let current = barrier_error(&r, &ev.h, &lb, mu);
        if current < NEAR_SOLUTION {
            let tx = &it.x + alpha * &dx;
            let ts = &it.s + alpha * &ds;
            if let Some(tev) = evaluate(program, tx.as_slice()) {
                let trial = accept(tx, ts, &dy, &dz, &dv, alpha);
                if barrier_error(&residual(&trial, &tev, &lb), &tev.h, &lb, mu) < 0.9 * current {
                    accepted = Some((trial, tev));
                }
            }
        }
        for trial in 0..60 {
            if accepted.is_some() {
                break;
            }
            let tx = &it.x + alpha * &dx;
            let ts = &it.s + alpha * &ds;
            if let Some(tev) = evaluate(program, tx.as_slice()) {
                let m1 = merit(&tx, &ts, &tev, &lb, mu, penalty);
                if sufficient(alpha, m1) || alpha < 1e-14 {
                    accepted = Some((accept(tx, ts, &dy, &dz, &dv, alpha), tev));
                    break;
                }
                if trial == 0 {
                    // Second-order correction against curvature in the
                    // constraints shortening the step.
                    let c_soc = alpha * &c0 + (&tev.g + &ts);
                    let h_soc = alpha * &ev.h + &tev.h;
                    if let Ok((cx, cy)) = newton_direction(program, &it, &ev, &lb, mu, &c_soc, &h_soc) {
                        let (cs, cz, cv) = companion_steps(&it, &ev, &lb, mu, &cx, &c_soc);
                        let a = primal_step_limit(&it, &lb, &cx, &cs);
                        let sx = &it.x + a * &cx;
                        let ss = &it.s + a * &cs;
                        if let Some(sev) = evaluate(program, sx.as_slice()) {
                            if sufficient(alpha, merit(&sx, &ss, &sev, &lb, mu, penalty)) {
                                accepted = Some((accept(sx, ss, &cy, &cz, &cv, a), sev));
                                break;
                            }
                        }
                    }
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, tev)) => {
                it = trial;
                ev = tev;
            }
            None => break,
        }
    }
    give_up(best, &it.x, iterations, tol)
}

/// Ends a run that missed `tol`: the best iterate is still returned when it
/// reaches the acceptable level, otherwise the error carries it.
fn give_up(best: Option<(f64, KktSolution)>, x: &DVector<f64>, iterations: usize, tol: f64) -> Result<KktSolution> {
    match best {
        Some((err, sol)) if err <= ACCEPTABLE_FACTOR * tol => Ok(KktSolution { iterations, ..sol }),
        Some((err, sol)) => Err(EconError::NoConvergence {
            iterations,
            max_residual: err,
            residuals: sol.residuals.as_vec(),
            best: sol.x,
        }),
        None => Err(EconError::NoConvergence {
            iterations,
            max_residual: f64::INFINITY,
            residuals: KktResiduals::default().as_vec(),
            best: x.as_slice().to_vec(),
        }),
    }
}

fn companion_steps(
    it: &Iterate,
    ev: &Eval,
    lb: &[f64],
    mu: f64,
    dx: &DVector<f64>,
    c: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = it.s.len();
    let n = it.x.len();
    let ds = -c - &ev.jg * dx;
    let mut dz = DVector::zeros(m);
    for i in 0..m {
        dz[i] = (mu - it.s[i] * it.z[i] - it.z[i] * ds[i]) / it.s[i];
    }
    let mut dv = DVector::zeros(n);
    for i in 0..n {
        if lb[i].is_finite() {
            let gap = it.x[i] - lb[i];
            dv[i] = (mu - gap * it.v[i] - it.v[i] * dx[i]) / gap;
        }
    }
    (ds, dz, dv)
}

fn primal_step_limit(it: &Iterate, lb: &[f64], dx: &DVector<f64>, ds: &DVector<f64>) -> f64 {
    let n = it.x.len();
    let gaps = DVector::from_iterator(n, (0..n).map(|i| if lb[i].is_finite() { it.x[i] - lb[i] } else { 1.0 }));
    max_step(&it.s, ds, None).min(max_step(&gaps, dx, Some(lb)))
}

fn newton_direction<P: SmoothProgram + ?Sized>(
    program: &P,
    it: &Iterate,
    ev: &Eval,
    lb: &[f64],
    mu: f64,
    c: &DVector<f64>,
    hc: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = it.x.len();
    let m = it.s.len();
    let p = it.y.len();
    let xs = it.x.as_slice();

    let mut k = program.hessian(xs);
    if m > 0 {
        k += program.inequality_hessian(xs, it.z.as_slice());
    }
    if p > 0 {
        k += program.equality_hessian(xs, it.y.as_slice());
    }
    let sigma_s = DVector::from_iterator(m, (0..m).map(|i| it.z[i] / it.s[i]));
    let mut scaled = ev.jg.clone();
    for i in 0..m {
        for j in 0..n {
            scaled[(i, j)] *= sigma_s[i];
        }
    }
    k += ev.jg.transpose() * scaled;

    let mut shift = DVector::zeros(m);
    for i in 0..m {
        shift[i] = mu / it.s[i] - it.z[i] + sigma_s[i] * c[i];
    }
    let mut rhs_x = -(&ev.grad + ev.jh.transpose() * &it.y + ev.jg.transpose() * &it.z) - ev.jg.transpose() * shift;
    for i in 0..n {
        if lb[i].is_finite() {
            let gap = it.x[i] - lb[i];
            k[(i, i)] += it.v[i] / gap;
            rhs_x[i] += mu / gap;
        }
    }

    if p == 0 {
        // Without equalities the system is the Hessian alone; shift it until
        // it is positive definite so the step is a descent direction.
        let scale = (0..n).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
        let mut delta = 0.0;
        for _ in 0..20 {
            let mut shifted = k.clone();
            for i in 0..n {
                shifted[(i, i)] += delta;
            }
            if let Some(chol) = shifted.cholesky() {
                let dx = chol.solve(&rhs_x);
                if all_finite(dx.as_slice()) {
                    return Ok((dx, DVector::zeros(0)));
                }
            }
            delta = if delta == 0.0 { 1e-10 * scale } else { delta * 10.0 };
        }
    }

    let mut delta = 0.0;
    for _ in 0..12 {
        let mut full = DMatrix::zeros(n + p, n + p);
        full.view_mut((0, 0), (n, n)).copy_from(&k);
        for i in 0..n {
            full[(i, i)] += delta;
        }
        if p > 0 {
            full.view_mut((n, 0), (p, n)).copy_from(&ev.jh);
            full.view_mut((0, n), (n, p)).copy_from(&ev.jh.transpose());
            for j in 0..p {
                full[(n + j, n + j)] = -delta;
            }
        }
        let mut rhs = DVector::zeros(n + p);
        rhs.rows_mut(0, n).copy_from(&rhs_x);
        if p > 0 {
            rhs.rows_mut(n, p).copy_from(&(-hc));
        }
        if let Some(sol) = full.lu().solve(&rhs) {
            if all_finite(sol.as_slice()) {
                let dx = sol.rows(0, n).into_owned();
                let dy = sol.rows(n, p).into_owned();
                return Ok((dx, dy));
            }
        }
        delta = if delta == 0.0 { 1e-12 } else { delta * 100.0 };
    }
    Err(EconError::NonFiniteEvaluation("singular Newton system".into()))
}

/// Barrier weight growth between centering passes.
const BARRIER_GROWTH: f64 = 10.0;
/// Average complementarity at which the barrier method hands over to
/// primal-dual steps.
const POLISH_GAP: f64 = 1e-5;
const MAX_CENTERING_STEPS: usize = 60;

/// Solves a convex inequality-constrained program with a primal log-barrier
/// method from a strictly feasible start.
///
/// Each pass minimizes `t f(x) - sum ln(-g_i) - sum ln(x_j - lb_j)` by damped
/// Newton steps that stay strictly feasible; multipliers are read off the
/// central path as `z_i = 1 / (t (-g_i))`. Equality constraints are not
/// supported.
pub fn barrier_solve<P: SmoothProgram + ?Sized>(
    program: &P,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<KktSolution> {
    if program.num_equalities() > 0 {
        return Err(EconError::Domain("barrier method does not take equality constraints".into()));
    }
    let n = program.dim();
    let lb = program.lower_bounds();
    let strictly_inside = |x: &[f64]| -> bool {
        x.iter().zip(&lb).all(|(a, l)| a > l) && program.inequalities(x).iter().all(|g| *g < 0.0)
    };
    if start.len() != n || !strictly_inside(start) {
        return Err(EconError::Domain("barrier start is not strictly feasible".into()));
    }
    let m = program.num_inequalities();
    let nb = lb.iter().filter(|l| l.is_finite()).count();
    let potential = |x: &[f64], t: f64| -> f64 {
        if !strictly_inside(x) {
            return f64::INFINITY;
        }
        let mut phi = t * program.objective(x);
        for g in program.inequalities(x).iter() {
            phi -= (-g).ln();
        }
        for (a, l) in x.iter().zip(&lb) {
            if l.is_finite() {
                phi -= (a - l).ln();
            }
        }
        if phi.is_finite() {
            phi
        } else {
            f64::INFINITY
        }
    };

    let mut x = DVector::from_column_slice(start);
    let mut t = 1.0_f64;
    let mut iterations = 0;
    let mut best: Option<(f64, KktSolution)> = None;
    while iterations < max_iter {
        // Centering.
        for _ in 0..MAX_CENTERING_STEPS {
            if iterations >= max_iter {
                break;
            }
            iterations += 1;
            let xs = x.as_slice();
            let g = program.inequalities(xs);
            let jg = program.inequality_jacobian(xs);
            let inv: Vec<f64> = g.iter().map(|gi| 1.0 / -gi).collect();
            let mut grad = t * program.gradient(xs) + jg.transpose() * DVector::from_column_slice(&inv);
            let mut hess = t * program.hessian(xs) + program.inequality_hessian(xs, &inv);
            let mut scaled = jg.clone();
            for i in 0..m {
                for j in 0..n {
                    scaled[(i, j)] *= inv[i];
                }
            }
            hess += scaled.transpose() * &scaled;
            for j in 0..n {
                if lb[j].is_finite() {
                    let gap = x[j] - lb[j];
                    grad[j] -= 1.0 / gap;
                    hess[(j, j)] += 1.0 / (gap * gap);
                }
            }
            if inf_norm(&grad) <= 0.1 * tol * t {
                break;
            }
            let dx = match solve_positive(&hess, &(-&grad)) {
                Some(dx) => dx,
                None => break,
            };
            let decrement = -grad.dot(&dx);
            if !(decrement > 1e-13) {
                break;
            }
            let phi0 = potential(xs, t);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-16 {
                let trial = &x + alpha * &dx;
                // Close to the center the potential cannot resolve the
                // decrease, so any strictly feasible Newton step is taken.
                let accept = if decrement < 0.1 {
                    strictly_inside(trial.as_slice())
                } else {
                    potential(trial.as_slice(), t) <= phi0 - 0.25 * alpha * decrement
                };
                if accept {
                    x = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
        }

        let sol = central_point(program, &x, &lb, t);
        let err = sol.residuals.max();
        if err <= tol {
            return Ok(KktSolution { iterations, ..sol });
        }
        let (z, v) = (sol.inequality_multipliers.clone(), sol.bound_multipliers.clone());
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, sol));
        }
        if (m + nb) as f64 / t < POLISH_GAP {
            // Rounding in the barrier gradient grows with `t`; the last
            // digits come from primal-dual steps started on the path.
            let it = Iterate {
                x: x.clone(),
                s: DVector::from_column_slice(program.inequalities(x.as_slice()).map(|g| -g).as_slice()),
                z: DVector::from_vec(z),
                y: DVector::zeros(0),
                v: DVector::from_vec(v),
            };
            let ev = evaluate(program, x.as_slice())
                .ok_or_else(|| EconError::NonFiniteEvaluation("barrier iterate".into()))?;
            match primal_dual(program, it, ev, &lb, 1.0 / t, tol, max_iter.saturating_sub(iterations), true) {
                Ok(polished) => return Ok(KktSolution { iterations: iterations + polished.iterations, ..polished }),
                Err(EconError::NoConvergence { .. }) => {}
                Err(e) => return Err(e),
            }
            break;
        }
        t *= BARRIER_GROWTH;
    }
    give_up(best, &x, iterations, tol)
}

/// Solves `h d = rhs` for a symmetric `h` that should be positive definite,
/// adding a small diagonal shift when rounding breaks definiteness.
fn solve_positive(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(1e-300, f64::max);
    let mut shift = 0.0;
    for _ in 0..12 {
        let mut shifted = h.clone();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        if let Some(chol) = shifted.cholesky() {
            let d = chol.solve(rhs);
            if all_finite(d.as_slice()) {
                return Some(d);
            }
        }
        shift = if shift == 0.0 { 1e-14 * scale } else { shift * 100.0 };
    }
    None
}

/// Multipliers and residuals of the barrier problem's center for weight `t`.
fn central_point<P: SmoothProgram + ?Sized>(program: &P, x: &DVector<f64>, lb: &[f64], t: f64) -> KktSolution {
    let n = x.len();
    let xs = x.as_slice();
    let g = program.inequalities(xs);
    let z = DVector::from_iterator(g.len(), g.iter().map(|gi| 1.0 / (t * -gi)));
    let v = DVector::from_iterator(n, (0..n).map(|j| if lb[j].is_finite() { 1.0 / (t * (x[j] - lb[j])) } else { 0.0 }));
    let it = Iterate { x: x.clone(), s: -&g, z, y: DVector::zeros(0), v };
    let ev = Eval {
        f: program.objective(xs),
        grad: program.gradient(xs),
        g,
        jg: program.inequality_jacobian(xs),
        h: DVector::zeros(0),
        jh: DMatrix::zeros(0, n),
    };
    let r = residual(&it, &ev, lb);
    let residuals = true_residuals(&it, &ev, &r, lb);
    finish(program, &it, lb, residuals, 0)
}

fn finish<P: SmoothProgram + ?Sized>(
    program: &P,
    it: &Iterate,
    lb: &[f64],
    residuals: KktResiduals,
    iterations: usize,
) -> KktSolution {
    let x = it.x.as_slice().to_vec();
    let bound_multipliers = (0..x.len()).map(|i| if lb[i].is_finite() { it.v[i] } else { 0.0 }).collect();
    KktSolution {
        objective: program.objective(&x),
        x,
        inequality_multipliers: it.z.as_slice().to_vec(),
        equality_multipliers: it.y.as_slice().to_vec(),
        bound_multipliers,
        residuals,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic1d {
        upper: Option<f64>,
        lower_bound: bool,
    }

    impl SmoothProgram for Quadratic1d {
        fn dim(&self) -> usize {
            1
        }
        fn num_inequalities(&self) -> usize {
            usize::from(self.upper.is_some())
        }
        fn lower_bounds(&self) -> Vec<f64> {
            vec![if self.lower_bound { 0.0 } else { f64::NEG_INFINITY }]
        }
        fn objective(&self, x: &[f64]) -> f64 {
            (x[0] - 3.0).powi(2)
        }
        fn gradient(&self, x: &[f64]) -> DVector<f64> {
            DVector::from_element(1, 2.0 * (x[0] - 3.0))
        }
        fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 2.0)
        }
        fn inequalities(&self, x: &[f64]) -> DVector<f64> {
            match self.upper {
                Some(u) => DVector::from_element(1, x[0] - u),
                None => DVector::zeros(0),
            }
        }
        fn inequality_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_element(self.num_inequalities(), 1, 1.0)
        }
    }

    struct SumConstrained;

    impl SmoothProgram for SumConstrained {
        fn dim(&self) -> usize {
            2
        }
        fn num_equalities(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0] + x[1] * x[1]
        }
        fn gradient(&self, x: &[f64]) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * x[0], 2.0 * x[1]])
        }
        fn hessian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(2, 2) * 2.0
        }
        fn equalities(&self, x: &[f64]) -> DVector<f64> {
            DVector::from_element(1, x[0] + x[1] - 2.0)
        }
        fn equality_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0])
        }
    }

    #[test]
    fn interior_optimum_has_zero_multiplier() {
        let p = Quadratic1d { upper: None, lower_bound: true };
        let sol = kkt_solve(&p, &[0.5], 1e-10, 200).unwrap();
        assert!((sol.x[0] - 3.0).abs() < 1e-8);
        assert!(sol.bound_multipliers[0].abs() < 1e-8);
    }

    #[test]
    fn active_upper_bound_multiplier_is_four() {
        let p = Quadratic1d { upper: Some(1.0), lower_bound: false };
        let sol = kkt_solve(&p, &[0.0], 1e-10, 200).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!((sol.inequality_multipliers[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn equality_multiplier_sign_convention() {
        let sol = kkt_solve(&SumConstrained, &[5.0, -1.0], 1e-10, 200).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 1.0).abs() < 1e-9);
        assert!((sol.equality_multipliers[0] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_start_is_repaired() {
        let p = Quadratic1d { upper: Some(1.0), lower_bound: true };
        let sol = kkt_solve(&p, &[50.0], 1e-10, 200).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!(sol.residuals.max() < 1e-10);
    }
}
