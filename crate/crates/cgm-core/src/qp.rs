//! Dense convex quadratic programming by operator splitting.
//!
//! Canonical form:
//! ```text
//! minimize   1/2 x^T H x + f^T x
//! subject to A_eq x = b_eq,    lb <= A_in x <= ub
//! ```
//! The solver is a dense ADMM iteration with Ruiz equilibration, adaptive
//! penalty and warm starting; equality rows are treated as two-sided bounds
//! with a stiffer penalty. Termination follows the usual primal/dual
//! residual criteria, evaluated on the unscaled problem.

use crate::numerics::{symmetrize, Matrix, Vector};
use crate::{Error, Result};

/// Convex QP in canonical form. Missing constraint blocks are empty matrices.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: Matrix,
    pub linear: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
    pub a_in: Matrix,
    pub lb: Vector,
    pub ub: Vector,
}

impl QpProblem {
    /// Problem with no constraints.
    pub fn unconstrained(hessian: Matrix, linear: Vector) -> Self {
        let d = linear.len();
        QpProblem {
            hessian,
            linear,
            a_eq: Matrix::zeros(0, d),
            b_eq: Vector::zeros(0),
            a_in: Matrix::zeros(0, d),
            lb: Vector::zeros(0),
            ub: Vector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.hessian.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                context: "QpProblem",
                expected: format!("{d}x{d} hessian"),
                actual: format!("{}x{}", self.hessian.nrows(), self.hessian.ncols()),
            });
        }
        if self.a_eq.ncols() != d && self.a_eq.nrows() > 0 {
            return Err(Error::DimensionMismatch {
                context: "QpProblem",
                expected: format!("a_eq with {d} columns"),
                actual: format!("{}", self.a_eq.ncols()),
            });
        }
        if self.a_in.ncols() != d && self.a_in.nrows() > 0 {
            return Err(Error::DimensionMismatch {
                context: "QpProblem",
                expected: format!("a_in with {d} columns"),
                actual: format!("{}", self.a_in.ncols()),
            });
        }
        if self.a_eq.nrows() != self.b_eq.len()
            || self.a_in.nrows() != self.lb.len()
            || self.a_in.nrows() != self.ub.len()
        {
            return Err(Error::DimensionMismatch {
                context: "QpProblem",
                expected: "matching constraint row counts".into(),
                actual: "mismatched".into(),
            });
        }
        for i in 0..self.lb.len() {
            if self.lb[i] > self.ub[i] {
                return Err(Error::InvalidModel(format!(
                    "lb[{i}] = {} exceeds ub[{i}] = {}",
                    self.lb[i], self.ub[i]
                )));
            }
        }
        Ok(())
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    pub status: QpStatus,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Stacked duals (equality rows first), for warm starting.
    pub y: Vector,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub relax_alpha: f64,
    pub rho0: f64,
    pub scaling_iters: usize,
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol_abs: 1e-6,
            tol_rel: 1e-6,
            max_iter: 20_000,
            sigma: 1e-6,
            relax_alpha: 1.6,
            rho0: 0.1,
            scaling_iters: 10,
            check_every: 25,
        }
    }
}

/// Solves with default settings and a cold start.
pub fn solve(prob: &QpProblem) -> Result<QpSolution> {
    solve_with(prob, &QpSettings::default(), None)
}

/// Solves with explicit settings; `warm` carries an unscaled `(x, y)` pair
/// from a related problem.
pub fn solve_with(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&Vector, &Vector)>,
) -> Result<QpSolution> {
    prob.validate()?;
    let d = prob.dim();
    let c_eq = prob.a_eq.nrows();
    let c_in = prob.a_in.nrows();
    let c = c_eq + c_in;

    // Stacked constraints: equality rows become l = u = b_eq.
    let mut a = Matrix::zeros(c, d);
    if c_eq > 0 {
        a.view_mut((0, 0), (c_eq, d)).copy_from(&prob.a_eq);
    }
    if c_in > 0 {
        a.view_mut((c_eq, 0), (c_in, d)).copy_from(&prob.a_in);
    }
    let mut l = Vector::zeros(c);
    let mut u = Vector::zeros(c);
    for i in 0..c_eq {
        l[i] = prob.b_eq[i];
        u[i] = prob.b_eq[i];
    }
    for i in 0..c_in {
        l[c_eq + i] = prob.lb[i];
        u[c_eq + i] = prob.ub[i];
    }

    let h = symmetrize(&prob.hessian);
    let q = prob.linear.clone();

    // Ruiz equilibration on [H A^T; A 0] plus cost normalization.
    let mut d_scale = Vector::from_element(d, 1.0);
    let mut e_scale = Vector::from_element(c, 1.0);
    let mut hs = h.clone();
    let mut as_ = a.clone();
    let mut qs = q.clone();
    for _ in 0..settings.scaling_iters {
        let mut dx = Vector::from_element(d, 1.0);
        for j in 0..d {
            let mut mx: f64 = 0.0;
            for i in 0..d {
                mx = mx.max(hs[(i, j)].abs());
            }
            for i in 0..c {
                mx = mx.max(as_[(i, j)].abs());
            }
            if mx > 1e-12 {
                dx[j] = 1.0 / mx.sqrt();
            }
        }
        let mut ex = Vector::from_element(c, 1.0);
        for i in 0..c {
            let mut mx: f64 = 0.0;
            for j in 0..d {
                mx = mx.max(as_[(i, j)].abs());
            }
            if mx > 1e-12 {
                ex[i] = 1.0 / mx.sqrt();
            }
        }
        for i in 0..d {
            for j in 0..d {
                hs[(i, j)] *= dx[i] * dx[j];
            }
        }
        for i in 0..c {
            for j in 0..d {
                as_[(i, j)] *= ex[i] * dx[j];
            }
        }
        for j in 0..d {
            qs[j] *= dx[j];
            d_scale[j] *= dx[j];
        }
        for i in 0..c {
            e_scale[i] *= ex[i];
        }
    }
    // Cost scaling keeps the scaled gradient O(1).
    let mut col_max_mean = 0.0;
    for j in 0..d {
        let mut mx: f64 = 0.0;
        for i in 0..d {
            mx = mx.max(hs[(i, j)].abs());
        }
        col_max_mean += mx;
    }
    col_max_mean /= d.max(1) as f64;
    let cost_scale = 1.0 / col_max_mean.max(qs.amax()).max(1e-6);
    hs *= cost_scale;
    qs *= cost_scale;

    let ls = Vector::from_fn(c, |i, _| l[i] * e_scale[i]);
    let us = Vector::from_fn(c, |i, _| u[i] * e_scale[i]);

    // Per-row penalties: stiffer on equality rows.
    let mut rho_bar = settings.rho0;
    let rho_vec = |rho: f64| -> Vector {
        Vector::from_fn(c, |i, _| {
            if (ls[i] - us[i]).abs() <= f64::EPSILON * (1.0 + us[i].abs()) {
                rho * 1e3
            } else {
                rho
            }
        })
    };
    let mut rho = rho_vec(rho_bar);

    let factorize = |rho: &Vector| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut m = hs.clone();
        for i in 0..d {
            m[(i, i)] += settings.sigma;
        }
        if c > 0 {
            let mut at_rho = as_.transpose();
            for i in 0..c {
                at_rho.column_mut(i).scale_mut(rho[i]);
            }
            m += at_rho * &as_;
        }
        nalgebra::Cholesky::new(m)
            .ok_or_else(|| Error::NumericalFailure("KKT factorization failed".into()))
    };
    let mut kkt = factorize(&rho)?;

    // Scaled iterates (warm start maps unscaled values in).
    let mut x = Vector::zeros(d);
    let mut y = Vector::zeros(c);
    if let Some((x0, y0)) = warm {
        if x0.len() == d && y0.len() == c {
            for j in 0..d {
                x[j] = x0[j] / d_scale[j];
            }
            for i in 0..c {
                y[i] = y0[i] * cost_scale / e_scale[i];
            }
        }
    }
    let mut z = &as_ * &x;
    for i in 0..c {
        z[i] = z[i].clamp(ls[i], us[i]);
    }

    let unscale_x = |x: &Vector| Vector::from_fn(d, |j, _| x[j] * d_scale[j]);
    let unscale_y = |y: &Vector| Vector::from_fn(c, |i, _| y[i] * e_scale[i] / cost_scale);

    let residuals = |x: &Vector, z: &Vector, y: &Vector| -> (f64, f64, f64, f64) {
        let xu = unscale_x(x);
        let yu = unscale_y(y);
        let ax = &a * &xu;
        let zu = Vector::from_fn(c, |i, _| z[i] / e_scale[i]);
        let r_prim = if c > 0 { (&ax - &zu).amax() } else { 0.0 };
        let prim_scale = ax.amax().max(zu.amax()).max(1.0);
        let hx = &h * &xu;
        let aty = if c > 0 {
            a.transpose() * &yu
        } else {
            Vector::zeros(d)
        };
        let r_dual = (&hx + &q + &aty).amax();
        let dual_scale = hx.amax().max(q.amax()).max(aty.amax()).max(1.0);
        (r_prim, prim_scale, r_dual, dual_scale)
    };

    let mut iterations = 0;
    let mut status = QpStatus::MaxIterations;
    let mut last_r = (f64::INFINITY, 1.0, f64::INFINITY, 1.0);
    let mut y_prev_check = y.clone();

    while iterations < settings.max_iter {
        // KKT solve for the regularized subproblem.
        let mut rhs = &x * settings.sigma - &qs;
        if c > 0 {
            let mut t = Vector::zeros(c);
            for i in 0..c {
                t[i] = rho[i] * z[i] - y[i];
            }
            rhs += as_.transpose() * t;
        }
        let x_hat = kkt.solve(&rhs);
        let z_hat = &as_ * &x_hat;
        let alpha = settings.relax_alpha;
        let x_next = &x_hat * alpha + &x * (1.0 - alpha);
        let mut z_next = Vector::zeros(c);
        let mut y_next = Vector::zeros(c);
        for i in 0..c {
            let z_relax = alpha * z_hat[i] + (1.0 - alpha) * z[i];
            let cand = z_relax + y[i] / rho[i];
            z_next[i] = cand.clamp(ls[i], us[i]);
            y_next[i] = y[i] + rho[i] * (z_relax - z_next[i]);
        }
        x = x_next;
        z = z_next;
        let y_old = std::mem::replace(&mut y, y_next);
        iterations += 1;

        if iterations % settings.check_every == 0 || iterations == settings.max_iter {
            let (r_p, sp, r_d, sd) = residuals(&x, &z, &y);
            last_r = (r_p, sp, r_d, sd);
            let eps_p = settings.tol_abs + settings.tol_rel * sp;
            let eps_d = settings.tol_abs + settings.tol_rel * sd;
            if r_p <= eps_p && r_d <= eps_d {
                status = QpStatus::Optimal;
                break;
            }
            // Primal infeasibility certificate from the dual increment.
            let dy_u = unscale_y(&y) - unscale_y(&y_prev_check);
            let dy_norm = dy_u.amax();
            if c > 0 && dy_norm > 1e-12 {
                let at_dy = (a.transpose() * &dy_u).amax();
                let mut support = 0.0;
                let mut bounded = true;
                for i in 0..c {
                    let dyi = dy_u[i];
                    if dyi > 0.0 {
                        if u[i].is_finite() {
                            support += u[i] * dyi;
                        } else {
                            bounded = false;
                        }
                    } else if dyi < 0.0 {
                        if l[i].is_finite() {
                            support += l[i] * dyi;
                        } else {
                            bounded = false;
                        }
                    }
                }
                let eps_inf = 1e-8 * dy_norm;
                if bounded && at_dy <= eps_inf && support <= -eps_inf {
                    status = QpStatus::Infeasible;
                    break;
                }
            }
            y_prev_check = y.clone();

            // Adaptive penalty: rebalance primal vs dual progress.
            if iterations % (settings.check_every * 4) == 0 && r_d > 0.0 {
                let ratio = ((r_p / sp.max(1e-12)) / (r_d / sd.max(1e-12))).sqrt();
                let rho_new = (rho_bar * ratio).clamp(1e-6, 1e6);
                if rho_new > 5.0 * rho_bar || rho_new < rho_bar / 5.0 {
                    rho_bar = rho_new;
                    rho = rho_vec(rho_bar);
                    kkt = factorize(&rho)?;
                }
            }
        }
        let _ = y_old;
    }

    let x_out = unscale_x(&x);
    let y_out = unscale_y(&y);
    // Internal guard: a solution reported optimal must satisfy the KKT
    // system to 1e-5 in scaled units.
    if status == QpStatus::Optimal {
        let (r_p, sp, r_d, sd) = last_r;
        if r_p > 1e-5 * sp.max(1.0) || r_d > 1e-5 * sd.max(1.0) {
            status = QpStatus::MaxIterations;
        }
    }
    Ok(QpSolution {
        objective: prob.objective(&x_out),
        x: x_out,
        status,
        primal_residual: last_r.0,
        dual_residual: last_r.2,
        iterations,
        y: y_out,
    })
}


/// Test-only oracles, enabled for unit tests and for downstream acceptance
/// suites via the `test-oracles` feature. Independent of the ADMM path.
#[cfg(any(test, feature = "test-oracles"))]
pub mod oracles {
    use super::*;

    /// Brute-force reference: enumerate active sets, solve the KKT equality
    /// system for each, keep candidates that are primal feasible with
    /// correctly signed multipliers, and return the best objective's point.
    /// Only sensible for small problems (3^c_in combinations).
    pub fn active_set_solve(prob: &QpProblem) -> Option<Vector> {
        let d = prob.dim();
        let c_in = prob.a_in.nrows();
        let c_eq = prob.a_eq.nrows();
        let tol = 1e-7;
        let mut best: Option<(f64, Vector)> = None;
        // Each inequality row: 0 inactive, 1 at lower, 2 at upper.
        let combos = 3usize.pow(c_in as u32);
        for mask in 0..combos {
            let mut assignment = Vec::with_capacity(c_in);
            let mut mm = mask;
            for _ in 0..c_in {
                assignment.push(mm % 3);
                mm /= 3;
            }
            let active: Vec<(usize, f64)> = assignment
                .iter()
                .enumerate()
                .filter_map(|(i, &s)| match s {
                    1 => Some((i, prob.lb[i])),
                    2 => Some((i, prob.ub[i])),
                    _ => None,
                })
                .collect();
            let na = c_eq + active.len();
            let mut kkt = Matrix::zeros(d + na, d + na);
            kkt.view_mut((0, 0), (d, d)).copy_from(&prob.hessian);
            let mut rhs = Vector::zeros(d + na);
            rhs.rows_mut(0, d).copy_from(&(-&prob.linear));
            for r in 0..c_eq {
                let row = prob.a_eq.row(r).transpose();
                for j in 0..d {
                    kkt[(d + r, j)] = row[j];
                    kkt[(j, d + r)] = row[j];
                }
                rhs[d + r] = prob.b_eq[r];
            }
            for (k, &(i, b)) in active.iter().enumerate() {
                for j in 0..d {
                    kkt[(d + c_eq + k, j)] = prob.a_in[(i, j)];
                    kkt[(j, d + c_eq + k)] = prob.a_in[(i, j)];
                }
                rhs[d + c_eq + k] = b;
            }
            let lu = kkt.lu();
            let Some(sol) = lu.solve(&rhs) else { continue };
            let x = sol.rows(0, d).into_owned();
            // Primal feasibility of inactive rows.
            let ax = &prob.a_in * &x;
            let mut ok = true;
            for i in 0..c_in {
                if ax[i] < prob.lb[i] - tol || ax[i] > prob.ub[i] + tol {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            // Multiplier signs: at upper lambda >= 0, at lower lambda <= 0.
            for (k, &(i, _)) in active.iter().enumerate() {
                let lam = sol[d + c_eq + k];
                match assignment[i] {
                    2 if lam < -tol => ok = false,
                    1 if lam > tol => ok = false,
                    _ => {}
                }
            }
            if !ok {
                continue;
            }
            let obj = prob.objective(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
        best.map(|(_, x)| x)
    }
}
