//! Kalman-filter reference: recursion, stacked multi-step predictor matrices
//! and the coefficient maps that express the filter's output posterior as a
//! linear function of the initial trajectory.
//!
//! The recursion is the standard one,
//! ```text
//! K_t   = P_t^- C^T (C P_t^- C^T + R)^-1
//! x_t   = x_t^- + K_t (y_t - C x_t^-),    P_t = (I - K_t C) P_t^-
//! x_t+1^- = A x_t + B u_t,                P_t+1^- = A P_t A^T + Q
//! ```
//! using the Joseph form of the measurement update for numerical symmetry.

use crate::cgm::{GaussianBelief, InitialTrajectory};
use crate::lti::StateSpaceModel;
use crate::numerics::{symmetrize, Matrix, Vector};
use crate::{Error, Result};

/// Predicted (prior) filter state: mean and covariance of `x_t` given data
/// through `t - 1`.
#[derive(Debug, Clone)]
pub struct KfState {
    pub x_hat_minus: Vector,
    pub p_minus: Matrix,
}

impl KfState {
    pub fn new(x_hat_minus: Vector, p_minus: Matrix) -> Self {
        KfState {
            x_hat_minus,
            p_minus,
        }
    }

    /// Zero-mean prior with the given covariance.
    pub fn zero_mean(p_minus: Matrix) -> Self {
        KfState {
            x_hat_minus: Vector::zeros(p_minus.nrows()),
            p_minus,
        }
    }
}

/// One measurement-plus-time update; returns the prior for the next step.
pub fn kf_step(model: &StateSpaceModel, state: &KfState, u: &Vector, y: &Vector) -> Result<KfState> {
    let n = model.state_dim();
    let p_out = model.output_dim();
    if state.x_hat_minus.len() != n || y.len() != p_out || u.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "kf_step",
            expected: format!("x {n}, y {p_out}, u {}", model.input_dim()),
            actual: format!("x {}, y {}, u {}", state.x_hat_minus.len(), y.len(), u.len()),
        });
    }
    let c = &model.c;
    let p_minus = symmetrize(&state.p_minus);
    let innov_cov = c * &p_minus * c.transpose() + &model.r;
    let chol = nalgebra::Cholesky::new(innov_cov)
        .ok_or_else(|| Error::Singular("innovation covariance C P C^T + R".into()))?;
    // K = P^- C^T S^-1, computed as solving S K^T = C P^-.
    let k = chol.solve(&(c * &p_minus)).transpose();
    let innovation = y - c * &state.x_hat_minus;
    let x_post = &state.x_hat_minus + &k * innovation;
    let i_kc = Matrix::identity(n, n) - &k * c;
    let p_post = &i_kc * &p_minus * i_kc.transpose() + &k * &model.r * k.transpose();
    let x_next = &model.a * x_post + &model.b * u;
    let p_next = symmetrize(&(&model.a * p_post * model.a.transpose() + &model.q));
    Ok(KfState {
        x_hat_minus: x_next,
        p_minus: p_next,
    })
}

/// Stacked matrices of the unrolled dynamics over a horizon of `T` steps:
/// `y_f = O_f x_1 + H_f u_f + G_f w_f + v_f` with time running over the
/// horizon and `x_1` the state at its first step.
#[derive(Debug, Clone)]
pub struct PredictorMatrices {
    /// (pT) x n extended observability matrix, block row t is C A^(t-1).
    pub o_f: Matrix,
    /// (pT) x (nT), strictly block lower triangular, block (i, j) = C A^(i-j-1).
    pub g_f: Matrix,
    /// (pT) x (mT) input-to-output map, `G_f (I_T (x) B)`.
    pub h_f: Matrix,
    /// (nT) x (nT) stacked process covariance `I_T (x) Q`.
    pub q_f: Matrix,
    /// (pT) x (pT) stacked measurement covariance `I_T (x) R`.
    pub r_f: Matrix,
    pub t: usize,
}

/// Builds the unrolled predictor matrices for horizon `t >= 1`.
pub fn predictor_matrices(model: &StateSpaceModel, t: usize) -> PredictorMatrices {
    let n = model.state_dim();
    let p = model.output_dim();
    let mut o_f = Matrix::zeros(p * t, n);
    let mut g_f = Matrix::zeros(p * t, n * t);
    let mut a_pow = Matrix::identity(n, n); // A^0
    let mut ca_pows: Vec<Matrix> = Vec::with_capacity(t);
    for _ in 0..t {
        ca_pows.push(&model.c * &a_pow);
        a_pow = &a_pow * &model.a;
    }
    for i in 0..t {
        o_f.view_mut((i * p, 0), (p, n)).copy_from(&ca_pows[i]);
        for j in 0..i {
            g_f.view_mut((i * p, j * n), (p, n))
                .copy_from(&ca_pows[i - j - 1]);
        }
    }
    let ident_b = Matrix::identity(t, t).kronecker(&model.b);
    let h_f = &g_f * ident_b;
    let q_f = Matrix::identity(t, t).kronecker(&model.q);
    let r_f = Matrix::identity(t, t).kronecker(&model.r);
    PredictorMatrices {
        o_f,
        g_f,
        h_f,
        q_f,
        r_f,
        t,
    }
}

impl PredictorMatrices {
    /// Output-posterior covariance for a given predicted state covariance:
    /// `O_f P O_f^T + G_f Q_f G_f^T + R_f`.
    pub fn yf_covariance(&self, p_pred: &Matrix) -> Matrix {
        symmetrize(&(&self.o_f * p_pred * self.o_f.transpose()
            + &self.g_f * &self.q_f * self.g_f.transpose()
            + &self.r_f))
    }
}

/// Output posterior of the filter: runs the recursion over the initial
/// window `(u_ini, y_ini)` from `init`, then rolls the predicted state out
/// over the future horizon.
pub fn posterior_yf(
    model: &StateSpaceModel,
    init: &KfState,
    z: &InitialTrajectory,
) -> Result<GaussianBelief> {
    let m = model.input_dim();
    let p = model.output_dim();
    if z.u_ini.len() % m != 0 || z.y_ini.len() % p != 0 || z.u_f.len() % m != 0 {
        return Err(Error::DimensionMismatch {
            context: "posterior_yf",
            expected: "u_ini/y_ini/u_f lengths divisible by m/p/m".into(),
            actual: format!("{}/{}/{}", z.u_ini.len(), z.y_ini.len(), z.u_f.len()),
        });
    }
    let t_ini = z.u_ini.len() / m;
    if z.y_ini.len() / p != t_ini {
        return Err(Error::DimensionMismatch {
            context: "posterior_yf",
            expected: format!("y_ini for T_ini = {t_ini}"),
            actual: format!("{}", z.y_ini.len() / p),
        });
    }
    let t = z.u_f.len() / m;
    let mut state = init.clone();
    for s in 0..t_ini {
        let u = z.u_ini.rows(s * m, m).into_owned();
        let y = z.y_ini.rows(s * p, p).into_owned();
        state = kf_step(model, &state, &u, &y)?;
    }
    let pm = predictor_matrices(model, t);
    let mean = &pm.o_f * &state.x_hat_minus + &pm.h_f * &z.u_f;
    let cov = pm.yf_covariance(&state.p_minus);
    GaussianBelief::new(mean, cov)
}

/// The filter's predicted state after the initial window, expressed as a
/// linear map instead of a vector:
/// `x_hat_minus(T_ini + 1) = theta_minus * col(u_ini, y_ini) + psi_minus * mu`.
#[derive(Debug, Clone)]
pub struct EtaMap {
    /// (pT) x (T_ini (m+p) + T m) coefficient of the output-posterior mean:
    /// `[O_f theta_minus, H_f]`.
    pub eta_f: Matrix,
    /// (pT) x n coefficient of the prior mean: `O_f psi_minus`.
    pub psi_term: Matrix,
    /// Predicted state covariance after the window.
    pub p_pred: Matrix,
    /// n x (T_ini (m+p)) state-level coefficient of col(u_ini, y_ini).
    pub theta_minus: Matrix,
    /// n x n state-level coefficient of the prior mean.
    pub psi_minus: Matrix,
}

/// Propagates coefficient matrices through the recursion: exact linear maps,
/// no finite differencing. `p0` is the prior covariance of the state at the
/// first window step.
pub fn eta_map(model: &StateSpaceModel, p0: &Matrix, t_ini: usize, t: usize) -> Result<EtaMap> {
    let n = model.state_dim();
    let m = model.input_dim();
    let p = model.output_dim();
    if p0.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "eta_map",
            expected: format!("{n}x{n} prior covariance"),
            actual: format!("{}x{}", p0.nrows(), p0.ncols()),
        });
    }
    let zlen = t_ini * (m + p);
    let mut theta = Matrix::zeros(n, zlen);
    let mut psi = Matrix::identity(n, n);
    let mut cov = symmetrize(p0);
    let c = &model.c;
    for s in 0..t_ini {
        let innov_cov = c * &cov * c.transpose() + &model.r;
        let chol = nalgebra::Cholesky::new(innov_cov)
            .ok_or_else(|| Error::Singular("innovation covariance in eta_map".into()))?;
        let k = chol.solve(&(c * &cov)).transpose();
        let i_kc = Matrix::identity(n, n) - &k * c;
        // Measurement update: x = (I - KC) x^- + K y_s.
        theta = &i_kc * theta;
        theta
            .view_mut((0, t_ini * m + s * p), (n, p))
            .copy_from(&k);
        psi = &i_kc * psi;
        cov = &i_kc * &cov * i_kc.transpose() + &k * &model.r * k.transpose();
        // Time update: x^- = A x + B u_s.
        theta = &model.a * theta;
        let prev = theta.view((0, s * m), (n, m)).into_owned();
        theta
            .view_mut((0, s * m), (n, m))
            .copy_from(&(prev + &model.b));
        psi = &model.a * psi;
        cov = symmetrize(&(&model.a * &cov * model.a.transpose() + &model.q));
    }
    let pm = predictor_matrices(model, t);
    let mut eta_f = Matrix::zeros(p * t, zlen + t * m);
    eta_f
        .view_mut((0, 0), (p * t, zlen))
        .copy_from(&(&pm.o_f * &theta));
    eta_f
        .view_mut((0, zlen), (p * t, t * m))
        .copy_from(&pm.h_f);
    let psi_term = &pm.o_f * &psi;
    Ok(EtaMap {
        eta_f,
        psi_term,
        p_pred: cov,
        theta_minus: theta,
        psi_minus: psi,
    })
}
