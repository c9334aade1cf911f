//! Stochastic LTI plant simulation and data-collection controllers.
//!
//! The plant is
//! ```text
//! x_{t+1} = A x_t + B u_t + w_t,    w_t ~ (0, Q)
//! y_t     = C x_t + v_t,            v_t ~ (0, R)
//! ```
//! and offline data is collected under a stabilizing dynamic output-feedback
//! controller
//! ```text
//! phi_{t+1} = A_ctrl phi_t + B_ctrl y_t
//! u_t       = C_ctrl phi_t + nu_t,  nu_t ~ (0, R_ctrl)
//! ```
//! with `phi_1 ~ N(0, Sigma_phi)`. Noise draws are Gaussian by default; the
//! uniform and Laplace kinds are scaled to zero mean and the same covariance.

use nalgebra::DMatrix;

use crate::numerics::{
    self, all_finite, chol_psd, dlyap, spectral_radius, symmetrize, Matrix, RngStream, Vector,
};
use crate::{Error, Result};

/// Discrete-time stochastic state-space plant.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Process-noise covariance, symmetric PSD.
    pub q: Matrix,
    /// Measurement-noise covariance, symmetric PSD (positive definite
    /// whenever a Kalman filter is run against the model).
    pub r: Matrix,
}

impl StateSpaceModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, q: Matrix, r: Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::InvalidModel("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::InvalidModel("B row count must match A".into()));
        }
        if c.ncols() != n {
            return Err(Error::InvalidModel("C column count must match A".into()));
        }
        let p = c.nrows();
        if q.shape() != (n, n) {
            return Err(Error::InvalidModel("Q must be n x n".into()));
        }
        if r.shape() != (p, p) {
            return Err(Error::InvalidModel("R must be p x p".into()));
        }
        for (name, mat) in [("A", &a), ("B", &b), ("C", &c), ("Q", &q), ("R", &r)] {
            if !all_finite(mat) {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        // PSD checks double as symmetry checks.
        chol_psd(&q).map_err(|e| Error::InvalidModel(format!("Q not PSD: {e}")))?;
        chol_psd(&r).map_err(|e| Error::InvalidModel(format!("R not PSD: {e}")))?;
        Ok(StateSpaceModel { a, b, c, q, r })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Dynamic output-feedback controller used to excite the plant offline.
///
/// A zero-dimensional controller state (`n_ctrl = 0`) reduces to pure
/// white-noise inputs `u_t = nu_t`.
#[derive(Debug, Clone)]
pub struct StabilizingController {
    pub a_ctrl: Matrix,
    pub b_ctrl: Matrix,
    pub c_ctrl: Matrix,
    /// Excitation-noise covariance, positive definite.
    pub r_ctrl: Matrix,
    /// Initial controller-state covariance, positive definite when n_ctrl > 0.
    pub sigma_phi: Matrix,
}

impl StabilizingController {
    /// Validates dimensions and closed-loop stability against `plant`
    /// (spectral radius of the augmented plant (+) controller matrix < 1).
    pub fn new(
        plant: &StateSpaceModel,
        a_ctrl: Matrix,
        b_ctrl: Matrix,
        c_ctrl: Matrix,
        r_ctrl: Matrix,
        sigma_phi: Matrix,
    ) -> Result<Self> {
        let nc = a_ctrl.nrows();
        let (m, p) = (plant.input_dim(), plant.output_dim());
        if a_ctrl.ncols() != nc || b_ctrl.nrows() != nc || c_ctrl.ncols() != nc {
            return Err(Error::InvalidModel("controller dimensions inconsistent".into()));
        }
        if nc > 0 && b_ctrl.ncols() != p {
            return Err(Error::InvalidModel("B_ctrl must have p columns".into()));
        }
        if c_ctrl.nrows() != m {
            return Err(Error::InvalidModel("C_ctrl must have m rows".into()));
        }
        if r_ctrl.shape() != (m, m) {
            return Err(Error::InvalidModel("R_ctrl must be m x m".into()));
        }
        if sigma_phi.shape() != (nc, nc) {
            return Err(Error::InvalidModel("Sigma_phi must be n_ctrl x n_ctrl".into()));
        }
        chol_psd(&r_ctrl).map_err(|e| Error::InvalidModel(format!("R_ctrl not PSD: {e}")))?;
        if nc > 0 {
            chol_psd(&sigma_phi)
                .map_err(|e| Error::InvalidModel(format!("Sigma_phi not PSD: {e}")))?;
        }
        let ctrl = StabilizingController {
            a_ctrl,
            b_ctrl,
            c_ctrl,
            r_ctrl,
            sigma_phi,
        };
        let (a_hat, _) = closed_loop_matrices(plant, &ctrl);
        let rho = spectral_radius(&a_hat);
        if rho >= 1.0 {
            return Err(Error::InvalidModel(format!(
                "closed loop unstable: spectral radius {rho:.6}"
            )));
        }
        Ok(ctrl)
    }

    /// White-noise inputs `u_t = nu_t` with covariance `r_ctrl` (no
    /// controller state). Only valid for open-loop stable plants.
    pub fn white_noise(plant: &StateSpaceModel, r_ctrl: Matrix) -> Result<Self> {
        let m = plant.input_dim();
        StabilizingController::new(
            plant,
            Matrix::zeros(0, 0),
            Matrix::zeros(0, plant.output_dim()),
            Matrix::zeros(m, 0),
            r_ctrl,
            Matrix::zeros(0, 0),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a_ctrl.nrows()
    }
}

/// Noise realization kinds admitted by the simulator. All are zero mean with
/// second moment matching the declared covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    UniformZeroMean,
    LaplaceZeroMean,
}

/// Scales the declared covariances per noise source. A scale of zero switches
/// the source off; one leaves the covariance as declared.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Multiplies the process-noise covariance Q.
    pub q_scale: f64,
    /// Multiplies the measurement-noise covariance R.
    pub r_scale: f64,
    /// Multiplies the excitation covariance R_ctrl.
    pub r_ctrl_scale: f64,
}

impl NoiseModel {
    pub fn gaussian() -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian,
            q_scale: 1.0,
            r_scale: 1.0,
            r_ctrl_scale: 1.0,
        }
    }

    pub fn off() -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian,
            q_scale: 0.0,
            r_scale: 0.0,
            r_ctrl_scale: 0.0,
        }
    }

    /// Plant noise off, excitation on: noise-free data with random inputs.
    pub fn excitation_only() -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian,
            q_scale: 0.0,
            r_scale: 0.0,
            r_ctrl_scale: 1.0,
        }
    }

    pub fn with_kind(kind: NoiseKind) -> Self {
        NoiseModel {
            kind,
            ..NoiseModel::gaussian()
        }
    }

    /// Effective process covariance.
    pub fn q_eff(&self, model: &StateSpaceModel) -> Matrix {
        &model.q * self.q_scale
    }

    /// Effective measurement covariance.
    pub fn r_eff(&self, model: &StateSpaceModel) -> Matrix {
        &model.r * self.r_scale
    }

    /// Effective excitation covariance.
    pub fn r_ctrl_eff(&self, ctrl: &StabilizingController) -> Matrix {
        &ctrl.r_ctrl * self.r_ctrl_scale
    }
}

/// Draws one unit-variance vector of the given kind and maps it through a
/// covariance factor, so the result has exactly the factor's covariance.
fn noise_draw(kind: NoiseKind, factor: &Matrix, rng: &mut RngStream) -> Vector {
    let k = factor.ncols();
    let xi = match kind {
        NoiseKind::Gaussian => rng.standard_normal_vector(k),
        NoiseKind::UniformZeroMean => Vector::from_fn(k, |_, _| rng.unit_uniform()),
        NoiseKind::LaplaceZeroMean => Vector::from_fn(k, |_, _| rng.unit_laplace()),
    };
    factor * xi
}

/// Precomputed covariance factors for repeated simulation with one noise
/// model; avoids refactoring every step.
#[derive(Debug, Clone)]
pub struct NoiseFactors {
    kind: NoiseKind,
    q_factor: Matrix,
    r_factor: Matrix,
    r_ctrl_factor: Matrix,
}

impl NoiseFactors {
    pub fn new(
        model: &StateSpaceModel,
        ctrl: Option<&StabilizingController>,
        noise: &NoiseModel,
    ) -> Result<Self> {
        let m = model.input_dim();
        Ok(NoiseFactors {
            kind: noise.kind,
            q_factor: chol_psd(&noise.q_eff(model))?,
            r_factor: chol_psd(&noise.r_eff(model))?,
            r_ctrl_factor: match ctrl {
                Some(c) => chol_psd(&noise.r_ctrl_eff(c))?,
                None => Matrix::zeros(m, m),
            },
        })
    }

    pub fn process(&self, rng: &mut RngStream) -> Vector {
        noise_draw(self.kind, &self.q_factor, rng)
    }

    pub fn measurement(&self, rng: &mut RngStream) -> Vector {
        noise_draw(self.kind, &self.r_factor, rng)
    }

    pub fn excitation(&self, rng: &mut RngStream) -> Vector {
        noise_draw(self.kind, &self.r_ctrl_factor, rng)
    }
}

/// A recorded run: inputs, outputs, controller states and (diagnostics only)
/// the true plant states. Data-driven code never reads `x`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub u: Vec<Vector>,
    pub y: Vec<Vector>,
    pub phi: Vec<Vector>,
    pub x: Vec<Vector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// One plant step: returns `(x_next, y)` where `x_next = A x + B u + w` and
/// `y = C x + v`.
pub fn step(
    model: &StateSpaceModel,
    x: &Vector,
    u: &Vector,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<(Vector, Vector)> {
    if x.len() != model.state_dim() || u.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "lti::step",
            expected: format!("x len {}, u len {}", model.state_dim(), model.input_dim()),
            actual: format!("x len {}, u len {}", x.len(), u.len()),
        });
    }
    let factors = NoiseFactors::new(model, None, noise)?;
    let y = &model.c * x + factors.measurement(rng);
    let x_next = &model.a * x + &model.b * u + factors.process(rng);
    Ok((x_next, y))
}

/// How the initial plant state (and controller state, for closed loop) is
/// drawn at the start of a simulation.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// Deterministic zero.
    Zero,
    /// `x_1 ~ N(0, cov)`, independent of `phi_1 ~ N(0, Sigma_phi)`.
    Gaussian { cov: Matrix },
    /// `col(x_1, phi_1)` drawn jointly from the stationary distribution of
    /// the closed loop, removing initialization transients.
    Stationary,
    /// Fixed initial plant state; `phi_1 ~ N(0, Sigma_phi)`.
    Fixed { x0: Vector },
}

const DIVERGENCE_LIMIT: f64 = 1e8;

/// Augmented closed-loop matrices `(A_hat, Q_hat)` for `col(x, phi)`:
/// `A_hat = [[A, B C_ctrl], [B_ctrl C, A_ctrl]]` and `Q_hat` the covariance
/// of `col(B nu + w, B_ctrl v)` at unit noise scales.
pub fn closed_loop_matrices(
    model: &StateSpaceModel,
    ctrl: &StabilizingController,
) -> (Matrix, Matrix) {
    let n = model.state_dim();
    let nc = ctrl.state_dim();
    let mut a_hat = Matrix::zeros(n + nc, n + nc);
    a_hat.view_mut((0, 0), (n, n)).copy_from(&model.a);
    a_hat
        .view_mut((0, n), (n, nc))
        .copy_from(&(&model.b * &ctrl.c_ctrl));
    a_hat
        .view_mut((n, 0), (nc, n))
        .copy_from(&(&ctrl.b_ctrl * &model.c));
    a_hat.view_mut((n, n), (nc, nc)).copy_from(&ctrl.a_ctrl);

    let mut q_hat = Matrix::zeros(n + nc, n + nc);
    let q_x = &model.b * &ctrl.r_ctrl * model.b.transpose() + &model.q;
    q_hat.view_mut((0, 0), (n, n)).copy_from(&q_x);
    let q_phi = &ctrl.b_ctrl * &model.r * ctrl.b_ctrl.transpose();
    q_hat.view_mut((n, n), (nc, nc)).copy_from(&q_phi);
    (a_hat, q_hat)
}

/// Stationary covariance of the augmented closed-loop state `col(x, phi)`
/// under the given noise scales.
pub fn stationary_augmented_cov(
    model: &StateSpaceModel,
    ctrl: &StabilizingController,
    noise: &NoiseModel,
) -> Result<Matrix> {
    let n = model.state_dim();
    let nc = ctrl.state_dim();
    let (a_hat, _) = closed_loop_matrices(model, ctrl);
    let mut q_hat = Matrix::zeros(n + nc, n + nc);
    let q_x = &model.b * noise.r_ctrl_eff(ctrl) * model.b.transpose() + noise.q_eff(model);
    q_hat.view_mut((0, 0), (n, n)).copy_from(&q_x);
    let q_phi = &ctrl.b_ctrl * noise.r_eff(model) * ctrl.b_ctrl.transpose();
    q_hat.view_mut((n, n), (nc, nc)).copy_from(&q_phi);
    dlyap(&a_hat, &q_hat)
}

/// The `Sigma` appearing in the CGM limit: the stationary state covariance
/// with the controller-state-explained part removed,
/// `Sigma_xx - Sigma_xphi Sigma_phiphi^+ Sigma_xphi^T`.
pub fn stationary_sigma(
    model: &StateSpaceModel,
    ctrl: &StabilizingController,
    noise: &NoiseModel,
) -> Result<Matrix> {
    let n = model.state_dim();
    let nc = ctrl.state_dim();
    let pi = stationary_augmented_cov(model, ctrl, noise)?;
    let s_xx = pi.view((0, 0), (n, n)).into_owned();
    if nc == 0 {
        return Ok(s_xx);
    }
    let s_xp = pi.view((0, n), (n, nc)).into_owned();
    let s_pp = pi.view((n, n), (nc, nc)).into_owned();
    let s_pp_pinv = numerics::pinv(&s_pp)?;
    Ok(symmetrize(&(&s_xx - &s_xp * s_pp_pinv * s_xp.transpose())))
}

fn draw_initial(
    model: &StateSpaceModel,
    ctrl: &StabilizingController,
    init: &InitialState,
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<(Vector, Vector)> {
    let n = model.state_dim();
    let nc = ctrl.state_dim();
    let draw_phi = |rng: &mut RngStream| -> Result<Vector> {
        if nc > 0 {
            Ok(chol_psd(&ctrl.sigma_phi)? * rng.standard_normal_vector(nc))
        } else {
            Ok(Vector::zeros(0))
        }
    };
    match init {
        InitialState::Zero => Ok((Vector::zeros(n), Vector::zeros(nc))),
        InitialState::Fixed { x0 } => {
            let phi = draw_phi(rng)?;
            Ok((x0.clone(), phi))
        }
        InitialState::Gaussian { cov } => {
            let x = chol_psd(cov)? * rng.standard_normal_vector(n);
            let phi = draw_phi(rng)?;
            Ok((x, phi))
        }
        InitialState::Stationary => {
            let pi = stationary_augmented_cov(model, ctrl, noise)?;
            let joint = chol_psd(&pi)? * rng.standard_normal_vector(n + nc);
            Ok((joint.rows(0, n).into_owned(), joint.rows(n, nc).into_owned()))
        }
    }
}

/// Simulates `length` steps of the plant in closed loop with the
/// data-collection controller, recording `(u, y, phi, x)`.
pub fn simulate_closed_loop(
    model: &StateSpaceModel,
    ctrl: &StabilizingController,
    noise: &NoiseModel,
    init: &InitialState,
    length: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::InsufficientData("length must be >= 1".into()));
    }
    let factors = NoiseFactors::new(model, Some(ctrl), noise)?;
    let (mut x, mut phi) = draw_initial(model, ctrl, init, noise, rng)?;
    let mut traj = Trajectory {
        u: Vec::with_capacity(length),
        y: Vec::with_capacity(length),
        phi: Vec::with_capacity(length),
        x: Vec::with_capacity(length),
    };
    for t in 0..length {
        if x.norm() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "state norm {:.3e} at step {t}",
                x.norm()
            )));
        }
        let y = &model.c * &x + factors.measurement(rng);
        let u = &ctrl.c_ctrl * &phi + factors.excitation(rng);
        traj.x.push(x.clone());
        traj.phi.push(phi.clone());
        traj.y.push(y.clone());
        traj.u.push(u.clone());
        let x_next = &model.a * &x + &model.b * &u + factors.process(rng);
        let phi_next = &ctrl.a_ctrl * &phi + &ctrl.b_ctrl * &y;
        x = x_next;
        phi = phi_next;
    }
    Ok(traj)
}

/// Simulates the plant open loop under a prescribed input sequence.
/// Controller states are recorded as empty vectors.
pub fn simulate_open_loop(
    model: &StateSpaceModel,
    x0: &Vector,
    u_seq: &[Vector],
    noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let factors = NoiseFactors::new(model, None, noise)?;
    let mut x = x0.clone();
    let mut traj = Trajectory {
        u: Vec::with_capacity(u_seq.len()),
        y: Vec::with_capacity(u_seq.len()),
        phi: Vec::with_capacity(u_seq.len()),
        x: Vec::with_capacity(u_seq.len()),
    };
    for (t, u) in u_seq.iter().enumerate() {
        if x.norm() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence(format!(
                "state norm {:.3e} at step {t}",
                x.norm()
            )));
        }
        let y = &model.c * &x + factors.measurement(rng);
        traj.x.push(x.clone());
        traj.phi.push(Vector::zeros(0));
        traj.y.push(y.clone());
        traj.u.push(u.clone());
        x = &model.a * &x + &model.b * u + factors.process(rng);
    }
    Ok(traj)
}

/// Committed 4-state SISO demo plant, spectral radius 0.95. Synthetic (two
/// damped rotation blocks plus light coupling), not taken from any reference
/// system; noise covariances Q = 0.01 I, R = 0.04.
pub fn default_stable_plant() -> StateSpaceModel {
    let (r1, th1) = (0.95f64, 0.40f64);
    let (r2, th2) = (0.55f64, 1.30f64);
    let mut a = Matrix::zeros(4, 4);
    a[(0, 0)] = r1 * th1.cos();
    a[(0, 1)] = r1 * th1.sin();
    a[(1, 0)] = -r1 * th1.sin();
    a[(1, 1)] = r1 * th1.cos();
    a[(2, 2)] = r2 * th2.cos();
    a[(2, 3)] = r2 * th2.sin();
    a[(3, 2)] = -r2 * th2.sin();
    a[(3, 3)] = r2 * th2.cos();
    a[(0, 2)] = 0.10;
    a[(1, 3)] = -0.05;
    let b = DMatrix::from_column_slice(4, 1, &[1.0, 0.5, 1.0, -0.4]);
    let c = DMatrix::from_row_slice(1, 4, &[1.92, -1.28, 0.96, 0.64]);
    let q = Matrix::identity(4, 4) * 0.01;
    let r = Matrix::identity(1, 1) * 0.04;
    StateSpaceModel::new(a, b, c, q, r).expect("committed plant is valid")
}

/// Mild dynamic output-feedback excitation controller for the default plant:
/// first-order low-pass feedback plus unit-variance white noise.
pub fn default_excitation_controller(plant: &StateSpaceModel) -> StabilizingController {
    StabilizingController::new(
        plant,
        DMatrix::from_row_slice(1, 1, &[0.5]),
        DMatrix::from_row_slice(1, 1, &[0.02]),
        DMatrix::from_row_slice(1, 1, &[-0.3]),
        Matrix::identity(1, 1),
        Matrix::identity(1, 1),
    )
    .expect("committed controller stabilizes the default plant")
}

/// The open-loop unstable benchmark plant (eigenvalues 1.10 and 0.98),
/// Q = 0.01 I, R = 0.04.
pub fn unstable_benchmark_plant() -> StateSpaceModel {
    let a = DMatrix::from_row_slice(2, 2, &[1.10, 0.20, 0.0, 0.98]);
    let b = DMatrix::from_column_slice(2, 1, &[0.50, 0.20]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let q = Matrix::identity(2, 2) * 0.01;
    let r = Matrix::identity(1, 1) * 0.04;
    StateSpaceModel::new(a, b, c, q, r).expect("committed plant is valid")
}

/// Observer-based stabilizer for the unstable benchmark plant: poles of
/// `A - B K` placed at {0.5, 0.6} and of `A - L C` at {0.4, 0.5} by
/// Ackermann's formula, realized in the strictly proper controller form
/// `A_ctrl = A - B K - L C`, `B_ctrl = L`, `C_ctrl = -K`.
pub fn unstable_benchmark_controller(plant: &StateSpaceModel) -> StabilizingController {
    let a_ctrl = DMatrix::from_row_slice(2, 2, &[-1.58, 1.50, -1.992, 1.50]);
    let b_ctrl = DMatrix::from_column_slice(2, 1, &[1.18, 1.392]);
    let c_ctrl = DMatrix::from_row_slice(1, 2, &[-3.0, 2.6]);
    StabilizingController::new(
        plant,
        a_ctrl,
        b_ctrl,
        c_ctrl,
        Matrix::identity(1, 1),
        Matrix::identity(2, 2),
    )
    .expect("committed controller stabilizes the unstable plant")
}
