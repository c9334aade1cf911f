//! The behavioral conditional generative model.
//!
//! Offline, from a trajectory library `(Phi, Z, Y_f)` with `Xi = col(Phi, Z)`:
//!
//! * conditional-mean coefficient `Theta_f = Y_f Xi^+ col(0, I)`,
//! * null-space factor `S = Y_f (I - Xi^+ Xi) / sqrt(N)`,
//! * conditional covariance `Sigma_f = S S^T`.
//!
//! Online, for an initial trajectory `z = col(u_ini, y_ini, u_f)`, the model
//! is `y_f ~ N(Theta_f z, Sigma_f)`. Sampling either mirrors the null-space
//! construction (an N-column product) or uses the covariance factor, which
//! keeps the online cost independent of the library size.

use std::path::Path;

use crate::library::{load_matrix_csv, save_matrix_csv, TrajectoryLibrary};
use crate::numerics::{
    chol_psd, gaussian, op_norm, pinv_detailed, symmetrize, Matrix, RngStream, Vector,
    RNG_ALGORITHM,
};
use crate::{Error, Result};

/// A mean/covariance pair.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: Matrix,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "GaussianBelief",
                expected: format!("{0}x{0} covariance", mean.len()),
                actual: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        Ok(GaussianBelief {
            mean,
            cov: symmetrize(&cov),
        })
    }
}

/// The known initial trajectory `z = col(u_ini, y_ini, u_f)`.
#[derive(Debug, Clone)]
pub struct InitialTrajectory {
    pub u_ini: Vector,
    pub y_ini: Vector,
    pub u_f: Vector,
}

impl InitialTrajectory {
    pub fn new(u_ini: Vector, y_ini: Vector, u_f: Vector) -> Self {
        InitialTrajectory { u_ini, y_ini, u_f }
    }

    /// Stacked conditioning vector.
    pub fn z_vector(&self) -> Vector {
        let mut z = Vector::zeros(self.u_ini.len() + self.y_ini.len() + self.u_f.len());
        z.rows_mut(0, self.u_ini.len()).copy_from(&self.u_ini);
        z.rows_mut(self.u_ini.len(), self.y_ini.len())
            .copy_from(&self.y_ini);
        z.rows_mut(self.u_ini.len() + self.y_ini.len(), self.u_f.len())
            .copy_from(&self.u_f);
        z
    }

    fn check_dims(&self, pred: &CgmPredictor) -> Result<()> {
        let ok = self.u_ini.len() == pred.m * pred.t_ini
            && self.y_ini.len() == pred.p * pred.t_ini
            && self.u_f.len() == pred.m * pred.t;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context: "InitialTrajectory",
                expected: format!(
                    "u_ini {}, y_ini {}, u_f {}",
                    pred.m * pred.t_ini,
                    pred.p * pred.t_ini,
                    pred.m * pred.t
                ),
                actual: format!(
                    "u_ini {}, y_ini {}, u_f {}",
                    self.u_ini.len(),
                    self.y_ini.len(),
                    self.u_f.len()
                ),
            })
        }
    }
}

/// Offline-computed model: everything the online phase needs.
#[derive(Debug, Clone)]
pub struct CgmPredictor {
    /// (pT) x (T_ini (m+p) + T m) conditional-mean coefficient.
    pub theta_f: Matrix,
    /// (pT) x N stochastic factor `Y_f (I - Xi^+ Xi) / sqrt(N)`.
    pub s_factor: Matrix,
    /// (pT) x (pT) conditional covariance `S S^T`.
    pub sigma_f: Matrix,
    /// PSD factor of `sigma_f` for library-size-free sampling.
    pub sigma_f_chol: Matrix,
    pub t_ini: usize,
    pub t: usize,
    pub m: usize,
    pub p: usize,
    /// Library width the model was fitted from.
    pub n_cols: usize,
    /// Spectral norm of `Y_f Y_f^T / N`: the natural scale against which a
    /// numerically zero conditional covariance is recognized.
    pub yf_scale: f64,
}

/// Which factor realizes the stochastic part of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    /// `mean + S xi`, `xi ~ N(0, I_N)`: the literal null-space construction.
    NullSpaceFactor,
    /// `mean + chol(Sigma_f) zeta`: same distribution, O(pT) per sample.
    CovarianceFactor,
}

/// Fits the predictor from a library. Rank-deficient constraint matrices
/// (noise-free data) are handled by the truncated pseudo-inverse, which
/// reproduces the exact deterministic behavioral predictor.
pub fn fit(lib: &TrajectoryLibrary) -> Result<CgmPredictor> {
    let xi = lib.xi();
    let n = lib.n_cols();
    if n == 0 {
        return Err(Error::InsufficientData("library has no columns".into()));
    }
    let info = pinv_detailed(&xi)?;
    if info.rank < xi.nrows() {
        log::warn!(
            "constraint matrix rank {} < rows {}; proceeding with truncated pseudo-inverse",
            info.rank,
            xi.nrows()
        );
    }
    let yf_xid = &lib.yf * &info.pinv; // (pT) x (n_ctrl + z_rows)
    let theta_f = yf_xid.columns(lib.n_ctrl(), lib.z_rows()).into_owned();
    let sqrt_n = (n as f64).sqrt();
    let s_factor = (&lib.yf - &yf_xid * &xi) / sqrt_n;
    let sigma_f = symmetrize(&(&s_factor * s_factor.transpose()));
    let sigma_f_chol = match nalgebra::Cholesky::new(sigma_f.clone()) {
        Some(ch) => ch.l(),
        None => {
            log::debug!("conditional covariance numerically rank-deficient; clamping to PSD");
            chol_psd(&sigma_f)?
        }
    };
    let yf_scale = op_norm(&lib.yf).powi(2) / n as f64;
    Ok(CgmPredictor {
        theta_f,
        s_factor,
        sigma_f,
        sigma_f_chol,
        t_ini: lib.t_ini,
        t: lib.t,
        m: lib.m,
        p: lib.p,
        n_cols: n,
        yf_scale,
    })
}

/// Conditional distribution of the future outputs given `z`: the mean is one
/// matrix-vector product, the covariance does not depend on `z`.
pub fn conditional(pred: &CgmPredictor, z: &InitialTrajectory) -> Result<GaussianBelief> {
    z.check_dims(pred)?;
    GaussianBelief::new(&pred.theta_f * z.z_vector(), pred.sigma_f.clone())
}

/// Draws `count` future-output samples with the null-space factor, matching
/// the generative construction draw for draw.
pub fn sample(
    pred: &CgmPredictor,
    z: &InitialTrajectory,
    rng: &mut RngStream,
    count: usize,
) -> Result<Vec<Vector>> {
    sample_with(pred, z, rng, count, SampleMethod::NullSpaceFactor)
}

/// Draws samples with an explicit choice of stochastic factor.
pub fn sample_with(
    pred: &CgmPredictor,
    z: &InitialTrajectory,
    rng: &mut RngStream,
    count: usize,
    method: SampleMethod,
) -> Result<Vec<Vector>> {
    if count == 0 {
        return Err(Error::InsufficientData("sample count must be >= 1".into()));
    }
    z.check_dims(pred)?;
    let mean = &pred.theta_f * z.z_vector();
    let factor = match method {
        SampleMethod::NullSpaceFactor => &pred.s_factor,
        SampleMethod::CovarianceFactor => &pred.sigma_f_chol,
    };
    (0..count).map(|_| gaussian(rng, &mean, factor)).collect()
}

/// Gaussian log-density of an observed future-output vector under the
/// conditional model. Errors when the conditional covariance is singular.
pub fn log_likelihood(pred: &CgmPredictor, z: &InitialTrajectory, y_f: &Vector) -> Result<f64> {
    z.check_dims(pred)?;
    let k = pred.p * pred.t;
    if y_f.len() != k {
        return Err(Error::DimensionMismatch {
            context: "log_likelihood",
            expected: format!("y_f of length {k}"),
            actual: format!("{}", y_f.len()),
        });
    }
    let eig = nalgebra::SymmetricEigen::new(pred.sigma_f.clone());
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    let lam_min = eig.eigenvalues.min();
    if lam_max <= 1e-13 * pred.yf_scale.max(1e-300) || lam_min <= 1e-12 * lam_max {
        return Err(Error::Singular(
            "conditional covariance is singular; likelihood undefined".into(),
        ));
    }
    let chol = nalgebra::Cholesky::new(pred.sigma_f.clone()).ok_or_else(|| {
        Error::Singular("conditional covariance is singular; likelihood undefined".into())
    })?;
    let resid = y_f - &pred.theta_f * z.z_vector();
    let solved = chol.solve(&resid);
    let quad = resid.dot(&solved);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * quad - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det)
}

// ---------------------------------------------------------------------------
// Persistence (same matrix-directory format as the trajectory library).
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PredictorManifest {
    schema: String,
    t_ini: usize,
    t: usize,
    m: usize,
    p: usize,
    n_cols: usize,
    yf_scale: f64,
    rng_algorithm: String,
    version: String,
}

const PREDICTOR_SCHEMA: &str = "cgm-predictor/v1";

/// Saves the predictor into `dir` (created if missing).
pub fn save_predictor(pred: &CgmPredictor, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = PredictorManifest {
        schema: PREDICTOR_SCHEMA.into(),
        t_ini: pred.t_ini,
        t: pred.t,
        m: pred.m,
        p: pred.p,
        n_cols: pred.n_cols,
        yf_scale: pred.yf_scale,
        rng_algorithm: RNG_ALGORITHM.into(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    save_matrix_csv(&dir.join("theta_f.csv"), &pred.theta_f)?;
    save_matrix_csv(&dir.join("s_factor.csv"), &pred.s_factor)?;
    save_matrix_csv(&dir.join("sigma_f.csv"), &pred.sigma_f)?;
    save_matrix_csv(&dir.join("sigma_f_chol.csv"), &pred.sigma_f_chol)?;
    Ok(())
}

/// Loads a predictor saved by [`save_predictor`].
pub fn load_predictor(dir: &Path) -> Result<CgmPredictor> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let man: PredictorManifest =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    if man.schema != PREDICTOR_SCHEMA {
        return Err(Error::Format(format!("unknown schema {:?}", man.schema)));
    }
    let pt = man.p * man.t;
    let zlen = man.t_ini * (man.m + man.p) + man.t * man.m;
    Ok(CgmPredictor {
        theta_f: load_matrix_csv(&dir.join("theta_f.csv"), (pt, zlen))?,
        s_factor: load_matrix_csv(&dir.join("s_factor.csv"), (pt, man.n_cols))?,
        sigma_f: load_matrix_csv(&dir.join("sigma_f.csv"), (pt, pt))?,
        sigma_f_chol: load_matrix_csv(&dir.join("sigma_f_chol.csv"), (pt, pt))?,
        t_ini: man.t_ini,
        t: man.t,
        m: man.m,
        p: man.p,
        n_cols: man.n_cols,
        yf_scale: man.yf_scale,
    })
}

/// Appendix-style cross-check quantities used by tests and validation: the
/// projector `I - Xi^+ Xi` and the controller-state-orthogonalized blocks.
pub mod identities {
    use super::*;

    /// `I - M^+ M` for the given matrix.
    pub fn null_space_projector(m: &Matrix) -> Result<Matrix> {
        let n = m.ncols();
        let pinv = pinv_detailed(m)?.pinv;
        Ok(Matrix::identity(n, n) - pinv * m)
    }

    /// Alternative mean-coefficient route: `Y_f^perp (Z^perp)^+` with
    /// `X^perp = X (I - Phi^+ Phi)`.
    pub fn theta_via_orthogonalization(lib: &TrajectoryLibrary) -> Result<Matrix> {
        let n = lib.n_cols();
        let phi_proj = if lib.n_ctrl() > 0 {
            null_space_projector(&lib.phi)?
        } else {
            Matrix::identity(n, n)
        };
        let z_perp = lib.z() * &phi_proj;
        let yf_perp = &lib.yf * &phi_proj;
        Ok(yf_perp * pinv_detailed(&z_perp)?.pinv)
    }

    pub use super::stack_z_target;
}

/// Builds the constraint right-hand side `col(0, z)` with zeros aligned to
/// the controller-state rows.
pub fn stack_z_target(lib: &TrajectoryLibrary, z: &Vector) -> Vector {
    let mut out = Vector::zeros(lib.n_ctrl() + z.len());
    out.rows_mut(lib.n_ctrl(), z.len()).copy_from(z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::{build_multi, build_single, format_f64, validate};
    use crate::lti::{
        default_excitation_controller, default_stable_plant, simulate_closed_loop,
        InitialState, NoiseModel, StabilizingController, Trajectory,
    };
    use approx::assert_abs_diff_eq;

    fn noisy_library(len: usize, seed: u64, t_ini: usize, t: usize) -> TrajectoryLibrary {
        let model = default_stable_plant();
        let ctrl = default_excitation_controller(&model);
        let mut rng = RngStream::new(seed, 0);
        let traj = simulate_closed_loop(
            &model,
            &ctrl,
            &NoiseModel::gaussian(),
            &InitialState::Stationary,
            len,
            &mut rng,
        )
        .unwrap();
        build_single(&traj, t_ini, t).unwrap()
    }

    fn noise_free_open_loop(len: usize, seed: u64) -> Trajectory {
        let model = default_stable_plant();
        let ctrl = StabilizingController::white_noise(&model, Matrix::identity(1, 1)).unwrap();
        let mut rng = RngStream::new(seed, 0);
        simulate_closed_loop(
            &model,
            &ctrl,
            &NoiseModel::excitation_only(),
            &InitialState::Gaussian {
                cov: Matrix::identity(4, 4),
            },
            len,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn noise_free_fit_recovers_exact_behavior() {
        let t_ini = 8;
        let t = 10;
        let traj = noise_free_open_loop(400, 3);
        let lib = build_single(&traj, t_ini, t).unwrap();
        let pred = fit(&lib).unwrap();
        assert!(op_norm(&pred.s_factor) < 1e-7, "S not ~0");
        assert!(op_norm(&pred.sigma_f) < 1e-16);

        // Fresh noise-free trajectory: the deterministic prediction must
        // reproduce the unique continuation.
        let fresh = noise_free_open_loop(t_ini + t, 9001);
        let z = InitialTrajectory::new(
            Vector::from_iterator(t_ini, fresh.u[..t_ini].iter().map(|u| u[0])),
            Vector::from_iterator(t_ini, fresh.y[..t_ini].iter().map(|y| y[0])),
            Vector::from_iterator(t, fresh.u[t_ini..].iter().map(|u| u[0])),
        );
        let belief = conditional(&pred, &z).unwrap();
        for s in 0..t {
            assert_abs_diff_eq!(belief.mean[s], fresh.y[t_ini + s][0], epsilon = 1e-7);
        }

        // Least-squares oracle on the behavioral equations directly.
        let zmat = lib.z();
        let g = pinv_detailed(&zmat).unwrap().pinv * z.z_vector();
        let y_oracle = &lib.yf * g;
        for s in 0..t {
            assert_abs_diff_eq!(belief.mean[s], y_oracle[s], epsilon = 1e-7);
        }
    }

    #[test]
    fn theta_matches_orthogonalized_route() {
        let lib = noisy_library(400, 5, 6, 8);
        assert!(lib.n_ctrl() > 0);
        let pred = fit(&lib).unwrap();
        let theta_alt = identities::theta_via_orthogonalization(&lib).unwrap();
        assert!(
            op_norm(&(&pred.theta_f - &theta_alt)) < 1e-8,
            "gap {}",
            op_norm(&(&pred.theta_f - &theta_alt))
        );
    }

    #[test]
    fn projector_identity_and_idempotence() {
        let lib = noisy_library(260, 6, 4, 5);
        let xi = lib.xi();
        let proj = identities::null_space_projector(&xi).unwrap();
        // Idempotence and annihilation.
        assert!(op_norm(&(&proj * &proj - &proj)) <= 1e-9);
        assert!(op_norm(&(&xi * &proj)) <= 1e-9);
        // Factored form through the controller-state orthogonalization.
        let phi_proj = identities::null_space_projector(&lib.phi).unwrap();
        let z_perp = lib.z() * &phi_proj;
        let z_perp_proj = identities::null_space_projector(&z_perp).unwrap();
        let composed = &phi_proj * &z_perp_proj;
        assert!(op_norm(&(&proj - &composed)) <= 1e-8);
    }

    #[test]
    fn constraint_residual_of_reconstructed_solution() {
        let lib = noisy_library(300, 7, 4, 5);
        let xi = lib.xi();
        let info = pinv_detailed(&xi).unwrap();
        let proj = Matrix::identity(lib.n_cols(), lib.n_cols()) - &info.pinv * &xi;
        let mut rng = RngStream::new(17, 0);
        let z = rng.standard_normal_vector(lib.z_rows());
        let target = stack_z_target(&lib, &z);
        let beta = rng.standard_normal_vector(lib.n_cols());
        let alpha = &info.pinv * &target + &proj * beta;
        let resid = &xi * alpha - &target;
        assert!(resid.amax() <= 1e-8);
    }

    #[test]
    fn single_column_library_degenerate_fit() {
        let traj = noise_free_open_loop(18, 4);
        let lib = build_multi(&[traj], 8, 10).unwrap();
        assert_eq!(lib.n_cols(), 1);
        let pred = fit(&lib).unwrap();
        let rank = pinv_detailed(&pred.theta_f).unwrap().rank;
        assert!(rank <= 1);
    }

    #[test]
    fn conditional_mean_linear_cov_constant() {
        let lib = noisy_library(300, 8, 5, 6);
        let pred = fit(&lib).unwrap();
        let zero = InitialTrajectory::new(Vector::zeros(5), Vector::zeros(5), Vector::zeros(6));
        let b0 = conditional(&pred, &zero).unwrap();
        assert_eq!(b0.mean, Vector::zeros(6));
        let mut rng = RngStream::new(19, 0);
        let z1 = InitialTrajectory::new(
            rng.standard_normal_vector(5),
            rng.standard_normal_vector(5),
            rng.standard_normal_vector(6),
        );
        let b1 = conditional(&pred, &z1).unwrap();
        assert_abs_diff_eq!(b0.cov, b1.cov, epsilon = 1e-14);
    }

    #[test]
    fn sampling_reproducible_and_deterministic_when_noise_free() {
        let traj = noise_free_open_loop(200, 12);
        let lib = build_single(&traj, 4, 5).unwrap();
        let pred = fit(&lib).unwrap();
        let mut rng = RngStream::new(7, 7);
        let z = InitialTrajectory::new(
            rng.standard_normal_vector(4),
            rng.standard_normal_vector(4),
            rng.standard_normal_vector(5),
        );
        let mean = conditional(&pred, &z).unwrap().mean;
        let samples = sample(&pred, &z, &mut RngStream::new(1, 0), 8).unwrap();
        for s in &samples {
            assert!((s - &mean).amax() < 1e-7);
        }
        let a = sample(&pred, &z, &mut RngStream::new(2, 5), 4).unwrap();
        let b = sample(&pred, &z, &mut RngStream::new(2, 5), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_covariance_matches_both_methods() {
        let lib = noisy_library(120, 14, 3, 3);
        let pred = fit(&lib).unwrap();
        let z = InitialTrajectory::new(Vector::zeros(3), Vector::zeros(3), Vector::zeros(3));
        let count = 100_000;
        let tol = 3.0 / (count as f64).sqrt();
        for method in [SampleMethod::NullSpaceFactor, SampleMethod::CovarianceFactor] {
            let mut rng = RngStream::new(23, method as u64);
            let samples = sample_with(&pred, &z, &mut rng, count, method).unwrap();
            let mut cov = Matrix::zeros(3, 3);
            for s in &samples {
                cov += s * s.transpose();
            }
            cov /= count as f64;
            let rel = op_norm(&(&cov - &pred.sigma_f)) / op_norm(&pred.sigma_f);
            assert!(rel < tol, "method {method:?}: rel {rel} vs tol {tol}");
        }
    }

    #[test]
    fn zero_phi_rows_equal_dropped_phi() {
        // Open-loop data with a manually zeroed controller-state block: the
        // fitted mean coefficient must match the Phi-free construction.
        let traj = noise_free_open_loop(300, 15);
        let model_noise = {
            let model = default_stable_plant();
            let ctrl = StabilizingController::white_noise(&model, Matrix::identity(1, 1)).unwrap();
            let mut rng = RngStream::new(15, 1);
            simulate_closed_loop(
                &model,
                &ctrl,
                &NoiseModel::gaussian(),
                &InitialState::Zero,
                300,
                &mut rng,
            )
            .unwrap()
        };
        let _ = traj;
        let base = build_single(&model_noise, 5, 6).unwrap();
        let mut with_zero_phi = base.clone();
        with_zero_phi.phi = Matrix::zeros(2, base.n_cols());
        let p1 = fit(&with_zero_phi).unwrap();
        let p2 = fit(&base.without_phi()).unwrap();
        assert!(op_norm(&(&p1.theta_f - &p2.theta_f)) < 1e-9);
    }

    #[test]
    fn log_likelihood_closed_forms() {
        let lib = noisy_library(200, 16, 3, 2);
        let pred = fit(&lib).unwrap();
        let mut rng = RngStream::new(3, 0);
        let z = InitialTrajectory::new(
            rng.standard_normal_vector(3),
            rng.standard_normal_vector(3),
            rng.standard_normal_vector(2),
        );
        let mean = conditional(&pred, &z).unwrap().mean;
        let ll_at_mean = log_likelihood(&pred, &z, &mean).unwrap();
        let chol = nalgebra::Cholesky::new(pred.sigma_f.clone()).unwrap();
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let k = (pred.p * pred.t) as f64;
        let expected = -0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        assert_abs_diff_eq!(ll_at_mean, expected, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_scalar_unit_case() {
        // Sigma = 1, one output, residual 1: density of N(0,1) at 1.
        let mut pred = fit(&noisy_library(150, 17, 2, 1)).unwrap();
        pred.sigma_f = Matrix::identity(1, 1);
        pred.sigma_f_chol = Matrix::identity(1, 1);
        let z = InitialTrajectory::new(Vector::zeros(2), Vector::zeros(2), Vector::zeros(1));
        let mean = conditional(&pred, &z).unwrap().mean;
        let y = Vector::from_column_slice(&[mean[0] + 1.0]);
        let ll = log_likelihood(&pred, &z, &y).unwrap();
        assert_abs_diff_eq!(ll, -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_matches_generic_gaussian_oracle() {
        let lib = noisy_library(220, 18, 3, 3);
        let pred = fit(&lib).unwrap();
        let mut rng = RngStream::new(31, 0);
        for _ in 0..5 {
            let z = InitialTrajectory::new(
                rng.standard_normal_vector(3),
                rng.standard_normal_vector(3),
                rng.standard_normal_vector(3),
            );
            let y = rng.standard_normal_vector(3);
            let ll = log_likelihood(&pred, &z, &y).unwrap();
            // Oracle route: explicit inverse and determinant via eigenvalues.
            let mean = conditional(&pred, &z).unwrap().mean;
            let eig = nalgebra::SymmetricEigen::new(pred.sigma_f.clone());
            let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
            let inv = &eig.eigenvectors
                * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
                * eig.eigenvectors.transpose();
            let r = &y - &mean;
            let oracle = -0.5 * r.dot(&(&inv * &r))
                - 0.5 * 3.0 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * log_det;
            assert_abs_diff_eq!(ll, oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_likelihood_singular_covariance_errors() {
        let traj = noise_free_open_loop(200, 19);
        let lib = build_single(&traj, 4, 4).unwrap();
        let pred = fit(&lib).unwrap();
        let z = InitialTrajectory::new(Vector::zeros(4), Vector::zeros(4), Vector::zeros(4));
        let y = Vector::zeros(4);
        assert!(matches!(
            log_likelihood(&pred, &z, &y),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn log_likelihood_beta_form_consistency() {
        // For y_f = mean + S beta the quadratic term equals the null-space
        // expansion (N/2) ||S' beta'||^2 in the Gamma^-1 metric with
        // Gamma = N Sigma_f.
        let lib = noisy_library(240, 20, 3, 3);
        let pred = fit(&lib).unwrap();
        let n = pred.n_cols as f64;
        let mut rng = RngStream::new(41, 0);
        let z = InitialTrajectory::new(
            rng.standard_normal_vector(3),
            rng.standard_normal_vector(3),
            rng.standard_normal_vector(3),
        );
        let mean = conditional(&pred, &z).unwrap().mean;
        let beta = rng.standard_normal_vector(pred.n_cols);
        let r = &pred.s_factor * &beta;
        let y = &mean + &r;
        let ll = log_likelihood(&pred, &z, &y).unwrap();
        let gamma = &pred.sigma_f * n;
        let gamma_inv_r = nalgebra::Cholesky::new(gamma.clone()).unwrap().solve(&r);
        let quad_beta_form = 0.5 * n * r.dot(&gamma_inv_r);
        let chol = nalgebra::Cholesky::new(pred.sigma_f.clone()).unwrap();
        let log_det_gamma_over_n: f64 =
            chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let k = (pred.p * pred.t) as f64;
        let expected =
            -quad_beta_form - 0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_gamma_over_n;
        assert_abs_diff_eq!(ll, expected, epsilon = 1e-9);
    }

    #[test]
    fn predictor_persistence_round_trip() {
        let lib = noisy_library(180, 22, 3, 4);
        let pred = fit(&lib).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_predictor(&pred, dir.path()).unwrap();
        let loaded = load_predictor(dir.path()).unwrap();
        assert_eq!(loaded.n_cols, pred.n_cols);
        assert_abs_diff_eq!(loaded.theta_f, pred.theta_f, epsilon = 0.0);
        assert_abs_diff_eq!(loaded.sigma_f, pred.sigma_f, epsilon = 0.0);
        // Decimal text is idempotent under reformatting.
        assert_eq!(format_f64(0.1_f64), format_f64("0.1".parse::<f64>().unwrap()));
    }

    #[test]
    fn fit_warns_but_proceeds_on_rank_deficiency() {
        let traj = noise_free_open_loop(90, 23);
        let lib = build_single(&traj, 6, 4).unwrap();
        let report = validate(&lib).unwrap();
        assert!(report.xi_rank < report.xi_rows);
        assert!(fit(&lib).is_ok());
    }
}
