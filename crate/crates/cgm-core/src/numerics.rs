//! Dense linear-algebra kernels and seeded random sampling.
//!
//! Everything in this module is pure: matrices in, matrices out. The random
//! number generator is ChaCha12, a counter-based stream cipher, so a
//! `(seed, stream_id)` pair fully determines the output sequence and distinct
//! stream ids give independent streams by construction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Dense row-major real matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Relative truncation threshold for the pseudo-inverse: singular values
/// `sigma_i <= EPS_REL * sigma_max * max(rows, cols)` are treated as zero.
/// Chosen so exactly rank-deficient (noise-free) matrices truncate cleanly
/// while generic noisy matrices never do.
pub const EPS_REL: f64 = 1e-12;

/// Name of the generator recorded in output metadata.
pub const RNG_ALGORITHM: &str = "chacha12";

/// Returns true when every entry of `m` is finite.
pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Errors unless every entry of `m` is finite.
pub fn check_finite(m: &Matrix, context: &'static str) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// `(m + m^T) / 2`, forcing exact symmetry.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Spectral norm (largest singular value). Returns 0 for empty matrices.
pub fn op_norm(m: &Matrix) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Spectral radius (largest eigenvalue modulus). Returns 0 for empty matrices.
pub fn spectral_radius(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Result of a truncated singular-value pseudo-inversion.
#[derive(Debug, Clone)]
pub struct PinvResult {
    /// Moore-Penrose pseudo-inverse with small singular values truncated.
    pub pinv: Matrix,
    /// Number of singular values kept.
    pub rank: usize,
    /// Smallest singular value above the truncation threshold (0 if rank 0).
    pub smallest_kept: f64,
    /// Largest singular value (0 for a zero matrix).
    pub sigma_max: f64,
}

/// Moore-Penrose pseudo-inverse via SVD with the crate truncation rule.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    Ok(pinv_detailed(m)?.pinv)
}

/// Pseudo-inverse plus the numerical-rank information used by library
/// validation, so both agree on rank by construction.
pub fn pinv_detailed(m: &Matrix) -> Result<PinvResult> {
    check_finite(m, "pinv input")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(PinvResult {
            pinv: Matrix::zeros(cols, rows),
            rank: 0,
            smallest_kept: 0.0,
            sigma_max: 0.0,
        });
    }
    // The convergence threshold matters: tighter-than-default values make
    // the implicit-shift iteration mishandle exactly rank-deficient inputs.
    let svd = m
        .clone()
        .try_svd_unordered(true, true, f64::EPSILON * 5.0, 0)
        .ok_or_else(|| Error::NumericalFailure("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;
    // Guard against silently inconsistent factorizations.
    {
        let mut rec = u.clone();
        for i in 0..sigma.len() {
            rec.column_mut(i).scale_mut(sigma[i]);
        }
        let err = (rec * v_t - m).camax();
        let scale = sigma.max().max(1e-300) * rows.max(cols) as f64;
        if err > 1e-10 * scale {
            return Err(Error::NumericalFailure(format!(
                "SVD reconstruction error {err:.3e} exceeds tolerance at scale {scale:.3e}"
            )));
        }
    }
    let sigma_max = sigma.max();
    let threshold = EPS_REL * sigma_max * rows.max(cols) as f64;

    let k = sigma.len();
    let mut inv_sigma = DVector::<f64>::zeros(k);
    let mut rank = 0;
    let mut smallest_kept = 0.0;
    for i in 0..k {
        if sigma[i] > threshold {
            inv_sigma[i] = 1.0 / sigma[i];
            rank += 1;
            smallest_kept = sigma[i];
        }
    }
    // pinv = V * diag(1/sigma) * U^T, truncated entries contribute nothing.
    let mut vs = v_t.transpose();
    for i in 0..k {
        vs.column_mut(i).scale_mut(inv_sigma[i]);
    }
    let pinv = vs * u.transpose();
    Ok(PinvResult {
        pinv,
        rank,
        smallest_kept,
        sigma_max,
    })
}

/// Factor `L` with `L * L^T = s` for a symmetric positive semidefinite `s`.
///
/// A plain Cholesky factor is returned when `s` is numerically positive
/// definite. Otherwise the factor comes from a symmetric eigendecomposition
/// with eigenvalues in `[-1e-10*||s||_2, 0)` clamped to zero; eigenvalues
/// below that window make the input indefinite and produce an error.
pub fn chol_psd(s: &Matrix) -> Result<Matrix> {
    check_finite(s, "chol_psd input")?;
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "chol_psd",
            expected: "square matrix".into(),
            actual: format!("{}x{}", s.nrows(), s.ncols()),
        });
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let scale = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let sym_tol = 1e-9 * (1.0 + scale);
    for i in 0..n {
        for j in (i + 1)..n {
            if (s[(i, j)] - s[(j, i)]).abs() > sym_tol {
                return Err(Error::InvalidModel(format!(
                    "chol_psd input not symmetric at ({i},{j}): {} vs {}",
                    s[(i, j)],
                    s[(j, i)]
                )));
            }
        }
    }
    let sym = symmetrize(s);
    if let Some(chol) = nalgebra::Cholesky::new(sym.clone()) {
        return Ok(chol.l());
    }
    // Rank-deficient or slightly indefinite input: clamp tiny negative
    // eigenvalues inside the tolerance window.
    let norm2 = op_norm(&sym);
    let clamp_tol = 1e-10 * norm2;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let min_eig = eig.eigenvalues.min();
    if min_eig < -clamp_tol {
        return Err(Error::NotPsd {
            min_eig,
            tol: clamp_tol,
        });
    }
    let mut l = eig.eigenvectors;
    for i in 0..n {
        let lam = eig.eigenvalues[i].max(0.0);
        l.column_mut(i).scale_mut(lam.sqrt());
    }
    Ok(l)
}

/// Solves the discrete Lyapunov equation `X = a X a^T + q` for stable `a`
/// by squaring: quadratically convergent for spectral radius < 1.
pub fn dlyap(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "dlyap",
            expected: format!("{n}x{n} a and q"),
            actual: format!("a {}x{}, q {}x{}", a.nrows(), a.ncols(), q.nrows(), q.ncols()),
        });
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::NumericalFailure(format!(
            "dlyap requires a stable matrix, spectral radius {rho:.6}"
        )));
    }
    let mut ak = a.clone();
    let mut x = symmetrize(q);
    for _ in 0..200 {
        let incr = &ak * &x * ak.transpose();
        let step = op_norm(&incr);
        x += incr;
        x = symmetrize(&x);
        ak = &ak * &ak;
        if step <= 1e-300 || step <= 1e-16 * op_norm(&x) {
            return Ok(x);
        }
    }
    Err(Error::NumericalFailure(
        "dlyap did not converge in 200 doubling steps".into(),
    ))
}

/// Seeded random stream.
///
/// Identical `(seed, stream_id)` pairs produce identical sequences; distinct
/// stream ids select disjoint ChaCha12 keystreams and are therefore
/// independent by construction. Streams are meant to be owned by exactly one
/// worker; derive one per trial instead of sharing.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    /// Derives a stream for a nested scope (experiment, point, trial, ...)
    /// by folding the ids through SplitMix64. Deterministic and collision
    /// resistant enough for the at-most-millions of streams used here.
    pub fn derived(seed: u64, ids: &[u64]) -> Self {
        let mut h = splitmix64(seed);
        for &id in ids {
            h = splitmix64(h ^ id);
        }
        RngStream::new(seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Vector of i.i.d. standard normal draws.
    pub fn standard_normal_vector(&mut self, len: usize) -> Vector {
        Vector::from_fn(len, |_, _| self.standard_normal())
    }

    /// One zero-mean unit-variance uniform draw (support `[-sqrt(3), sqrt(3))`).
    pub fn unit_uniform(&mut self) -> f64 {
        (self.rng.random::<f64>() - 0.5) * (2.0 * 3.0f64.sqrt())
    }

    /// One zero-mean unit-variance Laplace draw (scale `1/sqrt(2)`).
    pub fn unit_laplace(&mut self) -> f64 {
        let u = self.rng.random::<f64>() - 0.5;
        let b = std::f64::consts::FRAC_1_SQRT_2;
        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    /// Raw uniform in `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Draws `mean + factor * xi` with `xi` standard normal of length
/// `factor.ncols()`. With a zero factor the mean is returned exactly.
pub fn gaussian(rng: &mut RngStream, mean: &Vector, factor: &Matrix) -> Result<Vector> {
    if factor.nrows() != mean.len() {
        return Err(Error::DimensionMismatch {
            context: "gaussian",
            expected: format!("factor with {} rows", mean.len()),
            actual: format!("{} rows", factor.nrows()),
        });
    }
    let xi = rng.standard_normal_vector(factor.ncols());
    Ok(mean + factor * xi)
}
