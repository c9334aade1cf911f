//! Trajectory libraries: Hankel form from one long run or stacked form from
//! many independent runs.
//!
//! A library is the triple `(Phi, Z, Y_f)` with `Z = col(U_p, Y_p, U_f)`:
//! controller states, past inputs, past outputs and future inputs as the
//! conditioning blocks, future outputs as the predicted block. Persistence
//! uses a directory with a JSON manifest plus one decimal-text matrix file
//! per block; the decimal encoding round-trips bit-exactly.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::lti::Trajectory;
use crate::numerics::{pinv_detailed, Matrix, Vector, RNG_ALGORITHM};
use crate::{Error, Result};

/// Whether the columns come from one long trajectory (overlapping Hankel
/// windows) or from independent trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LibrarySource {
    Single,
    Multi,
}

/// The offline data arranged for the conditional generative model.
#[derive(Debug, Clone)]
pub struct TrajectoryLibrary {
    /// Controller state at the first time index of each column, n_ctrl x N.
    pub phi: Matrix,
    /// Past inputs, (m * T_ini) x N.
    pub up: Matrix,
    /// Past outputs, (p * T_ini) x N.
    pub yp: Matrix,
    /// Future inputs, (m * T) x N.
    pub uf: Matrix,
    /// Future outputs, (p * T) x N.
    pub yf: Matrix,
    pub t_ini: usize,
    pub t: usize,
    pub m: usize,
    pub p: usize,
    pub source: LibrarySource,
}

/// Numerical-rank summary of the stacked constraint matrix.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub xi_rank: usize,
    pub xi_rows: usize,
    pub smallest_kept_singular_value: f64,
    /// Full row rank of the stacked input block col(U_p, U_f) — the
    /// verifiable part of the persistent-excitation condition when the true
    /// state dimension is unknown.
    pub pe_order_satisfied: bool,
}

impl TrajectoryLibrary {
    pub fn n_cols(&self) -> usize {
        self.up.ncols()
    }

    pub fn n_ctrl(&self) -> usize {
        self.phi.nrows()
    }

    /// Rows of `Z = col(U_p, Y_p, U_f)`.
    pub fn z_rows(&self) -> usize {
        self.up.nrows() + self.yp.nrows() + self.uf.nrows()
    }

    /// Stacks `Z = col(U_p, Y_p, U_f)`.
    pub fn z(&self) -> Matrix {
        stack_rows(&[&self.up, &self.yp, &self.uf])
    }

    /// Stacks `Xi = col(Phi, Z)`.
    pub fn xi(&self) -> Matrix {
        stack_rows(&[&self.phi, &self.up, &self.yp, &self.uf])
    }

    /// Returns a copy with the controller-state rows removed.
    pub fn without_phi(&self) -> TrajectoryLibrary {
        TrajectoryLibrary {
            phi: Matrix::zeros(0, self.n_cols()),
            ..self.clone()
        }
    }
}

pub(crate) fn stack_rows(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        if b.nrows() > 0 {
            out.view_mut((r, 0), (b.nrows(), b.ncols())).copy_from(*b);
            r += b.nrows();
        }
    }
    out
}

/// Block-Hankel matrix of the vector sequence with the given depth:
/// column j is `col(seq[j], ..., seq[j + depth - 1])`.
pub fn hankel(seq: &[Vector], depth: usize) -> Result<Matrix> {
    if depth == 0 {
        return Err(Error::InsufficientData("hankel depth must be >= 1".into()));
    }
    if seq.len() < depth {
        return Err(Error::InsufficientData(format!(
            "sequence length {} shorter than depth {depth}",
            seq.len()
        )));
    }
    let d = seq[0].len();
    let n = seq.len() - depth + 1;
    let mut out = Matrix::zeros(d * depth, n);
    for j in 0..n {
        for i in 0..depth {
            out.view_mut((i * d, j), (d, 1)).copy_from(&seq[j + i]);
        }
    }
    Ok(out)
}

/// Builds a library from one long trajectory: depth-(T_ini + T) Hankels of
/// `u` and `y` split into past/future blocks, with `Phi` column j the
/// controller state at the first time index of column j.
pub fn build_single(traj: &Trajectory, t_ini: usize, t: usize) -> Result<TrajectoryLibrary> {
    let depth = t_ini + t;
    let k = traj.len();
    if k < depth {
        return Err(Error::InsufficientData(format!(
            "trajectory length {k} below T_ini + T = {depth}"
        )));
    }
    let m = traj.u[0].len();
    let p = traj.y[0].len();
    let n = k - depth + 1;
    let hu = hankel(&traj.u, depth)?;
    let hy = hankel(&traj.y, depth)?;
    let up = hu.rows(0, m * t_ini).into_owned();
    let uf = hu.rows(m * t_ini, m * t).into_owned();
    let yp = hy.rows(0, p * t_ini).into_owned();
    let yf = hy.rows(p * t_ini, p * t).into_owned();
    let nc = traj.phi[0].len();
    let mut phi = Matrix::zeros(nc, n);
    for j in 0..n {
        phi.column_mut(j).copy_from(&traj.phi[j]);
    }
    Ok(TrajectoryLibrary {
        phi,
        up,
        yp,
        uf,
        yf,
        t_ini,
        t,
        m,
        p,
        source: LibrarySource::Single,
    })
}

/// Builds a library from independent trajectories of length exactly
/// `T_ini + T`; column i holds trajectory i and `Phi` its first controller
/// state.
pub fn build_multi(trajs: &[Trajectory], t_ini: usize, t: usize) -> Result<TrajectoryLibrary> {
    let depth = t_ini + t;
    let n = trajs.len();
    if n == 0 {
        return Err(Error::InsufficientData("no trajectories given".into()));
    }
    for (i, tr) in trajs.iter().enumerate() {
        if tr.len() != depth {
            return Err(Error::InsufficientData(format!(
                "trajectory {i} has length {}, expected exactly {depth}",
                tr.len()
            )));
        }
    }
    let m = trajs[0].u[0].len();
    let p = trajs[0].y[0].len();
    let nc = trajs[0].phi[0].len();
    let mut up = Matrix::zeros(m * t_ini, n);
    let mut uf = Matrix::zeros(m * t, n);
    let mut yp = Matrix::zeros(p * t_ini, n);
    let mut yf = Matrix::zeros(p * t, n);
    let mut phi = Matrix::zeros(nc, n);
    for (i, tr) in trajs.iter().enumerate() {
        for s in 0..t_ini {
            up.view_mut((s * m, i), (m, 1)).copy_from(&tr.u[s]);
            yp.view_mut((s * p, i), (p, 1)).copy_from(&tr.y[s]);
        }
        for s in 0..t {
            uf.view_mut((s * m, i), (m, 1)).copy_from(&tr.u[t_ini + s]);
            yf.view_mut((s * p, i), (p, 1)).copy_from(&tr.y[t_ini + s]);
        }
        phi.column_mut(i).copy_from(&tr.phi[0]);
    }
    Ok(TrajectoryLibrary {
        phi,
        up,
        yp,
        uf,
        yf,
        t_ini,
        t,
        m,
        p,
        source: LibrarySource::Multi,
    })
}

/// Computes the numerical rank of `Xi = col(Phi, Z)` under the same
/// truncation rule as the pseudo-inverse, plus the input persistent
/// excitation check. Report-only; deficiencies are logged, not errors.
pub fn validate(lib: &TrajectoryLibrary) -> Result<RankReport> {
    let xi = lib.xi();
    let info = pinv_detailed(&xi)?;
    let xi_rows = xi.nrows();
    let input_block = stack_rows(&[&lib.up, &lib.uf]);
    let pe = if input_block.nrows() == 0 {
        true
    } else {
        pinv_detailed(&input_block)?.rank == input_block.nrows()
    };
    if info.rank < xi_rows {
        log::warn!(
            "library constraint matrix rank-deficient: rank {} of {} rows",
            info.rank,
            xi_rows
        );
    }
    // Width bound from the almost-sure full-rank result, with the controller
    // state dimension standing in for the unknown controllability index.
    let r = lib.n_ctrl() + lib.m * (lib.t_ini + lib.t) + lib.p * lib.t_ini;
    let bound = (r + 1) * (lib.t_ini + lib.t) + r * lib.n_ctrl();
    if lib.n_cols() < bound {
        log::warn!(
            "library width N = {} below the full-rank guarantee bound {bound}",
            lib.n_cols()
        );
    }
    Ok(RankReport {
        xi_rank: info.rank,
        xi_rows,
        smallest_kept_singular_value: info.smallest_kept,
        pe_order_satisfied: pe,
    })
}

// ---------------------------------------------------------------------------
// Persistence: manifest + decimal-text matrix files.
// ---------------------------------------------------------------------------

/// Formats one f64 with 17 significant digits; parsing and re-formatting the
/// result reproduces the same bytes.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a matrix as comma-separated decimal text, one row per line.
pub fn save_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_f64(m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`save_matrix_csv`]. `expected` fixes the shape
/// for matrices with zero rows or columns, which the text alone cannot encode.
pub fn load_matrix_csv(path: &Path, expected: (usize, usize)) -> Result<Matrix> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut entries: Vec<f64> = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number {s:?} in {path:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::Format(format!(
                    "ragged row in {path:?}: {} vs {c}",
                    vals.len()
                )))
            }
            _ => {}
        }
        entries.extend(vals);
        rows += 1;
    }
    let cols = cols.unwrap_or(expected.1);
    if rows != expected.0 || cols != expected.1 {
        return Err(Error::Format(format!(
            "{path:?}: expected {}x{}, found {rows}x{cols}",
            expected.0, expected.1
        )));
    }
    Ok(Matrix::from_row_slice(rows, cols, &entries))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct LibraryManifest {
    schema: String,
    t_ini: usize,
    t: usize,
    n_cols: usize,
    m: usize,
    p: usize,
    n_ctrl: usize,
    source: LibrarySource,
    rng_algorithm: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    version: String,
}

const LIBRARY_SCHEMA: &str = "trajectory-library/v1";

/// Saves the library into `dir` (created if missing): `manifest.json` plus
/// one matrix file per block.
pub fn save_library(lib: &TrajectoryLibrary, dir: &Path, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = LibraryManifest {
        schema: LIBRARY_SCHEMA.into(),
        t_ini: lib.t_ini,
        t: lib.t,
        n_cols: lib.n_cols(),
        m: lib.m,
        p: lib.p,
        n_ctrl: lib.n_ctrl(),
        source: lib.source,
        rng_algorithm: RNG_ALGORITHM.into(),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    save_matrix_csv(&dir.join("phi.csv"), &lib.phi)?;
    save_matrix_csv(&dir.join("up.csv"), &lib.up)?;
    save_matrix_csv(&dir.join("yp.csv"), &lib.yp)?;
    save_matrix_csv(&dir.join("uf.csv"), &lib.uf)?;
    save_matrix_csv(&dir.join("yf.csv"), &lib.yf)?;
    Ok(())
}

/// Loads a library saved by [`save_library`].
pub fn load_library(dir: &Path) -> Result<TrajectoryLibrary> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let man: LibraryManifest =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    if man.schema != LIBRARY_SCHEMA {
        return Err(Error::Format(format!("unknown schema {:?}", man.schema)));
    }
    let n = man.n_cols;
    Ok(TrajectoryLibrary {
        phi: load_matrix_csv(&dir.join("phi.csv"), (man.n_ctrl, n))?,
        up: load_matrix_csv(&dir.join("up.csv"), (man.m * man.t_ini, n))?,
        yp: load_matrix_csv(&dir.join("yp.csv"), (man.p * man.t_ini, n))?,
        uf: load_matrix_csv(&dir.join("uf.csv"), (man.m * man.t, n))?,
        yf: load_matrix_csv(&dir.join("yf.csv"), (man.p * man.t, n))?,
        t_ini: man.t_ini,
        t: man.t,
        m: man.m,
        p: man.p,
        source: man.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{
        default_excitation_controller, default_stable_plant, simulate_closed_loop, InitialState,
        NoiseModel, StabilizingController,
    };
    use crate::numerics::{Matrix, RngStream};
    use approx::assert_abs_diff_eq;

    fn scalar_seq(vals: &[f64]) -> Vec<Vector> {
        vals.iter().map(|&v| Vector::from_column_slice(&[v])).collect()
    }

    #[test]
    fn hankel_scalar_definition() {
        let h = hankel(&scalar_seq(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(h, Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn hankel_depth_equals_length_single_column() {
        let h = hankel(&scalar_seq(&[5.0, 6.0, 7.0]), 3).unwrap();
        assert_eq!(h.ncols(), 1);
        assert_eq!(h, Matrix::from_column_slice(3, 1, &[5.0, 6.0, 7.0]));
    }

    #[test]
    fn hankel_vector_blocks() {
        let mut rng = RngStream::new(1, 0);
        let seq: Vec<Vector> = (0..5).map(|_| rng.standard_normal_vector(2)).collect();
        let h = hankel(&seq, 3).unwrap();
        assert_eq!(h.shape(), (6, 3));
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(h[(2 * i, j)], seq[j + i][0]);
                assert_eq!(h[(2 * i + 1, j)], seq[j + i][1]);
            }
        }
    }

    #[test]
    fn hankel_too_short_errors() {
        assert!(hankel(&scalar_seq(&[1.0]), 2).is_err());
    }

    fn demo_trajectory(len: usize, seed: u64) -> Trajectory {
        let model = default_stable_plant();
        let ctrl = default_excitation_controller(&model);
        let mut rng = RngStream::new(seed, 0);
        simulate_closed_loop(
            &model,
            &ctrl,
            &NoiseModel::gaussian(),
            &InitialState::Stationary,
            len,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn build_single_paper_width_relation() {
        let traj = demo_trajectory(117, 2);
        let lib = build_single(&traj, 8, 10).unwrap();
        assert_eq!(lib.n_cols(), 100);
        assert_eq!(lib.z_rows(), 8 + 8 + 10);
    }

    #[test]
    fn build_single_minimal_length_one_column() {
        let traj = demo_trajectory(18, 3);
        let lib = build_single(&traj, 8, 10).unwrap();
        assert_eq!(lib.n_cols(), 1);
        for s in 0..8 {
            assert_eq!(lib.up[(s, 0)], traj.u[s][0]);
            assert_eq!(lib.yp[(s, 0)], traj.y[s][0]);
        }
        for s in 0..10 {
            assert_eq!(lib.uf[(s, 0)], traj.u[8 + s][0]);
            assert_eq!(lib.yf[(s, 0)], traj.y[8 + s][0]);
        }
    }

    #[test]
    fn build_single_hankel_shift_property() {
        let traj = demo_trajectory(60, 4);
        let lib = build_single(&traj, 5, 4).unwrap();
        // entry (i + block, j) == entry (i, j + 1) within each Hankel block
        for (block, bm) in [(1usize, &lib.up), (1usize, &lib.uf)] {
            for i in 0..bm.nrows() - block {
                for j in 0..bm.ncols() - 1 {
                    assert_eq!(bm[(i + block, j)], bm[(i, j + 1)]);
                }
            }
        }
    }

    #[test]
    fn build_single_column_reproduces_subtrajectory() {
        let traj = demo_trajectory(40, 5);
        let lib = build_single(&traj, 6, 7).unwrap();
        for j in [0usize, 11, 27] {
            for s in 0..6 {
                assert_eq!(lib.up[(s, j)], traj.u[j + s][0]);
                assert_eq!(lib.yp[(s, j)], traj.y[j + s][0]);
            }
            for s in 0..7 {
                assert_eq!(lib.uf[(s, j)], traj.u[j + 6 + s][0]);
                assert_eq!(lib.yf[(s, j)], traj.y[j + 6 + s][0]);
            }
            assert_eq!(lib.phi[(0, j)], traj.phi[j][0]);
        }
    }

    #[test]
    fn build_multi_hand_placement() {
        // 2 trajectories of a 1-input/1-output system, T_ini = 1, T = 1.
        let t1 = Trajectory {
            u: scalar_seq(&[1.0, 2.0]),
            y: scalar_seq(&[3.0, 4.0]),
            phi: vec![Vector::zeros(0), Vector::zeros(0)],
            x: vec![Vector::zeros(1), Vector::zeros(1)],
        };
        let t2 = Trajectory {
            u: scalar_seq(&[5.0, 6.0]),
            y: scalar_seq(&[7.0, 8.0]),
            phi: vec![Vector::zeros(0), Vector::zeros(0)],
            x: vec![Vector::zeros(1), Vector::zeros(1)],
        };
        let lib = build_multi(&[t1, t2], 1, 1).unwrap();
        let z = lib.z();
        assert_eq!(z.shape(), (3, 2));
        assert_eq!(z, Matrix::from_row_slice(3, 2, &[1.0, 5.0, 3.0, 7.0, 2.0, 6.0]));
        assert_eq!(lib.yf, Matrix::from_row_slice(1, 2, &[4.0, 8.0]));
    }

    #[test]
    fn build_multi_order_permutes_columns() {
        let a = demo_trajectory(18, 10);
        let b = demo_trajectory(18, 11);
        let lib_ab = build_multi(&[a.clone(), b.clone()], 8, 10).unwrap();
        let lib_ba = build_multi(&[b, a], 8, 10).unwrap();
        assert_eq!(lib_ab.yf.column(0), lib_ba.yf.column(1));
        assert_eq!(lib_ab.up.column(1), lib_ba.up.column(0));
    }

    #[test]
    fn build_multi_length_mismatch_errors() {
        let a = demo_trajectory(18, 10);
        let b = demo_trajectory(19, 11);
        assert!(build_multi(&[a, b], 8, 10).is_err());
        assert!(build_multi(&[], 8, 10).is_err());
    }

    #[test]
    fn validate_noisy_library_full_rank() {
        for seed in 0..20 {
            let traj = demo_trajectory(800, 100 + seed);
            let lib = build_single(&traj, 8, 10).unwrap();
            let rep = validate(&lib).unwrap();
            assert_eq!(rep.xi_rank, rep.xi_rows, "seed {seed}");
            assert!(rep.pe_order_satisfied, "seed {seed}");
            assert!(rep.smallest_kept_singular_value > 0.0);
        }
    }

    #[test]
    fn validate_noise_free_rank_deficiency() {
        // Open-loop white-noise inputs, no plant noise: rank of Xi equals
        // m*(T_ini+T) + n, short of full rows by p*T_ini - n.
        let model = default_stable_plant();
        let ctrl = StabilizingController::white_noise(&model, Matrix::identity(1, 1)).unwrap();
        let mut rng = RngStream::new(77, 0);
        let traj = simulate_closed_loop(
            &model,
            &ctrl,
            &NoiseModel::excitation_only(),
            &InitialState::Gaussian { cov: Matrix::identity(4, 4) },
            400,
            &mut rng,
        )
        .unwrap();
        let lib = build_single(&traj, 8, 10).unwrap();
        let rep = validate(&lib).unwrap();
        let expected_rank = 1 * (8 + 10) + 4;
        assert_eq!(rep.xi_rank, expected_rank);
        assert!(rep.xi_rank < rep.xi_rows);
        assert_eq!(rep.xi_rows, 18 + 8);
    }

    #[test]
    fn validate_degenerate_libraries() {
        // Identical copies of one trajectory: rank collapses to 1 column's worth.
        let tr = demo_trajectory(18, 21);
        let lib = build_multi(&vec![tr; 30], 8, 10).unwrap();
        let rep = validate(&lib).unwrap();
        assert_eq!(rep.xi_rank, 1);
        assert!(!rep.pe_order_satisfied);

        // Zero library: rank 0.
        let zero_traj = Trajectory {
            u: vec![Vector::zeros(1); 18],
            y: vec![Vector::zeros(1); 18],
            phi: vec![Vector::zeros(0); 18],
            x: vec![Vector::zeros(4); 18],
        };
        let zlib = build_single(&zero_traj, 8, 10).unwrap();
        let zrep = validate(&zlib).unwrap();
        assert_eq!(zrep.xi_rank, 0);
        assert_eq!(zrep.smallest_kept_singular_value, 0.0);
    }

    #[test]
    fn persistence_round_trip_bit_exact() {
        let traj = demo_trajectory(60, 9);
        let lib = build_single(&traj, 4, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path(), Some(9)).unwrap();
        let loaded = load_library(dir.path()).unwrap();
        assert_eq!(loaded.t_ini, 4);
        assert_eq!(loaded.source, LibrarySource::Single);
        // Text-level round trip: saving the loaded library reproduces the
        // same bytes for every block file.
        let dir2 = tempfile::tempdir().unwrap();
        save_library(&loaded, dir2.path(), Some(9)).unwrap();
        for f in ["phi.csv", "up.csv", "yp.csv", "uf.csv", "yf.csv"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "file {f}");
        }
        // Values survive exactly.
        assert_abs_diff_eq!(loaded.yf, lib.yf, epsilon = 0.0);
    }

    #[test]
    fn empty_phi_round_trip() {
        let model = default_stable_plant();
        let ctrl = StabilizingController::white_noise(&model, Matrix::identity(1, 1)).unwrap();
        let mut rng = RngStream::new(5, 0);
        let traj = simulate_closed_loop(
            &model,
            &ctrl,
            &NoiseModel::gaussian(),
            &InitialState::Zero,
            30,
            &mut rng,
        )
        .unwrap();
        let lib = build_single(&traj, 3, 3).unwrap();
        assert_eq!(lib.n_ctrl(), 0);
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path(), None).unwrap();
        let loaded = load_library(dir.path()).unwrap();
        assert_eq!(loaded.phi.shape(), (0, lib.n_cols()));
    }
}
