//! Trajectory persistence for the `simulate` subcommand: a manifest plus one
//! time-major decimal-text matrix per signal.

use std::path::Path;

use cgm_core::library::{load_matrix_csv, save_matrix_csv};
use cgm_core::lti::Trajectory;
use cgm_core::numerics::{Matrix, RNG_ALGORITHM};
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    schema: String,
    length: usize,
    m: usize,
    p: usize,
    n_ctrl: usize,
    n: usize,
    seed: u64,
    rng_algorithm: String,
    version: String,
}

const SCHEMA: &str = "trajectory/v1";

fn rows_from(vectors: &[cgm_core::numerics::Vector]) -> Matrix {
    let rows = vectors.len();
    let cols = vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut out = Matrix::zeros(rows, cols);
    for (i, v) in vectors.iter().enumerate() {
        for j in 0..cols {
            out[(i, j)] = v[j];
        }
    }
    out
}

fn vectors_from(m: &Matrix) -> Vec<cgm_core::numerics::Vector> {
    (0..m.nrows())
        .map(|i| m.row(i).transpose().into_owned())
        .collect()
}

pub fn save_trajectory(traj: &Trajectory, dir: &Path, seed: u64) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(|e| BenchError::Runtime(e.to_string()))?;
    let manifest = TrajectoryManifest {
        schema: SCHEMA.into(),
        length: traj.len(),
        m: traj.u.first().map(|v| v.len()).unwrap_or(0),
        p: traj.y.first().map(|v| v.len()).unwrap_or(0),
        n_ctrl: traj.phi.first().map(|v| v.len()).unwrap_or(0),
        n: traj.x.first().map(|v| v.len()).unwrap_or(0),
        seed,
        rng_algorithm: RNG_ALGORITHM.into(),
        version: crate::results::CODE_VERSION.into(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| BenchError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)
        .map_err(|e| BenchError::Runtime(e.to_string()))?;
    for (name, signal) in [
        ("u", &traj.u),
        ("y", &traj.y),
        ("phi", &traj.phi),
        ("x", &traj.x),
    ] {
        save_matrix_csv(&dir.join(format!("{name}.csv")), &rows_from(signal))
            .map_err(|e| BenchError::Runtime(e.to_string()))?;
    }
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory, BenchError> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| BenchError::Runtime(format!("cannot read manifest in {dir:?}: {e}")))?;
    let man: TrajectoryManifest =
        serde_json::from_str(&raw).map_err(|e| BenchError::Runtime(e.to_string()))?;
    if man.schema != SCHEMA {
        return Err(BenchError::Runtime(format!("unknown schema {:?}", man.schema)));
    }
    let load = |name: &str, dim: usize| -> Result<Vec<cgm_core::numerics::Vector>, BenchError> {
        let m = load_matrix_csv(&dir.join(format!("{name}.csv")), (man.length, dim))
            .map_err(|e| BenchError::Runtime(e.to_string()))?;
        Ok(vectors_from(&m))
    };
    Ok(Trajectory {
        u: load("u", man.m)?,
        y: load("y", man.p)?,
        phi: load("phi", man.n_ctrl)?,
        x: load("x", man.n)?,
    })
}
