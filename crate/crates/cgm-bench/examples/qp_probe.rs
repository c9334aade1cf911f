//! Ad-hoc probe: inspect ADMM behavior on a scenario-controller QP.

use cgm_core::cgm::fit;
use cgm_core::control::*;
use cgm_core::library::build_single;
use cgm_core::lti::*;
use cgm_core::numerics::{Matrix, RngStream, Vector};
use cgm_core::qp::{solve_with, QpSettings};

fn main() {
    let mut a = Matrix::zeros(4, 4);
    let (r1, th1) = (0.95f64, 0.40f64);
    let (r2, th2) = (0.55f64, 1.30f64);
    a[(0, 0)] = r1 * th1.cos(); a[(0, 1)] = r1 * th1.sin();
    a[(1, 0)] = -r1 * th1.sin(); a[(1, 1)] = r1 * th1.cos();
    a[(2, 2)] = r2 * th2.cos(); a[(2, 3)] = r2 * th2.sin();
    a[(3, 2)] = -r2 * th2.sin(); a[(3, 3)] = r2 * th2.cos();
    a[(0, 2)] = 0.10; a[(1, 3)] = -0.05;
    let b = Matrix::from_column_slice(4, 1, &[1.0, 0.5, 1.0, -0.4]);
    let c = Matrix::from_row_slice(1, 4, &[3.6, -2.4, 1.8, 1.2]); // c0=3
    let plant = StateSpaceModel::new(a, b, c, Matrix::identity(4,4)*0.01, Matrix::identity(1,1)*0.04).unwrap();
    let exc = StabilizingController::white_noise(&plant, Matrix::identity(1,1)).unwrap();
    let mut rng = RngStream::new(1234, 0);
    let noise = NoiseModel::gaussian();
    let traj = simulate_closed_loop(&plant, &exc, &noise, &InitialState::Zero, 1017, &mut rng).unwrap();
    let lib = build_single(&traj, 8, 10).unwrap();
    let pred = fit(&lib).unwrap();
    let obj = ControlObjective::benchmark(1);
    // mid-run-ish history
    let u_ini = rng.standard_normal_vector(8) * 0.3;
    let y_ini = Vector::from_element(8, 9.5) + rng.standard_normal_vector(8) * 0.5;
    let t0 = std::time::Instant::now();
    let prob = build_sspc_gen(&pred, &u_ini, &y_ini, &obj, 50, true, &mut rng).unwrap();
    println!("build: {:?} d={} eq={} in={}", t0.elapsed(), prob.dim(), prob.a_eq.nrows(), prob.a_in.nrows());
    let t1 = std::time::Instant::now();
    let sol = solve_with(&prob, &QpSettings::default(), None).unwrap();
    println!("solve: {:?} status={:?} iters={} rp={:.2e} rd={:.2e}", t1.elapsed(), sol.status, sol.iterations, sol.primal_residual, sol.dual_residual);
    println!("u_f = {:?}", sol.x.rows(0, 10).as_slice());
    println!("slack max = {:.3e}", sol.x.rows(10, 10).amax());
    // Hessian conditioning
    println!("H diag range: min {:.3e} max {:.3e}", prob.hessian.diagonal().min(), prob.hessian.diagonal().max());
}
