//! Replays one benchmark trial with per-step diagnostics.

use cgm_core::cgm::fit;
use cgm_core::control::*;
use cgm_core::kalman::KfState;
use cgm_core::library::build_single;
use cgm_core::lti::*;
use cgm_core::numerics::{Matrix, RngStream, Vector};
use cgm_core::qp::{solve_with, QpSettings, QpStatus};

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
    let c = Matrix::from_row_slice(1, 4, &[3.6, -2.4, 1.8, 1.2]);
    let plant = StateSpaceModel::new(a, b, c, Matrix::identity(4,4)*0.01, Matrix::identity(1,1)*0.04).unwrap();
    let exc = StabilizingController::white_noise(&plant, Matrix::identity(1,1)).unwrap();
    let noise = NoiseModel::gaussian();

    // Same derivation as the campaign: seed 42, ids [3, 0, 25].
    let mut rng = RngStream::derived(42, &[3, 0, 25]);
    let traj = simulate_closed_loop(&plant, &exc, &noise, &InitialState::Zero, 1017, &mut rng).unwrap();
    let lib = build_single(&traj, 8, 10).unwrap();
    let pred = fit(&lib).unwrap();
    let obj = ControlObjective::benchmark(1);
    let factors = NoiseFactors::new(&plant, None, &noise).unwrap();

    let mut x = Vector::zeros(4);
    let mut us: Vec<Vector> = vec![];
    let mut ys: Vec<Vector> = vec![];
    let settings = QpSettings::default();
    let mut warm: Option<cgm_core::qp::QpSolution> = None;
    for t in 0..80 {
        let y = &plant.c * &x + factors.measurement(&mut rng);
        let u = if t < 8 {
            Vector::zeros(1)
        } else {
            let mut u_ini = Vector::zeros(8);
            let mut y_ini = Vector::zeros(8);
            for s in 0..8 {
                u_ini[s] = us[t - 8 + s][0];
                y_ini[s] = ys[t - 8 + s][0];
            }
            let prob = build_sspc_gen(&pred, &u_ini, &y_ini, &obj, 50, true, &mut rng).unwrap();
            let warm_ref = warm.as_ref().map(|w: &cgm_core::qp::QpSolution| (&w.x, &w.y));
            let sol = solve_with(&prob, &settings, warm_ref).unwrap();
            if sol.status != QpStatus::Optimal || t >= 8 {
                println!("t={t} status={:?} iters={} rp={:.1e} rd={:.1e} u0={:+.3} y={:+.3} |x|={:.2}",
                    sol.status, sol.iterations, sol.primal_residual, sol.dual_residual,
                    sol.x[0], y[0], x.norm());
            }
            let u0 = sol.x.rows(0, 1).into_owned();
            warm = Some(sol);
            u0
        };
        ys.push(y.clone());
        us.push(u.clone());
        x = &plant.a * &x + &plant.b * &u + factors.process(&mut rng);
        if x.norm() > 1e6 { println!("diverged at {t}"); break; }
    }
    let _ = KfState::zero_mean(Matrix::zeros(4,4));
}
