//! Compares the default-accuracy ADMM solution against a high-accuracy one
//! on the divergence-onset scenario QP, plus the SPC solution at that state.

use cgm_core::cgm::fit;
use cgm_core::control::*;
use cgm_core::library::build_single;
use cgm_core::lti::*;
use cgm_core::numerics::{Matrix, RngStream, Vector};
use cgm_core::qp::{solve_with, QpSettings, QpSolution};

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
    let plant = StateSpaceModel::new(a.clone(), b.clone(), c.clone(), Matrix::identity(4,4)*0.01, Matrix::identity(1,1)*0.04).unwrap();
    let exc = StabilizingController::white_noise(&plant, Matrix::identity(1,1)).unwrap();
    let noise = NoiseModel::gaussian();
    let mut rng = RngStream::derived(42, &[3, 0, 25]);
    let traj = simulate_closed_loop(&plant, &exc, &noise, &InitialState::Zero, 1017, &mut rng).unwrap();
    let lib = build_single(&traj, 8, 10).unwrap();
    let pred = fit(&lib).unwrap();
    let obj = ControlObjective::benchmark(1);
    let factors = NoiseFactors::new(&plant, None, &noise).unwrap();

    let mut x = Vector::zeros(4);
    let mut us: Vec<Vector> = vec![]; let mut ys: Vec<Vector> = vec![];
    let settings = QpSettings::default();
    let mut warm: Option<QpSolution> = None;
    for t in 0..23 {
        let y = &plant.c * &x + factors.measurement(&mut rng);
        let u = if t < 8 { Vector::zeros(1) } else {
            let mut u_ini = Vector::zeros(8); let mut y_ini = Vector::zeros(8);
            for s in 0..8 { u_ini[s] = us[t-8+s][0]; y_ini[s] = ys[t-8+s][0]; }
            let prob = build_sspc_gen(&pred, &u_ini, &y_ini, &obj, 50, true, &mut rng).unwrap();
            if t == 22 {
                let sol_fast = solve_with(&prob, &settings, warm.as_ref().map(|w: &QpSolution| (&w.x, &w.y))).unwrap();
                let hi = QpSettings { tol_abs: 1e-10, tol_rel: 1e-10, max_iter: 2_000_000, ..QpSettings::default() };
                let sol_hi = solve_with(&prob, &hi, None).unwrap();
                println!("t=22 fast: status={:?} u0={:+.4} iters={}", sol_fast.status, sol_fast.x[0], sol_fast.iterations);
                println!("t=22 hi  : status={:?} u0={:+.4} iters={} rp={:.1e} rd={:.1e}",
                         sol_hi.status, sol_hi.x[0], sol_hi.iterations, sol_hi.primal_residual, sol_hi.dual_residual);
                println!("fast u_f: {:?}", sol_fast.x.rows(0,10).iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                println!("hi   u_f: {:?}", sol_hi.x.rows(0,10).iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                println!("hi   s  : {:?}", sol_hi.x.rows(10,10).iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                // SPC at the same state
                let spc = build_dmpc(NominalSource::Predictor{pred:&pred,u_ini:&u_ini,y_ini:&y_ini}, &obj).unwrap();
                let sol_spc = solve_with(&spc, &hi, None).unwrap();
                println!("spc  u_f: {:?}", sol_spc.x.rows(0,10).iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
                // Nominal free response per the fitted model
                let past = 8 * 2;
                let theta_p = pred.theta_f.columns(0, past).into_owned();
                let mut zp = Vector::zeros(16);
                zp.rows_mut(0,8).copy_from(&u_ini); zp.rows_mut(8,8).copy_from(&y_ini);
                let base = &theta_p * zp;
                println!("free response (fit): {:?}", base.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
                println!("y recent: {:?}", (14..22).map(|s| (ys[s][0]*10.0).round()/10.0).collect::<Vec<_>>());
                return;
            }
            let sol = solve_with(&prob, &settings, warm.as_ref().map(|w: &QpSolution| (&w.x, &w.y))).unwrap();
            let u0 = sol.x.rows(0,1).into_owned();
            warm = Some(sol);
            u0
        };
        ys.push(y.clone()); us.push(u.clone());
        x = &plant.a * &x + &plant.b * &u + factors.process(&mut rng);
    }
}
