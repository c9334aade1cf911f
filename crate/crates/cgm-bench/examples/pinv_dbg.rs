fn main() {
    use cgm_core::numerics::*;
    let g = Matrix::from_column_slice(2, 1, &[-19.66174583933172, 49.61705251271334]);
    let h = Matrix::from_row_slice(1, 3, &[-45.626649337309175, -48.69191280342668, -34.132168790033234]);
    let m = &g * &h;
    let svd = m.clone().try_svd_unordered(true, true, f64::EPSILON, 0).unwrap();
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let k = svd.singular_values.len();
    let mut sig = Matrix::zeros(k, k);
    for i in 0..k { sig[(i,i)] = svd.singular_values[i]; }
    let rec = u * &sig * vt;
    println!("unordered: sv={:?}", svd.singular_values.as_slice());
    println!("  reconstruction err = {:.3e}", op_norm(&(&rec - &m)));
}
