use nalgebra::{DMatrix, DVector};

/// Orthonormal basis of the column space of a full-column-rank matrix,
/// via thin QR with the signs of R's diagonal moved into Q.
pub fn orthonormal_columns(a: DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD with singular values in nonincreasing order. Returns `(U, s)`
/// where `U` has `min(rows, cols)` columns.
pub fn svd_sorted(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = a.nrows().min(a.ncols());
    if p == 0 {
        return (DMatrix::zeros(a.nrows(), 0), DVector::zeros(0));
    }
    let svd = to_faer(a).thin_svd().expect("svd converges");
    let s = svd.S().column_vector();
    (from_faer(svd.U()), DVector::from_fn(p, |i, _| s[i]))
}

pub fn singular_values_sorted(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows().min(a.ncols()) == 0 {
        return DVector::zeros(0);
    }
    DVector::from_vec(to_faer(a).singular_values().expect("svd converges"))
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    singular_values_sorted(a).iter().copied().next().unwrap_or(0.0)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues nonincreasing.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = to_faer(m).self_adjoint_eigen(faer::Side::Lower).expect("eigendecomposition converges");
    let vals = eig.S().column_vector();
    let vecs = eig.U();
    let mut out_vals = DVector::zeros(n);
    let mut out_vecs = DMatrix::zeros(n, n);
    for dst in 0..n {
        let src = n - 1 - dst;
        out_vals[dst] = vals[src];
        for i in 0..n {
            out_vecs[(i, dst)] = vecs[(i, src)];
        }
    }
    (out_vals, out_vecs)
}

/// Count of values at or above `rel_tol * values[0]` (values sorted, nonincreasing).
pub fn numerical_rank(values: &DVector<f64>, rel_tol: f64) -> usize {
    match values.iter().next() {
        None => 0,
        Some(&top) if top <= 0.0 => 0,
        Some(&top) => values.iter().take_while(|&&v| v >= rel_tol * top).count(),
    }
}

/// `I - Q Qᵀ`.
pub fn complement_projector(q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = -(q * q.transpose());
    for i in 0..p.nrows() {
        p[(i, i)] += 1.0;
    }
    p
}

/// `‖QᵀQ − I‖` in the max-entry sense.
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
