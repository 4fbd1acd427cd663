//! Spurious-subspace estimation from the pair-difference matrix.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NcmError, Result};
use crate::linalg::{complement_projector, orthonormality_error, singular_values_sorted, spectral_norm, svd_sorted};

/// Relative gap below which two singular values count as tied.
const TIE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceEstimate {
    /// d × r, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Full spectrum of the pair-difference matrix, nonincreasing.
    pub singular_values: DVector<f64>,
    pub r: usize,
    /// `I − basis·basisᵀ`.
    pub projection: DMatrix<f64>,
    /// `σ_r == σ_{r+1}` within tolerance: the truncated subspace is not unique.
    pub boundary_tie: bool,
}

pub fn estimate_subspace(delta: &DMatrix<f64>, r: usize) -> Result<SubspaceEstimate> {
    let (d, k) = delta.shape();
    if r > d.min(k) {
        return Err(NcmError::invalid(format!("r={r} exceeds min(d, k)={}", d.min(k))));
    }
    let (u, s) = svd_sorted(delta);
    let basis = u.columns(0, r).into_owned();
    let projection = if r == 0 { DMatrix::identity(d, d) } else { complement_projector(&basis) };
    let boundary_tie = r > 0 && r < s.len() && (s[r - 1] - s[r]) <= TIE_TOL * s[0].max(f64::MIN_POSITIVE);
    Ok(SubspaceEstimate {
        basis,
        singular_values: s,
        r,
        projection,
        boundary_tie,
    })
}

impl SubspaceEstimate {
    /// No removal: `r = 0`, `P = I`.
    pub fn identity(d: usize) -> SubspaceEstimate {
        SubspaceEstimate {
            basis: DMatrix::zeros(d, 0),
            singular_values: DVector::zeros(0),
            r: 0,
            projection: DMatrix::identity(d, d),
            boundary_tie: false,
        }
    }

    /// Projection onto the orthocomplement of a given orthonormal basis.
    pub fn from_basis(basis: DMatrix<f64>) -> Result<SubspaceEstimate> {
        if orthonormality_error(&basis) > 1e-8 {
            return Err(NcmError::invalid("basis is not orthonormal"));
        }
        let d = basis.nrows();
        let r = basis.ncols();
        let projection = if r == 0 { DMatrix::identity(d, d) } else { complement_projector(&basis) };
        Ok(SubspaceEstimate {
            basis,
            singular_values: DVector::zeros(0),
            r,
            projection,
            boundary_tie: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Pair span fully removed (`r` reached the numerical rank of the pairs).
    pub fn annihilates_pairs(&self) -> bool {
        self.r > 0 && self.r >= crate::linalg::numerical_rank(&self.singular_values, 1e-8)
    }

    pub fn projected_energy(&self, delta: &DMatrix<f64>) -> f64 {
        (&self.projection * delta).norm()
    }

    /// Rows `i = 0..max(d, len(σ))` with columns `row,singular_value,q_0..q_{r-1}`;
    /// cells past the end of a column are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string(), "singular_value".to_string()];
        header.extend((0..self.r).map(|j| format!("q_{j}")));
        out.write_record(&header)?;
        let rows = self.dim().max(self.singular_values.len());
        for i in 0..rows {
            let mut rec = vec![i.to_string()];
            rec.push(self.singular_values.get(i).map(|v| v.to_string()).unwrap_or_default());
            for j in 0..self.r {
                rec.push(if i < self.dim() { self.basis[(i, j)].to_string() } else { String::new() });
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Spectral distance `‖A Aᵀ − B Bᵀ‖` between the spans of two orthonormal bases.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(NcmError::invalid(format!("bases have shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if orthonormality_error(a) > 1e-8 || orthonormality_error(b) > 1e-8 {
        return Err(NcmError::invalid("subspace_distance expects orthonormal columns"));
    }
    if a.ncols() == 0 {
        return Ok(0.0);
    }
    let diff = a * a.transpose() - b * b.transpose();
    Ok(spectral_norm(&diff).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedinDiagnostics {
    pub s: usize,
    /// `‖noisy − clean‖`.
    pub noise_norm: f64,
    pub sigma_s: f64,
    pub sigma_s_next: f64,
    pub gap: f64,
    /// `‖ε‖ < (1 − 1/√2)·gap`.
    pub condition: bool,
    pub measured_dist: f64,
    /// `2‖ε‖ / gap`.
    pub bound: f64,
}

impl WedinDiagnostics {
    pub fn holds(&self) -> bool {
        self.measured_dist <= self.bound
    }
}

pub fn wedin_check(clean: &DMatrix<f64>, noisy: &DMatrix<f64>, s: usize) -> Result<WedinDiagnostics> {
    if clean.shape() != noisy.shape() {
        return Err(NcmError::invalid("clean and noisy matrices differ in shape"));
    }
    let p = clean.nrows().min(clean.ncols());
    if s == 0 || s > p {
        return Err(NcmError::invalid(format!("s={s} outside 1..={p}")));
    }
    let noise_norm = spectral_norm(&(noisy - clean));
    let (u_clean, sv) = svd_sorted(clean);
    let sigma_s = sv[s - 1];
    let sigma_s_next = if s < sv.len() { sv[s] } else { 0.0 };
    let gap = sigma_s - sigma_s_next;
    let condition = noise_norm < (1.0 - std::f64::consts::FRAC_1_SQRT_2) * gap;
    let bound = if noise_norm == 0.0 { 0.0 } else if gap > 0.0 { 2.0 * noise_norm / gap } else { f64::INFINITY };
    let (u_noisy, _) = svd_sorted(noisy);
    let measured_dist = subspace_distance(&u_clean.columns(0, s).into_owned(), &u_noisy.columns(0, s).into_owned())?;
    Ok(WedinDiagnostics {
        s,
        noise_norm,
        sigma_s,
        sigma_s_next,
        gap,
        condition,
        measured_dist,
        bound,
    })
}

/// Spectrum only; cheaper than a full estimate when only the scree curve is needed.
pub fn scree(delta: &DMatrix<f64>) -> DVector<f64> {
    singular_values_sorted(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::rng::{gaussian_rows, stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(d, 1);
        v[(i, 0)] = 1.0;
        v
    }

    #[test]
    fn rank_zero_is_identity() {
        let delta = gaussian_rows(&mut stream(1, "t", 0), 6, 3);
        let est = estimate_subspace(&delta, 0).unwrap();
        assert_eq!(est.projection, DMatrix::identity(6, 6));
        assert_eq!(est.basis.ncols(), 0);
        assert_eq!(est.singular_values.len(), 3);
        assert!(estimate_subspace(&delta, 4).is_err());
    }

    #[test]
    fn rank_one_basis_is_normalized_column() {
        let v = DMatrix::from_column_slice(3, 1, &[3.0, 0.0, 4.0]);
        let est = estimate_subspace(&v, 1).unwrap();
        let q = est.basis.column(0);
        let sign = q[0].signum();
        assert_abs_diff_eq!(q[0] * sign, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(q[2] * sign, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn projection_contract() {
        let delta = gaussian_rows(&mut stream(2, "t", 0), 10, 6);
        let est = estimate_subspace(&delta, 4).unwrap();
        let p = &est.projection;
        assert!(max_abs(&(p * p - p)) <= 1e-10);
        assert!(max_abs(&(p - p.transpose())) <= 1e-10);
        assert!(max_abs(&(p * &est.basis)) <= 1e-10);
        assert!(orthonormality_error(&est.basis) <= 1e-10);
        assert!(!est.boundary_tie);
    }

    #[test]
    fn tie_at_boundary_is_flagged() {
        let delta = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(estimate_subspace(&delta, 1).unwrap().boundary_tie);
        assert!(!estimate_subspace(&delta, 2).unwrap().boundary_tie);
    }

    #[test]
    fn distance_examples() {
        let q = e(2, 0);
        assert_eq!(subspace_distance(&q, &q).unwrap(), 0.0);
        assert_abs_diff_eq!(subspace_distance(&e(2, 0), &e(2, 1)).unwrap(), 1.0, epsilon = 1e-12);
        let a = std::f64::consts::FRAC_PI_6;
        let b = DMatrix::from_column_slice(2, 1, &[a.cos(), a.sin()]);
        assert_abs_diff_eq!(subspace_distance(&q, &b).unwrap(), 0.5, epsilon = 1e-12);
        assert!(subspace_distance(&q, &DMatrix::from_column_slice(2, 1, &[2.0, 0.0])).is_err());
        assert!(subspace_distance(&q, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn wedin_identical_inputs() {
        let a = gaussian_rows(&mut stream(4, "t", 0), 5, 3);
        let w = wedin_check(&a, &a, 2).unwrap();
        assert_eq!(w.noise_norm, 0.0);
        assert_eq!(w.bound, 0.0);
        assert!(w.measured_dist <= 1e-12);
    }

    #[test]
    fn wedin_small_example() {
        let clean = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut pert = DMatrix::zeros(4, 2);
        pert[(1, 0)] = std::f64::consts::FRAC_1_SQRT_2;
        pert[(2, 0)] = std::f64::consts::FRAC_1_SQRT_2;
        let noisy = &clean + pert * 0.1;
        let w = wedin_check(&clean, &noisy, 1).unwrap();
        assert_abs_diff_eq!(w.noise_norm, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(w.bound, 0.1, epsilon = 1e-12);
        // Independent dense evaluation of the same 4×2 problem.
        assert_abs_diff_eq!(w.measured_dist, 0.035452666728195, epsilon = 1e-10);
        assert!(w.condition && w.holds());
    }

    #[test]
    fn wedin_zero_gap_is_flagged_not_error() {
        let clean = DMatrix::<f64>::identity(3, 3);
        let noisy = &clean + DMatrix::from_element(3, 3, 0.01);
        let w = wedin_check(&clean, &noisy, 1).unwrap();
        assert!(!w.condition);
        assert!(w.bound.is_infinite());
        assert!(wedin_check(&clean, &noisy, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let delta = gaussian_rows(&mut stream(5, "t", 0), 3, 2);
        let est = estimate_subspace(&delta, 1).unwrap();
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "row,singular_value,q_0");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn energy_nonincreasing_in_r(seed in 0u64..1000, d in 2usize..9, k in 1usize..9) {
            let delta = gaussian_rows(&mut stream(seed, "p", 0), d, k);
            let mut last = f64::INFINITY;
            for r in 0..=d.min(k) {
                let energy = estimate_subspace(&delta, r).unwrap().projected_energy(&delta);
                prop_assert!(energy <= last + 1e-10);
                last = energy;
            }
        }

        #[test]
        fn projected_theta_is_orthogonal(seed in 0u64..1000, r in 0usize..5) {
            let delta = gaussian_rows(&mut stream(seed, "p", 0), 8, 5);
            let est = estimate_subspace(&delta, r).unwrap();
            let theta = gaussian_rows(&mut stream(seed, "theta", 0), 8, 1);
            let proj = &est.projection * theta;
            prop_assert!(max_abs(&(proj.transpose() * &est.basis)) <= 1e-10);
        }

        #[test]
        fn distance_is_symmetric_rotation_invariant(seed in 0u64..1000, j in 1usize..4) {
            let a = crate::linalg::orthonormal_columns(gaussian_rows(&mut stream(seed, "a", 0), 6, j));
            let b = crate::linalg::orthonormal_columns(gaussian_rows(&mut stream(seed, "b", 0), 6, j));
            let rot = crate::linalg::orthonormal_columns(gaussian_rows(&mut stream(seed, "r", 0), j, j));
            let dab = subspace_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&dab));
            prop_assert!((dab - subspace_distance(&b, &a).unwrap()).abs() <= 1e-10);
            prop_assert!((dab - subspace_distance(&(a * rot), &b).unwrap()).abs() <= 1e-8);
        }

        #[test]
        fn wedin_inequality(seed in 0u64..5000, s in 1usize..4, scale in 0.0f64..0.5) {
            let clean = gaussian_rows(&mut stream(seed, "c", 0), 7, 5);
            let noise = gaussian_rows(&mut stream(seed, "n", 0), 7, 5) * scale;
            let w = wedin_check(&clean, &(&clean + noise), s).unwrap();
            if w.condition {
                prop_assert!(w.measured_dist <= w.bound + 1e-12, "{:?}", w);
            }
        }
    }
}
