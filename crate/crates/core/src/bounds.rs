//! Second moment of test-vs-train counterfactual differences and the
//! test-risk bound built on it.
//!
//! `M = Σ_e P(e)·E_u[(x_{e+} − x_{e+→e})(x_{e+} − x_{e+→e})ᵀ]`. For a
//! trained θ with projection `P`:
//!
//! ```text
//! log loss:      E_test[ℓ] ≤ E_train[ℓ]   + ‖θ‖·‖P·Q_I·Λ_I^{1/2}‖
//! squared error: E_test[ℓ] ≤ 2·E_train[ℓ] + 2‖θ‖²·‖P·Q_I·Λ_I^{1/2}‖²
//! ```
//!
//! `‖P·Q_I·Λ^{1/2}‖` equals `‖Q̃⊥ᵀ·Q_I·Λ^{1/2}‖` because `P = Q̃⊥Q̃⊥ᵀ`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactuals::CfPairSet;
use crate::error::{NcmError, Result};
use crate::linalg::{numerical_rank, spectral_norm, svd_sorted, sym_eigen_sorted};
use crate::linmodels::{mean_std, LinearModel, LossKind};
use crate::rng::{gaussian_rows, stream};
use crate::scm::{Dataset, LabelKind, LatentScm};
use crate::subspace::{subspace_distance, wedin_check, SubspaceEstimate, WedinDiagnostics};

/// Eigenvalues below this fraction of `λ_1` count as zero.
pub const RANK_TOL: f64 = 1e-6;

const MC_BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct SecondMoment {
    pub matrix: DMatrix<f64>,
    /// Nonincreasing, clipped at 0.
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    /// 0 for the closed form.
    pub mc_samples: usize,
    pub workers: usize,
    /// `|I|` used for Term II.
    pub intervention_count: usize,
    /// `|I|` came from the numerical rank rather than the SCM.
    pub count_estimated: bool,
}

impl SecondMoment {
    fn from_matrix(matrix: DMatrix<f64>, mc_samples: usize, workers: usize, intervention_count: usize) -> SecondMoment {
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let (mut eigvals, eigvecs) = sym_eigen_sorted(&sym);
        eigvals.apply(|v| *v = v.max(0.0));
        SecondMoment {
            matrix: sym,
            eigvals,
            eigvecs,
            mc_samples,
            workers,
            intervention_count,
            count_estimated: false,
        }
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.eigvals.get(i).copied().unwrap_or(0.0)
    }

    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.eigvals, RANK_TOL)
    }

    /// Same matrix with `|I|` replaced by its numerical rank.
    pub fn with_estimated_count(mut self) -> SecondMoment {
        self.intervention_count = self.numerical_rank();
        self.count_estimated = true;
        self
    }

    /// Leading `s` eigenvectors.
    pub fn leading(&self, s: usize) -> DMatrix<f64> {
        self.eigvecs.columns(0, s).into_owned()
    }
}

/// Monte-Carlo estimate on one worker.
pub fn second_moment(scm: &LatentScm, test_domain: &str, mc_samples: usize, seed: u64) -> Result<SecondMoment> {
    second_moment_parallel(scm, test_domain, mc_samples, seed, 1)
}

/// Monte-Carlo estimate split over `workers` independent sub-streams,
/// reduced in worker order. Reproducible for a fixed `(seed, workers)`.
pub fn second_moment_parallel(
    scm: &LatentScm,
    test_domain: &str,
    mc_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<SecondMoment> {
    scm.domain(test_domain)?;
    if mc_samples == 0 || workers == 0 {
        return Err(NcmError::invalid("mc_samples and workers must be positive"));
    }
    let d = scm.dim_obs;
    let chunks: Vec<(usize, usize)> = (0..workers)
        .map(|w| (w, mc_samples / workers + usize::from(w < mc_samples % workers)))
        .collect();
    let partials = chunks
        .par_iter()
        .map(|&(w, count)| moment_chunk(scm, test_domain, count, seed, w as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut total = DMatrix::zeros(d, d);
    for p in partials {
        total += p;
    }
    total /= mc_samples as f64;
    Ok(SecondMoment::from_matrix(total, mc_samples, workers, scm.num_spurious))
}

fn moment_chunk(scm: &LatentScm, test_domain: &str, count: usize, seed: u64, worker: u64) -> Result<DMatrix<f64>> {
    let d = scm.dim_obs;
    let mut acc = DMatrix::zeros(d, d);
    let mut rng = stream(seed, "moment/exo", worker);
    let mut left = count;
    while left > 0 {
        let b = left.min(MC_BLOCK);
        left -= b;
        let exo = gaussian_rows(&mut rng, b, scm.dim_latent);
        let (x_test, _) = scm.materialize(&exo, test_domain)?;
        for spec in scm.train_domains() {
            let (x_e, _) = scm.materialize(&exo, &spec.domain_id)?;
            let diff = &x_test - x_e;
            acc.gemm_tr(spec.domain_weight, &diff, &diff, 1.0);
        }
    }
    Ok(acc)
}

/// Exact `M` for this SCM class:
/// `Σ_e P(e)·G_s[(c₊−c_e)²·E[y²]·11ᵀ + (σ₊−σ_e)²·I]G_sᵀ`.
pub fn second_moment_closed_form(scm: &LatentScm, test_domain: &str) -> Result<SecondMoment> {
    let test = scm.domain(test_domain)?;
    let k = scm.num_spurious;
    let ey2 = match scm.options.label_kind {
        LabelKind::Sign => 1.0,
        LabelKind::Linear => scm.label_weights.norm_squared(),
    };
    let mut inner = DMatrix::zeros(k, k);
    for e in scm.train_domains() {
        let dc = test.spurious_mean_coupling - e.spurious_mean_coupling;
        let ds = test.spurious_scale - e.spurious_scale;
        inner.add_scalar_mut(e.domain_weight * dc * dc * ey2);
        for i in 0..k {
            inner[(i, i)] += e.domain_weight * ds * ds;
        }
    }
    let g = scm.spurious_block();
    Ok(SecondMoment::from_matrix(&g * inner * g.transpose(), 0, 0, scm.num_spurious))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentAgreement {
    pub mc_samples: usize,
    /// `3/√mc`.
    pub tolerance: f64,
    pub trace_rel_err: f64,
    pub frobenius_rel_err: f64,
    /// Distance between the leading `|I|`-dimensional eigenspaces.
    pub subspace_dist: f64,
    pub ok: bool,
}

/// Compares a Monte-Carlo estimate against the closed form: trace and
/// Frobenius norm within `3/√mc` relative, leading eigenspaces within 1e−6.
pub fn compare_moments(mc: &SecondMoment, closed: &SecondMoment) -> Result<MomentAgreement> {
    if mc.matrix.shape() != closed.matrix.shape() || mc.mc_samples == 0 {
        return Err(NcmError::invalid("compare_moments needs a Monte-Carlo and a closed-form moment of equal size"));
    }
    let tolerance = 3.0 / (mc.mc_samples as f64).sqrt();
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { (a - b).abs() / b.abs() };
    let trace_rel_err = rel(mc.matrix.trace(), closed.matrix.trace());
    let frobenius_rel_err = rel(mc.matrix.norm(), closed.matrix.norm());
    let s = closed.intervention_count.min(closed.numerical_rank());
    let subspace_dist = subspace_distance(&mc.leading(s), &closed.leading(s))?;
    Ok(MomentAgreement {
        mc_samples: mc.mc_samples,
        tolerance,
        trace_rel_err,
        frobenius_rel_err,
        subspace_dist,
        ok: trace_rel_err <= tolerance && frobenius_rel_err <= tolerance && subspace_dist <= 1e-6,
    })
}

/// `‖P·Q_I·Λ_I^{1/2}‖`.
pub fn misalignment(estimate: &SubspaceEstimate, sm: &SecondMoment) -> Result<f64> {
    let d = sm.matrix.nrows();
    if estimate.dim() != d {
        return Err(NcmError::invalid("estimate and second moment differ in dimension"));
    }
    let count = sm.intervention_count;
    if count > sm.numerical_rank() {
        return Err(NcmError::invalid(format!(
            "|I|={count} exceeds the numerical rank {} of the second moment",
            sm.numerical_rank()
        )));
    }
    let mut weighted = sm.leading(count);
    for j in 0..count {
        weighted.column_mut(j).scale_mut(sm.eigvals[j].sqrt());
    }
    Ok(spectral_norm(&(&estimate.projection * weighted)))
}

fn term_from_norm(theta_norm: f64, norm: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::LogLoss => theta_norm * norm,
        LossKind::SquaredError => 2.0 * theta_norm * theta_norm * norm * norm,
    }
}

fn check_constraint(theta: &DVector<f64>, estimate: &SubspaceEstimate) -> f64 {
    if estimate.r == 0 {
        return 0.0;
    }
    let v = estimate.basis.tr_mul(theta).amax();
    if v > 1e-6 {
        log::warn!("θ is not orthogonal to the removed subspace: max |θᵀq| = {v:e}");
    }
    v
}

/// Term II: `‖θ‖·‖P·Q_I·Λ^{1/2}‖` (log loss) or `2‖θ‖²·‖P·Q_I·Λ^{1/2}‖²`
/// (squared error).
pub fn term2(theta: &DVector<f64>, estimate: &SubspaceEstimate, sm: &SecondMoment, kind: LossKind) -> Result<f64> {
    if theta.len() != estimate.dim() {
        return Err(NcmError::invalid("θ and estimate differ in dimension"));
    }
    check_constraint(theta, estimate);
    Ok(term_from_norm(theta.norm(), misalignment(estimate, sm)?, kind))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundHolds {
    pub theorem: bool,
    pub eq3: bool,
    pub wedin: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub loss_kind: LossKind,
    pub r: usize,
    /// `min(r, |I|)`.
    pub s: usize,
    pub intervention_count: usize,
    pub count_estimated: bool,
    /// Mean loss on the in-domain evaluation set.
    pub term1: f64,
    pub term2: f64,
    /// Mean loss on the test domain.
    pub lhs: f64,
    pub rhs: f64,
    pub eq3_rhs: f64,
    pub wedin_rhs: Option<f64>,
    pub wedin: Option<WedinDiagnostics>,
    pub se_lhs: f64,
    pub se_term1: f64,
    /// `2·(se_lhs + se_term1)`.
    pub slack: f64,
    pub theta_norm: f64,
    pub constraint_violation: f64,
    pub subspace_dist: f64,
    pub lambda_1: f64,
    pub lambda_s_next: f64,
    pub eigvals: Vec<f64>,
    pub mc_samples: usize,
    pub workers: usize,
    pub holds: BoundHolds,
}

/// Evaluates Term I/II, the Eq. 3 relaxation and, when a clean and a noisy
/// pair set are both given, the Wedin-level bound.
///
/// `train` is the in-domain evaluation set for Term I. Drawing it with the
/// same seed as `test` couples the two row by row, which keeps the slack
/// from being dominated by sampling noise.
pub fn verify_bound(
    model: &LinearModel,
    estimate: &SubspaceEstimate,
    sm: &SecondMoment,
    train: &Dataset,
    test: &Dataset,
    clean_pairs: Option<&CfPairSet>,
    noisy_pairs: Option<&CfPairSet>,
) -> Result<BoundReport> {
    let d = model.dim();
    if estimate.dim() != d || sm.matrix.nrows() != d || train.dim() != d || test.dim() != d {
        return Err(NcmError::invalid("model, estimate, moment and data disagree in dimension"));
    }
    let kind = model.loss_kind;
    let (term1, sd1) = mean_std(model.row_losses(train)?.as_slice());
    let (lhs, sd_lhs) = mean_std(model.row_losses(test)?.as_slice());
    let se_term1 = sd1 / (train.len() as f64).sqrt();
    let se_lhs = sd_lhs / (test.len() as f64).sqrt();
    let slack = 2.0 * (se_lhs + se_term1);

    let theta_norm = model.weights.norm();
    let constraint_violation = check_constraint(&model.weights, estimate);
    let norm = misalignment(estimate, sm)?;
    let t2 = term_from_norm(theta_norm, norm, kind);
    let t1_weight = match kind {
        LossKind::LogLoss => 1.0,
        LossKind::SquaredError => 2.0,
    };
    let rhs = t1_weight * term1 + t2;

    let count = sm.intervention_count;
    let s = estimate.r.min(count);
    let q_s = sm.leading(s);
    let subspace_dist = subspace_distance(&estimate.basis.columns(0, s).into_owned(), &q_s)?;
    let lambda_1 = sm.lambda(0);
    let lambda_s_next = sm.lambda(s);
    let eq3_norm = (lambda_1 * subspace_dist * subspace_dist + lambda_s_next).sqrt();
    let eq3_rhs = t1_weight * term1 + term_from_norm(theta_norm, eq3_norm, kind);

    let mut wedin = None;
    let mut wedin_rhs = None;
    if let (Some(clean), Some(noisy), true) = (clean_pairs, noisy_pairs, s > 0) {
        let w = wedin_check(&clean.delta, &noisy.delta, s)?;
        // The lemma bounds the distance to the clean pairs' span; it transfers
        // to M's eigenspace only when those spans coincide.
        let (u_clean, _) = svd_sorted(&clean.delta);
        let aligned = subspace_distance(&u_clean.columns(0, s).into_owned(), &q_s)? <= 1e-6;
        if w.condition && aligned {
            let wedin_norm = lambda_1.sqrt() * w.bound + lambda_s_next.sqrt();
            wedin_rhs = Some(t1_weight * term1 + term_from_norm(theta_norm, wedin_norm, kind));
        }
        wedin = Some(w);
    }

    Ok(BoundReport {
        loss_kind: kind,
        r: estimate.r,
        s,
        intervention_count: count,
        count_estimated: sm.count_estimated,
        term1,
        term2: t2,
        lhs,
        rhs,
        eq3_rhs,
        wedin_rhs,
        wedin,
        se_lhs,
        se_term1,
        slack,
        theta_norm,
        constraint_violation,
        subspace_dist,
        lambda_1,
        lambda_s_next,
        eigvals: sm.eigvals.iter().copied().collect(),
        mc_samples: sm.mc_samples,
        workers: sm.workers,
        holds: BoundHolds {
            theorem: lhs <= rhs + slack,
            eq3: lhs <= eq3_rhs + slack,
            wedin: wedin_rhs.map(|w| lhs <= w + slack),
        },
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into())
}

fn verdict(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "ok",
        Some(false) => "FAIL",
        None => "-",
    }
}

/// Fixed-width verdict table, one line per report.
pub fn verdict_table(reports: &[BoundReport]) -> String {
    let mut out = format!(
        "{:<4} {:<13} {:>4} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>9} {:>5} {:>5} {:>5}\n",
        "#", "loss", "r", "lhs", "term1", "term2", "rhs", "eq3_rhs", "wedin_rhs", "slack", "thm", "eq3", "wedin"
    );
    for (i, b) in reports.iter().enumerate() {
        out.push_str(&format!(
            "{:<4} {:<13} {:>4} {:>11.5} {:>11.5} {:>11.5} {:>11.5} {:>11.5} {:>11} {:>9.5} {:>5} {:>5} {:>5}\n",
            i,
            b.loss_kind.as_str(),
            b.r,
            b.lhs,
            b.term1,
            b.term2,
            b.rhs,
            b.eq3_rhs,
            cell(b.wedin_rhs),
            b.slack,
            verdict(Some(b.holds.theorem)),
            verdict(Some(b.holds.eq3)),
            verdict(b.holds.wedin),
        ));
    }
    out
}
