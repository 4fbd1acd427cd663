use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GridPoint, Pairing};
use crate::bounds::{
    compare_moments, second_moment_closed_form, second_moment_parallel, verify_bound, BoundReport, MomentAgreement,
    SecondMoment,
};
use crate::counterfactuals::{corrupt_pairs, generate_cf_pairs, random_pairing, CfPairSet};
use crate::error::{NcmError, Result};
use crate::jsonl::write_jsonl;
use crate::linmodels::{evaluate, mean_std, train, LinearModel};
use crate::rng::derive_seed;
use crate::scm::{generate_dataset, generate_mixture, Dataset, LatentScm};
use crate::subspace::{estimate_subspace, SubspaceEstimate};

/// One line of the harness CSV. Missing metrics serialize as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub sweep_axis: String,
    pub sweep_value: Option<f64>,
    pub seed: u64,
    pub k: Option<usize>,
    pub r: Option<usize>,
    pub epsilon: Option<f64>,
    pub pairing: Option<String>,
    pub loss_kind: String,
    pub train_loss: Option<f64>,
    pub indomain_test_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub term1: Option<f64>,
    pub term2: Option<f64>,
    pub bound_rhs: Option<f64>,
    pub bound_holds: Option<bool>,
    pub baseline: Option<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Data shared by every grid point of one seed.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed_index: usize,
    pub run_seed: u64,
    pub scm: LatentScm,
    pub train: Dataset,
    /// In-domain held-out mixture, drawn with the same seed as `test`.
    pub indomain: Dataset,
    pub test: Dataset,
    pub test_domain: String,
    pub moment: Option<SecondMoment>,
    pub moment_check: Option<MomentAgreement>,
    oracle_pairs: Option<CfPairSet>,
}

pub struct PointOutcome {
    pub row: HarnessRow,
    pub model: LinearModel,
    pub estimate: SubspaceEstimate,
    pub pairs: CfPairSet,
    pub report: Option<BoundReport>,
}

impl<'a> RunContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, seed_index: usize) -> Result<RunContext<'a>> {
        let run_seed = derive_seed(cfg.seed, "run", seed_index as u64);
        let scm = cfg.build_scm(derive_seed(run_seed, "scm", 0))?;
        let n_mix = cfg.data.n_train * scm.train_domains().count();
        let train = generate_mixture(&scm, n_mix, derive_seed(run_seed, "train", 0))?;
        let eval_seed = derive_seed(run_seed, "eval", 0);
        let indomain = generate_mixture(&scm, cfg.data.n_indomain_test, eval_seed)?;
        let test_domain = cfg.test_domain()?.to_string();
        let test = generate_dataset(&scm, &test_domain, cfg.data.n_test, eval_seed, false)?;

        let oracle_pairs = match cfg.pairs.pairing {
            Pairing::Oracle => {
                let k_max = cfg.grid()?.iter().map(|g| g.k).max().unwrap_or(cfg.pairs.k);
                let (src, dst) = cfg.pair_domains()?;
                Some(generate_cf_pairs(&scm, &src, &dst, k_max, derive_seed(run_seed, "pairs", 0))?)
            }
            Pairing::Random => None,
        };

        let (moment, moment_check) = if cfg.bounds.enabled {
            let moment_seed = derive_seed(run_seed, "moment", 0);
            let closed = second_moment_closed_form(&scm, &test_domain)?;
            if cfg.bounds.mc_samples == 0 {
                (Some(closed), None)
            } else {
                let mc = second_moment_parallel(&scm, &test_domain, cfg.bounds.mc_samples, moment_seed, cfg.bounds.workers)?;
                let check = if cfg.bounds.closed_form_check {
                    let agreement = compare_moments(&mc, &closed)?;
                    if !agreement.ok {
                        return Err(NcmError::Disagreement(format!(
                            "second moment: Monte-Carlo disagrees with closed form ({agreement:?})"
                        )));
                    }
                    Some(agreement)
                } else {
                    None
                };
                (Some(mc), check)
            }
        } else {
            (None, None)
        };

        Ok(RunContext {
            cfg,
            seed_index,
            run_seed,
            scm,
            train,
            indomain,
            test,
            test_domain,
            moment,
            moment_check,
            oracle_pairs,
        })
    }

    pub fn fit_seed(&self) -> u64 {
        derive_seed(self.run_seed, "fit", 0)
    }

    pub fn clean_pairs(&self, k: usize) -> Result<CfPairSet> {
        match &self.oracle_pairs {
            Some(p) => {
                if k > p.k() {
                    return Err(NcmError::invalid(format!("k={k} exceeds the {} pairs drawn", p.k())));
                }
                let idx: Vec<usize> = (0..k).collect();
                CfPairSet::new(p.left.select_rows(&idx), p.right.select_rows(&idx), p.pair_domains[..k].to_vec(), 0.0)
            }
            None => random_pairing(&self.train, k, derive_seed(self.run_seed, "pairs", 0)),
        }
    }

    pub fn run_point(&self, g: &GridPoint) -> Result<PointOutcome> {
        let clean = self.clean_pairs(g.k)?;
        let noisy = corrupt_pairs(&clean, g.epsilon, derive_seed(self.run_seed, "noise", 0))?;
        let estimate = estimate_subspace(&noisy.delta, g.r)?;
        if estimate.annihilates_pairs() {
            log::warn!("r={} removes the whole span of the k={} pairs", g.r, g.k);
        }
        if estimate.boundary_tie {
            log::debug!("singular values tie at the r={} boundary", g.r);
        }
        let kind = self.cfg.model.loss_kind;
        let model = train(&self.train, Some(&estimate), &self.cfg.train_config(self.fit_seed()), kind)?;
        let indomain = evaluate(&model, &self.indomain)?;
        let test = evaluate(&model, &self.test)?;
        let report = match &self.moment {
            Some(sm) => {
                let clean_ref = (self.cfg.pairs.pairing == Pairing::Oracle).then_some(&clean);
                Some(verify_bound(&model, &estimate, sm, &self.indomain, &self.test, clean_ref, Some(&noisy))?)
            }
            None => None,
        };
        let row = HarnessRow {
            sweep_axis: self.cfg.sweep.axis.as_str().into(),
            sweep_value: g.sweep_value,
            seed: self.run_seed,
            k: Some(g.k),
            r: Some(g.r),
            epsilon: Some(g.epsilon),
            pairing: Some(self.cfg.pairs.pairing.as_str().into()),
            loss_kind: kind.as_str().into(),
            train_loss: finite(model.train_loss),
            indomain_test_acc: Some(indomain.accuracy),
            test_acc: Some(test.accuracy),
            test_loss: finite(test.mean_loss),
            term1: report.as_ref().and_then(|b| finite(b.term1)),
            term2: report.as_ref().and_then(|b| finite(b.term2)),
            bound_rhs: report.as_ref().and_then(|b| finite(b.rhs)),
            bound_holds: report.as_ref().map(|b| b.holds.theorem),
            baseline: None,
        };
        Ok(PointOutcome { row, model, estimate, pairs: noisy, report })
    }

    /// ERM on the training mixture and the oracle (ERM on test-domain data).
    pub fn baselines(&self) -> Result<Vec<HarnessRow>> {
        let kind = self.cfg.model.loss_kind;
        let tc = self.cfg.train_config(self.fit_seed());
        let erm = train(&self.train, None, &tc, kind)?;
        let oracle_data = generate_dataset(&self.scm, &self.test_domain, self.train.len(), derive_seed(self.run_seed, "oracle", 0), false)?;
        let oracle = train(&oracle_data, None, &tc, kind)?;
        [("erm", erm), ("oracle", oracle)]
            .into_iter()
            .map(|(name, model)| {
                let indomain = evaluate(&model, &self.indomain)?;
                let test = evaluate(&model, &self.test)?;
                Ok(HarnessRow {
                    sweep_axis: self.cfg.sweep.axis.as_str().into(),
                    sweep_value: None,
                    seed: self.run_seed,
                    k: None,
                    r: None,
                    epsilon: None,
                    pairing: None,
                    loss_kind: kind.as_str().into(),
                    train_loss: finite(model.train_loss),
                    indomain_test_acc: Some(indomain.accuracy),
                    test_acc: Some(test.accuracy),
                    test_loss: finite(test.mean_loss),
                    term1: None,
                    term2: None,
                    bound_rhs: None,
                    bound_holds: None,
                    baseline: Some(name.into()),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    /// Canonical order: grid point outer, seed inner.
    pub rows: Vec<HarnessRow>,
    /// Bound reports aligned with `rows` when bounds are enabled.
    pub reports: Vec<BoundReport>,
    pub moment_checks: Vec<MomentAgreement>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| NcmError::invalid(format!("thread pool: {e}")))
}

/// Every grid point for every seed. Seeds run in parallel on `jobs`
/// workers; the output does not depend on `jobs`.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    use rayon::prelude::*;
    cfg.validate()?;
    let grid = cfg.grid()?;
    let per_seed = pool(jobs)?.install(|| {
        (0..cfg.sweep.num_seeds)
            .into_par_iter()
            .map(|i| {
                let ctx = RunContext::new(cfg, i)?;
                let outs = grid.iter().map(|g| ctx.run_point(g)).collect::<Result<Vec<_>>>()?;
                log::info!("seed {}/{} done", i + 1, cfg.sweep.num_seeds);
                Ok((outs, ctx.moment_check))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut result = SweepResult::default();
    let mut table: Vec<Vec<PointOutcome>> = Vec::new();
    for (outs, check) in per_seed {
        table.push(outs);
        result.moment_checks.extend(check);
    }
    for gi in 0..grid.len() {
        for seed_outs in &mut table {
            let out = &mut seed_outs[gi];
            result.rows.push(out.row.clone());
            if let Some(rep) = out.report.take() {
                result.reports.push(rep);
            }
        }
    }
    Ok(result)
}

/// ERM and oracle reference rows for the same seeds as [`run_sweep`].
pub fn run_baselines(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<HarnessRow>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let mut no_bounds = cfg.clone();
    no_bounds.bounds.enabled = false;
    let per_seed = pool(jobs)?.install(|| {
        (0..cfg.sweep.num_seeds)
            .into_par_iter()
            .map(|i| RunContext::new(&no_bounds, i)?.baselines())
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for name in ["erm", "oracle"] {
        for seed_rows in &per_seed {
            rows.extend(seed_rows.iter().filter(|r| r.baseline.as_deref() == Some(name)).cloned());
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(w: W, rows: &[HarnessRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(HARNESS_COLUMNS)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub const HARNESS_COLUMNS: [&str; 17] = [
    "sweep_axis",
    "sweep_value",
    "seed",
    "k",
    "r",
    "epsilon",
    "pairing",
    "loss_kind",
    "train_loss",
    "indomain_test_acc",
    "test_acc",
    "test_loss",
    "term1",
    "term2",
    "bound_rhs",
    "bound_holds",
    "baseline",
];

pub fn read_rows<R: std::io::Read>(r: R) -> Result<Vec<HarnessRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(NcmError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sweep_axis: String,
    pub sweep_value: Option<f64>,
    pub k: Option<usize>,
    pub r: Option<usize>,
    pub epsilon: Option<f64>,
    pub pairing: Option<String>,
    pub loss_kind: String,
    pub baseline: Option<String>,
    pub num_seeds: usize,
    pub train_loss_mean: Option<f64>,
    pub train_loss_std: Option<f64>,
    pub indomain_test_acc_mean: Option<f64>,
    pub indomain_test_acc_std: Option<f64>,
    pub test_acc_mean: Option<f64>,
    pub test_acc_std: Option<f64>,
    pub test_loss_mean: Option<f64>,
    pub test_loss_std: Option<f64>,
}

type GroupKey = (String, Option<u64>, Option<usize>, Option<usize>, Option<u64>, Option<String>, String, Option<String>);

fn group_key(r: &HarnessRow) -> GroupKey {
    (
        r.sweep_axis.clone(),
        r.sweep_value.map(f64::to_bits),
        r.k,
        r.r,
        r.epsilon.map(f64::to_bits),
        r.pairing.clone(),
        r.loss_kind.clone(),
        r.baseline.clone(),
    )
}

fn stat(rows: &[&HarnessRow], f: impl Fn(&HarnessRow) -> Option<f64>) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    if vals.is_empty() {
        return (None, None);
    }
    let (m, s) = mean_std(&vals);
    (Some(m), Some(s))
}

/// Mean and sample standard deviation over seeds, per grid point, in
/// first-appearance order.
pub fn summarize(rows: &[HarnessRow]) -> Vec<SummaryRow> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<&HarnessRow>> = BTreeMap::new();
    for r in rows {
        let key = group_key(r);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let first = g[0];
            let (tl_m, tl_s) = stat(g, |r| r.train_loss);
            let (ia_m, ia_s) = stat(g, |r| r.indomain_test_acc);
            let (ta_m, ta_s) = stat(g, |r| r.test_acc);
            let (ts_m, ts_s) = stat(g, |r| r.test_loss);
            SummaryRow {
                sweep_axis: first.sweep_axis.clone(),
                sweep_value: first.sweep_value,
                k: first.k,
                r: first.r,
                epsilon: first.epsilon,
                pairing: first.pairing.clone(),
                loss_kind: first.loss_kind.clone(),
                baseline: first.baseline.clone(),
                num_seeds: g.len(),
                train_loss_mean: tl_m,
                train_loss_std: tl_s,
                indomain_test_acc_mean: ia_m,
                indomain_test_acc_std: ia_s,
                test_acc_mean: ta_m,
                test_acc_std: ta_s,
                test_loss_mean: ts_m,
                test_loss_std: ts_s,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `<basename>.csv`, `<basename>_summary.csv`, `<basename>_bounds.jsonl`
/// (when reports exist) and the config text as `config.toml`.
pub fn write_outputs(dir: &Path, basename: &str, rows: &[HarnessRow], reports: &[BoundReport], config_text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(std::fs::File::create(dir.join(format!("{basename}.csv")))?, rows)?;
    write_summary(std::fs::File::create(dir.join(format!("{basename}_summary.csv")))?, &summarize(rows))?;
    if !reports.is_empty() {
        write_jsonl(std::fs::File::create(dir.join(format!("{basename}_bounds.jsonl")))?, reports)?;
    }
    std::fs::write(dir.join("config.toml"), config_text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SweepAxis;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scm.dim_latent = 10;
        cfg.scm.dim_obs = 12;
        cfg.scm.num_spurious = 3;
        cfg.data.n_train = 200;
        cfg.data.n_test = 200;
        cfg.data.n_indomain_test = 200;
        cfg.pairs.k = 6;
        cfg.pairs.epsilon = vec![0.0, 1.0];
        cfg.model.epochs = 10;
        cfg.sweep.axis = SweepAxis::R;
        cfg.sweep.values = vec![0.0, 3.0];
        cfg.sweep.num_seeds = 3;
        cfg
    }

    #[test]
    fn rows_are_canonical_and_job_independent() {
        let cfg = tiny();
        let a = run_sweep(&cfg, 1).unwrap();
        let b = run_sweep(&cfg, 3).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 2 * 2 * 3);
        assert_eq!(a.rows[0].r, Some(0));
        assert_eq!(a.rows[1].r, Some(0));
        assert_ne!(a.rows[0].seed, a.rows[1].seed);
        assert_eq!(a.rows[3].r, Some(3));
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_rows(&mut buf_a, &a.rows).unwrap();
        write_rows(&mut buf_b, &b.rows).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn empty_cells_and_round_trip() {
        let res = run_sweep(&tiny(), 1).unwrap();
        let mut buf = Vec::new();
        write_rows(&mut buf, &res.rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), HARNESS_COLUMNS.join(","));
        assert!(text.lines().nth(1).unwrap().ends_with(",,,,,"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), res.rows);
    }

    #[test]
    fn erm_baseline_equals_rank_zero_row() {
        let cfg = tiny();
        let res = run_sweep(&cfg, 1).unwrap();
        let base = run_baselines(&cfg, 1).unwrap();
        assert_eq!(base.len(), 6);
        let erm = &base[0];
        assert_eq!(erm.baseline.as_deref(), Some("erm"));
        let r0 = res.rows.iter().find(|r| r.seed == erm.seed && r.r == Some(0) && r.epsilon == Some(0.0)).unwrap();
        assert_eq!(r0.test_acc, erm.test_acc);
        assert_eq!(r0.train_loss, erm.train_loss);
    }

    #[test]
    fn bounds_fill_term_columns() {
        let mut cfg = tiny();
        cfg.bounds.enabled = true;
        cfg.bounds.mc_samples = 5000;
        let res = run_sweep(&cfg, 1).unwrap();
        assert_eq!(res.reports.len(), res.rows.len());
        assert!(res.rows.iter().all(|r| r.term2.is_some() && r.bound_holds.is_some()));
        assert_eq!(res.moment_checks.len(), 3);
    }

    #[test]
    fn summary_groups_seeds() {
        let res = run_sweep(&tiny(), 1).unwrap();
        let s = summarize(&res.rows);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|g| g.num_seeds == 3));
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        let err = write_outputs(&file.join("sub"), "s", &[], &[], "").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
