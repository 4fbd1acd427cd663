//! Linear models trained on projected inputs `P·x`.
//!
//! With `P = I − Q̃Q̃ᵀ` the reported weights are `P·θ_raw`, so `θᵀQ̃ = 0`
//! holds by construction. Without a projection this is plain ERM.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NcmError, Result};
use crate::rng::stream;
use crate::scm::{parse_f64, Dataset};
use crate::subspace::SubspaceEstimate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LogLoss,
    SquaredError,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::LogLoss => "log_loss",
            LossKind::SquaredError => "squared_error",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "log_loss" => Ok(LossKind::LogLoss),
            "squared_error" => Ok(LossKind::SquaredError),
            other => Err(NcmError::invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Gd,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    #[default]
    Zeros,
    Gaussian(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    /// Batches larger than the dataset mean full-batch descent.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Train an unprojected bias. Off in theory mode.
    #[serde(default = "yes")]
    pub fit_bias: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            step_size: 0.01,
            batch_size: usize::MAX,
            seed: 0,
            weight_init: WeightInit::Zeros,
            optimizer: Optimizer::Gd,
            fit_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NcmError::invalid("epochs and batch_size must be positive"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(NcmError::invalid(format!("step_size must be positive, got {}", self.step_size)));
        }
        if let WeightInit::Gaussian(s) = self.weight_init {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(NcmError::invalid("gaussian init scale must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub loss_kind: LossKind,
    pub projection_used: Option<DMatrix<f64>>,
    pub r: usize,
    pub seed: u64,
    /// Mean training loss after the last epoch.
    pub train_loss: f64,
    /// Mean full-data loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check_label(label: f64, kind: LossKind) -> Result<()> {
    if kind == LossKind::LogLoss && label != 1.0 && label != -1.0 {
        return Err(NcmError::invalid(format!("log loss needs labels in {{-1, +1}}, got {label}")));
    }
    Ok(())
}

/// `ln(1 + e^{−y·s})` or `(s − y)²`.
pub fn loss(score: f64, label: f64, kind: LossKind) -> Result<f64> {
    check_label(label, kind)?;
    Ok(loss_unchecked(score, label, kind))
}

pub(crate) fn loss_unchecked(score: f64, label: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::LogLoss => softplus(-label * score),
        LossKind::SquaredError => (score - label) * (score - label),
    }
}

/// `∂ℓ/∂s`.
fn dloss(score: f64, label: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::LogLoss => {
            let m = label * score;
            if m >= 0.0 {
                let e = (-m).exp();
                -label * e / (1.0 + e)
            } else {
                -label / (1.0 + m.exp())
            }
        }
        LossKind::SquaredError => 2.0 * (score - label),
    }
}

fn check_labels(y: &DVector<f64>, kind: LossKind) -> Result<()> {
    y.iter().try_for_each(|&v| check_label(v, kind))
}

/// Gradient in `θ` of `(1/B) Σ ℓ(θᵀ(P x_i) + b, y_i)` over the rows of `x`.
pub fn gradient(
    theta: &DVector<f64>,
    bias: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kind: LossKind,
    projection: Option<&DMatrix<f64>>,
) -> Result<DVector<f64>> {
    if x.nrows() == 0 || x.nrows() != y.len() || x.ncols() != theta.len() {
        return Err(NcmError::invalid("batch and parameter shapes disagree"));
    }
    check_labels(y, kind)?;
    let xp = match projection {
        Some(p) => x * p,
        None => x.clone(),
    };
    let (g, _) = batch_gradient(&xp, y, theta, bias, kind);
    Ok(g)
}

/// Mean loss of the projected objective, for finite-difference checks.
pub fn objective(
    theta: &DVector<f64>,
    bias: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kind: LossKind,
    projection: Option<&DMatrix<f64>>,
) -> Result<f64> {
    check_labels(y, kind)?;
    let xp = match projection {
        Some(p) => x * p,
        None => x.clone(),
    };
    Ok(mean_loss(&xp, y, theta, bias, kind))
}

fn batch_gradient(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, bias: f64, kind: LossKind) -> (DVector<f64>, f64) {
    let scores = x * theta;
    let b = y.len() as f64;
    let g = DVector::from_fn(y.len(), |i, _| dloss(scores[i] + bias, y[i], kind));
    (x.tr_mul(&g) / b, g.sum() / b)
}

fn mean_loss(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, bias: f64, kind: LossKind) -> f64 {
    let scores = x * theta;
    scores.iter().zip(y.iter()).map(|(&s, &l)| loss_unchecked(s + bias, l, kind)).sum::<f64>() / y.len() as f64
}

/// What an observer sees after each parameter update.
pub struct Step<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Raw iterate (before the final `P·θ`).
    pub theta: &'a DVector<f64>,
    pub bias: f64,
}

pub fn train(dataset: &Dataset, projection: Option<&SubspaceEstimate>, cfg: &TrainConfig, kind: LossKind) -> Result<LinearModel> {
    train_observed(dataset, projection, cfg, kind, |_| {})
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    mb: f64,
    vb: f64,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn train_observed<F: FnMut(Step<'_>)>(
    dataset: &Dataset,
    projection: Option<&SubspaceEstimate>,
    cfg: &TrainConfig,
    kind: LossKind,
    mut observer: F,
) -> Result<LinearModel> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(NcmError::invalid("cannot train on an empty dataset"));
    }
    let (n, d) = dataset.inputs.shape();
    if let Some(p) = projection {
        if p.dim() != d {
            return Err(NcmError::invalid(format!("projection is {0}×{0}, data has d={d}", p.dim())));
        }
    }
    check_labels(&dataset.labels, kind)?;

    let x = match projection {
        Some(p) => &dataset.inputs * &p.projection,
        None => dataset.inputs.clone(),
    };
    let y = &dataset.labels;

    let mut theta = match cfg.weight_init {
        WeightInit::Zeros => DVector::zeros(d),
        WeightInit::Gaussian(scale) => {
            let mut rng = stream(cfg.seed, "train/init", 0);
            DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        }
    };
    let mut bias = 0.0;
    let mut adam = Adam { m: DVector::zeros(d), v: DVector::zeros(d), mb: 0.0, vb: 0.0, t: 0 };

    let full_batch = cfg.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if !full_batch {
            order.shuffle(&mut stream(cfg.seed, "train/shuffle", epoch as u64));
        }
        let batches: Vec<&[usize]> = if full_batch { vec![&order[..]] } else { order.chunks(cfg.batch_size).collect() };
        for (bi, idx) in batches.into_iter().enumerate() {
            let (grad, grad_b) = if full_batch {
                batch_gradient(&x, y, &theta, bias, kind)
            } else {
                batch_gradient(&x.select_rows(idx), &y.select_rows(idx), &theta, bias, kind)
            };
            if !grad.iter().all(|v| v.is_finite()) || !grad_b.is_finite() {
                return Err(NcmError::NumericFailure { epoch, batch: bi, detail: "non-finite gradient".into() });
            }
            match cfg.optimizer {
                Optimizer::Gd => {
                    theta.axpy(-cfg.step_size, &grad, 1.0);
                    if cfg.fit_bias {
                        bias -= cfg.step_size * grad_b;
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - BETA1.powi(adam.t);
                    let c2 = 1.0 - BETA2.powi(adam.t);
                    for j in 0..d {
                        adam.m[j] = BETA1 * adam.m[j] + (1.0 - BETA1) * grad[j];
                        adam.v[j] = BETA2 * adam.v[j] + (1.0 - BETA2) * grad[j] * grad[j];
                        theta[j] -= cfg.step_size * (adam.m[j] / c1) / ((adam.v[j] / c2).sqrt() + ADAM_EPS);
                    }
                    if cfg.fit_bias {
                        adam.mb = BETA1 * adam.mb + (1.0 - BETA1) * grad_b;
                        adam.vb = BETA2 * adam.vb + (1.0 - BETA2) * grad_b * grad_b;
                        bias -= cfg.step_size * (adam.mb / c1) / ((adam.vb / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
            observer(Step { epoch, batch: bi, theta: &theta, bias });
        }
        let l = mean_loss(&x, y, &theta, bias, kind);
        if !l.is_finite() {
            return Err(NcmError::NumericFailure { epoch, batch: 0, detail: format!("training loss is {l}") });
        }
        epoch_losses.push(l);
    }

    let violations: Vec<usize> = epoch_losses
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] * (1.0 + 1e-12))
        .map(|(i, _)| i + 1)
        .collect();
    if let Some(first) = violations.first() {
        log::warn!(
            "training loss increased in {} of {} epochs (first at epoch {first}); step size {} may be above the stable range",
            violations.len(),
            cfg.epochs,
            cfg.step_size
        );
    }

    let weights = match projection {
        Some(p) => &p.projection * theta,
        None => theta,
    };
    Ok(LinearModel {
        weights,
        bias,
        loss_kind: kind,
        projection_used: projection.map(|p| p.projection.clone()),
        r: projection.map_or(0, |p| p.r),
        seed: cfg.seed,
        train_loss: *epoch_losses.last().expect("at least one epoch"),
        epoch_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mean_loss: f64,
    pub loss_std: f64,
    /// Standard error of `mean_loss`.
    pub loss_se: f64,
    pub accuracy: f64,
    pub domain_counts: BTreeMap<String, usize>,
}

impl LinearModel {
    pub fn scores(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * &self.weights).add_scalar(self.bias)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Per-row losses on a dataset.
    pub fn row_losses(&self, dataset: &Dataset) -> Result<DVector<f64>> {
        if dataset.dim() != self.dim() {
            return Err(NcmError::invalid(format!("model has d={}, data has d={}", self.dim(), dataset.dim())));
        }
        check_labels(&dataset.labels, self.loss_kind)?;
        let s = self.scores(&dataset.inputs);
        Ok(DVector::from_fn(s.len(), |i, _| loss_unchecked(s[i], dataset.labels[i], self.loss_kind)))
    }

    /// CSV with header `field,index,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["field", "index", "value"])?;
        out.write_record(["loss_kind", "", self.loss_kind.as_str()])?;
        out.write_record(["r", "", &self.r.to_string()])?;
        out.write_record(["seed", "", &self.seed.to_string()])?;
        out.write_record(["train_loss", "", &self.train_loss.to_string()])?;
        out.write_record(["bias", "", &self.bias.to_string()])?;
        for (j, v) in self.weights.iter().enumerate() {
            out.write_record(["theta", &j.to_string(), &v.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`LinearModel::write_csv`]; the projection matrix and the
    /// loss history are not stored.
    pub fn read_csv<R: Read>(r: R) -> Result<LinearModel> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut kind = None;
        let (mut r_used, mut seed, mut train_loss, mut bias) = (0usize, 0u64, f64::NAN, 0.0);
        let mut theta = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || NcmError::invalid(format!("bad model row {:?}", rec.as_slice()));
            match &rec[0] {
                "loss_kind" => kind = Some(LossKind::parse(&rec[2])?),
                "r" => r_used = rec[2].parse().map_err(|_| bad())?,
                "seed" => seed = rec[2].parse().map_err(|_| bad())?,
                "train_loss" => train_loss = parse_f64(&rec[2])?,
                "bias" => bias = parse_f64(&rec[2])?,
                "theta" => {
                    let j: usize = rec[1].parse().map_err(|_| bad())?;
                    if j != theta.len() {
                        return Err(bad());
                    }
                    theta.push(parse_f64(&rec[2])?);
                }
                _ => return Err(bad()),
            }
        }
        Ok(LinearModel {
            weights: DVector::from_vec(theta),
            bias,
            loss_kind: kind.ok_or_else(|| NcmError::invalid("model csv lacks loss_kind"))?,
            projection_used: None,
            r: r_used,
            seed,
            train_loss,
            epoch_losses: Vec::new(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<LinearModel> {
        LinearModel::read_csv(std::fs::File::open(path)?)
    }
}

pub fn evaluate(model: &LinearModel, dataset: &Dataset) -> Result<EvalReport> {
    let losses = model.row_losses(dataset)?;
    let s = model.scores(&dataset.inputs);
    let n = dataset.len();
    let hits = (0..n)
        .filter(|&i| {
            let pred = if s[i] >= 0.0 { 1.0 } else { -1.0 };
            let truth = if dataset.labels[i] >= 0.0 { 1.0 } else { -1.0 };
            pred == truth
        })
        .count();
    let (mean, std) = mean_std(losses.as_slice());
    Ok(EvalReport {
        n,
        mean_loss: mean,
        loss_std: std,
        loss_se: std / (n as f64).sqrt(),
        accuracy: hits as f64 / n as f64,
        domain_counts: dataset.domain_counts(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_rows;
    use crate::subspace::estimate_subspace;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy(n: usize, d: usize, seed: u64) -> Dataset {
        let x = gaussian_rows(&mut stream(seed, "toy/x", 0), n, d);
        let w = gaussian_rows(&mut stream(seed, "toy/w", 0), d, 1);
        let s = &x * w;
        Dataset {
            labels: DVector::from_fn(n, |i, _| if s[(i, 0)] >= 0.0 { 1.0 } else { -1.0 }),
            domain_ids: vec!["toy".into(); n],
            inputs: x,
            exo_noise: None,
        }
    }

    #[test]
    fn loss_values() {
        assert_abs_diff_eq!(loss(0.0, 1.0, LossKind::LogLoss).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(loss(2.0, 2.0, LossKind::SquaredError).unwrap(), 0.0);
        // ln(1 + e^10) to 16 digits.
        assert_abs_diff_eq!(loss(10.0, -1.0, LossKind::LogLoss).unwrap(), 10.000045398899218, epsilon = 1e-12);
        assert_abs_diff_eq!(loss(1e4, -1.0, LossKind::LogLoss).unwrap(), 1e4, epsilon = 1e-9);
        assert!(loss(1e4, 1.0, LossKind::LogLoss).unwrap() >= 0.0);
        assert!(loss(0.0, 0.5, LossKind::LogLoss).is_err());
        assert!(loss(0.0, 0.5, LossKind::SquaredError).is_ok());
    }

    #[test]
    fn gradient_at_zero() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let y = DVector::from_element(1, -1.0);
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let g = gradient(&DVector::zeros(3), 0.0, &x, &y, LossKind::LogLoss, Some(&p)).unwrap();
        assert_eq!(g, DVector::from_vec(vec![0.5, 0.0, 0.25]));
        let zero = DMatrix::zeros(3, 3);
        let theta = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let g = gradient(&theta, 0.1, &x, &y, LossKind::LogLoss, Some(&zero)).unwrap();
        assert_eq!(g, DVector::zeros(3));
    }

    #[test]
    fn zero_epochs_is_rejected_and_zero_model_scores_base_rate() {
        let ds = toy(50, 4, 1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train(&ds, None, &cfg, LossKind::LogLoss).is_err());
        let model = LinearModel {
            weights: DVector::zeros(4),
            bias: 0.0,
            loss_kind: LossKind::LogLoss,
            projection_used: None,
            r: 0,
            seed: 0,
            train_loss: f64::NAN,
            epoch_losses: vec![],
        };
        let rep = evaluate(&model, &ds).unwrap();
        let pos = ds.labels.iter().filter(|&&v| v > 0.0).count() as f64 / 50.0;
        assert_abs_diff_eq!(rep.accuracy, pos, epsilon = 1e-15);
    }

    #[test]
    fn separable_data_is_fit() {
        let ds = toy(200, 3, 2);
        let cfg = TrainConfig { epochs: 2000, step_size: 1.0, ..TrainConfig::default() };
        let m = train(&ds, None, &cfg, LossKind::LogLoss).unwrap();
        let acc = evaluate(&m, &ds).unwrap().accuracy;
        assert!(acc >= 0.98, "{acc}");
        assert!(m.epoch_losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rank_zero_projection_matches_erm_bitwise() {
        let ds = toy(64, 5, 3);
        let est = estimate_subspace(&gaussian_rows(&mut stream(1, "d", 0), 5, 3), 0).unwrap();
        for opt in [Optimizer::Gd, Optimizer::Adam] {
            let cfg = TrainConfig { epochs: 5, step_size: 0.1, batch_size: 16, seed: 9, optimizer: opt, ..TrainConfig::default() };
            let mut a = Vec::new();
            let mut b = Vec::new();
            let ma = train_observed(&ds, None, &cfg, LossKind::LogLoss, |s| a.push((s.theta.clone(), s.bias))).unwrap();
            let mb = train_observed(&ds, Some(&est), &cfg, LossKind::LogLoss, |s| b.push((s.theta.clone(), s.bias))).unwrap();
            assert_eq!(a.len(), 20);
            assert_eq!(a, b);
            assert_eq!(ma.weights, mb.weights);
        }
    }

    #[test]
    fn constraint_after_training() {
        let ds = toy(100, 6, 4);
        let est = estimate_subspace(&gaussian_rows(&mut stream(2, "d", 0), 6, 4), 2).unwrap();
        let cfg = TrainConfig { epochs: 20, step_size: 0.3, batch_size: 10, ..TrainConfig::default() };
        let m = train(&ds, Some(&est), &cfg, LossKind::SquaredError).unwrap();
        let c = est.basis.tr_mul(&m.weights);
        assert!(c.amax() <= 1e-8);
        assert_eq!(m.r, 2);
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut ds = toy(20, 3, 5);
        ds.inputs *= 1e3;
        let cfg = TrainConfig { epochs: 50, step_size: 10.0, ..TrainConfig::default() };
        match train(&ds, None, &cfg, LossKind::SquaredError) {
            Err(NcmError::NumericFailure { epoch, .. }) => assert!(epoch < 50),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn model_csv_round_trip() {
        let ds = toy(30, 3, 6);
        let m = train(&ds, None, &TrainConfig { epochs: 3, ..TrainConfig::default() }, LossKind::LogLoss).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = LinearModel::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.bias, m.bias);
        assert_eq!(back.loss_kind, m.loss_kind);
        assert_eq!(back.train_loss, m.train_loss);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradient_matches_central_differences(seed in 0u64..100_000, squared in any::<bool>(), proj in any::<bool>()) {
            let kind = if squared { LossKind::SquaredError } else { LossKind::LogLoss };
            let d = 10;
            let ds = toy(8, d, seed);
            let theta = gaussian_rows(&mut stream(seed, "theta", 0), d, 1).column(0).into_owned();
            let p = proj.then(|| estimate_subspace(&gaussian_rows(&mut stream(seed, "q", 0), d, 3), 2).unwrap().projection);
            let g = gradient(&theta, 0.2, &ds.inputs, &ds.labels, kind, p.as_ref()).unwrap();
            let h = 1e-5;
            let fd = DVector::from_fn(d, |j, _| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let f = |t: &DVector<f64>| objective(t, 0.2, &ds.inputs, &ds.labels, kind, p.as_ref()).unwrap();
                (f(&up) - f(&dn)) / (2.0 * h)
            });
            let rel = (&g - &fd).amax() / g.amax().max(1e-8);
            prop_assert!(rel <= 1e-5, "relative error {rel}");
        }
    }
}
