use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NcmError, Result};
use crate::linmodels::{LossKind, Optimizer, TrainConfig, WeightInit};
use crate::scm::{DomainRole, DomainSpec, LabelKind, LatentScm, ScmOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; per-run seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    pub scm: ScmSection,
    pub data: DataSection,
    pub pairs: PairsSection,
    pub model: ModelSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSection {
    pub dim_latent: usize,
    pub dim_obs: usize,
    pub num_spurious: usize,
    #[serde(default = "one")]
    pub label_scale: f64,
    #[serde(default)]
    pub label_kind: LabelKind,
    pub domains: Vec<DomainEntry>,
}

/// A domain as written in the config; coupling defaults to `1/|I|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub domain_id: String,
    pub spurious_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spurious_mean_coupling: Option<f64>,
    #[serde(default)]
    pub domain_weight: f64,
    pub role: DomainRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Rows per training domain; the mixture has `n_train × #train` rows.
    pub n_train: usize,
    pub n_test: usize,
    pub n_indomain_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    Oracle,
    Random,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::Oracle => "oracle",
            Pairing::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub k: usize,
    pub epsilon: Vec<f64>,
    pub pairing: Pairing,
    /// Defaults to the first two training domains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub loss_kind: LossKind,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub step_size: f64,
    /// Absent means full batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub weight_init: WeightInit,
    #[serde(default = "yes")]
    pub fit_bias: bool,
    /// Absent means `min(k, |I|)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    R,
    Epsilon,
    None,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::R => "r",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Vec<f64>,
    pub num_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub enabled: bool,
    /// Monte-Carlo samples for the second moment; 0 uses the closed form.
    pub mc_samples: usize,
    pub workers: usize,
    /// Fail the run when Monte-Carlo and closed form disagree.
    pub closed_form_check: bool,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            enabled: false,
            mc_samples: 20_000,
            workers: 1,
            closed_form_check: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub basename: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            basename: "sweep".into(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// One grid point of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub sweep_value: Option<f64>,
    pub k: usize,
    pub r: usize,
    pub epsilon: f64,
}

impl Default for ExperimentConfig {
    /// m = d = 100, |I| = 20, two training domains and one test domain,
    /// full-batch gradient descent for 100 epochs, k-sweep over 10 seeds.
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            scm: ScmSection {
                dim_latent: 100,
                dim_obs: 100,
                num_spurious: 20,
                label_scale: 1.0,
                label_kind: LabelKind::Sign,
                domains: vec![
                    DomainEntry::train("train_a", 0.1, 0.5),
                    DomainEntry::train("train_b", 30.0, 0.5),
                    DomainEntry::test("test", 8.0),
                ],
            },
            data: DataSection {
                n_train: 5000,
                n_test: 5000,
                n_indomain_test: 5000,
            },
            pairs: PairsSection {
                k: 100,
                epsilon: vec![0.0, 1.0, 5.0, 10.0],
                pairing: Pairing::Oracle,
                source: None,
                target: None,
            },
            model: ModelSection {
                loss_kind: LossKind::LogLoss,
                optimizer: Optimizer::Gd,
                epochs: 100,
                step_size: 0.05,
                batch_size: None,
                weight_init: WeightInit::Zeros,
                fit_bias: true,
                r: None,
            },
            sweep: SweepSection {
                axis: SweepAxis::K,
                values: vec![1.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0],
                num_seeds: 10,
            },
            bounds: BoundsSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl DomainEntry {
    pub fn train(id: &str, spurious_scale: f64, weight: f64) -> Self {
        DomainEntry {
            domain_id: id.into(),
            spurious_scale,
            spurious_mean_coupling: None,
            domain_weight: weight,
            role: DomainRole::Train,
        }
    }

    pub fn test(id: &str, spurious_scale: f64) -> Self {
        DomainEntry {
            domain_id: id.into(),
            spurious_scale,
            spurious_mean_coupling: None,
            domain_weight: 0.0,
            role: DomainRole::Test,
        }
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(NcmError::invalid(format!("{what} grid value {v} is not a nonnegative integer")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| NcmError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(NcmError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((ExperimentConfig::from_toml_str(&text)?, text))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        let coupling = 1.0 / self.scm.num_spurious as f64;
        self.scm
            .domains
            .iter()
            .map(|d| DomainSpec {
                domain_id: d.domain_id.clone(),
                spurious_scale: d.spurious_scale,
                spurious_mean_coupling: d.spurious_mean_coupling.unwrap_or(coupling),
                domain_weight: d.domain_weight,
                role: d.role,
            })
            .collect()
    }

    pub fn scm_options(&self) -> ScmOptions {
        ScmOptions {
            label_scale: self.scm.label_scale,
            label_kind: self.scm.label_kind,
        }
    }

    pub fn build_scm(&self, seed: u64) -> Result<LatentScm> {
        crate::scm::sample_scm_with(
            self.scm.dim_latent,
            self.scm.dim_obs,
            self.scm.num_spurious,
            self.domain_specs(),
            seed,
            self.scm_options(),
        )
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            step_size: self.model.step_size,
            batch_size: self.model.batch_size.unwrap_or(usize::MAX),
            seed,
            weight_init: self.model.weight_init,
            optimizer: self.model.optimizer,
            fit_bias: self.model.fit_bias,
        }
    }

    pub fn test_domain(&self) -> Result<&str> {
        let tests: Vec<&DomainEntry> = self.scm.domains.iter().filter(|d| d.role == DomainRole::Test).collect();
        match tests.as_slice() {
            [one] => Ok(&one.domain_id),
            _ => Err(NcmError::invalid(format!("expected exactly one test domain, found {}", tests.len()))),
        }
    }

    /// Source and target training domains of the counterfactual pairs.
    pub fn pair_domains(&self) -> Result<(String, String)> {
        let train: Vec<&str> = self
            .scm
            .domains
            .iter()
            .filter(|d| d.role == DomainRole::Train)
            .map(|d| d.domain_id.as_str())
            .collect();
        let source = self.pairs.source.clone().or_else(|| train.first().map(|s| s.to_string()));
        let target = self.pairs.target.clone().or_else(|| train.get(1).map(|s| s.to_string()));
        let (Some(source), Some(target)) = (source, target) else {
            return Err(NcmError::invalid("pairs need two training domains"));
        };
        for id in [&source, &target] {
            if !train.contains(&id.as_str()) {
                return Err(NcmError::invalid(format!("pair domain {id:?} is not a training domain")));
            }
        }
        if source == target {
            return Err(NcmError::invalid("pair source and target coincide"));
        }
        Ok((source, target))
    }

    fn rule_r(&self, k: usize) -> usize {
        self.model.r.unwrap_or(k.min(self.scm.num_spurious))
    }

    /// Grid points in canonical order: ε outer (unless ε is the axis), axis value inner.
    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let eps_list: Vec<f64> = if self.sweep.axis == SweepAxis::Epsilon { vec![f64::NAN] } else { self.pairs.epsilon.clone() };
        let values: Vec<Option<f64>> = if self.sweep.axis == SweepAxis::None {
            vec![None]
        } else {
            if self.sweep.values.is_empty() {
                return Err(NcmError::invalid("sweep values are empty"));
            }
            self.sweep.values.iter().map(|&v| Some(v)).collect()
        };
        let mut out = Vec::new();
        for &eps in &eps_list {
            for &v in &values {
                let (k, r, epsilon) = match (self.sweep.axis, v) {
                    (SweepAxis::K, Some(v)) => {
                        let k = as_count(v, "k")?;
                        (k, self.rule_r(k), eps)
                    }
                    (SweepAxis::R, Some(v)) => (self.pairs.k, as_count(v, "r")?, eps),
                    (SweepAxis::Epsilon, Some(v)) => (self.pairs.k, self.rule_r(self.pairs.k), v),
                    _ => (self.pairs.k, self.rule_r(self.pairs.k), eps),
                };
                out.push(GridPoint { sweep_value: v, k, r, epsilon });
            }
        }
        Ok(out)
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.build_scm(0)?;
        self.test_domain()?;
        self.pair_domains()?;
        self.train_config(0).validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 || self.data.n_indomain_test == 0 {
            return Err(NcmError::invalid("data sizes must be positive"));
        }
        if self.sweep.num_seeds == 0 {
            return Err(NcmError::invalid("num_seeds must be at least 1"));
        }
        if self.sweep.axis != SweepAxis::Epsilon && self.pairs.epsilon.is_empty() {
            return Err(NcmError::invalid("epsilon list is empty"));
        }
        let d = self.scm.dim_obs;
        let n_mix = self.data.n_train * self.scm.domains.iter().filter(|d| d.role == DomainRole::Train).count();
        for g in self.grid()? {
            if g.k == 0 {
                return Err(NcmError::invalid("k must be at least 1"));
            }
            if g.r > g.k.min(d) {
                return Err(NcmError::invalid(format!("r={} exceeds min(k={}, d={d})", g.r, g.k)));
            }
            if !(g.epsilon >= 0.0 && g.epsilon.is_finite()) {
                return Err(NcmError::invalid(format!("epsilon {} must be >= 0", g.epsilon)));
            }
            if self.pairs.pairing == Pairing::Random && 2 * g.k > n_mix {
                return Err(NcmError::invalid(format!("random pairing with k={} needs more training rows", g.k)));
            }
        }
        if self.bounds.enabled && self.bounds.workers == 0 {
            return Err(NcmError::invalid("bounds.workers must be positive"));
        }
        Ok(())
    }
}
