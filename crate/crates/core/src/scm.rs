//! Linear latent domain SCMs with interventions on spurious latents.
//!
//! Latent layout: indices `0..m-|I|` hold the invariant latents, the rest
//! hold the spurious ones. For exogenous noise `u` and a domain `e`:
//!
//! ```text
//! z_inv = u_inv
//! y     = sign(z_inv · θ_y)            (sign(0) = +1)
//! z_spu = c_e · y · 1 + σ_e · u_spu
//! x     = G · [z_inv; z_spu]
//! ```
//!
//! Only `c_e` and `σ_e` depend on the domain, so the label and the invariant
//! latents of a fixed `u` are the same in every domain.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{NcmError, Result};
use crate::linalg::orthonormal_columns;
use crate::rng::{gaussian_rows, stream};

pub const SCM_DOC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// `y = sign(z_inv · θ_y)`, for classification.
    #[default]
    Sign,
    /// `y = z_inv · θ_y`, for regression.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub spurious_scale: f64,
    pub spurious_mean_coupling: f64,
    #[serde(default)]
    pub domain_weight: f64,
    #[serde(default = "default_role")]
    pub role: DomainRole,
}

fn default_role() -> DomainRole {
    DomainRole::Train
}

impl DomainSpec {
    pub fn train(id: &str, spurious_scale: f64, coupling: f64, weight: f64) -> Self {
        DomainSpec {
            domain_id: id.to_string(),
            spurious_scale,
            spurious_mean_coupling: coupling,
            domain_weight: weight,
            role: DomainRole::Train,
        }
    }

    pub fn test(id: &str, spurious_scale: f64, coupling: f64) -> Self {
        DomainSpec {
            domain_id: id.to_string(),
            spurious_scale,
            spurious_mean_coupling: coupling,
            domain_weight: 0.0,
            role: DomainRole::Test,
        }
    }

    pub fn is_train(&self) -> bool {
        self.role == DomainRole::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScmOptions {
    /// Standard deviation of the entries of `θ_y`.
    pub label_scale: f64,
    pub label_kind: LabelKind,
}

impl Default for ScmOptions {
    fn default() -> Self {
        ScmOptions {
            label_scale: 1.0,
            label_kind: LabelKind::Sign,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentScm {
    pub dim_latent: usize,
    pub dim_obs: usize,
    pub num_spurious: usize,
    pub label_weights: DVector<f64>,
    pub obs_map: DMatrix<f64>,
    pub domain_params: Vec<DomainSpec>,
    pub options: ScmOptions,
    pub seed: u64,
}

pub fn sample_scm(
    dim_latent: usize,
    dim_obs: usize,
    num_spurious: usize,
    domain_specs: Vec<DomainSpec>,
    seed: u64,
) -> Result<LatentScm> {
    sample_scm_with(dim_latent, dim_obs, num_spurious, domain_specs, seed, ScmOptions::default())
}

pub fn sample_scm_with(
    dim_latent: usize,
    dim_obs: usize,
    num_spurious: usize,
    domain_specs: Vec<DomainSpec>,
    seed: u64,
    options: ScmOptions,
) -> Result<LatentScm> {
    if num_spurious == 0 || num_spurious >= dim_latent || dim_latent > dim_obs {
        return Err(NcmError::invalid(format!(
            "need 0 < num_spurious < dim_latent <= dim_obs, got |I|={num_spurious}, m={dim_latent}, d={dim_obs}"
        )));
    }
    if !(options.label_scale > 0.0 && options.label_scale.is_finite()) {
        return Err(NcmError::invalid("label_scale must be positive"));
    }
    validate_domains(&domain_specs)?;

    let mut rng = stream(seed, "scm/label_weights", 0);
    let label_weights = gaussian_rows(&mut rng, dim_latent - num_spurious, 1).column(0) * options.label_scale;
    let mut rng = stream(seed, "scm/obs_map", 0);
    let obs_map = orthonormal_columns(gaussian_rows(&mut rng, dim_obs, dim_latent));

    Ok(LatentScm {
        dim_latent,
        dim_obs,
        num_spurious,
        label_weights,
        obs_map,
        domain_params: domain_specs,
        options,
        seed,
    })
}

fn validate_domains(specs: &[DomainSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(NcmError::invalid("domain list is empty"));
    }
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.domain_id.as_str()) {
            return Err(NcmError::invalid(format!("duplicate domain id {:?}", s.domain_id)));
        }
        if !(s.spurious_scale > 0.0 && s.spurious_scale.is_finite()) {
            return Err(NcmError::invalid(format!(
                "domain {:?}: spurious_scale must be positive, got {}",
                s.domain_id, s.spurious_scale
            )));
        }
        if !s.spurious_mean_coupling.is_finite() {
            return Err(NcmError::invalid(format!("domain {:?}: coupling is not finite", s.domain_id)));
        }
        if !(0.0..=1.0).contains(&s.domain_weight) {
            return Err(NcmError::invalid(format!(
                "domain {:?}: weight {} outside [0, 1]",
                s.domain_id, s.domain_weight
            )));
        }
    }
    let total: f64 = specs.iter().filter(|s| s.is_train()).map(|s| s.domain_weight).sum();
    if !specs.iter().any(DomainSpec::is_train) || (total - 1.0).abs() > 1e-9 {
        return Err(NcmError::invalid(format!("training domain weights sum to {total}, expected 1")));
    }
    Ok(())
}

impl LatentScm {
    pub fn num_invariant(&self) -> usize {
        self.dim_latent - self.num_spurious
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domain_params
            .iter()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| NcmError::NotFound(format!("domain {id:?}")))
    }

    pub fn train_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domain_params.iter().filter(|d| d.is_train())
    }

    pub fn test_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domain_params.iter().filter(|d| !d.is_train())
    }

    /// Observed-space columns `G_inv` (d × (m−|I|)).
    pub fn invariant_block(&self) -> DMatrix<f64> {
        self.obs_map.columns(0, self.num_invariant()).into_owned()
    }

    /// Observed-space columns `G_spu` (d × |I|).
    pub fn spurious_block(&self) -> DMatrix<f64> {
        self.obs_map.columns(self.num_invariant(), self.num_spurious).into_owned()
    }

    /// Copy with one more test domain that only changes `σ_s` / coupling.
    pub fn with_domain(&self, spec: DomainSpec) -> Result<LatentScm> {
        let mut specs = self.domain_params.clone();
        specs.push(spec);
        validate_domains(&specs)?;
        let mut out = self.clone();
        out.domain_params = specs;
        Ok(out)
    }

    fn label(&self, score: f64) -> f64 {
        match self.options.label_kind {
            LabelKind::Sign => {
                if score >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            LabelKind::Linear => score,
        }
    }

    /// Solve the SCM of each row's domain on the given exogenous rows.
    /// Returns latents `z` (n × m) and labels.
    pub fn latents(&self, exo: &DMatrix<f64>, domains: &[&DomainSpec]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (n, m) = exo.shape();
        if m != self.dim_latent || domains.len() != n {
            return Err(NcmError::invalid(format!(
                "exogenous noise is {n}×{m}, expected {}×{}",
                domains.len(),
                self.dim_latent
            )));
        }
        let q = self.num_invariant();
        let mut z = exo.clone();
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let score = exo.row(i).columns(0, q).dot(&self.label_weights.transpose());
            let label = self.label(score);
            y[i] = label;
            let spec = domains[i];
            for j in q..m {
                z[(i, j)] = spec.spurious_mean_coupling * label + spec.spurious_scale * exo[(i, j)];
            }
        }
        Ok((z, y))
    }

    /// Observations `x = G z` for every row (n × d) plus labels.
    pub fn materialize_rows(
        &self,
        exo: &DMatrix<f64>,
        domains: &[&DomainSpec],
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (z, y) = self.latents(exo, domains)?;
        Ok((z * self.obs_map.transpose(), y))
    }

    pub fn materialize(&self, exo: &DMatrix<f64>, domain_id: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let spec = self.domain(domain_id)?;
        let domains = vec![spec; exo.nrows()];
        self.materialize_rows(exo, &domains)
    }

    pub fn to_document(&self) -> ScmDocument {
        ScmDocument {
            version: SCM_DOC_VERSION,
            dim_latent: self.dim_latent,
            dim_obs: self.dim_obs,
            num_spurious: self.num_spurious,
            seed: self.seed,
            label_scale: self.options.label_scale,
            label_kind: self.options.label_kind,
            domains: self.domain_params.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("scm document serializes")
    }

    pub fn from_toml(text: &str) -> Result<LatentScm> {
        let doc: ScmDocument = toml::from_str(text).map_err(|e| NcmError::Config(e.to_string()))?;
        doc.build()
    }
}

/// Key-value form of an SCM. The matrices are not stored; they are
/// re-sampled from `seed`, which is exact by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmDocument {
    pub version: u32,
    pub dim_latent: usize,
    pub dim_obs: usize,
    pub num_spurious: usize,
    pub seed: u64,
    pub label_scale: f64,
    pub label_kind: LabelKind,
    pub domains: Vec<DomainSpec>,
}

impl ScmDocument {
    pub fn build(self) -> Result<LatentScm> {
        if self.version != SCM_DOC_VERSION {
            return Err(NcmError::Config(format!(
                "unsupported scm document version {} (expected {SCM_DOC_VERSION})",
                self.version
            )));
        }
        sample_scm_with(
            self.dim_latent,
            self.dim_obs,
            self.num_spurious,
            self.domains,
            self.seed,
            ScmOptions {
                label_scale: self.label_scale,
                label_kind: self.label_kind,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub domain_ids: Vec<String>,
    pub exo_noise: Option<DMatrix<f64>>,
}

fn exo_draw(scm: &LatentScm, n: usize, seed: u64) -> DMatrix<f64> {
    gaussian_rows(&mut stream(seed, "data/exo", 0), n, scm.dim_latent)
}

/// `n` rows from one domain. Rows draw `u` from the `(seed, "data/exo")`
/// stream, so two calls with the same seed share `u` row by row whatever
/// the domain.
pub fn generate_dataset(scm: &LatentScm, domain_id: &str, n: usize, seed: u64, keep_exo: bool) -> Result<Dataset> {
    let spec = scm.domain(domain_id)?;
    if n == 0 {
        return Err(NcmError::invalid("n must be at least 1"));
    }
    let exo = exo_draw(scm, n, seed);
    let (inputs, labels) = scm.materialize_rows(&exo, &vec![spec; n])?;
    Ok(Dataset {
        inputs,
        labels,
        domain_ids: vec![spec.domain_id.clone(); n],
        exo_noise: keep_exo.then_some(exo),
    })
}

/// `n` rows from the training mixture; each row's domain is drawn with
/// probability `domain_weight`. Shares the `u` stream with
/// [`generate_dataset`].
pub fn generate_mixture(scm: &LatentScm, n: usize, seed: u64) -> Result<Dataset> {
    generate_mixture_with(scm, n, seed, false)
}

pub fn generate_mixture_with(scm: &LatentScm, n: usize, seed: u64, keep_exo: bool) -> Result<Dataset> {
    if n == 0 {
        return Err(NcmError::invalid("n must be at least 1"));
    }
    let train: Vec<&DomainSpec> = scm.train_domains().collect();
    let weights = WeightedIndex::new(train.iter().map(|d| d.domain_weight))
        .map_err(|e| NcmError::invalid(format!("domain weights: {e}")))?;
    let mut rng = stream(seed, "data/domain", 0);
    let picks: Vec<&DomainSpec> = (0..n).map(|_| train[weights.sample(&mut rng)]).collect();
    let exo = exo_draw(scm, n, seed);
    let (inputs, labels) = scm.materialize_rows(&exo, &picks)?;
    Ok(Dataset {
        inputs,
        labels,
        domain_ids: picks.iter().map(|d| d.domain_id.clone()).collect(),
        exo_noise: keep_exo.then_some(exo),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for id in &self.domain_ids {
            *counts.entry(id.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.nrows();
        if self.labels.len() != n || self.domain_ids.len() != n {
            return Err(NcmError::invalid(format!(
                "dataset has {n} rows, {} labels and {} domain ids",
                self.labels.len(),
                self.domain_ids.len()
            )));
        }
        if let Some(u) = &self.exo_noise {
            if u.nrows() != n {
                return Err(NcmError::invalid("exogenous noise row count differs from inputs"));
            }
        }
        Ok(())
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
            domain_ids: idx.iter().map(|&i| self.domain_ids[i].clone()).collect(),
            exo_noise: self.exo_noise.as_ref().map(|u| u.select_rows(idx)),
        }
    }

    /// CSV with header `domain_id,y,x_0,...,x_{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["domain_id".to_string(), "y".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x_{j}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.domain_ids[i].clone(), self.labels[i].to_string()];
            rec.extend(self.inputs.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "domain_id" || &header[1] != "y" {
            return Err(NcmError::invalid("dataset csv must start with domain_id,y,x_0"));
        }
        let d = header.len() - 2;
        for j in 0..d {
            if header[j + 2] != format!("x_{j}") {
                return Err(NcmError::invalid(format!("unexpected column {:?}", &header[j + 2])));
            }
        }
        let mut ids = Vec::new();
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            ys.push(parse_f64(&rec[1])?);
            for j in 0..d {
                xs.push(parse_f64(&rec[j + 2])?);
            }
        }
        let n = ids.len();
        Ok(Dataset {
            inputs: DMatrix::from_row_slice(n, d, &xs),
            labels: DVector::from_vec(ys),
            domain_ids: ids,
            exo_noise: None,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        Dataset::read_csv(std::fs::File::open(path)?)
    }
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| NcmError::invalid(format!("not a number: {s:?}")))
}
