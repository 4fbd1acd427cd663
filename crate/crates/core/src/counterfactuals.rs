//! Counterfactual pairs: the same exogenous draw solved under two domains.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{NcmError, Result};
use crate::rng::{gaussian_rows, stream};
use crate::scm::{parse_f64, Dataset, LatentScm};

#[derive(Clone, Debug, PartialEq)]
pub struct CfPairSet {
    /// k × d, rows `x_{e_j}`.
    pub left: DMatrix<f64>,
    /// k × d, rows `x_{e_j → e'_j}` (noisy after [`corrupt_pairs`]).
    pub right: DMatrix<f64>,
    pub pair_domains: Vec<(String, String)>,
    pub noise_scale: f64,
    /// d × k, column j is `left_j − right_j`.
    pub delta: DMatrix<f64>,
}

impl CfPairSet {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>, pair_domains: Vec<(String, String)>, noise_scale: f64) -> Result<Self> {
        if left.shape() != right.shape() || left.nrows() != pair_domains.len() {
            return Err(NcmError::invalid("pair sides and domain labels disagree in shape"));
        }
        if left.nrows() == 0 {
            return Err(NcmError::invalid("a pair set needs k >= 1"));
        }
        if let Some((a, _)) = pair_domains.iter().find(|(a, b)| a == b) {
            return Err(NcmError::invalid(format!("pair within a single domain {a:?}")));
        }
        let delta = (&left - &right).transpose();
        Ok(CfPairSet { left, right, pair_domains, noise_scale, delta })
    }

    pub fn k(&self) -> usize {
        self.left.nrows()
    }

    pub fn dim(&self) -> usize {
        self.left.ncols()
    }

    /// CSV with header `pair_id,side,domain_id,x_0,...`; two rows per pair.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["pair_id".to_string(), "side".to_string(), "domain_id".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x_{j}")));
        out.write_record(&header)?;
        for j in 0..self.k() {
            for (side, row, dom) in [
                ("L", self.left.row(j), &self.pair_domains[j].0),
                ("R", self.right.row(j), &self.pair_domains[j].1),
            ] {
                let mut rec = vec![j.to_string(), side.to_string(), dom.clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, meta: &PairsMeta) -> Result<CfPairSet> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 4 || &header[0] != "pair_id" || &header[1] != "side" || &header[2] != "domain_id" {
            return Err(NcmError::invalid("pairs csv must start with pair_id,side,domain_id,x_0"));
        }
        let d = header.len() - 3;
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut doms: Vec<(String, String)> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let pair: usize = rec[0].parse().map_err(|_| NcmError::invalid("bad pair_id"))?;
            let expect_side = if i % 2 == 0 { "L" } else { "R" };
            if pair != i / 2 || &rec[1] != expect_side {
                return Err(NcmError::invalid(format!("row {i}: expected pair {} side {expect_side}", i / 2)));
            }
            let vals = (0..d).map(|j| parse_f64(&rec[j + 3])).collect::<Result<Vec<_>>>()?;
            if i % 2 == 0 {
                left.extend(vals);
                doms.push((rec[2].to_string(), String::new()));
            } else {
                right.extend(vals);
                doms.last_mut().expect("left row precedes right row").1 = rec[2].to_string();
            }
        }
        let k = doms.len();
        if right.len() != left.len() {
            return Err(NcmError::invalid("pairs csv ends with an unmatched left row"));
        }
        if k != meta.k || d != meta.dim {
            return Err(NcmError::invalid(format!(
                "pairs csv is {k}×{d}, metadata says {}×{}",
                meta.k, meta.dim
            )));
        }
        CfPairSet::new(
            DMatrix::from_row_slice(k, d, &left),
            DMatrix::from_row_slice(k, d, &right),
            doms,
            meta.noise_scale,
        )
    }

    pub fn meta(&self) -> PairsMeta {
        PairsMeta {
            version: 1,
            k: self.k(),
            dim: self.dim(),
            noise_scale: self.noise_scale,
        }
    }

    /// Writes `path` and its sidecar metadata ([`sidecar_path`]).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CfPairSet> {
        let meta: PairsMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        CfPairSet::read_csv(std::fs::File::open(path)?, &meta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsMeta {
    pub version: u32,
    pub k: usize,
    pub dim: usize,
    pub noise_scale: f64,
}

/// `pairs.csv` → `pairs.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn generate_cf_pairs(scm: &LatentScm, source_domain: &str, target_domain: &str, k: usize, seed: u64) -> Result<CfPairSet> {
    if source_domain == target_domain {
        return Err(NcmError::invalid(format!("source and target are both {source_domain:?}")));
    }
    if k == 0 {
        return Err(NcmError::invalid("k must be at least 1"));
    }
    scm.domain(source_domain)?;
    scm.domain(target_domain)?;
    let exo = gaussian_rows(&mut stream(seed, "pairs/exo", 0), k, scm.dim_latent);
    let (left, _) = scm.materialize(&exo, source_domain)?;
    let (right, _) = scm.materialize(&exo, target_domain)?;
    let doms = vec![(source_domain.to_string(), target_domain.to_string()); k];
    CfPairSet::new(left, right, doms, 0.0)
}

/// The k × d Gaussian draw that [`corrupt_pairs`] scales by ε.
pub fn noise_draw(k: usize, d: usize, seed: u64) -> DMatrix<f64> {
    gaussian_rows(&mut stream(seed, "pairs/noise", 0), k, d)
}

/// Adds i.i.d. `N(0, ε²)` entries to the right side only.
pub fn corrupt_pairs(pairs: &CfPairSet, noise_scale: f64, seed: u64) -> Result<CfPairSet> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(NcmError::invalid(format!("noise_scale must be >= 0, got {noise_scale}")));
    }
    if noise_scale == 0.0 {
        return Ok(pairs.clone());
    }
    let noise = noise_draw(pairs.k(), pairs.dim(), seed);
    let right = &pairs.right + noise * noise_scale;
    CfPairSet::new(pairs.left.clone(), right, pairs.pair_domains.clone(), noise_scale)
}

/// Cross-domain pairs without counterfactual knowledge: k rows of the
/// largest domain matched to rows of the next largest, same label when
/// the pool allows.
pub fn random_pairing(dataset: &Dataset, k: usize, seed: u64) -> Result<CfPairSet> {
    dataset.validate()?;
    if k == 0 {
        return Err(NcmError::invalid("k must be at least 1"));
    }
    let mut counts: Vec<(String, usize)> = dataset.domain_counts().into_iter().collect();
    if counts.len() < 2 {
        return Err(NcmError::invalid("random pairing needs rows from at least two domains"));
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (dom_a, dom_b) = (counts[0].0.clone(), counts[1].0.clone());
    if counts[1].1 < k {
        return Err(NcmError::invalid(format!(
            "random pairing needs k={k} rows in each of two domains, {dom_b:?} has {}",
            counts[1].1
        )));
    }

    let mut rng = stream(seed, "pairs/random", 0);
    let rows_of = |dom: &str| -> Vec<usize> { (0..dataset.len()).filter(|&i| dataset.domain_ids[i] == dom).collect() };
    let mut a_rows = rows_of(&dom_a);
    a_rows.shuffle(&mut rng);
    a_rows.truncate(k);
    let mut b_rows = rows_of(&dom_b);
    b_rows.shuffle(&mut rng);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = b_rows.into_iter().partition(|&i| dataset.labels[i] >= 0.0);

    let mut partners = Vec::with_capacity(k);
    for &i in &a_rows {
        let (same, other) = if dataset.labels[i] >= 0.0 { (&mut pos, &mut neg) } else { (&mut neg, &mut pos) };
        let j = same.pop().or_else(|| other.pop()).expect("pool holds at least k rows");
        partners.push(j);
    }
    CfPairSet::new(
        dataset.inputs.select_rows(&a_rows),
        dataset.inputs.select_rows(&partners),
        vec![(dom_a, dom_b); k],
        0.0,
    )
}
