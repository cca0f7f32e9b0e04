//! Study protocol for paired-cluster experiments: data ingestion,
//! preprocessing, potential-outcome imputation, exhaustive (or sampled)
//! evaluation of variance estimators over the randomization distribution,
//! and the metric block comparing them to the true variance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bounding::{amgm_bound, verify_bound, weight_by_p};
use crate::design::{draw_rng, enumerate, Assignment, Design, DesignDistribution, DEFAULT_MAX_SUPPORT};
use crate::error::{Error, Result};
use crate::estimators::{Contrast, CovariateBlock, CovariateLayout, EstimatorSpec, LinearEstimator};
use crate::gc::{g_bound, g_matrix, g_over_p, gc_estimate};
use crate::kernel::DesignMoments;
use crate::moments::{evaluate_all, weighted_mean_var};
use crate::oc::{bbar_mean, bias_estimate, oc0, oc1, oc2, spectral_split, OcPrecomputed, GE1_EPS, MAX_TENSOR_KN};
use crate::sandwich::{gs_estimate, o0_mean, ClassicalFit, HcVariant};

/// Unit counts per pair for the control and treatment villages of the
/// reference study.
pub const TABLE1_CONTROL: [usize; 7] = [37, 39, 39, 39, 33, 37, 43];
pub const TABLE1_TREATMENT: [usize; 7] = [33, 37, 36, 37, 38, 20, 29];

const MISSING_TOKENS: [&str; 3] = ["", "NA", "."];

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

/// One row per unit. Arms are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub unit_id: Vec<String>,
    pub cluster_id: Vec<String>,
    pub pair_id: Vec<String>,
    pub arm: Vec<usize>,
    pub outcome: Vec<f64>,
    pub covariates: Vec<Covariate>,
}

/// Dense cluster and pair indices in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    pub cluster_of: Vec<usize>,
    pub pair_of: Vec<usize>,
    pub cluster_labels: Vec<String>,
    pub pair_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_units: usize,
    pub n_clusters: usize,
    pub n_pairs: usize,
    pub units_per_cluster: BTreeMap<String, usize>,
    pub units_per_pair: BTreeMap<String, usize>,
    pub missing: BTreeMap<String, usize>,
}

/// CSV layout: the required columns plus any number of prefixed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub unit: String,
    pub cluster: String,
    pub pair: String,
    pub arm: String,
    pub outcome: String,
    pub covariate_prefix: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            unit: "unit_id".into(),
            cluster: "cluster_id".into(),
            pair: "pair_id".into(),
            arm: "arm".into(),
            outcome: "outcome".into(),
            covariate_prefix: "cov_".into(),
        }
    }
}

impl Dataset {
    pub fn n_units(&self) -> usize {
        self.outcome.len()
    }

    pub fn k_arms(&self) -> usize {
        self.arm.iter().copied().max().unwrap_or(0)
    }

    pub fn covariate(&self, name: &str) -> Result<&Covariate> {
        self.covariates
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::SchemaError(format!("no covariate named {name:?}")))
    }

    /// Checks the cluster/pair structure and returns the dense indices.
    pub fn structure(&self) -> Result<Structure> {
        let n = self.n_units();
        if n == 0 {
            return Err(Error::SchemaError("dataset has no units".into()));
        }
        for (len, what) in [
            (self.unit_id.len(), "unit ids"),
            (self.cluster_id.len(), "cluster ids"),
            (self.pair_id.len(), "pair ids"),
            (self.arm.len(), "arms"),
        ] {
            if len != n {
                return Err(Error::shape(format!("{n} {what}"), len.to_string()));
            }
        }
        for c in &self.covariates {
            if c.values.len() != n {
                return Err(Error::shape(format!("{n} values in {}", c.name), c.values.len().to_string()));
            }
        }
        if let Some(i) = self.arm.iter().position(|&a| a == 0) {
            return Err(Error::SchemaError(format!("arm at row {i} must be >= 1")));
        }

        let mut cluster_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut pair_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut cluster_labels = Vec::new();
        let mut pair_labels = Vec::new();
        let mut cluster_pair: Vec<usize> = Vec::new();
        let mut cluster_arm: Vec<usize> = Vec::new();
        let mut cluster_of = Vec::with_capacity(n);
        for i in 0..n {
            let next_pair = pair_index.len();
            let p = *pair_index.entry(self.pair_id[i].as_str()).or_insert_with(|| {
                pair_labels.push(self.pair_id[i].clone());
                next_pair
            });
            let next_cluster = cluster_index.len();
            let c = *cluster_index.entry(self.cluster_id[i].as_str()).or_insert_with(|| {
                cluster_labels.push(self.cluster_id[i].clone());
                next_cluster
            });
            if c == cluster_pair.len() {
                cluster_pair.push(p);
                cluster_arm.push(self.arm[i]);
            } else {
                if cluster_pair[c] != p {
                    return Err(Error::StructureError(format!(
                        "cluster {:?} appears in pairs {:?} and {:?}",
                        self.cluster_id[i], pair_labels[cluster_pair[c]], self.pair_id[i]
                    )));
                }
                if cluster_arm[c] != self.arm[i] {
                    return Err(Error::StructureError(format!(
                        "cluster {:?} has units in arms {} and {}",
                        self.cluster_id[i], cluster_arm[c], self.arm[i]
                    )));
                }
            }
            cluster_of.push(c);
        }
        for (p, label) in pair_labels.iter().enumerate() {
            let members: Vec<usize> = (0..cluster_pair.len()).filter(|&c| cluster_pair[c] == p).collect();
            if members.len() != 2 {
                return Err(Error::StructureError(format!(
                    "pair {label:?} has {} clusters, expected 2",
                    members.len()
                )));
            }
            if cluster_arm[members[0]] == cluster_arm[members[1]] {
                return Err(Error::StructureError(format!("both clusters of pair {label:?} share an arm")));
            }
        }
        Ok(Structure {
            cluster_of,
            pair_of: cluster_pair,
            cluster_labels,
            pair_labels,
        })
    }

    pub fn validate(&self) -> Result<ValidationReport> {
        let s = self.structure()?;
        let mut units_per_cluster = BTreeMap::new();
        let mut units_per_pair = BTreeMap::new();
        for &c in &s.cluster_of {
            *units_per_cluster.entry(s.cluster_labels[c].clone()).or_insert(0) += 1;
            *units_per_pair.entry(s.pair_labels[s.pair_of[c]].clone()).or_insert(0) += 1;
        }
        let missing = self
            .covariates
            .iter()
            .map(|c| (c.name.clone(), c.values.iter().filter(|v| v.is_none()).count()))
            .collect();
        Ok(ValidationReport {
            n_units: self.n_units(),
            n_clusters: s.cluster_labels.len(),
            n_pairs: s.pair_labels.len(),
            units_per_cluster,
            units_per_pair,
            missing,
        })
    }

    /// The paired-cluster design implied by the cluster/pair structure.
    pub fn design(&self) -> Result<Design> {
        let s = self.structure()?;
        Design::paired_cluster(s.cluster_of, s.pair_of)
    }

    /// The observed assignment.
    pub fn assignment(&self) -> Assignment {
        Assignment::new(self.arm.clone())
    }

    /// Keeps the first `pairs` pairs and the first `units_per_cluster` units
    /// of each of their clusters.
    pub fn reduce(&self, pairs: usize, units_per_cluster: usize) -> Result<Dataset> {
        let s = self.structure()?;
        if pairs == 0 || units_per_cluster == 0 || pairs > s.pair_labels.len() {
            return Err(Error::Config(format!(
                "cannot keep {pairs} of {} pairs with {units_per_cluster} units per cluster",
                s.pair_labels.len()
            )));
        }
        let mut taken = vec![0usize; s.cluster_labels.len()];
        let keep: Vec<usize> = (0..self.n_units())
            .filter(|&i| {
                let c = s.cluster_of[i];
                if s.pair_of[c] < pairs && taken[c] < units_per_cluster {
                    taken[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        let pick = |v: &[String]| keep.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Ok(Dataset {
            unit_id: pick(&self.unit_id),
            cluster_id: pick(&self.cluster_id),
            pair_id: pick(&self.pair_id),
            arm: keep.iter().map(|&i| self.arm[i]).collect(),
            outcome: keep.iter().map(|&i| self.outcome[i]).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| Covariate {
                    name: c.name.clone(),
                    values: keep.iter().map(|&i| c.values[i]).collect(),
                })
                .collect(),
        })
    }

    /// Writes the dataset with the default schema; missing covariates are empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let schema = Schema::default();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            schema.unit.clone(),
            schema.cluster.clone(),
            schema.pair.clone(),
            schema.arm.clone(),
            schema.outcome.clone(),
        ];
        header.extend(self.covariates.iter().map(|c| format!("{}{}", schema.covariate_prefix, c.name)));
        w.write_record(&header)?;
        for i in 0..self.n_units() {
            let mut row = vec![
                self.unit_id[i].clone(),
                self.cluster_id[i].clone(),
                self.pair_id[i].clone(),
                self.arm[i].to_string(),
                format!("{:?}", self.outcome[i]),
            ];
            row.extend(self.covariates.iter().map(|c| c.values[i].map(|v| format!("{v:?}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<(Dataset, ValidationReport)> {
    ingest_reader(std::fs::File::open(path)?, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &Schema) -> Result<(Dataset, ValidationReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(Error::SchemaError("file has no header".into()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaError(format!("missing required column {name:?}")))
    };
    let (ui, ci, pi, ai, oi) = (
        column(&schema.unit)?,
        column(&schema.cluster)?,
        column(&schema.pair)?,
        column(&schema.arm)?,
        column(&schema.outcome)?,
    );
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(j, h)| h.strip_prefix(schema.covariate_prefix.as_str()).map(|name| (j, name.to_string())))
        .collect();

    let mut ds = Dataset {
        unit_id: Vec::new(),
        cluster_id: Vec::new(),
        pair_id: Vec::new(),
        arm: Vec::new(),
        outcome: Vec::new(),
        covariates: cov_cols
            .iter()
            .map(|(_, name)| Covariate {
                name: name.clone(),
                values: Vec::new(),
            })
            .collect(),
    };
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or("");
        let arm: usize = field(ai)
            .parse()
            .map_err(|_| Error::SchemaError(format!("row {row}: arm {:?} is not a positive integer", field(ai))))?;
        let outcome = field(oi);
        if MISSING_TOKENS.contains(&outcome) {
            return Err(Error::SchemaError(format!("row {row}: outcome is missing")));
        }
        let outcome: f64 = outcome
            .parse()
            .map_err(|_| Error::SchemaError(format!("row {row}: outcome {outcome:?} is not numeric")))?;
        ds.unit_id.push(field(ui).to_string());
        ds.cluster_id.push(field(ci).to_string());
        ds.pair_id.push(field(pi).to_string());
        ds.arm.push(arm);
        ds.outcome.push(outcome);
        for ((j, name), cov) in cov_cols.iter().zip(ds.covariates.iter_mut()) {
            let raw = field(*j);
            let value = if MISSING_TOKENS.contains(&raw) {
                None
            } else {
                Some(
                    raw.parse()
                        .map_err(|_| Error::SchemaError(format!("row {row}: covariate {name} = {raw:?} is not numeric")))?,
                )
            };
            cov.values.push(value);
        }
    }
    if ds.n_units() == 0 {
        return Err(Error::SchemaError("file has no data rows".into()));
    }
    let report = ds.validate()?;
    Ok((ds, report))
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Replaces missing entries of `column` by the mean of its observed entries.
/// Returns the new dataset and the number of replacements.
pub fn mean_impute(ds: &Dataset, column: &str) -> Result<(Dataset, usize)> {
    let values = &ds.covariate(column)?.values;
    let observed: Vec<f64> = values.iter().flatten().copied().collect();
    if observed.is_empty() {
        return Err(Error::AllMissing(column.to_string()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let replaced = values.len() - observed.len();
    let mut out = ds.clone();
    for cov in out.covariates.iter_mut().filter(|c| c.name == column) {
        cov.values.iter_mut().for_each(|v| *v = Some(v.unwrap_or(mean)));
    }
    Ok((out, replaced))
}

/// Subtracts the scale midpoint `(min + max) / 2` from every outcome.
pub fn center_midpoint(ds: &Dataset, scale_min: f64, scale_max: f64) -> Result<Dataset> {
    if scale_min.is_nan() || scale_max.is_nan() || scale_min >= scale_max {
        return Err(Error::Config(format!("scale [{scale_min}, {scale_max}] is empty")));
    }
    if let Some((row, &value)) = ds
        .outcome
        .iter()
        .enumerate()
        .find(|(_, &v)| !(scale_min..=scale_max).contains(&v))
    {
        return Err(Error::OutOfScale {
            row,
            value,
            min: scale_min,
            max: scale_max,
        });
    }
    let mid = (scale_min + scale_max) / 2.0;
    let mut out = ds.clone();
    out.outcome.iter_mut().for_each(|v| *v -= mid);
    Ok(out)
}

/// Potential outcomes under the sharp null: every arm's block repeats the
/// observed outcomes.
pub fn impute_sharp_null(ds: &Dataset, k: usize) -> DVector<f64> {
    let n = ds.n_units();
    DVector::from_fn(k * n, |i, _| ds.outcome[i % n])
}

/// Sharp-null potential outcomes with `effects[j]` added to the block of arm
/// `j + 1`; a constant effect moves the estimand but not the variance.
pub fn impute_constant_effects(ds: &Dataset, effects: &[f64]) -> Result<DVector<f64>> {
    let k = effects.len();
    if ds.k_arms() > k {
        return Err(Error::shape(format!("effects for {} arms", ds.k_arms()), k.to_string()));
    }
    let n = ds.n_units();
    Ok(DVector::from_fn(k * n, |i, _| ds.outcome[i % n] + effects[i / n]))
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Generator for datasets with the reference cluster sizes: outcomes are the
/// average of integer survey items on `[scale_min, scale_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub control_sizes: Vec<usize>,
    pub treatment_sizes: Vec<usize>,
    pub items: usize,
    pub scale_min: i32,
    pub scale_max: i32,
    pub cluster_sd: f64,
    pub unit_sd: f64,
    pub item_sd: f64,
    pub treatment_effect: f64,
    /// Number of units with a missing `age`.
    pub missing_age: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 1,
            control_sizes: TABLE1_CONTROL.to_vec(),
            treatment_sizes: TABLE1_TREATMENT.to_vec(),
            items: 4,
            scale_min: 1,
            scale_max: 4,
            cluster_sd: 0.3,
            unit_sd: 0.6,
            item_sd: 0.7,
            treatment_effect: 0.0,
            missing_age: 5,
        }
    }
}

pub fn synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.control_sizes.len() != cfg.treatment_sizes.len() || cfg.control_sizes.is_empty() {
        return Err(Error::Config("need one control and one treatment size per pair".into()));
    }
    if cfg.items == 0 || cfg.scale_min >= cfg.scale_max {
        return Err(Error::Config("need at least one item on a non-empty scale".into()));
    }
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::Config(format!("standard deviation {sd}: {e}")));
    let (cluster_eff, unit_eff, item_noise) = (normal(cfg.cluster_sd)?, normal(cfg.unit_sd)?, normal(cfg.item_sd)?);
    let mut rng = draw_rng(cfg.seed, 0);
    let centre = (cfg.scale_min + cfg.scale_max) as f64 / 2.0;

    let mut ds = Dataset {
        unit_id: Vec::new(),
        cluster_id: Vec::new(),
        pair_id: Vec::new(),
        arm: Vec::new(),
        outcome: Vec::new(),
        covariates: ["displaced", "female", "age", "radio"]
            .iter()
            .map(|name| Covariate {
                name: name.to_string(),
                values: Vec::new(),
            })
            .collect(),
    };
    for (pair, sizes) in cfg.control_sizes.iter().zip(&cfg.treatment_sizes).enumerate() {
        for (arm, size) in [1usize, 2].iter().zip([*sizes.0, *sizes.1]) {
            let village = format!("v{:02}", 2 * pair + arm - 1);
            let village_effect = cluster_eff.sample(&mut rng);
            for _ in 0..size {
                let displaced = rng.random_bool(0.25) as u8 as f64;
                let female = rng.random_bool(0.5) as u8 as f64;
                let age = rng.random_range(18..=75) as f64;
                let radio = rng.random_bool(0.6) as u8 as f64;
                let latent = centre
                    + village_effect
                    + unit_eff.sample(&mut rng)
                    + 0.4 * radio
                    - 0.3 * displaced
                    + 0.01 * (age - 45.0)
                    + if *arm == 2 { cfg.treatment_effect } else { 0.0 };
                let total: f64 = (0..cfg.items)
                    .map(|_| {
                        (latent + item_noise.sample(&mut rng))
                            .round()
                            .clamp(cfg.scale_min as f64, cfg.scale_max as f64)
                    })
                    .sum();
                ds.unit_id.push(format!("u{:03}", ds.unit_id.len() + 1));
                ds.cluster_id.push(village.clone());
                ds.pair_id.push(format!("p{}", pair + 1));
                ds.arm.push(*arm);
                ds.outcome.push(total / cfg.items as f64);
                for (cov, value) in ds.covariates.iter_mut().zip([displaced, female, age, radio]) {
                    cov.values.push(Some(value));
                }
            }
        }
    }
    let n = ds.n_units();
    if cfg.missing_age > n {
        return Err(Error::Config(format!("cannot blank {} of {n} ages", cfg.missing_age)));
    }
    let mut blank = sample_indices(&mut rng, n, cfg.missing_age).into_vec();
    blank.sort_unstable();
    for i in blank {
        ds.covariates[2].values[i] = None;
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Study configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorName {
    GS,
    OC0,
    OC1,
    OC2,
    GC,
    HC0,
    HC1,
    HC2,
    CR0,
    CR1,
    CR2,
}

impl EstimatorName {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorName::GS => "GS",
            EstimatorName::OC0 => "OC0",
            EstimatorName::OC1 => "OC1",
            EstimatorName::OC2 => "OC2",
            EstimatorName::GC => "GC",
            EstimatorName::HC0 => "HC0",
            EstimatorName::HC1 => "HC1",
            EstimatorName::HC2 => "HC2",
            EstimatorName::CR0 => "CR0",
            EstimatorName::CR1 => "CR1",
            EstimatorName::CR2 => "CR2",
        }
    }

    fn classical(self) -> Option<HcVariant> {
        match self {
            EstimatorName::HC0 => Some(HcVariant::HC0),
            EstimatorName::HC1 => Some(HcVariant::HC1),
            EstimatorName::HC2 => Some(HcVariant::HC2),
            EstimatorName::CR0 => Some(HcVariant::CR0),
            EstimatorName::CR1 => Some(HcVariant::CR1),
            EstimatorName::CR2 => Some(HcVariant::CR2),
            _ => None,
        }
    }

    fn is_design_based(self) -> bool {
        self.classical().is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticConfig),
}

/// Subdesign on which OC2 is evaluated when the full design is too large for
/// the fourth-moment tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Oc2Reduction {
    pub pairs: usize,
    pub units_per_cluster: usize,
    pub with_covariates: bool,
}

impl Default for Oc2Reduction {
    fn default() -> Self {
        Oc2Reduction {
            pairs: 3,
            units_per_cluster: 2,
            with_covariates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub data: DataSource,
    /// Overrides the paired-cluster design implied by the data.
    #[serde(default)]
    pub design: Option<Design>,
    #[serde(alias = "estimator_list")]
    pub estimators: Vec<EstimatorName>,
    /// Arm weights of the target contrast.
    #[serde(default = "default_contrast")]
    pub contrast: Vec<f64>,
    /// Pooled covariates adjusted for by OLS.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Covariates to mean-impute before use.
    #[serde(default)]
    pub impute: Vec<String>,
    /// Outcome scale `[min, max]`; outcomes are centred at its midpoint.
    #[serde(default)]
    pub scale: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
    /// Monte Carlo draws; exact enumeration when absent.
    #[serde(default)]
    pub mc_draws: Option<usize>,
    /// Constant effect of arm 2 over arm 1 used to impute potential outcomes.
    #[serde(default)]
    pub effect: f64,
    /// Estimators against which rMSE and CV ratios are reported.
    #[serde(default = "default_references")]
    pub references: Vec<EstimatorName>,
    #[serde(default)]
    pub oc2: Oc2Reduction,
    #[serde(default = "default_max_support")]
    pub max_support: usize,
}

fn default_contrast() -> Vec<f64> {
    vec![-1.0, 1.0]
}

fn default_references() -> Vec<EstimatorName> {
    vec![EstimatorName::CR2, EstimatorName::GS]
}

fn default_max_support() -> usize {
    DEFAULT_MAX_SUPPORT
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads the configured data; relative CSV paths resolve against `base`.
    pub fn load_dataset(&self, base: Option<&Path>) -> Result<Dataset> {
        match &self.data {
            DataSource::Csv(path) => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Ok(ingest_csv(&path, &Schema::default())?.0)
            }
            DataSource::Synthetic(cfg) => synthetic_dataset(cfg),
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: String,
    /// `E[V̂]`.
    pub mean_estimate: f64,
    /// `E[V̂/V]`.
    pub mean: f64,
    /// `SE[V̂/V]`.
    pub se: f64,
    /// `Bias[V̂/V] = E[V̂/V] - 1`.
    pub bias: f64,
    /// `rMSE[V̂/V] = sqrt(Bias² + SE²)`.
    pub rmse: f64,
    /// `CV[V̂] = SE[V̂] / E[V̂]`.
    pub cv: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub estimator: String,
    pub reference: String,
    pub rmse_ratio: f64,
    pub cv_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub label: String,
    /// True variance of the point estimator.
    pub variance: f64,
    pub rows: Vec<MetricRow>,
    pub ratios: Vec<RatioRow>,
}

impl MetricBlock {
    pub fn row(&self, estimator: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Builds the block from weighted evaluations of each estimator.
    pub fn from_values(
        label: &str,
        variance: f64,
        values: &[(EstimatorName, Vec<(f64, f64)>)],
        references: &[EstimatorName],
    ) -> Result<Self> {
        if variance.is_nan() || variance <= 0.0 {
            return Err(Error::Config(format!(
                "true variance is {variance}; variance ratios are undefined"
            )));
        }
        let rows: Vec<MetricRow> = values
            .iter()
            .map(|(name, vals)| {
                let (mean_estimate, var_estimate) = weighted_mean_var(vals);
                let se_estimate = var_estimate.sqrt();
                let mean = mean_estimate / variance;
                let se = se_estimate / variance;
                let bias = mean - 1.0;
                MetricRow {
                    estimator: name.name().to_string(),
                    mean_estimate,
                    mean,
                    se,
                    bias,
                    rmse: (bias * bias + se * se).sqrt(),
                    cv: se_estimate / mean_estimate,
                    evaluations: vals.len(),
                }
            })
            .collect();
        let mut ratios = Vec::new();
        for reference in references {
            let Some(base) = rows.iter().find(|r| r.estimator == reference.name()) else {
                continue;
            };
            for row in &rows {
                ratios.push(RatioRow {
                    estimator: row.estimator.clone(),
                    reference: base.estimator.clone(),
                    rmse_ratio: row.rmse / base.rmse,
                    cv_ratio: row.cv / base.cv,
                });
            }
        }
        Ok(MetricBlock {
            label: label.to_string(),
            variance,
            rows,
            ratios,
        })
    }
}

// ---------------------------------------------------------------------------
// Study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub n_units: usize,
    pub kn: usize,
    pub assignments: usize,
    pub exact: bool,
    pub mean_point_estimate: f64,
    /// Variance of the pair fixed-effects estimator targeted by CR rows.
    pub fixed_effects_variance: Option<f64>,
    pub d_bound_min_eigenvalue: Option<f64>,
    pub g_bound_min_eigenvalue: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Largest `|second bias term|` over assignments.
    pub max_second_term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBlock {
    pub metrics: MetricBlock,
    pub diagnostics: BlockDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub seed: u64,
    pub imputed: BTreeMap<String, usize>,
    pub blocks: Vec<StudyBlock>,
}

/// Imputes and centres as configured.
pub fn prepare(ds: &Dataset, cfg: &StudyConfig) -> Result<(Dataset, BTreeMap<String, usize>)> {
    let mut out = ds.clone();
    let mut imputed = BTreeMap::new();
    for column in &cfg.impute {
        let (next, count) = mean_impute(&out, column)?;
        out = next;
        imputed.insert(column.clone(), count);
    }
    if let Some([lo, hi]) = cfg.scale {
        out = center_midpoint(&out, lo, hi)?;
    }
    Ok((out, imputed))
}

fn covariate_matrix(ds: &Dataset, names: &[String]) -> Result<Option<DMatrix<f64>>> {
    if names.is_empty() {
        return Ok(None);
    }
    let n = ds.n_units();
    let mut x = DMatrix::zeros(n, names.len());
    for (j, name) in names.iter().enumerate() {
        for (i, v) in ds.covariate(name)?.values.iter().enumerate() {
            x[(i, j)] = v.ok_or_else(|| {
                Error::SchemaError(format!("covariate {name} is missing at row {i}; list it under impute"))
            })?;
        }
    }
    Ok(Some(x))
}

/// Regressors on observed data: arm indicators, optional pair dummies
/// (all pairs but the first), then covariates.
pub fn observed_design(
    assignment: &Assignment,
    k: usize,
    pair_of_unit: Option<(&[usize], usize)>,
    cov: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let n = assignment.n_units();
    let n_fe = pair_of_unit.map_or(0, |(_, pairs)| pairs - 1);
    let n_cov = cov.map_or(0, |c| c.ncols());
    let mut x = DMatrix::zeros(n, k + n_fe + n_cov);
    for i in 0..n {
        x[(i, assignment.arm_of[i] - 1)] = 1.0;
        if let Some((pairs, _)) = pair_of_unit {
            if pairs[i] > 0 {
                x[(i, k + pairs[i] - 1)] = 1.0;
            }
        }
        if let Some(c) = cov {
            for j in 0..n_cov {
                x[(i, k + n_fe + j)] = c[(i, j)];
            }
        }
    }
    x
}

struct AssignmentValues {
    point: f64,
    fixed_effects_point: Option<f64>,
    values: Vec<f64>,
    second_term: Option<f64>,
}

fn evaluate_block(
    ds: &Dataset,
    design: Design,
    cfg: &StudyConfig,
    names: &[EstimatorName],
    covariates: &[String],
    label: &str,
) -> Result<StudyBlock> {
    let k = design.k_arms;
    let n = design.n_units;
    if ds.n_units() != n {
        return Err(Error::shape(format!("{n} units in the data"), ds.n_units().to_string()));
    }
    if cfg.contrast.len() != k {
        return Err(Error::shape(format!("contrast over {k} arms"), cfg.contrast.len().to_string()));
    }
    let s = ds.structure()?;
    let dist = match cfg.mc_draws {
        Some(draws) => DesignDistribution::sampled(design, cfg.seed, draws)?,
        None => enumerate(&design, cfg.max_support)?,
    };
    let moments = DesignMoments::compute(&dist)?;
    let y = if cfg.effect == 0.0 {
        impute_sharp_null(ds, k)
    } else {
        if k != 2 {
            return Err(Error::Config("a constant effect needs exactly two arms".into()));
        }
        impute_constant_effects(ds, &[0.0, cfg.effect])?
    };
    let cov = covariate_matrix(ds, covariates)?;
    let block = cov.as_ref().map(|x| CovariateBlock::new(CovariateLayout::Pooled, x));
    let n_cov = cov.as_ref().map_or(0, |c| c.ncols());
    let est = LinearEstimator::new(
        &EstimatorSpec::ols(block),
        &Contrast::for_arms(&cfg.contrast, n_cov),
        &moments.pi,
        n,
    )?;

    let wants = |f: fn(EstimatorName) -> bool| names.iter().any(|&e| f(e));
    let need_dp = wants(|e| e.is_design_based() && e != EstimatorName::GC);
    let need_o = wants(|e| matches!(e, EstimatorName::OC0 | EstimatorName::OC1 | EstimatorName::OC2));
    let need_tensor = names.contains(&EstimatorName::OC2);
    let need_g = names.contains(&EstimatorName::GC);
    let need_fe = wants(|e| matches!(e, EstimatorName::CR0 | EstimatorName::CR1 | EstimatorName::CR2));

    let mut diagnostics = BlockDiagnostics {
        n_units: n,
        kn: moments.kn(),
        assignments: dist.len(),
        exact: dist.is_exact(),
        mean_point_estimate: 0.0,
        fixed_effects_variance: None,
        d_bound_min_eigenvalue: None,
        g_bound_min_eigenvalue: None,
        lambda_min: None,
        lambda_max: None,
        max_second_term: None,
    };

    let dp = if need_dp {
        let bound = amgm_bound(&moments.d, &moments.p)?;
        diagnostics.d_bound_min_eigenvalue = Some(verify_bound(&bound.d_tilde, &moments.d.d)?.min_eigenvalue);
        Some(weight_by_p(&bound.d_tilde, &moments.p)?)
    } else {
        None
    };
    let pre = if need_o {
        let o0 = o0_mean(&dist, &est, dp.as_ref().expect("bound computed"))?.mean;
        if need_tensor {
            if moments.kn() > MAX_TENSOR_KN {
                return Err(Error::TensorTooLarge {
                    kn: moments.kn(),
                    max: MAX_TENSOR_KN,
                });
            }
            let split = spectral_split(&bbar_mean(&dist, &est, &moments.p.p)?, GE1_EPS)?;
            diagnostics.lambda_min = Some(split.diagnostics.min_lambda);
            diagnostics.lambda_max = Some(split.diagnostics.max_lambda);
            Some(OcPrecomputed::new(&o0, &moments.p.p, &split)?)
        } else {
            Some(OcPrecomputed::without_tensor(&o0, &moments.p.p)?)
        }
    } else {
        None
    };
    let gp = if need_g {
        let g = g_matrix(&dist, &est)?.g;
        let bound = g_bound(&g, &moments.p)?;
        diagnostics.g_bound_min_eigenvalue = Some(bound.report.min_eigenvalue);
        Some(g_over_p(&bound, &moments.p)?)
    } else {
        None
    };

    let pair_of_unit: Vec<usize> = s.cluster_of.iter().map(|&c| s.pair_of[c]).collect();
    let n_pairs = s.pair_labels.len();
    let y_obs = |a: &Assignment| DVector::from_fn(n, |i, _| y[(a.arm_of[i] - 1) * n + i]);
    let c_obs = |width: usize| {
        let mut c = DVector::zeros(width);
        c.rows_mut(0, k).copy_from_slice(&cfg.contrast);
        c
    };

    let evaluated = evaluate_all(&dist, |_, a| {
        let realized = est.realize(a)?;
        let point = est.point_estimate(&realized, &y)?;
        let yo = y_obs(a);
        let plain = if wants(|e| matches!(e, EstimatorName::HC0 | EstimatorName::HC1 | EstimatorName::HC2)) {
            Some(ClassicalFit::new(observed_design(a, k, None, cov.as_ref()), &yo, None)?)
        } else {
            None
        };
        let fe = if need_fe {
            let x = observed_design(a, k, Some((&pair_of_unit, n_pairs)), cov.as_ref());
            Some(ClassicalFit::new(x, &yo, Some(s.cluster_of.clone()))?)
        } else {
            None
        };
        let mut second_term = None;
        let values = names
            .iter()
            .map(|&name| match name {
                EstimatorName::GS => gs_estimate(&est, &realized, &y, dp.as_ref().expect("bound computed")),
                EstimatorName::OC0 => oc0(&realized.r, &y, &pre.as_ref().expect("o computed").o_over_p),
                EstimatorName::OC1 => oc1(&realized, &y, &pre.as_ref().expect("o computed").o_over_p),
                EstimatorName::OC2 => {
                    let pre = pre.as_ref().expect("o computed");
                    second_term = Some(bias_estimate(&realized, &y, pre)?.second.abs());
                    Ok(oc2(&realized, &y, pre)?.value)
                }
                EstimatorName::GC => gc_estimate(&realized.r, &y, gp.as_ref().expect("g computed")),
                other => {
                    let variant = other.classical().expect("classical estimator");
                    let fit = if variant.is_clustered() { fe.as_ref() } else { plain.as_ref() };
                    let fit = fit.expect("fit computed");
                    let width = fit.meta().rank;
                    fit.variance(&c_obs(width), variant)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let fixed_effects_point = fe.as_ref().map(|fit| fit.coefficients_dot(&c_obs(fit.meta().rank), &yo));
        Ok(AssignmentValues {
            point,
            fixed_effects_point,
            values,
            second_term,
        })
    })?;

    let points: Vec<(f64, f64)> = evaluated.iter().map(|(v, w)| (v.point, *w)).collect();
    let (mean_point, variance) = weighted_mean_var(&points);
    diagnostics.mean_point_estimate = mean_point;
    if need_fe {
        let fe: Vec<(f64, f64)> = evaluated
            .iter()
            .map(|(v, w)| (v.fixed_effects_point.expect("fixed effects fitted"), *w))
            .collect();
        diagnostics.fixed_effects_variance = Some(weighted_mean_var(&fe).1);
    }
    if need_tensor {
        diagnostics.max_second_term = evaluated
            .iter()
            .filter_map(|(v, _)| v.second_term)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
    }
    let values: Vec<(EstimatorName, Vec<(f64, f64)>)> = names
        .iter()
        .enumerate()
        .map(|(j, &name)| (name, evaluated.iter().map(|(v, w)| (v.values[j], *w)).collect()))
        .collect();
    let metrics = MetricBlock::from_values(label, variance, &values, &cfg.references)?;
    Ok(StudyBlock { metrics, diagnostics })
}

/// Runs the configured estimators over the randomization distribution.
///
/// OC2 needs the fourth-moment tensor; when the full design is too large it
/// is evaluated (alongside the other design-based estimators) on the reduced
/// design described by `cfg.oc2`, reported as a second block.
pub fn run_study(ds: &Dataset, cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    let mut names = cfg.estimators.clone();
    names.sort_unstable();
    names.dedup();
    let (prepared, imputed) = prepare(ds, cfg)?;
    let design = match &cfg.design {
        Some(d) => d.clone(),
        None => prepared.design()?,
    };
    let full_kn = design.kn();
    let oc2_inline = full_kn <= MAX_TENSOR_KN;
    let main_names: Vec<EstimatorName> = names
        .iter()
        .copied()
        .filter(|&e| e != EstimatorName::OC2 || oc2_inline)
        .collect();
    let mut blocks = Vec::new();
    if !main_names.is_empty() {
        blocks.push(evaluate_block(&prepared, design, cfg, &main_names, &cfg.covariates, "full")?);
    }
    if names.contains(&EstimatorName::OC2) && !oc2_inline {
        let reduced = prepared.reduce(cfg.oc2.pairs, cfg.oc2.units_per_cluster)?;
        let reduced_names: Vec<EstimatorName> = names.iter().copied().filter(|e| e.is_design_based()).collect();
        let covariates: &[String] = if cfg.oc2.with_covariates { &cfg.covariates } else { &[] };
        let design = reduced.design()?;
        blocks.push(evaluate_block(&reduced, design, cfg, &reduced_names, covariates, "reduced")?);
    }
    Ok(StudyReport {
        seed: cfg.seed,
        imputed,
        blocks,
    })
}

// ---------------------------------------------------------------------------
// Output

fn reference_names(report: &StudyReport) -> Vec<String> {
    let mut refs: Vec<String> = Vec::new();
    for b in &report.blocks {
        for r in &b.metrics.ratios {
            if !refs.contains(&r.reference) {
                refs.push(r.reference.clone());
            }
        }
    }
    refs
}

fn ratio_of<'a>(block: &'a MetricBlock, estimator: &str, reference: &str) -> Option<&'a RatioRow> {
    block
        .ratios
        .iter()
        .find(|r| r.estimator == estimator && r.reference == reference)
}

/// One CSV row per (block, estimator), with ratio columns per reference.
pub fn report_csv(report: &StudyReport) -> Result<String> {
    let refs = reference_names(report);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["block", "estimator", "E", "SE", "Bias", "rMSE", "CV", "E_estimate", "V", "evaluations"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for r in &refs {
        header.push(format!("rMSE_ratio_{r}"));
        header.push(format!("CV_ratio_{r}"));
    }
    w.write_record(&header)?;
    for b in &report.blocks {
        let m = &b.metrics;
        for row in &m.rows {
            let mut rec = vec![
                m.label.clone(),
                row.estimator.clone(),
                row.mean.to_string(),
                row.se.to_string(),
                row.bias.to_string(),
                row.rmse.to_string(),
                row.cv.to_string(),
                row.mean_estimate.to_string(),
                m.variance.to_string(),
                row.evaluations.to_string(),
            ];
            for r in &refs {
                match ratio_of(m, &row.estimator, r) {
                    Some(x) => {
                        rec.push(x.rmse_ratio.to_string());
                        rec.push(x.cv_ratio.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned plain-text table, three decimals.
pub fn report_table(report: &StudyReport) -> String {
    let refs = reference_names(report);
    let mut out = String::new();
    for b in &report.blocks {
        let m = &b.metrics;
        let d = &b.diagnostics;
        let _ = writeln!(
            out,
            "[{}] n = {}, assignments = {}{}, V = {:.6e}",
            m.label,
            d.n_units,
            d.assignments,
            if d.exact { "" } else { " (sampled)" },
            m.variance
        );
        let mut header = format!("{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}", "", "E", "SE", "Bias", "rMSE", "CV");
        for r in &refs {
            let _ = write!(header, "{:>14}{:>14}", format!("rMSE/{r}"), format!("CV/{r}"));
        }
        let _ = writeln!(out, "{header}");
        for row in &m.rows {
            let _ = write!(
                out,
                "{:<10}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}",
                row.estimator, row.mean, row.se, row.bias, row.rmse, row.cv
            );
            for r in &refs {
                match ratio_of(m, &row.estimator, r) {
                    Some(x) => {
                        let _ = write!(out, "{:>14.3}{:>14.3}", x.rmse_ratio, x.cv_ratio);
                    }
                    None => {
                        let _ = write!(out, "{:>14}{:>14}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &StudyReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let cfg = SyntheticConfig {
            control_sizes: vec![3, 2],
            treatment_sizes: vec![2, 3],
            missing_age: 1,
            ..Default::default()
        };
        synthetic_dataset(&cfg).unwrap()
    }

    #[test]
    fn synthetic_matches_requested_sizes() {
        let ds = synthetic_dataset(&SyntheticConfig::default()).unwrap();
        let report = ds.validate().unwrap();
        assert_eq!(report.n_units, 497);
        assert_eq!(report.n_clusters, 14);
        assert_eq!(report.n_pairs, 7);
        assert_eq!(report.missing["age"], 5);
        assert_eq!(report.units_per_cluster["v00"], 37);
        assert_eq!(report.units_per_cluster["v01"], 33);
        assert!(ds.outcome.iter().all(|&v| (1.0..=4.0).contains(&v)));
        assert_eq!(synthetic_dataset(&SyntheticConfig::default()).unwrap(), ds);
    }

    #[test]
    fn imputation_and_centering() {
        let mut ds = small();
        ds.covariates[2].values = vec![Some(1.0), None, Some(3.0), Some(2.0), Some(2.0), None, Some(2.0), Some(2.0), Some(2.0), Some(2.0)];
        let (imputed, count) = mean_impute(&ds, "age").unwrap();
        assert_eq!(count, 2);
        assert_eq!(imputed.covariates[2].values[1], Some(2.0));
        let (same, zero) = mean_impute(&imputed, "age").unwrap();
        assert_eq!(zero, 0);
        assert_eq!(same, imputed);
        ds.covariates[0].values = vec![None; 10];
        assert!(matches!(mean_impute(&ds, "displaced"), Err(Error::AllMissing(_))));

        let mut ds = small();
        ds.outcome[0] = 1.0;
        let c = center_midpoint(&ds, 1.0, 4.0).unwrap();
        assert_eq!(c.outcome[0], -1.5);
        ds.outcome[1] = 4.5;
        assert!(matches!(center_midpoint(&ds, 1.0, 4.0), Err(Error::OutOfScale { row: 1, .. })));
    }

    #[test]
    fn potential_outcomes() {
        let ds = small();
        let y = impute_sharp_null(&ds, 2);
        assert_eq!(y.len(), 20);
        assert_eq!(y[3], y[13]);
        let y = impute_constant_effects(&ds, &[0.0, 0.5]).unwrap();
        for i in 0..10 {
            assert_eq!(y[i], ds.outcome[i]);
            assert_eq!(y[10 + i], ds.outcome[i] + 0.5);
        }
    }

    #[test]
    fn structure_errors() {
        let mut ds = small();
        ds.pair_id[0] = "p2".into();
        assert!(matches!(ds.structure(), Err(Error::StructureError(_))));
        let mut ds = small();
        ds.arm[1] = 2;
        assert!(matches!(ds.structure(), Err(Error::StructureError(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let ds = small();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let (back, report) = ingest_reader(buf.as_slice(), &Schema::default()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(report.n_pairs, 2);
        assert!(matches!(ingest_reader("".as_bytes(), &Schema::default()), Err(Error::SchemaError(_))));
        assert!(matches!(
            ingest_reader("unit_id,cluster_id,pair_id,arm,outcome\n".as_bytes(), &Schema::default()),
            Err(Error::SchemaError(_))
        ));
    }

    #[test]
    fn metric_identities() {
        let vals = vec![(EstimatorName::GS, vec![(1.0, 0.5), (3.0, 0.5)]), (EstimatorName::GC, vec![(2.0, 0.5), (2.0, 0.5)])];
        let m = MetricBlock::from_values("t", 2.0, &vals, &[EstimatorName::GS]).unwrap();
        let gs = m.row("GS").unwrap();
        assert_eq!(gs.mean, 1.0);
        assert_eq!(gs.se, 0.5);
        assert!((gs.rmse * gs.rmse - gs.bias * gs.bias - gs.se * gs.se).abs() < 1e-15);
        assert_eq!(gs.cv, 0.5);
        assert_eq!(m.row("GC").unwrap().rmse, 0.0);
        assert_eq!(m.ratios.len(), 2);
        assert!(MetricBlock::from_values("t", 0.0, &vals, &[]).is_err());
    }
}
