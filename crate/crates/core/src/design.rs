//! Randomization designs, their assignment distributions, and the kn-slot
//! indicator layout shared by the rest of the crate.
//!
//! Slot `a = (arm - 1) * n + unit` (0-based unit, 1-based arm): all units for
//! arm 1 first, then arm 2, and so on.

use std::borrow::Cow;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on exact enumeration.
pub const DEFAULT_MAX_SUPPORT: usize = 65_536;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Bernoulli,
    Complete,
    ClusterComplete,
    PairedCluster,
    Custom,
}

/// Bernoulli arm probabilities: one row shared by every unit or one row per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArmProbs {
    Shared(Vec<f64>),
    PerUnit(Vec<Vec<f64>>),
}

impl ArmProbs {
    fn row(&self, unit: usize) -> &[f64] {
        match self {
            ArmProbs::Shared(row) => row,
            ArmProbs::PerUnit(rows) => &rows[unit],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomEntry {
    pub arm_of: Vec<usize>,
    pub probability: f64,
}

/// A randomization mechanism over `n_units` units and `k_arms` arms.
///
/// Cluster ids in `cluster_of` and pair ids in `pair_of` are dense 0-based
/// indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub kind: DesignKind,
    pub n_units: usize,
    pub k_arms: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_probs: Option<ArmProbs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_of: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_of: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_table: Option<Vec<CustomEntry>>,
}

/// One realized assignment; `arm_of[i]` is the 1-based arm of unit `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub arm_of: Vec<usize>,
}

impl Assignment {
    pub fn new(arm_of: Vec<usize>) -> Self {
        Assignment { arm_of }
    }

    pub fn n_units(&self) -> usize {
        self.arm_of.len()
    }

    /// Number of units in each arm.
    pub fn arm_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &arm in &self.arm_of {
            if (1..=k).contains(&arm) {
                sizes[arm - 1] += 1;
            }
        }
        sizes
    }
}

impl Design {
    fn blank(kind: DesignKind, n_units: usize, k_arms: usize) -> Self {
        Design {
            kind,
            n_units,
            k_arms,
            arm_probs: None,
            arm_counts: None,
            cluster_of: None,
            pair_of: None,
            custom_table: None,
        }
    }

    /// Independent assignment of every unit with the same per-arm probabilities.
    pub fn bernoulli(n_units: usize, arm_probs: Vec<f64>) -> Result<Self> {
        let mut design = Self::blank(DesignKind::Bernoulli, n_units, arm_probs.len());
        design.arm_probs = Some(ArmProbs::Shared(arm_probs));
        design.validate()?;
        Ok(design)
    }

    pub fn bernoulli_per_unit(arm_probs: Vec<Vec<f64>>) -> Result<Self> {
        let k = arm_probs.first().map_or(0, Vec::len);
        let mut design = Self::blank(DesignKind::Bernoulli, arm_probs.len(), k);
        design.arm_probs = Some(ArmProbs::PerUnit(arm_probs));
        design.validate()?;
        Ok(design)
    }

    /// Complete randomization with fixed arm sizes.
    pub fn complete(arm_counts: Vec<usize>) -> Result<Self> {
        let n = arm_counts.iter().sum();
        let mut design = Self::blank(DesignKind::Complete, n, arm_counts.len());
        design.arm_counts = Some(arm_counts);
        design.validate()?;
        Ok(design)
    }

    /// Complete randomization of whole clusters with fixed per-arm cluster counts.
    pub fn cluster_complete(cluster_of: Vec<usize>, arm_counts: Vec<usize>) -> Result<Self> {
        let mut design = Self::blank(DesignKind::ClusterComplete, cluster_of.len(), arm_counts.len());
        design.cluster_of = Some(cluster_of);
        design.arm_counts = Some(arm_counts);
        design.validate()?;
        Ok(design)
    }

    /// Two-arm paired-cluster design: within each pair one cluster gets each arm.
    pub fn paired_cluster(cluster_of: Vec<usize>, pair_of: Vec<usize>) -> Result<Self> {
        let mut design = Self::blank(DesignKind::PairedCluster, cluster_of.len(), 2);
        design.cluster_of = Some(cluster_of);
        design.pair_of = Some(pair_of);
        design.validate()?;
        Ok(design)
    }

    pub fn custom(n_units: usize, k_arms: usize, table: Vec<CustomEntry>) -> Result<Self> {
        let mut design = Self::blank(DesignKind::Custom, n_units, k_arms);
        design.custom_table = Some(table);
        design.validate()?;
        Ok(design)
    }

    pub fn kn(&self) -> usize {
        self.n_units * self.k_arms
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_of
            .as_ref()
            .map_or(0, |c| c.iter().max().map_or(0, |m| m + 1))
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_of
            .as_ref()
            .map_or(0, |p| p.iter().max().map_or(0, |m| m + 1))
    }

    /// The two clusters of each pair, lower id first.
    pub fn pair_members(&self) -> Vec<[usize; 2]> {
        let Some(pair_of) = &self.pair_of else {
            return Vec::new();
        };
        let mut members = vec![Vec::with_capacity(2); self.n_pairs()];
        for (cluster, &pair) in pair_of.iter().enumerate() {
            members[pair].push(cluster);
        }
        members.into_iter().map(|m| [m[0], m[1]]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidDesign(msg));
        if self.k_arms == 0 {
            return invalid("k_arms must be positive".into());
        }
        if self.n_units == 0 {
            return invalid("n_units must be positive".into());
        }
        if let Some(cluster_of) = &self.cluster_of {
            if cluster_of.len() != self.n_units {
                return invalid(format!(
                    "cluster_of has {} entries for {} units",
                    cluster_of.len(),
                    self.n_units
                ));
            }
            check_dense("cluster", cluster_of)?;
        }
        if let Some(pair_of) = &self.pair_of {
            if self.cluster_of.is_none() {
                return invalid("pair_of requires cluster_of".into());
            }
            if pair_of.len() != self.n_clusters() {
                return invalid(format!(
                    "pair_of has {} entries for {} clusters",
                    pair_of.len(),
                    self.n_clusters()
                ));
            }
            check_dense("pair", pair_of)?;
            let mut sizes = vec![0usize; self.n_pairs()];
            for &p in pair_of {
                sizes[p] += 1;
            }
            if let Some((pair, &size)) = sizes.iter().enumerate().find(|(_, &s)| s != 2) {
                return invalid(format!("pair {pair} contains {size} clusters, expected 2"));
            }
        }

        match self.kind {
            DesignKind::Bernoulli => {
                let Some(probs) = &self.arm_probs else {
                    return invalid("bernoulli design requires arm_probs".into());
                };
                if let ArmProbs::PerUnit(rows) = probs {
                    if rows.len() != self.n_units {
                        return invalid(format!(
                            "arm_probs has {} rows for {} units",
                            rows.len(),
                            self.n_units
                        ));
                    }
                }
                for unit in 0..self.n_units {
                    let row = probs.row(unit);
                    if row.len() != self.k_arms {
                        return invalid(format!("unit {unit}: expected {} arm probabilities", self.k_arms));
                    }
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return invalid(format!("unit {unit}: arm probabilities must lie in [0, 1]"));
                    }
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > PROB_TOL {
                        return invalid(format!("unit {unit}: arm probabilities sum to {total}"));
                    }
                }
            }
            DesignKind::Complete | DesignKind::ClusterComplete => {
                let Some(counts) = &self.arm_counts else {
                    return invalid("complete design requires arm_counts".into());
                };
                if counts.len() != self.k_arms {
                    return invalid(format!("expected {} arm counts", self.k_arms));
                }
                let total: usize = counts.iter().sum();
                let target = if self.kind == DesignKind::Complete {
                    self.n_units
                } else {
                    if self.cluster_of.is_none() {
                        return invalid("cluster_complete design requires cluster_of".into());
                    }
                    self.n_clusters()
                };
                if total != target {
                    return invalid(format!("arm counts sum to {total}, expected {target}"));
                }
            }
            DesignKind::PairedCluster => {
                if self.k_arms != 2 {
                    return invalid("paired_cluster design requires k_arms = 2".into());
                }
                if self.pair_of.is_none() {
                    return invalid("paired_cluster design requires cluster_of and pair_of".into());
                }
            }
            DesignKind::Custom => {
                let Some(table) = &self.custom_table else {
                    return invalid("custom design requires custom_table".into());
                };
                if table.is_empty() {
                    return invalid("custom_table is empty".into());
                }
                let mut total = 0.0;
                for (row, entry) in table.iter().enumerate() {
                    if entry.arm_of.len() != self.n_units {
                        return invalid(format!("custom_table row {row} has wrong length"));
                    }
                    if let Some(&arm) = entry.arm_of.iter().find(|&&a| a == 0 || a > self.k_arms) {
                        return invalid(format!("custom_table row {row} has arm {arm}"));
                    }
                    if entry.probability.is_nan() || entry.probability < 0.0 {
                        return invalid(format!("custom_table row {row} has negative probability"));
                    }
                    self.check_cluster_constant(&entry.arm_of)?;
                    total += entry.probability;
                }
                if (total - 1.0).abs() > PROB_TOL {
                    return invalid(format!("custom_table probabilities sum to {total}"));
                }
            }
        }
        Ok(())
    }

    fn check_cluster_constant(&self, arm_of: &[usize]) -> Result<()> {
        if let Some(cluster_of) = &self.cluster_of {
            let mut arm_of_cluster = vec![0usize; self.n_clusters()];
            for (unit, &cluster) in cluster_of.iter().enumerate() {
                let seen = &mut arm_of_cluster[cluster];
                if *seen == 0 {
                    *seen = arm_of[unit];
                } else if *seen != arm_of[unit] {
                    return Err(Error::InvalidDesign(format!(
                        "cluster {cluster} is split across arms"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of positive-probability assignments (saturating).
    pub fn support_count(&self) -> u128 {
        match self.kind {
            DesignKind::Bernoulli => {
                let probs = self.arm_probs.as_ref().expect("validated");
                (0..self.n_units).fold(1u128, |acc, unit| {
                    let options = probs.row(unit).iter().filter(|&&p| p > 0.0).count() as u128;
                    acc.saturating_mul(options)
                })
            }
            DesignKind::Complete | DesignKind::ClusterComplete => {
                multinomial(self.arm_counts.as_ref().expect("validated"))
            }
            DesignKind::PairedCluster => {
                let pairs = self.n_pairs() as u32;
                if pairs >= 128 {
                    u128::MAX
                } else {
                    1u128 << pairs
                }
            }
            DesignKind::Custom => self
                .custom_table
                .as_ref()
                .map_or(0, |t| t.iter().filter(|e| e.probability > 0.0).count() as u128),
        }
    }

    fn expand_clusters(&self, cluster_arms: &[usize]) -> Assignment {
        let cluster_of = self.cluster_of.as_ref().expect("cluster design");
        Assignment::new(cluster_of.iter().map(|&c| cluster_arms[c]).collect())
    }

    /// Draws one assignment from the design law using `rng`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        match self.kind {
            DesignKind::Bernoulli => {
                let probs = self.arm_probs.as_ref().expect("validated");
                let arms = (0..self.n_units)
                    .map(|unit| draw_categorical(probs.row(unit), rng.random::<f64>()) + 1)
                    .collect();
                Assignment::new(arms)
            }
            DesignKind::Complete => {
                let mut arms = arms_from_counts(self.arm_counts.as_ref().expect("validated"));
                arms.shuffle(rng);
                Assignment::new(arms)
            }
            DesignKind::ClusterComplete => {
                let mut arms = arms_from_counts(self.arm_counts.as_ref().expect("validated"));
                arms.shuffle(rng);
                self.expand_clusters(&arms)
            }
            DesignKind::PairedCluster => {
                let mut cluster_arms = vec![0; self.n_clusters()];
                for [first, second] in self.pair_members() {
                    let flip = rng.random_bool(0.5);
                    cluster_arms[first] = if flip { 2 } else { 1 };
                    cluster_arms[second] = if flip { 1 } else { 2 };
                }
                self.expand_clusters(&cluster_arms)
            }
            DesignKind::Custom => {
                let table = self.custom_table.as_ref().expect("validated");
                let probs: Vec<f64> = table.iter().map(|e| e.probability).collect();
                let row = draw_categorical(&probs, rng.random::<f64>());
                Assignment::new(table[row].arm_of.clone())
            }
        }
    }
}

fn check_dense(label: &str, ids: &[usize]) -> Result<()> {
    let count = ids.iter().max().map_or(0, |m| m + 1);
    let mut used = vec![false; count];
    for &id in ids {
        used[id] = true;
    }
    match used.iter().position(|u| !u) {
        Some(missing) => Err(Error::InvalidDesign(format!(
            "{label} ids must be dense 0-based; id {missing} is unused"
        ))),
        None => Ok(()),
    }
}

fn arms_from_counts(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(arm, &c)| std::iter::repeat_n(arm + 1, c))
        .collect()
}

fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cumulative += p;
            if u < cumulative {
                return i;
            }
        }
    }
    last_positive
}

fn multinomial(counts: &[usize]) -> u128 {
    let mut remaining: usize = counts.iter().sum();
    let mut total = 1u128;
    for &c in counts {
        total = total.saturating_mul(binomial(remaining, c));
        remaining -= c;
    }
    total
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut result = 1u128;
    for i in 0..k {
        // result * (n - i) / (i + 1) stays integral at every step
        result = match result.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    result
}

/// Visits every arrangement of the multiset given by `counts` in lexicographic order.
fn for_each_arrangement(counts: &[usize], mut visit: impl FnMut(&[usize])) {
    fn recurse(remaining: &mut [usize], current: &mut Vec<usize>, len: usize, visit: &mut dyn FnMut(&[usize])) {
        if current.len() == len {
            visit(current);
            return;
        }
        for arm in 0..remaining.len() {
            if remaining[arm] > 0 {
                remaining[arm] -= 1;
                current.push(arm + 1);
                recurse(remaining, current, len, visit);
                current.pop();
                remaining[arm] += 1;
            }
        }
    }
    let len = counts.iter().sum();
    let mut remaining = counts.to_vec();
    let mut current = Vec::with_capacity(len);
    recurse(&mut remaining, &mut current, len, &mut visit);
}

/// The randomization distribution of a design, either fully enumerated or
/// represented by a seeded sampler.
#[derive(Debug, Clone)]
pub enum DesignDistribution {
    Exact {
        n_units: usize,
        k_arms: usize,
        support: Vec<(Assignment, f64)>,
    },
    Sampled {
        design: Design,
        seed: u64,
        draws: usize,
    },
}

impl DesignDistribution {
    pub fn sampled(design: Design, seed: u64, draws: usize) -> Result<Self> {
        design.validate()?;
        if draws == 0 {
            return Err(Error::EmptySupport);
        }
        Ok(DesignDistribution::Sampled { design, seed, draws })
    }

    /// Builds an exact distribution from an explicit support.
    pub fn from_support(n_units: usize, k_arms: usize, support: Vec<(Assignment, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDesign(format!("support probabilities sum to {total}")));
        }
        for (assignment, _) in &support {
            if assignment.n_units() != n_units {
                return Err(Error::shape(format!("{n_units} units"), format!("{}", assignment.n_units())));
            }
            if let Some((unit, &arm)) = assignment.arm_of.iter().enumerate().find(|(_, &a)| a == 0 || a > k_arms) {
                return Err(Error::ArmOutOfRange { unit, arm, k: k_arms });
            }
        }
        Ok(DesignDistribution::Exact { n_units, k_arms, support })
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, DesignDistribution::Exact { .. })
    }

    pub fn n_units(&self) -> usize {
        match self {
            DesignDistribution::Exact { n_units, .. } => *n_units,
            DesignDistribution::Sampled { design, .. } => design.n_units,
        }
    }

    pub fn k_arms(&self) -> usize {
        match self {
            DesignDistribution::Exact { k_arms, .. } => *k_arms,
            DesignDistribution::Sampled { design, .. } => design.k_arms,
        }
    }

    pub fn kn(&self) -> usize {
        self.n_units() * self.k_arms()
    }

    /// Support size (exact) or number of draws (sampled).
    pub fn len(&self) -> usize {
        match self {
            DesignDistribution::Exact { support, .. } => support.len(),
            DesignDistribution::Sampled { draws, .. } => *draws,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th assignment and its weight; sampled weights are `1 / draws`.
    pub fn get(&self, i: usize) -> (Cow<'_, Assignment>, f64) {
        match self {
            DesignDistribution::Exact { support, .. } => (Cow::Borrowed(&support[i].0), support[i].1),
            DesignDistribution::Sampled { design, seed, draws } => {
                let mut rng = draw_rng(*seed, i as u64);
                (Cow::Owned(design.sample_with(&mut rng)), 1.0 / *draws as f64)
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Cow<'_, Assignment>, f64)> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Deterministic RNG for Monte Carlo draw `stream` under `seed`.
pub fn draw_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lists every positive-probability assignment of `design`.
pub fn enumerate(design: &Design, max_support: usize) -> Result<DesignDistribution> {
    design.validate()?;
    let count = design.support_count();
    if count > max_support as u128 {
        return Err(Error::SupportTooLarge { count, max: max_support });
    }
    let n = design.n_units;
    let k = design.k_arms;
    let mut support = Vec::with_capacity(count as usize);
    match design.kind {
        DesignKind::Bernoulli => {
            let probs = design.arm_probs.as_ref().expect("validated");
            let options: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|unit| {
                    probs
                        .row(unit)
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(arm, &p)| (arm + 1, p))
                        .collect()
                })
                .collect();
            // odometer over per-unit options, unit 0 slowest
            let mut index = vec![0usize; n];
            loop {
                let arms = (0..n).map(|u| options[u][index[u]].0).collect();
                let prob = (0..n).map(|u| options[u][index[u]].1).product();
                support.push((Assignment::new(arms), prob));
                let mut unit = n;
                loop {
                    if unit == 0 {
                        return DesignDistribution::from_support(n, k, support);
                    }
                    unit -= 1;
                    index[unit] += 1;
                    if index[unit] < options[unit].len() {
                        break;
                    }
                    index[unit] = 0;
                }
            }
        }
        DesignKind::Complete => {
            let counts = design.arm_counts.as_ref().expect("validated");
            let prob = 1.0 / count as f64;
            for_each_arrangement(counts, |arms| support.push((Assignment::new(arms.to_vec()), prob)));
        }
        DesignKind::ClusterComplete => {
            let counts = design.arm_counts.as_ref().expect("validated");
            let prob = 1.0 / count as f64;
            for_each_arrangement(counts, |arms| support.push((design.expand_clusters(arms), prob)));
        }
        DesignKind::PairedCluster => {
            let members = design.pair_members();
            let prob = 1.0 / count as f64;
            let mut cluster_arms = vec![0; design.n_clusters()];
            for pattern in 0..count as u64 {
                for (pair, [first, second]) in members.iter().enumerate() {
                    let flip = (pattern >> (members.len() - 1 - pair)) & 1 == 1;
                    cluster_arms[*first] = if flip { 2 } else { 1 };
                    cluster_arms[*second] = if flip { 1 } else { 2 };
                }
                support.push((design.expand_clusters(&cluster_arms), prob));
            }
        }
        DesignKind::Custom => {
            for entry in design.custom_table.as_ref().expect("validated") {
                if entry.probability > 0.0 {
                    support.push((Assignment::new(entry.arm_of.clone()), entry.probability));
                }
            }
        }
    }
    DesignDistribution::from_support(n, k, support)
}

/// Draws a single assignment, deterministic in `seed`.
pub fn sample(design: &Design, seed: u64) -> Result<Assignment> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(design.sample_with(&mut rng))
}

/// Expands an assignment to its length-kn 0/1 indicator (block layout).
pub fn expand(assignment: &Assignment, k: usize) -> Result<DVector<f64>> {
    let n = assignment.n_units();
    let mut indicator = DVector::zeros(k * n);
    for (unit, &arm) in assignment.arm_of.iter().enumerate() {
        if arm == 0 || arm > k {
            return Err(Error::ArmOutOfRange { unit, arm, k });
        }
        indicator[(arm - 1) * n + unit] = 1.0;
    }
    Ok(indicator)
}
