//! Synthetic sub-population-shift data and per-domain samplers.
//!
//! Each sample belongs to a group `(y, a)` of class label `y` and spurious
//! attribute `a`, with domain id `d = y * A + a`. Features are
//!
//! ```text
//! x = core_margin * e_y + spurious_margin * e_{C + a} + noise_std * N(0, I)
//! ```
//!
//! so the class and attribute directions occupy disjoint coordinates and the
//! remaining `F - C - A` coordinates are pure noise.
//!
//! # Random streams
//!
//! All randomness comes from [`ChaCha8Rng`] seeded through
//! `SeedableRng::seed_from_u64` and then moved to a fixed stream id with
//! `set_stream`: stream 0 draws training data, stream 1 test data, stream 2
//! model initialisation and stream 3 the training loop. Integer draws in
//! `[0, n)` take exactly one `u64` and map it by `(u * n) >> 64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::matrix::Matrix;

pub type DomainId = usize;

pub const STREAM_TRAIN_DATA: u64 = 0;
pub const STREAM_TEST_DATA: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_TRAINING: u64 = 3;

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `[0, n)` from a single 64-bit draw.
pub fn uniform_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "uniform_index over an empty range");
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniformly random domain, `d ~ U{0, ..., num_domains - 1}`.
pub fn draw_domain<R: RngCore + ?Sized>(rng: &mut R, num_domains: usize) -> DomainId {
    uniform_index(rng, num_domains)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShiftSpec {
    pub num_classes: usize,
    pub num_spurious: usize,
    pub feature_dim: usize,
    pub core_margin: f64,
    pub spurious_margin: f64,
    pub noise_std: f64,
    /// Indexed by domain id `y * num_spurious + a`.
    pub train_group_proportions: Vec<f64>,
    pub n_train: usize,
    pub n_test_per_group: usize,
    pub seed: u64,
}

impl Default for GroupShiftSpec {
    /// Two classes, two attributes; groups (0, 0) and (1, 1) hold 90% of the
    /// training set and every group is equally represented at test time.
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_spurious: 2,
            feature_dim: 10,
            core_margin: 2.0,
            spurious_margin: 3.0,
            noise_std: 1.0,
            train_group_proportions: vec![0.45, 0.05, 0.05, 0.45],
            n_train: 2000,
            n_test_per_group: 500,
            seed: 0,
        }
    }
}

impl GroupShiftSpec {
    pub fn num_domains(&self) -> usize {
        self.num_classes * self.num_spurious
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_spurious == 0 {
            return Err(config_err!("num_classes and num_spurious must be positive"));
        }
        if self.feature_dim < self.num_classes + self.num_spurious {
            return Err(config_err!(
                "feature_dim {} leaves no room for {} class and {} spurious directions",
                self.feature_dim,
                self.num_classes,
                self.num_spurious
            ));
        }
        if !(self.core_margin >= 0.0 && self.spurious_margin >= 0.0) {
            return Err(config_err!("core_margin and spurious_margin must be nonnegative"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(config_err!("noise_std must be positive"));
        }
        let props = &self.train_group_proportions;
        if props.len() != self.num_domains() {
            return Err(config_err!(
                "train_group_proportions has {} entries, expected {}",
                props.len(),
                self.num_domains()
            ));
        }
        if props.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(config_err!("train_group_proportions must be nonnegative"));
        }
        let total: f64 = props.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config_err!("train_group_proportions sum to {total}, expected 1"));
        }
        if self.n_train == 0 || self.n_test_per_group == 0 {
            return Err(config_err!("n_train and n_test_per_group must be positive"));
        }
        Ok(())
    }

    /// Training-set size of every group.
    pub fn train_group_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let counts = largest_remainder(&self.train_group_proportions, self.n_train);
        let empty: Vec<usize> = (0..counts.len())
            .filter(|&d| counts[d] == 0 && self.train_group_proportions[d] > 0.0)
            .collect();
        if !empty.is_empty() {
            return Err(config_err!(
                "train_group_proportions round to zero samples for groups {empty:?} at n_train = {}",
                self.n_train
            ));
        }
        Ok(counts)
    }
}

/// Apportions `total` items by the largest-remainder method. Ties in the
/// remainder go to the lower index.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &d in order.iter().take(total.saturating_sub(assigned)) {
        counts[d] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    domains: Vec<DomainId>,
    num_classes: usize,
    num_spurious: usize,
    by_domain: Vec<Vec<usize>>,
}

impl Dataset {
    /// Checks that every domain id decodes to the stored label.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        domains: Vec<DomainId>,
        num_classes: usize,
        num_spurious: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || domains.len() != n {
            return Err(shape_err!("{n} feature rows, {} labels, {} domains", labels.len(), domains.len()));
        }
        if num_classes == 0 || num_spurious == 0 {
            return Err(Error::Data("num_classes and num_spurious must be positive".into()));
        }
        let num_domains = num_classes * num_spurious;
        let mut by_domain = vec![Vec::new(); num_domains];
        for (i, (&y, &d)) in labels.iter().zip(&domains).enumerate() {
            if d >= num_domains || y >= num_classes {
                return Err(Error::Data(format!("sample {i}: label {y} / domain {d} out of range")));
            }
            if d / num_spurious != y {
                return Err(Error::Data(format!("sample {i}: domain {d} does not encode label {y}")));
            }
            by_domain[d].push(i);
        }
        Ok(Self { features, labels, domains, num_classes, num_spurious, by_domain })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[DomainId] {
        &self.domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_spurious(&self) -> usize {
        self.num_spurious
    }

    pub fn num_domains(&self) -> usize {
        self.num_classes * self.num_spurious
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample indices of domain `d` (possibly empty).
    pub fn domain_indices(&self, d: DomainId) -> &[usize] {
        &self.by_domain[d]
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.by_domain.iter().map(Vec::len).collect()
    }

    /// Rows at `indices`, keeping per-sample domains.
    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: BatchDomains::PerSample(indices.iter().map(|&i| self.domains[i]).collect()),
        })
    }

    /// Writes `n,F,C,A` on the first line, then one `label,domain,f_1..f_F`
    /// row per sample with 17 significant digits per float.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{},{},{}", self.len(), self.feature_dim(), self.num_classes, self.num_spurious);
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.labels[i], self.domains[i]);
            for v in self.features.row(i) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad header {header:?}: {e}")))?;
        let [n, f, c, a] = dims[..] else {
            return Err(Error::Format(format!("header must be n,F,C,A, got {header:?}")));
        };
        let mut labels = Vec::with_capacity(n);
        let mut domains = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * f);
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != f + 2 {
                return Err(Error::Format(format!("row {}: expected {} fields, got {}", lineno + 1, f + 2, fields.len())));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Format(format!("row {}: {e}", lineno + 1));
            labels.push(fields[0].parse::<usize>().map_err(|e| bad(&e))?);
            domains.push(fields[1].parse::<usize>().map_err(|e| bad(&e))?);
            for s in &fields[2..] {
                values.push(s.parse::<f64>().map_err(|e| bad(&e))?);
            }
        }
        if labels.len() != n {
            return Err(Error::Format(format!("header announces {n} rows, found {}", labels.len())));
        }
        Self::new(Matrix::from_vec(n, f, values)?, labels, domains, c, a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchDomains {
    /// Every row comes from this domain.
    Single(DomainId),
    PerSample(Vec<DomainId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domains: BatchDomains,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn domain_of(&self, i: usize) -> DomainId {
        match &self.domains {
            BatchDomains::Single(d) => *d,
            BatchDomains::PerSample(ds) => ds[i],
        }
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        (0..self.len()).map(|i| self.domain_of(i)).collect()
    }
}

/// Draws train and test sets. Train group sizes follow the proportions;
/// the test set holds `n_test_per_group` samples of every group.
pub fn generate(spec: &GroupShiftSpec) -> Result<(Dataset, Dataset)> {
    let counts = spec.train_group_counts()?;
    let train = draw_groups(spec, &counts, &mut seeded_rng(spec.seed, STREAM_TRAIN_DATA))?;
    let test_counts = vec![spec.n_test_per_group; spec.num_domains()];
    let test = draw_groups(spec, &test_counts, &mut seeded_rng(spec.seed, STREAM_TEST_DATA))?;
    Ok((train, test))
}

fn draw_groups(spec: &GroupShiftSpec, counts: &[usize], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n: usize = counts.iter().sum();
    let f = spec.feature_dim;
    let mut values = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    for (d, &count) in counts.iter().enumerate() {
        let y = d / spec.num_spurious;
        let a = d % spec.num_spurious;
        for _ in 0..count {
            for j in 0..f {
                let mut v = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                if j == y {
                    v += spec.core_margin;
                }
                if j == spec.num_classes + a {
                    v += spec.spurious_margin;
                }
                values.push(v);
            }
            labels.push(y);
            domains.push(d);
        }
    }
    Dataset::new(Matrix::from_vec(n, f, values)?, labels, domains, spec.num_classes, spec.num_spurious)
}

/// `batch_size` samples drawn uniformly with replacement from domain `d`.
pub fn sample_domain_batch<R: RngCore + ?Sized>(
    data: &Dataset,
    d: DomainId,
    batch_size: usize,
    rng: &mut R,
) -> Result<LabeledBatch> {
    if d >= data.num_domains() {
        return Err(Error::Data(format!("domain {d} out of range for {} domains", data.num_domains())));
    }
    let pool = data.domain_indices(d);
    if pool.is_empty() {
        return Err(Error::Data(format!("domain {d} has no samples")));
    }
    if batch_size == 0 {
        return Err(config_err!("batch_size must be positive"));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| pool[uniform_index(rng, pool.len())]).collect();
    let mut batch = data.batch(&indices)?;
    batch.domains = BatchDomains::Single(d);
    Ok(batch)
}

/// `batch_size` samples drawn uniformly with replacement from the whole set,
/// ignoring domains.
pub fn sample_pooled_batch<R: RngCore + ?Sized>(data: &Dataset, batch_size: usize, rng: &mut R) -> Result<LabeledBatch> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(config_err!("batch_size must be positive"));
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| uniform_index(rng, data.len())).collect();
    data.batch(&indices)
}

/// Groups positions by domain id. Domains that never occur are omitted.
pub fn split_by_domain(domains: &[DomainId]) -> BTreeMap<DomainId, Vec<usize>> {
    let mut map: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        map.entry(d).or_default().push(i);
    }
    map
}
