//! Datasets: CSV loading and saving, quantization to discrete levels,
//! stratified splitting and a seeded Gaussian-cluster generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Real-valued samples with class labels, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    num_features: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    fingerprint: u64,
}

pub(crate) fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_features: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("dataset needs at least two classes"));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::DimMismatch {
                left: features.len(),
                right: labels.len() * num_features,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let mut ds = Self {
            name: name.into(),
            num_features,
            num_classes,
            features,
            labels,
            fingerprint: 0,
        };
        ds.fingerprint = ds.compute_fingerprint();
        Ok(ds)
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"dataset");
        h.update((self.num_features as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.labels.len() as u64).to_le_bytes());
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for v in &self.features {
            h.update(v.to_bits().to_le_bytes());
        }
        digest_u64(h)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(name, self.num_features, self.num_classes, features, labels)
    }

    /// Per-feature standardization statistics (mean, std) over this set.
    pub fn feature_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.num_features];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.num_features];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
        (mean, std)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.num_features {
            write!(out, ",f{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i]).unwrap();
            for v in self.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Parses the dataset CSV format: a `label,f0,...,f{N-1}` header, then one
/// sample per line.
pub fn parse_dataset(text: &str, num_classes: usize, name: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Empty("dataset file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `label` followed by feature columns".into(),
        });
    }
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `f{j}`, found `{c}`"),
            });
        }
    }
    let n = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label `{}`", fields[0]),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature value `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite feature value `{f}`"),
                });
            }
            features.push(v);
        }
    }
    Dataset::new(name, n, num_classes, features, labels)
}

pub fn load_dataset(path: &Path, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&text, num_classes, &name)
}

/// Per-feature affine bounds used to map reals onto `levels` integer levels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec {
    pub levels: usize,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl QuantSpec {
    /// Bounds from the given set (normally the training split only).
    pub fn fit(ds: &Dataset, levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::invalid(format!("need at least 2 levels, got {levels}")));
        }
        if ds.is_empty() {
            return Err(Error::Empty("dataset to quantize"));
        }
        let n = ds.num_features();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for i in 0..ds.len() {
            for (j, v) in ds.row(i).iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
        Ok(Self { levels, min, max })
    }

    #[inline]
    pub fn level(&self, feature: usize, x: f64) -> usize {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi <= lo {
            return 0;
        }
        let t = ((x - lo) / (hi - lo) * self.levels as f64).floor();
        t.clamp(0.0, (self.levels - 1) as f64) as usize
    }

    pub fn apply(&self, ds: &Dataset) -> Result<QuantizedDataset> {
        if ds.num_features() != self.min.len() {
            return Err(Error::DimMismatch {
                left: ds.num_features(),
                right: self.min.len(),
            });
        }
        let mut levels = Vec::with_capacity(ds.len() * ds.num_features());
        for i in 0..ds.len() {
            for (j, v) in ds.row(i).iter().enumerate() {
                levels.push(self.level(j, *v) as u16);
            }
        }
        Ok(QuantizedDataset {
            num_features: ds.num_features(),
            num_classes: ds.num_classes(),
            levels,
            labels: ds.labels().to_vec(),
            spec: self.clone(),
            fingerprint: ds.fingerprint(),
        })
    }

    /// Sidecar CSV: `levels,M`, then `feature,min,max` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("levels,{}\nfeature,min,max\n", self.levels);
        for (j, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            writeln!(out, "{j},{lo},{hi}").unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let (_, first) = lines.next().ok_or(Error::Empty("quantization spec"))?;
        let levels: usize = first
            .strip_prefix("levels,")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(1, "expected `levels,M`"))?;
        match lines.next() {
            Some((_, h)) if h.trim() == "feature,min,max" => {}
            _ => return Err(bad(2, "expected `feature,min,max` header")),
        }
        let mut min = Vec::new();
        let mut max = Vec::new();
        for (idx, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(min.len()) {
                return Err(bad(idx + 1, "expected `index,min,max` in feature order"));
            }
            min.push(f[1].parse().map_err(|_| bad(idx + 1, "bad min"))?);
            max.push(f[2].parse().map_err(|_| bad(idx + 1, "bad max"))?);
        }
        if levels < 2 || min.is_empty() {
            return Err(bad(1, "need levels >= 2 and at least one feature"));
        }
        Ok(Self { levels, min, max })
    }
}

/// Samples mapped to integer levels in `[0, levels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedDataset {
    num_features: usize,
    num_classes: usize,
    levels: Vec<u16>,
    labels: Vec<usize>,
    spec: QuantSpec,
    fingerprint: u64,
}

impl QuantizedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_levels(&self) -> usize {
        self.spec.levels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u16] {
        &self.levels[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    /// Fingerprint of the real-valued source set.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// Quantizes a set with bounds fitted on that same set.
pub fn quantize(ds: &Dataset, levels: usize) -> Result<QuantizedDataset> {
    QuantSpec::fit(ds, levels)?.apply(ds)
}

/// Seeded stratified split. The train side gets `round(fraction * I)` rows,
/// allotted per class by largest remainder so every class is within one
/// sample of its proportional share.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let total = ds.len();
    let n_train = (train_fraction * total as f64).round() as usize;
    if n_train == 0 || n_train == total {
        return Err(Error::invalid(format!(
            "split of {total} samples at {train_fraction} leaves one side empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let shares: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * n_train as f64 / total as f64)
        .collect();
    let mut take: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut remaining = n_train - take.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for c in order {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }
    let mut train_idx = Vec::with_capacity(n_train);
    let mut test_idx = Vec::with_capacity(total - n_train);
    for (c, idx) in by_class.iter().enumerate() {
        train_idx.extend_from_slice(&idx[..take[c]]);
        test_idx.extend_from_slice(&idx[take[c]..]);
    }
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    Ok((
        ds.subset(&train_idx, format!("{}-train", ds.name))?,
        ds.subset(&test_idx, format!("{}-test", ds.name))?,
    ))
}

/// Gaussian-cluster generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_features: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation of each cluster.
    pub sigma: f64,
    /// Probability that a label is replaced by a different, uniformly chosen class.
    pub label_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_features == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic data needs C >= 2, N >= 1 and samples"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::invalid(format!(
                "label noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Generates the dataset and also returns the labels before noise was applied.
pub fn synth_generate_with_clean_labels(cfg: &SynthConfig) -> Result<(Dataset, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, n) = (cfg.num_classes, cfg.num_features);
    let means: Vec<f64> = (0..c * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let total = c * cfg.samples_per_class;
    let mut features = Vec::with_capacity(total * n);
    let mut clean = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % c;
        clean.push(class);
        for j in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(means[class * n + j] + cfg.sigma * z);
        }
    }
    let labels: Vec<usize> = clean
        .iter()
        .map(|&y| {
            if rng.random::<f64>() < cfg.label_noise {
                (y + rng.random_range(1..c)) % c
            } else {
                y
            }
        })
        .collect();
    let ds = Dataset::new(format!("synth-{}", cfg.seed), n, c, features, labels)?;
    Ok((ds, clean))
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    synth_generate_with_clean_labels(cfg).map(|(ds, _)| ds)
}
