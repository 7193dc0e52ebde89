//! Datasets, a synthetic source/target transfer benchmark, per-class
//! subsampling and class-aware minibatch composition.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { line: u64, label: usize, classes: usize },
    #[error("sampling rate must lie in (0, 1], got {0}")]
    RateOutOfRange(f64),
    #[error("infeasible batch plan: {0}")]
    InfeasiblePlan(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no examples".into()));
        }
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                line: 0,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_classes)
    }

    /// Example indices of each present class, in dataset order.
    pub fn class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        map
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.class_indices()
            .into_iter()
            .map(|(c, v)| (c, v.len()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesPerClass {
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Angle scale of the random plane rotations applied to the latent space.
    pub rotation_strength: f64,
    /// Scale of the additive Gaussian perturbation of the target map.
    pub noise_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTransferSpec {
    pub input_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub samples_per_class: SamplesPerClass,
    /// Within-class standard deviation in latent space (class means are unit normal).
    pub cluster_spread: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticTransferSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            source_classes: 20,
            target_classes: 10,
            samples_per_class: SamplesPerClass {
                source: 100,
                target_train: 30,
                target_test: 50,
            },
            cluster_spread: 0.6,
            domain_shift: DomainShift {
                rotation_strength: 0.4,
                noise_scale: 0.3,
            },
            seed: 2020,
        }
    }
}

impl SyntheticTransferSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.samples_per_class;
        if self.input_dim == 0
            || self.source_classes < 2
            || self.target_classes < 2
            || s.source == 0
            || s.target_train == 0
            || s.target_test == 0
        {
            return Err(DataError::Invalid(
                "dimensions and counts must be positive (at least 2 classes)".into(),
            ));
        }
        let knobs = [
            self.cluster_spread,
            self.domain_shift.rotation_strength,
            self.domain_shift.noise_scale,
        ];
        if knobs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DataError::Invalid(
                "spread and shift parameters must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> Vec<(String, String)> {
        let s = &self.samples_per_class;
        vec![
            ("input_dim".into(), self.input_dim.to_string()),
            ("source_classes".into(), self.source_classes.to_string()),
            ("target_classes".into(), self.target_classes.to_string()),
            ("samples_per_class.source".into(), s.source.to_string()),
            ("samples_per_class.target_train".into(), s.target_train.to_string()),
            ("samples_per_class.target_test".into(), s.target_test.to_string()),
            ("cluster_spread".into(), format!("{:?}", self.cluster_spread)),
            (
                "domain_shift.rotation_strength".into(),
                format!("{:?}", self.domain_shift.rotation_strength),
            ),
            (
                "domain_shift.noise_scale".into(),
                format!("{:?}", self.domain_shift.noise_scale),
            ),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_metadata(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| DataError::Invalid(format!("metadata lacks {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| DataError::Invalid(format!("metadata {k}={v} is not a number")))
        }
        let spec = Self {
            input_dim: num("input_dim", get("input_dim")?)?,
            source_classes: num("source_classes", get("source_classes")?)?,
            target_classes: num("target_classes", get("target_classes")?)?,
            samples_per_class: SamplesPerClass {
                source: num("source", get("samples_per_class.source")?)?,
                target_train: num("target_train", get("samples_per_class.target_train")?)?,
                target_test: num("target_test", get("samples_per_class.target_test")?)?,
            },
            cluster_spread: num("cluster_spread", get("cluster_spread")?)?,
            domain_shift: DomainShift {
                rotation_strength: num("rotation", get("domain_shift.rotation_strength")?)?,
                noise_scale: num("noise", get("domain_shift.noise_scale")?)?,
            },
            seed: num("seed", get("seed")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Generated benchmark plus the maps that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticTransfer {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    /// `[latent, input]` map applied to source latents.
    pub source_map: Tensor,
    /// Source map after the domain shift.
    pub target_map: Tensor,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Source classes are Gaussian clusters in a latent space pushed through a
/// random linear map; target classes are fresh clusters pushed through the
/// same map after random plane rotations of the latent space and an additive
/// perturbation. Train and test splits of the target share class distributions.
pub fn gen_synthetic_transfer(spec: &SyntheticTransferSpec) -> Result<SyntheticTransfer> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inv_sqrt = 1.0 / (d as f64).sqrt();

    let source_map: Vec<f64> = (0..d * d).map(|_| normal(&mut rng) * inv_sqrt).collect();

    let mut target_map = source_map.clone();
    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(&mut rng);
    for pair in dims.chunks_exact(2) {
        let (p, q) = (pair[0], pair[1]);
        let mag: f64 = rng.random_range(0.5..1.0);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let theta = spec.domain_shift.rotation_strength * mag * sign;
        let (s, c) = theta.sin_cos();
        // rotate latent coordinates p, q: rows p and q of the [latent, input] map
        for j in 0..d {
            let (a, b) = (target_map[p * d + j], target_map[q * d + j]);
            target_map[p * d + j] = c * a - s * b;
            target_map[q * d + j] = s * a + c * b;
        }
    }
    for v in target_map.iter_mut() {
        *v += spec.domain_shift.noise_scale * normal(&mut rng) * inv_sqrt;
    }

    let source_means = draw_means(&mut rng, spec.source_classes, d);
    let target_means = draw_means(&mut rng, spec.target_classes, d);
    let s = &spec.samples_per_class;
    let source = draw_split(&mut rng, &source_means, &source_map, s.source, spec.cluster_spread)?;
    let target_train = draw_split(&mut rng, &target_means, &target_map, s.target_train, spec.cluster_spread)?;
    let target_test = draw_split(&mut rng, &target_means, &target_map, s.target_test, spec.cluster_spread)?;

    Ok(SyntheticTransfer {
        source,
        target_train,
        target_test,
        source_map: Tensor::matrix(d, d, source_map)?,
        target_map: Tensor::matrix(d, d, target_map)?,
    })
}

fn draw_means(rng: &mut ChaCha8Rng, classes: usize, d: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| (0..d).map(|_| normal(rng)).collect())
        .collect()
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    map: &[f64],
    per_class: usize,
    spread: f64,
) -> Result<Dataset> {
    let d = means[0].len();
    let mut data = Vec::with_capacity(means.len() * per_class * d);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            let z: Vec<f64> = mu.iter().map(|m| m + spread * normal(rng)).collect();
            for j in 0..d {
                data.push((0..d).map(|k| z[k] * map[k * d + j]).sum());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels, means.len())
}

/// Keeps `max(1, round_half_even(rate * n_c))` examples of every class,
/// preserving dataset order.
pub fn subsample(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(DataError::RateOutOfRange(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut idx) in ds.class_indices() {
        let k = ((rate * idx.len() as f64).round_ties_even() as usize).clamp(1, idx.len());
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    ds.select(&keep)
}

/// `P` classes times `K` samples per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    /// Drop the last batch of an epoch when fewer than `P` classes remain.
    pub drop_incomplete: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            classes_per_batch: 8,
            samples_per_class: 4,
            drop_incomplete: false,
        }
    }
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// One epoch of class-balanced batches.
///
/// Each class is shuffled and cut into chunks of `K`; the remainder of a
/// class (fewer than `K`) sits out this epoch. Every batch draws one chunk
/// from each of the `P` classes with the most chunks left, so each present
/// class has exactly `K` members. The final batch may hold fewer than `P`
/// classes unless `drop_incomplete` is set.
pub fn stratified_batches(labels: &[usize], plan: &BatchPlan, seed: u64) -> Result<Vec<Vec<usize>>> {
    let (p, k) = (plan.classes_per_batch, plan.samples_per_class);
    if p == 0 || k == 0 {
        return Err(DataError::InfeasiblePlan("P and K must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut queues: Vec<Vec<Vec<usize>>> = Vec::new();
    for (_, mut idx) in by_class {
        if idx.len() < k {
            continue;
        }
        idx.shuffle(&mut rng);
        queues.push(idx.chunks_exact(k).map(<[usize]>::to_vec).collect());
    }
    if queues.is_empty() {
        return Err(DataError::InfeasiblePlan(format!("no class has {k} examples")));
    }

    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = (0..queues.len()).filter(|&c| !queues[c].is_empty()).collect();
        if avail.is_empty() {
            break;
        }
        avail.shuffle(&mut rng);
        avail.sort_by_key(|&c| std::cmp::Reverse(queues[c].len()));
        if avail.len() < p && plan.drop_incomplete {
            break;
        }
        avail.truncate(p);
        let batch: Vec<usize> = avail
            .iter()
            .flat_map(|&c| queues[c].pop().expect("non-empty"))
            .collect();
        batches.push(batch);
    }
    if batches.is_empty() {
        return Err(DataError::InfeasiblePlan(format!(
            "fewer than {p} classes have {k} examples and incomplete batches are dropped"
        )));
    }
    Ok(batches)
}

/// Plain shuffled batches of `batch_size` (the last may be short).
pub fn uniform_batches(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || batch_size == 0 {
        return Err(DataError::InfeasiblePlan("empty dataset or batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes `label,f0,f1,...` rows with 17 significant digits.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_rows(path, &ds.features, &ds.labels)
}

pub(crate) fn write_rows(path: &Path, features: &Tensor, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..features.cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, y) in labels.iter().enumerate() {
        out.push_str(&y.to_string());
        for v in features.row(i) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`save_csv`]. Without `num_classes`, the class
/// count is one more than the largest label.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(&e))?,
        None => {
            return Err(DataError::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let cols = header.len().saturating_sub(1);
    let header_ok = header.get(0).map(str::trim) == Some("label")
        && cols > 0
        && (0..cols).all(|j| header.get(j + 1).map(str::trim) == Some(format!("f{j}").as_str()));
    if !header_ok {
        return Err(DataError::Parse {
            line: 1,
            msg: "expected header `label,f0,f1,...`".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut lines = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != cols + 1 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected {} fields, found {}", cols + 1, rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("label {:?} is not a non-negative integer", &rec[0]),
        })?;
        for j in 0..cols {
            let v: f64 = rec[j + 1].trim().parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("field {} ({:?}) is not a number", j + 1, &rec[j + 1]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("field {} is not finite", j + 1),
                });
            }
            data.push(v);
        }
        labels.push(label);
        lines.push(line);
    }
    if labels.is_empty() {
        return Err(DataError::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
    if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(DataError::LabelOutOfRange {
            line: lines[i],
            label,
            classes,
        });
    }
    Dataset::new(Tensor::matrix(labels.len(), cols, data)?, labels, classes)
}

fn csv_error(e: &csv::Error) -> DataError {
    DataError::Parse {
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    }
}

/// Sidecar metadata: one `key=value` per line.
pub fn write_metadata(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                .ok_or(DataError::Parse {
                    line: i as u64 + 1,
                    msg: "expected key=value".into(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: &[usize]) -> Dataset {
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let data = (0..labels.len()).map(|i| i as f64).collect();
        Dataset::new(Tensor::matrix(labels.len(), 1, data).unwrap(), labels, per_class.len()).unwrap()
    }

    fn small_spec() -> SyntheticTransferSpec {
        SyntheticTransferSpec {
            input_dim: 6,
            source_classes: 3,
            target_classes: 2,
            samples_per_class: SamplesPerClass {
                source: 5,
                target_train: 4,
                target_test: 3,
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_shift_keeps_the_map() {
        let mut spec = small_spec();
        spec.domain_shift = DomainShift {
            rotation_strength: 0.0,
            noise_scale: 0.0,
        };
        let g = gen_synthetic_transfer(&spec).unwrap();
        assert_eq!(g.source_map, g.target_map);
        let g2 = gen_synthetic_transfer(&small_spec()).unwrap();
        assert_ne!(g2.source_map, g2.target_map);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_transfer(&small_spec()).unwrap();
        let b = gen_synthetic_transfer(&small_spec()).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target_train, b.target_train);
        assert_eq!(a.target_test, b.target_test);
        assert_eq!(a.source.len(), 15);
        assert_eq!(a.target_train.class_counts().values().copied().collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn negative_knobs_are_rejected() {
        let mut spec = small_spec();
        spec.cluster_spread = -1.0;
        assert!(gen_synthetic_transfer(&spec).is_err());
    }

    #[test]
    fn subsample_counts() {
        let ds = toy(&[10, 10, 10]);
        let half = subsample(&ds, 0.5, 1).unwrap();
        assert!(half.class_counts().values().all(|&n| n == 5));

        let ds = toy(&[30, 30]);
        let s = subsample(&ds, 0.15, 1).unwrap();
        // 0.15 * 30 = 4.5 rounds half to even
        assert!(s.class_counts().values().all(|&n| n == 4));

        let tiny = toy(&[1, 2]);
        let s = subsample(&tiny, 0.15, 1).unwrap();
        assert_eq!(s.class_counts().values().copied().collect::<Vec<_>>(), vec![1, 1]);
    }

    #[test]
    fn subsample_full_rate_is_identity() {
        let ds = toy(&[3, 5, 2]);
        assert_eq!(subsample(&ds, 1.0, 99).unwrap(), ds);
        for bad in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(subsample(&ds, bad, 0), Err(DataError::RateOutOfRange(_))));
        }
    }

    #[test]
    fn stratified_counting_example() {
        let ds = toy(&[4, 4, 4, 4]);
        let plan = BatchPlan {
            classes_per_batch: 2,
            samples_per_class: 2,
            drop_incomplete: false,
        };
        let batches = stratified_batches(&ds.labels, &plan, 3).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen = Vec::new();
        for b in &batches {
            assert_eq!(b.len(), 4);
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(ds.labels[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 2);
            assert!(counts.values().all(|&n| n == 2));
            seen.extend_from_slice(b);
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn stratified_infeasible() {
        let ds = toy(&[1, 1, 1]);
        let plan = BatchPlan {
            classes_per_batch: 2,
            samples_per_class: 2,
            drop_incomplete: false,
        };
        assert!(matches!(
            stratified_batches(&ds.labels, &plan, 0),
            Err(DataError::InfeasiblePlan(_))
        ));
        let ds = toy(&[2, 1]);
        let plan = BatchPlan {
            drop_incomplete: true,
            ..plan
        };
        assert!(stratified_batches(&ds.labels, &plan, 0).is_err());
    }

    #[test]
    fn incomplete_last_batch() {
        let ds = toy(&[4, 4, 4]);
        let mut plan = BatchPlan {
            classes_per_batch: 2,
            samples_per_class: 4,
            drop_incomplete: false,
        };
        let b = stratified_batches(&ds.labels, &plan, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 4]);
        plan.drop_incomplete = true;
        let b = stratified_batches(&ds.labels, &plan, 0).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = gen_synthetic_transfer(&small_spec()).unwrap();
        let p = dir.path().join("d.csv");
        save_csv(&g.source, &p).unwrap();
        let back = load_csv(&p, Some(3)).unwrap();
        assert_eq!(back.labels, g.source.labels);
        for (a, b) in back.features.data().iter().zip(g.source.features.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("label,f0,f1,f2,f3,f4,f5\n"));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "label,f0,f1\n0,1.0,2.0\n1,oops,3\n").unwrap();
        match load_csv(&p, None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "label,f0\n0,1.0\n1,2.0,3.0\n").unwrap();
        assert!(matches!(load_csv(&p, None), Err(DataError::Parse { line: 3, .. })));
        fs::write(&p, "").unwrap();
        assert!(matches!(load_csv(&p, None), Err(DataError::Parse { .. })));
        fs::write(&p, "label,f0\n5,1.0\n").unwrap();
        assert!(matches!(
            load_csv(&p, Some(3)),
            Err(DataError::LabelOutOfRange { line: 2, label: 5, classes: 3 })
        ));
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.txt");
        let spec = small_spec();
        write_metadata(&p, &spec.to_metadata()).unwrap();
        let back = SyntheticTransferSpec::from_metadata(&read_metadata(&p).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
