//! Classification loss, sample-based feature regularization and baseline
//! regularizers.
//!
//! SBR pulls same-class features within a minibatch toward each other:
//!
//! ```text
//! L_sbr = sum_c 1 / (N_c (N_c - 1)) * sum_{i != j in B_c} D(f_i, f_j)
//! ```
//!
//! With `D(a, b) = 1/2 |a - b|^2` this equals the center form
//! `sum_c 1 / (N_c - 1) * sum_{i in B_c} |f_i - C_c|^2`, where `C_c` is the
//! batch mean of class `c`. Classes with fewer than two samples contribute 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch has {rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("snapshot does not cover parameter {0}")]
    SnapshotMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    #[default]
    SquaredEuclidean,
    NegCosine,
    NegInner,
}

impl MeasureKind {
    pub const ALL: [MeasureKind; 3] = [Self::SquaredEuclidean, Self::NegCosine, Self::NegInner];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SquaredEuclidean => "squared_euclidean",
            Self::NegCosine => "neg_cosine",
            Self::NegInner => "neg_inner",
        }
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown measure {s:?}"))
    }
}

/// Pairwise dissimilarity between two feature vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measure {
    pub kind: MeasureKind,
    /// Added to the cosine denominator.
    pub eps: f64,
}

impl Measure {
    pub const DEFAULT_EPS: f64 = 1e-12;

    pub fn new(kind: MeasureKind) -> Self {
        Self {
            kind,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            MeasureKind::SquaredEuclidean => {
                0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            }
            MeasureKind::NegInner => -dot(a, b),
            MeasureKind::NegCosine => -dot(a, b) / (norm(a) * norm(b) + self.eps),
        }
    }

    /// Gradient of `D(a, b)` with respect to `a`, accumulated into `out`.
    fn accumulate_grad_a(&self, a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
        match self.kind {
            MeasureKind::SquaredEuclidean => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o += scale * (x - y);
                }
            }
            MeasureKind::NegInner => {
                for (o, y) in out.iter_mut().zip(b) {
                    *o -= scale * y;
                }
            }
            MeasureKind::NegCosine => {
                let (na, nb) = (norm(a), norm(b));
                let den = na * nb + self.eps;
                let s = dot(a, b);
                // d/da [-s / den] = -b / den + s * nb * a / (na * den^2)
                let radial = if na > 0.0 { s * nb / (na * den * den) } else { 0.0 };
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o += scale * (-y / den + radial * x);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row indices of each class present in a batch, ordered by class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassGroups {
    groups: Vec<(usize, Vec<usize>)>,
}

impl ClassGroups {
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            map.entry(y).or_default().push(i);
        }
        Self {
            groups: map.into_iter().collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.groups.iter().map(|(c, idx)| (*c, idx.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Ordered same-class pairs `N_c (N_c - 1)`.
    pub fn n_pair(n: usize) -> usize {
        n * n.saturating_sub(1)
    }

    /// Mean feature of one class.
    pub fn center(features: &Tensor, indices: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; features.cols()];
        for &i in indices {
            for (o, v) in c.iter_mut().zip(features.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / indices.len() as f64;
        c.iter_mut().for_each(|o| *o *= inv);
        c
    }
}

fn check_batch(tape: &Tape, x: Var, labels: &[usize]) -> Result<()> {
    let t = tape.value(x);
    if t.rank() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "batch",
            left: t.shape().to_vec(),
            right: vec![labels.len(), t.cols()],
        }
        .into());
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if t.rows() != labels.len() {
        return Err(LossError::LabelCount {
            rows: t.rows(),
            labels: labels.len(),
        });
    }
    Ok(())
}

struct CrossEntropyOp {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let c = inputs[0].cols();
        let scale = grad_out[0] / self.labels.len() as f64;
        let mut g: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            g[i * c + y] -= scale;
        }
        vec![g]
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_batch(tape, logits, labels)?;
    let t = tape.value(logits);
    let c = t.cols();
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(LossError::LabelOutOfRange { label, classes: c });
    }
    let mut probs = Vec::with_capacity(t.numel());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = t.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        total += m + s.ln() - row[y];
        probs.extend(exps.iter().map(|e| e / s));
    }
    let value = Tensor::scalar(total / labels.len() as f64);
    let op = CrossEntropyOp {
        labels: labels.to_vec(),
        probs,
    };
    Ok(tape.custom(&[logits], value, Box::new(op))?)
}

struct PairwiseSbrOp {
    groups: ClassGroups,
    measure: Measure,
}

impl CustomOp for PairwiseSbrOp {
    fn name(&self) -> &'static str {
        "sbr_pairwise"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let f = inputs[0];
        let d = f.cols();
        let mut g = vec![0.0; f.numel()];
        for (_, idx) in self.groups.iter() {
            let n_pair = ClassGroups::n_pair(idx.len());
            if n_pair == 0 {
                continue;
            }
            let w = grad_out[0] / n_pair as f64;
            // every ordered pair (i, j) touches f_i through the first slot and
            // f_j through the second; D is symmetric so both use grad_a
            for &i in idx {
                for &j in idx {
                    if i == j {
                        continue;
                    }
                    let (gi, gj) = if i < j {
                        let (lo, hi) = g.split_at_mut(j * d);
                        (&mut lo[i * d..(i + 1) * d], &mut hi[..d])
                    } else {
                        let (lo, hi) = g.split_at_mut(i * d);
                        (&mut hi[..d], &mut lo[j * d..(j + 1) * d])
                    };
                    self.measure.accumulate_grad_a(f.row(i), f.row(j), w, gi);
                    self.measure.accumulate_grad_a(f.row(j), f.row(i), w, gj);
                }
            }
        }
        vec![g]
    }
}

/// SBR by explicit enumeration of ordered same-class pairs, `O(N_c^2)` per class.
pub fn sbr_pairwise(tape: &mut Tape, features: Var, labels: &[usize], measure: Measure) -> Result<Var> {
    check_batch(tape, features, labels)?;
    let f = tape.value(features);
    let groups = ClassGroups::from_labels(labels);
    let mut total = 0.0;
    for (_, idx) in groups.iter() {
        let n_pair = ClassGroups::n_pair(idx.len());
        if n_pair == 0 {
            continue;
        }
        let mut s = 0.0;
        for &i in idx {
            for &j in idx {
                if i != j {
                    s += measure.eval(f.row(i), f.row(j));
                }
            }
        }
        total += s / n_pair as f64;
    }
    let op = PairwiseSbrOp { groups, measure };
    Ok(tape.custom(&[features], Tensor::scalar(total), Box::new(op))?)
}

/// Squared-Euclidean SBR through per-class batch centers, `O(N_c)` per class.
///
/// Built from tape primitives, so its gradient flows through the class means.
pub fn sbr_center(tape: &mut Tape, features: Var, labels: &[usize]) -> Result<Var> {
    check_batch(tape, features, labels)?;
    let groups = ClassGroups::from_labels(labels);
    let mut total: Option<Var> = None;
    for (_, idx) in groups.iter() {
        let n = idx.len();
        if n < 2 {
            continue;
        }
        let rows = tape.gather_rows(features, idx)?;
        let center = tape.column_means(rows)?;
        let diff = tape.sub(rows, center)?;
        let sq = tape.squared_l2(diff)?;
        let term = tape.scale(sq, 1.0 / (n - 1) as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.leaf(Tensor::scalar(0.0))?),
    }
}

/// SBR value on plain tensors, for reporting.
pub fn sbr_value(features: &Tensor, labels: &[usize], measure: Measure) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone())?;
    let v = sbr(&mut tape, f, labels, measure)?;
    Ok(tape.value(v).item())
}

/// SBR with the cheapest exact route: center form for squared Euclidean,
/// pair enumeration otherwise.
pub fn sbr(tape: &mut Tape, features: Var, labels: &[usize], measure: Measure) -> Result<Var> {
    match measure.kind {
        MeasureKind::SquaredEuclidean => sbr_center(tape, features, labels),
        _ => sbr_pairwise(tape, features, labels, measure),
    }
}

/// `2 / (N_c - 1) * (f_i - C_c)` for every row, zero for singleton classes.
pub fn sbr_center_closed_form_grad(features: &Tensor, labels: &[usize]) -> Tensor {
    let d = features.cols();
    let mut g = Tensor::zeros(features.shape().to_vec());
    for (_, idx) in ClassGroups::from_labels(labels).iter() {
        if idx.len() < 2 {
            continue;
        }
        let c = ClassGroups::center(features, idx);
        let k = 2.0 / (idx.len() - 1) as f64;
        for &i in idx {
            let row = features.row(i);
            for (j, o) in g.data_mut()[i * d..(i + 1) * d].iter_mut().enumerate() {
                *o = k * (row[j] - c[j]);
            }
        }
    }
    g
}

/// Plain L2 penalty `sum |w|^2` over the given parameters.
pub fn l2_reg(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in params {
        let s = tape.squared_l2(p)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.leaf(Tensor::scalar(0.0))?),
    }
}

/// `sp_alpha * |w_f - w_f*|^2 + sp_beta * |w_g|^2`.
///
/// `feature` pairs each feature-extractor variable with its frozen source value.
pub fn l2sp_reg(
    tape: &mut Tape,
    feature: &[(Var, &Tensor)],
    classifier: &[Var],
    sp_alpha: f64,
    sp_beta: f64,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (i, &(w, star)) in feature.iter().enumerate() {
        if tape.value(w).shape() != star.shape() {
            return Err(LossError::SnapshotMismatch(format!("feature parameter #{i}")));
        }
        let s = tape.leaf(star.clone())?;
        let d = tape.sub(w, s)?;
        terms.push(tape.squared_l2(d)?);
    }
    let mut total = tape.leaf(Tensor::scalar(0.0))?;
    for t in terms {
        total = tape.add(total, t)?;
    }
    let anchor = tape.scale(total, sp_alpha)?;
    let shrink = l2_reg(tape, classifier)?;
    let shrink = tape.scale(shrink, sp_beta)?;
    Ok(tape.add(anchor, shrink)?)
}

/// Mean over the batch of `|f_i - f_i^source|^2`; the source features are constants.
pub fn delta_lite_reg(tape: &mut Tape, features: Var, source_features: &Tensor) -> Result<Var> {
    let t = tape.value(features);
    if t.shape() != source_features.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "delta_lite_reg",
            left: t.shape().to_vec(),
            right: source_features.shape().to_vec(),
        }
        .into());
    }
    let rows = t.rows() as f64;
    let s = tape.leaf(source_features.clone())?;
    let d = tape.sub(features, s)?;
    let sq = tape.squared_l2(d)?;
    Ok(tape.scale(sq, 1.0 / rows)?)
}

/// Scalars of the two-part objective.
///
/// `objective` is the single tape scalar to differentiate. The classifier
/// sees `L_g = L_cls + reg`; because the classifier input passed through the
/// gradient-reduce layer, the feature extractor receives
/// `alpha * dL_cls + beta * dL_sbr + d reg`.
#[derive(Clone, Copy, Debug)]
pub struct ComposedLoss {
    pub objective: Var,
    pub cls: f64,
    pub sbr: f64,
    pub reg: f64,
    pub l_g: f64,
    pub l_f: f64,
}

pub fn compose_losses(
    tape: &mut Tape,
    cls: Var,
    sbr: Option<Var>,
    reg: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<ComposedLoss> {
    if beta < 0.0 || beta.is_nan() {
        return Err(LossError::NegativeBeta(beta));
    }
    let cls_v = tape.value(cls).item();
    let mut objective = cls;
    let mut sbr_v = 0.0;
    if let Some(s) = sbr {
        sbr_v = tape.value(s).item();
        let weighted = tape.scale(s, beta)?;
        objective = tape.add(objective, weighted)?;
    }
    let mut reg_v = 0.0;
    if let Some(r) = reg {
        reg_v = tape.value(r).item();
        objective = tape.add(objective, r)?;
    }
    Ok(ComposedLoss {
        objective,
        cls: cls_v,
        sbr: sbr_v,
        reg: reg_v,
        l_g: cls_v + reg_v,
        l_f: alpha * cls_v + beta * sbr_v + reg_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[vec![0.3; 4]]);
        let l = cross_entropy(&mut tape, z, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let z = leaf(&mut tape, &[vec![1.0, 0.0]]);
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(l).item() - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.313262).abs() < 1e-6);

        let z = leaf(&mut tape, &[vec![1000.0, 0.0]]);
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        let v = tape.value(l).item();
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_range() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[vec![0.0, 0.0]]);
        assert_eq!(
            cross_entropy(&mut tape, z, &[2]),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        );
        assert!(matches!(
            cross_entropy(&mut tape, z, &[0, 1]),
            Err(LossError::LabelCount { .. })
        ));
    }

    #[test]
    fn pairwise_examples() {
        let se = Measure::new(MeasureKind::SquaredEuclidean);
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(sbr_pairwise_value(&f, &[0, 0], se), 2.0);

        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(sbr_pairwise_value(&f, &[0, 0, 1], se), 2.0);

        let f = Tensor::from_rows(&[vec![1.0, 3.0], vec![1.0, 3.0], vec![-2.0, 0.5], vec![-2.0, 0.5]]).unwrap();
        assert_eq!(sbr_pairwise_value(&f, &[0, 0, 1, 1], se), 0.0);

        let cos = Measure::new(MeasureKind::NegCosine);
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!((sbr_pairwise_value(&f, &[3, 3], cos) + 1.0).abs() < 1e-9);
    }

    fn sbr_pairwise_value(f: &Tensor, labels: &[usize], m: Measure) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(f.clone()).unwrap();
        let l = sbr_pairwise(&mut tape, v, labels, m).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn center_examples() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[vec![0.0, 0.0], vec![2.0, 0.0]]);
        let l = sbr_center(&mut tape, f, &[0, 0]).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        tape.backward(l).unwrap();
        let g = tape.grad(f).unwrap();
        assert!((g[0] + 2.0).abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn singletons_contribute_zero_and_get_zero_grad() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let l = sbr_center(&mut tape, f, &[0, 1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(f).unwrap(), &[0.0; 4]);
        let se = Measure::new(MeasureKind::SquaredEuclidean);
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(sbr_pairwise_value(&t, &[0, 1], se), 0.0);
    }

    #[test]
    fn neg_cosine_zero_vector_contributes_zero() {
        let cos = Measure::new(MeasureKind::NegCosine);
        assert_eq!(cos.eval(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(sbr_pairwise_value(&f, &[0, 0], cos), 0.0);
    }

    #[test]
    fn measures_are_symmetric() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.1, 0.4, -0.7];
        for k in MeasureKind::ALL {
            let m = Measure::new(k);
            assert_eq!(m.eval(&a, &b), m.eval(&b, &a));
        }
    }

    #[test]
    fn closed_form_grad_example() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let g = sbr_center_closed_form_grad(&f, &[0, 0, 1]);
        assert_eq!(g.data(), &[-2.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn baseline_regularizers() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        let l = l2_reg(&mut tape, &[w]).unwrap();
        assert_eq!(tape.value(l).item(), 25.0);

        let star = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let wg = tape.leaf(Tensor::zeros(vec![2, 2])).unwrap();
        let l = l2sp_reg(&mut tape, &[(w, &star)], &[wg], 0.1, 0.01).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let bad = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            l2sp_reg(&mut tape, &[(w, &bad)], &[], 0.1, 0.01),
            Err(LossError::SnapshotMismatch(_))
        ));

        let src = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let f = tape.leaf(src.clone()).unwrap();
        let l = delta_lite_reg(&mut tape, f, &src).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn l2sp_value_and_source_has_no_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let star = Tensor::vector(vec![0.0, 2.0]).unwrap();
        let wg = tape.leaf(Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let l = l2sp_reg(&mut tape, &[(w, &star)], &[wg], 0.5, 0.25).unwrap();
        // 0.5 * 2 + 0.25 * 4
        assert_eq!(tape.value(l).item(), 2.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, -1.0]);
        assert_eq!(tape.grad(wg).unwrap(), &[1.0]);
    }

    #[test]
    fn compose_rejects_negative_beta() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            compose_losses(&mut tape, c, None, None, 0.1, -1.0).unwrap_err(),
            LossError::NegativeBeta(-1.0)
        );
        let s = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let r = tape.leaf(Tensor::scalar(0.5)).unwrap();
        let out = compose_losses(&mut tape, c, Some(s), Some(r), 0.1, 1e-4).unwrap();
        assert_eq!(out.l_g, 1.5);
        assert!((out.l_f - (0.1 + 2e-4 + 0.5)).abs() < 1e-15);
        assert!((tape.value(out.objective).item() - (1.0 + 2e-4 + 0.5)).abs() < 1e-15);
    }
}
