use proptest::prelude::*;

use sbr_lab::autodiff::{Tape, Tensor, Var};
use sbr_lab::harness::selfcheck::{self, SelfCheckOptions, CENTER_FORM};
use sbr_lab::losses::{self, ClassGroups, LossError, Measure, MeasureKind};

fn batch() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (1usize..=64, 1usize..=32, 1usize..=10).prop_flat_map(|(n, d, c)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::matrix(n, d, v).unwrap()),
            prop::collection::vec(0..c, n),
        )
    })
}

fn value_and_grad(
    f: &Tensor,
    loss: impl Fn(&mut Tape, Var) -> Result<Var, LossError>,
) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let x = t.leaf(f.clone()).unwrap();
    let out = loss(&mut t, x).unwrap();
    let v = t.value(out).item();
    t.backward(out).unwrap();
    (v, t.grad(x).unwrap().to_vec())
}

const SQ: Measure = Measure {
    kind: MeasureKind::SquaredEuclidean,
    eps: 1e-12,
};

/// Brute-force oracle: sum over classes of the mean over ordered pairs.
fn brute_force(f: &Tensor, labels: &[usize], d: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut total = 0.0;
    for (_, idx) in ClassGroups::from_labels(labels).iter() {
        let n = idx.len();
        if n < 2 {
            continue;
        }
        let mut s = 0.0;
        for &i in idx {
            for &j in idx {
                if i != j {
                    s += d(f.row(i), f.row(j));
                }
            }
        }
        total += s / (n * (n - 1)) as f64;
    }
    total
}

fn half_sq(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

fn permuted(f: &Tensor, labels: &[usize], perm: &[usize]) -> (Tensor, Vec<usize>) {
    (f.select_rows(perm).unwrap(), perm.iter().map(|&i| labels[i]).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_and_center_forms_agree((f, labels) in batch()) {
        let (pv, pg) = value_and_grad(&f, |t, x| losses::sbr_pairwise(t, x, &labels, SQ));
        let (cv, cg) = value_and_grad(&f, |t, x| losses::sbr_center(t, x, &labels));
        prop_assert!((pv - cv).abs() <= 1e-9, "{pv} vs {cv}");
        for (a, b) in pg.iter().zip(&cg) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let oracle = brute_force(&f, &labels, half_sq);
        prop_assert!((pv - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
    }

    #[test]
    fn permutation_invariance((f, labels) in batch(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        // Fisher-Yates with a tiny LCG keeps the test free of extra dependencies
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (pf, pl) = permuted(&f, &labels, &perm);
        for kind in MeasureKind::ALL {
            let m = Measure::new(kind);
            let a = losses::sbr_value(&f, &labels, m).unwrap();
            let b = losses::sbr_value(&pf, &pl, m).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{kind:?}: {a} vs {b}");
        }
        let (a, _) = value_and_grad(&f, |t, x| losses::sbr_center(t, x, &labels));
        let (b, _) = value_and_grad(&pf, |t, x| losses::sbr_center(t, x, &pl));
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn squared_euclidean_is_translation_invariant(
        (f, labels) in batch(),
        shift in prop::collection::vec(-5.0f64..5.0, 32),
    ) {
        let d = f.cols();
        let mut g = f.clone();
        for (k, v) in g.data_mut().iter_mut().enumerate() {
            *v += shift[k % d];
        }
        let a = losses::sbr_value(&f, &labels, SQ).unwrap();
        let b = losses::sbr_value(&g, &labels, SQ).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn squared_euclidean_is_nonnegative((f, labels) in batch()) {
        prop_assert!(losses::sbr_value(&f, &labels, SQ).unwrap() >= 0.0);
    }

    #[test]
    fn closed_form_gradient_matches_tape((f, labels) in batch()) {
        let (_, g) = value_and_grad(&f, |t, x| losses::sbr_center(t, x, &labels));
        let cf = losses::sbr_center_closed_form_grad(&f, &labels);
        for (a, b) in g.iter().zip(cf.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn neg_inner_is_not_translation_invariant() {
    let f = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.7, 0.1]]).unwrap();
    let g = Tensor::from_rows(&[vec![2.0, 1.5], vec![0.7, 3.0], vec![1.7, 1.1]]).unwrap();
    let labels = [0, 0, 0];
    let m = Measure::new(MeasureKind::NegInner);
    let a = losses::sbr_value(&f, &labels, m).unwrap();
    let b = losses::sbr_value(&g, &labels, m).unwrap();
    assert!((a - b).abs() > 1e-3, "{a} vs {b}");
}

#[test]
fn zero_exactly_when_classes_are_constant() {
    let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 5.0], vec![1.0, 2.0], vec![5.0, 5.0], vec![9.0, 0.0]]).unwrap();
    let labels = [0, 1, 0, 1, 2];
    assert_eq!(losses::sbr_value(&f, &labels, SQ).unwrap(), 0.0);
    let mut g = f.clone();
    g.data_mut()[0] += 1e-3;
    assert!(losses::sbr_value(&g, &labels, SQ).unwrap() > 0.0);
}

#[test]
fn class_locality() {
    let f = Tensor::from_rows(&[vec![0.3, 1.0], vec![2.0, -1.0], vec![0.9, 0.4], vec![-1.5, 0.2], vec![0.0, 0.7]]).unwrap();
    let labels = [0, 1, 0, 1, 1];
    let class1 = [1usize, 3, 4];
    let only1 = |t: &Tensor| {
        let sub = t.select_rows(&class1).unwrap();
        losses::sbr_value(&sub, &[1, 1, 1], SQ).unwrap()
    };
    let mut g = f.clone();
    g.data_mut()[0] += 0.8; // a class-0 feature
    assert_eq!(only1(&f).to_bits(), only1(&g).to_bits());
    let (_, grad) = value_and_grad(&g, |t, x| losses::sbr_pairwise(t, x, &labels, SQ));
    let (_, base) = value_and_grad(&f, |t, x| losses::sbr_pairwise(t, x, &labels, SQ));
    for &i in &class1 {
        assert_eq!(&grad[2 * i..2 * i + 2], &base[2 * i..2 * i + 2]);
    }
}

#[test]
fn singleton_classes_contribute_nothing() {
    let f = Tensor::from_rows(&[vec![1.0], vec![4.0], vec![-7.0]]).unwrap();
    for kind in MeasureKind::ALL {
        assert_eq!(losses::sbr_value(&f, &[0, 1, 2], Measure::new(kind)).unwrap(), 0.0);
    }
}

#[test]
fn cosine_ignores_zero_vectors() {
    let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
    let v = losses::sbr_value(&f, &[0, 0], Measure::new(MeasureKind::NegCosine)).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn measures_match_brute_force() {
    let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![2.0, 2.0]]).unwrap();
    let labels = [0, 0, 1, 0];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    type Dist<'a> = Box<dyn Fn(&[f64], &[f64]) -> f64 + 'a>;
    let cases: [(MeasureKind, Dist<'_>); 3] = [
        (MeasureKind::SquaredEuclidean, Box::new(half_sq)),
        (MeasureKind::NegCosine, Box::new(move |a, b| -dot(a, b) / (norm(a) * norm(b) + 1e-12))),
        (MeasureKind::NegInner, Box::new(move |a, b| -dot(a, b))),
    ];
    for (kind, d) in cases {
        let expected = brute_force(&f, &labels, d);
        let got = losses::sbr_value(&f, &labels, Measure::new(kind)).unwrap();
        assert!((got - expected).abs() < 1e-12, "{kind:?}: {got} vs {expected}");
    }
}

/// Mis-normalized pairwise SBR: divides each class by `N_c^2` instead of `N_c (N_c - 1)`.
fn mis_normalized(tape: &mut Tape, features: Var, labels: &[usize], m: Measure) -> Result<Var, LossError> {
    let mut total = tape.leaf(Tensor::scalar(0.0))?;
    for (_, idx) in ClassGroups::from_labels(labels).iter() {
        if idx.len() < 2 {
            continue;
        }
        let n = idx.len() as f64;
        let rows = tape.gather_rows(features, idx)?;
        let own = losses::sbr_pairwise(tape, rows, &vec![0; idx.len()], m)?;
        let scaled = tape.scale(own, (n - 1.0) / n)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[test]
fn mis_normalized_pairwise_fails_the_center_form_check() {
    let report = selfcheck::selfcheck(&SelfCheckOptions {
        pairwise: mis_normalized,
        ..SelfCheckOptions::default()
    });
    let c = report.get(CENTER_FORM).unwrap();
    assert!(!c.passed, "{}", c.detail);
    assert!(!report.passed());
}

#[test]
fn fresh_selfcheck_passes() {
    let report = selfcheck::selfcheck(&SelfCheckOptions::default());
    assert!(report.passed(), "{:#?}", report.lines());
    assert_eq!(report.checks.len(), 5);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let z = t.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap()).unwrap();
    let l = losses::cross_entropy(&mut t, z, &[2]).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let mut t = Tape::new();
    let z = t.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap()).unwrap();
    let l = losses::cross_entropy(&mut t, z, &[1]).unwrap();
    assert_eq!(t.value(l).item(), 1000.0);
    assert!(matches!(
        losses::cross_entropy(&mut t, z, &[5]),
        Err(LossError::LabelOutOfRange { label: 5, classes: 2 })
    ));
}
