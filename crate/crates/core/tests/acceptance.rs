//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p sbr-lab --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use sbr_lab::autodiff::{Tape, Tensor};
use sbr_lab::harness::selfcheck::{
    center_form_gaps, closed_form_gaps, kappa_equivalence_gaps, lockstep_gaps, probe_gradient_reduce, TinySetup,
};
use sbr_lab::harness::{
    default_experiment, finetune, matched_beta, par_map, Experiment, HarnessError, Method, RunReport, TrainConfig,
};
use sbr_lab::losses::{self, MeasureKind};

const SEED: u64 = 11;
const RATES: [f64; 3] = [0.15, 0.3, 1.0];
/// Half-decade beta grid sized to squared-Euclidean SBR on the synthetic benchmark.
const BETA_GRID: [f64; 3] = [1e-3, 3.16e-3, 1e-2];
const REPORT_SEEDS: usize = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome, HarnessError> {
    Ok(Outcome { passed, detail })
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn criterion_1() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let (value_gap, grad_gap) = center_form_gaps(losses::sbr_pairwise, 200, SEED)?;
    let t = start.elapsed();
    outcome(
        value_gap <= 1e-9 && grad_gap <= 1e-9 && within(t, 10),
        format!("200 batches: value gap {value_gap:.2e}, gradient gap {grad_gap:.2e} (<= 1e-9); {t:.2?} (< 10 s)"),
    )
}

fn criterion_2() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let (closed, fd) = closed_form_gaps(SEED, 50)?;

    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]])?)?;
    let loss = losses::sbr_center(&mut tape, f, &[0, 0])?;
    tape.backward(loss)?;
    let g = tape.grad(f).expect("backward ran");
    let two_point = (g[0] + 2.0).abs().max(g[1].abs());
    let t = start.elapsed();
    outcome(
        fd <= 1e-5 && two_point <= 1e-12 && within(t, 10),
        format!(
            "50 batches: finite-difference error {fd:.2e} (<= 1e-5), closed-form gap {closed:.2e}; \
             two-point gradient ({:.3}, {:.3}) off by {two_point:.1e} (<= 1e-12); {t:.2?} (< 10 s)",
            g[0], g[1]
        ),
    )
}

fn criterion_3a() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let gaps = kappa_equivalence_gaps(0.0, 10.0, 50, SEED)?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        gaps.len() == 50 && worst <= 1e-9 && within(t, 30),
        format!(
            "momentum 0, kappa 10: worst feature-parameter relative gap over {} steps {worst:.2e} (<= 1e-9); {t:.2?} (< 30 s)",
            gaps.len()
        ),
    )
}

fn criterion_3b() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let gaps = kappa_equivalence_gaps(0.9, 10.0, 50, SEED)?;
    let last = gaps.last().copied().unwrap_or(0.0);
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        gaps.len() == 50 && last > 1e-3 && within(t, 30),
        format!(
            "momentum 0.9, kappa 10: relative gap at step 50 {last:.2e} (needs > 1e-3), worst {worst:.2e}; {t:.2?} (< 30 s)"
        ),
    )
}

fn criterion_4() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let mut ok = true;
    let mut worst = 0.0f64;
    for alpha in [0.05, 0.1, 0.5, 1.0] {
        let p = probe_gradient_reduce(alpha, SEED)?;
        ok &= p.forward_identical && p.classifier_identical && p.feature_gap <= 1e-12;
        worst = worst.max(p.feature_gap);
    }
    let t = start.elapsed();
    outcome(
        ok && within(t, 5),
        format!(
            "alphas 0.05/0.1/0.5/1: forward bitwise identity and classifier gradients bitwise equal: {ok}; \
             worst |g_f(alpha) - alpha g_f(1)| {worst:.2e} (<= 1e-12); {t:.2?} (< 5 s)"
        ),
    )
}

fn degeneracy_gaps() -> Result<Vec<f64>, HarnessError> {
    let setup = TinySetup::new(SEED)?;
    let sbr = TrainConfig {
        method: Method::Sbr,
        beta: 0.0,
        alpha: Some(0.1),
        kappa: Some(1.0),
        ..setup.config()
    };
    let baseline = TrainConfig {
        method: Method::BaselineL2,
        ..sbr.clone()
    };
    lockstep_gaps(&setup, &sbr, &baseline, 50, None, SEED)
}

fn criterion_5() -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let gaps = degeneracy_gaps()?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        gaps.len() == 50 && worst <= 1e-12 && within(t, 10),
        format!(
            "beta=0 SBR vs baseline-L2, {} steps: worst parameter relative gap {worst:.2e} (<= 1e-12); {t:.2?} (< 10 s)",
            gaps.len()
        ),
    )
}

fn at_rate(cfg: TrainConfig, rate: f64) -> TrainConfig {
    TrainConfig {
        sampling_rate: rate,
        seed: 0,
        seeds_for_report: REPORT_SEEDS,
        ..cfg
    }
}

fn run_all(exp: &Experiment, cfgs: Vec<TrainConfig>) -> Result<Vec<Result<RunReport, String>>, HarnessError> {
    par_map(cfgs, |cfg| {
        finetune(&cfg, &exp.source, &exp.target_train, &exp.target_test).map_err(|e| e.to_string())
    })
}

/// Mean accuracy of the baseline and of the best-beta SBR run at each rate.
struct Efficacy {
    baseline: Vec<RunReport>,
    sbr_best: Vec<(f64, RunReport)>,
}

fn efficacy(exp: &Experiment) -> Result<Efficacy, HarnessError> {
    let mut cfgs = Vec::new();
    for rate in RATES {
        cfgs.push(at_rate(TrainConfig::baseline(), rate));
        for beta in BETA_GRID {
            cfgs.push(at_rate(TrainConfig::sbr(beta), rate));
        }
    }
    let mut reports = run_all(exp, cfgs)?.into_iter();
    let mut baseline = Vec::new();
    let mut sbr_best = Vec::new();
    for _ in RATES {
        baseline.push(reports.next().expect("baseline run").map_err(HarnessError::Config)?);
        let mut best: Option<(f64, RunReport)> = None;
        for beta in BETA_GRID {
            if let Ok(r) = reports.next().expect("sbr run") {
                if best.as_ref().is_none_or(|(_, b)| r.test_acc_mean > b.test_acc_mean) {
                    best = Some((beta, r));
                }
            }
        }
        sbr_best.push(best.ok_or_else(|| HarnessError::Config("every SBR run failed".into()))?);
    }
    Ok(Efficacy { baseline, sbr_best })
}

fn criterion_6(exp: &Experiment) -> Result<(Outcome, Efficacy), HarnessError> {
    let start = Instant::now();
    let e = efficacy(exp)?;
    let t = start.elapsed();
    let gains: Vec<f64> = e
        .baseline
        .iter()
        .zip(&e.sbr_best)
        .map(|(b, (_, s))| s.test_acc_mean - b.test_acc_mean)
        .collect();
    let every_rate = gains.iter().all(|&g| g > 0.0);
    let monotone = gains[0] >= gains[RATES.len() - 1];
    let cells: Vec<String> = RATES
        .iter()
        .zip(e.baseline.iter().zip(&e.sbr_best))
        .map(|(rate, (b, (beta, s)))| {
            format!(
                "rate {rate}: baseline {:.4}, sbr {:.4} (beta {beta:e}), gain {:+.4}",
                b.test_acc_mean,
                s.test_acc_mean,
                s.test_acc_mean - b.test_acc_mean
            )
        })
        .collect();
    let o = Outcome {
        passed: every_rate && monotone && within(t, 15 * 60),
        detail: format!(
            "{}; SBR ahead at every rate: {every_rate}; gain(0.15) >= gain(1.0): {monotone}; {t:.2?} (< 15 min)",
            cells.join("; ")
        ),
    };
    Ok((o, e))
}

fn criterion_7(exp: &Experiment) -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let rate = RATES[0];
    let mut cfgs = Vec::new();
    let mut betas = Vec::new();
    for m in MeasureKind::ALL {
        for g in BETA_GRID {
            let beta = matched_beta(g, m, &exp.source, &exp.target_train)?;
            betas.push((m, beta));
            cfgs.push(at_rate(
                TrainConfig {
                    measure: m,
                    ..TrainConfig::sbr(beta)
                },
                rate,
            ));
        }
    }
    let reports = run_all(exp, cfgs)?;
    let t = start.elapsed();

    // best completed cell per measure; a measure whose every cell fails has no score
    // (measure, best (accuracy, beta), failed cells)
    type Best = (MeasureKind, Option<(f64, f64)>, usize);
    let mut best: Vec<Best> = Vec::new();
    for m in MeasureKind::ALL {
        let mut b: Option<(f64, f64)> = None;
        let mut failed = 0;
        for ((km, beta), r) in betas.iter().zip(&reports) {
            if *km != m {
                continue;
            }
            match r {
                Ok(r) if b.is_none_or(|(_, acc)| r.test_acc_mean > acc) => b = Some((*beta, r.test_acc_mean)),
                Ok(_) => {}
                Err(_) => failed += 1,
            }
        }
        best.push((m, b, failed));
    }
    let score = |k: MeasureKind| best.iter().find(|(m, _, _)| *m == k).and_then(|(_, b, _)| b.map(|(_, a)| a));
    let beats = |k: MeasureKind| match (score(k), score(MeasureKind::NegInner)) {
        (Some(a), Some(i)) => a > i,
        (Some(_), None) => true,
        _ => false,
    };
    let sq = beats(MeasureKind::SquaredEuclidean);
    let cos = beats(MeasureKind::NegCosine);
    let cells: Vec<String> = best
        .iter()
        .map(|(m, b, failed)| match b {
            Some((beta, acc)) => format!("{}: {acc:.4} (beta {beta:.3e}, {failed}/3 cells diverged)", m.as_str()),
            None => format!("{}: no completed cell ({failed}/3 diverged)", m.as_str()),
        })
        .collect();
    outcome(
        sq && cos && within(t, 10 * 60),
        format!(
            "rate {rate}, betas matched per measure: {}; squared_euclidean beats neg_inner: {sq}; \
             neg_cosine beats neg_inner: {cos}; {t:.2?} (< 10 min)",
            cells.join("; ")
        ),
    )
}

fn criterion_8(exp: &Experiment, first: &Efficacy) -> Result<Outcome, HarnessError> {
    let start = Instant::now();
    let mut same = Vec::new();

    let again = default_experiment()?;
    let ckpt = |e: &Experiment| e.source.to_checkpoint().to_bytes();
    same.push(("pretrained checkpoint", ckpt(exp) == ckpt(&again)));

    let (beta, sbr_first) = &first.sbr_best[0];
    let reruns = run_all(
        exp,
        vec![at_rate(TrainConfig::baseline(), RATES[0]), at_rate(TrainConfig::sbr(*beta), RATES[0])],
    )?;
    let lines = |r: &Result<RunReport, String>| r.as_ref().map(RunReport::metric_lines).unwrap_or_default();
    same.push(("baseline report", lines(&reruns[0]) == first.baseline[0].metric_lines()));
    same.push(("sbr report", lines(&reruns[1]) == sbr_first.metric_lines()));

    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    same.push((
        "kappa lockstep",
        bits(kappa_equivalence_gaps(0.0, 10.0, 50, SEED)?) == bits(kappa_equivalence_gaps(0.0, 10.0, 50, SEED)?),
    ));
    same.push(("degeneracy lockstep", bits(degeneracy_gaps()?) == bits(degeneracy_gaps()?)));
    same.push((
        "center-form gaps",
        center_form_gaps(losses::sbr_pairwise, 200, SEED)? == center_form_gaps(losses::sbr_pairwise, 200, SEED)?,
    ));

    let t = start.elapsed();
    let ok = same.iter().all(|(_, s)| *s);
    let detail: Vec<String> = same.iter().map(|(n, s)| format!("{n} identical: {s}")).collect();
    outcome(ok, format!("{}; {t:.2?}", detail.join("; ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Result<Outcome, HarnessError>)> = vec![
        ("1 center-form identity", criterion_1()),
        ("2 SBR gradient formula", criterion_2()),
        ("3a kappa-equivalence, momentum 0", criterion_3a()),
        ("3b kappa-equivalence breaks with momentum 0.9", criterion_3b()),
        ("4 gradient-reduce contract", criterion_4()),
        ("5 beta=0 degeneracy", criterion_5()),
    ];
    for (name, r) in &results {
        report(name, r);
    }
    let mut later = Vec::new();
    match default_experiment() {
        Ok(exp) => {
            let c6 = criterion_6(&exp);
            let (o6, eff) = match c6 {
                Ok((o, e)) => (Ok(o), Some(e)),
                Err(e) => (Err(e), None),
            };
            later.push(("6 SBR beats baseline, larger gain on less data", o6));
            report(later[0].0, &later[0].1);
            later.push(("7 similarity-measure ordering", criterion_7(&exp)));
            report(later[1].0, &later[1].1);
            let o8 = match &eff {
                Some(e) => criterion_8(&exp, e),
                None => Err(HarnessError::Config("criterion 6 runs unavailable".into())),
            };
            later.push(("8 determinism", o8));
            report(later[2].0, &later[2].1);
        }
        Err(e) => {
            let msg = e.to_string();
            for name in [
                "6 SBR beats baseline, larger gain on less data",
                "7 similarity-measure ordering",
                "8 determinism",
            ] {
                later.push((name, Err(HarnessError::Config(format!("experiment setup failed: {msg}")))));
                report(name, &later.last().expect("pushed").1);
            }
        }
    }
    results.extend(later);
    let failed = results.iter().filter(|(_, r)| !matches!(r, Ok(o) if o.passed)).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(name: &str, r: &Result<Outcome, HarnessError>) {
    match r {
        Ok(o) => println!("{} criterion {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => println!("FAIL criterion {name}: error: {e}"),
    }
}
