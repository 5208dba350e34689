//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness) so
//! that every criterion prints its PASS/FAIL line; exits nonzero on any failure.

use std::fs;
use std::time::{Duration, Instant};

use learn2help::evaluation::matched_coverage_gaps;
use learn2help::losses::{client_error_prob, generalized_loss, select_alpha, surrogate_loss, surrogate_partials};
use learn2help::oracle::{
    bayes_rejector, brute_min_conditional, closed_form_estar, closed_form_rstar, posterior_cost_compare, unit_grid,
    violations, Decision,
};
use learn2help::rng::rng_for;
use learn2help::{Activation, Architecture, CalibrationSpec, ConditionalPoint, CostSpec, Label, Method, Scorer};
use learn2help_cli::commands::{self, CompareOutcome, EvalOutcome};
use learn2help_cli::config::ExperimentConfig;
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
}

fn report(c: &Criterion, elapsed: Duration, outcome: Outcome) -> bool {
    let over = c.budget.is_some_and(|b| elapsed > b);
    let (ok, detail) = match outcome {
        Ok(d) if !over => (true, d),
        Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget.unwrap())),
        Err(d) => (false, d),
    };
    println!(
        "{} [{:>2}] {}: {} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        c.id,
        c.name,
        detail,
        elapsed.as_secs_f64()
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn random_costs(rng: &mut impl Rng) -> CostSpec<f64> {
    CostSpec::new(rng.random_range(0.05..2.0), rng.random_range(0.0..1.0)).unwrap()
}

fn surrogate_dominance() -> Outcome {
    let mut rng = rng_for(1, 100);
    let calib = CalibrationSpec::new(0.5, 2.0).unwrap();
    let mut bad = 0;
    let n = 100_000;
    for _ in 0..n {
        let c = random_costs(&mut rng);
        let (m, e, r): (f64, f64, f64) = (
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        let y = Label::from_sign(rng.random_bool(0.5));
        let alpha = select_alpha(rng.random_range(0.0..=1.0), &c, &calib);
        let wrong = m * y.sign::<f64>() <= 0.0;
        if surrogate_loss(wrong, e, r, y, &c, alpha, 2.0) < generalized_loss(m, e, r, y, &c) {
            bad += 1;
        }
    }
    if bad == 0 {
        Ok(format!("{n} tuples, 0 violations"))
    } else {
        Err(format!("{bad} of {n} tuples violate"))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn gradient_correctness() -> Outcome {
    let mut rng = rng_for(2, 100);
    let mut worst: f64 = 0.0;
    let mut scorer_cases = 0;
    while scorer_cases < 1000 {
        let input = rng.random_range(1..=4);
        let arch = if rng.random_bool(0.2) {
            Architecture::Linear { input }
        } else {
            let mut widths = vec![input];
            for _ in 0..rng.random_range(1..=2) {
                widths.push(rng.random_range(1..=6));
            }
            widths.push(1);
            let act = if rng.random_bool(0.5) {
                Activation::Relu
            } else {
                Activation::Identity
            };
            Architecture::mlp(&widths, act)
        };
        let params: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = Scorer::from_params(arch, params).unwrap();
        let (_, tape) = s.forward(&x).unwrap();
        // Finite differences straddling a ReLU kink are meaningless.
        if tape.distance_to_kink().is_some_and(|d| d < 1e-3) {
            continue;
        }
        let analytic = s.backward(&tape, 1.0).unwrap();
        let numeric = s.numeric_param_grad(&x, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
        scorer_cases += 1;
    }
    let h = 1e-3;
    let stencil = |g: &dyn Fn(f64) -> f64, t: f64| {
        (g(t - 2.0 * h) - 8.0 * g(t - h) + 8.0 * g(t + h) - g(t + 2.0 * h)) / (12.0 * h)
    };
    let loss_cases = 1000;
    for _ in 0..loss_cases {
        let c = random_costs(&mut rng);
        let alpha: f64 = rng.random_range(0.2..3.0);
        let (e, r): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let y = Label::from_sign(rng.random_bool(0.5));
        let wrong = rng.random_bool(0.5);
        let f = |e, r| surrogate_loss(wrong, e, r, y, &c, alpha, 2.0);
        let (de, dr) = surrogate_partials(wrong, e, r, y, &c, alpha, 2.0);
        worst = worst.max(rel_err(de, stencil(&|t| f(t, r), e)));
        worst = worst.max(rel_err(dr, stencil(&|t| f(e, t), r)));
    }
    let msg = format!("{scorer_cases} scorer + {loss_cases} surrogate cases, worst relative error {worst:.2e}");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn grid_costs() -> Vec<CostSpec<f64>> {
    ExperimentConfig::default().verify.grid_costs
}

fn bayes_equivalence() -> Outcome {
    let axis: Vec<f64> = unit_grid(100, true);
    let (mut checked, mut ties, mut bad) = (0, 0, 0);
    for c in grid_costs() {
        for &eta in &axis {
            for &q in &axis {
                let p = ConditionalPoint::new(eta, q, c).unwrap();
                let r = bayes_rejector(eta, p.p_err, &c);
                if r.abs() <= 1e-12 {
                    ties += 1;
                    continue;
                }
                checked += 1;
                let expect = if r <= 0.0 { Decision::Defer } else { Decision::Local };
                bad += usize::from(posterior_cost_compare(&p) != expect);
            }
        }
    }
    let msg = format!("{checked} points checked, {ties} in the tie band, {bad} disagreements");
    if bad == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sign_consistency(cfg: &ExperimentConfig) -> Outcome {
    let grid = commands::verify_grid(cfg).map_err(|e| e.to_string())?;
    let bad = violations(&grid);
    let boundary = grid.iter().filter(|r| r.boundary).count();
    let msg = format!(
        "{} grid points, {boundary} in boundary bands, {} violations",
        grid.len(),
        bad.len()
    );
    if bad.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; first: {:?}", bad[0]))
    }
}

fn closed_form_agreement() -> Outcome {
    let mut rng = rng_for(5, 100);
    let calib = CalibrationSpec::new(0.5, 2.0).unwrap();
    let (mut accepted, mut worst_e, mut worst_r): (usize, f64, f64) = (0, 0.0, 0.0);
    while accepted < 200 {
        let c = random_costs(&mut rng);
        let p = ConditionalPoint::new(rng.random_range(0.01..0.99), rng.random_range(0.0..=1.0), c).unwrap();
        // Keep minimizers strictly inside the search box.
        if p.p_err < 1e-3 {
            continue;
        }
        let alpha = select_alpha(p.p_err, &c, &calib);
        let r0 = closed_form_rstar(p.eta, p.p_err, &c, alpha);
        if r0.abs() > 14.0 {
            continue;
        }
        let e0 = closed_form_estar(p.eta, 2.0);
        let (e, r) = brute_min_conditional(&p, alpha, 2.0);
        worst_e = worst_e.max((e - e0).abs());
        worst_r = worst_r.max((r - r0).abs());
        accepted += 1;
    }
    let msg = format!("200 points, max |e - e*| {worst_e:.1e}, max |r - r*| {worst_r:.1e}");
    if worst_e < 1e-3 && worst_r < 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn error_identity() -> Outcome {
    let mut rng = rng_for(6, 100);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (q, eta): (f64, f64) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let mut cells = 0.0;
        for (m_pos, pm) in [(true, q), (false, 1.0 - q)] {
            for (y_pos, py) in [(true, eta), (false, 1.0 - eta)] {
                if m_pos != y_pos {
                    cells += pm * py;
                }
            }
        }
        worst = worst.max((client_error_prob(q, eta) - cells).abs());
    }
    let msg = format!("10000 pairs, max deviation {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn collaboration_gain(eval: &EvalOutcome, cmp: &CompareOutcome) -> Outcome {
    let joint = eval.test.accuracy;
    let msg = format!(
        "joint {joint:.4}, client {:.4}, expert alone {:.4}",
        cmp.client_accuracy, cmp.expert_alone_accuracy
    );
    if joint >= cmp.client_accuracy + 0.05 && (joint - cmp.expert_alone_accuracy).abs() <= 0.03 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn coverage_monotone(cmp: &CompareOutcome) -> Outcome {
    let joint = cmp.curve(Method::Learn2helpJoint);
    let covs: Vec<String> = joint.iter().map(|p| format!("{}:{:.4}", p.knob, p.coverage)).collect();
    let worst = joint
        .windows(2)
        .map(|w| w[1].coverage - w[0].coverage)
        .fold(f64::NEG_INFINITY, f64::max);
    let msg = format!("ce:coverage {}; largest increase {worst:.4}", covs.join(" "));
    if worst <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn baseline_dominance(cmp: &CompareOutcome) -> Outcome {
    let joint = cmp.curve(Method::Learn2helpJoint);
    let mut parts = Vec::new();
    let mut ok = true;
    for m in [Method::ConfidenceSigmoid, Method::ConfidenceDistance] {
        let gaps = matched_coverage_gaps(&joint, &cmp.curve(m), 0.1, 0.9, 0.01);
        if gaps.is_empty() {
            ok = false;
            parts.push(format!("{m}: no common coverage in [0.1, 0.9]"));
            continue;
        }
        let min = gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
        let max = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = (gaps[0].0, gaps[gaps.len() - 1].0);
        ok &= min >= -0.01 && max >= 0.02;
        parts.push(format!(
            "{m}: gap in [{min:.4}, {max:.4}] over coverage [{lo:.2}, {hi:.2}]"
        ));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn deferred_gap(eval: &EvalOutcome) -> Outcome {
    match eval.deferred_gap {
        Some(g) if g >= 0.2 => Ok(format!("expert - client on deferred = {g:.4}")),
        Some(g) => Err(format!("expert - client on deferred = {g:.4}")),
        None => Err("nothing was deferred".into()),
    }
}

fn rate_slope(cfg: &ExperimentConfig) -> Outcome {
    let report = commands::verify_slope(cfg)
        .map_err(|e| e.to_string())?
        .ok_or("no synthetic task")?;
    let pts: Vec<String> = report
        .points
        .iter()
        .map(|p| format!("n={}: {:.5}", p.n, p.mean_gap))
        .collect();
    let msg = format!("slope {:.4} (mean gaps {})", report.slope, pts.join(", "));
    if (-0.7..=-0.3).contains(&report.slope) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reproducible_training(base: &ExperimentConfig, root: &std::path::Path) -> Outcome {
    let mut dirs = Vec::new();
    for name in ["repro_a", "repro_b"] {
        let cfg = ExperimentConfig {
            out_dir: root.join(name),
            ..base.clone()
        };
        commands::cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
        commands::cmd_train(&cfg).map_err(|e| e.to_string())?;
        dirs.push(cfg.out_dir);
    }
    let files = [
        "client.json",
        "rejector.json",
        "expert.json",
        "train_log.csv",
        "train_log.meta.json",
    ];
    for f in files {
        let a = fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between reruns"));
        }
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig {
        out_dir: tmp.path().join("standard"),
        ..ExperimentConfig::default()
    };
    let secs = Duration::from_secs;
    let crit = |id, name, budget| Criterion { id, name, budget };
    let mut all = true;

    let (o, t) = timed(surrogate_dominance);
    all &= report(&crit(1, "surrogate dominance", Some(secs(5))), t, o);
    let (o, t) = timed(gradient_correctness);
    all &= report(&crit(2, "gradient correctness", Some(secs(30))), t, o);
    let (o, t) = timed(bayes_equivalence);
    all &= report(&crit(3, "Bayes-rule equivalence", Some(secs(10))), t, o);
    let (o, t) = timed(|| sign_consistency(&cfg));
    all &= report(&crit(4, "calibration sign consistency", Some(secs(300))), t, o);
    let (o, t) = timed(closed_form_agreement);
    all &= report(&crit(5, "closed-form agreement", Some(secs(60))), t, o);
    let (o, t) = timed(error_identity);
    all &= report(&crit(6, "error-probability identity", None), t, o);

    // Criteria 7-10 share the standard run: generate, train, evaluate, compare.
    let (run, t_train) = timed(|| -> Result<EvalOutcome, String> {
        commands::cmd_gen_data(&cfg).map_err(|e| e.to_string())?;
        commands::cmd_train(&cfg).map_err(|e| e.to_string())?;
        commands::cmd_eval(&cfg).map_err(|e| e.to_string())
    });
    let (cmp, t_cmp) = timed(|| commands::cmd_compare(&cfg).map_err(|e| e.to_string()));
    let c7 = crit(7, "collaboration gain", Some(secs(120)));
    let c8 = crit(8, "coverage-cost monotonicity", Some(secs(600)));
    let c9 = crit(9, "baseline dominance", Some(secs(600)));
    let c10 = crit(10, "cross-partition gap", None);
    match (&run, &cmp) {
        (Ok(eval), Ok(cmp)) => {
            all &= report(&c7, t_train, collaboration_gain(eval, cmp));
            all &= report(&c8, t_cmp, coverage_monotone(cmp));
            all &= report(&c9, t_cmp, baseline_dominance(cmp));
            all &= report(&c10, t_train, deferred_gap(eval));
        }
        _ => {
            let err = run.err().or(cmp.err()).unwrap_or_default();
            for c in [&c7, &c8, &c9, &c10] {
                all &= report(c, t_train + t_cmp, Err(err.clone()));
            }
        }
    }

    let (o, t) = timed(|| rate_slope(&cfg));
    all &= report(&crit(11, "risk-gap rate", Some(secs(900))), t, o);
    let (o, t) = timed(|| reproducible_training(&cfg, tmp.path()));
    all &= report(&crit(12, "reproducibility", None), t, o);

    if !all {
        std::process::exit(1);
    }
}
