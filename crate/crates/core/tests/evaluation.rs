use std::cell::Cell;

use learn2help::data::sample_task;
use learn2help::evaluation::{
    confidence_baseline_curve, cost_sweep, evaluate, interpolate_accuracy, matched_coverage_gaps, predict_with,
    random_baseline_curve, risk_gap_slope_with, ConfidenceVariant, RunSetup,
};
use learn2help::losses::generalized_loss;
use learn2help::models::ScoreFn;
use learn2help::training::train_client;
use learn2help::{
    Activation, Architecture, CalibrationSpec, CostSpec, CurvePoint, Dataset, Dataset64, FixedClient, FixedClient64,
    GaussianMixtureTask, HelpSystem, Label, LabeledSample, Method, Scorer, Scorer64, SgdConfig,
};

fn linear(w: &[f64], b: f64) -> Scorer64 {
    let mut p = w.to_vec();
    p.push(b);
    Scorer::from_params(Architecture::Linear { input: w.len() }, p).unwrap()
}

fn data(n: usize, seed: u64) -> Dataset64 {
    sample_task(&GaussianMixtureTask::desk_default(), n, seed).unwrap()
}

fn tilted_client() -> FixedClient64 {
    FixedClient::freeze(linear(&[0.6, 0.8], 0.1))
}

struct Counting<'a> {
    inner: &'a Scorer64,
    calls: Cell<usize>,
}

impl ScoreFn<f64> for Counting<'_> {
    fn score(&self, x: &[f64]) -> learn2help::Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.score(x)
    }
}

#[test]
fn client_is_never_scored_on_deferred_inputs() {
    let ds = data(1000, 1);
    let client_scorer = linear(&[1.0, 0.0], 0.0);
    let client = Counting {
        inner: &client_scorer,
        calls: Cell::new(0),
    };
    // Defers whenever x1 > 0.
    let rejector = linear(&[0.0, -1.0], 0.0);
    let expert = linear(&[1.0, 0.2], 0.0);
    let mut kept = 0;
    for s in &ds {
        let p = predict_with(&client, &rejector, &expert, &s.x).unwrap();
        kept += usize::from(!p.deferred);
        assert_eq!(p.deferred, s.x[1] >= 0.0);
    }
    assert_eq!(client.calls.get(), kept);
    assert!(kept > 300 && kept < 700);
}

#[test]
fn constant_rejectors_pick_one_side() {
    let ds = data(200, 2);
    let client = tilted_client();
    let expert = linear(&[1.0, 0.0], 0.0);
    let costs = CostSpec::new(1.0, 0.1).unwrap();
    let always = HelpSystem::new(client.clone(), linear(&[0.0, 0.0], -1.0), expert.clone(), costs).unwrap();
    let never = HelpSystem::new(client.clone(), linear(&[0.0, 0.0], 1.0), expert.clone(), costs).unwrap();
    let tie = HelpSystem::new(client.clone(), linear(&[0.0, 0.0], 0.0), expert.clone(), costs).unwrap();
    for s in &ds {
        let e = expert.score(&s.x).unwrap();
        let m = client.score(&s.x).unwrap();
        assert_eq!(always.predict(&s.x).unwrap().label, Some(Label::from_sign(e > 0.0)));
        assert_eq!(never.predict(&s.x).unwrap().label, Some(Label::from_sign(m > 0.0)));
        assert!(tie.predict(&s.x).unwrap().deferred);
    }
}

#[test]
fn perfect_expert_always_deferring() {
    let samples: Vec<LabeledSample<f64>> = (0..50)
        .map(|i| {
            let v = i as f64 - 24.5;
            LabeledSample {
                x: vec![v, 0.0],
                y: Label::from_sign(v > 0.0),
            }
        })
        .collect();
    let ds = Dataset::new(samples).unwrap();
    let sys = HelpSystem::new(
        tilted_client(),
        linear(&[0.0, 0.0], -1.0),
        linear(&[1.0, 0.0], 0.0),
        CostSpec::new(1.0, 0.1).unwrap(),
    )
    .unwrap();
    let r = evaluate(&sys, &ds).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.coverage, 1.0);
    assert!((r.generalized_risk - 0.1).abs() < 1e-12);
    assert_eq!(r.client_acc_on_kept, None);
    assert_eq!(r.expert_acc_on_kept, None);
    assert_eq!(r.expert_acc_on_deferred, Some(1.0));
}

#[test]
fn decomposition_and_risk_identities() {
    let costs = CostSpec::new(0.7, 0.15).unwrap();
    for seed in 0..20u64 {
        let ds = data(300 + seed as usize * 17, seed);
        let rejector = Scorer::init(Architecture::mlp(&[2, 4, 1], Activation::Relu), seed).unwrap();
        let expert = Scorer::init(Architecture::mlp(&[2, 4, 1], Activation::Relu), seed + 100).unwrap();
        let client = FixedClient::freeze(Scorer::init(Architecture::Linear { input: 2 }, seed + 200).unwrap());
        let sys = HelpSystem::new(client, rejector, expert, costs).unwrap();
        let r = evaluate(&sys, &ds).unwrap();

        let kept = r.client_acc_on_kept.unwrap_or(0.0);
        let def = r.expert_acc_on_deferred.unwrap_or(0.0);
        let rebuilt = (1.0 - r.coverage) * kept + r.coverage * def;
        assert!((rebuilt - r.accuracy).abs() < 1e-12, "{rebuilt} vs {}", r.accuracy);

        // Independent summation: per-sample loss collected, then summed pairwise.
        let mut losses: Vec<f64> = ds
            .iter()
            .map(|s| {
                let m = sys.client.score(&s.x).unwrap();
                let e = sys.expert.score(&s.x).unwrap();
                let rj = sys.rejector.score(&s.x).unwrap();
                generalized_loss(m, e, rj, s.y, &costs)
            })
            .collect();
        while losses.len() > 1 {
            losses = losses.chunks(2).map(|c| c.iter().sum()).collect();
        }
        let mean = losses[0] / ds.len() as f64;
        assert!((mean - r.generalized_risk).abs() < 1e-12);
        for v in [r.accuracy, r.coverage] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.generalized_risk >= 0.0);
    }
}

#[test]
fn confidence_baselines_extremes_and_mapping() {
    let ds = data(800, 3);
    let client = tilted_client();
    let expert = linear(&[1.0, 0.0], 0.0);
    let sig = confidence_baseline_curve(&client, &expert, &ds, &[0.0, 0.6], ConfidenceVariant::Sigmoid).unwrap();
    assert_eq!(sig[0].coverage, 0.0);
    assert_eq!(sig[1].coverage, 1.0);

    let t_sig: Vec<f64> = (0..=25).map(|i| i as f64 / 50.0).collect();
    let mut t_dist: Vec<f64> = t_sig.iter().map(|t| 0.25 - t * t).collect();
    t_dist.reverse();
    let a = confidence_baseline_curve(&client, &expert, &ds, &t_sig, ConfidenceVariant::Sigmoid).unwrap();
    let b = confidence_baseline_curve(&client, &expert, &ds, &t_dist, ConfidenceVariant::Distance).unwrap();
    // Same deferral sets, so identical coverage and accuracy pairs; ties at the
    // mapped threshold differ only on exact equality, which random data avoids.
    for (p, q) in a.iter().zip(b.iter().rev()) {
        assert_eq!(p.coverage, q.coverage);
        assert_eq!(p.accuracy, q.accuracy);
    }
    for w in a.windows(2) {
        assert!(w[0].coverage <= w[1].coverage);
    }
    assert!(confidence_baseline_curve(&client, &expert, &ds, &[0.3, 0.1], ConfidenceVariant::Sigmoid).is_err());
}

#[test]
fn random_baseline_endpoints_and_mixture() {
    let ds = data(4000, 4);
    let client = tilted_client();
    let expert = linear(&[1.0, 0.0], 0.0);
    let acc = |s: &dyn ScoreFn<f64>| {
        ds.iter()
            .filter(|x| s.score(&x.x).unwrap() * x.y.sign::<f64>() > 0.0)
            .count() as f64
            / ds.len() as f64
    };
    let (acc_m, acc_e) = (acc(&client), acc(&expert));
    let rates: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let curve = random_baseline_curve(&client, &expert, &ds, &rates, 11).unwrap();
    assert_eq!(curve[0].accuracy, acc_m);
    assert_eq!(curve[10].accuracy, acc_e);
    assert_eq!(curve[0].coverage, 0.0);
    assert_eq!(curve[10].coverage, 1.0);
    let n = ds.len() as f64;
    // Given the data, accuracy at rate p has mean (1-p) acc_m + p acc_e and
    // variance p (1-p) d / n, d being the client/expert disagreement fraction.
    let d = ds
        .iter()
        .filter(|s| (client.score(&s.x).unwrap() > 0.0) != (expert.score(&s.x).unwrap() > 0.0))
        .count() as f64
        / n;
    // All rates share one set of uniforms, so coverage is an empirical CDF;
    // DKW bounds its sup deviation (failure probability 1e-3).
    let dkw = ((2.0f64 / 1e-3).ln() / (2.0 * n)).sqrt();
    for p in &curve {
        let expect = (1.0 - p.knob) * acc_m + p.knob * acc_e;
        let se = (p.knob * (1.0 - p.knob) * d / n).sqrt();
        assert!(
            (p.accuracy - expect).abs() <= 3.0 * se + 1e-12,
            "rate {}: {} vs {expect}",
            p.knob,
            p.accuracy
        );
        assert!((p.coverage - p.knob).abs() <= dkw, "{p:?}");
    }
    for w in curve.windows(2) {
        assert!(w[0].coverage <= w[1].coverage);
    }
    assert_eq!(curve, random_baseline_curve(&client, &expert, &ds, &rates, 11).unwrap());
}

#[test]
fn interpolation_and_matched_gaps() {
    let pt = |c: f64, a: f64| CurvePoint {
        method: Method::Random,
        knob: 0.0,
        coverage: c,
        accuracy: a,
    };
    let curve = vec![pt(0.0, 0.5), pt(0.5, 0.7), pt(1.0, 0.9)];
    assert!((interpolate_accuracy(&curve, 0.25).unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(interpolate_accuracy(&curve[..2], 0.75), None);
    let flat = vec![pt(0.0, 0.5), pt(1.0, 0.5)];
    let gaps = matched_coverage_gaps(&curve, &flat, 0.1, 0.9, 0.1);
    assert_eq!(gaps.len(), 9);
    assert!((gaps[4].1 - 0.2).abs() < 1e-12);
}

fn small_setup() -> RunSetup<f64> {
    let legacy = GaussianMixtureTask::isotropic(0.5, vec![0.0, 1.0], vec![0.0, -1.0]).unwrap();
    let client = train_client(
        &sample_task(&legacy, 300, 1).unwrap(),
        &Architecture::Linear { input: 2 },
        &SgdConfig::new(0.01, 1, 1, 1).unwrap(),
    )
    .unwrap();
    RunSetup {
        train: data(400, 5),
        test: data(400, 6),
        client,
        rejector_arch: Architecture::mlp(&[2, 4, 1], Activation::Relu),
        expert_arch: Architecture::mlp(&[2, 8, 1], Activation::Relu),
        calib: CalibrationSpec::new(0.5, 2.0).unwrap(),
        cfg: SgdConfig::new(0.001, 2, 1, 0).unwrap(),
    }
}

#[test]
fn sweep_has_one_row_per_cost() {
    let setup = small_setup();
    let ce = [0.0, 0.3, 0.9];
    let rows = cost_sweep(&setup, &ce, 1.0, 3).unwrap();
    assert_eq!(rows.len(), 3);
    for (r, c) in rows.iter().zip(ce) {
        assert_eq!(r.ce, c);
        assert_eq!(r.curve_point().method, Method::Learn2helpJoint);
    }
    assert_ne!(rows[0].seed, rows[1].seed);
    assert!(cost_sweep(&setup, &[], 1.0, 3).is_err());
    assert_eq!(rows, cost_sweep(&setup, &ce, 1.0, 3).unwrap());
}

#[test]
fn constant_system_has_zero_gaps_and_is_reported() {
    // All-positive data, an expert that is always right and a rejector that
    // always defers: empirical and held-out risk are both exactly ce.
    let task = GaussianMixtureTask::isotropic(0.5, vec![1.0, 0.0], vec![-1.0, 0.0]).unwrap();
    let positive = |n: usize, seed: u64| {
        let ds = sample_task(&task, 2 * n + 50, seed).unwrap();
        let pos: Vec<_> = ds.iter().filter(|s| s.y == Label::Pos).take(n).cloned().collect();
        Dataset::new(pos)
    };
    let holdout = positive(500, 99).unwrap();
    let client = FixedClient::freeze(linear(&[0.0, 0.0], -1.0));
    let res = risk_gap_slope_with(&[50, 100, 200], 3, &holdout, 1, positive, |_, _| {
        HelpSystem::new(
            client.clone(),
            linear(&[0.0, 0.0], -1.0),
            linear(&[0.0, 0.0], 1.0),
            CostSpec::new(1.0, 0.2).unwrap(),
        )
    });
    let err = res.unwrap_err();
    assert!(err.to_string().contains("zero gap"), "{err}");
}

#[test]
fn slope_arguments_are_validated() {
    let ds = data(50, 1);
    let never = |_: usize, _: u64| -> learn2help::Result<Dataset64> { unreachable!() };
    let train = |_: &Dataset64, _: u64| -> learn2help::Result<learn2help::HelpSystem64> { unreachable!() };
    assert!(risk_gap_slope_with(&[100, 50, 200], 3, &ds, 0, never, train).is_err());
    assert!(risk_gap_slope_with(&[50, 100], 3, &ds, 0, never, train).is_err());
    assert!(risk_gap_slope_with(&[50, 100, 200], 2, &ds, 0, never, train).is_err());
}

#[test]
fn single_precision_evaluation() {
    let ds: Dataset<f32> = sample_task(&GaussianMixtureTask::desk_default(), 100, 1).unwrap();
    let s = |w: [f32; 2], b: f32| {
        Scorer::<f32>::from_params(Architecture::Linear { input: 2 }, vec![w[0], w[1], b]).unwrap()
    };
    let sys = HelpSystem::new(
        FixedClient::freeze(s([1.0, 0.0], 0.0)),
        s([0.0, 1.0], 0.0),
        s([1.0, 0.0], 0.0),
        CostSpec::new(1.0f32, 0.1).unwrap(),
    )
    .unwrap();
    let r = evaluate(&sys, &ds).unwrap();
    assert!(r.accuracy > 0.5 && r.coverage > 0.2 && r.coverage < 0.8);
}
