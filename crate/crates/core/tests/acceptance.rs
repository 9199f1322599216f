//! Acceptance checks. Each test prints one `PASS` or `FAIL` line.

use std::time::Instant;

use fedul::baselines::{
    fedllp_loss, fedpl_loss, split_by_confidence, vat_consistency_with_direction,
    PseudoLabelSettings,
};
use fedul::data::{build_surrogate_dataset, gen_gaussian_task, sample_test_set, sample_u_sets, ClassConditionals};
use fedul::experiment::{
    metrics_csv, summary_json, EntryReport, Experiment, ExperimentConfig, ExperimentReport,
    GridEntry, Method, RunStatus,
};
use fedul::federation::{
    client_init, rng_stream, server_execute, ClientState, Federation, LocalSettings,
    ServerState, SupervisedObjective,
};
use fedul::nn::{backward, forward_cached, Activation, Batch, GradientSet, ModelParams};
use fedul::priors::{estimate_surrogate_prior, ClassPriorMatrix, PriorRole, PriorVector};
use fedul::transition::{
    apply_transition, build_transition_matrix, recover_eta, DiscreteInstance, SurrogatePriorMode,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use statrs::distribution::{Continuous, Normal};

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {id:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Central differences on every parameter, written out here so the check does
/// not share code with the library's own checker.
fn worst_relative_gradient_error<F>(params: &ModelParams, mut f: F) -> f64
where
    F: FnMut(&ModelParams) -> (f64, GradientSet),
{
    let h = 1e-5;
    let (_, analytic) = f(params);
    let analytic = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let original = *probe.tensors_mut().flat_mut(i).unwrap();
        *probe.tensors_mut().flat_mut(i).unwrap() = original + h;
        let plus = f(&probe).0;
        *probe.tensors_mut().flat_mut(i).unwrap() = original - h;
        let minus = f(&probe).0;
        *probe.tensors_mut().flat_mut(i).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn c01_set_posterior_matches_brute_force_bayes() {
    let start = Instant::now();
    let mut rng = rng_stream(2024, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=5);
        let m = rng.random_range(k..=8);
        let domain = rng.random_range(1..=10);
        let inst = DiscreteInstance::random(domain, k, m, m, SurrogatePriorMode::FromCounts, &mut rng).unwrap();
        let head = build_transition_matrix(&inst.test_prior, &inst.surrogate_prior, &inst.priors, m).unwrap();
        let pi = inst.test_prior.values();
        let pibar = inst.surrogate_prior.values();
        for x in 0..domain {
            // p(y | x) from the test joint.
            let joint: Vec<f64> = (0..k).map(|c| pi[c] * inst.class_conditionals[[c, x]]).collect();
            let z: f64 = joint.iter().sum();
            let eta: Vec<f64> = joint.iter().map(|j| j / z).collect();
            // p(set | x) from the mixture each set is drawn from.
            let set_joint: Vec<f64> = (0..m)
                .map(|s| {
                    pibar[s]
                        * (0..k)
                            .map(|c| inst.priors.entries()[[s, c]] * inst.class_conditionals[[c, x]])
                            .sum::<f64>()
                })
                .collect();
            let zs: f64 = set_joint.iter().sum();
            let direct: Vec<f64> = set_joint.iter().map(|v| v / zs).collect();
            worst = worst.max(max_abs_gap(&direct, &apply_transition(&head, &eta).unwrap()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, "set posterior equals head output", worst < 1e-12 && secs < 5.0, format!("max gap {worst:.2e}, {secs:.2}s"));
}

#[test]
fn c02_identity_priors_reduce_to_supervised() {
    // Head is exactly the identity.
    let k = 4;
    let pi = PriorVector::uniform(k, PriorRole::Test);
    let pibar = estimate_surrogate_prior(&[50; 4], k).unwrap();
    let head = build_transition_matrix(&pi, &pibar, &ClassPriorMatrix::identity(k), k).unwrap();
    let identity = head.matrix().indexed_iter().all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 });
    let mut rng = rng_stream(5, 0);
    let mut exact = true;
    let mut tried = 0;
    while tried < 200 {
        let eta = random_simplex(k, &mut rng);
        if eta.iter().sum::<f64>() != 1.0 {
            continue;
        }
        tried += 1;
        exact &= apply_transition(&head, &eta).unwrap() == eta;
    }

    // Training trajectories.
    let seed = 9;
    let task = gen_gaussian_task(k, 3, 2.0, &mut rng_stream(seed, 1)).unwrap();
    let init = ModelParams::init(3, &[8], Activation::Relu, k, &mut rng_stream(seed, 2)).unwrap();
    let settings = LocalSettings { epochs: 1, batch_size: 32, l1_weight: 1e-4 };
    let usets: Vec<_> = (0..3)
        .map(|c| sample_u_sets(c, &task, &ClassPriorMatrix::identity(k), &[50; 4], &mut rng_stream(seed, 10 + c as u64)).unwrap())
        .collect();
    let test = sample_test_set(&task, task.test_prior(), 500, &mut rng_stream(seed, 3)).unwrap();
    let fed = |clients| Federation {
        server: ServerState::new(init.clone(), 1.0),
        clients,
        test_set: test.clone(),
        client_test_sets: None,
        local_lr: 1e-2,
        record_timing: false,
    };
    let mut unlabeled = fed(usets
        .iter()
        .map(|u| client_init(u, &pi, k, &init, settings, seed).unwrap())
        .collect());
    let mut labeled = fed(usets
        .iter()
        .map(|u| {
            let s = build_surrogate_dataset(u, k).unwrap();
            let labels = u.hidden().reveal("identity reduction check").concat();
            let obj = SupervisedObjective::new(s.inputs().to_owned(), labels, k).unwrap();
            ClientState::new(u.client(), Box::new(obj), &init, settings, seed).unwrap()
        })
        .collect());
    let mut worst = 0.0f64;
    for _ in 0..30 {
        unlabeled.step_round().unwrap();
        labeled.step_round().unwrap();
        worst = worst.max(unlabeled.server.params.tensors().max_abs_diff(labeled.server.params.tensors()));
    }
    verdict(
        2,
        "identity reduction",
        identity && exact && worst < 1e-10,
        format!("T == I: {identity}, Q(eta) == eta on {tried} draws: {exact}, max parameter gap over 30 rounds {worst:.2e}"),
    );
}

#[test]
fn c03_head_is_injective() {
    let mut rng = rng_stream(33, 0);
    let mut worst_roundtrip = 0.0f64;
    let mut smallest_image_gap = f64::INFINITY;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let m = rng.random_range(k..=10);
        let inst = DiscreteInstance::random(1, k, m, m, SurrogatePriorMode::Arbitrary, &mut rng).unwrap();
        let head = build_transition_matrix(&inst.test_prior, &inst.surrogate_prior, &inst.priors, m).unwrap();
        let eta = random_simplex(k, &mut rng);
        let q = apply_transition(&head, &eta).unwrap();
        worst_roundtrip = worst_roundtrip.max(max_abs_gap(&eta, &recover_eta(&head, &q).unwrap()));
        let other = loop {
            let e = random_simplex(k, &mut rng);
            if max_abs_gap(&e, &eta) > 1e-3 {
                break e;
            }
        };
        smallest_image_gap = smallest_image_gap.min(max_abs_gap(&q, &apply_transition(&head, &other).unwrap()));
    }
    verdict(
        3,
        "injectivity",
        worst_roundtrip < 1e-8 && smallest_image_gap > 1e-9,
        format!("worst round trip {worst_roundtrip:.2e}, smallest image gap {smallest_image_gap:.2e}"),
    );
}

fn kink_free_model<R: Rng + ?Sized>(
    d: usize,
    hidden: &[usize],
    act: Activation,
    k: usize,
    inputs: &[&Array2<f64>],
    rng: &mut R,
) -> Option<ModelParams> {
    for _ in 0..200 {
        let p = ModelParams::init(d, hidden, act, k, rng).unwrap();
        let clear = inputs.iter().filter(|x| x.nrows() > 0).all(|x| {
            forward_cached(&p, x.view()).unwrap().min_abs_preactivation() > 1e-3
        });
        if clear {
            return Some(p);
        }
    }
    None
}

#[test]
fn c04_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = rng_stream(44, 0);
    let mut worst = 0.0f64;
    let mut configs = 0;
    let acts = [Activation::Relu, Activation::Linear];
    // Network with and without the transition head.
    for case in 0..30 {
        let (k, d) = (rng.random_range(2..=4), rng.random_range(1..=4));
        let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=5)).collect();
        let n = rng.random_range(1..=8);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let Some(params) = kink_free_model(d, &hidden, acts[case % 2], k, &[&x], &mut rng) else { continue };
        let head = (case % 3 != 0).then(|| {
            let m = rng.random_range(k..=k + 3);
            let inst = DiscreteInstance::random(1, k, m, m, SurrogatePriorMode::Arbitrary, &mut rng).unwrap();
            build_transition_matrix(&inst.test_prior, &inst.surrogate_prior, &inst.priors, m).unwrap()
        });
        let outputs = head.as_ref().map_or(k, |h| h.sets());
        let labels = (0..n).map(|_| rng.random_range(0..outputs)).collect();
        let batch = Batch::new(x, labels, outputs).unwrap();
        let l1 = if case % 4 == 1 { 1e-3 } else { 0.0 };
        worst = worst.max(worst_relative_gradient_error(&params, |p| backward(p, &batch, head.as_ref(), l1).unwrap()));
        configs += 1;
    }
    // Proportion loss.
    for case in 0..10 {
        let (k, d) = (rng.random_range(2..=5), rng.random_range(1..=4));
        let x = Array2::from_shape_fn((rng.random_range(1..=10), d), |_| rng.random_range(-2.0..2.0));
        let Some(params) = kink_free_model(d, &[4], acts[case % 2], k, &[&x], &mut rng) else { continue };
        let target = random_simplex(k, &mut rng);
        worst = worst.max(worst_relative_gradient_error(&params, |p| {
            let (l, g, _) = fedllp_loss(p, x.view(), &target, 1e-4).unwrap();
            (l, g)
        }));
        configs += 1;
    }
    // Pseudo-label loss on a fixed split with fixed mixup pairs.
    let mut pl_configs = 0;
    while pl_configs < 10 {
        let (k, d) = (rng.random_range(2..=4), rng.random_range(1..=3));
        let x = Array2::from_shape_fn((12, d), |_| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..k)).collect();
        let splitter = ModelParams::init(d, &[4], Activation::Linear, k, &mut rng).unwrap();
        let settings = PseudoLabelSettings { threshold: 1.0 / k as f64 + 0.05, ..Default::default() };
        let batch = split_by_confidence(&splitter, x.view(), &labels, &settings, &mut rng).unwrap();
        let Some(mix) = batch.mix.as_ref() else { continue };
        let inputs = [&batch.high_inputs, &batch.low_inputs, &mix.inputs];
        let Some(params) = kink_free_model(d, &[4], Activation::Relu, k, &inputs, &mut rng) else { continue };
        worst = worst.max(worst_relative_gradient_error(&params, |p| fedpl_loss(p, &batch, 0.3, 1e-4).unwrap()));
        pl_configs += 1;
        configs += 1;
    }
    // Consistency term along a fixed direction.
    for _ in 0..5 {
        let (k, d) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let x = Array2::from_shape_fn((6, d), |_| rng.random_range(-2.0..2.0));
        let dir = Array2::from_shape_fn((6, d), |_| rng.random_range(-1.0..1.0));
        let params = ModelParams::init(d, &[5], Activation::Linear, k, &mut rng).unwrap();
        let probe = ModelParams::init(d, &[5], Activation::Linear, k, &mut rng).unwrap();
        // The clean prediction is a constant target; freeze it at `params`.
        let clean = fedul::nn::softmax(fedul::nn::forward(&params, x.view()).unwrap().view());
        let shifted = &x + &(&dir * 0.5);
        worst = worst.max(worst_relative_gradient_error(&probe, |p| {
            fedul::baselines::kl_to_target(p, shifted.view(), clean.view()).unwrap()
        }));
        let (l, _) = vat_consistency_with_direction(&params, x.view(), dir.view(), 0.5).unwrap();
        assert!(l >= 0.0);
        configs += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "gradient correctness",
        configs >= 50 && worst < 1e-4 && secs < 30.0,
        format!("{configs} configurations, worst relative error {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn c05_aggregation_identities() {
    let mut rng = rng_stream(55, 0);
    let init = ModelParams::init(3, &[5], Activation::Relu, 3, &mut rng).unwrap();
    let random_delta = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut d = GradientSet::zeros_like(init.tensors());
        d.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        d
    };

    let mut zero = ServerState::new(init.clone(), 1.0);
    let zeros: Vec<_> = (0..4).map(|c| (c, GradientSet::zeros_like(init.tensors()))).collect();
    server_execute(&mut zero, &zeros).unwrap();
    let fixpoint = zero.params == init;

    let d = random_delta(&mut rng);
    let mut neg = d.clone();
    neg.scale(-1.0);
    let mut sym = ServerState::new(init.clone(), 0.7);
    server_execute(&mut sym, &[(0, d), (1, neg)]).unwrap();
    let cancels = sym.params == init;

    let updates: Vec<_> = (0..6).map(|c| (c, random_delta(&mut rng))).collect();
    let mut reference = ServerState::new(init.clone(), 1.0);
    server_execute(&mut reference, &updates).unwrap();
    let mut permuted_ok = true;
    for _ in 0..20 {
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut rng);
        let mut s = ServerState::new(init.clone(), 1.0);
        server_execute(&mut s, &shuffled).unwrap();
        permuted_ok &= s.params == reference.params;
    }
    verdict(
        5,
        "aggregation identities",
        fixpoint && cancels && permuted_ok,
        format!("zero fixpoint {fixpoint}, symmetric cancellation {cancels}, permutation invariance {permuted_ok}"),
    );
}

fn recovery_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "task": {"kind": "gaussian", "classes": 3, "dim": 2, "separation": 1.7},
            "clients": 5, "sets": [6], "set_size": 400, "rounds": 200,
            "methods": ["fedul", {"fedavg_supervised": 1.0}]
        }"#,
    )
    .unwrap()
}

/// Bayes error of equal-weight axis-aligned Gaussians by quadrature on a fine grid.
fn gaussian_bayes_error(means: &Array2<f64>, variances: &Array2<f64>) -> f64 {
    assert_eq!(means.ncols(), 2);
    let k = means.nrows();
    let h = 0.01;
    let lo = means.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - 9.0;
    let hi = means.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 9.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let axes: Vec<Vec<Normal>> = (0..k)
        .map(|c| (0..2).map(|j| Normal::new(means[[c, j]], variances[[c, j]].sqrt()).unwrap()).collect())
        .collect();
    let mut correct = 0.0;
    for i in 0..steps {
        let x0 = lo + (i as f64 + 0.5) * h;
        let first: Vec<f64> = axes.iter().map(|a| a[0].pdf(x0)).collect();
        for j in 0..steps {
            let x1 = lo + (j as f64 + 0.5) * h;
            let best = (0..k).map(|c| first[c] * axes[c][1].pdf(x1)).fold(0.0, f64::max);
            correct += best / k as f64;
        }
    }
    1.0 - correct * h * h
}

#[test]
fn c06_recovers_bayes_optimal_classifier() {
    let config = recovery_config();
    let exp = Experiment::new(config.clone()).unwrap();
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut good = 0;
    for &seed in &config.seeds {
        let data = exp.prepare_run(6, seed).unwrap();
        let ClassConditionals::Gaussian { means, variances } = data.task.conditionals() else { unreachable!() };
        let bayes = gaussian_bayes_error(means, variances);
        let ul = exp.train_run(Method::Fedul, &data, seed, |_| Ok(()));
        let sup = exp.train_run(Method::FedavgSupervised(1.0), &data, seed, |_| Ok(()));
        let (ul, sup) = (ul.final_error.unwrap(), sup.final_error.unwrap());
        let ok = (ul - sup).abs() <= 0.03 && (ul - bayes).abs() <= 0.05;
        good += usize::from(ok);
        lines.push(format!("seed {seed}: bayes {bayes:.4} fedul {ul:.4} supervised {sup:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "optimal model recovery",
        good >= 2 && secs < 180.0,
        format!("{good}/3 seeds within tolerance, {secs:.1}s; {}", lines.join("; ")),
    );
}

#[test]
fn c07_noniid_ordering() {
    let config = ExperimentConfig::from_json(
        r#"{
            "task": {"kind": "gaussian", "classes": 10, "dim": 10, "separation": 3.0},
            "distribution": {"mode": "noniid", "majority_classes": 2},
            "clients": 5, "sets": [10], "set_size": 300,
            "methods": ["fedul", "fedpl", "fedllp"]
        }"#,
    )
    .unwrap();
    let report = fedul::experiment::run_experiment(&config, None, 1).unwrap();
    let mean = |m: Method| {
        report.entries.iter().find(|e| e.method == m).and_then(|e| e.mean_error).unwrap()
    };
    let (ul, pl, llp) = (mean(Method::Fedul), mean(Method::Fedpl), mean(Method::Fedllp));
    verdict(
        7,
        "non-IID ordering fedul < fedpl < fedllp",
        ul < pl && pl < llp,
        format!("mean errors fedul {ul:.4}, fedpl {pl:.4}, fedllp {llp:.4}"),
    );
}

#[test]
fn c08_robust_to_noisy_priors() {
    let mut config = recovery_config();
    config.methods = vec![Method::Fedul];
    let mut means = Vec::new();
    let mut all_finite = true;
    for noise in [0.0, 0.2, 0.4, 0.8, 1.6] {
        config.prior_noise = noise;
        let report = fedul::experiment::run_experiment(&config, None, 1).unwrap();
        let e = &report.entries[0];
        all_finite &= e.failed_runs() == 0
            && e.runs.iter().all(|r| r.rounds.iter().all(|m| m.test_error.is_finite()
                && m.surrogate_loss.is_none_or(f64::is_finite)));
        means.push((noise, e.mean_error.unwrap_or(f64::NAN)));
    }
    let clean = means[0].1;
    let at_04 = means[2].1;
    let listing: Vec<String> = means.iter().map(|(n, m)| format!("eps {n}: {m:.4}")).collect();
    verdict(
        8,
        "noisy prior robustness",
        at_04 - clean < 0.05 && all_finite,
        format!("{}; all runs finite: {all_finite}", listing.join(", ")),
    );
}

#[test]
fn c09_surrogate_prior_from_counts() {
    let p = estimate_surrogate_prior(&[30, 70], 3).unwrap();
    let pass = p.values() == [0.3, 0.7, 0.0];
    verdict(9, "surrogate prior estimator", pass, format!("{:?}", p.values()));
}

fn small_config(methods: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "task": {{"kind": "gaussian", "classes": 3, "dim": 2, "separation": 2.0}},
            "clients": 3, "sets": [4], "set_size": 60, "rounds": 8, "test_size": 300,
            "hidden": [8], "local_lr": 1e-2, "batch_size": 32, "seeds": [1, 2],
            "methods": {methods}
        }}"#
    ))
    .unwrap()
}

fn report_bytes(exp: &Experiment, poison: bool) -> Vec<(String, String)> {
    let config = exp.config();
    let mut entries = Vec::new();
    for entry in config.grid() {
        let runs = config
            .seeds
            .iter()
            .map(|&seed| {
                let mut data = exp.prepare_run(entry.sets, seed).unwrap();
                if poison {
                    data.usets.iter_mut().for_each(|u| u.hidden_mut().poison(0));
                }
                exp.train_run(entry.method, &data, seed, |_| Ok(()))
            })
            .collect();
        entries.push(EntryReport::new(GridEntry { method: entry.method, sets: entry.sets }, runs));
    }
    let report = ExperimentReport {
        tool_version: "test".into(),
        config: config.clone(),
        entries,
        total_wall_ms: None,
    };
    assert!(report.entries.iter().all(|e| e.runs.iter().all(|r| r.status == RunStatus::Ok)));
    vec![
        ("csv".into(), metrics_csv(&report)),
        ("json".into(), summary_json(&report).unwrap()),
    ]
}

#[test]
fn c10_hidden_labels_never_reach_training() {
    let guarded = Experiment::new(small_config(r#"["fedul", "fedllp", "fedllp_vat"]"#)).unwrap();
    let identical = report_bytes(&guarded, false) == report_bytes(&guarded, true);
    // The same poisoning must be visible to a method that does read labels.
    let reader = Experiment::new(small_config(r#"[{"fedavg_supervised": 1.0}]"#)).unwrap();
    let detected = report_bytes(&reader, false) != report_bytes(&reader, true);
    verdict(
        10,
        "no-label firewall",
        identical && detected,
        format!("unlabeled methods unchanged: {identical}, supervised control changed: {detected}"),
    );
}

#[test]
fn c11_outputs_are_deterministic() {
    let mut config = small_config(r#"["fedul", "fedpl", "fedllp_vat", {"fedavg_supervised": 0.5}]"#);
    config.distribution = fedul::experiment::Distribution::Noniid { majority_classes: 1 };
    config.prior_noise = 0.3;
    config.client_eval = true;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(config.clone()).unwrap();
        let report = exp.run(Some(&dir.path().join("runs")), 3).unwrap();
        fedul::experiment::emit_report(&report, dir.path(), &fedul::experiment::Format::ALL)
            .unwrap()
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    let bytes: usize = a.iter().map(Vec::len).sum();
    verdict(11, "determinism", a == b, format!("{} files, {bytes} bytes compared", a.len()));
}
