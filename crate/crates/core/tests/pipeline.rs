use w2sg_core::bounds::{check_t51, check_t52_residual, CheckMode, Slack};
use w2sg_core::divergence::kl_output_distribution;
use w2sg_core::mlpnet::{
    init_net, perturb_net, sgd_fit, ArchSpec, KlDirection, Loss, OutputHead, SampleSet, Schedule, Targets,
};
use w2sg_core::pipeline::{
    finetune_weak, fit_head, make_ground_truth, prepare, pretrain_from, pretrain_representation, pretraining_data,
    run_experiment, run_prepared, sample, train_strong_ceiling, w2s_supervise, ExperimentConfig, FeatureStats, Labels,
    Origin, Regime, Representation, Role, Setting, Which,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        pretrain_tasks: 3,
        pretrain_samples: 200,
        finetune_tasks: 4,
        finetune_samples: 300,
        weak_label_samples: 300,
        eval_samples: 500,
        ..ExperimentConfig::default()
    }
}

#[test]
fn ground_truth_is_seeded_with_linear_heads() {
    let cfg = ExperimentConfig { finetune_tasks: 3, ..small() };
    let a = make_ground_truth(&cfg).unwrap();
    let b = make_ground_truth(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.task_heads.len(), 3);
    for (i, h) in a.task_heads.iter().enumerate() {
        assert_eq!(h.depth(), 1);
        for other in &a.task_heads[i + 1..] {
            assert!(h.max_abs_diff(other).unwrap() > 0.0);
        }
    }
    let c = make_ground_truth(&ExperimentConfig { seed: 1, ..cfg }).unwrap();
    assert!(a.representation.max_abs_diff(&c.representation).unwrap() > 0.0);
}

#[test]
fn pretraining_from_the_truth_stops_at_once() {
    let cfg = small();
    let truth = make_ground_truth(&cfg).unwrap();
    let fit = pretrain_from(&cfg, &truth, &truth.representation).unwrap();
    assert!(fit.report.initial_loss.abs() < 1e-12, "{}", fit.report.initial_loss);
    assert_eq!(fit.report.steps_run, 0);
}

#[test]
fn identical_pretraining_tasks_reduce_to_one() {
    let cfg = ExperimentConfig { pretrain_tasks: 3, ..small() };
    let mut truth = make_ground_truth(&cfg).unwrap();
    let head = truth.pretrain_heads[0].clone();
    truth.pretrain_heads = vec![head.clone(); 3];
    let data = pretraining_data(&cfg, &truth).unwrap();
    let init = init_net(&ArchSpec::representation(cfg.input_dim, cfg.rep_dim, 2), 5).unwrap();
    let no_steps = ExperimentConfig {
        schedules: w2sg_core::pipeline::Schedules { representation: Some(Schedule::new(0.05, 0)), head: None },
        ..cfg.clone()
    };
    let joint = pretrain_from(&no_steps, &truth, &init).unwrap().report.initial_loss;
    // The three samples differ, so compare with the mean of the single-task losses.
    let singles: f64 = data
        .iter()
        .map(|(x, labels)| {
            let net = init.compose(&head).unwrap();
            w2sg_core::mlpnet::loss_value(&net, x.inputs.view(), &Loss::new(KlDirection::Reverse, labels.targets()))
                .unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!((joint - singles).abs() < 1e-12 * singles.max(1.0), "{joint} vs {singles}");
}

#[test]
fn weak_head_at_the_truth_has_zero_loss() {
    let cfg = small();
    let truth = make_ground_truth(&cfg).unwrap();
    let x = sample(&cfg, Role::FinetuneData, 0, cfg.finetune_samples).unwrap();
    let labels = Labels::from_model(&truth.task_model(0).unwrap(), &x).unwrap();
    let fit = fit_head(&cfg, &truth.representation, &truth.task_heads[0], &x, &labels, KlDirection::Forward).unwrap();
    assert!(fit.report.initial_loss < 1e-12, "{}", fit.report.initial_loss);
}

#[test]
fn weak_fine_tuning_descends() {
    let cfg = small();
    let prep = prepare(&cfg).unwrap();
    let mut monotone = 0;
    let mut steps = 0;
    for t in 0..cfg.finetune_tasks {
        let fit = finetune_weak(&cfg, &prep.truth, &prep.weak, t).unwrap();
        assert!(fit.report.final_loss <= fit.report.initial_loss, "task {t}");
        for w in fit.report.checkpoints.windows(2) {
            steps += 1;
            monotone += usize::from(w[1] <= w[0]);
        }
    }
    assert!(monotone as f64 >= 0.95 * steps as f64, "{monotone}/{steps}");
}

#[test]
fn realizable_ceiling_recovers_the_truth() {
    let cfg = small();
    let prep = prepare(&cfg).unwrap();
    assert_eq!(prep.strong.origin, Origin::Truth);
    let eval = sample(&cfg, Role::EvalData, 0, cfg.eval_samples).unwrap();
    for t in 0..cfg.finetune_tasks {
        let ceiling = train_strong_ceiling(&cfg, &prep.truth, &prep.strong, t).unwrap();
        let star = prep.truth.task_model(t).unwrap();
        let eps = kl_output_distribution(&star, &ceiling.model, &eval, cfg.gamma).unwrap().value;
        assert!((0.0..1e-5).contains(&eps), "task {t}: {eps}");
    }
}

#[test]
fn perturbed_strong_representation_is_not_realizable() {
    let cfg = ExperimentConfig { regime: Regime::NonrealizablePerturb, finetune_tasks: 10, ..small() };
    let report = run_experiment(&cfg).unwrap();
    let positive = report.results.iter().filter(|r| r.epsilon() > 0.0).count();
    assert!(positive >= 9, "{positive}/10");
    assert!(report.results.iter().all(|r| r.epsilon() >= 0.0));
}

#[test]
fn perturbation_scales_match_the_configured_sigmas() {
    let cfg = ExperimentConfig { regime: Regime::NonrealizablePerturb, ..small() };
    let truth = make_ground_truth(&cfg).unwrap();
    assert_eq!(perturb_net(&truth.representation, 0.0, 3).unwrap(), truth.representation);
    for (which, sigma) in [(Which::Strong, 0.1), (Which::Weak, 9.0)] {
        let rep = pretrain_representation(&cfg, &truth, which).unwrap();
        assert_eq!(rep.origin, Origin::Perturbed { sigma });
        let deltas: Vec<f64> = rep
            .net
            .layers()
            .iter()
            .zip(truth.representation.layers())
            .flat_map(|(a, b)| (&a.weight - &b.weight).into_iter().collect::<Vec<_>>())
            .collect();
        let std = (deltas.iter().map(|d| d * d).sum::<f64>() / deltas.len() as f64).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.05, "{which:?}: {std}");
    }
}

#[test]
fn zero_misfit_when_the_weak_model_is_strong_realizable() {
    let cfg = small();
    let prep = prepare(&cfg).unwrap();
    let weak = finetune_weak(&cfg, &prep.truth, &prep.weak, 0).unwrap();
    let h_s = Representation { ..prep.weak.clone() };
    let (shat, x) = w2s_supervise(&cfg, &h_s, &weak.model, 0).unwrap();
    let misfit = kl_output_distribution(&shat.model, &weak.model, &x, cfg.gamma).unwrap().value;
    assert!(misfit < 1e-6, "{misfit}");
}

#[test]
fn zero_step_w2s_fit_keeps_its_initialization() {
    let base = small();
    let cfg = ExperimentConfig {
        schedules: w2sg_core::pipeline::Schedules {
            head: Some(Schedule::new(0.05, 0).preconditioned()),
            representation: None,
        },
        ..base.clone()
    };
    let prep = prepare(&base).unwrap();
    let weak = finetune_weak(&base, &prep.truth, &prep.weak, 1).unwrap();
    let (a, _) = w2s_supervise(&cfg, &prep.strong, &weak.model, 1).unwrap();
    let (b, _) = w2s_supervise(&cfg, &prep.strong, &weak.model, 1).unwrap();
    assert_eq!(a.report.steps_run, 0);
    assert_eq!(a.model, b.model);
    assert_eq!(a.report.initial_loss, a.report.final_loss);
}

#[test]
fn reverse_misfit_tracks_gain() {
    let cfg = ExperimentConfig { finetune_tasks: 6, ..small() };
    let report = run_experiment(&cfg).unwrap();
    assert!(report.failures.is_empty());
    for r in &report.results {
        assert!(r.misfit() > 0.0);
        assert!(
            (r.gain - r.misfit()).abs() <= 0.2 * r.misfit() + 5e-3,
            "task {}: gain {} misfit {}",
            r.task_id,
            r.gain,
            r.misfit()
        );
        let t51 = check_t51(r, Slack::fixed(5e-3));
        assert_eq!(t51.mode, CheckMode::Asserted);
        assert!(t51.holds);
    }
}

#[test]
fn single_realizable_task() {
    let cfg = ExperimentConfig { finetune_tasks: 1, ..small() };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.results.len(), 1);
    assert!(report.results[0].epsilon() < 1e-5);
}

#[test]
fn residual_is_descriptive() {
    let cfg = ExperimentConfig { regime: Regime::NonrealizablePerturb, finetune_tasks: 2, ..small() };
    let prep = prepare(&cfg).unwrap();
    let report = run_prepared(&cfg, &prep);
    for r in &report.results {
        let check = check_t52_residual(r);
        assert_eq!(check.mode, CheckMode::Descriptive);
        assert_eq!(check.lhs, r.residual());
        assert_eq!(check.samples, Some(cfg.weak_label_samples));
    }
}

#[test]
fn classification_tasks_carry_calibration() {
    let cfg = ExperimentConfig { setting: Setting::ClassificationKl, finetune_tasks: 2, ..small() };
    let report = run_experiment(&cfg).unwrap();
    for r in &report.results {
        let cal = r.calibration.as_ref().expect("classification run");
        assert!(cal.weak_exact.mce.is_some() && cal.strong_binned.ece.is_some());
    }
    let od = run_experiment(&ExperimentConfig { finetune_tasks: 1, ..small() }).unwrap();
    assert!(od.results[0].calibration.is_none());
}

#[test]
fn two_point_head_fit_converges() {
    // One frozen identity feature, a two-class softmax head, and targets a
    // linear head can match exactly.
    use ndarray::{arr1, arr2};
    use w2sg_core::mlpnet::{Activation, Layer, LayeredNet};
    let head = OutputHead::Softmax { classes: 2, floor: 0.01 };
    let rep = Layer { weight: arr2(&[[1.0]]), bias: arr1(&[0.0]), activation: Activation::Identity };
    let top = Layer { weight: arr2(&[[0.0], [0.0]]), bias: arr1(&[0.0, 0.0]), activation: Activation::Identity };
    let net = LayeredNet::new(vec![rep.clone(), top], head).unwrap();
    let x = SampleSet::new(arr2(&[[-1.0], [1.0]]), 0, 0, "two points").unwrap();
    let truth_top =
        Layer { weight: arr2(&[[0.8], [-0.8]]), bias: arr1(&[0.3, -0.3]), activation: Activation::Identity };
    let truth = LayeredNet::new(vec![rep, truth_top], head).unwrap();
    let targets = truth.forward(&x).unwrap();
    let loss = Loss::new(KlDirection::Forward, Targets::Pointwise(targets.view()));
    let fit =
        sgd_fit(&net, &[false, true], &x, &loss, &Schedule { grad_tol: 0.0, ..Schedule::new(0.5, 5000) }).unwrap();
    assert!(fit.report.final_loss < 1e-4 * fit.report.initial_loss, "{:?}", fit.report);
    assert_eq!(fit.net.layers()[0], net.layers()[0]);
}

#[test]
fn feature_stats_of_a_constant_representation() {
    use ndarray::{arr1, arr2};
    use w2sg_core::mlpnet::{Activation, Layer, LayeredNet};
    let rep = LayeredNet::new(
        vec![Layer { weight: arr2(&[[0.0, 0.0]]), bias: arr1(&[2.0]), activation: Activation::Identity }],
        OutputHead::None,
    )
    .unwrap();
    let x = SampleSet::gaussian(10, 2, 1.0, 0, 0).unwrap();
    let stats = FeatureStats::of(&rep, &x).unwrap();
    assert_eq!(stats.mean[0], 2.0);
    assert_eq!(stats.covariance[[0, 0]], 0.0);
}
