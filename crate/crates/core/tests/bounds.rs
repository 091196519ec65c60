use approx::assert_relative_eq;
use w2sg_core::bounds::{
    asserted_failures, c1_for, check_cb5, check_t41, check_t43, check_t51, task_checks, CheckMode, Slack, TheoremTag,
    WisSign,
};
use w2sg_core::calibration::{mce_exact, DiscreteClassifierInstance};
use w2sg_core::divergence::{kl_discrete, DivergenceValue, ProbVector};
use w2sg_core::mlpnet::KlDirection;
use w2sg_core::pipeline::{run_experiment, ExperimentConfig, Setting, TaskResult};

fn pv(v: &[f64]) -> ProbVector {
    ProbVector::new(v.to_vec(), 0.01).unwrap()
}

fn one_task() -> TaskResult {
    let cfg = ExperimentConfig {
        pretrain_tasks: 2,
        pretrain_samples: 200,
        finetune_tasks: 1,
        finetune_samples: 200,
        weak_label_samples: 200,
        eval_samples: 300,
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg).unwrap().results.remove(0)
}

#[test]
fn c1_at_a_tenth() {
    let c1 = c1_for(Setting::ClassificationKl, 0.1);
    assert_relative_eq!(c1, 2f64.sqrt() * 10.0 * 10f64.ln(), max_relative = 1e-15);
    assert!((c1 - 32.5631).abs() < 5e-4, "{c1}");
    assert_relative_eq!(c1_for(Setting::OutputDistribution, 0.1), c1, max_relative = 1e-14);
}

#[test]
fn zero_misfit_collapses_both_sides() {
    let mut r = one_task();
    r.d_sw_w = DivergenceValue::empirical_kl(0.0);
    r.d_star_sw = r.d_star_w;
    let [up, low] = check_t41(&r, 0.01, Slack::TRAINED);
    assert!(up.holds && low.holds);
    assert_eq!(up.rhs, r.d_star_w.value);
    assert_eq!(low.lhs, r.d_star_w.value);
    assert_eq!(up.theorem, TheoremTag::T41Upper);
    assert_eq!(low.theorem, TheoremTag::T41Lower);

    r.d_star_sw = DivergenceValue::empirical_kl(r.d_star_w.value + 0.1);
    let [up, _] = check_t41(&r, 0.01, Slack::TRAINED);
    assert!(!up.holds);
    let t51 = check_t51(&r, Slack::fixed(5e-3));
    assert!(!t51.holds && t51.is_failure());
}

#[test]
fn forward_checks_follow_the_wis_sign() {
    let mut r = one_task();
    r.loss_direction = KlDirection::Forward;
    r.wis_value = 0.3;
    for report in [check_t51(&r, Slack::fixed(5e-3)), check_cb5(&r, Slack::fixed(5e-3))] {
        assert_eq!(report.mode, CheckMode::Inapplicable);
        assert_eq!(report.wis_sign, Some(WisSign::Positive));
        assert!(!report.is_failure());
    }
    r.wis_value = -0.3;
    let cb5 = check_cb5(&r, Slack::fixed(5e-3));
    assert_eq!(cb5.wis_sign, Some(WisSign::Nonpositive));
    assert_eq!(cb5.mode, CheckMode::Asserted);
    assert_eq!(check_t51(&r, Slack::fixed(5e-3)).mode, CheckMode::Descriptive);
}

#[test]
fn realizable_reverse_run_has_no_asserted_failures() {
    let r = one_task();
    let checks = task_checks(&r, 0.01).unwrap();
    assert!(asserted_failures(&checks).is_empty(), "{checks:?}");
    let c1 = checks[0].constant_c1.unwrap();
    assert_relative_eq!(c1, c1_for(Setting::OutputDistribution, 0.01));
}

#[test]
fn calibration_gap_identical_models() {
    let inst = DiscreteClassifierInstance::new(
        vec![0, 1],
        vec![0.5, 0.5],
        vec![pv(&[0.7, 0.3]), pv(&[0.2, 0.8])],
        vec![vec![1.0, 0.0], vec![0.5, 0.5]],
    )
    .unwrap();
    let r = check_t43(&mce_exact(&inst), &mce_exact(&inst), DivergenceValue::kl(0.0)).unwrap();
    assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    assert!(r.holds);
    assert_eq!(r.mode, CheckMode::Asserted);
}

#[test]
fn calibration_gap_at_ln_two() {
    // Weak (½, ½) against strong (q, 1 − q) with q(1 − q) = 1/16 has KL ln 2.
    let q = (1.0 - 3f64.sqrt() / 2.0) / 2.0;
    let weak = pv(&[0.5, 0.5]);
    let strong = pv(&[q, 1.0 - q]);
    let d = kl_discrete(&weak, &strong).unwrap();
    assert_relative_eq!(d.value, 2f64.ln(), max_relative = 1e-14);

    let inst = DiscreteClassifierInstance::new(vec![0], vec![1.0], vec![weak], vec![vec![1.0, 0.0]]).unwrap();
    let strong_inst = inst.with_scores(vec![strong]).unwrap();
    let r = check_t43(&mce_exact(&inst), &mce_exact(&strong_inst), d).unwrap();
    // MCE 1 for the weak model and 2(1 − q) for the strong one.
    assert_relative_eq!(r.lhs, 3f64.sqrt() / 2.0, max_relative = 1e-14);
    assert_relative_eq!(r.rhs, std::f64::consts::SQRT_2, max_relative = 1e-12);
    assert!(r.holds);
}
