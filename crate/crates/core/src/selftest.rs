//! Property suites run by the `selftest` command.
//!
//! Each suite draws its cases from a seeded generator, so a failure is
//! reproducible from the seed alone.

use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::bounds::{check_t43, BoundCheckReport, CheckMode, Slack, TheoremTag};
use crate::calibration::{exact_binary_ece, mce_exact, DiscreteClassifierInstance};
use crate::divergence::{
    bh_tv_bound, kl_discrete, kl_population, normalize_outputs, pinsker_l1_bound, tv_distance, ProbVector,
};
use crate::error::Result;
use crate::mlpnet::{
    backward, init_net, loss_value, ArchSpec, GradientRecord, KlDirection, LayeredNet, Loss, OutputHead, SampleSet,
    ScalarLink, Targets,
};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_CONFIGS: usize = 20;
pub const SIMPLEX_PAIRS: usize = 10_000;
pub const BINARY_INSTANCES: usize = 1000;
pub const CALIBRATION_PAIRS: usize = 1000;
pub const NORMALIZE_CASES: usize = 2000;
pub const ECE_TOLERANCE: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed violation measure; its meaning is suite-specific.
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} {:>5}/{:<5} worst {:.3e} (tol {:.1e}) {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases - self.failures,
            self.cases,
            self.worst,
            self.tolerance,
            self.seconds
        )
    }
}

/// Runs `case` on `cases` seeded draws; each returns its violation measure
/// and whether it passed.
fn suite(
    name: impl Into<String>,
    cases: usize,
    tolerance: f64,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Result<(f64, bool)>,
) -> SuiteOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        match case(&mut rng) {
            Ok((measure, ok)) => {
                worst = worst.max(measure);
                failures += usize::from(!ok);
            }
            Err(_) => failures += 1,
        }
    }
    SuiteOutcome { name: name.into(), cases, failures, worst, tolerance, seconds: start.elapsed().as_secs_f64() }
}

#[derive(Clone, Copy)]
enum Param {
    Weight(usize, usize),
    Bias(usize, usize),
}

fn param_mut(net: &mut LayeredNet, p: Param) -> &mut f64 {
    match p {
        Param::Weight(l, i) => &mut net.layers_mut()[l].weight.as_slice_mut().expect("standard layout")[i],
        Param::Bias(l, i) => &mut net.layers_mut()[l].bias[i],
    }
}

/// Central differences of the loss with respect to every parameter.
pub fn finite_difference(net: &LayeredNet, x: ArrayView2<f64>, loss: &Loss, step: f64) -> Result<GradientRecord> {
    let mut out = GradientRecord::zeros_like(net);
    let mut probe = net.clone();
    let mut central = |p: Param| -> Result<f64> {
        let original = *param_mut(&mut probe, p);
        *param_mut(&mut probe, p) = original + step;
        let plus = loss_value(&probe, x, loss)?;
        *param_mut(&mut probe, p) = original - step;
        let minus = loss_value(&probe, x, loss)?;
        *param_mut(&mut probe, p) = original;
        Ok((plus - minus) / (2.0 * step))
    };
    for l in 0..net.depth() {
        for i in 0..net.layers()[l].weight.len() {
            out.weights[l].as_slice_mut().expect("standard layout")[i] = central(Param::Weight(l, i))?;
        }
        for i in 0..net.layers()[l].bias.len() {
            out.biases[l][i] = central(Param::Bias(l, i))?;
        }
    }
    Ok(out)
}

/// Largest entrywise gap relative to the largest gradient entry.
pub fn relative_error(a: &GradientRecord, b: &GradientRecord) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-8);
    let weights = a.weights.iter().zip(&b.weights).flat_map(|(x, y)| x.iter().zip(y.iter()));
    let biases = a.biases.iter().zip(&b.biases).flat_map(|(x, y)| x.iter().zip(y.iter()));
    weights.chain(biases).map(|(p, q)| (p - q).abs() / scale).fold(0.0, f64::max)
}

/// The training losses covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossKind {
    pub direction: KlDirection,
    pub head: OutputHead,
}

impl LossKind {
    pub fn all(floor: f64) -> Vec<LossKind> {
        let heads = [
            OutputHead::Softmax { classes: 3, floor },
            OutputHead::ScalarPositive { link: ScalarLink::Linear, floor },
            OutputHead::ScalarPositive { link: ScalarLink::Logistic, floor },
        ];
        heads
            .into_iter()
            .flat_map(|head| [KlDirection::Forward, KlDirection::Reverse].map(|direction| LossKind { direction, head }))
            .collect()
    }

    fn name(&self) -> String {
        let head = match self.head {
            OutputHead::Softmax { .. } => "softmax",
            OutputHead::ScalarPositive { link: ScalarLink::Linear, .. } => "linear",
            OutputHead::ScalarPositive { link: ScalarLink::Logistic, .. } => "logistic",
            OutputHead::None => "identity",
        };
        let dir = match self.direction {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        };
        format!("gradient {dir} {head}")
    }
}

/// One random network, batch and target per configuration.
fn gradient_case(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
    let input_dim = rng.random_range(2..=5);
    let depth = rng.random_range(1..=3);
    let n = rng.random_range(3..=8);
    let spec = ArchSpec {
        input_dim,
        output_dim: kind.head.width(),
        hidden_dim: Some(rng.random_range(2..=6)),
        depth,
        head: kind.head,
    };
    let mut net = init_net(&spec, rng.random())?;
    // Zero biases put whole batches exactly on a ReLU kink, where central
    // differences see a one-sided slope.
    for layer in net.layers_mut() {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    if let OutputHead::ScalarPositive { link: ScalarLink::Linear, .. } = kind.head {
        // Keep the clamp inactive so the loss is smooth around the point.
        let last = net.layers_mut().last_mut().expect("depth ≥ 1");
        last.weight.mapv_inplace(|w| 0.05 * w);
        last.bias.fill(0.5);
    }
    let x = SampleSet::gaussian(n, input_dim, 1.0, rng.random(), 0)?;
    let floor = kind.head.floor();
    let grads = match kind.head {
        OutputHead::Softmax { classes, .. } => {
            let rows: Vec<f64> = (0..n).flat_map(|_| random_simplex(rng, classes, floor)).collect();
            let targets = Array2::from_shape_vec((n, classes), rows).expect("shape");
            let loss = Loss::new(kind.direction, Targets::Pointwise(targets.view()));
            (backward(&net, x.inputs.view(), &loss)?, finite_difference(&net, x.inputs.view(), &loss, FD_STEP)?)
        }
        _ => {
            let target = random_simplex(rng, n, floor.min(0.5 / n as f64));
            let loss = Loss::new(kind.direction, Targets::Distribution(&target));
            (backward(&net, x.inputs.view(), &loss)?, finite_difference(&net, x.inputs.view(), &loss, FD_STEP)?)
        }
    };
    let err = relative_error(&grads.0, &grads.1);
    Ok((err, err <= GRADIENT_TOLERANCE))
}

pub fn gradient_suites(configs: usize, seed: u64) -> Vec<SuiteOutcome> {
    LossKind::all(0.01)
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            suite(kind.name(), configs, GRADIENT_TOLERANCE, seed ^ i as u64, |rng| gradient_case(kind, rng))
        })
        .collect()
}

/// Dirichlet(1) draw mixed with the uniform so every entry is at least `floor`.
pub fn random_simplex(rng: &mut impl Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    let free = 1.0 - k as f64 * floor;
    raw.into_iter().map(|v| floor + free * v / total).collect()
}

fn random_prob(rng: &mut impl Rng, k: usize, floor: f64) -> Result<ProbVector> {
    ProbVector::new(random_simplex(rng, k, floor), floor)
}

/// Pinsker and Bretagnolle–Huber on random simplex pairs, including
/// near-coincident and near-degenerate ones.
pub fn divergence_inequality_suite(pairs: usize, seed: u64) -> SuiteOutcome {
    suite("pinsker and bretagnolle-huber", pairs, 0.0, seed, |rng| {
        let k = rng.random_range(2..=10);
        let floor = [1e-9f64, 1e-4, 1e-2][rng.random_range(0..3)].min(0.5 / k as f64);
        let p = random_prob(rng, k, floor)?;
        let q = if rng.random_bool(0.1) {
            let jitter: Vec<f64> = p.entries().iter().map(|v| v * (1.0 + 1e-6 * rng.random::<f64>())).collect();
            let total: f64 = jitter.iter().sum();
            ProbVector::new(jitter.iter().map(|v| v / total).collect(), floor * 0.5)?
        } else {
            random_prob(rng, k, floor)?
        };
        let kl = kl_discrete(&p, &q)?;
        let tv = tv_distance(&p, &q)?.value;
        let excess = (tv - pinsker_l1_bound(kl)).max(tv - bh_tv_bound(kl));
        Ok((excess.max(0.0), excess <= 0.0))
    })
}

fn random_instance(rng: &mut impl Rng, k: usize, floor: f64, size: usize) -> Result<DiscreteClassifierInstance> {
    let masses = random_simplex(rng, size, 0.0);
    let scores = (0..size).map(|_| random_prob(rng, k, floor)).collect::<Result<Vec<_>>>()?;
    let bayes = (0..size).map(|_| random_simplex(rng, k, 0.0)).collect();
    DiscreteClassifierInstance::new((0..size as u64).collect(), masses, scores, bayes)
}

/// Exact binary instances: the per-class calibration error is twice the
/// class-1 error.
pub fn mce_ece_suite(instances: usize, seed: u64) -> SuiteOutcome {
    suite("binary mce equals twice ece", instances, ECE_TOLERANCE, seed, |rng| {
        let size = rng.random_range(1..=8);
        let inst = random_instance(rng, 2, 0.01, size)?;
        let mce = mce_exact(&inst).mce.unwrap_or(f64::NAN);
        let gap = (mce - 2.0 * exact_binary_ece(&inst)).abs();
        Ok((gap, gap <= ECE_TOLERANCE))
    })
}

/// The calibration-gap inequality on random weak/strong score pairs over a
/// shared discrete domain.
pub fn calibration_gap_suite(pairs: usize, seed: u64) -> SuiteOutcome {
    let gamma = 0.01;
    suite("calibration gap from kl", pairs, 0.0, seed, |rng| {
        let k = rng.random_range(2..=4);
        let size = rng.random_range(1..=8);
        let weak = random_instance(rng, k, gamma, size)?;
        let strong_scores = (0..size).map(|_| random_prob(rng, k, gamma)).collect::<Result<Vec<_>>>()?;
        let strong = weak.with_scores(strong_scores)?;
        let d = kl_population(weak.scores(), strong.scores(), weak.masses())?;
        let report = check_t43(&mce_exact(&weak), &mce_exact(&strong), d)?;
        Ok(((report.lhs - report.rhs).max(0.0), report.holds && report.mode == CheckMode::Asserted))
    })
}

/// Output normalization: valid, idempotent, scale-free and deterministic.
pub fn normalize_suite(cases: usize, seed: u64) -> SuiteOutcome {
    suite("normalize fixpoint and determinism", cases, ECE_TOLERANCE, seed, |rng| {
        let n = rng.random_range(2..=64);
        let floor = [1e-4f64, 1e-3, 1e-2][rng.random_range(0..3)];
        if floor * n as f64 > 1.0 {
            return Ok((0.0, true));
        }
        let raw: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random::<f64>().powi(rng.random_range(1..=4)) })
            .collect();
        if raw.iter().all(|&v| v == 0.0) {
            return Ok((0.0, true));
        }
        let once = normalize_outputs(&raw, floor)?;
        let again = normalize_outputs(&raw, floor)?;
        let twice = normalize_outputs(once.entries(), floor)?;
        let scale = rng.random_range(0.1..10.0);
        let scaled = normalize_outputs(&raw.iter().map(|v| v * scale).collect::<Vec<_>>(), floor)?;
        let gap = |a: &ProbVector, b: &ProbVector| {
            a.entries().iter().zip(b.entries()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let sum_err = (once.entries().iter().sum::<f64>() - 1.0).abs();
        let worst = gap(&once, &twice).max(gap(&once, &scaled)).max(sum_err);
        let bitwise = once.entries().iter().zip(again.entries()).all(|(a, b)| a.to_bits() == b.to_bits());
        let floored = once.entries().iter().all(|&v| v >= floor);
        Ok((worst, bitwise && floored && worst <= ECE_TOLERANCE))
    })
}

/// Pass/fail of a bound report is exactly `lhs ≤ rhs + τ`.
pub fn report_algebra_suite(cases: usize, seed: u64) -> SuiteOutcome {
    suite("bound report algebra", cases, 0.0, seed, |rng| {
        let lhs = rng.random_range(-1.0..1.0);
        let rhs = if rng.random_bool(0.1) { lhs } else { rng.random_range(-1.0..1.0) };
        let tau = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..0.1) };
        let r = BoundCheckReport::new(TheoremTag::T51Realizable, lhs, rhs, Slack::fixed(tau), CheckMode::Asserted);
        let ok = r.holds == (lhs <= rhs + tau) && r.is_failure() == !r.holds;
        Ok((0.0, ok))
    })
}

/// Every suite at full size.
pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    let mut out = gradient_suites(GRADIENT_CONFIGS, seed);
    out.push(divergence_inequality_suite(SIMPLEX_PAIRS, seed.wrapping_add(1)));
    out.push(mce_ece_suite(BINARY_INSTANCES, seed.wrapping_add(2)));
    out.push(normalize_suite(NORMALIZE_CASES, seed.wrapping_add(3)));
    out.push(calibration_gap_suite(CALIBRATION_PAIRS, seed.wrapping_add(4)));
    out.push(report_algebra_suite(NORMALIZE_CASES, seed.wrapping_add(5)));
    out
}
