//! The synthetic weak-to-strong procedure: ground truth, representations,
//! weak and ceiling fits, weak-to-strong fits and per-task divergences.

mod config;
mod seeds;

pub use config::{direction_name, Depths, ExperimentConfig, HeadPrior, Regime, Schedules, Setting, Sigmas};
pub use seeds::{Role, SeedScheme};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{mce_binned, mce_exact, CalibrationReport, DiscreteClassifierInstance};
use crate::divergence::{kl_entries, output_profile, wis_entries, DivergenceValue, ProbVector};
use crate::error::{Error, Result};
use crate::mlpnet::{
    apply_step, backward, init_net, perturb_net, sgd_fit, Activation, ArchSpec, FitOutcome, FitReport, GradientRecord,
    KlDirection, Layer, LayeredNet, Loss, SampleSet, Schedule, Targets,
};

/// Draws `n` inputs from the stream `(role, index)`.
pub fn sample(cfg: &ExperimentConfig, role: Role, index: u64, n: usize) -> Result<SampleSet> {
    SampleSet::gaussian(n, cfg.input_dim, cfg.input_std, cfg.seed, SeedScheme::stream_id(role, index))
}

/// Feature mean and covariance on a probe sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl FeatureStats {
    pub fn of(rep: &LayeredNet, probe: &SampleSet) -> Result<Self> {
        let features = rep.forward(probe)?;
        let mean = features.mean_axis(Axis(0)).expect("probe is non-empty");
        let centered = &features - &mean;
        let covariance = centered.t().dot(&centered) / features.nrows() as f64;
        Ok(Self { mean, covariance })
    }

    /// Standard deviation of `w·h` over the probe.
    fn spread_along(&self, w: ndarray::ArrayView1<f64>) -> f64 {
        w.dot(&self.covariance.dot(&w)).max(0.0).sqrt()
    }
}

/// Random linear head whose pre-activations have mean `bias` and standard
/// deviation `scale` over the probe distribution.
pub fn sample_head(cfg: &ExperimentConfig, stats: &FeatureStats, rng: &mut ChaCha8Rng) -> Result<LayeredNet> {
    let head = cfg.output_head();
    let prior = cfg.head_prior();
    let d = stats.mean.len();
    let out = ArchSpec::head(d, head).output_dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut weight = Array2::from_shape_simple_fn((out, d), || normal.sample(rng));
    for mut row in weight.rows_mut() {
        let spread = stats.spread_along(row.view());
        let factor = if spread > 0.0 && spread.is_finite() { prior.scale / spread } else { 0.0 };
        row *= factor;
    }
    let bias = Array1::from_elem(out, prior.bias) - weight.dot(&stats.mean);
    LayeredNet::new(vec![Layer { weight, bias, activation: Activation::Identity }], head)
}

/// `h⋆` and the linear task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub representation: LayeredNet,
    pub stats: FeatureStats,
    pub pretrain_heads: Vec<LayeredNet>,
    pub task_heads: Vec<LayeredNet>,
}

impl GroundTruth {
    /// `F⋆ = f⋆ ∘ h⋆` for fine-tuning task `task_id`.
    pub fn task_model(&self, task_id: usize) -> Result<LayeredNet> {
        let head =
            self.task_heads.get(task_id).ok_or_else(|| Error::Contract(format!("task {task_id} out of range")))?;
        self.representation.compose(head)
    }
}

fn probe(cfg: &ExperimentConfig) -> Result<SampleSet> {
    sample(cfg, Role::ProbeData, 0, cfg.eval_samples)
}

pub fn make_ground_truth(cfg: &ExperimentConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let seeds = SeedScheme::new(cfg.seed);
    let spec = ArchSpec::representation(cfg.input_dim, cfg.rep_dim, cfg.depths.star);
    let representation = init_net(&spec, seeds.sub_seed(Role::TruthRepresentation, 0))?;
    let stats = FeatureStats::of(&representation, &probe(cfg)?)?;
    let heads = |role: Role, count: usize| -> Result<Vec<LayeredNet>> {
        (0..count as u64).map(|i| sample_head(cfg, &stats, &mut seeds.rng(role, i))).collect()
    };
    Ok(GroundTruth {
        pretrain_heads: heads(Role::PretrainHeads, cfg.pretrain_tasks)?,
        task_heads: heads(Role::TaskHeads, cfg.finetune_tasks)?,
        representation,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Origin {
    Truth,
    Perturbed { sigma: f64 },
    Pretrained,
}

/// A frozen representation ready for head fits.
#[derive(Debug, Clone)]
pub struct Representation {
    pub net: LayeredNet,
    pub origin: Origin,
    pub report: Option<FitReport>,
    pub stats: FeatureStats,
}

/// Learned target values for a loss, owned.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Rows(Array2<f64>),
    /// Scalar outputs normalized over the sample.
    Distribution(Vec<f64>),
}

impl Labels {
    /// Labels a sample with `model`.
    pub fn from_model(model: &LayeredNet, x: &SampleSet) -> Result<Self> {
        let out = model.forward(x)?;
        Ok(match model.head() {
            head @ crate::mlpnet::OutputHead::ScalarPositive { .. } => {
                Labels::Distribution(output_profile(&out.column(0).to_vec(), head.floor())?)
            }
            _ => Labels::Rows(out),
        })
    }

    pub fn targets(&self) -> Targets<'_> {
        match self {
            Labels::Rows(r) => Targets::Pointwise(r.view()),
            Labels::Distribution(d) => Targets::Distribution(d),
        }
    }
}

/// Gradient descent on the shared representation of several composed models
/// `heads[t] ∘ h`, minimizing the mean of their losses. Heads stay fixed.
pub fn fit_shared(
    init: &LayeredNet,
    heads: &[LayeredNet],
    data: &[(SampleSet, Labels)],
    direction: KlDirection,
    schedule: &Schedule,
) -> Result<FitOutcome> {
    schedule.validate()?;
    if heads.is_empty() || heads.len() != data.len() {
        return Err(Error::Contract(format!("{} heads for {} datasets", heads.len(), data.len())));
    }
    let depth = init.depth();
    let mask = vec![true; depth];
    let scale = 1.0 / heads.len() as f64;
    let gradient = |rep: &LayeredNet| -> Result<GradientRecord> {
        let parts: Vec<GradientRecord> = heads
            .par_iter()
            .zip(data)
            .map(|(head, (x, labels))| {
                let net = rep.compose(head)?;
                backward(&net, x.inputs.view(), &Loss::new(direction, labels.targets()).scaled(scale))
            })
            .collect::<Result<_>>()?;
        let mut total = GradientRecord::zeros_like(rep);
        for part in &parts {
            for i in 0..depth {
                total.weights[i] += &part.weights[i];
                total.biases[i] += &part.biases[i];
            }
            total.loss_value += part.loss_value;
        }
        Ok(total)
    };

    let mut rep = init.clone();
    let mut grads = gradient(&rep)?;
    let initial_loss = grads.loss_value;
    let mut checkpoints = vec![initial_loss];
    let mut steps_run = 0;
    while steps_run < schedule.steps && grads.norm(&mask) > schedule.grad_tol {
        apply_step(&mut rep, &grads, &mask, schedule.learning_rate);
        steps_run += 1;
        grads = gradient(&rep)?;
        if steps_run % schedule.log_every == 0 {
            checkpoints.push(grads.loss_value);
        }
    }
    let final_grad_norm = grads.norm(&mask);
    let report = FitReport {
        steps_run,
        initial_loss,
        final_loss: grads.loss_value,
        final_grad_norm,
        converged: final_grad_norm <= schedule.grad_tol,
        loss_increased: grads.loss_value > initial_loss,
        checkpoints,
    };
    Ok(FitOutcome { net: rep, report })
}

/// The pretraining objective's datasets: one labelled sample per pretraining
/// task, shared by the weak and strong representations.
pub fn pretraining_data(cfg: &ExperimentConfig, truth: &GroundTruth) -> Result<Vec<(SampleSet, Labels)>> {
    truth
        .pretrain_heads
        .iter()
        .enumerate()
        .map(|(t, head)| {
            let x = sample(cfg, Role::PretrainData, t as u64, cfg.pretrain_samples)?;
            let labels = Labels::from_model(&truth.representation.compose(head)?, &x)?;
            Ok((x, labels))
        })
        .collect()
}

/// Fits `init` to `h⋆` through the frozen pretraining heads, with the model
/// in the first argument of the divergence.
pub fn pretrain_from(cfg: &ExperimentConfig, truth: &GroundTruth, init: &LayeredNet) -> Result<FitOutcome> {
    let data = pretraining_data(cfg, truth)?;
    fit_shared(init, &truth.pretrain_heads, &data, KlDirection::Reverse, &cfg.representation_schedule())
}

pub fn pretrain_representation(cfg: &ExperimentConfig, truth: &GroundTruth, which: Which) -> Result<Representation> {
    let seeds = SeedScheme::new(cfg.seed);
    let (net, origin, report) = match (cfg.regime, which) {
        (Regime::RealizablePretrain, Which::Strong) => (truth.representation.clone(), Origin::Truth, None),
        (Regime::NonrealizablePerturb, _) => {
            let (sigma, role) = match which {
                Which::Weak => (cfg.sigmas.weak, Role::WeakPerturb),
                Which::Strong => (cfg.sigmas.strong, Role::StrongPerturb),
            };
            let net = perturb_net(&truth.representation, sigma, seeds.sub_seed(role, 0))?;
            (net, Origin::Perturbed { sigma }, None)
        }
        _ => {
            let (depth, role) = match which {
                Which::Weak => (cfg.weak_depth(), Role::WeakInit),
                Which::Strong => (cfg.strong_depth(), Role::StrongInit),
            };
            let spec = ArchSpec::representation(cfg.input_dim, cfg.rep_dim, depth);
            let init = init_net(&spec, seeds.sub_seed(role, 0))?;
            let fit = pretrain_from(cfg, truth, &init)?;
            (fit.net, Origin::Pretrained, Some(fit.report))
        }
    };
    let stats = FeatureStats::of(&net, &probe(cfg)?)?;
    Ok(Representation { net, origin, report, stats })
}

/// A composed model with its head-fit report.
#[derive(Debug, Clone)]
pub struct HeadFit {
    pub model: LayeredNet,
    pub report: FitReport,
}

/// Head-init streams: one per task and purpose.
const INIT_WEAK: u64 = 0;
const INIT_CEILING: u64 = 1;
const INIT_W2S: u64 = 2;

fn head_init(cfg: &ExperimentConfig, rep: &Representation, task_id: usize, purpose: u64) -> Result<LayeredNet> {
    let mut rng = SeedScheme::new(cfg.seed).rng(Role::HeadInit, task_id as u64 * 4 + purpose);
    sample_head(cfg, &rep.stats, &mut rng)
}

/// Trains only the head of `head ∘ rep`.
pub fn fit_head(
    cfg: &ExperimentConfig,
    rep: &LayeredNet,
    head: &LayeredNet,
    x: &SampleSet,
    labels: &Labels,
    direction: KlDirection,
) -> Result<HeadFit> {
    let net = rep.compose(head)?;
    let mut mask = vec![false; rep.depth()];
    mask.push(true);
    let fit = sgd_fit(&net, &mask, x, &Loss::new(direction, labels.targets()), &cfg.head_schedule())?;
    Ok(HeadFit { model: fit.net, report: fit.report })
}

fn fit_to_truth(
    cfg: &ExperimentConfig,
    truth: &GroundTruth,
    rep: &Representation,
    task_id: usize,
    role: Role,
    purpose: u64,
) -> Result<HeadFit> {
    let x = sample(cfg, role, task_id as u64, cfg.finetune_samples)?;
    let labels = Labels::from_model(&truth.task_model(task_id)?, &x)?;
    let head = head_init(cfg, rep, task_id, purpose)?;
    fit_head(cfg, &rep.net, &head, &x, &labels, KlDirection::Forward)
}

/// `F_w`: weak head trained on true labels.
pub fn finetune_weak(
    cfg: &ExperimentConfig,
    truth: &GroundTruth,
    h_w: &Representation,
    task_id: usize,
) -> Result<HeadFit> {
    fit_to_truth(cfg, truth, h_w, task_id, Role::FinetuneData, INIT_WEAK)
}

/// `F_s`: strong head trained on true labels.
pub fn train_strong_ceiling(
    cfg: &ExperimentConfig,
    truth: &GroundTruth,
    h_s: &Representation,
    task_id: usize,
) -> Result<HeadFit> {
    fit_to_truth(cfg, truth, h_s, task_id, Role::CeilingData, INIT_CEILING)
}

/// Strong head trained on `weak`'s labels over `x`, in the configured
/// direction.
pub fn w2s_fit(
    cfg: &ExperimentConfig,
    h_s: &Representation,
    weak: &LayeredNet,
    x: &SampleSet,
    task_id: usize,
) -> Result<HeadFit> {
    let labels = Labels::from_model(weak, x)?;
    let head = head_init(cfg, h_s, task_id, INIT_W2S)?;
    fit_head(cfg, &h_s.net, &head, x, &labels, cfg.loss_direction)
}

/// `F̂_sw` on a fresh weakly labelled sample, returned with that sample.
pub fn w2s_supervise(
    cfg: &ExperimentConfig,
    h_s: &Representation,
    weak: &LayeredNet,
    task_id: usize,
) -> Result<(HeadFit, SampleSet)> {
    let x = sample(cfg, Role::WeakLabelData, task_id as u64, cfg.weak_label_samples)?;
    Ok((w2s_fit(cfg, h_s, weak, &x, task_id)?, x))
}

/// Model outputs on the evaluation sample in the form the setting's
/// divergence consumes.
#[derive(Debug, Clone, PartialEq)]
enum Profile {
    Rows(Array2<f64>),
    Distribution(Vec<f64>),
}

impl Profile {
    fn of(model: &LayeredNet, x: &SampleSet) -> Result<Self> {
        Ok(match Labels::from_model(model, x)? {
            Labels::Rows(r) => Profile::Rows(r),
            Labels::Distribution(d) => Profile::Distribution(d),
        })
    }

    /// Empirical `d(self, other)`.
    fn divergence(&self, other: &Profile) -> DivergenceValue {
        let value = match (self, other) {
            (Profile::Rows(a), Profile::Rows(b)) => {
                let total: f64 = a
                    .axis_iter(Axis(0))
                    .zip(b.axis_iter(Axis(0)))
                    .map(|(p, q)| {
                        kl_entries(p.as_slice().expect("standard layout"), q.as_slice().expect("standard layout"))
                    })
                    .sum();
                total / a.nrows() as f64
            }
            (Profile::Distribution(a), Profile::Distribution(b)) => kl_entries(a, b),
            _ => unreachable!("profiles of one run share a setting"),
        };
        DivergenceValue::empirical_kl(value)
    }

    fn rows(&self) -> Option<&Array2<f64>> {
        match self {
            Profile::Rows(r) => Some(r),
            Profile::Distribution(_) => None,
        }
    }
}

/// Weighted IS divergence of `star` from `sw`, weight `sw − w`; mean over
/// points in the classification setting.
fn wis_value(star: &Profile, sw: &Profile, w: &Profile) -> f64 {
    match (star, sw, w) {
        (Profile::Rows(p), Profile::Rows(q), Profile::Rows(r)) => {
            let total: f64 = (0..p.nrows())
                .map(|i| {
                    let (p, q, r) = (p.row(i).to_vec(), q.row(i).to_vec(), r.row(i).to_vec());
                    let weight: Vec<f64> = q.iter().zip(&r).map(|(a, b)| a - b).collect();
                    wis_entries(&p, &q, &weight)
                })
                .sum();
            total / p.nrows() as f64
        }
        (Profile::Distribution(p), Profile::Distribution(q), Profile::Distribution(r)) => {
            let weight: Vec<f64> = q.iter().zip(r).map(|(a, b)| a - b).collect();
            wis_entries(p, q, &weight)
        }
        _ => unreachable!("profiles of one run share a setting"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceFlags {
    pub weak: bool,
    pub ceiling: bool,
    pub w2s_empirical: bool,
    pub w2s_population: bool,
}

impl ConvergenceFlags {
    pub fn all(&self) -> bool {
        self.weak && self.ceiling && self.w2s_empirical && self.w2s_population
    }
}

/// Exact and binned calibration of `F_w` and `F_sw` on the evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCalibration {
    pub weak_exact: CalibrationReport,
    pub strong_exact: CalibrationReport,
    pub weak_binned: CalibrationReport,
    pub strong_binned: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub weak: FitReport,
    pub ceiling: FitReport,
    pub w2s_empirical: FitReport,
    pub w2s_population: FitReport,
}

/// Every divergence between the five models of one task, estimated on the
/// evaluation sample. `d_a_b` is `d(F_a, F_b)`; `sw` is the strong model fit
/// to weak labels on the evaluation sample itself, `shat` the one fit on a
/// fresh weakly labelled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub setting: Setting,
    pub regime: Regime,
    pub loss_direction: KlDirection,
    pub weak_label_samples: usize,
    pub eval_samples: usize,
    pub d_star_w: DivergenceValue,
    pub d_star_sw: DivergenceValue,
    pub d_star_shat: DivergenceValue,
    pub d_sw_w: DivergenceValue,
    pub d_shat_w: DivergenceValue,
    pub d_shat_sw: DivergenceValue,
    /// `ε = d(F⋆, F_s)`.
    pub d_star_s: DivergenceValue,
    pub d_w_star: DivergenceValue,
    pub d_sw_star: DivergenceValue,
    pub d_w_sw: DivergenceValue,
    /// `d(F⋆,F_w) − d(F⋆,F_sw)`.
    pub gain: f64,
    pub wis_value: f64,
    pub converged: ConvergenceFlags,
    pub calibration: Option<TaskCalibration>,
    pub trace: TaskTrace,
}

impl TaskResult {
    pub fn misfit(&self) -> f64 {
        self.d_sw_w.value
    }

    pub fn epsilon(&self) -> f64 {
        self.d_star_s.value
    }

    /// `d(F⋆,F̂_sw) − (d(F⋆,F_w) − d(F̂_sw,F_w))`.
    pub fn residual(&self) -> f64 {
        self.d_star_shat.value - (self.d_star_w.value - self.d_shat_w.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: usize,
    pub message: String,
}

/// Ground truth and both representations; reusable across runs that differ
/// only in fine-tuning settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub truth: GroundTruth,
    pub weak: Representation,
    pub strong: Representation,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let truth = make_ground_truth(cfg)?;
    let (weak, strong) = rayon::join(
        || pretrain_representation(cfg, &truth, Which::Weak),
        || pretrain_representation(cfg, &truth, Which::Strong),
    );
    Ok(Prepared { weak: weak?, strong: strong?, truth })
}

pub fn run_task(cfg: &ExperimentConfig, prep: &Prepared, task_id: usize) -> Result<TaskResult> {
    let star = prep.truth.task_model(task_id)?;
    let weak = finetune_weak(cfg, &prep.truth, &prep.weak, task_id)?;
    let ceiling = train_strong_ceiling(cfg, &prep.truth, &prep.strong, task_id)?;
    let (shat, _) = w2s_supervise(cfg, &prep.strong, &weak.model, task_id)?;
    let eval = sample(cfg, Role::EvalData, task_id as u64, cfg.eval_samples)?;
    let sw = w2s_fit(cfg, &prep.strong, &weak.model, &eval, task_id)?;

    let [p_star, p_w, p_s, p_sw, p_shat] =
        [&star, &weak.model, &ceiling.model, &sw.model, &shat.model].map(|m| Profile::of(m, &eval));
    let (p_star, p_w, p_s, p_sw, p_shat) = (p_star?, p_w?, p_s?, p_sw?, p_shat?);
    let d_star_w = p_star.divergence(&p_w);
    let d_star_sw = p_star.divergence(&p_sw);

    let calibration = match (p_star.rows(), p_w.rows(), p_sw.rows()) {
        (Some(star_rows), Some(w_rows), Some(sw_rows)) => {
            Some(task_calibration(cfg, task_id, star_rows, w_rows, sw_rows)?)
        }
        _ => None,
    };

    Ok(TaskResult {
        task_id,
        setting: cfg.setting,
        regime: cfg.regime,
        loss_direction: cfg.loss_direction,
        weak_label_samples: cfg.weak_label_samples,
        eval_samples: cfg.eval_samples,
        gain: d_star_w.value - d_star_sw.value,
        wis_value: wis_value(&p_star, &p_sw, &p_w),
        d_star_w,
        d_star_sw,
        d_star_shat: p_star.divergence(&p_shat),
        d_sw_w: p_sw.divergence(&p_w),
        d_shat_w: p_shat.divergence(&p_w),
        d_shat_sw: p_shat.divergence(&p_sw),
        d_star_s: p_star.divergence(&p_s),
        d_w_star: p_w.divergence(&p_star),
        d_sw_star: p_sw.divergence(&p_star),
        d_w_sw: p_w.divergence(&p_sw),
        converged: ConvergenceFlags {
            weak: weak.report.converged,
            ceiling: ceiling.report.converged,
            w2s_empirical: shat.report.converged,
            w2s_population: sw.report.converged,
        },
        calibration,
        trace: TaskTrace {
            weak: weak.report,
            ceiling: ceiling.report,
            w2s_empirical: shat.report,
            w2s_population: sw.report,
        },
    })
}

/// Exact MCE treats the evaluation sample as a finite domain with uniform
/// mass and `F⋆` as the Bayes score; the binned estimators use labels drawn
/// from `F⋆`.
fn task_calibration(
    cfg: &ExperimentConfig,
    task_id: usize,
    star: &Array2<f64>,
    weak: &Array2<f64>,
    strong: &Array2<f64>,
) -> Result<TaskCalibration> {
    let n = star.nrows();
    let to_probs = |m: &Array2<f64>| -> Result<Vec<ProbVector>> {
        m.axis_iter(Axis(0)).map(|r| ProbVector::new(r.to_vec(), cfg.gamma)).collect()
    };
    let (weak_scores, strong_scores) = (to_probs(weak)?, to_probs(strong)?);
    let bayes: Vec<Vec<f64>> = star.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let domain =
        DiscreteClassifierInstance::new((0..n as u64).collect(), vec![1.0 / n as f64; n], weak_scores.clone(), bayes)?;
    let strong_domain = domain.with_scores(strong_scores.clone())?;

    let mut rng = SeedScheme::new(cfg.seed).rng(Role::CalibrationLabels, task_id as u64);
    let labels: Vec<usize> = star
        .axis_iter(Axis(0))
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            row.iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(row.len() - 1)
        })
        .collect();
    Ok(TaskCalibration {
        weak_exact: mce_exact(&domain),
        strong_exact: mce_exact(&strong_domain),
        weak_binned: mce_binned(&weak_scores, &labels, cfg.calibration_bins)?,
        strong_binned: mce_binned(&strong_scores, &labels, cfg.calibration_bins)?,
    })
}

/// Per-task results in task order; failing tasks are reported, not fatal.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub weak_pretraining: Option<FitReport>,
    pub strong_pretraining: Option<FitReport>,
    pub results: Vec<TaskResult>,
    pub failures: Vec<TaskFailure>,
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> ExperimentReport {
    let outcomes: Vec<(usize, Result<TaskResult>)> =
        (0..cfg.finetune_tasks).into_par_iter().map(|t| (t, run_task(cfg, prep, t))).collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (task_id, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push(TaskFailure { task_id, message: e.to_string() }),
        }
    }
    ExperimentReport {
        config: cfg.clone(),
        weak_pretraining: prep.weak.report.clone(),
        strong_pretraining: prep.strong.report.clone(),
        results,
        failures,
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    Ok(run_prepared(cfg, &prep))
}
