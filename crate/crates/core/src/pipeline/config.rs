use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlpnet::{KlDirection, OutputHead, ScalarLink, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Softmax heads; mean pointwise KL between class distributions.
    ClassificationKl,
    /// Positive scalar heads; KL between outputs normalized over the sample.
    OutputDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `h_s = h⋆`; `h_w` is pretrained.
    RealizablePretrain,
    /// Both representations are pretrained from scratch.
    NonrealizablePretrain,
    /// Both representations are noisy copies of `h⋆`.
    NonrealizablePerturb,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ClassificationKl => "classification-kl",
            Self::OutputDistribution => "output-distribution",
        })
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RealizablePretrain => "realizable-pretrain",
            Self::NonrealizablePretrain => "nonrealizable-pretrain",
            Self::NonrealizablePerturb => "nonrealizable-perturb",
        })
    }
}

pub fn direction_name(d: KlDirection) -> &'static str {
    match d {
        KlDirection::Forward => "forward-kl",
        KlDirection::Reverse => "reverse-kl",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Depths {
    pub weak: usize,
    pub strong: usize,
    pub star: usize,
}

impl Default for Depths {
    fn default() -> Self {
        Self { weak: 2, strong: 8, star: 16 }
    }
}

/// Perturbation scales of the strong and weak representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sigmas {
    pub strong: f64,
    pub weak: f64,
}

impl Default for Sigmas {
    fn default() -> Self {
        Self { strong: 0.1, weak: 9.0 }
    }
}

/// Unset entries take the setting's default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    /// Head fits on a frozen representation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<Schedule>,
    /// Multi-task representation pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub representation: Option<Schedule>,
}

impl Schedules {
    /// Softmax heads have far flatter curvature in whitened coordinates than
    /// normalized scalar heads, so they take a larger step.
    pub fn default_head(setting: Setting) -> Schedule {
        let lr = match setting {
            Setting::ClassificationKl => 1.0,
            Setting::OutputDistribution => 0.05,
        };
        Schedule::new(lr, 3000).preconditioned()
    }

    pub fn default_representation() -> Schedule {
        Schedule::new(0.05, 2000)
    }
}

/// Distribution of random linear task heads.
///
/// Pre-activations are `w·(h − μ) + bias` with `μ` the mean feature on a
/// probe sample and `w` scaled so the pre-activation has standard deviation
/// about `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPrior {
    pub scale: f64,
    pub bias: f64,
}

impl HeadPrior {
    pub fn default_for(setting: Setting) -> Self {
        match setting {
            Setting::ClassificationKl => Self { scale: 2.0, bias: 0.0 },
            Setting::OutputDistribution => Self { scale: 0.15, bias: 0.5 },
        }
    }
}

/// One synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub regime: Regime,
    pub loss_direction: KlDirection,
    /// Pretraining task count.
    pub pretrain_tasks: usize,
    /// Points per pretraining task.
    pub pretrain_samples: usize,
    /// Fine-tuning task count.
    pub finetune_tasks: usize,
    /// Points for each weak and ceiling head fit.
    pub finetune_samples: usize,
    /// Fresh weakly labelled points for the empirical strong fit.
    pub weak_label_samples: usize,
    /// Held-out points on which every divergence is estimated.
    pub eval_samples: usize,
    pub input_dim: usize,
    pub rep_dim: usize,
    /// Softmax width in the classification setting.
    pub classes: usize,
    /// Inputs are `N(0, input_std²·I)`.
    pub input_std: f64,
    /// Lower bound on every model output.
    pub gamma: f64,
    pub scalar_link: ScalarLink,
    pub depths: Depths,
    pub sigmas: Sigmas,
    /// Defaults depend on the setting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_prior: Option<HeadPrior>,
    /// Bins of the binned calibration estimators.
    pub calibration_bins: usize,
    pub seed: u64,
    pub schedules: Schedules,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setting: Setting::OutputDistribution,
            regime: Regime::RealizablePretrain,
            loss_direction: KlDirection::Reverse,
            pretrain_tasks: 10,
            pretrain_samples: 2000,
            finetune_tasks: 100,
            finetune_samples: 2000,
            weak_label_samples: 2000,
            eval_samples: 2000,
            input_dim: 8,
            rep_dim: 16,
            classes: 4,
            input_std: 1.0,
            gamma: 0.01,
            scalar_link: ScalarLink::Linear,
            depths: Depths::default(),
            sigmas: Sigmas::default(),
            head_prior: None,
            calibration_bins: crate::calibration::DEFAULT_BINS,
            seed: 0,
            schedules: Schedules::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced sizes that run in minutes on one core.
    pub fn desk_scale() -> Self {
        Self {
            pretrain_tasks: 5,
            pretrain_samples: 500,
            finetune_tasks: 20,
            finetune_samples: 500,
            weak_label_samples: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pretrain_tasks", self.pretrain_tasks),
            ("finetune_tasks", self.finetune_tasks),
            ("input_dim", self.input_dim),
            ("rep_dim", self.rep_dim),
            ("calibration_bins", self.calibration_bins),
            ("depths.weak", self.depths.weak),
            ("depths.strong", self.depths.strong),
            ("depths.star", self.depths.star),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(name, "must be positive"));
        }
        let samples = [
            ("pretrain_samples", self.pretrain_samples),
            ("finetune_samples", self.finetune_samples),
            ("weak_label_samples", self.weak_label_samples),
            ("eval_samples", self.eval_samples),
        ];
        if let Some((name, _)) = samples.iter().find(|(_, v)| *v < 2) {
            return Err(invalid(name, "needs at least 2 points"));
        }
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(invalid("gamma", "must lie in (0, 0.5)"));
        }
        if self.setting == Setting::ClassificationKl {
            if self.classes < 2 {
                return Err(invalid("classes", "must be at least 2"));
            }
            if self.gamma * self.classes as f64 >= 1.0 {
                return Err(invalid("gamma", "times classes must stay below 1"));
            }
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(invalid("input_std", "must be positive"));
        }
        for (name, v) in [("sigmas.strong", self.sigmas.strong), ("sigmas.weak", self.sigmas.weak)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be non-negative"));
            }
        }
        if i64::try_from(self.seed).is_err() {
            return Err(invalid("seed", "must fit a signed 64-bit integer"));
        }
        let prior = self.head_prior();
        if !(prior.scale > 0.0 && prior.scale.is_finite() && prior.bias.is_finite()) {
            return Err(invalid("head_prior", "needs a positive scale and finite bias"));
        }
        self.head_schedule().validate().map_err(|e| invalid("schedules.head", e))?;
        self.representation_schedule().validate().map_err(|e| invalid("schedules.representation", e))?;
        Ok(())
    }

    /// Copy with every setting-dependent default written out.
    pub fn resolved(&self) -> Self {
        Self {
            head_prior: Some(self.head_prior()),
            schedules: Schedules {
                head: Some(self.head_schedule()),
                representation: Some(self.representation_schedule()),
            },
            ..self.clone()
        }
    }

    pub fn head_schedule(&self) -> Schedule {
        self.schedules.head.unwrap_or_else(|| Schedules::default_head(self.setting))
    }

    pub fn representation_schedule(&self) -> Schedule {
        self.schedules.representation.unwrap_or_else(Schedules::default_representation)
    }

    pub fn head_prior(&self) -> HeadPrior {
        self.head_prior.unwrap_or_else(|| HeadPrior::default_for(self.setting))
    }

    /// Output head of every task model in this setting.
    pub fn output_head(&self) -> OutputHead {
        match self.setting {
            Setting::ClassificationKl => OutputHead::Softmax { classes: self.classes, floor: self.gamma },
            Setting::OutputDistribution => OutputHead::ScalarPositive { link: self.scalar_link, floor: self.gamma },
        }
    }

    /// Depth of the strong representation actually used.
    pub fn strong_depth(&self) -> usize {
        match self.regime {
            Regime::NonrealizablePretrain => self.depths.strong,
            _ => self.depths.star,
        }
    }

    pub fn weak_depth(&self) -> usize {
        match self.regime {
            Regime::NonrealizablePerturb => self.depths.star,
            _ => self.depths.weak,
        }
    }
}

fn invalid(field: &str, why: impl fmt::Display) -> Error {
    Error::Contract(format!("config field `{field}` {why}"))
}
