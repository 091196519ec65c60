//! Divergences and distances between probability vectors.
//!
//! Everything here works on finite vectors: a model's class probabilities at
//! one input (classification), or a model's outputs over a whole sample after
//! normalization (output-distribution setting). Logarithms are natural, so all
//! values are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mlpnet::{LayeredNet, SampleSet};

/// Absolute tolerance on the total mass of a [`ProbVector`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Maximum number of clamp-and-renormalize passes in [`normalize_outputs`].
pub const MAX_NORMALIZE_PASSES: usize = 8;

/// A point on the simplex whose entries all lie in `[floor, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    entries: Vec<f64>,
    floor: f64,
}

impl ProbVector {
    /// Validates `entries` against the floor and the unit-sum constraint.
    pub fn new(entries: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::Contract(format!("floor {floor} outside (0, 1)")));
        }
        if entries.len() < 2 {
            return Err(Error::Contract(format!("probability vector needs at least 2 entries, got {}", entries.len())));
        }
        for (index, &value) in entries.iter().enumerate() {
            // NaN fails both comparisons.
            if !(value >= floor && value <= 1.0) {
                return Err(Error::ClampViolation { index, value, floor });
            }
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("entries sum to {total}, expected 1")));
        }
        Ok(Self { entries, floor })
    }

    pub fn uniform(len: usize, floor: f64) -> Result<Self> {
        Self::new(vec![1.0 / len as f64; len], floor)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }
}

/// Which quantity a [`DivergenceValue`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DivergenceKind {
    Kl,
    Tv,
    Is,
    Wis,
    EmpiricalKl,
}

/// A divergence in nats, tagged with its kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceValue {
    pub value: f64,
    pub kind: DivergenceKind,
}

impl DivergenceValue {
    pub fn new(value: f64, kind: DivergenceKind) -> Self {
        Self { value, kind }
    }

    pub fn kl(value: f64) -> Self {
        Self::new(value, DivergenceKind::Kl)
    }

    pub fn empirical_kl(value: f64) -> Self {
        Self::new(value, DivergenceKind::EmpiricalKl)
    }
}

/// `Σ pᵢ ln(pᵢ/qᵢ)`.
///
/// Both inputs already satisfy their floors, so the ratio is always finite.
pub fn kl_discrete(p: &ProbVector, q: &ProbVector) -> Result<DivergenceValue> {
    check_len(p.len(), q.len())?;
    Ok(DivergenceValue::kl(kl_entries(p.entries(), q.entries())))
}

/// Raw KL sum without validation, as `Σ pᵢ ln(pᵢ/qᵢ) − pᵢ + qᵢ`.
///
/// The extra terms sum to zero for distributions but cancel the first-order
/// part of each log term, so near-identical pairs keep their relative
/// accuracy instead of drowning in the rounding of `Σp − Σq`. Every term is
/// non-negative; the total is clipped at zero against the last ulp.
pub(crate) fn kl_entries(p: &[f64], q: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == qi {
                0.0
            } else if pi == 0.0 {
                qi
            } else {
                pi * ((pi - qi) / qi).ln_1p() - (pi - qi)
            }
        })
        .sum();
    total.max(0.0)
}

/// Weighted mean of pointwise KL divergences, `Σⱼ wⱼ KL(f(xⱼ) ∥ g(xⱼ))`.
///
/// With uniform weights `1/n` this is the empirical classification loss.
pub fn kl_population(f_outputs: &[ProbVector], g_outputs: &[ProbVector], weights: &[f64]) -> Result<DivergenceValue> {
    check_len(f_outputs.len(), g_outputs.len())?;
    check_len(f_outputs.len(), weights.len())?;
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Contract("weights must be finite and non-negative".into()));
    }
    let mass: f64 = weights.iter().sum();
    if (mass - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Contract(format!("weights sum to {mass}, expected 1")));
    }
    let mut total = 0.0;
    for ((f, g), w) in f_outputs.iter().zip(g_outputs).zip(weights) {
        total += w * kl_discrete(f, g)?.value;
    }
    Ok(DivergenceValue::kl(total))
}

/// Normalizes raw non-negative outputs into a [`ProbVector`] with entries at
/// least `floor`, using a pre-normalization floor of zero.
pub fn normalize_outputs(raw: &[f64], floor: f64) -> Result<ProbVector> {
    normalize_outputs_with(raw, floor, 0.0)
}

/// Clamps raw values to `[pre_floor, ∞)`, divides by their sum, then pins any
/// entry below `floor` to exactly `floor` and rescales the rest
/// proportionally, repeating until no free entry falls below the floor.
///
/// When no entry needs pinning this is plain division by the sum.
pub fn normalize_outputs_with(raw: &[f64], floor: f64, pre_floor: f64) -> Result<ProbVector> {
    if raw.len() < 2 {
        return Err(Error::DegenerateInput(format!("need at least 2 outputs, got {}", raw.len())));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(Error::Contract(format!("floor {floor} outside (0, 1)")));
    }
    if floor * raw.len() as f64 > 1.0 {
        return Err(Error::DegenerateInput(format!("floor {floor} cannot hold for {} entries", raw.len())));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(format!("non-finite output {bad}")));
    }
    let clamped: Vec<f64> = raw.iter().map(|&v| v.max(pre_floor)).collect();
    let total: f64 = clamped.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::DegenerateInput(format!("outputs sum to {total}")));
    }

    let mut pinned = vec![false; clamped.len()];
    for _ in 0..MAX_NORMALIZE_PASSES {
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass: f64 = clamped.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(v, _)| v).sum();
        let budget = 1.0 - n_pinned as f64 * floor;
        if free_mass.is_nan() || free_mass <= 0.0 {
            return Err(Error::DegenerateInput("all outputs pinned at floor".into()));
        }
        let scale = budget / free_mass;
        let entries: Vec<f64> = clamped.iter().zip(&pinned).map(|(&v, &p)| if p { floor } else { v * scale }).collect();
        let mut changed = false;
        for (e, p) in entries.iter().zip(pinned.iter_mut()) {
            if !*p && *e < floor {
                *p = true;
                changed = true;
            }
        }
        if !changed {
            // Scaling can leave the largest entry a few ulps above one.
            let entries = entries.into_iter().map(|e| e.min(1.0)).collect();
            return ProbVector::new(entries, floor);
        }
    }
    Err(Error::DegenerateInput(format!("clamped renormalization did not settle within {MAX_NORMALIZE_PASSES} passes")))
}

/// A scalar model's outputs over a sample as a distribution over its points:
/// each raw output is held at `floor` or above, then divided by the total.
pub fn output_profile(raw: &[f64], floor: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::DegenerateInput("empty sample".into()));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(format!("non-finite output {bad}")));
    }
    let held: Vec<f64> = raw.iter().map(|&v| v.max(floor)).collect();
    let total: f64 = held.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateInput(format!("outputs sum to {total}")));
    }
    Ok(held.into_iter().map(|v| v / total).collect())
}

/// `KL(f ∥ g)` between the output profiles of two scalar-output nets on
/// `sample`.
pub fn kl_output_distribution(
    f: &LayeredNet,
    g: &LayeredNet,
    sample: &SampleSet,
    floor: f64,
) -> Result<DivergenceValue> {
    for net in [f, g] {
        if net.output_dim() != 1 {
            return Err(Error::Contract(format!(
                "output-distribution KL needs scalar outputs, got width {}",
                net.output_dim()
            )));
        }
    }
    let p = output_profile(&f.forward_scalar(sample)?, floor)?;
    let q = output_profile(&g.forward_scalar(sample)?, floor)?;
    Ok(DivergenceValue::empirical_kl(kl_entries(&p, &q)))
}

/// `½ Σ |pᵢ − qᵢ|`.
pub fn tv_distance(p: &ProbVector, q: &ProbVector) -> Result<DivergenceValue> {
    check_len(p.len(), q.len())?;
    let half_l1 = 0.5 * l1_distance(p.entries(), q.entries());
    Ok(DivergenceValue::new(half_l1.min(1.0), DivergenceKind::Tv))
}

pub(crate) fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// `Σ wᵢ (pᵢ/qᵢ − ln(pᵢ/qᵢ) − 1)`. Weights may be negative, in which case so
/// may the result.
pub fn weighted_is_divergence(p: &ProbVector, q: &ProbVector, weight: &[f64]) -> Result<DivergenceValue> {
    check_len(p.len(), q.len())?;
    check_len(p.len(), weight.len())?;
    let value = wis_entries(p.entries(), q.entries(), weight);
    Ok(DivergenceValue::new(value, DivergenceKind::Wis))
}

/// Unweighted Itakura–Saito divergence.
pub fn is_divergence(p: &ProbVector, q: &ProbVector) -> Result<DivergenceValue> {
    let ones = vec![1.0; p.len()];
    let value = weighted_is_divergence(p, q, &ones)?.value;
    Ok(DivergenceValue::new(value.max(0.0), DivergenceKind::Is))
}

pub(crate) fn wis_entries(p: &[f64], q: &[f64], weight: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .zip(weight)
        .map(|((&pi, &qi), &wi)| {
            let r = pi / qi;
            wi * (r - r.ln() - 1.0)
        })
        .sum()
}

/// Upper bound on total variation from KL: `√(1 − e^{−KL})`.
pub fn bh_tv_bound(kl: DivergenceValue) -> f64 {
    debug_assert!(matches!(kl.kind, DivergenceKind::Kl | DivergenceKind::EmpiricalKl));
    (-(-kl.value.max(0.0)).exp_m1()).sqrt()
}

/// Pinsker's bound on half the L1 distance: `√(KL/2)`.
pub fn pinsker_l1_bound(kl: DivergenceValue) -> f64 {
    debug_assert!(matches!(kl.kind, DivergenceKind::Kl | DivergenceKind::EmpiricalKl));
    (kl.value.max(0.0) / 2.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(entries: &[f64]) -> ProbVector {
        ProbVector::new(entries.to_vec(), 0.01).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_discrete(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap().value, 0.0);
        // Oracle values from a 40-digit evaluation of the defining sum.
        let v = kl_discrete(&pv(&[0.75, 0.25]), &pv(&[0.5, 0.5])).unwrap().value;
        assert_relative_eq!(v, 0.130_812_035_941_136_96, max_relative = 1e-14);
        let v = kl_discrete(&pv(&[0.9, 0.1]), &pv(&[0.1, 0.9])).unwrap().value;
        assert_relative_eq!(v, 1.757_779_661_868_975_5, max_relative = 1e-14);
        let fwd = kl_discrete(&pv(&[0.8, 0.2]), &pv(&[0.6, 0.4])).unwrap().value;
        let rev = kl_discrete(&pv(&[0.6, 0.4]), &pv(&[0.8, 0.2])).unwrap().value;
        assert_relative_eq!(fwd, 0.091_516_221_849_435_68, max_relative = 1e-14);
        assert_relative_eq!(rev, 0.104_649_628_752_909_57, max_relative = 1e-14);
    }

    #[test]
    fn kl_rejects_mismatch_and_floor() {
        let err = kl_discrete(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = ProbVector::new(vec![0.995, 0.005], 0.01).unwrap_err();
        assert!(matches!(err, Error::ClampViolation { index: 1, .. }));
    }

    #[test]
    fn population_kl_is_weighted_mean() {
        let f = vec![pv(&[0.75, 0.25]), pv(&[0.9, 0.1]), pv(&[0.8, 0.2])];
        let g = vec![pv(&[0.5, 0.5]), pv(&[0.1, 0.9]), pv(&[0.6, 0.4])];
        assert_eq!(kl_population(&f, &f, &[0.2, 0.3, 0.5]).unwrap().value, 0.0);

        let two = kl_population(&f[..2], &g[..2], &[0.5, 0.5]).unwrap().value;
        assert_relative_eq!(two, (0.130_812_035_941_136_96 + 1.757_779_661_868_975_5) / 2.0, max_relative = 1e-14);

        let w = [0.2, 0.3, 0.5];
        let expected: f64 = (0..3).map(|i| w[i] * kl_discrete(&f[i], &g[i]).unwrap().value).sum();
        assert_relative_eq!(kl_population(&f, &g, &w).unwrap().value, expected, max_relative = 1e-15);

        assert!(kl_population(&f, &g[..2], &w).is_err());
    }

    fn scalar_identity(floor: f64) -> LayeredNet {
        use crate::mlpnet::{Activation, Layer, OutputHead, ScalarLink};
        let layer =
            Layer { weight: ndarray::arr2(&[[1.0]]), bias: ndarray::arr1(&[0.0]), activation: Activation::Identity };
        LayeredNet::new(vec![layer], OutputHead::ScalarPositive { link: ScalarLink::Linear, floor }).unwrap()
    }

    fn points(values: &[f64]) -> SampleSet {
        let x = ndarray::Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        SampleSet::new(x, 0, 0, "fixed").unwrap()
    }

    #[test]
    fn output_distribution_kl() {
        let f = scalar_identity(0.01);
        let x = points(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(kl_output_distribution(&f, &f, &x, 0.01).unwrap().value, 0.0);

        // g doubles every output and shifts by 0.05, clamped into [0.01, 1].
        let mut g = f.clone();
        g.layers_mut()[0].weight[[0, 0]] = 2.0;
        g.layers_mut()[0].bias[0] = 0.05;
        let got = kl_output_distribution(&f, &g, &x, 0.01).unwrap().value;
        let p = normalize_outputs(&[0.1, 0.2, 0.3, 0.4], 0.01).unwrap();
        let q = normalize_outputs(&[0.25, 0.45, 0.65, 0.85], 0.01).unwrap();
        assert_relative_eq!(got, kl_discrete(&p, &q).unwrap().value, max_relative = 1e-14);
        assert_relative_eq!(got, 0.001_176_556_512_992_329, max_relative = 1e-12);

        // Constant outputs normalize to uniform whatever the constant.
        let mut c1 = f.clone();
        c1.layers_mut()[0].weight[[0, 0]] = 0.0;
        c1.layers_mut()[0].bias[0] = 0.3;
        let mut c2 = c1.clone();
        c2.layers_mut()[0].bias[0] = 0.7;
        assert_eq!(kl_output_distribution(&c1, &c2, &x, 0.01).unwrap().value, 0.0);
    }

    #[test]
    fn normalize_examples() {
        let p = normalize_outputs(&[1.0, 1.0, 1.0, 1.0], 0.01).unwrap();
        assert_eq!(p.entries(), &[0.25, 0.25, 0.25, 0.25]);
        let p = normalize_outputs(&[3.0, 1.0], 0.01).unwrap();
        assert_eq!(p.entries(), &[0.75, 0.25]);
        // Two entries pinned at 0.01 leave 0.98 for the remaining one.
        let p = normalize_outputs(&[100.0, 1e-7, 1e-7], 0.01).unwrap();
        assert_relative_eq!(p.entries()[0], 0.98, max_relative = 1e-15);
        assert_eq!(p.entries()[1], 0.01);
        assert_eq!(p.entries()[2], 0.01);
    }

    #[test]
    fn normalize_rejects_degenerate() {
        assert!(matches!(normalize_outputs(&[0.0, 0.0], 0.01), Err(Error::DegenerateInput(_))));
        assert!(matches!(normalize_outputs(&[1.0, f64::NAN], 0.01), Err(Error::DegenerateInput(_))));
        assert!(matches!(normalize_outputs(&[1.0], 0.01), Err(Error::DegenerateInput(_))));
        // Pre-floor rescues non-positive raw values.
        let p = normalize_outputs_with(&[0.0, -3.0, 2.0], 0.01, 1e-4).unwrap();
        assert_eq!(p.entries()[0], 0.01);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&pv(&[0.7, 0.3]), &pv(&[0.7, 0.3])).unwrap().value, 0.0);
        let g = 0.1;
        let p = ProbVector::new(vec![1.0 - g, g], g).unwrap();
        let q = ProbVector::new(vec![g, 1.0 - g], g).unwrap();
        assert_relative_eq!(tv_distance(&p, &q).unwrap().value, 0.8, max_relative = 1e-15);
        assert_relative_eq!(tv_distance(&pv(&[0.7, 0.3]), &pv(&[0.5, 0.5])).unwrap().value, 0.2, max_relative = 1e-14);
    }

    #[test]
    fn wis_examples() {
        let p = pv(&[0.6, 0.4]);
        let q = pv(&[0.4, 0.6]);
        assert_eq!(weighted_is_divergence(&p, &p, &[3.0, -2.0]).unwrap().value, 0.0);
        // The log terms cancel exactly: 1.5 + 2/3 − 2 = 1/6.
        assert_relative_eq!(
            weighted_is_divergence(&p, &q, &[1.0, 1.0]).unwrap().value,
            1.0 / 6.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            weighted_is_divergence(&p, &q, &[-1.0, -1.0]).unwrap().value,
            -1.0 / 6.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(is_divergence(&p, &q).unwrap().value, 1.0 / 6.0, max_relative = 1e-14);
    }

    #[test]
    fn closed_form_bounds() {
        assert_eq!(bh_tv_bound(DivergenceValue::kl(0.0)), 0.0);
        assert_relative_eq!(bh_tv_bound(DivergenceValue::kl(2f64.ln())), 0.707_106_781_186_547_5, max_relative = 1e-15);
        let big = bh_tv_bound(DivergenceValue::kl(50.0));
        assert!(big <= 1.0 && big > 0.999_999);

        assert_eq!(pinsker_l1_bound(DivergenceValue::kl(0.0)), 0.0);
        assert_eq!(pinsker_l1_bound(DivergenceValue::kl(0.5)), 0.5);
        assert_eq!(pinsker_l1_bound(DivergenceValue::empirical_kl(2.0)), 1.0);
    }
}
