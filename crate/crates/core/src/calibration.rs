//! Marginal and expected calibration error.
//!
//! Exact MCE is only defined on finite instances, where conditioning on a
//! score value means pooling the points that share it. Continuous models go
//! through the binned estimators.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::divergence::{bh_tv_bound, DivergenceKind, DivergenceValue, ProbVector, SUM_TOLERANCE};
use crate::error::{Error, Result};

/// Scores are rounded to this many decimals before pooling.
pub const POOLING_DECIMALS: i32 = 12;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Exact,
    Binned,
}

/// What a score is conditioned on when pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// The scalar score of each class separately.
    #[default]
    PerCoordinate,
    /// The whole score vector.
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mce: Option<f64>,
    pub ece: Option<f64>,
    pub estimator: Estimator,
    pub bin_count: Option<usize>,
}

/// A finite domain with point masses, model scores and the true conditional
/// class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteClassifierInstance {
    ids: Vec<u64>,
    masses: Vec<f64>,
    scores: Vec<ProbVector>,
    bayes: Vec<Vec<f64>>,
}

impl DiscreteClassifierInstance {
    /// Bayes rows may touch 0 and 1; they are not held to the score floor.
    pub fn new(ids: Vec<u64>, masses: Vec<f64>, scores: Vec<ProbVector>, bayes: Vec<Vec<f64>>) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::DegenerateInput("instance has no domain points".into()));
        }
        for len in [masses.len(), scores.len(), bayes.len()] {
            crate::error::check_len(n, len)?;
        }
        if masses.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::Contract("point masses must be finite and non-negative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Contract(format!("point masses sum to {total}, not 1")));
        }
        let k = scores[0].len();
        for (s, b) in scores.iter().zip(&bayes) {
            crate::error::check_len(k, s.len())?;
            crate::error::check_len(k, b.len())?;
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) || (b.iter().sum::<f64>() - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Contract(format!("bayes row {b:?} is not a distribution")));
            }
        }
        Ok(Self { ids, masses, scores, bayes })
    }

    /// Same domain and bayes scores with different model scores.
    pub fn with_scores(&self, scores: Vec<ProbVector>) -> Result<Self> {
        Self::new(self.ids.clone(), self.masses.clone(), scores, self.bayes.clone())
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn scores(&self) -> &[ProbVector] {
        &self.scores
    }

    pub fn bayes(&self) -> &[Vec<f64>] {
        &self.bayes
    }

    pub fn classes(&self) -> usize {
        self.scores[0].len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes `point_id,mass,score_0..,bayes_0..` with a header row.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let k = self.classes();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
        let mut header = vec!["point_id".to_string(), "mass".to_string()];
        header.extend((0..k).map(|i| format!("score_{i}")));
        header.extend((0..k).map(|i| format!("bayes_{i}")));
        w.write_record(&header).map_err(io_err)?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].to_string(), format!("{:.17e}", self.masses[i])];
            row.extend(self.scores[i].entries().iter().map(|v| format!("{v:.17e}")));
            row.extend(self.bayes[i].iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Contract(format!("csv write failed: {e}")))
    }

    /// Inverse of [`Self::write_csv`]; `floor` is the score floor.
    pub fn read_csv<R: Read>(source: R, floor: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let header = r.headers().map_err(io_err)?.clone();
        let cols = header.len();
        if cols < 6 || cols % 2 != 0 {
            return Err(Error::Contract(format!("instance csv has {cols} columns")));
        }
        let k = (cols - 2) / 2;
        let (mut ids, mut masses, mut scores, mut bayes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for record in r.records() {
            let record = record.map_err(io_err)?;
            let field = |i: usize| -> Result<f64> {
                record[i].trim().parse::<f64>().map_err(|e| Error::Contract(format!("column {i}: {e}")))
            };
            ids.push(record[0].trim().parse::<u64>().map_err(|e| Error::Contract(format!("point id: {e}")))?);
            masses.push(field(1)?);
            scores.push(ProbVector::new((2..2 + k).map(field).collect::<Result<_>>()?, floor)?);
            bayes.push((2 + k..2 + 2 * k).map(field).collect::<Result<_>>()?);
        }
        Self::new(ids, masses, scores, bayes)
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::Contract(format!("instance csv: {e}"))
}

fn pool_key(v: f64) -> i64 {
    (v * 10f64.powi(POOLING_DECIMALS)).round() as i64
}

/// `Σ_g m_g |s_g − E[bayes | g]|` for groups keyed by `key`.
fn pooled_gap<K: Ord>(
    instance: &DiscreteClassifierInstance,
    key: impl Fn(usize) -> K,
    score: impl Fn(usize) -> f64,
    bayes: impl Fn(usize) -> f64,
) -> f64 {
    // (mass, mass·score, mass·bayes) per group; the score is constant within a
    // group up to rounding, so its mass-weighted mean stands for it.
    let mut groups: BTreeMap<K, (f64, f64, f64)> = BTreeMap::new();
    for (i, &m) in instance.masses.iter().enumerate() {
        let g = groups.entry(key(i)).or_default();
        g.0 += m;
        g.1 += m * score(i);
        g.2 += m * bayes(i);
    }
    groups.values().map(|&(_, ms, mb)| (ms - mb).abs()).sum()
}

/// Exact MCE, plus the exact class-1 ECE for binary instances.
pub fn mce_exact(instance: &DiscreteClassifierInstance) -> CalibrationReport {
    mce_exact_with(instance, Pooling::PerCoordinate)
}

pub fn mce_exact_with(instance: &DiscreteClassifierInstance, pooling: Pooling) -> CalibrationReport {
    let k = instance.classes();
    let score = |i: usize, c: usize| instance.scores[i].entries()[c];
    let class_gap = |c: usize| match pooling {
        Pooling::PerCoordinate => {
            pooled_gap(instance, |i| pool_key(score(i, c)), |i| score(i, c), |i| instance.bayes[i][c])
        }
        Pooling::Vector => pooled_gap(
            instance,
            |i| instance.scores[i].entries().iter().map(|&v| pool_key(v)).collect::<Vec<_>>(),
            |i| score(i, c),
            |i| instance.bayes[i][c],
        ),
    };
    let mce = (0..k).map(class_gap).sum::<f64>().min(2.0);
    let ece = (k == 2).then(|| exact_binary_ece(instance));
    CalibrationReport { mce: Some(mce), ece, estimator: Estimator::Exact, bin_count: None }
}

/// Calibration error of the class-1 score, pooled by its value.
pub fn exact_binary_ece(instance: &DiscreteClassifierInstance) -> f64 {
    let s1 = |i: usize| instance.scores[i].entries()[1];
    pooled_gap(instance, |i| pool_key(s1(i)), s1, |i| instance.bayes[i][1])
}

/// Equal-width binned ECE over `(confidence, correct)` pairs.
pub fn ece_binned(scores: &[(f64, bool)], bins: usize) -> Result<CalibrationReport> {
    if scores.is_empty() {
        return Err(Error::DegenerateInput("no predictions to calibrate".into()));
    }
    if bins == 0 {
        return Err(Error::Contract("bin count must be positive".into()));
    }
    if let Some((c, _)) = scores.iter().find(|(c, _)| !(0.0..=1.0).contains(c)) {
        return Err(Error::Contract(format!("confidence {c} outside [0, 1]")));
    }
    let ece = binned_gap(scores.iter().map(|&(c, y)| (c, if y { 1.0 } else { 0.0 })), scores.len(), bins);
    Ok(CalibrationReport { mce: None, ece: Some(ece), estimator: Estimator::Binned, bin_count: Some(bins) })
}

/// Binned MCE over per-class scores and observed labels, reported next to the
/// binned top-label ECE.
pub fn mce_binned(scores: &[ProbVector], labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    crate::error::check_len(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::DegenerateInput("no predictions to calibrate".into()));
    }
    let k = scores[0].len();
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
    }
    let n = scores.len();
    let mce: f64 = (0..k)
        .map(|c| {
            let pairs = scores.iter().zip(labels).map(|(s, &y)| (s.entries()[c], if y == c { 1.0 } else { 0.0 }));
            binned_gap(pairs, n, bins)
        })
        .sum();
    let top: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let (arg, conf) = argmax(s.entries());
            (conf, arg == y)
        })
        .collect();
    let ece = ece_binned(&top, bins)?.ece;
    Ok(CalibrationReport { mce: Some(mce), ece, estimator: Estimator::Binned, bin_count: Some(bins) })
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
}

fn binned_gap(pairs: impl Iterator<Item = (f64, f64)>, n: usize, bins: usize) -> f64 {
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    for (conf, outcome) in pairs {
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        sums[b].0 += 1;
        sums[b].1 += conf;
        sums[b].2 += outcome;
    }
    sums.iter().filter(|s| s.0 > 0).map(|&(_, c, o)| (c - o).abs()).sum::<f64>() / n as f64
}

/// `2·√(1 − e^{−d})`: the largest MCE gap a KL of `d` between the two models
/// allows.
pub fn calibration_gap_bound(d: DivergenceValue) -> f64 {
    debug_assert!(matches!(d.kind, DivergenceKind::Kl | DivergenceKind::EmpiricalKl));
    2.0 * bh_tv_bound(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec(), 0.01).unwrap()
    }

    #[test]
    fn single_point_mce() {
        let inst =
            DiscreteClassifierInstance::new(vec![0], vec![1.0], vec![pv(&[0.7, 0.3])], vec![vec![1.0, 0.0]]).unwrap();
        let r = mce_exact(&inst);
        assert_relative_eq!(r.mce.unwrap(), 0.6, max_relative = 1e-14);
        assert_relative_eq!(r.ece.unwrap(), 0.3, max_relative = 1e-14);
    }

    #[test]
    fn tied_scores_pool() {
        let inst = DiscreteClassifierInstance::new(
            vec![0, 1],
            vec![0.5, 0.5],
            vec![pv(&[0.8, 0.2]), pv(&[0.8, 0.2])],
            vec![vec![1.0, 0.0], vec![0.6, 0.4]],
        )
        .unwrap();
        assert!(mce_exact(&inst).mce.unwrap().abs() < 1e-15);
    }

    #[test]
    fn calibrated_model_scores_zero() {
        let inst = DiscreteClassifierInstance::new(
            vec![0, 1],
            vec![0.25, 0.75],
            vec![pv(&[0.2, 0.3, 0.5]), pv(&[0.6, 0.2, 0.2])],
            vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.2, 0.2]],
        )
        .unwrap();
        let r = mce_exact(&inst);
        assert!(r.mce.unwrap() < 1e-15);
        assert!(r.ece.is_none());
    }

    #[test]
    fn vector_pooling_differs_from_per_coordinate() {
        // Class-0 scores tie, full vectors do not.
        let inst = DiscreteClassifierInstance::new(
            vec![0, 1],
            vec![0.5, 0.5],
            vec![pv(&[0.5, 0.3, 0.2]), pv(&[0.5, 0.2, 0.3])],
            vec![vec![0.9, 0.05, 0.05], vec![0.1, 0.45, 0.45]],
        )
        .unwrap();
        let per = mce_exact_with(&inst, Pooling::PerCoordinate).mce.unwrap();
        let vec = mce_exact_with(&inst, Pooling::Vector).mce.unwrap();
        assert!(vec > per);
    }

    #[test]
    fn binned_ece_examples() {
        assert_eq!(ece_binned(&[(1.0, true); 5], 10).unwrap().ece, Some(0.0));
        let half = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(ece_binned(&half, 10).unwrap().ece, Some(0.0));
        let r = ece_binned(&[(0.9, true), (0.9, true), (0.9, true), (0.9, false)], 10).unwrap();
        assert_relative_eq!(r.ece.unwrap(), 0.15, max_relative = 1e-12);
        assert!(ece_binned(&[], 10).is_err());
        assert!(ece_binned(&[(1.2, true)], 10).is_err());
    }

    #[test]
    fn gap_bound_values() {
        assert_eq!(calibration_gap_bound(DivergenceValue::kl(0.0)), 0.0);
        assert_relative_eq!(calibration_gap_bound(DivergenceValue::kl(2f64.ln())), 2f64.sqrt(), max_relative = 1e-15);
        assert!(calibration_gap_bound(DivergenceValue::kl(1e3)) <= 2.0);
    }

    #[test]
    fn csv_round_trip() {
        let inst = DiscreteClassifierInstance::new(
            vec![3, 9],
            vec![0.3, 0.7],
            vec![pv(&[0.7, 0.3]), pv(&[1.0 / 3.0, 2.0 / 3.0])],
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
        )
        .unwrap();
        let mut buf = Vec::new();
        inst.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("point_id,mass,score_0,score_1,bayes_0,bayes_1\n"));
        assert_eq!(DiscreteClassifierInstance::read_csv(&buf[..], 0.01).unwrap(), inst);
    }

    #[test]
    fn malformed_instances_rejected() {
        assert!(
            DiscreteClassifierInstance::new(vec![0], vec![0.5], vec![pv(&[0.5, 0.5])], vec![vec![1.0, 0.0]]).is_err()
        );
        assert!(
            DiscreteClassifierInstance::new(vec![0], vec![1.0], vec![pv(&[0.5, 0.5])], vec![vec![0.7, 0.7]]).is_err()
        );
        assert!(DiscreteClassifierInstance::new(vec![], vec![], vec![], vec![]).is_err());
    }
}
