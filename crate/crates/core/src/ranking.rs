//! Evaluation of an invasion-time ranking against a segmentation:
//! precision-recall curve, Average Precision, the volume-matched operating
//! point and the per-voxel agreement map.
//!
//! Only the ordering of invasion times matters. Voxels with equal times
//! enter the prediction set together, as one threshold step.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::fields::{FieldError, InvasionMap, ScalarField, Segmentation};

/// Agreement value written for voxels outside the region of interest.
pub const AGREEMENT_SENTINEL: f64 = -1.0;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("segmentation has no voxels inside the region of interest")]
    EmptyPositives,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// One threshold of the precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    points: Vec<PrPoint>,
    /// The last point is the never-invaded pseudo-threshold, added because
    /// part of the segmentation is never reached.
    terminal_never_invaded: bool,
    positives: usize,
    roi_size: usize,
}

impl PrCurve {
    pub fn points(&self) -> &[PrPoint] {
        &self.points
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.threshold).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.recall).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.precision).collect()
    }

    pub fn has_never_invaded_step(&self) -> bool {
        self.terminal_never_invaded
    }

    /// `|S ∩ roi|`.
    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn roi_size(&self) -> usize {
        self.roi_size
    }

    /// Points at real (finite) thresholds.
    pub fn real_points(&self) -> &[PrPoint] {
        let n = self.points.len() - usize::from(self.terminal_never_invaded);
        &self.points[..n]
    }

    /// Index of the point whose threshold equals `t` exactly.
    fn index_of(&self, t: f64) -> Option<usize> {
        self.real_points().binary_search_by(|p| p.threshold.total_cmp(&t)).ok()
    }

    /// `threshold,recall,precision,tp,fp,fn` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,recall,precision,tp,fp,fn\n");
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                p.threshold, p.recall, p.precision, p.tp, p.fp, p.fn_
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

/// Sweeps every distinct finite invasion time inside `roi` in ascending
/// order, counting against `S ∩ roi`.
pub fn pr_curve(t: &InvasionMap, s: &Segmentation, roi: &Segmentation) -> Result<PrCurve, RankingError> {
    t.shape().ensure_same(s.shape())?;
    t.shape().ensure_same(roi.shape())?;
    let mut voxels: Vec<(f64, bool)> = roi.indices().map(|i| (t.get(i), s.contains(i))).collect();
    let positives = voxels.iter().filter(|v| v.1).count();
    if positives == 0 {
        return Err(RankingError::EmptyPositives);
    }
    voxels.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < voxels.len() && voxels[k].0.is_finite() {
        let value = voxels[k].0;
        while k < voxels.len() && voxels[k].0 == value {
            if voxels[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(point(value, tp, fp, positives));
    }
    let terminal_never_invaded = tp < positives;
    if terminal_never_invaded {
        let rest = &voxels[k..];
        let extra_tp = rest.iter().filter(|v| v.1).count();
        points.push(point(
            f64::INFINITY,
            tp + extra_tp,
            fp + rest.len() - extra_tp,
            positives,
        ));
    }
    Ok(PrCurve {
        points,
        terminal_never_invaded,
        positives,
        roi_size: voxels.len(),
    })
}

fn point(threshold: f64, tp: usize, fp: usize, positives: usize) -> PrPoint {
    PrPoint {
        threshold,
        recall: tp as f64 / positives as f64,
        precision: tp as f64 / (tp + fp) as f64,
        tp,
        fp,
        fn_: positives - tp,
    }
}

/// `AP = Σ_t (R(t) - R(t-1)) P(t)` over the curve, with `R = 0` before the
/// first threshold.
pub fn average_precision(pr: &PrCurve) -> f64 {
    // AP is a sum of rationals dtp * tp / (pred * npos). Summing them exactly
    // and dividing once keeps hand-checkable cases exact; floats take over if
    // the integers would overflow.
    let mut prev_tp = 0usize;
    let mut exact = Some((0u128, 1u128));
    let mut acc = 0.0;
    for p in &pr.points {
        if p.tp > prev_tp {
            let dtp = (p.tp - prev_tp) as f64;
            acc += dtp * p.precision;
            let pred = (p.tp + p.fp) as u128;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, (p.tp - prev_tp) as u128 * p.tp as u128, pred));
        }
        prev_tp = p.tp;
    }
    let exact = exact.and_then(|(n, d)| add_fraction(0, 1, n, d.checked_mul(pr.positives as u128)?));
    match exact {
        Some((n, d)) if n < (1 << 53) && d < (1 << 53) => n as f64 / d as f64,
        _ => acc / pr.positives as f64,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction(n1: u128, d1: u128, n2: u128, d2: u128) -> Option<(u128, u128)> {
    let g = gcd(d1, d2);
    let n = n1.checked_mul(d2 / g)?.checked_add(n2.checked_mul(d1 / g)?)?;
    let d = d1.checked_mul(d2 / g)?;
    let r = gcd(n, d).max(1);
    Some((n / r, d / r))
}

/// Smallest real threshold where recall has caught up with precision
/// (`tp > 0` and `R >= P`, i.e. the predicted volume reaches `|S ∩ roi|`).
/// Falls back to the last real threshold, or infinity if there is none.
pub fn volume_matched_threshold(pr: &PrCurve) -> f64 {
    let real = pr.real_points();
    real.iter()
        .find(|p| p.tp > 0 && p.tp + p.fp >= pr.positives)
        .or(real.last())
        .map_or(f64::INFINITY, |p| p.threshold)
}

/// Per-voxel agreement: `P(T(x))` inside `S`, `R(T(x))` outside `S`,
/// [`AGREEMENT_SENTINEL`] outside `roi`.
pub fn local_agreement(
    t: &InvasionMap,
    s: &Segmentation,
    roi: &Segmentation,
    pr: &PrCurve,
) -> Result<ScalarField, RankingError> {
    t.shape().ensure_same(s.shape())?;
    t.shape().ensure_same(roi.shape())?;
    let terminal = pr.points.last().copied();
    let mut values = vec![AGREEMENT_SENTINEL; t.shape().len()];
    for i in roi.indices() {
        let ti = t.get(i);
        let in_s = s.contains(i);
        values[i] = if ti.is_finite() {
            let k = pr
                .index_of(ti)
                .expect("every finite time inside the roi is a threshold");
            let p = &pr.points[k];
            if in_s {
                p.precision
            } else {
                p.recall
            }
        } else if in_s {
            terminal.map_or(0.0, |p| p.precision)
        } else {
            1.0
        };
    }
    Ok(ScalarField::new(*t.shape(), values)?)
}

/// Everything computed for one ranking against one segmentation.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ap: f64,
    pub pr: PrCurve,
    pub volume_matched_t: f64,
    pub agreement: ScalarField,
    /// Segmentation voxels outside the region of interest.
    pub excluded_voxel_count: usize,
}

pub fn evaluate(t: &InvasionMap, s: &Segmentation, roi: &Segmentation) -> Result<EvalReport, RankingError> {
    let pr = pr_curve(t, s, roi)?;
    let agreement = local_agreement(t, s, roi, &pr)?;
    Ok(EvalReport {
        ap: average_precision(&pr),
        volume_matched_t: volume_matched_threshold(&pr),
        excluded_voxel_count: s.minus(roi)?.count(),
        agreement,
        pr,
    })
}
