//! Eikonal approximation of the visible growth front.
//!
//! The front moves at `v = 4 sqrt(rho tr(D))` and the arrival time solves
//! `|grad T| v = 1` with `T = 0` on the sources. Solved with first-order
//! fast marching on the 6-neighbor Godunov stencil.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::fields::{FieldError, InvasionMap, Segmentation, Shape, TissueModel, VoxelGrid, NEVER_INVADED};
use crate::growth::{assemble_diffusion, initialize_density, GrowthError, ModelParams, SeedInit};

#[derive(Debug, Error)]
pub enum EikonalError {
    #[error("no source voxel with positive speed")]
    EmptySources,
    #[error("speed is zero everywhere")]
    AllZeroSpeed,
    #[error("invalid speed {value} at voxel {index}")]
    InvalidSpeed { index: usize, value: f64 },
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Front speed per voxel (mm per model-time unit); zero outside the brain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMap {
    shape: Shape,
    v: Vec<f64>,
}

impl SpeedMap {
    pub fn new(shape: Shape, v: Vec<f64>) -> Result<Self, EikonalError> {
        if v.len() != shape.len() {
            return Err(FieldError::LengthMismatch {
                expected: shape.len(),
                found: v.len(),
            }
            .into());
        }
        if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(EikonalError::InvalidSpeed { index: i, value: v[i] });
        }
        Ok(SpeedMap { shape, v })
    }

    /// Constant speed inside the mask.
    pub fn uniform(grid: &VoxelGrid, v: f64) -> Result<Self, EikonalError> {
        SpeedMap::new(
            *grid.shape(),
            grid.mask().iter().map(|&m| if m { v } else { 0.0 }).collect(),
        )
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.v[idx]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EikonalError> {
        SpeedMap::new(self.shape, self.v.iter().map(|x| x * factor).collect())
    }
}

/// `v(x) = 4 sqrt(rho tr(D(x)))`.
pub fn speed_from_params(tissue: &TissueModel, params: &ModelParams) -> SpeedMap {
    let d = assemble_diffusion(tissue, params);
    let v = d
        .tensors()
        .iter()
        .zip(tissue.grid().mask())
        .map(|(t, &m)| if m { 4.0 * (params.rho * t.trace()).sqrt() } else { 0.0 })
        .collect();
    SpeedMap {
        shape: *tissue.shape(),
        v,
    }
}

/// Voxels that act as fast-marching sources for a seed: the segmentation
/// itself, or the voxels where the initial Gaussian reaches `c_v`.
pub fn seed_sources(seed: &SeedInit, grid: &VoxelGrid, c_v: f64) -> Result<Segmentation, EikonalError> {
    let params = ModelParams {
        c_v,
        ..ModelParams::default()
    };
    let c0 = initialize_density(seed, grid, &params)?;
    let mut mask: Vec<bool> = c0.values().iter().map(|&c| c >= c_v && c > 0.0).collect();
    if let SeedInit::Gaussian { center, .. } = seed {
        // The voxel containing the center is always a source.
        if let Some(i) = grid.shape().nearest_voxel(*center) {
            mask[i] = true;
        }
    }
    Ok(Segmentation::new(*grid.shape(), mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Trial {
    t: f64,
    idx: usize,
}

impl Eq for Trial {}

impl Ord for Trial {
    // Reversed for a min-heap; ties broken by index for determinism.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Fast-marching solution plus the order in which voxels were frozen.
#[derive(Debug, Clone)]
pub struct MarchResult {
    pub map: InvasionMap,
    pub acceptance_order: Vec<usize>,
}

/// First-arrival times from the source voxels.
pub fn fast_march(speed: &SpeedMap, sources: &Segmentation) -> Result<InvasionMap, EikonalError> {
    Ok(fast_march_traced(speed, sources)?.map)
}

/// Godunov upwind update from the frozen neighbor minima along each axis.
fn godunov_update(mut mins: [f64; 3], n: usize, step: f64) -> f64 {
    let mins = &mut mins[..n];
    mins.sort_by(f64::total_cmp);
    let mut t = mins[0] + step;
    let mut sum = mins[0];
    let mut sum_sq = mins[0] * mins[0];
    let s2 = step * step;
    for k in 1..n {
        if t <= mins[k] {
            break;
        }
        sum += mins[k];
        sum_sq += mins[k] * mins[k];
        let kf = (k + 1) as f64;
        let disc = sum * sum - kf * (sum_sq - s2);
        if disc < 0.0 {
            break;
        }
        t = (sum + disc.sqrt()) / kf;
    }
    t
}

pub fn fast_march_traced(speed: &SpeedMap, sources: &Segmentation) -> Result<MarchResult, EikonalError> {
    march(speed, sources, None)
}

/// Like [`fast_march`], but stops once every voxel of `targets` with
/// positive speed is frozen and the front has moved past their latest
/// time. Voxels not reached by then stay [`NEVER_INVADED`], so the ranking
/// of any set containing `targets` against the rest is unchanged.
pub fn fast_march_until(
    speed: &SpeedMap,
    sources: &Segmentation,
    targets: &Segmentation,
) -> Result<InvasionMap, EikonalError> {
    Ok(march(speed, sources, Some(targets))?.map)
}

fn march(
    speed: &SpeedMap,
    sources: &Segmentation,
    targets: Option<&Segmentation>,
) -> Result<MarchResult, EikonalError> {
    let shape = *speed.shape();
    shape.ensure_same(sources.shape())?;
    if let Some(tg) = targets {
        shape.ensure_same(tg.shape())?;
    }
    let mut pending = targets.map_or(usize::MAX, |tg| tg.indices().filter(|&i| speed.v[i] > 0.0).count());
    let mut last_target_t = f64::INFINITY;
    if speed.v.iter().all(|&v| v == 0.0) {
        return Err(EikonalError::AllZeroSpeed);
    }
    let h = shape.spacing_mm;
    let mut t = vec![NEVER_INVADED; shape.len()];
    let mut frozen = vec![false; shape.len()];
    let mut heap = BinaryHeap::new();
    for i in sources.indices() {
        if speed.v[i] > 0.0 {
            t[i] = 0.0;
            heap.push(Trial { t: 0.0, idx: i });
        }
    }
    if heap.is_empty() {
        return Err(EikonalError::EmptySources);
    }
    near_field(speed, sources, &mut t, &mut heap);
    let axes: Vec<usize> = (0..3).filter(|&a| shape.axis_active(a)).collect();
    let mut order = Vec::new();

    while let Some(Trial { t: ti, idx: i }) = heap.pop() {
        if frozen[i] || ti > t[i] {
            continue;
        }
        if pending == 0 && ti > last_target_t {
            break;
        }
        frozen[i] = true;
        order.push(i);
        if targets.is_some_and(|tg| tg.contains(i)) {
            pending -= 1;
            if pending == 0 {
                last_target_t = ti;
            }
        }
        for o in shape.face_offsets() {
            let Some(j) = shape.offset(i, o) else { continue };
            if frozen[j] || speed.v[j] <= 0.0 {
                continue;
            }
            let mut mins = [NEVER_INVADED; 3];
            let mut n = 0;
            for &a in &axes {
                let mut m = NEVER_INVADED;
                for dir in [-1i64, 1] {
                    let mut off = [0i64; 3];
                    off[a] = dir;
                    if let Some(k) = shape.offset(j, off) {
                        if frozen[k] && t[k] < m {
                            m = t[k];
                        }
                    }
                }
                if m.is_finite() {
                    mins[n] = m;
                    n += 1;
                }
            }
            let candidate = godunov_update(mins, n, h / speed.v[j]);
            if candidate < t[j] {
                t[j] = candidate;
                heap.push(Trial { t: candidate, idx: j });
            }
        }
    }
    if targets.is_some() {
        for (ti, &f) in t.iter_mut().zip(&frozen) {
            if !f {
                *ti = NEVER_INVADED;
            }
        }
    }
    Ok(MarchResult {
        map: InvasionMap::new(shape, t)?,
        acceptance_order: order,
    })
}

/// Near-field radius in voxels around each source voxel.
pub const NEAR_FIELD_RADIUS: i64 = 5;

/// Seeds voxels close to a source with the straight-line travel time
/// `|x - s| / min(v(x), v(s))`. The first-order update alone spreads a
/// point source as a diamond and its error grows with distance; exact
/// values near the source remove most of it. A source voxel only takes
/// part when its whole neighbourhood has positive speed, so a thin
/// barrier is never jumped. Sources enclosed by other sources are skipped;
/// their neighbourhood is covered by the enclosing ones.
fn near_field(speed: &SpeedMap, sources: &Segmentation, t: &mut [f64], heap: &mut BinaryHeap<Trial>) {
    let shape = *speed.shape();
    let r = NEAR_FIELD_RADIUS;
    let span = |a: usize| if shape.axis_active(a) { -r..=r } else { 0..=0 };
    let offsets: Vec<([i64; 3], f64)> = span(0)
        .flat_map(|x| span(1).flat_map(move |y| span(2).map(move |z| [x, y, z])))
        .filter_map(|o| {
            let d2 = o.iter().map(|c| c * c).sum::<i64>();
            (d2 > 0 && d2 <= r * r).then(|| (o, (d2 as f64).sqrt() * shape.spacing_mm))
        })
        .collect();
    for s in sources.indices() {
        let vs = speed.v[s];
        let interior = shape
            .face_offsets()
            .all(|o| shape.offset(s, o).is_some_and(|j| sources.contains(j)));
        if vs <= 0.0 || interior {
            continue;
        }
        let clean = offsets
            .iter()
            .all(|(o, _)| shape.offset(s, *o).is_some_and(|j| speed.v[j] > 0.0));
        if !clean {
            continue;
        }
        for (o, d) in &offsets {
            let j = shape.offset(s, *o).expect("checked above");
            let candidate = d / vs.min(speed.v[j]);
            if candidate < t[j] {
                t[j] = candidate;
                heap.push(Trial { t: candidate, idx: j });
            }
        }
    }
}
