//! Voxel-grid geometry and the field types shared by every stage of the
//! pipeline.
//!
//! All linear buffers are x-fastest: `idx = x + nx * (y + ny * z)`.
//! Axes of extent 1 are inactive, so a grid with `nz == 1` behaves as a 2D
//! grid (no z-neighbors, no z boundary).

use thiserror::Error;

/// Encoding of a voxel that the growth front never reaches.
pub const NEVER_INVADED: f64 = f64::INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("invalid dims {0:?}")]
    InvalidDims([usize; 3]),
    #[error("invalid spacing {0}")]
    InvalidSpacing(f64),
    #[error("buffer has {found} voxels, grid needs {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(Shape, Shape),
    #[error("invalid value at voxel {index}: {reason}")]
    InvalidValue { index: usize, reason: String },
}

/// Dimensions and isotropic spacing of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
}

/// The six face-neighbor offsets.
pub const FACE_OFFSETS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

impl Shape {
    pub fn new(dims: [usize; 3], spacing_mm: f64) -> Result<Self, FieldError> {
        if dims.contains(&0) || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(FieldError::InvalidDims(dims));
        }
        if !(spacing_mm > 0.0 && spacing_mm.is_finite()) {
            return Err(FieldError::InvalidSpacing(spacing_mm));
        }
        Ok(Shape { dims, spacing_mm })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of axes with extent greater than one.
    pub fn active_dims(&self) -> usize {
        self.dims.iter().filter(|&&d| d > 1).count()
    }

    pub fn axis_active(&self, axis: usize) -> bool {
        self.dims[axis] > 1
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Linear index of `idx + offset`, or `None` when it leaves the grid.
    #[inline]
    pub fn offset(&self, idx: usize, offset: [i64; 3]) -> Option<usize> {
        let c = self.coords(idx);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + offset[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out[0], out[1], out[2]))
    }

    /// Face-neighbor offsets along active axes only.
    pub fn face_offsets(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        FACE_OFFSETS.iter().copied().filter(move |o| {
            let axis = o.iter().position(|&v| v != 0).unwrap();
            self.axis_active(axis)
        })
    }

    /// Voxel containing a continuous voxel-space point (nearest center).
    pub fn nearest_voxel(&self, p: [f64; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let r = p[a].round();
            if !r.is_finite() || r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            c[a] = r as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    pub fn ensure_same(&self, other: &Shape) -> Result<(), FieldError> {
        if self == other {
            Ok(())
        } else {
            Err(FieldError::GridMismatch(*self, *other))
        }
    }
}

fn check_len(shape: &Shape, found: usize) -> Result<(), FieldError> {
    if shape.len() != found {
        return Err(FieldError::LengthMismatch {
            expected: shape.len(),
            found,
        });
    }
    Ok(())
}

/// Grid geometry plus the brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    shape: Shape,
    mask: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(shape: Shape, mask: Vec<bool>) -> Result<Self, FieldError> {
        check_len(&shape, mask.len())?;
        Ok(VoxelGrid { shape, mask })
    }

    pub fn full(shape: Shape) -> Self {
        VoxelGrid {
            mask: vec![true; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn brain_voxel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The brain mask as a segmentation.
    pub fn as_segmentation(&self) -> Segmentation {
        Segmentation {
            shape: self.shape,
            mask: self.mask.clone(),
        }
    }

    /// In-mask voxels with at least one face neighbor outside the mask
    /// (leaving the grid counts as outside). Sorted ascending.
    pub fn boundary_voxels(&self) -> Vec<usize> {
        (0..self.shape.len())
            .filter(|&i| self.mask[i])
            .filter(|&i| {
                self.shape.face_offsets().any(|o| match self.shape.offset(i, o) {
                    Some(j) => !self.mask[j],
                    None => true,
                })
            })
            .collect()
    }
}

/// Per-voxel tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TissueClass {
    Outside = 0,
    WhiteMatter = 1,
    GreyMatter = 2,
}

impl TissueClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TissueClass::Outside),
            1 => Some(TissueClass::WhiteMatter),
            2 => Some(TissueClass::GreyMatter),
            _ => None,
        }
    }
}

/// Symmetric 3x3 tensor stored as its upper triangle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymTensor {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl SymTensor {
    pub const ZERO: SymTensor = SymTensor {
        xx: 0.0,
        xy: 0.0,
        xz: 0.0,
        yy: 0.0,
        yz: 0.0,
        zz: 0.0,
    };

    pub fn identity() -> Self {
        SymTensor::diag(1.0, 1.0, 1.0)
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        SymTensor {
            xx: a,
            yy: b,
            zz: c,
            ..SymTensor::ZERO
        }
    }

    /// `n n^T` for a direction `n` (not normalized here).
    pub fn outer(n: [f64; 3]) -> Self {
        SymTensor {
            xx: n[0] * n[0],
            xy: n[0] * n[1],
            xz: n[0] * n[2],
            yy: n[1] * n[1],
            yz: n[1] * n[2],
            zz: n[2] * n[2],
        }
    }

    pub fn from_upper(v: [f32; 6]) -> Self {
        SymTensor {
            xx: v[0] as f64,
            xy: v[1] as f64,
            xz: v[2] as f64,
            yy: v[3] as f64,
            yz: v[4] as f64,
            zz: v[5] as f64,
        }
    }

    pub fn to_upper_f32(&self) -> [f32; 6] {
        [
            self.xx as f32,
            self.xy as f32,
            self.xz as f32,
            self.yy as f32,
            self.yz as f32,
            self.zz as f32,
        ]
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn scale(&self, s: f64) -> Self {
        SymTensor {
            xx: self.xx * s,
            xy: self.xy * s,
            xz: self.xz * s,
            yy: self.yy * s,
            yz: self.yz * s,
            zz: self.zz * s,
        }
    }

    pub fn add(&self, o: &SymTensor) -> Self {
        SymTensor {
            xx: self.xx + o.xx,
            xy: self.xy + o.xy,
            xz: self.xz + o.xz,
            yy: self.yy + o.yy,
            yz: self.yz + o.yz,
            zz: self.zz + o.zz,
        }
    }

    /// Entry `(a, b)` of the full matrix.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        match (a.min(b), a.max(b)) {
            (0, 0) => self.xx,
            (0, 1) => self.xy,
            (0, 2) => self.xz,
            (1, 1) => self.yy,
            (1, 2) => self.yz,
            (2, 2) => self.zz,
            _ => panic!("tensor index out of range"),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.xx, self.xy, self.xz, self.yy, self.yz, self.zz]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Positive semi-definite up to `tol`, via the principal minors.
    pub fn is_psd(&self, tol: f64) -> bool {
        let m1 = [self.xx, self.yy, self.zz];
        let m2 = [
            self.xx * self.yy - self.xy * self.xy,
            self.xx * self.zz - self.xz * self.xz,
            self.yy * self.zz - self.yz * self.yz,
        ];
        let det = self.xx * (self.yy * self.zz - self.yz * self.yz) - self.xy * (self.xy * self.zz - self.yz * self.xz)
            + self.xz * (self.xy * self.yz - self.yy * self.xz);
        m1.iter().all(|&v| v >= -tol) && m2.iter().all(|&v| v >= -tol) && det >= -tol
    }

    /// Largest eigenvalue bound (Gershgorin).
    pub fn max_eigenvalue_bound(&self) -> f64 {
        let r0 = self.xx + self.xy.abs() + self.xz.abs();
        let r1 = self.yy + self.xy.abs() + self.yz.abs();
        let r2 = self.zz + self.xz.abs() + self.yz.abs();
        r0.max(r1).max(r2)
    }
}

/// Tissue labels, fractional anisotropy and the unit-trace diffusion tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueModel {
    grid: VoxelGrid,
    labels: Vec<TissueClass>,
    fa: Vec<f64>,
    tensor: Vec<[f32; 6]>,
}

/// Allowed deviation of an in-brain tensor trace from one (f32 storage).
pub const TENSOR_TRACE_TOL: f64 = 1e-5;

impl TissueModel {
    /// Builds a tissue model; the brain mask is `labels != Outside`.
    pub fn new(
        shape: Shape,
        labels: Vec<TissueClass>,
        fa: Vec<f64>,
        tensor: Vec<[f32; 6]>,
    ) -> Result<Self, FieldError> {
        check_len(&shape, labels.len())?;
        check_len(&shape, fa.len())?;
        check_len(&shape, tensor.len())?;
        let mask: Vec<bool> = labels.iter().map(|&l| l != TissueClass::Outside).collect();
        for i in 0..shape.len() {
            let bad = |reason: &str| FieldError::InvalidValue {
                index: i,
                reason: reason.to_string(),
            };
            let f = fa[i];
            if !(0.0..=1.0).contains(&f) {
                return Err(bad("fractional anisotropy outside [0,1]"));
            }
            if !mask[i] {
                if f != 0.0 {
                    return Err(bad("nonzero fractional anisotropy outside the brain"));
                }
                continue;
            }
            let t = SymTensor::from_upper(tensor[i]);
            if !t.is_finite() {
                return Err(bad("non-finite tensor"));
            }
            if (t.trace() - 1.0).abs() > TENSOR_TRACE_TOL {
                return Err(bad("tensor trace is not 1"));
            }
            if !t.is_psd(TENSOR_TRACE_TOL) {
                return Err(bad("tensor is not positive semi-definite"));
            }
        }
        Ok(TissueModel {
            grid: VoxelGrid { shape, mask },
            labels,
            fa,
            tensor,
        })
    }

    /// Homogeneous isotropic tissue of one class over the given mask.
    pub fn uniform(grid: &VoxelGrid, class: TissueClass) -> Self {
        let shape = *grid.shape();
        let labels = grid
            .mask()
            .iter()
            .map(|&m| if m { class } else { TissueClass::Outside })
            .collect();
        let iso = SymTensor::identity().scale(1.0 / 3.0).to_upper_f32();
        let tensor = grid.mask().iter().map(|&m| if m { iso } else { [0.0; 6] }).collect();
        TissueModel {
            grid: grid.clone(),
            labels,
            fa: vec![0.0; shape.len()],
            tensor,
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn shape(&self) -> &Shape {
        self.grid.shape()
    }

    pub fn labels(&self) -> &[TissueClass] {
        &self.labels
    }

    pub fn fa(&self) -> &[f64] {
        &self.fa
    }

    pub fn tensors(&self) -> &[[f32; 6]] {
        &self.tensor
    }

    pub fn tensor(&self, idx: usize) -> SymTensor {
        SymTensor::from_upper(self.tensor[idx])
    }

    /// Copy with extra voxels relabelled as outside the brain.
    pub fn without(&self, removed: &Segmentation) -> Result<Self, FieldError> {
        self.shape().ensure_same(removed.shape())?;
        let mut labels = self.labels.clone();
        let mut fa = self.fa.clone();
        for (i, &r) in removed.mask().iter().enumerate() {
            if r {
                labels[i] = TissueClass::Outside;
                fa[i] = 0.0;
            }
        }
        TissueModel::new(*self.shape(), labels, fa, self.tensor.clone())
    }
}

/// Binary mask on a grid (tumor segmentations, cavities, regions of interest).
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    shape: Shape,
    mask: Vec<bool>,
}

impl Segmentation {
    pub fn new(shape: Shape, mask: Vec<bool>) -> Result<Self, FieldError> {
        check_len(&shape, mask.len())?;
        Ok(Segmentation { shape, mask })
    }

    pub fn empty(shape: Shape) -> Self {
        Segmentation {
            mask: vec![false; shape.len()],
            shape,
        }
    }

    pub fn from_indices(shape: Shape, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Segmentation::empty(shape);
        for i in indices {
            s.mask[i] = true;
        }
        s
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i))
    }

    fn zip_with(&self, other: &Segmentation, f: impl Fn(bool, bool) -> bool) -> Result<Self, FieldError> {
        self.shape.ensure_same(&other.shape)?;
        Ok(Segmentation {
            shape: self.shape,
            mask: self.mask.iter().zip(&other.mask).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn union(&self, other: &Segmentation) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Segmentation) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn minus(&self, other: &Segmentation) -> Result<Self, FieldError> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Segmentation) -> bool {
        self.shape == other.shape && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Restricts the mask to the brain. Returns the sanitized mask and the
    /// number of voxels that fell outside the brain.
    pub fn sanitize(&self, grid: &VoxelGrid) -> Result<(Segmentation, usize), FieldError> {
        self.shape.ensure_same(grid.shape())?;
        let outside = self.mask.iter().zip(grid.mask()).filter(|(&s, &b)| s && !b).count();
        let clean = self.zip_with(&grid.as_segmentation(), |a, b| a && b)?;
        Ok((clean, outside))
    }
}

/// Real value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    shape: Shape,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self, FieldError> {
        check_len(&shape, values.len())?;
        Ok(ScalarField { shape, values })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        ScalarField {
            values: vec![value; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }
}

/// Per-voxel first time the visible front reaches the voxel.
///
/// Only the ordering of the times is meaningful downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct InvasionMap {
    shape: Shape,
    times: Vec<f64>,
}

impl InvasionMap {
    /// Validates `t >= 0` (or [`NEVER_INVADED`]) everywhere.
    pub fn new(shape: Shape, times: Vec<f64>) -> Result<Self, FieldError> {
        check_len(&shape, times.len())?;
        for (i, &t) in times.iter().enumerate() {
            if t.is_nan() || t < 0.0 {
                return Err(FieldError::InvalidValue {
                    index: i,
                    reason: format!("invasion time {t}"),
                });
            }
        }
        Ok(InvasionMap { shape, times })
    }

    /// Like [`InvasionMap::new`], and forces out-of-brain voxels to never
    /// invaded.
    pub fn masked(grid: &VoxelGrid, mut times: Vec<f64>) -> Result<Self, FieldError> {
        check_len(grid.shape(), times.len())?;
        for (t, &m) in times.iter_mut().zip(grid.mask()) {
            if !m {
                *t = NEVER_INVADED;
            }
        }
        InvasionMap::new(*grid.shape(), times)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.times[idx]
    }

    pub fn is_invaded(&self, idx: usize) -> bool {
        self.times[idx].is_finite()
    }

    /// `S(t) = { x : T(x) <= t }`.
    pub fn threshold_set(&self, t: f64) -> Segmentation {
        Segmentation {
            shape: self.shape,
            mask: self.times.iter().map(|&v| v <= t).collect(),
        }
    }

    /// Applies a map to every finite time (never-invaded stays infinite).
    pub fn map_finite(&self, f: impl Fn(f64) -> f64) -> Self {
        InvasionMap {
            shape: self.shape,
            times: self
                .times
                .iter()
                .map(|&t| if t.is_finite() { f(t) } else { t })
                .collect(),
        }
    }

    pub fn into_times(self) -> Vec<f64> {
        self.times
    }
}
