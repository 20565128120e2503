//! Anisotropic reaction-diffusion growth of the tumor cell density and
//! extraction of per-voxel invasion times.
//!
//! `dc/dt = div(D grad c) + rho c (1 - c)` with zero flux across the brain
//! boundary, where `D = kappa(x) I + tau F(x) T(x)`.
//!
//! The diffusion term is discretized on the cell-centered voxel grid as a
//! weighted graph Laplacian: each face link carries the face-averaged axis
//! coefficient and each in-plane diagonal link carries the face-averaged
//! mixed-derivative coefficient, using
//! `2 D_ab d_a d_b = |D_ab| ((d_a + s d_b)^2 - d_a^2 - d_b^2)` with
//! `s = sign(D_ab)`. All link weights are non-negative, so both schemes obey
//! the discrete maximum principle, and each link contributes equal and
//! opposite fluxes to its two endpoints, so mass is conserved exactly up to
//! rounding. Links to voxels outside the brain mask are dropped, which is
//! the mirrored-ghost zero-flux condition.

use rayon::prelude::*;
use thiserror::Error;

use crate::fields::{
    FieldError, InvasionMap, ScalarField, Segmentation, Shape, SymTensor, TissueClass, TissueModel, VoxelGrid,
    NEVER_INVADED,
};

/// Overshoot beyond `[0, 1]` that is clipped silently; anything larger is an
/// instability.
pub const OVERSHOOT_TOL: f64 = 1e-12;

/// Max-norm residual at which the implicit diffusion solve stops.
pub const CG_RESIDUAL_TOL: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("seed center {0:?} lies outside the brain mask")]
    SeedOutsideBrain([f64; 3]),
    #[error("segmentation seed is empty")]
    EmptySeed,
    #[error("time step {dt} exceeds the explicit stability limit {limit}")]
    UnstableTimeStep { dt: f64, limit: f64 },
    #[error("instability at step {step}: voxel {index} has density {value}")]
    Instability { step: usize, index: usize, value: f64 },
    #[error("implicit diffusion solve did not converge (residual {residual})")]
    SolverFailed { residual: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Growth model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Proliferation rate per model-time unit.
    pub rho: f64,
    /// Weight of the anisotropic tensor component.
    pub tau: f64,
    /// White-matter diffusivity (mm^2 per time unit).
    pub kappa_w: f64,
    /// Grey-matter diffusivity.
    pub kappa_g: f64,
    /// Visibility threshold.
    pub c_v: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            rho: 0.01,
            tau: 0.0,
            kappa_w: 0.1,
            kappa_g: 0.01,
            c_v: 0.5,
        }
    }
}

impl ModelParams {
    pub fn new(rho: f64, tau: f64, kappa_w: f64, kappa_g: f64) -> Result<Self, GrowthError> {
        let p = ModelParams {
            rho,
            tau,
            kappa_w,
            kappa_g,
            ..ModelParams::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GrowthError> {
        self.validate_dynamics()?;
        if self.rho <= 0.0 {
            return Err(GrowthError::InvalidParams(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }

    /// Like [`ModelParams::validate`] but admits `rho == 0` (pure
    /// diffusion), which the stepping code handles fine.
    pub fn validate_dynamics(&self) -> Result<(), GrowthError> {
        let bad = |m: String| Err(GrowthError::InvalidParams(m));
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.kappa_w > 0.0 && self.kappa_w.is_finite()) {
            return bad(format!("kappa_w must be > 0, got {}", self.kappa_w));
        }
        if !(self.kappa_g > 0.0 && self.kappa_g.is_finite()) {
            return bad(format!("kappa_g must be > 0, got {}", self.kappa_g));
        }
        if !(self.c_v > 0.0 && self.c_v < 1.0) {
            return bad(format!("c_v must lie in (0,1), got {}", self.c_v));
        }
        Ok(())
    }

    pub fn kappa(&self, class: TissueClass) -> f64 {
        match class {
            TissueClass::WhiteMatter => self.kappa_w,
            TissueClass::GreyMatter => self.kappa_g,
            TissueClass::Outside => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Forward Euler for diffusion and reaction.
    Explicit,
    /// Backward Euler diffusion (conjugate gradients), explicit reaction.
    SemiImplicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub dt: f64,
    pub t_max: f64,
    pub scheme: Scheme,
    /// Keep a density snapshot every this many steps.
    pub record_interval: Option<usize>,
    /// Interpolate crossing times linearly between the bracketing steps.
    pub interpolate_crossing: bool,
    /// Stop once every brain voxel has been invaded.
    pub stop_when_saturated: bool,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            dt: 0.5,
            t_max: 2000.0,
            scheme: Scheme::Explicit,
            record_interval: None,
            interpolate_crossing: true,
            stop_when_saturated: true,
        }
    }
}

impl SimulationSettings {
    pub fn validate(&self) -> Result<(), GrowthError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(GrowthError::InvalidSettings(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(GrowthError::InvalidSettings(format!(
                "t_max must be > 0, got {}",
                self.t_max
            )));
        }
        if self.record_interval == Some(0) {
            return Err(GrowthError::InvalidSettings("record_interval must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps needed to reach `t_max`.
    pub fn step_count(&self) -> usize {
        ((self.t_max / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Initial condition of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum SeedInit {
    /// Gaussian bump with unit peak centred at a voxel-space point.
    Gaussian { center: [f64; 3], sigma_mm: f64 },
    /// Density `c_v` on the segmented voxels.
    Segmentation(Segmentation),
}

impl SeedInit {
    pub fn gaussian(center: [f64; 3]) -> Self {
        SeedInit::Gaussian { center, sigma_mm: 1.0 }
    }
}

/// Cell density on the full grid; zero outside the brain.
#[derive(Debug, Clone, PartialEq)]
pub struct CellDensityField(ScalarField);

impl CellDensityField {
    pub fn new(grid: &VoxelGrid, values: Vec<f64>) -> Result<Self, GrowthError> {
        let field = ScalarField::new(*grid.shape(), values)?;
        for (i, (&v, &m)) in field.values().iter().zip(grid.mask()).enumerate() {
            let ok = if m { (0.0..=1.0).contains(&v) } else { v == 0.0 };
            if !ok {
                return Err(FieldError::InvalidValue {
                    index: i,
                    reason: format!("density {v}"),
                }
                .into());
            }
        }
        Ok(CellDensityField(field))
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn field(&self) -> &ScalarField {
        &self.0
    }

    pub fn into_field(self) -> ScalarField {
        self.0
    }

    /// Sum over the brain, in index order.
    pub fn total(&self) -> f64 {
        self.0.values().iter().sum()
    }
}

/// Per-voxel diffusion tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionField {
    shape: Shape,
    tensors: Vec<SymTensor>,
}

impl DiffusionField {
    pub fn new(shape: Shape, tensors: Vec<SymTensor>) -> Result<Self, FieldError> {
        if tensors.len() != shape.len() {
            return Err(FieldError::LengthMismatch {
                expected: shape.len(),
                found: tensors.len(),
            });
        }
        Ok(DiffusionField { shape, tensors })
    }

    pub fn zero(shape: Shape) -> Self {
        DiffusionField {
            tensors: vec![SymTensor::ZERO; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn get(&self, idx: usize) -> &SymTensor {
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[SymTensor] {
        &self.tensors
    }
}

/// `D(x) = kappa(x) I + tau F(x) T(x)` in the brain, zero outside.
pub fn assemble_diffusion(tissue: &TissueModel, params: &ModelParams) -> DiffusionField {
    let tensors = (0..tissue.shape().len())
        .map(|i| {
            let class = tissue.labels()[i];
            if class == TissueClass::Outside {
                return SymTensor::ZERO;
            }
            let iso = SymTensor::identity().scale(params.kappa(class));
            iso.add(&tissue.tensor(i).scale(params.tau * tissue.fa()[i]))
        })
        .collect();
    DiffusionField {
        shape: *tissue.shape(),
        tensors,
    }
}

/// Initial density for a seed.
pub fn initialize_density(
    seed: &SeedInit,
    grid: &VoxelGrid,
    params: &ModelParams,
) -> Result<CellDensityField, GrowthError> {
    let shape = *grid.shape();
    let values = match seed {
        SeedInit::Gaussian { center, sigma_mm } => {
            if !(*sigma_mm > 0.0) {
                return Err(GrowthError::InvalidParams(format!("sigma {sigma_mm}")));
            }
            match shape.nearest_voxel(*center) {
                Some(i) if grid.contains(i) => {}
                _ => return Err(GrowthError::SeedOutsideBrain(*center)),
            }
            let h = shape.spacing_mm;
            let two_var = 2.0 * sigma_mm * sigma_mm;
            (0..shape.len())
                .map(|i| {
                    if !grid.contains(i) {
                        return 0.0;
                    }
                    let c = shape.coords(i);
                    let d2: f64 = (0..3).map(|a| ((c[a] as f64 - center[a]) * h).powi(2)).sum();
                    (-d2 / two_var).exp()
                })
                .collect()
        }
        SeedInit::Segmentation(seg) => {
            shape.ensure_same(seg.shape())?;
            let (clean, _) = seg.sanitize(grid)?;
            if clean.is_empty() {
                return Err(GrowthError::EmptySeed);
            }
            clean.mask().iter().map(|&m| if m { params.c_v } else { 0.0 }).collect()
        }
    };
    CellDensityField::new(grid, values)
}

/// Link offsets for the stencil: face links, then diagonal links.
fn diagonal_offsets(shape: &Shape) -> Vec<(usize, usize, i64, [i64; 3])> {
    let mut out = Vec::new();
    for a in 0..3 {
        for b in (a + 1)..3 {
            if !(shape.axis_active(a) && shape.axis_active(b)) {
                continue;
            }
            for sign in [1i64, -1] {
                for dir in [1i64, -1] {
                    let mut o = [0i64; 3];
                    o[a] = dir;
                    o[b] = dir * sign;
                    out.push((a, b, sign, o));
                }
            }
        }
    }
    out
}

/// Per-voxel non-negative stencil coefficients of the diffusion operator.
fn axis_coefficient(d: &SymTensor, shape: &Shape, a: usize) -> f64 {
    let cross: f64 = (0..3)
        .filter(|&b| b != a && shape.axis_active(b))
        .map(|b| d.get(a, b).abs())
        .sum();
    (d.get(a, a) - cross).max(0.0)
}

fn diagonal_coefficient(d: &SymTensor, a: usize, b: usize, sign: i64) -> f64 {
    let v = d.get(a, b);
    if sign > 0 {
        v.max(0.0)
    } else {
        (-v).max(0.0)
    }
}

/// Sparse, symmetric discrete diffusion operator over the brain voxels.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    shape: Shape,
    /// Grid index of every brain voxel, ascending.
    active: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    row_sums: Vec<f64>,
    clamped: usize,
}

impl DiffusionOperator {
    pub fn new(grid: &VoxelGrid, diffusion: &DiffusionField) -> Result<Self, GrowthError> {
        let shape = *grid.shape();
        shape.ensure_same(diffusion.shape())?;
        let active: Vec<usize> = (0..shape.len()).filter(|&i| grid.contains(i)).collect();
        let mut pos = vec![u32::MAX; shape.len()];
        for (k, &i) in active.iter().enumerate() {
            pos[i] = k as u32;
        }
        let inv_h2 = 1.0 / (shape.spacing_mm * shape.spacing_mm);
        let faces: Vec<[i64; 3]> = shape.face_offsets().collect();
        let diagonals = diagonal_offsets(&shape);

        let mut clamped = 0;
        for &i in &active {
            let d = diffusion.get(i);
            for a in (0..3).filter(|&a| shape.axis_active(a)) {
                let cross: f64 = (0..3)
                    .filter(|&b| b != a && shape.axis_active(b))
                    .map(|b| d.get(a, b).abs())
                    .sum();
                if d.get(a, a) < cross {
                    clamped += 1;
                }
            }
        }

        let mut row_ptr = Vec::with_capacity(active.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut row_sums = Vec::with_capacity(active.len());
        row_ptr.push(0);
        for &i in &active {
            let di = diffusion.get(i);
            let mut sum = 0.0;
            for o in &faces {
                let a = o.iter().position(|&v| v != 0).unwrap();
                let Some(j) = shape.offset(i, *o) else { continue };
                if pos[j] == u32::MAX {
                    continue;
                }
                let w =
                    0.5 * (axis_coefficient(di, &shape, a) + axis_coefficient(diffusion.get(j), &shape, a)) * inv_h2;
                if w > 0.0 {
                    cols.push(pos[j]);
                    weights.push(w);
                    sum += w;
                }
            }
            for &(a, b, sign, o) in &diagonals {
                let Some(j) = shape.offset(i, o) else { continue };
                if pos[j] == u32::MAX {
                    continue;
                }
                let w = 0.5
                    * (diagonal_coefficient(di, a, b, sign) + diagonal_coefficient(diffusion.get(j), a, b, sign))
                    * inv_h2;
                if w > 0.0 {
                    cols.push(pos[j]);
                    weights.push(w);
                    sum += w;
                }
            }
            row_ptr.push(cols.len());
            row_sums.push(sum);
        }
        if clamped > 0 {
            log::debug!("{clamped} axis coefficients clamped to keep the stencil monotone");
        }
        Ok(DiffusionOperator {
            shape,
            active,
            row_ptr,
            cols,
            weights,
            row_sums,
            clamped,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Grid indices of the brain voxels, in operator order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Number of axis coefficients raised to zero because the cross terms
    /// dominated the diagonal.
    pub fn clamped_coefficients(&self) -> usize {
        self.clamped
    }

    pub fn max_row_sum(&self) -> f64 {
        self.row_sums.iter().copied().fold(0.0, f64::max)
    }

    /// Largest explicit step that keeps the update a convex combination
    /// (including the logistic term).
    pub fn explicit_dt_limit(&self, rho: f64) -> f64 {
        1.0 / (self.max_row_sum() + rho)
    }

    /// `out[k] = sum_j w_kj (u_j - u_k)`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(k, o)| {
            let uk = u[k];
            let mut acc = 0.0;
            for e in self.row_ptr[k]..self.row_ptr[k + 1] {
                acc += self.weights[e] * (u[self.cols[e] as usize] - uk);
            }
            *o = acc;
        });
    }

    fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&i| full[i]).collect()
    }

    fn scatter(&self, compact: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.shape.len()];
        for (&i, &v) in self.active.iter().zip(compact) {
            full[i] = v;
        }
        full
    }

    /// Solves `(I - dt L) x = b` by Jacobi-preconditioned conjugate
    /// gradients. The matrix is strictly diagonally dominant with unit
    /// margin, so the max-norm error is bounded by the max-norm residual.
    fn solve_implicit(&self, b: &[f64], dt: f64) -> Result<Vec<f64>, GrowthError> {
        let n = b.len();
        let diag: Vec<f64> = self.row_sums.iter().map(|s| 1.0 + dt * s).collect();
        let matvec = |x: &[f64], y: &mut [f64]| {
            self.apply(x, y);
            for k in 0..n {
                y[k] = x[k] - dt * y[k];
            }
        };
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let mut x = b.to_vec();
        let mut ax = vec![0.0; n];
        matvec(&x, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        if max_abs(&r) <= CG_RESIDUAL_TOL {
            return Ok(x);
        }
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        let max_iter = 10 * n + 100;
        for it in 0..max_iter {
            matvec(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for k in 0..n {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            // Refresh the residual now and then to stop rounding drift.
            if it % 50 == 49 {
                matvec(&x, &mut ax);
                for k in 0..n {
                    r[k] = b[k] - ax[k];
                }
            }
            if max_abs(&r) <= CG_RESIDUAL_TOL {
                return Ok(x);
            }
            for k in 0..n {
                z[k] = r[k] / diag[k];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
        }
        matvec(&x, &mut ax);
        let residual = b.iter().zip(&ax).fold(0.0f64, |m, (bi, ai)| m.max((bi - ai).abs()));
        if residual <= CG_RESIDUAL_TOL {
            Ok(x)
        } else {
            Err(GrowthError::SolverFailed { residual })
        }
    }
}

/// Reaction-diffusion stepper bound to one operator and parameter set.
#[derive(Debug, Clone)]
pub struct GrowthSolver {
    grid: VoxelGrid,
    op: DiffusionOperator,
    params: ModelParams,
}

impl GrowthSolver {
    pub fn new(grid: &VoxelGrid, diffusion: &DiffusionField, params: &ModelParams) -> Result<Self, GrowthError> {
        params.validate_dynamics()?;
        Ok(GrowthSolver {
            grid: grid.clone(),
            op: DiffusionOperator::new(grid, diffusion)?,
            params: *params,
        })
    }

    pub fn operator(&self) -> &DiffusionOperator {
        &self.op
    }

    pub fn explicit_dt_limit(&self) -> f64 {
        self.op.explicit_dt_limit(self.params.rho)
    }

    fn check_dt(&self, dt: f64, scheme: Scheme) -> Result<(), GrowthError> {
        let limit = match scheme {
            Scheme::Explicit => self.explicit_dt_limit(),
            Scheme::SemiImplicit if self.params.rho > 0.0 => 1.0 / self.params.rho,
            Scheme::SemiImplicit => f64::INFINITY,
        };
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(GrowthError::UnstableTimeStep { dt, limit });
        }
        Ok(())
    }

    /// One step on the compact (brain-only) density vector.
    fn step_compact(&self, c: &[f64], dt: f64, scheme: Scheme, step: usize) -> Result<Vec<f64>, GrowthError> {
        let rho = self.params.rho;
        let mut next = match scheme {
            Scheme::Explicit => {
                let mut lap = vec![0.0; c.len()];
                self.op.apply(c, &mut lap);
                c.iter()
                    .zip(&lap)
                    .map(|(&u, &l)| u + dt * l + dt * rho * u * (1.0 - u))
                    .collect::<Vec<_>>()
            }
            Scheme::SemiImplicit => {
                let rhs: Vec<f64> = c.iter().map(|&u| u + dt * rho * u * (1.0 - u)).collect();
                self.op.solve_implicit(&rhs, dt)?
            }
        };
        for (k, v) in next.iter_mut().enumerate() {
            if !v.is_finite() || *v < -OVERSHOOT_TOL || *v > 1.0 + OVERSHOOT_TOL {
                return Err(GrowthError::Instability {
                    step,
                    index: self.op.active[k],
                    value: *v,
                });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(next)
    }

    /// Advances the density by one time step.
    pub fn step(&self, c: &CellDensityField, dt: f64, scheme: Scheme) -> Result<CellDensityField, GrowthError> {
        self.check_dt(dt, scheme)?;
        let next = self.step_compact(&self.op.gather(c.values()), dt, scheme, 0)?;
        Ok(CellDensityField(ScalarField::new(
            *self.grid.shape(),
            self.op.scatter(&next),
        )?))
    }
}

/// One time step of the growth equation; builds the operator on every
/// call, so loops should hold a [`GrowthSolver`] instead.
pub fn step_density(
    c: &CellDensityField,
    grid: &VoxelGrid,
    diffusion: &DiffusionField,
    params: &ModelParams,
    dt: f64,
    scheme: Scheme,
) -> Result<CellDensityField, GrowthError> {
    GrowthSolver::new(grid, diffusion, params)?.step(c, dt, scheme)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    pub step: usize,
    pub time: f64,
    pub density: CellDensityField,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub invasion: InvasionMap,
    pub snapshots: Vec<DensitySnapshot>,
    pub final_density: CellDensityField,
    pub steps: usize,
    pub final_time: f64,
}

/// Runs the growth model from a seed and records invasion times.
pub fn simulate(
    seed: &SeedInit,
    tissue: &TissueModel,
    params: &ModelParams,
    settings: &SimulationSettings,
) -> Result<SimulationOutput, GrowthError> {
    params.validate()?;
    let diffusion = assemble_diffusion(tissue, params);
    simulate_with_diffusion(seed, tissue.grid(), &diffusion, params, settings)
}

/// [`simulate`] with an explicit diffusion field.
pub fn simulate_with_diffusion(
    seed: &SeedInit,
    grid: &VoxelGrid,
    diffusion: &DiffusionField,
    params: &ModelParams,
    settings: &SimulationSettings,
) -> Result<SimulationOutput, GrowthError> {
    settings.validate()?;
    let solver = GrowthSolver::new(grid, diffusion, params)?;
    let dt = settings.dt;
    solver.check_dt(dt, settings.scheme)?;
    let c0 = initialize_density(seed, grid, params)?;
    let op = &solver.op;
    let c_v = params.c_v;

    let mut c = op.gather(c0.values());
    // Voxels that start at or above the visibility threshold are invaded at t = 0.
    let mut t_inv: Vec<f64> = c.iter().map(|&u| if u >= c_v { 0.0 } else { NEVER_INVADED }).collect();
    let mut remaining = t_inv.iter().filter(|t| !t.is_finite()).count();

    let mut snapshots = Vec::new();
    let record = |step: usize, c: &[f64], snaps: &mut Vec<DensitySnapshot>| -> Result<(), GrowthError> {
        snaps.push(DensitySnapshot {
            step,
            time: step as f64 * dt,
            density: CellDensityField(ScalarField::new(*grid.shape(), op.scatter(c))?),
        });
        Ok(())
    };
    if settings.record_interval.is_some() {
        record(0, &c, &mut snapshots)?;
    }

    let n_steps = settings.step_count();
    let mut steps = 0;
    for n in 0..n_steps {
        if settings.stop_when_saturated && remaining == 0 {
            break;
        }
        let next = solver.step_compact(&c, dt, settings.scheme, n + 1)?;
        let t_prev = n as f64 * dt;
        let t_next = (n + 1) as f64 * dt;
        for k in 0..next.len() {
            if t_inv[k].is_finite() || next[k] <= c_v {
                continue;
            }
            t_inv[k] = if settings.interpolate_crossing && next[k] > c[k] {
                let frac = ((c_v - c[k]) / (next[k] - c[k])).clamp(0.0, 1.0);
                t_prev + dt * frac
            } else {
                t_next
            };
            remaining -= 1;
        }
        c = next;
        steps = n + 1;
        if let Some(every) = settings.record_interval {
            if steps % every == 0 {
                record(steps, &c, &mut snapshots)?;
            }
        }
    }

    let mut times = vec![NEVER_INVADED; grid.shape().len()];
    for (&i, &t) in op.active.iter().zip(&t_inv) {
        times[i] = t;
    }
    Ok(SimulationOutput {
        invasion: InvasionMap::masked(grid, times)?,
        snapshots,
        final_density: CellDensityField(ScalarField::new(*grid.shape(), op.scatter(&c))?),
        steps,
        final_time: steps as f64 * dt,
    })
}
