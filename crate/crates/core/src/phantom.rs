//! Synthetic cases with known ground truth.
//!
//! A phantom is an ellipsoidal brain with a simple tissue layout and fiber
//! pattern. The growth model is run from a Gaussian seed and the
//! segmentations are read off the invasion map at three times.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fields::{FieldError, InvasionMap, Segmentation, Shape, SymTensor, TissueClass, TissueModel};
use crate::growth::{simulate, GrowthError, ModelParams, SeedInit, SimulationSettings};
use crate::grv::{self, GrvError};
use crate::schemes::CaseData;

pub const S0_FILE: &str = "s0.grv";
pub const S1_FILE: &str = "s1.grv";
pub const S2_FILE: &str = "s2.grv";
pub const CAVITY_FILE: &str = "cavity.grv";
pub const TRUTH_T_FILE: &str = "truth_T.grv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Fractional anisotropy used by the patterned FA maps.
pub const BAND_FA: f64 = 0.7;
pub const RADIAL_FA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("degenerate phantom: {0}")]
    Degenerate(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grv(#[from] GrvError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} '{other}'", stringify!($name))),
                }
            }
        }
    };
}

named_enum!(TissueLayout {
    TwoLayerSlab => "two_layer_slab",
    ConcentricShells => "concentric_shells",
    CheckerboardPatch => "checkerboard_patch",
});

named_enum!(FaPattern {
    Zero => "zero",
    ConstantBand => "constant_band",
    RadialFiber => "radial_fiber",
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavitySpec {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub layout: TissueLayout,
    pub fa_pattern: FaPattern,
    /// Voxel-space onset; drawn from `rng_seed` when `None`.
    pub seed: Option<[f64; 3]>,
    pub params: ModelParams,
    /// Snapshot times `t0 <= t1 < t2`.
    pub times: [f64; 3],
    pub cavity: Option<CavitySpec>,
    pub rng_seed: u64,
    /// `t_max` is raised to `t2` if shorter.
    pub sim: SimulationSettings,
}

impl PhantomSpec {
    /// 128 x 128 slice.
    pub fn default_2d() -> Self {
        PhantomSpec {
            dims: [128, 128, 1],
            spacing_mm: 1.0,
            layout: TissueLayout::TwoLayerSlab,
            fa_pattern: FaPattern::ConstantBand,
            seed: None,
            params: ModelParams {
                rho: 0.01,
                tau: 0.0,
                kappa_w: 0.1,
                kappa_g: 0.01,
                c_v: 0.5,
            },
            times: [600.0, 900.0, 1200.0],
            cavity: None,
            rng_seed: 0,
            sim: SimulationSettings::default(),
        }
    }

    /// 64 x 64 x 64 volume.
    pub fn default_3d() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            times: [600.0, 800.0, 1000.0],
            ..PhantomSpec::default_2d()
        }
    }

    pub fn shape(&self) -> Result<Shape, PhantomError> {
        Shape::new(self.dims, self.spacing_mm).map_err(PhantomError::from)
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let [t0, t1, t2] = self.times;
        if !(t0 >= 0.0 && t0 <= t1 && t1 < t2 && t2.is_finite()) {
            return Err(PhantomError::InvalidSpec(format!(
                "snapshot times must satisfy 0 <= t0 <= t1 < t2, got {:?}",
                self.times
            )));
        }
        self.params.validate()?;
        self.sim.validate()?;
        if let Some(c) = self.cavity {
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return Err(PhantomError::InvalidSpec(format!("cavity radius {}", c.radius)));
            }
        }
        self.shape()?;
        Ok(())
    }
}

fn center_of(shape: &Shape) -> [f64; 3] {
    [0, 1, 2].map(|a| (shape.dims[a] as f64 - 1.0) / 2.0)
}

/// Normalized ellipsoid radius of a voxel (`<= 1` inside the brain).
fn ellipsoid_radius(shape: &Shape, c: [usize; 3]) -> f64 {
    let center = center_of(shape);
    (0..3)
        .filter(|&a| shape.axis_active(a))
        .map(|a| {
            let semi = (shape.dims[a] as f64 / 2.0 - BRAIN_MARGIN).max(1.0);
            ((c[a] as f64 - center[a]) / semi).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Voxels between the brain ellipsoid and the grid border.
pub const BRAIN_MARGIN: f64 = 2.0;

/// Width of the white-matter slab, shells and checkerboard cells as a
/// fraction of the largest dimension.
const PATTERN_FRACTION: f64 = 1.0 / 8.0;

fn pattern_width(shape: &Shape) -> f64 {
    (*shape.dims.iter().max().unwrap() as f64 * PATTERN_FRACTION).max(2.0)
}

fn in_band(shape: &Shape, c: [usize; 3]) -> bool {
    let cy = center_of(shape)[1];
    (c[1] as f64 - cy).abs() <= pattern_width(shape) / 2.0
}

fn tissue_class(spec: &PhantomSpec, shape: &Shape, c: [usize; 3]) -> TissueClass {
    if ellipsoid_radius(shape, c) > 1.0 {
        return TissueClass::Outside;
    }
    let w = pattern_width(shape);
    let white = match spec.layout {
        TissueLayout::TwoLayerSlab => in_band(shape, c),
        TissueLayout::ConcentricShells => {
            let center = center_of(shape);
            let r = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum::<f64>().sqrt();
            ((r / w) as usize).is_multiple_of(2)
        }
        TissueLayout::CheckerboardPatch => (0..3).map(|a| (c[a] as f64 / w) as usize).sum::<usize>() % 2 == 0,
    };
    if white {
        TissueClass::WhiteMatter
    } else {
        TissueClass::GreyMatter
    }
}

/// `T = (1 - f)/3 I + f n n^T` with unit trace.
pub fn fiber_tensor(fa: f64, direction: [f64; 3]) -> SymTensor {
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    let n = if norm > 0.0 {
        direction.map(|d| d / norm)
    } else {
        [1.0, 0.0, 0.0]
    };
    SymTensor::identity()
        .scale((1.0 - fa) / 3.0)
        .add(&SymTensor::outer(n).scale(fa))
}

fn fiber(spec: &PhantomSpec, shape: &Shape, c: [usize; 3]) -> (f64, [f64; 3]) {
    match spec.fa_pattern {
        FaPattern::Zero => (0.0, [1.0, 0.0, 0.0]),
        FaPattern::ConstantBand => {
            if in_band(shape, c) {
                (BAND_FA, [1.0, 0.0, 0.0])
            } else {
                (0.0, [1.0, 0.0, 0.0])
            }
        }
        FaPattern::RadialFiber => {
            let center = center_of(shape);
            (RADIAL_FA, [0, 1, 2].map(|a| c[a] as f64 - center[a]))
        }
    }
}

/// Tissue labels, FA and tensors for a spec.
pub fn build_tissue(spec: &PhantomSpec) -> Result<TissueModel, PhantomError> {
    let shape = spec.shape()?;
    let n = shape.len();
    let mut labels = Vec::with_capacity(n);
    let mut fa = Vec::with_capacity(n);
    let mut tensor = Vec::with_capacity(n);
    for i in 0..n {
        let c = shape.coords(i);
        let class = tissue_class(spec, &shape, c);
        labels.push(class);
        if class == TissueClass::Outside {
            fa.push(0.0);
            tensor.push([0.0; 6]);
        } else {
            let (f, dir) = fiber(spec, &shape, c);
            fa.push(f);
            tensor.push(fiber_tensor(f, dir).to_upper_f32());
        }
    }
    Ok(TissueModel::new(shape, labels, fa, tensor)?)
}

/// Hidden quantities of a generated case.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    pub x_s: [f64; 3],
    pub params: ModelParams,
    pub invasion: InvasionMap,
    pub times: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCase {
    pub case: CaseData,
    pub truth: PhantomTruth,
    pub spec: PhantomSpec,
}

fn draw_seed(spec: &PhantomSpec, tissue: &TissueModel) -> Result<[f64; 3], PhantomError> {
    let shape = *tissue.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    // Keep the onset in the inner half of the brain so the tumor has room.
    for _ in 0..10_000 {
        let p = [0, 1, 2].map(|a| {
            if shape.axis_active(a) {
                rng.random_range(0.0..(shape.dims[a] - 1) as f64).round()
            } else {
                0.0
            }
        });
        let c = p.map(|v| v as usize);
        if ellipsoid_radius(&shape, c) <= 0.5 {
            return Ok(p);
        }
    }
    Err(PhantomError::InvalidSpec("could not place a seed".into()))
}

fn ball(shape: &Shape, center: [f64; 3], radius: f64) -> Segmentation {
    let h = shape.spacing_mm;
    Segmentation::from_indices(
        *shape,
        (0..shape.len()).filter(|&i| {
            let c = shape.coords(i);
            (0..3).map(|a| ((c[a] as f64 - center[a]) * h).powi(2)).sum::<f64>() <= radius * radius
        }),
    )
}

/// Runs the generator and cuts the segmentations out of its invasion map.
pub fn generate_case(spec: &PhantomSpec, id: impl Into<String>) -> Result<GeneratedCase, PhantomError> {
    spec.validate()?;
    let tissue = build_tissue(spec)?;
    let shape = *tissue.shape();
    let x_s = match spec.seed {
        Some(p) => p,
        None => draw_seed(spec, &tissue)?,
    };
    let mut sim = spec.sim.clone();
    sim.t_max = sim.t_max.max(spec.times[2]);
    let out = simulate(&SeedInit::gaussian(x_s), &tissue, &spec.params, &sim)?;
    let [t0, t1, t2] = spec.times;
    let s0 = out.invasion.threshold_set(t0);
    let s1_full = out.invasion.threshold_set(t1);
    let s2_full = out.invasion.threshold_set(t2);
    if s2_full.count() <= s1_full.count() {
        return Err(PhantomError::Degenerate(format!(
            "tumor volume at t2 ({}) does not exceed volume at t1 ({})",
            s2_full.count(),
            s1_full.count()
        )));
    }
    let cavity = match spec.cavity {
        Some(c) => ball(&shape, c.center, c.radius).intersect(&tissue.grid().as_segmentation())?,
        None => Segmentation::empty(shape),
    };
    let s1 = s1_full.minus(&cavity)?;
    let s2 = s2_full.minus(&cavity)?;
    let case = CaseData::new(id, tissue, s0, s1, s2, cavity).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    Ok(GeneratedCase {
        case,
        truth: PhantomTruth {
            x_s,
            params: spec.params,
            invasion: out.invasion,
            times: spec.times,
        },
        spec: spec.clone(),
    })
}

/// Volume divided by the volume of the smallest centroid-centered ball (disk
/// in 2D) containing every voxel center; capped at 1.
pub fn sphericity(seg: &Segmentation) -> f64 {
    let shape = seg.shape();
    let n = seg.count();
    if n == 0 {
        return 0.0;
    }
    let mut centroid = [0.0; 3];
    for i in seg.indices() {
        let c = shape.coords(i);
        for a in 0..3 {
            centroid[a] += c[a] as f64 / n as f64;
        }
    }
    let r = seg
        .indices()
        .map(|i| {
            let c = shape.coords(i);
            (0..3).map(|a| (c[a] as f64 - centroid[a]).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0f64, f64::max);
    if r == 0.0 {
        return 1.0;
    }
    let enclosing = match shape.active_dims() {
        1 => 2.0 * r,
        2 => std::f64::consts::PI * r * r,
        _ => 4.0 / 3.0 * std::f64::consts::PI * r.powi(3),
    };
    (n as f64 / enclosing).min(1.0)
}

/// Bounding-box extents in voxels along each axis.
pub fn bounding_extent(seg: &Segmentation) -> [usize; 3] {
    let shape = seg.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for i in seg.indices() {
        let c = shape.coords(i);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    [0, 1, 2].map(|a| if lo[a] == usize::MAX { 0 } else { hi[a] - lo[a] + 1 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Positive radius dilates, negative erodes (6-neighbor steps).
    BoundaryErosionDilation(i32),
    /// Flips each in-brain voxel of every segmentation with probability `p`.
    RandomFlip { p: f64, seed: u64 },
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::BoundaryErosionDilation(r) => write!(f, "boundary_erosion_dilation r={r}"),
            Perturbation::RandomFlip { p, seed } => write!(f, "random_flip p={p} seed={seed}"),
        }
    }
}

/// One 6-neighbor dilation (`grow`) or erosion step, kept inside `brain`.
fn morph_step(seg: &Segmentation, brain: &Segmentation, grow: bool) -> Segmentation {
    let shape = *seg.shape();
    let mask = (0..shape.len())
        .map(|i| {
            let hit = shape
                .face_offsets()
                .filter_map(|o| shape.offset(i, o))
                .any(|j| seg.contains(j) == grow);
            if grow {
                brain.contains(i) && (seg.contains(i) || hit)
            } else {
                // Voxels on the grid border or next to background erode.
                let on_border = shape.face_offsets().any(|o| shape.offset(i, o).is_none());
                seg.contains(i) && !hit && !on_border
            }
        })
        .collect();
    Segmentation::new(shape, mask).expect("same shape")
}

pub fn morph(seg: &Segmentation, brain: &Segmentation, radius: i32) -> Segmentation {
    let mut out = seg.clone();
    for _ in 0..radius.unsigned_abs() {
        out = morph_step(&out, brain, radius > 0);
    }
    out
}

/// Applies segmentation noise; grid and tissue are untouched. Returns the
/// perturbed case and a one-line-per-segmentation log.
pub fn perturb_case(case: &CaseData, noise: Perturbation) -> Result<(CaseData, String), PhantomError> {
    let brain = case.brain();
    let mut out = case.clone();
    let mut log = format!("perturbation: {noise}\n");
    match noise {
        Perturbation::BoundaryErosionDilation(r) => {
            for seg in [&mut out.s0, &mut out.s1, &mut out.s2] {
                *seg = morph(seg, &brain, r);
            }
        }
        Perturbation::RandomFlip { p, seed } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(PhantomError::InvalidSpec(format!("flip probability {p}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for seg in [&mut out.s0, &mut out.s1, &mut out.s2] {
                for i in brain.indices() {
                    if rng.random_bool(p) {
                        let m = seg.mask_mut();
                        m[i] = !m[i];
                    }
                }
            }
        }
    }
    for (name, before, after) in [
        ("s0", &case.s0, &out.s0),
        ("s1", &case.s1, &out.s1),
        ("s2", &case.s2, &out.s2),
    ] {
        log.push_str(&format!("{name}: {} -> {} voxels\n", before.count(), after.count()));
    }
    log::info!("{}", log.trim_end());
    Ok((out, log))
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

/// Ground-truth manifest as `key = value` lines.
pub fn manifest(generated: &GeneratedCase) -> String {
    let s = &generated.spec;
    let t = &generated.truth;
    let c = &generated.case;
    let p = &t.params;
    let cavity = s
        .cavity
        .map_or("none".to_string(), |cv| format!("{} {}", fmt3(cv.center), cv.radius));
    [
        ("case_id", c.id.clone()),
        ("dims", format!("{} {} {}", s.dims[0], s.dims[1], s.dims[2])),
        ("spacing_mm", s.spacing_mm.to_string()),
        ("layout", s.layout.to_string()),
        ("fa_pattern", s.fa_pattern.to_string()),
        ("x_s", fmt3(t.x_s)),
        ("rho", p.rho.to_string()),
        ("tau", p.tau.to_string()),
        ("kappa_w", p.kappa_w.to_string()),
        ("kappa_g", p.kappa_g.to_string()),
        ("c_v", p.c_v.to_string()),
        ("t0", t.times[0].to_string()),
        ("t1", t.times[1].to_string()),
        ("t2", t.times[2].to_string()),
        ("cavity", cavity),
        ("rng_seed", s.rng_seed.to_string()),
        ("dt", s.sim.dt.to_string()),
        ("scheme", format!("{:?}", s.sim.scheme).to_lowercase()),
        ("s0_voxels", c.s0.count().to_string()),
        ("s1_voxels", c.s1.count().to_string()),
        ("s2_voxels", c.s2.count().to_string()),
        ("cavity_voxels", c.cavity.count().to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k} = {v}\n"))
    .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes tissue, segmentations, the true invasion map and the manifest.
pub fn write_case(generated: &GeneratedCase, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_case_data(&generated.case, dir)?;
    grv::write_invasion_map(&generated.truth.invasion, dir.join(TRUTH_T_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest(generated)).map_err(io_err(&path))?;
    Ok(())
}

pub fn write_case_data(case: &CaseData, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    grv::write_tissue(&case.tissue, dir)?;
    grv::write_segmentation(&case.s0, dir.join(S0_FILE))?;
    grv::write_segmentation(&case.s1, dir.join(S1_FILE))?;
    grv::write_segmentation(&case.s2, dir.join(S2_FILE))?;
    grv::write_segmentation(&case.cavity, dir.join(CAVITY_FILE))?;
    Ok(())
}

/// Reads a case directory; a missing cavity file means no cavity. The case
/// id is the directory name.
pub fn read_case(dir: impl AsRef<Path>) -> Result<CaseData, PhantomError> {
    let dir = dir.as_ref();
    let tissue = grv::read_tissue(dir)?;
    let s0 = grv::read_segmentation(dir.join(S0_FILE))?;
    let s1 = grv::read_segmentation(dir.join(S1_FILE))?;
    let s2 = grv::read_segmentation(dir.join(S2_FILE))?;
    let cavity_path = dir.join(CAVITY_FILE);
    let cavity = if cavity_path.exists() {
        grv::read_segmentation(cavity_path)?
    } else {
        Segmentation::empty(*tissue.shape())
    };
    let id = dir
        .file_name()
        .map_or("case".to_string(), |n| n.to_string_lossy().into_owned());
    CaseData::new(id, tissue, s0, s1, s2, cavity).map_err(|e| PhantomError::InvalidSpec(e.to_string()))
}
