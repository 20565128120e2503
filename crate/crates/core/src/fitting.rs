//! Derivative-free fitting of the tumor onset location.
//!
//! Powell's direction-set method with bracketing + Brent line searches,
//! driven from several random starts. The objective is `1 - AP` of the
//! fast-marching ranking from a candidate onset against the initial
//! segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::eikonal::{fast_march_until, seed_sources, SpeedMap};
use crate::fields::{Segmentation, Shape, VoxelGrid};
use crate::growth::SeedInit;
use crate::ranking::{average_precision, pr_curve};

/// Objective returned for onsets outside the brain or the search box.
pub const BARRIER_OBJECTIVE: f64 = 2.0;

const GOLDEN: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105;
const TINY: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("objective returned NaN at {0:?}")]
    NanObjective(Vec<f64>),
    #[error("objective is not finite at the start point {0:?}")]
    NonFiniteStart(Vec<f64>),
    #[error("start point has no coordinates")]
    EmptyStart,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("initial segmentation has no voxel inside the brain")]
    EmptyTarget,
    #[error("no in-brain start point found after {0} samples")]
    NoStartFound(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellConfig {
    /// Stop when a full cycle moves no coordinate by more than this.
    pub xtol: f64,
    /// Stop when a full cycle improves f by less than this (relative).
    pub ftol: f64,
    /// Maximum number of direction-set cycles.
    pub max_iters: usize,
    /// Length of the initial coordinate directions.
    pub initial_step: f64,
    /// Relative tolerance of each line search.
    pub line_tol: f64,
}

impl Default for PowellConfig {
    fn default() -> Self {
        PowellConfig {
            xtol: 1e-3,
            ftol: 1e-6,
            max_iters: 200,
            initial_step: 1.0,
            line_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowellOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub line_searches: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective at the start and after every cycle.
    pub trace: Vec<f64>,
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64, FitError> {
        self.evaluations += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            return Err(FitError::NanObjective(x.to_vec()));
        }
        Ok(v)
    }
}

fn along(x: &[f64], d: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

/// Minimizes `f(x + alpha d)` over alpha. Never returns a point worse than
/// `alpha = 0`.
fn line_minimize<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    d: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, f64), FitError> {
    let mut g = |alpha: f64| -> Result<f64, FitError> { f.eval(&along(x, d, alpha)) };

    // Bracket a minimum starting from [0, 1].
    let (mut a, mut b) = (0.0, 1.0);
    let (mut fa, mut fb) = (fx, g(b)?);
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = b + GOLDEN * (b - a);
    let mut fc = g(c)?;
    let mut expansions = 0;
    while fb > fc && expansions < 60 {
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        c = b + GOLDEN * (b - a);
        fc = g(c)?;
        expansions += 1;
    }
    let _ = fa;

    // Brent's method on [min(a,c), max(a,c)] around b.
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let (mut xb, mut w, mut v) = (b, b, b);
    let (mut fxb, mut fw, mut fv) = (fb, fb, fb);
    let mut e: f64 = 0.0;
    let mut step: f64 = 0.0;
    for _ in 0..200 {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol * xb.abs() + 1e-10;
        let tol2 = 2.0 * tol1;
        if (xb - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (xb - w) * (fxb - fv);
            let mut q = (xb - v) * (fxb - fw);
            let mut p = (xb - v) * q - (xb - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (lo - xb) && p < q * (hi - xb) {
                e = step;
                step = p / q;
                let u = xb + step;
                if u - lo < tol2 || hi - u < tol2 {
                    step = tol1.copysign(xm - xb);
                }
                golden = false;
            }
        }
        if golden {
            e = if xb >= xm { lo - xb } else { hi - xb };
            step = CGOLD * e;
        }
        let u = if step.abs() >= tol1 {
            xb + step
        } else {
            xb + tol1.copysign(step)
        };
        let fu = g(u)?;
        if fu <= fxb {
            if u >= xb {
                lo = xb;
            } else {
                hi = xb;
            }
            v = w;
            fv = fw;
            w = xb;
            fw = fxb;
            xb = u;
            fxb = fu;
        } else {
            if u < xb {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == xb {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == xb || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    if fxb < fx {
        Ok((along(x, d, xb), fxb))
    } else {
        Ok((x.to_vec(), fx))
    }
}

/// Powell's direction-set minimization.
///
/// Each cycle line-minimizes along every direction, then replaces the
/// direction of largest decrease by the net cycle displacement when the
/// extrapolation test says it is worthwhile.
pub fn powell_minimize<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    config: &PowellConfig,
) -> Result<PowellOutcome, FitError> {
    let n = x0.len();
    if n == 0 {
        return Err(FitError::EmptyStart);
    }
    if !(config.xtol > 0.0 && config.ftol > 0.0 && config.initial_step > 0.0) {
        return Err(FitError::InvalidConfig(format!("{config:?}")));
    }
    let mut f = Counted { f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut fx = f.eval(&x)?;
    if !fx.is_finite() {
        return Err(FitError::NonFiniteStart(x));
    }
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut d = vec![0.0; n];
            d[i] = config.initial_step;
            d
        })
        .collect();
    let mut trace = vec![fx];
    let mut line_searches = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let x_start = x.clone();
        let f_start = fx;
        let mut biggest = 0.0;
        let mut biggest_idx = 0;
        for (i, d) in dirs.iter().enumerate() {
            let f_before = fx;
            let (xn, fnew) = line_minimize(&mut f, &x, fx, d, config.line_tol)?;
            line_searches += 1;
            x = xn;
            fx = fnew;
            if f_before - fx > biggest {
                biggest = f_before - fx;
                biggest_idx = i;
            }
        }
        let moved = x.iter().zip(&x_start).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let f_converged = 2.0 * (f_start - fx) <= config.ftol * (f_start.abs() + fx.abs()) + TINY;
        if f_converged || moved <= config.xtol {
            trace.push(fx);
            converged = true;
            break;
        }
        let net: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let x_extra: Vec<f64> = x.iter().zip(&net).map(|(a, d)| a + d).collect();
        let f_extra = f.eval(&x_extra)?;
        if f_extra < f_start {
            let t = 2.0 * (f_start - 2.0 * fx + f_extra) * (f_start - fx - biggest).powi(2)
                - biggest * (f_start - f_extra).powi(2);
            if t < 0.0 {
                let (xn, fnew) = line_minimize(&mut f, &x, fx, &net, config.line_tol)?;
                line_searches += 1;
                x = xn;
                fx = fnew;
                dirs[biggest_idx] = dirs[n - 1].clone();
                dirs[n - 1] = net;
            }
        }
        trace.push(fx);
    }
    Ok(PowellOutcome {
        x,
        f: fx,
        iterations,
        line_searches,
        evaluations: f.evaluations,
        converged,
        trace,
    })
}

/// Axis-aligned box in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SearchBounds {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Bounding box of a segmentation grown by `margin` voxels, clipped to
    /// the grid.
    pub fn around(seg: &Segmentation, margin: f64) -> Option<Self> {
        let shape = seg.shape();
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for i in seg.indices() {
            let c = shape.coords(i);
            for a in 0..3 {
                min[a] = min[a].min(c[a] as f64);
                max[a] = max[a].max(c[a] as f64);
            }
        }
        if !min[0].is_finite() {
            return None;
        }
        for a in 0..3 {
            min[a] = (min[a] - margin).max(0.0);
            max[a] = (max[a] + margin).min((shape.dims[a] - 1) as f64);
        }
        Some(SearchBounds { min, max })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub n_restarts: usize,
    pub rng_seed: u64,
    pub powell: PowellConfig,
    /// Defaults to the bounding box of the target dilated by
    /// [`FitConfig::bounds_margin`].
    pub search_bounds: Option<SearchBounds>,
    pub bounds_margin: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_restarts: 8,
            rng_seed: 0,
            powell: PowellConfig {
                max_iters: 50,
                initial_step: 2.0,
                ..PowellConfig::default()
            },
            search_bounds: None,
            bounds_margin: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartRecord {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub x_s_best: [f64; 3],
    pub objective_best: f64,
    pub per_restart: Vec<RestartRecord>,
}

impl FitResult {
    pub fn best_restart(&self) -> usize {
        self.per_restart
            .iter()
            .position(|r| r.objective == self.objective_best)
            .unwrap_or(0)
    }

    /// `restart,start_x,start_y,start_z,end_x,end_y,end_z,objective,iterations,converged`
    pub fn restarts_csv(&self) -> String {
        let mut out =
            String::from("restart,start_x,start_y,start_z,end_x,end_y,end_z,objective,iterations,converged\n");
        for (k, r) in self.per_restart.iter().enumerate() {
            out.push_str(&format!(
                "{k},{},{},{},{},{},{},{},{},{}\n",
                r.start[0],
                r.start[1],
                r.start[2],
                r.end[0],
                r.end[1],
                r.end[2],
                r.objective,
                r.iterations,
                r.converged
            ));
        }
        out
    }

    /// Key-value summary.
    pub fn report(&self) -> String {
        let x = self.x_s_best;
        format!(
            "x_s = {} {} {}\nobjective = {}\nap = {}\nbest_restart = {}\nrestarts = {}\nconverged_restarts = {}\n",
            x[0],
            x[1],
            x[2],
            self.objective_best,
            1.0 - self.objective_best,
            self.best_restart(),
            self.per_restart.len(),
            self.per_restart.iter().filter(|r| r.converged).count()
        )
    }
}

/// Onset-fitting problem: match the eikonal ranking to `target`.
#[derive(Debug, Clone)]
pub struct SeedProblem<'a> {
    grid: &'a VoxelGrid,
    speed: &'a SpeedMap,
    target: Segmentation,
    roi: Segmentation,
    c_v: f64,
}

impl<'a> SeedProblem<'a> {
    pub fn new(grid: &'a VoxelGrid, speed: &'a SpeedMap, target: &Segmentation, c_v: f64) -> Result<Self, FitError> {
        let (clean, _) = target
            .sanitize(grid)
            .map_err(|e| FitError::InvalidConfig(e.to_string()))?;
        if clean.is_empty() {
            return Err(FitError::EmptyTarget);
        }
        Ok(SeedProblem {
            grid,
            speed,
            target: clean,
            roi: grid.as_segmentation(),
            c_v,
        })
    }

    pub fn shape(&self) -> &Shape {
        self.grid.shape()
    }

    fn admissible(&self, p: [f64; 3]) -> bool {
        matches!(self.shape().nearest_voxel(p), Some(i) if self.grid.contains(i) && self.speed.get(i) > 0.0)
    }

    /// `1 - AP` of the ranking from a Gaussian onset at `x_s`, or
    /// [`BARRIER_OBJECTIVE`] outside the brain.
    pub fn objective(&self, x_s: [f64; 3]) -> f64 {
        if !self.admissible(x_s) {
            return BARRIER_OBJECTIVE;
        }
        let ap = seed_sources(&SeedInit::gaussian(x_s), self.grid, self.c_v)
            .ok()
            .and_then(|src| fast_march_until(self.speed, &src, &self.target).ok())
            .and_then(|t| pr_curve(&t, &self.target, &self.roi).ok())
            .map(|pr| average_precision(&pr));
        match ap {
            Some(ap) => 1.0 - ap,
            None => BARRIER_OBJECTIVE,
        }
    }

    fn active_axes(&self) -> Vec<usize> {
        (0..3).filter(|&a| self.shape().axis_active(a)).collect()
    }
}

/// Free-function form of [`SeedProblem::objective`].
pub fn seed_objective(x_s: [f64; 3], s0: &Segmentation, speed: &SpeedMap, grid: &VoxelGrid, c_v: f64) -> f64 {
    match SeedProblem::new(grid, speed, s0, c_v) {
        Ok(p) => p.objective(x_s),
        Err(_) => BARRIER_OBJECTIVE,
    }
}

/// Runs Powell from `n_restarts` random in-brain starts and keeps the best.
pub fn fit_seed(problem: &SeedProblem, config: &FitConfig) -> Result<FitResult, FitError> {
    if config.n_restarts == 0 {
        return Err(FitError::InvalidConfig("n_restarts must be positive".into()));
    }
    let bounds = match config.search_bounds {
        Some(b) => b,
        None => SearchBounds::around(&problem.target, config.bounds_margin).ok_or(FitError::EmptyTarget)?,
    };
    let axes = problem.active_axes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    const MAX_SAMPLES: usize = 1000;
    let mut starts = Vec::with_capacity(config.n_restarts);
    for _ in 0..config.n_restarts {
        let mut found = None;
        for _ in 0..MAX_SAMPLES {
            let mut p = [0.0; 3];
            for &a in &axes {
                p[a] = if bounds.max[a] > bounds.min[a] {
                    rng.random_range(bounds.min[a]..=bounds.max[a])
                } else {
                    bounds.min[a]
                };
            }
            if problem.admissible(p) {
                found = Some(p);
                break;
            }
        }
        starts.push(found.ok_or(FitError::NoStartFound(MAX_SAMPLES))?);
    }

    let embed = |v: &[f64]| {
        let mut p = [0.0; 3];
        for (k, &a) in axes.iter().enumerate() {
            p[a] = v[k];
        }
        p
    };
    let runs: Vec<Result<RestartRecord, FitError>> = starts
        .par_iter()
        .map(|start| {
            let x0: Vec<f64> = axes.iter().map(|&a| start[a]).collect();
            let f = |v: &[f64]| {
                let p = embed(v);
                if bounds.contains(p) {
                    problem.objective(p)
                } else {
                    BARRIER_OBJECTIVE
                }
            };
            let out = powell_minimize(f, &x0, &config.powell)?;
            Ok(RestartRecord {
                start: *start,
                end: embed(&out.x),
                objective: out.f,
                iterations: out.iterations,
                converged: out.converged,
            })
        })
        .collect();
    let per_restart = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = per_restart.iter().enumerate().fold(0, |best, (k, r)| {
        if r.objective < per_restart[best].objective {
            k
        } else {
            best
        }
    });
    Ok(FitResult {
        x_s_best: per_restart[best].end,
        objective_best: per_restart[best].objective,
        per_restart,
    })
}
