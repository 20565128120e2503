//! Command-line front end: configuration resolution and the subcommands.
//!
//! Every run writes `resolved_config.ini` next to its outputs. Feeding that
//! file back through `--config` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{ConfigError, Ini};
use crate::eikonal::{fast_march, seed_sources, speed_from_params, EikonalError};
use crate::fields::{Segmentation, TissueModel};
use crate::fitting::{fit_seed, FitConfig, FitError, PowellConfig, SearchBounds, SeedProblem};
use crate::growth::{simulate, GrowthError, ModelParams, Scheme, SeedInit, SimulationSettings};
use crate::grv::{self, GrvError};
use crate::phantom::{self, CavitySpec, FaPattern, PhantomError, PhantomSpec, TissueLayout};
use crate::ranking::{evaluate, RankingError};
use crate::schemes::{
    default_param_sets, evaluate_bidirectional, evaluate_forward, fit_vs_prediction_report, parameter_sweep,
    EvalScheme, ParamSet, SchemeError, SchemeOutcome, SweepConfig,
};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.ini";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
pub const LOG_ENV: &str = "GLIORANK_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "gliorank",
    version,
    about = "Glioma growth simulation and ranking evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the growth model and write the invasion map.
    Simulate,
    /// Fast-march the eikonal approximation from a seed.
    Eikonal,
    /// Fit the onset location to an initial segmentation.
    FitSeed,
    /// Generate synthetic case directories.
    Phantom,
    /// Evaluate a case with the forward or bidirectional scheme.
    Evaluate,
    /// Evaluate all cases over a table of parameter settings.
    Sweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Eikonal => "eikonal",
            Command::FitSeed => "fit-seed",
            Command::Phantom => "phantom",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// 128 x 128 slices.
    #[value(name = "2d")]
    TwoD,
    /// 64 x 64 x 64 volumes.
    #[value(name = "3d")]
    ThreeD,
}

impl Mode {
    fn as_str(&self) -> &'static str {
        match self {
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// INI configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Random seed for fitting restarts and phantom generation.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for sweeps and phantom batches.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Evaluation scheme.
    #[arg(long, global = true, value_parser = parse_scheme)]
    pub scheme: Option<EvalScheme>,
    /// Default phantom geometry.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
}

fn parse_scheme(s: &str) -> Result<EvalScheme, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Compute(_) => 1,
            CliError::Usage(_) | CliError::Input(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Compute(_) => "computation",
        }
    }

    /// Single line for stderr: `error kind=<kind> code=<code>: <message>`.
    pub fn line(&self) -> String {
        format!("error kind={} code={}: {}", self.kind(), self.exit_code(), self)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

impl From<GrvError> for CliError {
    fn from(e: GrvError) -> Self {
        match e {
            GrvError::Io(_) => CliError::Compute(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Grv(g) => g.into(),
            PhantomError::InvalidSpec(m) => CliError::Usage(format!("invalid phantom spec: {m}")),
            other => CliError::Compute(other.to_string()),
        }
    }
}

macro_rules! compute_errors {
    ($($t:ty),+) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Compute(e.to_string())
            }
        })+
    };
}

compute_errors!(SchemeError, GrowthError, EikonalError, FitError, RankingError);

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Compute(format!("cannot write {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Input file locations; all optional, each subcommand checks what it needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputPaths {
    pub tissue: Option<PathBuf>,
    pub case: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub s0: Option<PathBuf>,
    pub seed_point: Option<[f64; 3]>,
    pub seed_segmentation: Option<PathBuf>,
    pub t_map: Option<PathBuf>,
    pub segmentation: Option<PathBuf>,
    pub roi: Option<PathBuf>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub mode: Mode,
    pub scheme: EvalScheme,
    /// Log filter used when `GLIORANK_LOG` is unset.
    pub verbosity: String,
    pub input: InputPaths,
    pub params: ModelParams,
    pub sim: SimulationSettings,
    pub fit: FitConfig,
    pub phantom: PhantomSpec,
    pub n_cases: usize,
    pub param_sets: Vec<ParamSet>,
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["rng_seed", "out", "jobs", "mode", "scheme", "verbosity"]),
    (
        "input",
        &[
            "tissue",
            "case",
            "cases",
            "s0",
            "seed_point",
            "seed_segmentation",
            "t_map",
            "segmentation",
            "roi",
        ],
    ),
    ("model", &["rho", "tau", "kappa_w", "kappa_g", "c_v"]),
    (
        "simulation",
        &[
            "dt",
            "t_max",
            "method",
            "record_interval",
            "interpolate_crossing",
            "stop_when_saturated",
        ],
    ),
    (
        "fit",
        &[
            "n_restarts",
            "max_iters",
            "xtol",
            "ftol",
            "initial_step",
            "line_tol",
            "bounds_margin",
            "bounds",
        ],
    ),
    (
        "phantom",
        &[
            "n_cases",
            "dims",
            "spacing_mm",
            "layout",
            "fa_pattern",
            "seed",
            "rho",
            "tau",
            "kappa_w",
            "kappa_g",
            "c_v",
            "t0",
            "t1",
            "t2",
            "cavity",
        ],
    ),
    ("sweep", &["set.*"]),
];

fn value_error(section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        section: section.into(),
        key: key.into(),
        msg: msg.into(),
    }
}

fn parse_method(s: &str) -> Result<Scheme, String> {
    match s {
        "explicit" => Ok(Scheme::Explicit),
        "semi_implicit" => Ok(Scheme::SemiImplicit),
        other => Err(format!("unknown method '{other}' (explicit or semi_implicit)")),
    }
}

fn method_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Explicit => "explicit",
        Scheme::SemiImplicit => "semi_implicit",
    }
}

fn model_from(ini: &Ini, section: &str, base: ModelParams) -> Result<ModelParams, ConfigError> {
    Ok(ModelParams {
        rho: ini.parsed(section, "rho")?.unwrap_or(base.rho),
        tau: ini.parsed(section, "tau")?.unwrap_or(base.tau),
        kappa_w: ini.parsed(section, "kappa_w")?.unwrap_or(base.kappa_w),
        kappa_g: ini.parsed(section, "kappa_g")?.unwrap_or(base.kappa_g),
        c_v: ini.parsed(section, "c_v")?.unwrap_or(base.c_v),
    })
}

fn set_model(ini: &mut Ini, section: &str, p: &ModelParams) {
    ini.set(section, "rho", p.rho.to_string());
    ini.set(section, "tau", p.tau.to_string());
    ini.set(section, "kappa_w", p.kappa_w.to_string());
    ini.set(section, "kappa_g", p.kappa_g.to_string());
    ini.set(section, "c_v", p.c_v.to_string());
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn path_of(ini: &Ini, key: &str) -> Option<PathBuf> {
    ini.get("input", key).map(PathBuf::from)
}

impl RunConfig {
    /// Merges config file values and command-line flags (flags win) over
    /// the defaults.
    pub fn resolve(ini: &Ini, flags: &Flags) -> Result<Self, CliError> {
        ini.check_known(KNOWN_KEYS)?;
        let rng_seed = flags
            .seed
            .map_or_else(|| ini.parsed("run", "rng_seed"), |s| Ok(Some(s)))?
            .unwrap_or(0);
        let out = flags
            .out
            .clone()
            .or_else(|| ini.get("run", "out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("gliorank_out"));
        let jobs = match flags.jobs {
            Some(j) => Some(j),
            None => match ini.get("run", "jobs") {
                None | Some("auto") => None,
                Some(_) => ini.parsed("run", "jobs")?,
            },
        };
        if jobs == Some(0) {
            return Err(CliError::Usage("jobs must be positive".into()));
        }
        let mode = match flags.mode {
            Some(m) => m,
            None => match ini.get("run", "mode") {
                None | Some("2d") => Mode::TwoD,
                Some("3d") => Mode::ThreeD,
                Some(other) => return Err(value_error("run", "mode", format!("'{other}' (2d or 3d)")).into()),
            },
        };
        let scheme = match flags.scheme {
            Some(s) => s,
            None => ini.parsed("run", "scheme")?.unwrap_or(EvalScheme::Forward),
        };

        let verbosity = ini.get("run", "verbosity").unwrap_or("warn").to_string();

        let input = InputPaths {
            tissue: path_of(ini, "tissue"),
            case: path_of(ini, "case"),
            cases: path_of(ini, "cases"),
            s0: path_of(ini, "s0"),
            seed_point: ini.vec3("input", "seed_point")?,
            seed_segmentation: path_of(ini, "seed_segmentation"),
            t_map: path_of(ini, "t_map"),
            segmentation: path_of(ini, "segmentation"),
            roi: path_of(ini, "roi"),
        };

        let params = model_from(ini, "model", ModelParams::default())?;

        let d = SimulationSettings::default();
        let sim = SimulationSettings {
            dt: ini.parsed("simulation", "dt")?.unwrap_or(d.dt),
            t_max: ini.parsed("simulation", "t_max")?.unwrap_or(d.t_max),
            scheme: match ini.get("simulation", "method") {
                None => d.scheme,
                Some(m) => parse_method(m).map_err(|e| value_error("simulation", "method", e))?,
            },
            record_interval: match ini.get("simulation", "record_interval") {
                None | Some("none") => None,
                Some(_) => ini.parsed("simulation", "record_interval")?,
            },
            interpolate_crossing: ini
                .parsed("simulation", "interpolate_crossing")?
                .unwrap_or(d.interpolate_crossing),
            stop_when_saturated: ini
                .parsed("simulation", "stop_when_saturated")?
                .unwrap_or(d.stop_when_saturated),
        };

        let fd = FitConfig::default();
        let search_bounds = match ini.get("fit", "bounds") {
            None | Some("auto") => None,
            Some(_) => {
                let v = ini.floats("fit", "bounds")?.unwrap_or_default();
                if v.len() != 6 {
                    return Err(value_error("fit", "bounds", "expected xmin ymin zmin xmax ymax zmax").into());
                }
                Some(SearchBounds {
                    min: [v[0], v[1], v[2]],
                    max: [v[3], v[4], v[5]],
                })
            }
        };
        let fit = FitConfig {
            n_restarts: ini.parsed("fit", "n_restarts")?.unwrap_or(fd.n_restarts),
            rng_seed,
            powell: PowellConfig {
                xtol: ini.parsed("fit", "xtol")?.unwrap_or(fd.powell.xtol),
                ftol: ini.parsed("fit", "ftol")?.unwrap_or(fd.powell.ftol),
                max_iters: ini.parsed("fit", "max_iters")?.unwrap_or(fd.powell.max_iters),
                initial_step: ini.parsed("fit", "initial_step")?.unwrap_or(fd.powell.initial_step),
                line_tol: ini.parsed("fit", "line_tol")?.unwrap_or(fd.powell.line_tol),
            },
            search_bounds,
            bounds_margin: ini.parsed("fit", "bounds_margin")?.unwrap_or(fd.bounds_margin),
        };

        let base = match mode {
            Mode::TwoD => PhantomSpec::default_2d(),
            Mode::ThreeD => PhantomSpec::default_3d(),
        };
        let dims = match ini.floats("phantom", "dims")? {
            None => base.dims,
            Some(v) if v.len() == 3 && v.iter().all(|x| *x >= 1.0 && x.fract() == 0.0) => {
                [v[0] as usize, v[1] as usize, v[2] as usize]
            }
            Some(_) => return Err(value_error("phantom", "dims", "expected 3 positive integers").into()),
        };
        let seed = match ini.get("phantom", "seed") {
            None | Some("random") => base.seed,
            Some(_) => ini.vec3("phantom", "seed")?,
        };
        let cavity = match ini.get("phantom", "cavity") {
            None | Some("none") => base.cavity,
            Some(_) => {
                let v = ini.floats("phantom", "cavity")?.unwrap_or_default();
                if v.len() != 4 {
                    return Err(value_error("phantom", "cavity", "expected cx cy cz radius").into());
                }
                Some(CavitySpec {
                    center: [v[0], v[1], v[2]],
                    radius: v[3],
                })
            }
        };
        let phantom = PhantomSpec {
            dims,
            spacing_mm: ini.parsed("phantom", "spacing_mm")?.unwrap_or(base.spacing_mm),
            layout: ini.parsed::<TissueLayout>("phantom", "layout")?.unwrap_or(base.layout),
            fa_pattern: ini
                .parsed::<FaPattern>("phantom", "fa_pattern")?
                .unwrap_or(base.fa_pattern),
            seed,
            params: model_from(ini, "phantom", base.params)?,
            times: [
                ini.parsed("phantom", "t0")?.unwrap_or(base.times[0]),
                ini.parsed("phantom", "t1")?.unwrap_or(base.times[1]),
                ini.parsed("phantom", "t2")?.unwrap_or(base.times[2]),
            ],
            cavity,
            rng_seed,
            sim: sim.clone(),
        };
        let n_cases = ini.parsed("phantom", "n_cases")?.unwrap_or(3);

        let mut param_sets = Vec::new();
        for (key, _) in ini.entries("sweep") {
            let id = key.strip_prefix("set.").unwrap_or(key);
            if id.is_empty() || id.contains(',') {
                return Err(value_error("sweep", key, "invalid set id").into());
            }
            let v = ini.floats("sweep", key)?.unwrap_or_default();
            if v.len() != 4 {
                return Err(value_error("sweep", key, "expected kappa_w kappa_g tau rho").into());
            }
            param_sets.push(ParamSet {
                id: id.to_string(),
                params: ModelParams {
                    kappa_w: v[0],
                    kappa_g: v[1],
                    tau: v[2],
                    rho: v[3],
                    c_v: params.c_v,
                },
            });
        }
        if param_sets.is_empty() {
            param_sets = default_param_sets()
                .into_iter()
                .map(|mut s| {
                    s.params.c_v = params.c_v;
                    s
                })
                .collect();
        }

        Ok(RunConfig {
            rng_seed,
            out,
            jobs,
            mode,
            scheme,
            verbosity,
            input,
            params,
            sim,
            fit,
            phantom,
            n_cases,
            param_sets,
        })
    }

    /// Snapshot with every default filled in.
    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        ini.set("run", "rng_seed", self.rng_seed.to_string());
        ini.set("run", "out", self.out.display().to_string());
        ini.set("run", "jobs", self.jobs.map_or("auto".into(), |j| j.to_string()));
        ini.set("run", "mode", self.mode.as_str());
        ini.set("run", "scheme", self.scheme.as_str());
        ini.set("run", "verbosity", self.verbosity.as_str());

        let i = &self.input;
        for (key, path) in [
            ("tissue", &i.tissue),
            ("case", &i.case),
            ("cases", &i.cases),
            ("s0", &i.s0),
            ("seed_segmentation", &i.seed_segmentation),
            ("t_map", &i.t_map),
            ("segmentation", &i.segmentation),
            ("roi", &i.roi),
        ] {
            if let Some(p) = path {
                ini.set("input", key, p.display().to_string());
            }
        }
        if let Some(p) = i.seed_point {
            ini.set("input", "seed_point", fmt3(p));
        }

        set_model(&mut ini, "model", &self.params);

        let s = &self.sim;
        ini.set("simulation", "dt", s.dt.to_string());
        ini.set("simulation", "t_max", s.t_max.to_string());
        ini.set("simulation", "method", method_name(s.scheme));
        ini.set(
            "simulation",
            "record_interval",
            s.record_interval.map_or("none".into(), |r| r.to_string()),
        );
        ini.set("simulation", "interpolate_crossing", s.interpolate_crossing.to_string());
        ini.set("simulation", "stop_when_saturated", s.stop_when_saturated.to_string());

        let f = &self.fit;
        ini.set("fit", "n_restarts", f.n_restarts.to_string());
        ini.set("fit", "max_iters", f.powell.max_iters.to_string());
        ini.set("fit", "xtol", f.powell.xtol.to_string());
        ini.set("fit", "ftol", f.powell.ftol.to_string());
        ini.set("fit", "initial_step", f.powell.initial_step.to_string());
        ini.set("fit", "line_tol", f.powell.line_tol.to_string());
        ini.set("fit", "bounds_margin", f.bounds_margin.to_string());
        ini.set(
            "fit",
            "bounds",
            f.search_bounds
                .map_or("auto".into(), |b| format!("{} {}", fmt3(b.min), fmt3(b.max))),
        );

        let p = &self.phantom;
        ini.set("phantom", "n_cases", self.n_cases.to_string());
        ini.set("phantom", "dims", format!("{} {} {}", p.dims[0], p.dims[1], p.dims[2]));
        ini.set("phantom", "spacing_mm", p.spacing_mm.to_string());
        ini.set("phantom", "layout", p.layout.as_str());
        ini.set("phantom", "fa_pattern", p.fa_pattern.as_str());
        ini.set("phantom", "seed", p.seed.map_or("random".into(), fmt3));
        set_model(&mut ini, "phantom", &p.params);
        ini.set("phantom", "t0", p.times[0].to_string());
        ini.set("phantom", "t1", p.times[1].to_string());
        ini.set("phantom", "t2", p.times[2].to_string());
        ini.set(
            "phantom",
            "cavity",
            p.cavity
                .map_or("none".into(), |c| format!("{} {}", fmt3(c.center), c.radius)),
        );

        for set in &self.param_sets {
            let q = &set.params;
            ini.set(
                "sweep",
                &format!("set.{}", set.id),
                format!("{} {} {} {}", q.kappa_w, q.kappa_g, q.tau, q.rho),
            );
        }
        ini
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("missing [input] {what}")))
    }

    fn tissue(&self) -> Result<TissueModel, CliError> {
        match (&self.input.tissue, &self.input.case) {
            (Some(dir), _) | (None, Some(dir)) => Ok(read_tissue_dir(dir)?),
            (None, None) => Err(CliError::Usage("missing [input] tissue (or case)".into())),
        }
    }

    fn seed(&self, tissue: &TissueModel) -> Result<SeedInit, CliError> {
        if let Some(path) = &self.input.seed_segmentation {
            let seg = grv::read_segmentation(path)?;
            tissue
                .shape()
                .ensure_same(seg.shape())
                .map_err(|e| CliError::Input(format!("seed segmentation: {e}")))?;
            return Ok(SeedInit::Segmentation(seg));
        }
        match self.input.seed_point {
            Some(p) => Ok(SeedInit::gaussian(p)),
            None => Err(CliError::Usage(
                "missing [input] seed_point or seed_segmentation".into(),
            )),
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| CliError::Compute(e.to_string()))
    }
}

fn read_tissue_dir(dir: &Path) -> Result<TissueModel, GrvError> {
    if !dir.is_dir() {
        return Err(GrvError::NotFound(dir.display().to_string()));
    }
    grv::read_tissue(dir)
}

fn load_config(flags: &Flags) -> Result<RunConfig, CliError> {
    let ini = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::Input(format!("input not found: {}", path.display())),
                _ => CliError::Input(format!("cannot read {}: {e}", path.display())),
            })?;
            Ini::parse(&text)?
        }
        None => Ini::new(),
    };
    RunConfig::resolve(&ini, flags)
}

struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: Command) -> Self {
        Manifest {
            lines: vec![("command".into(), command.name().into())],
        }
    }

    fn add(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn write(&self, dir: &Path, started: Instant) -> Result<(), CliError> {
        let mut text: String = self.lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        text.push_str(&format!("elapsed_s = {:.3}\n", started.elapsed().as_secs_f64()));
        write_text(&dir.join(RUN_MANIFEST_FILE), &text)
    }
}

/// Runs one subcommand with already-resolved configuration.
pub fn run(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    write_text(&cfg.out.join(RESOLVED_CONFIG_FILE), &cfg.to_ini().to_text())?;
    let mut manifest = Manifest::new(command);
    match command {
        Command::Simulate => cmd_simulate(cfg, &mut manifest)?,
        Command::Eikonal => cmd_eikonal(cfg, &mut manifest)?,
        Command::FitSeed => cmd_fit_seed(cfg, &mut manifest)?,
        Command::Phantom => cmd_phantom(cfg, &mut manifest)?,
        Command::Evaluate => cmd_evaluate(cfg, &mut manifest)?,
        Command::Sweep => cmd_sweep(cfg, &mut manifest)?,
    }
    manifest.write(&cfg.out, started)
}

fn cmd_simulate(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let tissue = cfg.tissue()?;
    let seed = cfg.seed(&tissue)?;
    let out = simulate(&seed, &tissue, &cfg.params, &cfg.sim)?;
    grv::write_invasion_map(&out.invasion, cfg.out.join("T.grv"))?;
    grv::write_scalar(out.final_density.field(), cfg.out.join("final_density.grv"))?;
    if !out.snapshots.is_empty() {
        let dir = cfg.out.join("snapshots");
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        for s in &out.snapshots {
            grv::write_scalar(s.density.field(), dir.join(format!("density_{:06}.grv", s.step)))?;
        }
    }
    manifest.add("steps", out.steps);
    manifest.add("final_time", out.final_time);
    manifest.add(
        "invaded_voxels",
        (0..out.invasion.times().len())
            .filter(|&i| out.invasion.is_invaded(i))
            .count(),
    );
    manifest.add("snapshots", out.snapshots.len());
    Ok(())
}

fn cmd_eikonal(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let tissue = cfg.tissue()?;
    let seed = cfg.seed(&tissue)?;
    let speed = speed_from_params(&tissue, &cfg.params);
    let sources = seed_sources(&seed, tissue.grid(), cfg.params.c_v)?;
    let t = fast_march(&speed, &sources)?;
    let speed_field = crate::fields::ScalarField::new(*tissue.shape(), speed.values().to_vec())
        .map_err(|e| CliError::Compute(e.to_string()))?;
    grv::write_scalar(&speed_field, cfg.out.join("speed.grv"))?;
    grv::write_segmentation(&sources, cfg.out.join("sources.grv"))?;
    grv::write_invasion_map(&t, cfg.out.join("T.grv"))?;
    manifest.add("sources", sources.count());
    manifest.add(
        "reached_voxels",
        (0..t.times().len()).filter(|&i| t.is_invaded(i)).count(),
    );
    Ok(())
}

fn cmd_fit_seed(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let tissue = cfg.tissue()?;
    let s0 = match (&cfg.input.s0, &cfg.input.case) {
        (Some(p), _) => grv::read_segmentation(p)?,
        (None, Some(dir)) => grv::read_segmentation(dir.join(phantom::S0_FILE))?,
        (None, None) => return Err(CliError::Usage("missing [input] s0 (or case)".into())),
    };
    tissue
        .shape()
        .ensure_same(s0.shape())
        .map_err(|e| CliError::Input(format!("s0: {e}")))?;
    let speed = speed_from_params(&tissue, &cfg.params);
    let problem = SeedProblem::new(tissue.grid(), &speed, &s0, cfg.params.c_v)?;
    let fit = cfg.pool()?.install(|| fit_seed(&problem, &cfg.fit))?;
    write_text(&cfg.out.join("fit_report.txt"), &fit.report())?;
    write_text(&cfg.out.join("restarts.csv"), &fit.restarts_csv())?;
    let sources = seed_sources(&SeedInit::gaussian(fit.x_s_best), tissue.grid(), cfg.params.c_v)?;
    grv::write_invasion_map(&fast_march(&speed, &sources)?, cfg.out.join("T.grv"))?;
    manifest.add("x_s", fmt3(fit.x_s_best));
    manifest.add("objective", fit.objective_best);
    Ok(())
}

fn cmd_phantom(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    if cfg.n_cases == 0 {
        return Err(CliError::Usage("[phantom] n_cases must be positive".into()));
    }
    let results: Vec<Result<phantom::GeneratedCase, PhantomError>> = cfg.pool()?.install(|| {
        (0..cfg.n_cases)
            .into_par_iter()
            .map(|k| {
                let spec = PhantomSpec {
                    rng_seed: cfg.rng_seed.wrapping_add(k as u64),
                    ..cfg.phantom.clone()
                };
                phantom::generate_case(&spec, format!("case_{k:03}"))
            })
            .collect()
    });
    for r in results {
        let g = r?;
        phantom::write_case(&g, cfg.out.join(&g.case.id))?;
        manifest.add(&format!("{}.x_s", g.case.id), fmt3(g.truth.x_s));
    }
    manifest.add("cases", cfg.n_cases);
    Ok(())
}

fn write_outcome(out: &Path, o: &SchemeOutcome) -> Result<(), CliError> {
    o.fit_report
        .pr
        .write_csv(out.join("pr_fit.csv"))
        .map_err(|e| io_error(out, e))?;
    o.pred_report
        .pr
        .write_csv(out.join("pr_pred.csv"))
        .map_err(|e| io_error(out, e))?;
    grv::write_scalar(&o.fit_report.agreement, out.join("agreement_fit.grv"))?;
    grv::write_scalar(&o.pred_report.agreement, out.join("agreement_pred.grv"))?;
    grv::write_invasion_map(&o.prediction, out.join("T_pred.grv"))?;
    let text = format!(
        "scheme = {}\nap_fit = {}\nap_pred = {}\nx_s = {}\nfit_converged = {}\n\
         volume_matched_t_fit = {}\nvolume_matched_t_pred = {}\n\
         never_invaded_step_fit = {}\nnever_invaded_step_pred = {}\n\
         excluded_voxels_pred = {}\n",
        o.scheme,
        o.ap_fit,
        o.ap_pred,
        fmt3(o.x_s),
        o.fit_converged,
        o.fit_report.volume_matched_t,
        o.pred_report.volume_matched_t,
        o.fit_report.pr.has_never_invaded_step(),
        o.pred_report.pr.has_never_invaded_step(),
        o.pred_report.excluded_voxel_count,
    );
    write_text(&out.join("report.txt"), &text)
}

fn cmd_evaluate(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    // Direct ranking evaluation of a given map.
    if let Some(t_path) = &cfg.input.t_map {
        let t = grv::read_invasion_map(t_path)?;
        let seg_path = cfg.require(&cfg.input.segmentation, "segmentation")?;
        let s = grv::read_segmentation(seg_path)?;
        let roi = match &cfg.input.roi {
            Some(p) => grv::read_segmentation(p)?,
            None => Segmentation::from_indices(*t.shape(), 0..t.shape().len()),
        };
        let rep = evaluate(&t, &s, &roi)?;
        rep.pr
            .write_csv(cfg.out.join("pr.csv"))
            .map_err(|e| io_error(&cfg.out, e))?;
        grv::write_scalar(&rep.agreement, cfg.out.join("agreement.grv"))?;
        write_text(
            &cfg.out.join("report.txt"),
            &format!(
                "ap = {}\nvolume_matched_t = {}\nnever_invaded_step = {}\nexcluded_voxels = {}\n",
                rep.ap,
                rep.volume_matched_t,
                rep.pr.has_never_invaded_step(),
                rep.excluded_voxel_count
            ),
        )?;
        manifest.add("ap", rep.ap);
        return Ok(());
    }
    let dir = cfg.require(&cfg.input.case, "case (or t_map)")?;
    let case = phantom::read_case(dir)?;
    let outcome = cfg.pool()?.install(|| match cfg.scheme {
        EvalScheme::Forward => evaluate_forward(&case, &cfg.params, &cfg.fit, &cfg.sim),
        EvalScheme::Bidirectional => evaluate_bidirectional(&case, &cfg.params, &cfg.fit, &cfg.sim),
    })?;
    write_outcome(&cfg.out, &outcome)?;
    manifest.add("ap_fit", outcome.ap_fit);
    manifest.add("ap_pred", outcome.ap_pred);
    Ok(())
}

/// Case directories under `root`, sorted by name.
pub fn scan_cases(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(root).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Input(format!("input not found: {}", root.display())),
        _ => CliError::Input(format!("cannot read {}: {e}", root.display())),
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(phantom::S0_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Input(format!("no case directories in {}", root.display())));
    }
    Ok(dirs)
}

fn cmd_sweep(cfg: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let dirs = match (&cfg.input.cases, &cfg.input.case) {
        (Some(root), _) => scan_cases(root)?,
        (None, Some(dir)) => vec![dir.clone()],
        (None, None) => return Err(CliError::Usage("missing [input] cases (or case)".into())),
    };
    let cases = dirs.iter().map(phantom::read_case).collect::<Result<Vec<_>, _>>()?;
    let config = SweepConfig {
        scheme: cfg.scheme,
        fit: cfg.fit.clone(),
        sim: cfg.sim.clone(),
        jobs: cfg.jobs,
    };
    let result = parameter_sweep(&cases, &cfg.param_sets, &config)?;
    write_text(&cfg.out.join("sweep.csv"), &result.to_csv())?;
    let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
    manifest.add("rows", result.rows.len());
    manifest.add("failed_rows", failed);
    match fit_vs_prediction_report(&result) {
        Ok(rep) => write_text(&cfg.out.join("correlation.txt"), &rep.to_text())?,
        Err(e) => {
            eprintln!("warning kind=correlation: {e}");
            write_text(&cfg.out.join("correlation.txt"), &format!("error = {e}\n"))?;
            manifest.add("correlation", "undefined");
        }
    }
    Ok(())
}

/// Parses arguments, runs, prints a single error line on failure.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(&cli.flags).and_then(|cfg| {
        let env = env_logger::Env::default().filter_or(LOG_ENV, cfg.verbosity.as_str());
        let _ = env_logger::Builder::from_env(env).try_init();
        log::info!("{} -> {}", cli.command.name(), cfg.out.display());
        run(cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
