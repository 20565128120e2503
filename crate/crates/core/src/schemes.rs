//! Forward and bidirectional evaluation schemes, the parameter sweep and
//! the fit-versus-prediction correlation report.
//!
//! Bidirectional: fit an onset to `S0`, simulate from it and score the
//! ranking against `S2`. Forward: start the model from `S1` and score only
//! voxels outside `S1` against `S2`. Both report `ap_fit`, the AP of the
//! onset-fitted simulation against `S0`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::eikonal::{speed_from_params, EikonalError};
use crate::fields::{FieldError, InvasionMap, Segmentation, TissueModel};
use crate::fitting::{fit_seed, FitConfig, FitError, FitResult, SeedProblem};
use crate::growth::{simulate, GrowthError, ModelParams, SeedInit, SimulationSettings};
use crate::ranking::{evaluate, EvalReport, RankingError};
use crate::stats::{one_sample_t_test, spearman_rho, StatsError, TTest};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("empty evaluation region")]
    EmptyEvaluationRegion,
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Eikonal(#[from] EikonalError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    Correlation(String),
}

/// One patient-like case: tissue, three segmentations and the cavity.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseData {
    pub id: String,
    pub tissue: TissueModel,
    pub s0: Segmentation,
    pub s1: Segmentation,
    pub s2: Segmentation,
    /// Empty when there was no resection.
    pub cavity: Segmentation,
}

impl CaseData {
    pub fn new(
        id: impl Into<String>,
        tissue: TissueModel,
        s0: Segmentation,
        s1: Segmentation,
        s2: Segmentation,
        cavity: Segmentation,
    ) -> Result<Self, SchemeError> {
        let shape = tissue.shape();
        for seg in [&s0, &s1, &s2, &cavity] {
            shape.ensure_same(seg.shape())?;
        }
        Ok(CaseData {
            id: id.into(),
            tissue,
            s0,
            s1,
            s2,
            cavity,
        })
    }

    pub fn brain(&self) -> Segmentation {
        self.tissue.grid().as_segmentation()
    }

    /// Brain minus cavity.
    pub fn bidirectional_roi(&self) -> Segmentation {
        self.brain().minus(&self.cavity).expect("same grid")
    }

    /// Brain minus cavity minus `S1`.
    pub fn forward_roi(&self) -> Segmentation {
        self.bidirectional_roi().minus(&self.s1).expect("same grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalScheme {
    Forward,
    Bidirectional,
}

impl EvalScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalScheme::Forward => "forward",
            EvalScheme::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for EvalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(EvalScheme::Forward),
            "bidirectional" => Ok(EvalScheme::Bidirectional),
            other => Err(format!("unknown scheme '{other}' (expected forward or bidirectional)")),
        }
    }
}

/// Onset fitted to `S0` plus the full simulation from it.
#[derive(Debug, Clone)]
pub struct OnsetFit {
    pub fit: FitResult,
    pub invasion: InvasionMap,
    /// Evaluation of `invasion` against `S0` over the brain.
    pub report: EvalReport,
}

impl OnsetFit {
    pub fn ap_fit(&self) -> f64 {
        self.report.ap
    }

    pub fn converged(&self) -> bool {
        self.fit.per_restart.iter().any(|r| r.converged)
    }
}

/// Fits the onset on the eikonal surrogate, then runs the growth model
/// from a Gaussian seed at the fitted location.
pub fn fit_onset(
    case: &CaseData,
    params: &ModelParams,
    fit_config: &FitConfig,
    sim: &SimulationSettings,
) -> Result<OnsetFit, SchemeError> {
    let grid = case.tissue.grid();
    let speed = speed_from_params(&case.tissue, params);
    let problem = SeedProblem::new(grid, &speed, &case.s0, params.c_v)?;
    let fit = fit_seed(&problem, fit_config)?;
    let out = simulate(&SeedInit::gaussian(fit.x_s_best), &case.tissue, params, sim)?;
    let report = evaluate(&out.invasion, &case.s0, &case.brain())?;
    Ok(OnsetFit {
        fit,
        invasion: out.invasion,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub scheme: EvalScheme,
    pub ap_fit: f64,
    pub ap_pred: f64,
    pub fit_converged: bool,
    pub x_s: [f64; 3],
    /// Ranking used for the prediction score.
    pub prediction: InvasionMap,
    pub fit_report: EvalReport,
    pub pred_report: EvalReport,
}

/// Forward prediction alone: simulate from `S1` and score against `S2`
/// outside `S1` and the cavity. Needs no onset fit.
pub fn forward_prediction(
    case: &CaseData,
    params: &ModelParams,
    sim: &SimulationSettings,
) -> Result<(InvasionMap, EvalReport), SchemeError> {
    let roi = case.forward_roi();
    if case.s2.intersect(&roi)?.is_empty() {
        return Err(SchemeError::EmptyEvaluationRegion);
    }
    let out = simulate(&SeedInit::Segmentation(case.s1.clone()), &case.tissue, params, sim)?;
    let report = evaluate(&out.invasion, &case.s2, &roi)?;
    Ok((out.invasion, report))
}

/// Scores one scheme given an already fitted onset.
pub fn evaluate_with_onset(
    case: &CaseData,
    params: &ModelParams,
    scheme: EvalScheme,
    onset: &OnsetFit,
    sim: &SimulationSettings,
) -> Result<SchemeOutcome, SchemeError> {
    let (prediction, pred_report) = match scheme {
        EvalScheme::Bidirectional => {
            let report = evaluate(&onset.invasion, &case.s2, &case.bidirectional_roi())?;
            (onset.invasion.clone(), report)
        }
        EvalScheme::Forward => forward_prediction(case, params, sim)?,
    };
    Ok(SchemeOutcome {
        scheme,
        ap_fit: onset.ap_fit(),
        ap_pred: pred_report.ap,
        fit_converged: onset.converged(),
        x_s: onset.fit.x_s_best,
        prediction,
        fit_report: onset.report.clone(),
        pred_report,
    })
}

pub fn evaluate_bidirectional(
    case: &CaseData,
    params: &ModelParams,
    fit_config: &FitConfig,
    sim: &SimulationSettings,
) -> Result<SchemeOutcome, SchemeError> {
    let onset = fit_onset(case, params, fit_config, sim)?;
    evaluate_with_onset(case, params, EvalScheme::Bidirectional, &onset, sim)
}

pub fn evaluate_forward(
    case: &CaseData,
    params: &ModelParams,
    fit_config: &FitConfig,
    sim: &SimulationSettings,
) -> Result<SchemeOutcome, SchemeError> {
    if case.s2.intersect(&case.forward_roi())?.is_empty() {
        return Err(SchemeError::EmptyEvaluationRegion);
    }
    let onset = fit_onset(case, params, fit_config, sim)?;
    evaluate_with_onset(case, params, EvalScheme::Forward, &onset, sim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub id: String,
    pub params: ModelParams,
}

/// The seven default settings `(kappa_w, kappa_g, tau)` at `rho = 0.01`.
pub const DEFAULT_SETTINGS: [(f64, f64, f64); 7] = [
    (0.01, 0.01, 0.0),
    (0.01, 0.01, 0.05),
    (0.02, 0.01, 0.0),
    (0.05, 0.01, 0.0),
    (0.1, 0.01, 0.0),
    (0.1, 0.02, 0.0),
    (0.1, 0.1, 0.0),
];

pub fn default_param_sets() -> Vec<ParamSet> {
    DEFAULT_SETTINGS
        .iter()
        .enumerate()
        .map(|(k, &(kappa_w, kappa_g, tau))| ParamSet {
            id: format!("p{}", k + 1),
            params: ModelParams {
                rho: 0.01,
                tau,
                kappa_w,
                kappa_g,
                ..ModelParams::default()
            },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub scheme: EvalScheme,
    pub fit: FitConfig,
    pub sim: SimulationSettings,
    /// Worker threads; `None` uses all cores. Results do not depend on it.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub case_id: String,
    pub param_id: String,
    pub params: ModelParams,
    pub scheme: EvalScheme,
    pub ap_fit: f64,
    pub ap_pred: f64,
    /// `ok`, `ok_unconverged_fit`, or `failed: <reason>`.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status.starts_with("ok")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "case_id,param_id,kappa_w,kappa_g,tau,rho,scheme,ap_fit,ap_pred,status";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.case_id,
                r.param_id,
                r.params.kappa_w,
                r.params.kappa_g,
                r.params.tau,
                r.params.rho,
                r.scheme,
                num(r.ap_fit),
                num(r.ap_pred),
                r.status
            ));
        }
        out
    }

    /// Parameter ids ordered by decreasing `ap_pred` for one case; failed
    /// rows are left out. Ties keep sweep order.
    pub fn ranking_for_case(&self, case_id: &str) -> Vec<&SweepRow> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.case_id == case_id && r.is_ok()).collect();
        rows.sort_by(|a, b| b.ap_pred.total_cmp(&a.ap_pred));
        rows
    }
}

fn sanitize_reason(e: &dyn std::error::Error) -> String {
    format!("failed: {e}").replace([',', '\n'], ";")
}

fn sweep_cell(case: &CaseData, set: &ParamSet, config: &SweepConfig) -> SweepRow {
    let mut row = SweepRow {
        case_id: case.id.clone(),
        param_id: set.id.clone(),
        params: set.params,
        scheme: config.scheme,
        ap_fit: f64::NAN,
        ap_pred: f64::NAN,
        status: String::new(),
    };
    let result = fit_onset(case, &set.params, &config.fit, &config.sim)
        .and_then(|onset| evaluate_with_onset(case, &set.params, config.scheme, &onset, &config.sim));
    match result {
        Ok(out) => {
            row.ap_fit = out.ap_fit;
            row.ap_pred = out.ap_pred;
            row.status = if out.fit_converged { "ok" } else { "ok_unconverged_fit" }.into();
        }
        Err(e) => {
            log::warn!("sweep {} {}: {e}", case.id, set.id);
            row.status = sanitize_reason(&e);
        }
    }
    row
}

/// Evaluates every (case, parameter set) pair. Rows come out case-major in
/// input order; a failing row does not stop the others.
pub fn parameter_sweep(
    cases: &[CaseData],
    param_sets: &[ParamSet],
    config: &SweepConfig,
) -> Result<SweepResult, SchemeError> {
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..param_sets.len()).map(move |p| (c, p)))
        .collect();
    let run = || {
        jobs.par_iter()
            .map(|&(c, p)| sweep_cell(&cases[c], &param_sets[p], config))
            .collect::<Vec<_>>()
    };
    let rows = match config.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SchemeError::InvalidCase(e.to_string()))?
            .install(run),
        None => run(),
    };
    Ok(SweepResult { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseCorrelation {
    pub case_id: String,
    /// `None` when the correlation is undefined for this case.
    pub rho: Option<f64>,
    pub n_settings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub per_case: Vec<CaseCorrelation>,
    pub mean_rho: Option<f64>,
    /// Test of the mean rho against 0; `None` with fewer than 2 defined
    /// cases or zero spread.
    pub test: Option<TTest>,
    /// Cases with a defined rho.
    pub n: usize,
    pub excluded: usize,
}

impl CorrelationReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        let mut out = format!(
            "n = {}\nexcluded = {}\nmean_rho = {}\nt = {}\np = {}\n",
            self.n,
            self.excluded,
            opt(self.mean_rho),
            opt(self.test.map(|t| t.t)),
            opt(self.test.map(|t| t.p)),
        );
        for c in &self.per_case {
            out.push_str(&format!("rho.{} = {}\n", c.case_id, opt(c.rho)));
        }
        out
    }
}

/// Per-case Spearman correlation between `ap_fit` and `ap_pred` across
/// parameter settings, and a t-test of the mean against zero.
pub fn fit_vs_prediction_report(sweep: &SweepResult) -> Result<CorrelationReport, SchemeError> {
    let mut case_ids: Vec<&str> = Vec::new();
    for r in &sweep.rows {
        if !case_ids.contains(&r.case_id.as_str()) {
            case_ids.push(&r.case_id);
        }
    }
    let max_settings = case_ids
        .iter()
        .map(|id| sweep.rows.iter().filter(|r| r.case_id == *id).count())
        .max()
        .unwrap_or(0);
    if max_settings < 2 {
        return Err(SchemeError::Correlation(
            "correlation undefined: need at least 2 parameter settings per case".into(),
        ));
    }
    let per_case: Vec<CaseCorrelation> = case_ids
        .iter()
        .map(|id| {
            let (fit, pred): (Vec<f64>, Vec<f64>) = sweep
                .rows
                .iter()
                .filter(|r| r.case_id == *id && r.is_ok())
                .map(|r| (r.ap_fit, r.ap_pred))
                .unzip();
            CaseCorrelation {
                case_id: id.to_string(),
                rho: spearman_rho(&fit, &pred).ok(),
                n_settings: fit.len(),
            }
        })
        .collect();
    let rhos: Vec<f64> = per_case.iter().filter_map(|c| c.rho).collect();
    let n = rhos.len();
    let mean_rho = (n > 0).then(|| rhos.iter().sum::<f64>() / n as f64);
    let test = match one_sample_t_test(&rhos, 0.0) {
        Ok(t) => Some(t),
        Err(StatsError::TooFew(_) | StatsError::ZeroVariance) => None,
        Err(e) => return Err(SchemeError::Correlation(e.to_string())),
    };
    Ok(CorrelationReport {
        excluded: per_case.len() - n,
        per_case,
        mean_rho,
        test,
        n,
    })
}
