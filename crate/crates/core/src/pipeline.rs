//! The load → fit → standard errors → document sequence shared by the CLI
//! and the tests.

use std::path::Path;

use crate::bootstrap::{parametric_bootstrap, BootstrapResult};
use crate::error::Result;
use crate::io::{load_rollcall, InputFormat, ResultDocument, RunConfig};
use crate::jj_vem::fit_jj_vem;
use crate::louis::{louis_se_variant, LouisResult, LouisVariant};
use crate::model::{DropManifest, Estimator, FitResult, RollCall};
use crate::pg_vem::fit_pg_vem;

impl RunConfig {
    /// Copies `seed` into every randomized sub-configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pg.seed = seed;
        self.louis.seed = seed;
        self.bootstrap.seed = seed;
        self
    }
}

pub fn fit(data: &RollCall, cfg: &RunConfig) -> Result<FitResult> {
    match cfg.estimator {
        Estimator::PgVem => fit_pg_vem(data, &cfg.pg),
        Estimator::JjVem => fit_jj_vem(data, &cfg.jj),
    }
}

pub fn louis(fit: &FitResult, data: &RollCall, cfg: &RunConfig) -> Result<LouisResult> {
    louis_se_variant(fit, data, &cfg.louis, LouisVariant::for_estimator(fit.estimator))
}

pub fn bootstrap(fit: &FitResult, data: &RollCall, cfg: &RunConfig) -> Result<BootstrapResult> {
    let mut b = cfg.bootstrap.clone();
    b.estimator = fit.estimator;
    b.pg = cfg.pg.clone();
    b.jj = cfg.jj.clone();
    parametric_bootstrap(fit, data, &b)
}

/// Which standard errors to attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SeRequest {
    pub louis: bool,
    pub bootstrap: bool,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub data: RollCall,
    pub manifest: DropManifest,
    pub fit: FitResult,
    pub louis: Option<LouisResult>,
    pub bootstrap: Option<BootstrapResult>,
    pub document: ResultDocument,
}

/// Fits `data`, attaches the requested SEs and builds the result document.
/// Wall time is recorded in the document only when `timing` is set.
pub fn run(
    data: RollCall,
    manifest: DropManifest,
    cfg: &RunConfig,
    se: SeRequest,
    timing: bool,
) -> Result<RunOutput> {
    let fit = fit(&data, cfg)?;
    let mut document = ResultDocument::from_fit(&fit, &data, &manifest, cfg)?;
    if timing {
        document.diagnostics.wall_time_ms = Some(fit.diagnostics.wall_time_ms);
    }
    let louis = if se.louis { Some(louis(&fit, &data, cfg)?) } else { None };
    if let Some(l) = &louis {
        document.set_se_louis(data.legislator_ids(), &l.se)?;
    }
    let bootstrap = if se.bootstrap { Some(bootstrap(&fit, &data, cfg)?) } else { None };
    if let Some(b) = &bootstrap {
        document.set_se_bootstrap(data.legislator_ids(), &b.se, b.dropped)?;
    }
    Ok(RunOutput {
        data,
        manifest,
        fit,
        louis,
        bootstrap,
        document,
    })
}

pub fn run_file(path: &Path, format: InputFormat, cfg: &RunConfig, se: SeRequest, timing: bool) -> Result<RunOutput> {
    let (data, manifest) = load_rollcall(path, format, &cfg.codes)?;
    run(data, manifest, cfg, se, timing)
}
