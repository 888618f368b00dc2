//! The two-stage estimator: Whittle cepstra, then the multivariate linear model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::regression::{
    effect_functions, effect_functions_at, fit_envelope, fit_ols, fit_rrr, select_dimension,
    DimensionKind, EffectFunctions, Estimator, LinearModelFit,
};
use crate::spectral::{basis_on, Periodogram, TimeSeriesPanel};
use crate::whittle::{fit_panel, fit_periodogram, CepstralMatrix, FitConfig, KChoice, WhittleFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimChoice {
    Fixed(usize),
    Auto,
}

/// Which second-stage estimator to run and how its dimension is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorSpec {
    Ols,
    Rrr(DimChoice),
    Envelope(DimChoice),
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Ols => "ols",
            EstimatorSpec::Rrr(_) => "rrr",
            EstimatorSpec::Envelope(_) => "envelope",
        }
    }
}

impl From<Estimator> for EstimatorSpec {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Ols => EstimatorSpec::Ols,
            Estimator::Rrr { rank } => EstimatorSpec::Rrr(DimChoice::Fixed(rank)),
            Estimator::Envelope { dim } => EstimatorSpec::Envelope(DimChoice::Fixed(dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub whittle: FitConfig,
    pub k: KChoice,
    pub estimator: EstimatorSpec,
    /// Divide covariates by their sample standard deviation before fitting.
    pub standardize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            whittle: FitConfig::default(),
            k: KChoice::Auto,
            estimator: EstimatorSpec::Ols,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStageFit {
    pub whittle: WhittleFit,
    pub model: LinearModelFit,
    /// Standard deviations the covariates were divided by, when standardized.
    pub covariate_scales: Option<DVector<f64>>,
    /// Information-criterion trace when the dimension was selected.
    pub dimension_trace: Option<Vec<(usize, Option<f64>)>>,
}

impl TwoStageFit {
    pub fn k(&self) -> usize {
        self.whittle.k
    }

    /// Covariates on the scale the model was fitted on.
    pub fn design(&self, covariates: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.covariate_scales {
            Some(s) => scale_columns(covariates, s),
            None => covariates.clone(),
        }
    }

    pub fn effects(&self, m: usize) -> Result<EffectFunctions> {
        effect_functions(&self.model, m)
    }

    /// Fitted population-mean log-spectra `phi(w)^T (A + B^T x_j)`, one row
    /// per replicate, at the given frequencies.
    pub fn fitted_log_spectra(&self, covariates: &DMatrix<f64>, frequencies: &[f64]) -> DMatrix<f64> {
        let fitted = self.model.fitted_cepstra(&self.design(covariates));
        fitted * basis_on(frequencies, self.k()).transpose()
    }

    pub fn effects_at(&self, frequencies: &[f64]) -> EffectFunctions {
        effect_functions_at(&self.model, frequencies)
    }
}

fn scale_columns(x: &DMatrix<f64>, scales: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, s) in out.column_iter_mut().zip(scales.iter()) {
        col /= *s;
    }
    out
}

fn column_sds(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        }),
    )
}

/// Runs the chosen second-stage estimator on fitted cepstra.
pub fn fit_stage_two(
    cepstra: &CepstralMatrix,
    x: &DMatrix<f64>,
    spec: EstimatorSpec,
) -> Result<(LinearModelFit, Option<Vec<(usize, Option<f64>)>>)> {
    let (p, k) = (x.ncols(), cepstra.k());
    match spec {
        EstimatorSpec::Ols => Ok((fit_ols(cepstra, x)?, None)),
        EstimatorSpec::Rrr(DimChoice::Fixed(m)) => Ok((fit_rrr(cepstra, x, m)?, None)),
        EstimatorSpec::Envelope(DimChoice::Fixed(r)) => Ok((fit_envelope(cepstra, x, r)?, None)),
        EstimatorSpec::Rrr(DimChoice::Auto) => {
            let sel = select_dimension(cepstra, x, DimensionKind::Rrr, 1..=p.min(k))?;
            Ok((sel.fit, Some(sel.trace)))
        }
        EstimatorSpec::Envelope(DimChoice::Auto) => {
            let sel = select_dimension(cepstra, x, DimensionKind::Envelope, 1..=p)?;
            Ok((sel.fit, Some(sel.trace)))
        }
    }
}

pub fn fit_two_stage(panel: &TimeSeriesPanel, config: &PipelineConfig) -> Result<TwoStageFit> {
    let whittle = fit_panel(panel, &config.whittle, config.k)?;
    finish_two_stage(whittle, panel.covariates(), config)
}

/// Same as [`fit_two_stage`] from a precomputed periodogram.
pub fn fit_two_stage_periodogram(
    periodogram: &Periodogram,
    covariates: &DMatrix<f64>,
    config: &PipelineConfig,
) -> Result<TwoStageFit> {
    let whittle = fit_periodogram(periodogram, &config.whittle, config.k)?;
    finish_two_stage(whittle, covariates, config)
}

/// Second stage on an existing Whittle fit.
pub fn finish_two_stage(
    whittle: WhittleFit,
    covariates: &DMatrix<f64>,
    config: &PipelineConfig,
) -> Result<TwoStageFit> {
    if covariates.nrows() != whittle.cepstra.n_replicates() {
        return Err(Error::data("covariate rows do not match replicates"));
    }
    let covariate_scales = config.standardize.then(|| column_sds(covariates));
    let x = match &covariate_scales {
        Some(s) => scale_columns(covariates, s),
        None => covariates.clone(),
    };
    let (model, dimension_trace) = fit_stage_two(&whittle.cepstra, &x, config.estimator)?;
    Ok(TwoStageFit {
        whittle,
        model,
        covariate_scales,
        dimension_trace,
    })
}
