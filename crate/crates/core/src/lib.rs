//! Cepstral regression for replicated stationary time series.
//!
//! A two-stage estimator relating the power spectra of `N` replicated series
//! to `P` quantitative covariates:
//!
//! 1. each replicate's log-spectrum is summarized by `K` cepstral
//!    coefficients fitted by Whittle likelihood ([`whittle`]), with `K`
//!    chosen by AIC;
//! 2. the `N x K` cepstral matrix is regressed on the covariates by least
//!    squares, reduced-rank regression or a predictor envelope
//!    ([`regression`]), giving effect functions `alpha(w)` and `beta_p(w)`.
//!
//! [`bootstrap`] adds residual-bootstrap pointwise bands, [`experiments`]
//! holds the simulation designs and ASE benchmark, and [`io`] the file
//! formats used by the `cepreg` binary.

pub mod bootstrap;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod spectral;
pub mod whittle;

pub use error::{Error, Result};
pub use pipeline::{fit_two_stage, EstimatorSpec, DimChoice, PipelineConfig, TwoStageFit};
pub use regression::{EffectFunctions, Estimator, LinearModelFit};
pub use spectral::{FrequencyGrid, Periodogram, TimeSeriesPanel};
pub use whittle::{CepstralMatrix, FitConfig, KChoice, WhittleFit};
