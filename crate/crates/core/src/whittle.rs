//! Replicate-specific cepstral estimation.
//!
//! Each replicate's truncated cepstrum minimizes the negative log-Whittle
//! likelihood
//!
//! ```text
//! L(y) = sum_l [ I_l exp(-phi_l' y) + phi_l' y ]
//! ```
//!
//! by Fisher scoring started from the bias-corrected log-periodogram
//! regression. The Fisher information `sum_l phi_l phi_l'` does not depend on
//! `y`, so it is factored once per `(T, K)` and shared by all replicates.
//! The truncation `K` is chosen by `AIC(K) = sum_j L_jK + 2NK`.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::{
    basis_matrix, compute_periodogram, CepstralVector, FrequencyGrid, Periodogram,
    TimeSeriesPanel,
};

/// Euler-Mascheroni constant used to de-bias the log-periodogram.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_533;

/// Floor applied to periodogram ordinates before taking logs in the initializer.
pub const PERIODOGRAM_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Relative change in the objective below which iteration stops.
    pub convergence_tol: f64,
    pub max_iterations: usize,
    /// Largest K searched by AIC; `None` means `min(30, L/2)`.
    pub k_max: Option<usize>,
    pub step_halving_max: usize,
    /// Required `||score||_inf / L` at a converged solution.
    pub gradient_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            convergence_tol: 1e-8,
            max_iterations: 100,
            k_max: None,
            step_halving_max: 20,
            gradient_tol: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn resolved_k_max(&self, l: usize) -> usize {
        self.k_max.unwrap_or_else(|| 30.min(l / 2).max(1))
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        if !(self.convergence_tol > 0.0) {
            return Err(Error::config("convergence tolerance must be positive"));
        }
        if !(self.gradient_tol > 0.0) {
            return Err(Error::config("gradient tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        let k_max = self.resolved_k_max(l);
        if k_max == 0 || k_max > l {
            return Err(Error::InvalidTruncation {
                k: k_max,
                available: l,
            });
        }
        Ok(())
    }
}

/// How the truncation number is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    Auto,
}

/// `N x K` matrix of fitted cepstral coefficients, one row per replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralMatrix(pub DMatrix<f64>);

impl CepstralMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_replicates(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.0.row(j).iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhittleFit {
    pub cepstra: CepstralMatrix,
    pub k: usize,
    pub per_replicate_nll: Vec<f64>,
    pub iterations: Vec<usize>,
    /// `AIC(K)` for every K whose fits all converged (present when K was selected).
    pub aic_trace: Option<BTreeMap<usize, f64>>,
    /// K values skipped during selection because some replicate failed.
    pub skipped_k: Vec<usize>,
}

/// Result of fitting one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateFit {
    pub cepstra: CepstralVector,
    pub nll: f64,
    pub iterations: usize,
    /// Objective after the initializer and after every accepted step.
    pub nll_trace: Vec<f64>,
    pub gradient_norm: f64,
}

/// Negative log-Whittle likelihood. Zero ordinates are allowed.
pub fn negative_whittle_nll(y: &[f64], periodogram_row: &[f64], basis: &DMatrix<f64>) -> Result<f64> {
    check_dims(y, periodogram_row, basis)?;
    let eta = basis * DVector::from_column_slice(y);
    let value = nll_from_eta(&eta, periodogram_row);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence(format!(
            "negative log-likelihood is {value} at the current coefficients"
        )))
    }
}

/// Gradient of [`negative_whittle_nll`]: `sum_l [1 - I_l exp(-phi_l' y)] phi_l`.
pub fn whittle_score(y: &[f64], periodogram_row: &[f64], basis: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dims(y, periodogram_row, basis)?;
    let eta = basis * DVector::from_column_slice(y);
    Ok(score_from_eta(&eta, periodogram_row, basis).as_slice().to_vec())
}

fn check_dims(y: &[f64], row: &[f64], basis: &DMatrix<f64>) -> Result<()> {
    if basis.nrows() != row.len() || basis.ncols() != y.len() {
        return Err(Error::data(format!(
            "dimension mismatch: basis {}x{}, periodogram length {}, coefficients length {}",
            basis.nrows(),
            basis.ncols(),
            row.len(),
            y.len()
        )));
    }
    Ok(())
}

fn nll_from_eta(eta: &DVector<f64>, row: &[f64]) -> f64 {
    eta.iter()
        .zip(row)
        .map(|(&e, &i)| if i == 0.0 { e } else { i * (-e).exp() + e })
        .sum()
}

fn score_from_eta(eta: &DVector<f64>, row: &[f64], basis: &DMatrix<f64>) -> DVector<f64> {
    let weights = DVector::from_iterator(
        row.len(),
        eta.iter().zip(row).map(|(&e, &i)| 1.0 - i * (-e).exp()),
    );
    basis.tr_mul(&weights)
}

/// Basis and factored Fisher information for a fixed `(T, K)`.
#[derive(Debug, Clone)]
pub struct WhittleModel {
    basis: DMatrix<f64>,
    information: Cholesky<f64, Dyn>,
}

impl WhittleModel {
    pub fn new(grid: &FrequencyGrid, k: usize) -> Result<Self> {
        let basis = basis_matrix(grid, k)?;
        let information = Cholesky::new(basis.tr_mul(&basis)).ok_or_else(|| {
            Error::Numerical(format!("Fisher information is singular for K = {k}"))
        })?;
        Ok(WhittleModel { basis, information })
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Least-squares fit of `log I + gamma` on the basis.
    pub fn initial_cepstra(&self, periodogram_row: &[f64]) -> Result<CepstralVector> {
        if periodogram_row.len() != self.basis.nrows() {
            return Err(Error::data(format!(
                "periodogram length {} does not match {} Fourier frequencies",
                periodogram_row.len(),
                self.basis.nrows()
            )));
        }
        let target = DVector::from_iterator(
            periodogram_row.len(),
            periodogram_row
                .iter()
                .map(|&i| i.max(PERIODOGRAM_FLOOR).ln() + EULER_GAMMA),
        );
        let y = self.information.solve(&self.basis.tr_mul(&target));
        Ok(CepstralVector::from_dvector(y))
    }

    pub fn fit(&self, periodogram_row: &[f64], config: &FitConfig) -> Result<ReplicateFit> {
        let start = self.initial_cepstra(periodogram_row)?;
        self.fit_from(start.into_inner(), periodogram_row, config)
    }

    fn fit_from(
        &self,
        mut y: DVector<f64>,
        row: &[f64],
        config: &FitConfig,
    ) -> Result<ReplicateFit> {
        if let Some(l) = row.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::data(format!(
                "periodogram ordinate {l} is negative or non-finite"
            )));
        }
        let l = row.len() as f64;
        let grad_limit = config.gradient_tol * l;
        let mut eta = &self.basis * &y;
        let mut nll = nll_from_eta(&eta, row);
        if !nll.is_finite() {
            return Err(Error::Divergence(
                "objective is not finite at the initial estimate".into(),
            ));
        }
        let mut score = score_from_eta(&eta, row, &self.basis);
        let mut trace = vec![nll];

        for iteration in 1..=config.max_iterations {
            let direction = self.information.solve(&score);
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=config.step_halving_max {
                let candidate = &y - &direction * step;
                let cand_eta = &self.basis * &candidate;
                let cand_nll = nll_from_eta(&cand_eta, row);
                if cand_nll.is_finite() && cand_nll <= nll {
                    accepted = Some((candidate, cand_eta, cand_nll));
                    break;
                }
                step *= 0.5;
            }
            let Some((new_y, new_eta, new_nll)) = accepted else {
                // No descent even for tiny steps: we are at the rounding floor.
                let gradient_norm = score.amax();
                if gradient_norm < grad_limit {
                    return Ok(self.finish(y, nll, iteration - 1, trace, gradient_norm));
                }
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    gradient_norm,
                    last_iterate: y.as_slice().to_vec(),
                });
            };
            let change = (nll - new_nll).abs() / (nll.abs() + 1.0);
            y = new_y;
            eta = new_eta;
            nll = new_nll;
            score = score_from_eta(&eta, row, &self.basis);
            trace.push(nll);
            let gradient_norm = score.amax();
            if change < config.convergence_tol && gradient_norm < grad_limit {
                return Ok(self.finish(y, nll, iteration, trace, gradient_norm));
            }
        }
        Err(Error::NonConvergence {
            iterations: config.max_iterations,
            gradient_norm: score.amax(),
            last_iterate: y.as_slice().to_vec(),
        })
    }

    fn finish(
        &self,
        y: DVector<f64>,
        nll: f64,
        iterations: usize,
        nll_trace: Vec<f64>,
        gradient_norm: f64,
    ) -> ReplicateFit {
        ReplicateFit {
            cepstra: CepstralVector::from_dvector(y),
            nll,
            iterations,
            nll_trace,
            gradient_norm,
        }
    }

    /// Fits every row of the periodogram; results are in row order.
    pub fn fit_all(&self, periodogram: &Periodogram, config: &FitConfig) -> Result<Vec<ReplicateFit>> {
        (0..periodogram.n_replicates())
            .into_par_iter()
            .map(|j| {
                self.fit(&periodogram.row(j), config)
                    .map_err(|e| e.at_replicate(j))
            })
            .collect()
    }
}

/// Initial cepstral estimate from the bias-corrected log-periodogram.
pub fn initial_cepstra(periodogram_row: &[f64], basis: &DMatrix<f64>) -> Result<CepstralVector> {
    let information = Cholesky::new(basis.tr_mul(basis))
        .ok_or_else(|| Error::Numerical("Fisher information is singular".into()))?;
    let model = WhittleModel {
        basis: basis.clone(),
        information,
    };
    model.initial_cepstra(periodogram_row)
}

/// Fisher-scoring fit of one periodogram row at truncation `k`.
pub fn fit_replicate(
    grid: &FrequencyGrid,
    periodogram_row: &[f64],
    k: usize,
    config: &FitConfig,
) -> Result<ReplicateFit> {
    WhittleModel::new(grid, k)?.fit(periodogram_row, config)
}

/// Selection of `K` over `1..=k_max` by `AIC(K) = sum_j L_jK + 2NK`.
pub fn select_k_aic(periodogram: &Periodogram, config: &FitConfig) -> Result<(usize, BTreeMap<usize, f64>, Vec<usize>)> {
    let (best, trace, skipped, _) = select_k_with_fits(periodogram, config)?;
    Ok((best, trace, skipped))
}

type Selection = (usize, BTreeMap<usize, f64>, Vec<usize>, Vec<ReplicateFit>);

fn select_k_with_fits(periodogram: &Periodogram, config: &FitConfig) -> Result<Selection> {
    let l = periodogram.grid.len();
    config.validate(l)?;
    let n = periodogram.n_replicates();
    let k_max = config.resolved_k_max(l);

    let per_k: Vec<(usize, Result<Vec<ReplicateFit>>)> = (1..=k_max)
        .into_par_iter()
        .map(|k| {
            let fits = WhittleModel::new(&periodogram.grid, k)
                .and_then(|m| m.fit_all(periodogram, config));
            (k, fits)
        })
        .collect();

    let mut trace = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut best: Option<(usize, f64, Vec<ReplicateFit>)> = None;
    let mut last_error = None;
    for (k, fits) in per_k {
        match fits {
            Ok(fits) => {
                let aic = fits.iter().map(|f| f.nll).sum::<f64>() + 2.0 * (n * k) as f64;
                trace.insert(k, aic);
                if best.as_ref().is_none_or(|(_, b, _)| aic < *b) {
                    best = Some((k, aic, fits));
                }
            }
            Err(e) => {
                skipped.push(k);
                last_error = Some(e);
            }
        }
    }
    match best {
        Some((k, _, fits)) => Ok((k, trace, skipped, fits)),
        None => Err(last_error.unwrap_or_else(|| Error::config("empty K search range"))),
    }
}

/// Periodogram, optional AIC selection and per-replicate fits.
pub fn fit_panel(panel: &TimeSeriesPanel, config: &FitConfig, k: KChoice) -> Result<WhittleFit> {
    fit_periodogram(&compute_periodogram(panel), config, k)
}

pub fn fit_periodogram(periodogram: &Periodogram, config: &FitConfig, k: KChoice) -> Result<WhittleFit> {
    let (k, fits, aic_trace, skipped_k) = match k {
        KChoice::Fixed(k) => {
            let fits = WhittleModel::new(&periodogram.grid, k)?.fit_all(periodogram, config)?;
            (k, fits, None, Vec::new())
        }
        KChoice::Auto => {
            let (k, trace, skipped, fits) = select_k_with_fits(periodogram, config)?;
            (k, fits, Some(trace), skipped)
        }
    };
    let n = fits.len();
    let cepstra = DMatrix::from_fn(n, k, |j, c| fits[j].cepstra.as_slice()[c]);
    Ok(WhittleFit {
        cepstra: CepstralMatrix(cepstra),
        k,
        per_replicate_nll: fits.iter().map(|f| f.nll).collect(),
        iterations: fits.iter().map(|f| f.iterations).collect(),
        aic_trace,
        skipped_k,
    })
}
