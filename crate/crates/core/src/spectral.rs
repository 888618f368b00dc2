//! Frequency-domain primitives: Fourier grids, raw periodograms, the
//! orthonormal cosine basis and the map between cepstra and log-spectra.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Number of uniform nodes used by [`cepstra_from_log_spectrum`].
pub const QUADRATURE_POINTS: usize = 4096;

/// `N` replicated series of common length `T` with their `N x P` covariates.
///
/// Rows of `series` are mean-centered on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    series: DMatrix<f64>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl TimeSeriesPanel {
    pub fn new(
        mut series: DMatrix<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = series.shape();
        if n < 2 {
            return Err(Error::data(format!("need at least 2 replicates, got {n}")));
        }
        if t < 8 {
            return Err(Error::data(format!("series length must be at least 8, got {t}")));
        }
        if covariates.nrows() != n {
            return Err(Error::data(format!(
                "covariate table has {} rows but there are {n} series",
                covariates.nrows()
            )));
        }
        let p = covariates.ncols();
        if p < 1 {
            return Err(Error::data("at least one covariate is required"));
        }
        if covariate_names.len() != p {
            return Err(Error::data(format!(
                "{} covariate names supplied for {p} covariate columns",
                covariate_names.len()
            )));
        }
        check_finite(&series, "series")?;
        check_finite(&covariates, "covariates")?;
        for mut row in series.row_iter_mut() {
            let values: Vec<f64> = row.iter().copied().collect();
            center_in_place(&values, |i, v| row[i] = v);
        }
        Ok(TimeSeriesPanel {
            series,
            covariates,
            covariate_names,
        })
    }

    /// Convenience constructor naming covariates `x1, x2, ...`.
    pub fn with_default_names(series: DMatrix<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let names = (1..=covariates.ncols()).map(|p| format!("x{p}")).collect();
        Self::new(series, covariates, names)
    }

    pub fn series(&self) -> &DMatrix<f64> {
        &self.series
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_replicates(&self) -> usize {
        self.series.nrows()
    }

    pub fn series_len(&self) -> usize {
        self.series.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid::new(self.series_len())
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for (j, row) in m.row_iter().enumerate() {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value in {what} at row {j}, column {c}"
            )));
        }
    }
    Ok(())
}

/// Subtracts the sample mean. A row whose mean is already below rounding
/// level is left untouched so that centering is idempotent bit-for-bit.
fn center_in_place(values: &[f64], mut set: impl FnMut(usize, f64)) {
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    let scale = values.iter().map(|v| v.abs()).sum::<f64>() / n;
    if mean.abs() <= 4.0 * f64::EPSILON * scale {
        return;
    }
    for (i, v) in values.iter().enumerate() {
        set(i, v - mean);
    }
}

/// Compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Fourier frequencies `l / T` for `l = 1..=floor((T-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    series_len: usize,
    frequencies: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(series_len: usize) -> Self {
        let l = series_len.saturating_sub(1) / 2;
        let frequencies = (1..=l).map(|i| i as f64 / series_len as f64).collect();
        FrequencyGrid {
            series_len,
            frequencies,
        }
    }

    pub fn series_len(&self) -> usize {
        self.series_len
    }

    /// Number of Fourier frequencies, `L`.
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }
}

/// Raw periodogram ordinates, one row per replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    pub values: DMatrix<f64>,
    pub grid: FrequencyGrid,
}

impl Periodogram {
    pub fn n_replicates(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.values.row(j).iter().copied().collect()
    }
}

/// Periodogram of every replicate in a validated panel.
pub fn compute_periodogram(panel: &TimeSeriesPanel) -> Periodogram {
    periodogram_of_rows(panel.series())
}

/// Validates, centers and transforms raw series rows.
pub fn periodogram_from_rows(rows: &DMatrix<f64>) -> Result<Periodogram> {
    check_finite(rows, "series")?;
    let mut centered = rows.clone();
    for mut row in centered.row_iter_mut() {
        let values: Vec<f64> = row.iter().copied().collect();
        center_in_place(&values, |i, v| row[i] = v);
    }
    Ok(periodogram_of_rows(&centered))
}

fn periodogram_of_rows(rows: &DMatrix<f64>) -> Periodogram {
    let (n, t) = rows.shape();
    let plan = PeriodogramPlan::new(t);
    let per_row: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let row: Vec<f64> = rows.row(j).iter().copied().collect();
            plan.transform(&row)
        })
        .collect();
    let grid = plan.grid.clone();
    let values = DMatrix::from_fn(n, grid.len(), |j, l| per_row[j][l]);
    Periodogram { values, grid }
}

/// Cached FFT plan for periodograms of series of one length.
#[derive(Clone)]
pub struct PeriodogramPlan {
    grid: FrequencyGrid,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodogramPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodogramPlan").field("grid", &self.grid).finish()
    }
}

impl PeriodogramPlan {
    pub fn new(series_len: usize) -> Self {
        PeriodogramPlan {
            grid: FrequencyGrid::new(series_len),
            fft: FftPlanner::new().plan_fft_forward(series_len),
        }
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    /// Periodogram of an already-centered series.
    pub fn transform(&self, series: &[f64]) -> Vec<f64> {
        assert_eq!(series.len(), self.grid.series_len(), "series length does not match plan");
        let t = series.len();
        let mut buf: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[1..=self.grid.len()]
            .iter()
            .map(|c| c.norm_sqr() / t as f64)
            .collect()
    }

    /// Periodogram after mean-centering.
    pub fn transform_centered(&self, series: &[f64]) -> Vec<f64> {
        let mut centered = series.to_vec();
        center_in_place(series, |i, v| centered[i] = v);
        self.transform(&centered)
    }
}

/// Periodogram of a single centered series by the defining direct sum
/// `T^-1 |sum_t Z_t exp(-2 pi i w t)|^2`, `t = 1..T`. Quadratic cost;
/// reference implementation for the FFT path.
pub fn periodogram_direct(series: &[f64]) -> Vec<f64> {
    let t = series.len();
    let grid = FrequencyGrid::new(t);
    grid.frequencies()
        .iter()
        .map(|&w| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &z) in series.iter().enumerate() {
                let arg = -2.0 * PI * w * (i + 1) as f64;
                re += z * arg.cos();
                im += z * arg.sin();
            }
            (re * re + im * im) / t as f64
        })
        .collect()
}

/// The orthonormal cosine basis `{1, sqrt2 cos(2 pi w), ..., sqrt2 cos(2 pi w (K-1))}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CosineBasis {
    k: usize,
}

impl CosineBasis {
    pub fn new(k: usize) -> Self {
        CosineBasis { k }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn eval(&self, omega: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.eval_into(omega, &mut out);
        out
    }

    pub fn eval_into(&self, omega: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k);
        if let Some(first) = out.first_mut() {
            *first = 1.0;
        }
        for (k, v) in out.iter_mut().enumerate().skip(1) {
            *v = SQRT_2 * (2.0 * PI * omega * k as f64).cos();
        }
    }

    /// Evaluation of `phi(w)^T coeffs` where `coeffs.len()` defines `K`.
    pub fn combine(coeffs: &[f64], omega: f64) -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if k == 0 {
                    *c
                } else {
                    c * SQRT_2 * (2.0 * PI * omega * k as f64).cos()
                }
            })
            .sum()
    }
}

/// `L x K` design matrix whose row `l` is the basis evaluated at `w_l`.
pub fn basis_matrix(grid: &FrequencyGrid, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 || k > grid.len() {
        return Err(Error::InvalidTruncation {
            k,
            available: grid.len(),
        });
    }
    Ok(basis_on(grid.frequencies(), k))
}

/// Basis evaluated on arbitrary frequencies, without the `K <= L` check.
pub fn basis_on(frequencies: &[f64], k: usize) -> DMatrix<f64> {
    let basis = CosineBasis::new(k);
    let mut m = DMatrix::zeros(frequencies.len(), k);
    let mut buf = vec![0.0; k];
    for (i, &w) in frequencies.iter().enumerate() {
        basis.eval_into(w, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            m[(i, c)] = *v;
        }
    }
    m
}

/// Truncated cepstral coefficients `(Y_0, ..., Y_{K-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralVector(DVector<f64>);

impl CepstralVector {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::data("cepstral vector must have at least one coefficient"));
        }
        if let Some(i) = coeffs.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite cepstral coefficient at index {i}")));
        }
        Ok(CepstralVector(DVector::from_vec(coeffs)))
    }

    pub(crate) fn from_dvector(v: DVector<f64>) -> Self {
        CepstralVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Log-spectrum sampled on an explicit frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrum {
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
}

impl LogSpectrum {
    /// Spectrum `exp(g)` on the same grid.
    pub fn spectrum(&self) -> Vec<f64> {
        self.values.iter().map(|g| g.exp()).collect()
    }
}

pub fn log_spectrum_from_cepstra(y: &CepstralVector, frequencies: &[f64]) -> LogSpectrum {
    let values = frequencies
        .iter()
        .map(|&w| CosineBasis::combine(y.as_slice(), w))
        .collect();
    LogSpectrum {
        frequencies: frequencies.to_vec(),
        values,
    }
}

/// Projects a log-spectrum onto the first `k` basis functions with the
/// periodic trapezoidal rule on [`QUADRATURE_POINTS`] nodes over `[-1/2, 1/2)`.
pub fn cepstra_from_log_spectrum(g: impl Fn(f64) -> f64, k: usize) -> Result<CepstralVector> {
    if k == 0 {
        return Err(Error::InvalidTruncation { k, available: 0 });
    }
    let m = QUADRATURE_POINTS;
    let basis = CosineBasis::new(k);
    let mut acc = vec![0.0; k];
    let mut phi = vec![0.0; k];
    for i in 0..m {
        let w = -0.5 + i as f64 / m as f64;
        let gv = g(w);
        if !gv.is_finite() {
            return Err(Error::Numerical(format!(
                "log-spectrum is not finite at frequency {w}"
            )));
        }
        basis.eval_into(w, &mut phi);
        for (a, p) in acc.iter_mut().zip(&phi) {
            *a += gv * p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= m as f64);
    Ok(CepstralVector(DVector::from_vec(acc)))
}
