//! Spectral synthesis of Gaussian series and residual-bootstrap bands for
//! the effect functions.
//!
//! A bootstrap sample resamples the rows of the second-stage residual matrix,
//! builds replicate log-spectra `alpha(w) + x_j' beta(w) + phi(w)' e*_j`,
//! simulates a series from each, and re-runs both stages with the original
//! `K` and estimator dimension. Bands are percentiles of the bias-adjusted
//! bootstrap curves.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::pipeline::{fit_stage_two, EstimatorSpec, TwoStageFit};
use crate::regression::{effect_functions_at, uniform_half_grid, EffectFunctions};
use crate::rng::{derive_seed, substream};
use crate::spectral::{basis_on, CosineBasis, FrequencyGrid, PeriodogramPlan};
use crate::whittle::{CepstralMatrix, FitConfig, WhittleModel};

/// Draws stationary Gaussian series of length `T` with a prescribed spectrum:
///
/// `Z_t = sum_l sqrt(2 f(w_l) / T) [V_l cos(2 pi w_l t) + W_l sin(2 pi w_l t)]`
///
/// over the Fourier frequencies, plus a Nyquist term of variance `f(1/2)/T`
/// when `T` is even.
#[derive(Clone)]
pub struct SpectralSynthesizer {
    grid: FrequencyGrid,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectralSynthesizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralSynthesizer").field("grid", &self.grid).finish()
    }
}

impl SpectralSynthesizer {
    pub fn new(series_len: usize) -> Self {
        SpectralSynthesizer {
            grid: FrequencyGrid::new(series_len),
            inverse: FftPlanner::new().plan_fft_inverse(series_len),
        }
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn series_len(&self) -> usize {
        self.grid.series_len()
    }

    fn has_nyquist(&self) -> bool {
        self.series_len().is_multiple_of(2)
    }

    /// Frequencies at which the log-spectrum is needed: the Fourier grid,
    /// followed by 1/2 for even `T`.
    pub fn required_frequencies(&self) -> Vec<f64> {
        let mut f = self.grid.frequencies().to_vec();
        if self.has_nyquist() {
            f.push(0.5);
        }
        f
    }

    /// Simulates from log-spectrum values at [`Self::required_frequencies`].
    pub fn simulate_values<R: Rng + ?Sized>(&self, log_spectrum: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let t = self.series_len();
        let needed = self.grid.len() + usize::from(self.has_nyquist());
        if log_spectrum.len() != needed {
            return Err(Error::data(format!(
                "expected {needed} log-spectrum values for T = {t}, got {}",
                log_spectrum.len()
            )));
        }
        if let Some(i) = log_spectrum.iter().position(|g| !g.is_finite() || !g.exp().is_finite()) {
            return Err(Error::data(format!("log-spectrum value {i} is not finite")));
        }
        let tf = t as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); t];
        for (l, g) in log_spectrum.iter().take(self.grid.len()).enumerate() {
            let amp = (2.0 * g.exp() / tf).sqrt();
            let v: f64 = StandardNormal.sample(rng);
            let w: f64 = StandardNormal.sample(rng);
            // Re[(v - i w) e^{2 pi i l t / T}] = v cos + w sin
            buf[l + 1] = Complex64::new(amp * v, -amp * w);
        }
        if self.has_nyquist() {
            let g = log_spectrum[self.grid.len()];
            let v: f64 = StandardNormal.sample(rng);
            buf[t / 2] = Complex64::new((g.exp() / tf).sqrt() * v, 0.0);
        }
        self.inverse.process(&mut buf);
        Ok(buf.iter().map(|c| c.re).collect())
    }

    /// Simulates from a log-spectrum given as a function of frequency.
    pub fn simulate<R: Rng + ?Sized>(&self, log_spectrum: impl Fn(f64) -> f64, rng: &mut R) -> Result<Vec<f64>> {
        let values: Vec<f64> = self.required_frequencies().into_iter().map(log_spectrum).collect();
        self.simulate_values(&values, rng)
    }

    /// Simulates from a truncated cepstrum.
    pub fn simulate_cepstra<R: Rng + ?Sized>(&self, cepstra: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.simulate(|w| CosineBasis::combine(cepstra, w), rng)
    }
}

/// One series of length `t` with log-spectrum `g`.
pub fn simulate_series_from_log_spectrum<R: Rng + ?Sized>(
    g: impl Fn(f64) -> f64,
    t: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    SpectralSynthesizer::new(t).simulate(g, rng)
}

/// Direct trigonometric sum with the same draw order as the FFT path.
pub fn simulate_series_direct<R: Rng + ?Sized>(
    g: impl Fn(f64) -> f64,
    t: usize,
    rng: &mut R,
) -> Vec<f64> {
    let grid = FrequencyGrid::new(t);
    let tf = t as f64;
    let mut z = vec![0.0; t];
    for &w in grid.frequencies() {
        let amp = (2.0 * g(w).exp() / tf).sqrt();
        let v: f64 = StandardNormal.sample(rng);
        let u: f64 = StandardNormal.sample(rng);
        for (i, zi) in z.iter_mut().enumerate() {
            let arg = 2.0 * PI * w * i as f64;
            *zi += amp * (v * arg.cos() + u * arg.sin());
        }
    }
    if t.is_multiple_of(2) {
        let amp = (g(0.5).exp() / tf).sqrt();
        let v: f64 = StandardNormal.sample(rng);
        for (i, zi) in z.iter_mut().enumerate() {
            *zi += amp * v * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    z
}

/// How a bootstrap sample's cepstra are obtained from its log-spectra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOne {
    /// Simulate series and refit them by Whittle likelihood.
    Resimulate,
    /// Use the bootstrap cepstra directly (no re-simulation noise).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub grid_size: usize,
    pub stage_one: StageOne,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            alpha: 0.05,
            seed: 0,
            grid_size: 256,
            stage_one: StageOne::Resimulate,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 50 {
            return Err(Error::config(format!(
                "at least 50 bootstrap samples are required for bands, got {}",
                self.replicates
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_size < 2 {
            return Err(Error::config("band grid needs at least 2 points"));
        }
        Ok(())
    }
}

/// Pointwise bands; rows are `(alpha, beta_1, ..., beta_P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBands {
    pub frequencies: Vec<f64>,
    pub point: EffectFunctions,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub bias: DMatrix<f64>,
    pub alpha: f64,
    pub replicates: usize,
    pub failed_draws: usize,
}

impl ConfidenceBands {
    pub fn point_row(&self, row: usize) -> Vec<f64> {
        if row == 0 {
            self.point.alpha.clone()
        } else {
            self.point.beta.row(row - 1).iter().copied().collect()
        }
    }
}

/// Percentile with linear interpolation between order statistics
/// (inclusive convention: position `(n - 1) q`).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stacks `alpha` and `beta` into a `(P+1) x M` matrix.
fn stack(effects: &EffectFunctions) -> DMatrix<f64> {
    let m = effects.frequencies.len();
    let p = effects.beta.nrows();
    DMatrix::from_fn(p + 1, m, |r, c| if r == 0 { effects.alpha[c] } else { effects.beta[(r - 1, c)] })
}

/// Residual-bootstrap bands on a uniform grid of `config.grid_size` points over `[0, 1/2]`.
pub fn residual_bootstrap_bands(
    covariates: &DMatrix<f64>,
    series_len: usize,
    fit: &TwoStageFit,
    whittle_config: &FitConfig,
    config: &BootstrapConfig,
) -> Result<ConfidenceBands> {
    config.validate()?;
    let frequencies = uniform_half_grid(config.grid_size);
    residual_bootstrap_bands_at(covariates, series_len, fit, whittle_config, config, &frequencies)
}

/// As [`residual_bootstrap_bands`] on explicit frequencies.
pub fn residual_bootstrap_bands_at(
    covariates: &DMatrix<f64>,
    series_len: usize,
    fit: &TwoStageFit,
    whittle_config: &FitConfig,
    config: &BootstrapConfig,
    frequencies: &[f64],
) -> Result<ConfidenceBands> {
    config.validate()?;
    let design = fit.design(covariates);
    let n = design.nrows();
    if n != fit.model.residuals.nrows() {
        return Err(Error::data("covariates do not match the fitted model"));
    }
    let k = fit.k();
    let spec = EstimatorSpec::from(fit.model.estimator);
    let fitted = fit.model.fitted_cepstra(&design);
    let residuals = &fit.model.residuals;

    let synth = SpectralSynthesizer::new(series_len);
    let plan = PeriodogramPlan::new(series_len);
    let whittle = match config.stage_one {
        StageOne::Resimulate => Some(WhittleModel::new(synth.grid(), k)?),
        StageOne::Exact => None,
    };
    let sim_basis = basis_on(&synth.required_frequencies(), k);

    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<DMatrix<f64>> {
        let mut cepstra = DMatrix::zeros(n, k);
        for j in 0..n {
            let pick = rng.random_range(0..n);
            let row = fitted.row(j) + residuals.row(pick);
            cepstra.set_row(j, &row);
        }
        let cepstra = match &whittle {
            None => cepstra,
            Some(model) => {
                let mut refit = DMatrix::zeros(n, k);
                for j in 0..n {
                    let log_spec = &sim_basis * cepstra.row(j).transpose();
                    let series = synth.simulate_values(log_spec.as_slice(), rng)?;
                    let pgram = plan.transform_centered(&series);
                    let rep = model.fit(&pgram, whittle_config)?;
                    refit.set_row(j, &nalgebra::RowDVector::from_row_slice(rep.cepstra.as_slice()));
                }
                refit
            }
        };
        let (model, _) = fit_stage_two(&CepstralMatrix(cepstra), &design, spec)?;
        Ok(stack(&effect_functions_at(&model, frequencies)))
    };

    let max_extra = (config.replicates as f64 * 0.1).ceil() as usize;
    let outcomes: Vec<(Option<DMatrix<f64>>, usize)> = (0..config.replicates)
        .into_par_iter()
        .map(|b| {
            let stream_seed = derive_seed(config.seed, b as u64);
            let mut failures = 0;
            for attempt in 0..=max_extra {
                let mut rng = substream(stream_seed, attempt as u64);
                match draw(&mut rng) {
                    Ok(curves) => return (Some(curves), failures),
                    Err(_) => failures += 1,
                }
            }
            (None, failures)
        })
        .collect();

    let failed_draws: usize = outcomes.iter().map(|(_, f)| f).sum();
    if failed_draws > max_extra || outcomes.iter().any(|(c, _)| c.is_none()) {
        return Err(Error::FailureRate {
            what: "bootstrap draws",
            failed: failed_draws,
            attempted: config.replicates + failed_draws,
        });
    }
    let curves: Vec<DMatrix<f64>> = outcomes.into_iter().filter_map(|(c, _)| c).collect();

    let point = effect_functions_at(&fit.model, frequencies);
    let point_m = stack(&point);
    let (rows, m) = point_m.shape();
    let b = curves.len() as f64;
    let mut lower = DMatrix::zeros(rows, m);
    let mut upper = DMatrix::zeros(rows, m);
    let mut bias = DMatrix::zeros(rows, m);
    let mut values = Vec::with_capacity(curves.len());
    for r in 0..rows {
        for c in 0..m {
            values.clear();
            values.extend(curves.iter().map(|cv| cv[(r, c)]));
            let mean = crate::spectral::neumaier_sum(values.iter().copied()) / b;
            let shift = mean - point_m[(r, c)];
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite bootstrap curves"));
            bias[(r, c)] = shift;
            lower[(r, c)] = percentile(&values, config.alpha / 2.0) - shift;
            upper[(r, c)] = percentile(&values, 1.0 - config.alpha / 2.0) - shift;
        }
    }
    Ok(ConfidenceBands {
        frequencies: frequencies.to_vec(),
        point,
        lower,
        upper,
        bias,
        alpha: config.alpha,
        replicates: curves.len(),
        failed_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.1) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn fft_synthesis_matches_direct_sum() {
        for t in [16usize, 17, 50, 101] {
            let g = |w: f64| 0.3 + 0.8 * (2.0 * PI * w).cos();
            let mut r1 = ChaCha8Rng::seed_from_u64(t as u64);
            let mut r2 = ChaCha8Rng::seed_from_u64(t as u64);
            let a = simulate_series_from_log_spectrum(g, t, &mut r1).unwrap();
            let b = simulate_series_direct(g, t, &mut r2);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10, "T = {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn white_noise_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z = simulate_series_from_log_spectrum(|_| 0.0, 4096, &mut rng).unwrap();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
        let lag1 = z.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / n / var;
        assert!(lag1.abs() < 0.05, "lag-1 autocorrelation {lag1}");
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = simulate_series_from_log_spectrum(|w| w, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = simulate_series_from_log_spectrum(|w| w, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite_log_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(simulate_series_from_log_spectrum(|_| f64::NAN, 32, &mut rng).is_err());
        assert!(simulate_series_from_log_spectrum(|_| 1e6, 32, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BootstrapConfig::default();
        assert!(c.validate().is_ok());
        c.replicates = 10;
        assert!(c.validate().is_err());
        c.replicates = 100;
        c.alpha = 1.0;
        assert!(c.validate().is_err());
    }
}
