//! Simulation designs, ASE metrics and the benchmark runner.
//!
//! Truths are held as cepstra on the cosine basis, so
//! `alpha(w) = 2 cos(2 pi w)` is the vector `(0, sqrt 2)`.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::SpectralSynthesizer;
use crate::error::{Error, Result};
use crate::pipeline::{finish_two_stage, EstimatorSpec, PipelineConfig};
use crate::rng::substream;
use crate::spectral::{basis_on, neumaier_sum, CosineBasis, FrequencyGrid, TimeSeriesPanel};
use crate::whittle::{fit_panel, FitConfig, KChoice};

/// Standard deviation of each `eps_jk` in the designs' random log-spectrum
/// component.
pub const DEFAULT_NOISE_SD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    One,
    Two,
}

/// Effect functions of a generating model, as cepstra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub alpha: Vec<f64>,
    /// One cepstral vector per covariate.
    pub beta: Vec<Vec<f64>>,
}

impl TrueEffects {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Common cepstral length.
    pub fn k(&self) -> usize {
        self.beta.iter().map(Vec::len).chain(std::iter::once(self.alpha.len())).max().unwrap_or(0)
    }

    pub fn alpha_at(&self, omega: f64) -> f64 {
        CosineBasis::combine(&self.alpha, omega)
    }

    pub fn beta_at(&self, p: usize, omega: f64) -> f64 {
        CosineBasis::combine(&self.beta[p], omega)
    }

    /// `N x K` matrix of `A + B^T x_j`.
    pub fn mean_cepstra(&self, covariates: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(covariates.nrows(), k, |j, i| {
            let a = self.alpha.get(i).copied().unwrap_or(0.0);
            a + (0..self.p())
                .map(|p| covariates[(j, p)] * self.beta[p].get(i).copied().unwrap_or(0.0))
                .sum::<f64>()
        })
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.p() != p {
            return Err(Error::config(format!(
                "truth has {} effect functions for {p} covariates",
                self.p()
            )));
        }
        if self.k() == 0 {
            return Err(Error::config("truth has no cepstral coefficients"));
        }
        let all = self.alpha.iter().chain(self.beta.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::config("truth has non-finite cepstral coefficients"));
        }
        Ok(())
    }
}

/// A simulated panel with the quantities it was generated from.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: TimeSeriesPanel,
    pub truth: TrueEffects,
    /// `N x K` replicate cepstra including the random component.
    pub replicate_cepstra: DMatrix<f64>,
    /// `N x K` population-mean cepstra `A + B^T x_j`.
    pub mean_cepstra: DMatrix<f64>,
}

impl SimulatedPanel {
    /// True population-mean log-spectra, `N x M`.
    pub fn mean_log_spectra(&self, frequencies: &[f64]) -> DMatrix<f64> {
        &self.mean_cepstra * basis_on(frequencies, self.mean_cepstra.ncols()).transpose()
    }
}

pub fn example1_truth(p: usize) -> TrueEffects {
    let mut beta = vec![vec![0.0; 3]; p];
    if p > 0 {
        beta[0][2] = SQRT_2;
    }
    TrueEffects {
        alpha: vec![0.0, SQRT_2, 0.0],
        beta,
    }
}

pub fn example2_truth() -> TrueEffects {
    let mut beta = vec![vec![0.0; 5]; 10];
    beta[0][2] = SQRT_2;
    beta[0][3] = SQRT_2;
    beta[1][4] = SQRT_2;
    TrueEffects {
        alpha: vec![0.0, SQRT_2, 0.0, 0.0, 0.0],
        beta,
    }
}

/// Cepstral standard deviations of `eps_1 + eps_2 cos(2 pi w) + eps_3 cos(4 pi w)`.
pub fn design_noise(noise_sd: f64) -> Vec<f64> {
    vec![noise_sd, noise_sd / SQRT_2, noise_sd / SQRT_2]
}

/// Simulates `N` series of length `T` whose log-spectra have cepstra
/// `A + B^T x_j + e_j`, `e_jk ~ N(0, noise_sd[k]^2)`.
pub fn generate_from_truth<R: Rng + ?Sized>(
    truth: &TrueEffects,
    covariates: DMatrix<f64>,
    noise_sd: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<SimulatedPanel> {
    truth.validate(covariates.ncols())?;
    if noise_sd.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::config("noise standard deviations must be finite and nonnegative"));
    }
    let n = covariates.nrows();
    let k = truth.k().max(noise_sd.len());
    let mut mean = DMatrix::zeros(n, k);
    mean.columns_mut(0, truth.k()).copy_from(&truth.mean_cepstra(&covariates));
    let mut replicate = mean.clone();
    for j in 0..n {
        for (i, s) in noise_sd.iter().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            replicate[(j, i)] += s * e;
        }
    }
    let synth = SpectralSynthesizer::new(t);
    let basis = basis_on(&synth.required_frequencies(), k);
    let mut series = DMatrix::zeros(n, t);
    for j in 0..n {
        let g = &basis * replicate.row(j).transpose();
        let z = synth.simulate_values(g.as_slice(), rng)?;
        series.set_row(j, &nalgebra::RowDVector::from_vec(z));
    }
    let panel = TimeSeriesPanel::with_default_names(series, covariates)?;
    Ok(SimulatedPanel {
        panel,
        truth: truth.clone(),
        replicate_cepstra: replicate,
        mean_cepstra: mean,
    })
}

/// Example 1 covariates: `X_1 ~ U[0, 1]`, the rest standard normal.
pub fn example1_covariates<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, p);
    for j in 0..n {
        x[(j, 0)] = rng.random::<f64>();
        for c in 1..p {
            x[(j, c)] = StandardNormal.sample(rng);
        }
    }
    x
}

/// Rows from `N(0, S)` with `S_pq = tau^|p - q|`.
pub fn ar_covariates<R: Rng + ?Sized>(n: usize, p: usize, tau: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config(format!("tau must lie in [0, 1), got {tau}")));
    }
    let sigma = DMatrix::from_fn(p, p, |a, b| tau.powi(a.abs_diff(b) as i32));
    let l = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariate covariance is not positive definite".into()))?
        .l();
    let z: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    Ok(z * l.transpose())
}

pub fn generate_example1<R: Rng + ?Sized>(n: usize, t: usize, p: usize, rng: &mut R) -> Result<SimulatedPanel> {
    generate_example1_with_noise(n, t, p, DEFAULT_NOISE_SD, rng)
}

pub fn generate_example1_with_noise<R: Rng + ?Sized>(
    n: usize,
    t: usize,
    p: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<SimulatedPanel> {
    if p == 0 {
        return Err(Error::config("Example 1 needs at least one covariate"));
    }
    let x = example1_covariates(n, p, rng);
    generate_from_truth(&example1_truth(p), x, &design_noise(noise_sd), t, rng)
}

pub fn generate_example2<R: Rng + ?Sized>(n: usize, t: usize, tau: f64, rng: &mut R) -> Result<SimulatedPanel> {
    generate_example2_with_noise(n, t, tau, DEFAULT_NOISE_SD, rng)
}

pub fn generate_example2_with_noise<R: Rng + ?Sized>(
    n: usize,
    t: usize,
    tau: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Result<SimulatedPanel> {
    let x = ar_covariates(n, 10, tau, rng)?;
    generate_from_truth(&example2_truth(), x, &design_noise(noise_sd), t, rng)
}

/// Mean squared difference between two curves on a common grid.
pub fn ase_curves(estimated: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(estimated.len(), truth.len());
    neumaier_sum(estimated.iter().zip(truth).map(|(a, b)| (a - b).powi(2))) / estimated.len() as f64
}

/// ASE of an estimated effect curve (values on the Fourier grid) against a
/// true function.
pub fn ase_effect(estimated: &[f64], truth: impl Fn(f64) -> f64, grid: &FrequencyGrid) -> f64 {
    let true_values: Vec<f64> = grid.frequencies().iter().map(|&w| truth(w)).collect();
    ase_curves(estimated, &true_values)
}

/// ASE of fitted against true log-spectra, both `N x L` on the Fourier grid.
pub fn ase_log_spectra(fitted: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    assert_eq!(fitted.shape(), truth.shape());
    ase_curves(fitted.as_slice(), truth.as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub example: Example,
    pub n: usize,
    pub t: usize,
    /// Number of covariates; fixed at 10 for Example 2.
    pub p: usize,
    pub tau: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    pub noise_sd: f64,
    pub k: KChoice,
    pub whittle: FitConfig,
    pub standardize: bool,
}

impl ExperimentSpec {
    pub fn example1(n: usize, t: usize, p: usize) -> Self {
        ExperimentSpec {
            example: Example::One,
            n,
            t,
            p,
            tau: 0.0,
            repetitions: 100,
            seed: 0,
            estimators: vec![EstimatorSpec::Ols],
            noise_sd: DEFAULT_NOISE_SD,
            k: KChoice::Auto,
            whittle: FitConfig::default(),
            standardize: false,
        }
    }

    pub fn example2(n: usize, t: usize, tau: f64) -> Self {
        ExperimentSpec {
            example: Example::Two,
            p: 10,
            tau,
            ..ExperimentSpec::example1(n, t, 10)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("at least one repetition is required"));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("no estimators requested"));
        }
        if self.example == Example::Two && self.p != 10 {
            return Err(Error::config("Example 2 has P = 10"));
        }
        if self.p == 0 {
            return Err(Error::config("at least one covariate is required"));
        }
        if self.n <= self.p + 1 {
            return Err(Error::config(format!("N = {} is too small for P = {}", self.n, self.p)));
        }
        if self.t < 8 {
            return Err(Error::config(format!("T must be at least 8, got {}", self.t)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimulatedPanel> {
        match self.example {
            Example::One => generate_example1_with_noise(self.n, self.t, self.p, self.noise_sd, rng),
            Example::Two => generate_example2_with_noise(self.n, self.t, self.tau, self.noise_sd, rng),
        }
    }
}

/// ASEs of one estimator on one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAse {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub log_spectra: f64,
    pub k: usize,
    pub seconds: f64,
}

/// Fits every requested estimator to one simulated panel. The Whittle stage is
/// shared; reported times include it.
pub fn evaluate_panel(sim: &SimulatedPanel, spec: &ExperimentSpec) -> Result<Vec<Result<RunAse>>> {
    let grid = sim.panel.grid();
    let freqs = grid.frequencies();
    let start = Instant::now();
    let whittle = fit_panel(&sim.panel, &spec.whittle, spec.k)?;
    let whittle_seconds = start.elapsed().as_secs_f64();
    let true_log = sim.mean_log_spectra(freqs);
    let x = sim.panel.covariates();
    Ok(spec
        .estimators
        .iter()
        .map(|&est| {
            let start = Instant::now();
            let config = PipelineConfig {
                whittle: spec.whittle.clone(),
                k: KChoice::Fixed(whittle.k),
                estimator: est,
                standardize: spec.standardize,
            };
            let fit = finish_two_stage(whittle.clone(), x, &config)?;
            let seconds = whittle_seconds + start.elapsed().as_secs_f64();
            let effects = fit.effects_at(freqs);
            // effects are on the standardized scale when requested
            let scales = fit.covariate_scales.clone();
            let beta = (0..sim.truth.p())
                .map(|p| {
                    let s = scales.as_ref().map_or(1.0, |s| s[p]);
                    let est: Vec<f64> = effects.beta.row(p).iter().map(|v| v / s).collect();
                    ase_effect(&est, |w| sim.truth.beta_at(p, w), &grid)
                })
                .collect();
            Ok(RunAse {
                alpha: ase_effect(&effects.alpha, |w| sim.truth.alpha_at(w), &grid),
                beta,
                log_spectra: ase_log_spectra(&fit.fitted_log_spectra(x, freqs), &true_log),
                k: whittle.k,
                seconds,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len() as f64;
        let mean = neumaier_sum(values.iter().copied()) / n;
        let sd = if values.len() > 1 {
            (neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub alpha: MeanSd,
    pub beta: Vec<MeanSd>,
    pub log_spectra: MeanSd,
    pub successes: usize,
    pub failures: usize,
    /// Mean wall-clock seconds per fit; excluded from the tables.
    #[serde(skip)]
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AseSummary {
    pub repetitions: usize,
    pub estimators: Vec<EstimatorSummary>,
    /// Selected `K` per repetition (0 where the Whittle stage failed).
    pub selected_k: Vec<usize>,
}

impl AseSummary {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == name)
    }

    fn targets(&self) -> Vec<String> {
        let p = self.estimators.first().map_or(0, |e| e.beta.len());
        std::iter::once("alpha".to_string())
            .chain((1..=p).map(|i| format!("beta{i}")))
            .chain(std::iter::once("log_spectra".to_string()))
            .collect()
    }

    fn cells(e: &EstimatorSummary) -> Vec<&MeanSd> {
        std::iter::once(&e.alpha)
            .chain(e.beta.iter())
            .chain(std::iter::once(&e.log_spectra))
            .collect()
    }

    /// Long-format CSV: `estimator,target,mean,sd,successes,failures`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,target,mean,sd,successes,failures\n");
        let targets = self.targets();
        for e in &self.estimators {
            for (t, c) in targets.iter().zip(Self::cells(e)) {
                let _ = writeln!(out, "{},{},{},{},{},{}", e.estimator, t, c.mean, c.sd, e.successes, e.failures);
            }
        }
        out
    }

    /// Table of `mean (sd)` in units of 1e-2, one row per estimator.
    pub fn to_markdown(&self) -> String {
        let targets = self.targets();
        let mut out = String::from("| estimator |");
        for t in &targets {
            let _ = write!(out, " {t} |");
        }
        out.push_str("\n|---|");
        for _ in &targets {
            out.push_str("---|");
        }
        out.push('\n');
        for e in &self.estimators {
            let _ = write!(out, "| {} |", e.estimator);
            for c in Self::cells(e) {
                let _ = write!(out, " {:.2} ({:.2}) |", 100.0 * c.mean, 100.0 * c.sd);
            }
            out.push('\n');
        }
        out.push_str("\nASE x 10^-2, mean (sd) over successful repetitions.\n");
        out
    }
}

/// Runs `spec.repetitions` independent simulations in parallel. Repetition
/// `r` draws from sub-stream `r` of `spec.seed`.
pub fn run_benchmark(spec: &ExperimentSpec) -> Result<AseSummary> {
    spec.validate()?;
    let runs: Vec<Result<Vec<Result<RunAse>>>> = (0..spec.repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(spec.seed, r as u64);
            let sim = spec.generate(&mut rng)?;
            evaluate_panel(&sim, spec)
        })
        .collect();

    let selected_k = runs
        .iter()
        .map(|r| match r {
            Ok(v) => v.iter().find_map(|e| e.as_ref().ok().map(|a| a.k)).unwrap_or(0),
            Err(_) => 0,
        })
        .collect();

    let limit = (spec.repetitions as f64 * 0.1).floor() as usize;
    let mut estimators = Vec::with_capacity(spec.estimators.len());
    for (i, est) in spec.estimators.iter().enumerate() {
        let ok: Vec<&RunAse> = runs
            .iter()
            .filter_map(|r| r.as_ref().ok().and_then(|v| v[i].as_ref().ok()))
            .collect();
        let failures = spec.repetitions - ok.len();
        if failures > limit {
            return Err(Error::FailureRate {
                what: "benchmark repetitions",
                failed: failures,
                attempted: spec.repetitions,
            });
        }
        let col = |f: &dyn Fn(&RunAse) -> f64| MeanSd::of(&ok.iter().map(|a| f(a)).collect::<Vec<_>>());
        estimators.push(EstimatorSummary {
            estimator: est.name().to_string(),
            alpha: col(&|a| a.alpha),
            beta: (0..spec.p).map(|p| col(&|a| a.beta[p])).collect(),
            log_spectra: col(&|a| a.log_spectra),
            successes: ok.len(),
            failures,
            mean_seconds: col(&|a| a.seconds).mean,
        });
    }
    Ok(AseSummary {
        repetitions: spec.repetitions,
        estimators,
        selected_k,
    })
}
