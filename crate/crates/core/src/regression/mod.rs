//! Second stage: the multivariate linear model `Y_j = A + B^T X_j + e_j`
//! linking fitted cepstra to covariates, and the effect functions
//! `alpha(w) = phi(w)^T A`, `beta_p(w) = phi(w)^T B_p` it induces.

mod envelope;
pub mod stiefel;

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    center_columns, cholesky, cross_cov, dependent_columns, log_det_spd, sorted_symmetric_eigen,
};
use crate::spectral::{basis_on, LogSpectrum};
use crate::whittle::CepstralMatrix;

pub use envelope::{envelope_objective, fit_envelope, fit_envelope_with, EnvelopeOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Estimator {
    Ols,
    Rrr { rank: usize },
    Envelope { dim: usize },
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Ols => write!(f, "ols"),
            Estimator::Rrr { rank } => write!(f, "rrr({rank})"),
            Estimator::Envelope { dim } => write!(f, "envelope({dim})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelFit {
    /// `A`, length `K`: the mean cepstrum at `X = 0`.
    pub intercept: DVector<f64>,
    /// `B`, `P x K`; row `p` holds the cepstrum of `beta_p`.
    pub coefficients: DMatrix<f64>,
    pub residuals: DMatrix<f64>,
    pub residual_covariance: DMatrix<f64>,
    pub estimator: Estimator,
    pub covariate_means: DVector<f64>,
    /// Semi-orthogonal envelope basis for envelope fits.
    pub envelope_basis: Option<DMatrix<f64>>,
    /// Minimized envelope objective for envelope fits.
    pub envelope_objective: Option<f64>,
}

impl LinearModelFit {
    pub fn k(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn p(&self) -> usize {
        self.coefficients.nrows()
    }

    /// `A + B^T x` for each row `x` of `covariates`.
    pub fn fitted_cepstra(&self, covariates: &DMatrix<f64>) -> DMatrix<f64> {
        let mut fitted = covariates * &self.coefficients;
        for mut row in fitted.row_iter_mut() {
            row += self.intercept.transpose();
        }
        fitted
    }
}

/// Centered design shared by all estimators.
pub(crate) struct Centered {
    pub n: usize,
    pub x_means: DVector<f64>,
    pub y_means: DVector<f64>,
    pub xc: DMatrix<f64>,
    pub yc: DMatrix<f64>,
}

impl Centered {
    pub fn new(yhat: &CepstralMatrix, x: &DMatrix<f64>) -> Result<Self> {
        let y = yhat.values();
        let (n, p) = x.shape();
        if y.nrows() != n {
            return Err(Error::data(format!(
                "{} cepstral rows but {n} covariate rows",
                y.nrows()
            )));
        }
        if p == 0 {
            return Err(Error::data("no covariates"));
        }
        if n <= p {
            return Err(Error::data(format!(
                "need more replicates than covariates (N = {n}, P = {p})"
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite value in regression inputs"));
        }
        let (x_means, xc) = center_columns(x);
        let (y_means, yc) = center_columns(y);
        let dependent = dependent_columns(&xc, 1e-10);
        if !dependent.is_empty() {
            return Err(Error::Collinearity { columns: dependent });
        }
        Ok(Centered {
            n,
            x_means,
            y_means,
            xc,
            yc,
        })
    }

    pub fn sxx(&self) -> DMatrix<f64> {
        cross_cov(&self.xc, &self.xc)
    }

    pub fn sxy(&self) -> DMatrix<f64> {
        cross_cov(&self.xc, &self.yc)
    }

    pub fn syy(&self) -> DMatrix<f64> {
        cross_cov(&self.yc, &self.yc)
    }

    pub fn ols_coefficients(&self) -> Result<DMatrix<f64>> {
        let gram = self.xc.tr_mul(&self.xc);
        let chol = cholesky(&gram, "covariate Gram matrix")?;
        Ok(chol.solve(&self.xc.tr_mul(&self.yc)))
    }

    /// Assembles intercept, residuals and residual covariance around `b`.
    pub fn finish(
        &self,
        coefficients: DMatrix<f64>,
        estimator: Estimator,
        envelope_basis: Option<DMatrix<f64>>,
        envelope_objective: Option<f64>,
    ) -> LinearModelFit {
        let intercept = &self.y_means - coefficients.tr_mul(&self.x_means);
        let residuals = &self.yc - &self.xc * &coefficients;
        let p = self.xc.ncols();
        let dof = self.n.saturating_sub(p + 1).max(1) as f64;
        let residual_covariance = crate::linalg::symmetrize(&(residuals.tr_mul(&residuals) / dof));
        LinearModelFit {
            intercept,
            coefficients,
            residuals,
            residual_covariance,
            estimator,
            covariate_means: self.x_means.clone(),
            envelope_basis,
            envelope_objective,
        }
    }
}

/// Least squares with centered covariates; `B = (Xc'Xc)^-1 Xc'Yc`.
pub fn fit_ols(yhat: &CepstralMatrix, x: &DMatrix<f64>) -> Result<LinearModelFit> {
    let c = Centered::new(yhat, x)?;
    let b = c.ols_coefficients()?;
    Ok(c.finish(b, Estimator::Ols, None, None))
}

/// Reduced-rank regression: `B_ols` projected onto the leading `m`
/// eigenvectors of `S_xy' S_xx^-1 S_xy`.
pub fn fit_rrr(yhat: &CepstralMatrix, x: &DMatrix<f64>, m: usize) -> Result<LinearModelFit> {
    let c = Centered::new(yhat, x)?;
    let (p, k) = (x.ncols(), yhat.k());
    if m == 0 || m > p.min(k) {
        return Err(Error::config(format!(
            "reduced rank must lie in 1..={} (P = {p}, K = {k}), got {m}",
            p.min(k)
        )));
    }
    let b_ols = c.ols_coefficients()?;
    let sxy = c.sxy();
    let target = sxy.tr_mul(&b_ols);
    let (values, vectors) = sorted_symmetric_eigen(&target).map_err(|e| {
        Error::Numerical(format!("{e}; S_xx condition estimate {:.3e}", condition(&c.sxx())))
    })?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalues in reduced-rank fit".into()));
    }
    let u = vectors.columns(0, m);
    let projector = u * u.transpose();
    let b = b_ols * projector;
    Ok(c.finish(b, Estimator::Rrr { rank: m }, None, None))
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimensionKind {
    Rrr,
    Envelope,
}

#[derive(Debug, Clone)]
pub struct DimensionSelection {
    pub selected: usize,
    pub fit: LinearModelFit,
    /// `(dimension, criterion)`; `None` where the candidate fit failed.
    pub trace: Vec<(usize, Option<f64>)>,
}

/// Chooses the rank (RRR) or envelope dimension by
/// `-2 loglik + log(N) * (free parameters)` under a Gaussian working model.
pub fn select_dimension(
    yhat: &CepstralMatrix,
    x: &DMatrix<f64>,
    kind: DimensionKind,
    candidates: RangeInclusive<usize>,
) -> Result<DimensionSelection> {
    if candidates.is_empty() {
        return Err(Error::config("empty dimension candidate range"));
    }
    let c = Centered::new(yhat, x)?;
    let n = c.n as f64;
    let (p, k) = (x.ncols(), yhat.k());
    let syy = c.syy();
    let ridge = ridge_for(&syy);

    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, LinearModelFit)> = None;
    let mut last_error = None;
    for d in candidates {
        let fitted = match kind {
            DimensionKind::Rrr => fit_rrr(yhat, x, d),
            DimensionKind::Envelope => fit_envelope(yhat, x, d),
        };
        let fit = match fitted {
            Ok(f) => f,
            Err(e) => {
                trace.push((d, None));
                last_error = Some(e);
                continue;
            }
        };
        let criterion = match kind {
            DimensionKind::Rrr => {
                let sigma = fit.residuals.tr_mul(&fit.residuals) / n
                    + DMatrix::identity(k, k) * ridge;
                let ld = log_det_spd(&sigma).ok_or_else(|| {
                    Error::Numerical("residual covariance not positive definite".into())
                });
                ld.map(|ld| n * ld + n.ln() * (d * (p + k - d)) as f64)
            }
            DimensionKind::Envelope => {
                let objective = fit.envelope_objective.unwrap_or(f64::NAN);
                let sy = &syy + DMatrix::identity(k, k) * ridge;
                match (log_det_spd(&sy), log_det_spd(&c.sxx())) {
                    (Some(ly), Some(lx)) => Ok(n * (ly + lx + objective) + n.ln() * (d * k) as f64),
                    _ => Err(Error::Numerical("sample covariance not positive definite".into())),
                }
            }
        };
        match criterion {
            Ok(value) if value.is_finite() => {
                trace.push((d, Some(value)));
                if best.as_ref().is_none_or(|(_, b, _)| value < *b) {
                    best = Some((d, value, fit));
                }
            }
            Ok(_) => trace.push((d, None)),
            Err(e) => {
                trace.push((d, None));
                last_error = Some(e);
            }
        }
    }
    match best {
        Some((selected, _, fit)) => Ok(DimensionSelection {
            selected,
            fit,
            trace,
        }),
        None => Err(last_error
            .unwrap_or_else(|| Error::Numerical("no dimension candidate produced a criterion".into()))),
    }
}

/// Ridge added to `S_Y` before inversion: `1e-8 * trace(S_Y) / K`.
pub(crate) fn ridge_for(syy: &DMatrix<f64>) -> f64 {
    let k = syy.nrows().max(1) as f64;
    let scale = syy.trace() / k;
    if scale > 0.0 {
        1e-8 * scale
    } else {
        1e-300
    }
}

/// `alpha` and `beta_p` evaluated on a frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectFunctions {
    pub frequencies: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `P x M`.
    pub beta: DMatrix<f64>,
}

/// `M` equally spaced frequencies from 0 to 1/2 inclusive.
pub fn uniform_half_grid(m: usize) -> Vec<f64> {
    (0..m).map(|i| 0.5 * i as f64 / (m - 1) as f64).collect()
}

pub fn effect_functions(fit: &LinearModelFit, m: usize) -> Result<EffectFunctions> {
    if m < 2 {
        return Err(Error::config(format!("effect grid needs at least 2 points, got {m}")));
    }
    Ok(effect_functions_at(fit, &uniform_half_grid(m)))
}

pub fn effect_functions_at(fit: &LinearModelFit, frequencies: &[f64]) -> EffectFunctions {
    let phi = basis_on(frequencies, fit.k());
    let alpha = (&phi * &fit.intercept).as_slice().to_vec();
    let beta = &fit.coefficients * phi.transpose();
    EffectFunctions {
        frequencies: frequencies.to_vec(),
        alpha,
        beta,
    }
}

/// Population-mean log-spectrum `alpha(w) + x^T beta(w)` at covariate value `x`.
pub fn predict_log_spectrum(fit: &LinearModelFit, x: &[f64], m: usize) -> Result<LogSpectrum> {
    if x.len() != fit.p() {
        return Err(Error::data(format!(
            "covariate vector has length {}, model has {}",
            x.len(),
            fit.p()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite covariate value"));
    }
    let effects = effect_functions(fit, m)?;
    let xv = DVector::from_column_slice(x);
    let shift = effects.beta.tr_mul(&xv);
    let values = effects
        .alpha
        .iter()
        .zip(shift.iter())
        .map(|(a, s)| a + s)
        .collect();
    Ok(LogSpectrum {
        frequencies: effects.frequencies,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn noisy_data(seed: u64, n: usize, p: usize, k: usize, noise: f64) -> (CepstralMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_matrix(&mut rng, n, p);
        let b = normal_matrix(&mut rng, p, k);
        let e = normal_matrix(&mut rng, n, k) * noise;
        let a = normal_matrix(&mut rng, 1, k);
        let mut y = &x * &b + e;
        for mut row in y.row_iter_mut() {
            row += &a;
        }
        (CepstralMatrix(y), x)
    }

    #[test]
    fn ols_recovers_noiseless_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, k) = (3, 4);
        let n = p + 5;
        let x = normal_matrix(&mut rng, n, p);
        let b = normal_matrix(&mut rng, p, k);
        let a = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let mut y = &x * &b;
        for mut row in y.row_iter_mut() {
            row += a.transpose();
        }
        let fit = fit_ols(&CepstralMatrix(y), &x).unwrap();
        assert_abs_diff_eq!(fit.coefficients, b, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.intercept, a, epsilon = 1e-8);
    }

    #[test]
    fn ols_with_orthonormal_centered_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = normal_matrix(&mut rng, 12, 3);
        let (_, centered) = center_columns(&raw);
        let q = crate::linalg::orthonormalize(&centered);
        let x = q.map(|v| v + 3.0);
        let y = normal_matrix(&mut rng, 12, 5);
        let fit = fit_ols(&CepstralMatrix(y.clone()), &x).unwrap();
        let (_, yc) = center_columns(&y);
        assert_abs_diff_eq!(fit.coefficients, q.tr_mul(&yc), epsilon = 1e-10);
    }

    #[test]
    fn residual_columns_have_zero_mean_and_covariance_is_psd() {
        let (y, x) = noisy_data(3, 40, 3, 5, 0.7);
        for fit in [fit_ols(&y, &x).unwrap(), fit_rrr(&y, &x, 2).unwrap(), fit_envelope(&y, &x, 2).unwrap()] {
            for col in fit.residuals.column_iter() {
                assert!(col.mean().abs() < 1e-8);
            }
            let (vals, _) = sorted_symmetric_eigen(&fit.residual_covariance).unwrap();
            assert!(vals.iter().all(|&v| v > -1e-12));
            assert_abs_diff_eq!(fit.residual_covariance, fit.residual_covariance.transpose());
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = normal_matrix(&mut rng, 20, 3);
        let combo = x.column(0) * 2.0 - x.column(1);
        x.set_column(2, &combo);
        let y = normal_matrix(&mut rng, 20, 2);
        match fit_ols(&CepstralMatrix(y), &x) {
            Err(Error::Collinearity { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_replicates_rejected() {
        let (y, x) = noisy_data(5, 3, 3, 2, 0.1);
        assert!(matches!(fit_ols(&y, &x), Err(Error::Data(_))));
    }

    #[test]
    fn rrr_full_rank_is_ols() {
        let (y, x) = noisy_data(6, 30, 3, 5, 0.5);
        let ols = fit_ols(&y, &x).unwrap();
        let rrr = fit_rrr(&y, &x, 3).unwrap();
        assert_abs_diff_eq!(rrr.coefficients, ols.coefficients, epsilon = 1e-8);
    }

    #[test]
    fn rrr_rank_and_span() {
        let (y, x) = noisy_data(7, 50, 4, 6, 1.0);
        let ols = fit_ols(&y, &x).unwrap();
        for m in 1..=4 {
            let rrr = fit_rrr(&y, &x, m).unwrap();
            assert!(numerical_rank(&rrr.coefficients, 1e-8) <= m);
            // columns of B_rrr lie in the column span of B_ols
            let q = crate::linalg::orthonormalize(&ols.coefficients);
            let resid = &rrr.coefficients - &q * q.tr_mul(&rrr.coefficients);
            assert!(resid.amax() < 1e-8);
        }
        assert!(fit_rrr(&y, &x, 0).is_err());
        assert!(fit_rrr(&y, &x, 5).is_err());
    }

    #[test]
    fn rrr_recovers_noiseless_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, p, k) = (500, 4, 6);
        let x = normal_matrix(&mut rng, n, p);
        let c = normal_matrix(&mut rng, p, 1);
        let d = normal_matrix(&mut rng, k, 1);
        let b = &c * d.transpose();
        let y = &x * &b;
        let fit = fit_rrr(&CepstralMatrix(y.clone()), &x, 1).unwrap();
        assert_abs_diff_eq!(fit.coefficients, b, epsilon = 1e-6);

        let sel = select_dimension(&CepstralMatrix(y), &x, DimensionKind::Rrr, 1..=4).unwrap();
        assert_eq!(sel.selected, 1);
    }

    #[test]
    fn single_candidate_is_returned() {
        let (y, x) = noisy_data(9, 30, 3, 4, 0.5);
        let sel = select_dimension(&y, &x, DimensionKind::Envelope, 2..=2).unwrap();
        assert_eq!(sel.selected, 2);
        assert_eq!(sel.trace.len(), 1);
    }

    #[test]
    fn ols_equals_columnwise_least_squares() {
        let (y, x) = noisy_data(10, 25, 3, 4, 0.3);
        let fit = fit_ols(&y, &x).unwrap();
        // independent route: SVD least squares with an explicit intercept column
        let n = x.nrows();
        let design = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let svd = design.svd(true, true);
        for kk in 0..4 {
            let sol = svd.solve(&y.values().column(kk).clone_owned(), 1e-14).unwrap();
            assert_abs_diff_eq!(sol[0], fit.intercept[kk], epsilon = 1e-10);
            for p in 0..3 {
                assert_abs_diff_eq!(sol[p + 1], fit.coefficients[(p, kk)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn effect_functions_basic() {
        let fit = LinearModelFit {
            intercept: DVector::from_vec(vec![0.0, 1.0, 0.0]),
            coefficients: DMatrix::zeros(2, 3),
            residuals: DMatrix::zeros(4, 3),
            residual_covariance: DMatrix::zeros(3, 3),
            estimator: Estimator::Ols,
            covariate_means: DVector::zeros(2),
            envelope_basis: None,
            envelope_objective: None,
        };
        let eff = effect_functions(&fit, 11).unwrap();
        assert_eq!(eff.frequencies.len(), 11);
        assert_abs_diff_eq!(eff.frequencies[10], 0.5);
        for (w, a) in eff.frequencies.iter().zip(&eff.alpha) {
            assert_abs_diff_eq!(*a, 2f64.sqrt() * (2.0 * std::f64::consts::PI * w).cos(), epsilon = 1e-14);
        }
        assert!(eff.beta.iter().all(|&v| v == 0.0));
        assert!(effect_functions(&fit, 1).is_err());

        let at_zero = predict_log_spectrum(&fit, &[0.0, 0.0], 11).unwrap();
        assert_eq!(at_zero.values, eff.alpha);
    }

    #[test]
    fn prediction_is_affine_in_covariates() {
        let (y, x) = noisy_data(11, 30, 2, 4, 0.5);
        let fit = fit_ols(&y, &x).unwrap();
        let m = 17;
        let alpha = predict_log_spectrum(&fit, &[0.0, 0.0], m).unwrap().values;
        let p1 = predict_log_spectrum(&fit, &[0.3, -1.0], m).unwrap().values;
        let p2 = predict_log_spectrum(&fit, &[1.2, 0.4], m).unwrap().values;
        let p12 = predict_log_spectrum(&fit, &[1.5, -0.6], m).unwrap().values;
        for i in 0..m {
            assert_abs_diff_eq!(p12[i], (p1[i] - alpha[i]) + (p2[i] - alpha[i]) + alpha[i], epsilon = 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn translation_invariance(seed in 0u64..1000, shift in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let (y, x) = noisy_data(seed, 30, 3, 4, 0.5);
            let s = DVector::from_vec(shift);
            let mut moved = x.clone();
            for mut row in moved.row_iter_mut() {
                row += s.transpose();
            }
            let fits = [
                (fit_ols(&y, &x).unwrap(), fit_ols(&y, &moved).unwrap()),
                (fit_rrr(&y, &x, 2).unwrap(), fit_rrr(&y, &moved, 2).unwrap()),
                (fit_envelope(&y, &x, 2).unwrap(), fit_envelope(&y, &moved, 2).unwrap()),
            ];
            for (a, b) in fits.iter() {
                proptest::prop_assert!((&a.coefficients - &b.coefficients).amax() < 1e-8);
                let expected_intercept = &a.intercept - a.coefficients.tr_mul(&s);
                proptest::prop_assert!((&b.intercept - expected_intercept).amax() < 1e-8);
            }
        }

        #[test]
        fn effects_are_linear_in_the_fit(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, seed in 0u64..100) {
            let (y1, x) = noisy_data(seed, 20, 2, 5, 0.5);
            let (y2, _) = noisy_data(seed + 1000, 20, 2, 5, 0.5);
            let f1 = fit_ols(&y1, &x).unwrap();
            let f2 = fit_ols(&y2, &x).unwrap();
            let mut combo = f1.clone();
            combo.intercept = &f1.intercept * c1 + &f2.intercept * c2;
            combo.coefficients = &f1.coefficients * c1 + &f2.coefficients * c2;
            let e1 = effect_functions(&f1, 33).unwrap();
            let e2 = effect_functions(&f2, 33).unwrap();
            let ec = effect_functions(&combo, 33).unwrap();
            for i in 0..33 {
                proptest::prop_assert!((ec.alpha[i] - (c1 * e1.alpha[i] + c2 * e2.alpha[i])).abs() < 1e-10);
            }
            proptest::prop_assert!((&ec.beta - (&e1.beta * c1 + &e2.beta * c2)).amax() < 1e-10);
        }
    }
}
