//! Predictor envelope estimator.
//!
//! The envelope basis `G` (`P x r`, `G'G = I`) minimizes
//! `log|G' S_{X|Y} G| + log|G' S_X^-1 G|`, and the coefficients are
//! `B = G (G' S_X G)^-1 G' S_XY`, which reduces to least squares at `r = P`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::stiefel::{minimize, StiefelOptions};
use super::{ridge_for, Centered, Estimator, LinearModelFit};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_spd, orthonormalize, sorted_symmetric_eigen, symmetrize};
use crate::whittle::CepstralMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeOptions {
    pub random_starts: usize,
    pub seed: u64,
    pub manifold: StiefelOptions,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        EnvelopeOptions {
            random_starts: 5,
            seed: 0x0e57_e10e,
            manifold: StiefelOptions::default(),
        }
    }
}

/// Objective and Euclidean gradient at a semi-orthogonal `gamma`.
pub fn envelope_objective(
    gamma: &DMatrix<f64>,
    s_x_given_y: &DMatrix<f64>,
    s_x_inv: &DMatrix<f64>,
) -> Option<(f64, DMatrix<f64>)> {
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(gamma.nrows(), gamma.ncols());
    for m in [s_x_given_y, s_x_inv] {
        let mg = m * gamma;
        let small = symmetrize(&gamma.tr_mul(&mg));
        let ld = log_det_spd(&small)?;
        let inv = small.cholesky()?.inverse();
        value += ld;
        grad += mg * inv * 2.0;
    }
    Some((value, grad))
}

pub fn fit_envelope(yhat: &CepstralMatrix, x: &DMatrix<f64>, r: usize) -> Result<LinearModelFit> {
    fit_envelope_with(yhat, x, r, &EnvelopeOptions::default())
}

pub fn fit_envelope_with(
    yhat: &CepstralMatrix,
    x: &DMatrix<f64>,
    r: usize,
    options: &EnvelopeOptions,
) -> Result<LinearModelFit> {
    let c = Centered::new(yhat, x)?;
    let p = x.ncols();
    if r == 0 || r > p {
        return Err(Error::config(format!(
            "envelope dimension must lie in 1..={p}, got {r}"
        )));
    }
    let sx = c.sxx();
    let sxy = c.sxy();
    let syy = c.syy();
    let k = syy.nrows();
    let sy_reg = &syy + DMatrix::identity(k, k) * ridge_for(&syy);
    let sy_chol = cholesky(&sy_reg, "regularized response covariance")?;
    let s_x_given_y = symmetrize(&(&sx - &sxy * sy_chol.solve(&sxy.transpose())));
    let sx_chol = cholesky(&sx, "covariate covariance")?;
    let sx_inv = symmetrize(&sx_chol.inverse());

    let (gamma, objective) = if r == p {
        let gamma = DMatrix::identity(p, p);
        let value = envelope_objective(&gamma, &s_x_given_y, &sx_inv)
            .map(|(v, _)| v)
            .ok_or_else(|| Error::Numerical("envelope objective undefined at full dimension".into()))?;
        (gamma, value)
    } else {
        optimize_basis(&c, &sx, &sxy, &s_x_given_y, &sx_inv, r, options)?
    };

    let small = symmetrize(&gamma.tr_mul(&(&sx * &gamma)));
    let small_chol = cholesky(&small, "projected covariate covariance")?;
    let b = &gamma * small_chol.solve(&gamma.tr_mul(&sxy));
    Ok(c.finish(b, Estimator::Envelope { dim: r }, Some(gamma), Some(objective)))
}

fn optimize_basis(
    c: &Centered,
    sx: &DMatrix<f64>,
    sxy: &DMatrix<f64>,
    s_x_given_y: &DMatrix<f64>,
    sx_inv: &DMatrix<f64>,
    r: usize,
    options: &EnvelopeOptions,
) -> Result<(DMatrix<f64>, f64)> {
    let p = sx.nrows();
    let objective = |g: &DMatrix<f64>| envelope_objective(g, s_x_given_y, sx_inv);

    let mut starts = Vec::new();
    // leading directions of S_XY S_YX
    let (_, v) = sorted_symmetric_eigen(&(sxy * sxy.transpose()))?;
    starts.push(v.columns(0, r).into_owned());
    // leading directions of B_ols B_ols'
    if let Ok(b_ols) = c.ols_coefficients() {
        let (_, v) = sorted_symmetric_eigen(&(&b_ols * b_ols.transpose()))?;
        starts.push(v.columns(0, r).into_owned());
    }
    starts.push(greedy_eigen_start(sx, r, &objective)?);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.random_starts {
        let raw = DMatrix::from_fn(p, r, |_, _| StandardNormal.sample(&mut rng));
        starts.push(orthonormalize(&raw));
    }

    let mut best: Option<(DMatrix<f64>, f64)> = None;
    let mut trace_tail = Vec::new();
    for start in starts {
        let Some(res) = minimize(objective, start, &options.manifold) else {
            continue;
        };
        if !res.converged {
            trace_tail = res.trace.iter().rev().take(10).rev().copied().collect();
            continue;
        }
        if best.as_ref().is_none_or(|(_, v)| res.value < *v) {
            best = Some((res.point, res.value));
        }
    }
    match best {
        Some((gamma, value)) => Ok((orthonormalize(&gamma), value)),
        None => Err(Error::ManifoldNonConvergence { trace: trace_tail }),
    }
}

/// Picks `r` eigenvectors of `S_X` one at a time, each minimizing the objective
/// together with those already chosen.
fn greedy_eigen_start<F>(sx: &DMatrix<f64>, r: usize, objective: &F) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Option<(f64, DMatrix<f64>)>,
{
    let (_, vectors) = sorted_symmetric_eigen(sx)?;
    let p = sx.nrows();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..r {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..p).filter(|i| !chosen.contains(i)) {
            let cols: Vec<usize> = chosen.iter().copied().chain(std::iter::once(cand)).collect();
            let g = vectors.select_columns(cols.iter());
            if let Some((v, _)) = objective(&g) {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((cand, v));
                }
            }
        }
        let (idx, _) = best.ok_or_else(|| Error::Numerical("envelope objective undefined on all eigenvector starts".into()))?;
        chosen.push(idx);
    }
    Ok(vectors.select_columns(chosen.iter()))
}
