//! Feasible curvilinear search on the Stiefel manifold `{X : X^T X = I}`.
//!
//! Each step moves along the Cayley curve
//! `Y(tau) = (I + tau/2 W)^-1 (I - tau/2 W) X` with `W = G X^T - X G^T`,
//! which stays on the manifold for every `tau`. Step sizes come from
//! alternating Barzilai-Borwein rules under a non-monotone Armijo condition.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct StiefelOptions {
    pub max_iterations: usize,
    /// Stop when the Frobenius norm of the Riemannian gradient falls below this.
    pub gradient_tol: f64,
    /// Stop when both relative objective change and step size stall below these.
    pub objective_tol: f64,
    pub step_tol: f64,
    /// Gradient norm still accepted as converged when the iteration budget runs out.
    pub loose_gradient_tol: f64,
}

impl Default for StiefelOptions {
    fn default() -> Self {
        StiefelOptions {
            max_iterations: 2000,
            gradient_tol: 1e-9,
            objective_tol: 1e-13,
            step_tol: 1e-12,
            loose_gradient_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StiefelResult {
    pub point: DMatrix<f64>,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// Minimizes `objective`, which returns the value and Euclidean gradient at a
/// point or `None` where the objective is undefined.
pub fn minimize<F>(objective: F, start: DMatrix<f64>, options: &StiefelOptions) -> Option<StiefelResult>
where
    F: Fn(&DMatrix<f64>) -> Option<(f64, DMatrix<f64>)>,
{
    const RHO: f64 = 1e-4;
    const SHRINK: f64 = 0.1;
    const ETA: f64 = 0.85;

    let p = start.nrows();
    let mut x = start;
    let (mut f, g0) = objective(&x)?;
    let mut w = &g0 * x.transpose() - &x * g0.transpose();
    let mut rgrad = &w * &x;
    let mut gnorm = rgrad.norm();
    let mut trace = vec![f];
    let mut tau = 1e-3;
    let mut q_weight = 1.0;
    let mut reference = f;
    let mut stall = 0usize;

    for iteration in 1..=options.max_iterations {
        if gnorm < options.gradient_tol {
            return Some(StiefelResult {
                point: x,
                value: f,
                iterations: iteration - 1,
                gradient_norm: gnorm,
                converged: true,
                trace,
            });
        }
        let slope = -0.5 * w.norm_squared();
        let mut accepted = None;
        for _ in 0..40 {
            if let Some(y) = cayley_step(&x, &w, tau) {
                if let Some((fy, gy)) = objective(&y) {
                    if fy.is_finite() && fy <= reference + RHO * tau * slope {
                        accepted = Some((y, fy, gy));
                        break;
                    }
                }
            }
            tau *= SHRINK;
        }
        let Some((y, fy, gy)) = accepted else {
            // line search exhausted: no further decrease is representable
            let converged = gnorm < options.loose_gradient_tol;
            return Some(StiefelResult {
                point: x,
                value: f,
                iterations: iteration,
                gradient_norm: gnorm,
                converged,
                trace,
            });
        };

        let s = &y - &x;
        let w_new = &gy * y.transpose() - &y * gy.transpose();
        let rgrad_new = &w_new * &y;
        let dg = &rgrad_new - &rgrad;
        let sy = s.dot(&dg).abs();
        let rel_change = (f - fy).abs() / (f.abs() + 1.0);
        let step_size = s.norm() / (p as f64).sqrt();

        x = y;
        f = fy;
        w = w_new;
        rgrad = rgrad_new;
        gnorm = rgrad.norm();
        trace.push(f);

        tau = if sy > 0.0 {
            if iteration % 2 == 0 {
                s.norm_squared() / sy
            } else {
                sy / dg.norm_squared().max(f64::MIN_POSITIVE)
            }
        } else {
            tau * 2.0
        };
        tau = tau.clamp(1e-20, 1e20);

        let q_prev = q_weight;
        q_weight = ETA * q_weight + 1.0;
        reference = (ETA * q_prev * reference + f) / q_weight;

        if rel_change < options.objective_tol && step_size < options.step_tol {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }
    let converged = gnorm < options.loose_gradient_tol;
    Some(StiefelResult {
        point: x,
        value: f,
        iterations: trace.len() - 1,
        gradient_norm: gnorm,
        converged,
        trace,
    })
}

fn cayley_step(x: &DMatrix<f64>, w: &DMatrix<f64>, tau: f64) -> Option<DMatrix<f64>> {
    let p = x.nrows();
    let eye = DMatrix::<f64>::identity(p, p);
    let lhs = &eye + w * (0.5 * tau);
    let rhs = (&eye - w * (0.5 * tau)) * x;
    lhs.lu().solve(&rhs)
}
