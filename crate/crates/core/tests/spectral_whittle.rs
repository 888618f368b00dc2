use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cepreg::spectral::{
    basis_matrix, cepstra_from_log_spectrum, periodogram_direct, periodogram_from_rows, CosineBasis, FrequencyGrid,
};
use cepreg::whittle::{fit_replicate, negative_whittle_nll, whittle_score, FitConfig};

fn centered(z: &[f64]) -> Vec<f64> {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    z.iter().map(|v| v - mean).collect()
}

proptest! {
    #[test]
    fn parseval_identity(z in prop::collection::vec(-10.0f64..10.0, 8..200)) {
        let t = z.len();
        let pgram = periodogram_from_rows(&DMatrix::from_row_slice(1, t, &z)).unwrap();
        let zc = centered(&z);
        let energy: f64 = zc.iter().map(|v| v * v).sum();
        let mut spectral = 2.0 * pgram.row(0).iter().sum::<f64>();
        if t % 2 == 0 {
            let alt: f64 = zc.iter().enumerate().map(|(i, v)| if i % 2 == 0 { *v } else { -v }).sum();
            spectral += alt * alt / t as f64;
        }
        prop_assert!((energy - spectral).abs() <= 1e-9 * (1.0 + energy));
    }

    #[test]
    fn fft_matches_direct_sum(z in prop::collection::vec(-5.0f64..5.0, 8..120)) {
        let t = z.len();
        let fast = periodogram_from_rows(&DMatrix::from_row_slice(1, t, &z)).unwrap().row(0);
        let slow = periodogram_direct(&centered(&z));
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn expected_periodogram_recovers_cepstrum(
        y in prop::collection::vec(-0.6f64..0.6, 1..6),
        t in 32usize..300,
    ) {
        // With I equal to the spectrum itself the score vanishes at the truth.
        let grid = FrequencyGrid::new(t);
        let row: Vec<f64> = grid.frequencies().iter().map(|&w| CosineBasis::combine(&y, w).exp()).collect();
        let fit = fit_replicate(&grid, &row, y.len(), &FitConfig::default()).unwrap();
        for (a, b) in fit.cepstra.as_slice().iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in [16usize, 51, 200] {
        let grid = FrequencyGrid::new(t);
        let k = 4.min(grid.len());
        let basis = basis_matrix(&grid, k).unwrap();
        let row: Vec<f64> = (0..grid.len())
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                (a * a + b * b) / 2.0
            })
            .collect();
        let y: Vec<f64> = (0..k).map(|i| 0.1 * i as f64 - 0.2).collect();
        let g = whittle_score(&y, &row, &basis).unwrap();
        for i in 0..k {
            let h = 1e-6;
            let mut up = y.clone();
            up[i] += h;
            let mut dn = y.clone();
            dn[i] -= h;
            let fd = (negative_whittle_nll(&up, &row, &basis).unwrap() - negative_whittle_nll(&dn, &row, &basis).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "T = {t}, i = {i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn whittle_estimates_concentrate_as_t_grows() {
    // AR(1) cepstrum sqrt(2) phi^k / k, simulated in the time domain.
    let phi: f64 = 0.6;
    let truth: Vec<f64> = (0..6)
        .map(|k| if k == 0 { 0.0 } else { std::f64::consts::SQRT_2 * phi.powi(k) / k as f64 })
        .collect();
    let quad = cepstra_from_log_spectrum(
        |w| -(1.0 - 2.0 * phi * (2.0 * std::f64::consts::PI * w).cos() + phi * phi).ln(),
        6,
    )
    .unwrap();
    for (a, b) in quad.as_slice().iter().zip(&truth) {
        assert!((a - b).abs() < 1e-8);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut errors = Vec::new();
    for t in [64usize, 256, 1024] {
        let grid = FrequencyGrid::new(t);
        let mut total = 0.0;
        for _ in 0..100 {
            let mut x: f64 = StandardNormal.sample(&mut rng);
            x /= (1.0 - phi * phi).sqrt();
            let z: Vec<f64> = (0..t)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x = phi * x + e;
                    x
                })
                .collect();
            let row = periodogram_from_rows(&DMatrix::from_row_slice(1, t, &z)).unwrap().row(0);
            let fit = fit_replicate(&grid, &row, 12, &FitConfig::default()).unwrap();
            let est = DVector::from_column_slice(&fit.cepstra.as_slice()[..6]);
            total += (est - DVector::from_column_slice(&truth)).norm_squared();
        }
        errors.push(total / 100.0);
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}
