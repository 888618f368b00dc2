use nalgebra::DMatrix;
use rayon::prelude::*;

use cepreg::bootstrap::{residual_bootstrap_bands, BootstrapConfig, SpectralSynthesizer, StageOne};
use cepreg::experiments::generate_example1;
use cepreg::rng::substream;
use cepreg::spectral::periodogram_from_rows;
use cepreg::{fit_two_stage, PipelineConfig, TwoStageFit};

fn example_fit(seed: u64) -> (cepreg::experiments::SimulatedPanel, TwoStageFit, PipelineConfig) {
    let mut rng = substream(seed, 0);
    let sim = generate_example1(40, 64, 2, &mut rng).unwrap();
    let config = PipelineConfig::default();
    let fit = fit_two_stage(&sim.panel, &config).unwrap();
    (sim, fit, config)
}

fn config(seed: u64, alpha: f64, stage_one: StageOne) -> BootstrapConfig {
    BootstrapConfig {
        replicates: 60,
        alpha,
        seed,
        grid_size: 33,
        stage_one,
    }
}

#[test]
fn averaged_periodogram_is_unbiased_for_ar1() {
    // z-scores of the averaged periodogram against the AR(1) spectrum; each
    // ordinate is f * chi2_2 / 2, so the average has standard error f / sqrt(n).
    let (phi, t, n) = (0.5f64, 128usize, 2000usize);
    let f = |w: f64| 1.0 / (1.0 - 2.0 * phi * (2.0 * std::f64::consts::PI * w).cos() + phi * phi);
    let synth = SpectralSynthesizer::new(t);
    let rows: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|r| synth.simulate(|w| f(w).ln(), &mut substream(31, r)).unwrap())
        .collect();
    let pgram = periodogram_from_rows(&DMatrix::from_fn(n, t, |i, j| rows[i][j])).unwrap();
    let z: Vec<f64> = synth
        .grid()
        .frequencies()
        .iter()
        .enumerate()
        .map(|(c, &w)| (pgram.values.column(c).mean() / f(w) - 1.0) * (n as f64).sqrt())
        .collect();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64).sqrt();
    assert!(z.iter().all(|v| v.abs() < 4.5), "{z:?}");
    assert!(mean.abs() < 0.5, "mean z {mean}");
    assert!((0.75..1.25).contains(&sd), "sd z {sd}");
}

#[test]
fn zero_residuals_collapse_bands() {
    let (sim, mut fit, config) = example_fit(1);
    fit.model.residuals.fill(0.0);
    let bands = residual_bootstrap_bands(
        sim.panel.covariates(),
        sim.panel.series_len(),
        &fit,
        &config.whittle,
        &config_for_exact(),
    )
    .unwrap();
    let width = (&bands.upper - &bands.lower).amax();
    assert!(width < 1e-6, "width {width}");
    assert!(bands.bias.amax() < 1e-6);
}

fn config_for_exact() -> BootstrapConfig {
    config(2, 0.05, StageOne::Exact)
}

#[test]
fn bands_nest_and_are_ordered() {
    let (sim, fit, config_p) = example_fit(3);
    let run = |alpha| {
        residual_bootstrap_bands(
            sim.panel.covariates(),
            sim.panel.series_len(),
            &fit,
            &config_p.whittle,
            &config(4, alpha, StageOne::Resimulate),
        )
        .unwrap()
    };
    let b95 = run(0.05);
    let b99 = run(0.01);
    assert_eq!(b95.lower.shape(), (3, 33));
    assert!(b95.lower.iter().zip(b95.upper.iter()).all(|(l, u)| l <= u));
    assert!(b99.lower.iter().zip(b95.lower.iter()).all(|(a, b)| a <= b));
    assert!(b99.upper.iter().zip(b95.upper.iter()).all(|(a, b)| a >= b));
    assert_eq!(b95.failed_draws, 0);
}

#[test]
fn bands_do_not_depend_on_thread_count() {
    let (sim, fit, config_p) = example_fit(5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                residual_bootstrap_bands(
                    sim.panel.covariates(),
                    sim.panel.series_len(),
                    &fit,
                    &config_p.whittle,
                    &config(6, 0.05, StageOne::Resimulate),
                )
                .unwrap()
            })
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one, four);
}

#[test]
fn too_few_replicates_is_a_configuration_error() {
    let (sim, fit, config_p) = example_fit(7);
    let mut c = config(8, 0.05, StageOne::Exact);
    c.replicates = 20;
    let err = residual_bootstrap_bands(sim.panel.covariates(), sim.panel.series_len(), &fit, &config_p.whittle, &c)
        .unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
