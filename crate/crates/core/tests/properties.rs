//! Property tests across modules, each checked against a small independent
//! computation where one exists.

use kspod::design::DesignRanges;
use kspod::emulator::{train, TrainOptions};
use kspod::kriging::{indicator_weights, log_likelihood, CorrelationParams, IndicatorWeights, KrigingModel, KrigingOptions};
use kspod::metrics::{dominant_frequency, film_thickness_profile, kde, relative_error, Bandwidth, KdeSpec};
use kspod::snapshot::{linspace, synth_flowfield, tensor_grid, uniform_times, SynthRecipe};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn sq_exp(a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).zip(theta).map(|((x, y), t)| t * (x - y) * (x - y)).sum();
    (-s).exp()
}

fn random_design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

/// Stratified design: every coordinate occupies its own `1/n` bin, jittered
/// within the middle half of the bin.
fn stratified_design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, d);
    for k in 0..d {
        let mut bins: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            bins.swap(i, rng.random_range(0..=i));
        }
        for i in 0..n {
            x[(i, k)] = (bins[i] as f64 + rng.random_range(0.25..0.75)) / n as f64;
        }
    }
    x
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn dense_predict(x: &DMatrix<f64>, y: &[f64], theta: &[f64], nugget: f64, q: &[f64]) -> f64 {
    let n = x.nrows();
    let c: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| sq_exp(&row(x, i), &row(x, j), theta) + if i == j { nugget } else { 0.0 })
                .collect()
        })
        .collect();
    let ci1 = dense_solve(c.clone(), vec![1.0; n]);
    let ciy = dense_solve(c.clone(), y.to_vec());
    let mu = ciy.iter().sum::<f64>() / ci1.iter().sum::<f64>();
    let resid: Vec<f64> = y.iter().map(|v| v - mu).collect();
    let alpha = dense_solve(c, resid);
    let r: Vec<f64> = (0..n).map(|i| sq_exp(&row(x, i), q, theta)).collect();
    mu + r.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kriging_predictor_matches_dense_solve(seed in any::<u64>(), n in 2usize..=20, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = stratified_design(&mut rng, n, d);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        // θ scaled so that θ·spacing² stays O(1) and the system is well conditioned
        let scale = (n as f64).powf(2.0 / d as f64);
        let theta: Vec<f64> = (0..d).map(|_| scale * rng.random_range(2.0..20.0)).collect();
        let params = CorrelationParams::new(theta.clone(), 1e-6).unwrap();
        let model = KrigingModel::with_params(&x, &y, params).unwrap();
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let dense = dense_predict(&x, &y, &theta, 1e-6, &q);
            let fast = model.predict(&q).unwrap();
            prop_assert!((fast - dense).abs() <= 1e-10 * dense.abs().max(1.0), "{fast} vs {dense}");
        }
    }

    #[test]
    fn likelihood_optimum_beats_random_probes(seed in any::<u64>(), n in 4usize..=12, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = stratified_design(&mut rng, n, d);
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * x[(i, 0)]).sin() + x.row(i).sum() + 0.3 * rng.random::<f64>())
            .collect();
        let model = KrigingModel::fit(&x, &y, &KrigingOptions::default()).unwrap();
        let best = log_likelihood(&x, &y, model.params());
        for _ in 0..32 {
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0f64..6.0).exp()).collect();
            let probe = log_likelihood(&x, &y, &CorrelationParams::new(theta, 1e-8).unwrap());
            prop_assert!(best >= probe - 1e-9 * probe.abs().max(1.0), "{best} < {probe}");
        }
    }

    #[test]
    fn indicator_weights_are_unit_vectors_at_designs(seed in any::<u64>(), n in 2usize..=15, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = stratified_design(&mut rng, n, d);
        let model = IndicatorWeights::fit(&x, &KrigingOptions::default()).unwrap();
        for i in 0..n {
            let w = model.weights(&row(&x, i)).unwrap();
            for (j, v) in w.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((v - target).abs() <= 1e-6, "weight {} at design {}: {}", j, i, v);
            }
        }
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
        let w = model.weights(&q).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn relative_error_is_scale_invariant(sim in 0.1f64..100.0, emu in -100.0f64..100.0, c in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        let a = relative_error(sim, emu).unwrap();
        let b = relative_error(c * sim, c * emu).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn kde_is_nonnegative_and_order_free(samples in prop::collection::vec(-50.0f64..50.0, 1..40), xs in prop::collection::vec(-80.0f64..80.0, 1..10), h in prop_oneof![Just(None), (0.01f64..5.0).prop_map(Some)]) {
        let spec = KdeSpec { bandwidth: h.map_or(Bandwidth::Auto, Bandwidth::Fixed) };
        let k = kde(&samples, &spec).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        rev.rotate_left(samples.len() / 2);
        let kr = kde(&rev, &spec).unwrap();
        for x in xs {
            let v = k.eval(x);
            prop_assert!(v >= 0.0);
            prop_assert!((v - kr.eval(x)).abs() <= 1e-12 * v.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn thickness_is_monotone_in_threshold(values in prop::collection::vec(0.0f64..1000.0, 24), t1 in 0.0f64..1000.0, dt in 0.0f64..500.0) {
        let grid = tensor_grid(&[0.0, 1.0, 2.0, 3.0], &linspace(0.0, 2.5, 6));
        let lo = film_thickness_profile(&grid, &values, Some(t1)).unwrap();
        let hi = film_thickness_profile(&grid, &values, Some(t1 + dt)).unwrap();
        for (a, b) in lo.thickness.iter().zip(&hi.thickness) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn dominant_frequency_ignores_offsets(amps in prop::collection::vec(0.1f64..5.0, 3), bins in prop::collection::vec(1usize..60, 3), offset in -100.0f64..100.0) {
        let m = 128;
        let dt = 1e-3;
        let series: Vec<f64> = (0..m)
            .map(|q| {
                let t = q as f64 * dt;
                amps.iter().zip(&bins).map(|(a, b)| a * (2.0 * std::f64::consts::PI * *b as f64 / (m as f64 * dt) * t).cos()).sum()
            })
            .collect();
        let shifted: Vec<f64> = series.iter().map(|v| v + offset).collect();
        prop_assert_eq!(dominant_frequency(&series, dt).unwrap(), dominant_frequency(&shifted, dt).unwrap());
    }
}

#[test]
fn negative_weights_are_not_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_design(&mut rng, 12, 2);
    let params = CorrelationParams::isotropic(3.0, 2, 1e-8).unwrap();
    let w = indicator_weights(&x, &params, &[1.4, -0.3]).unwrap();
    assert!(w.iter().any(|v| *v < 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
}

fn small_model_cases(seed: u64, n: usize) -> Vec<kspod::SnapshotSet> {
    let ranges = DesignRanges::swirl_injector();
    let recipe = SynthRecipe::desk(ranges.clone());
    let grid = tensor_grid(&linspace(0.0, 25.0, 8), &linspace(0.0, 4.5, 6));
    let times = uniform_times(16, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let x = ranges.to_physical(&u).unwrap();
            let mut c = synth_flowfield(&x, &grid, &times, &recipe).unwrap();
            c.case_id = format!("c{i}");
            c
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn emulator_weights_normalize_everywhere(seed in any::<u64>(), n in 3usize..=8) {
        let cases = small_model_cases(seed, n);
        let opts = TrainOptions { ranges: Some(DesignRanges::swirl_injector()), ..TrainOptions::default() };
        let model = train(&cases, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..20 {
            let u: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let x = DesignRanges::swirl_injector().to_physical(&u).unwrap();
            let w = model.weights(&x).unwrap();
            prop_assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!((w.raw.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        }
    }
}
