//! Property tests for the least-squares accumulation state.

use dtr_bandit::linalg::OlsState;
use proptest::prelude::*;

fn sample_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
}

proptest! {
    /// Permuting the update sequence leaves sigma and cross unchanged up
    /// to accumulation rounding.
    #[test]
    fn update_order_independence(
        data in prop::collection::vec((sample_vec(3), sample_vec(2)), 1..50),
        seed in 0u64..1000,
    ) {
        let mut forward = OlsState::new(3, 2);
        for (x, y) in &data {
            forward.update(x, y).unwrap();
        }
        let mut permuted_data = data.clone();
        // Deterministic shuffle from the seed.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for i in (1..permuted_data.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let j = (state >> 33) as usize % (i + 1);
            permuted_data.swap(i, j);
        }
        let mut permuted = OlsState::new(3, 2);
        for (x, y) in &permuted_data {
            permuted.update(x, y).unwrap();
        }
        let scale = 1.0 + forward.sigma().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in forward.sigma().iter().zip(permuted.sigma().iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
        let cscale = 1.0 + forward.cross().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in forward.cross().iter().zip(permuted.cross().iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * cscale);
        }
    }

    /// trace(sigma) accumulates the squared norms of the updates, and the
    /// count matches the number of update calls.
    #[test]
    fn trace_matches_squared_norms(
        data in prop::collection::vec((sample_vec(4), sample_vec(1)), 0..60),
    ) {
        let mut s = OlsState::new(4, 1);
        let mut norm_sum = 0.0;
        for (x, y) in &data {
            s.update(x, y).unwrap();
            norm_sum += x.iter().map(|v| v * v).sum::<f64>();
        }
        prop_assert_eq!(s.len(), data.len());
        let trace: f64 = (0..4).map(|i| s.sigma()[(i, i)]).sum();
        prop_assert!((trace - norm_sum).abs() <= 1e-9 * (1.0 + norm_sum.abs()));
    }

    /// Interpolation: with an orthonormal design of exactly d samples the
    /// solve reproduces the outcomes.
    #[test]
    fn orthonormal_design_interpolates(ys in prop::collection::vec(-10.0f64..10.0, 3)) {
        let mut s = OlsState::new(3, 1);
        for (i, y) in ys.iter().enumerate() {
            let mut x = [0.0; 3];
            x[i] = 1.0;
            s.update(&x, &[*y]).unwrap();
        }
        let beta = s.solve_vector().unwrap();
        for (i, y) in ys.iter().enumerate() {
            prop_assert!((beta[i] - y).abs() < 1e-10);
        }
    }
}

/// For data generated from a linear model, the estimation error at n =
/// 1600 is below half the error at n = 100 (median over 20 seeds), with
/// errors decreasing across n = 100, 400, 1600 in the median.
#[test]
fn ols_error_halves_as_samples_quadruple() {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let truth = [1.5, -0.7, 0.3];
    let mut errs = vec![Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = OlsState::new(3, 1);
        let mut checkpoints = [100usize, 400, 1600].iter().peekable();
        for n in 1..=1600usize {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise: f64 = rng.gen_range(-0.5..0.5);
            let y = truth.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>() + noise;
            state.update(&x, &[y]).unwrap();
            if checkpoints.peek() == Some(&&n) {
                checkpoints.next();
                let beta = state.solve_vector().unwrap();
                let err: f64 = truth
                    .iter()
                    .zip(beta.iter())
                    .map(|(t, b)| (t - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let idx = match n {
                    100 => 0,
                    400 => 1,
                    _ => 2,
                };
                errs[idx].push(err);
            }
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let m100 = median(&mut errs[0]);
    let m400 = median(&mut errs[1]);
    let m1600 = median(&mut errs[2]);
    assert!(m400 < m100, "median errors: {m100} {m400} {m1600}");
    assert!(m1600 < m400, "median errors: {m100} {m400} {m1600}");
    assert!(
        m1600 < 0.5 * m100,
        "n=1600 error {m1600} not below half of n=100 error {m100}"
    );
}
