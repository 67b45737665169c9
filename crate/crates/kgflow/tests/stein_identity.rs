//! Monte Carlo certification of the Stein identity: for samples drawn from
//! q, the averaged Stein operator `k(x,·)·score_q + ∇_y k(x,·)` applied at
//! fixed query points decays like n^{-1/2}.

use kgflow::bbvi::GaussianVariationalParams;
use kgflow::kernels::{rbf_gradient, rbf_kernel};
use kgflow::rng::{derive_seed, standard_normal_vectors, stream_rng};
use nalgebra::{DMatrix, DVector};

#[test]
fn stein_operator_residual_decays_at_root_n() {
    let params = GaussianVariationalParams::new(
        DVector::from_vec(vec![0.3, -0.2]),
        DMatrix::from_row_slice(2, 2, &[1.1, 0.2, 0.0, 0.9]),
    )
    .unwrap();
    let kernel = rbf_kernel();
    let queries = [
        DVector::from_vec(vec![0.0, 0.0]),
        DVector::from_vec(vec![1.0, 0.5]),
        DVector::from_vec(vec![-0.8, 0.3]),
        DVector::from_vec(vec![0.5, -1.2]),
    ];
    let sizes = [1_000usize, 10_000, 100_000];
    let replicates = 20;

    let mut avg_residual = [0.0f64; 3];
    for rep in 0..replicates {
        let mut rng = stream_rng(derive_seed(2024, rep), 0);
        let eps = standard_normal_vectors(&mut rng, *sizes.last().unwrap(), 2);
        let samples: Vec<DVector<f64>> = eps.iter().map(|e| params.pushforward(e)).collect();
        let scores: Vec<DVector<f64>> = samples
            .iter()
            .map(|y| params.score_q(y).unwrap())
            .collect();

        for query in &queries {
            let mut acc = DVector::zeros(2);
            let mut checkpoint = 0;
            for (j, (y, s)) in samples.iter().zip(&scores).enumerate() {
                acc += kernel.apply(query, y, None, s).unwrap();
                acc += rbf_gradient(query, y);
                if j + 1 == sizes[checkpoint] {
                    avg_residual[checkpoint] += (&acc / sizes[checkpoint] as f64).norm();
                    checkpoint += 1;
                    if checkpoint == sizes.len() {
                        break;
                    }
                }
            }
        }
    }
    for r in &mut avg_residual {
        *r /= (replicates * queries.len() as u64) as f64;
    }

    assert!(
        avg_residual[0] > avg_residual[1] && avg_residual[1] > avg_residual[2],
        "residuals should decrease: {avg_residual:?}"
    );

    // Least-squares slope of log residual against log n.
    let xs: Vec<f64> = sizes.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = avg_residual.iter().map(|r| r.ln()).collect();
    let x_mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let y_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum::<f64>()
        / xs.iter().map(|x| (x - x_mean).powi(2)).sum::<f64>();
    assert!(
        (slope + 0.5).abs() <= 0.15,
        "decay slope {slope} outside -0.5 ± 0.15 (residuals {avg_residual:?})"
    );
}
