use nalgebra::{DMatrix, SymmetricEigen};
use permfree::autodiff::Tensor;
use permfree::pca::{covariance, fit};
use proptest::prelude::*;

fn data(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v = (0..rows * cols)
        .map(|i| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            // Unequal column scales keep the spectrum well separated.
            u * (1.0 + 2.0 * (i % cols) as f64)
        })
        .collect();
    Tensor::new(vec![rows, cols], v).unwrap()
}

fn oracle(x: &Tensor) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    SymmetricEigen::new(cov)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matches_symmetric_eigendecomposition(seed in any::<u64>()) {
        let x = data(40, 4, seed);
        let p = fit(&x, 2, 1e-12).unwrap();
        let e = oracle(&x);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        for (k, &i) in order.iter().take(2).enumerate() {
            let lam = e.eigenvalues[i];
            prop_assert!((p.eigenvalues[k] - lam).abs() < 1e-6 * lam.max(1.0), "{} vs {}", p.eigenvalues[k], lam);
            let v = e.eigenvectors.column(i);
            let cos: f64 = p.components[k].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            prop_assert!((cos.abs() - 1.0).abs() < 1e-5, "cos {cos}");
        }
    }
}

#[test]
fn covariance_matches_oracle() {
    let x = data(25, 3, 9);
    let (_, cov) = covariance(&x);
    let e = oracle(&x);
    let trace: f64 = (0..3).map(|i| cov[i][i]).sum();
    assert!((trace - e.eigenvalues.sum()).abs() < 1e-9);
}

#[test]
fn projection_is_centered() {
    let x = data(30, 4, 4);
    let p = fit(&x, 3, 1e-12).unwrap();
    let z = p.project(&x).unwrap();
    for c in 0..3 {
        let m: f64 = (0..30).map(|r| z.at(r, c)).sum::<f64>() / 30.0;
        assert!(m.abs() < 1e-10);
    }
}
