//! Canonical correlation between the raw visual and audio features of a
//! synthetic corpus, computed independently with nalgebra.

use avjoint::dataio::{generate_synthetic, SyntheticSpec};
use nalgebra::{DMatrix, SymmetricEigen};

fn centered(rows: &[Vec<f32>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

fn inv_sqrt(c: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(1e-12).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn canonical_correlations(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    // A small ridge keeps the noise-only directions well conditioned.
    let ridge = |m: DMatrix<f64>| {
        let k = m.nrows();
        m + DMatrix::identity(k, k) * 1e-9
    };
    let cxx = ridge(x.transpose() * x / n);
    let cyy = ridge(y.transpose() * y / n);
    let cxy = x.transpose() * y / n;
    let m = inv_sqrt(cxx) * cxy * inv_sqrt(cyy);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn corpus(noise_sigma: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let c = generate_synthetic(&SyntheticSpec {
        num_records: 4000,
        num_classes: 32,
        latent_dim: 16,
        noise_sigma,
        labels_per_record: 1,
        visual_dim: 40,
        audio_dim: 24,
        seed: 12,
    })
    .unwrap();
    let v: Vec<Vec<f32>> = c.records().iter().map(|r| r.visual.clone()).collect();
    let a: Vec<Vec<f32>> = c.records().iter().map(|r| r.audio.clone()).collect();
    (centered(&v), centered(&a))
}

#[test]
fn top_latent_components_are_strongly_correlated() {
    let (x, y) = corpus(0.05);
    let rho = canonical_correlations(&x, &y);
    assert!(rho[..16].iter().all(|&r| r > 0.9), "{:?}", &rho[..16]);
    // Past the latent rank only noise is shared, so correlation collapses.
    assert!(rho[16] < 0.2, "{:?}", &rho[16..]);
}

#[test]
fn more_noise_weakens_the_link() {
    let (x, y) = corpus(0.5);
    let noisy = canonical_correlations(&x, &y);
    let (x, y) = corpus(0.1);
    let clean = canonical_correlations(&x, &y);
    assert!(noisy[15] < clean[15]);
}
