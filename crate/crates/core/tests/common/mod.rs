#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildreid_core::EmbeddingMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps the helpers independent of the crate under test.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn random_unit_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data: Vec<f32> = gaussian_vec(rng, rows * dim).into_iter().map(|x| x as f32).collect();
    let ids = (0..rows).map(|i| format!("r{i}")).collect();
    EmbeddingMatrix::new(data, dim, ids).unwrap().normalize().unwrap()
}

/// Ratio-test count by direct all-pairs distances.
pub fn brute_force_count(query: &[Vec<f32>], reference: &[Vec<f32>], threshold: f64) -> u32 {
    if reference.len() < 2 {
        return 0;
    }
    let mut count = 0;
    for q in query {
        let mut d: Vec<f64> = reference
            .iter()
            .map(|r| q.iter().zip(r).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        if d[0] / d[1] < threshold {
            count += 1;
        }
    }
    count
}
