use rand::{Rng, SeedableRng};
use std::time::Instant;
use wildreid_core::{topk, EmbeddingMatrix};

fn random(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * d).map(|_| rng.random::<f32>() - 0.5).collect();
    let ids = (0..n).map(|i| i.to_string()).collect();
    EmbeddingMatrix::new(data, d, ids).unwrap().normalize().unwrap()
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (nq, nr, d) = (args[0], args[1], args[2]);
    let q = random(nq, d, 1);
    let r = random(nr, d, 2);
    let t = Instant::now();
    let res = topk(&q, &r, 5).unwrap();
    let s = t.elapsed().as_secs_f64();
    println!("{nq}x{nr}x{d}: {s:.3}s, {:.2} GMAC/s, first {:?}", (nq * nr * d) as f64 / s / 1e9, res.best(0));
}
