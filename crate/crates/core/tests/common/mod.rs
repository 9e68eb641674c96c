//! Shared helpers for the integration suites: an independent determinant
//! oracle and a planted-model basket generator.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use logdpp::det_and_inverse;

/// Determinant by recursive first-row cofactor expansion — O(k!) and
/// entirely independent of the LU code under test.
#[allow(dead_code)]
pub fn cofactor_det(m: &Array2<f64>) -> f64 {
    let k = m.nrows();
    match k {
        0 => 1.0,
        1 => m[[0, 0]],
        2 => m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]],
        _ => {
            let mut det = 0.0;
            for col in 0..k {
                let mut minor = Array2::zeros((k - 1, k - 1));
                for i in 1..k {
                    let mut jj = 0;
                    for j in 0..k {
                        if j == col {
                            continue;
                        }
                        minor[[i - 1, jj]] = m[[i, j]];
                        jj += 1;
                    }
                }
                let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                det += sign * m[[0, col]] * cofactor_det(&minor);
            }
            det
        }
    }
}

/// A random symmetric positive-definite matrix: a rectangular Gram product
/// plus a positive diagonal bump.
#[allow(dead_code)]
pub fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut b = Array2::zeros((k, k + 2));
    for i in 0..k {
        for j in 0..k + 2 {
            b[[i, j]] = rng.random_range(-1.0..1.0);
        }
    }
    let mut m = b.dot(&b.t());
    for i in 0..k {
        m[[i, i]] += rng.random_range(0.1..0.6);
    }
    m
}

/// The ground-truth factors behind a planted basket corpus.
#[allow(dead_code)]
pub struct PlantedModel {
    pub v: Array2<f64>,
    pub d: Array1<f64>,
}

/// Generates baskets from a planted low-rank kernel with a steep
/// popularity profile and 10 repulsive communities. Items are drawn one at
/// a time by roulette on the squared determinant growth each candidate
/// would contribute, so popular items dominate while same-community items
/// avoid each other — a signal a trained model can recover.
#[allow(dead_code)]
pub fn planted_baskets(
    items: usize,
    count: usize,
    seed: u64,
) -> (Vec<Vec<String>>, PlantedModel) {
    let rank = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Community embeddings: item i leans on dimension i % rank.
    let mut v = Array2::zeros((items, rank));
    for i in 0..items {
        for j in 0..rank {
            let base = if j == i % rank { 1.0 } else { 0.0 };
            v[[i, j]] = 0.5 * (base + 0.1 * rng.random_range(-1.0..1.0));
        }
    }
    // Popularity: a shuffled Zipf-like profile, top items several times as
    // heavy as the tail.
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut rng);
    let mut d = Array1::zeros(items);
    for (r, &i) in order.iter().enumerate() {
        d[i] = 2.8 / ((1 + r) as f64).powf(0.65);
    }

    let full_l = |a: usize, b: usize| -> f64 {
        let mut dot = 0.0;
        for j in 0..rank {
            dot += v[[a, j]] * v[[b, j]];
        }
        if a == b {
            dot + d[a] * d[a]
        } else {
            dot
        }
    };

    let mut baskets = Vec::with_capacity(count);
    for _ in 0..count {
        let size = rng.random_range(3..=5);
        let mut chosen: Vec<usize> = Vec::with_capacity(size);
        // First item: roulette on squared diagonal weight.
        let weights: Vec<f64> = (0..items).map(|i| full_l(i, i).powi(2)).collect();
        chosen.push(roulette(&weights, &mut rng));
        while chosen.len() < size {
            let k = chosen.len();
            let mut sub = Array2::zeros((k, k));
            for a in 0..k {
                for b in 0..k {
                    sub[[a, b]] = full_l(chosen[a], chosen[b]);
                }
            }
            let res = det_and_inverse(&sub).expect("planted submatrix invertible");
            let weights: Vec<f64> = (0..items)
                .map(|cand| {
                    if chosen.contains(&cand) {
                        return 0.0;
                    }
                    let ell: Vec<f64> = chosen.iter().map(|&c| full_l(c, cand)).collect();
                    let mut quad = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            quad += ell[a] * res.inverse[[a, b]] * ell[b];
                        }
                    }
                    let schur = (full_l(cand, cand) - quad).max(0.0);
                    schur * schur
                })
                .collect();
            chosen.push(roulette(&weights, &mut rng));
        }
        baskets.push(chosen.iter().map(|i| format!("i{i}")).collect());
    }
    (baskets, PlantedModel { v, d })
}

fn roulette(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "roulette needs some positive weight");
    let mut ticket = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if ticket < *w {
            return i;
        }
        ticket -= w;
    }
    weights.len() - 1
}
