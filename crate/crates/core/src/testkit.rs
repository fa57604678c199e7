//! Test helpers: random instances and a finite-difference gradient of the
//! restricted potential. Compiled for unit tests and under the `testkit` feature.

use crate::market::{Agent, DisutilitySpec, Market};
use crate::potential::potential_f;
use rand::Rng;

pub use crate::simplex::{h0_basis, random_h0_direction};

/// Central-difference gradient of `f` restricted to the simplex plane at `p`,
/// expressed in chore coordinates (so it sums to zero).
pub fn restricted_fd_gradient(market: &Market, p: &[f64], h: f64) -> Vec<f64> {
    let m = p.len();
    let mut grad = vec![0.0; m];
    for u in h0_basis(m) {
        let plus: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = p.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let d = (potential_f(market, &plus).unwrap().f - potential_f(market, &minus).unwrap().f) / (2.0 * h);
        grad.iter_mut().zip(&u).for_each(|(g, b)| *g += d * b);
    }
    grad
}

fn weights<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(1.0..2.0)).collect()
}

/// Linear market with weights in `[1, 2)` and budgets in `[0.5, 1.5)`.
pub fn random_linear_market<R: Rng>(rng: &mut R, n: usize, m: usize) -> Market {
    let agents = (0..n)
        .map(|_| Agent { budget: rng.random_range(0.5..1.5), disutility: DisutilitySpec::linear(weights(rng, m)) })
        .collect();
    Market::new(m, agents).unwrap()
}

/// CES market; each agent's ρ is drawn from `rhos`.
pub fn random_ces_market<R: Rng>(rng: &mut R, n: usize, m: usize, rhos: &[f64]) -> Market {
    let agents = (0..n)
        .map(|_| {
            let rho = rhos[rng.random_range(0..rhos.len())];
            Agent { budget: rng.random_range(0.5..1.5), disutility: DisutilitySpec::ces(weights(rng, m), rho) }
        })
        .collect();
    Market::new(m, agents).unwrap()
}

/// Uniform point of the simplex `{Σp = total, p ≥ 0}`.
pub fn random_simplex_point<R: Rng>(rng: &mut R, m: usize, total: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s * total).collect()
}

/// Simplex point with every price at least `floor · total / m`.
pub fn random_interior_point<R: Rng>(rng: &mut R, m: usize, total: f64, floor: f64) -> Vec<f64> {
    let base = floor * total / m as f64;
    let rest = total - base * m as f64;
    random_simplex_point(rng, m, rest).into_iter().map(|v| v + base).collect()
}
