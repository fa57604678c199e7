//! The convex potential `f(p) = −Σp_j + Σ_i B_i log d∘_i(p)`.
//!
//! Restricted to the price simplex its subgradients are the relative excess
//! demands, so relative tatonnement is a subgradient method on `f`.

use crate::demand::{log_gauge_dual, DemandError, TieBreaking};
use crate::dynamics::{compensated_sum, min_norm_selection, relative_excess_demand, DynamicsError};
use crate::market::{DisutilitySpec, Market};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error("linear disutilities have no smoothness certificate")]
    LinearUnsupported,
    #[error("simplex grids need exactly 3 chores, market has {0}")]
    WrongDimension(usize),
    #[error("grid pitch must be in (0, 1], got {0}")]
    BadPitch(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialValue {
    pub f: f64,
    /// `B_i log d∘_i(p)` per agent.
    pub per_agent_log_terms: Vec<f64>,
    /// `−Σp_j`
    pub linear_term: f64,
}

pub fn potential_f(market: &Market, p: &[f64]) -> Result<PotentialValue, PotentialError> {
    let per_agent_log_terms = market
        .agents()
        .iter()
        .map(|a| Ok(a.budget * log_gauge_dual(&a.disutility, p)?))
        .collect::<Result<Vec<f64>, DemandError>>()?;
    let linear_term = -compensated_sum(p.iter().copied());
    let f = linear_term + compensated_sum(per_agent_log_terms.iter().copied());
    Ok(PotentialValue { f, per_agent_log_terms, linear_term })
}

/// Analytic range of `f` over the price simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PotentialBounds {
    pub lower: f64,
    pub upper: f64,
}

pub fn potential_bounds(market: &Market) -> PotentialBounds {
    let b = market.budget_sum();
    let mo = market.moduli();
    let term = |scale: &[f64]| {
        -b + market.agents().iter().zip(scale).map(|(a, s)| a.budget * (s * b).ln()).sum::<f64>()
    };
    PotentialBounds { lower: term(&mo.delta_lb), upper: term(&mo.r_bound) }
}

/// Upper bound on `upper − lower` for CES markets: `Σ B_i/ρ_i · log(m max d / min d)`.
pub fn potential_gap_bound(market: &Market) -> f64 {
    let m = market.m() as f64;
    market
        .agents()
        .iter()
        .map(|a| {
            let w = a.disutility.weights();
            let max = w.iter().copied().fold(0.0, f64::max);
            let min = w.iter().copied().fold(f64::INFINITY, f64::min);
            a.budget / a.disutility.rho() * (m * max / min).ln()
        })
        .sum()
}

/// An element of the subdifferential of `f` restricted to the simplex: the
/// relative excess demand for the selection picked by `tie`.
pub fn subgradient_restricted(market: &Market, p: &[f64], tie: &TieBreaking) -> Result<Vec<f64>, DynamicsError> {
    relative_excess_demand(market, p, tie)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Regime {
    /// ρ ≤ 2: gradient of the gauge dual is Lipschitz on the whole simplex.
    RhoLe2Global,
    /// ρ > 2: Lipschitz only where every price is at least `r`.
    RhoGt2Local(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ValidRegion {
    /// The price simplex.
    Simplex,
    /// Simplex points with every price at least `ℓ0/2`.
    SafeSimplex,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessCertificate {
    /// `RhoGt2Local` as soon as one agent has ρ > 2.
    pub regime: Regime,
    pub agent_regimes: Vec<Regime>,
    /// Lipschitz constant of `∇d∘_i` on the valid region.
    pub per_agent_l: Vec<f64>,
    /// Lipschitz constant of `∇f` on the valid region.
    pub composite_l: f64,
    pub valid_region: ValidRegion,
}

/// Lipschitz constant of `∇d∘` on the simplex for `ρ ∈ (1, 2]`.
pub fn global_gauge_smoothness(weights: &[f64], rho: f64, m: usize, budget_sum: f64) -> f64 {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    2.0 * m as f64 * max.powf(1.0 / rho) / ((rho - 1.0) * min.powf(2.0 / rho) * budget_sum)
}

/// Lipschitz constant of `∇d∘` on simplex points with all prices `≥ r`, for `ρ > 2`.
///
/// The mean-value bound involves `r^{σ−2}`, which is at most `1/r` when
/// `r ≤ 1`; the larger of the two is used so the constant stays valid for any `r`.
pub fn local_gauge_smoothness(weights: &[f64], rho: f64, budget_sum: f64, r: f64) -> f64 {
    let sigma = rho / (rho - 1.0);
    let max = weights.iter().copied().fold(0.0, f64::max);
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let r_term = (1.0 / r).max(r.powf(sigma - 2.0));
    (sigma - 1.0) / budget_sum.powf(sigma - 1.0)
        * max.powf((1.0 - sigma).powi(2) / sigma)
        * min.powf(1.0 - sigma)
        * r_term
        + (sigma - 1.0) / budget_sum
            * max.powf((1.0 - sigma) * (1.0 - 2.0 * sigma) / sigma)
            * min.powf(2.0 * (1.0 - sigma))
}

pub fn smoothness_certificate(market: &Market) -> Result<SmoothnessCertificate, PotentialError> {
    let b = market.budget_sum();
    let mo = market.moduli();
    let r_local = mo.ell0 / 2.0;
    let mut agent_regimes = Vec::with_capacity(market.n());
    let mut per_agent_l = Vec::with_capacity(market.n());
    for a in market.agents() {
        let DisutilitySpec::Ces { weights, rho } = &a.disutility else {
            return Err(PotentialError::LinearUnsupported);
        };
        if *rho <= 2.0 {
            agent_regimes.push(Regime::RhoLe2Global);
            per_agent_l.push(global_gauge_smoothness(weights, *rho, market.m(), b));
        } else {
            agent_regimes.push(Regime::RhoGt2Local(r_local));
            per_agent_l.push(local_gauge_smoothness(weights, *rho, b, r_local));
        }
    }
    let composite_l = market
        .agents()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let r_i = mo.delta_lb[i] * b;
            let big_r = mo.r_bound[i];
            let l_i = per_agent_l[i];
            a.budget * (l_i / r_i + big_r * (l_i * b + big_r) / (r_i * r_i))
        })
        .sum();
    let local = agent_regimes.iter().any(|r| matches!(r, Regime::RhoGt2Local(_)));
    Ok(SmoothnessCertificate {
        regime: if local { Regime::RhoGt2Local(r_local) } else { Regime::RhoLe2Global },
        agent_regimes,
        per_agent_l,
        composite_l,
        valid_region: if local { ValidRegion::SafeSimplex } else { ValidRegion::Simplex },
    })
}

/// One point of a barycentric grid over the 3-chore price simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub p: [f64; 3],
    pub f: f64,
    /// Min-norm relative excess demand at `p`.
    pub z_tilde: [f64; 3],
}

/// Barycentric grid of pitch `1/N` (`N = round(1/pitch)`) over the simplex,
/// `C(N+2, 2)` points in row-major order over `(i, j)` with `i + j ≤ N`.
pub fn simplex_grid(market: &Market, pitch: f64, tie_tol: f64) -> Result<Vec<GridPoint>, DynamicsError> {
    if market.m() != 3 {
        return Err(PotentialError::WrongDimension(market.m()).into());
    }
    if !(pitch > 0.0 && pitch <= 1.0) {
        return Err(PotentialError::BadPitch(pitch).into());
    }
    let n = (1.0 / pitch).round() as usize;
    let b = market.budget_sum();
    let coords: Vec<(usize, usize)> = (0..=n).flat_map(|i| (0..=(n - i)).map(move |j| (i, j))).collect();
    coords
        .par_iter()
        .map(|&(i, j)| {
            let k = n - i - j;
            let p = [b * i as f64 / n as f64, b * j as f64 / n as f64, b * k as f64 / n as f64];
            let f = potential_f(market, &p)?.f;
            let sel = min_norm_selection(market, &p, tie_tol)?;
            Ok(GridPoint { p, f, z_tilde: [sel.z_tilde[0], sel.z_tilde[1], sel.z_tilde[2]] })
        })
        .collect()
}
