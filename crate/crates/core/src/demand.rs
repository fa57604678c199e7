//! Agent-level oracles: disutility, gauge dual, MPB sets and demand.
//!
//! Prices that are not strictly positive cannot be earned from, so every
//! oracle treats a chore with `p_j <= 0` as contributing nothing.

use crate::market::DisutilitySpec;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DemandError {
    #[error("price vector has no positive entry")]
    ZeroPriceVector,
    #[error("gauge dual gradient needs strictly positive prices (chore {0})")]
    NonPositivePrice(usize),
    #[error("linear disutility has no gauge dual gradient")]
    NotApplicableLinear,
    #[error("expected {expected} entries, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Selection from a linear agent's MPB set.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum TieRule {
    /// Equal budget shares across the MPB chores.
    #[default]
    UniformSplit,
    /// Whole budget on the lowest-indexed MPB chore.
    LowestIndex,
    /// Budget shares proportional to the given per-chore weights, renormalised
    /// over the MPB set (uniform if they vanish there).
    Weighted(Vec<f64>),
}

pub const DEFAULT_TIE_TOL: f64 = 1e-9;

/// Tie rule plus the relative tolerance used to decide MPB membership.
#[derive(Clone, Debug, PartialEq)]
pub struct TieBreaking {
    pub rule: TieRule,
    pub tol: f64,
}

impl Default for TieBreaking {
    fn default() -> Self {
        TieBreaking { rule: TieRule::UniformSplit, tol: DEFAULT_TIE_TOL }
    }
}

impl TieBreaking {
    pub fn new(rule: TieRule) -> Self {
        TieBreaking { rule, tol: DEFAULT_TIE_TOL }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Chores maximising `p_j / d_j` up to a relative tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct MpbSet {
    pub chores: Vec<usize>,
    pub mpb_value: f64,
}

pub fn disutility(spec: &DisutilitySpec, x: &[f64]) -> f64 {
    match spec {
        DisutilitySpec::Linear { weights } => weights.iter().zip(x).map(|(d, x)| d * x).sum(),
        DisutilitySpec::Ces { weights, rho } => {
            let xmax = x.iter().copied().fold(0.0, f64::max);
            if xmax == 0.0 {
                return 0.0;
            }
            let s: f64 = weights.iter().zip(x).map(|(d, &x)| d * (x / xmax).powf(*rho)).sum();
            xmax * s.powf(1.0 / rho)
        }
    }
}

fn max_ratio(weights: &[f64], p: &[f64]) -> Result<f64, DemandError> {
    if weights.len() != p.len() {
        return Err(DemandError::DimensionMismatch { expected: weights.len(), found: p.len() });
    }
    let r = weights.iter().zip(p).map(|(d, p)| p / d).fold(0.0, f64::max);
    if r > 0.0 {
        Ok(r)
    } else {
        Err(DemandError::ZeroPriceVector)
    }
}

/// `d∘(p) = max{⟨p,x⟩ : d(x) ≤ 1}`, the most an agent earns per unit of disutility.
pub fn gauge_dual(spec: &DisutilitySpec, p: &[f64]) -> Result<f64, DemandError> {
    let rmax = max_ratio(spec.weights(), p)?;
    match spec {
        DisutilitySpec::Linear { .. } => Ok(rmax),
        DisutilitySpec::Ces { weights, .. } => {
            let sigma = spec.sigma().unwrap();
            Ok(rmax * ces_scaled_sum(weights, p, rmax, sigma).powf(1.0 / sigma))
        }
    }
}

/// `log d∘(p)`, without forming `d∘` when σ is large.
pub fn log_gauge_dual(spec: &DisutilitySpec, p: &[f64]) -> Result<f64, DemandError> {
    let rmax = max_ratio(spec.weights(), p)?;
    match spec {
        DisutilitySpec::Linear { .. } => Ok(rmax.ln()),
        DisutilitySpec::Ces { weights, .. } => {
            let sigma = spec.sigma().unwrap();
            Ok(rmax.ln() + ces_scaled_sum(weights, p, rmax, sigma).ln() / sigma)
        }
    }
}

// Σ d_j (r_j / r_max)^σ with r_j = p_j/d_j; equals d∘(p)^σ / r_max^σ.
fn ces_scaled_sum(weights: &[f64], p: &[f64], rmax: f64, sigma: f64) -> f64 {
    weights
        .iter()
        .zip(p)
        .filter(|(_, &p)| p > 0.0)
        .map(|(d, p)| d * (p / d / rmax).powf(sigma))
        .sum()
}

/// Gradient of the CES gauge dual, `(r_j / d∘(p))^{σ−1}` with `r_j = p_j/d_j`.
/// It is the unit-disutility bundle that earns the most at `p`.
pub fn gauge_dual_gradient(spec: &DisutilitySpec, p: &[f64]) -> Result<Vec<f64>, DemandError> {
    let DisutilitySpec::Ces { weights, .. } = spec else {
        return Err(DemandError::NotApplicableLinear);
    };
    if let Some(j) = p.iter().position(|&v| !(v > 0.0)) {
        return Err(DemandError::NonPositivePrice(j));
    }
    let sigma = spec.sigma().unwrap();
    let g = gauge_dual(spec, p)?;
    Ok(weights.iter().zip(p).map(|(d, p)| (p / d / g).powf(sigma - 1.0)).collect())
}

pub fn mpb_set(weights: &[f64], p: &[f64], tie_tol: f64) -> Result<MpbSet, DemandError> {
    let mpb_value = max_ratio(weights, p)?;
    let threshold = mpb_value - tie_tol * mpb_value;
    let chores = weights.iter().zip(p).enumerate().filter(|(_, (d, p))| *p / *d >= threshold).map(|(j, _)| j).collect();
    Ok(MpbSet { chores, mpb_value })
}

/// Optimal bundle for an agent who must earn `budget` at prices `p`.
/// Linear ties are resolved by `tie`; CES demand is unique.
pub fn demand(spec: &DisutilitySpec, p: &[f64], budget: f64, tie: &TieBreaking) -> Result<Vec<f64>, DemandError> {
    let mut x = vec![0.0; p.len()];
    demand_into(spec, p, budget, tie, &mut x)?;
    Ok(x)
}

/// Allocation-free form of [`demand`]; writes the bundle into `x`.
pub fn demand_into(
    spec: &DisutilitySpec,
    p: &[f64],
    budget: f64,
    tie: &TieBreaking,
    x: &mut [f64],
) -> Result<(), DemandError> {
    let weights = spec.weights();
    let rmax = max_ratio(weights, p)?;
    x.iter_mut().for_each(|v| *v = 0.0);
    match spec {
        DisutilitySpec::Linear { .. } => {
            let threshold = rmax - tie.tol * rmax;
            let in_mpb = |j: usize| p[j] / weights[j] >= threshold;
            match &tie.rule {
                TieRule::LowestIndex => {
                    let j = (0..p.len()).find(|&j| in_mpb(j)).expect("argmax is in the set");
                    x[j] = budget / p[j];
                }
                TieRule::UniformSplit => {
                    let count = (0..p.len()).filter(|&j| in_mpb(j)).count() as f64;
                    for j in (0..p.len()).filter(|&j| in_mpb(j)) {
                        x[j] = budget / count / p[j];
                    }
                }
                TieRule::Weighted(lambda) => {
                    let total: f64 = (0..p.len()).filter(|&j| in_mpb(j)).map(|j| lambda.get(j).copied().unwrap_or(0.0)).sum();
                    if total > 0.0 {
                        for j in (0..p.len()).filter(|&j| in_mpb(j)) {
                            x[j] = budget * lambda.get(j).copied().unwrap_or(0.0) / total / p[j];
                        }
                    } else {
                        return demand_into(spec, p, budget, &TieBreaking { rule: TieRule::UniformSplit, tol: tie.tol }, x);
                    }
                }
            }
        }
        DisutilitySpec::Ces { rho, .. } => {
            // x_j ∝ r_j^{1/(ρ−1)}; normalising by r_max keeps every power ≤ 1
            let e = 1.0 / (rho - 1.0);
            let log_space = *rho < 1.01;
            for j in 0..p.len() {
                if p[j] > 0.0 {
                    let ratio = p[j] / weights[j] / rmax;
                    x[j] = if log_space {
                        (e * ratio.ln()).exp()
                    } else if e == 1.0 {
                        ratio
                    } else if e == 0.5 {
                        ratio.sqrt()
                    } else {
                        ratio.powf(e)
                    };
                }
            }
        }
    }
    // exact budget: rescale so that ⟨p, x⟩ = budget
    let earned: f64 = x.iter().zip(p).filter(|(_, &p)| p > 0.0).map(|(x, p)| x * p).sum();
    let scale = budget / earned;
    x.iter_mut().for_each(|v| *v *= scale);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lin(d: &[f64]) -> DisutilitySpec {
        DisutilitySpec::linear(d.to_vec())
    }

    fn ces(d: &[f64], rho: f64) -> DisutilitySpec {
        DisutilitySpec::ces(d.to_vec(), rho)
    }

    #[test]
    fn disutility_values() {
        assert_relative_eq!(disutility(&lin(&[1.0, 2.0]), &[0.8, 0.0]), 0.8);
        assert_eq!(disutility(&ces(&[1.0, 3.0], 2.5), &[0.0, 0.0]), 0.0);
        assert_eq!(disutility(&lin(&[1.0, 3.0]), &[0.0, 0.0]), 0.0);
        assert_relative_eq!(disutility(&ces(&[1.0, 1.0], 2.0), &[3.0, 4.0]), 5.0, max_relative = 1e-15);
    }

    /// max ⟨p,x⟩ over the unit sublevel set, scanning the boundary for m = 2.
    fn gauge_dual_grid(d: [f64; 2], rho: f64, p: [f64; 2]) -> f64 {
        let steps = 200_000;
        let x1_max = d[0].powf(-1.0 / rho);
        (0..=steps)
            .map(|s| {
                let x1 = x1_max * s as f64 / steps as f64;
                let x2 = ((1.0 - d[0] * x1.powf(rho)).max(0.0) / d[1]).powf(1.0 / rho);
                p[0] * x1 + p[1] * x2
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gauge_dual_values() {
        assert_relative_eq!(gauge_dual(&lin(&[1.0, 2.0]), &[4.0 / 3.0, 2.0 / 3.0]).unwrap(), 4.0 / 3.0);
        assert_relative_eq!(gauge_dual(&ces(&[1.0, 1.0], 2.0), &[3.0, 4.0]).unwrap(), 5.0, max_relative = 1e-15);
        assert!((gauge_dual_grid([1.0, 1.0], 2.0, [3.0, 4.0]) - 5.0).abs() < 1e-8);
        for rho in [1.5, 2.0, 3.0, 7.0] {
            let e = [0.0, 0.0, 1.0];
            assert_relative_eq!(gauge_dual(&ces(&[1.0; 3], rho), &e).unwrap(), 1.0, max_relative = 1e-15);
        }
        assert_eq!(gauge_dual(&lin(&[1.0, 2.0]), &[0.0, 0.0]), Err(DemandError::ZeroPriceVector));
    }

    #[test]
    fn gauge_dual_matches_grid_max() {
        for (d, rho, p) in [([1.0, 3.0], 1.5, [0.7, 0.2]), ([2.0, 0.5], 3.0, [1.0, 1.3]), ([1.0, 1.0], 2.0, [0.1, 2.0])] {
            let closed = gauge_dual(&ces(&d, rho), &p).unwrap();
            assert!((closed - gauge_dual_grid(d, rho, p)).abs() <= 1e-6 * closed);
        }
    }

    #[test]
    fn large_sigma_does_not_overflow() {
        let spec = ces(&[1e-3, 2.0, 5.0], 1.001);
        let p = [50.0, 20.0, 80.0];
        let g = gauge_dual(&spec, &p).unwrap();
        assert!(g.is_finite());
        assert_relative_eq!(g, 50.0 / 1e-3, max_relative = 1e-2);
        assert!(log_gauge_dual(&spec, &p).unwrap().is_finite());
        let x = demand(&spec, &p, 1.0, &TieBreaking::default()).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_values() {
        let g = gauge_dual_gradient(&ces(&[1.0, 1.0], 2.0), &[3.0, 4.0]).unwrap();
        assert_relative_eq!(g[0], 0.6, max_relative = 1e-14);
        assert_relative_eq!(g[1], 0.8, max_relative = 1e-14);
        for c in [0.01, 1.0, 300.0] {
            let g = gauge_dual_gradient(&ces(&[1.0, 1.0], 2.0), &[c, c]).unwrap();
            assert_relative_eq!(g[0], std::f64::consts::FRAC_1_SQRT_2, max_relative = 1e-14);
        }
        let spec = ces(&[1.0, 1.0], 3.0);
        let g = gauge_dual_gradient(&spec, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(g[0], g[1]);
        assert_relative_eq!(disutility(&spec, &g), 1.0, max_relative = 1e-14);
        assert_eq!(gauge_dual_gradient(&lin(&[1.0, 1.0]), &[1.0, 1.0]), Err(DemandError::NotApplicableLinear));
        assert_eq!(gauge_dual_gradient(&spec, &[1.0, 0.0]), Err(DemandError::NonPositivePrice(1)));
    }

    fn central_difference(spec: &DisutilitySpec, p: &[f64], h: f64) -> Vec<f64> {
        (0..p.len())
            .map(|j| {
                let mut hi = p.to_vec();
                let mut lo = p.to_vec();
                hi[j] += h;
                lo[j] -= h;
                (gauge_dual(spec, &hi).unwrap() - gauge_dual(spec, &lo).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn mpb_sets() {
        let s = mpb_set(&[2.0, 1.0], &[4.0 / 3.0, 2.0 / 3.0], DEFAULT_TIE_TOL).unwrap();
        assert_eq!(s.chores, vec![0, 1]);
        assert_relative_eq!(s.mpb_value, 2.0 / 3.0);
        assert_eq!(mpb_set(&[1.0, 2.0], &[4.0 / 3.0, 2.0 / 3.0], DEFAULT_TIE_TOL).unwrap().chores, vec![0]);
        assert_eq!(mpb_set(&[1.0, 1.0], &[0.3, 0.3], DEFAULT_TIE_TOL).unwrap().chores, vec![0, 1]);
    }

    #[test]
    fn demand_values() {
        let tie = TieBreaking::default();
        let x = demand(&lin(&[1.0, 2.0]), &[1.25, 0.75], 1.0, &tie).unwrap();
        assert_relative_eq!(x[0], 0.8);
        assert_eq!(x[1], 0.0);
        let x = demand(&lin(&[2.0, 1.0]), &[1.25, 0.75], 1.0, &tie).unwrap();
        assert_eq!(x[0], 0.0);
        assert_relative_eq!(x[1], 4.0 / 3.0);
        let x = demand(&ces(&[1.0, 1.0], 2.0), &[1.0, 1.0], 1.0, &tie).unwrap();
        assert_relative_eq!(x[0], 0.5);
        assert_relative_eq!(x[1], 0.5);
    }

    #[test]
    fn tie_rules() {
        let spec = lin(&[1.0, 1.0, 3.0]);
        let p = [1.0, 1.0, 0.5];
        let uni = demand(&spec, &p, 2.0, &TieBreaking::default()).unwrap();
        assert_eq!(uni, vec![1.0, 1.0, 0.0]);
        let low = demand(&spec, &p, 2.0, &TieBreaking::new(TieRule::LowestIndex)).unwrap();
        assert_eq!(low, vec![2.0, 0.0, 0.0]);
        let w = demand(&spec, &p, 2.0, &TieBreaking::new(TieRule::Weighted(vec![0.25, 0.5, 0.25]))).unwrap();
        assert_relative_eq!(w[0], 2.0 / 3.0);
        assert_relative_eq!(w[1], 4.0 / 3.0);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn zero_priced_chores_get_nothing() {
        let x = demand(&ces(&[1.0, 1.0, 1.0], 2.0), &[0.0, 1.0, 2.0], 1.0, &TieBreaking::default()).unwrap();
        assert_eq!(x[0], 0.0);
        let x = demand(&lin(&[1.0, 1.0]), &[-0.5, 2.0], 1.0, &TieBreaking::default()).unwrap();
        assert_eq!(x, vec![0.0, 0.5]);
        assert_eq!(demand(&lin(&[1.0, 1.0]), &[0.0, 0.0], 1.0, &TieBreaking::default()), Err(DemandError::ZeroPriceVector));
    }

    fn arb_spec(m: usize) -> impl Strategy<Value = DisutilitySpec> {
        (prop::collection::vec(0.2f64..5.0, m), prop_oneof![Just(1.0), 1.05f64..4.0]).prop_map(|(w, rho)| {
            if rho == 1.0 {
                DisutilitySpec::linear(w)
            } else {
                DisutilitySpec::ces(w, rho)
            }
        })
    }

    /// Minimum disutility over a grid of the budget line `{⟨p,y⟩ = b, y ≥ 0}`.
    fn budget_line_min(spec: &DisutilitySpec, p: &[f64], b: f64, pitch: f64) -> f64 {
        let steps = (1.0 / pitch).round() as usize;
        let mut best = f64::INFINITY;
        match p.len() {
            2 => {
                for s in 0..=steps {
                    let share = s as f64 / steps as f64;
                    let y = [share * b / p[0], (1.0 - share) * b / p[1]];
                    best = best.min(disutility(spec, &y));
                }
            }
            3 => {
                for s in 0..=steps {
                    for t in 0..=(steps - s) {
                        let a = s as f64 / steps as f64;
                        let c = t as f64 / steps as f64;
                        let y = [a * b / p[0], c * b / p[1], (1.0 - a - c).max(0.0) * b / p[2]];
                        best = best.min(disutility(spec, &y));
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn budget_is_met_exactly(spec in arb_spec(4), p in prop::collection::vec(0.01f64..10.0, 4), b in 0.1f64..5.0) {
            let x = demand(&spec, &p, b, &TieBreaking::default()).unwrap();
            let earned: f64 = x.iter().zip(&p).map(|(x, p)| x * p).sum();
            prop_assert!((earned - b).abs() <= 1e-12 * b);
            prop_assert!(x.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn demand_beats_budget_line_grid_m2(spec in arb_spec(2), p in prop::collection::vec(0.05f64..5.0, 2), b in 0.2f64..3.0) {
            let x = demand(&spec, &p, b, &TieBreaking::default()).unwrap();
            prop_assert!(disutility(&spec, &x) <= budget_line_min(&spec, &p, b, 1e-3) + 1e-6);
        }

        #[test]
        fn mpb_set_is_scale_invariant(w in prop::collection::vec(0.2f64..5.0, 4), p in prop::collection::vec(0.01f64..10.0, 4), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
            prop_assert_eq!(mpb_set(&w, &p, 1e-9).unwrap().chores, mpb_set(&w, &scaled, 1e-9).unwrap().chores);
        }

        #[test]
        fn gauge_dual_is_homogeneous(spec in arb_spec(3), p in prop::collection::vec(0.0f64..10.0, 3), c in 0.01f64..100.0) {
            prop_assume!(p.iter().any(|&v| v > 0.0));
            let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
            let a = gauge_dual(&spec, &p).unwrap() * c;
            let b = gauge_dual(&spec, &scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        }

        #[test]
        fn gradient_matches_finite_differences(
            w in prop::collection::vec(0.2f64..5.0, 3),
            p in prop::collection::vec(0.1f64..3.0, 3),
            rho in prop::sample::select(vec![1.5, 2.0, 3.0]),
        ) {
            let spec = DisutilitySpec::ces(w, rho);
            let g = gauge_dual_gradient(&spec, &p).unwrap();
            let fd = central_difference(&spec, &p, 1e-6);
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-5 * norm, "err {} norm {}", err, norm);
        }
    }

    #[test]
    fn demand_beats_budget_line_grid_m3() {
        let specs = [lin(&[1.0, 2.0, 0.7]), ces(&[1.0, 2.0, 0.7], 1.5), ces(&[3.0, 1.0, 1.0], 2.0), ces(&[1.0, 1.5, 2.5], 3.0)];
        let prices = [[1.0, 1.0, 1.0], [0.3, 2.0, 0.9], [2.0, 0.4, 1.1]];
        for spec in &specs {
            for p in &prices {
                let x = demand(spec, p, 1.3, &TieBreaking::default()).unwrap();
                assert!(disutility(spec, &x) <= budget_line_min(spec, p, 1.3, 1e-3) + 1e-6);
            }
        }
    }
}
