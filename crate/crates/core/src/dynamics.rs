//! Excess demand and discrete-time tatonnement.
//!
//! Relative tatonnement `p ← p − η z̃` never projects: prices stay on the
//! simplex because `Σ z̃ = 0`, and stay positive because every step is capped
//! at `ℓ0²/(2‖B‖₁)`. The cap is therefore a hard error in [`step_relative`].

use crate::demand::{demand_into, mpb_set, DemandError, TieBreaking};
use crate::market::{DisutilitySpec, Market};
use crate::minnorm::min_norm_point;
use crate::potential::{potential_f, smoothness_certificate, PotentialError, Regime};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("step {eta} exceeds the relative tatonnement cap {cap}")]
    StepTooLarge { eta: f64, cap: f64 },
    #[error("initial prices must be nonnegative and sum to the total budget (residual {residual})")]
    NotInSimplex { residual: f64 },
    #[error("initial prices must be nonnegative")]
    NegativePrice,
    #[error("expected {expected} prices, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),
    #[error("warm-start phase did not reach the safe region within {bound} iterations")]
    WarmStartExceeded { bound: usize },
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Prices on the chores together with the total budget they should sum to.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceVector {
    p: Vec<f64>,
    budget_sum: f64,
}

impl PriceVector {
    pub fn new(p: Vec<f64>, budget_sum: f64) -> Self {
        PriceVector { p, budget_sum }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }

    /// `Σp − ‖B‖₁`
    pub fn simplex_residual(&self) -> f64 {
        compensated_sum(self.p.iter().copied()) - self.budget_sum
    }
}

fn check_len(market: &Market, p: &[f64]) -> Result<(), DynamicsError> {
    if p.len() != market.m() {
        return Err(DynamicsError::DimensionMismatch { expected: market.m(), found: p.len() });
    }
    Ok(())
}

fn excess_into(market: &Market, p: &[f64], tie: &TieBreaking, x: &mut [f64], z: &mut [f64]) -> Result<(), DynamicsError> {
    z.iter_mut().for_each(|v| *v = -1.0);
    for a in market.agents() {
        demand_into(&a.disutility, p, a.budget, tie, x)?;
        for (zj, xj) in z.iter_mut().zip(x.iter()) {
            *zj += xj;
        }
    }
    Ok(())
}

/// `z = Σ_i x_i − 1` for the demand selection picked by `tie`.
pub fn excess_demand(market: &Market, p: &[f64], tie: &TieBreaking) -> Result<Vec<f64>, DynamicsError> {
    check_len(market, p)?;
    let mut x = vec![0.0; p.len()];
    let mut z = vec![0.0; p.len()];
    excess_into(market, p, tie, &mut x, &mut z)?;
    Ok(z)
}

/// Subtracts the mean so that the entries sum to zero.
pub fn center(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    center_in_place(&mut out);
    out
}

fn center_in_place(z: &mut [f64]) {
    let mean = compensated_sum(z.iter().copied()) / z.len() as f64;
    z.iter_mut().for_each(|v| *v -= mean);
}

/// `z̃ = z − mean(z)·1`
pub fn relative_excess_demand(market: &Market, p: &[f64], tie: &TieBreaking) -> Result<Vec<f64>, DynamicsError> {
    Ok(center(&excess_demand(market, p, tie)?))
}

/// The element of the relative excess demand set (over all MPB splits of the
/// linear agents) with the smallest Euclidean norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MinNormSelection {
    pub z_tilde: Vec<f64>,
    pub z: Vec<f64>,
    pub allocation: Vec<Vec<f64>>,
    /// MPB tolerance the split was taken over.
    pub tie_tol: f64,
}

pub fn min_norm_selection(market: &Market, p: &[f64], tie_tol: f64) -> Result<MinNormSelection, DynamicsError> {
    check_len(market, p)?;
    let m = market.m();
    let single = TieBreaking::default().with_tol(tie_tol);
    let mut allocation = vec![vec![0.0; m]; market.n()];
    let mut base = vec![-1.0; m];
    // linear agents with several MPB chores, with those chores
    let mut tied: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, a) in market.agents().iter().enumerate() {
        if let DisutilitySpec::Linear { weights } = &a.disutility {
            let set = mpb_set(weights, p, tie_tol)?;
            if set.chores.len() > 1 {
                tied.push((i, set.chores));
                continue;
            }
        }
        demand_into(&a.disutility, p, a.budget, &single, &mut allocation[i])?;
        for (b, x) in base.iter_mut().zip(&allocation[i]) {
            *b += x;
        }
    }
    if !tied.is_empty() {
        let vertex = |choice: &[usize]| {
            let mut v = base.clone();
            for ((i, _), &j) in tied.iter().zip(choice) {
                v[j] += market.budget(*i) / p[j];
            }
            center(&v)
        };
        let start: Vec<usize> = tied.iter().map(|(_, s)| s[0]).collect();
        let oracle = |x: &[f64]| {
            // x lies in the sum-zero plane, so ⟨x, centred e_j⟩ = x_j
            let choice: Vec<usize> = tied
                .iter()
                .map(|(i, set)| {
                    let b = market.budget(*i);
                    *set.iter().min_by(|&&a, &&c| (x[a] * b / p[a]).partial_cmp(&(x[c] * b / p[c])).unwrap()).unwrap()
                })
                .collect();
            (vertex(&choice), choice)
        };
        let result = min_norm_point((vertex(&start), start), oracle, 1e-26);
        for (choice, w) in &result.atoms {
            for ((i, _), &j) in tied.iter().zip(choice) {
                allocation[*i][j] += w * market.budget(*i) / p[j];
            }
        }
    }
    let mut z = vec![-1.0; m];
    for x in &allocation {
        for (zj, xj) in z.iter_mut().zip(x) {
            *zj += xj;
        }
    }
    let z_tilde = center(&z);
    Ok(MinNormSelection { z_tilde, z, allocation, tie_tol })
}

pub fn step_naive(p: &[f64], eta: f64, z: &[f64]) -> Vec<f64> {
    p.iter().zip(z).map(|(p, z)| p - eta * z).collect()
}

/// Relative step; rejected if `eta` exceeds `cap` (normally [`Market::step_cap`]).
pub fn step_relative(p: &[f64], eta: f64, z_tilde: &[f64], cap: f64) -> Result<Vec<f64>, DynamicsError> {
    if eta > cap {
        return Err(DynamicsError::StepTooLarge { eta, cap });
    }
    Ok(p.iter().zip(z_tilde).map(|(p, z)| p - eta * z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepRule {
    Constant(f64),
    /// `η_k = min(cap, c/(k+1))`; `None` uses `c = cap`.
    CappedHarmonic(Option<f64>),
    /// `η = min(cap, 1/(2L))` from the smoothness certificate, CES markets only.
    SmoothConstant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub eta: f64,
    /// Phase 1 ends once every price is at least this.
    pub threshold: f64,
    pub max_iters: usize,
}

/// A step rule resolved against a market.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub rule: StepRule,
    pub cap: f64,
    smooth_eta: f64,
    pub warm_start: Option<WarmStart>,
}

impl StepSchedule {
    /// Schedule for relative tatonnement; every step is capped at `ℓ0²/(2‖B‖₁)`.
    pub fn relative(market: &Market, rule: StepRule) -> Result<Self, DynamicsError> {
        let cap = market.step_cap();
        validate_rule(&rule)?;
        let mut schedule = StepSchedule { rule, cap, smooth_eta: cap, warm_start: None };
        if schedule.rule == StepRule::SmoothConstant {
            let cert = smoothness_certificate(market)?;
            schedule.smooth_eta = cap.min(1.0 / (2.0 * cert.composite_l));
            if matches!(cert.regime, Regime::RhoGt2Local(_)) {
                let m = market.m() as f64;
                let nu_min = market.moduli().nu.iter().copied().fold(f64::INFINITY, f64::min);
                schedule.warm_start = Some(WarmStart {
                    eta: (market.budget_sum() / (18.0 * m * m) * nu_min * nu_min).min(cap),
                    threshold: market.moduli().ell0 / 2.0,
                    max_iters: (18.0 * m.powi(3) / nu_min).ceil() as usize,
                });
            }
        }
        Ok(schedule)
    }

    /// Uncapped schedule for naive tatonnement.
    pub fn naive(rule: StepRule) -> Result<Self, DynamicsError> {
        validate_rule(&rule)?;
        match rule {
            StepRule::SmoothConstant => Err(DynamicsError::InvalidSchedule("smooth step needs the relative mode".into())),
            StepRule::CappedHarmonic(None) => {
                Err(DynamicsError::InvalidSchedule("naive harmonic schedule needs an explicit constant".into()))
            }
            rule => Ok(StepSchedule { rule, cap: f64::INFINITY, smooth_eta: f64::INFINITY, warm_start: None }),
        }
    }

    /// Step at iteration `k`; `warm` selects the phase-1 step when a warm start applies.
    pub fn eta(&self, k: usize, warm: bool) -> f64 {
        if warm {
            if let Some(w) = &self.warm_start {
                return w.eta;
            }
        }
        match self.rule {
            StepRule::Constant(eta) => eta.min(self.cap),
            StepRule::CappedHarmonic(c) => (c.unwrap_or(self.cap) / (k as f64 + 1.0)).min(self.cap),
            StepRule::SmoothConstant => self.smooth_eta,
        }
    }
}

fn validate_rule(rule: &StepRule) -> Result<(), DynamicsError> {
    let bad = |v: f64| !(v > 0.0 && v.is_finite());
    match rule {
        StepRule::Constant(eta) if bad(*eta) => Err(DynamicsError::InvalidSchedule(format!("step {eta}"))),
        StepRule::CappedHarmonic(Some(c)) if bad(*c) => Err(DynamicsError::InvalidSchedule(format!("constant {c}"))),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Naive,
    Relative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopRule {
    /// Stop once the stationarity measure is at most this.
    pub eps: f64,
    pub max_iters: usize,
    pub record_every: usize,
    /// Naive runs stop as diverged once `Σp > divergence_factor·‖B‖₁`.
    pub divergence_factor: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { eps: 1e-6, max_iters: 1_000_000, record_every: 1, divergence_factor: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum StopReason {
    EpsStationary,
    MaxIters,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    pub k: usize,
    pub prices: Vec<f64>,
    pub eta: f64,
    pub f: f64,
    /// Stationarity measure: `‖z̃‖` (relative) or `‖z‖` (naive).
    pub znorm_rel: f64,
    pub znorm_inf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<Iterate>,
    pub stop_reason: StopReason,
    /// Index of the last iterate.
    pub iterations: usize,
    pub final_prices: PriceVector,
    /// MPB tolerance under which the final stationarity measure was taken.
    pub final_tie_tol: f64,
    /// Iterations spent in the warm-start phase, when one applied.
    pub phase1_iters: Option<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &Iterate {
        self.iterates.last().expect("trajectory records its final iterate")
    }
}

/// Everything known about iterate `k` before the step is taken.
pub struct IterateView<'a> {
    pub k: usize,
    pub prices: &'a [f64],
    pub eta: f64,
    pub z: &'a [f64],
    pub z_tilde: &'a [f64],
    pub measure: f64,
    pub in_warm_start: bool,
}

/// Largest MPB tolerance used when measuring stationarity of linear markets.
pub const MAX_STATIONARITY_WINDOW: f64 = 1e-3;

/// Runs tatonnement; see [`run_observed`].
pub fn run(
    market: &Market,
    p0: &[f64],
    schedule: &StepSchedule,
    mode: Mode,
    tie: &TieBreaking,
    stop: &StopRule,
) -> Result<Trajectory, DynamicsError> {
    run_observed(market, p0, schedule, mode, tie, stop, |_| {})
}

/// Runs tatonnement from `p0`, calling `observer` on every iterate.
///
/// Relative mode measures stationarity by `‖z̃‖`. For linear agents the
/// demand is set-valued and the tie-rule selection zigzags across kinks, so
/// the measure is the min-norm element over MPB splits within a tolerance
/// window of the order of the current step's relative price move, clamped
/// to `[tie.tol, min(stop.eps, MAX_STATIONARITY_WINDOW)]`. A stop therefore
/// certifies bundles optimal to within the window and clearing to `2·eps`.
/// Naive mode uses `‖z‖`.
pub fn run_observed<F>(
    market: &Market,
    p0: &[f64],
    schedule: &StepSchedule,
    mode: Mode,
    tie: &TieBreaking,
    stop: &StopRule,
    mut observer: F,
) -> Result<Trajectory, DynamicsError>
where
    F: FnMut(&IterateView),
{
    check_len(market, p0)?;
    let b_sum = market.budget_sum();
    if p0.iter().any(|&v| !(v >= 0.0)) {
        return Err(DynamicsError::NegativePrice);
    }
    if mode == Mode::Relative {
        let residual = compensated_sum(p0.iter().copied()) - b_sum;
        if residual.abs() > 1e-9 * b_sum {
            return Err(DynamicsError::NotInSimplex { residual });
        }
        if schedule.cap > market.step_cap() {
            return Err(DynamicsError::StepTooLarge { eta: schedule.cap, cap: market.step_cap() });
        }
    }
    let m = market.m();
    let has_linear = market.agents().iter().any(|a| a.disutility.is_linear());
    let record_every = stop.record_every.max(1);
    let mut p = p0.to_vec();
    let mut x = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut zt = vec![0.0; m];
    let mut iterates = Vec::new();
    let mut warm = schedule.warm_start.is_some();
    let mut phase1_iters = None;
    let mut k = 0usize;
    loop {
        excess_into(market, &p, tie, &mut x, &mut z)?;
        zt.copy_from_slice(&z);
        center_in_place(&mut zt);
        if warm {
            let w = schedule.warm_start.as_ref().unwrap();
            if p.iter().all(|&v| v >= w.threshold) {
                warm = false;
                phase1_iters = Some(k);
            } else if k >= w.max_iters {
                return Err(DynamicsError::WarmStartExceeded { bound: w.max_iters });
            }
        }
        let eta = schedule.eta(k, warm);
        let (measure, znorm_inf, tie_tol) = match mode {
            Mode::Naive => (norm2(&z), norm_inf(&z), tie.tol),
            Mode::Relative if has_linear => {
                linear_stationarity(market, &p, &z, &zt, eta, tie.tol, stop.eps.min(MAX_STATIONARITY_WINDOW))?
            }
            Mode::Relative => (norm2(&zt), norm_inf(&z), tie.tol),
        };
        observer(&IterateView { k, prices: &p, eta, z: &z, z_tilde: &zt, measure, in_warm_start: warm });

        let reason = if mode == Mode::Naive && compensated_sum(p.iter().copied()) > stop.divergence_factor * b_sum {
            Some(StopReason::Diverged)
        } else if measure <= stop.eps {
            Some(StopReason::EpsStationary)
        } else if k >= stop.max_iters {
            Some(StopReason::MaxIters)
        } else {
            None
        };
        if reason.is_some() || k.is_multiple_of(record_every) {
            let f = potential_f(market, &p)?.f;
            iterates.push(Iterate { k, prices: p.clone(), eta, f, znorm_rel: measure, znorm_inf });
        }
        if let Some(stop_reason) = reason {
            return Ok(Trajectory {
                iterates,
                stop_reason,
                iterations: k,
                final_prices: PriceVector::new(p, b_sum),
                final_tie_tol: tie_tol,
                phase1_iters,
            });
        }
        match mode {
            Mode::Naive => p.iter_mut().zip(&z).for_each(|(p, z)| *p -= eta * z),
            Mode::Relative => {
                if eta > schedule.cap {
                    return Err(DynamicsError::StepTooLarge { eta, cap: schedule.cap });
                }
                p.iter_mut().zip(&zt).for_each(|(p, z)| *p -= eta * z)
            }
        }
        k += 1;
    }
}

/// Returns `(measure, ‖z‖∞, window)` for a market with linear agents.
fn linear_stationarity(
    market: &Market,
    p: &[f64],
    z: &[f64],
    zt: &[f64],
    eta: f64,
    tie_tol: f64,
    max_window: f64,
) -> Result<(f64, f64, f64), DynamicsError> {
    let pmin = p.iter().copied().fold(f64::INFINITY, f64::min);
    let move_rel = if pmin > 0.0 { 4.0 * eta * norm_inf(zt) / pmin } else { f64::INFINITY };
    let window = move_rel.min(max_window).max(tie_tol);
    let tied = market.agents().iter().any(|a| match &a.disutility {
        DisutilitySpec::Linear { weights } => mpb_set(weights, p, window).map(|s| s.chores.len() > 1).unwrap_or(false),
        _ => false,
    });
    if !tied {
        return Ok((norm2(zt), norm_inf(z), window));
    }
    let sel = min_norm_selection(market, p, window)?;
    Ok((norm2(&sel.z_tilde), norm_inf(&sel.z), window))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::TieRule;
    use crate::market::Agent;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn example_one() -> Market {
        Market::new(
            2,
            vec![
                Agent { budget: 1.0, disutility: DisutilitySpec::linear(vec![1.0, 2.0]) },
                Agent { budget: 1.0, disutility: DisutilitySpec::linear(vec![2.0, 1.0]) },
            ],
        )
        .unwrap()
    }

    fn divergence_instance(rho: f64) -> Market {
        let disutility = if rho == 1.0 { DisutilitySpec::linear(vec![1.0, 1.0]) } else { DisutilitySpec::ces(vec![1.0, 1.0], rho) };
        Market::new(2, vec![Agent { budget: 1.0, disutility }]).unwrap()
    }

    #[test]
    fn excess_demand_examples() {
        let m = example_one();
        let p = [4.0 / 3.0, 2.0 / 3.0];
        // agent 2 ties; spending 1/3 of the budget on chore 1 clears the market
        let tie = TieBreaking::new(TieRule::Weighted(vec![1.0 / 3.0, 2.0 / 3.0]));
        let z = excess_demand(&m, &p, &tie).unwrap();
        assert!(norm_inf(&z) < 1e-12);
        assert!(norm_inf(&relative_excess_demand(&m, &p, &tie).unwrap()) < 1e-12);

        let z = excess_demand(&divergence_instance(1.0), &[0.6, 0.5], &TieBreaking::default()).unwrap();
        assert_relative_eq!(z[0], 1.0 / 0.6 - 1.0, max_relative = 1e-14);
        assert_eq!(z[1], -1.0);
        let zt = center(&z);
        assert_relative_eq!(zt[0], 0.833_333_333_333_333_3, max_relative = 1e-12);
        assert_relative_eq!(zt[1], -0.833_333_333_333_333_3, max_relative = 1e-12);
        assert_eq!(center(&[0.3, 0.3, 0.3]), vec![0.0; 3]);
    }

    #[test]
    fn steps() {
        assert_eq!(step_relative(&[1.0, 1.0], 0.1, &[0.5, -0.5], 1.0).unwrap(), vec![0.95, 1.05]);
        assert!(matches!(step_relative(&[1.0, 1.0], 0.1, &[0.5, -0.5], 0.01), Err(DynamicsError::StepTooLarge { .. })));
        let z = [0.4, -0.2];
        assert_eq!(step_naive(&[0.7, 0.3], 0.0, &z), vec![0.7, 0.3]);
    }

    #[test]
    fn stationary_start_takes_zero_iterations() {
        let m = example_one();
        let s = StepSchedule::relative(&m, StepRule::CappedHarmonic(None)).unwrap();
        let t = run(&m, &[1.0, 1.0], &s, Mode::Relative, &TieBreaking::default(), &StopRule::default()).unwrap();
        assert_eq!(t.stop_reason, StopReason::EpsStationary);
        assert_eq!(t.iterations, 0);
        assert_eq!(t.iterates.len(), 1);
    }

    #[test]
    fn relative_step_at_ce_is_identity() {
        let m = example_one();
        let p = [4.0 / 3.0, 2.0 / 3.0];
        let sel = min_norm_selection(&m, &p, 1e-9).unwrap();
        assert!(norm_inf(&sel.z_tilde) < 1e-12);
        let next = step_relative(&p, m.step_cap(), &sel.z_tilde, m.step_cap()).unwrap();
        assert!((next[0] - p[0]).abs() < 1e-15 && (next[1] - p[1]).abs() < 1e-15);
        assert_relative_eq!(sel.allocation[1][0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(sel.allocation[1][1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ces_naive_diverges() {
        let m = divergence_instance(2.0);
        let s = StepSchedule::naive(StepRule::Constant(0.05)).unwrap();
        let t = run(&m, &[0.6, 0.5], &s, Mode::Naive, &TieBreaking::default(), &StopRule::default()).unwrap();
        assert_eq!(t.stop_reason, StopReason::Diverged);
        assert!(compensated_sum(t.final_prices.as_slice().iter().copied()) > 10.0);
    }

    #[test]
    fn example_one_converges_from_uniform_perturbation() {
        let m = example_one();
        let s = StepSchedule::relative(&m, StepRule::CappedHarmonic(Some(1.0))).unwrap();
        let stop = StopRule { eps: 1e-6, max_iters: 2_000_000, record_every: 1000, ..StopRule::default() };
        let t = run(&m, &[1.1, 0.9], &s, Mode::Relative, &TieBreaking::default(), &stop).unwrap();
        assert_eq!(t.stop_reason, StopReason::EpsStationary);
        let p = t.final_prices.as_slice();
        assert!((p[0] - 4.0 / 3.0).abs() < 1e-5, "{p:?} {:?} {:?}", t.stop_reason, t.last());
    }

    #[test]
    fn rejects_start_off_simplex_and_oversized_cap() {
        let m = example_one();
        let s = StepSchedule::relative(&m, StepRule::CappedHarmonic(None)).unwrap();
        let r = run(&m, &[1.0, 0.5], &s, Mode::Relative, &TieBreaking::default(), &StopRule::default());
        assert!(matches!(r, Err(DynamicsError::NotInSimplex { .. })));
        let naive = StepSchedule::naive(StepRule::Constant(0.5)).unwrap();
        let r = run(&m, &[1.2, 0.8], &naive, Mode::Relative, &TieBreaking::default(), &StopRule::default());
        assert!(matches!(r, Err(DynamicsError::StepTooLarge { .. })));
    }

    #[test]
    fn schedules_respect_cap() {
        let m = example_one();
        let cap = m.step_cap();
        let h = StepSchedule::relative(&m, StepRule::CappedHarmonic(None)).unwrap();
        assert_eq!(h.eta(0, false), cap);
        assert_eq!(h.eta(9, false), cap / 10.0);
        let c = StepSchedule::relative(&m, StepRule::Constant(1.0)).unwrap();
        assert_eq!(c.eta(5, false), cap);
        assert!(matches!(StepSchedule::relative(&m, StepRule::SmoothConstant), Err(DynamicsError::Potential(_))));
        assert!(StepSchedule::relative(&m, StepRule::Constant(-1.0)).is_err());
    }

    #[test]
    fn min_norm_picks_the_shortest_split() {
        let m = Market::new(2, vec![Agent { budget: 1.0, disutility: DisutilitySpec::linear(vec![1.0, 1.0]) }]).unwrap();
        let sel = min_norm_selection(&m, &[0.5, 0.5], 1e-9).unwrap();
        assert!(norm2(&sel.z_tilde) < 1e-12);
        assert_relative_eq!(sel.allocation[0][0], 1.0, max_relative = 1e-12);
        // off the tie the selection is the unique demand
        let sel = min_norm_selection(&m, &[0.6, 0.4], 1e-9).unwrap();
        assert_eq!(sel.allocation[0], vec![1.0 / 0.6, 0.0]);
    }

    fn simplex_point(raw: &[f64], total: f64) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s * total).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn centred_excess_sums_to_zero(z in prop::collection::vec(-5.0f64..5.0, 2..6)) {
            let zt = center(&z);
            prop_assert!(compensated_sum(zt.iter().copied()).abs() <= 1e-15 * (1.0 + norm_inf(&z)));
        }

        #[test]
        fn low_prices_lift_and_mean_is_bounded(
            w in prop::collection::vec(prop::collection::vec(0.5f64..2.0, 3), 1..4),
            raw in prop::collection::vec(0.0f64..1.0, 3),
            budgets in prop::collection::vec(0.5f64..1.5, 3),
            linear in any::<bool>(),
        ) {
            let agents: Vec<Agent> = w.iter().zip(&budgets).map(|(d, &b)| Agent {
                budget: b,
                disutility: if linear { DisutilitySpec::linear(d.clone()) } else { DisutilitySpec::ces(d.clone(), 1.7) },
            }).collect();
            let m = Market::new(3, agents).unwrap();
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let p = simplex_point(&raw, m.budget_sum());
            let ell0 = m.moduli().ell0;
            let eta = m.step_cap();
            let z = excess_demand(&m, &p, &TieBreaking::default()).unwrap();
            let mean = z.iter().sum::<f64>() / 3.0;
            if norm_inf(&p) <= 1.5 * m.budget_sum() {
                prop_assert!(mean >= 2.0 / 9.0 - 1.0 - 1e-12);
            }
            let zt = center(&z);
            let next = step_relative(&p, eta, &zt, eta).unwrap();
            for j in 0..3 {
                if p[j] <= ell0 {
                    prop_assert!(next[j] > p[j] + eta / 18.0);
                } else {
                    prop_assert!(next[j] > ell0 / 2.0);
                }
            }
        }
    }
}
