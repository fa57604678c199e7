//! Competitive equilibria: certification, grid search, Nash welfare and local
//! stability of linear-market equilibria.
//!
//! Stability is decided two ways. The combinatorial test looks for a set of
//! chores `J` that no agent links to its complement through the MPB graph and
//! the allocation. The variational test samples prices around the equilibrium
//! and checks the sign of `⟨z, p − p*⟩` over every extreme demand selection.

use crate::demand::{demand, disutility, gauge_dual, mpb_set, TieBreaking};
use crate::dynamics::{
    min_norm_selection, norm2, norm_inf, run, DynamicsError, Mode, StepRule, StepSchedule, StopReason, StopRule,
};
use crate::market::{DisutilitySpec, Market};
use crate::potential::potential_f;
use crate::simplex::{barycentric_grid, h0_basis, random_h0_direction};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EquilibriumError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("allocation has shape {found:?}, market needs {n} bundles of {m} chores")]
    DimensionMismatch { n: usize, m: usize, found: (usize, usize) },
    #[error("prices and allocation are not an equilibrium (clearing violation {eps})")]
    NotACE { eps: f64 },
    #[error("{m} chores exceed the subset-enumeration cap of {cap}")]
    TooManyChores { m: usize, cap: usize },
    #[error("stability is only characterised for linear markets")]
    NotLinear,
}

impl From<crate::demand::DemandError> for EquilibriumError {
    fn from(e: crate::demand::DemandError) -> Self {
        EquilibriumError::Dynamics(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stability {
    Stable,
    Unstable,
    NotClassified,
}

/// Outcome of one stability test.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub stable: bool,
    /// Chores (0-based) of a set that no agent connects to its complement.
    pub witness: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CriteriaDetail {
    pub combinatorial: Option<Verdict>,
    pub variational: Option<VariationalVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CEReport {
    pub prices: Vec<f64>,
    pub allocation: Vec<Vec<f64>>,
    /// `max_j |Σ_i x_ij − 1|`
    pub eps: f64,
    /// `‖z̃‖` of the allocation's excess demand.
    pub znorm_rel: f64,
    /// `max_i d_i(x_i) d∘_i(p)/B_i − 1`, zero for exactly optimal bundles.
    pub optimality_gap: f64,
    /// Every bundle passed the optimality test.
    pub optimal: bool,
    /// Optimal bundles and `eps ≤ eps_tol`.
    pub certified: bool,
    pub in_simplex: bool,
    /// `Π_i d_i(x_i)`
    pub nash_welfare: f64,
    /// `Σ_i B_i ln d_i(x_i)`; ranks equilibria like `nash_welfare` when budgets are equal.
    pub weighted_log_nash_welfare: f64,
    pub stability: Stability,
    pub criteria_detail: CriteriaDetail,
}

/// Bipartite agent–chore graph of MPB edges, with the allocation support.
#[derive(Clone, Debug, PartialEq)]
pub struct MpbGraph {
    /// MPB chores of each agent.
    pub edges: Vec<Vec<usize>>,
    /// `support[i][j]` is set when `x_ij > 0`.
    pub support: Vec<Vec<bool>>,
}

impl MpbGraph {
    pub fn new(market: &Market, p: &[f64], x: &[Vec<f64>], tie_tol: f64) -> Result<Self, EquilibriumError> {
        let mut edges = Vec::with_capacity(market.n());
        for a in market.agents() {
            edges.push(match &a.disutility {
                DisutilitySpec::Linear { weights } => mpb_set(weights, p, tie_tol)?.chores,
                DisutilitySpec::Ces { .. } => (0..market.m()).collect(),
            });
        }
        let support = x.iter().map(|xi| xi.iter().map(|&v| v > 0.0).collect()).collect();
        Ok(MpbGraph { edges, support })
    }

    /// Support edges that are not MPB edges.
    pub fn support_outside_mpb(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in self.support.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if s && !self.edges[i].contains(&j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

pub fn nash_welfare(market: &Market, x: &[Vec<f64>]) -> f64 {
    market.agents().iter().zip(x).map(|(a, xi)| disutility(&a.disutility, xi)).product()
}

pub fn weighted_log_nash_welfare(market: &Market, x: &[Vec<f64>]) -> f64 {
    market.agents().iter().zip(x).map(|(a, xi)| a.budget * disutility(&a.disutility, xi).ln()).sum()
}

fn check_shape(market: &Market, x: &[Vec<f64>]) -> Result<(), EquilibriumError> {
    let bad_row = x.iter().find(|r| r.len() != market.m());
    if x.len() != market.n() || bad_row.is_some() {
        let cols = bad_row.map(|r| r.len()).unwrap_or(market.m());
        return Err(EquilibriumError::DimensionMismatch { n: market.n(), m: market.m(), found: (x.len(), cols) });
    }
    Ok(())
}

/// Checks that every bundle is optimal at `p` and that the market clears to `eps_tol`.
///
/// Linear bundles must earn their budget using MPB chores only (MPB taken
/// with relative tolerance `tie_tol`); CES bundles must match the unique
/// demand within `1e−8`.
pub fn check_ce(
    market: &Market,
    p: &[f64],
    x: &[Vec<f64>],
    eps_tol: f64,
    tie_tol: f64,
) -> Result<CEReport, EquilibriumError> {
    if p.len() != market.m() {
        return Err(DynamicsError::DimensionMismatch { expected: market.m(), found: p.len() }.into());
    }
    check_shape(market, x)?;
    let mut optimal = true;
    let mut optimality_gap: f64 = 0.0;
    for (a, xi) in market.agents().iter().zip(x) {
        let earned: f64 = xi.iter().zip(p).map(|(x, p)| x * p).sum();
        match &a.disutility {
            DisutilitySpec::Linear { weights } => {
                let set = mpb_set(weights, p, tie_tol)?;
                let outside = xi.iter().enumerate().any(|(j, &v)| v > 0.0 && !set.chores.contains(&j));
                let budget_ok = (earned - a.budget).abs() <= tie_tol.max(1e-9) * a.budget;
                optimal &= !outside && budget_ok && xi.iter().all(|&v| v >= 0.0);
            }
            DisutilitySpec::Ces { .. } => {
                let want = demand(&a.disutility, p, a.budget, &TieBreaking::default())?;
                let scale = norm_inf(&want).max(1.0);
                optimal &= xi.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-8 * scale);
            }
        }
        let best = a.budget / gauge_dual(&a.disutility, p)?;
        optimality_gap = optimality_gap.max(disutility(&a.disutility, xi) / best - 1.0);
    }
    let z: Vec<f64> = (0..market.m()).map(|j| x.iter().map(|xi| xi[j]).sum::<f64>() - 1.0).collect();
    let eps = norm_inf(&z);
    let znorm_rel = norm2(&crate::dynamics::center(&z));
    let residual = p.iter().sum::<f64>() - market.budget_sum();
    let in_simplex = residual.abs() <= 1e-9 * market.budget_sum() && p.iter().all(|&v| v >= 0.0);
    Ok(CEReport {
        prices: p.to_vec(),
        allocation: x.to_vec(),
        eps,
        znorm_rel,
        optimality_gap,
        optimal,
        certified: optimal && eps <= eps_tol,
        in_simplex,
        nash_welfare: nash_welfare(market, x),
        weighted_log_nash_welfare: weighted_log_nash_welfare(market, x),
        stability: Stability::NotClassified,
        criteria_detail: CriteriaDetail::default(),
    })
}

/// Snaps approximate prices of a linear market to the exact equilibrium with
/// the MPB graph seen at tolerance `tol`.
///
/// Within a connected component of the MPB graph all price ratios are fixed by
/// the weights, and the component's prices must add up to its agents'
/// budgets, so the graph determines the prices exactly. Returns `None` when
/// the graph is inconsistent or the snapped point is not an equilibrium.
pub fn snap_linear_ce(market: &Market, p_hat: &[f64], tol: f64) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = market.n();
    let m = market.m();
    let mut edges = Vec::with_capacity(n);
    for a in market.agents() {
        let DisutilitySpec::Linear { weights } = &a.disutility else { return None };
        edges.push(mpb_set(weights, p_hat, tol).ok()?.chores);
    }
    let mut chore_agents = vec![Vec::new(); m];
    for (i, e) in edges.iter().enumerate() {
        for &j in e {
            chore_agents[j].push(i);
        }
    }
    if chore_agents.iter().any(|a| a.is_empty()) {
        return None;
    }
    let w = |i: usize, j: usize| market.disutility(i).weights()[j];
    let mut price = vec![f64::NAN; m];
    let mut agent_seen = vec![false; n];
    for root in 0..m {
        if !price[root].is_nan() {
            continue;
        }
        price[root] = 1.0;
        let mut chores = vec![root];
        let mut agents = Vec::new();
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            for &i in &chore_agents[j] {
                if agent_seen[i] {
                    continue;
                }
                agent_seen[i] = true;
                agents.push(i);
                let alpha = price[j] / w(i, j);
                for &k in &edges[i] {
                    let pk = alpha * w(i, k);
                    if price[k].is_nan() {
                        price[k] = pk;
                        chores.push(k);
                        stack.push(k);
                    } else if (price[k] - pk).abs() > 1e-9 * pk {
                        return None;
                    }
                }
            }
        }
        let budget: f64 = agents.iter().map(|&i| market.budget(i)).sum();
        let total: f64 = chores.iter().map(|&j| price[j]).sum();
        for &j in &chores {
            price[j] *= budget / total;
        }
    }
    let sel = min_norm_selection(market, &price, 1e-9).ok()?;
    let report = check_ce(market, &price, &sel.allocation, 1e-9, 1e-9).ok()?;
    report.certified.then_some((price, sel.allocation))
}

/// Tries [`snap_linear_ce`] over increasing tolerances, accepting the first
/// exact equilibrium within `radius` of `p_hat`.
pub fn polish_linear_ce(market: &Market, p_hat: &[f64], radius: f64) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    [1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3].iter().find_map(|&tol| {
        snap_linear_ce(market, p_hat, tol).filter(|(p, _)| dist(p, p_hat) <= radius)
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Settings for [`find_ce_grid`] and the refinement runs it launches.
#[derive(Clone, Debug, PartialEq)]
pub struct FindOptions {
    /// Iteration budget of each refinement run.
    pub refine_iters: usize,
    /// Stationarity target of each refinement run.
    pub eps: f64,
    /// Harmonic constant for linear markets; `None` uses `‖B‖₁/20`.
    pub harmonic_c: Option<f64>,
    /// Equilibria closer than this times `‖B‖₁` are merged.
    pub cluster_radius: f64,
    /// Clearing tolerance for certification.
    pub eps_tol: f64,
}

impl Default for FindOptions {
    fn default() -> Self {
        FindOptions { refine_iters: 20_000, eps: 1e-6, harmonic_c: None, cluster_radius: 1e-6, eps_tol: 1e-6 }
    }
}

/// Refines one start point into a certified equilibrium, if the run gets there.
pub fn refine_to_ce(market: &Market, p0: &[f64], opts: &FindOptions) -> Result<Option<CEReport>, EquilibriumError> {
    let linear = market.is_all_linear();
    let rule = if linear {
        StepRule::CappedHarmonic(Some(opts.harmonic_c.unwrap_or(market.budget_sum() / 20.0)))
    } else {
        StepRule::Constant(market.step_cap())
    };
    let schedule = StepSchedule::relative(market, rule)?;
    refine_with(market, p0, &schedule, opts, 1e-3 * market.budget_sum())
}

/// Runs `schedule` from `p0`, then certifies the end point. Linear end points
/// are snapped to an exact equilibrium no farther than `polish_radius`.
fn refine_with(
    market: &Market,
    p0: &[f64],
    schedule: &StepSchedule,
    opts: &FindOptions,
    polish_radius: f64,
) -> Result<Option<CEReport>, EquilibriumError> {
    let stop = StopRule { eps: opts.eps, max_iters: opts.refine_iters, record_every: usize::MAX, ..StopRule::default() };
    let traj = run(market, p0, schedule, Mode::Relative, &TieBreaking::default(), &stop)?;
    let p = traj.final_prices.as_slice();
    if market.is_all_linear() {
        return match polish_linear_ce(market, p, polish_radius) {
            Some((p, x)) => Ok(Some(check_ce(market, &p, &x, opts.eps_tol, 1e-9)?)),
            None => Ok(None),
        };
    }
    if traj.stop_reason != StopReason::EpsStationary {
        return Ok(None);
    }
    let sel = min_norm_selection(market, p, traj.final_tie_tol)?;
    let report = check_ce(market, p, &sel.allocation, opts.eps_tol, traj.final_tie_tol)?;
    Ok(report.certified.then_some(report))
}

/// Equilibria reached by relative tatonnement from barycentric grid seeds of
/// the given pitch. A heuristic: equilibria with small basins can be missed.
pub fn find_ce_grid(market: &Market, pitch: f64, opts: &FindOptions) -> Result<Vec<CEReport>, EquilibriumError> {
    let n = (1.0 / pitch).round().max(1.0) as usize;
    let seeds = barycentric_grid(market.m(), n, market.budget_sum());
    find_ce_from_seeds(market, &seeds, opts)
}

pub fn find_ce_from_seeds(market: &Market, seeds: &[Vec<f64>], opts: &FindOptions) -> Result<Vec<CEReport>, EquilibriumError> {
    let found: Vec<Option<CEReport>> =
        seeds.par_iter().map(|s| refine_to_ce(market, s, opts)).collect::<Result<_, _>>()?;
    let radius = opts.cluster_radius * market.budget_sum();
    let mut out: Vec<CEReport> = Vec::new();
    for r in found.into_iter().flatten() {
        if !out.iter().any(|c| dist(&c.prices, &r.prices) <= radius) {
            out.push(r);
        }
    }
    out.sort_by(|a, b| a.prices.partial_cmp(&b.prices).unwrap());
    Ok(out)
}

/// Largest chore count accepted by the subset enumeration.
pub const MAX_SUBSET_CHORES: usize = 20;

fn require_linear(market: &Market) -> Result<(), EquilibriumError> {
    if market.is_all_linear() {
        Ok(())
    } else {
        Err(EquilibriumError::NotLinear)
    }
}

/// Allocation support that some equilibrium allocation at `p` can reach.
///
/// An MPB edge `(i, j)` unused by `x` can carry money in another equilibrium
/// allocation exactly when money can be rerouted around a cycle through it:
/// from chore `j` back to agent `i`, leaving chores along used edges and
/// entering them along any MPB edge. The union of supports over all
/// equilibrium allocations is reached by a relative-interior allocation.
pub fn reachable_support(graph: &MpbGraph) -> Vec<Vec<bool>> {
    let n = graph.edges.len();
    let m = graph.support.first().map_or(0, |r| r.len());
    let mut out = graph.support.clone();
    for i in 0..n {
        for &j in &graph.edges[i] {
            if graph.support[i][j] {
                continue;
            }
            // BFS over chores; from chore c step to agents a with a used edge (a, c),
            // then to any MPB chore of a. Success once agent i is entered.
            let mut seen = vec![false; m];
            let mut queue = std::collections::VecDeque::from([j]);
            seen[j] = true;
            let mut found = false;
            'bfs: while let Some(c) = queue.pop_front() {
                for a in 0..n {
                    if !graph.support[a][c] {
                        continue;
                    }
                    if a == i {
                        found = true;
                        break 'bfs;
                    }
                    for &c2 in &graph.edges[a] {
                        if !seen[c2] {
                            seen[c2] = true;
                            queue.push_back(c2);
                        }
                    }
                }
            }
            out[i][j] = found;
        }
    }
    out
}

/// Combinatorial stability test for a linear-market equilibrium.
///
/// Stable iff every nonempty proper chore set `J` has an agent with MPB chores
/// `j ∈ J` and `j' ∉ J` who can do a positive amount of `j'` in some
/// equilibrium allocation at `p`.
pub fn classify_stability_combinatorial(
    market: &Market,
    p: &[f64],
    x: &[Vec<f64>],
    tie_tol: f64,
) -> Result<Verdict, EquilibriumError> {
    require_linear(market)?;
    let m = market.m();
    if m > MAX_SUBSET_CHORES {
        return Err(EquilibriumError::TooManyChores { m, cap: MAX_SUBSET_CHORES });
    }
    let report = check_ce(market, p, x, tie_tol, tie_tol)?;
    if !report.certified {
        return Err(EquilibriumError::NotACE { eps: report.eps });
    }
    let graph = MpbGraph::new(market, p, x, tie_tol)?;
    let support = reachable_support(&graph);
    if support != graph.support {
        log::debug!("equilibrium at {p:?}: allocation support extended through rerouting cycles");
    }
    for mask in 1u32..((1u32 << m) - 1) {
        let in_j = |j: usize| mask & (1 << j) != 0;
        let linked = graph.edges.iter().enumerate().any(|(i, e)| {
            e.iter().any(|&j| in_j(j)) && e.iter().any(|&k| !in_j(k) && support[i][k])
        });
        if !linked {
            let witness = (0..m).filter(|&j| in_j(j)).collect();
            return Ok(Verdict { stable: false, witness: Some(witness) });
        }
    }
    Ok(Verdict { stable: true, witness: None })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationalVerdict {
    pub stable: bool,
    /// Smallest `⟨z, p − p*⟩ / ‖p − p*‖²` seen over samples and selections.
    pub min_normalized_product: f64,
    pub samples: usize,
    pub radius: f64,
}

/// Default sampling radius: small against `ℓ0`, against the relative gap
/// between MPB and non-MPB chores at `p` (so that no new MPB edge appears)
/// and against the smallest positive earning `x_ij p_j` (so that no support
/// entry of `x` can be driven to zero, which is where a neighbouring
/// equilibrium may sit).
pub fn default_variational_radius(market: &Market, p: &[f64], x: &[Vec<f64>], tie_tol: f64) -> Result<f64, EquilibriumError> {
    let pmin = p.iter().copied().fold(f64::INFINITY, f64::min);
    let min_earning = x
        .iter()
        .flat_map(|xi| xi.iter().zip(p).map(|(a, b)| a * b))
        .filter(|&e| e > 1e-9 * market.budget_sum())
        .fold(f64::INFINITY, f64::min);
    let mut gap: f64 = 1.0;
    for a in market.agents() {
        let w = a.disutility.weights();
        let set = mpb_set(w, p, tie_tol)?;
        for j in 0..p.len() {
            if !set.chores.contains(&j) {
                gap = gap.min((set.mpb_value - p[j] / w[j]) / set.mpb_value);
            }
        }
    }
    Ok((market.moduli().ell0 / 10.0).min(0.25 * gap * pmin).min(0.1 * min_earning))
}

/// All extreme excess demands at `p`: one MPB chore per linear agent.
pub fn extreme_excess_demands(market: &Market, p: &[f64], tie_tol: f64) -> Result<Vec<Vec<f64>>, EquilibriumError> {
    let m = market.m();
    let mut sets = Vec::with_capacity(market.n());
    for a in market.agents() {
        let DisutilitySpec::Linear { weights } = &a.disutility else { return Err(EquilibriumError::NotLinear) };
        sets.push(mpb_set(weights, p, tie_tol)?.chores);
    }
    let mut out = Vec::new();
    let mut choice = vec![0usize; sets.len()];
    loop {
        let mut z = vec![-1.0; m];
        for (i, &c) in choice.iter().enumerate() {
            let j = sets[i][c];
            z[j] += market.budget(i) / p[j];
        }
        out.push(z);
        let mut k = 0;
        loop {
            if k == choice.len() {
                return Ok(out);
            }
            choice[k] += 1;
            if choice[k] < sets[k].len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Unit directions of the simplex plane that keep chosen MPB ties intact.
///
/// Near `p*` the price plane is cut into cones by the hyperplanes on which an
/// agent stays indifferent between two of its MPB chores. A violating
/// direction may live only on a lower-dimensional face of that arrangement,
/// where random directions never land, so every face is probed: for each
/// agent pick a nonempty subset of its MPB chores that stays tied, solve for
/// the directions preserving those equalities, and emit the basis of that
/// subspace in both signs plus `extra` random combinations.
pub fn tie_face_directions<R: Rng>(
    market: &Market,
    p_star: &[f64],
    tie_tol: f64,
    extra: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, EquilibriumError> {
    let m = market.m();
    let mut tied: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for a in market.agents() {
        let w = a.disutility.weights();
        let set = mpb_set(w, p_star, tie_tol)?.chores;
        if set.len() > 1 {
            tied.push((w.to_vec(), set));
        }
    }
    if tied.is_empty() {
        return Ok(Vec::new());
    }
    let frame = h0_basis(m);
    let q = DMatrix::from_fn(m, m - 1, |r, c| frame[c][r]);
    let mut masks: Vec<u32> = tied.iter().map(|_| 1).collect();
    let mut out = Vec::new();
    loop {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for ((w, set), &mask) in tied.iter().zip(&masks) {
            let kept: Vec<usize> = set.iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, &j)| j).collect();
            for pair in kept.windows(2) {
                let mut row = vec![0.0; m];
                row[pair[0]] = 1.0 / w[pair[0]];
                row[pair[1]] = -1.0 / w[pair[1]];
                rows.push(row);
            }
        }
        let k = rows.len().max(m - 1);
        let a = DMatrix::from_fn(k, m, |r, c| rows.get(r).map_or(0.0, |row| row[c]));
        let svd = (a * &q).svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let scale = svd.singular_values.iter().copied().fold(1.0, f64::max);
        let null: Vec<Vec<f64>> = (0..vt.nrows())
            .filter(|&r| svd.singular_values[r] <= 1e-10 * scale)
            .map(|r| {
                let y = vt.row(r).transpose();
                (&q * y).iter().copied().collect()
            })
            .collect();
        for u in &null {
            out.push(u.clone());
            out.push(u.iter().map(|v| -v).collect());
        }
        if !null.is_empty() {
            for _ in 0..extra {
                let mut v = vec![0.0; m];
                for u in &null {
                    let c: f64 = rng.random_range(-1.0..1.0);
                    v.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
                }
                let nv = norm2(&v);
                if nv > 1e-12 {
                    out.push(v.iter().map(|a| a / nv).collect());
                }
            }
        }
        let mut i = 0;
        loop {
            if i == masks.len() {
                return Ok(out);
            }
            masks[i] += 1;
            if masks[i] < (1 << tied[i].1.len()) {
                break;
            }
            masks[i] = 1;
            i += 1;
        }
    }
}

/// Variational stability test: `⟨z, p − p*⟩ ≥ 0` near `p*` for every `z` in
/// the excess demand set.
///
/// Probes the directions `±(1_J − |J|/m)` for every chore set `J`, every face
/// of the MPB tie arrangement (see [`tie_face_directions`]) and `n_samples`
/// uniformly random directions, at distances up to `radius`.
pub fn classify_stability_variational(
    market: &Market,
    p_star: &[f64],
    x_star: &[Vec<f64>],
    n_samples: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<VariationalVerdict, EquilibriumError> {
    require_linear(market)?;
    let tie_tol = 1e-9;
    let report = check_ce(market, p_star, x_star, tie_tol, tie_tol)?;
    if !report.certified {
        return Err(EquilibriumError::NotACE { eps: report.eps });
    }
    let m = market.m();
    let radius = match radius {
        Some(r) => r,
        None => default_variational_radius(market, p_star, x_star, tie_tol)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<(Vec<f64>, f64)> = Vec::new();
    if m <= MAX_SUBSET_CHORES {
        let basis = h0_basis(m);
        for mask in 1u32..((1u32 << m) - 1) {
            let size = mask.count_ones() as f64;
            let mut v: Vec<f64> = (0..m).map(|j| if mask & (1 << j) != 0 { 1.0 } else { 0.0 } - size / m as f64).collect();
            let nv = norm2(&v);
            v.iter_mut().for_each(|a| *a /= nv);
            debug_assert!(basis.len() == m - 1);
            for h in [radius, radius / 8.0] {
                probes.push((v.clone(), h));
            }
        }
    }
    for v in tie_face_directions(market, p_star, tie_tol, 2, &mut rng)? {
        for h in [radius, radius / 8.0] {
            probes.push((v.clone(), h));
        }
    }
    for _ in 0..n_samples {
        let v = random_h0_direction(&mut rng, m);
        let h = radius * (1.0 - rng.random::<f64>());
        probes.push((v, h));
    }
    let mut min_product = f64::INFINITY;
    let mut stable = true;
    for (v, h) in &probes {
        let p: Vec<f64> = p_star.iter().zip(v).map(|(a, b)| a + h * b).collect();
        for z in extreme_excess_demands(market, &p, tie_tol)? {
            let prod: f64 = z.iter().zip(v).map(|(z, v)| z * v * h).sum();
            min_product = min_product.min(prod / (h * h));
            if prod < -1e-10 {
                stable = false;
            }
        }
    }
    Ok(VariationalVerdict { stable, min_normalized_product: min_product, samples: probes.len(), radius })
}

/// One row of the stability table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifiedCE {
    pub report: CEReport,
    pub max_nw: bool,
    pub max_weighted_nw: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationTable {
    pub rows: Vec<ClassifiedCE>,
    /// Every max-Nash-welfare equilibrium was classified stable; `None` without equilibria.
    pub max_nw_stable: Option<bool>,
    /// Same for the maximisers of the budget-weighted log Nash welfare.
    pub max_weighted_nw_stable: Option<bool>,
    /// The combinatorial and variational verdicts agree on every row.
    pub classifiers_agree: bool,
}

/// Finds equilibria on a grid, classifies each, and marks the max-NW ones.
pub fn classify_all(
    market: &Market,
    pitch: f64,
    opts: &FindOptions,
    n_samples: usize,
    seed: u64,
) -> Result<ClassificationTable, EquilibriumError> {
    require_linear(market)?;
    let found = find_ce_grid(market, pitch, opts)?;
    classify_reports(market, found, n_samples, seed)
}

pub fn classify_reports(
    market: &Market,
    found: Vec<CEReport>,
    n_samples: usize,
    seed: u64,
) -> Result<ClassificationTable, EquilibriumError> {
    let tie_tol = 1e-9;
    let mut rows = Vec::with_capacity(found.len());
    let mut agree = true;
    for (k, mut report) in found.into_iter().enumerate() {
        let comb = classify_stability_combinatorial(market, &report.prices, &report.allocation, tie_tol)?;
        let var = classify_stability_variational(
            market,
            &report.prices,
            &report.allocation,
            n_samples,
            None,
            seed.wrapping_add(k as u64),
        )?;
        agree &= comb.stable == var.stable;
        report.stability = if comb.stable { Stability::Stable } else { Stability::Unstable };
        report.criteria_detail = CriteriaDetail { combinatorial: Some(comb), variational: Some(var) };
        rows.push(ClassifiedCE { report, max_nw: false, max_weighted_nw: false });
    }
    let best = rows.iter().map(|r| r.report.nash_welfare).fold(f64::NEG_INFINITY, f64::max);
    for r in rows.iter_mut() {
        r.max_nw = r.report.nash_welfare >= best * (1.0 - 1e-9);
    }
    let best_w = rows.iter().map(|r| r.report.weighted_log_nash_welfare).fold(f64::NEG_INFINITY, f64::max);
    for r in rows.iter_mut() {
        r.max_weighted_nw = r.report.weighted_log_nash_welfare >= best_w - 1e-9 * best_w.abs().max(1.0);
    }
    let all_stable = |pick: fn(&ClassifiedCE) -> bool| {
        (!rows.is_empty()).then(|| rows.iter().filter(|r| pick(r)).all(|r| r.report.stability == Stability::Stable))
    };
    let max_nw_stable = all_stable(|r| r.max_nw);
    let max_weighted_nw_stable = all_stable(|r| r.max_weighted_nw);
    Ok(ClassificationTable { rows, max_nw_stable, max_weighted_nw_stable, classifiers_agree: agree })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasinOutcome {
    pub starts: usize,
    /// Runs whose exact limit lies within `tol` of the equilibrium.
    pub returned: usize,
    /// Runs that ended at a different certified equilibrium.
    pub exited: usize,
    pub unresolved: usize,
}

/// Runs relative tatonnement from `starts` random points within `radius` of
/// `p_star` on the simplex and counts where the runs end.
///
/// Stability is a continuous-time notion, so each run starts with steps that
/// move its prices by about `radius/20` at a time: a constant phase of 1000 steps,
/// then harmonic decay. End points are snapped to exact equilibria no farther
/// than `radius/2`, so a snap can never jump to a neighbouring equilibrium.
/// A run that ends outside the ball is continued with [`refine_to_ce`] to
/// find the equilibrium it is heading for.
pub fn basin_check(
    market: &Market,
    p_star: &[f64],
    starts: usize,
    radius: f64,
    tol: f64,
    opts: &FindOptions,
    seed: u64,
) -> Result<BasinOutcome, EquilibriumError> {
    let m = market.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..starts)
        .map(|_| loop {
            let v = random_h0_direction(&mut rng, m);
            let h = radius * (1.0 - rng.random::<f64>());
            let p: Vec<f64> = p_star.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            if p.iter().all(|&x| x > 0.0) {
                break p;
            }
        })
        .collect();
    let tie = TieBreaking::default();
    let stop = StopRule { eps: opts.eps, max_iters: opts.refine_iters, record_every: usize::MAX, ..StopRule::default() };
    let polish_radius = (radius / 2.0).min(1e-3 * market.budget_sum());
    let limits: Vec<Option<CEReport>> = points
        .par_iter()
        .map(|p| {
            let z0 = norm2(&crate::dynamics::relative_excess_demand(market, p, &tie)?).max(1e-3);
            let eta0 = market.step_cap().min(radius / (20.0 * z0));
            let mut schedule = StepSchedule::relative(market, StepRule::CappedHarmonic(Some(1000.0 * eta0)))?;
            schedule.cap = eta0;
            let end = run(market, p, &schedule, Mode::Relative, &tie, &stop)?.final_prices.into_vec();
            if let Some((q, x)) = polish_linear_ce(market, &end, polish_radius) {
                return Ok(Some(check_ce(market, &q, &x, opts.eps_tol, 1e-9)?));
            }
            if dist(&end, p_star) > radius {
                return refine_to_ce(market, &end, opts);
            }
            Ok(None)
        })
        .collect::<Result<_, EquilibriumError>>()?;
    let mut out = BasinOutcome { starts, returned: 0, exited: 0, unresolved: 0 };
    for l in limits {
        match l {
            Some(r) if dist(&r.prices, p_star) <= tol => out.returned += 1,
            Some(_) => out.exited += 1,
            None => out.unresolved += 1,
        }
    }
    Ok(out)
}

/// Compares `f` at `p_star` with a grid of simplex points around it.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMinCheck {
    pub strict_min: bool,
    /// A neighbour with strictly smaller potential, if one was found.
    pub lower_neighbor: Option<Vec<f64>>,
}

/// Grid of pitch `pitch·‖B‖₁` in an orthonormal frame of the simplex plane,
/// restricted to the ball of radius `radius·‖B‖₁` around `p_star`.
pub fn local_min_grid_check(market: &Market, p_star: &[f64], pitch: f64, radius: f64) -> Result<LocalMinCheck, EquilibriumError> {
    let m = market.m();
    let b = market.budget_sum();
    let basis = h0_basis(m);
    let steps = (radius / pitch).floor() as i64;
    let f_star = potential_f(market, p_star).map_err(DynamicsError::from)?.f;
    let dims = m - 1;
    let mut idx = vec![-steps; dims];
    let mut strict = true;
    let mut lower = None;
    loop {
        let r2: i64 = idx.iter().map(|v| v * v).sum();
        if r2 > 0 && (r2 as f64) <= (steps * steps) as f64 {
            let mut p = p_star.to_vec();
            for (c, u) in idx.iter().zip(&basis) {
                p.iter_mut().zip(u).for_each(|(a, e)| *a += *c as f64 * pitch * b * e);
            }
            if p.iter().all(|&v| v >= 0.0) {
                let f = potential_f(market, &p).map_err(DynamicsError::from)?.f;
                if f <= f_star {
                    strict = false;
                    if f < f_star && lower.is_none() {
                        lower = Some(p);
                    }
                }
            }
        }
        let mut k = 0;
        loop {
            if k == dims {
                return Ok(LocalMinCheck { strict_min: strict, lower_neighbor: lower });
            }
            idx[k] += 1;
            if idx[k] <= steps {
                break;
            }
            idx[k] = -steps;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::Agent;
    use approx::assert_relative_eq;

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

    #[test]
    fn certifies_example_one_equilibria() {
        let m = example_one();
        let r = check_ce(&m, &[4.0 / 3.0, 2.0 / 3.0], &[vec![0.75, 0.0], vec![0.25, 1.0]], 1e-9, 1e-9).unwrap();
        assert!(r.certified && r.eps < 1e-15);
        assert_relative_eq!(r.nash_welfare, 9.0 / 8.0, max_relative = 1e-14);
        let r = check_ce(&m, &[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-9, 1e-9).unwrap();
        assert!(r.certified && r.eps == 0.0);
        assert_eq!(r.nash_welfare, 1.0);
    }

    #[test]
    fn off_equilibrium_violation() {
        let m = example_one();
        let p = [1.25, 0.75];
        let x: Vec<Vec<f64>> =
            m.agents().iter().map(|a| demand(&a.disutility, &p, a.budget, &TieBreaking::default()).unwrap()).collect();
        let r = check_ce(&m, &p, &x, 1e-9, 1e-9).unwrap();
        assert!(r.optimal && !r.certified);
        assert_relative_eq!(r.eps, 1.0 / 3.0, max_relative = 1e-12);
        assert!(matches!(check_ce(&m, &p, &x[..1], 1e-9, 1e-9), Err(EquilibriumError::DimensionMismatch { .. })));
    }

    #[test]
    fn suboptimal_bundle_is_rejected() {
        let m = example_one();
        let r = check_ce(&m, &[1.0, 1.0], &[vec![0.0, 1.0], vec![1.0, 0.0]], 1e-9, 1e-9).unwrap();
        assert!(!r.optimal && !r.certified);
        assert_relative_eq!(r.optimality_gap, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn nash_welfare_zero_factor() {
        let m = example_one();
        assert_eq!(nash_welfare(&m, &[vec![0.0, 0.0], vec![1.0, 1.0]]), 0.0);
    }

    #[test]
    fn stability_of_example_one() {
        let m = example_one();
        let unstable = classify_stability_combinatorial(&m, &[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-9).unwrap();
        assert_eq!(unstable, Verdict { stable: false, witness: Some(vec![0]) });
        let stable =
            classify_stability_combinatorial(&m, &[4.0 / 3.0, 2.0 / 3.0], &[vec![0.75, 0.0], vec![0.25, 1.0]], 1e-9).unwrap();
        assert!(stable.stable);
        let v = classify_stability_variational(&m, &[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 100, None, 3).unwrap();
        assert!(!v.stable);
        let v = classify_stability_variational(&m, &[4.0 / 3.0, 2.0 / 3.0], &[vec![0.75, 0.0], vec![0.25, 1.0]], 10_000, None, 3)
            .unwrap();
        assert!(v.stable);
        let not_ce = classify_stability_combinatorial(&m, &[1.25, 0.75], &[vec![0.8, 0.0], vec![0.0, 4.0 / 3.0]], 1e-9);
        assert!(matches!(not_ce, Err(EquilibriumError::NotACE { .. })));
    }

    #[test]
    fn unstable_direction_is_the_tilt() {
        let m = example_one();
        let h = 1e-3;
        let v = [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2];
        let p = [1.0 + h * v[0], 1.0 + h * v[1]];
        let zs = extreme_excess_demands(&m, &p, 1e-9).unwrap();
        assert_eq!(zs.len(), 1);
        let prod: f64 = zs[0].iter().zip(&v).map(|(z, v)| z * v * h).sum();
        assert!(prod < 0.0);
    }

    #[test]
    fn single_agent_full_support_is_stable() {
        let m = Market::new(3, vec![Agent { budget: 2.0, disutility: DisutilitySpec::linear(vec![1.0, 2.0, 4.0]) }]).unwrap();
        // prices proportional to weights make every chore MPB
        let p = [2.0 / 7.0 * 1.0, 2.0 / 7.0 * 2.0, 2.0 / 7.0 * 4.0];
        let x = vec![vec![1.0; 3]];
        let v = classify_stability_combinatorial(&m, &p, &x, 1e-9).unwrap();
        assert!(v.stable);
    }

    #[test]
    fn snapping_recovers_exact_prices() {
        let m = example_one();
        let (p, x) = polish_linear_ce(&m, &[4.0 / 3.0 + 3e-6, 2.0 / 3.0 - 3e-6], 1e-3).unwrap();
        assert_relative_eq!(p[0], 4.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(x[1][0], 0.25, max_relative = 1e-12);
        let (p, _) = polish_linear_ce(&m, &[1.0 - 1e-7, 1.0 + 1e-7], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn reroutable_edges_join_the_support() {
        // two agents indifferent between both chores; the allocation uses a
        // single perfect matching but the other matching is reachable too
        let graph = MpbGraph {
            edges: vec![vec![0, 1], vec![0, 1]],
            support: vec![vec![true, false], vec![false, true]],
        };
        assert_eq!(reachable_support(&graph), vec![vec![true, true], vec![true, true]]);
        // a tree has a unique allocation
        let tree = MpbGraph { edges: vec![vec![0, 1], vec![1]], support: vec![vec![true, true], vec![false, true]] };
        assert_eq!(reachable_support(&tree), tree.support);
        let blocked = MpbGraph { edges: vec![vec![0, 1], vec![1]], support: vec![vec![true, false], vec![false, true]] };
        // agent 1 works only chore 1, which pins agent 0's share of it
        assert_eq!(reachable_support(&blocked), blocked.support);
    }

    #[test]
    fn finds_three_equilibria_of_example_one() {
        let m = example_one();
        let found = find_ce_grid(&m, 0.02, &FindOptions::default()).unwrap();
        let prices: Vec<Vec<f64>> = found.iter().map(|r| r.prices.clone()).collect();
        assert_eq!(prices.len(), 3, "{prices:?}");
        let want = [[2.0 / 3.0, 4.0 / 3.0], [1.0, 1.0], [4.0 / 3.0, 2.0 / 3.0]];
        for (got, want) in prices.iter().zip(want) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn local_min_grid() {
        let m = example_one();
        assert!(local_min_grid_check(&m, &[4.0 / 3.0, 2.0 / 3.0], 1e-3, 5e-2).unwrap().strict_min);
        let c = local_min_grid_check(&m, &[1.0, 1.0], 1e-3, 5e-2).unwrap();
        assert!(!c.strict_min && c.lower_neighbor.is_some());
    }
}
