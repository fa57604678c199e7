//! Experiment commands behind the `chores` binary: trajectory simulation,
//! simplex grids, rate studies and equilibrium stability tables.
//!
//! Every command is a plain function that writes into caller-supplied
//! writers, so the binary and the tests share one code path.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chores_core::dynamics;
use chores_core::equilibrium::{classify_all, FindOptions, Stability};
use chores_core::potential::{potential_f, simplex_grid};
use chores_core::{Market, Mode, StepRule, StepSchedule, StopReason, StopRule, TieBreaking, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Environment variable that overrides `--jobs`.
pub const JOBS_ENV: &str = "CHORES_JOBS";

pub fn load_market(path: &Path) -> Result<Market> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Market::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Sizes the global worker pool. `CHORES_JOBS` wins over the flag; with
/// neither, rayon picks the pool size.
pub fn configure_jobs(flag: Option<usize>) -> Result<()> {
    let jobs = match std::env::var(JOBS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().with_context(|| format!("{JOBS_ENV}={v}"))?),
        Err(_) => flag,
    };
    if let Some(n) = jobs {
        if n == 0 {
            bail!("job count must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    Ok(())
}

/// Parses `constant:η`, `harmonic`, `harmonic:c` or `smooth`.
pub fn parse_schedule(s: &str) -> Result<StepRule> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let num = |a: &str| a.trim().parse::<f64>().with_context(|| format!("bad schedule parameter `{a}`"));
    Ok(match (kind.trim(), arg) {
        ("constant", Some(a)) => StepRule::Constant(num(a)?),
        ("constant", None) => bail!("constant schedule needs a step, e.g. constant:0.01"),
        ("harmonic", None) => StepRule::CappedHarmonic(None),
        ("harmonic", Some(a)) => StepRule::CappedHarmonic(Some(num(a)?)),
        ("smooth", None) => StepRule::SmoothConstant,
        _ => bail!("unknown schedule `{s}`; expected constant:η, harmonic[:c] or smooth"),
    })
}

pub fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "naive" => Ok(Mode::Naive),
        "relative" => Ok(Mode::Relative),
        _ => bail!("unknown mode `{s}`; expected naive or relative"),
    }
}

/// Start point: `uniform` (`‖B‖₁/m` each), `random` (uniform on the price
/// simplex, drawn from `seed`) or explicit comma-separated prices.
pub fn parse_start(market: &Market, spec: &str, seed: u64) -> Result<Vec<f64>> {
    match spec {
        "uniform" => Ok(market.uniform_prices()),
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e: Vec<f64> = (0..market.m()).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = e.iter().sum();
            Ok(e.iter().map(|v| v / s * market.budget_sum()).collect())
        }
        list => {
            let p = list
                .split(',')
                .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad price `{t}`")))
                .collect::<Result<Vec<_>>>()?;
            if p.len() != market.m() {
                bail!("start has {} prices, market has {} chores", p.len(), market.m());
            }
            Ok(p)
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulateConfig {
    pub mode: Mode,
    pub rule: StepRule,
    pub start: Vec<f64>,
    pub eps: f64,
    pub max_iters: usize,
    pub record_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub final_prices: Vec<f64>,
    pub final_price_sum: f64,
    pub final_znorm_rel: f64,
    pub final_znorm_inf: f64,
    pub final_f: f64,
    pub phase1_iters: Option<usize>,
}

pub fn simulate(market: &Market, cfg: &SimulateConfig) -> Result<(Trajectory, SimulateSummary)> {
    let schedule = match cfg.mode {
        Mode::Relative => StepSchedule::relative(market, cfg.rule.clone())?,
        Mode::Naive => StepSchedule::naive(cfg.rule.clone())?,
    };
    let stop = StopRule { eps: cfg.eps, max_iters: cfg.max_iters, record_every: cfg.record_every, ..StopRule::default() };
    let traj = dynamics::run(market, &cfg.start, &schedule, cfg.mode, &TieBreaking::default(), &stop)?;
    let last = traj.last();
    let summary = SimulateSummary {
        stop_reason: traj.stop_reason,
        iterations: traj.iterations,
        final_prices: last.prices.clone(),
        final_price_sum: dynamics::compensated_sum(last.prices.iter().copied()),
        final_znorm_rel: last.znorm_rel,
        final_znorm_inf: last.znorm_inf,
        final_f: last.f,
        phase1_iters: traj.phase1_iters,
    };
    Ok((traj, summary))
}

fn price_headers(prefix: &str, m: usize) -> impl Iterator<Item = String> + '_ {
    (1..=m).map(move |j| format!("{prefix}_{j}"))
}

/// Header `k,p_1..p_m,eta,f,znorm_rel,znorm_inf`, one row per recorded iterate.
pub fn write_trajectory_csv<W: Write>(out: W, m: usize, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend(price_headers("p", m));
    header.extend(["eta", "f", "znorm_rel", "znorm_inf"].map(String::from));
    w.write_record(&header)?;
    for it in &traj.iterates {
        let mut row = vec![it.k.to_string()];
        row.extend(it.prices.iter().map(f64::to_string));
        row.extend([it.eta, it.f, it.znorm_rel, it.znorm_inf].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `p_1,p_2,p_3,f,zt_1,zt_2,zt_3`; `z̃` is the min-norm selection.
pub fn write_grid_csv<W: Write>(out: W, market: &Market, pitch: f64) -> Result<usize> {
    if !(pitch > 0.0 && pitch <= 1.0) {
        bail!("pitch must lie in (0, 1]");
    }
    let points = simplex_grid(market, pitch, chores_core::demand::DEFAULT_TIE_TOL)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = price_headers("p", 3).collect();
    header.push("f".into());
    header.extend(price_headers("zt", 3));
    w.write_record(&header)?;
    for g in &points {
        let row: Vec<String> = g.p.iter().chain([g.f].iter()).chain(g.z_tilde.iter()).map(f64::to_string).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(points.len())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub eps: f64,
    /// First iteration with `‖z̃‖ ≤ eps`; `None` if the budget ran out first.
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateStudy {
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `log max(iters, 1)` against `log(1/eps)`.
    pub slope: Option<f64>,
    pub step: f64,
    pub phase1_iters: Option<usize>,
    pub phase1_bound: Option<usize>,
    pub stop_reason: StopReason,
}

/// Iterations to reach each `eps` under the smooth constant step, from one run.
pub fn rate_study(market: &Market, eps_list: &[f64], start: &[f64], max_iters: usize) -> Result<RateStudy> {
    if !market.is_all_ces() {
        bail!("rate study needs a CES market");
    }
    if eps_list.is_empty() || eps_list.iter().any(|&e| !(e > 0.0)) {
        bail!("eps list must be non-empty and positive");
    }
    let schedule = StepSchedule::relative(market, StepRule::SmoothConstant)?;
    let target = eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let stop = StopRule { eps: target, max_iters, record_every: usize::MAX, ..StopRule::default() };
    let mut hits: Vec<Option<usize>> = vec![None; eps_list.len()];
    let traj = dynamics::run_observed(market, start, &schedule, Mode::Relative, &TieBreaking::default(), &stop, |v| {
        for (h, &e) in hits.iter_mut().zip(eps_list) {
            if h.is_none() && v.measure <= e {
                *h = Some(v.k);
            }
        }
    })?;
    let rows: Vec<RateRow> = eps_list.iter().zip(&hits).map(|(&eps, &iterations)| RateRow { eps, iterations }).collect();
    let pts: Vec<(f64, f64)> =
        rows.iter().filter_map(|r| r.iterations.map(|k| ((1.0 / r.eps).ln(), (k.max(1) as f64).ln()))).collect();
    Ok(RateStudy {
        slope: loglog_slope(&pts),
        step: schedule.eta(1, false),
        phase1_iters: traj.phase1_iters,
        phase1_bound: schedule.warm_start.as_ref().map(|w| w.max_iters),
        stop_reason: traj.stop_reason,
        rows,
    })
}

/// Ordinary least-squares slope; `None` with fewer than two distinct abscissae.
pub fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn write_rate_csv<W: Write>(out: W, study: &RateStudy) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eps", "iterations"])?;
    for r in &study.rows {
        w.write_record([r.eps.to_string(), r.iterations.map(|k| k.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub prices: Vec<f64>,
    pub allocation: Vec<Vec<f64>>,
    pub eps: f64,
    pub nash_welfare: f64,
    pub weighted_log_nash_welfare: f64,
    pub stable: bool,
    pub max_nw: bool,
    pub max_weighted_nw: bool,
    /// Chores (1-based) that no agent links to the rest, for unstable equilibria.
    #[serde(rename = "witness_J")]
    pub witness: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityTable {
    pub equilibria: Vec<StabilityRow>,
    pub max_nw_stable: Option<bool>,
    pub max_weighted_nw_stable: Option<bool>,
    pub classifiers_agree: bool,
}

pub fn stability_table(market: &Market, pitch: f64, samples: usize, seed: u64) -> Result<StabilityTable> {
    let table = classify_all(market, pitch, &FindOptions::default(), samples, seed)?;
    let equilibria = table
        .rows
        .iter()
        .map(|r| {
            let witness = r
                .report
                .criteria_detail
                .combinatorial
                .as_ref()
                .and_then(|v| v.witness.as_ref())
                .map(|j| j.iter().map(|c| c + 1).collect());
            StabilityRow {
                prices: r.report.prices.clone(),
                allocation: r.report.allocation.clone(),
                eps: r.report.eps,
                nash_welfare: r.report.nash_welfare,
                weighted_log_nash_welfare: r.report.weighted_log_nash_welfare,
                stable: r.report.stability == Stability::Stable,
                max_nw: r.max_nw,
                max_weighted_nw: r.max_weighted_nw,
                witness,
            }
        })
        .collect();
    Ok(StabilityTable {
        equilibria,
        max_nw_stable: table.max_nw_stable,
        max_weighted_nw_stable: table.max_weighted_nw_stable,
        classifiers_agree: table.classifiers_agree,
    })
}

/// Re-evaluates `f` at every row of a trajectory or grid CSV and returns the
/// largest deviation from the `f` column.
pub fn recheck_f_column(market: &Market, csv_text: &str) -> Result<f64> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers()?.clone();
    let p_cols: Vec<usize> = (1..=market.m())
        .map(|j| headers.iter().position(|h| h == format!("p_{j}")).context("missing price column"))
        .collect::<Result<_>>()?;
    let f_col = headers.iter().position(|h| h == "f").context("missing f column")?;
    let mut worst: f64 = 0.0;
    for rec in r.records() {
        let rec = rec?;
        let p: Vec<f64> = p_cols.iter().map(|&c| rec[c].parse::<f64>()).collect::<Result<_, _>>()?;
        let f: f64 = rec[f_col].parse()?;
        worst = worst.max((potential_f(market, &p)?.f - f).abs());
    }
    Ok(worst)
}

#[derive(Serialize)]
pub struct ValidateReport<'a> {
    pub agents: usize,
    pub chores: usize,
    pub budget_sum: f64,
    pub all_linear: bool,
    pub all_ces: bool,
    pub moduli: &'a chores_core::Moduli,
    pub step_cap: f64,
}

pub fn validate_report(market: &Market) -> ValidateReport<'_> {
    ValidateReport {
        agents: market.n(),
        chores: market.m(),
        budget_sum: market.budget_sum(),
        all_linear: market.is_all_linear(),
        all_ces: market.is_all_ces(),
        moduli: market.moduli(),
        step_cap: market.step_cap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_parse() {
        assert_eq!(parse_schedule("constant:0.5").unwrap(), StepRule::Constant(0.5));
        assert_eq!(parse_schedule("harmonic").unwrap(), StepRule::CappedHarmonic(None));
        assert_eq!(parse_schedule("harmonic:2").unwrap(), StepRule::CappedHarmonic(Some(2.0)));
        assert_eq!(parse_schedule("smooth").unwrap(), StepRule::SmoothConstant);
        assert!(parse_schedule("constant").is_err());
        assert!(parse_schedule("adam").is_err());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1e1f64, 1e2, 1e3, 1e4].iter().map(|x| (x.ln(), (7.0 * x * x).ln())).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }
}
