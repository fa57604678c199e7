//! Market instances: agents with budgets and disutility functions over `m` chores.
//!
//! A [`Market`] is validated on construction and carries its structural
//! [`Moduli`], which fix the admissible step sizes of the price dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("market needs at least one agent")]
    NoAgents,
    #[error("market needs at least two chores, got {0}")]
    TooFewChores(usize),
    #[error("agent {agent}: budget must be positive and finite, got {budget}")]
    NonPositiveBudget { agent: usize, budget: f64 },
    #[error("agent {agent}, chore {chore}: disutility weight must be positive and finite, got {weight}")]
    NonPositiveWeight { agent: usize, chore: usize, weight: f64 },
    #[error("agent {agent}: rho {rho} out of range (ces needs rho > 1, linear is rho = 1)")]
    RhoOutOfRange { agent: usize, rho: f64 },
    #[error("agent {agent}: ces disutility requires a rho value")]
    MissingRho { agent: usize },
    #[error("agent {agent}: expected {expected} weights, found {found}")]
    DimensionMismatch { agent: usize, expected: usize, found: usize },
    #[error("malformed market json: {0}")]
    Parse(String),
}

/// Disutility of one agent. Linear demand is set-valued, CES demand is a
/// single point, so the two families are kept as separate variants.
#[derive(Clone, Debug, PartialEq)]
pub enum DisutilitySpec {
    /// `d(x) = Σ d_j x_j`
    Linear { weights: Vec<f64> },
    /// `d(x) = (Σ d_j x_j^ρ)^{1/ρ}` with `ρ > 1`
    Ces { weights: Vec<f64>, rho: f64 },
}

impl DisutilitySpec {
    pub fn linear(weights: Vec<f64>) -> Self {
        DisutilitySpec::Linear { weights }
    }

    pub fn ces(weights: Vec<f64>, rho: f64) -> Self {
        DisutilitySpec::Ces { weights, rho }
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            DisutilitySpec::Linear { weights } | DisutilitySpec::Ces { weights, .. } => weights,
        }
    }

    /// Exponent of the disutility; 1 for linear agents.
    pub fn rho(&self) -> f64 {
        match self {
            DisutilitySpec::Linear { .. } => 1.0,
            DisutilitySpec::Ces { rho, .. } => *rho,
        }
    }

    /// Dual exponent `σ = ρ/(ρ−1)`; `None` for linear agents.
    pub fn sigma(&self) -> Option<f64> {
        match self {
            DisutilitySpec::Linear { .. } => None,
            DisutilitySpec::Ces { rho, .. } => Some(rho / (rho - 1.0)),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, DisutilitySpec::Linear { .. })
    }

    pub(crate) fn min_weight(&self) -> f64 {
        self.weights().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn max_weight(&self) -> f64 {
        self.weights().iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub budget: f64,
    pub disutility: DisutilitySpec,
}

/// Structural constants of a market.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Moduli {
    /// Per-agent gradient-ratio modulus ν_i.
    pub nu: Vec<f64>,
    /// Price level below which a chore is guaranteed to be under-demanded.
    pub ell0: f64,
    /// Per-agent bound on `‖x‖∞` over the unit disutility sublevel set.
    pub r_bound: Vec<f64>,
    /// Per-agent lower bound on the gauge dual over the price simplex, divided by `‖B‖₁`.
    pub delta_lb: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Market {
    chores: usize,
    agents: Vec<Agent>,
    budget_sum: f64,
    moduli: Moduli,
}

impl Market {
    /// Validates an instance and computes its moduli.
    pub fn new(chores: usize, agents: Vec<Agent>) -> Result<Self, MarketError> {
        if agents.is_empty() {
            return Err(MarketError::NoAgents);
        }
        if chores < 2 {
            return Err(MarketError::TooFewChores(chores));
        }
        for (i, a) in agents.iter().enumerate() {
            if !(a.budget > 0.0 && a.budget.is_finite()) {
                return Err(MarketError::NonPositiveBudget { agent: i, budget: a.budget });
            }
            let w = a.disutility.weights();
            if w.len() != chores {
                return Err(MarketError::DimensionMismatch {
                    agent: i,
                    expected: chores,
                    found: w.len(),
                });
            }
            if let Some((j, &weight)) = w.iter().enumerate().find(|(_, &d)| !(d > 0.0 && d.is_finite())) {
                return Err(MarketError::NonPositiveWeight { agent: i, chore: j, weight });
            }
            if let DisutilitySpec::Ces { rho, .. } = a.disutility {
                if !(rho > 1.0 && rho.is_finite()) {
                    return Err(MarketError::RhoOutOfRange { agent: i, rho });
                }
            }
        }
        let budget_sum = agents.iter().map(|a| a.budget).sum();
        let mut market = Market {
            chores,
            agents,
            budget_sum,
            moduli: Moduli { nu: vec![], ell0: 0.0, r_bound: vec![], delta_lb: vec![] },
        };
        market.moduli = compute_moduli(&market);
        Ok(market)
    }

    /// Parses the JSON instance format and validates it.
    pub fn from_json(text: &str) -> Result<Self, MarketError> {
        let raw: MarketFile = serde_json::from_str(text).map_err(|e| MarketError::Parse(e.to_string()))?;
        raw.into_market()
    }

    pub fn to_json(&self) -> String {
        let file = MarketFile {
            chores: self.chores,
            agents: self
                .agents
                .iter()
                .map(|a| AgentFile {
                    budget: a.budget,
                    disutility: match &a.disutility {
                        DisutilitySpec::Linear { weights } => {
                            DisutilityFile { kind: Kind::Linear, d: weights.clone(), rho: None }
                        }
                        DisutilitySpec::Ces { weights, rho } => {
                            DisutilityFile { kind: Kind::Ces, d: weights.clone(), rho: Some(*rho) }
                        }
                    },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("market serializes")
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn m(&self) -> usize {
        self.chores
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn budget(&self, i: usize) -> f64 {
        self.agents[i].budget
    }

    pub fn disutility(&self, i: usize) -> &DisutilitySpec {
        &self.agents[i].disutility
    }

    /// `‖B‖₁`
    pub fn budget_sum(&self) -> f64 {
        self.budget_sum
    }

    pub fn moduli(&self) -> &Moduli {
        &self.moduli
    }

    pub fn is_all_linear(&self) -> bool {
        self.agents.iter().all(|a| a.disutility.is_linear())
    }

    pub fn is_all_ces(&self) -> bool {
        self.agents.iter().all(|a| !a.disutility.is_linear())
    }

    /// Largest admissible relative-tatonnement step, `ℓ0²/(2‖B‖₁)`.
    pub fn step_cap(&self) -> f64 {
        self.moduli.ell0 * self.moduli.ell0 / (2.0 * self.budget_sum)
    }

    /// Uniform prices on the price simplex.
    pub fn uniform_prices(&self) -> Vec<f64> {
        vec![self.budget_sum / self.chores as f64; self.chores]
    }
}

/// Per-agent ν_i. Linear: `min d / max d`. CES: the same ratio times
/// `(‖B‖₁/(4 n m² B_i))^{ρ−1}`.
pub fn compute_nu(market: &Market) -> Vec<f64> {
    let n = market.n() as f64;
    let m = market.m() as f64;
    market
        .agents
        .iter()
        .map(|a| {
            let ratio = a.disutility.min_weight() / a.disutility.max_weight();
            match a.disutility {
                DisutilitySpec::Linear { .. } => ratio,
                DisutilitySpec::Ces { rho, .. } => {
                    ratio * (market.budget_sum / (4.0 * n * m * m * a.budget)).powf(rho - 1.0)
                }
            }
        })
        .collect()
}

pub fn compute_moduli(market: &Market) -> Moduli {
    let nu = compute_nu(market);
    let m = market.m() as f64;
    let nu_min = nu.iter().copied().fold(f64::INFINITY, f64::min);
    let ell0 = market.budget_sum / (3.0 * m) * nu_min;
    let r_bound = market
        .agents
        .iter()
        .map(|a| match a.disutility {
            DisutilitySpec::Linear { .. } => 1.0 / a.disutility.min_weight(),
            DisutilitySpec::Ces { rho, .. } => a.disutility.min_weight().powf(-1.0 / rho),
        })
        .collect();
    let delta_lb = market
        .agents
        .iter()
        .map(|a| match &a.disutility {
            DisutilitySpec::Linear { weights } => 1.0 / weights.iter().sum::<f64>(),
            DisutilitySpec::Ces { rho, .. } => (m * a.disutility.max_weight()).powf(-1.0 / rho),
        })
        .collect();
    Moduli { nu, ell0, r_bound, delta_lb }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    chores: usize,
    agents: Vec<AgentFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    budget: f64,
    disutility: DisutilityFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisutilityFile {
    kind: Kind,
    d: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Linear,
    Ces,
}

impl MarketFile {
    fn into_market(self) -> Result<Market, MarketError> {
        let mut agents = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.into_iter().enumerate() {
            let disutility = match (a.disutility.kind, a.disutility.rho) {
                (Kind::Linear, None) => DisutilitySpec::Linear { weights: a.disutility.d },
                (Kind::Linear, Some(1.0)) => DisutilitySpec::Linear { weights: a.disutility.d },
                (Kind::Linear, Some(rho)) => return Err(MarketError::RhoOutOfRange { agent: i, rho }),
                (Kind::Ces, None) => return Err(MarketError::MissingRho { agent: i }),
                (Kind::Ces, Some(rho)) => DisutilitySpec::Ces { weights: a.disutility.d, rho },
            };
            agents.push(Agent { budget: a.budget, disutility });
        }
        Market::new(self.chores, agents)
    }
}
