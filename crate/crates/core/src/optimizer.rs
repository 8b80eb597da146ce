//! Click, conversion, spend and CPA predictions over a landscape, and the
//! CPA-capped bid recommendation.
//!
//! Bids here are eCPM bids in per-impression units, the same axis as the
//! landscape. The CPC bid is `bid / pctr`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landscape::{BidLandscape, LandscapeError};

pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("{field} {message}")]
    InvalidInput {
        field: &'static str,
        message: &'static str,
    },
    #[error("empty landscape")]
    EmptyLandscape,
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
}

fn invalid(field: &'static str, message: &'static str) -> OptimizerError {
    OptimizerError::InvalidInput { field, message }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignInputs {
    pub impressions: u64,
    pub pctr: f64,
    pub pcvr: f64,
    #[serde(default)]
    pub group: String,
}

impl CampaignInputs {
    pub fn new(impressions: u64, pctr: f64, pcvr: f64) -> Self {
        Self {
            impressions,
            pctr,
            pcvr,
            group: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        check_rate("pctr", self.pctr)?;
        check_rate("pcvr", self.pcvr)
    }
}

fn check_rate(field: &'static str, value: f64) -> Result<(), OptimizerError> {
    if value.is_nan() || value <= 0.0 {
        return Err(invalid(field, "must be positive"));
    }
    if value > 1.0 {
        return Err(invalid(field, "must be at most 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpaGoal {
    pub target_cpa: f64,
    pub budget: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl CpaGoal {
    pub fn new(target_cpa: f64, budget: f64) -> Self {
        Self {
            target_cpa,
            budget,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.target_cpa > 0.0 && self.target_cpa.is_finite()) {
            return Err(invalid("cpa_goal", "must be positive"));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(invalid("budget", "must be positive"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(invalid("tolerance", "must be non-negative"));
        }
        Ok(())
    }

    /// Highest CPA accepted as meeting the goal.
    pub fn cpa_cap(&self) -> f64 {
        self.target_cpa * (1.0 + self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Feasible,
    BudgetLimited,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub bid: f64,
    pub cpc_bid: f64,
    pub winrate: f64,
    pub clicks: f64,
    pub conversions: f64,
    pub spend: f64,
    pub cpa: f64,
    pub status: Status,
    pub adjusted_budget: Option<f64>,
    pub adjusted_cpa: Option<f64>,
}

/// All predictions at one bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidOutcome {
    pub bid: f64,
    pub winrate: f64,
    pub cost: f64,
    pub clicks: f64,
    pub conversions: f64,
    pub spend: f64,
    pub cpa: f64,
}

pub fn predict_clicks(landscape: &BidLandscape, inputs: &CampaignInputs, bid: f64) -> f64 {
    clicks_from(inputs, landscape.query_winrate(bid))
}

fn clicks_from(inputs: &CampaignInputs, winrate: f64) -> f64 {
    inputs.impressions as f64 * winrate * inputs.pctr
}

pub fn predict_conversions(clicks: f64, pcvr: f64) -> f64 {
    clicks * pcvr
}

pub fn predict_cpa(
    landscape: &BidLandscape,
    inputs: &CampaignInputs,
    bid: f64,
) -> Result<f64, OptimizerError> {
    Ok(cpa_from(inputs, landscape.query_cost(bid)?))
}

/// CPA implied by a per-impression cost.
pub fn cpa_from_cost(cost: f64, pctr: f64, pcvr: f64) -> f64 {
    cost / (pctr * pcvr)
}

fn cpa_from(inputs: &CampaignInputs, cost: f64) -> f64 {
    cpa_from_cost(cost, inputs.pctr, inputs.pcvr)
}

pub fn predict_spend(
    landscape: &BidLandscape,
    inputs: &CampaignInputs,
    bid: f64,
) -> Result<f64, OptimizerError> {
    let clicks = predict_clicks(landscape, inputs, bid);
    Ok(clicks * landscape.query_cost(bid)? / inputs.pctr)
}

fn outcome(bid: f64, winrate: f64, cost: f64, inputs: &CampaignInputs) -> BidOutcome {
    let clicks = clicks_from(inputs, winrate);
    BidOutcome {
        bid,
        winrate,
        cost,
        clicks,
        conversions: predict_conversions(clicks, inputs.pcvr),
        spend: clicks * cost / inputs.pctr,
        cpa: cpa_from(inputs, cost),
    }
}

/// Every prediction at `bid`.
pub fn evaluate_bid(
    landscape: &BidLandscape,
    inputs: &CampaignInputs,
    bid: f64,
) -> Result<BidOutcome, OptimizerError> {
    let cost = landscape.query_cost(bid)?;
    Ok(outcome(bid, landscape.query_winrate(bid), cost, inputs))
}

/// Outcomes at the scanned bids: one per bin up to `max_index`, keeping
/// bins with a positive win rate and a defined cost.
pub fn candidate_outcomes(landscape: &BidLandscape, inputs: &CampaignInputs) -> Vec<BidOutcome> {
    let dist = landscape.dist();
    (1..=dist.max_index())
        .filter_map(|k| {
            let winrate = dist.winrate_at(k);
            if winrate <= 0.0 {
                return None;
            }
            let cost = dist.cost_at(k)?;
            Some(outcome(landscape.bid_of(k), winrate, cost, inputs))
        })
        .collect()
}

fn recommendation(o: &BidOutcome, inputs: &CampaignInputs, status: Status) -> Recommendation {
    Recommendation {
        bid: o.bid,
        cpc_bid: o.bid / inputs.pctr,
        winrate: o.winrate,
        clicks: o.clicks,
        conversions: o.conversions,
        spend: o.spend,
        cpa: o.cpa,
        status,
        adjusted_budget: None,
        adjusted_cpa: None,
    }
}

/// First outcome with the most conversions; candidates are in ascending bid
/// order, so ties go to the lower bid.
fn most_conversions<'a>(it: impl Iterator<Item = &'a BidOutcome>) -> Option<&'a BidOutcome> {
    it.fold(None, |best: Option<&BidOutcome>, o| match best {
        Some(b) if b.conversions >= o.conversions => Some(b),
        _ => Some(o),
    })
}

/// Conversion-maximizing bid under a CPA cap and budget.
///
/// `bid*` is the conversion-maximizing bid among those meeting the CPA cap.
/// If its spend fits the budget the goal is feasible. Otherwise the best
/// bid within budget is returned with the budget (`B'`) that would afford
/// `bid*` and the CPA goal (`C'`) the budget can actually buy.
pub fn recommend_bid(
    landscape: &BidLandscape,
    inputs: &CampaignInputs,
    goal: &CpaGoal,
) -> Result<Recommendation, OptimizerError> {
    inputs.validate()?;
    goal.validate()?;
    let candidates = candidate_outcomes(landscape, inputs);
    if candidates.is_empty() {
        return Err(OptimizerError::EmptyLandscape);
    }

    let cap = goal.cpa_cap();
    let within_budget = |o: &&BidOutcome| o.spend <= goal.budget;
    let best_cpa = most_conversions(candidates.iter().filter(|o| o.cpa <= cap));
    let best_budget = most_conversions(candidates.iter().filter(within_budget));

    let rec = match (best_cpa, best_budget) {
        (Some(target), _) if target.spend <= goal.budget => {
            recommendation(target, inputs, Status::Feasible)
        }
        (Some(target), Some(affordable)) => {
            let largest = candidates
                .iter()
                .rev()
                .find(within_budget)
                .unwrap_or(affordable);
            Recommendation {
                adjusted_budget: Some(target.spend),
                adjusted_cpa: Some(largest.cpa),
                ..recommendation(affordable, inputs, Status::BudgetLimited)
            }
        }
        (Some(target), None) => Recommendation {
            adjusted_budget: Some(target.spend),
            ..recommendation(target, inputs, Status::Infeasible)
        },
        (None, _) => {
            let cheapest =
                candidates
                    .iter()
                    .fold(&candidates[0], |b, o| if o.cpa < b.cpa { o } else { b });
            Recommendation {
                adjusted_cpa: Some(cheapest.cpa),
                adjusted_budget: (cheapest.spend > goal.budget).then_some(cheapest.spend),
                ..recommendation(cheapest, inputs, Status::Infeasible)
            }
        }
    };
    Ok(rec)
}

/// One row of a bid curve. Cost-derived fields are `None` below the first
/// bin with a defined cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bid: f64,
    pub winrate: f64,
    pub cost: Option<f64>,
    pub cpa: Option<f64>,
    pub clicks: f64,
    pub conversions: f64,
    pub spend: Option<f64>,
}

/// Predictions on the grid `from, from + step, ..` up to `to` inclusive.
pub fn bid_curve(
    landscape: &BidLandscape,
    inputs: &CampaignInputs,
    from: f64,
    to: f64,
    step: f64,
) -> Result<Vec<CurvePoint>, OptimizerError> {
    inputs.validate()?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid("step", "must be positive"));
    }
    if !(from >= 0.0 && from.is_finite()) {
        return Err(invalid("from", "must be non-negative"));
    }
    if !(to >= from && to.is_finite()) {
        return Err(invalid("to", "must not be below from"));
    }
    let count = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| {
            let bid = from + k as f64 * step;
            let winrate = landscape.query_winrate(bid);
            let clicks = clicks_from(inputs, winrate);
            let cost = landscape.query_cost(bid).ok();
            CurvePoint {
                bid,
                winrate,
                cost,
                cpa: cost.map(|c| cpa_from(inputs, c)),
                clicks,
                conversions: predict_conversions(clicks, inputs.pcvr),
                spend: cost.map(|c| clicks * c / inputs.pctr),
            }
        })
        .collect())
}
