//! Reference estimators: Kaplan-Meier and log-normal win rates, flat-rate
//! curves, and nearest-neighbour / linear-interpolation CPA predictors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid the survival estimator snaps prices to.
pub const SURVIVAL_PRICE_STEP: f64 = 0.01;
pub const FLAT_WINRATE_LEVELS: [f64; 3] = [0.1, 0.2, 0.3];
pub const FLAT_COST_RATIOS: [f64; 2] = [0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("no outcomes")]
    NoOutcomes,
    #[error("prices must be positive, got {0}")]
    NonPositivePrice(f64),
    #[error("empty history")]
    EmptyHistory,
    #[error("need at least 2 history points, got {0}")]
    TooFewPoints(usize),
}

/// Winning price when `won`, otherwise the losing bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricedOutcome {
    pub price: f64,
    pub won: bool,
}

impl PricedOutcome {
    pub fn win(price: f64) -> Self {
        Self { price, won: true }
    }

    pub fn loss(bid: f64) -> Self {
        Self {
            price: bid,
            won: false,
        }
    }
}

fn to_steps(value: f64) -> f64 {
    let q = value / SURVIVAL_PRICE_STEP;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        q
    }
}

/// Fitted product-limit estimator; reusable across many query bids.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    /// (event price in cents, cumulative survival just after it)
    steps: Vec<(i64, f64)>,
}

impl SurvivalCurve {
    pub fn fit(outcomes: &[PricedOutcome]) -> Result<Self, BaselineError> {
        if outcomes.is_empty() {
            return Err(BaselineError::NoOutcomes);
        }
        // cents -> (wins, total)
        let mut at: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
        for o in outcomes {
            if !(o.price > 0.0 && o.price.is_finite()) {
                return Err(BaselineError::NonPositivePrice(o.price));
            }
            let cents = to_steps(o.price).round() as i64;
            let e = at.entry(cents).or_default();
            e.1 += 1;
            if o.won {
                e.0 += 1;
            }
        }
        let mut at_risk = outcomes.len() as u64;
        let mut survival = 1.0;
        let mut steps = Vec::new();
        for (cents, (deaths, total)) in at {
            if deaths > 0 {
                survival *= (at_risk - deaths) as f64 / at_risk as f64;
                steps.push((cents, survival));
            }
            at_risk -= total;
        }
        Ok(Self { steps })
    }

    /// `1 - prod_{b_j < bid} (n_j - d_j) / n_j`.
    pub fn winrate(&self, bid: f64) -> f64 {
        let q = to_steps(bid);
        let end = self.steps.partition_point(|&(c, _)| (c as f64) < q);
        match end {
            0 => 0.0,
            k => (1.0 - self.steps[k - 1].1).clamp(0.0, 1.0),
        }
    }
}

pub fn survival_winrate(outcomes: &[PricedOutcome], query_bid: f64) -> Result<f64, BaselineError> {
    Ok(SurvivalCurve::fit(outcomes)?.winrate(query_bid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

pub fn lognormal_fit(winning_prices: &[f64]) -> Result<LogNormalParams, BaselineError> {
    if winning_prices.is_empty() {
        return Err(BaselineError::NoOutcomes);
    }
    let mut logs = Vec::with_capacity(winning_prices.len());
    for &p in winning_prices {
        if !(p > 0.0 && p.is_finite()) {
            return Err(BaselineError::NonPositivePrice(p));
        }
        logs.push(p.ln());
    }
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    Ok(LogNormalParams {
        mu,
        sigma: var.sqrt(),
    })
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that the winning price is at most `bid`.
pub fn lognormal_winrate(params: &LogNormalParams, bid: f64) -> f64 {
    if bid.is_nan() || bid <= 0.0 {
        return 0.0;
    }
    let z = bid.ln() - params.mu;
    if params.sigma <= 0.0 {
        return if z >= 0.0 { 1.0 } else { 0.0 };
    }
    standard_normal_cdf(z / params.sigma)
}

/// Constant win rate with cost a fixed share of the CPC bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatRate {
    pub winrate_level: f64,
    pub cost_ratio: f64,
}

impl FlatRate {
    pub fn new(winrate_level: f64, cost_ratio: f64) -> Self {
        Self {
            winrate_level,
            cost_ratio,
        }
    }

    pub fn winrate(&self, _bid: f64) -> f64 {
        self.winrate_level
    }

    pub fn cpc_cost(&self, cpc_bid: f64) -> f64 {
        self.cost_ratio * cpc_bid
    }

    pub fn per_impression_cost(&self, cpc_bid: f64, pctr: f64) -> f64 {
        self.cpc_cost(cpc_bid) * pctr
    }
}

/// `(winrate, per-impression cost)` of a flat curve at a CPC bid.
pub fn flat_curves(winrate_level: f64, cost_ratio: f64, cpc_bid: f64, pctr: f64) -> (f64, f64) {
    let f = FlatRate::new(winrate_level, cost_ratio);
    (f.winrate(cpc_bid), f.per_impression_cost(cpc_bid, pctr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpaHistoryPoint {
    pub bid: f64,
    pub cpa: f64,
}

/// Value at the `x` closest to `query`; ties go to the smaller `x`.
pub fn nearest_neighbor(points: &[(f64, f64)], query: f64) -> Option<f64> {
    points
        .iter()
        .fold(None, |best: Option<(f64, f64)>, &(x, y)| {
            let d = (x - query).abs();
            match best {
                Some((bx, _)) => {
                    let bd = (bx - query).abs();
                    if d < bd || (d == bd && x < bx) {
                        Some((x, y))
                    } else {
                        best
                    }
                }
                None => Some((x, y)),
            }
        })
        .map(|(_, y)| y)
}

pub fn nns_predict_cpa(history: &[CpaHistoryPoint], bid: f64) -> Result<f64, BaselineError> {
    let points: Vec<_> = history.iter().map(|h| (h.bid, h.cpa)).collect();
    nearest_neighbor(&points, bid).ok_or(BaselineError::EmptyHistory)
}

/// Linear interpolation between the tightest bracketing history bids,
/// clamped to the end points outside the covered range.
pub fn li_predict_cpa(history: &[CpaHistoryPoint], bid: f64) -> Result<f64, BaselineError> {
    if history.len() < 2 {
        return Err(BaselineError::TooFewPoints(history.len()));
    }
    let mut pts = history.to_vec();
    pts.sort_by(|a, b| a.bid.total_cmp(&b.bid));
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    if bid <= first.bid {
        return Ok(first.cpa);
    }
    if bid >= last.bid {
        return Ok(last.cpa);
    }
    let j = pts.partition_point(|p| p.bid < bid);
    let hi = pts[j];
    if hi.bid == bid {
        return Ok(hi.cpa);
    }
    let lo = pts[j - 1];
    Ok(lo.cpa + (bid - lo.bid) * (hi.cpa - lo.cpa) / (hi.bid - lo.bid))
}
