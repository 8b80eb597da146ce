//! Forecast metrics, offline CPA / win-rate evaluation, and simulated A/B
//! lift (bid, click and ROI increase rates).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction_log::{AuctionSnapshot, GroupingKey};
use crate::baselines::{
    li_predict_cpa, lognormal_fit, lognormal_winrate, nearest_neighbor, nns_predict_cpa,
    BaselineError, CpaHistoryPoint, PricedOutcome, SurvivalCurve, FLAT_WINRATE_LEVELS,
};
use crate::gsp_sim::{counterfactual_curve, generate_log, summarize, MarketConfig, SimError};
use crate::landscape::{build_grouped, BidLandscape, BuildOptions, LandscapeError, Normalization};
use crate::optimizer::{
    candidate_outcomes, predict_cpa, recommend_bid, CampaignInputs, CpaGoal, OptimizerError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no forecast pairs")]
    Empty,
    #[error("actual values must be positive, got {0}")]
    NonPositiveActual(f64),
    #[error("ground truth undefined")]
    GroundTruthUndefined,
    #[error("total spend is zero")]
    ZeroSpend,
    #[error("method 'external' needs a predictions file")]
    MissingPredictions,
    #[error("no prediction for campaign '{0}'")]
    MissingPrediction(String),
    #[error("no landscape for group '{0}'")]
    MissingLandscape(String),
    #[error("unknown method '{0}' (expected ours, nns, li or external)")]
    UnknownMethod(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPair {
    pub actual: f64,
    pub predicted: f64,
}

impl ForecastPair {
    pub fn new(actual: f64, predicted: f64) -> Self {
        Self { actual, predicted }
    }
}

fn relative_errors(pairs: &[ForecastPair]) -> Result<impl Iterator<Item = f64> + '_, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(p) = pairs.iter().find(|p| p.actual.is_nan() || p.actual <= 0.0) {
        return Err(EvalError::NonPositiveActual(p.actual));
    }
    Ok(pairs.iter().map(|p| (p.predicted - p.actual) / p.actual))
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(pairs: &[ForecastPair]) -> Result<f64, EvalError> {
    Ok(relative_errors(pairs)?.map(f64::abs).sum::<f64>() / pairs.len() as f64)
}

/// Root mean squared percentage error, as a fraction.
pub fn rmspe(pairs: &[ForecastPair]) -> Result<f64, EvalError> {
    let sq = relative_errors(pairs)?.map(|e| e * e).sum::<f64>();
    Ok((sq / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mape: f64,
    pub rmspe: f64,
}

pub fn metric_report(pairs: &[ForecastPair]) -> Result<MetricReport, EvalError> {
    Ok(MetricReport {
        n: pairs.len(),
        mape: mape(pairs)?,
        rmspe: rmspe(pairs)?,
    })
}

/// Observed `(winrate, per-impression cost)` of a campaign at one bid.
pub fn ground_truth_landscape(
    impressions: f64,
    clicks: f64,
    spend: f64,
    ctr: f64,
) -> Result<(f64, f64), EvalError> {
    if !(clicks > 0.0 && impressions > 0.0 && ctr > 0.0) {
        return Err(EvalError::GroundTruthUndefined);
    }
    Ok((clicks / (impressions * ctr), spend / clicks * ctr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbRecord {
    pub campaign_id: String,
    pub bid_current: f64,
    pub bid_recommended: f64,
    pub spend: f64,
    pub clicks_current: f64,
    pub clicks_recommended: f64,
    pub roi_current: f64,
    pub roi_recommended: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbLift {
    pub bir: f64,
    pub cir: f64,
    pub rir: f64,
}

/// Spend-weighted relative increases of bid, clicks and ROI.
pub fn ab_lift(records: &[AbRecord]) -> Result<AbLift, EvalError> {
    let total: f64 = records.iter().map(|r| r.spend).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(EvalError::ZeroSpend);
    }
    let mut lift = AbLift {
        bir: 0.0,
        cir: 0.0,
        rir: 0.0,
    };
    let rel = |new: f64, old: f64| if old > 0.0 { (new - old) / old } else { 0.0 };
    for r in records.iter().filter(|r| r.spend > 0.0) {
        let w = r.spend / total;
        lift.bir += w * rel(r.bid_recommended, r.bid_current);
        lift.cir += w * rel(r.clicks_recommended, r.clicks_current);
        lift.rir += w * rel(r.roi_recommended, r.roi_current);
    }
    Ok(lift)
}

/// CPC bid per campaign.
pub type BidPolicy = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbOutcome {
    pub lift: AbLift,
    pub records: Vec<AbRecord>,
}

fn roi(conversions: f64, spend: f64) -> f64 {
    if spend > 0.0 {
        conversions / spend
    } else {
        0.0
    }
}

/// Replays both policies through the simulator with common random numbers
/// and compares them campaign by campaign. Weights are the baseline arm's
/// spend; ROI is conversions per unit spend.
pub fn simulated_ab(
    market: &MarketConfig,
    baseline: &BidPolicy,
    optimized: &BidPolicy,
    n_auctions: usize,
) -> Result<AbOutcome, EvalError> {
    let base_stats = summarize(
        market,
        &generate_log(&market.with_base_bids(baseline), n_auctions)?,
    );
    let opt_stats = summarize(
        market,
        &generate_log(&market.with_base_bids(optimized), n_auctions)?,
    );
    let records: Vec<AbRecord> = market
        .advertisers
        .iter()
        .map(|a| {
            let id = &a.advertiser_id;
            let (b, o) = (base_stats[id], opt_stats[id]);
            AbRecord {
                campaign_id: id.clone(),
                bid_current: baseline.get(id).copied().unwrap_or(a.base_bid),
                bid_recommended: optimized.get(id).copied().unwrap_or(a.base_bid),
                spend: b.spend,
                clicks_current: b.clicks,
                clicks_recommended: o.clicks,
                roi_current: roi(b.conversions, b.spend),
                roi_recommended: roi(o.conversions, o.spend),
            }
        })
        .collect();
    Ok(AbOutcome {
        lift: ab_lift(&records)?,
        records,
    })
}

/// Landscape options matching the simulator: one landscape per advertiser,
/// losing positions dropped, win rate read per participation.
pub fn simulation_build_options(market: &MarketConfig, bin_size: f64) -> BuildOptions {
    BuildOptions {
        bin_size,
        group_by: GroupingKey::ByAdvertiser,
        max_position: Some(market.slots),
        normalization: Normalization::Participations,
        ..BuildOptions::default()
    }
}

/// Number of logged auctions each advertiser took part in.
fn participations(log: &[AuctionSnapshot]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for s in log {
        for p in s.participants() {
            *out.entry(p.advertiser_id.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Per campaign, sets the CPA goal to the CPA at the largest bid whose
/// predicted spend fits the budget and returns the recommended CPC bid.
/// Campaigns without a usable landscape keep their current bid.
pub fn cpa_goal_policy(
    market: &MarketConfig,
    log: &[AuctionSnapshot],
    budgets: &BTreeMap<String, f64>,
    bin_size: f64,
) -> Result<BidPolicy, EvalError> {
    let built = build_grouped(log, &simulation_build_options(market, bin_size))?;
    let counts = participations(log);
    let mut policy = BidPolicy::new();
    for a in &market.advertisers {
        let id = &a.advertiser_id;
        let mut bid = a.base_bid;
        if let (Some(l), Some(&budget)) = (built.landscapes.get(id), budgets.get(id)) {
            let inputs = CampaignInputs::new(
                counts.get(id).copied().unwrap_or(0),
                a.ranking_pctr(),
                a.pcvr,
            );
            let exhausting = candidate_outcomes(l, &inputs)
                .into_iter()
                .rev()
                .find(|o| o.spend <= budget && o.cpa > 0.0);
            if let Some(target) = exhausting {
                let rec = recommend_bid(l, &inputs, &CpaGoal::new(target.cpa, budget))?;
                bid = rec.cpc_bid;
            }
        }
        policy.insert(id.clone(), bid);
    }
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpaMethod {
    Ours,
    Nns,
    Li,
    External,
}

impl FromStr for CpaMethod {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ours" => Ok(CpaMethod::Ours),
            "nns" => Ok(CpaMethod::Nns),
            "li" => Ok(CpaMethod::Li),
            "external" => Ok(CpaMethod::External),
            other => Err(EvalError::UnknownMethod(other.to_string())),
        }
    }
}

impl fmt::Display for CpaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CpaMethod::Ours => "ours",
            CpaMethod::Nns => "nns",
            CpaMethod::Li => "li",
            CpaMethod::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpaCampaign {
    pub campaign_id: String,
    pub group: String,
    /// Current eCPM bid, on the landscape axis.
    pub current_bid: f64,
    pub true_cpa: f64,
    pub pctr: f64,
    pub pcvr: f64,
    /// Observed CPA at earlier eCPM bids.
    pub history: Vec<CpaHistoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpaDataset {
    pub campaigns: Vec<CpaCampaign>,
    pub landscapes: BTreeMap<String, BidLandscape>,
}

/// Predicts each campaign's CPA at its current bid and scores it against
/// the observed CPA.
pub fn eval_cpa_forecast(
    dataset: &CpaDataset,
    method: CpaMethod,
    external: Option<&BTreeMap<String, f64>>,
) -> Result<MetricReport, EvalError> {
    if method == CpaMethod::External && external.is_none() {
        return Err(EvalError::MissingPredictions);
    }
    let pairs = dataset
        .campaigns
        .iter()
        .map(|c| {
            let predicted = match method {
                CpaMethod::Ours => {
                    let l = dataset
                        .landscapes
                        .get(&c.group)
                        .ok_or_else(|| EvalError::MissingLandscape(c.group.clone()))?;
                    let inputs = CampaignInputs::new(0, c.pctr, c.pcvr);
                    predict_cpa(l, &inputs, c.current_bid)?
                }
                CpaMethod::Nns => nns_predict_cpa(&c.history, c.current_bid)?,
                CpaMethod::Li => li_predict_cpa(&c.history, c.current_bid)?,
                CpaMethod::External => *external
                    .and_then(|m| m.get(&c.campaign_id))
                    .ok_or_else(|| EvalError::MissingPrediction(c.campaign_id.clone()))?,
            };
            Ok(ForecastPair::new(c.true_cpa, predicted))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    metric_report(&pairs)
}

fn realized_cpa(
    market: &MarketConfig,
    n_auctions: usize,
    id: &str,
) -> Result<Option<f64>, EvalError> {
    let st = summarize(market, &generate_log(market, n_auctions)?)[id];
    Ok((st.conversions > 0.0).then(|| st.spend / st.conversions))
}

/// Bid multipliers of the simulated history.
pub const HISTORY_BID_FACTORS: [f64; 4] = [0.5, 0.75, 1.25, 1.5];

/// A CPA dataset from the simulator. Landscapes are learned on one log;
/// history points come from separate runs with the campaign's bid scaled,
/// and the true CPA from a held-out run at the current bid.
pub fn simulate_cpa_dataset(
    market: &MarketConfig,
    n_auctions: usize,
    bin_size: f64,
) -> Result<CpaDataset, EvalError> {
    let train = generate_log(market, n_auctions)?;
    let landscapes = build_grouped(&train, &simulation_build_options(market, bin_size))?.landscapes;
    let held_out = MarketConfig {
        seed: market.seed.wrapping_add(1),
        ..market.clone()
    };
    let mut campaigns = Vec::new();
    for (k, a) in market.advertisers.iter().enumerate() {
        let id = &a.advertiser_id;
        let Some(true_cpa) = realized_cpa(&held_out, n_auctions, id)? else {
            continue;
        };
        let mut history = Vec::new();
        for (f_idx, f) in HISTORY_BID_FACTORS.iter().enumerate() {
            let mut m = market.with_base_bids(&BTreeMap::from([(id.clone(), a.base_bid * f)]));
            m.seed = market
                .seed
                .wrapping_add(1000 + (k * HISTORY_BID_FACTORS.len() + f_idx) as u64);
            if let Some(cpa) = realized_cpa(&m, n_auctions, id)? {
                history.push(CpaHistoryPoint {
                    bid: a.base_bid * f * a.ranking_pctr(),
                    cpa,
                });
            }
        }
        if history.len() < 2 || !landscapes.contains_key(id) {
            continue;
        }
        campaigns.push(CpaCampaign {
            campaign_id: id.clone(),
            group: id.clone(),
            current_bid: a.base_bid * a.ranking_pctr(),
            true_cpa,
            pctr: a.ranking_pctr(),
            pcvr: a.pcvr,
            history,
        });
    }
    Ok(CpaDataset {
        campaigns,
        landscapes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateEvalConfig {
    pub bin_size: f64,
    pub flat_levels: Vec<f64>,
}

impl Default for WinrateEvalConfig {
    fn default() -> Self {
        Self {
            bin_size: 0.0001,
            flat_levels: FLAT_WINRATE_LEVELS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateCase {
    pub advertiser_id: String,
    pub bid: f64,
    pub true_winrate: f64,
    pub predictions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateReport {
    pub cases: Vec<WinrateCase>,
    /// MAPE per method name.
    pub mape: BTreeMap<String, f64>,
}

pub const METHOD_LANDSCAPE: &str = "landscape";
pub const METHOD_LANDSCAPE_PER_OBSERVATION: &str = "landscape_per_observation";
pub const METHOD_NNS: &str = "nns";
pub const METHOD_SURVIVAL: &str = "survival";
pub const METHOD_LOGNORMAL: &str = "lognormal";

pub fn flat_method_name(level: f64) -> String {
    format!("flat_{level}")
}

/// Win rate at each advertiser's base bid, predicted by every method from
/// `log` and scored against counterfactual replay of the same log.
/// Advertisers whose true win rate is zero are left out (MAPE undefined).
pub fn eval_winrate_forecast(
    market: &MarketConfig,
    log: &[AuctionSnapshot],
    config: &WinrateEvalConfig,
) -> Result<WinrateReport, EvalError> {
    let options = simulation_build_options(market, config.bin_size);
    let per_participation = build_grouped(log, &options)?.landscapes;
    let per_observation = build_grouped(
        log,
        &BuildOptions {
            normalization: Normalization::Observations,
            ..options
        },
    )?
    .landscapes;

    let mut outcomes: BTreeMap<&str, Vec<PricedOutcome>> = BTreeMap::new();
    for s in log {
        for p in s.participants() {
            let o = if p.position <= market.slots {
                PricedOutcome::win(p.cost())
            } else {
                PricedOutcome::loss(p.bid())
            };
            outcomes
                .entry(p.advertiser_id.as_str())
                .or_default()
                .push(o);
        }
    }

    // Nearest-neighbour points: (score-weighted bid, observed win fraction).
    let observed: Vec<(&str, f64, f64)> = market
        .advertisers
        .iter()
        .filter_map(|a| {
            let o = outcomes.get(a.advertiser_id.as_str())?;
            let won = o.iter().filter(|x| x.won).count() as f64;
            let x = a.quality * a.ranking_pctr() * a.base_bid;
            Some((a.advertiser_id.as_str(), x, won / o.len() as f64))
        })
        .collect();

    let mut cases = Vec::new();
    for a in &market.advertisers {
        let id = a.advertiser_id.as_str();
        let truth = counterfactual_curve(market, log, id, &[a.base_bid])?[0].winrate;
        let (Some(own), Some(l)) = (outcomes.get(id), per_participation.get(id)) else {
            continue;
        };
        if truth <= 0.0 {
            continue;
        }
        let ecpm_bid = a.base_bid * a.ranking_pctr();
        let mut predictions = BTreeMap::new();
        predictions.insert(METHOD_LANDSCAPE.to_string(), l.query_winrate(ecpm_bid));
        if let Some(lo) = per_observation.get(id) {
            predictions.insert(
                METHOD_LANDSCAPE_PER_OBSERVATION.to_string(),
                lo.query_winrate(ecpm_bid),
            );
        }
        for &level in &config.flat_levels {
            predictions.insert(flat_method_name(level), level);
        }
        let others: Vec<(f64, f64)> = observed
            .iter()
            .filter(|(o, _, _)| *o != id)
            .map(|&(_, x, y)| (x, y))
            .collect();
        if let Some(y) = nearest_neighbor(&others, a.quality * a.ranking_pctr() * a.base_bid) {
            predictions.insert(METHOD_NNS.to_string(), y);
        }
        predictions.insert(
            METHOD_SURVIVAL.to_string(),
            SurvivalCurve::fit(own)?.winrate(a.base_bid),
        );
        let wins: Vec<f64> = own.iter().filter(|o| o.won).map(|o| o.price).collect();
        if let Ok(params) = lognormal_fit(&wins) {
            predictions.insert(
                METHOD_LOGNORMAL.to_string(),
                lognormal_winrate(&params, a.base_bid),
            );
        }
        cases.push(WinrateCase {
            advertiser_id: id.to_string(),
            bid: a.base_bid,
            true_winrate: truth,
            predictions,
        });
    }

    let methods: std::collections::BTreeSet<String> = cases
        .iter()
        .flat_map(|c| c.predictions.keys().cloned())
        .collect();
    let mut scores = BTreeMap::new();
    for m in methods {
        let pairs: Vec<ForecastPair> = cases
            .iter()
            .filter_map(|c| {
                c.predictions
                    .get(&m)
                    .map(|&p| ForecastPair::new(c.true_winrate, p))
            })
            .collect();
        if pairs.len() == cases.len() {
            scores.insert(m, mape(&pairs)?);
        }
    }
    Ok(WinrateReport {
        cases,
        mape: scores,
    })
}
