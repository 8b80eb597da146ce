//! Quality-weighted GSP marketplace simulator and counterfactual replay.
//!
//! Auction `k` draws from a ChaCha8 stream seeded with the market seed and
//! `set_stream(k)`, so any auction can be regenerated on its own and logs
//! are identical across platforms. Per advertiser, in config order, the
//! stream yields one participation uniform and one standard normal for the
//! bid jitter; both are always drawn.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction_log::{
    currency_to_micros, micros_to_currency, AuctionSnapshot, ParticipantRecord, SnapshotError,
};

/// Redraw limit for auctions where nobody clears the reserve.
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid market config: {0}")]
    InvalidConfig(String),
    #[error("n_auctions must be at least 1")]
    NoAuctions,
    #[error("unknown advertiser '{0}'")]
    UnknownAdvertiser(String),
    #[error("no advertiser cleared the reserve after {0} draws")]
    NoParticipants(usize),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

fn default_pcvr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimAdvertiser {
    pub advertiser_id: String,
    pub context: String,
    /// Median CPC bid.
    pub base_bid: f64,
    /// Log-normal sigma of the per-auction bid.
    pub bid_jitter: f64,
    pub quality: f64,
    pub pctr_by_position: Vec<f64>,
    pub participation_rate: f64,
    #[serde(default = "default_pcvr")]
    pub pcvr: f64,
}

impl SimAdvertiser {
    /// pCTR used for ranking and logged with the auction.
    pub fn ranking_pctr(&self) -> f64 {
        self.pctr_by_position[0]
    }

    /// Expected clicks when shown at 1-based `position`; zero past the slots.
    pub fn click_probability(&self, position: u32) -> f64 {
        position
            .checked_sub(1)
            .and_then(|i| self.pctr_by_position.get(i as usize))
            .copied()
            .unwrap_or(0.0)
    }

    fn score(&self, bid_micro: i64) -> f64 {
        self.quality * self.ranking_pctr() * micros_to_currency(bid_micro)
    }

    fn cost_for(&self, next_score: Option<f64>, bid_micro: i64, reserve_micro: i64) -> i64 {
        let next = next_score.map_or(reserve_micro, |s| {
            currency_to_micros(s / (self.quality * self.ranking_pctr()))
        });
        next.max(reserve_micro).min(bid_micro)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub advertisers: Vec<SimAdvertiser>,
    pub slots: u32,
    pub reserve_cpc: f64,
    pub seed: u64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.slots < 1 {
            return bad("slots must be at least 1".into());
        }
        if !(self.reserve_cpc >= 0.0 && self.reserve_cpc.is_finite()) {
            return bad("reserve_cpc must be non-negative".into());
        }
        if self.advertisers.is_empty() {
            return bad("no advertisers".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.advertisers {
            let id = &a.advertiser_id;
            if !seen.insert(id.as_str()) {
                return bad(format!("duplicate advertiser '{id}'"));
            }
            if !(a.base_bid > 0.0 && a.base_bid.is_finite()) {
                return bad(format!("{id}: base_bid must be positive"));
            }
            if !(a.bid_jitter >= 0.0 && a.bid_jitter.is_finite()) {
                return bad(format!("{id}: bid_jitter must be non-negative"));
            }
            if !(a.quality > 0.0 && a.quality.is_finite()) {
                return bad(format!("{id}: quality must be positive"));
            }
            if !(a.participation_rate > 0.0 && a.participation_rate <= 1.0) {
                return bad(format!("{id}: participation_rate must be in (0, 1]"));
            }
            if !(a.pcvr > 0.0 && a.pcvr <= 1.0) {
                return bad(format!("{id}: pcvr must be in (0, 1]"));
            }
            if a.pctr_by_position.len() != self.slots as usize {
                return bad(format!(
                    "{id}: pctr_by_position needs {} entries",
                    self.slots
                ));
            }
            if a.pctr_by_position.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return bad(format!("{id}: pctr values must be in (0, 1]"));
            }
            if a.pctr_by_position.windows(2).any(|w| w[1] > w[0]) {
                return bad(format!("{id}: pctr_by_position must be non-increasing"));
            }
        }
        Ok(())
    }

    pub fn advertiser(&self, id: &str) -> Option<&SimAdvertiser> {
        self.advertisers.iter().find(|a| a.advertiser_id == id)
    }

    fn reserve_micro(&self) -> i64 {
        currency_to_micros(self.reserve_cpc)
    }

    /// Same market with some advertisers' base bids replaced.
    pub fn with_base_bids(&self, bids: &BTreeMap<String, f64>) -> MarketConfig {
        let mut m = self.clone();
        for a in &mut m.advertisers {
            if let Some(&b) = bids.get(&a.advertiser_id) {
                a.base_bid = b;
            }
        }
        m
    }

    /// A random but reproducible market.
    pub fn synthetic(n_advertisers: usize, slots: u32, seed: u64) -> MarketConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = LogNormal::<f64>::new(0.0, 0.5).expect("valid log-normal");
        let decay = Uniform::<f64>::new(0.6, 0.9).expect("valid range");
        let advertisers = (0..n_advertisers)
            .map(|i| {
                let pctr1: f64 = rng.random_range(0.01..0.05);
                let d = decay.sample(&mut rng);
                SimAdvertiser {
                    advertiser_id: format!("adv{i:03}"),
                    context: format!("ctx{}", i % 2),
                    base_bid: (base.sample(&mut rng) * 100.0).round() / 100.0,
                    bid_jitter: rng.random_range(0.1..0.5),
                    quality: rng.random_range(0.5..1.5),
                    pctr_by_position: (0..slots).map(|k| pctr1 * d.powi(k as i32)).collect(),
                    participation_rate: rng.random_range(0.3..0.9),
                    pcvr: rng.random_range(0.02..0.1),
                }
            })
            .collect();
        MarketConfig {
            advertisers,
            slots,
            reserve_cpc: 0.05,
            seed,
        }
    }
}

struct Entry<'a> {
    adv: &'a SimAdvertiser,
    bid_micro: i64,
    score: f64,
}

/// Descending score, ties to the smaller advertiser id.
fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

fn clear(
    auction_id: String,
    ts: i64,
    mut entries: Vec<Entry<'_>>,
    slots: u32,
    reserve_micro: i64,
) -> Result<AuctionSnapshot, SnapshotError> {
    entries
        .sort_by(|a, b| rank_order(a.score, &a.adv.advertiser_id, b.score, &b.adv.advertiser_id));
    let participants = (0..entries.len())
        .map(|i| {
            let e = &entries[i];
            let position = i as u32 + 1;
            let cost = if position <= slots {
                e.adv.cost_for(
                    entries.get(i + 1).map(|n| n.score),
                    e.bid_micro,
                    reserve_micro,
                )
            } else {
                0
            };
            ParticipantRecord {
                advertiser_id: e.adv.advertiser_id.clone(),
                context: e.adv.context.clone(),
                position,
                ranking_score: e.score,
                cpc_bid: e.bid_micro,
                cpc_cost: cost,
                pctr: e.adv.ranking_pctr(),
            }
        })
        .collect();
    AuctionSnapshot::new(auction_id, ts, participants)
}

/// Runs auction number `index` of the market.
pub fn run_auction(market: &MarketConfig, index: u64) -> Result<AuctionSnapshot, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(market.seed);
    rng.set_stream(index);
    let reserve = market.reserve_micro();
    for _ in 0..MAX_REDRAWS {
        let mut entries = Vec::new();
        for adv in &market.advertisers {
            let u: f64 = rng.random();
            let z: f64 = StandardNormal.sample(&mut rng);
            if u >= adv.participation_rate {
                continue;
            }
            let bid_micro = currency_to_micros(adv.base_bid * (adv.bid_jitter * z).exp());
            if bid_micro > 0 && bid_micro >= reserve {
                entries.push(Entry {
                    adv,
                    bid_micro,
                    score: adv.score(bid_micro),
                });
            }
        }
        if !entries.is_empty() {
            let id = format!("sim-{}-{index}", market.seed);
            return Ok(clear(id, index as i64, entries, market.slots, reserve)?);
        }
    }
    Err(SimError::NoParticipants(MAX_REDRAWS))
}

/// `n_auctions` consecutive auctions, identical for a given seed.
pub fn generate_log(
    market: &MarketConfig,
    n_auctions: usize,
) -> Result<Vec<AuctionSnapshot>, SimError> {
    market.validate()?;
    if n_auctions == 0 {
        return Err(SimError::NoAuctions);
    }
    (0..n_auctions as u64)
        .map(|k| run_auction(market, k))
        .collect()
}

/// Position and CPC cost (micros) the advertiser gets in `snapshot` when
/// bidding `bid_micro` against the logged rivals. `None` when the bid is
/// below the reserve.
pub fn replay(
    market: &MarketConfig,
    snapshot: &AuctionSnapshot,
    adv: &SimAdvertiser,
    bid_micro: i64,
) -> Option<(u32, i64)> {
    let reserve = market.reserve_micro();
    if bid_micro <= 0 || bid_micro < reserve {
        return None;
    }
    let own = adv.score(bid_micro);
    let id = adv.advertiser_id.as_str();
    let mut above = 0u32;
    let mut next: Option<f64> = None;
    for p in snapshot.participants() {
        if p.advertiser_id == id {
            continue;
        }
        if rank_order(p.ranking_score, &p.advertiser_id, own, id).is_lt() {
            above += 1;
        } else if next.is_none_or(|n| p.ranking_score > n) {
            next = Some(p.ranking_score);
        }
    }
    let position = above + 1;
    let cost = if position <= market.slots {
        adv.cost_for(next, bid_micro, reserve)
    } else {
        0
    };
    Some((position, cost))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPoint {
    pub bid: f64,
    pub winrate: f64,
    /// Mean per-impression cost (CPC cost x ranking pCTR) over won auctions.
    pub cost: Option<f64>,
}

/// True win rate and cost at each CPC bid on the grid, replaying every
/// logged auction the advertiser took part in with the rivals held fixed.
pub fn counterfactual_curve(
    market: &MarketConfig,
    log: &[AuctionSnapshot],
    advertiser_id: &str,
    bid_grid: &[f64],
) -> Result<Vec<CounterfactualPoint>, SimError> {
    let adv = market
        .advertiser(advertiser_id)
        .ok_or_else(|| SimError::UnknownAdvertiser(advertiser_id.to_string()))?;
    let mine: Vec<&AuctionSnapshot> = log
        .iter()
        .filter(|s| s.find(advertiser_id).is_some())
        .collect();
    Ok(bid_grid
        .iter()
        .map(|&bid| {
            let bid_micro = currency_to_micros(bid);
            let mut wins = 0usize;
            let mut cost_sum = 0.0;
            for s in &mine {
                if let Some((pos, cost)) = replay(market, s, adv, bid_micro) {
                    if pos <= market.slots {
                        wins += 1;
                        cost_sum += micros_to_currency(cost) * adv.ranking_pctr();
                    }
                }
            }
            CounterfactualPoint {
                bid,
                winrate: if mine.is_empty() {
                    0.0
                } else {
                    wins as f64 / mine.len() as f64
                },
                cost: (wins > 0).then(|| cost_sum / wins as f64),
            }
        })
        .collect())
}

/// What one advertiser got out of a log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserStats {
    pub auctions: u64,
    pub wins: u64,
    pub clicks: f64,
    pub spend: f64,
    pub conversions: f64,
}

/// Expected clicks, spend and conversions per advertiser, using the
/// position click-through rates of the market.
pub fn summarize(
    market: &MarketConfig,
    log: &[AuctionSnapshot],
) -> BTreeMap<String, AdvertiserStats> {
    let mut out: BTreeMap<String, AdvertiserStats> = market
        .advertisers
        .iter()
        .map(|a| (a.advertiser_id.clone(), AdvertiserStats::default()))
        .collect();
    for s in log {
        for p in s.participants() {
            let (Some(adv), Some(st)) = (
                market.advertiser(&p.advertiser_id),
                out.get_mut(&p.advertiser_id),
            ) else {
                continue;
            };
            st.auctions += 1;
            if p.position <= market.slots {
                let clicks = adv.click_probability(p.position);
                st.wins += 1;
                st.clicks += clicks;
                st.spend += clicks * p.cost();
                st.conversions += clicks * adv.pcvr;
            }
        }
    }
    out
}
