//! eCPM bid ranges per (participant, candidate position).
//!
//! For participant `i` and each candidate position `j`, the ranking scores of
//! the neighbours of `j` are rescaled into `i`'s own eCPM units
//! (`score[k] / score[i] * bid[i] * pctr[i]`). The resulting interval is the
//! set of eCPM bids at which `i` would have landed on position `j`, with every
//! other participant unchanged.

use serde::{Deserialize, Serialize};

use crate::auction_log::AuctionSnapshot;

/// Largest eCPM bid used as the open upper bound of position 1.
pub const DEFAULT_MAX_ECPM: f64 = 9.99;

/// One eCPM interval, in per-impression currency (cost x pCTR, no x1000).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeObservation {
    pub advertiser_id: String,
    pub context: String,
    pub position: u32,
    pub ecpm_up: f64,
    pub ecpm_dn: f64,
    pub ecpm_cost: f64,
}

impl RangeObservation {
    /// Observation with only the numeric fields set; handy for building
    /// landscapes from hand-made intervals.
    pub fn bare(ecpm_up: f64, ecpm_dn: f64, ecpm_cost: f64) -> Self {
        Self {
            advertiser_id: String::new(),
            context: String::new(),
            position: 1,
            ecpm_up,
            ecpm_dn,
            ecpm_cost,
        }
    }
}

/// Emits every `(i, j)` interval with `ecpm_up >= ecpm_dn`, participant-major.
pub fn derive_ecpm_ranges(snapshot: &AuctionSnapshot, max_ecpm: f64) -> Vec<RangeObservation> {
    let mut out = Vec::with_capacity(snapshot.len() * snapshot.len());
    derive_into(snapshot, max_ecpm, |_, obs| {
        out.push(obs);
    });
    out
}

/// Same as [`derive_ecpm_ranges`] but hands each observation to `sink`
/// together with the 0-based index of the participant it belongs to.
pub fn derive_into<F>(snapshot: &AuctionSnapshot, max_ecpm: f64, mut sink: F)
where
    F: FnMut(usize, RangeObservation),
{
    for i in 0..snapshot.len() {
        derive_participant(snapshot, i, max_ecpm, |obs| sink(i, obs));
    }
}

/// Intervals of the participant at 0-based index `idx`, one per candidate
/// position.
pub fn derive_participant<F>(snapshot: &AuctionSnapshot, idx: usize, max_ecpm: f64, sink: F)
where
    F: FnMut(RangeObservation),
{
    derive_participant_upto(snapshot, idx, max_ecpm, u32::MAX, sink)
}

/// [`derive_participant`] restricted to positions `1..=max_position`.
pub fn derive_participant_upto<F>(
    snapshot: &AuctionSnapshot,
    idx: usize,
    max_ecpm: f64,
    max_position: u32,
    mut sink: F,
) where
    F: FnMut(RangeObservation),
{
    let parts = snapshot.participants();
    let n = parts.len();
    // 1-based accessor, matching the position numbering of the log.
    let score = |k: usize| parts[k - 1].ranking_score;

    let i = idx + 1;
    let me = &parts[idx];
    let own = me.bid() * me.pctr;
    let scaled = |k: usize| score(k) / score(i) * own;
    let ecpm_cost = me.cost() * me.pctr;

    for j in 1..=n.min(max_position as usize) {
        let (ecpm_up, ecpm_dn) = if j == i {
            (
                if j > 1 { scaled(j - 1) } else { max_ecpm },
                if j < n { scaled(j + 1) } else { own },
            )
        } else if j > i {
            (
                if j > 1 { scaled(j) } else { max_ecpm },
                if j < n { scaled(j + 1) } else { own },
            )
        } else {
            (
                if j > 1 { scaled(j - 1) } else { max_ecpm },
                if j < n { scaled(j) } else { own },
            )
        };

        if ecpm_up >= ecpm_dn {
            sink(RangeObservation {
                advertiser_id: me.advertiser_id.clone(),
                context: me.context.clone(),
                position: j as u32,
                ecpm_up,
                ecpm_dn,
                ecpm_cost,
            });
        }
    }
}
