//! Non-parametric bid landscape: eCPM intervals from auction logs, binned
//! into win-rate and cost curves over eCPM bid.
//!
//! All eCPM quantities are per impression (`cost * pctr`), without the x1000
//! of a per-mille price.

mod binned;
mod ranges;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction_log::{group_snapshots, AuctionSnapshot, GroupingKey};

pub use binned::{bin_index, BinRow, BinnedDistribution, DEFAULT_BIN_SIZE};
pub use ranges::{
    derive_ecpm_ranges, derive_into, derive_participant, derive_participant_upto, RangeObservation,
    DEFAULT_MAX_ECPM,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LandscapeError {
    #[error("no observations in range")]
    NoObservationsInRange,
    #[error("bin size must be positive, got {0}")]
    InvalidBinSize(f64),
    #[error("win-rate divisor must be positive, got {0}")]
    InvalidDivisor(f64),
    #[error("decay must be in (0, 1], got {0}")]
    InvalidDecay(f64),
    #[error("bin size mismatch: {0} vs {1}")]
    BinSizeMismatch(f64, f64),
    #[error("group mismatch: '{0}' vs '{1}'")]
    GroupMismatch(String, String),
    #[error("cost undefined below bid {0}")]
    CostUndefined(f64),
    #[error("corrupt landscape: {0}")]
    Corrupt(String),
}

/// A learned landscape for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LandscapeFile", try_from = "LandscapeFile")]
pub struct BidLandscape {
    group: String,
    dist: BinnedDistribution,
    built_at: i64,
}

impl BidLandscape {
    pub fn new(group: impl Into<String>, dist: BinnedDistribution, built_at: i64) -> Self {
        Self {
            group: group.into(),
            dist,
            built_at,
        }
    }

    /// Builds from range observations; the win-rate divisor is the number of
    /// observations passed in.
    pub fn build(
        group: impl Into<String>,
        observations: &[RangeObservation],
        bin_size: f64,
    ) -> Result<Self, LandscapeError> {
        Ok(Self::new(
            group,
            BinnedDistribution::build(observations, bin_size)?,
            0,
        ))
    }

    pub fn empty(group: impl Into<String>, bin_size: f64) -> Result<Self, LandscapeError> {
        Ok(Self::new(group, BinnedDistribution::empty(bin_size)?, 0))
    }

    pub fn with_built_at(mut self, built_at: i64) -> Self {
        self.built_at = built_at;
        self
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn dist(&self) -> &BinnedDistribution {
        &self.dist
    }

    pub fn built_at(&self) -> i64 {
        self.built_at
    }

    pub fn bin_size(&self) -> f64 {
        self.dist.bin_size()
    }

    pub fn max_index(&self) -> i64 {
        self.dist.max_index()
    }

    /// Bid at the lower edge of bin `index`.
    pub fn bid_of(&self, index: i64) -> f64 {
        index as f64 * self.dist.bin_size()
    }

    pub fn index_of(&self, bid: f64) -> i64 {
        bin_index(bid, self.dist.bin_size())
    }

    /// `(cdf_dn - cdf_up) / n` at the bid's bin. Zero at or below bin 0;
    /// bins past `max_index` read the last bin.
    pub fn query_winrate(&self, bid: f64) -> f64 {
        self.dist.winrate_at(self.index_of(bid))
    }

    /// Win rate clamped to be non-decreasing in bid. Not used by the
    /// optimizer; offered for presentation.
    pub fn query_winrate_monotone(&self, bid: f64) -> f64 {
        self.dist.monotone_winrate_at(self.index_of(bid))
    }

    /// Expected per-impression cost when winning at `bid`.
    pub fn query_cost(&self, bid: f64) -> Result<f64, LandscapeError> {
        self.dist
            .cost_at(self.index_of(bid))
            .ok_or(LandscapeError::CostUndefined(bid))
    }

    /// Roll-up update: `decay * self + newer`.
    pub fn merge(&self, newer: &BidLandscape, decay: f64) -> Result<BidLandscape, LandscapeError> {
        if self.group != newer.group {
            return Err(LandscapeError::GroupMismatch(
                self.group.clone(),
                newer.group.clone(),
            ));
        }
        Ok(BidLandscape {
            group: self.group.clone(),
            dist: self.dist.merge(&newer.dist, decay)?,
            built_at: self.built_at.max(newer.built_at),
        })
    }
}

pub fn merge_landscapes(
    a: &BidLandscape,
    b: &BidLandscape,
    decay: f64,
) -> Result<BidLandscape, LandscapeError> {
    a.merge(b, decay)
}

/// On-disk layout. c.d.fs are recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LandscapeFile {
    group: String,
    bin_size: f64,
    n: f64,
    max_index: i64,
    pdf_dn: BTreeMap<i64, f64>,
    pdf_up: BTreeMap<i64, f64>,
    pdf_cost_dn: BTreeMap<i64, f64>,
    pdf_cost_up: BTreeMap<i64, f64>,
    built_at: i64,
}

impl From<BidLandscape> for LandscapeFile {
    fn from(l: BidLandscape) -> Self {
        let d = &l.dist;
        LandscapeFile {
            bin_size: d.bin_size(),
            n: d.n_observations(),
            max_index: d.max_index(),
            pdf_dn: d.pdf_dn().clone(),
            pdf_up: d.pdf_up().clone(),
            pdf_cost_dn: d.pdf_cost_dn().clone(),
            pdf_cost_up: d.pdf_cost_up().clone(),
            built_at: l.built_at,
            group: l.group,
        }
    }
}

impl TryFrom<LandscapeFile> for BidLandscape {
    type Error = LandscapeError;

    fn try_from(f: LandscapeFile) -> Result<Self, Self::Error> {
        let dist = BinnedDistribution::from_tables(
            f.bin_size,
            f.n,
            f.max_index,
            binned::PdfTables {
                dn: f.pdf_dn,
                up: f.pdf_up,
                cost_dn: f.pdf_cost_dn,
                cost_up: f.pdf_cost_up,
            },
        )?;
        Ok(BidLandscape {
            group: f.group,
            dist,
            built_at: f.built_at,
        })
    }
}

/// What the win-rate ratio is divided by when building from logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Every emitted interval counts once (the plain histogram count).
    #[default]
    Observations,
    /// Every (auction, participant) pair in the group counts once, so the
    /// ratio reads as "share of auctions won".
    Participations,
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "observations" => Ok(Normalization::Observations),
            "participations" => Ok(Normalization::Participations),
            other => Err(format!(
                "unknown normalization '{other}' (expected observations or participations)"
            )),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Observations => "observations",
            Normalization::Participations => "participations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub bin_size: f64,
    pub max_ecpm: f64,
    pub group_by: GroupingKey,
    /// Only keep intervals for positions up to this one (e.g. the number of
    /// ad slots, when losers are logged past the last slot).
    pub max_position: Option<u32>,
    pub normalization: Normalization,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            bin_size: DEFAULT_BIN_SIZE,
            max_ecpm: DEFAULT_MAX_ECPM,
            group_by: GroupingKey::default(),
            max_position: None,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Default)]
pub struct GroupedBuild {
    pub landscapes: BTreeMap<String, BidLandscape>,
    /// Groups whose observations all fell outside the binned range.
    pub skipped: BTreeMap<String, LandscapeError>,
}

/// Interval observations of every group, keyed by group label.
pub fn grouped_observations(
    snapshots: &[AuctionSnapshot],
    options: &BuildOptions,
) -> BTreeMap<String, (Vec<RangeObservation>, usize, i64)> {
    let mut out = BTreeMap::new();
    for (label, entries) in group_snapshots(snapshots, options.group_by) {
        let mut observations = Vec::new();
        let mut participations = 0usize;
        let mut latest = i64::MIN;
        for entry in &entries {
            participations += entry.members.len();
            latest = latest.max(entry.snapshot.timestamp());
            for &idx in &entry.members {
                let limit = options.max_position.unwrap_or(u32::MAX);
                derive_participant_upto(entry.snapshot, idx, options.max_ecpm, limit, |obs| {
                    observations.push(obs)
                });
            }
        }
        out.insert(label, (observations, participations, latest));
    }
    out
}

/// Derives intervals for every snapshot and builds one landscape per group.
pub fn build_grouped(
    snapshots: &[AuctionSnapshot],
    options: &BuildOptions,
) -> Result<GroupedBuild, LandscapeError> {
    if !(options.bin_size.is_finite() && options.bin_size > 0.0) {
        return Err(LandscapeError::InvalidBinSize(options.bin_size));
    }
    let mut result = GroupedBuild::default();
    for (label, (observations, participations, latest)) in grouped_observations(snapshots, options)
    {
        let divisor = match options.normalization {
            Normalization::Observations => observations.len() as f64,
            Normalization::Participations => participations as f64,
        };
        let built = if observations.is_empty() {
            Err(LandscapeError::NoObservationsInRange)
        } else {
            BinnedDistribution::build_with_divisor(&observations, options.bin_size, divisor)
        };
        match built {
            Ok(dist) => {
                result
                    .landscapes
                    .insert(label.clone(), BidLandscape::new(label, dist, latest));
            }
            Err(e) => {
                result.skipped.insert(label, e);
            }
        }
    }
    Ok(result)
}
