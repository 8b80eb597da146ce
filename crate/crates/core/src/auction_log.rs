//! Auction observations and validated ingestion from JSONL / CSV logs.
//!
//! Money crosses every I/O boundary as integer micro-currency (1e-6 of the
//! currency unit). Arithmetic on rates and densities happens in `f64` after
//! conversion with [`micros_to_currency`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MICROS_PER_UNIT: f64 = 1_000_000.0;

pub fn micros_to_currency(micros: i64) -> f64 {
    micros as f64 / MICROS_PER_UNIT
}

pub fn currency_to_micros(amount: f64) -> i64 {
    (amount * MICROS_PER_UNIT).round() as i64
}

/// Reasons a snapshot is rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SnapshotError {
    #[error("auction has no participants")]
    NoParticipants,
    #[error("positions not contiguous")]
    PositionsNotContiguous,
    #[error("advertiser {advertiser}: ranking score must be positive, got {score}")]
    NonPositiveScore { advertiser: String, score: f64 },
    #[error("advertiser {advertiser}: pctr {pctr} outside [0, 1]")]
    PctrOutOfRange { advertiser: String, pctr: f64 },
    #[error("advertiser {advertiser}: cpc bid must be positive")]
    NonPositiveBid { advertiser: String },
    #[error("advertiser {advertiser}: cpc cost {cost} outside [0, bid {bid}]")]
    CostOutOfRange {
        advertiser: String,
        cost: i64,
        bid: i64,
    },
    #[error("ranking score increases from position {0} to position {1}")]
    ScoreNotMonotone(u32, u32),
}

/// One participant of a logged auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    #[serde(rename = "advertiser")]
    pub advertiser_id: String,
    pub context: String,
    pub position: u32,
    #[serde(rename = "score")]
    pub ranking_score: f64,
    /// CPC bid in micro-currency.
    #[serde(rename = "bid_micro")]
    pub cpc_bid: i64,
    /// CPC actually charged, micro-currency. Zero for participants that lost.
    #[serde(rename = "cost_micro")]
    pub cpc_cost: i64,
    pub pctr: f64,
}

impl ParticipantRecord {
    fn validate(&self) -> Result<(), SnapshotError> {
        let advertiser = || self.advertiser_id.clone();
        if !(self.ranking_score > 0.0 && self.ranking_score.is_finite()) {
            return Err(SnapshotError::NonPositiveScore {
                advertiser: advertiser(),
                score: self.ranking_score,
            });
        }
        if !(0.0..=1.0).contains(&self.pctr) {
            return Err(SnapshotError::PctrOutOfRange {
                advertiser: advertiser(),
                pctr: self.pctr,
            });
        }
        if self.cpc_bid <= 0 {
            return Err(SnapshotError::NonPositiveBid {
                advertiser: advertiser(),
            });
        }
        if self.cpc_cost < 0 || self.cpc_cost > self.cpc_bid {
            return Err(SnapshotError::CostOutOfRange {
                advertiser: advertiser(),
                cost: self.cpc_cost,
                bid: self.cpc_bid,
            });
        }
        Ok(())
    }

    pub fn bid(&self) -> f64 {
        micros_to_currency(self.cpc_bid)
    }

    pub fn cost(&self) -> f64 {
        micros_to_currency(self.cpc_cost)
    }
}

/// A validated auction: participants sorted by position, positions `1..=n`,
/// ranking scores non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSnapshot")]
pub struct AuctionSnapshot {
    auction_id: String,
    #[serde(rename = "ts")]
    timestamp: i64,
    participants: Vec<ParticipantRecord>,
}

#[derive(Deserialize)]
struct RawSnapshot {
    auction_id: String,
    ts: i64,
    participants: Vec<ParticipantRecord>,
}

impl TryFrom<RawSnapshot> for AuctionSnapshot {
    type Error = SnapshotError;

    fn try_from(raw: RawSnapshot) -> Result<Self, Self::Error> {
        AuctionSnapshot::new(raw.auction_id, raw.ts, raw.participants)
    }
}

impl AuctionSnapshot {
    pub fn new(
        auction_id: impl Into<String>,
        timestamp: i64,
        mut participants: Vec<ParticipantRecord>,
    ) -> Result<Self, SnapshotError> {
        if participants.is_empty() {
            return Err(SnapshotError::NoParticipants);
        }
        participants.sort_by_key(|p| p.position);
        for (expected, p) in (1u32..).zip(&participants) {
            if p.position != expected {
                return Err(SnapshotError::PositionsNotContiguous);
            }
            p.validate()?;
        }
        for pair in participants.windows(2) {
            if pair[1].ranking_score > pair[0].ranking_score {
                return Err(SnapshotError::ScoreNotMonotone(
                    pair[0].position,
                    pair[1].position,
                ));
            }
        }
        Ok(Self {
            auction_id: auction_id.into(),
            timestamp,
            participants,
        })
    }

    pub fn auction_id(&self) -> &str {
        &self.auction_id
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    /// Participants ordered by position (index `k` holds position `k + 1`).
    pub fn participants(&self) -> &[ParticipantRecord] {
        &self.participants
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn find(&self, advertiser_id: &str) -> Option<&ParticipantRecord> {
        self.participants
            .iter()
            .find(|p| p.advertiser_id == advertiser_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

impl FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(LogFormat::Jsonl),
            "csv" => Ok(LogFormat::Csv),
            other => Err(format!(
                "unknown log format '{other}' (expected jsonl or csv)"
            )),
        }
    }
}

/// A line that could not be turned into a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auction_id: Option<String>,
    pub reason: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.auction_id {
            Some(id) => write!(f, "line {} (auction {}): {}", self.line, id, self.reason),
            None => write!(f, "line {}: {}", self.line, self.reason),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub snapshots: Vec<AuctionSnapshot>,
    pub errors: Vec<LineError>,
}

/// Parses a whole log. Bad lines and invalid auctions are reported in
/// [`ParseReport::errors`]; parsing always continues.
pub fn parse_log<R: BufRead>(source: R, format: LogFormat) -> ParseReport {
    match format {
        LogFormat::Jsonl => parse_jsonl(source),
        LogFormat::Csv => parse_csv(source),
    }
}

fn parse_jsonl<R: BufRead>(source: R) -> ParseReport {
    let mut report = ParseReport::default();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    auction_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSnapshot = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    auction_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let id = raw.auction_id.clone();
        match AuctionSnapshot::try_from(raw) {
            Ok(s) => report.snapshots.push(s),
            Err(e) => report.errors.push(LineError {
                line: line_no,
                auction_id: Some(id),
                reason: e.to_string(),
            }),
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    auction_id: String,
    ts: i64,
    advertiser: String,
    context: String,
    position: u32,
    score: f64,
    bid_micro: i64,
    cost_micro: i64,
    pctr: f64,
}

fn parse_csv<R: BufRead>(source: R) -> ParseReport {
    let mut report = ParseReport::default();
    // auction_id -> (first line, ts, rows); keeps first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (usize, i64, Vec<ParticipantRecord>)> = HashMap::new();

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line_no = idx + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(line_no);
                report.errors.push(LineError {
                    line,
                    auction_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let entry = groups.entry(row.auction_id.clone()).or_insert_with(|| {
            order.push(row.auction_id.clone());
            (line_no, row.ts, Vec::new())
        });
        entry.2.push(ParticipantRecord {
            advertiser_id: row.advertiser,
            context: row.context,
            position: row.position,
            ranking_score: row.score,
            cpc_bid: row.bid_micro,
            cpc_cost: row.cost_micro,
            pctr: row.pctr,
        });
    }

    for id in order {
        let (line, ts, rows) = groups.remove(&id).expect("group recorded in order");
        match AuctionSnapshot::new(id.clone(), ts, rows) {
            Ok(s) => report.snapshots.push(s),
            Err(e) => report.errors.push(LineError {
                line,
                auction_id: Some(id),
                reason: e.to_string(),
            }),
        }
    }
    report
}

/// Writes snapshots as JSONL, one auction per line.
pub fn write_jsonl<W: Write>(snapshots: &[AuctionSnapshot], mut out: W) -> std::io::Result<()> {
    for s in snapshots {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes snapshots as CSV, one participant per row.
pub fn write_csv<W: Write>(snapshots: &[AuctionSnapshot], out: W) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    for s in snapshots {
        for p in &s.participants {
            writer.serialize(CsvRow {
                auction_id: s.auction_id.clone(),
                ts: s.timestamp,
                advertiser: p.advertiser_id.clone(),
                context: p.context.clone(),
                position: p.position,
                score: p.ranking_score,
                bid_micro: p.cpc_bid,
                cost_micro: p.cpc_cost,
                pctr: p.pctr,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Granularity at which one landscape is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingKey {
    Global,
    #[default]
    ByContext,
    ByAdvertiser,
    ByAdvertiserContext,
}

impl GroupingKey {
    pub const GLOBAL_LABEL: &'static str = "global";

    pub fn label(&self, advertiser_id: &str, context: &str) -> String {
        match self {
            GroupingKey::Global => Self::GLOBAL_LABEL.to_string(),
            GroupingKey::ByContext => context.to_string(),
            GroupingKey::ByAdvertiser => advertiser_id.to_string(),
            GroupingKey::ByAdvertiserContext => format!("{advertiser_id}:{context}"),
        }
    }

    pub fn label_of(&self, participant: &ParticipantRecord) -> String {
        self.label(&participant.advertiser_id, &participant.context)
    }
}

impl FromStr for GroupingKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(GroupingKey::Global),
            "by_context" | "context" => Ok(GroupingKey::ByContext),
            "by_advertiser" | "advertiser" => Ok(GroupingKey::ByAdvertiser),
            "by_advertiser_context" | "advertiser_context" => {
                Ok(GroupingKey::ByAdvertiserContext)
            }
            other => Err(format!(
                "unknown grouping '{other}' (expected global, by_context, by_advertiser, by_advertiser_context)"
            )),
        }
    }
}

impl fmt::Display for GroupingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupingKey::Global => "global",
            GroupingKey::ByContext => "by_context",
            GroupingKey::ByAdvertiser => "by_advertiser",
            GroupingKey::ByAdvertiserContext => "by_advertiser_context",
        })
    }
}

/// A snapshot as seen by one group. The full snapshot is kept so range
/// derivation still sees every neighbour; `members` lists the participant
/// indices whose observations belong to this group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSnapshot<'a> {
    pub snapshot: &'a AuctionSnapshot,
    pub members: Vec<usize>,
}

impl GroupedSnapshot<'_> {
    pub fn member_records(&self) -> impl Iterator<Item = &ParticipantRecord> {
        self.members
            .iter()
            .map(|&i| &self.snapshot.participants()[i])
    }
}

pub fn group_snapshots(
    snapshots: &[AuctionSnapshot],
    key: GroupingKey,
) -> BTreeMap<String, Vec<GroupedSnapshot<'_>>> {
    let mut groups: BTreeMap<String, Vec<GroupedSnapshot<'_>>> = BTreeMap::new();
    for snapshot in snapshots {
        let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, p) in snapshot.participants().iter().enumerate() {
            members.entry(key.label_of(p)).or_default().push(idx);
        }
        for (label, members) in members {
            groups
                .entry(label)
                .or_default()
                .push(GroupedSnapshot { snapshot, members });
        }
    }
    groups
}

/// Impression / click / conversion counts for one slice of history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RateEvent {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub pctr: f64,
    pub pcvr: f64,
}

/// Add-one smoothed click-through and conversion rates over pooled counts.
///
/// Expects `impressions >= clicks >= conversions` per event.
pub fn estimate_rates(events: &[RateEvent]) -> Rates {
    let (imps, clicks, convs) = events.iter().fold((0u64, 0u64, 0u64), |acc, e| {
        (
            acc.0 + e.impressions,
            acc.1 + e.clicks,
            acc.2 + e.conversions,
        )
    });
    Rates {
        pctr: (clicks as f64 + 1.0) / (imps as f64 + 2.0),
        pcvr: (convs as f64 + 1.0) / (clicks as f64 + 2.0),
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn snapshot_strategy() -> impl Strategy<Value = AuctionSnapshot> {
        prop::collection::vec(
            (1e-6f64..10.0, 1i64..10_000_000, 0.0f64..=1.0, 0.0f64..=1.0),
            1..8,
        )
        .prop_map(|mut rows| {
            rows.sort_by(|a, b| b.0.total_cmp(&a.0));
            let participants = rows
                .into_iter()
                .enumerate()
                .map(|(i, (score, bid, frac, pctr))| ParticipantRecord {
                    advertiser_id: format!("adv{i}"),
                    context: if i % 2 == 0 { "m".into() } else { "d".into() },
                    position: i as u32 + 1,
                    ranking_score: score,
                    cpc_bid: bid,
                    cpc_cost: (bid as f64 * frac).floor() as i64,
                    pctr,
                })
                .collect();
            AuctionSnapshot::new("p", 7, participants).unwrap()
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_identity(snaps in prop::collection::vec(snapshot_strategy(), 0..5)) {
            let mut buf = Vec::new();
            write_jsonl(&snaps, &mut buf).unwrap();
            let back = parse_log(buf.as_slice(), LogFormat::Jsonl);
            prop_assert!(back.errors.is_empty());
            prop_assert_eq!(back.snapshots, snaps);
        }

        #[test]
        fn grouping_covers_every_snapshot(snaps in prop::collection::vec(snapshot_strategy(), 0..6)) {
            let global = group_snapshots(&snaps, GroupingKey::Global);
            let total: usize = global.values().map(Vec::len).sum();
            prop_assert_eq!(total, snaps.len());
            for key in [GroupingKey::ByContext, GroupingKey::ByAdvertiser, GroupingKey::ByAdvertiserContext] {
                let groups = group_snapshots(&snaps, key);
                let total: usize = groups.values().map(Vec::len).sum();
                prop_assert!(total >= snaps.len());
                let members: usize = groups.values().flatten().map(|g| g.members.len()).sum();
                let participants: usize = snaps.iter().map(AuctionSnapshot::len).sum();
                prop_assert_eq!(members, participants);
            }
        }
    }
}
