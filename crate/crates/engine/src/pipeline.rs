//! Operations shared by the CLI and the HTTP service.

use std::collections::BTreeMap;
use std::io::BufRead;

use bidscape_core::auction_log::{parse_log, AuctionSnapshot, GroupingKey, LineError, LogFormat};
use bidscape_core::landscape::{
    build_grouped, BidLandscape, BuildOptions, LandscapeError, Normalization, DEFAULT_BIN_SIZE,
    DEFAULT_MAX_ECPM,
};
use bidscape_core::optimizer::{
    bid_curve, recommend_bid, CampaignInputs, CpaGoal, CurvePoint, OptimizerError, Recommendation,
    DEFAULT_TOLERANCE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ModelStore, StoreError};

/// Line errors echoed back from an ingest.
const MAX_REPORTED_ERRORS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: &str) -> Self {
        Self {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}", join_fields(.0))]
    Invalid(Vec<FieldError>),
    #[error("no auction logs in the store")]
    NoLogs,
    #[error("no valid auctions in input")]
    NothingIngested(Vec<LineError>),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{} {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl PipelineError {
    pub fn field_errors(&self) -> Vec<FieldError> {
        match self {
            PipelineError::Invalid(v) => v.clone(),
            PipelineError::Optimizer(OptimizerError::InvalidInput { field, message }) => {
                vec![FieldError::new(field, message)]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub errors: Vec<LineError>,
}

/// Parses a log and appends its valid auctions to the store.
pub fn ingest<R: BufRead>(
    store: &ModelStore,
    source: R,
    format: LogFormat,
) -> Result<IngestSummary, PipelineError> {
    let report = parse_log(source, format);
    if report.snapshots.is_empty() && !report.errors.is_empty() {
        return Err(PipelineError::NothingIngested(report.errors));
    }
    store.append_logs(&report.snapshots)?;
    let rejected = report.errors.len();
    Ok(IngestSummary {
        accepted: report.snapshots.len(),
        rejected,
        errors: report
            .errors
            .into_iter()
            .take(MAX_REPORTED_ERRORS)
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildRequest {
    pub group_by: GroupingKey,
    pub bin_size: f64,
    pub max_ecpm: f64,
    pub max_position: Option<u32>,
    pub normalization: Normalization,
}

impl Default for BuildRequest {
    fn default() -> Self {
        Self {
            group_by: GroupingKey::default(),
            bin_size: DEFAULT_BIN_SIZE,
            max_ecpm: DEFAULT_MAX_ECPM,
            max_position: None,
            normalization: Normalization::default(),
        }
    }
}

impl BuildRequest {
    pub fn validate(&self) -> Result<BuildOptions, PipelineError> {
        let mut errors = Vec::new();
        if !(self.bin_size > 0.0 && self.bin_size.is_finite()) {
            errors.push(FieldError::new("bin_size", "must be positive"));
        }
        if !(self.max_ecpm > 0.0 && self.max_ecpm.is_finite()) {
            errors.push(FieldError::new("max_ecpm", "must be positive"));
        }
        if self.max_position == Some(0) {
            errors.push(FieldError::new("max_position", "must be at least 1"));
        }
        if !errors.is_empty() {
            return Err(PipelineError::Invalid(errors));
        }
        Ok(BuildOptions {
            bin_size: self.bin_size,
            max_ecpm: self.max_ecpm,
            group_by: self.group_by,
            max_position: self.max_position,
            normalization: self.normalization,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupInfo {
    pub group: String,
    pub n: f64,
    pub max_index: i64,
    pub built_at: i64,
}

impl From<&BidLandscape> for GroupInfo {
    fn from(l: &BidLandscape) -> Self {
        Self {
            group: l.group().to_string(),
            n: l.dist().n_observations(),
            max_index: l.max_index(),
            built_at: l.built_at(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSummary {
    pub groups: Vec<GroupInfo>,
    pub skipped: BTreeMap<String, String>,
}

fn build_from(
    snapshots: &[AuctionSnapshot],
    request: &BuildRequest,
) -> Result<(Vec<BidLandscape>, BTreeMap<String, String>), PipelineError> {
    let options = request.validate()?;
    let built = build_grouped(snapshots, &options)?;
    let skipped = built
        .skipped
        .into_iter()
        .map(|(g, e)| (g, e.to_string()))
        .collect();
    Ok((built.landscapes.into_values().collect(), skipped))
}

/// Rebuilds every group from the stored log and replaces the saved models.
pub fn build(store: &ModelStore, request: &BuildRequest) -> Result<BuildSummary, PipelineError> {
    request.validate()?;
    let logs = store.load_logs()?;
    if logs.snapshots.is_empty() {
        return Err(PipelineError::NoLogs);
    }
    let (landscapes, skipped) = build_from(&logs.snapshots, request)?;
    store.save_models(&landscapes)?;
    Ok(BuildSummary {
        groups: landscapes.iter().map(GroupInfo::from).collect(),
        skipped,
    })
}

/// Daily roll-up: builds from new snapshots only, merges each group into
/// the saved model as `decay * old + new`, and appends the snapshots to the
/// stored log. Groups without a saved model are stored as built.
pub fn rollup(
    store: &ModelStore,
    snapshots: &[AuctionSnapshot],
    request: &BuildRequest,
    decay: f64,
) -> Result<BuildSummary, PipelineError> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(PipelineError::Invalid(vec![FieldError::new(
            "decay",
            "must be in (0, 1]",
        )]));
    }
    let (fresh, skipped) = build_from(snapshots, request)?;
    let mut merged = Vec::with_capacity(fresh.len());
    for l in fresh {
        match store.load_model(l.group()) {
            Ok(old) => merged.push(old.merge(&l, decay)?),
            Err(StoreError::NotFound(_)) => merged.push(l),
            Err(e) => return Err(e.into()),
        }
    }
    store.append_logs(snapshots)?;
    store.save_models(&merged)?;
    Ok(BuildSummary {
        groups: merged.iter().map(GroupInfo::from).collect(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub group: String,
    pub impressions: u64,
    pub pctr: f64,
    pub pcvr: f64,
    pub cpa_goal: f64,
    pub budget: f64,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

fn check_rate(errors: &mut Vec<FieldError>, field: &str, v: f64) {
    if v.is_nan() || v <= 0.0 {
        errors.push(FieldError::new(field, "must be positive"));
    } else if v > 1.0 {
        errors.push(FieldError::new(field, "must be at most 1"));
    }
}

fn check_money(errors: &mut Vec<FieldError>, field: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(FieldError::new(field, "must be positive"));
    }
}

impl RecommendRequest {
    pub fn validate(&self) -> Result<(CampaignInputs, CpaGoal), PipelineError> {
        let mut errors = Vec::new();
        if self.group.is_empty() {
            errors.push(FieldError::new("group", "must not be empty"));
        }
        check_rate(&mut errors, "pctr", self.pctr);
        check_rate(&mut errors, "pcvr", self.pcvr);
        check_money(&mut errors, "cpa_goal", self.cpa_goal);
        check_money(&mut errors, "budget", self.budget);
        let tolerance = self.tolerance.unwrap_or(DEFAULT_TOLERANCE);
        if !(tolerance >= 0.0 && tolerance.is_finite()) {
            errors.push(FieldError::new("tolerance", "must be non-negative"));
        }
        if !errors.is_empty() {
            return Err(PipelineError::Invalid(errors));
        }
        let inputs = CampaignInputs {
            impressions: self.impressions,
            pctr: self.pctr,
            pcvr: self.pcvr,
            group: self.group.clone(),
        };
        Ok((
            inputs,
            CpaGoal::new(self.cpa_goal, self.budget).with_tolerance(tolerance),
        ))
    }
}

pub fn recommend(
    store: &ModelStore,
    request: &RecommendRequest,
) -> Result<Recommendation, PipelineError> {
    let (inputs, goal) = request.validate()?;
    let landscape = store.load_model(&request.group)?;
    Ok(recommend_bid(&landscape, &inputs, &goal)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesRequest {
    pub from: f64,
    pub to: f64,
    pub step: f64,
    pub impressions: u64,
    pub pctr: f64,
    pub pcvr: f64,
}

impl CurvesRequest {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errors = Vec::new();
        if !(self.from >= 0.0 && self.from.is_finite()) {
            errors.push(FieldError::new("from", "must be non-negative"));
        }
        if !(self.to >= self.from && self.to.is_finite()) {
            errors.push(FieldError::new("to", "must not be below from"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            errors.push(FieldError::new("step", "must be positive"));
        } else if (self.to - self.from) / self.step > 1e6 {
            errors.push(FieldError::new(
                "step",
                "gives more than a million grid points",
            ));
        }
        check_rate(&mut errors, "pctr", self.pctr);
        check_rate(&mut errors, "pcvr", self.pcvr);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Invalid(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvesResponse {
    pub group: String,
    pub points: Vec<CurvePoint>,
}

pub fn curves(
    store: &ModelStore,
    group: &str,
    request: &CurvesRequest,
) -> Result<CurvesResponse, PipelineError> {
    request.validate()?;
    let landscape = store.load_model(group)?;
    let inputs = CampaignInputs::new(request.impressions, request.pctr, request.pcvr);
    let points = bid_curve(&landscape, &inputs, request.from, request.to, request.step)?;
    Ok(CurvesResponse {
        group: group.to_string(),
        points,
    })
}

/// Writes curve points as CSV with a header row; undefined values are empty.
pub fn write_curves_csv<W: std::io::Write>(
    points: &[CurvePoint],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
