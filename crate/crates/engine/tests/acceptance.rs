//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Tolerances are pinned below.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use bidscape_core::auction_log::{parse_log, LogFormat};
use bidscape_core::baselines::{survival_winrate, PricedOutcome, SurvivalCurve};
use bidscape_core::evalkit::{
    ab_lift, eval_winrate_forecast, flat_method_name, mape, rmspe, AbRecord, ForecastPair,
    WinrateEvalConfig, METHOD_LANDSCAPE, METHOD_LANDSCAPE_PER_OBSERVATION, METHOD_NNS,
};
use bidscape_core::gsp_sim::{generate_log, replay, MarketConfig};
use bidscape_core::landscape::{
    derive_ecpm_ranges, BidLandscape, RangeObservation, DEFAULT_MAX_ECPM,
};
use bidscape_core::optimizer::{
    cpa_from_cost, predict_clicks, predict_conversions, predict_cpa, predict_spend, recommend_bid,
    CampaignInputs, CpaGoal, Status,
};
use bidscape_engine::service::router;
use bidscape_engine::store::ModelStore;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Criterion 1: relative slack for reference values printed with rounding slips.
const C1_REL_TOL: f64 = 0.01;
const C1_MAX_RUNTIME: Duration = Duration::from_millis(1);
const C3_ABS_TOL: f64 = 1e-9;
const C4_REL_TOL: f64 = 1e-9;
const C5_INSTANCES: usize = 500;
const C5_MAX_RUNTIME: Duration = Duration::from_secs(10);
const C6_SEEDS: [u64; 3] = [1, 2, 3];
const C6_ADVERTISERS: usize = 20;
const C6_SLOTS: u32 = 5;
const C6_AUCTIONS: usize = 10_000;
const C6_MAX_RUNTIME: Duration = Duration::from_secs(60);
const C7_CASES: usize = 1_000;
const C7_ROUND_TRIP_REL_TOL: f64 = 1e-12;
const C7_SPEND_REL_TOL: f64 = 1e-9;
const C7_MERGE_ABS_TOL: f64 = 1e-12;
const C8_TOL: f64 = 1e-12;
const C8_SETS: usize = 1_000;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

const THREE_SLOT_AUCTION: &str = r#"{"auction_id":"ex1","ts":1520000000,"participants":[{"advertiser":"9192982670","context":"1_mobile","position":1,"score":3.117e-4,"bid_micro":5000000,"cost_micro":310000,"pctr":0.002588},{"advertiser":"9620472854","context":"1_desktop","position":2,"score":2.387e-4,"bid_micro":1581000,"cost_micro":500000,"pctr":8.0119e-4},{"advertiser":"9575604786","context":"1_mobile","position":3,"score":2.312e-4,"bid_micro":500000,"cost_micro":450000,"pctr":5.7167e-4}]}"#;

/// Reference value with the number of decimal places it is printed with.
struct Printed(f64, i32);

impl Printed {
    /// Matches within half a unit of the last printed place or within the
    /// relative slack, whichever is wider.
    fn matches(&self, computed: f64) -> bool {
        let half_unit = 0.5 * 10f64.powi(-self.1);
        (computed - self.0).abs() <= half_unit.max(C1_REL_TOL * self.0.abs())
    }
}

fn c1_range_derivation() -> Check {
    let report = parse_log(THREE_SLOT_AUCTION.as_bytes(), LogFormat::Jsonl);
    ensure!(
        report.errors.is_empty(),
        "fixture rejected: {:?}",
        report.errors
    );
    let snapshot = &report.snapshots[0];
    let obs = derive_ecpm_ranges(snapshot, DEFAULT_MAX_ECPM);

    let reference: [(&str, u32, Printed, Printed, Printed); 7] = [
        (
            "9192982670",
            1,
            Printed(9.99, 2),
            Printed(0.0099, 4),
            Printed(0.00080, 5),
        ),
        (
            "9620472854",
            1,
            Printed(9.99, 2),
            Printed(0.001654, 6),
            Printed(0.0004, 4),
        ),
        (
            "9575604786",
            1,
            Printed(9.99, 2),
            Printed(0.0003852, 7),
            Printed(0.00026, 5),
        ),
        (
            "9192982670",
            2,
            Printed(0.0099, 4),
            Printed(0.00960, 5),
            Printed(0.000802, 6),
        ),
        (
            "9620472854",
            2,
            Printed(0.00165, 5),
            Printed(0.00122, 5),
            Printed(0.000400, 6),
        ),
        (
            "9575604786",
            2,
            Printed(0.000385, 6),
            Printed(0.000294, 6),
            Printed(0.000257, 6),
        ),
        (
            "9575604786",
            3,
            Printed(0.000294, 6),
            Printed(0.000285, 6),
            Printed(0.000257, 6),
        ),
    ];
    for (adv, pos, up, dn, cost) in &reference {
        let found: Vec<_> = obs
            .iter()
            .filter(|o| o.advertiser_id == *adv && o.position == *pos)
            .collect();
        ensure!(
            found.len() == 1,
            "{adv} position {pos}: {} tuples",
            found.len()
        );
        let o = found[0];
        ensure!(
            up.matches(o.ecpm_up) && dn.matches(o.ecpm_dn) && cost.matches(o.ecpm_cost),
            "{adv} position {pos}: got ({}, {}, {})",
            o.ecpm_up,
            o.ecpm_dn,
            o.ecpm_cost
        );
    }
    for adv in ["9192982670", "9620472854"] {
        ensure!(
            !obs.iter()
                .any(|o| o.advertiser_id == adv && o.position == 3),
            "{adv} position 3 should be filtered"
        );
    }
    ensure!(
        obs.len() == 7,
        "expected 7 emitted tuples, got {}",
        obs.len()
    );

    let runs = 1_000u32;
    let start = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(derive_ecpm_ranges(
            std::hint::black_box(snapshot),
            DEFAULT_MAX_ECPM,
        ));
    }
    let per_call = start.elapsed() / runs;
    ensure!(per_call < C1_MAX_RUNTIME, "runtime {per_call:?} per call");
    Ok(format!(
        "7 tuples matched, 2 absences at position 3, {per_call:?} per call"
    ))
}

fn three_interval_landscape() -> BidLandscape {
    let obs = [
        RangeObservation::bare(0.04, 0.01, 0.008),
        RangeObservation::bare(0.05, 0.02, 0.015),
        RangeObservation::bare(0.05, 0.03, 0.02),
    ];
    BidLandscape::build("table", &obs, 0.01).expect("table observations build")
}

fn c2_winrate_rows() -> Check {
    let l = three_interval_landscape();
    let rows: Vec<_> = l.dist().rows().collect();
    ensure!(rows.len() == 5, "expected 5 rows, got {}", rows.len());
    let expected: [[f64; 4]; 5] = [
        // pdf_dn, pdf_up, cdf_dn, cdf_up
        [1.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, 2.0, 0.0],
        [1.0, 0.0, 3.0, 0.0],
        [0.0, 1.0, 3.0, 1.0],
        [0.0, 2.0, 3.0, 3.0],
    ];
    for (r, e) in rows.iter().zip(expected) {
        let got = [r.pdf_dn, r.pdf_up, r.cdf_dn, r.cdf_up];
        ensure!(got == e, "index {}: got {got:?}, expected {e:?}", r.index);
    }
    Ok("pdf/cdf rows for indices 1-5 match exactly".into())
}

fn c3_cost_rows() -> Check {
    let l = three_interval_landscape();
    let expected: [[f64; 4]; 5] = [
        // pdf_cost_dn, pdf_cost_up, cdf_cost_dn, cdf_cost_up
        [0.008, 0.0, 0.008, 0.0],
        [0.015, 0.0, 0.023, 0.0],
        [0.02, 0.0, 0.043, 0.0],
        [0.0, 0.008, 0.043, 0.008],
        [0.0, 0.035, 0.043, 0.043],
    ];
    for (r, e) in l.dist().rows().zip(expected) {
        let got = [r.pdf_cost_dn, r.pdf_cost_up, r.cdf_cost_dn, r.cdf_cost_up];
        let worst = got
            .iter()
            .zip(e)
            .map(|(g, e)| (g - e).abs())
            .fold(0.0, f64::max);
        ensure!(
            worst <= C3_ABS_TOL,
            "index {}: got {got:?}, expected {e:?}",
            r.index
        );
    }
    let costs: [(f64, f64, f64); 4] = [
        (0.01, 0.008, 0.008),
        (0.02, 0.023 / 2.0, 0.0115),
        (0.03, 0.043 / 3.0, 0.01433),
        (0.04, 0.035 / 2.0, 0.0175),
    ];
    for (bid, exact, printed) in costs {
        let cost = l.query_cost(bid).map_err(|e| e.to_string())?;
        ensure!(
            (cost - exact).abs() <= C3_ABS_TOL,
            "cost at {bid}: {cost}, expected {exact}"
        );
        ensure!(
            (cost - printed).abs() <= 5e-6,
            "cost at {bid}: {cost} does not print as {printed}"
        );
    }
    Ok("cost rows match to 1e-9; costs 0.008, 0.0115, 0.01433, 0.0175".into())
}

fn c4_cpa_spot_check() -> Check {
    let cpa = cpa_from_cost(0.0003, 0.01, 0.01);
    ensure!(rel_err(cpa, 3.0) <= C4_REL_TOL, "CPA {cpa}");
    Ok(format!("CPA {cpa:.2}"))
}

/// Raw observation in bin units for the brute-force oracle.
struct RawObs {
    dn: f64,
    up: f64,
    cost: f64,
}

struct Instance {
    bin: f64,
    obs: Vec<RawObs>,
    inputs: CampaignInputs,
    goal: CpaGoal,
}

#[derive(Debug, PartialEq)]
struct Expected {
    status: Status,
    bid: f64,
    adjusted_budget: Option<f64>,
    adjusted_cpa: Option<f64>,
}

struct OracleBid {
    bid: f64,
    conversions: f64,
    spend: f64,
    cpa: f64,
}

/// Counts covering intervals directly from the raw observations at every
/// bin and applies the constrained rule.
fn brute_force(inst: &Instance) -> Option<Expected> {
    let n = inst.obs.len() as f64;
    let idx = |v: f64| (v / inst.bin).floor() as i64;
    let top = inst.obs.iter().map(|o| idx(o.up)).max()?;
    let CampaignInputs {
        impressions,
        pctr,
        pcvr,
        ..
    } = inst.inputs;
    let mut bids = Vec::new();
    for k in 1..=top {
        let covering: Vec<&RawObs> = inst
            .obs
            .iter()
            .filter(|o| idx(o.dn) >= 1 && idx(o.dn) <= k && k < idx(o.up))
            .collect();
        if covering.is_empty() {
            continue;
        }
        let count = covering.len() as f64;
        let winrate = count / n;
        let cost = covering.iter().map(|o| o.cost).sum::<f64>() / count;
        let clicks = impressions as f64 * winrate * pctr;
        bids.push(OracleBid {
            bid: k as f64 * inst.bin,
            conversions: clicks * pcvr,
            spend: clicks * cost / pctr,
            cpa: cost / (pctr * pcvr),
        });
    }
    if bids.is_empty() {
        return None;
    }
    let cap = inst.goal.target_cpa * (1.0 + inst.goal.tolerance);
    let budget = inst.goal.budget;
    let argmax = |pred: &dyn Fn(&OracleBid) -> bool| {
        let mut best: Option<&OracleBid> = None;
        for b in bids.iter().filter(|b| pred(b)) {
            if best.is_none_or(|x| b.conversions > x.conversions) {
                best = Some(b);
            }
        }
        best
    };
    let star = argmax(&|b| b.cpa <= cap);
    let affordable = argmax(&|b| b.spend <= budget);
    let expected = match (star, affordable) {
        (Some(s), _) if s.spend <= budget => Expected {
            status: Status::Feasible,
            bid: s.bid,
            adjusted_budget: None,
            adjusted_cpa: None,
        },
        (Some(s), Some(a)) => {
            let largest = bids.iter().rev().find(|b| b.spend <= budget).unwrap();
            Expected {
                status: Status::BudgetLimited,
                bid: a.bid,
                adjusted_budget: Some(s.spend),
                adjusted_cpa: Some(largest.cpa),
            }
        }
        (Some(s), None) => Expected {
            status: Status::Infeasible,
            bid: s.bid,
            adjusted_budget: Some(s.spend),
            adjusted_cpa: None,
        },
        (None, _) => {
            let mut cheapest = &bids[0];
            for b in &bids {
                if b.cpa < cheapest.cpa {
                    cheapest = b;
                }
            }
            Expected {
                status: Status::Infeasible,
                bid: cheapest.bid,
                adjusted_budget: (cheapest.spend > budget).then_some(cheapest.spend),
                adjusted_cpa: Some(cheapest.cpa),
            }
        }
    };
    Some(expected)
}

/// Dyadic values throughout, so every product and comparison is exact and
/// the oracle can be compared with `==`.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let bin = 0.25;
    let n = 1usize << rng.random_range(1..=6);
    let obs = (0..n)
        .map(|_| {
            let dn_k = rng.random_range(0..=12);
            let up_k = rng.random_range(dn_k..=16);
            let dn_frac = rng.random_range(0..4) as f64 / 16.0;
            let up_frac = if up_k == dn_k {
                dn_frac
            } else {
                rng.random_range(0..4) as f64 / 16.0
            };
            let up = (up_k as f64 + up_frac) * bin;
            RawObs {
                dn: (dn_k as f64 + dn_frac) * bin,
                up,
                cost: rng.random_range(0..=(up * 256.0) as u32) as f64 / 256.0,
            }
        })
        .collect();
    let inputs = CampaignInputs::new(
        rng.random_range(1..=1u64 << 20),
        1.0 / (1u64 << rng.random_range(1..=10)) as f64,
        1.0 / (1u64 << rng.random_range(1..=6)) as f64,
    );
    let scale = 1.0 / (inputs.pctr * inputs.pcvr);
    let goal = CpaGoal::new(
        rng.random_range(1..=64) as f64 / 16.0 * scale,
        rng.random_range(1..=4096) as f64 / 64.0 * inputs.impressions as f64 / 16.0,
    )
    .with_tolerance([0.0, 0.0625, 0.25][rng.random_range(0..3)]);
    Instance {
        bin,
        obs,
        inputs,
        goal,
    }
}

fn c5_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5_000);
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    let start = Instant::now();
    let mut done = 0;
    while done < C5_INSTANCES {
        let inst = random_instance(&mut rng);
        let ranges: Vec<_> = inst
            .obs
            .iter()
            .map(|o| RangeObservation::bare(o.up, o.dn, o.cost))
            .collect();
        let expected = brute_force(&inst);
        let got = BidLandscape::build("oracle", &ranges, inst.bin)
            .map_err(|e| e.to_string())
            .and_then(|l| recommend_bid(&l, &inst.inputs, &inst.goal).map_err(|e| e.to_string()));
        let got = got.ok();
        match (expected, got) {
            (None, None) => continue,
            (Some(e), Some(r)) => {
                let got = Expected {
                    status: r.status,
                    bid: r.bid,
                    adjusted_budget: r.adjusted_budget,
                    adjusted_cpa: r.adjusted_cpa,
                };
                ensure!(got == e, "instance {done}: expected {e:?}, got {got:?}");
                *statuses.entry(format!("{:?}", e.status)).or_default() += 1;
            }
            (e, g) => {
                return Err(format!(
                    "instance {done}: oracle {e:?} vs optimizer {:?}",
                    g.map(|r| r.status)
                ))
            }
        }
        done += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < C5_MAX_RUNTIME, "runtime {elapsed:?}");
    ensure!(
        statuses.len() == 3,
        "instances did not cover every status: {statuses:?}"
    );
    Ok(format!(
        "{C5_INSTANCES} instances exact, statuses {statuses:?}, {elapsed:?}"
    ))
}

fn c6_simulator_ordering() -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    for seed in C6_SEEDS {
        let market = MarketConfig::synthetic(C6_ADVERTISERS, C6_SLOTS, seed);
        let log = generate_log(&market, C6_AUCTIONS).map_err(|e| e.to_string())?;
        let config = WinrateEvalConfig::default();
        let report = eval_winrate_forecast(&market, &log, &config).map_err(|e| e.to_string())?;
        let score = |m: &str| {
            report
                .mape
                .get(m)
                .copied()
                .ok_or_else(|| format!("seed {seed}: no score for {m}"))
        };
        let ours = score(METHOD_LANDSCAPE)?;
        let per_obs = score(METHOD_LANDSCAPE_PER_OBSERVATION)?;
        let mut rivals = vec![(METHOD_NNS.to_string(), score(METHOD_NNS)?)];
        for &level in &config.flat_levels {
            let name = flat_method_name(level);
            rivals.push((name.clone(), score(&name)?));
        }
        for (name, v) in &rivals {
            ensure!(
                ours < *v,
                "seed {seed}: landscape {ours:.4} not below {name} {v:.4}"
            );
        }
        let rivals: Vec<String> = rivals.iter().map(|(n, v)| format!("{n} {v:.3}")).collect();
        lines.push(format!(
            "seed {seed}: landscape {ours:.3} (per-observation {per_obs:.3}) vs {}",
            rivals.join(", ")
        ));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < C6_MAX_RUNTIME, "runtime {elapsed:?}");
    Ok(format!("{}; {elapsed:?}", lines.join("; ")))
}

fn random_observations(rng: &mut ChaCha8Rng, max: usize) -> Vec<RangeObservation> {
    (0..rng.random_range(1..=max))
        .map(|_| {
            let dn: f64 = rng.random_range(0.0..0.5);
            let up = dn + rng.random_range(0.0..0.3);
            RangeObservation::bare(up, dn, rng.random_range(0.0..=up))
        })
        .collect()
}

fn random_bin(rng: &mut ChaCha8Rng) -> f64 {
    [0.005, 0.01, 0.02][rng.random_range(0..3)]
}

fn random_landscape(rng: &mut ChaCha8Rng) -> BidLandscape {
    loop {
        let bin = random_bin(rng);
        if let Ok(l) = BidLandscape::build("g", &random_observations(rng, 60), bin) {
            return l;
        }
    }
}

fn c7_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let mut passed = Vec::new();

    for case in 0..C7_CASES {
        let l = random_landscape(&mut rng);
        let mut prev = (0.0, 0.0);
        for r in l.dist().rows() {
            ensure!(
                r.cdf_dn >= prev.0 && r.cdf_up >= prev.1,
                "case {case}: cdf decreases at index {}",
                r.index
            );
            ensure!(
                r.cdf_dn >= r.cdf_up,
                "case {case}: cdf_dn < cdf_up at index {}",
                r.index
            );
            prev = (r.cdf_dn, r.cdf_up);
        }
        for k in 0..=l.max_index() + 2 {
            let w = l.query_winrate(l.bid_of(k));
            ensure!(
                (0.0..=1.0).contains(&w),
                "case {case}: winrate {w} at index {k}"
            );
        }
    }
    passed.push("cdf monotone, winrate in [0,1], cdf_dn >= cdf_up");

    let mut checked = 0;
    while checked < C7_CASES {
        let l = random_landscape(&mut rng);
        let inputs = CampaignInputs::new(
            rng.random_range(1..1_000_000),
            rng.random_range(1e-4..1.0),
            rng.random_range(1e-4..1.0),
        );
        let bid = rng.random_range(0.0..0.9);
        let Ok(cost) = l.query_cost(bid) else {
            continue;
        };
        if cost <= 0.0 {
            continue;
        }
        let cpa = predict_cpa(&l, &inputs, bid).map_err(|e| e.to_string())?;
        let back = cpa * inputs.pctr * inputs.pcvr;
        ensure!(
            rel_err(back, cost) <= C7_ROUND_TRIP_REL_TOL,
            "cpa round trip {back} vs {cost}"
        );
        let spend = predict_spend(&l, &inputs, bid).map_err(|e| e.to_string())?;
        let conversions = predict_conversions(predict_clicks(&l, &inputs, bid), inputs.pcvr);
        ensure!(
            spend == 0.0 && conversions == 0.0
                || rel_err(conversions * cpa, spend) <= C7_SPEND_REL_TOL,
            "spend {spend} vs conversions x cpa {}",
            conversions * cpa
        );
        checked += 1;
    }
    passed.push("cpa round trip, spend = conversions x cpa");

    for case in 0..C7_CASES {
        let outcomes: Vec<_> = (0..rng.random_range(1..80))
            .map(|_| {
                let price = rng.random_range(1..500) as f64 / 100.0;
                if rng.random_bool(0.6) {
                    PricedOutcome::win(price)
                } else {
                    PricedOutcome::loss(price)
                }
            })
            .collect();
        let curve = SurvivalCurve::fit(&outcomes).map_err(|e| e.to_string())?;
        let (a, b) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        ensure!(
            curve.winrate(lo) <= curve.winrate(hi),
            "case {case}: survival curve decreases"
        );
    }
    passed.push("survival monotone");

    for case in 0..C7_CASES {
        let cents: Vec<u32> = (0..rng.random_range(1..80))
            .map(|_| rng.random_range(1..2000))
            .collect();
        let outcomes: Vec<_> = cents
            .iter()
            .map(|&c| PricedOutcome::win(c as f64 / 100.0))
            .collect();
        let q = rng.random_range(0..2100u32);
        let empirical = cents.iter().filter(|&&c| c < q).count() as f64 / cents.len() as f64;
        let km = survival_winrate(&outcomes, q as f64 / 100.0).map_err(|e| e.to_string())?;
        ensure!(
            (km - empirical).abs() < 1e-12,
            "case {case}: KM {km} vs empirical {empirical}"
        );
    }
    passed.push("KM = empirical CDF without censoring");

    let mut auctions = 0;
    let mut seed = 0;
    while auctions < C7_CASES {
        seed += 1;
        let market = MarketConfig::synthetic(rng.random_range(2..15), rng.random_range(1..6), seed);
        for s in generate_log(&market, 25).map_err(|e| e.to_string())? {
            for p in s.participants() {
                let adv = market
                    .advertiser(&p.advertiser_id)
                    .ok_or("logged advertiser missing from market")?;
                let got = replay(&market, &s, adv, p.cpc_bid);
                ensure!(
                    got == Some((p.position, p.cpc_cost)),
                    "seed {seed} auction {}: replay {got:?} vs logged ({}, {})",
                    s.auction_id(),
                    p.position,
                    p.cpc_cost
                );
            }
            auctions += 1;
        }
    }
    passed.push("replay of own bid reproduces the log");

    let mut merged_cases = 0;
    while merged_cases < C7_CASES {
        let bin = random_bin(&mut rng);
        let (a, b) = (
            random_observations(&mut rng, 30),
            random_observations(&mut rng, 30),
        );
        let (Ok(la), Ok(lb)) = (
            BidLandscape::build("g", &a, bin),
            BidLandscape::build("g", &b, bin),
        ) else {
            continue;
        };
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let batch = BidLandscape::build("g", &all, bin).map_err(|e| e.to_string())?;
        let merged = la.merge(&lb, 1.0).map_err(|e| e.to_string())?;
        ensure!(
            merged.dist().n_observations() == batch.dist().n_observations()
                && merged.max_index() == batch.max_index(),
            "merge header differs from batch"
        );
        for (m, r) in merged.dist().rows().zip(batch.dist().rows()) {
            let diffs = [
                m.cdf_dn - r.cdf_dn,
                m.cdf_up - r.cdf_up,
                m.cdf_cost_dn - r.cdf_cost_dn,
                m.cdf_cost_up - r.cdf_cost_up,
            ];
            ensure!(
                diffs.iter().all(|d| d.abs() <= C7_MERGE_ABS_TOL),
                "merge differs from batch at index {}",
                m.index
            );
        }
        merged_cases += 1;
    }
    passed.push("merge(decay=1) = batch rebuild");

    Ok(format!("{} cases each: {}", C7_CASES, passed.join("; ")))
}

fn c8_metrics() -> Check {
    let pairs = [ForecastPair::new(10.0, 11.0), ForecastPair::new(20.0, 18.0)];
    let (m, r) = (
        mape(&pairs).map_err(|e| e.to_string())?,
        rmspe(&pairs).map_err(|e| e.to_string())?,
    );
    ensure!(
        (m - 0.10).abs() <= C8_TOL && (r - 0.10).abs() <= C8_TOL,
        "mape {m}, rmspe {r}"
    );

    let record = |id: &str, spend: f64, cur: f64, rec: f64| AbRecord {
        campaign_id: id.into(),
        bid_current: cur,
        bid_recommended: rec,
        spend,
        clicks_current: 1.0,
        clicks_recommended: 1.0,
        roi_current: 1.0,
        roi_recommended: 1.0,
    };
    let lift = ab_lift(&[record("a", 100.0, 1.0, 1.1), record("b", 300.0, 2.0, 2.4)])
        .map_err(|e| e.to_string())?;
    ensure!((lift.bir - 0.175).abs() <= C8_TOL, "BIR {}", lift.bir);

    let mut rng = ChaCha8Rng::seed_from_u64(8_000);
    for set in 0..C8_SETS {
        let pairs: Vec<_> = (0..rng.random_range(1..50))
            .map(|_| ForecastPair::new(rng.random_range(0.01..100.0), rng.random_range(0.0..200.0)))
            .collect();
        let (m, r) = (
            mape(&pairs).map_err(|e| e.to_string())?,
            rmspe(&pairs).map_err(|e| e.to_string())?,
        );
        ensure!(
            r >= m - 1e-15 * m.max(1.0),
            "set {set}: rmspe {r} < mape {m}"
        );
    }
    Ok(format!(
        "mape 0.10, rmspe 0.10, BIR 0.175, rmspe >= mape on {C8_SETS} sets"
    ))
}

async fn post_recommend(app: &axum::Router, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(Method::POST)
        .uri("/v1/recommend")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .expect("request builds");
    let res = app.clone().oneshot(req).await.expect("router responds");
    let status = res.status();
    let bytes = res
        .into_body()
        .collect()
        .await
        .expect("body reads")
        .to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

fn c9_persistence_and_service() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = ModelStore::open(dir.path()).map_err(|e| e.to_string())?;
    let table = three_interval_landscape();
    let mut rng = ChaCha8Rng::seed_from_u64(9_000);
    let older = BidLandscape::build("decayed", &random_observations(&mut rng, 60), 0.01);
    let newer = BidLandscape::build("decayed", &random_observations(&mut rng, 60), 0.01);
    let decayed = older
        .and_then(|o| newer.and_then(|n| o.merge(&n, 0.37)))
        .map_err(|e| e.to_string())?;
    let mut models = vec![table.clone()];
    models.push(BidLandscape::new("decayed", decayed.dist().clone(), 17));
    store.save_models(&models).map_err(|e| e.to_string())?;
    for m in &models {
        let back = ModelStore::open(dir.path())
            .and_then(|s| s.load_model(m.group()))
            .map_err(|e| e.to_string())?;
        ensure!(&back == m, "group {} differs after reload", m.group());
    }

    let app = router(Arc::new(store), None);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let fixture = |budget: f64, pctr: f64| json!({"group": "table", "impressions": 1_000_000, "pctr": pctr, "pcvr": 0.1, "cpa_goal": 15.0, "budget": budget});
    let (s1, b1) = runtime.block_on(post_recommend(&app, fixture(100_000.0, 0.01)));
    let (s2, b2) = runtime.block_on(post_recommend(&app, fixture(5_000.0, 0.01)));
    let (s3, b3) = runtime.block_on(post_recommend(&app, fixture(5_000.0, 0.0)));
    ensure!(
        s1 == StatusCode::OK && b1["status"] == "feasible" && b1["bid"] == json!(0.03),
        "feasible fixture: {s1} {b1}"
    );
    ensure!(
        s2 == StatusCode::OK
            && b2["status"] == "budget_limited"
            && b2["adjusted_budget"].is_number()
            && b2["adjusted_cpa"].is_number(),
        "budget-limited fixture: {s2} {b2}"
    );
    ensure!(
        s3 == StatusCode::BAD_REQUEST && b3["error"] == "pctr must be positive",
        "invalid fixture: {s3} {b3}"
    );
    Ok("round trip field-exact; recommend fixtures feasible / budget_limited / 400; no UI component built".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "eCPM range derivation", c1_range_derivation),
        (2, "win-rate training rows", c2_winrate_rows),
        (3, "cost training rows", c3_cost_rows),
        (4, "CPA spot check", c4_cpa_spot_check),
        (5, "optimizer oracle equivalence", c5_oracle_equivalence),
        (6, "simulator ground-truth ordering", c6_simulator_ordering),
        (7, "invariant suites", c7_invariants),
        (8, "metric definitions", c8_metrics),
        (9, "persistence and service", c9_persistence_and_service),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
