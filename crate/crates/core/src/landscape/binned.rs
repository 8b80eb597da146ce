//! Binned p.d.f / c.d.f tables over eCPM bid and the win-rate / cost lookups
//! built on them.

use std::collections::BTreeMap;

use super::{LandscapeError, RangeObservation};

pub const DEFAULT_BIN_SIZE: f64 = 0.01;

/// Floor-division bin index, snapping quotients that sit within float noise
/// of an integer onto it (so `0.03 / 0.01` lands in bin 3, not 2).
pub fn bin_index(value: f64, bin_size: f64) -> i64 {
    let q = value / bin_size;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as i64
    } else {
        q.floor() as i64
    }
}

/// One dense row of the training tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRow {
    pub index: i64,
    pub bid: f64,
    pub pdf_dn: f64,
    pub pdf_up: f64,
    pub pdf_cost_dn: f64,
    pub pdf_cost_up: f64,
    pub cdf_dn: f64,
    pub cdf_up: f64,
    pub cdf_cost_dn: f64,
    pub cdf_cost_up: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Cumulative {
    index: i64,
    dn: f64,
    up: f64,
    cost_dn: f64,
    cost_up: f64,
}

/// Histogram of interval lower / upper bounds plus the cost mass attached
/// to each. Counts are `f64` so decayed merges stay representable.
///
/// The c.d.f is stored only at indices where some p.d.f is non-zero; it is
/// constant in between, so [`BinnedDistribution::rows`] can still expand the
/// dense `1..=max_index` table.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDistribution {
    bin_size: f64,
    n_observations: f64,
    max_index: i64,
    pdf_dn: BTreeMap<i64, f64>,
    pdf_up: BTreeMap<i64, f64>,
    pdf_cost_dn: BTreeMap<i64, f64>,
    pdf_cost_up: BTreeMap<i64, f64>,
    cumulative: Vec<Cumulative>,
}

pub(crate) struct PdfTables {
    pub dn: BTreeMap<i64, f64>,
    pub up: BTreeMap<i64, f64>,
    pub cost_dn: BTreeMap<i64, f64>,
    pub cost_up: BTreeMap<i64, f64>,
}

impl BinnedDistribution {
    /// Builds the tables with `n` = number of input observations, including
    /// the ones skipped for falling into bin 0.
    pub fn build(observations: &[RangeObservation], bin_size: f64) -> Result<Self, LandscapeError> {
        Self::build_with_divisor(observations, bin_size, observations.len() as f64)
    }

    /// Builds the tables with an explicit win-rate divisor.
    pub fn build_with_divisor(
        observations: &[RangeObservation],
        bin_size: f64,
        divisor: f64,
    ) -> Result<Self, LandscapeError> {
        check_bin_size(bin_size)?;
        if observations.is_empty() {
            return Err(LandscapeError::NoObservationsInRange);
        }
        if !(divisor.is_finite() && divisor > 0.0) {
            return Err(LandscapeError::InvalidDivisor(divisor));
        }

        let mut max_index = 0i64;
        let mut dn: Vec<(i64, f64)> = Vec::with_capacity(observations.len());
        let mut up: Vec<(i64, f64)> = Vec::with_capacity(observations.len());

        for obs in observations {
            if !(obs.ecpm_up.is_finite() && obs.ecpm_dn.is_finite() && obs.ecpm_cost.is_finite()) {
                continue;
            }
            let indmin = bin_index(obs.ecpm_dn, bin_size);
            let indmax = bin_index(obs.ecpm_up, bin_size);
            max_index = max_index.max(indmax);
            if indmin > 0 && indmax > 0 {
                dn.push((indmin, obs.ecpm_cost));
                up.push((indmax, obs.ecpm_cost));
            }
        }
        if dn.is_empty() {
            return Err(LandscapeError::NoObservationsInRange);
        }

        // Sorting by (index, cost) makes the summed masses independent of
        // input order.
        let tables = |mut v: Vec<(i64, f64)>| {
            v.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut counts = BTreeMap::new();
            let mut masses = BTreeMap::new();
            for run in v.chunk_by(|a, b| a.0 == b.0) {
                counts.insert(run[0].0, run.len() as f64);
                masses.insert(run[0].0, run.iter().map(|x| x.1).sum::<f64>());
            }
            (counts, masses)
        };
        let (dn_counts, cost_dn) = tables(dn);
        let (up_counts, cost_up) = tables(up);

        Ok(Self::assemble(
            bin_size,
            divisor,
            max_index,
            PdfTables {
                dn: dn_counts,
                up: up_counts,
                cost_dn,
                cost_up,
            },
        ))
    }

    /// Distribution with no observations; the identity for [`Self::merge`].
    pub fn empty(bin_size: f64) -> Result<Self, LandscapeError> {
        check_bin_size(bin_size)?;
        Ok(Self::assemble(
            bin_size,
            0.0,
            0,
            PdfTables {
                dn: BTreeMap::new(),
                up: BTreeMap::new(),
                cost_dn: BTreeMap::new(),
                cost_up: BTreeMap::new(),
            },
        ))
    }

    pub(crate) fn from_tables(
        bin_size: f64,
        n_observations: f64,
        max_index: i64,
        tables: PdfTables,
    ) -> Result<Self, LandscapeError> {
        check_bin_size(bin_size)?;
        if !(n_observations.is_finite() && n_observations >= 0.0) {
            return Err(LandscapeError::Corrupt(format!(
                "observation count {n_observations} is not a non-negative number"
            )));
        }
        for (name, table) in [
            ("pdf_dn", &tables.dn),
            ("pdf_up", &tables.up),
            ("pdf_cost_dn", &tables.cost_dn),
            ("pdf_cost_up", &tables.cost_up),
        ] {
            for (&k, &v) in table {
                if k <= 0 || k > max_index {
                    return Err(LandscapeError::Corrupt(format!(
                        "{name} index {k} outside 1..={max_index}"
                    )));
                }
                if !(v.is_finite() && v >= 0.0) {
                    return Err(LandscapeError::Corrupt(format!("{name}[{k}] = {v}")));
                }
            }
        }
        Ok(Self::assemble(bin_size, n_observations, max_index, tables))
    }

    fn assemble(bin_size: f64, n_observations: f64, max_index: i64, t: PdfTables) -> Self {
        let mut keys: Vec<i64> =
            t.dn.keys()
                .chain(t.up.keys())
                .chain(t.cost_dn.keys())
                .chain(t.cost_up.keys())
                .copied()
                .collect();
        keys.sort_unstable();
        keys.dedup();

        let mut acc = Cumulative::default();
        let cumulative = keys
            .into_iter()
            .map(|k| {
                acc.index = k;
                acc.dn += t.dn.get(&k).copied().unwrap_or(0.0);
                acc.up += t.up.get(&k).copied().unwrap_or(0.0);
                acc.cost_dn += t.cost_dn.get(&k).copied().unwrap_or(0.0);
                acc.cost_up += t.cost_up.get(&k).copied().unwrap_or(0.0);
                acc
            })
            .collect();

        Self {
            bin_size,
            n_observations,
            max_index,
            pdf_dn: t.dn,
            pdf_up: t.up,
            pdf_cost_dn: t.cost_dn,
            pdf_cost_up: t.cost_up,
            cumulative,
        }
    }

    pub fn bin_size(&self) -> f64 {
        self.bin_size
    }

    /// Divisor of the win-rate ratio.
    pub fn n_observations(&self) -> f64 {
        self.n_observations
    }

    pub fn max_index(&self) -> i64 {
        self.max_index
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn pdf_dn(&self) -> &BTreeMap<i64, f64> {
        &self.pdf_dn
    }

    pub fn pdf_up(&self) -> &BTreeMap<i64, f64> {
        &self.pdf_up
    }

    pub fn pdf_cost_dn(&self) -> &BTreeMap<i64, f64> {
        &self.pdf_cost_dn
    }

    pub fn pdf_cost_up(&self) -> &BTreeMap<i64, f64> {
        &self.pdf_cost_up
    }

    /// Accepted (in-range) observation mass: the final value of both count c.d.fs.
    pub fn accepted(&self) -> f64 {
        self.cumulative.last().map_or(0.0, |c| c.dn)
    }

    fn cumulative_at(&self, index: i64) -> Cumulative {
        let pos = self.cumulative.partition_point(|c| c.index <= index);
        if pos == 0 {
            Cumulative {
                index,
                ..Cumulative::default()
            }
        } else {
            self.cumulative[pos - 1]
        }
    }

    pub fn cdf_dn(&self, index: i64) -> f64 {
        self.cumulative_at(index).dn
    }

    pub fn cdf_up(&self, index: i64) -> f64 {
        self.cumulative_at(index).up
    }

    pub fn cdf_cost_dn(&self, index: i64) -> f64 {
        self.cumulative_at(index).cost_dn
    }

    pub fn cdf_cost_up(&self, index: i64) -> f64 {
        self.cumulative_at(index).cost_up
    }

    fn noise_floor(&self) -> f64 {
        1e-9 * self.n_observations.max(1.0)
    }

    fn clamp_index(&self, index: i64) -> i64 {
        index.min(self.max_index)
    }

    /// Fraction of observations whose interval covers bin `index`.
    pub fn winrate_at(&self, index: i64) -> f64 {
        if index <= 0 || self.n_observations <= 0.0 {
            return 0.0;
        }
        let c = self.cumulative_at(self.clamp_index(index));
        let open = c.dn - c.up;
        if open <= self.noise_floor() {
            return 0.0;
        }
        (open / self.n_observations).clamp(0.0, 1.0)
    }

    /// Average cost of the intervals covering bin `index`, falling back to
    /// the nearest lower bin that has any covering interval.
    pub fn cost_at(&self, index: i64) -> Option<f64> {
        if index <= 0 {
            return None;
        }
        let index = self.clamp_index(index);
        let end = self.cumulative.partition_point(|c| c.index <= index);
        let floor = self.noise_floor();
        self.cumulative[..end].iter().rev().find_map(|c| {
            let open = c.dn - c.up;
            (open > floor).then(|| ((c.cost_dn - c.cost_up) / open).max(0.0))
        })
    }

    /// Running maximum of [`Self::winrate_at`] over bins `1..=index`.
    pub fn monotone_winrate_at(&self, index: i64) -> f64 {
        if index <= 0 {
            return 0.0;
        }
        let index = self.clamp_index(index);
        let end = self.cumulative.partition_point(|c| c.index <= index);
        self.cumulative[..end]
            .iter()
            .map(|c| self.winrate_at(c.index))
            .fold(0.0, f64::max)
    }

    /// Dense table rows for bins `1..=max_index`.
    pub fn rows(&self) -> impl Iterator<Item = BinRow> + '_ {
        let get = |m: &BTreeMap<i64, f64>, k: i64| m.get(&k).copied().unwrap_or(0.0);
        (1..=self.max_index).map(move |index| {
            let c = self.cumulative_at(index);
            BinRow {
                index,
                bid: index as f64 * self.bin_size,
                pdf_dn: get(&self.pdf_dn, index),
                pdf_up: get(&self.pdf_up, index),
                pdf_cost_dn: get(&self.pdf_cost_dn, index),
                pdf_cost_up: get(&self.pdf_cost_up, index),
                cdf_dn: c.dn,
                cdf_up: c.up,
                cdf_cost_dn: c.cost_dn,
                cdf_cost_up: c.cost_up,
            }
        })
    }

    /// Bin indices where any table changes value; win rate and cost are
    /// constant from one breakpoint up to the next.
    pub fn breakpoints(&self) -> impl Iterator<Item = i64> + '_ {
        self.cumulative.iter().map(|c| c.index)
    }

    /// `decay * self + other`, element-wise over all four tables and `n`.
    pub fn merge(&self, other: &Self, decay: f64) -> Result<Self, LandscapeError> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(LandscapeError::InvalidDecay(decay));
        }
        if self.bin_size != other.bin_size {
            return Err(LandscapeError::BinSizeMismatch(
                self.bin_size,
                other.bin_size,
            ));
        }
        let combine = |a: &BTreeMap<i64, f64>, b: &BTreeMap<i64, f64>| {
            let mut out: BTreeMap<i64, f64> = a.iter().map(|(&k, &v)| (k, decay * v)).collect();
            for (&k, &v) in b {
                *out.entry(k).or_default() += v;
            }
            out
        };
        Ok(Self::assemble(
            self.bin_size,
            decay * self.n_observations + other.n_observations,
            self.max_index.max(other.max_index),
            PdfTables {
                dn: combine(&self.pdf_dn, &other.pdf_dn),
                up: combine(&self.pdf_up, &other.pdf_up),
                cost_dn: combine(&self.pdf_cost_dn, &other.pdf_cost_dn),
                cost_up: combine(&self.pdf_cost_up, &other.pdf_cost_up),
            },
        ))
    }
}

fn check_bin_size(bin_size: f64) -> Result<(), LandscapeError> {
    if bin_size.is_finite() && bin_size > 0.0 {
        Ok(())
    } else {
        Err(LandscapeError::InvalidBinSize(bin_size))
    }
}
