//! Firm universe, trading calendars, daily price panel, and every return
//! primitive used downstream.
//!
//! The panel is immutable after load. Daily close-to-close returns are
//! calendar-aligned: a firm has a return on market date index `k` only when
//! it has prints on both dates `k-1` and `k` of its home-market calendar,
//! which is the definition the event trigger and the market means need.
//! Monthly returns compound those daily returns, so the 12-month
//! compounding identity holds exactly.
//!
//! "Market-relative" always means relative to the equal-weighted mean over
//! the listed firms of the firm's home market; unlisted firms never enter a
//! mean or a candidate pool.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FirmIdx, Market, MonthId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Firm {
    pub firm_id: String,
    pub market: Market,
    pub sector: String,
    pub listed: bool,
}

/// Strictly increasing trading dates for one market.
#[derive(Debug, Clone)]
pub struct TradingCalendar {
    pub market: Market,
    dates: Vec<NaiveDate>,
    index: HashMap<NaiveDate, usize>,
}

impl TradingCalendar {
    pub fn new(market: Market, mut dates: Vec<NaiveDate>) -> Result<Self> {
        dates.sort_unstable();
        dates.dedup();
        let index = dates.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        Ok(TradingCalendar { market, dates, index })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.index.get(&date).copied()
    }

    pub fn date_at(&self, idx: usize) -> Option<NaiveDate> {
        self.dates.get(idx).copied()
    }

    /// Index of the first trading date strictly after `date`. `date` itself
    /// need not belong to this calendar.
    pub fn first_after(&self, date: NaiveDate) -> Option<usize> {
        let i = self.dates.partition_point(|&d| d <= date);
        (i < self.dates.len()).then_some(i)
    }

    /// The n-th trading date strictly after `date` (n = 1 is the next one).
    pub fn nth_after(&self, date: NaiveDate, n: usize) -> Option<usize> {
        debug_assert!(n >= 1);
        let i = self.first_after(date)? + (n - 1);
        (i < self.dates.len()).then_some(i)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub adj_close: f64,
    pub volume: f64,
    pub shares_outstanding: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnFrequency {
    DailyClose,
    DailyOpenToOpen,
    Monthly,
}

/// A named return series, mostly for exports and tests; the engine itself
/// works off the panel caches.
#[derive(Debug, Clone, Serialize)]
pub struct ReturnSeries {
    pub firm_id: String,
    pub frequency: ReturnFrequency,
    pub values: Vec<(NaiveDate, f64)>,
}

/// The validated firm table.
#[derive(Debug, Clone)]
pub struct Universe {
    firms: Vec<Firm>,
    index: HashMap<String, FirmIdx>,
}

impl Universe {
    pub fn new(firms: Vec<Firm>) -> Result<Self> {
        let mut index = HashMap::with_capacity(firms.len());
        for (i, f) in firms.iter().enumerate() {
            if index.insert(f.firm_id.clone(), FirmIdx(i as u32)).is_some() {
                return Err(Error::DuplicateFirm(f.firm_id.clone()));
            }
        }
        Ok(Universe { firms, index })
    }

    pub fn len(&self) -> usize {
        self.firms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.firms.is_empty()
    }

    pub fn firm(&self, idx: FirmIdx) -> &Firm {
        &self.firms[idx.as_usize()]
    }

    pub fn firms(&self) -> &[Firm] {
        &self.firms
    }

    pub fn lookup(&self, firm_id: &str) -> Option<FirmIdx> {
        self.index.get(firm_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FirmIdx, &Firm)> {
        self.firms
            .iter()
            .enumerate()
            .map(|(i, f)| (FirmIdx(i as u32), f))
    }

    /// Firm indexes of one market, in universe order.
    pub fn market_firms(&self, market: Market) -> Vec<FirmIdx> {
        self.iter()
            .filter(|(_, f)| f.market == market)
            .map(|(i, _)| i)
            .collect()
    }

    /// Listed firms of one market, in universe order.
    pub fn listed_market_firms(&self, market: Market) -> Vec<FirmIdx> {
        self.iter()
            .filter(|(_, f)| f.market == market && f.listed)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts_per_market(&self) -> BTreeMap<Market, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.firms {
            *counts.entry(f.market).or_insert(0) += 1;
        }
        counts
    }
}

/// Load and validate firms.csv (firm_id,market,sector,listed).
pub fn load_universe(path: &Path) -> Result<Universe> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    let mut firms = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: row_no + 2,
            message: e.to_string(),
        })?;
        let get = |i: usize, name: &str| -> Result<String> {
            record
                .get(i)
                .map(str::to_string)
                .ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    row: row_no + 2,
                    message: format!("missing column {name}"),
                })
        };
        let firm_id = get(0, "firm_id")?;
        let market_code = get(1, "market")?;
        let market = market_code.parse::<Market>().map_err(|_| Error::UnknownMarket {
            firm: firm_id.clone(),
            code: market_code.clone(),
        })?;
        let sector = get(2, "sector")?;
        let listed_raw = get(3, "listed")?;
        let listed = match listed_raw.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: row_no + 2,
                    message: format!("bad listed flag {other:?}"),
                })
            }
        };
        firms.push(Firm {
            firm_id,
            market,
            sector,
            listed,
        });
    }
    Universe::new(firms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DailyReturnKind {
    CloseToClose,
    /// open(d+3)/open(d+2) - 1, dates counted in the firm's own calendar
    /// strictly after the event date.
    OpenOpenT2,
}

/// Immutable daily panel plus every derived return cache.
pub struct Panel {
    universe: Universe,
    calendars: BTreeMap<Market, TradingCalendar>,
    /// Per firm, sorted by date.
    prices: Vec<Vec<PriceBar>>,
    /// Per firm: market-calendar-aligned close-to-close returns,
    /// `daily_ret[firm][k]` is the return on calendar index k (None when the
    /// firm lacks a print on k-1 or k).
    daily_ret: Vec<Vec<Option<f64>>>,
    /// Per firm: open(k)->open(k+1) returns on calendar index k.
    oo_ret: Vec<Vec<Option<f64>>>,
    /// Per market: equal-weighted mean close-to-close return of listed firms
    /// per calendar index, with contributor count.
    market_mean: BTreeMap<Market, Vec<Option<(f64, usize)>>>,
    /// Per market: equal-weighted mean open->next-open return per calendar
    /// index, with contributor count.
    market_oo_mean: BTreeMap<Market, Vec<Option<(f64, usize)>>>,
    /// Per firm: compounded monthly returns.
    monthly_ret: Vec<BTreeMap<MonthId, f64>>,
    /// Per firm: ln(close * shares) at the firm's last print of each month.
    month_end_cap: Vec<BTreeMap<MonthId, f64>>,
    month_span: Option<(MonthId, MonthId)>,
}

impl Panel {
    /// Assemble a panel from an already-validated universe and price rows.
    /// `calendars` may be empty, in which case each market's calendar is
    /// inferred as the union of its firms' price dates.
    pub fn from_parts(
        universe: Universe,
        mut rows: Vec<(FirmIdx, PriceBar)>,
        supplied_calendars: BTreeMap<Market, Vec<NaiveDate>>,
    ) -> Result<Self> {
        let n = universe.len();
        let mut prices: Vec<Vec<PriceBar>> = vec![Vec::new(); n];
        rows.sort_by_key(|(f, b)| (*f, b.date));
        for (firm, bar) in rows {
            let series = &mut prices[firm.as_usize()];
            if let Some(last) = series.last() {
                if last.date == bar.date {
                    return Err(Error::DuplicatePriceRow {
                        firm: universe.firm(firm).firm_id.clone(),
                        date: bar.date.to_string(),
                    });
                }
            }
            series.push(bar);
        }

        let mut calendars = BTreeMap::new();
        for market in Market::ALL {
            let dates: Vec<NaiveDate> = if let Some(d) = supplied_calendars.get(&market) {
                d.clone()
            } else {
                let mut set: Vec<NaiveDate> = Vec::new();
                for (idx, f) in universe.iter() {
                    if f.market == market {
                        set.extend(prices[idx.as_usize()].iter().map(|b| b.date));
                    }
                }
                set
            };
            if dates.is_empty() {
                continue;
            }
            calendars.insert(market, TradingCalendar::new(market, dates)?);
        }

        // every price date must appear in its market's calendar
        for (idx, f) in universe.iter() {
            let Some(cal) = calendars.get(&f.market) else { continue };
            for bar in &prices[idx.as_usize()] {
                if cal.index_of(bar.date).is_none() {
                    return Err(Error::DateNotInCalendar {
                        firm: f.firm_id.clone(),
                        market: f.market.code().to_string(),
                        date: bar.date.to_string(),
                    });
                }
            }
        }

        let mut panel = Panel {
            universe,
            calendars,
            prices,
            daily_ret: Vec::new(),
            oo_ret: Vec::new(),
            market_mean: BTreeMap::new(),
            market_oo_mean: BTreeMap::new(),
            monthly_ret: Vec::new(),
            month_end_cap: Vec::new(),
            month_span: None,
        };
        panel.build_caches();
        Ok(panel)
    }

    fn build_caches(&mut self) {
        let n = self.universe.len();
        self.daily_ret = vec![Vec::new(); n];
        self.oo_ret = vec![Vec::new(); n];
        self.monthly_ret = vec![BTreeMap::new(); n];
        self.month_end_cap = vec![BTreeMap::new(); n];

        for (idx, firm) in self.universe.iter() {
            let i = idx.as_usize();
            let Some(cal) = self.calendars.get(&firm.market) else { continue };
            let mut close_at: Vec<Option<f64>> = vec![None; cal.len()];
            let mut open_at: Vec<Option<f64>> = vec![None; cal.len()];
            for bar in &self.prices[i] {
                let k = cal.index_of(bar.date).expect("validated above");
                close_at[k] = Some(bar.adj_close);
                open_at[k] = Some(bar.open);
            }
            let mut dr = vec![None; cal.len()];
            let mut oo = vec![None; cal.len()];
            for k in 1..cal.len() {
                if let (Some(prev), Some(cur)) = (close_at[k - 1], close_at[k]) {
                    dr[k] = Some(cur / prev - 1.0);
                }
            }
            for k in 0..cal.len().saturating_sub(1) {
                if let (Some(cur), Some(next)) = (open_at[k], open_at[k + 1]) {
                    oo[k] = Some(next / cur - 1.0);
                }
            }
            self.daily_ret[i] = dr;
            self.oo_ret[i] = oo;

            // monthly compounding of in-month daily returns
            let mut acc: BTreeMap<MonthId, (f64, usize)> = BTreeMap::new();
            for k in 1..cal.len() {
                if let Some(r) = self.daily_ret[i][k] {
                    let m = MonthId::from_date(cal.date_at(k).unwrap());
                    let e = acc.entry(m).or_insert((1.0, 0));
                    e.0 *= 1.0 + r;
                    e.1 += 1;
                }
            }
            self.monthly_ret[i] = acc.into_iter().map(|(m, (g, _))| (m, g - 1.0)).collect();

            // ln(close * shares) at the firm's last print per month
            let mut caps: BTreeMap<MonthId, f64> = BTreeMap::new();
            for bar in &self.prices[i] {
                let m = MonthId::from_date(bar.date);
                let cap = bar.adj_close * bar.shares_outstanding;
                if cap > 0.0 {
                    caps.insert(m, cap.ln());
                } else {
                    caps.remove(&m);
                }
            }
            self.month_end_cap[i] = caps;
        }

        for (&market, cal) in &self.calendars {
            let listed = self.universe.listed_market_firms(market);
            let mut mean = vec![None; cal.len()];
            let mut oo_mean = vec![None; cal.len()];
            for k in 0..cal.len() {
                let mut sum = 0.0;
                let mut cnt = 0usize;
                let mut oo_sum = 0.0;
                let mut oo_cnt = 0usize;
                for &f in &listed {
                    if let Some(r) = self.daily_ret[f.as_usize()].get(k).copied().flatten() {
                        sum += r;
                        cnt += 1;
                    }
                    if let Some(r) = self.oo_ret[f.as_usize()].get(k).copied().flatten() {
                        oo_sum += r;
                        oo_cnt += 1;
                    }
                }
                if cnt > 0 {
                    mean[k] = Some((sum / cnt as f64, cnt));
                }
                if oo_cnt > 0 {
                    oo_mean[k] = Some((oo_sum / oo_cnt as f64, oo_cnt));
                }
            }
            self.market_mean.insert(market, mean);
            self.market_oo_mean.insert(market, oo_mean);
        }

        let mut lo: Option<MonthId> = None;
        let mut hi: Option<MonthId> = None;
        for series in &self.prices {
            for bar in series {
                let m = MonthId::from_date(bar.date);
                lo = Some(lo.map_or(m, |x| x.min(m)));
                hi = Some(hi.map_or(m, |x| x.max(m)));
            }
        }
        self.month_span = lo.zip(hi);
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn calendar(&self, market: Market) -> Option<&TradingCalendar> {
        self.calendars.get(&market)
    }

    pub fn prices(&self, firm: FirmIdx) -> &[PriceBar] {
        &self.prices[firm.as_usize()]
    }

    /// Panel month span (first, last), None for an empty panel.
    pub fn month_span(&self) -> Option<(MonthId, MonthId)> {
        self.month_span
    }

    /// Compounded simple return of one calendar month; missing when the firm
    /// has no daily return observation in the month.
    pub fn monthly_return(&self, firm: FirmIdx, month: MonthId) -> Option<f64> {
        self.monthly_ret[firm.as_usize()].get(&month).copied()
    }

    /// Compounded simple return over the L months ending at `end_month`,
    /// requiring at least ceil(L/2) months of data.
    pub fn cumulative_return(&self, firm: FirmIdx, end_month: MonthId, lookback: u32) -> Option<f64> {
        let need = lookback.div_ceil(2) as usize;
        let mut growth = 1.0;
        let mut have = 0usize;
        for k in 0..lookback as i32 {
            if let Some(r) = self.monthly_return(firm, end_month.minus(k)) {
                growth *= 1.0 + r;
                have += 1;
            }
        }
        (have >= need.max(1)).then_some(growth - 1.0)
    }

    /// L-month sector-relative returns for every firm of a market at once:
    /// cumulative return minus the equal-weighted same-(market,sector) mean
    /// over listed firms with valid returns (the firm itself included).
    /// Returns the value map and the set of singleton-sector firms (value 0,
    /// flagged).
    pub fn sector_relative_returns(
        &self,
        market: Market,
        end_month: MonthId,
        lookback: u32,
    ) -> (BTreeMap<FirmIdx, f64>, Vec<FirmIdx>) {
        let firms = self.universe.listed_market_firms(market);
        let mut raw: BTreeMap<FirmIdx, f64> = BTreeMap::new();
        let mut by_sector: BTreeMap<&str, Vec<FirmIdx>> = BTreeMap::new();
        for &f in &firms {
            if let Some(r) = self.cumulative_return(f, end_month, lookback) {
                raw.insert(f, r);
                by_sector
                    .entry(self.universe.firm(f).sector.as_str())
                    .or_default()
                    .push(f);
            }
        }
        let mut out = BTreeMap::new();
        let mut singletons = Vec::new();
        for (_, members) in by_sector {
            if members.len() == 1 {
                out.insert(members[0], 0.0);
                singletons.push(members[0]);
                continue;
            }
            let mean = members.iter().map(|f| raw[f]).sum::<f64>() / members.len() as f64;
            for f in members {
                out.insert(f, raw[&f] - mean);
            }
        }
        (out, singletons)
    }

    /// L-month raw sector mean returns per sector of a market (used as the
    /// industry-momentum control). Keyed by sector name.
    pub fn sector_mean_returns(
        &self,
        market: Market,
        end_month: MonthId,
        lookback: u32,
    ) -> BTreeMap<String, f64> {
        let firms = self.universe.listed_market_firms(market);
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for &f in &firms {
            if let Some(r) = self.cumulative_return(f, end_month, lookback) {
                let e = acc
                    .entry(self.universe.firm(f).sector.clone())
                    .or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(s, (sum, n))| (s, sum / n as f64))
            .collect()
    }

    /// Close-to-close return on `date` aligned to the firm's market
    /// calendar (needs prints on `date` and the previous market date).
    pub fn daily_return_on(&self, firm: FirmIdx, date: NaiveDate) -> Option<f64> {
        let market = self.universe.firm(firm).market;
        let cal = self.calendars.get(&market)?;
        let k = cal.index_of(date)?;
        self.daily_ret[firm.as_usize()].get(k).copied().flatten()
    }

    /// Firm return minus the equal-weighted listed-market mean. For
    /// `OpenOpenT2` the two execution dates are the 2nd and 3rd trading
    /// dates of the firm's market strictly after `date`.
    /// Missing unless the firm and at least 2 peers have the needed prices.
    pub fn market_relative_daily_return(
        &self,
        firm: FirmIdx,
        date: NaiveDate,
        kind: DailyReturnKind,
    ) -> Option<f64> {
        let market = self.universe.firm(firm).market;
        let cal = self.calendars.get(&market)?;
        match kind {
            DailyReturnKind::CloseToClose => {
                let k = cal.index_of(date)?;
                let own = self.daily_ret[firm.as_usize()].get(k).copied().flatten()?;
                let (mean, cnt) = self.market_mean.get(&market)?.get(k).copied().flatten()?;
                (cnt >= 3).then(|| own - mean)
            }
            DailyReturnKind::OpenOpenT2 => {
                let k2 = cal.nth_after(date, 2)?;
                if cal.nth_after(date, 3).is_none() {
                    return None;
                }
                let own = self.oo_ret[firm.as_usize()].get(k2).copied().flatten()?;
                let (mean, cnt) = self.market_oo_mean.get(&market)?.get(k2).copied().flatten()?;
                (cnt >= 3).then(|| own - mean)
            }
        }
    }

    /// The two execution dates (d+2, d+3) resolved in the firm's own
    /// calendar, for audit and feasibility checks.
    pub fn execution_dates(&self, firm: FirmIdx, date: NaiveDate) -> Option<(NaiveDate, NaiveDate)> {
        let market = self.universe.firm(firm).market;
        let cal = self.calendars.get(&market)?;
        let d2 = cal.date_at(cal.nth_after(date, 2)?)?;
        let d3 = cal.date_at(cal.nth_after(date, 3)?)?;
        Some((d2, d3))
    }

    /// ln(close x shares outstanding) at the firm's last print of the month.
    pub fn log_market_cap(&self, firm: FirmIdx, month_end: MonthId) -> Option<f64> {
        self.month_end_cap[firm.as_usize()].get(&month_end).copied()
    }

    /// Daily close-to-close returns of one firm over a trailing window of
    /// its market calendar ending at `as_of` (inclusive), as (date, return)
    /// pairs. Used by the correlation peer scheme.
    pub fn trailing_daily_returns(
        &self,
        firm: FirmIdx,
        as_of: NaiveDate,
        window: usize,
    ) -> Vec<(NaiveDate, f64)> {
        let market = self.universe.firm(firm).market;
        let Some(cal) = self.calendars.get(&market) else {
            return Vec::new();
        };
        let end = cal.dates().partition_point(|&d| d <= as_of);
        let start = end.saturating_sub(window);
        (start..end)
            .filter_map(|k| {
                self.daily_ret[firm.as_usize()]
                    .get(k)
                    .copied()
                    .flatten()
                    .map(|r| (cal.date_at(k).unwrap(), r))
            })
            .collect()
    }

    /// One named series for exports and tests.
    pub fn return_series(&self, firm: FirmIdx, frequency: ReturnFrequency) -> ReturnSeries {
        let firm_id = self.universe.firm(firm).firm_id.clone();
        let market = self.universe.firm(firm).market;
        let values = match frequency {
            ReturnFrequency::DailyClose => {
                let cal = &self.calendars[&market];
                self.daily_ret[firm.as_usize()]
                    .iter()
                    .enumerate()
                    .filter_map(|(k, r)| r.map(|r| (cal.date_at(k).unwrap(), r)))
                    .collect()
            }
            ReturnFrequency::DailyOpenToOpen => {
                let cal = &self.calendars[&market];
                self.oo_ret[firm.as_usize()]
                    .iter()
                    .enumerate()
                    .filter_map(|(k, r)| r.map(|r| (cal.date_at(k).unwrap(), r)))
                    .collect()
            }
            ReturnFrequency::Monthly => self.monthly_ret[firm.as_usize()]
                .iter()
                .map(|(&m, &r)| (m.first_day(), r))
                .collect(),
        };
        ReturnSeries {
            firm_id,
            frequency,
            values,
        }
    }

    /// Deterministically perturb every price strictly after `cutoff`.
    /// Returns a rebuilt panel; the perturbation keeps prices positive.
    pub fn perturb_after(&self, cutoff: NaiveDate, seed: u64) -> Panel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for (idx, _) in self.universe.iter() {
            for bar in &self.prices[idx.as_usize()] {
                let mut bar = *bar;
                if bar.date > cutoff {
                    let scale = 1.0 + rng.gen_range(-0.4..0.4);
                    bar.open *= scale;
                    bar.high *= scale;
                    bar.low *= scale;
                    bar.adj_close *= scale;
                }
                rows.push((idx, bar));
            }
        }
        let calendars = self
            .calendars
            .iter()
            .map(|(&m, c)| (m, c.dates().to_vec()))
            .collect();
        Panel::from_parts(self.universe.clone(), rows, calendars)
            .expect("perturbation preserves panel validity")
    }
}

/// Load prices.csv rows
/// (firm_id,date,open,high,low,adj_close,volume,shares_outstanding).
/// Rows with non-positive open or adj_close are dropped; the count of
/// dropped rows is returned alongside the panel.
pub fn load_panel(
    universe: Universe,
    prices_path: &Path,
    calendar_path: Option<&Path>,
) -> Result<(Panel, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(prices_path)
        .map_err(|e| Error::Io {
            path: prices_path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: prices_path.display().to_string(),
            row: row_no + 2,
            message: e.to_string(),
        })?;
        let parse_err = |message: String| Error::Parse {
            path: prices_path.display().to_string(),
            row: row_no + 2,
            message,
        };
        let firm_id = record.get(0).ok_or_else(|| parse_err("missing firm_id".into()))?;
        let firm = universe.lookup(firm_id).ok_or_else(|| Error::UnknownFirm {
            firm: firm_id.to_string(),
            path: prices_path.display().to_string(),
        })?;
        let date: NaiveDate = record
            .get(1)
            .ok_or_else(|| parse_err("missing date".into()))?
            .parse()
            .map_err(|e| parse_err(format!("bad date: {e}")))?;
        let mut nums = [0.0f64; 6];
        for (slot, col) in nums.iter_mut().zip(2..8) {
            *slot = record
                .get(col)
                .ok_or_else(|| parse_err(format!("missing column {col}")))?
                .parse()
                .map_err(|e| parse_err(format!("bad number in column {col}: {e}")))?;
        }
        let bar = PriceBar {
            date,
            open: nums[0],
            high: nums[1],
            low: nums[2],
            adj_close: nums[3],
            volume: nums[4],
            shares_outstanding: nums[5],
        };
        if bar.open <= 0.0 || bar.adj_close <= 0.0 {
            dropped += 1;
            continue;
        }
        rows.push((firm, bar));
    }

    let mut calendars = BTreeMap::new();
    if let Some(cal_path) = calendar_path {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(cal_path)
            .map_err(|e| Error::Io {
                path: cal_path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
        for (row_no, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                path: cal_path.display().to_string(),
                row: row_no + 2,
                message: e.to_string(),
            })?;
            let market: Market = record
                .get(0)
                .unwrap_or_default()
                .parse()
                .map_err(|_| Error::Parse {
                    path: cal_path.display().to_string(),
                    row: row_no + 2,
                    message: format!("bad market {:?}", record.get(0).unwrap_or_default()),
                })?;
            let date: NaiveDate = record
                .get(1)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Parse {
                    path: cal_path.display().to_string(),
                    row: row_no + 2,
                    message: format!("bad date: {e}"),
                })?;
            calendars.entry(market).or_insert_with(Vec::new).push(date);
        }
    }

    let panel = Panel::from_parts(universe, rows, calendars)?;
    Ok((panel, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn firm(id: &str, market: Market, sector: &str) -> Firm {
        Firm {
            firm_id: id.into(),
            market,
            sector: sector.into(),
            listed: true,
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn bar(date: &str, close: f64) -> PriceBar {
        PriceBar {
            date: d(date),
            open: close,
            high: close,
            low: close,
            adj_close: close,
            volume: 1.0,
            shares_outstanding: 100.0,
        }
    }

    /// Panel with one firm following the given closes on consecutive dates.
    fn single_firm_panel(closes: &[(&str, f64)]) -> Panel {
        let universe = Universe::new(vec![
            firm("A", Market::Us, "TECH"),
            firm("B", Market::Us, "TECH"),
            firm("C", Market::Us, "TECH"),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for (date, close) in closes {
            rows.push((FirmIdx(0), bar(date, *close)));
            // flat peers so the market mean is defined
            rows.push((FirmIdx(1), bar(date, 10.0)));
            rows.push((FirmIdx(2), bar(date, 20.0)));
        }
        Panel::from_parts(universe, rows, BTreeMap::new()).unwrap()
    }

    #[test]
    fn duplicate_firm_id_is_rejected() {
        let err = Universe::new(vec![
            firm("AAPL", Market::Us, "TECH"),
            firm("AAPL", Market::Us, "TECH"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("AAPL"));
    }

    #[test]
    fn monthly_return_compounds_daily() {
        // +1%, +1% in a 2-day month -> 0.0201
        let panel = single_firm_panel(&[
            ("2024-01-31", 100.0),
            ("2024-02-01", 101.0),
            ("2024-02-02", 102.01),
        ]);
        let m = MonthId::from_ym(2024, 2);
        let r = panel.monthly_return(FirmIdx(0), m).unwrap();
        assert!((r - 0.0201).abs() < 1e-12);
    }

    #[test]
    fn monthly_return_all_zero_days() {
        let panel = single_firm_panel(&[
            ("2024-01-31", 100.0),
            ("2024-02-01", 100.0),
            ("2024-02-02", 100.0),
        ]);
        assert_eq!(panel.monthly_return(FirmIdx(0), MonthId::from_ym(2024, 2)), Some(0.0));
    }

    #[test]
    fn monthly_return_up_down_compound() {
        // +10%, -10% -> 1.1 * 0.9 - 1 = -0.01
        let panel = single_firm_panel(&[
            ("2024-01-31", 100.0),
            ("2024-02-01", 110.0),
            ("2024-02-02", 99.0),
        ]);
        let r = panel.monthly_return(FirmIdx(0), MonthId::from_ym(2024, 2)).unwrap();
        assert!((r - (-0.01)).abs() < 1e-12);
    }

    #[test]
    fn monthly_return_missing_month() {
        let panel = single_firm_panel(&[("2024-01-31", 100.0), ("2024-02-01", 101.0)]);
        assert_eq!(panel.monthly_return(FirmIdx(0), MonthId::from_ym(2024, 3)), None);
        // January has a print but no return observation -> missing, not zero
        assert_eq!(panel.monthly_return(FirmIdx(0), MonthId::from_ym(2024, 1)), None);
    }

    #[test]
    fn sector_relative_two_firm_demeaning() {
        let universe = Universe::new(vec![
            firm("A", Market::Us, "TECH"),
            firm("B", Market::Us, "TECH"),
        ])
        .unwrap();
        // firm A: +5% in Feb, firm B: +3% in Feb
        let rows = vec![
            (FirmIdx(0), bar("2024-01-31", 100.0)),
            (FirmIdx(0), bar("2024-02-29", 105.0)),
            (FirmIdx(1), bar("2024-01-31", 100.0)),
            (FirmIdx(1), bar("2024-02-29", 103.0)),
        ];
        let panel = Panel::from_parts(universe, rows, BTreeMap::new()).unwrap();
        let (rel, singles) =
            panel.sector_relative_returns(Market::Us, MonthId::from_ym(2024, 2), 1);
        assert!(singles.is_empty());
        assert!((rel[&FirmIdx(0)] - 0.01).abs() < 1e-12);
        assert!((rel[&FirmIdx(1)] + 0.01).abs() < 1e-12);
    }

    #[test]
    fn sector_relative_singleton_flagged() {
        let universe = Universe::new(vec![
            firm("A", Market::Us, "TECH"),
            firm("B", Market::Us, "ENERGY"),
            firm("C", Market::Us, "ENERGY"),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for (i, growth) in [(0u32, 1.05), (1, 1.02), (2, 1.01)] {
            rows.push((FirmIdx(i), bar("2024-01-31", 100.0)));
            rows.push((FirmIdx(i), bar("2024-02-29", 100.0 * growth)));
        }
        let panel = Panel::from_parts(universe, rows, BTreeMap::new()).unwrap();
        let (rel, singles) =
            panel.sector_relative_returns(Market::Us, MonthId::from_ym(2024, 2), 1);
        assert_eq!(singles, vec![FirmIdx(0)]);
        assert_eq!(rel[&FirmIdx(0)], 0.0);
    }

    #[test]
    fn cumulative_return_coverage_floor() {
        // 12-month lookback with only 5 months of data -> missing (< ceil(12/2))
        let mut closes = vec![("2024-01-31", 100.0)];
        let dates = ["2024-02-29", "2024-03-29", "2024-04-30", "2024-05-31", "2024-06-28"];
        for (i, date) in dates.iter().enumerate() {
            closes.push((date, 100.0 + i as f64));
        }
        let panel = single_firm_panel(&closes);
        assert_eq!(
            panel.cumulative_return(FirmIdx(0), MonthId::from_ym(2024, 6), 12),
            None
        );
        assert!(panel
            .cumulative_return(FirmIdx(0), MonthId::from_ym(2024, 6), 6)
            .is_some());
    }

    #[test]
    fn open_open_t2_uses_own_calendar() {
        // five consecutive dates; event on the first
        let dates = ["2024-03-01", "2024-03-04", "2024-03-05", "2024-03-06", "2024-03-07"];
        let universe = Universe::new(vec![
            firm("A", Market::Us, "TECH"),
            firm("B", Market::Us, "TECH"),
            firm("C", Market::Us, "TECH"),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for (k, date) in dates.iter().enumerate() {
            // firm A opens: 100, 100, 100, 110, 121 -> oo return at index 2 is +10%
            let a_open = [100.0, 100.0, 100.0, 110.0, 121.0][k];
            let mut b = bar(date, 50.0);
            b.open = a_open;
            rows.push((FirmIdx(0), b));
            rows.push((FirmIdx(1), bar(date, 10.0)));
            rows.push((FirmIdx(2), bar(date, 20.0)));
        }
        let panel = Panel::from_parts(universe, rows, BTreeMap::new()).unwrap();
        let event_date = d("2024-03-01");
        let (d2, d3) = panel.execution_dates(FirmIdx(0), event_date).unwrap();
        assert_eq!(d2, d("2024-03-05"));
        assert_eq!(d3, d("2024-03-06"));
        let rel = panel
            .market_relative_daily_return(FirmIdx(0), event_date, DailyReturnKind::OpenOpenT2)
            .unwrap();
        // firm +10%, peers flat, 3 contributors: mean = 0.1/3
        assert!((rel - (0.10 - 0.10 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn market_relative_mean_is_zero() {
        let universe = Universe::new(vec![
            firm("A", Market::Us, "TECH"),
            firm("B", Market::Us, "TECH"),
            firm("C", Market::Us, "FIN"),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for (i, closes) in [
            (0u32, [100.0, 103.0]),
            (1, [50.0, 51.0]),
            (2, [20.0, 19.0]),
        ] {
            rows.push((FirmIdx(i), bar("2024-03-01", closes[0])));
            rows.push((FirmIdx(i), bar("2024-03-04", closes[1])));
        }
        let panel = Panel::from_parts(universe, rows, BTreeMap::new()).unwrap();
        let date = d("2024-03-04");
        let sum: f64 = (0..3)
            .map(|i| {
                panel
                    .market_relative_daily_return(FirmIdx(i), date, DailyReturnKind::CloseToClose)
                    .unwrap()
            })
            .sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn log_market_cap_value() {
        let panel = single_firm_panel(&[("2024-01-31", 100.0)]);
        let cap = panel
            .log_market_cap(FirmIdx(0), MonthId::from_ym(2024, 1))
            .unwrap();
        assert!((cap - (100.0f64 * 100.0).ln()).abs() < 1e-12);
    }
}
