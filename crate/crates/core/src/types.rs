//! Shared domain newtypes: markets, firm handles, month ids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The five-market equity universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Market {
    #[serde(rename = "US")]
    Us,
    #[serde(rename = "JP")]
    Jp,
    #[serde(rename = "TW")]
    Tw,
    #[serde(rename = "KR")]
    Kr,
    #[serde(rename = "HK")]
    Hk,
}

impl Market {
    pub const ALL: [Market; 5] = [Market::Us, Market::Jp, Market::Tw, Market::Kr, Market::Hk];

    pub fn code(self) -> &'static str {
        match self {
            Market::Us => "US",
            Market::Jp => "JP",
            Market::Tw => "TW",
            Market::Kr => "KR",
            Market::Hk => "HK",
        }
    }
}

impl fmt::Display for Market {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Market {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_uppercase().as_str() {
            "US" => Ok(Market::Us),
            "JP" => Ok(Market::Jp),
            "TW" => Ok(Market::Tw),
            "KR" => Ok(Market::Kr),
            "HK" => Ok(Market::Hk),
            other => Err(Error::UnknownMarket {
                firm: String::new(),
                code: other.to_string(),
            }),
        }
    }
}

/// Index of a firm in the loaded universe. Cheap copyable handle; the
/// universe owns the string ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FirmIdx(pub u32);

impl FirmIdx {
    pub fn as_usize(self) -> usize {
        self.0 as usize
    }
}

/// Calendar month as a flat count (year * 12 + month0) so month arithmetic
/// is plain integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MonthId(pub i32);

impl MonthId {
    pub fn from_ym(year: i32, month: u32) -> Self {
        debug_assert!((1..=12).contains(&month));
        MonthId(year * 12 + month as i32 - 1)
    }

    pub fn from_date(d: chrono::NaiveDate) -> Self {
        use chrono::Datelike;
        Self::from_ym(d.year(), d.month())
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    pub fn prev(self) -> Self {
        MonthId(self.0 - 1)
    }

    pub fn next(self) -> Self {
        MonthId(self.0 + 1)
    }

    pub fn minus(self, months: i32) -> Self {
        MonthId(self.0 - months)
    }

    /// First calendar day of the month.
    pub fn first_day(self) -> chrono::NaiveDate {
        chrono::NaiveDate::from_ymd_opt(self.year(), self.month(), 1).unwrap()
    }

    /// Last calendar day of the month.
    pub fn last_day(self) -> chrono::NaiveDate {
        self.next().first_day().pred_opt().unwrap()
    }
}

impl fmt::Display for MonthId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl From<MonthId> for String {
    fn from(m: MonthId) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MonthId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| format!("bad month {s:?}, expected YYYY-MM"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in {s:?}"));
        }
        Ok(MonthId::from_ym(year, month))
    }
}
