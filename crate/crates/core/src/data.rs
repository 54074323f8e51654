//! Unit records, group cells, CSV ingestion and design-matrix assembly.
//!
//! A dataset holds one row per individual with a treatment indicator `d`,
//! a period indicator `t`, an inclusion (sampling design) weight, covariates,
//! an optional mediator record for participants and a vector of monthly
//! outcomes. The allocation system `s` is never read independently: it is
//! a function of the period, because the pre-reform system is never observed
//! after the reform and vice versa.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allocation system in force: mandatory assignment before the reform,
/// vouchers after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "m")]
    Mandatory,
    #[serde(rename = "v")]
    Voucher,
}

impl System {
    pub fn for_period(t: u8) -> System {
        if t == 0 {
            System::Mandatory
        } else {
            System::Voucher
        }
    }

    pub fn code(self) -> char {
        match self {
            System::Mandatory => 'm',
            System::Voucher => 'v',
        }
    }
}

/// The `(d, t, s)` cell identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub d: u8,
    pub t: u8,
    pub s: System,
}

impl GroupKey {
    pub const TREATED_PRE: GroupKey = GroupKey { d: 1, t: 0, s: System::Mandatory };
    pub const CONTROL_PRE: GroupKey = GroupKey { d: 0, t: 0, s: System::Mandatory };
    pub const TREATED_POST: GroupKey = GroupKey { d: 1, t: 1, s: System::Voucher };
    pub const CONTROL_POST: GroupKey = GroupKey { d: 0, t: 1, s: System::Voucher };

    /// The four cells that occur in observed data.
    pub const OBSERVABLE: [GroupKey; 4] =
        [GroupKey::TREATED_PRE, GroupKey::CONTROL_PRE, GroupKey::TREATED_POST, GroupKey::CONTROL_POST];

    pub fn new(d: u8, t: u8, s: System) -> GroupKey {
        GroupKey { d, t, s }
    }

    /// Observed cell for a unit with indicators `(d, t)`.
    pub fn observed(d: u8, t: u8) -> GroupKey {
        GroupKey { d, t, s: System::for_period(t) }
    }

    pub fn is_observable(&self) -> bool {
        self.d <= 1 && self.t <= 1 && self.s == System::for_period(self.t)
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.d, self.t, self.s.code())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    /// Parses `"1,1,v"` or `"(1,1,v)"`.
    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let bad = || Error::InvalidInput(format!("cannot parse group key '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let d: u8 = parts[0].parse().map_err(|_| bad())?;
        let t: u8 = parts[1].parse().map_err(|_| bad())?;
        let sys = match parts[2] {
            "m" => System::Mandatory,
            "v" => System::Voucher,
            _ => return Err(bad()),
        };
        if d > 1 || t > 1 {
            return Err(bad());
        }
        Ok(GroupKey::new(d, t, sys))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgrammeType {
    PracticeFirm,
    ShortTraining,
    LongTraining,
    Retraining,
    Other,
}

impl ProgrammeType {
    pub const ALL: [ProgrammeType; 5] = [
        ProgrammeType::PracticeFirm,
        ProgrammeType::ShortTraining,
        ProgrammeType::LongTraining,
        ProgrammeType::Retraining,
        ProgrammeType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProgrammeType::PracticeFirm => "practice_firm",
            ProgrammeType::ShortTraining => "short_training",
            ProgrammeType::LongTraining => "long_training",
            ProgrammeType::Retraining => "retraining",
            ProgrammeType::Other => "other",
        }
    }
}

impl FromStr for ProgrammeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProgrammeType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown programme type '{s}'")))
    }
}

/// Planned-duration bands. Boundaries are at 183, 366 and 731 days; a
/// duration equal to a boundary belongs to the longer band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DurationCategory {
    #[serde(rename = "<6m")]
    UpTo6Months,
    #[serde(rename = "6-12m")]
    SixTo12Months,
    #[serde(rename = "12-24m")]
    TwelveTo24Months,
    #[serde(rename = ">24m")]
    Over24Months,
}

impl DurationCategory {
    pub const ALL: [DurationCategory; 4] = [
        DurationCategory::UpTo6Months,
        DurationCategory::SixTo12Months,
        DurationCategory::TwelveTo24Months,
        DurationCategory::Over24Months,
    ];

    pub fn from_days(days: u32) -> DurationCategory {
        match days {
            0..=182 => DurationCategory::UpTo6Months,
            183..=365 => DurationCategory::SixTo12Months,
            366..=730 => DurationCategory::TwelveTo24Months,
            _ => DurationCategory::Over24Months,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DurationCategory::UpTo6Months => "lt6m",
            DurationCategory::SixTo12Months => "6to12m",
            DurationCategory::TwelveTo24Months => "12to24m",
            DurationCategory::Over24Months => "gt24m",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediatorRecord {
    pub programme_type: ProgrammeType,
    pub planned_duration_days: u32,
    pub actual_duration_days: u32,
}

impl MediatorRecord {
    pub fn duration_category(&self) -> DurationCategory {
        DurationCategory::from_days(self.planned_duration_days)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: String,
    pub d: u8,
    pub t: u8,
    pub covariates: Vec<f64>,
    pub mediator: Option<MediatorRecord>,
    pub outcomes: Vec<f64>,
    pub inclusion_weight: f64,
}

impl Unit {
    pub fn group(&self) -> GroupKey {
        GroupKey::observed(self.d, self.t)
    }
}

/// Upper bound on `actual_duration_days` accepted at load time.
pub const DEFAULT_ACTUAL_DURATION_CAP: u32 = 3650;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Unit>,
    covariate_names: Vec<String>,
    horizon: usize,
}

impl Dataset {
    /// Validates every unit and dataset invariant.
    pub fn new(units: Vec<Unit>, covariate_names: Vec<String>) -> Result<Dataset> {
        Dataset::with_cap(units, covariate_names, DEFAULT_ACTUAL_DURATION_CAP)
    }

    pub fn with_cap(units: Vec<Unit>, covariate_names: Vec<String>, actual_duration_cap: u32) -> Result<Dataset> {
        let k = covariate_names.len();
        let horizon = units.first().map(|u| u.outcomes.len()).unwrap_or(0);
        if horizon == 0 {
            return Err(Error::Schema("dataset needs at least one unit and one outcome month".into()));
        }
        let mut ids = HashSet::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            let row = i + 1;
            let err = |column: &str, message: String| Error::Load { row, column: column.to_string(), message };
            if u.d > 1 {
                return Err(err("d", "invalid treatment indicator".into()));
            }
            if u.t > 1 {
                return Err(err("t", "invalid period indicator".into()));
            }
            if !(u.inclusion_weight.is_finite() && u.inclusion_weight > 0.0) {
                return Err(err("w", "inclusion weight must be positive and finite".into()));
            }
            if u.covariates.len() != k {
                return Err(err("x", format!("expected {k} covariates, found {}", u.covariates.len())));
            }
            if let Some(j) = u.covariates.iter().position(|v| !v.is_finite()) {
                return Err(err(&format!("x_{}", covariate_names[j]), "non-finite covariate".into()));
            }
            if u.outcomes.len() != horizon {
                return Err(err("y", format!("expected {horizon} outcome months, found {}", u.outcomes.len())));
            }
            if let Some(m) = u.outcomes.iter().position(|v| !v.is_finite()) {
                return Err(err(&format!("y_{m}"), "non-finite outcome".into()));
            }
            if let Some(med) = &u.mediator {
                if u.d == 0 {
                    return Err(err("c_type", "mediator present for a non-treated unit".into()));
                }
                if med.planned_duration_days == 0 || med.actual_duration_days == 0 {
                    return Err(err("c_planned", "durations must be positive".into()));
                }
                if med.actual_duration_days > actual_duration_cap {
                    return Err(err("c_actual", format!("actual duration exceeds cap of {actual_duration_cap} days")));
                }
            }
            if !ids.insert(u.id.as_str()) {
                return Err(err("id", format!("duplicate id '{}'", u.id)));
            }
        }
        let ds = Dataset { units, covariate_names, horizon };
        for g in GroupKey::OBSERVABLE {
            if !ds.units.iter().any(|u| u.group() == g) {
                return Err(Error::EmptyCell(g));
            }
        }
        Ok(ds)
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Covariate dimension K (excluding the intercept).
    pub fn k(&self) -> usize {
        self.covariate_names.len()
    }

    /// Outcome horizon H.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn has_mediators(&self) -> bool {
        self.units.iter().any(|u| u.mediator.is_some())
    }

    pub fn group_members(&self, g: GroupKey) -> Result<Vec<usize>> {
        if !g.is_observable() {
            return Err(Error::CounterfactualCell(g));
        }
        Ok(self.units.iter().enumerate().filter(|(_, u)| u.d == g.d && u.t == g.t).map(|(i, _)| i).collect())
    }

    /// Design matrix over all rows.
    pub fn design_matrix(&self, include_mediator_moments: bool) -> Result<DesignMatrix> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.design_matrix_rows(&rows, include_mediator_moments)
    }

    /// Design matrix restricted to `rows`: a constant, the K covariates and,
    /// if requested, three duration-band dummies (reference band `>24m`)
    /// followed by the interaction of each dummy with the planned duration.
    pub fn design_matrix_rows(&self, rows: &[usize], include_mediator_moments: bool) -> Result<DesignMatrix> {
        let mut names = Vec::with_capacity(1 + self.k() + MEDIATOR_COLUMNS);
        names.push("const".to_string());
        names.extend(self.covariate_names.iter().cloned());
        if include_mediator_moments {
            names.extend(mediator_column_names());
        }
        let width = names.len();
        let mut buf = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let u = &self.units[r];
            buf.push(1.0);
            buf.extend_from_slice(&u.covariates);
            if include_mediator_moments {
                let med = u.mediator.as_ref().ok_or_else(|| Error::MissingMediator(u.id.clone()))?;
                buf.extend_from_slice(&mediator_columns(med));
            }
        }
        Ok(DesignMatrix { values: DMatrix::from_row_slice(rows.len(), width, &buf), names, rows: rows.to_vec() })
    }

    /// Bootstrap view: keeps units with a positive draw count and multiplies
    /// their inclusion weight by it. Equivalent to duplicating drawn rows for
    /// every weighted estimator in this crate.
    pub fn with_multiplicities(&self, counts: &[u32]) -> Result<Dataset> {
        if counts.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: counts.len() });
        }
        let units: Vec<Unit> = self
            .units
            .iter()
            .zip(counts)
            .filter(|(_, &c)| c > 0)
            .map(|(u, &c)| {
                let mut u = u.clone();
                u.inclusion_weight *= f64::from(c);
                u
            })
            .collect();
        let ds = Dataset { units, covariate_names: self.covariate_names.clone(), horizon: self.horizon };
        for g in GroupKey::OBSERVABLE {
            if !ds.units.iter().any(|u| u.group() == g) {
                return Err(Error::EmptyCell(g));
            }
        }
        Ok(ds)
    }

    /// Copy with every outcome series transformed by `f` (used for
    /// permutation checks and restricted horizons).
    pub fn map_outcomes(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Dataset> {
        let units = self.units.iter().map(|u| Unit { outcomes: f(&u.outcomes), ..u.clone() }).collect();
        Dataset::new(units, self.covariate_names.clone())
    }

    /// Copy keeping only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Config(format!("unknown covariate '{n}'")))
            })
            .collect::<Result<_>>()?;
        let units = self
            .units
            .iter()
            .map(|u| Unit { covariates: idx.iter().map(|&j| u.covariates[j]).collect(), ..u.clone() })
            .collect();
        Dataset::new(units, names.to_vec())
    }

    /// Copy with inclusion weights multiplied by `factor`.
    pub fn scale_weights(&self, factor: f64) -> Result<Dataset> {
        let units =
            self.units.iter().map(|u| Unit { inclusion_weight: u.inclusion_weight * factor, ..u.clone() }).collect();
        Dataset::new(units, self.covariate_names.clone())
    }
}

pub const MEDIATOR_COLUMNS: usize = 6;

pub fn mediator_column_names() -> Vec<String> {
    let retained = &DurationCategory::ALL[..3];
    let mut names: Vec<String> = retained.iter().map(|c| format!("dur_{}", c.label())).collect();
    names.extend(retained.iter().map(|c| format!("dur_{}_x_days", c.label())));
    names
}

fn mediator_columns(med: &MediatorRecord) -> [f64; MEDIATOR_COLUMNS] {
    let mut out = [0.0; MEDIATOR_COLUMNS];
    let cat = med.duration_category().index();
    if cat < 3 {
        out[cat] = 1.0;
        out[3 + cat] = f64::from(med.planned_duration_days);
    }
    out
}

/// Row-aligned regressor matrix with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
    /// Dataset row index of each matrix row.
    pub rows: Vec<usize>,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvFormat {
    Wide,
    Long,
}

impl FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(CsvFormat::Wide),
            "long" => Ok(CsvFormat::Long),
            other => Err(Error::InvalidInput(format!("unknown CSV format '{other}'"))),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: CsvFormat) -> Result<Dataset> {
    read_dataset(File::open(path)?, format)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>, format: CsvFormat) -> Result<()> {
    let file = File::create(path)?;
    write_dataset_to(ds, file, format)
}

/// Column layout shared by both formats.
struct Header {
    id: usize,
    d: usize,
    t: usize,
    w: usize,
    s: Option<usize>,
    mediator: Option<[usize; 3]>,
    covariates: Vec<(usize, String)>,
    outcomes: Vec<usize>,
    month: Option<usize>,
    y: Option<usize>,
}

fn parse_header(headers: &csv::StringRecord, format: CsvFormat) -> Result<Header> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::Load { row: 0, column: name.to_string(), message: "missing column".into() })
    };
    let mediator = match (find("c_type"), find("c_planned"), find("c_actual")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        (None, None, None) => None,
        _ => {
            return Err(Error::Load {
                row: 0,
                column: "c_type".into(),
                message: "mediator columns c_type, c_planned, c_actual must appear together".into(),
            })
        }
    };
    let covariates: Vec<(usize, String)> =
        headers.iter().enumerate().filter_map(|(i, h)| h.strip_prefix("x_").map(|n| (i, n.to_string()))).collect();
    let mut seen = HashSet::new();
    for (_, n) in &covariates {
        if n.is_empty() || !seen.insert(n.clone()) {
            return Err(Error::Load {
                row: 0,
                column: format!("x_{n}"),
                message: "duplicate or empty covariate name".into(),
            });
        }
    }
    let mut header = Header {
        id: require("id")?,
        d: require("d")?,
        t: require("t")?,
        w: require("w")?,
        s: find("s"),
        mediator,
        covariates,
        outcomes: Vec::new(),
        month: None,
        y: None,
    };
    match format {
        CsvFormat::Wide => {
            let mut months: Vec<(usize, usize)> = Vec::new();
            for (i, h) in headers.iter().enumerate() {
                if let Some(rest) = h.strip_prefix("y_") {
                    let m: usize = rest.parse().map_err(|_| Error::Load {
                        row: 0,
                        column: h.to_string(),
                        message: "outcome columns must be named y_<month>".into(),
                    })?;
                    months.push((m, i));
                }
            }
            months.sort_unstable();
            if months.is_empty() {
                return Err(Error::Load { row: 0, column: "y_0".into(), message: "missing column".into() });
            }
            for (expect, &(m, _)) in months.iter().enumerate() {
                if m != expect {
                    return Err(Error::Load {
                        row: 0,
                        column: format!("y_{expect}"),
                        message: "outcome months must be contiguous from 0".into(),
                    });
                }
            }
            header.outcomes = months.into_iter().map(|(_, i)| i).collect();
        }
        CsvFormat::Long => {
            header.month = Some(require("month")?);
            header.y = Some(require("y")?);
        }
    }
    Ok(header)
}

/// Static (non-outcome) fields of one CSV row.
struct RowFields {
    id: String,
    d: u8,
    t: u8,
    w: f64,
    covariates: Vec<f64>,
    mediator: Option<MediatorRecord>,
}

fn cell(rec: &csv::StringRecord, idx: usize) -> &str {
    rec.get(idx).unwrap_or("").trim()
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64> {
    let raw = cell(rec, idx);
    let v: f64 = raw.parse().map_err(|_| Error::Load {
        row,
        column: column.to_string(),
        message: format!("cannot parse '{raw}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Load { row, column: column.to_string(), message: "non-finite value".into() });
    }
    Ok(v)
}

fn parse_indicator(rec: &csv::StringRecord, idx: usize, row: usize, column: &str, what: &str) -> Result<u8> {
    match cell(rec, idx) {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::Load {
            row,
            column: column.to_string(),
            message: format!("invalid {what} indicator, row {row}"),
        }),
    }
}

fn parse_row_fields(rec: &csv::StringRecord, h: &Header, row: usize) -> Result<RowFields> {
    let id = cell(rec, h.id).to_string();
    if id.is_empty() {
        return Err(Error::Load { row, column: "id".into(), message: "empty id".into() });
    }
    let d = parse_indicator(rec, h.d, row, "d", "treatment")?;
    let t = parse_indicator(rec, h.t, row, "t", "period")?;
    let w = parse_f64(rec, h.w, row, "w")?;
    if w <= 0.0 {
        return Err(Error::Load { row, column: "w".into(), message: "inclusion weight must be positive".into() });
    }
    if let Some(si) = h.s {
        let expected = System::for_period(t).code().to_string();
        let got = cell(rec, si);
        if !got.is_empty() && got != expected {
            return Err(Error::Load {
                row,
                column: "s".into(),
                message: format!("system '{got}' conflicts with period t={t}"),
            });
        }
    }
    let covariates = h
        .covariates
        .iter()
        .map(|(i, name)| parse_f64(rec, *i, row, &format!("x_{name}")))
        .collect::<Result<Vec<_>>>()?;
    let mediator = match h.mediator {
        None => None,
        Some([ti, pi, ai]) => {
            let fields = [cell(rec, ti), cell(rec, pi), cell(rec, ai)];
            let all_empty = fields.iter().all(|f| f.is_empty());
            if d == 0 {
                if !all_empty {
                    return Err(Error::Load {
                        row,
                        column: "c_type".into(),
                        message: "mediator fields must be empty for non-treated units".into(),
                    });
                }
                None
            } else {
                if fields.iter().any(|f| f.is_empty()) {
                    return Err(Error::Load {
                        row,
                        column: "c_type".into(),
                        message: "treated unit lacks a mediator record".into(),
                    });
                }
                let programme_type = fields[0].parse().map_err(|e: Error| Error::Load {
                    row,
                    column: "c_type".into(),
                    message: e.to_string(),
                })?;
                let parse_days = |s: &str, col: &str| -> Result<u32> {
                    s.parse::<u32>().ok().filter(|&v| v > 0).ok_or_else(|| Error::Load {
                        row,
                        column: col.to_string(),
                        message: format!("duration '{s}' must be a positive integer"),
                    })
                };
                Some(MediatorRecord {
                    programme_type,
                    planned_duration_days: parse_days(fields[1], "c_planned")?,
                    actual_duration_days: parse_days(fields[2], "c_actual")?,
                })
            }
        }
    };
    Ok(RowFields { id, d, t, w, covariates, mediator })
}

pub fn read_dataset<R: Read>(reader: R, format: CsvFormat) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let h = parse_header(&headers, format)?;
    let names: Vec<String> = h.covariates.iter().map(|(_, n)| n.clone()).collect();

    let units = match format {
        CsvFormat::Wide => {
            let mut units = Vec::new();
            for (i, rec) in rdr.records().enumerate() {
                let row = i + 1;
                let rec = rec?;
                let f = parse_row_fields(&rec, &h, row)?;
                let outcomes = h
                    .outcomes
                    .iter()
                    .enumerate()
                    .map(|(m, &ci)| parse_f64(&rec, ci, row, &format!("y_{m}")))
                    .collect::<Result<Vec<_>>>()?;
                units.push(Unit {
                    id: f.id,
                    d: f.d,
                    t: f.t,
                    covariates: f.covariates,
                    mediator: f.mediator,
                    outcomes,
                    inclusion_weight: f.w,
                });
            }
            units
        }
        CsvFormat::Long => read_long_rows(&mut rdr, &h)?,
    };
    Dataset::new(units, names)
}

fn read_long_rows<R: Read>(rdr: &mut csv::Reader<R>, h: &Header) -> Result<Vec<Unit>> {
    let month_col = h.month.expect("long header has month");
    let y_col = h.y.expect("long header has y");
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, (RowFields, usize, Vec<Option<f64>>)> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let f = parse_row_fields(&rec, h, row)?;
        let raw_month = cell(&rec, month_col);
        let month: usize = raw_month.parse().map_err(|_| Error::Load {
            row,
            column: "month".into(),
            message: format!("invalid month '{raw_month}'"),
        })?;
        let y = parse_f64(&rec, y_col, row, "y")?;
        let entry = by_id.entry(f.id.clone()).or_insert_with(|| {
            order.push(f.id.clone());
            (
                RowFields {
                    id: f.id.clone(),
                    d: f.d,
                    t: f.t,
                    w: f.w,
                    covariates: f.covariates.clone(),
                    mediator: f.mediator.clone(),
                },
                row,
                Vec::new(),
            )
        });
        let first = &entry.0;
        if first.d != f.d
            || first.t != f.t
            || first.w.to_bits() != f.w.to_bits()
            || first.covariates.iter().zip(&f.covariates).any(|(a, b)| a.to_bits() != b.to_bits())
            || first.mediator != f.mediator
        {
            return Err(Error::Load {
                row,
                column: "id".into(),
                message: format!("unit '{}' has inconsistent static fields (first seen row {})", f.id, entry.1),
            });
        }
        let series = &mut entry.2;
        if series.len() <= month {
            series.resize(month + 1, None);
        }
        if series[month].replace(y).is_some() {
            return Err(Error::Load {
                row,
                column: "month".into(),
                message: format!("duplicate month {month} for unit '{}'", f.id),
            });
        }
    }
    let horizon = by_id.values().map(|e| e.2.len()).max().unwrap_or(0);
    order
        .into_iter()
        .map(|id| {
            let (f, first_row, series) = by_id.remove(&id).expect("id recorded");
            let outcomes = (0..horizon)
                .map(|m| {
                    series.get(m).copied().flatten().ok_or_else(|| Error::Load {
                        row: first_row,
                        column: "month".into(),
                        message: format!("unit '{id}' is missing month {m}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Unit {
                id: f.id,
                d: f.d,
                t: f.t,
                covariates: f.covariates,
                mediator: f.mediator,
                outcomes,
                inclusion_weight: f.w,
            })
        })
        .collect()
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, writer: W, format: CsvFormat) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let with_mediator = ds.has_mediators();
    let mut header: Vec<String> = ["id", "d", "t", "w"].iter().map(|s| s.to_string()).collect();
    if with_mediator {
        header.extend(["c_type", "c_planned", "c_actual"].iter().map(|s| s.to_string()));
    }
    header.extend(ds.covariate_names.iter().map(|n| format!("x_{n}")));
    match format {
        CsvFormat::Wide => header.extend((0..ds.horizon).map(|m| format!("y_{m}"))),
        CsvFormat::Long => header.extend(["month".to_string(), "y".to_string()]),
    }
    wtr.write_record(&header)?;

    for u in &ds.units {
        let mut stat: Vec<String> =
            vec![u.id.clone(), u.d.to_string(), u.t.to_string(), u.inclusion_weight.to_string()];
        if with_mediator {
            match &u.mediator {
                Some(m) => stat.extend([
                    m.programme_type.as_str().to_string(),
                    m.planned_duration_days.to_string(),
                    m.actual_duration_days.to_string(),
                ]),
                None => stat.extend([String::new(), String::new(), String::new()]),
            }
        }
        stat.extend(u.covariates.iter().map(|v| v.to_string()));
        match format {
            CsvFormat::Wide => {
                let mut rec = stat;
                rec.extend(u.outcomes.iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
            CsvFormat::Long => {
                for (m, y) in u.outcomes.iter().enumerate() {
                    let mut rec = stat.clone();
                    rec.push(m.to_string());
                    rec.push(y.to_string());
                    wtr.write_record(&rec)?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
