//! CSV formats read and written by the simulator and the CLI.
//!
//! Generation input: `hour,producer_id,forecast_mwh,actual_mwh`.
//! Price input: `hour,p_f,p_rb,p_rs`.
//! Contract input: `hour,producer_id,contract_mwh`.
//! Single-hour snapshot: `producer_id,contract_mwh,actual_mwh,p_f,p_rb,p_rs`.
//! Payoffs to audit: any CSV with `producer_id` and `payoff` columns.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::allocation::PayoffAllocation;
use crate::error::{Error, Result};
use crate::market::{PriceTriple, ScenarioSnapshot};
use crate::simulator::{
    compare_producer_ids, GenerationData, HourlyContracts, HourlyPrices, Observation,
    SimulationReport,
};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Hour column value: an integer index or an ISO-8601 timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum HourKey {
    Index(i64),
    Timestamp(NaiveDateTime),
}

impl HourKey {
    fn parse(raw: &str) -> Option<Self> {
        if let Ok(i) = raw.parse::<i64>() {
            return Some(Self::Index(i));
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
            return Some(Self::Timestamp(dt.naive_utc()));
        }
        [
            "%Y-%m-%dT%H:%M:%S",
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M:%S",
            "%Y-%m-%d %H:%M",
        ]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(Self::Timestamp)
    }

    fn label(&self) -> String {
        match self {
            Self::Index(i) => i.to_string(),
            Self::Timestamp(t) => t.format(TIMESTAMP_FORMAT).to_string(),
        }
    }

    fn same_kind(&self, other: &Self) -> bool {
        matches!(
            (self, other),
            (Self::Index(_), Self::Index(_)) | (Self::Timestamp(_), Self::Timestamp(_))
        )
    }
}

/// Canonical label for a raw hour value, so that `2004-02-01 00:00` and
/// `2004-02-01T00:00:00Z` name the same hour.
pub fn canonical_hour(raw: &str) -> Option<String> {
    HourKey::parse(raw.trim()).map(|k| k.label())
}

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

struct CsvRows<R: Read> {
    reader: csv::Reader<R>,
    path: String,
}

impl<R: Read> CsvRows<R> {
    fn new(source: R, path: &str, expected: &[&str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(source);
        let headers = reader.headers()?.clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(parse_err(
                path,
                1,
                format!(
                    "expected header `{}`, got `{}`",
                    expected.join(","),
                    got.join(",")
                ),
            ));
        }
        Ok(Self {
            reader,
            path: path.to_string(),
        })
    }

    /// All data rows with their 1-based line numbers.
    fn records(&mut self, width: usize) -> Result<Vec<(u64, csv::StringRecord)>> {
        let mut out = Vec::new();
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(&self.path, line, e.to_string())
            })?;
            if !more {
                return Ok(out);
            }
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != width {
                return Err(parse_err(
                    &self.path,
                    line,
                    format!("expected {width} fields, got {}", record.len()),
                ));
            }
            out.push((line, record.clone()));
        }
    }

    fn number(&self, line: u64, record: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
        record[idx]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                parse_err(
                    &self.path,
                    line,
                    format!("{name} must be a finite number, got {:?}", &record[idx]),
                )
            })
    }

    fn hour(&self, line: u64, raw: &str) -> Result<HourKey> {
        HourKey::parse(raw).ok_or_else(|| {
            parse_err(
                &self.path,
                line,
                format!("hour must be an integer or an ISO-8601 timestamp, got {raw:?}"),
            )
        })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Reads a generation CSV from a file.
pub fn load_timeseries(path: &Path) -> Result<GenerationData> {
    parse_timeseries(open(path)?, &path.display().to_string())
}

/// Parses generation rows into a dense hour axis.
///
/// The hour axis runs from the first to the last hour in the file in steps
/// of one hour; an hour that no producer reports is an error. A producer
/// missing an hour that others report is kept as a gap.
pub fn parse_timeseries<R: Read>(source: R, path: &str) -> Result<GenerationData> {
    let mut rows = CsvRows::new(
        source,
        path,
        &["hour", "producer_id", "forecast_mwh", "actual_mwh"],
    )?;
    let mut entries: BTreeMap<(HourKey, String), Observation> = BTreeMap::new();
    let mut first_kind: Option<HourKey> = None;
    for (line, rec) in rows.records(4)? {
        let hour = rows.hour(line, &rec[0])?;
        match first_kind {
            None => first_kind = Some(hour),
            Some(k) if !k.same_kind(&hour) => {
                return Err(parse_err(path, line, "mixes integer hours and timestamps"));
            }
            _ => {}
        }
        let producer = rec[1].to_string();
        if producer.is_empty() {
            return Err(parse_err(path, line, "empty producer_id"));
        }
        let forecast = rows.number(line, &rec, 2, "forecast_mwh")?;
        let actual = rows.number(line, &rec, 3, "actual_mwh")?;
        if forecast < 0.0 || actual < 0.0 {
            return Err(parse_err(
                path,
                line,
                format!("negative generation (forecast {forecast}, actual {actual})"),
            ));
        }
        let key = (hour, producer);
        if entries.contains_key(&key) {
            return Err(parse_err(
                path,
                line,
                format!(
                    "duplicate entry for hour {} producer {}",
                    key.0.label(),
                    key.1
                ),
            ));
        }
        entries.insert(key, Observation { forecast, actual });
    }

    let mut producer_ids: Vec<String> = entries.keys().map(|(_, p)| p.clone()).collect();
    producer_ids.sort_by(|a, b| compare_producer_ids(a, b));
    producer_ids.dedup();
    let hour_keys: Vec<HourKey> = {
        let mut keys: Vec<HourKey> = entries.keys().map(|(h, _)| *h).collect();
        keys.dedup();
        keys
    };
    let axis = match (hour_keys.first(), hour_keys.last()) {
        (Some(&first), Some(&last)) => hour_axis(first, last, path)?,
        _ => Vec::new(),
    };
    if axis.len() != hour_keys.len() {
        let present: std::collections::BTreeSet<HourKey> = hour_keys.iter().copied().collect();
        let missing = axis.iter().find(|h| !present.contains(h));
        return Err(parse_err(
            path,
            0,
            match missing {
                Some(h) => format!("missing hour {} (no producer reports it)", h.label()),
                None => "timestamps are not aligned to whole hours".to_string(),
            },
        ));
    }
    let producer_pos: HashMap<&str, usize> = producer_ids
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let hour_pos: HashMap<HourKey, usize> = axis.iter().enumerate().map(|(i, h)| (*h, i)).collect();
    let mut series = vec![vec![None; axis.len()]; producer_ids.len()];
    for ((hour, producer), obs) in &entries {
        series[producer_pos[producer.as_str()]][hour_pos[hour]] = Some(*obs);
    }
    Ok(GenerationData {
        hours: axis.iter().map(HourKey::label).collect(),
        producer_ids,
        series,
    })
}

fn hour_axis(first: HourKey, last: HourKey, path: &str) -> Result<Vec<HourKey>> {
    match (first, last) {
        (HourKey::Index(a), HourKey::Index(b)) => Ok((a..=b).map(HourKey::Index).collect()),
        (HourKey::Timestamp(a), HourKey::Timestamp(b)) => {
            let span = (b - a).num_hours();
            if span > 10_000_000 {
                return Err(parse_err(path, 0, "hour range too long"));
            }
            Ok((0..=span)
                .map(|k| HourKey::Timestamp(a + Duration::hours(k)))
                .collect())
        }
        _ => Err(parse_err(path, 0, "mixes integer hours and timestamps")),
    }
}

pub fn write_timeseries<W: Write>(data: &GenerationData, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["hour", "producer_id", "forecast_mwh", "actual_mwh"])?;
    for (h, hour) in data.hours.iter().enumerate() {
        for (p, id) in data.producer_ids.iter().enumerate() {
            if let Some(obs) = data.series[p][h] {
                w.write_record([
                    hour.as_str(),
                    id.as_str(),
                    &obs.forecast.to_string(),
                    &obs.actual.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-hour prices, keyed by canonical hour label. Ordering of the real-time
/// prices is validated when an hour is simulated.
pub fn load_prices(path: &Path) -> Result<HourlyPrices> {
    parse_prices(open(path)?, &path.display().to_string())
}

pub fn parse_prices<R: Read>(source: R, path: &str) -> Result<HourlyPrices> {
    let mut rows = CsvRows::new(source, path, &["hour", "p_f", "p_rb", "p_rs"])?;
    let mut prices = HashMap::new();
    for (line, rec) in rows.records(4)? {
        let hour = rows.hour(line, &rec[0])?.label();
        let triple = (
            rows.number(line, &rec, 1, "p_f")?,
            rows.number(line, &rec, 2, "p_rb")?,
            rows.number(line, &rec, 3, "p_rs")?,
        );
        if prices.insert(hour.clone(), triple).is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate prices for hour {hour}"),
            ));
        }
    }
    Ok(HourlyPrices(prices))
}

pub fn load_contracts(path: &Path) -> Result<HourlyContracts> {
    parse_contracts(open(path)?, &path.display().to_string())
}

pub fn parse_contracts<R: Read>(source: R, path: &str) -> Result<HourlyContracts> {
    let mut rows = CsvRows::new(source, path, &["hour", "producer_id", "contract_mwh"])?;
    let mut contracts = HashMap::new();
    for (line, rec) in rows.records(3)? {
        let hour = rows.hour(line, &rec[0])?.label();
        let value = rows.number(line, &rec, 2, "contract_mwh")?;
        if value < 0.0 {
            return Err(parse_err(path, line, format!("negative contract {value}")));
        }
        let key = (hour, rec[1].to_string());
        if contracts.contains_key(&key) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate contract for hour {} producer {}", key.0, key.1),
            ));
        }
        contracts.insert(key, value);
    }
    Ok(HourlyContracts(contracts))
}

/// Single-hour snapshot; every row must carry the same prices.
pub fn load_snapshot(path: &Path) -> Result<ScenarioSnapshot> {
    parse_snapshot(open(path)?, &path.display().to_string())
}

pub fn parse_snapshot<R: Read>(source: R, path: &str) -> Result<ScenarioSnapshot> {
    let mut rows = CsvRows::new(
        source,
        path,
        &[
            "producer_id",
            "contract_mwh",
            "actual_mwh",
            "p_f",
            "p_rb",
            "p_rs",
        ],
    )?;
    let mut ids: Vec<String> = Vec::new();
    let mut contracts = Vec::new();
    let mut realizations = Vec::new();
    let mut prices: Option<(f64, f64, f64)> = None;
    for (line, rec) in rows.records(6)? {
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty producer_id"));
        }
        if ids.contains(&id) {
            return Err(parse_err(path, line, format!("duplicate producer {id}")));
        }
        let c = rows.number(line, &rec, 1, "contract_mwh")?;
        let x = rows.number(line, &rec, 2, "actual_mwh")?;
        if c < 0.0 || x < 0.0 {
            return Err(parse_err(
                path,
                line,
                format!("negative quantity (contract {c}, actual {x})"),
            ));
        }
        let triple = (
            rows.number(line, &rec, 3, "p_f")?,
            rows.number(line, &rec, 4, "p_rb")?,
            rows.number(line, &rec, 5, "p_rs")?,
        );
        match prices {
            None => prices = Some(triple),
            Some(p) if p != triple => {
                return Err(parse_err(path, line, "prices differ from the first row"));
            }
            _ => {}
        }
        ids.push(id);
        contracts.push(c);
        realizations.push(x);
    }
    let (f, b, s) = prices.ok_or_else(|| parse_err(path, 1, "snapshot has no producers"))?;
    let prices = PriceTriple::new(f, b, s).map_err(|e| parse_err(path, 2, e.to_string()))?;
    ScenarioSnapshot::new(ids, contracts, realizations, prices)
}

/// Payoffs aligned with the snapshot's producer order.
pub fn load_payoffs(path: &Path, snapshot: &ScenarioSnapshot) -> Result<Vec<f64>> {
    parse_payoffs(open(path)?, &path.display().to_string(), snapshot)
}

pub fn parse_payoffs<R: Read>(
    source: R,
    path: &str,
    snapshot: &ScenarioSnapshot,
) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing `{name}` column")))
    };
    let (id_col, payoff_col) = (column("producer_id")?, column("payoff")?);
    let mut found: HashMap<String, f64> = HashMap::new();
    for record in reader.records() {
        let record = record
            .map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[id_col].to_string();
        let value = record[payoff_col]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                parse_err(path, line, format!("bad payoff {:?}", &record[payoff_col]))
            })?;
        if found.insert(id.clone(), value).is_some() {
            return Err(parse_err(path, line, format!("duplicate producer {id}")));
        }
    }
    if found.len() != snapshot.len() {
        return Err(parse_err(
            path,
            0,
            format!("{} payoffs for {} producers", found.len(), snapshot.len()),
        ));
    }
    snapshot
        .producer_ids()
        .iter()
        .map(|id| {
            found
                .get(id)
                .copied()
                .ok_or_else(|| parse_err(path, 0, format!("no payoff for producer {id}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub producer_id: String,
    pub contract_mwh: f64,
    pub actual_mwh: f64,
    pub payoff: f64,
    pub separate_payoff: f64,
}

#[allow(clippy::needless_range_loop)]
pub fn write_allocation<W: Write>(
    snapshot: &ScenarioSnapshot,
    alloc: &PayoffAllocation,
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let separate = snapshot.separate_payoffs();
    for i in 0..snapshot.len() {
        w.serialize(AllocationRow {
            producer_id: snapshot.producer_ids()[i].clone(),
            contract_mwh: snapshot.contracts()[i],
            actual_mwh: snapshot.realizations()[i],
            payoff: alloc.payoffs[i],
            separate_payoff: separate[i],
        })?;
    }
    if snapshot.is_empty() {
        w.write_record([
            "producer_id",
            "contract_mwh",
            "actual_mwh",
            "payoff",
            "separate_payoff",
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of `hourly.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyRow {
    pub hour: String,
    pub producer_id: String,
    pub contract_mwh: f64,
    pub actual_mwh: f64,
    pub payoff_proposed: f64,
    pub payoff_separate: f64,
    pub aggregator_payoff: f64,
    pub excess_profit: f64,
    pub marginal_price: f64,
    pub budget_balance: bool,
    pub individual_rationality: bool,
    pub fairness: bool,
    pub no_exploitation: bool,
    /// Empty when core checking was skipped.
    pub in_core: Option<bool>,
}

const HOURLY_HEADER: [&str; 14] = [
    "hour",
    "producer_id",
    "contract_mwh",
    "actual_mwh",
    "payoff_proposed",
    "payoff_separate",
    "aggregator_payoff",
    "excess_profit",
    "marginal_price",
    "budget_balance",
    "individual_rationality",
    "fairness",
    "no_exploitation",
    "in_core",
];

/// One row of `summary.csv`. The ex-ante column is a placeholder and always `NA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub producer_id: String,
    pub payoff_ex_ante: String,
    pub payoff_proposed: f64,
    pub payoff_separate: f64,
}

const SUMMARY_HEADER: [&str; 4] = [
    "producer_id",
    "payoff_ex_ante",
    "payoff_proposed",
    "payoff_separate",
];

/// Row label of the grand total in `summary.csv`.
pub const TOTAL_ROW: &str = "TOTAL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub hour: String,
    pub payoff_proposed: f64,
    pub payoff_separate: f64,
}

const TRACE_HEADER: [&str; 3] = ["hour", "payoff_proposed", "payoff_separate"];

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(File::create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// File-name-safe form of a producer id.
pub fn trace_file_name(producer_id: &str) -> String {
    let safe: String = producer_id
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' {
                ch
            } else {
                '_'
            }
        })
        .collect();
    format!("trace_{safe}.csv")
}

pub fn hourly_rows(report: &SimulationReport) -> Vec<HourlyRow> {
    report
        .records
        .iter()
        .flat_map(|rec| {
            rec.producers.iter().map(move |p| HourlyRow {
                hour: rec.hour.clone(),
                producer_id: p.producer_id.clone(),
                contract_mwh: p.contract,
                actual_mwh: p.realization,
                payoff_proposed: p.payoff_proposed,
                payoff_separate: p.payoff_separate,
                aggregator_payoff: rec.aggregator_payoff,
                excess_profit: rec.excess_profit,
                marginal_price: rec.marginal_price,
                budget_balance: rec.flags.budget_balance,
                individual_rationality: rec.flags.individual_rationality,
                fairness: rec.flags.fairness,
                no_exploitation: rec.flags.no_exploitation,
                in_core: rec.flags.in_core,
            })
        })
        .collect()
}

pub fn summary_rows(report: &SimulationReport) -> Vec<SummaryRow> {
    if report.producer_ids.is_empty() {
        return Vec::new();
    }
    let mut rows: Vec<SummaryRow> = report
        .producer_ids
        .iter()
        .enumerate()
        .map(|(i, id)| SummaryRow {
            producer_id: id.clone(),
            payoff_ex_ante: "NA".into(),
            payoff_proposed: report.totals_proposed[i],
            payoff_separate: report.totals_separate[i],
        })
        .collect();
    rows.push(SummaryRow {
        producer_id: TOTAL_ROW.into(),
        payoff_ex_ante: "NA".into(),
        payoff_proposed: report.grand_total_proposed,
        payoff_separate: report.grand_total_separate,
    });
    rows
}

/// Writes `hourly.csv`, `summary.csv` and one `trace_<producer>.csv` per
/// producer into `out_dir`, returning the paths written.
pub fn emit_report(report: &SimulationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let hourly = out_dir.join("hourly.csv");
    write_rows(&hourly, &HOURLY_HEADER, &hourly_rows(report))?;
    written.push(hourly);

    let summary = out_dir.join("summary.csv");
    write_rows(&summary, &SUMMARY_HEADER, &summary_rows(report))?;
    written.push(summary);

    for (i, id) in report.producer_ids.iter().enumerate() {
        let rows: Vec<TraceRow> = report
            .records
            .iter()
            .map(|rec| TraceRow {
                hour: rec.hour.clone(),
                payoff_proposed: rec.producers[i].payoff_proposed,
                payoff_separate: rec.producers[i].payoff_separate,
            })
            .collect();
        let path = out_dir.join(trace_file_name(id));
        write_rows(&path, &TRACE_HEADER, &rows)?;
        written.push(path);
    }
    Ok(written)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| {
            parse_err(
                &path.display().to_string(),
                e.position().map_or(0, |p| p.line()),
                e.to_string(),
            )
        })?);
    }
    Ok(rows)
}

pub fn read_hourly(path: &Path) -> Result<Vec<HourlyRow>> {
    read_rows(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_rows(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_rows(path)
}
