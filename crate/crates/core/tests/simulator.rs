mod common;

use std::collections::HashMap;
use std::fs;

use common::close;
use rpp_pam::simulator::io::{
    parse_timeseries, read_hourly, read_summary, read_trace, trace_file_name, write_timeseries,
    TOTAL_ROW,
};
use rpp_pam::simulator::synthetic::{generate, SyntheticSpec};
use rpp_pam::simulator::{
    emit_report, run_simulation, ContractMode, GenerationData, HourlyContracts, HourlyPrices,
    Observation, PriceSource, SimulationConfig, SimulationReport,
};
use rpp_pam::{Error, PriceTriple};

fn prices() -> PriceSource {
    PriceSource::Constant(PriceTriple::new(10.0, 15.0, 5.0).unwrap())
}

fn data_from(rows: &[(&str, &str, f64, f64)]) -> GenerationData {
    let mut text = String::from("hour,producer_id,forecast_mwh,actual_mwh\n");
    for (h, p, f, a) in rows {
        text.push_str(&format!("{h},{p},{f},{a}\n"));
    }
    parse_timeseries(text.as_bytes(), "inline.csv").unwrap()
}

#[test]
fn single_producer_single_hour_earns_its_own_payoff() {
    let data = data_from(&[("0", "1", 100.0, 80.0)]);
    let mut config = SimulationConfig::new(prices(), 0..0, 0..1);
    config.contract_mode = ContractMode::Fixed(100.0);
    let report = run_simulation(&config, &data).unwrap();
    assert_eq!(report.records.len(), 1);
    let p = &report.records[0].producers[0];
    assert_eq!(p.payoff_separate, 700.0);
    assert_eq!(p.payoff_proposed, 700.0);
    assert_eq!(report.total_excess_profit, 0.0);
    assert_eq!(report.violations.total(), 0);
}

#[test]
fn two_producers_share_two_hundred_of_excess_profit() {
    let data = data_from(&[("0", "1", 0.0, 80.0), ("0", "2", 0.0, 70.0)]);
    let table = HashMap::from([
        (("0".to_string(), "1".to_string()), 100.0),
        (("0".to_string(), "2".to_string()), 50.0),
    ]);
    let mut config = SimulationConfig::new(prices(), 0..0, 0..1);
    config.contract_mode = ContractMode::FromFile(HourlyContracts(table));
    let report = run_simulation(&config, &data).unwrap();
    let rec = &report.records[0];
    assert_eq!(rec.excess_profit, 200.0);
    assert_eq!(rec.aggregator_payoff, 1500.0);
    let proposed: Vec<f64> = rec.producers.iter().map(|p| p.payoff_proposed).collect();
    assert_eq!(proposed, vec![800.0, 700.0]);
    assert_eq!(
        report.grand_total_proposed - report.grand_total_separate,
        200.0
    );
}

#[test]
fn newsvendor_run_has_no_violations_and_gains_excess_profit() {
    let data = generate(&SyntheticSpec::new(6, 300, 17));
    let config = SimulationConfig::new(prices(), 0..100, 100..300);
    let report = run_simulation(&config, &data).unwrap();
    assert_eq!(report.records.len(), 200);
    assert_eq!(report.violations.total(), 0);
    assert!(report.records.iter().all(|r| r.flags.in_core == Some(true)));
    assert!(report.grand_total_proposed > report.grand_total_separate);
    let gap = report.grand_total_proposed - report.grand_total_separate;
    assert!(close(gap, report.total_excess_profit));
    for (i, (a, b)) in report
        .totals_proposed
        .iter()
        .zip(&report.totals_separate)
        .enumerate()
    {
        assert!(
            a >= b,
            "producer {} loses by joining",
            report.producer_ids[i]
        );
    }
}

#[test]
fn hours_are_independent_of_grouping() {
    let data = generate(&SyntheticSpec::new(4, 120, 3));
    let whole = run_simulation(&SimulationConfig::new(prices(), 0..40, 40..120), &data).unwrap();
    let first = run_simulation(&SimulationConfig::new(prices(), 0..40, 40..70), &data).unwrap();
    let second = run_simulation(&SimulationConfig::new(prices(), 0..40, 70..120), &data).unwrap();
    let stitched: Vec<_> = first
        .records
        .iter()
        .chain(&second.records)
        .cloned()
        .collect();
    assert_eq!(whole.records, stitched);
    assert_eq!(
        whole,
        run_simulation(&SimulationConfig::new(prices(), 0..40, 40..120), &data).unwrap()
    );
}

#[test]
fn hours_with_missing_producers_are_skipped() {
    let data = data_from(&[
        ("0", "1", 10.0, 9.0),
        ("0", "2", 10.0, 12.0),
        ("1", "1", 10.0, 11.0),
        ("1", "2", 10.0, 8.0),
        ("2", "1", 10.0, 10.0),
        ("3", "1", 10.0, 7.0),
        ("3", "2", 10.0, 13.0),
    ]);
    let config = SimulationConfig::new(prices(), 0..2, 2..4);
    let report = run_simulation(&config, &data).unwrap();
    assert_eq!(report.skipped_hours, vec!["2".to_string()]);
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].hour, "3");
}

#[test]
fn per_hour_prices_are_validated() {
    let data = data_from(&[("0", "1", 10.0, 9.0), ("1", "1", 10.0, 11.0)]);
    let table = HashMap::from([
        ("0".to_string(), (10.0, 15.0, 5.0)),
        ("1".to_string(), (10.0, 5.0, 15.0)),
    ]);
    let mut config = SimulationConfig::new(PriceSource::PerHour(HourlyPrices(table)), 0..0, 0..2);
    config.contract_mode = ContractMode::Fixed(10.0);
    let err = run_simulation(&config, &data).unwrap_err();
    assert!(
        matches!(err, Error::Simulation(ref m) if m.starts_with("hour 1:")),
        "{err}"
    );
}

#[test]
fn training_must_precede_simulation() {
    let data = generate(&SyntheticSpec::new(2, 20, 1));
    assert!(run_simulation(&SimulationConfig::new(prices(), 0..10, 5..20), &data).is_err());
    assert!(run_simulation(&SimulationConfig::new(prices(), 0..10, 10..21), &data).is_err());
}

#[test]
fn empty_report_writes_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let written = emit_report(&SimulationReport::default(), dir.path()).unwrap();
    assert_eq!(written.len(), 2);
    for path in &written {
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1, "{}", path.display());
    }
}

#[test]
fn summary_equals_resummed_hourly_rows() {
    let data = generate(&SyntheticSpec::new(3, 60, 8));
    let report = run_simulation(&SimulationConfig::new(prices(), 0..24, 24..60), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();

    let hourly = fs::read_to_string(dir.path().join("hourly.csv")).unwrap();
    let mut lines = hourly.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (id, prop, sep) = (
        col("producer_id"),
        col("payoff_proposed"),
        col("payoff_separate"),
    );
    let mut sums: HashMap<String, (f64, f64)> = HashMap::new();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let e = sums.entry(f[id].to_string()).or_default();
        e.0 += f[prop].parse::<f64>().unwrap();
        e.1 += f[sep].parse::<f64>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, 3 * 36);

    let summary = read_summary(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 4);
    let (mut all_prop, mut all_sep) = (0.0, 0.0);
    for row in &summary {
        if row.producer_id == TOTAL_ROW {
            assert!(close(row.payoff_proposed, all_prop));
            assert!(close(row.payoff_separate, all_sep));
            continue;
        }
        let (p, s) = sums[&row.producer_id];
        assert!(close(row.payoff_proposed, p));
        assert!(close(row.payoff_separate, s));
        all_prop += p;
        all_sep += s;
    }
}

#[test]
fn emitted_report_round_trips() {
    let data = generate(&SyntheticSpec::new(3, 50, 21));
    let report = run_simulation(&SimulationConfig::new(prices(), 0..20, 20..50), &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();

    let hourly = read_hourly(&dir.path().join("hourly.csv")).unwrap();
    let flat: Vec<_> = report
        .records
        .iter()
        .flat_map(|r| r.producers.iter().map(move |p| (r, p)))
        .collect();
    assert_eq!(hourly.len(), flat.len());
    for (row, (rec, p)) in hourly.iter().zip(flat) {
        assert_eq!(row.hour, rec.hour);
        assert_eq!(row.producer_id, p.producer_id);
        assert!(close(row.payoff_proposed, p.payoff_proposed));
        assert!(close(row.payoff_separate, p.payoff_separate));
        assert!(close(row.excess_profit, rec.excess_profit));
        assert_eq!(row.in_core, rec.flags.in_core);
    }
    for (i, id) in report.producer_ids.iter().enumerate() {
        let trace = read_trace(&dir.path().join(trace_file_name(id))).unwrap();
        assert_eq!(trace.len(), report.records.len());
        for (row, rec) in trace.iter().zip(&report.records) {
            assert!(close(row.payoff_proposed, rec.producers[i].payoff_proposed));
        }
    }
}

#[test]
fn generation_csv_round_trips() {
    let data = generate(&SyntheticSpec::new(3, 30, 2));
    let mut buf = Vec::new();
    write_timeseries(&data, &mut buf).unwrap();
    let back = parse_timeseries(buf.as_slice(), "buf").unwrap();
    assert_eq!(back.hours, data.hours);
    assert_eq!(back.producer_ids, data.producer_ids);
    for (a, b) in back
        .series
        .iter()
        .flatten()
        .zip(data.series.iter().flatten())
    {
        let (
            Some(Observation {
                forecast: fa,
                actual: xa,
            }),
            Some(Observation {
                forecast: fb,
                actual: xb,
            }),
        ) = (a, b)
        else {
            panic!("synthetic data has no gaps");
        };
        assert!(close(*fa, *fb) && close(*xa, *xb));
    }
}
