//! Hourly two-settlement simulation of an aggregation.
//!
//! Every simulated hour each producer commits a day-ahead contract, the
//! aggregator commits the sum, realized generation is settled in real time
//! and the aggregator's payoff is split with [`allocate`]. The stand-alone
//! payoffs are computed alongside for comparison, and the five ex-post
//! properties are audited per hour.
//!
//! Hours are independent: contracts depend only on the hour's forecast and
//! a forecast-error spread fitted once on the training window.

pub mod io;
pub mod synthetic;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::Range;

use rayon::prelude::*;

use crate::allocation::{
    allocate, evaluate_properties, CoreCheckMode, PamConfig, DEFAULT_EXHAUSTIVE_LIMIT,
    DEFAULT_SAMPLED_DRAWS,
};
use crate::contracts::{optimal_contract, Bounds, GenerationDistribution, TrainingWindow};
use crate::error::{Error, Result};
use crate::market::{aggregator_payoff, excess_profit, PriceTriple, ScenarioSnapshot};

pub use io::emit_report;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub forecast: f64,
    pub actual: f64,
}

/// Forecast and actual generation per producer on a contiguous hour axis.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationData {
    /// Canonical hour labels in chronological order.
    pub hours: Vec<String>,
    pub producer_ids: Vec<String>,
    /// `series[producer][hour]`; `None` where the producer reported nothing.
    pub series: Vec<Vec<Option<Observation>>>,
}

impl GenerationData {
    pub fn num_hours(&self) -> usize {
        self.hours.len()
    }

    pub fn num_producers(&self) -> usize {
        self.producer_ids.len()
    }

    pub fn hour_index(&self, label: &str) -> Option<usize> {
        self.hours.iter().position(|h| h == label)
    }
}

/// Orders numeric ids numerically, everything else lexicographically.
pub fn compare_producer_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

/// Raw `(p_f, p_rb, p_rs)` per canonical hour label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HourlyPrices(pub HashMap<String, (f64, f64, f64)>);

/// Contract per `(hour label, producer id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HourlyContracts(pub HashMap<(String, String), f64>);

#[derive(Debug, Clone, PartialEq)]
pub enum PriceSource {
    Constant(PriceTriple),
    PerHour(HourlyPrices),
}

impl PriceSource {
    fn for_hour(&self, label: &str) -> Result<PriceTriple> {
        match self {
            Self::Constant(p) => Ok(*p),
            Self::PerHour(table) => {
                let &(f, b, s) = table.0.get(label).ok_or_else(|| {
                    Error::Simulation(format!("hour {label}: no prices supplied"))
                })?;
                PriceTriple::new(f, b, s)
                    .map_err(|e| Error::Simulation(format!("hour {label}: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContractMode {
    /// News-vendor optimum under a normal model fitted on the training window.
    Newsvendor,
    /// Same contract for every producer and hour.
    Fixed(f64),
    FromFile(HourlyContracts),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub prices: PriceSource,
    pub pam: PamConfig,
    /// Hour positions (0-based, half-open) used to fit forecast-error spread.
    pub train: Range<usize>,
    /// Hour positions simulated. Must start at or after `train.end`.
    pub sim: Range<usize>,
    pub contract_mode: ContractMode,
    pub check_core: bool,
    pub exhaustive_limit: usize,
    pub sampled_draws: usize,
    pub rng_seed: u64,
    /// Truncate the generation model at zero.
    pub truncate: bool,
    /// Capacity applied to every producer's generation model.
    pub capacity: Option<f64>,
}

impl SimulationConfig {
    pub fn new(prices: PriceSource, train: Range<usize>, sim: Range<usize>) -> Self {
        Self {
            prices,
            pam: PamConfig::default(),
            train,
            sim,
            contract_mode: ContractMode::Newsvendor,
            check_core: true,
            exhaustive_limit: DEFAULT_EXHAUSTIVE_LIMIT,
            sampled_draws: DEFAULT_SAMPLED_DRAWS,
            rng_seed: 0,
            truncate: true,
            capacity: None,
        }
    }

    fn bounds(&self) -> Bounds {
        Bounds {
            lower: if self.truncate {
                0.0
            } else {
                f64::NEG_INFINITY
            },
            upper: self.capacity,
        }
    }

    fn validate(&self, data: &GenerationData) -> Result<()> {
        let hours = data.num_hours();
        for (name, r) in [("training", &self.train), ("simulation", &self.sim)] {
            if r.start > r.end || r.end > hours {
                return Err(Error::Config(format!(
                    "{name} window {}..{} is outside the {hours} available hours",
                    r.start, r.end
                )));
            }
        }
        if self.contract_mode == ContractMode::Newsvendor && self.train.end > self.sim.start {
            return Err(Error::Config(format!(
                "training window {}..{} must end before the simulation window {}..{} starts",
                self.train.start, self.train.end, self.sim.start, self.sim.end
            )));
        }
        if let ContractMode::Fixed(c) = self.contract_mode {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!("fixed contract {c} must be >= 0")));
            }
        }
        if let Some(cap) = self.capacity {
            if !(cap.is_finite() && cap >= 0.0) {
                return Err(Error::Config(format!("capacity {cap} must be >= 0")));
            }
        }
        // An explicit p* is checked against each hour's prices.
        if self.pam.balance_tolerance.is_nan() || self.pam.balance_tolerance < 0.0 {
            return Err(Error::Config(format!(
                "balance tolerance {} must be >= 0",
                self.pam.balance_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProducerHour {
    pub producer_id: String,
    pub contract: f64,
    pub realization: f64,
    pub payoff_proposed: f64,
    pub payoff_separate: f64,
}

/// Pass/fail summary of the property audit for one hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyFlags {
    pub budget_balance: bool,
    pub individual_rationality: bool,
    pub fairness: bool,
    pub no_exploitation: bool,
    /// `None` when core checking was disabled.
    pub in_core: Option<bool>,
}

impl PropertyFlags {
    pub fn all_passed(&self) -> bool {
        self.budget_balance
            && self.individual_rationality
            && self.fairness
            && self.no_exploitation
            && self.in_core != Some(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourlyRecord {
    pub hour: String,
    pub producers: Vec<ProducerHour>,
    pub aggregator_payoff: f64,
    pub excess_profit: f64,
    pub marginal_price: f64,
    pub flags: PropertyFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViolationCounts {
    pub budget_balance: usize,
    pub individual_rationality: usize,
    pub fairness: usize,
    pub no_exploitation: usize,
    pub core: usize,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.budget_balance
            + self.individual_rationality
            + self.fairness
            + self.no_exploitation
            + self.core
    }

    fn add(&mut self, flags: &PropertyFlags) {
        self.budget_balance += usize::from(!flags.budget_balance);
        self.individual_rationality += usize::from(!flags.individual_rationality);
        self.fairness += usize::from(!flags.fairness);
        self.no_exploitation += usize::from(!flags.no_exploitation);
        self.core += usize::from(flags.in_core == Some(false));
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulationReport {
    pub producer_ids: Vec<String>,
    pub totals_proposed: Vec<f64>,
    pub totals_separate: Vec<f64>,
    pub grand_total_proposed: f64,
    pub grand_total_separate: f64,
    pub total_excess_profit: f64,
    pub records: Vec<HourlyRecord>,
    pub violations: ViolationCounts,
    /// Hours left out because some producer had no data.
    pub skipped_hours: Vec<String>,
}

impl SimulationReport {
    fn from_records(
        producer_ids: Vec<String>,
        records: Vec<HourlyRecord>,
        skipped_hours: Vec<String>,
    ) -> Self {
        let n = producer_ids.len();
        let mut report = Self {
            totals_proposed: vec![0.0; n],
            totals_separate: vec![0.0; n],
            producer_ids,
            skipped_hours,
            ..Self::default()
        };
        for rec in &records {
            for (i, p) in rec.producers.iter().enumerate() {
                report.totals_proposed[i] += p.payoff_proposed;
                report.totals_separate[i] += p.payoff_separate;
            }
            report.total_excess_profit += rec.excess_profit;
            report.violations.add(&rec.flags);
        }
        report.grand_total_proposed = report.totals_proposed.iter().sum();
        report.grand_total_separate = report.totals_separate.iter().sum();
        report.records = records;
        report
    }
}

/// Forecast-error spread per producer over the training window.
fn fit_spreads(config: &SimulationConfig, data: &GenerationData) -> Result<Vec<f64>> {
    (0..data.num_producers())
        .map(|p| {
            let observations: Vec<(f64, f64)> = data.series[p][config.train.clone()]
                .iter()
                .flatten()
                .map(|o| (o.forecast, o.actual))
                .collect();
            let id = &data.producer_ids[p];
            let window = TrainingWindow::new(observations)
                .map_err(|e| Error::Simulation(format!("producer {id}: training window: {e}")))?;
            window
                .forecast_error_std()
                .map_err(|e| Error::Simulation(format!("producer {id}: {e}")))
        })
        .collect()
}

fn simulate_hour(
    config: &SimulationConfig,
    data: &GenerationData,
    spreads: &[f64],
    h: usize,
) -> Result<Option<HourlyRecord>> {
    let label = &data.hours[h];
    let observations: Option<Vec<Observation>> = data.series.iter().map(|s| s[h]).collect();
    let Some(observations) = observations else {
        return Ok(None);
    };
    let prices = config.prices.for_hour(label)?;
    let hour_err = |e: Error| Error::Simulation(format!("hour {label}: {e}"));

    let contracts = observations
        .iter()
        .enumerate()
        .map(|(p, obs)| match &config.contract_mode {
            ContractMode::Newsvendor => {
                let dist = GenerationDistribution::new(obs.forecast, spreads[p], config.bounds())?;
                optimal_contract(&dist, &prices)
            }
            ContractMode::Fixed(c) => Ok(*c),
            ContractMode::FromFile(table) => table
                .0
                .get(&(label.clone(), data.producer_ids[p].clone()))
                .copied()
                .ok_or_else(|| {
                    Error::Simulation(format!("no contract for producer {}", data.producer_ids[p]))
                }),
        })
        .collect::<Result<Vec<f64>>>()
        .map_err(hour_err)?;
    let realizations: Vec<f64> = observations.iter().map(|o| o.actual).collect();
    let snapshot =
        ScenarioSnapshot::new(data.producer_ids.clone(), contracts, realizations, prices)
            .map_err(hour_err)?;

    let alloc = allocate(&snapshot, &config.pam).map_err(hour_err)?;
    let separate = snapshot.separate_payoffs();
    let core_mode = if config.check_core {
        CoreCheckMode::Auto {
            limit: config.exhaustive_limit,
            draws: config.sampled_draws,
            seed: config.rng_seed ^ (h as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        }
    } else {
        CoreCheckMode::Skip
    };
    let report = evaluate_properties(&alloc, &snapshot, core_mode).map_err(hour_err)?;

    let producers = (0..snapshot.len())
        .map(|i| ProducerHour {
            producer_id: snapshot.producer_ids()[i].clone(),
            contract: snapshot.contracts()[i],
            realization: snapshot.realizations()[i],
            payoff_proposed: alloc.payoffs[i],
            payoff_separate: separate[i],
        })
        .collect();
    Ok(Some(HourlyRecord {
        hour: label.clone(),
        producers,
        aggregator_payoff: aggregator_payoff(&snapshot),
        excess_profit: excess_profit(&snapshot),
        marginal_price: alloc.marginal_price_used.unwrap_or(f64::NAN),
        flags: PropertyFlags {
            budget_balance: report.budget_balance.passed,
            individual_rationality: report.individual_rationality.passed,
            fairness: report.fairness.passed,
            no_exploitation: report.no_exploitation.passed,
            in_core: report.in_core.map(|c| c.passed),
        },
    }))
}

/// Runs every hour of `config.sim`. Deterministic in `config` and `data`;
/// hours are processed in parallel and reassembled in hour order.
pub fn run_simulation(
    config: &SimulationConfig,
    data: &GenerationData,
) -> Result<SimulationReport> {
    config.validate(data)?;
    let spreads = if config.contract_mode == ContractMode::Newsvendor {
        fit_spreads(config, data)?
    } else {
        vec![0.0; data.num_producers()]
    };
    let outcomes: Vec<Result<Option<HourlyRecord>>> = config
        .sim
        .clone()
        .into_par_iter()
        .map(|h| simulate_hour(config, data, &spreads, h))
        .collect();

    let mut records = Vec::with_capacity(outcomes.len());
    let mut skipped = Vec::new();
    for (h, outcome) in config.sim.clone().zip(outcomes) {
        match outcome? {
            Some(rec) => records.push(rec),
            None => {
                log::warn!("hour {}: skipped, a producer has no data", data.hours[h]);
                skipped.push(data.hours[h].clone());
            }
        }
    }
    Ok(SimulationReport::from_records(
        data.producer_ids.clone(),
        records,
        skipped,
    ))
}
