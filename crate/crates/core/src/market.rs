//! Two-settlement market primitives: prices, per-hour snapshots and the
//! payoff of a producer, a coalition, or the whole aggregation.
//!
//! All quantities are MWh and all prices currency/MWh.

use crate::error::{Error, Result};

/// Relative tolerance used for every floating-point equality in the crate.
pub const REL_TOL: f64 = 1e-9;

/// `|a - b| <= REL_TOL * max(1, |a|, |b|)`.
pub fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= tolerance_for(a.abs().max(b.abs()))
}

/// Absolute slack granted to a value of the given magnitude.
pub fn tolerance_for(magnitude: f64) -> f64 {
    REL_TOL * magnitude.abs().max(1.0)
}

/// Day-ahead price plus the real-time buy and sell prices for one hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceTriple {
    day_ahead: f64,
    rt_buy: f64,
    rt_sell: f64,
}

impl PriceTriple {
    /// Fails when `rt_sell > rt_buy` (arbitrage) or any price is not finite.
    /// A negative `rt_sell` is allowed and models a penalty on excess power.
    pub fn new(day_ahead: f64, rt_buy: f64, rt_sell: f64) -> Result<Self> {
        if !(day_ahead.is_finite() && rt_buy.is_finite() && rt_sell.is_finite()) {
            return Err(Error::Config(format!(
                "prices must be finite, got ({day_ahead}, {rt_buy}, {rt_sell})"
            )));
        }
        if rt_sell > rt_buy {
            return Err(Error::PriceOrdering { rt_buy, rt_sell });
        }
        Ok(Self {
            day_ahead,
            rt_buy,
            rt_sell,
        })
    }

    pub fn day_ahead(&self) -> f64 {
        self.day_ahead
    }

    pub fn rt_buy(&self) -> f64 {
        self.rt_buy
    }

    pub fn rt_sell(&self) -> f64 {
        self.rt_sell
    }

    /// `rt_buy - rt_sell`, never negative.
    pub fn spread(&self) -> f64 {
        self.rt_buy - self.rt_sell
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.rt_buy + self.rt_sell)
    }

    /// Largest real-time price magnitude; bounds how much a payoff can move
    /// per MWh of deviation.
    pub(crate) fn max_rt_magnitude(&self) -> f64 {
        self.rt_buy.abs().max(self.rt_sell.abs())
    }
}

/// Contracts and realized generation of every producer for one hour.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSnapshot {
    producer_ids: Vec<String>,
    contracts: Vec<f64>,
    realizations: Vec<f64>,
    prices: PriceTriple,
}

impl ScenarioSnapshot {
    pub fn new(
        producer_ids: Vec<String>,
        contracts: Vec<f64>,
        realizations: Vec<f64>,
        prices: PriceTriple,
    ) -> Result<Self> {
        if contracts.len() != producer_ids.len() || realizations.len() != producer_ids.len() {
            return Err(Error::InvalidSnapshot(format!(
                "{} ids, {} contracts, {} realizations",
                producer_ids.len(),
                contracts.len(),
                realizations.len()
            )));
        }
        for (i, (&c, &x)) in contracts.iter().zip(&realizations).enumerate() {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidSnapshot(format!(
                    "producer {}: contract {c} must be finite and >= 0",
                    producer_ids[i]
                )));
            }
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::InvalidSnapshot(format!(
                    "producer {}: realization {x} must be finite and >= 0",
                    producer_ids[i]
                )));
            }
        }
        Ok(Self {
            producer_ids,
            contracts,
            realizations,
            prices,
        })
    }

    /// Snapshot with ids `"1"`, `"2"`, ... in order.
    pub fn with_default_ids(
        contracts: Vec<f64>,
        realizations: Vec<f64>,
        prices: PriceTriple,
    ) -> Result<Self> {
        let ids = (1..=contracts.len()).map(|i| i.to_string()).collect();
        Self::new(ids, contracts, realizations, prices)
    }

    pub fn len(&self) -> usize {
        self.contracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contracts.is_empty()
    }

    pub fn producer_ids(&self) -> &[String] {
        &self.producer_ids
    }

    pub fn contracts(&self) -> &[f64] {
        &self.contracts
    }

    pub fn realizations(&self) -> &[f64] {
        &self.realizations
    }

    pub fn prices(&self) -> &PriceTriple {
        &self.prices
    }

    /// `c_N`, the aggregator's day-ahead commitment.
    pub fn total_contract(&self) -> f64 {
        self.contracts.iter().sum()
    }

    /// `x_N`, the aggregated realized generation.
    pub fn total_realization(&self) -> f64 {
        self.realizations.iter().sum()
    }

    /// `x_i - c_i` for every producer.
    pub fn deviations(&self) -> impl Iterator<Item = f64> + '_ {
        self.realizations
            .iter()
            .zip(&self.contracts)
            .map(|(x, c)| x - c)
    }

    /// Stand-alone market payoff of every producer.
    pub fn separate_payoffs(&self) -> Vec<f64> {
        self.contracts
            .iter()
            .zip(&self.realizations)
            .map(|(&c, &x)| separate_payoff(c, x, &self.prices))
            .collect()
    }
}

/// A subset of producer indices. Members are kept sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CoalitionMask {
    members: Vec<usize>,
}

impl CoalitionMask {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self { members }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full(n: usize) -> Self {
        Self {
            members: (0..n).collect(),
        }
    }

    pub fn singleton(index: usize) -> Self {
        Self {
            members: vec![index],
        }
    }

    /// Members are the set bits of `bits`; bit `i` is producer `i`.
    pub fn from_bits(bits: u64) -> Self {
        Self {
            members: (0..64).filter(|i| bits >> i & 1 == 1).collect(),
        }
    }

    /// Inverse of [`CoalitionMask::from_bits`]; `None` if any member is >= 64.
    pub fn to_bits(&self) -> Option<u64> {
        self.members.iter().try_fold(
            0u64,
            |acc, &i| {
                if i < 64 {
                    Some(acc | 1 << i)
                } else {
                    None
                }
            },
        )
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }

    /// Producers of an `n`-producer economy that are not in this coalition.
    pub fn complement(&self, n: usize) -> Self {
        Self {
            members: (0..n).filter(|i| !self.contains(*i)).collect(),
        }
    }

    pub(crate) fn check_range(&self, len: usize) -> Result<()> {
        match self.members.last() {
            Some(&index) if index >= len => Err(Error::IndexOutOfRange { index, len }),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for CoalitionMask {
    /// One-based member list, e.g. `{1,3}`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.members.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

/// Producers split by the sign of their deviation; `x_i == c_i` counts as surplus.
#[derive(Debug, Clone, PartialEq)]
pub struct SurplusPartition {
    pub surplus_set: Vec<usize>,
    pub shortfall_set: Vec<usize>,
    pub surplus_total: f64,
    pub shortfall_total: f64,
}

/// Realized payoff of a producer settling `contract` against `realization` on its own.
pub fn separate_payoff(contract: f64, realization: f64, prices: &PriceTriple) -> f64 {
    let shortfall = (contract - realization).max(0.0);
    let surplus = (realization - contract).max(0.0);
    prices.day_ahead * contract - prices.rt_buy * shortfall + prices.rt_sell * surplus
}

/// Value of a coalition that pools its contracts and realizations.
/// The empty coalition is worth 0.
pub fn coalition_value(snapshot: &ScenarioSnapshot, coalition: &CoalitionMask) -> Result<f64> {
    coalition.check_range(snapshot.len())?;
    if coalition.is_empty() {
        return Ok(0.0);
    }
    let (c, x) = coalition.members().iter().fold((0.0, 0.0), |(c, x), &i| {
        (c + snapshot.contracts[i], x + snapshot.realizations[i])
    });
    Ok(separate_payoff(c, x, &snapshot.prices))
}

/// Coalition value for a coalition given as a bitmask. No range check; the
/// caller guarantees `bits < 2^len`.
pub(crate) fn coalition_value_bits(snapshot: &ScenarioSnapshot, bits: u64) -> f64 {
    if bits == 0 {
        return 0.0;
    }
    let mut c = 0.0;
    let mut x = 0.0;
    let mut rest = bits;
    while rest != 0 {
        let i = rest.trailing_zeros() as usize;
        c += snapshot.contracts[i];
        x += snapshot.realizations[i];
        rest &= rest - 1;
    }
    separate_payoff(c, x, &snapshot.prices)
}

/// Payoff of the aggregator that commits `sum(c_i)` and delivers `sum(x_i)`.
pub fn aggregator_payoff(snapshot: &ScenarioSnapshot) -> f64 {
    aggregator_payoff_with_contract(snapshot, snapshot.total_contract())
}

/// Aggregator payoff for an arbitrary day-ahead commitment.
pub fn aggregator_payoff_with_contract(
    snapshot: &ScenarioSnapshot,
    aggregate_contract: f64,
) -> f64 {
    separate_payoff(
        aggregate_contract,
        snapshot.total_realization(),
        &snapshot.prices,
    )
}

pub fn partition_surplus_shortfall(snapshot: &ScenarioSnapshot) -> SurplusPartition {
    let mut partition = SurplusPartition {
        surplus_set: Vec::new(),
        shortfall_set: Vec::new(),
        surplus_total: 0.0,
        shortfall_total: 0.0,
    };
    for (i, deviation) in snapshot.deviations().enumerate() {
        if deviation >= 0.0 {
            partition.surplus_set.push(i);
            partition.surplus_total += deviation;
        } else {
            partition.shortfall_set.push(i);
            partition.shortfall_total -= deviation;
        }
    }
    partition
}

/// Gain from pooling: `(rt_buy - rt_sell) * min(surplus_total, shortfall_total)`.
pub fn excess_profit(snapshot: &ScenarioSnapshot) -> f64 {
    let partition = partition_surplus_shortfall(snapshot);
    snapshot.prices.spread() * partition.surplus_total.min(partition.shortfall_total)
}
