//! The in-the-core payoff allocation mechanism and the audit checks for the
//! five ex-post properties (budget balance, individual rationality,
//! fairness, no-exploitation, core membership).
//!
//! Every producer is paid its day-ahead revenue plus its own deviation
//! valued at a single marginal price. The marginal price is the real-time
//! buy price when the aggregation is short overall, the real-time sell
//! price when it is long, and a configurable `p*` inside the band when it
//! exactly meets its commitment.
//!
//! The `check_*` functions accept any allocation, so they can audit
//! mechanisms other than [`allocate`].

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{
    aggregator_payoff, aggregator_payoff_with_contract, coalition_value_bits, separate_payoff,
    tolerance_for, CoalitionMask, PriceTriple, ScenarioSnapshot, REL_TOL,
};

/// Largest producer count for which coalitions are enumerated exhaustively by default.
pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 20;
/// Default number of random coalitions drawn in sampled core checking.
pub const DEFAULT_SAMPLED_DRAWS: usize = 100_000;

// Below this many producers enumeration stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 14;

/// How `p*` is chosen when the aggregation exactly meets its commitment.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BalancePriceRule {
    #[default]
    Midpoint,
    RtBuy,
    RtSell,
    Explicit(f64),
}

impl FromStr for BalancePriceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "midpoint" | "mid" => Ok(Self::Midpoint),
            "buy" | "rt_buy" => Ok(Self::RtBuy),
            "sell" | "rt_sell" => Ok(Self::RtSell),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Self::Explicit)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "p* must be midpoint, buy, sell or a number, got {s:?}"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PamConfig {
    pub balance_price_rule: BalancePriceRule,
    /// Relative band for deciding `x_N == c_N`: `|x_N - c_N| <= tol * max(1, c_N)`.
    pub balance_tolerance: f64,
}

impl Default for PamConfig {
    fn default() -> Self {
        Self {
            balance_price_rule: BalancePriceRule::Midpoint,
            balance_tolerance: REL_TOL,
        }
    }
}

impl PamConfig {
    pub fn with_rule(rule: BalancePriceRule) -> Self {
        Self {
            balance_price_rule: rule,
            ..Self::default()
        }
    }

    /// Resolves `p*` for these prices; must land in `[rt_sell, rt_buy]`.
    pub fn resolve_balance_price(&self, prices: &PriceTriple) -> Result<f64> {
        if self.balance_tolerance.is_nan() || self.balance_tolerance < 0.0 {
            return Err(Error::Config(format!(
                "balance tolerance must be >= 0, got {}",
                self.balance_tolerance
            )));
        }
        let p = match self.balance_price_rule {
            BalancePriceRule::Midpoint => prices.midpoint(),
            BalancePriceRule::RtBuy => prices.rt_buy(),
            BalancePriceRule::RtSell => prices.rt_sell(),
            BalancePriceRule::Explicit(v) => v,
        };
        if p < prices.rt_sell() || p > prices.rt_buy() {
            return Err(Error::Config(format!(
                "p* = {p} lies outside the real-time band [{}, {}]",
                prices.rt_sell(),
                prices.rt_buy()
            )));
        }
        Ok(p)
    }
}

/// Sign of the aggregation's net deviation `x_N - c_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceCase {
    Shortfall,
    Balanced,
    Surplus,
}

pub fn classify_balance(snapshot: &ScenarioSnapshot, config: &PamConfig) -> BalanceCase {
    let c_total = snapshot.total_contract();
    let net = snapshot.total_realization() - c_total;
    if net.abs() <= config.balance_tolerance * c_total.max(1.0) {
        BalanceCase::Balanced
    } else if net < 0.0 {
        BalanceCase::Shortfall
    } else {
        BalanceCase::Surplus
    }
}

/// Per-producer payoffs of one hour.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffAllocation {
    pub payoffs: Vec<f64>,
    /// The aggregator's market payoff being distributed.
    pub aggregator_total: f64,
    /// Price applied to each producer's deviation, when the mechanism has one.
    pub marginal_price_used: Option<f64>,
}

impl PayoffAllocation {
    /// Wraps externally computed payoffs for auditing; the aggregator total is
    /// taken from the snapshot.
    pub fn external(snapshot: &ScenarioSnapshot, payoffs: Vec<f64>) -> Self {
        Self {
            payoffs,
            aggregator_total: aggregator_payoff(snapshot),
            marginal_price_used: None,
        }
    }

    pub fn total(&self) -> f64 {
        self.payoffs.iter().sum()
    }
}

/// Marginal price applied to deviations under the proposed mechanism.
pub fn marginal_price(snapshot: &ScenarioSnapshot, config: &PamConfig) -> Result<f64> {
    let prices = snapshot.prices();
    let p_star = config.resolve_balance_price(prices)?;
    Ok(match classify_balance(snapshot, config) {
        BalanceCase::Shortfall => prices.rt_buy(),
        BalanceCase::Balanced => p_star,
        BalanceCase::Surplus => prices.rt_sell(),
    })
}

/// `P_i = p_f * c_i + m * (x_i - c_i)` with `m` from [`marginal_price`].
pub fn allocate(snapshot: &ScenarioSnapshot, config: &PamConfig) -> Result<PayoffAllocation> {
    let m = marginal_price(snapshot, config)?;
    let p_f = snapshot.prices().day_ahead();
    let payoffs = snapshot
        .contracts()
        .iter()
        .zip(snapshot.realizations())
        .map(|(&c, &x)| p_f * c + m * (x - c))
        .collect();
    Ok(PayoffAllocation {
        payoffs,
        aggregator_total: aggregator_payoff(snapshot),
        marginal_price_used: Some(m),
    })
}

/// Each producer paid its stand-alone payoff. Not budget balanced in general.
pub fn separate_allocation(snapshot: &ScenarioSnapshot) -> PayoffAllocation {
    PayoffAllocation::external(snapshot, snapshot.separate_payoffs())
}

/// Aggregator payoff split evenly. Violates individual rationality and the
/// core on asymmetric snapshots.
pub fn equal_split_allocation(snapshot: &ScenarioSnapshot) -> PayoffAllocation {
    let total = aggregator_payoff(snapshot);
    let share = if snapshot.is_empty() {
        0.0
    } else {
        total / snapshot.len() as f64
    };
    PayoffAllocation::external(snapshot, vec![share; snapshot.len()])
}

fn check_len(alloc: &PayoffAllocation, snapshot: &ScenarioSnapshot) -> Result<()> {
    if alloc.payoffs.len() != snapshot.len() {
        return Err(Error::LengthMismatch {
            allocation: alloc.payoffs.len(),
            snapshot: snapshot.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetBalanceCheck {
    pub passed: bool,
    /// `sum(P_i) - P_A`.
    pub residual: f64,
}

pub fn check_budget_balance(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
) -> Result<BudgetBalanceCheck> {
    check_len(alloc, snapshot)?;
    let p_a = aggregator_payoff(snapshot);
    let residual = alloc.total() - p_a;
    Ok(BudgetBalanceCheck {
        passed: residual.abs() <= tolerance_for(p_a),
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRationalityCheck {
    pub passed: bool,
    /// `P_i - P_i^sep` per producer.
    pub margins: Vec<f64>,
    /// Smallest margin, or 0 for an empty economy.
    pub worst_margin: f64,
    pub worst_index: Option<usize>,
}

pub fn check_individual_rationality(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
) -> Result<IndividualRationalityCheck> {
    check_len(alloc, snapshot)?;
    let separate = snapshot.separate_payoffs();
    let margins: Vec<f64> = alloc
        .payoffs
        .iter()
        .zip(&separate)
        .map(|(p, s)| p - s)
        .collect();
    let passed = alloc
        .payoffs
        .iter()
        .zip(&separate)
        .all(|(p, s)| *p >= s - tolerance_for(*s));
    let worst = margins.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1));
    Ok(IndividualRationalityCheck {
        passed,
        worst_margin: worst.map_or(0.0, |(_, m)| *m),
        worst_index: worst.map(|(i, _)| i),
        margins,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessCheck {
    pub passed: bool,
    pub violating_pair: Option<(usize, usize)>,
}

/// Producers whose shortfalls `c_i - x_i` agree within tolerance must earn
/// the same amount on top of their day-ahead revenue.
///
/// Deviations that agree only approximately may legitimately be valued
/// differently by up to `max|rt price| * |d_i - d_j|`, which is added to the
/// payoff tolerance.
pub fn check_fairness(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
) -> Result<FairnessCheck> {
    check_len(alloc, snapshot)?;
    let p_f = snapshot.prices().day_ahead();
    let price_scale = snapshot.prices().max_rt_magnitude();
    let mut order: Vec<(usize, f64, f64)> = snapshot
        .contracts()
        .iter()
        .zip(snapshot.realizations())
        .zip(&alloc.payoffs)
        .enumerate()
        .map(|(i, ((&c, &x), &p))| (i, c - x, p - p_f * c))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut violating_pair = None;
    'outer: for (k, &(i, d_i, m_i)) in order.iter().enumerate() {
        for &(j, d_j, m_j) in &order[k + 1..] {
            let gap = d_j - d_i;
            if gap > tolerance_for(d_i.abs().max(d_j.abs())) {
                break;
            }
            let allowed = tolerance_for(m_i.abs().max(m_j.abs())) + price_scale * gap;
            if (m_i - m_j).abs() > allowed {
                violating_pair = Some((i.min(j), i.max(j)));
                break 'outer;
            }
        }
    }
    Ok(FairnessCheck {
        passed: violating_pair.is_none(),
        violating_pair,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoExploitationCheck {
    pub passed: bool,
    pub violating_index: Option<usize>,
}

/// A producer delivering exactly its contract must receive `p_f * c_i`.
pub fn check_no_exploitation(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
) -> Result<NoExploitationCheck> {
    check_len(alloc, snapshot)?;
    let p_f = snapshot.prices().day_ahead();
    let price_scale = snapshot.prices().max_rt_magnitude();
    let violating_index = snapshot
        .contracts()
        .iter()
        .zip(snapshot.realizations())
        .zip(&alloc.payoffs)
        .position(|((&c, &x), &p)| {
            let deviation = (x - c).abs();
            if deviation > tolerance_for(c) {
                return false;
            }
            let forward = p_f * c;
            (p - forward).abs() > tolerance_for(forward) + price_scale * deviation
        });
    Ok(NoExploitationCheck {
        passed: violating_index.is_none(),
        violating_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreCheck {
    pub passed: bool,
    /// Coalition with the largest `v(T) - sum_{i in T} P_i`; lowest bitmask on ties.
    pub worst_coalition: CoalitionMask,
    pub max_violation: f64,
    pub coalitions_checked: u64,
    pub exhaustive: bool,
}

#[derive(Debug, Clone, Copy)]
struct CoreFold {
    passed: bool,
    worst_bits: u64,
    worst: f64,
    checked: u64,
}

impl CoreFold {
    fn identity() -> Self {
        Self {
            passed: true,
            worst_bits: u64::MAX,
            worst: f64::NEG_INFINITY,
            checked: 0,
        }
    }

    fn visit(mut self, snapshot: &ScenarioSnapshot, payoffs: &[f64], bits: u64) -> Self {
        let value = coalition_value_bits(snapshot, bits);
        let mut paid = 0.0;
        let mut rest = bits;
        while rest != 0 {
            paid += payoffs[rest.trailing_zeros() as usize];
            rest &= rest - 1;
        }
        let violation = value - paid;
        if violation > tolerance_for(value.abs().max(paid.abs())) {
            self.passed = false;
        }
        if violation > self.worst || (violation == self.worst && bits < self.worst_bits) {
            self.worst = violation;
            self.worst_bits = bits;
        }
        self.checked += 1;
        self
    }

    fn merge(self, other: Self) -> Self {
        let keep_self = self.worst > other.worst
            || (self.worst == other.worst && self.worst_bits <= other.worst_bits);
        let (worst, worst_bits) = if keep_self {
            (self.worst, self.worst_bits)
        } else {
            (other.worst, other.worst_bits)
        };
        Self {
            passed: self.passed && other.passed,
            worst_bits,
            worst,
            checked: self.checked + other.checked,
        }
    }

    fn finish(self, exhaustive: bool) -> CoreCheck {
        if self.checked == 0 {
            return CoreCheck {
                passed: true,
                worst_coalition: CoalitionMask::empty(),
                max_violation: 0.0,
                coalitions_checked: 0,
                exhaustive,
            };
        }
        CoreCheck {
            passed: self.passed,
            worst_coalition: CoalitionMask::from_bits(self.worst_bits),
            max_violation: self.worst,
            coalitions_checked: self.checked,
            exhaustive,
        }
    }
}

/// Enumerates all `2^N - 1` nonempty coalitions, refusing `N > DEFAULT_EXHAUSTIVE_LIMIT`.
pub fn check_core_membership(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
) -> Result<CoreCheck> {
    check_core_membership_with_limit(alloc, snapshot, DEFAULT_EXHAUSTIVE_LIMIT)
}

pub fn check_core_membership_with_limit(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
    limit: usize,
) -> Result<CoreCheck> {
    check_len(alloc, snapshot)?;
    let n = snapshot.len();
    if n > limit.min(62) {
        return Err(Error::TooManyProducers {
            producers: n,
            limit: limit.min(62),
        });
    }
    let end = 1u64 << n;
    let payoffs = &alloc.payoffs;
    let fold = if n < PARALLEL_THRESHOLD {
        (1..end).fold(CoreFold::identity(), |acc, bits| {
            acc.visit(snapshot, payoffs, bits)
        })
    } else {
        (1..end)
            .into_par_iter()
            .fold(CoreFold::identity, |acc, bits| {
                acc.visit(snapshot, payoffs, bits)
            })
            .reduce(CoreFold::identity, CoreFold::merge)
    };
    Ok(fold.finish(true))
}

/// Core audit for large economies: the grand coalition, every singleton and
/// `draws` uniformly random nonempty coalitions. Can only prove a violation,
/// never membership.
pub fn check_core_membership_sampled(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
    draws: usize,
    seed: u64,
) -> Result<CoreCheck> {
    check_len(alloc, snapshot)?;
    let n = snapshot.len();
    if n == 0 {
        return Ok(CoreFold::identity().finish(false));
    }
    let prices = snapshot.prices();
    let contracts = snapshot.contracts();
    let realizations = snapshot.realizations();
    let payoffs = &alloc.payoffs;

    let mut passed = true;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_members: Vec<usize> = Vec::new();
    let mut checked = 0u64;
    let mut visit = |members: &[usize]| {
        let (c, x, paid) = members.iter().fold((0.0, 0.0, 0.0), |(c, x, p), &i| {
            (c + contracts[i], x + realizations[i], p + payoffs[i])
        });
        let value = separate_payoff(c, x, prices);
        let violation = value - paid;
        if violation > tolerance_for(value.abs().max(paid.abs())) {
            passed = false;
        }
        if violation > worst {
            worst = violation;
            worst_members = members.to_vec();
        }
        checked += 1;
    };

    visit(&(0..n).collect::<Vec<_>>());
    for i in 0..n {
        visit(&[i]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::with_capacity(n);
    for _ in 0..draws {
        members.clear();
        while members.is_empty() {
            members.extend((0..n).filter(|_| rng.random::<bool>()));
        }
        visit(&members);
    }
    Ok(CoreCheck {
        passed,
        worst_coalition: CoalitionMask::new(worst_members),
        max_violation: worst,
        coalitions_checked: checked,
        exhaustive: false,
    })
}

/// How [`evaluate_properties`] checks core membership.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoreCheckMode {
    Skip,
    Exhaustive {
        limit: usize,
    },
    Sampled {
        draws: usize,
        seed: u64,
    },
    /// Exhaustive up to `limit` producers, sampled above it.
    Auto {
        limit: usize,
        draws: usize,
        seed: u64,
    },
}

impl Default for CoreCheckMode {
    fn default() -> Self {
        Self::Auto {
            limit: DEFAULT_EXHAUSTIVE_LIMIT,
            draws: DEFAULT_SAMPLED_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub budget_balance: BudgetBalanceCheck,
    pub individual_rationality: IndividualRationalityCheck,
    pub fairness: FairnessCheck,
    pub no_exploitation: NoExploitationCheck,
    /// `None` when core checking was skipped.
    pub in_core: Option<CoreCheck>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.budget_balance.passed
            && self.individual_rationality.passed
            && self.fairness.passed
            && self.no_exploitation.passed
            && self.in_core.as_ref().is_none_or(|c| c.passed)
    }
}

pub fn evaluate_properties(
    alloc: &PayoffAllocation,
    snapshot: &ScenarioSnapshot,
    core_mode: CoreCheckMode,
) -> Result<PropertyReport> {
    let in_core = match core_mode {
        CoreCheckMode::Skip => None,
        CoreCheckMode::Exhaustive { limit } => {
            Some(check_core_membership_with_limit(alloc, snapshot, limit)?)
        }
        CoreCheckMode::Sampled { draws, seed } => {
            Some(check_core_membership_sampled(alloc, snapshot, draws, seed)?)
        }
        CoreCheckMode::Auto { limit, draws, seed } => Some(if snapshot.len() <= limit {
            check_core_membership_with_limit(alloc, snapshot, limit)?
        } else {
            check_core_membership_sampled(alloc, snapshot, draws, seed)?
        }),
    };
    Ok(PropertyReport {
        budget_balance: check_budget_balance(alloc, snapshot)?,
        individual_rationality: check_individual_rationality(alloc, snapshot)?,
        fairness: check_fairness(alloc, snapshot)?,
        no_exploitation: check_no_exploitation(alloc, snapshot)?,
        in_core,
    })
}

/// A realization under which a mismatched aggregate commitment makes
/// individual rationality impossible for any budget-balanced allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitmentMismatch {
    /// Contracts as given, realizations constructed.
    pub snapshot: ScenarioSnapshot,
    pub aggregate_contract: f64,
    /// Aggregator payoff when it commits `aggregate_contract`.
    pub aggregator_payoff: f64,
    pub separate_total: f64,
    /// `aggregator_payoff - separate_total`, negative by construction.
    pub gap: f64,
    /// `(p_f - p_rb)(c_N - sum c_i)` when over-committed,
    /// `(p_f - p_rs)(c_N - sum c_i)` when under-committed.
    pub predicted_gap: f64,
}

/// Builds the impossibility scenario for an aggregate commitment that
/// differs from the sum of individual contracts.
///
/// Over-commitment (requires `p_f < p_rb`): every producer delivers half its
/// contract. Under-commitment (requires `p_f > p_rs`): every producer
/// delivers one and a half times its contract.
pub fn commitment_mismatch(
    contracts: &[f64],
    aggregate_contract: f64,
    prices: PriceTriple,
) -> Result<CommitmentMismatch> {
    let sum: f64 = contracts.iter().sum();
    if !(aggregate_contract.is_finite() && aggregate_contract >= 0.0) {
        return Err(Error::Config(format!(
            "aggregate contract must be finite and >= 0, got {aggregate_contract}"
        )));
    }
    let (scale, rt_price) = if aggregate_contract > sum {
        if prices.day_ahead() >= prices.rt_buy() {
            return Err(Error::NoCounterexample(format!(
                "over-commitment needs p_f < p_rb, got p_f = {} and p_rb = {}",
                prices.day_ahead(),
                prices.rt_buy()
            )));
        }
        (0.5, prices.rt_buy())
    } else if aggregate_contract < sum {
        if prices.day_ahead() <= prices.rt_sell() {
            return Err(Error::NoCounterexample(format!(
                "under-commitment needs p_f > p_rs, got p_f = {} and p_rs = {}",
                prices.day_ahead(),
                prices.rt_sell()
            )));
        }
        (1.5, prices.rt_sell())
    } else {
        return Err(Error::NoCounterexample(
            "aggregate contract equals the sum of individual contracts".into(),
        ));
    };
    let realizations = contracts.iter().map(|c| c * scale).collect();
    let snapshot = ScenarioSnapshot::with_default_ids(contracts.to_vec(), realizations, prices)?;
    let agg = aggregator_payoff_with_contract(&snapshot, aggregate_contract);
    let separate_total: f64 = snapshot.separate_payoffs().iter().sum();
    Ok(CommitmentMismatch {
        snapshot,
        aggregate_contract,
        aggregator_payoff: agg,
        separate_total,
        gap: agg - separate_total,
        predicted_gap: (prices.day_ahead() - rt_price) * (aggregate_contract - sum),
    })
}
