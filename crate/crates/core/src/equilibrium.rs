//! The aggregation viewed as a market with transferable payoff.
//!
//! Each producer owns its realized power as an endowment and turns power
//! into money through a piecewise-linear concave production function equal
//! to its stand-alone payoff. A coalition's value is the best total output
//! over all redistributions of the coalition's power. Pricing power at a
//! competitive price reproduces the allocation of [`crate::allocation::allocate`].

use crate::allocation::{classify_balance, BalanceCase, PamConfig};
use crate::error::{Error, Result};
use crate::market::{
    approx_eq, coalition_value_bits, separate_payoff, CoalitionMask, PriceTriple, ScenarioSnapshot,
};

/// Production function of one producer: kink at the contract, slope
/// `rt_buy` below it and `rt_sell` above it.
///
/// Concave and continuous for any admissible prices. It is nondecreasing
/// only when `rt_sell >= 0`; negative sell prices are accepted anyway.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductionFunction {
    pub contract: f64,
    pub prices: PriceTriple,
}

impl ProductionFunction {
    pub fn new(contract: f64, prices: PriceTriple) -> Self {
        Self { contract, prices }
    }

    pub fn value(&self, z: f64) -> f64 {
        production_value(self, z)
    }

    /// Profit from holding `z` when the endowment is `endowment` and power trades at `price`.
    pub fn profit(&self, z: f64, endowment: f64, price: f64) -> f64 {
        self.value(z) - price * (z - endowment)
    }
}

pub fn production_value(f: &ProductionFunction, z: f64) -> f64 {
    separate_payoff(f.contract, z, &f.prices)
}

/// Power held by each member of a coalition after redistribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Redistribution {
    /// Producer indices, ascending.
    pub members: Vec<usize>,
    /// `quantities[k]` is held by `members[k]`.
    pub quantities: Vec<f64>,
}

impl Redistribution {
    pub fn total(&self) -> f64 {
        self.quantities.iter().sum()
    }
}

/// Greedy redistribution among `members`: the side with the smaller total
/// deviation is settled at the contract, and the other side absorbs the
/// imbalance in index order without crossing its contracts.
fn greedy_redistribution(contracts: &[f64], realizations: &[f64], members: &[usize]) -> Vec<f64> {
    let mut surplus = 0.0;
    let mut shortfall = 0.0;
    for &i in members {
        let d = realizations[i] - contracts[i];
        if d >= 0.0 {
            surplus += d;
        } else {
            shortfall -= d;
        }
    }
    let mut z: Vec<f64> = members.iter().map(|&i| realizations[i]).collect();
    if surplus < shortfall {
        // Surplus members hand over their excess.
        let mut pool = surplus;
        for (k, &i) in members.iter().enumerate() {
            let (c, x) = (contracts[i], realizations[i]);
            if x >= c {
                z[k] = c;
            } else {
                let take = pool.min(c - x);
                z[k] = x + take;
                pool -= take;
            }
        }
    } else {
        // Shortfall members are topped up to their contracts.
        let mut need = shortfall;
        for (k, &i) in members.iter().enumerate() {
            let (c, x) = (contracts[i], realizations[i]);
            if x < c {
                z[k] = c;
            } else {
                let give = need.min(x - c);
                z[k] = x - give;
                need -= give;
            }
        }
    }
    z
}

/// Maximizes the coalition's total production over redistributions of its
/// realized power. The optimum equals the pooled coalition value.
pub fn optimal_redistribution(
    snapshot: &ScenarioSnapshot,
    coalition: &CoalitionMask,
) -> Result<(Redistribution, f64)> {
    if coalition.is_empty() {
        return Err(Error::Config(
            "redistribution needs a nonempty coalition".into(),
        ));
    }
    if let Some(&index) = coalition.members().last() {
        if index >= snapshot.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: snapshot.len(),
            });
        }
    }
    let members = coalition.members().to_vec();
    let quantities = greedy_redistribution(snapshot.contracts(), snapshot.realizations(), &members);
    let prices = snapshot.prices();
    let value = members
        .iter()
        .zip(&quantities)
        .map(|(&i, &z)| separate_payoff(snapshot.contracts()[i], z, prices))
        .sum();
    Ok((
        Redistribution {
            members,
            quantities,
        },
        value,
    ))
}

/// Argmax of `f(z) - price * (z - x)` over `z >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BestResponse {
    /// The maximizers form `[lower, upper]`; `upper = None` means unbounded above.
    Interval { lower: f64, upper: Option<f64> },
    /// Price above `rt_buy`: selling everything is optimal, argmax `{0}`.
    SellAll,
    /// Price below `rt_sell`: profit grows without bound, no maximizer.
    Unbounded,
}

impl BestResponse {
    pub fn contains(&self, z: f64) -> bool {
        match *self {
            Self::Interval { lower, upper } => {
                z >= lower - 1e-9 * lower.abs().max(1.0)
                    && upper.is_none_or(|u| z <= u + 1e-9 * u.abs().max(1.0))
            }
            Self::SellAll => z == 0.0,
            Self::Unbounded => false,
        }
    }

    /// Whether the set has a maximizer at all.
    pub fn is_attained(&self) -> bool {
        !matches!(self, Self::Unbounded)
    }
}

pub fn best_response_set(f: &ProductionFunction, price: f64) -> BestResponse {
    let (buy, sell, c) = (f.prices.rt_buy(), f.prices.rt_sell(), f.contract);
    if price < sell {
        BestResponse::Unbounded
    } else if price > buy {
        BestResponse::SellAll
    } else if buy == sell {
        BestResponse::Interval {
            lower: 0.0,
            upper: None,
        }
    } else if price == buy {
        BestResponse::Interval {
            lower: 0.0,
            upper: Some(c),
        }
    } else if price == sell {
        BestResponse::Interval {
            lower: c,
            upper: None,
        }
    } else {
        BestResponse::Interval {
            lower: c,
            upper: Some(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompetitiveEquilibrium {
    pub price: f64,
    /// Redistribution over all producers.
    pub redistribution: Redistribution,
    /// `f_i(z_i) - price * (z_i - x_i)` per producer.
    pub payoffs: Vec<f64>,
    pub case: BalanceCase,
}

/// Competitive price and redistribution for the whole aggregation.
///
/// Net shortfall clears at `rt_buy`, net surplus at `rt_sell`, and exact
/// balance at the configured `p*` with everyone holding their contract.
pub fn solve_competitive_equilibrium(
    snapshot: &ScenarioSnapshot,
    config: &PamConfig,
) -> Result<CompetitiveEquilibrium> {
    let prices = snapshot.prices();
    let p_star = config.resolve_balance_price(prices)?;
    let case = classify_balance(snapshot, config);
    let members: Vec<usize> = (0..snapshot.len()).collect();
    let (price, quantities) = match case {
        BalanceCase::Shortfall => (
            prices.rt_buy(),
            greedy_redistribution(snapshot.contracts(), snapshot.realizations(), &members),
        ),
        BalanceCase::Surplus => (
            prices.rt_sell(),
            greedy_redistribution(snapshot.contracts(), snapshot.realizations(), &members),
        ),
        BalanceCase::Balanced => (p_star, snapshot.contracts().to_vec()),
    };
    let payoffs = quantities
        .iter()
        .zip(snapshot.contracts())
        .zip(snapshot.realizations())
        .map(|((&z, &c), &x)| ProductionFunction::new(c, *prices).profit(z, x, price))
        .collect();
    Ok(CompetitiveEquilibrium {
        price,
        redistribution: Redistribution {
            members,
            quantities,
        },
        payoffs,
        case,
    })
}

/// Checks that the redistribution game and the pooled coalition game agree on
/// every nonempty coalition.
pub fn verify_game_equivalence(snapshot: &ScenarioSnapshot, limit: usize) -> Result<bool> {
    let n = snapshot.len();
    if n > limit.min(62) {
        return Err(Error::TooManyProducers {
            producers: n,
            limit: limit.min(62),
        });
    }
    for bits in 1..(1u64 << n) {
        let coalition = CoalitionMask::from_bits(bits);
        let (_, value) = optimal_redistribution(snapshot, &coalition)?;
        if !approx_eq(value, coalition_value_bits(snapshot, bits)) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{allocate, BalancePriceRule};
    use crate::market::coalition_value;

    fn p(f: f64, b: f64, s: f64) -> PriceTriple {
        PriceTriple::new(f, b, s).unwrap()
    }

    fn snap(c: &[f64], x: &[f64], prices: PriceTriple) -> ScenarioSnapshot {
        ScenarioSnapshot::with_default_ids(c.to_vec(), x.to_vec(), prices).unwrap()
    }

    #[test]
    fn production_value_examples() {
        let f = ProductionFunction::new(100.0, p(10.0, 15.0, 5.0));
        assert_eq!(f.value(100.0), 1000.0);
        assert_eq!(f.value(60.0), 400.0);
        assert_eq!(f.value(140.0), 1200.0);
        for z in [0.0, 33.0, 100.0, 250.0] {
            assert_eq!(f.value(z), separate_payoff(100.0, z, &f.prices));
        }
    }

    #[test]
    fn redistribution_examples() {
        let prices = p(10.0, 15.0, 5.0);
        let s = snap(&[100.0, 50.0], &[80.0, 70.0], prices);
        let (z, v) = optimal_redistribution(&s, &CoalitionMask::full(2)).unwrap();
        assert_eq!(z.quantities, vec![100.0, 50.0]);
        assert_eq!(v, 1500.0);

        let s = snap(&[100.0, 50.0, 50.0], &[80.0, 60.0, 40.0], prices);
        let (z, v) = optimal_redistribution(&s, &CoalitionMask::full(3)).unwrap();
        assert_eq!(v, 1700.0);
        assert_eq!(z.quantities[1], 50.0);
        assert_eq!(z.quantities[0] - 80.0 + z.quantities[2] - 40.0, 10.0);
        assert_eq!(z.quantities, vec![90.0, 50.0, 40.0]);
        assert_eq!(z.total(), 180.0);

        let (z, v) = optimal_redistribution(&s, &CoalitionMask::singleton(2)).unwrap();
        assert_eq!(z.quantities, vec![40.0]);
        assert_eq!(v, separate_payoff(50.0, 40.0, &prices));

        assert!(optimal_redistribution(&s, &CoalitionMask::empty()).is_err());
        assert!(optimal_redistribution(&s, &CoalitionMask::singleton(3)).is_err());
    }

    #[test]
    fn redistribution_surplus_side() {
        let prices = p(10.0, 15.0, 5.0);
        let s = snap(&[100.0, 50.0, 50.0], &[110.0, 60.0, 45.0], prices);
        let (z, v) = optimal_redistribution(&s, &CoalitionMask::full(3)).unwrap();
        assert_eq!(z.quantities, vec![105.0, 60.0, 50.0]);
        assert_eq!(v, coalition_value(&s, &CoalitionMask::full(3)).unwrap());
    }

    #[test]
    fn best_response_examples() {
        let f = ProductionFunction::new(100.0, p(10.0, 15.0, 5.0));
        assert_eq!(
            best_response_set(&f, 15.0),
            BestResponse::Interval {
                lower: 0.0,
                upper: Some(100.0)
            }
        );
        assert_eq!(
            best_response_set(&f, 5.0),
            BestResponse::Interval {
                lower: 100.0,
                upper: None
            }
        );
        assert_eq!(
            best_response_set(&f, 10.0),
            BestResponse::Interval {
                lower: 100.0,
                upper: Some(100.0)
            }
        );
        assert_eq!(best_response_set(&f, 16.0), BestResponse::SellAll);
        assert_eq!(best_response_set(&f, 4.0), BestResponse::Unbounded);

        let flat = ProductionFunction::new(100.0, p(10.0, 8.0, 8.0));
        assert_eq!(
            best_response_set(&flat, 8.0),
            BestResponse::Interval {
                lower: 0.0,
                upper: None
            }
        );
    }

    #[test]
    fn best_response_matches_grid_argmax() {
        let f = ProductionFunction::new(100.0, p(10.0, 15.0, 5.0));
        let x = 70.0;
        for price in [5.0, 7.5, 10.0, 14.0, 15.0] {
            let br = best_response_set(&f, price);
            let grid: Vec<f64> = (0..=400).map(|k| k as f64).collect();
            let best = grid
                .iter()
                .map(|&z| f.profit(z, x, price))
                .fold(f64::NEG_INFINITY, f64::max);
            for &z in &grid {
                let optimal = (f.profit(z, x, price) - best).abs() < 1e-9;
                assert_eq!(br.contains(z), optimal, "price {price}, z {z}");
            }
        }
        // Above the band the profit falls with z.
        let br = best_response_set(&f, 20.0);
        assert!(br.contains(0.0) && !br.contains(1.0));
        assert!(f.profit(0.0, x, 20.0) > f.profit(1.0, x, 20.0));
        // Below the band it keeps rising.
        assert!(!best_response_set(&f, 1.0).is_attained());
        assert!(f.profit(1e6, x, 1.0) > f.profit(1e3, x, 1.0));
    }

    #[test]
    fn equilibrium_examples() {
        let prices = p(10.0, 15.0, 5.0);
        let cfg = PamConfig::default();

        let s = snap(&[100.0, 50.0, 50.0], &[80.0, 60.0, 40.0], prices);
        let ce = solve_competitive_equilibrium(&s, &cfg).unwrap();
        assert_eq!(ce.price, 15.0);
        assert_eq!(ce.payoffs, vec![700.0, 650.0, 350.0]);
        assert_eq!(ce.case, BalanceCase::Shortfall);

        let s = snap(&[100.0, 50.0, 50.0], &[110.0, 60.0, 50.0], prices);
        let ce = solve_competitive_equilibrium(&s, &cfg).unwrap();
        assert_eq!(ce.price, 5.0);
        assert_eq!(ce.payoffs, vec![1050.0, 550.0, 500.0]);

        let s = snap(&[100.0, 50.0], &[80.0, 70.0], prices);
        let ce = solve_competitive_equilibrium(&s, &cfg).unwrap();
        assert_eq!(ce.price, 10.0);
        assert_eq!(ce.redistribution.quantities, vec![100.0, 50.0]);
        assert_eq!(ce.payoffs, vec![800.0, 700.0]);
    }

    #[test]
    fn equilibrium_matches_allocation_for_every_p_star() {
        let prices = p(10.0, 15.0, 5.0);
        let s = snap(&[100.0, 50.0, 25.0], &[80.0, 70.0, 25.0], prices);
        for rule in [
            BalancePriceRule::RtSell,
            BalancePriceRule::Midpoint,
            BalancePriceRule::RtBuy,
            BalancePriceRule::Explicit(6.0),
        ] {
            let cfg = PamConfig::with_rule(rule);
            let ce = solve_competitive_equilibrium(&s, &cfg).unwrap();
            let alloc = allocate(&s, &cfg).unwrap();
            assert_eq!(ce.payoffs, alloc.payoffs);
            for (i, &z) in ce.redistribution.quantities.iter().enumerate() {
                let f = ProductionFunction::new(s.contracts()[i], prices);
                assert!(best_response_set(&f, ce.price).contains(z));
            }
        }
    }

    #[test]
    fn game_equivalence_small_cases() {
        let s = snap(&[30.0], &[12.0], p(10.0, 15.0, 5.0));
        assert!(verify_game_equivalence(&s, 20).unwrap());
        let s = snap(&[30.0, 10.0, 5.0], &[12.0, 40.0, 5.0], p(10.0, 9.0, 9.0));
        assert!(verify_game_equivalence(&s, 20).unwrap());
        let s = snap(&[1.0; 3], &[1.0; 3], p(10.0, 9.0, 9.0));
        assert!(verify_game_equivalence(&s, 2).is_err());
    }
}
