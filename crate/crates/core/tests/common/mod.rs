//! Generators and brute-force oracles shared by the integration tests.
//!
//! The oracles deliberately avoid the library's helpers: payoffs are written
//! as explicit case splits and coalitions are enumerated from raw bitmasks.

#![allow(dead_code)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpp_pam::{PriceTriple, ScenarioSnapshot};

pub const REL: f64 = 1e-9;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * a.abs().max(b.abs()).max(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- oracles

/// Stand-alone payoff written as a case split on the sign of the deviation.
pub fn payoff_oracle(c: f64, x: f64, p: &PriceTriple) -> f64 {
    if x < c {
        p.day_ahead() * c - p.rt_buy() * (c - x)
    } else {
        p.day_ahead() * c + p.rt_sell() * (x - c)
    }
}

/// Value of the pooled coalition selected by `mask`.
pub fn pooled_oracle(s: &ScenarioSnapshot, mask: u64) -> f64 {
    let (mut c, mut x) = (0.0, 0.0);
    for i in 0..s.len() {
        if mask >> i & 1 == 1 {
            c += s.contracts()[i];
            x += s.realizations()[i];
        }
    }
    if mask == 0 {
        0.0
    } else {
        payoff_oracle(c, x, s.prices())
    }
}

/// `(p_rb - p_rs) * min(total surplus, total shortfall)` from the definitions.
pub fn excess_oracle(s: &ScenarioSnapshot) -> f64 {
    let mut surplus = 0.0;
    let mut shortfall = 0.0;
    for (c, x) in s.contracts().iter().zip(s.realizations()) {
        if x >= c {
            surplus += x - c;
        } else {
            shortfall += c - x;
        }
    }
    (s.prices().rt_buy() - s.prices().rt_sell()) * surplus.min(shortfall)
}

/// Largest `v(T) - sum_{i in T} P_i` over nonempty coalitions, with the
/// lowest bitmask attaining it.
pub fn core_oracle(s: &ScenarioSnapshot, payoffs: &[f64]) -> (f64, u64) {
    let n = s.len();
    let mut best = (f64::NEG_INFINITY, 0);
    for mask in 1u64..(1 << n) {
        let paid: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| payoffs[i])
            .sum();
        let gap = pooled_oracle(s, mask) - paid;
        if gap > best.0 {
            best = (gap, mask);
        }
    }
    best
}

/// Dense grid search of `f_a(z) + f_b(total - z)` over `z in [0, total]`.
/// Returns the best value found and the grid step.
pub fn two_member_grid(ca: f64, cb: f64, total: f64, p: &PriceTriple, points: usize) -> (f64, f64) {
    let step = total / points as f64;
    let best = (0..=points)
        .map(|k| {
            let z = if k == points { total } else { step * k as f64 };
            payoff_oracle(ca, z, p) + payoff_oracle(cb, total - z, p)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    (best, step)
}

/// Expected stand-alone payoff under a normal truncated to `[lower, upper]`,
/// by composite Simpson integration of the density.
pub fn expected_payoff_integral(
    mean: f64,
    sd: f64,
    lower: f64,
    upper: Option<f64>,
    c: f64,
    p: &PriceTriple,
) -> f64 {
    let a = lower.max(mean - 12.0 * sd);
    let b = upper.unwrap_or(f64::INFINITY).min(mean + 12.0 * sd);
    let density = |x: f64| (-0.5 * ((x - mean) / sd).powi(2)).exp();
    let simpson = |g: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize| {
        let h = (hi - lo) / n as f64;
        let mut acc = g(lo) + g(hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g(lo + h * k as f64);
        }
        acc * h / 3.0
    };
    let n = 200_000;
    // Split at the contract so the kink sits on a node.
    let kink = c.clamp(a, b);
    let mass = simpson(&density, a, kink, n) + simpson(&density, kink, b, n);
    let weighted = |x: f64| payoff_oracle(c, x, p) * density(x);
    (simpson(&weighted, a, kink, n) + simpson(&weighted, kink, b, n)) / mass
}

// ------------------------------------------------------------- generators

/// Prices with `rt_sell` in [-10, 10], a spread in [0, 20] (zero one time in
/// twenty) and a day-ahead price anywhere in `[rt_sell - 5, rt_buy + 5]`.
pub fn random_prices<R: Rng>(r: &mut R) -> PriceTriple {
    let sell = r.random_range(-10.0..=10.0);
    let spread = if r.random_bool(0.05) {
        0.0
    } else {
        r.random_range(0.0..=20.0)
    };
    let buy = sell + spread;
    let f = r.random_range(sell - 5.0..=buy + 5.0);
    PriceTriple::new(f, buy, sell).unwrap()
}

/// Uniform in `[0, hi]` on a 2^-20 grid, so sums of a few dozen values are
/// exact in binary floating point.
pub fn dyadic<R: Rng>(r: &mut R, hi: f64) -> f64 {
    let scale = (1u64 << 20) as f64;
    r.random_range(0..=(hi * scale) as u64) as f64 / scale
}

pub fn random_snapshot<R: Rng>(r: &mut R, n: usize) -> ScenarioSnapshot {
    let c = (0..n).map(|_| dyadic(r, 200.0)).collect();
    let x = (0..n).map(|_| dyadic(r, 200.0)).collect();
    ScenarioSnapshot::with_default_ids(c, x, random_prices(r)).unwrap()
}

/// Snapshot whose total realization equals its total contract exactly.
pub fn balanced_snapshot<R: Rng>(r: &mut R, n: usize) -> ScenarioSnapshot {
    loop {
        let c: Vec<f64> = (0..n).map(|_| dyadic(r, 200.0)).collect();
        let mut x: Vec<f64> = (0..n - 1).map(|_| dyadic(r, 200.0)).collect();
        let rest = c.iter().sum::<f64>() - x.iter().sum::<f64>();
        if rest < 0.0 {
            continue;
        }
        x.push(rest);
        let s = ScenarioSnapshot::with_default_ids(c, x, random_prices(r)).unwrap();
        assert_eq!(s.total_contract(), s.total_realization());
        return s;
    }
}

// ------------------------------------------------------ proptest strategies

pub fn prices_strategy() -> impl Strategy<Value = PriceTriple> {
    (
        -10.0..10.0f64,
        prop_oneof![1 => Just(0.0), 9 => 0.0..20.0f64],
        0.0..1.0f64,
    )
        .prop_map(|(sell, spread, t)| {
            let buy = sell + spread;
            let f = sell - 5.0 + t * (spread + 10.0);
            PriceTriple::new(f, buy, sell).unwrap()
        })
}

fn quantity() -> impl Strategy<Value = f64> {
    prop_oneof![
        1 => Just(0.0),
        1 => (0u32..=200).prop_map(f64::from),
        6 => 0.0..200.0f64,
    ]
}

/// Snapshots with `1..=max_n` producers; integer-valued quantities show up
/// often so ties and exact balance get exercised.
pub fn snapshot_strategy(max_n: usize) -> impl Strategy<Value = ScenarioSnapshot> {
    (1..=max_n)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(quantity(), n),
                prop::collection::vec(quantity(), n),
                prices_strategy(),
            )
        })
        .prop_map(|(c, x, p)| ScenarioSnapshot::with_default_ids(c, x, p).unwrap())
}

/// Snapshots with exact total balance, built from integer quantities.
pub fn balanced_strategy(max_n: usize) -> impl Strategy<Value = ScenarioSnapshot> {
    (2..=max_n)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u32..=200, n),
                prop::collection::vec(0.0..1.0f64, n),
                prices_strategy(),
            )
        })
        .prop_map(|(c, weights, p)| {
            // Redistribute the contract total by weights, rounding to integers
            // and absorbing the remainder in the last producer.
            let total: u32 = c.iter().sum();
            let wsum: f64 = weights.iter().sum::<f64>().max(1e-12);
            let mut x: Vec<u32> = weights
                .iter()
                .map(|w| (w / wsum * f64::from(total)).floor() as u32)
                .collect();
            let used: u32 = x.iter().sum();
            *x.last_mut().unwrap() += total - used;
            ScenarioSnapshot::with_default_ids(
                c.into_iter().map(f64::from).collect(),
                x.into_iter().map(f64::from).collect(),
                p,
            )
            .unwrap()
        })
}
