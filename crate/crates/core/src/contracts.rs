//! Day-ahead contract sizing for a single producer.
//!
//! Generation is modelled as a normal distribution centred on the forecast
//! and truncated to physical bounds. The expected stand-alone payoff is
//! maximized by the news-vendor quantile
//! `q = (p_f - p_rs) / (p_rb - p_rs)` of that distribution.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::market::{separate_payoff, PriceTriple};

/// Truncation bounds of a generation distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    /// May be `-inf` to disable truncation from below.
    pub lower: f64,
    /// Capacity; `None` means unbounded.
    pub upper: Option<f64>,
}

impl Bounds {
    /// Nonnegative output, no capacity.
    pub const NONNEGATIVE: Bounds = Bounds {
        lower: 0.0,
        upper: None,
    };
    pub const UNBOUNDED: Bounds = Bounds {
        lower: f64::NEG_INFINITY,
        upper: None,
    };
}

impl Default for Bounds {
    fn default() -> Self {
        Self::NONNEGATIVE
    }
}

/// Normal distribution of one hour's generation, truncated to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationDistribution {
    mean: f64,
    std_dev: f64,
    bounds: Bounds,
}

impl GenerationDistribution {
    pub fn new(mean: f64, std_dev: f64, bounds: Bounds) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::Distribution(format!(
                "mean must be finite, got {mean}"
            )));
        }
        if !(std_dev.is_finite() && std_dev >= 0.0) {
            return Err(Error::Distribution(format!(
                "standard deviation must be finite and >= 0, got {std_dev}"
            )));
        }
        if bounds.lower.is_nan() || bounds.lower == f64::INFINITY {
            return Err(Error::Distribution(format!(
                "invalid lower bound {}",
                bounds.lower
            )));
        }
        if let Some(upper) = bounds.upper {
            if !(upper.is_finite() && upper >= bounds.lower) {
                return Err(Error::Distribution(format!(
                    "upper bound {upper} must be finite and >= lower bound {}",
                    bounds.lower
                )));
            }
        }
        let dist = Self {
            mean,
            std_dev,
            bounds,
        };
        if std_dev > 0.0 && dist.mass() <= 0.0 {
            return Err(Error::Distribution(format!(
                "truncation [{}, {:?}] holds no probability mass for N({mean}, {std_dev}^2)",
                bounds.lower, bounds.upper
            )));
        }
        Ok(dist)
    }

    /// Plain normal, no truncation.
    pub fn normal(mean: f64, std_dev: f64) -> Result<Self> {
        Self::new(mean, std_dev, Bounds::UNBOUNDED)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std_dev(&self) -> f64 {
        self.std_dev
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    fn upper(&self) -> f64 {
        self.bounds.upper.unwrap_or(f64::INFINITY)
    }

    fn standardized(&self, x: f64) -> f64 {
        (x - self.mean) / self.std_dev
    }

    // Lower truncation point lies right of the mean; work with survival
    // probabilities to keep precision in the tail.
    fn right_tail(&self) -> bool {
        self.standardized(self.bounds.lower) > 0.0
    }

    fn mass(&self) -> f64 {
        let phi = Normal::standard();
        let (a, b) = (
            self.standardized(self.bounds.lower),
            self.standardized(self.upper()),
        );
        if self.right_tail() {
            phi.sf(a) - phi.sf(b)
        } else {
            phi.cdf(b) - phi.cdf(a)
        }
    }

    fn point_mass(&self) -> f64 {
        self.mean.clamp(self.bounds.lower, self.upper())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x < self.bounds.lower {
            return 0.0;
        }
        if x >= self.upper() {
            return 1.0;
        }
        if self.std_dev == 0.0 {
            return if x >= self.point_mass() { 1.0 } else { 0.0 };
        }
        let phi = Normal::standard();
        let (a, t) = (self.standardized(self.bounds.lower), self.standardized(x));
        let p = if self.right_tail() {
            (phi.sf(a) - phi.sf(t)) / self.mass()
        } else {
            (phi.cdf(t) - phi.cdf(a)) / self.mass()
        };
        p.clamp(0.0, 1.0)
    }

    /// Density inside the bounds; zero outside. Undefined for `std_dev == 0`.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.bounds.lower || x > self.upper() || self.std_dev == 0.0 {
            return 0.0;
        }
        Normal::standard().pdf(self.standardized(x)) / (self.std_dev * self.mass())
    }

    /// Inverse CDF. `q = 0` gives the lower bound and `q = 1` the upper bound,
    /// either of which may be infinite.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Distribution(format!(
                "probability {q} outside [0, 1]"
            )));
        }
        if q == 0.0 {
            return Ok(self.bounds.lower);
        }
        if q == 1.0 {
            return Ok(self.upper());
        }
        if self.std_dev == 0.0 {
            return Ok(self.point_mass());
        }
        let phi = Normal::standard();
        let a = self.standardized(self.bounds.lower);
        let b = self.standardized(self.upper());
        let z = if self.right_tail() {
            let (sa, sb) = (phi.sf(a), phi.sf(b));
            let s = (sa - q * (sa - sb)).clamp(0.0, 1.0);
            -phi.inverse_cdf(s)
        } else {
            let (fa, fb) = (phi.cdf(a), phi.cdf(b));
            let u = (fa + q * (fb - fa)).clamp(0.0, 1.0);
            phi.inverse_cdf(u)
        };
        Ok((self.mean + self.std_dev * z).clamp(self.bounds.lower, self.upper()))
    }

    /// One draw by inversion of a uniform on `(0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        // u is strictly inside (0, 1), so the quantile cannot fail.
        self.quantile(u).unwrap_or(self.mean)
    }

    /// `n` draws from a ChaCha8 stream seeded with `seed`.
    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// Past `(forecast, actual)` pairs of one producer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    observations: Vec<(f64, f64)>,
}

impl TrainingWindow {
    pub fn new(observations: Vec<(f64, f64)>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Distribution("training window is empty".into()));
        }
        if let Some((f, a)) = observations
            .iter()
            .find(|(f, a)| !(f.is_finite() && *f >= 0.0 && a.is_finite() && *a >= 0.0))
        {
            return Err(Error::Distribution(format!(
                "training observation (forecast {f}, actual {a}) must be finite and >= 0"
            )));
        }
        Ok(Self { observations })
    }

    pub fn observations(&self) -> &[(f64, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Sample standard deviation (n - 1 denominator) of `actual - forecast`.
    pub fn forecast_error_std(&self) -> Result<f64> {
        let n = self.observations.len();
        if n < 2 {
            return Err(Error::Distribution(format!(
                "need at least 2 observations for a sample variance, got {n}"
            )));
        }
        let errors = self.observations.iter().map(|(f, a)| a - f);
        let mean = errors.clone().sum::<f64>() / n as f64;
        let ss: f64 = errors.map(|e| (e - mean) * (e - mean)).sum();
        Ok((ss / (n - 1) as f64).sqrt())
    }
}

/// Distribution centred on `forecast` with the window's forecast-error spread.
pub fn fit_distribution(
    forecast: f64,
    window: &TrainingWindow,
    bounds: Bounds,
) -> Result<GenerationDistribution> {
    GenerationDistribution::new(forecast, window.forecast_error_std()?, bounds)
}

/// News-vendor critical ratio `(p_f - p_rs) / (p_rb - p_rs)`, clamped to `[0, 1]`.
///
/// With no real-time spread every contract earns the same in expectation
/// unless `p_f` differs from the common price; the result is 0 when
/// `p_f <= p_rb` and 1 otherwise.
pub fn critical_quantile(prices: &PriceTriple) -> f64 {
    let spread = prices.spread();
    if spread == 0.0 {
        return if prices.day_ahead() <= prices.rt_buy() {
            0.0
        } else {
            1.0
        };
    }
    ((prices.day_ahead() - prices.rt_sell()) / spread).clamp(0.0, 1.0)
}

/// Expected-payoff-maximizing day-ahead contract, never negative.
///
/// Fails when the critical ratio is 1 and the distribution has no capacity:
/// the optimal contract would be unbounded.
pub fn optimal_contract(dist: &GenerationDistribution, prices: &PriceTriple) -> Result<f64> {
    let q = critical_quantile(prices);
    if q == 1.0 && dist.bounds.upper.is_none() {
        return Err(Error::Distribution(
            "day-ahead price at or above the real-time buy price makes the optimal contract \
             unbounded; supply a capacity"
                .into(),
        ));
    }
    Ok(dist.quantile(q)?.max(0.0))
}

/// Monte Carlo mean of the stand-alone payoff of contract `contract`.
pub fn expected_separate_payoff(
    dist: &GenerationDistribution,
    contract: f64,
    prices: &PriceTriple,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Distribution("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..samples)
        .map(|_| separate_payoff(contract, dist.sample(&mut rng), prices))
        .sum();
    Ok(total / samples as f64)
}

/// Sample mean of `payoff(a, X) - payoff(b, X)` and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayoffDifference {
    pub mean: f64,
    pub std_error: f64,
}

/// Empirical expected payoff over a fixed sample, evaluated for any contract
/// in `O(log n)` through prefix sums over the sorted draws.
///
/// Agrees with [`expected_separate_payoff`] on the same draws up to
/// summation order.
#[derive(Debug, Clone)]
pub struct SampledPayoffCurve {
    sorted: Vec<f64>,
    // prefix[k] = sum of the k smallest draws (and of their squares)
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
    prices: PriceTriple,
}

#[derive(Debug, Clone, Copy, Default)]
struct RangeSums {
    count: f64,
    sum: f64,
    sum_sq: f64,
}

impl SampledPayoffCurve {
    pub fn new(mut draws: Vec<f64>, prices: PriceTriple) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Distribution("need at least one sample".into()));
        }
        draws.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(draws.len() + 1);
        let mut prefix_sq = Vec::with_capacity(draws.len() + 1);
        let (mut s, mut s2) = (0.0, 0.0);
        prefix.push(0.0);
        prefix_sq.push(0.0);
        for &x in &draws {
            s += x;
            s2 += x * x;
            prefix.push(s);
            prefix_sq.push(s2);
        }
        Ok(Self {
            sorted: draws,
            prefix,
            prefix_sq,
            prices,
        })
    }

    pub fn from_distribution(
        dist: &GenerationDistribution,
        prices: PriceTriple,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(dist.sample_n(samples, seed), prices)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    fn below(&self, c: f64) -> usize {
        self.sorted.partition_point(|&x| x < c)
    }

    fn range(&self, lo: usize, hi: usize) -> RangeSums {
        RangeSums {
            count: (hi - lo) as f64,
            sum: self.prefix[hi] - self.prefix[lo],
            sum_sq: self.prefix_sq[hi] - self.prefix_sq[lo],
        }
    }

    pub fn mean_payoff(&self, contract: f64) -> f64 {
        let n = self.sorted.len();
        let k = self.below(contract);
        let low = self.range(0, k);
        let high = self.range(k, n);
        let shortfall = low.count * contract - low.sum;
        let surplus = high.sum - high.count * contract;
        let p = &self.prices;
        p.day_ahead() * contract + (p.rt_sell() * surplus - p.rt_buy() * shortfall) / n as f64
    }

    // payoff(c, x) = intercept + slope * x on either side of the kink
    fn linear_piece(&self, contract: f64, below_kink: bool) -> (f64, f64) {
        let p = &self.prices;
        if below_kink {
            ((p.day_ahead() - p.rt_buy()) * contract, p.rt_buy())
        } else {
            ((p.day_ahead() - p.rt_sell()) * contract, p.rt_sell())
        }
    }

    /// Paired difference `payoff(a, X) - payoff(b, X)` over the sample.
    pub fn difference(&self, a: f64, b: f64) -> PayoffDifference {
        let n = self.sorted.len();
        let (lo, hi) = (a.min(b), a.max(b));
        let (k_lo, k_hi) = (self.below(lo), self.below(hi));
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        // Draws below lo, between lo and hi, and at or above hi.
        for (range, x_probe) in [
            (self.range(0, k_lo), lo - 1.0),
            (self.range(k_lo, k_hi), 0.5 * (lo + hi)),
            (self.range(k_hi, n), hi + 1.0),
        ] {
            if range.count == 0.0 {
                continue;
            }
            let (ia, sa) = self.linear_piece(a, x_probe < a);
            let (ib, sb) = self.linear_piece(b, x_probe < b);
            let (i, s) = (ia - ib, sa - sb);
            sum += i * range.count + s * range.sum;
            sum_sq += i * i * range.count + 2.0 * i * s * range.sum + s * s * range.sum_sq;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        PayoffDifference {
            mean,
            std_error: (var / nf).sqrt(),
        }
    }
}
