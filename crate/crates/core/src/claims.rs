//! Claim specifications: payoff families, expiry rules, payment rates and the
//! drivers a claim depends on.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::sde::ScenarioSet;

/// Market state handed to payoff and rate functions.
#[derive(Debug, Clone, Copy)]
pub struct StatePoint<'a> {
    pub t: f64,
    pub prices: &'a [f64],
    pub aux: f64,
    pub bond: f64,
}

impl<'a> StatePoint<'a> {
    pub fn at(scenarios: &'a ScenarioSet, path: usize, step: usize) -> Self {
        Self {
            t: scenarios.grid().t(step),
            prices: scenarios.prices(path, step),
            aux: scenarios.aux(path, step),
            bond: scenarios.bond(path, step),
        }
    }
}

/// What a payoff or hitting rule looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Underlying {
    Asset(usize),
    Aux,
}

impl Underlying {
    fn value(&self, s: &StatePoint<'_>) -> f64 {
        match *self {
            Underlying::Asset(i) => s.prices[i],
            Underlying::Aux => s.aux,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match *self {
            Underlying::Asset(i) if i >= n => invalid(format!("asset index {i} out of range for {n} assets")),
            _ => Ok(()),
        }
    }
}

impl Default for Underlying {
    fn default() -> Self {
        Underlying::Asset(0)
    }
}

/// User-supplied payoff; not serializable.
#[derive(Clone)]
pub struct CustomPayoff(pub Arc<dyn Fn(&StatePoint<'_>) -> f64 + Send + Sync>);

impl fmt::Debug for CustomPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomPayoff")
    }
}

impl PartialEq for CustomPayoff {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Payoff {
    Call {
        strike: f64,
        #[serde(default)]
        underlying: Underlying,
    },
    Put {
        strike: f64,
        #[serde(default)]
        underlying: Underlying,
    },
    Forward {
        strike: f64,
        #[serde(default)]
        underlying: Underlying,
    },
    /// Linear interpolation through `(x, y)` knots sorted by `x`, extended
    /// beyond the ends with the end slopes.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
        #[serde(default)]
        underlying: Underlying,
    },
    Constant {
        value: f64,
    },
    /// `amount * B(t)`.
    BondMultiple {
        amount: f64,
    },
    /// `sum_j weight_j * payoff_j`.
    Combination {
        terms: Vec<(f64, Payoff)>,
    },
    #[serde(skip)]
    Custom(CustomPayoff),
}

impl Payoff {
    pub fn evaluate(&self, s: &StatePoint<'_>) -> f64 {
        match self {
            Payoff::Call { strike, underlying } => (underlying.value(s) - strike).max(0.0),
            Payoff::Put { strike, underlying } => (strike - underlying.value(s)).max(0.0),
            Payoff::Forward { strike, underlying } => underlying.value(s) - strike,
            Payoff::PiecewiseLinear { knots, underlying } => interpolate(knots, underlying.value(s)),
            Payoff::Constant { value } => *value,
            Payoff::BondMultiple { amount } => amount * s.bond,
            Payoff::Combination { terms } => terms.iter().map(|(w, p)| w * p.evaluate(s)).sum(),
            Payoff::Custom(f) => (f.0)(s),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let finite = |x: f64, what: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                invalid(format!("{what} must be finite"))
            }
        };
        match self {
            Payoff::Call { strike, underlying }
            | Payoff::Put { strike, underlying }
            | Payoff::Forward { strike, underlying } => {
                finite(*strike, "strike")?;
                underlying.validate(n)
            }
            Payoff::PiecewiseLinear { knots, underlying } => {
                if knots.len() < 2 {
                    return invalid("piecewise-linear payoff needs at least two knots");
                }
                if knots.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                    return invalid("piecewise-linear knots must be finite");
                }
                if knots.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return invalid("piecewise-linear knots must be strictly increasing in x");
                }
                underlying.validate(n)
            }
            Payoff::Constant { value } => finite(*value, "constant payoff"),
            Payoff::BondMultiple { amount } => finite(*amount, "bond multiple"),
            Payoff::Combination { terms } => {
                for (w, p) in terms {
                    finite(*w, "combination weight")?;
                    p.validate(n)?;
                }
                Ok(())
            }
            Payoff::Custom(_) => Ok(()),
        }
    }

    pub fn custom(f: impl Fn(&StatePoint<'_>) -> f64 + Send + Sync + 'static) -> Self {
        Payoff::Custom(CustomPayoff(Arc::new(f)))
    }
}

fn interpolate(knots: &[(f64, f64)], x: f64) -> f64 {
    let i = knots.partition_point(|k| k.0 <= x).clamp(1, knots.len() - 1);
    let (x0, y0) = knots[i - 1];
    let (x1, y1) = knots[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Above,
    Below,
}

/// When the claim settles. Hitting rules fall back to the horizon when the
/// level is never reached on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Expiry {
    #[default]
    Horizon,
    FirstHitting {
        underlying: Underlying,
        level: f64,
        direction: Direction,
    },
}

impl Expiry {
    /// Grid index of expiry on one path.
    pub fn index(&self, scenarios: &ScenarioSet, path: usize) -> usize {
        let last = scenarios.n_steps();
        match *self {
            Expiry::Horizon => last,
            Expiry::FirstHitting {
                underlying,
                level,
                direction,
            } => (0..=last)
                .find(|&k| {
                    let v = underlying.value(&StatePoint::at(scenarios, path, k));
                    match direction {
                        Direction::Above => v >= level,
                        Direction::Below => v <= level,
                    }
                })
                .unwrap_or(last),
        }
    }
}

/// Continuous payment rate `c` with `dGamma = c dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum RateFamily {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `coefficient * P_asset(t)`, a dividend-like stream.
    Proportional {
        asset: usize,
        coefficient: f64,
    },
}

impl RateFamily {
    pub fn evaluate(&self, s: &StatePoint<'_>) -> f64 {
        match *self {
            RateFamily::Zero => 0.0,
            RateFamily::Constant { value } => value,
            RateFamily::Proportional { asset, coefficient } => coefficient * s.prices[asset],
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RateFamily::Zero)
    }

    fn validate(&self, n: usize) -> Result<()> {
        match *self {
            RateFamily::Zero => Ok(()),
            RateFamily::Constant { value } if value.is_finite() => Ok(()),
            RateFamily::Proportional { asset, coefficient } if asset < n && coefficient.is_finite() => Ok(()),
            _ => invalid("payment rate parameters out of range"),
        }
    }
}

/// A claim paying `rate` until expiry and `payoff` at expiry. For American
/// claims `payoff` is the lump-sum settlement `L` and `expiry` is the horizon
/// rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimSpec {
    pub payoff: Payoff,
    #[serde(default)]
    pub expiry: Expiry,
    #[serde(default)]
    pub rate: RateFamily,
    /// 0-based driver indices the claim is measurable with respect to.
    #[serde(default)]
    pub driver_support: Vec<usize>,
}

impl ClaimSpec {
    pub fn new(payoff: Payoff) -> Self {
        Self {
            payoff,
            expiry: Expiry::Horizon,
            rate: RateFamily::Zero,
            driver_support: Vec::new(),
        }
    }

    pub fn with_rate(mut self, rate: RateFamily) -> Self {
        self.rate = rate;
        self
    }

    pub fn with_expiry(mut self, expiry: Expiry) -> Self {
        self.expiry = expiry;
        self
    }

    pub fn with_support(mut self, support: Vec<usize>) -> Self {
        self.driver_support = support;
        self
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        self.payoff.validate(n)?;
        self.rate.validate(n)?;
        if let Expiry::FirstHitting { underlying, level, .. } = self.expiry {
            underlying.validate(n)?;
            if !level.is_finite() {
                return invalid("hitting level must be finite");
            }
        }
        validate_support(&self.driver_support, d)
    }

    /// Driver support, or every driver when none was declared.
    pub fn support_or_all(&self, d: usize) -> Vec<usize> {
        if self.driver_support.is_empty() {
            (0..d).collect()
        } else {
            self.driver_support.clone()
        }
    }

    pub(crate) fn payoff_checked(&self, s: &StatePoint<'_>, path: usize) -> Result<f64> {
        let v = self.payoff.evaluate(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "payoff", path })
        }
    }

    pub(crate) fn rate_checked(&self, s: &StatePoint<'_>, path: usize) -> Result<f64> {
        let v = self.rate.evaluate(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: "payment rate",
                path,
            })
        }
    }
}

pub(crate) fn validate_support(support: &[usize], d: usize) -> Result<()> {
    if let Some(&i) = support.iter().find(|&&i| i >= d) {
        return invalid(format!("driver {i} out of range for {d} drivers"));
    }
    let mut sorted = support.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != support.len() {
        return invalid("driver support lists a driver twice");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{simulate_scenarios, MarketModel, TimeGrid};

    fn point(prices: &[f64]) -> StatePoint<'_> {
        StatePoint {
            t: 0.5,
            prices,
            aux: 2.0,
            bond: 1.1,
        }
    }

    #[test]
    fn payoff_families() {
        let s = point(&[105.0]);
        let a = Underlying::Asset(0);
        assert_eq!(
            Payoff::Call {
                strike: 100.0,
                underlying: a
            }
            .evaluate(&s),
            5.0
        );
        assert_eq!(
            Payoff::Put {
                strike: 100.0,
                underlying: a
            }
            .evaluate(&s),
            0.0
        );
        assert_eq!(
            Payoff::Forward {
                strike: 110.0,
                underlying: a
            }
            .evaluate(&s),
            -5.0
        );
        assert_eq!(Payoff::BondMultiple { amount: 2.0 }.evaluate(&s), 2.2);
        assert_eq!(
            Payoff::Call {
                strike: 1.5,
                underlying: Underlying::Aux
            }
            .evaluate(&s),
            0.5
        );
        let combo = Payoff::Combination {
            terms: vec![
                (
                    1.0,
                    Payoff::Call {
                        strike: 100.0,
                        underlying: a,
                    },
                ),
                (
                    -1.0,
                    Payoff::Put {
                        strike: 100.0,
                        underlying: a,
                    },
                ),
            ],
        };
        assert_eq!(combo.evaluate(&s), 5.0);
        assert_eq!(Payoff::custom(|s| s.t).evaluate(&s), 0.5);
    }

    #[test]
    fn piecewise_linear_extrapolates_with_end_slopes() {
        let p = Payoff::PiecewiseLinear {
            knots: vec![(90.0, 0.0), (100.0, 0.0), (110.0, 10.0)],
            underlying: Underlying::Asset(0),
        };
        assert_eq!(p.evaluate(&point(&[80.0])), 0.0);
        assert_eq!(p.evaluate(&point(&[105.0])), 5.0);
        assert_eq!(p.evaluate(&point(&[120.0])), 20.0);
        assert!(p.validate(1).is_ok());
        let bad = Payoff::PiecewiseLinear {
            knots: vec![(1.0, 0.0), (1.0, 1.0)],
            underlying: Underlying::Asset(0),
        };
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn support_validation() {
        assert!(validate_support(&[0, 1], 2).is_ok());
        assert!(validate_support(&[2], 2).is_err());
        assert!(validate_support(&[0, 0], 2).is_err());
        let c = ClaimSpec::new(Payoff::Constant { value: 1.0 });
        assert_eq!(c.support_or_all(3), vec![0, 1, 2]);
    }

    #[test]
    fn hitting_expiry() {
        let m = MarketModel::black_scholes(100.0, 0.0, 0.0, 0.0, 0.3).unwrap();
        let s = simulate_scenarios(&m, &TimeGrid::uniform(1.0, 20).unwrap(), 30, 6).unwrap();
        let e = Expiry::FirstHitting {
            underlying: Underlying::Asset(0),
            level: 105.0,
            direction: Direction::Above,
        };
        for p in 0..30 {
            let k = e.index(&s, p);
            for j in 0..k {
                assert!(s.price(p, j, 0) < 105.0);
            }
            assert!(k == 20 || s.price(p, k, 0) >= 105.0);
        }
        assert_eq!(Expiry::Horizon.index(&s, 0), 20);
    }

    #[test]
    fn claim_round_trips_through_json() {
        let c = ClaimSpec::new(Payoff::Put {
            strike: 100.0,
            underlying: Underlying::Asset(0),
        })
        .with_rate(RateFamily::Constant { value: 0.5 })
        .with_support(vec![0]);
        let text = serde_json::to_string(&c).unwrap();
        let back: ClaimSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
