//! Market coefficients `r`, `b`, `delta`, `sigma` and the optional auxiliary
//! state channel.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Coefficients evaluated at one `(t, prices, aux)` point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientValues {
    pub rate: f64,
    pub drift: Vec<f64>,
    pub dividend: Vec<f64>,
    /// `n x d`, row-major.
    pub volatility: Vec<f64>,
    n: usize,
    d: usize,
}

impl CoefficientValues {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            rate: 0.0,
            drift: vec![0.0; n],
            dividend: vec![0.0; n],
            volatility: vec![0.0; n * d],
            n,
            d,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    pub fn n_drivers(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn vol(&self, asset: usize, driver: usize) -> f64 {
        self.volatility[asset * self.d + driver]
    }

    /// Volatility row of one asset.
    #[inline]
    pub fn vol_row(&self, asset: usize) -> &[f64] {
        &self.volatility[asset * self.d..(asset + 1) * self.d]
    }

    /// `b_i + delta_i - r`.
    #[inline]
    pub fn excess(&self, asset: usize) -> f64 {
        self.drift[asset] + self.dividend[asset] - self.rate
    }

    pub fn excess_return(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.excess(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.rate.is_finite()
            && self.drift.iter().all(|x| x.is_finite())
            && self.dividend.iter().all(|x| x.is_finite())
            && self.volatility.iter().all(|x| x.is_finite())
    }

    /// `|r| + |b| + |delta| + sum sigma_ij^2`, the integrand whose time
    /// integral must stay finite.
    pub fn integrability_integrand(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.rate.abs() + norm(&self.drift) + norm(&self.dividend) + self.volatility.iter().map(|x| x * x).sum::<f64>()
    }

    /// `sigma^T v` for a vector over assets.
    pub fn vol_transpose_times(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..self.n {
            let row = self.vol_row(i);
            for j in 0..self.d {
                out[j] += row[j] * v[i];
            }
        }
    }
}

/// Source of the progressively measurable coefficients.
///
/// Implementations receive the current time, the current prices and the
/// auxiliary state (`0.0` when the model has none).
pub trait CoefficientModel: Send + Sync + Debug {
    fn n_assets(&self) -> usize;
    fn n_drivers(&self) -> usize;
    fn evaluate(&self, t: f64, prices: &[f64], aux: f64, out: &mut CoefficientValues);

    /// True when the coefficients never change; enables the exact log scheme
    /// and lets the projection be factored once.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Time-, state- and aux-independent coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients {
    values: CoefficientValues,
}

impl ConstantCoefficients {
    /// `volatility` is given row by row, one row of length `d` per asset.
    pub fn new(rate: f64, drift: Vec<f64>, dividend: Vec<f64>, volatility: Vec<Vec<f64>>) -> Result<Self> {
        let n = drift.len();
        if n == 0 {
            return invalid("market needs at least one asset");
        }
        if dividend.len() != n {
            return invalid(format!("dividend has {} entries, expected {n}", dividend.len()));
        }
        if volatility.len() != n {
            return invalid(format!("volatility has {} rows, expected {n}", volatility.len()));
        }
        let d = volatility[0].len();
        if d == 0 {
            return invalid("volatility needs at least one column");
        }
        if volatility.iter().any(|row| row.len() != d) {
            return invalid("volatility rows have different lengths");
        }
        if dividend.iter().any(|&x| x < 0.0) {
            return invalid("dividend rates must be nonnegative");
        }
        let values = CoefficientValues {
            rate,
            drift,
            dividend,
            volatility: volatility.concat(),
            n,
            d,
        };
        if !values.is_finite() {
            return invalid("coefficients must be finite");
        }
        Ok(Self { values })
    }

    /// One asset, one driver geometric Brownian motion.
    pub fn black_scholes(rate: f64, drift: f64, dividend: f64, vol: f64) -> Result<Self> {
        Self::new(rate, vec![drift], vec![dividend], vec![vec![vol]])
    }

    pub fn values(&self) -> &CoefficientValues {
        &self.values
    }
}

impl CoefficientModel for ConstantCoefficients {
    fn n_assets(&self) -> usize {
        self.values.n
    }

    fn n_drivers(&self) -> usize {
        self.values.d
    }

    fn evaluate(&self, _t: f64, _prices: &[f64], _aux: f64, out: &mut CoefficientValues) {
        out.clone_from(&self.values);
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// Constant coefficients on consecutive time intervals. Piece `i` applies on
/// `[breakpoints[i-1], breakpoints[i])`, the last piece from the last
/// breakpoint on.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    breakpoints: Vec<f64>,
    pieces: Vec<ConstantCoefficients>,
}

impl PiecewiseConstant {
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<ConstantCoefficients>) -> Result<Self> {
        if pieces.len() != breakpoints.len() + 1 {
            return invalid(format!(
                "{} breakpoints need {} pieces, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                pieces.len()
            ));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) || breakpoints.iter().any(|b| !b.is_finite()) {
            return invalid("breakpoints must be finite and strictly increasing");
        }
        let (n, d) = (pieces[0].n_assets(), pieces[0].n_drivers());
        if pieces.iter().any(|p| p.n_assets() != n || p.n_drivers() != d) {
            return invalid("all pieces must share the market dimensions");
        }
        Ok(Self { breakpoints, pieces })
    }

    fn piece(&self, t: f64) -> &ConstantCoefficients {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        &self.pieces[idx]
    }
}

impl CoefficientModel for PiecewiseConstant {
    fn n_assets(&self) -> usize {
        self.pieces[0].n_assets()
    }

    fn n_drivers(&self) -> usize {
        self.pieces[0].n_drivers()
    }

    fn evaluate(&self, t: f64, prices: &[f64], aux: f64, out: &mut CoefficientValues) {
        self.piece(t).evaluate(t, prices, aux, out);
    }

    fn is_constant(&self) -> bool {
        self.breakpoints.is_empty()
    }
}

/// One stock whose market price of risk is `1 / R(t)`, with `R` the
/// three-dimensional Bessel radius carried in the aux channel.
///
/// The deflator then satisfies `Z_0 = 1 / R`, a strict local martingale with
/// `E Z_0(T) = 2 Phi(1 / sqrt(T)) - 1 < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BesselDeflatorDemo {
    pub volatility: f64,
    pub rate: f64,
}

impl BesselDeflatorDemo {
    pub fn new(volatility: f64, rate: f64) -> Result<Self> {
        if !(volatility.is_finite() && volatility > 0.0) || !rate.is_finite() {
            return invalid("bessel demo needs a positive volatility and a finite rate");
        }
        Ok(Self { volatility, rate })
    }

    /// Aux dynamics the demo relies on: Bessel(3) radius from 1 on driver 0.
    pub fn aux_process() -> AuxProcess {
        AuxProcess::BesselRadius {
            initial: 1.0,
            dimension: 3.0,
            driver: 0,
        }
    }
}

impl CoefficientModel for BesselDeflatorDemo {
    fn n_assets(&self) -> usize {
        1
    }

    fn n_drivers(&self) -> usize {
        1
    }

    fn evaluate(&self, _t: f64, _prices: &[f64], aux: f64, out: &mut CoefficientValues) {
        out.rate = self.rate;
        out.drift[0] = self.rate + self.volatility / aux;
        out.dividend[0] = 0.0;
        out.volatility[0] = self.volatility;
    }
}

/// Scalar state adapted to the drivers, advanced by its own Euler step with
/// the same increments as the prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuxProcess {
    /// Radius of a Bessel process of the given dimension,
    /// `dR = (dimension - 1) / (2R) dt + dW_driver`, reflected at zero.
    BesselRadius {
        initial: f64,
        dimension: f64,
        driver: usize,
    },
    /// `dA = drift dt + sum_j loadings_j dW_j`.
    Linear {
        initial: f64,
        drift: f64,
        loadings: Vec<f64>,
    },
}

impl AuxProcess {
    pub fn initial(&self) -> f64 {
        match self {
            AuxProcess::BesselRadius { initial, .. } | AuxProcess::Linear { initial, .. } => *initial,
        }
    }

    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        match self {
            AuxProcess::BesselRadius {
                initial,
                dimension,
                driver,
            } => {
                if !(*initial > 0.0 && initial.is_finite()) {
                    return invalid("bessel radius must start positive");
                }
                if !(*dimension >= 2.0) {
                    return invalid("bessel dimension must be at least 2");
                }
                if *driver >= d {
                    return invalid(format!("aux driver {driver} out of range for {d} drivers"));
                }
            }
            AuxProcess::Linear {
                initial,
                drift,
                loadings,
            } => {
                if loadings.len() != d {
                    return invalid(format!("aux loadings have {} entries, expected {d}", loadings.len()));
                }
                if !initial.is_finite() || !drift.is_finite() || loadings.iter().any(|x| !x.is_finite()) {
                    return invalid("aux parameters must be finite");
                }
            }
        }
        Ok(())
    }

    /// Advances the state over one step of length `dt`.
    #[inline]
    pub fn step(&self, value: f64, dt: f64, dw: &[f64]) -> f64 {
        match self {
            AuxProcess::BesselRadius { dimension, driver, .. } => {
                (value + 0.5 * (dimension - 1.0) / value * dt + dw[*driver]).abs()
            }
            AuxProcess::Linear { drift, loadings, .. } => {
                value + drift * dt + loadings.iter().zip(dw).map(|(l, w)| l * w).sum::<f64>()
            }
        }
    }
}

/// Discretization of the price equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Exact log-normal transition; constant coefficients only.
    LogExactConstant,
    /// Log-space Euler with coefficients frozen at the left endpoint.
    EulerLog,
    /// Plain Euler on prices; fails if a price leaves `(0, inf)`.
    Euler,
}

/// The market: dimensions, coefficients, initial prices and scheme.
#[derive(Debug, Clone)]
pub struct MarketModel {
    coefficients: Arc<dyn CoefficientModel>,
    initial_prices: Vec<f64>,
    scheme: Scheme,
    aux: Option<AuxProcess>,
    integral_cap: f64,
}

/// Default cap on the pathwise integral of the coefficient integrand.
pub const DEFAULT_INTEGRAL_CAP: f64 = 1e8;

impl MarketModel {
    pub fn new(
        coefficients: Arc<dyn CoefficientModel>,
        initial_prices: Vec<f64>,
        scheme: Scheme,
        aux: Option<AuxProcess>,
    ) -> Result<Self> {
        let n = coefficients.n_assets();
        let d = coefficients.n_drivers();
        if n == 0 || d == 0 {
            return invalid("market needs at least one asset and one driver");
        }
        if initial_prices.len() != n {
            return invalid(format!("{} initial prices for {n} assets", initial_prices.len()));
        }
        if initial_prices.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return invalid("initial prices must lie in (0, inf)");
        }
        if scheme == Scheme::LogExactConstant && !coefficients.is_constant() {
            return invalid("log-exact-constant scheme requires constant coefficients");
        }
        if let Some(aux) = &aux {
            aux.validate(d)?;
        }
        Ok(Self {
            coefficients,
            initial_prices,
            scheme,
            aux,
            integral_cap: DEFAULT_INTEGRAL_CAP,
        })
    }

    /// Constant-coefficient geometric Brownian motion on one asset.
    pub fn black_scholes(p0: f64, rate: f64, drift: f64, dividend: f64, vol: f64) -> Result<Self> {
        let c = ConstantCoefficients::black_scholes(rate, drift, dividend, vol)?;
        Self::new(Arc::new(c), vec![p0], Scheme::LogExactConstant, None)
    }

    /// The strict-local-martingale deflator market.
    pub fn bessel_demo(p0: f64, volatility: f64, rate: f64) -> Result<Self> {
        let c = BesselDeflatorDemo::new(volatility, rate)?;
        Self::new(
            Arc::new(c),
            vec![p0],
            Scheme::EulerLog,
            Some(BesselDeflatorDemo::aux_process()),
        )
    }

    pub fn with_integral_cap(mut self, cap: f64) -> Self {
        self.integral_cap = cap;
        self
    }

    pub fn n_assets(&self) -> usize {
        self.coefficients.n_assets()
    }

    pub fn n_drivers(&self) -> usize {
        self.coefficients.n_drivers()
    }

    pub fn initial_prices(&self) -> &[f64] {
        &self.initial_prices
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn aux(&self) -> Option<&AuxProcess> {
        self.aux.as_ref()
    }

    pub fn integral_cap(&self) -> f64 {
        self.integral_cap
    }

    pub fn coefficients(&self) -> &dyn CoefficientModel {
        self.coefficients.as_ref()
    }

    pub fn is_constant(&self) -> bool {
        self.coefficients.is_constant()
    }

    pub fn new_values(&self) -> CoefficientValues {
        CoefficientValues::zeros(self.n_assets(), self.n_drivers())
    }

    pub fn evaluate(&self, t: f64, prices: &[f64], aux: f64, out: &mut CoefficientValues) {
        self.coefficients.evaluate(t, prices, aux, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rejects_shape_mismatch() {
        assert!(ConstantCoefficients::new(0.0, vec![0.1, 0.1], vec![0.0], vec![vec![0.2], vec![0.2]]).is_err());
        assert!(ConstantCoefficients::new(0.0, vec![0.1], vec![0.0], vec![vec![0.2, 0.1], vec![0.2]]).is_err());
        assert!(ConstantCoefficients::new(0.0, vec![0.1], vec![-0.1], vec![vec![0.2]]).is_err());
        assert!(ConstantCoefficients::new(f64::NAN, vec![0.1], vec![0.0], vec![vec![0.2]]).is_err());
    }

    #[test]
    fn excess_return_is_b_plus_delta_minus_r() {
        let c = ConstantCoefficients::new(0.03, vec![0.05, 0.09], vec![0.01, 0.0], vec![vec![0.2], vec![0.2]]).unwrap();
        let e = c.values().excess_return();
        assert!((e[0] - 0.03).abs() < 1e-15);
        assert!((e[1] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn piecewise_selects_interval() {
        let a = ConstantCoefficients::black_scholes(0.0, 0.1, 0.0, 0.2).unwrap();
        let b = ConstantCoefficients::black_scholes(0.0, 0.3, 0.0, 0.2).unwrap();
        let pw = PiecewiseConstant::new(vec![0.5], vec![a, b]).unwrap();
        let mut v = CoefficientValues::zeros(1, 1);
        pw.evaluate(0.25, &[1.0], 0.0, &mut v);
        assert_eq!(v.drift[0], 0.1);
        pw.evaluate(0.5, &[1.0], 0.0, &mut v);
        assert_eq!(v.drift[0], 0.3);
        assert!(!pw.is_constant());
    }

    #[test]
    fn log_exact_needs_constant_model() {
        let c = BesselDeflatorDemo::new(1.0, 0.0).unwrap();
        let err = MarketModel::new(Arc::new(c), vec![1.0], Scheme::LogExactConstant, None);
        assert!(err.is_err());
    }

    #[test]
    fn bessel_step_stays_nonnegative() {
        let aux = BesselDeflatorDemo::aux_process();
        let next = aux.step(0.01, 1e-4, &[-0.5]);
        assert!(next >= 0.0);
    }
}
