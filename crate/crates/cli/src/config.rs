//! Run configuration: file loading, environment overrides, resolution of
//! defaults and conversion into engine objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statetame::american::{AmericanConfig, TournamentOrder};
use statetame::claims::{ClaimSpec, Expiry, Payoff, RateFamily};
use statetame::deflator::DEFAULT_RANK_TOL;
use statetame::european::DEFAULT_DEGREE;
use statetame::sde::{
    AuxProcess, ConstantCoefficients, MarketModel, PiecewiseConstant, Scheme, TimeGrid, DEFAULT_INTEGRAL_CAP,
};

/// Prefix of environment variables that override config keys. Nested keys
/// are joined with `__`, e.g. `STATETAME_GRID__N_STEPS=100`.
pub const ENV_PREFIX: &str = "STATETAME_";

/// Variables with the prefix that are not config keys.
const ENV_RESERVED: &[&str] = &["THREADS"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    pub market: MarketConfig,
    #[serde(default)]
    pub claims: Vec<ClaimEntry>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_seed() -> u64 {
    42
}

fn default_paths() -> usize {
    10_000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 50,
        }
    }
}

/// One constant-coefficient regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub rate: f64,
    pub drift: Vec<f64>,
    #[serde(default)]
    pub dividend: Option<Vec<f64>>,
    /// Rows of length `d`, one per asset.
    pub volatility: Vec<Vec<f64>>,
}

impl Coefficients {
    fn resolve(&mut self) {
        if self.dividend.is_none() {
            self.dividend = Some(vec![0.0; self.drift.len()]);
        }
    }

    fn build(&self) -> statetame::Result<ConstantCoefficients> {
        ConstantCoefficients::new(
            self.rate,
            self.drift.clone(),
            self.dividend.clone().unwrap_or_else(|| vec![0.0; self.drift.len()]),
            self.volatility.clone(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MarketConfig {
    Constant {
        initial_prices: Vec<f64>,
        rate: f64,
        drift: Vec<f64>,
        #[serde(default)]
        dividend: Option<Vec<f64>>,
        volatility: Vec<Vec<f64>>,
        #[serde(default)]
        scheme: Option<Scheme>,
        #[serde(default)]
        aux: Option<AuxProcess>,
        #[serde(default)]
        integral_cap: Option<f64>,
    },
    PiecewiseConstant {
        initial_prices: Vec<f64>,
        /// Interior switching times, increasing.
        breakpoints: Vec<f64>,
        pieces: Vec<Coefficients>,
        #[serde(default)]
        scheme: Option<Scheme>,
        #[serde(default)]
        aux: Option<AuxProcess>,
        #[serde(default)]
        integral_cap: Option<f64>,
    },
    BesselDeflatorDemo {
        initial_price: f64,
        volatility: f64,
        rate: f64,
        #[serde(default)]
        integral_cap: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    #[default]
    European,
    American,
}

/// A claim given inline or loaded from its own file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimEntry {
    pub id: String,
    #[serde(default)]
    pub style: Style,
    /// Build the replicating portfolio when pricing a European claim.
    #[serde(default)]
    pub hedge: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub payoff: Option<Payoff>,
    #[serde(default)]
    pub expiry: Option<Expiry>,
    #[serde(default)]
    pub rate: Option<RateFamily>,
    #[serde(default)]
    pub driver_support: Option<Vec<usize>>,
}

impl ClaimEntry {
    pub fn spec(&self) -> anyhow::Result<ClaimSpec> {
        let payoff = self
            .payoff
            .clone()
            .ok_or_else(|| anyhow!("claim `{}`: missing field `payoff`", self.id))?;
        Ok(ClaimSpec {
            payoff,
            expiry: self.expiry.unwrap_or_default(),
            rate: self.rate.unwrap_or_default(),
            driver_support: self.driver_support.clone().unwrap_or_default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Cross-sectional polynomial regression on the simulated paths.
    #[default]
    Regression,
    /// Exact conditional expectations on a CRR lattice.
    Lattice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub kind: EstimatorKind,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub order: TournamentOrder,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Steps of the lattice backend; every path of the tree is enumerated.
    #[serde(default = "default_lattice_steps")]
    pub lattice_steps: usize,
}

fn default_degree() -> usize {
    DEFAULT_DEGREE
}

fn default_rounds() -> usize {
    1
}

fn default_lattice_steps() -> usize {
    10
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Regression,
            degree: DEFAULT_DEGREE,
            order: TournamentOrder::default(),
            rounds: 1,
            lattice_steps: default_lattice_steps(),
        }
    }
}

impl EstimatorConfig {
    pub fn american(&self) -> AmericanConfig {
        AmericanConfig {
            degree: self.degree,
            order: self.order,
            rounds: self.rounds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_rank_tol")]
    pub rank: f64,
    #[serde(default = "default_arbitrage_tol")]
    pub arbitrage: f64,
    #[serde(default = "default_replication_tol")]
    pub replication: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

fn default_arbitrage_tol() -> f64 {
    1e-10
}

fn default_replication_tol() -> f64 {
    1e-6
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rank: default_rank_tol(),
            arbitrage: default_arbitrage_tol(),
            replication: default_replication_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_steps")]
    pub n_steps: usize,
}

fn default_oracle_steps() -> usize {
    1000
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_steps: default_oracle_steps(),
        }
    }
}

fn parse_document(text: &str, path: &Path) -> anyhow::Result<Value> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let v: toml::Value = toml::from_str(text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(v).context("converting TOML document")
    }
}

/// Sets `value` at the `__`-separated `key` path, creating objects on the way.
/// Numeric segments index arrays.
fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let parts: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Value::Array(items) = cur {
            let idx: usize = part
                .parse()
                .map_err(|_| anyhow!("override {key}: `{part}` is not an array index"))?;
            let len = items.len();
            let slot = items
                .get_mut(idx)
                .ok_or_else(|| anyhow!("override {key}: index {idx} out of range ({len} items)"))?;
            if last {
                *slot = value;
                return Ok(());
            }
            cur = slot;
            continue;
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object");
        if last {
            map.insert(part.clone(), value);
            return Ok(());
        }
        cur = map
            .entry(part.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Applies `STATETAME_*` overrides. Values are read as JSON when they parse,
/// otherwise as strings.
pub fn apply_env_overrides(doc: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_string(), v)))
        .filter(|(k, _)| !ENV_RESERVED.contains(&k.as_str()))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        log::info!("config override {key} from environment");
        set_path(doc, &key, value)?;
    }
    Ok(())
}

/// Command-line values that take precedence over the file and environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_paths: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc = parse_document(&text, path)?;
    apply_env_overrides(&mut doc, std::env::vars())?;
    let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid run config")?;
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(n) = overrides.n_paths {
        cfg.n_paths = n;
    }
    if let Some(o) = &overrides.output_dir {
        cfg.output_dir = o.clone();
    }
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve(base)?;
    Ok(cfg)
}

impl RunConfig {
    /// Loads claim files and fills every optional field with its default,
    /// so the serialized config reproduces the run on its own.
    pub fn resolve(&mut self, base: &Path) -> anyhow::Result<()> {
        match &mut self.market {
            MarketConfig::Constant {
                drift,
                dividend,
                scheme,
                integral_cap,
                ..
            } => {
                dividend.get_or_insert_with(|| vec![0.0; drift.len()]);
                scheme.get_or_insert(Scheme::LogExactConstant);
                integral_cap.get_or_insert(DEFAULT_INTEGRAL_CAP);
            }
            MarketConfig::PiecewiseConstant {
                pieces,
                scheme,
                integral_cap,
                ..
            } => {
                pieces.iter_mut().for_each(Coefficients::resolve);
                scheme.get_or_insert(Scheme::EulerLog);
                integral_cap.get_or_insert(DEFAULT_INTEGRAL_CAP);
            }
            MarketConfig::BesselDeflatorDemo { integral_cap, .. } => {
                integral_cap.get_or_insert(DEFAULT_INTEGRAL_CAP);
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &mut self.claims {
            if !seen.insert(entry.id.clone()) {
                bail!("claim id `{}` appears twice", entry.id);
            }
            if let Some(file) = entry.file.take() {
                if entry.payoff.is_some() || entry.expiry.is_some() || entry.rate.is_some() {
                    bail!("claim `{}` gives both a file and inline fields", entry.id);
                }
                let full = base.join(&file);
                let text = std::fs::read_to_string(&full).with_context(|| format!("reading {}", full.display()))?;
                let spec: ClaimSpec = serde_json::from_value(parse_document(&text, &full)?)
                    .with_context(|| format!("invalid claim file {}", full.display()))?;
                entry.payoff = Some(spec.payoff);
                entry.expiry = Some(spec.expiry);
                entry.rate = Some(spec.rate);
                if entry.driver_support.is_none() {
                    entry.driver_support = Some(spec.driver_support);
                }
            }
            let spec = entry.spec()?;
            entry.expiry = Some(spec.expiry);
            entry.rate = Some(spec.rate);
            entry.driver_support = Some(spec.driver_support);
        }
        Ok(())
    }

    pub fn grid(&self) -> statetame::Result<TimeGrid> {
        TimeGrid::uniform(self.grid.horizon, self.grid.n_steps)
    }

    pub fn market(&self) -> statetame::Result<MarketModel> {
        let model = match &self.market {
            MarketConfig::Constant {
                initial_prices,
                rate,
                drift,
                dividend,
                volatility,
                scheme,
                aux,
                integral_cap,
            } => MarketModel::new(
                Arc::new(ConstantCoefficients::new(
                    *rate,
                    drift.clone(),
                    dividend.clone().unwrap_or_else(|| vec![0.0; drift.len()]),
                    volatility.clone(),
                )?),
                initial_prices.clone(),
                scheme.unwrap_or(Scheme::LogExactConstant),
                aux.clone(),
            )?
            .with_integral_cap(integral_cap.unwrap_or(DEFAULT_INTEGRAL_CAP)),
            MarketConfig::PiecewiseConstant {
                initial_prices,
                breakpoints,
                pieces,
                scheme,
                aux,
                integral_cap,
            } => {
                let pieces = pieces
                    .iter()
                    .map(Coefficients::build)
                    .collect::<statetame::Result<Vec<_>>>()?;
                MarketModel::new(
                    Arc::new(PiecewiseConstant::new(breakpoints.clone(), pieces)?),
                    initial_prices.clone(),
                    scheme.unwrap_or(Scheme::EulerLog),
                    aux.clone(),
                )?
                .with_integral_cap(integral_cap.unwrap_or(DEFAULT_INTEGRAL_CAP))
            }
            MarketConfig::BesselDeflatorDemo {
                initial_price,
                volatility,
                rate,
                integral_cap,
            } => MarketModel::bessel_demo(*initial_price, *volatility, *rate)?
                .with_integral_cap(integral_cap.unwrap_or(DEFAULT_INTEGRAL_CAP)),
        };
        Ok(model)
    }

    /// Claims selected by id, or all claims of `style` when no id is given.
    pub fn select_claims(&self, id: Option<&str>, style: Option<Style>) -> anyhow::Result<Vec<&ClaimEntry>> {
        match id {
            Some(id) => {
                let entry = self
                    .claims
                    .iter()
                    .find(|c| c.id == id)
                    .ok_or_else(|| anyhow!("no claim with id `{id}`"))?;
                if let Some(s) = style {
                    if entry.style != s {
                        bail!("claim `{id}` is {:?}, not {:?}", entry.style, s);
                    }
                }
                Ok(vec![entry])
            }
            None => {
                let v: Vec<&ClaimEntry> = self
                    .claims
                    .iter()
                    .filter(|c| style.is_none_or(|s| c.style == s))
                    .collect();
                if v.is_empty() {
                    bail!("config has no matching claims");
                }
                Ok(v)
            }
        }
    }

    /// `(p0, rate, dividend, vol)` of a one-asset, one-driver constant market.
    pub fn lattice_parameters(&self) -> anyhow::Result<(f64, f64, f64, f64)> {
        match &self.market {
            MarketConfig::Constant {
                initial_prices,
                rate,
                dividend,
                volatility,
                aux: None,
                ..
            } if initial_prices.len() == 1 && volatility.len() == 1 && volatility[0].len() == 1 => Ok((
                initial_prices[0],
                *rate,
                dividend.as_ref().map_or(0.0, |d| d[0]),
                volatility[0][0].abs(),
            )),
            _ => bail!("the lattice needs a constant market with one asset and one driver"),
        }
    }
}
