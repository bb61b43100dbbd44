//! Problem instances: communities, feeder, tariffs, exogenous series.
//!
//! A scenario bundle is a JSON config whose per-slot fields may be given as a
//! scalar, an inline array, or a path to a `slot,value` CSV file (resolved
//! relative to the config's directory). Loading resolves every reference and
//! validates the result; [`Scenario::to_config`] writes the resolved instance
//! back as a self-contained config with inline arrays.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    self, BranchSpec, FeederModel, FeederSettings, NetworkError, DEFAULT_S_BASE_KVA, DEFAULT_V_BASE_KV, DEFAULT_V_MAX,
    DEFAULT_V_MIN,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema violation in {path}: {message}")]
    Schema { path: String, message: String },
    #[error("{field}: {message}")]
    Series { field: String, message: String },
    #[error("{field}: expected {expected} values, found {found}")]
    LengthMismatch {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("feeder: {0}")]
    Feeder(#[from] NetworkError),
    #[error("invalid scenario: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid sampling bounds: {0}")]
    Sampling(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A broken invariant, located by the field path in the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    #[serde(rename = "H")]
    pub slots: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    pub capacity_upper: f64,
    pub capacity_lower: f64,
    pub charge_max: f64,
    pub discharge_max: f64,
    pub eff_charge: f64,
    pub eff_discharge: f64,
    pub initial_energy: f64,
    pub degradation_coeff: f64,
}

/// `mode` is positive for cooling and negative for heating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvacParams {
    pub thermal_capacitance: f64,
    pub thermal_resistance: f64,
    pub mode: f64,
    pub power_min: Vec<f64>,
    pub power_max: Vec<f64>,
    pub temp_min: Vec<f64>,
    pub temp_max: Vec<f64>,
    pub temp_pref: f64,
    pub discomfort_coeff: f64,
    pub initial_indoor_temp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyLimits {
    pub grid_max: f64,
    pub et_buy_max: f64,
    pub et_sell_max: f64,
    pub b2b_max: Vec<f64>,
    pub b2g_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSeries {
    pub pv_available: Vec<f64>,
    pub inflexible_load: Vec<f64>,
    pub outdoor_temp: Vec<f64>,
    pub reactive_load: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TariffKind {
    Tou,
    Tpt,
}

impl std::str::FromStr for TariffKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tou" => Ok(Self::Tou),
            "tpt" => Ok(Self::Tpt),
            other => Err(format!("unknown tariff `{other}` (expected tou or tpt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    pub kind: TariffKind,
    pub tou_energy_price: Vec<f64>,
    pub tpt_energy_price: f64,
    pub tpt_peak_price: f64,
    pub feed_in_price: Vec<f64>,
    pub b2g_price: Vec<f64>,
    pub et_price: Vec<f64>,
    /// False when `et_price` is the derived mid-market rate.
    pub et_price_explicit: bool,
}

impl Tariff {
    /// Energy price of grid purchases in slot `t` under the active kind.
    pub fn energy_price(&self, t: usize) -> f64 {
        match self.kind {
            TariffKind::Tou => self.tou_energy_price[t],
            TariffKind::Tpt => self.tpt_energy_price,
        }
    }

    /// Mid-market rate: average of the buy price and the feed-in price.
    pub fn mid_market(&self) -> Vec<f64> {
        (0..self.feed_in_price.len())
            .map(|t| 0.5 * (self.energy_price(t) + self.feed_in_price[t]))
            .collect()
    }

    /// Switches the active kind, refreshing a derived trading price.
    pub fn with_kind(&self, kind: TariffKind) -> Self {
        let mut t = self.clone();
        t.kind = kind;
        if !t.et_price_explicit {
            t.et_price = t.mid_market();
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Community {
    pub node: usize,
    pub battery: BatteryParams,
    pub hvac: HvacParams,
    pub limits: SupplyLimits,
    pub series: ExogenousSeries,
}

/// Which value streams beyond grid supply are available. Grid purchase is
/// always enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamFlags {
    #[serde(default = "yes")]
    pub b2b: bool,
    #[serde(default = "yes")]
    pub b2g: bool,
    #[serde(default = "yes")]
    pub et: bool,
}

fn yes() -> bool {
    true
}

impl Default for StreamFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl StreamFlags {
    pub fn all() -> Self {
        Self {
            b2b: true,
            b2g: true,
            et: true,
        }
    }

    pub fn none() -> Self {
        Self {
            b2b: false,
            b2g: false,
            et: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub horizon: Horizon,
    pub communities: Vec<Community>,
    pub feeder: FeederModel,
    pub tariff: Tariff,
    pub flags: StreamFlags,
    /// Include the HVAC discomfort cost in every objective.
    pub include_discomfort: bool,
    /// Per-scenario ADMM penalty, if the bundle sets one.
    pub rho: Option<f64>,
}

impl Scenario {
    pub fn slots(&self) -> usize {
        self.horizon.slots
    }

    pub fn dt(&self) -> f64 {
        self.horizon.dt
    }

    pub fn with_flags(&self, flags: StreamFlags) -> Self {
        Self { flags, ..self.clone() }
    }

    pub fn with_tariff_kind(&self, kind: TariffKind) -> Self {
        Self {
            tariff: self.tariff.with_kind(kind),
            ..self.clone()
        }
    }

    /// Communities attached to each feeder node.
    pub fn communities_at(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.communities
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.node == node)
            .map(|(i, _)| i)
    }

    /// Resolved instance as a self-contained config.
    pub fn to_config(&self) -> ScenarioConfig {
        let inline = |v: &Vec<f64>| Profile::Values(v.clone());
        ScenarioConfig {
            horizon: self.horizon,
            tariff: TariffConfig {
                kind: self.tariff.kind,
                tou_price: inline(&self.tariff.tou_energy_price),
                tpt_energy_price: self.tariff.tpt_energy_price,
                tpt_peak_price: self.tariff.tpt_peak_price,
                feed_in_price: inline(&self.tariff.feed_in_price),
                b2g_price: inline(&self.tariff.b2g_price),
                et_price: self.tariff.et_price_explicit.then(|| inline(&self.tariff.et_price)),
            },
            flags: self.flags,
            feeder: FeederConfig {
                file: None,
                branches: Some(self.feeder.specs.clone()),
                s_base_kva: self.feeder.s_base_kva,
                v_base_kv: self.feeder.v_base_kv,
                v_ref: self.feeder.v_ref,
                v_min: NodeValues::Values(self.feeder.v_min.clone()),
                v_max: NodeValues::Values(self.feeder.v_max.clone()),
            },
            options: OptionsConfig {
                include_discomfort: self.include_discomfort,
                rho: self.rho,
            },
            communities: self
                .communities
                .iter()
                .map(|c| CommunityConfig {
                    node: c.node,
                    battery: BatteryConfig {
                        capacity_upper: c.battery.capacity_upper,
                        capacity_lower: c.battery.capacity_lower,
                        charge_max: c.battery.charge_max,
                        discharge_max: c.battery.discharge_max,
                        eff_charge: c.battery.eff_charge,
                        eff_discharge: c.battery.eff_discharge,
                        initial_energy: InitialEnergy::Value(c.battery.initial_energy),
                        degradation_coeff: c.battery.degradation_coeff,
                    },
                    hvac: HvacConfig {
                        thermal_capacitance: c.hvac.thermal_capacitance,
                        thermal_resistance: c.hvac.thermal_resistance,
                        mode: c.hvac.mode,
                        power_min: inline(&c.hvac.power_min),
                        power_max: inline(&c.hvac.power_max),
                        temp_min: inline(&c.hvac.temp_min),
                        temp_max: inline(&c.hvac.temp_max),
                        temp_pref: c.hvac.temp_pref,
                        discomfort_coeff: c.hvac.discomfort_coeff,
                        initial_indoor_temp: c.hvac.initial_indoor_temp,
                    },
                    limits: LimitsConfig {
                        grid_max: c.limits.grid_max,
                        et_buy_max: c.limits.et_buy_max,
                        et_sell_max: c.limits.et_sell_max,
                        b2b_max: Some(inline(&c.limits.b2b_max)),
                        b2g_max: Some(inline(&c.limits.b2g_max)),
                    },
                    series: SeriesConfig {
                        pv: inline(&c.series.pv_available),
                        load: inline(&c.series.inflexible_load),
                        temp: inline(&c.series.outdoor_temp),
                        qload: Some(inline(&c.series.reactive_load)),
                    },
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_config()).expect("scenario config serializes")
    }
}

// ---------------------------------------------------------------------------
// Config layer

/// A per-slot quantity: constant, inline values, or a CSV path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Scalar(f64),
    Values(Vec<f64>),
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeValues {
    Scalar(f64),
    Values(Vec<f64>),
}

impl NodeValues {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![*v],
            Self::Values(v) => v.clone(),
        }
    }
}

/// Initial stored energy, fixed or drawn from a truncated normal at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialEnergy {
    Value(f64),
    Sampled { truncated_normal: SocSampling },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocSampling {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub mean: Option<f64>,
    #[serde(default)]
    pub sd: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon: Horizon,
    pub tariff: TariffConfig,
    #[serde(default)]
    pub flags: StreamFlags,
    pub feeder: FeederConfig,
    #[serde(default)]
    pub options: OptionsConfig,
    pub communities: Vec<CommunityConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffConfig {
    pub kind: TariffKind,
    pub tou_price: Profile,
    pub tpt_energy_price: f64,
    pub tpt_peak_price: f64,
    pub feed_in_price: Profile,
    pub b2g_price: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub et_price: Option<Profile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<BranchSpec>>,
    #[serde(default = "default_s_base")]
    pub s_base_kva: f64,
    #[serde(default = "default_v_base")]
    pub v_base_kv: f64,
    #[serde(default = "default_v_ref")]
    pub v_ref: f64,
    #[serde(default = "default_v_min")]
    pub v_min: NodeValues,
    #[serde(default = "default_v_max")]
    pub v_max: NodeValues,
}

fn default_s_base() -> f64 {
    DEFAULT_S_BASE_KVA
}
fn default_v_base() -> f64 {
    DEFAULT_V_BASE_KV
}
fn default_v_ref() -> f64 {
    1.0
}
fn default_v_min() -> NodeValues {
    NodeValues::Scalar(DEFAULT_V_MIN)
}
fn default_v_max() -> NodeValues {
    NodeValues::Scalar(DEFAULT_V_MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsConfig {
    #[serde(default = "yes")]
    pub include_discomfort: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl Default for OptionsConfig {
    fn default() -> Self {
        Self {
            include_discomfort: true,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityConfig {
    pub node: usize,
    pub battery: BatteryConfig,
    pub hvac: HvacConfig,
    pub limits: LimitsConfig,
    pub series: SeriesConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryConfig {
    pub capacity_upper: f64,
    pub capacity_lower: f64,
    pub charge_max: f64,
    pub discharge_max: f64,
    pub eff_charge: f64,
    pub eff_discharge: f64,
    pub initial_energy: InitialEnergy,
    pub degradation_coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvacConfig {
    pub thermal_capacitance: f64,
    pub thermal_resistance: f64,
    pub mode: f64,
    pub power_min: Profile,
    pub power_max: Profile,
    pub temp_min: Profile,
    pub temp_max: Profile,
    pub temp_pref: f64,
    pub discomfort_coeff: f64,
    pub initial_indoor_temp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    pub grid_max: f64,
    pub et_buy_max: f64,
    pub et_sell_max: f64,
    /// Defaults to the battery's discharge limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2b_max: Option<Profile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2g_max: Option<Profile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub pv: Profile,
    pub load: Profile,
    pub temp: Profile,
    /// Reactive load at the community's node; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qload: Option<Profile>,
}

struct Resolver<'a> {
    base: &'a Path,
    slots: usize,
}

impl Resolver<'_> {
    fn profile(&self, p: &Profile, field: &str) -> Result<Vec<f64>, ScenarioError> {
        let values = match p {
            Profile::Scalar(v) => return Ok(vec![*v; self.slots]),
            Profile::Values(v) => v.clone(),
            Profile::File(f) => read_series(&self.base.join(f), field)?,
        };
        if values.len() != self.slots {
            return Err(ScenarioError::LengthMismatch {
                field: field.to_string(),
                expected: self.slots,
                found: values.len(),
            });
        }
        Ok(values)
    }
}

#[derive(Debug, Deserialize)]
struct SeriesRecord {
    slot: usize,
    value: f64,
}

/// Reads a `slot,value` CSV. Slots must run 0, 1, 2, … in order.
pub fn read_series(path: &Path, field: &str) -> Result<Vec<f64>, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ScenarioError::Series {
            field: field.to_string(),
            message: format!("{}: {e}", path.display()),
        })?;
    let headers = rdr.headers().map_err(|e| ScenarioError::Series {
        field: field.to_string(),
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["slot", "value"] {
        return Err(ScenarioError::Series {
            field: field.to_string(),
            message: format!("{}: header must be `slot,value`", path.display()),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<SeriesRecord>() {
        let rec = rec.map_err(|e| ScenarioError::Series {
            field: field.to_string(),
            message: format!("{}: {e}", path.display()),
        })?;
        if rec.slot != out.len() {
            return Err(ScenarioError::Series {
                field: field.to_string(),
                message: format!("{}: expected slot {}, found {}", path.display(), out.len(), rec.slot),
            });
        }
        out.push(rec.value);
    }
    Ok(out)
}

pub fn write_series(path: &Path, values: &[f64]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slot", "value"])?;
    for (t, v) in values.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()
}

impl ScenarioConfig {
    /// Resolves file references relative to `base` and validates.
    pub fn resolve(&self, base: &Path) -> Result<Scenario, ScenarioError> {
        let h = self.horizon.slots;
        let r = Resolver { base, slots: h };

        let settings = FeederSettings {
            s_base_kva: self.feeder.s_base_kva,
            v_base_kv: self.feeder.v_base_kv,
            v_ref: self.feeder.v_ref,
            v_min: self.feeder.v_min.to_vec(),
            v_max: self.feeder.v_max.to_vec(),
        };
        let specs = match (&self.feeder.file, &self.feeder.branches) {
            (Some(f), None) => network::read_branch_specs(&base.join(f))?,
            (None, Some(b)) => b.clone(),
            _ => {
                return Err(ScenarioError::Schema {
                    path: "feeder".into(),
                    message: "exactly one of `file` or `branches` is required".into(),
                })
            }
        };
        let feeder = FeederModel::from_branches(specs, &settings)?;

        let t = &self.tariff;
        let mut tariff = Tariff {
            kind: t.kind,
            tou_energy_price: r.profile(&t.tou_price, "tariff.tou_price")?,
            tpt_energy_price: t.tpt_energy_price,
            tpt_peak_price: t.tpt_peak_price,
            feed_in_price: r.profile(&t.feed_in_price, "tariff.feed_in_price")?,
            b2g_price: r.profile(&t.b2g_price, "tariff.b2g_price")?,
            et_price: Vec::new(),
            et_price_explicit: t.et_price.is_some(),
        };
        tariff.et_price = match &t.et_price {
            Some(p) => r.profile(p, "tariff.et_price")?,
            None => tariff.mid_market(),
        };

        let mut communities = Vec::with_capacity(self.communities.len());
        for (i, c) in self.communities.iter().enumerate() {
            let f = |name: &str| format!("communities[{i}].{name}");
            let initial_energy = match &c.battery.initial_energy {
                InitialEnergy::Value(v) => *v,
                InitialEnergy::Sampled { truncated_normal: s } => {
                    let mean = s.mean.unwrap_or(0.5 * (s.lo + s.hi));
                    let sd = s.sd.unwrap_or((s.hi - s.lo) / 4.0);
                    sample_initial_soc(s.lo, s.hi, mean, sd, s.seed)?
                }
            };
            let b = &c.battery;
            let discharge = vec![b.discharge_max; h];
            communities.push(Community {
                node: c.node,
                battery: BatteryParams {
                    capacity_upper: b.capacity_upper,
                    capacity_lower: b.capacity_lower,
                    charge_max: b.charge_max,
                    discharge_max: b.discharge_max,
                    eff_charge: b.eff_charge,
                    eff_discharge: b.eff_discharge,
                    initial_energy,
                    degradation_coeff: b.degradation_coeff,
                },
                hvac: HvacParams {
                    thermal_capacitance: c.hvac.thermal_capacitance,
                    thermal_resistance: c.hvac.thermal_resistance,
                    mode: c.hvac.mode,
                    power_min: r.profile(&c.hvac.power_min, &f("hvac.power_min"))?,
                    power_max: r.profile(&c.hvac.power_max, &f("hvac.power_max"))?,
                    temp_min: r.profile(&c.hvac.temp_min, &f("hvac.temp_min"))?,
                    temp_max: r.profile(&c.hvac.temp_max, &f("hvac.temp_max"))?,
                    temp_pref: c.hvac.temp_pref,
                    discomfort_coeff: c.hvac.discomfort_coeff,
                    initial_indoor_temp: c.hvac.initial_indoor_temp,
                },
                limits: SupplyLimits {
                    grid_max: c.limits.grid_max,
                    et_buy_max: c.limits.et_buy_max,
                    et_sell_max: c.limits.et_sell_max,
                    b2b_max: match &c.limits.b2b_max {
                        Some(p) => r.profile(p, &f("limits.b2b_max"))?,
                        None => discharge.clone(),
                    },
                    b2g_max: match &c.limits.b2g_max {
                        Some(p) => r.profile(p, &f("limits.b2g_max"))?,
                        None => discharge,
                    },
                },
                series: ExogenousSeries {
                    pv_available: r.profile(&c.series.pv, &f("series.pv"))?,
                    inflexible_load: r.profile(&c.series.load, &f("series.load"))?,
                    outdoor_temp: r.profile(&c.series.temp, &f("series.temp"))?,
                    reactive_load: match &c.series.qload {
                        Some(p) => r.profile(p, &f("series.qload"))?,
                        None => vec![0.0; h],
                    },
                },
            });
        }

        let scenario = Scenario {
            horizon: self.horizon,
            communities,
            feeder,
            tariff,
            flags: self.flags,
            include_discomfort: self.options.include_discomfort,
            rho: self.options.rho,
        };
        let violations = validate(&scenario);
        if violations.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }
}

pub fn parse_scenario(json: &str, base: &Path) -> Result<Scenario, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(json).map_err(|e| ScenarioError::Schema {
        path: "<config>".into(),
        message: e.to_string(),
    })?;
    cfg.resolve(base)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| ScenarioError::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.resolve(&base)
}

// ---------------------------------------------------------------------------
// Validation

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn require(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.out.push(Violation {
                field: field.into(),
                message: message.into(),
            });
        }
    }

    fn len(&mut self, v: &[f64], h: usize, field: &str) -> bool {
        self.require(v.len() == h, field, format!("expected {h} values, found {}", v.len()));
        v.len() == h
    }

    fn nonneg(&mut self, v: &[f64], field: &str) {
        if let Some(t) = v.iter().position(|x| !(*x >= 0.0)) {
            self.require(false, format!("{field}[{t}]"), "must be nonnegative");
        }
    }

    fn finite(&mut self, v: &[f64], field: &str) {
        if let Some(t) = v.iter().position(|x| !x.is_finite()) {
            self.require(false, format!("{field}[{t}]"), "must be finite");
        }
    }
}

/// Every broken invariant of `s`; empty when the instance is valid.
pub fn validate(s: &Scenario) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let h = s.horizon.slots;
    c.require(h >= 1, "horizon.H", "must be at least 1");
    c.require(s.horizon.dt > 0.0, "horizon.dt", "must be positive");
    c.require(
        !s.communities.is_empty(),
        "communities",
        "at least one community is required",
    );

    let t = &s.tariff;
    for (name, v) in [
        ("tariff.tou_price", &t.tou_energy_price),
        ("tariff.feed_in_price", &t.feed_in_price),
        ("tariff.b2g_price", &t.b2g_price),
        ("tariff.et_price", &t.et_price),
    ] {
        if c.len(v, h, name) {
            c.nonneg(v, name);
        }
    }
    c.require(
        t.tpt_energy_price >= 0.0,
        "tariff.tpt_energy_price",
        "must be nonnegative",
    );
    c.require(t.tpt_peak_price >= 0.0, "tariff.tpt_peak_price", "must be nonnegative");
    if let Some(rho) = s.rho {
        c.require(rho > 0.0, "options.rho", "must be positive");
    }

    for (i, com) in s.communities.iter().enumerate() {
        let f = |name: &str| format!("communities[{i}].{name}");
        c.require(
            com.node < s.feeder.nodes,
            f("node"),
            format!("node {} is not on the feeder", com.node),
        );
        let b = &com.battery;
        c.require(
            b.capacity_lower >= 0.0,
            f("battery.capacity_lower"),
            "must be nonnegative",
        );
        c.require(
            b.capacity_lower <= b.capacity_upper,
            f("battery.capacity_lower"),
            "exceeds capacity_upper",
        );
        c.require(
            b.initial_energy >= b.capacity_lower && b.initial_energy <= b.capacity_upper,
            f("battery.initial_energy"),
            format!(
                "{} outside [{}, {}]",
                b.initial_energy, b.capacity_lower, b.capacity_upper
            ),
        );
        c.require(
            b.eff_discharge > 0.0 && b.eff_discharge <= 1.0,
            f("battery.eff_discharge"),
            "must lie in (0, 1]",
        );
        c.require(
            (0.0..=1.0).contains(&b.eff_charge),
            f("battery.eff_charge"),
            "must lie in [0, 1]",
        );
        c.require(b.charge_max >= 0.0, f("battery.charge_max"), "must be nonnegative");
        c.require(
            b.discharge_max >= 0.0,
            f("battery.discharge_max"),
            "must be nonnegative",
        );
        c.require(
            b.degradation_coeff >= 0.0,
            f("battery.degradation_coeff"),
            "must be nonnegative",
        );

        let hv = &com.hvac;
        c.require(
            hv.thermal_capacitance > 0.0,
            f("hvac.thermal_capacitance"),
            "must be positive",
        );
        c.require(
            hv.thermal_resistance > 0.0,
            f("hvac.thermal_resistance"),
            "must be positive",
        );
        c.require(hv.mode.is_finite(), f("hvac.mode"), "must be finite");
        c.require(
            hv.discomfort_coeff >= 0.0,
            f("hvac.discomfort_coeff"),
            "must be nonnegative",
        );
        c.require(
            hv.initial_indoor_temp.is_finite(),
            f("hvac.initial_indoor_temp"),
            "must be finite",
        );
        let ok = [
            c.len(&hv.power_min, h, &f("hvac.power_min")),
            c.len(&hv.power_max, h, &f("hvac.power_max")),
            c.len(&hv.temp_min, h, &f("hvac.temp_min")),
            c.len(&hv.temp_max, h, &f("hvac.temp_max")),
        ];
        if ok.iter().all(|&x| x) {
            for k in 0..h {
                c.require(
                    hv.power_min[k] <= hv.power_max[k],
                    f(&format!("hvac.power_min[{k}]")),
                    "exceeds power_max",
                );
                c.require(
                    hv.temp_min[k] <= hv.temp_pref && hv.temp_pref <= hv.temp_max[k],
                    f("hvac.temp_pref"),
                    format!("outside [temp_min, temp_max] in slot {k}"),
                );
            }
        }

        let l = &com.limits;
        c.require(l.grid_max >= 0.0, f("limits.grid_max"), "must be nonnegative");
        c.require(l.et_buy_max >= 0.0, f("limits.et_buy_max"), "must be nonnegative");
        c.require(l.et_sell_max >= 0.0, f("limits.et_sell_max"), "must be nonnegative");
        if c.len(&l.b2b_max, h, &f("limits.b2b_max")) {
            c.nonneg(&l.b2b_max, &f("limits.b2b_max"));
        }
        if c.len(&l.b2g_max, h, &f("limits.b2g_max")) {
            c.nonneg(&l.b2g_max, &f("limits.b2g_max"));
        }

        let se = &com.series;
        if c.len(&se.pv_available, h, &f("series.pv")) {
            c.nonneg(&se.pv_available, &f("series.pv"));
        }
        if c.len(&se.inflexible_load, h, &f("series.load")) {
            c.nonneg(&se.inflexible_load, &f("series.load"));
        }
        if c.len(&se.outdoor_temp, h, &f("series.temp")) {
            c.finite(&se.outdoor_temp, &f("series.temp"));
        }
        if c.len(&se.reactive_load, h, &f("series.qload")) {
            c.finite(&se.reactive_load, &f("series.qload"));
        }
    }
    c.out
}

/// Draws from a normal(mean, sd) truncated to `[lo, hi]` by rejection.
/// Deterministic for a fixed seed.
pub fn sample_initial_soc(lo: f64, hi: f64, mean: f64, sd: f64, seed: u64) -> Result<f64, ScenarioError> {
    if !(lo < hi) || !(sd > 0.0) || !mean.is_finite() {
        return Err(ScenarioError::Sampling(format!(
            "need lo < hi and sd > 0 (lo={lo}, hi={hi}, mean={mean}, sd={sd})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_truncated(&mut rng, lo, hi, mean, sd)
}

/// Rejection sampler shared by [`sample_initial_soc`] and callers that need a
/// stream of draws from one generator.
pub fn sample_truncated<R: rand::Rng>(rng: &mut R, lo: f64, hi: f64, mean: f64, sd: f64) -> Result<f64, ScenarioError> {
    let normal = Normal::new(mean, sd).map_err(|e| ScenarioError::Sampling(e.to_string()))?;
    // Acceptance probability can be tiny when the window sits deep in a
    // tail; give up rather than spin.
    for _ in 0..1_000_000 {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return Ok(x);
        }
    }
    Err(ScenarioError::Sampling(format!(
        "acceptance region [{lo}, {hi}] has negligible mass under N({mean}, {sd}²)"
    )))
}
