//! Scenario configuration files, presets and flag overrides.

use std::path::{Path, PathBuf};

use samsfleet_core::a2c::TrainConfig;
use samsfleet_core::assignment::AssignmentStrategy;
use samsfleet_core::demand::Window;
use samsfleet_core::domain::{CentroidRule, ServiceRegion};
use samsfleet_core::mdp::RewardWeights;
use samsfleet_core::scenario::{DemandSource, Scenario};
use samsfleet_core::sim::{Placement, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ingest::{DayFilter, GeoFrame, TripStore};

/// Environment variable naming the directory that relative store paths resolve against.
pub const DATA_ROOT_ENV: &str = "SAMSFLEET_DATA";

pub const SCHEMA: &str = include_str!("../schema/scenario.schema.json");

/// Forecast look-ahead of the externally guided agent, in seconds.
pub const EGR_FORECAST_SECONDS: f64 = 5400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    Meters { width: f64, height: f64 },
    Geo(GeoFrame),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub extent: Extent,
    pub cols: usize,
    pub rows: usize,
    #[serde(default)]
    pub centroids: CentroidRule,
}

impl RegionSpec {
    pub fn size(&self) -> Result<(f64, f64)> {
        match self.extent {
            Extent::Meters { width, height } => Ok((width, height)),
            Extent::Geo(f) => {
                f.validate()?;
                Ok(f.extent())
            }
        }
    }

    pub fn grid(&self) -> Result<ServiceRegion> {
        let (w, h) = self.size()?;
        Ok(ServiceRegion::grid(w, h, self.cols, self.rows)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    /// Per-zone Poisson rates in requests per hour and an origin-destination matrix.
    Synthetic { rates: Vec<f64>, od: Vec<Vec<f64>> },
    /// A trip store written by `samsfleet ingest`.
    Records {
        store: PathBuf,
        demand_fraction: f64,
        #[serde(default)]
        days: DayFilter,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Learned repositioning without forecast input.
    #[default]
    Isr,
    /// Learned repositioning with historical-rate forecast columns.
    Egr,
    /// No repositioning.
    BaselineNone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub sim: SimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub region: RegionSpec,
    pub window: Window,
    pub demand: DemandSpec,
    #[serde(default)]
    pub agent: AgentMode,
    /// Seed of the first simulated episode; later episodes derive from it.
    #[serde(default)]
    pub seed: u64,
    /// Trained agent used by `simulate` and `evaluate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Calibrated reward weights; training calibrates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<RewardWeights>,
}

/// A config resolved into runnable pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub scenario: Scenario,
    pub train: TrainConfig,
}

pub fn resolve_path(path: &Path, data_root: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_root.join(path)
    }
}

impl ScenarioConfig {
    /// Training settings with the forecast channel matching the agent mode.
    pub fn effective_train(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        match self.agent {
            AgentMode::Isr if t.forecast_horizon.is_some() => {
                return Err(Error::Config("the isr agent observes no forecast; drop train.forecast_horizon".into()));
            }
            AgentMode::Egr if t.forecast_horizon.is_none() => {
                t.forecast_horizon = Some((EGR_FORECAST_SECONDS / self.sim.repositioning_interval).ceil() as usize);
            }
            _ => {}
        }
        t.validate()?;
        Ok(t)
    }

    pub fn resolve(&self, data_root: &Path) -> Result<Resolved> {
        let train = self.effective_train()?;
        self.sim.validate()?;
        let window = Window::new(self.window.start, self.window.end)?;
        let mut region = self.region.grid()?;
        let demand = match &self.demand {
            DemandSpec::Synthetic { rates, od } => DemandSource::Synthetic { rates: rates.clone(), od: od.clone() },
            DemandSpec::Records { store, demand_fraction, days } => {
                let Extent::Geo(frame) = self.region.extent else {
                    return Err(Error::Config("record demand needs a geo region extent".into()));
                };
                let path = resolve_path(store, data_root);
                let store = TripStore::read(&path)?;
                if store.meta.frame != frame {
                    return Err(Error::Config(format!("store {} was ingested for a different frame", path.display())));
                }
                let days: Vec<_> = store.days(*days).into_iter().map(|(_, r)| r).collect();
                if days.is_empty() {
                    return Err(Error::Data(format!("store {} has no trips on the selected days", path.display())));
                }
                if self.region.centroids == CentroidRule::Demand {
                    let pickups: Vec<_> = days.iter().flatten().map(|r| r.pickup).collect();
                    region = region.with_demand_centroids(pickups.iter());
                }
                DemandSource::Records { days, demand_fraction: *demand_fraction }
            }
        };
        let scenario = Scenario { sim: self.sim.clone(), region, window, demand };
        scenario.validate()?;
        Ok(Resolved { scenario, train })
    }
}

/// Set `dotted.path=value` in a JSON document. The value is read as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in override {path:?}")));
        }
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(Error::Config(format!("override {path:?} descends into a non-object"))),
        };
        if k + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parse a config document after applying overrides.
pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<ScenarioConfig> {
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

/// Read a config file or a preset name.
pub fn load(source: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let doc = match preset(source) {
        Some(cfg) => serde_json::to_value(cfg).map_err(|e| Error::Runtime(e.to_string()))?,
        None => {
            let path = Path::new(source);
            if !path.exists() {
                return Err(Error::Config(format!("{source} is neither a preset nor a file (presets: {})", PRESETS.join(", "))));
            }
            let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{source}: {e}")))?
        }
    };
    from_value(doc, overrides)
}

pub const PRESETS: [&str; 10] = [
    "toy2",
    "imbalance4",
    "tableIV/1",
    "tableIV/2",
    "tableIV/3",
    "tableIV/4",
    "tableIV/5",
    "tableIV/6",
    "tableIV/7",
    "tableIV/8",
];

/// Rectangle around Manhattan.
pub const MANHATTAN: GeoFrame = GeoFrame { west: -74.020, south: 40.700, east: -73.907, north: 40.880 };

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    match name {
        "toy2" => Some(toy2()),
        "imbalance4" => Some(imbalance4()),
        _ => {
            let k: usize = name.strip_prefix("tableIV/")?.parse().ok()?;
            (1..=8).contains(&k).then(|| table_iv(k))
        }
    }
}

/// Two zones side by side; all trips start in zone 1 and end in zone 0, the fleet starts in zone 0.
pub fn toy2() -> ScenarioConfig {
    ScenarioConfig {
        name: "toy2".into(),
        sim: SimConfig {
            fleet_size: 10,
            repositioning_interval: 60.0,
            initial_placement: Placement::InZone(0),
            count_assigned_as_waiting: true,
            ..SimConfig::default()
        },
        train: TrainConfig {
            episodes: 500,
            workers: 8,
            actor_lr: 1.5e-3,
            critic_lr: 3e-3,
            normalize_advantages: true,
            reward_scale: 0.01,
            eval_episodes: 20,
            ..TrainConfig::default()
        },
        region: RegionSpec { extent: Extent::Meters { width: 2000.0, height: 1000.0 }, cols: 2, rows: 1, centroids: CentroidRule::Geometric },
        window: Window { start: 0.0, end: 3600.0 },
        demand: DemandSpec::Synthetic { rates: vec![0.0, 30.0], od: vec![vec![1.0, 0.0], vec![1.0, 0.0]] },
        agent: AgentMode::Isr,
        seed: 0,
        checkpoint: None,
        weights: None,
    }
}

/// 2x2 grid where zone 0 generates most trips and sends them to the far corner.
pub fn imbalance4() -> ScenarioConfig {
    let mut od = vec![vec![0.25; 4]; 4];
    od[0] = vec![0.0, 0.05, 0.05, 0.9];
    ScenarioConfig {
        name: "imbalance4".into(),
        sim: SimConfig { fleet_size: 20, count_assigned_as_waiting: true, ..SimConfig::default() },
        train: TrainConfig {
            episodes: 2000,
            workers: 8,
            actor_lr: 1e-3,
            critic_lr: 3e-3,
            normalize_advantages: true,
            reward_scale: 0.01,
            eval_episodes: 20,
            ..TrainConfig::default()
        },
        region: RegionSpec { extent: Extent::Meters { width: 4000.0, height: 4000.0 }, cols: 2, rows: 2, centroids: CentroidRule::Geometric },
        window: Window { start: 0.0, end: 7200.0 },
        demand: DemandSpec::Synthetic { rates: vec![24.0, 2.0, 2.0, 2.0], od },
        agent: AgentMode::Isr,
        seed: 0,
        checkpoint: None,
        weights: None,
    }
}

/// Scenario `k` of the eight-way period x day type x assignment grid over an
/// ingested Manhattan store at `nyc/` under the data root. Windows count
/// seconds from midnight, so ingest with the default origin.
pub fn table_iv(k: usize) -> ScenarioConfig {
    let i = k - 1;
    let window = if i < 4 { Window { start: 5.0 * 3600.0, end: 13.0 * 3600.0 } } else { Window { start: 3.0 * 3600.0, end: 24.0 * 3600.0 } };
    let days = if i % 4 < 2 { DayFilter::Weekday } else { DayFilter::Weekend };
    let assignment = if i.is_multiple_of(2) { AssignmentStrategy::Fcfs } else { AssignmentStrategy::Optimal };
    ScenarioConfig {
        name: format!("tableIV/{k}"),
        sim: SimConfig { assignment, count_assigned_as_waiting: true, ..SimConfig::default() },
        train: TrainConfig { episodes: 2000, workers: 8, normalize_advantages: true, reward_scale: 0.01, ..TrainConfig::default() },
        region: RegionSpec { extent: Extent::Geo(MANHATTAN), cols: 4, rows: 4, centroids: CentroidRule::Demand },
        window,
        demand: DemandSpec::Records { store: PathBuf::from("nyc"), demand_fraction: 0.1, days },
        agent: AgentMode::Isr,
        seed: 0,
        checkpoint: None,
        weights: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    /// Every object key in `doc` must be declared where the schema lists properties.
    fn declared(schema: &Value, doc: &Value, root: &Value, path: &str) -> std::result::Result<(), String> {
        let schema = match schema.get("$ref").and_then(Value::as_str) {
            Some(r) => root.pointer(r.trim_start_matches('#')).ok_or(format!("dangling ref {r}"))?,
            None => schema,
        };
        if let Some(alts) = schema.get("oneOf").and_then(Value::as_array) {
            return alts
                .iter()
                .find(|a| declared(a, doc, root, path).is_ok() && a.get("properties").is_none_or(|p| keys_match(p, doc)))
                .map(|_| ())
                .ok_or(format!("{path}: no alternative matches"));
        }
        match doc {
            Value::Object(m) => {
                let props = schema.get("properties");
                for (k, v) in m {
                    let sub = match props.and_then(|p| p.get(k)) {
                        Some(s) => s,
                        None if props.is_some() => return Err(format!("{path}.{k} is not in the schema")),
                        None => continue,
                    };
                    declared(sub, v, root, &format!("{path}.{k}"))?;
                }
                Ok(())
            }
            Value::Array(items) => match schema.get("items") {
                Some(s) => items.iter().try_for_each(|v| declared(s, v, root, path)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    fn keys_match(props: &Value, doc: &Value) -> bool {
        doc.as_object().is_some_and(|m| m.keys().all(|k| props.get(k).is_some()))
    }

    #[test]
    fn presets_round_trip_and_fit_the_schema() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let doc = serde_json::to_value(&cfg).unwrap();
            declared(&schema, &doc, &schema, name).unwrap();
            assert_eq!(from_value(doc, &[]).unwrap(), cfg, "{name}");
        }
        assert!(preset("tableIV/9").is_none() && preset("nope").is_none());
    }

    #[test]
    fn table_iv_axes() {
        let c = |k| table_iv(k);
        assert_eq!(c(1).sim.assignment, AssignmentStrategy::Fcfs);
        assert_eq!(c(2).sim.assignment, AssignmentStrategy::Optimal);
        assert!(matches!(c(3).demand, DemandSpec::Records { days: DayFilter::Weekend, .. }));
        assert!(matches!(c(6).demand, DemandSpec::Records { days: DayFilter::Weekday, .. }));
        assert_eq!(c(1).window.end - c(1).window.start, 8.0 * 3600.0);
        assert_eq!(c(8).window.end - c(8).window.start, 21.0 * 3600.0);
        assert_eq!(c(5).sim.fleet_size, 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut doc = serde_json::to_value(toy2()).unwrap();
        doc["sim"]["vehicle_sped"] = json!(5.0);
        assert!(matches!(from_value(doc, &[]), Err(Error::Config(_))));
        let mut doc = serde_json::to_value(toy2()).unwrap();
        doc["demand"]["ratez"] = json!([1.0]);
        assert!(from_value(doc, &[]).is_err());
        let mut doc = serde_json::to_value(toy2()).unwrap();
        doc["extra"] = json!(1);
        assert!(from_value(doc, &[]).is_err());
    }

    #[test]
    fn overrides_merge_before_parsing() {
        let doc = serde_json::to_value(toy2()).unwrap();
        let cfg = from_value(doc, &["sim.fleet_size=3".into(), "agent=baseline_none".into(), "train.max_grad_norm=1.5".into()]).unwrap();
        assert_eq!(cfg.sim.fleet_size, 3);
        assert_eq!(cfg.agent, AgentMode::BaselineNone);
        assert_eq!(cfg.train.max_grad_norm, Some(1.5));
        let doc = serde_json::to_value(toy2()).unwrap();
        assert!(from_value(doc.clone(), &["sim.fleet_size".into()]).is_err());
        assert!(from_value(doc, &["name.inner=1".into()]).is_err());
    }

    #[test]
    fn agent_mode_sets_forecast_channel() {
        let mut c = toy2();
        assert_eq!(c.effective_train().unwrap().forecast_horizon, None);
        c.agent = AgentMode::Egr;
        assert_eq!(c.effective_train().unwrap().forecast_horizon, Some(90));
        c.agent = AgentMode::Isr;
        c.train.forecast_horizon = Some(3);
        assert!(c.effective_train().is_err());
    }

    #[test]
    fn synthetic_presets_resolve() {
        let r = toy2().resolve(Path::new("/nonexistent")).unwrap();
        assert_eq!(r.scenario.region.n_zones(), 2);
        let r = imbalance4().resolve(Path::new("/nonexistent")).unwrap();
        assert_eq!(r.scenario.sim.fleet_size, 20);
    }

    #[test]
    fn record_presets_need_a_store() {
        let err = table_iv(1).resolve(Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let mut c = table_iv(1);
        c.region.extent = Extent::Meters { width: 1000.0, height: 1000.0 };
        assert!(matches!(c.resolve(Path::new("/nonexistent")), Err(Error::Config(_))));
    }
}
