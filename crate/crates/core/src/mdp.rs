//! Repositioning decision process: zone-graph observations, conversion of
//! fractional actions into vehicle dispatches, rewards and weight calibration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor2;
use crate::domain::{Task, VehicleId, VehicleState};
use crate::error::{Error, Result};
use crate::sim::SimWorld;

/// Observation layout per zone: `[idle, inbound repositioning, inbound dropoffs,
/// demand(t-q+1) .. demand(t), forecast(1) .. forecast(h)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneGraph {
    pub n_zones: usize,
    pub features: Tensor2,
    /// Centroid-to-centroid travel times in seconds.
    pub adjacency: Tensor2,
    pub q: usize,
    pub forecast_horizon: usize,
}

impl ZoneGraph {
    pub const COUNT_COLUMNS: usize = 3;

    pub fn width(&self) -> usize {
        self.features.cols
    }

    pub fn idle(&self, zone: usize) -> f64 {
        self.features.get(zone, 0)
    }

    pub fn inbound_repositioning(&self, zone: usize) -> f64 {
        self.features.get(zone, 1)
    }

    pub fn inbound_dropoffs(&self, zone: usize) -> f64 {
        self.features.get(zone, 2)
    }

    /// Features divided by the fleet size, the network's input scaling.
    pub fn scaled_features(&self, fleet_size: usize) -> Tensor2 {
        let s = 1.0 / fleet_size.max(1) as f64;
        self.features.map(|v| v * s)
    }

    /// Travel times divided by their largest entry.
    pub fn scaled_adjacency(&self) -> Tensor2 {
        let m = self.adjacency.max_abs();
        if m > 0.0 {
            self.adjacency.map(|v| v / m)
        } else {
            self.adjacency.clone()
        }
    }
}

/// Settings of the observation builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateConfig {
    /// Number of past repositioning intervals of demand counts.
    pub q: usize,
    /// Future intervals of forecast columns; `None` keeps the observation forecast-free.
    pub forecast_horizon: Option<usize>,
}

impl Default for StateConfig {
    fn default() -> Self {
        StateConfig { q: 4, forecast_horizon: None }
    }
}

impl StateConfig {
    pub fn feature_width(&self) -> usize {
        ZoneGraph::COUNT_COLUMNS + self.q + self.forecast_horizon.unwrap_or(0)
    }
}

/// Per-zone origin counts of activated requests over consecutive intervals
/// ending at `now`, oldest first. Intervals before the window start are zero.
pub fn demand_history(world: &SimWorld, interval: f64, intervals: usize) -> Result<Vec<Vec<u32>>> {
    let n = world.region.n_zones();
    let now = world.clock.now();
    let mut counts = vec![vec![0u32; intervals]; n];
    let start = now - interval * intervals as f64;
    for r in world.activated_requests() {
        if r.request_time < start || r.request_time >= now {
            continue;
        }
        let back = ((now - r.request_time) / interval) as usize;
        if back >= intervals {
            continue;
        }
        let zone = world.region.zone_of(&r.origin)?;
        counts[zone][intervals - 1 - back] += 1;
    }
    Ok(counts)
}

/// Trailing-average demand rate per zone, repeated over `horizon` future intervals.
pub fn forecast_channel(history: &[Vec<u32>], horizon: usize) -> Vec<Vec<f64>> {
    history
        .iter()
        .map(|row| {
            let rate = if row.is_empty() { 0.0 } else { row.iter().map(|&c| c as f64).sum::<f64>() / row.len() as f64 };
            vec![rate; horizon]
        })
        .collect()
}

/// Build the zone-graph observation from the world at its current clock.
pub fn build_state(world: &SimWorld, cfg: &StateConfig) -> Result<ZoneGraph> {
    let n = world.region.n_zones();
    let width = cfg.feature_width();
    let mut features = Tensor2::zeros(n, width);
    for v in &world.vehicles {
        match (&v.state, &v.task) {
            (VehicleState::Idle, _) => {
                let k = world.region.zone_of(&v.position)?;
                features.set(k, 0, features.get(k, 0) + 1.0);
            }
            (VehicleState::Repositioning, Some(Task::Reposition { zone, .. })) => {
                features.set(*zone, 1, features.get(*zone, 1) + 1.0);
            }
            (VehicleState::EnRouteDropoff, Some(Task::Dropoff { request, .. })) => {
                let dest = world.requests[request.0 as usize].destination;
                let k = world.region.zone_of(&dest)?;
                features.set(k, 2, features.get(k, 2) + 1.0);
            }
            _ => {}
        }
    }
    let interval = world.config.repositioning_interval;
    let recent = demand_history(world, interval, cfg.q)?;
    for (k, row) in recent.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            features.set(k, ZoneGraph::COUNT_COLUMNS + t, c as f64);
        }
    }
    let horizon = cfg.forecast_horizon.unwrap_or(0);
    if horizon > 0 {
        let elapsed = ((world.clock.now() - world.clock.start) / interval) as usize;
        let history = demand_history(world, interval, elapsed)?;
        let forecast = forecast_channel(&history, horizon);
        for (k, row) in forecast.iter().enumerate() {
            for (t, &f) in row.iter().enumerate() {
                features.set(k, ZoneGraph::COUNT_COLUMNS + cfg.q + t, f);
            }
        }
    }
    Ok(ZoneGraph {
        n_zones: n,
        features,
        adjacency: world.travel_times.clone(),
        q: cfg.q,
        forecast_horizon: horizon,
    })
}

/// Row-stochastic matrix of idle-vehicle fractions, origin zone by destination zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepositionAction {
    pub rows: Vec<Vec<f64>>,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl RepositionAction {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let a = RepositionAction { rows };
        a.validate()?;
        Ok(a)
    }

    /// Every vehicle stays where it is.
    pub fn stay(n: usize) -> Self {
        RepositionAction { rows: (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect() }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!("action row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Err(Error::Invariant(format!("action row {i} leaves [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Invariant(format!("action row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor2 {
        Tensor2::from_rows(&self.rows).expect("square action")
    }
}

/// Idle vehicles per zone that an action sends elsewhere:
/// `floor(A_ij * idle_i)` for every `j != i`, longest-idle vehicles first,
/// destinations in ascending order. Remaining vehicles stay idle.
pub fn action_to_dispatch(action: &RepositionAction, world: &SimWorld) -> Result<Vec<(VehicleId, usize)>> {
    action.validate()?;
    let n = world.region.n_zones();
    if action.n() != n {
        return Err(Error::Shape(format!("action over {} zones for a {n}-zone region", action.n())));
    }
    let mut idle_by_zone: Vec<Vec<(f64, VehicleId)>> = vec![Vec::new(); n];
    for v in world.vehicles.iter().filter(|v| v.state == VehicleState::Idle) {
        idle_by_zone[world.region.zone_of(&v.position)?].push((v.idle_since, v.id));
    }
    let mut out = Vec::new();
    for (i, idle) in idle_by_zone.iter_mut().enumerate() {
        idle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let available = idle.len();
        let counts: Vec<usize> = (0..n)
            .map(|j| if j == i { 0 } else { libm::floor(action.rows[i][j] * available as f64) as usize })
            .collect();
        let total: usize = counts.iter().sum();
        if total > available {
            return Err(Error::Invariant(format!("zone {i}: {total} dispatches from {available} idle vehicles")));
        }
        let mut next = idle.iter();
        for (j, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let (_, id) = next.next().expect("count checked above");
                out.push((*id, j));
            }
        }
    }
    Ok(out)
}

/// Reward weights: waiting penalty `omega` and service bonus `sigma`, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub omega: f64,
    pub sigma: f64,
}

impl RewardWeights {
    pub fn new(omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega <= 1.0) {
            return Err(Error::Calibration(format!("omega must lie in (0,1], got {omega}")));
        }
        Ok(RewardWeights { omega, sigma: 1.0 - omega })
    }
}

/// Reward tallies over one decision period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardCounts {
    /// Sum over simulation steps of the waiting-request count.
    pub waiting: f64,
    /// Requests served during the period.
    pub served: f64,
}

/// `-omega * delta * (waiting + served) + sigma * served`.
pub fn reward(counts: RewardCounts, weights: RewardWeights, delta: f64) -> f64 {
    -weights.omega * delta * (counts.waiting + counts.served) + weights.sigma * counts.served
}

/// Weights under which the cumulative reward equals `-total_wait / total_requests`.
///
/// Solves `-omega * W + (1 - omega) * S = -W / n`, giving
/// `omega = (W + n S) / (n (W + S))`.
pub fn calibrate_weights(total_wait: f64, served: f64, total_requests: f64) -> Result<RewardWeights> {
    if !(total_requests > 0.0) || !total_wait.is_finite() || !served.is_finite() {
        return Err(Error::Calibration(format!(
            "need a positive request count and finite tallies (W={total_wait}, S={served}, n={total_requests})"
        )));
    }
    if !(total_wait + served > 0.0) || total_wait < 0.0 || served < 0.0 {
        return Err(Error::Calibration(format!("degenerate tallies W={total_wait}, S={served}")));
    }
    let omega = (total_wait + total_requests * served) / (total_requests * (total_wait + served));
    RewardWeights::new(omega)
}

/// One decision of the repositioning process with the reward it earned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpStepRecord {
    pub time: f64,
    pub state: Option<ZoneGraph>,
    pub action: RepositionAction,
    /// Simplex points actually sampled (before flooring); what the policy's log-density scores.
    pub log_prob: Option<f64>,
    pub counts: RewardCounts,
    pub dispatched: usize,
}

impl MdpStepRecord {
    pub fn reward(&self, weights: RewardWeights, delta: f64) -> f64 {
        reward(self.counts, weights, delta)
    }
}


#[cfg(test)]
mod world_tests {
    use super::*;
    use crate::demand::{DemandStream, StreamRequest, Window};
    use crate::domain::{Position, RequestId, RequestState, ServiceRegion};
    use crate::rng::rng_from_seed;
    use crate::sim::{init_world, SimConfig, SimWorld};
    use proptest::prelude::*;
    use rand::Rng;

    fn world(fleet: usize, reqs: Vec<StreamRequest>) -> SimWorld {
        let region = ServiceRegion::grid(4000.0, 4000.0, 2, 2).unwrap();
        let mut s = DemandStream::empty(Window::new(0.0, 3600.0).unwrap());
        s.requests = reqs;
        init_world(&SimConfig { fleet_size: fleet, ..SimConfig::default() }, &region, &s, 11).unwrap()
    }

    fn req(t: f64, o: (f64, f64), d: (f64, f64)) -> StreamRequest {
        StreamRequest { request_time: t, origin: Position::new(o.0, o.1), destination: Position::new(d.0, d.1) }
    }

    #[test]
    fn all_idle_in_zone_zero() {
        let mut w = world(7, vec![]);
        for v in w.vehicles.iter_mut() {
            v.position = Position::new(300.0, 300.0);
        }
        let g = build_state(&w, &StateConfig::default()).unwrap();
        assert_eq!((0..4).map(|k| g.idle(k)).collect::<Vec<_>>(), vec![7.0, 0.0, 0.0, 0.0]);
        assert!((0..4).all(|k| g.inbound_repositioning(k) == 0.0 && g.inbound_dropoffs(k) == 0.0));
        assert_eq!(g.width(), 7);
        let a = &g.adjacency;
        assert!((0..4).all(|i| a.get(i, i) == 0.0 && (0..4).all(|j| a.get(i, j) == a.get(j, i))));
    }

    #[test]
    fn hand_fixture_counts() {
        let mut w = world(5, vec![req(0.0, (100.0, 100.0), (500.0, 3000.0))]);
        let c3 = w.region.centroids[3];
        for id in [0, 1] {
            w.vehicles[id].state = VehicleState::Repositioning;
            w.vehicles[id].task = Some(Task::Reposition { zone: 3, target: c3 });
        }
        w.cursor = 1;
        w.requests[0].state = RequestState::InVehicle;
        w.requests[0].pickup_time = Some(0.0);
        w.vehicles[2].state = VehicleState::EnRouteDropoff;
        w.vehicles[2].task = Some(Task::Dropoff { request: RequestId(0), target: Position::new(500.0, 3000.0), dwell_left: None });
        let g = build_state(&w, &StateConfig::default()).unwrap();
        assert_eq!(g.inbound_repositioning(3), 2.0);
        assert_eq!(g.inbound_dropoffs(2), 1.0);
        let idle: f64 = (0..4).map(|k| g.idle(k)).sum();
        let rep: f64 = (0..4).map(|k| g.inbound_repositioning(k)).sum();
        let arr: f64 = (0..4).map(|k| g.inbound_dropoffs(k)).sum();
        assert_eq!(idle + rep + arr + w.fleet_partition()[1] as f64, 5.0);
    }

    #[test]
    fn identity_action_dispatches_nothing() {
        let w = world(20, vec![]);
        assert!(action_to_dispatch(&RepositionAction::stay(4), &w).unwrap().is_empty());
    }

    #[test]
    fn half_of_five_rounds_down() {
        let mut w = world(5, vec![]);
        for (i, v) in w.vehicles.iter_mut().enumerate() {
            v.position = Position::new(500.0, 500.0);
            v.idle_since = -(i as f64);
        }
        let mut rows = RepositionAction::stay(4).rows;
        rows[0] = vec![0.5, 0.0, 0.0, 0.5];
        let d = action_to_dispatch(&RepositionAction::new(rows).unwrap(), &w).unwrap();
        // Longest idle first: vehicles 4 and 3.
        assert_eq!(d, vec![(VehicleId(4), 3), (VehicleId(3), 3)]);
    }

    fn random_action(rng: &mut impl Rng, n: usize) -> RepositionAction {
        let rows = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let mut row: Vec<f64> = raw.iter().map(|x| x / s).collect();
                let rest: f64 = row[1..].iter().sum();
                row[0] = (1.0 - rest).max(0.0);
                row
            })
            .collect();
        RepositionAction { rows }
    }

    proptest! {
        #[test]
        fn dispatch_never_exceeds_idle(seed in any::<u64>(), fleet in 1usize..60) {
            let mut rng = rng_from_seed(seed);
            let mut w = world(fleet, vec![]);
            for v in w.vehicles.iter_mut() {
                v.position = Position::new(rng.gen::<f64>() * 4000.0, rng.gen::<f64>() * 4000.0);
            }
            let a = random_action(&mut rng, 4);
            prop_assume!(a.validate().is_ok());
            let d = action_to_dispatch(&a, &w).unwrap();
            let g = build_state(&w, &StateConfig::default()).unwrap();
            for i in 0..4 {
                let from_i = d.iter().filter(|(id, _)| w.region.zone_of(&w.vehicles[id.0 as usize].position).unwrap() == i).count();
                prop_assert!(from_i as f64 <= g.idle(i));
                prop_assert!(d.iter().all(|(_, j)| *j < 4));
            }
            let mut ids: Vec<u32> = d.iter().map(|(id, _)| id.0).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), d.len());
        }
    }

    #[test]
    fn state_ignores_future_demand() {
        let mut rng = rng_from_seed(3);
        let mut reqs: Vec<StreamRequest> = (0..200)
            .map(|i| req(i as f64 * 15.0, (rng.gen::<f64>() * 4000.0, rng.gen::<f64>() * 4000.0), (2000.0, 2000.0)))
            .collect();
        let mut w = world(10, reqs.clone());
        for _ in 0..80 {
            w.step(&mut crate::sim::NoRepositioning).unwrap();
        }
        let now = w.clock.now();
        let before = build_state(&w, &StateConfig::default()).unwrap();
        for r in reqs.iter_mut().filter(|r| r.request_time > now) {
            r.origin = Position::new(3999.0, 1.0);
        }
        let mut w2 = world(10, reqs);
        for _ in 0..80 {
            w2.step(&mut crate::sim::NoRepositioning).unwrap();
        }
        assert_eq!(before, build_state(&w2, &StateConfig::default()).unwrap());
    }

    #[test]
    fn history_zero_padded_at_start() {
        let w = world(3, vec![req(0.0, (100.0, 100.0), (200.0, 200.0))]);
        let h = demand_history(&w, 300.0, 4).unwrap();
        assert!(h.iter().flatten().all(|&c| c == 0));
    }
}
