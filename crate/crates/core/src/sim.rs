//! Discrete-time fleet simulation.
//!
//! A step runs, in order: request activation, assignment (on its grid),
//! repositioning (on its grid), then vehicle movement with exact sub-step
//! arrival instants. The clock advances last.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentInstance, AssignmentStrategy, RequestCandidate, VehicleCandidate};
use crate::demand::DemandStream;
use crate::diffnet::Tensor2;
use crate::domain::{
    move_along_l1, Clock, Position, Rect, Request, RequestId, RequestState, ServiceRegion, Task, Vehicle, VehicleId,
    VehicleState,
};
use crate::error::{Error, Result};
use crate::mdp::{action_to_dispatch, MdpStepRecord, RepositionAction, RewardCounts, ZoneGraph};
use crate::rng::rng_from_seed;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Uniform over the service rectangle.
    #[default]
    UniformRandom,
    /// Zone shares proportional to the episode's request origins. Reads the
    /// whole stream, so idle counts then depend on demand not yet requested.
    DemandProportional,
    /// Every vehicle uniform inside one zone.
    InZone(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Meters per second.
    pub vehicle_speed: f64,
    pub dropoff_dwell: f64,
    pub pickup_dwell: f64,
    pub step: f64,
    pub fleet_size: usize,
    pub assignment_interval: f64,
    pub repositioning_interval: f64,
    #[serde(default)]
    pub initial_placement: Placement,
    #[serde(default)]
    pub assignment: AssignmentStrategy,
    /// Wait/distance trade-off for vehicle-limited optimal assignment; the
    /// vehicle speed when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Count assigned-but-not-picked-up requests as waiting in the reward.
    #[serde(default)]
    pub count_assigned_as_waiting: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            vehicle_speed: 5.0,
            dropoff_dwell: 15.0,
            pickup_dwell: 45.0,
            step: 15.0,
            fleet_size: 600,
            assignment_interval: 30.0,
            repositioning_interval: 300.0,
            initial_placement: Placement::UniformRandom,
            assignment: AssignmentStrategy::Fcfs,
            alpha: None,
            count_assigned_as_waiting: false,
        }
    }
}

fn is_step_multiple(x: f64, step: f64) -> bool {
    let k = libm::round(x / step);
    k >= 1.0 && (x - k * step).abs() <= 1e-9 * x.max(1.0)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.vehicle_speed > 0.0) || !self.vehicle_speed.is_finite() {
            return bad(format!("vehicle_speed must be positive, got {}", self.vehicle_speed));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return bad(format!("step must be positive, got {}", self.step));
        }
        if !(self.pickup_dwell >= 0.0 && self.dropoff_dwell >= 0.0) {
            return bad("dwell times must be non-negative".into());
        }
        for (name, v) in [("assignment_interval", self.assignment_interval), ("repositioning_interval", self.repositioning_interval)] {
            if !is_step_multiple(v, self.step) {
                return bad(format!("{name} = {v} is not a positive multiple of step {}", self.step));
            }
        }
        if self.fleet_size == 0 {
            return bad("fleet_size must be at least 1".into());
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0) || !a.is_finite() {
                return bad(format!("alpha must be non-negative, got {a}"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.vehicle_speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival,
    Assignment,
    Pickup,
    Dropoff,
    RepositionStart,
    RepositionArrive,
    RepositionCancel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vehicle: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub request: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zone: Option<usize>,
    pub position: Position,
}

/// Output of a repositioning policy at a decision instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub state: Option<ZoneGraph>,
    pub action: RepositionAction,
    pub log_prob: Option<f64>,
}

impl Decision {
    pub fn stay(n: usize) -> Self {
        Decision { state: None, action: RepositionAction::stay(n), log_prob: None }
    }
}

pub trait RepositioningPolicy {
    /// Called at every repositioning instant after assignment. `None` keeps every vehicle in place.
    fn decide(&mut self, world: &SimWorld) -> Result<Option<Decision>>;
}

/// Never repositions.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRepositioning;

impl RepositioningPolicy for NoRepositioning {
    fn decide(&mut self, _world: &SimWorld) -> Result<Option<Decision>> {
        Ok(None)
    }
}

/// Applies the same action at every decision.
#[derive(Debug, Clone)]
pub struct FixedAction(pub RepositionAction);

impl RepositioningPolicy for FixedAction {
    fn decide(&mut self, _world: &SimWorld) -> Result<Option<Decision>> {
        Ok(Some(Decision { state: None, action: self.0.clone(), log_prob: None }))
    }
}

impl<P: RepositioningPolicy + ?Sized> RepositioningPolicy for &mut P {
    fn decide(&mut self, world: &SimWorld) -> Result<Option<Decision>> {
        (**self).decide(world)
    }
}

/// What happened during one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub decision: Option<Decision>,
    pub dispatched: usize,
    pub assigned: usize,
    /// Requests waiting at the end of the step (unassigned, optionally plus assigned).
    pub waiting: usize,
    /// Requests whose drop-off completed during the step.
    pub served: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub config: SimConfig,
    pub clock: Clock,
    pub region: ServiceRegion,
    pub travel_times: Tensor2,
    pub vehicles: Vec<Vehicle>,
    /// The whole episode stream; entries past `cursor` are still unrequested.
    pub requests: Vec<Request>,
    pub cursor: usize,
    /// Indices of unassigned requests, ascending.
    unassigned: Vec<usize>,
    n_assigned: usize,
    pub events: Vec<SimEvent>,
    pub record_events: bool,
    /// Sum over movement legs of the L1 displacement.
    pub displacement: f64,
}

fn uniform_in(rect: &Rect, rng: &mut impl Rng) -> Position {
    let x = rect.min_x + rng.gen::<f64>() * rect.width();
    let y = rect.min_y + rng.gen::<f64>() * rect.height();
    Position::new(x.min(rect.max_x), y.min(rect.max_y))
}

/// Largest-remainder split of `total` in proportion to `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / s * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - libm::floor(quotas[b])).total_cmp(&(quotas[a] - libm::floor(quotas[a]))).then(a.cmp(&b)));
    for k in order {
        if left == 0 {
            break;
        }
        if weights[k] > 0.0 {
            out[k] += 1;
            left -= 1;
        }
    }
    out
}

/// Build the world at the start of the stream's window with the fleet placed per config.
pub fn init_world(config: &SimConfig, region: &ServiceRegion, stream: &DemandStream, seed: u64) -> Result<SimWorld> {
    config.validate()?;
    region.validate()?;
    let start = stream.window.start;
    let clock = Clock::new(start, config.step, stream.window.end)?;
    let mut rng = rng_from_seed(seed);
    let zones_for_fleet: Vec<usize> = match config.initial_placement {
        Placement::UniformRandom => Vec::new(),
        Placement::InZone(k) => {
            if k >= region.n_zones() {
                return Err(Error::Config(format!("placement zone {k} outside {} zones", region.n_zones())));
            }
            vec![k; config.fleet_size]
        }
        Placement::DemandProportional => {
            let mut w = vec![0.0; region.n_zones()];
            for r in &stream.requests {
                w[region.zone_of(&r.origin)?] += 1.0;
            }
            if w.iter().sum::<f64>() == 0.0 {
                Vec::new()
            } else {
                apportion(config.fleet_size, &w).iter().enumerate().flat_map(|(k, &c)| core::iter::repeat_n(k, c)).collect()
            }
        }
    };
    let vehicles: Vec<Vehicle> = (0..config.fleet_size)
        .map(|i| {
            let rect = zones_for_fleet.get(i).map(|&k| &region.zones[k]).unwrap_or(&region.bounds);
            Vehicle::new(VehicleId(i as u32), uniform_in(rect, &mut rng), start)
        })
        .collect();
    let mut requests = Vec::with_capacity(stream.requests.len());
    for (i, r) in stream.requests.iter().enumerate() {
        if !region.bounds.contains(&r.origin) || !region.bounds.contains(&r.destination) {
            return Err(Error::OutOfRegion { x: r.origin.x, y: r.origin.y });
        }
        if i > 0 && r.request_time < stream.requests[i - 1].request_time {
            return Err(Error::Config("demand stream is not time-ordered".into()));
        }
        requests.push(Request::new(RequestId(i as u32), r.request_time, r.origin, r.destination));
    }
    let tt = region.travel_time_matrix(config.vehicle_speed)?;
    Ok(SimWorld {
        config: config.clone(),
        clock,
        region: region.clone(),
        travel_times: Tensor2::from_rows(&tt)?,
        vehicles,
        requests,
        cursor: 0,
        unassigned: Vec::new(),
        n_assigned: 0,
        events: Vec::new(),
        record_events: true,
        displacement: 0.0,
    })
}

fn set_vehicle_state(v: &mut Vehicle, next: VehicleState) -> Result<()> {
    if !v.state.can_become(next) {
        return Err(Error::Invariant(format!("vehicle {}: illegal transition {:?} -> {:?}", v.id.0, v.state, next)));
    }
    v.state = next;
    Ok(())
}

fn set_request_state(r: &mut Request, next: RequestState) -> Result<()> {
    if next.ordinal() != r.state.ordinal() + 1 {
        return Err(Error::Invariant(format!("request {}: illegal transition {:?} -> {:?}", r.id.0, r.state, next)));
    }
    r.state = next;
    Ok(())
}

struct Mover<'a> {
    cfg: &'a SimConfig,
    t0: f64,
    dt: f64,
    events: Vec<SimEvent>,
    displacement: f64,
    served: usize,
    picked_up: usize,
}

impl Mover<'_> {
    /// Drive toward `target`, charging the odometer selected by `leg`. Returns true on arrival.
    fn drive(&mut self, v: &mut Vehicle, target: Position, budget: &mut f64, leg: u8) -> bool {
        let speed = self.cfg.vehicle_speed;
        let (p, used) = move_along_l1(v.position, target, *budget * speed);
        self.displacement += (p.x - v.position.x).abs() + (p.y - v.position.y).abs();
        match leg {
            0 => v.odometer_pickup += used,
            1 => v.odometer_loaded += used,
            _ => v.odometer_reposition += used,
        }
        v.position = p;
        *budget = (*budget - used / speed).max(0.0);
        p == target
    }

    fn now(&self, budget: f64) -> f64 {
        self.t0 + (self.dt - budget)
    }

    fn event(&mut self, time: f64, kind: EventKind, v: &Vehicle, request: Option<u32>, zone: Option<usize>) {
        self.events.push(SimEvent { time, kind, vehicle: Some(v.id.0), request, zone, position: v.position });
    }

    fn advance(&mut self, v: &mut Vehicle, requests: &mut [Request]) -> Result<()> {
        let mut budget = self.dt;
        loop {
            let Some(task) = v.task.clone() else { return Ok(()) };
            match task {
                Task::Reposition { zone, target } => {
                    if self.drive(v, target, &mut budget, 2) {
                        set_vehicle_state(v, VehicleState::Idle)?;
                        v.task = None;
                        v.idle_since = self.now(budget);
                        self.event(self.now(budget), EventKind::RepositionArrive, v, None, Some(zone));
                    }
                    return Ok(());
                }
                Task::Pickup { request, target, mut dwell_left, mut reached_at } => {
                    if dwell_left.is_none() {
                        if !self.drive(v, target, &mut budget, 0) {
                            return Ok(());
                        }
                        reached_at = Some(self.now(budget));
                        dwell_left = Some(self.cfg.pickup_dwell);
                    }
                    let left = dwell_left.unwrap_or(0.0);
                    if left > budget + TIME_EPS {
                        v.task = Some(Task::Pickup { request, target, dwell_left: Some(left - budget), reached_at });
                        return Ok(());
                    }
                    budget = (budget - left).max(0.0);
                    let r = &mut requests[request.0 as usize];
                    set_request_state(r, RequestState::InVehicle)?;
                    r.pickup_time = reached_at;
                    self.picked_up += 1;
                    set_vehicle_state(v, VehicleState::EnRouteDropoff)?;
                    v.task = Some(Task::Dropoff { request, target: r.destination, dwell_left: None });
                    self.event(self.now(budget), EventKind::Pickup, v, Some(request.0), None);
                }
                Task::Dropoff { request, target, mut dwell_left } => {
                    if dwell_left.is_none() {
                        if !self.drive(v, target, &mut budget, 1) {
                            return Ok(());
                        }
                        dwell_left = Some(self.cfg.dropoff_dwell);
                    }
                    let left = dwell_left.unwrap_or(0.0);
                    if left > budget + TIME_EPS {
                        v.task = Some(Task::Dropoff { request, target, dwell_left: Some(left - budget) });
                        return Ok(());
                    }
                    budget = (budget - left).max(0.0);
                    let t = self.now(budget);
                    let r = &mut requests[request.0 as usize];
                    set_request_state(r, RequestState::Served)?;
                    r.dropoff_time = Some(t);
                    self.served += 1;
                    set_vehicle_state(v, VehicleState::Idle)?;
                    v.task = None;
                    v.idle_since = t;
                    self.event(t, EventKind::Dropoff, v, Some(request.0), None);
                    return Ok(());
                }
            }
        }
    }
}

impl SimWorld {
    /// Requests already revealed to the operator.
    pub fn activated_requests(&self) -> &[Request] {
        &self.requests[..self.cursor]
    }

    pub fn unassigned_count(&self) -> usize {
        self.unassigned.len()
    }

    pub fn assigned_count(&self) -> usize {
        self.n_assigned
    }

    /// Vehicles per state: idle, en route to pickup, en route to dropoff, repositioning.
    pub fn fleet_partition(&self) -> [usize; 4] {
        let mut c = [0usize; 4];
        for v in &self.vehicles {
            c[v.state as usize - 1] += 1;
        }
        c
    }

    fn push_event(&mut self, e: SimEvent) {
        if self.record_events {
            self.events.push(e);
        }
    }

    fn activate(&mut self) {
        let now = self.clock.now();
        while self.cursor < self.requests.len() && self.requests[self.cursor].request_time <= now {
            let r = &mut self.requests[self.cursor];
            r.state = RequestState::Unassigned;
            let e = SimEvent {
                time: now,
                kind: EventKind::RequestArrival,
                vehicle: None,
                request: Some(r.id.0),
                zone: None,
                position: r.origin,
            };
            self.unassigned.push(self.cursor);
            self.cursor += 1;
            self.push_event(e);
        }
    }

    fn assign(&mut self) -> Result<usize> {
        let now = self.clock.now();
        let requests: Vec<RequestCandidate> = self
            .unassigned
            .iter()
            .map(|&i| {
                let r = &self.requests[i];
                RequestCandidate { id: r.id.0, origin: r.origin, wait: now - r.request_time }
            })
            .collect();
        let vehicles: Vec<VehicleCandidate> = self
            .vehicles
            .iter()
            .filter(|v| matches!(v.state, VehicleState::Idle | VehicleState::Repositioning))
            .map(|v| VehicleCandidate { id: v.id.0, position: v.position })
            .collect();
        if requests.is_empty() || vehicles.is_empty() {
            return Ok(0);
        }
        let instance = AssignmentInstance { requests, vehicles, alpha: self.config.alpha() };
        let result = self.config.assignment.solve(&instance);
        for m in &result.matches {
            let r = &mut self.requests[m.request as usize];
            set_request_state(r, RequestState::Assigned)?;
            let (rid, origin) = (r.id, r.origin);
            let v = &mut self.vehicles[m.vehicle as usize];
            let mut cancel = None;
            if let Some(Task::Reposition { zone, .. }) = v.task {
                cancel = Some(SimEvent {
                    time: now,
                    kind: EventKind::RepositionCancel,
                    vehicle: Some(v.id.0),
                    request: None,
                    zone: Some(zone),
                    position: v.position,
                });
            }
            set_vehicle_state(v, VehicleState::EnRoutePickup)?;
            v.task = Some(Task::Pickup { request: rid, target: origin, dwell_left: None, reached_at: None });
            let assigned = SimEvent {
                time: now,
                kind: EventKind::Assignment,
                vehicle: Some(v.id.0),
                request: Some(rid.0),
                zone: None,
                position: v.position,
            };
            if let Some(c) = cancel {
                self.push_event(c);
            }
            self.push_event(assigned);
        }
        let taken: Vec<u32> = result.matches.iter().map(|m| m.request).collect();
        self.unassigned.retain(|&i| !taken.contains(&(i as u32)));
        self.n_assigned += taken.len();
        Ok(taken.len())
    }

    /// Send idle vehicles toward other zones' centroids.
    pub fn apply_action(&mut self, action: &RepositionAction) -> Result<usize> {
        let now = self.clock.now();
        let dispatch = action_to_dispatch(action, self)?;
        for &(id, zone) in &dispatch {
            let target = self.region.centroids[zone];
            let v = &mut self.vehicles[id.0 as usize];
            set_vehicle_state(v, VehicleState::Repositioning)?;
            v.task = Some(Task::Reposition { zone, target });
            let e = SimEvent {
                time: now,
                kind: EventKind::RepositionStart,
                vehicle: Some(id.0),
                request: None,
                zone: Some(zone),
                position: v.position,
            };
            self.push_event(e);
        }
        Ok(dispatch.len())
    }

    /// Advance one step of length `config.step`.
    pub fn step(&mut self, policy: &mut dyn RepositioningPolicy) -> Result<StepReport> {
        if self.clock.finished() {
            return Err(Error::Invariant("step called after the horizon".into()));
        }
        let mut report = StepReport::default();
        self.activate();
        if self.clock.on_grid(self.config.assignment_interval) {
            report.assigned = self.assign()?;
        }
        if self.clock.on_grid(self.config.repositioning_interval) {
            let n = self.region.n_zones();
            let decision = policy.decide(self)?.unwrap_or_else(|| Decision::stay(n));
            report.dispatched = self.apply_action(&decision.action)?;
            report.decision = Some(decision);
        }
        let mut mover = Mover {
            cfg: &self.config,
            t0: self.clock.now(),
            dt: self.config.step,
            events: Vec::new(),
            displacement: 0.0,
            served: 0,
            picked_up: 0,
        };
        for v in self.vehicles.iter_mut() {
            mover.advance(v, &mut self.requests)?;
        }
        let Mover { mut events, displacement, served, picked_up, .. } = mover;
        self.displacement += displacement;
        self.n_assigned -= picked_up;
        report.served = served;
        if self.record_events {
            events.sort_by(|a, b| a.time.total_cmp(&b.time));
            self.events.extend(events);
        }
        report.waiting = self.unassigned.len() + if self.config.count_assigned_as_waiting { self.n_assigned } else { 0 };
        self.clock.tick();
        Ok(report)
    }

    /// Check every cross-entity invariant; cost is linear in world size.
    pub fn check_invariants(&self) -> Result<()> {
        let now = self.clock.now();
        let fail = |m: String| Err(Error::Invariant(m));
        if self.vehicles.len() != self.config.fleet_size {
            return fail(format!("fleet has {} vehicles, expected {}", self.vehicles.len(), self.config.fleet_size));
        }
        let mut matched = vec![None::<u32>; self.requests.len()];
        for v in &self.vehicles {
            v.check()?;
            if let Some(rid) = v.task.as_ref().and_then(Task::request) {
                let slot = &mut matched[rid.0 as usize];
                if slot.is_some() {
                    return fail(format!("request {} matched to two vehicles", rid.0));
                }
                *slot = Some(v.id.0);
            }
        }
        let mut unassigned = 0;
        let mut assigned = 0;
        for (i, r) in self.requests.iter().enumerate() {
            if (i < self.cursor) == (r.state == RequestState::Unrequested) {
                return fail(format!("request {i} activation disagrees with cursor"));
            }
            if i < self.cursor {
                r.check(now.max(r.request_time))?;
            }
            let should_match = matches!(r.state, RequestState::Assigned | RequestState::InVehicle);
            if matched[i].is_some() != should_match {
                return fail(format!("request {i} in state {:?} has vehicle {:?}", r.state, matched[i]));
            }
            match r.state {
                RequestState::Unassigned => unassigned += 1,
                RequestState::Assigned => assigned += 1,
                _ => {}
            }
        }
        if unassigned != self.unassigned.len() || assigned != self.n_assigned {
            return fail("waiting-pool bookkeeping out of sync".into());
        }
        let odo: f64 = self.vehicles.iter().map(Vehicle::total_distance).sum();
        if (odo - self.displacement).abs() > 1e-6 * odo.max(1.0) {
            return fail(format!("odometers {odo} vs displacement {}", self.displacement));
        }
        Ok(())
    }
}

/// Whether one step can take a vehicle from `prev` to `next`. Assignment runs
/// first, then dispatch, then movement, which may complete several legs.
fn reachable_in_step(prev: VehicleState, next: VehicleState) -> bool {
    use VehicleState::*;
    match prev {
        Idle | Repositioning => true,
        EnRoutePickup => next != Repositioning,
        EnRouteDropoff => matches!(next, EnRouteDropoff | Idle),
    }
}

/// Snapshot-to-snapshot monotonicity checks across steps.
#[derive(Debug, Clone, Default)]
pub struct Auditor {
    vehicles: Vec<VehicleState>,
    requests: Vec<RequestState>,
    pub checks: u64,
}

impl Auditor {
    pub fn observe(&mut self, world: &SimWorld) -> Result<()> {
        world.check_invariants()?;
        if !self.vehicles.is_empty() {
            for (v, prev) in world.vehicles.iter().zip(&self.vehicles) {
                if !reachable_in_step(*prev, v.state) {
                    return Err(Error::Invariant(format!("vehicle {}: {:?} -> {:?} across a step", v.id.0, prev, v.state)));
                }
            }
            for (r, prev) in world.requests.iter().zip(&self.requests) {
                if r.state < *prev {
                    return Err(Error::Invariant(format!("request {} went back from {:?} to {:?}", r.id.0, prev, r.state)));
                }
            }
        }
        self.vehicles = world.vehicles.iter().map(|v| v.state).collect();
        self.requests = world.requests.iter().map(|r| r.state).collect();
        self.checks += 1;
        Ok(())
    }
}

/// Episode-level tallies of the reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTallies {
    /// `step * sum(waiting + served)` over all steps, in seconds.
    pub total_wait: f64,
    pub served: f64,
    /// Requests activated during the episode.
    pub requests: f64,
}

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub version: u32,
    pub seed: u64,
    pub config: SimConfig,
    pub region: ServiceRegion,
    pub start: f64,
    pub horizon_end: f64,
    pub steps: u64,
    /// Activated requests in their final states.
    pub requests: Vec<Request>,
    pub vehicles: Vec<Vehicle>,
    pub mdp: Vec<MdpStepRecord>,
    pub events: Vec<SimEvent>,
    pub displacement: f64,
    pub tallies: EpisodeTallies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeOptions {
    pub record_events: bool,
    /// Run [`Auditor`] after every step.
    pub audit: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions { record_events: true, audit: false }
    }
}

/// Step to the horizon, collecting one decision record per repositioning instant.
pub fn run_episode(mut world: SimWorld, policy: &mut dyn RepositioningPolicy, seed: u64, opts: EpisodeOptions) -> Result<EpisodeTrace> {
    world.record_events = opts.record_events;
    let mut auditor = Auditor::default();
    if opts.audit {
        auditor.observe(&world)?;
    }
    let mut mdp: Vec<MdpStepRecord> = Vec::new();
    let mut tallies = EpisodeTallies::default();
    let delta = world.config.step;
    while !world.clock.finished() {
        let time = world.clock.now();
        let report = world.step(policy)?;
        if let Some(d) = report.decision {
            mdp.push(MdpStepRecord {
                time,
                state: d.state,
                action: d.action,
                log_prob: d.log_prob,
                counts: RewardCounts::default(),
                dispatched: report.dispatched,
            });
        }
        let counts = RewardCounts { waiting: report.waiting as f64, served: report.served as f64 };
        if let Some(last) = mdp.last_mut() {
            last.counts.waiting += counts.waiting;
            last.counts.served += counts.served;
        }
        tallies.total_wait += delta * (counts.waiting + counts.served);
        tallies.served += counts.served;
        if opts.audit {
            auditor.observe(&world)?;
        }
    }
    tallies.requests = world.cursor as f64;
    let cursor = world.cursor;
    world.requests.truncate(cursor);
    Ok(EpisodeTrace {
        version: TRACE_VERSION,
        seed,
        start: world.clock.start,
        horizon_end: world.clock.horizon_end,
        steps: world.clock.ticks,
        config: world.config,
        region: world.region,
        requests: world.requests,
        vehicles: world.vehicles,
        mdp,
        events: world.events,
        displacement: world.displacement,
        tallies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{StreamRequest, Window};
    use crate::mdp::{calibrate_weights, reward};

    fn small_config(fleet: usize) -> SimConfig {
        SimConfig { fleet_size: fleet, ..SimConfig::default() }
    }

    fn stream(reqs: &[(f64, (f64, f64), (f64, f64))], end: f64) -> DemandStream {
        let mut s = DemandStream::empty(Window::new(0.0, end).unwrap());
        s.requests = reqs
            .iter()
            .map(|&(t, o, d)| StreamRequest { request_time: t, origin: Position::new(o.0, o.1), destination: Position::new(d.0, d.1) })
            .collect();
        s
    }

    fn region() -> ServiceRegion {
        ServiceRegion::grid(4000.0, 4000.0, 2, 2).unwrap()
    }

    fn place(world: &mut SimWorld, id: usize, p: Position) {
        world.vehicles[id].position = p;
    }

    #[test]
    fn step_reachability() {
        use VehicleState::*;
        let all = [Idle, EnRoutePickup, EnRouteDropoff, Repositioning];
        let forbidden = [(EnRoutePickup, Repositioning), (EnRouteDropoff, EnRoutePickup), (EnRouteDropoff, Repositioning)];
        for a in all {
            for b in all {
                assert_eq!(reachable_in_step(a, b), !forbidden.contains(&(a, b)), "{a:?} -> {b:?}");
                if a.can_become(b) {
                    assert!(reachable_in_step(a, b));
                }
            }
        }
    }

    #[test]
    fn table_defaults() {
        let c = SimConfig::default();
        assert_eq!((c.vehicle_speed, c.dropoff_dwell, c.pickup_dwell, c.step), (5.0, 15.0, 45.0, 15.0));
        assert_eq!((c.fleet_size, c.assignment_interval, c.repositioning_interval), (600, 30.0, 300.0));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { fleet_size: 0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { assignment_interval: 20.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { repositioning_interval: 15.0, ..SimConfig::default() }.validate().is_ok());
    }

    #[test]
    fn full_fleet_starts_idle() {
        let w = init_world(&SimConfig::default(), &region(), &stream(&[], 600.0), 3).unwrap();
        assert_eq!(w.vehicles.len(), 600);
        assert!(w.vehicles.iter().all(|v| v.state == VehicleState::Idle));
        assert_eq!(w.clock.now(), 0.0);
    }

    #[test]
    fn demand_proportional_single_zone() {
        let cfg = SimConfig { initial_placement: Placement::DemandProportional, ..small_config(30) };
        let s = stream(&[(10.0, (3500.0, 3500.0), (100.0, 100.0)), (20.0, (3100.0, 2500.0), (100.0, 100.0))], 600.0);
        let r = region();
        let w = init_world(&cfg, &r, &s, 1).unwrap();
        assert!(w.vehicles.iter().all(|v| r.zone_of(&v.position).unwrap() == 3));
    }

    #[test]
    fn placement_is_seeded() {
        let s = stream(&[], 600.0);
        let a = init_world(&small_config(50), &region(), &s, 9).unwrap();
        let b = init_world(&small_config(50), &region(), &s, 9).unwrap();
        let c = init_world(&small_config(50), &region(), &s, 10).unwrap();
        assert_eq!(a.vehicles, b.vehicles);
        assert_ne!(a.vehicles, c.vehicles);
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 2.0, 0.0]), vec![0, 7, 0]);
    }

    #[test]
    fn idle_world_only_ticks() {
        let mut w = init_world(&small_config(5), &region(), &stream(&[], 300.0), 2).unwrap();
        let before = w.vehicles.clone();
        let rep = w.step(&mut NoRepositioning).unwrap();
        assert_eq!(w.vehicles, before);
        assert_eq!(w.clock.now(), 15.0);
        assert_eq!((rep.waiting, rep.served), (0, 0));
    }

    #[test]
    fn pickup_timeline() {
        // Vehicle 700 m from the origin: arrives after 140 s, pickup completes at 185 s.
        let s = stream(&[(0.0, (1000.0, 1000.0), (1000.0, 1500.0))], 1200.0);
        let mut w = init_world(&small_config(1), &region(), &s, 0).unwrap();
        place(&mut w, 0, Position::new(1400.0, 1300.0));
        let trace = run_episode(w, &mut NoRepositioning, 0, EpisodeOptions { record_events: true, audit: true }).unwrap();
        let r = &trace.requests[0];
        assert_eq!(r.pickup_time, Some(140.0));
        let pickup = trace.events.iter().find(|e| e.kind == EventKind::Pickup).unwrap();
        assert_eq!(pickup.time, 185.0);
        // 500 m loaded at 5 m/s plus the 15 s drop-off dwell.
        assert_eq!(r.dropoff_time, Some(185.0 + 100.0 + 15.0));
        assert_eq!(trace.vehicles[0].odometer_pickup, 700.0);
        assert_eq!(trace.vehicles[0].odometer_loaded, 500.0);
    }

    #[test]
    fn co_located_wait_within_alignment() {
        let s = stream(&[(31.0, (1000.0, 1000.0), (1200.0, 1000.0))], 600.0);
        let mut w = init_world(&small_config(1), &region(), &s, 0).unwrap();
        place(&mut w, 0, Position::new(1000.0, 1000.0));
        let trace = run_episode(w, &mut NoRepositioning, 0, EpisodeOptions::default()).unwrap();
        let r = &trace.requests[0];
        let wait = r.pickup_time.unwrap() - r.request_time;
        assert!((0.0..=30.0 + 15.0).contains(&wait), "{wait}");
    }

    #[test]
    fn repositioning_vehicle_reassigned() {
        let s = stream(&[(40.0, (3000.0, 3000.0), (3500.0, 3500.0))], 600.0);
        let cfg = SimConfig { repositioning_interval: 30.0, ..small_config(1) };
        let mut w = init_world(&cfg, &region(), &s, 0).unwrap();
        place(&mut w, 0, Position::new(500.0, 500.0));
        let mut policy = FixedAction(RepositionAction::new(vec![
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap());
        w.step(&mut policy).unwrap();
        assert_eq!(w.vehicles[0].state, VehicleState::Repositioning);
        for _ in 0..4 {
            w.step(&mut policy).unwrap();
        }
        assert_eq!(w.vehicles[0].state, VehicleState::EnRoutePickup);
        let at_60: Vec<EventKind> = w.events.iter().filter(|e| e.time == 60.0).map(|e| e.kind).collect();
        assert_eq!(at_60, vec![EventKind::RepositionCancel, EventKind::Assignment]);
        w.check_invariants().unwrap();
    }

    #[test]
    fn zero_demand_episode() {
        let w = init_world(&small_config(4), &region(), &stream(&[], 900.0), 0).unwrap();
        let t = run_episode(w, &mut NoRepositioning, 0, EpisodeOptions::default()).unwrap();
        assert_eq!(t.steps, 60);
        assert_eq!(t.mdp.len(), 3);
        assert!(t.mdp.iter().all(|m| m.counts == RewardCounts::default()));
        assert_eq!(t.tallies.served, 0.0);
    }

    #[test]
    fn events_are_time_ordered_and_replay_identical() {
        let mut reqs = Vec::new();
        let mut rng = rng_from_seed(4);
        for i in 0..60 {
            let o = (rng.gen::<f64>() * 4000.0, rng.gen::<f64>() * 4000.0);
            let d = (rng.gen::<f64>() * 4000.0, rng.gen::<f64>() * 4000.0);
            reqs.push((i as f64 * 25.0, o, d));
        }
        let s = stream(&reqs, 3600.0);
        let cfg = SimConfig { repositioning_interval: 60.0, ..small_config(6) };
        let run = || {
            let w = init_world(&cfg, &region(), &s, 5).unwrap();
            let mut p = FixedAction(RepositionAction::new(vec![vec![0.25; 4]; 4]).unwrap());
            run_episode(w, &mut p, 5, EpisodeOptions { record_events: true, audit: true }).unwrap()
        };
        let a = run();
        assert!(a.events.windows(2).all(|e| e[0].time <= e[1].time));
        assert!(a.tallies.served > 0.0);
        assert_eq!(a, run());
    }

    #[test]
    fn reward_identity_on_episode() {
        let mut reqs = Vec::new();
        let mut rng = rng_from_seed(8);
        for i in 0..80 {
            reqs.push((i as f64 * 20.0, (rng.gen::<f64>() * 4000.0, 100.0), (rng.gen::<f64>() * 4000.0, 3900.0)));
        }
        let w = init_world(&small_config(4), &region(), &stream(&reqs, 2400.0), 1).unwrap();
        let t = run_episode(w, &mut NoRepositioning, 1, EpisodeOptions::default()).unwrap();
        let tl = t.tallies;
        let weights = calibrate_weights(tl.total_wait, tl.served, tl.requests).unwrap();
        let total: f64 = t.mdp.iter().map(|m| reward(m.counts, weights, 15.0)).sum();
        let target = -tl.total_wait / tl.requests;
        assert!((total - target).abs() <= 1e-9 * target.abs());
    }
}
