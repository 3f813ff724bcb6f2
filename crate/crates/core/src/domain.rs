//! Entities, state machines and geometry shared by the whole simulator.
//!
//! Positions are continuous planar coordinates in meters. Only repositioning
//! targets snap to zone centroids; requests and vehicles live anywhere inside
//! the service rectangle.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar position in meters east/north of the region origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Manhattan (L1) distance in meters.
    pub fn l1(&self, other: &Position) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub const fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Rect { min_x, min_y, max_x, max_y }
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Position {
        Position::new(0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))
    }

    fn overlap_area(&self, other: &Rect) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// Request lifecycle; the ordinal never decreases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RequestState {
    Unrequested = 0,
    Unassigned = 1,
    Assigned = 2,
    InVehicle = 3,
    Served = 4,
}

impl RequestState {
    pub const ALL: [RequestState; 5] = [
        RequestState::Unrequested,
        RequestState::Unassigned,
        RequestState::Assigned,
        RequestState::InVehicle,
        RequestState::Served,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub request_time: f64,
    pub origin: Position,
    pub destination: Position,
    pub state: RequestState,
    /// Instant the vehicle reached the origin; wait stops here.
    pub pickup_time: Option<f64>,
    pub dropoff_time: Option<f64>,
}

impl Request {
    pub fn new(id: RequestId, request_time: f64, origin: Position, destination: Position) -> Self {
        Request {
            id,
            request_time,
            origin,
            destination,
            state: RequestState::Unrequested,
            pickup_time: None,
            dropoff_time: None,
        }
    }

    /// Elapsed wait at `now`: running while not yet picked up, frozen afterwards.
    pub fn wait_at(&self, now: f64) -> f64 {
        match self.pickup_time {
            Some(t) if self.state >= RequestState::InVehicle => t - self.request_time,
            _ => (now - self.request_time).max(0.0),
        }
    }

    pub fn check(&self, now: f64) -> Result<()> {
        let fail = |what: &str| Err(Error::Invariant(format!("request {}: {what}", self.id.0)));
        if (self.state == RequestState::Unrequested) != (now < self.request_time) {
            return fail("unrequested iff clock before request time");
        }
        if self.pickup_time.is_some() != (self.state >= RequestState::InVehicle) {
            return fail("pickup time set iff in-vehicle or served");
        }
        if self.dropoff_time.is_some() != (self.state == RequestState::Served) {
            return fail("dropoff time set iff served");
        }
        if let Some(p) = self.pickup_time {
            if p < self.request_time {
                return fail("pickup before request");
            }
            if let Some(d) = self.dropoff_time {
                if d < p {
                    return fail("dropoff before pickup");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum VehicleState {
    Idle = 1,
    EnRoutePickup = 2,
    EnRouteDropoff = 3,
    Repositioning = 4,
}

impl VehicleState {
    pub const ALL: [VehicleState; 4] = [
        VehicleState::Idle,
        VehicleState::EnRoutePickup,
        VehicleState::EnRouteDropoff,
        VehicleState::Repositioning,
    ];

    /// Legal transitions between consecutive observations (self-loops included).
    pub fn can_become(self, next: VehicleState) -> bool {
        use VehicleState::*;
        match self {
            Idle | Repositioning => matches!(next, Idle | EnRoutePickup | Repositioning),
            EnRoutePickup => matches!(next, EnRoutePickup | EnRouteDropoff),
            EnRouteDropoff => matches!(next, EnRouteDropoff | Idle),
        }
    }
}

/// What a non-idle vehicle is currently doing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Pickup {
        request: RequestId,
        target: Position,
        /// Dwell seconds still owed once at the target; `None` while driving.
        dwell_left: Option<f64>,
        /// Instant the origin was reached.
        reached_at: Option<f64>,
    },
    Dropoff {
        request: RequestId,
        target: Position,
        dwell_left: Option<f64>,
    },
    Reposition { zone: usize, target: Position },
}

impl Task {
    pub fn request(&self) -> Option<RequestId> {
        match self {
            Task::Pickup { request, .. } | Task::Dropoff { request, .. } => Some(*request),
            Task::Reposition { .. } => None,
        }
    }

    pub fn target(&self) -> Position {
        match self {
            Task::Pickup { target, .. } | Task::Dropoff { target, .. } | Task::Reposition { target, .. } => *target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: VehicleId,
    pub position: Position,
    pub state: VehicleState,
    pub task: Option<Task>,
    pub odometer_loaded: f64,
    pub odometer_pickup: f64,
    pub odometer_reposition: f64,
    /// Time the vehicle last became idle (meaningful only while idle).
    pub idle_since: f64,
}

impl Vehicle {
    pub fn new(id: VehicleId, position: Position, now: f64) -> Self {
        Vehicle {
            id,
            position,
            state: VehicleState::Idle,
            task: None,
            odometer_loaded: 0.0,
            odometer_pickup: 0.0,
            odometer_reposition: 0.0,
            idle_since: now,
        }
    }

    pub fn total_distance(&self) -> f64 {
        self.odometer_loaded + self.odometer_pickup + self.odometer_reposition
    }

    pub fn check(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::Invariant(format!("vehicle {}: {what}", self.id.0)));
        if self.task.is_some() != (self.state != VehicleState::Idle) {
            return fail("task present iff not idle");
        }
        let matched = self.task.as_ref().and_then(Task::request).is_some();
        let should_match = matches!(self.state, VehicleState::EnRoutePickup | VehicleState::EnRouteDropoff);
        if matched != should_match {
            return fail("request match iff en route");
        }
        let task_agrees = matches!(
            (&self.task, self.state),
            (None, VehicleState::Idle)
                | (Some(Task::Pickup { .. }), VehicleState::EnRoutePickup)
                | (Some(Task::Dropoff { .. }), VehicleState::EnRouteDropoff)
                | (Some(Task::Reposition { .. }), VehicleState::Repositioning)
        );
        if !task_agrees {
            return fail("task kind disagrees with state");
        }
        if self.odometer_loaded < 0.0 || self.odometer_pickup < 0.0 || self.odometer_reposition < 0.0 {
            return fail("negative odometer");
        }
        Ok(())
    }
}

/// How zone centroids are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidRule {
    #[default]
    Geometric,
    /// Mean of observed trip origins per zone, falling back to geometric for empty zones.
    Demand,
}

/// Service rectangle partitioned into rectangular zones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRegion {
    pub bounds: Rect,
    pub zones: Vec<Rect>,
    pub centroids: Vec<Position>,
}

impl ServiceRegion {
    /// `cols × rows` uniform grid over `[0,width] × [0,height]`, zones numbered row-major from the south-west corner.
    pub fn grid(width: f64, height: f64, cols: usize, rows: usize) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || cols == 0 || rows == 0 {
            return Err(Error::Config(format!("invalid grid {width}x{height} m with {cols}x{rows} zones")));
        }
        let cw = width / cols as f64;
        let rh = height / rows as f64;
        let mut zones = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                let max_x = if c + 1 == cols { width } else { (c + 1) as f64 * cw };
                let max_y = if r + 1 == rows { height } else { (r + 1) as f64 * rh };
                zones.push(Rect::new(c as f64 * cw, r as f64 * rh, max_x, max_y));
            }
        }
        let centroids = zones.iter().map(Rect::center).collect();
        Self::new(Rect::new(0.0, 0.0, width, height), zones, centroids)
    }

    pub fn new(bounds: Rect, zones: Vec<Rect>, centroids: Vec<Position>) -> Result<Self> {
        let region = ServiceRegion { bounds, zones, centroids };
        region.validate()?;
        Ok(region)
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.zones.is_empty() {
            return Err(Error::Config("region has no zones".into()));
        }
        if self.centroids.len() != self.zones.len() {
            return Err(Error::Config("one centroid per zone required".into()));
        }
        let b = &self.bounds;
        let mut covered = 0.0;
        for (i, z) in self.zones.iter().enumerate() {
            if !(z.width() > 0.0 && z.height() > 0.0) {
                return Err(Error::Config(format!("zone {i} is degenerate")));
            }
            if z.min_x < b.min_x || z.min_y < b.min_y || z.max_x > b.max_x || z.max_y > b.max_y {
                return Err(Error::Config(format!("zone {i} leaves the bounding rectangle")));
            }
            for (j, other) in self.zones.iter().enumerate().skip(i + 1) {
                if z.overlap_area(other) > 0.0 {
                    return Err(Error::Config(format!("zones {i} and {j} overlap")));
                }
            }
            if !z.contains(&self.centroids[i]) {
                return Err(Error::Config(format!("centroid of zone {i} lies outside it")));
            }
            covered += z.area();
        }
        if (covered - b.area()).abs() > 1e-9 * b.area() {
            return Err(Error::Config("zones do not cover the bounding rectangle".into()));
        }
        Ok(())
    }

    /// Zone containing `p`; boundary points go to the lowest index.
    pub fn zone_of(&self, p: &Position) -> Result<usize> {
        if !self.bounds.contains(p) {
            return Err(Error::OutOfRegion { x: p.x, y: p.y });
        }
        self.zones
            .iter()
            .position(|z| z.contains(p))
            .ok_or(Error::OutOfRegion { x: p.x, y: p.y })
    }

    /// Replace centroids by the mean of `points` falling in each zone.
    pub fn with_demand_centroids<'a, I>(mut self, points: I) -> Self
    where
        I: IntoIterator<Item = &'a Position>,
    {
        let n = self.n_zones();
        let mut sums = alloc::vec![(0.0f64, 0.0f64, 0usize); n];
        for p in points {
            if let Ok(k) = self.zone_of(p) {
                sums[k].0 += p.x;
                sums[k].1 += p.y;
                sums[k].2 += 1;
            }
        }
        for (k, (sx, sy, c)) in sums.into_iter().enumerate() {
            self.centroids[k] = if c == 0 {
                self.zones[k].center()
            } else {
                let z = &self.zones[k];
                let m = Position::new(sx / c as f64, sy / c as f64);
                Position::new(m.x.clamp(z.min_x, z.max_x), m.y.clamp(z.min_y, z.max_y))
            };
        }
        self
    }

    /// Centroid-to-centroid travel-time matrix in seconds.
    pub fn travel_time_matrix(&self, speed: f64) -> Result<Vec<Vec<f64>>> {
        let mut m = Vec::with_capacity(self.n_zones());
        for a in &self.centroids {
            let row = self.centroids.iter().map(|b| travel_time(a, b, speed)).collect::<Result<Vec<_>>>()?;
            m.push(row);
        }
        Ok(m)
    }
}

/// Discrete simulation clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    pub start: f64,
    pub step: f64,
    pub horizon_end: f64,
    pub ticks: u64,
}

impl Clock {
    pub fn new(start: f64, step: f64, horizon_end: f64) -> Result<Self> {
        if !(step > 0.0) || !(horizon_end >= start) || !start.is_finite() || !horizon_end.is_finite() {
            return Err(Error::Config(format!("invalid clock start={start} step={step} end={horizon_end}")));
        }
        Ok(Clock { start, step, horizon_end, ticks: 0 })
    }

    pub fn now(&self) -> f64 {
        self.start + self.ticks as f64 * self.step
    }

    pub fn finished(&self) -> bool {
        self.now() >= self.horizon_end
    }

    pub fn tick(&mut self) {
        self.ticks += 1;
    }

    /// True when `now` lies on the grid of `interval` measured from the clock start.
    pub fn on_grid(&self, interval: f64) -> bool {
        let per = libm::round(interval / self.step) as u64;
        per == 0 || self.ticks.is_multiple_of(per)
    }
}

/// Manhattan travel time in seconds.
pub fn travel_time(a: &Position, b: &Position, speed: f64) -> Result<f64> {
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::Config(format!("speed must be positive, got {speed}")));
    }
    Ok(a.l1(b) / speed)
}

/// Move from `from` toward `to` by at most `meters`, x-leg first then y-leg.
/// Returns the new position and the meters actually traveled.
pub fn move_along_l1(from: Position, to: Position, meters: f64) -> (Position, f64) {
    let total = from.l1(&to);
    if meters >= total {
        return (to, total);
    }
    if meters <= 0.0 {
        return (from, 0.0);
    }
    let dx = to.x - from.x;
    let x_leg = dx.abs();
    if meters <= x_leg {
        let x = from.x + meters * dx.signum();
        return (Position::new(x, from.y), meters);
    }
    let dy = to.y - from.y;
    let y = from.y + (meters - x_leg) * dy.signum();
    (Position::new(to.x, y), meters)
}

/// Position after driving `dt` seconds at `speed` along the L1 path.
pub fn advance_along_l1(from: Position, to: Position, speed: f64, dt: f64) -> Position {
    move_along_l1(from, to, speed * dt.max(0.0)).0
}
