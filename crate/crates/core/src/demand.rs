//! Demand streams: sampling recorded trips, synthetic Poisson demand and
//! per-zone origin tallies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Position, Rect, ServiceRegion};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One cleaned historical trip. Times are seconds from the configured horizon origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub pickup_time: f64,
    pub dropoff_time: f64,
    pub pickup: Position,
    pub dropoff: Position,
    pub trip_distance_km: f64,
    pub passenger_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamRequest {
    pub request_time: f64,
    pub origin: Position,
    pub destination: Position,
}

/// Half-open time window `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::Config(format!("empty or invalid window [{start}, {end})")));
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

/// Time-ordered requests for one simulation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandStream {
    pub requests: Vec<StreamRequest>,
    pub window: Window,
    pub seed: u64,
    pub demand_fraction: f64,
}

impl DemandStream {
    pub fn empty(window: Window) -> Self {
        DemandStream { requests: Vec::new(), window, seed: 0, demand_fraction: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

/// Include each in-window record independently with probability `demand_fraction`.
pub fn sample_stream(records: &[TripRecord], demand_fraction: f64, window: Window, seed: u64) -> Result<DemandStream> {
    if !(demand_fraction > 0.0 && demand_fraction <= 1.0) {
        return Err(Error::Config(format!("demand fraction must lie in (0,1], got {demand_fraction}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut requests: Vec<StreamRequest> = records
        .iter()
        .filter(|r| window.contains(r.pickup_time))
        .filter(|_| rng.gen::<f64>() < demand_fraction)
        .map(|r| StreamRequest { request_time: r.pickup_time, origin: r.pickup, destination: r.dropoff })
        .collect();
    requests.sort_by(|a, b| a.request_time.total_cmp(&b.request_time));
    Ok(DemandStream { requests, window, seed, demand_fraction })
}

fn uniform_in(rect: &Rect, rng: &mut impl Rng) -> Position {
    Position::new(
        rect.min_x + rng.gen::<f64>() * rect.width(),
        rect.min_y + rng.gen::<f64>() * rect.height(),
    )
}

/// Homogeneous Poisson arrivals per origin zone (`rates` in requests/hour),
/// destinations drawn from the origin's row of `od`.
pub fn synth_poisson(
    rates: &[f64],
    od: &[Vec<f64>],
    window: Window,
    seed: u64,
    region: &ServiceRegion,
) -> Result<DemandStream> {
    let n = region.n_zones();
    if rates.len() != n || od.len() != n {
        return Err(Error::Config(format!("need {n} rates and {n} od rows")));
    }
    for (i, (&rate, row)) in rates.iter().zip(od).enumerate() {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::Config(format!("rate of zone {i} must be non-negative, got {rate}")));
        }
        if row.len() != n || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config(format!("od row {i} must hold {n} non-negative entries")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("od row {i} sums to {s}, expected 1")));
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut requests = Vec::new();
    for (i, &rate) in rates.iter().enumerate() {
        if rate == 0.0 {
            continue;
        }
        let per_second = rate / 3600.0;
        let mut t = window.start;
        loop {
            let u: f64 = rng.gen();
            t += -libm::log(1.0 - u) / per_second;
            if t >= window.end {
                break;
            }
            let origin = uniform_in(&region.zones[i], &mut rng);
            let pick: f64 = rng.gen();
            let mut acc = 0.0;
            let mut dest_zone = n - 1;
            for (j, &p) in od[i].iter().enumerate() {
                acc += p;
                if pick < acc && p > 0.0 {
                    dest_zone = j;
                    break;
                }
            }
            while od[i][dest_zone] == 0.0 {
                dest_zone -= 1;
            }
            let destination = uniform_in(&region.zones[dest_zone], &mut rng);
            requests.push(StreamRequest { request_time: t, origin, destination });
        }
    }
    requests.sort_by(|a, b| a.request_time.total_cmp(&b.request_time));
    Ok(DemandStream { requests, window, seed, demand_fraction: 1.0 })
}

/// Origin counts per zone (outer index) and per `interval`-long slot from the
/// window start (inner index).
pub fn zone_counts(stream: &DemandStream, region: &ServiceRegion, interval: f64) -> Result<Vec<Vec<u32>>> {
    if !(interval > 0.0) {
        return Err(Error::Config(format!("interval must be positive, got {interval}")));
    }
    let slots = libm::ceil(stream.window.len() / interval).max(1.0) as usize;
    let mut counts = vec![vec![0u32; slots]; region.n_zones()];
    for r in &stream.requests {
        let k = region.zone_of(&r.origin)?;
        let slot = (((r.request_time - stream.window.start) / interval) as usize).min(slots - 1);
        counts[k][slot] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region() -> ServiceRegion {
        ServiceRegion::grid(2000.0, 2000.0, 2, 2).unwrap()
    }

    fn record(t: f64) -> TripRecord {
        TripRecord {
            pickup_time: t,
            dropoff_time: t + 100.0,
            pickup: Position::new(100.0, 100.0),
            dropoff: Position::new(1500.0, 1500.0),
            trip_distance_km: 2.8,
            passenger_count: 1,
        }
    }

    #[test]
    fn full_fraction_keeps_window_in_order() {
        let recs: Vec<_> = [50.0, 10.0, 500.0, 30.0].iter().map(|&t| record(t)).collect();
        let s = sample_stream(&recs, 1.0, Window::new(0.0, 100.0).unwrap(), 9).unwrap();
        let times: Vec<f64> = s.requests.iter().map(|r| r.request_time).collect();
        assert_eq!(times, vec![10.0, 30.0, 50.0]);
    }

    #[test]
    fn fraction_inclusion_is_binomial() {
        let recs: Vec<_> = (0..10_000).map(|i| record(i as f64)).collect();
        let s = sample_stream(&recs, 0.1, Window::new(0.0, 1e6).unwrap(), 42).unwrap();
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((s.len() as f64 - 1000.0).abs() <= 3.0 * sd, "{}", s.len());
    }

    #[test]
    fn sampling_is_deterministic() {
        let recs: Vec<_> = (0..500).map(|i| record(i as f64 * 3.0)).collect();
        let w = Window::new(0.0, 1e4).unwrap();
        assert_eq!(sample_stream(&recs, 0.3, w, 5).unwrap(), sample_stream(&recs, 0.3, w, 5).unwrap());
    }

    #[test]
    fn bad_fraction_rejected() {
        let w = Window::new(0.0, 1.0).unwrap();
        assert!(sample_stream(&[], 0.0, w, 1).is_err());
        assert!(sample_stream(&[], 1.5, w, 1).is_err());
    }

    #[test]
    fn zero_rates_give_empty_stream() {
        let od = vec![vec![0.25; 4]; 4];
        let s = synth_poisson(&[0.0; 4], &od, Window::new(0.0, 3600.0).unwrap(), 1, &region()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn synth_validates_inputs() {
        let w = Window::new(0.0, 3600.0).unwrap();
        let od = vec![vec![0.25; 4]; 4];
        assert!(synth_poisson(&[-1.0, 0.0, 0.0, 0.0], &od, w, 1, &region()).is_err());
        let mut bad = od.clone();
        bad[2] = vec![0.5, 0.5, 0.5, 0.0];
        assert!(synth_poisson(&[1.0; 4], &bad, w, 1, &region()).is_err());
    }

    #[test]
    fn synth_respects_od_support() {
        let mut od = vec![vec![0.0; 4]; 4];
        for row in od.iter_mut() {
            row[3] = 1.0;
        }
        let r = region();
        let s = synth_poisson(&[30.0; 4], &od, Window::new(0.0, 7200.0).unwrap(), 3, &r).unwrap();
        assert!(!s.is_empty());
        for q in &s.requests {
            assert_eq!(r.zone_of(&q.destination).unwrap(), 3);
        }
        assert!(s.requests.windows(2).all(|w| w[0].request_time <= w[1].request_time));
    }

    #[test]
    fn zone_counts_hand_fixture() {
        let r = region();
        let w = Window::new(0.0, 600.0).unwrap();
        let mk = |t: f64, x: f64, y: f64| StreamRequest {
            request_time: t,
            origin: Position::new(x, y),
            destination: Position::new(0.0, 0.0),
        };
        let s = DemandStream {
            requests: vec![mk(10.0, 100.0, 100.0), mk(350.0, 100.0, 100.0), mk(400.0, 1500.0, 1900.0)],
            window: w,
            seed: 0,
            demand_fraction: 1.0,
        };
        let c = zone_counts(&s, &r, 300.0).unwrap();
        assert_eq!(c, vec![vec![1, 1], vec![0, 0], vec![0, 0], vec![0, 1]]);
        let total: u32 = c.iter().flatten().sum();
        assert_eq!(total as usize, s.len());
        let empty = zone_counts(&DemandStream::empty(w), &r, 300.0).unwrap();
        assert!(empty.iter().flatten().all(|&x| x == 0));
    }
}
