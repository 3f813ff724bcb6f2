//! Service measures computed from a finished episode.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::domain::RequestState;
use crate::error::Result;
use crate::sim::EpisodeTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    /// Over served requests; absent when nothing was served.
    pub mean_wait: Option<f64>,
    /// Population standard deviation of served waits.
    pub std_wait: Option<f64>,
    pub served_count: usize,
    pub unserved_count: usize,
    /// Waits of picked-up-but-undelivered requests plus elapsed waits of never-picked-up ones at the horizon.
    pub censored_waits: Vec<f64>,
    pub total_distance: f64,
    pub pct_empty_distance: f64,
    pub pct_empty_pickup: f64,
    pub pct_empty_reposition: f64,
    /// Served waits grouped by pickup zone.
    pub per_zone_wait: Vec<Vec<f64>>,
}

impl ServiceMetrics {
    pub fn zone_mean_wait(&self) -> Vec<Option<f64>> {
        self.per_zone_wait.iter().map(|w| mean(w)).collect()
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub fn population_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some(libm::sqrt(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64))
}

/// Linear interpolation between order statistics at rank `(n - 1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Breakpoints at 20/40/60/80 percent.
pub fn quintile_breaks(values: &[f64]) -> Option<[f64; 4]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    Some([quantile(&v, 0.2)?, quantile(&v, 0.4)?, quantile(&v, 0.6)?, quantile(&v, 0.8)?])
}

/// Class 0..=4: how many breakpoints lie strictly below `value`.
pub fn quintile_class(value: f64, breaks: &[f64; 4]) -> usize {
    breaks.iter().filter(|&&b| b < value).count()
}

pub fn compute_metrics(trace: &EpisodeTrace) -> Result<ServiceMetrics> {
    let region = &trace.region;
    let mut waits = Vec::new();
    let mut per_zone = vec![Vec::new(); region.n_zones()];
    let mut censored = Vec::new();
    for r in &trace.requests {
        match (r.state, r.pickup_time) {
            (RequestState::Served, Some(p)) => {
                let w = p - r.request_time;
                waits.push(w);
                per_zone[region.zone_of(&r.origin)?].push(w);
            }
            (RequestState::Unrequested, _) => {}
            _ => censored.push(r.wait_at(trace.horizon_end)),
        }
    }
    let loaded: f64 = trace.vehicles.iter().map(|v| v.odometer_loaded).sum();
    let pickup: f64 = trace.vehicles.iter().map(|v| v.odometer_pickup).sum();
    let reposition: f64 = trace.vehicles.iter().map(|v| v.odometer_reposition).sum();
    let total = loaded + pickup + reposition;
    let (pct_pickup, pct_reposition) = if total > 0.0 { (pickup / total, reposition / total) } else { (0.0, 0.0) };
    Ok(ServiceMetrics {
        mean_wait: mean(&waits),
        std_wait: population_std(&waits),
        served_count: waits.len(),
        unserved_count: censored.len(),
        censored_waits: censored,
        total_distance: total,
        pct_empty_distance: pct_pickup + pct_reposition,
        pct_empty_pickup: pct_pickup,
        pct_empty_reposition: pct_reposition,
        per_zone_wait: per_zone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{DemandStream, StreamRequest, Window};
    use crate::domain::{Position, ServiceRegion};
    use crate::sim::{init_world, run_episode, EpisodeOptions, NoRepositioning, SimConfig};

    #[test]
    fn mean_and_population_std() {
        assert_eq!(mean(&[60.0, 120.0]), Some(90.0));
        assert_eq!(population_std(&[60.0, 120.0]), Some(30.0));
        assert_eq!(mean(&[]), None);
        assert_eq!(population_std(&[]), None);
    }

    #[test]
    fn quintiles_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = quintile_breaks(&v).unwrap();
        for (got, want) in b.iter().zip([20.8, 40.6, 60.4, 80.2]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(quintile_breaks(&[]).is_none());
    }

    #[test]
    fn uniform_values_share_a_class() {
        let b = quintile_breaks(&[7.0; 16]).unwrap();
        assert!([7.0; 16].iter().all(|&v| quintile_class(v, &b) == 0));
    }

    #[test]
    fn increasing_values_fill_all_classes() {
        let v: Vec<f64> = (0..16).map(f64::from).collect();
        let b = quintile_breaks(&v).unwrap();
        let mut counts = [0; 5];
        for &x in &v {
            counts[quintile_class(x, &b)] += 1;
        }
        assert_eq!(counts, [4, 3, 3, 3, 3]);
    }

    fn trace_with(reqs: Vec<StreamRequest>, fleet: usize, end: f64) -> EpisodeTrace {
        let region = ServiceRegion::grid(2000.0, 2000.0, 2, 2).unwrap();
        let mut s = DemandStream::empty(Window::new(0.0, end).unwrap());
        s.requests = reqs;
        let w = init_world(&SimConfig { fleet_size: fleet, ..SimConfig::default() }, &region, &s, 2).unwrap();
        run_episode(w, &mut NoRepositioning, 2, EpisodeOptions::default()).unwrap()
    }

    #[test]
    fn odometer_fixture_ratios() {
        let mut t = trace_with(vec![], 1, 60.0);
        t.vehicles[0].odometer_loaded = 500.0;
        t.vehicles[0].odometer_pickup = 300.0;
        t.vehicles[0].odometer_reposition = 200.0;
        let m = compute_metrics(&t).unwrap();
        assert_eq!(m.pct_empty_distance, 0.5);
        assert_eq!((m.pct_empty_pickup, m.pct_empty_reposition), (0.3, 0.2));
    }

    #[test]
    fn nothing_served_reports_absent() {
        let m = compute_metrics(&trace_with(vec![], 3, 300.0)).unwrap();
        assert_eq!((m.mean_wait, m.std_wait, m.served_count), (None, None, 0));
        assert_eq!(m.pct_empty_distance, 0.0);
    }

    #[test]
    fn served_and_censored_split() {
        let reqs = vec![
            StreamRequest { request_time: 0.0, origin: Position::new(100.0, 100.0), destination: Position::new(200.0, 100.0) },
            StreamRequest { request_time: 1400.0, origin: Position::new(1900.0, 1900.0), destination: Position::new(100.0, 100.0) },
        ];
        let t = trace_with(reqs, 1, 1500.0);
        let m = compute_metrics(&t).unwrap();
        assert_eq!(m.served_count + m.unserved_count, 2);
        assert!(m.served_count >= 1);
        let w = m.mean_wait.unwrap();
        assert!((0.0..=1500.0).contains(&w));
        assert_eq!(m.per_zone_wait.iter().map(Vec::len).sum::<usize>(), m.served_count);
        assert_eq!(m.pct_empty_distance, m.pct_empty_pickup + m.pct_empty_reposition);
    }
}
