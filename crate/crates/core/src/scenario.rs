//! A scenario turns a seed into a ready-to-run world.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_stream, synth_poisson, DemandStream, TripRecord, Window};
use crate::domain::ServiceRegion;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{init_world, SimConfig, SimWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandSource {
    /// Stationary Poisson arrivals; `rates` in requests per hour per origin zone.
    Synthetic { rates: Vec<f64>, od: Vec<Vec<f64>> },
    /// Recorded trips grouped by service day. An episode picks one day from
    /// its seed and keeps each trip with probability `demand_fraction`.
    Records { days: Vec<Vec<TripRecord>>, demand_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub sim: SimConfig,
    pub region: ServiceRegion,
    pub window: Window,
    pub demand: DemandSource,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.region.validate()?;
        Window::new(self.window.start, self.window.end)?;
        self.stream(0).map(|_| ())
    }

    pub fn stream(&self, seed: u64) -> Result<DemandStream> {
        let s = derive_seed(seed, 0);
        match &self.demand {
            DemandSource::Synthetic { rates, od } => synth_poisson(rates, od, self.window, s, &self.region),
            DemandSource::Records { days, demand_fraction } => {
                if days.is_empty() {
                    return Err(Error::Config("record demand needs at least one day".into()));
                }
                let day = (derive_seed(seed, 2) % days.len() as u64) as usize;
                sample_stream(&days[day], *demand_fraction, self.window, s)
            }
        }
    }

    /// Demand and fleet placement both follow from `seed`.
    pub fn world(&self, seed: u64) -> Result<SimWorld> {
        let stream = self.stream(seed)?;
        init_world(&self.sim, &self.region, &stream, derive_seed(seed, 1))
    }
}
