//! Trip-record ingest and the normalized trip store.
//!
//! Input CSV needs a header with `pickup_datetime`, `dropoff_datetime`,
//! `pickup_longitude`, `pickup_latitude`, `dropoff_longitude`,
//! `dropoff_latitude`, `trip_distance` and `passenger_count`. Extra columns are
//! ignored. A store directory holds `trips.csv` (one row per kept trip, sorted
//! by service day then pickup time) and `store.json` (frame, origin, report).

use std::fs;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use samsfleet_core::demand::TripRecord;
use samsfleet_core::domain::Position;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REQUIRED_COLUMNS: [&str; 8] = [
    "pickup_datetime",
    "dropoff_datetime",
    "pickup_longitude",
    "pickup_latitude",
    "dropoff_longitude",
    "dropoff_latitude",
    "trip_distance",
    "passenger_count",
];

pub const STORE_VERSION: u32 = 1;
const EARTH_RADIUS_M: f64 = 6_371_008.8;
/// Malformed rows listed individually in the report.
const MALFORMED_SAMPLE: usize = 20;

/// Longitude/latitude rectangle, projected equirectangularly about its centre
/// latitude with the south-west corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoFrame {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl GeoFrame {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.west, self.south, self.east, self.north].iter().all(|v| v.is_finite())
            && self.west < self.east
            && self.south < self.north
            && self.west >= -180.0
            && self.east <= 180.0
            && self.south >= -90.0
            && self.north <= 90.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid geographic frame {self:?}")))
        }
    }

    pub fn project(&self, lon: f64, lat: f64) -> Position {
        let phi = (0.5 * (self.south + self.north)).to_radians();
        Position::new(
            EARTH_RADIUS_M * (lon - self.west).to_radians() * phi.cos(),
            EARTH_RADIUS_M * (lat - self.south).to_radians(),
        )
    }

    /// Width and height in meters.
    pub fn extent(&self) -> (f64, f64) {
        let p = self.project(self.east, self.north);
        (p.x, p.y)
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.west..=self.east).contains(&lon) && (self.south..=self.north).contains(&lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub frame: GeoFrame,
    /// Time of day at which a service day starts.
    pub origin: NaiveTime,
    /// Abort on the first malformed row instead of skipping it.
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: u64,
    pub kept: u64,
    pub dropped_malformed: u64,
    pub dropped_time_order: u64,
    pub dropped_zero_distance: u64,
    pub dropped_out_of_region: u64,
    /// First few malformed rows as `(line, reason)`.
    pub malformed: Vec<(u64, String)>,
}

/// A kept trip with its service day. Times count seconds from `origin` on that day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTrip {
    pub date: NaiveDate,
    pub pickup_time: f64,
    pub dropoff_time: f64,
    pub pickup_x: f64,
    pub pickup_y: f64,
    pub dropoff_x: f64,
    pub dropoff_y: f64,
    pub trip_distance_km: f64,
    pub passenger_count: u32,
}

impl StoredTrip {
    pub fn record(&self) -> TripRecord {
        TripRecord {
            pickup_time: self.pickup_time,
            dropoff_time: self.dropoff_time,
            pickup: Position::new(self.pickup_x, self.pickup_y),
            dropoff: Position::new(self.dropoff_x, self.dropoff_y),
            trip_distance_km: self.trip_distance_km,
            passenger_count: self.passenger_count,
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn seconds_between(a: NaiveDateTime, b: NaiveDateTime) -> f64 {
    let d = b - a;
    d.num_milliseconds() as f64 / 1000.0
}

enum RowOutcome {
    Kept(StoredTrip),
    TimeOrder,
    ZeroDistance,
    OutOfRegion,
}

fn parse_row(row: &csv::StringRecord, cols: &[usize; 8], opts: &IngestOptions) -> std::result::Result<RowOutcome, String> {
    let field = |k: usize| row.get(cols[k]).map(str::trim).ok_or_else(|| format!("missing field {}", REQUIRED_COLUMNS[k]));
    let ts = |k: usize| {
        let s = field(k)?;
        parse_timestamp(s).ok_or_else(|| format!("bad timestamp {s:?} in {}", REQUIRED_COLUMNS[k]))
    };
    let num = |k: usize| {
        let s = field(k)?;
        s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("bad number {s:?} in {}", REQUIRED_COLUMNS[k]))
    };
    let pickup = ts(0)?;
    let dropoff = ts(1)?;
    let (plon, plat, dlon, dlat, dist) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
    let pax = {
        let s = field(7)?;
        s.parse::<u32>().map_err(|_| format!("bad passenger_count {s:?}"))?
    };
    if dropoff < pickup {
        return Ok(RowOutcome::TimeOrder);
    }
    if dist <= 0.0 {
        return Ok(RowOutcome::ZeroDistance);
    }
    let f = &opts.frame;
    if !f.contains(plon, plat) || !f.contains(dlon, dlat) {
        return Ok(RowOutcome::OutOfRegion);
    }
    let date = (pickup - opts.origin.signed_duration_since(NaiveTime::MIN)).date();
    let day_start = date.and_time(opts.origin);
    let p = f.project(plon, plat);
    let d = f.project(dlon, dlat);
    Ok(RowOutcome::Kept(StoredTrip {
        date,
        pickup_time: seconds_between(day_start, pickup),
        dropoff_time: seconds_between(day_start, dropoff),
        pickup_x: p.x,
        pickup_y: p.y,
        dropoff_x: d.x,
        dropoff_y: d.y,
        trip_distance_km: dist,
        passenger_count: pax,
    }))
}

/// Parse, clean and project trip rows.
pub fn ingest<R: Read>(source: R, opts: &IngestOptions) -> Result<(Vec<StoredTrip>, IngestReport)> {
    opts.frame.validate()?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = rdr.headers().map_err(|e| Error::Data(format!("unreadable header: {e}")))?.clone();
    let mut cols = [0usize; 8];
    for (k, name) in REQUIRED_COLUMNS.iter().enumerate() {
        cols[k] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::Data(format!("missing required column {name}")))?;
    }
    let mut report = IngestReport::default();
    let mut trips = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        report.rows += 1;
        let outcome = row.map_err(|e| e.to_string()).and_then(|r| parse_row(&r, &cols, opts));
        match outcome {
            Ok(RowOutcome::Kept(t)) => {
                report.kept += 1;
                trips.push(t);
            }
            Ok(RowOutcome::TimeOrder) => report.dropped_time_order += 1,
            Ok(RowOutcome::ZeroDistance) => report.dropped_zero_distance += 1,
            Ok(RowOutcome::OutOfRegion) => report.dropped_out_of_region += 1,
            Err(reason) => {
                if opts.strict {
                    return Err(Error::Data(format!("line {line}: {reason}")));
                }
                report.dropped_malformed += 1;
                if report.malformed.len() < MALFORMED_SAMPLE {
                    report.malformed.push((line, reason));
                }
            }
        }
    }
    trips.sort_by(|a, b| a.date.cmp(&b.date).then(a.pickup_time.total_cmp(&b.pickup_time)));
    Ok((trips, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreMeta {
    pub version: u32,
    pub frame: GeoFrame,
    pub origin: NaiveTime,
    pub report: IngestReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripStore {
    pub meta: StoreMeta,
    pub trips: Vec<StoredTrip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayFilter {
    #[default]
    Any,
    Weekday,
    Weekend,
}

impl DayFilter {
    pub fn accepts(self, date: NaiveDate) -> bool {
        let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
        match self {
            DayFilter::Any => true,
            DayFilter::Weekday => !weekend,
            DayFilter::Weekend => weekend,
        }
    }
}

impl TripStore {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join("trips.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for t in &self.trips {
            w.serialize(t).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(Error::io(&path))?;
        crate::io::write_json(&dir.join("store.json"), &self.meta)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: StoreMeta = crate::io::read_json(&dir.join("store.json"))?;
        if meta.version != STORE_VERSION {
            return Err(Error::Data(format!("trip store version {} is not {STORE_VERSION}", meta.version)));
        }
        let path = dir.join("trips.csv");
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let trips = r
            .deserialize()
            .collect::<std::result::Result<Vec<StoredTrip>, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(TripStore { meta, trips })
    }

    /// Records grouped by accepted service day, in date order.
    pub fn days(&self, filter: DayFilter) -> Vec<(NaiveDate, Vec<TripRecord>)> {
        let mut out: Vec<(NaiveDate, Vec<TripRecord>)> = Vec::new();
        for t in self.trips.iter().filter(|t| filter.accepts(t.date)) {
            match out.last_mut() {
                Some((d, v)) if *d == t.date => v.push(t.record()),
                _ => out.push((t.date, vec![t.record()])),
            }
        }
        out
    }
}
