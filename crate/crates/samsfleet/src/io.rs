//! JSON helpers, episode traces, event logs and learning curves.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use samsfleet_core::a2c::CurvePoint;
use samsfleet_core::sim::{EpisodeTrace, SimEvent, TRACE_VERSION};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(Error::io(path))?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Compact JSON, one document per file.
pub fn write_trace(path: &Path, trace: &EpisodeTrace) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, trace).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn read_trace(path: &Path) -> Result<EpisodeTrace> {
    let trace: EpisodeTrace = read_json(path)?;
    if trace.version != TRACE_VERSION {
        return Err(Error::Data(format!("trace version {} is not {TRACE_VERSION}", trace.version)));
    }
    Ok(trace)
}

pub fn write_events(path: &Path, events: &[SimEvent]) -> Result<()> {
    let mut w = create(path)?;
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_events(path: &Path) -> Result<Vec<SimEvent>> {
    let f = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), k + 1)))?);
    }
    Ok(out)
}

/// Columns: episode, mean_reward, eval_mean_wait, actor_grad_norm, critic_grad_norm.
pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for p in curve {
        w.serialize(p).map_err(|e| Error::Runtime(e.to_string()))?;
    }
    if curve.is_empty() {
        w.write_record(["episode", "mean_reward", "eval_mean_wait", "actor_grad_norm", "critic_grad_norm"])
            .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use samsfleet_core::demand::Window;
    use samsfleet_core::domain::ServiceRegion;
    use samsfleet_core::scenario::{DemandSource, Scenario};
    use samsfleet_core::sim::{run_episode, EpisodeOptions, NoRepositioning, SimConfig};

    fn trace() -> EpisodeTrace {
        let s = Scenario {
            sim: SimConfig { fleet_size: 3, ..SimConfig::default() },
            region: ServiceRegion::grid(2000.0, 2000.0, 2, 2).unwrap(),
            window: Window::new(0.0, 1800.0).unwrap(),
            demand: DemandSource::Synthetic { rates: vec![20.0; 4], od: vec![vec![0.25; 4]; 4] },
        };
        run_episode(s.world(3).unwrap(), &mut NoRepositioning, 3, EpisodeOptions::default()).unwrap()
    }

    #[test]
    fn trace_and_events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace();
        assert!(!t.events.is_empty());
        write_trace(&dir.path().join("trace.json"), &t).unwrap();
        assert_eq!(read_trace(&dir.path().join("trace.json")).unwrap(), t);
        write_events(&dir.path().join("events.jsonl"), &t.events).unwrap();
        assert_eq!(read_events(&dir.path().join("events.jsonl")).unwrap(), t.events);
    }

    #[test]
    fn curve_round_trip_keeps_absent_evals() {
        let dir = tempfile::tempdir().unwrap();
        let curve = vec![
            CurvePoint { episode: 4, mean_reward: -1.25, eval_mean_wait: None, actor_grad_norm: 0.5, critic_grad_norm: 2.0 },
            CurvePoint { episode: 8, mean_reward: -0.75, eval_mean_wait: Some(88.5), actor_grad_norm: 0.1, critic_grad_norm: 1.0 },
        ];
        let p = dir.path().join("curve.csv");
        write_curve(&p, &curve).unwrap();
        assert_eq!(read_curve(&p).unwrap(), curve);
        write_curve(&p, &[]).unwrap();
        assert!(read_curve(&p).unwrap().is_empty());
    }

    #[test]
    fn wrong_trace_version_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trace();
        t.version = 99;
        write_trace(&dir.path().join("t.json"), &t).unwrap();
        assert!(matches!(read_trace(&dir.path().join("t.json")), Err(Error::Data(_))));
    }
}
