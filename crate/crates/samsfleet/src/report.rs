//! Metric reports, comparison grids and zone heatmaps.
//!
//! Summary CSV columns: scenario, policy, episodes, mean_wait_s, std_wait_s,
//! pct_empty_distance, pct_empty_pickup, pct_empty_reposition, served,
//! unserved. Absent waits are empty cells (`null` in JSON).

use std::fmt::Write as _;
use std::path::Path;

use samsfleet_core::domain::ServiceRegion;
use samsfleet_core::metrics::{mean, quintile_breaks, quintile_class, ServiceMetrics};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::io::write_json;

/// Seed-averaged measures of one policy on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub policy: String,
    pub episodes: usize,
    pub mean_wait_s: Option<f64>,
    pub std_wait_s: Option<f64>,
    pub pct_empty_distance: f64,
    pub pct_empty_pickup: f64,
    pub pct_empty_reposition: f64,
    pub served: usize,
    pub unserved: usize,
}

pub fn summarize(scenario: &str, policy: &str, metrics: &[ServiceMetrics]) -> SummaryRow {
    let avg = |f: fn(&ServiceMetrics) -> f64| mean(&metrics.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
    let waits: Vec<f64> = metrics.iter().filter_map(|m| m.mean_wait).collect();
    let stds: Vec<f64> = metrics.iter().filter_map(|m| m.std_wait).collect();
    SummaryRow {
        scenario: scenario.into(),
        policy: policy.into(),
        episodes: metrics.len(),
        mean_wait_s: mean(&waits),
        std_wait_s: mean(&stds),
        pct_empty_distance: avg(|m| m.pct_empty_distance),
        pct_empty_pickup: avg(|m| m.pct_empty_pickup),
        pct_empty_reposition: avg(|m| m.pct_empty_reposition),
        served: metrics.iter().map(|m| m.served_count).sum(),
        unserved: metrics.iter().map(|m| m.unserved_count).sum(),
    }
}

/// Served waits of all episodes pooled by pickup zone.
pub fn pooled_zone_waits(metrics: &[ServiceMetrics]) -> Vec<Vec<f64>> {
    let n = metrics.first().map_or(0, |m| m.per_zone_wait.len());
    let mut out = vec![Vec::new(); n];
    for m in metrics {
        for (z, w) in m.per_zone_wait.iter().enumerate() {
            out[z].extend_from_slice(w);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: SummaryRow,
    pub seeds: Vec<u64>,
    pub zone_mean_wait_s: Vec<Option<f64>>,
    /// Breakpoints of the zone means at 20/40/60/80 percent.
    pub zone_quintiles: Option<[f64; 4]>,
    pub episodes: Vec<ServiceMetrics>,
}

impl MetricsReport {
    pub fn new(scenario: &str, policy: &str, seeds: Vec<u64>, episodes: Vec<ServiceMetrics>) -> Self {
        let zone_mean_wait_s: Vec<Option<f64>> = pooled_zone_waits(&episodes).iter().map(|w| mean(w)).collect();
        let present: Vec<f64> = zone_mean_wait_s.iter().flatten().copied().collect();
        MetricsReport {
            summary: summarize(scenario, policy, &episodes),
            seeds,
            zone_quintiles: quintile_breaks(&present),
            zone_mean_wait_s,
            episodes,
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err(path))
}

/// Columns: zone, served, mean_wait_s, quintile_class (empty when absent).
pub fn write_zone_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["zone", "served", "mean_wait_s", "quintile_class"]).map_err(csv_err(path))?;
    let pooled = pooled_zone_waits(&report.episodes);
    for (z, m) in report.zone_mean_wait_s.iter().enumerate() {
        let class = match (m, &report.zone_quintiles) {
            (Some(v), Some(b)) => quintile_class(*v, b).to_string(),
            _ => String::new(),
        };
        let served = pooled.get(z).map_or(0, Vec::len).to_string();
        w.write_record([z.to_string(), served, m.map(|v| v.to_string()).unwrap_or_default(), class]).map_err(csv_err(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// `report.json`, `summary.csv`, `zones.csv` and `zones.svg` under `dir`.
pub fn emit_report(dir: &Path, report: &MetricsReport, region: &ServiceRegion) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_json(&dir.join("report.json"), report)?;
    write_summary_csv(&dir.join("summary.csv"), std::slice::from_ref(&report.summary))?;
    write_zone_csv(&dir.join("zones.csv"), report)?;
    let title = format!("{} / {}: mean wait by pickup zone (s)", report.summary.scenario, report.summary.policy);
    std::fs::write(dir.join("zones.svg"), zone_heatmap(&report.zone_mean_wait_s, region, &title)).map_err(Error::io(dir.join("zones.svg")))
}

/// Light to dark by quintile class.
pub const PALETTE: [&str; 5] = ["#ffffb2", "#fecc5c", "#fd8d3c", "#f03b20", "#bd0026"];
pub const ABSENT_FILL: &str = "#d9d9d9";
const MAP_BOX: f64 = 400.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Zones filled by quintile class with a legend of breakpoints. The viewBox
/// is always `0 0 560 440`; the map keeps its aspect ratio inside a 400 px
/// square with north up.
pub fn zone_heatmap(values: &[Option<f64>], region: &ServiceRegion, title: &str) -> String {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let breaks = quintile_breaks(&present);
    let b = &region.bounds;
    let scale = MAP_BOX / b.width().max(b.height());
    let (ox, oy) = (10.0, 30.0);
    let mut s = String::new();
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 560 440\" width=\"560\" height=\"440\" font-family=\"sans-serif\" font-size=\"12\">\n";
    let _ = writeln!(s, "<text x=\"10\" y=\"18\">{}</text>", esc(title));
    for (k, z) in region.zones.iter().enumerate() {
        let fill = match (values.get(k).copied().flatten(), &breaks) {
            (Some(v), Some(br)) => PALETTE[quintile_class(v, br)],
            _ => ABSENT_FILL,
        };
        let x = ox + (z.min_x - b.min_x) * scale;
        let y = oy + (b.max_y - z.max_y) * scale;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\" stroke=\"#444444\" stroke-width=\"1\"><title>zone {k}</title></rect>",
            z.width() * scale,
            z.height() * scale
        );
    }
    let lx = ox + MAP_BOX + 20.0;
    let _ = writeln!(s, "<text x=\"{lx:.0}\" y=\"{:.0}\">quintile</text>", oy + 10.0);
    for (c, color) in PALETTE.iter().enumerate() {
        let y = oy + 20.0 + 24.0 * c as f64;
        let label = match &breaks {
            None => "-".to_string(),
            Some(br) if c == 0 => format!("&lt;= {:.1}", br[0]),
            Some(br) if c == 4 => format!("&gt; {:.1}", br[3]),
            Some(br) => format!("{:.1} - {:.1}", br[c - 1], br[c]),
        };
        let _ = writeln!(s, "<rect x=\"{lx:.0}\" y=\"{y:.0}\" width=\"16\" height=\"16\" fill=\"{color}\" stroke=\"#444444\"/>");
        let _ = writeln!(s, "<text x=\"{:.0}\" y=\"{:.0}\">{label}</text>", lx + 22.0, y + 12.0);
    }
    let y = oy + 20.0 + 24.0 * 5.0;
    let _ = writeln!(s, "<rect x=\"{lx:.0}\" y=\"{y:.0}\" width=\"16\" height=\"16\" fill=\"{ABSENT_FILL}\" stroke=\"#444444\"/>");
    let _ = writeln!(s, "<text x=\"{:.0}\" y=\"{:.0}\">no data</text>", lx + 22.0, y + 12.0);
    s += "</svg>\n";
    s
}

/// Two-sided paired t-test of `b - a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Runtime(format!("paired test needs two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se > 0.0 {
        let t = m / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Runtime(e.to_string()))?;
        (t, 2.0 * dist.cdf(-t.abs()))
    } else if m == 0.0 {
        (0.0, 1.0)
    } else {
        (m.signum() * f64::INFINITY, 0.0)
    };
    Ok(PairedTest { n: d.len(), mean_diff: m, t, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub scenario: String,
    pub reference: String,
    pub policy: String,
    pub metric: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

/// Per-episode values of the compared metrics. Episodes with nothing served
/// carry no wait and make the wait comparison unavailable.
pub fn paired_rows(scenario: &str, reference: (&str, &[ServiceMetrics]), policy: (&str, &[ServiceMetrics])) -> Vec<PairedRow> {
    type Pick = fn(&ServiceMetrics) -> Option<f64>;
    let metrics: [(&str, Pick); 3] = [
        ("mean_wait_s", |m| m.mean_wait),
        ("pct_empty_distance", |m| Some(m.pct_empty_distance)),
        ("pct_empty_reposition", |m| Some(m.pct_empty_reposition)),
    ];
    let mut out = Vec::new();
    for (name, pick) in metrics {
        let a: Option<Vec<f64>> = reference.1.iter().map(pick).collect();
        let b: Option<Vec<f64>> = policy.1.iter().map(pick).collect();
        if let (Some(a), Some(b)) = (a, b) {
            if let Ok(t) = paired_t_test(&a, &b) {
                out.push(PairedRow {
                    scenario: scenario.into(),
                    reference: reference.0.into(),
                    policy: policy.0.into(),
                    metric: name.into(),
                    n: t.n,
                    mean_diff: t.mean_diff,
                    t: t.t,
                    p: t.p,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<SummaryRow>,
    pub paired: Vec<PairedRow>,
}

/// `comparison.json`, `grid.csv` and `paired.csv` under `dir`.
pub fn emit_comparison(dir: &Path, cmp: &Comparison) -> Result<()> {
    write_json(&dir.join("comparison.json"), cmp)?;
    write_summary_csv(&dir.join("grid.csv"), &cmp.rows)?;
    let path = dir.join("paired.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for r in &cmp.paired {
        w.serialize(r).map_err(csv_err(&path))?;
    }
    if cmp.paired.is_empty() {
        w.write_record(["scenario", "reference", "policy", "metric", "n", "mean_diff", "t", "p"]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(Error::io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_json;

    fn metrics(waits: &[f64], zones: usize) -> ServiceMetrics {
        let mut per_zone = vec![Vec::new(); zones];
        for (k, w) in waits.iter().enumerate() {
            per_zone[k % zones].push(*w);
        }
        ServiceMetrics {
            mean_wait: mean(waits),
            std_wait: samsfleet_core::metrics::population_std(waits),
            served_count: waits.len(),
            unserved_count: 1,
            censored_waits: vec![12.5],
            total_distance: 1000.0,
            pct_empty_distance: 0.5,
            pct_empty_pickup: 0.3,
            pct_empty_reposition: 0.2,
            per_zone_wait: per_zone,
        }
    }

    #[test]
    fn json_report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let region = ServiceRegion::grid(2000.0, 2000.0, 2, 2).unwrap();
        let r = MetricsReport::new("s", "p", vec![1, 2], vec![metrics(&[60.0, 120.0, 30.0], 4), metrics(&[10.0], 4)]);
        emit_report(dir.path(), &r, &region).unwrap();
        let back: MetricsReport = read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, r);
        assert_eq!(read_summary_csv(&dir.path().join("summary.csv")).unwrap(), vec![r.summary.clone()]);
        assert_eq!(r.summary.mean_wait_s, Some(0.5 * (70.0 + 10.0)));
        assert_eq!(r.zone_mean_wait_s, vec![Some(35.0), Some(120.0), Some(30.0), None]);
    }

    #[test]
    fn empty_report_has_absent_markers() {
        let dir = tempfile::tempdir().unwrap();
        let region = ServiceRegion::grid(1000.0, 1000.0, 1, 1).unwrap();
        let r = MetricsReport::new("s", "p", vec![], vec![metrics(&[], 1)]);
        emit_report(dir.path(), &r, &region).unwrap();
        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("s,p,1,,,"));
        let back: MetricsReport = read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!((back.summary.mean_wait_s, back.zone_quintiles), (None, None));
        assert_eq!(read_summary_csv(&dir.path().join("summary.csv")).unwrap()[0], r.summary);
    }

    #[test]
    fn heatmap_classes() {
        let region = ServiceRegion::grid(4000.0, 4000.0, 4, 4).unwrap();
        let uniform = zone_heatmap(&vec![Some(50.0); 16], &region, "u");
        assert_eq!(uniform.matches(PALETTE[0]).count(), 17);
        let inc: Vec<Option<f64>> = (0..16).map(|k| Some(k as f64)).collect();
        let svg = zone_heatmap(&inc, &region, "i");
        let counts: Vec<usize> = PALETTE.iter().map(|c| svg.matches(c).count() - 1).collect();
        assert_eq!(counts, vec![4, 3, 3, 3, 3]);
        assert_eq!(svg, zone_heatmap(&inc, &region, "i"));
        assert!(svg.contains("viewBox=\"0 0 560 440\""));
        let mut gaps = inc.clone();
        gaps[3] = None;
        assert_eq!(zone_heatmap(&gaps, &region, "g").matches(ABSENT_FILL).count(), 2);
    }

    #[test]
    fn north_is_up() {
        let region = ServiceRegion::grid(1000.0, 2000.0, 1, 2).unwrap();
        let svg = zone_heatmap(&[Some(1.0), Some(2.0)], &region, "t");
        let south = svg.find("<title>zone 0</title>").unwrap();
        let rect = &svg[svg[..south].rfind("<rect").unwrap()..south];
        assert!(rect.contains("y=\"230.00\""), "{rect}");
    }

    #[test]
    fn paired_test_values() {
        let same = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((same.mean_diff, same.t, same.p), (0.0, 0.0, 1.0));
        // Differences (1, 2, 3): mean 2, sd 1, t = 2 sqrt(3), two-sided p from t(2).
        let t = paired_t_test(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t.t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let exact = 1.0 - t.t / (t.t * t.t + 2.0).sqrt();
        assert!((t.p - exact).abs() < 1e-10, "{} vs {exact}", t.p);
        let shift = paired_t_test(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert_eq!((shift.t, shift.p), (f64::INFINITY, 0.0));
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn identical_policies_pair_to_zero() {
        let eps = vec![metrics(&[60.0, 10.0], 2), metrics(&[30.0], 2), metrics(&[5.0, 7.0], 2)];
        let rows = paired_rows("s", ("a", &eps), ("b", &eps));
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.mean_diff == 0.0 && r.p == 1.0));
    }
}
