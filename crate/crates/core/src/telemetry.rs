//! Run metrics: running averages, collapse detection, CSV export and an SVG
//! summary plot of several configurations.
//!
//! Aggregation interpolates each run's running-average curve linearly onto
//! a common grid of [`GRID_STEP`] environment steps. Before a run's first
//! completed episode and after its last one the curve is held flat.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::is_collapsed;

pub const CSV_HEADER: &str = "step,return,running_avg,mean_var,l_jepa,l_actor,l_critic,l_reg";
pub const GRID_STEP: u64 = 500;
pub const DEFAULT_WINDOW: usize = 20;

/// One CSV row. Episode columns are filled when an episode finished at this
/// step; loss columns when an update phase ended here. Empty cells are
/// `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    #[serde(rename = "return")]
    pub episodic_return: Option<f64>,
    pub running_avg: Option<f64>,
    pub mean_var: Option<f64>,
    pub l_jepa: Option<f64>,
    pub l_actor: Option<f64>,
    pub l_critic: Option<f64>,
    pub l_reg: Option<f64>,
}

impl TelemetryRecord {
    pub fn collapsed(&self) -> Option<bool> {
        self.mean_var.map(is_collapsed)
    }

    /// Fills the empty cells of `self` from `other` (same step).
    pub fn merge(&mut self, other: &TelemetryRecord) {
        let fill = |a: &mut Option<f64>, b: Option<f64>| {
            if a.is_none() {
                *a = b;
            }
        };
        fill(&mut self.episodic_return, other.episodic_return);
        fill(&mut self.running_avg, other.running_avg);
        fill(&mut self.mean_var, other.mean_var);
        fill(&mut self.l_jepa, other.l_jepa);
        fill(&mut self.l_actor, other.l_actor);
        fill(&mut self.l_critic, other.l_critic);
        fill(&mut self.l_reg, other.l_reg);
    }
}

/// Mean of the last `window` values (fewer if not available), clamped to
/// their range so rounding never leaves it. `NaN` for an empty slice.
pub fn trailing_mean(values: &[f64], window: usize) -> f64 {
    let w = &values[values.len().saturating_sub(window.max(1))..];
    if w.is_empty() {
        return f64::NAN;
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mean.clamp(lo, hi)
}

/// Trailing mean over up to `window` most recent completed episodes, at
/// every episode.
pub fn running_average(returns: &[f64], window: usize) -> Vec<f64> {
    (1..=returns.len())
        .map(|k| trailing_mean(&returns[..k], window))
        .collect()
}

/// First step whose mean embedding variance is strictly below the collapse
/// threshold.
pub fn detect_collapse(records: &[TelemetryRecord]) -> Option<u64> {
    records.iter().find(|r| r.collapsed() == Some(true)).map(|r| r.step)
}

pub fn to_csv_string(records: &[TelemetryRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory csv write");
    }
    let bytes = w.into_inner().expect("in-memory csv flush");
    let out = String::from_utf8(bytes).expect("csv is UTF-8");
    if records.is_empty() {
        format!("{CSV_HEADER}\n")
    } else {
        out
    }
}

pub fn write_csv(path: &Path, records: &[TelemetryRecord]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, to_csv_string(records)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parses a telemetry CSV, collecting every problem instead of stopping at
/// the first.
pub fn parse_csv(text: &str, origin: &str) -> Result<Vec<TelemetryRecord>> {
    let mut problems = Vec::new();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    match rdr.headers() {
        Ok(h) if h.iter().collect::<Vec<_>>().join(",") == CSV_HEADER => {}
        Ok(h) => problems.push(format!(
            "{origin}: unexpected header {:?}",
            h.iter().collect::<Vec<_>>().join(",")
        )),
        Err(e) => problems.push(format!("{origin}: {e}")),
    }
    let mut records: Vec<TelemetryRecord> = Vec::new();
    if problems.is_empty() {
        for (k, row) in rdr.deserialize::<TelemetryRecord>().enumerate() {
            let line = k + 2;
            match row {
                Ok(r) => {
                    if let Some(prev) = records.last() {
                        if r.step <= prev.step {
                            problems.push(format!("{origin}:{line}: step {} not after {}", r.step, prev.step));
                        }
                    }
                    records.push(r);
                }
                Err(e) => problems.push(format!("{origin}:{line}: {e}")),
            }
        }
    }
    if problems.is_empty() {
        Ok(records)
    } else {
        Err(Error::Telemetry(problems))
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Telemetry(vec![format!("{}: {e}", path.display())]))?;
    parse_csv(&text, &path.display().to_string())
}

/// `(step, running_avg)` points of one run.
pub fn return_curve(records: &[TelemetryRecord]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| r.running_avg.map(|v| (r.step, v)))
        .collect()
}

/// Final running-average return, if any episode completed.
pub fn final_running_average(records: &[TelemetryRecord]) -> Option<f64> {
    records.iter().rev().find_map(|r| r.running_avg)
}

/// Linear interpolation of `curve` at `x`, held flat outside its range.
pub fn interpolate(curve: &[(u64, f64)], x: u64) -> Option<f64> {
    let first = curve.first()?;
    let last = curve.last()?;
    if x <= first.0 {
        return Some(first.1);
    }
    if x >= last.0 {
        return Some(last.1);
    }
    let k = curve.partition_point(|p| p.0 <= x);
    let (a, b) = (curve[k - 1], curve[k]);
    let t = (x - a.0) as f64 / (b.0 - a.0) as f64;
    Some(a.1 + t * (b.1 - a.1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub label: String,
    pub runs: usize,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Pointwise mean, min and max of several runs' curves on a grid of
/// `grid_step` up to the shortest run's last step. Values are sorted before
/// summing so the result does not depend on run order.
pub fn aggregate(label: &str, curves: &[Vec<(u64, f64)>], grid_step: u64) -> Option<Aggregate> {
    let curves: Vec<&Vec<(u64, f64)>> = curves.iter().filter(|c| !c.is_empty()).collect();
    if curves.is_empty() {
        return None;
    }
    let end = curves.iter().map(|c| c.last().unwrap().0).min().unwrap();
    let steps: Vec<u64> = (0..=end / grid_step).map(|k| k * grid_step).collect();
    let (mut mean, mut min, mut max) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &steps {
        let mut vals: Vec<f64> = curves.iter().map(|c| interpolate(c, s).unwrap()).collect();
        vals.sort_by(f64::total_cmp);
        mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        min.push(vals[0]);
        max.push(vals[vals.len() - 1]);
    }
    Some(Aggregate {
        label: label.to_string(),
        runs: curves.len(),
        steps,
        mean,
        min,
        max,
    })
}

/// Telemetry of every seed of one configuration.
#[derive(Clone, Debug)]
pub struct ConfigRuns {
    pub label: String,
    pub runs: Vec<(PathBuf, Vec<TelemetryRecord>)>,
}

fn seed_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `DIR/<label>/seed_*/telemetry.csv`, or `DIR/seed_*/telemetry.csv`
/// when `DIR` is itself one configuration. Every missing or malformed file
/// is reported.
pub fn load_runs(dir: &Path) -> Result<Vec<ConfigRuns>> {
    let mut config_dirs = Vec::new();
    if !seed_dirs(dir)?.is_empty() {
        config_dirs.push(dir.to_path_buf());
    } else {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut subs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        subs.sort();
        for s in subs {
            if !seed_dirs(&s)?.is_empty() {
                config_dirs.push(s);
            }
        }
    }
    if config_dirs.is_empty() {
        return Err(Error::Telemetry(vec![format!(
            "{}: no seed_* run directories found",
            dir.display()
        )]));
    }
    let mut problems = Vec::new();
    let mut out = Vec::new();
    for cd in config_dirs {
        let label = cd.file_name().and_then(|n| n.to_str()).unwrap_or("run").to_string();
        let mut runs = Vec::new();
        for sd in seed_dirs(&cd)? {
            let path = sd.join("telemetry.csv");
            match read_csv(&path) {
                Ok(r) => runs.push((sd, r)),
                Err(Error::Telemetry(p)) => problems.extend(p),
                Err(e) => problems.push(e.to_string()),
            }
        }
        out.push(ConfigRuns { label, runs });
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Telemetry(problems))
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn nice_step(span: f64, target_ticks: f64) -> f64 {
    let raw = (span / target_ticks).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// SVG 1.1 line chart: one mean polyline per configuration over a min-max
/// band, x in environment steps, y in running-average episodic return.
pub fn render_svg(aggs: &[Aggregate], title: &str) -> String {
    let (w, h) = (860.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 200.0, 40.0, 55.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let x_max = aggs
        .iter()
        .filter_map(|a| a.steps.last())
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let y_max = aggs.iter().flat_map(|a| a.max.iter()).copied().fold(1.0f64, f64::max);
    let y_max = (y_max / nice_step(y_max, 5.0)).ceil() * nice_step(y_max, 5.0);
    let sx = |x: f64| ml + x / x_max * pw;
    let sy = |y: f64| mt + ph - y / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        xml_escape(title)
    );
    let xs = nice_step(x_max, 6.0);
    let mut t = 0.0;
    while t <= x_max + 1e-9 {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#dddddd"/><text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"##,
            mt,
            mt + ph,
            mt + ph + 16.0,
            t as u64
        );
        t += xs;
    }
    let ys = nice_step(y_max, 5.0);
    let mut t = 0.0;
    while t <= y_max + 1e-9 {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"##,
            ml + pw,
            ml - 6.0,
            y + 4.0,
            t
        );
        t += ys;
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">environment steps</text>"#,
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.1})">running average episodic return</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (k, a) in aggs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = a
            .steps
            .iter()
            .zip(&a.max)
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x as f64), sy(y)))
            .collect();
        let lower: Vec<String> = a
            .steps
            .iter()
            .zip(&a.min)
            .rev()
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x as f64), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let mean: Vec<String> = a
            .steps
            .iter()
            .zip(&a.mean)
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x as f64), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            mean.join(" ")
        );
        let ly = mt + 14.0 + 20.0 * k as f64;
        let lx = ml + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{} (n={})</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            xml_escape(&a.label),
            a.runs
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Loads runs under `dir`, aggregates each configuration and writes the SVG.
pub fn plot_runs(dir: &Path, out: &Path) -> Result<Vec<Aggregate>> {
    let configs = load_runs(dir)?;
    let mut aggs = Vec::new();
    let mut problems = Vec::new();
    for c in &configs {
        let curves: Vec<Vec<(u64, f64)>> = c.runs.iter().map(|(_, r)| return_curve(r)).collect();
        match aggregate(&c.label, &curves, GRID_STEP) {
            Some(a) => aggs.push(a),
            None => problems.push(format!("{}: no completed episodes in any run", c.label)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Telemetry(problems));
    }
    let svg = render_svg(&aggs, "Running average episodic return");
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))?;
    Ok(aggs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(step: u64) -> TelemetryRecord {
        TelemetryRecord {
            step,
            ..Default::default()
        }
    }

    #[test]
    fn running_average_examples() {
        assert_eq!(running_average(&[7.0; 5], 20), vec![7.0; 5]);
        assert_eq!(running_average(&[3.0], 20), vec![3.0]);
        let r: Vec<f64> = (1..=30).map(|v| v as f64).collect();
        let avg = running_average(&r, 20);
        let oracle = (11..=30).sum::<i32>() as f64 / 20.0;
        assert_eq!(avg[29], oracle);
        assert_eq!(oracle, 20.5);
    }

    proptest! {
        #[test]
        fn running_average_stays_in_window_range(xs in prop::collection::vec(-1e6f64..1e6, 1..60), w in 1usize..25) {
            let avg = running_average(&xs, w);
            for (k, a) in avg.iter().enumerate() {
                let win = &xs[(k + 1).saturating_sub(w)..=k];
                let lo = win.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = win.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*a >= lo && *a <= hi);
            }
        }
    }

    #[test]
    fn collapse_detection_uses_strict_threshold() {
        let mk = |vals: &[f64]| -> Vec<TelemetryRecord> {
            vals.iter()
                .enumerate()
                .map(|(k, &v)| TelemetryRecord {
                    step: 100 * (k as u64 + 1),
                    mean_var: Some(v),
                    ..Default::default()
                })
                .collect()
        };
        assert_eq!(detect_collapse(&mk(&[1.0, 0.5, 1e-9, 1e-12])), Some(300));
        assert_eq!(detect_collapse(&mk(&[0.1, 0.2, 0.15])), None);
        assert_eq!(detect_collapse(&mk(&[1e-7, 1e-7])), None);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let records = vec![
            TelemetryRecord {
                step: 12,
                episodic_return: Some(12.0),
                running_avg: Some(12.0),
                ..rec(12)
            },
            TelemetryRecord {
                mean_var: Some(0.1 + 0.2),
                l_jepa: Some(1.234_567_890_123e-9),
                l_actor: Some(-0.0123),
                l_critic: Some(4.5),
                ..rec(512)
            },
        ];
        let text = to_csv_string(&records);
        assert!(text.starts_with(&format!("{CSV_HEADER}\n12,12.0,12.0,,,,,\n")));
        assert_eq!(parse_csv(&text, "mem").unwrap(), records);
        assert_eq!(parse_csv(&to_csv_string(&[]), "mem").unwrap(), vec![]);
    }

    #[test]
    fn malformed_csv_lists_every_problem() {
        let text = format!("{CSV_HEADER}\n5,1,1,,,,,\n3,1,1,,,,,\nx,1,1,,,,,\n");
        match parse_csv(&text, "t.csv") {
            Err(Error::Telemetry(p)) => {
                assert_eq!(p.len(), 2, "{p:?}");
                assert!(p[0].starts_with("t.csv:3"));
                assert!(p[1].starts_with("t.csv:4"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("a,b\n", "t").is_err());
    }

    #[test]
    fn interpolation_and_aggregate() {
        let c = vec![(0, 0.0), (1000, 10.0)];
        assert_eq!(interpolate(&c, 500), Some(5.0));
        assert_eq!(interpolate(&c, 5000), Some(10.0));
        assert_eq!(interpolate(&[], 5), None);
        let curves: Vec<Vec<(u64, f64)>> = (0..5).map(|k| vec![(0, k as f64), (1000, 2.0 * k as f64)]).collect();
        let a = aggregate("x", &curves, 500).unwrap();
        assert_eq!(a.steps, vec![0, 500, 1000]);
        assert_eq!(a.mean, vec![2.0, 3.0, 4.0]);
        assert_eq!(a.min, vec![0.0, 0.0, 0.0]);
        assert_eq!(a.max, vec![4.0, 6.0, 8.0]);
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let curves: Vec<Vec<(u64, f64)>> = (0..4)
            .map(|k| {
                (0..20)
                    .map(|s| (s * 137, (s as f64 * 0.37 + k as f64 * 1.1).sin() * 1e3))
                    .collect()
            })
            .collect();
        let mut rev = curves.clone();
        rev.reverse();
        rev.swap(0, 2);
        let a = aggregate("x", &curves, 500).unwrap();
        let b = aggregate("x", &rev, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn svg_has_one_polyline_per_config() {
        let curves = vec![vec![(0, 1.0), (1000, 3.0)]];
        let aggs = vec![
            aggregate("a&b", &curves, 500).unwrap(),
            aggregate("c", &curves, 500).unwrap(),
        ];
        let svg = render_svg(&aggs, "t");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&amp;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn load_runs_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("cfg").join("seed_0");
        let b = dir.path().join("cfg").join("seed_1");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        write_csv(&a.join("telemetry.csv"), &[rec(5)]).unwrap();
        match load_runs(dir.path()) {
            Err(Error::Telemetry(p)) => assert_eq!(p.len(), 1),
            other => panic!("{other:?}"),
        }
        write_csv(&b.join("telemetry.csv"), &[rec(7)]).unwrap();
        let runs = load_runs(dir.path()).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].label, "cfg");
        assert_eq!(runs[0].runs.len(), 2);
        assert_eq!(load_runs(&dir.path().join("cfg")).unwrap()[0].runs.len(), 2);
    }
}
