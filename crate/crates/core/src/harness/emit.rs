use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AngularHistogram, OperatingPoint, TimingStats};
use crate::error::{Error, Result};

/// Column order of `points.csv`. Wall-clock timing is left out so that
/// repeated runs produce identical files; it is kept in the JSON dump.
pub const CSV_COLUMNS: &[&str] = &[
    "attack",
    "attack_seed",
    "train_seed",
    "defense",
    "defense_kind",
    "epsilon",
    "acc_defender",
    "acc_attacker",
    "mean_l1",
    "mean_entropy",
    "queries_used",
    "status",
];

const DUMP_FORMAT: &str = "mad-results";

/// Everything one harness run produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsDump {
    pub format: String,
    /// The experiment config, as given.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub victim_accuracy: Option<f64>,
    #[serde(default)]
    pub points: Vec<OperatingPoint>,
    #[serde(default)]
    pub histograms: Vec<AngularHistogram>,
    #[serde(default)]
    pub timings: Vec<TimingStats>,
}

impl ResultsDump {
    pub fn new(seed: u64) -> Self {
        ResultsDump {
            format: DUMP_FORMAT.into(),
            seed,
            ..Default::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dump: ResultsDump = serde_json::from_str(&s)?;
        if dump.format != DUMP_FORMAT {
            return Err(Error::invalid(format!("{} is not a results dump", path.display())));
        }
        Ok(dump)
    }

    fn is_empty(&self) -> bool {
        self.points.is_empty() && self.histograms.is_empty() && self.timings.is_empty()
    }
}

/// CSV text with one row per point, columns as in [`CSV_COLUMNS`].
pub fn points_csv(points: &[OperatingPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.attack_tag.clone(),
            p.attack_seed.to_string(),
            p.train_seed.to_string(),
            p.defense_tag.clone(),
            p.defense_kind.name().to_string(),
            p.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            p.acc_defender.to_string(),
            p.acc_attacker.to_string(),
            p.mean_l1.to_string(),
            p.mean_entropy.to_string(),
            p.queries_used.to_string(),
            p.status.label(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn axes(svg: &mut String, title: &str, xlabel: &str, ylabel: &str, xmax: f64, ymax: f64) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = write!(
        svg,
        r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = write!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = write!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = x0 + f * (x1 - x0);
        let y = y0 - f * (y0 - y1);
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            y0 + 16.0,
            fmt_tick(f * xmax)
        );
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            fmt_tick(f * ymax)
        );
    }
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        H - 15.0,
        escape(xlabel)
    );
    let _ = write!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn open(svg: &mut String) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>"#
    );
}

/// Attacker vs defender accuracy (percent), one line per (attack, defense
/// kind) ordered by ε. A dashed line marks the chance floor `1/K` when
/// `num_classes` is known.
pub fn accuracy_svg(points: &[OperatingPoint], num_classes: Option<usize>) -> String {
    let mut svg = String::new();
    open(&mut svg);
    axes(&mut svg, "Attacker vs defender accuracy", "defender accuracy (%)", "attacker accuracy (%)", 100.0, 100.0);
    let sx = |v: f64| MARGIN + v * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - v * (H - 2.0 * MARGIN);
    if let Some(k) = num_classes.filter(|&k| k > 0) {
        let y = sy(1.0 / k as f64);
        let _ = write!(
            svg,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#888" stroke-dasharray="4 4"/>"##,
            sx(0.0),
            sx(1.0)
        );
    }
    let mut series: BTreeMap<(String, String), Vec<&OperatingPoint>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.status == super::PointStatus::Ok) {
        series
            .entry((p.attack_tag.clone(), p.defense_kind.name().to_string()))
            .or_default()
            .push(p);
    }
    for (i, ((attack, kind), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.epsilon.unwrap_or(0.0).total_cmp(&b.epsilon.unwrap_or(0.0)));
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.acc_defender), sy(p.acc_attacker)))
            .collect();
        let _ = write!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (x, y) = c.split_once(',').expect("formatted pair");
            let _ = write!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = write!(
            svg,
            r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#,
            MARGIN + 10.0,
            escape(&format!("{attack} / {kind}"))
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Bar chart of angular deviations.
pub fn histogram_svg(h: &AngularHistogram) -> String {
    let mut svg = String::new();
    open(&mut svg);
    let ymax = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let title = format!("{} ({:?}): mean {:.1}°", h.defense_tag, h.mode, h.mean_theta);
    axes(&mut svg, &title, "angular deviation (degrees)", "count", 180.0, ymax);
    let bw = (W - 2.0 * MARGIN) / h.counts.len().max(1) as f64;
    for (i, &c) in h.counts.iter().enumerate() {
        let bh = c as f64 / ymax * (H - 2.0 * MARGIN);
        let _ = write!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
            MARGIN + i as f64 * bw,
            H - MARGIN - bh,
            (bw - 1.0).max(0.5),
            bh
        );
    }
    svg.push_str("</svg>");
    svg
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `points.csv`, `results.json`, `accuracy.svg` and one
/// `angular-<i>.svg` per histogram into `dir`, returning the paths.
pub fn emit_results(dump: &ResultsDump, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if dump.is_empty() {
        return Err(Error::invalid("nothing to emit"));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = dir.join("results.json");
    write_file(&json, &serde_json::to_string_pretty(dump)?)?;
    written.push(json);
    if !dump.points.is_empty() {
        let csv = dir.join("points.csv");
        write_file(&csv, &points_csv(&dump.points)?)?;
        written.push(csv);
        let svg = dir.join("accuracy.svg");
        write_file(&svg, &accuracy_svg(&dump.points, dump.num_classes))?;
        written.push(svg);
    }
    for (i, h) in dump.histograms.iter().enumerate() {
        let svg = dir.join(format!("angular-{i}.svg"));
        write_file(&svg, &histogram_svg(h))?;
        written.push(svg);
    }
    Ok(written)
}
