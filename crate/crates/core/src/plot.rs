//! SVG charts: learning curves across seeds (mean line with a ±1 std band)
//! and ablation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{mean_std, CurveRow};

/// Mean and population std of one quantity at each x.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Band {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Band {
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `curve.csv` files under `root` (itself, if it is a file), sorted.
pub fn find_curves(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "curve.csv") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregates `field` across runs at every update where at least one run
/// has a value.
pub fn band(runs: &[Vec<CurveRow>], field: impl Fn(&CurveRow) -> Option<f64>) -> Band {
    let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for row in run {
            if let Some(v) = field(row).filter(|v| v.is_finite()) {
                at.entry(row.update).or_default().push(v);
            }
        }
    }
    let mut b = Band::default();
    for (u, xs) in at {
        let (m, s) = mean_std(&xs).expect("nonempty");
        b.x.push(u as f64);
        b.mean.push(m);
        b.std.push(s);
    }
    b
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const COLOR: &str = "#1f5fa8";

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Draws one panel with its top-left corner at `(ox, oy)`. `x_labels`
/// replaces numeric x ticks with one label per point.
fn panel(svg: &mut String, ox: f64, oy: f64, title: &str, xlabel: &str, b: &Band, x_labels: Option<&[String]>) {
    let (x0, y0) = (ox + MARGIN, oy + 28.0);
    let (w, h) = (PANEL_W - MARGIN - 12.0, PANEL_H - 28.0 - 36.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
        ox + PANEL_W / 2.0,
        oy + 16.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#888"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
        x0 + w / 2.0,
        y0 + h + 30.0,
        escape(xlabel)
    );
    if b.is_empty() {
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" fill="#888">no data</text>"##,
            x0 + w / 2.0,
            y0 + h / 2.0
        );
        return;
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..b.x.len() {
        xmin = xmin.min(b.x[i]);
        xmax = xmax.max(b.x[i]);
        ymin = ymin.min(b.mean[i] - b.std[i]);
        ymax = ymax.max(b.mean[i] + b.std[i]);
    }
    if xmax - xmin < 1e-12 {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * w;
    let py = |y: f64| y0 + h - (y - ymin) / (ymax - ymin) * h;

    for k in 0..=4 {
        let v = ymin + (ymax - ymin) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            py(v) + 3.0,
            fmt_tick(v)
        );
    }
    match x_labels {
        Some(labels) => {
            for (x, l) in b.x.iter().zip(labels) {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                    px(*x),
                    y0 + h + 14.0,
                    escape(l)
                );
            }
        }
        None => {
            for k in 0..=4 {
                let v = xmin + (xmax - xmin) * k as f64 / 4.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                    px(v),
                    y0 + h + 14.0,
                    fmt_tick(v)
                );
            }
        }
    }

    let mut area = String::new();
    for i in 0..b.x.len() {
        let _ = write!(area, "{:.2},{:.2} ", px(b.x[i]), py(b.mean[i] + b.std[i]));
    }
    for i in (0..b.x.len()).rev() {
        let _ = write!(area, "{:.2},{:.2} ", px(b.x[i]), py(b.mean[i] - b.std[i]));
    }
    let _ = writeln!(
        svg,
        r#"<polygon points="{}" fill="{COLOR}" fill-opacity="0.2" stroke="none"/>"#,
        area.trim_end()
    );
    let line: Vec<String> = (0..b.x.len())
        .map(|i| format!("{:.2},{:.2}", px(b.x[i]), py(b.mean[i])))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="{COLOR}" stroke-width="1.5"/>"#,
        line.join(" ")
    );
    if b.x.len() == 1 {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{COLOR}"/>"#,
            px(b.x[0]),
            py(b.mean[0])
        );
    }
}

fn document(title: &str, panels: usize, body: &str) -> String {
    let width = PANEL_W * panels as f64;
    let height = PANEL_H + 24.0;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"16\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n{body}</svg>\n",
        width / 2.0,
        escape(title)
    )
}

/// Episodic total reward, validation task metric and validation perplexity
/// against the update index.
pub fn learning_curve_svg(runs: &[Vec<CurveRow>], title: &str) -> String {
    let panels: [(&str, Band); 3] = [
        ("rollout total reward", band(runs, |r| r.total_reward)),
        ("validation task metric", band(runs, |r| r.val_task_metric)),
        ("validation perplexity", band(runs, |r| r.val_perplexity)),
    ];
    let mut body = String::new();
    for (i, (name, b)) in panels.iter().enumerate() {
        panel(&mut body, PANEL_W * i as f64, 24.0, name, "update", b, None);
    }
    document(&format!("{title} ({} runs)", runs.len()), 3, &body)
}

/// Task metric and perplexity per value from an ablation `summary.csv`.
pub fn ablation_svg(summary: &Path) -> Result<String> {
    let mut r = csv::Reader::from_path(summary)?;
    let headers = r.headers()?.clone();
    let axis = headers.get(0).unwrap_or("value").to_owned();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut labels = Vec::new();
    let metrics = ["task_metric", "perplexity"];
    let mut bands = vec![Band::default(), Band::default()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        labels.push(rec.get(0).unwrap_or("").to_owned());
        for (b, m) in bands.iter_mut().zip(metrics) {
            let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).and_then(|s| s.parse::<f64>().ok());
            if let (Some(mean), Some(std)) = (get(col(&format!("{m}_mean"))), get(col(&format!("{m}_std")))) {
                b.x.push(i as f64);
                b.mean.push(mean);
                b.std.push(std);
            }
        }
    }
    let mut body = String::new();
    for (i, (b, m)) in bands.iter().zip(metrics).enumerate() {
        let shown: Vec<String> = b.x.iter().map(|&x| labels[x as usize].clone()).collect();
        panel(&mut body, PANEL_W * i as f64, 24.0, &format!("validation {m}"), &axis, b, Some(&shown));
    }
    Ok(document(&format!("ablation over {axis}"), 2, &body))
}
