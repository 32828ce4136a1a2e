//! Summary table and standalone SVG plots over one or more traces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::trace::{read_trace, TraceFile};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const ALIGNMENT_PLOT: &str = "alignment.svg";
pub const WEIGHTS_PLOT: &str = "weights.svg";

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub steps: usize,
    /// Final normalized mean alignment error.
    pub e_norm: f64,
    pub agreement: f64,
    pub loss_qhat: f64,
    pub loss_ste: f64,
    pub slack_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<32} {:>7} {:>12} {:>10} {:>11} {:>11} {:>12}\n",
            "run", "steps", "E_norm", "agreement", "loss_qhat", "loss_ste", "slack_min"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<32} {:>7} {:>12.4e} {:>10.5} {:>11.5} {:>11.5} {:>12.3e}",
                r.name, r.steps, r.e_norm, r.agreement, r.loss_qhat, r.loss_ste, r.slack_min
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn run_name(path: &Path) -> String {
    // Runs are usually `<dir>/trace.csv`, so the directory names them.
    let dir = path.parent().and_then(Path::file_name);
    match (dir, path.file_stem()) {
        (Some(d), Some(s)) if s == "trace" => d.to_string_lossy().into_owned(),
        (_, Some(s)) => s.to_string_lossy().into_owned(),
        _ => path.display().to_string(),
    }
}

/// Final losses come from the full-training-set values in the header when
/// present, otherwise from the last row's batch.
pub fn summarize(name: &str, trace: &TraceFile) -> SummaryRow {
    let last = trace.rows.last();
    let header_loss = |key: &str| trace.header_value(key).and_then(|v| v.parse::<f64>().ok());
    SummaryRow {
        name: name.to_string(),
        steps: trace.rows.len(),
        e_norm: last.map_or(0.0, |r| r.e_norm_mean),
        agreement: last.map_or(1.0, |r| r.agreement),
        loss_qhat: header_loss("final_full_loss_qhat")
            .or(last.map(|r| r.loss_qhat))
            .unwrap_or(f64::NAN),
        loss_ste: header_loss("final_full_loss_ste")
            .or(last.map(|r| r.loss_ste))
            .unwrap_or(f64::NAN),
        slack_min: trace
            .rows
            .iter()
            .map(|r| r.slack_min)
            .fold(f64::INFINITY, f64::min),
    }
}

/// `(w_qhat, w_ste, warped)` for one weight.
pub type WeightTriple = (f64, f64, f64);

/// Triples from a weights sidecar.
pub fn read_weights(path: &Path) -> Result<Vec<WeightTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(row, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| {
                f.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::TraceRow {
                        row,
                        msg: format!("bad weights line `{line}`"),
                    })
            };
            Ok((num(2)?, num(3)?, num(4)?))
        })
        .collect()
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            x: span(&mut xs.clone()),
            y: span(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
            r - l,
            b - t
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            WIDTH / 2.0,
            t - 20.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(ylabel)
        );
        for (v, anchor_x, anchor_y, align) in [
            (self.x.0, l, b + 16.0, "start"),
            (self.x.1, r, b + 16.0, "end"),
        ] {
            let _ = writeln!(
                s,
                "<text x=\"{anchor_x}\" y=\"{anchor_y}\" text-anchor=\"{align}\">{v:.3e}</text>"
            );
        }
        for (v, y) in [(self.y.0, b), (self.y.1, t + 10.0)] {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{v:.3e}</text>",
                l - 4.0
            );
        }
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// `E` against step, one polyline per trace.
pub fn alignment_svg(traces: &[(String, TraceFile)]) -> String {
    let frame = Frame::new(
        traces
            .iter()
            .flat_map(|(_, t)| t.rows.iter().map(|r| r.t as f64)),
        traces
            .iter()
            .flat_map(|(_, t)| t.rows.iter().map(|r| r.e_mean)),
    );
    let mut s = frame.open("Alignment error", "step", "mean E");
    for (i, (name, trace)) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = trace
            .rows
            .iter()
            .filter(|r| r.e_mean.is_finite())
            .map(|r| format!("{:.2},{:.2}", frame.px(r.t as f64), frame.py(r.e_mean)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Final `w_STE` against `w_Q̂`, with the identity line and the warp curve.
pub fn weights_svg(runs: &[(String, Vec<WeightTriple>)]) -> String {
    let all = || runs.iter().flat_map(|(_, w)| w.iter());
    let frame = Frame::new(all().map(|w| w.0), all().flat_map(|w| [w.1, w.2]));
    let mut s = frame.open("Final weights", "w (estimator net)", "w (STE net)");
    let (lo, hi) = (frame.x.0.max(frame.y.0), frame.x.1.min(frame.y.1));
    if lo < hi {
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>",
            frame.px(lo),
            frame.py(lo),
            frame.px(hi),
            frame.py(hi)
        );
    }
    for (i, (name, w)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut curve: Vec<(f64, f64)> = w.iter().map(|p| (p.0, p.2)).collect();
        curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        let points: Vec<String> = curve
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-opacity=\"0.5\" points=\"{}\"/>",
            points.join(" ")
        );
        for p in w {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>",
                frame.px(p.0),
                frame.py(p.1)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads every trace (and its `weights.csv` sibling, if any), then writes the
/// summary table and plots into `out_dir`. Unreadable traces are skipped and
/// listed as warnings.
pub fn emit_report(traces: &[PathBuf], out_dir: &Path) -> Result<Report> {
    let mut loaded = Vec::new();
    let mut weights = Vec::new();
    let mut warnings = Vec::new();
    for path in traces {
        match read_trace(path) {
            Ok(t) => {
                let name = run_name(path);
                let sidecar = path.with_file_name(crate::experiment::WEIGHTS_FILE);
                if sidecar.exists() {
                    match read_weights(&sidecar) {
                        Ok(w) => weights.push((name.clone(), w)),
                        Err(e) => {
                            warnings.push(format!("skipped weights {}: {e}", sidecar.display()))
                        }
                    }
                }
                loaded.push((name, t));
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if loaded.is_empty() {
        return Err(Error::config(format!(
            "no readable traces ({})",
            warnings.join("; ")
        )));
    }
    let report = Report {
        rows: loaded.iter().map(|(n, t)| summarize(n, t)).collect(),
        warnings,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(SUMMARY_FILE, report.to_text())?;
    write(ALIGNMENT_PLOT, alignment_svg(&loaded))?;
    if !weights.is_empty() {
        write(WEIGHTS_PLOT, weights_svg(&weights))?;
    }
    Ok(report)
}
