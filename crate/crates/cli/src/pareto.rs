//! `label,error,time_ms` CSV input/output and the SVG scatter plot.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use mobilex_core::pareto::ParetoPoint;

use crate::error::{CliError, Result};

pub const HEADER: [&str; 3] = ["label", "error", "time_ms"];

/// Reads points from CSV with a header naming the three columns in any order.
pub fn read_points<R: Read>(input: R) -> Result<Vec<ParetoPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let data_err = |line: u64, msg: String| CliError::Data(format!("line {line}: {msg}"));
    let headers = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(1, format!("missing column `{name}`")))
    };
    let [label, error, time] = [column(HEADER[0])?, column(HEADER[1])?, column(HEADER[2])?];
    let mut points = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |i: usize, name: &str| -> Result<f64> {
            let raw = &record[i];
            let v: f64 = raw
                .parse()
                .map_err(|_| data_err(line, format!("`{name}` is not a number: `{raw}`")))?;
            if !v.is_finite() {
                return Err(CliError::Numeric(format!(
                    "line {line}: `{name}` is not finite: `{raw}`"
                )));
            }
            if v <= 0.0 {
                return Err(data_err(line, format!("`{name}` must be positive, got {v}")));
            }
            Ok(v)
        };
        points.push(ParetoPoint::new(
            &record[label],
            number(error, "error")?,
            number(time, "time_ms")?,
        ));
    }
    if points.is_empty() {
        return Err(CliError::Data("no points in input".into()));
    }
    Ok(points)
}

pub fn read_points_file(path: &Path) -> Result<Vec<ParetoPoint>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_points(f).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        CliError::Numeric(m) => CliError::Numeric(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_points<W: std::io::Write>(out: W, points: &[ParetoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::Io(e.into());
    w.write_record(HEADER).map_err(io)?;
    for p in points {
        w.write_record([p.label.clone(), p.error.to_string(), p.time_ms.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

/// Scatter of error against time. Front points are filled and joined by a
/// polyline in time order; dominated points are hollow.
pub fn svg(front: &[ParetoPoint], dominated: &[ParetoPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 30.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 60.0;
    let all = || front.iter().chain(dominated);
    let range = |f: fn(&ParetoPoint) -> f64| {
        let lo = all().map(f).fold(f64::INFINITY, f64::min);
        let hi = all().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo {
            (hi - lo) * 0.08
        } else {
            lo.abs().max(1.0) * 0.1
        };
        ((lo - pad).max(0.0), hi + pad)
    };
    let (t0, t1) = range(|p| p.time_ms);
    let (e0, e1) = range(|p| p.error);
    let x = |t: f64| LEFT + (t - t0) / (t1 - t0) * (W - LEFT - RIGHT);
    let y = |e: f64| H - BOTTOM - (e - e0) / (e1 - e0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (xa, ya) = (H - BOTTOM, LEFT);
    let _ = writeln!(s, r#"<g class="axes" stroke="black">"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{xa}" x2="{}" y2="{xa}"/>"#, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{ya}" y1="{TOP}" x2="{ya}" y2="{xa}"/>"#);
    let _ = writeln!(s, "</g>");
    for t in ticks(t0, t1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(t),
            xa + 16.0,
            t
        );
    }
    for e in ticks(e0, e1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ya - 6.0,
            y(e) + 4.0,
            (e * 1e6).round() / 1e6
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">time (ms)</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">error</text>"#,
        (TOP + xa) / 2.0,
        (TOP + xa) / 2.0
    );
    let pts: Vec<String> = front
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.time_ms), y(p.error)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline class="front" fill="none" stroke="crimson" stroke-width="1.5" points="{}"/>"#,
        pts.join(" ")
    );
    for (class, points, fill) in [("dominated", dominated, "white"), ("front", front, "crimson")] {
        for p in points {
            let (cx, cy) = (x(p.time_ms), y(p.error));
            let label = escape(&p.label);
            let _ = writeln!(
                s,
                r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{fill}" stroke="crimson"><title>{label}: error {}, {} ms</title></circle>"#,
                p.error, p.time_ms
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, cx + 6.0, cy - 6.0);
        }
    }
    s.push_str("</svg>\n");
    s
}
