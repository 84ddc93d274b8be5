//! Minimal SVG charts for sweep curves, disruption series and per-class
//! scores. Output is deterministic text so it can be diffed.

use std::fmt::Write;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = HEIGHT / 2.0
    );
    let _ = writeln!(
        out,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN / 2.0,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN / 2.0
    );
}

/// Line chart with one polyline and marker set per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Numeric("plot points must be finite".into()));
    }
    let (x0, x1) = range(all.iter().map(|p| p.0));
    let (y0, y1) = range(all.iter().map(|p| p.1));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 1.5 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 1.5 * MARGIN);
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(x),
            HEIGHT - MARGIN + 16.0,
            fmt_tick(x)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN - 6.0,
            py(y) + 4.0,
            fmt_tick(y)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, px(x), py(y));
        }
        let ly = MARGIN / 2.0 + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{colour}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN / 2.0 - 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bar chart: one group per label, one bar per value series.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], series: &[(String, Vec<f64>)]) -> Result<String> {
    if labels.is_empty() || series.is_empty() {
        return Err(Error::Input("nothing to plot".into()));
    }
    if series.iter().any(|(_, v)| v.len() != labels.len()) {
        return Err(Error::Input("every bar series needs one value per label".into()));
    }
    if series.iter().flat_map(|(_, v)| v).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("bar values must be finite".into()));
    }
    let top = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0f64, f64::max).max(1e-12);
    let plot_w = WIDTH - 1.5 * MARGIN;
    let plot_h = HEIGHT - 1.5 * MARGIN;
    let group_w = plot_w / labels.len() as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
        MARGIN - 6.0,
        MARGIN / 2.0 + 4.0,
        fmt_tick(top)
    );
    for (g, label) in labels.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (i, (_, values)) in series.iter().enumerate() {
            let h = values[g] / top * plot_h;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + i as f64 * bar_w,
                HEIGHT - MARGIN - h,
                bar_w,
                h.max(0.0),
                PALETTE[i % PALETTE.len()]
            );
        }
        let cx = gx + group_w * 0.4;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{y:.2}" text-anchor="end" font-size="9" transform="rotate(-45 {cx:.2} {y:.2})">{}</text>"#,
            escape(label),
            y = HEIGHT - MARGIN + 12.0
        );
    }
    for (i, (name, _)) in series.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN / 2.0 - 4.0,
            MARGIN / 2.0 + 14.0 + 16.0 * i as f64,
            PALETTE[i % PALETTE.len()],
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let s = vec![
            Series::new("F1 <all>", vec![(25.0, 0.4), (50.0, 0.5), (100.0, 0.55)]),
            Series::new("flat", vec![(25.0, 0.3), (100.0, 0.3)]),
        ];
        let svg = line_chart("Effect of k", "k", "macro F1", &s).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("F1 &lt;all&gt;"));
        assert_eq!(svg, line_chart("Effect of k", "k", "macro F1", &s).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(line_chart("t", "x", "y", &[]).is_err());
        assert!(line_chart("t", "x", "y", &[Series::new("a", vec![(0.0, f64::NAN)])]).is_err());
        // A single point still renders.
        assert!(line_chart("t", "x", "y", &[Series::new("a", vec![(1.0, 1.0)])]).is_ok());
        assert!(bar_chart("t", "y", &["a".into()], &[("s".into(), vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn bar_chart_draws_every_bar() {
        let labels: Vec<String> = (0..3).map(|i| format!("class {i}")).collect();
        let svg = bar_chart(
            "scores",
            "F1 (%)",
            &labels,
            &[("random".into(), vec![10.0, 20.0, 5.0]), ("model".into(), vec![30.0, 25.0, 0.0])],
        )
        .unwrap();
        assert_eq!(svg.matches("<rect").count(), 1 + 6);
    }
}
