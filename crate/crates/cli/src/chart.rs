//! Line charts as self-contained SVG: pick an x and y column from result
//! rows, split by a grouping column, one polyline per group. No templating,
//! just writes the handful of elements a line chart needs.

use crate::results::ResultRow;
use dpaudit_core::error::{Error, Result};
use std::io::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Column value for plotting or grouping.
pub enum FieldValue {
    Num(f64),
    Text(String),
}

pub fn field_value(row: &ResultRow, name: &str) -> Result<FieldValue> {
    use FieldValue::{Num, Text};
    Ok(match name {
        "run_id" => Text(row.run_id.clone()),
        "seed" => Num(row.seed as f64),
        "flow" => Text(row.flow.clone()),
        "canary_mode" => Text(row.canary_mode.clone()),
        "m" => Num(row.m as f64),
        "n" => Num(row.n as f64),
        "eps_target" => Num(row.eps_target),
        "sigma" => Num(row.sigma),
        "delta" => Num(row.delta),
        "r" => Num(row.r as f64),
        "w" => Num(row.w as f64),
        "eps_lower" => Num(row.eps_lower),
        "eps_opt" => Num(row.eps_opt),
        "auc" => Num(row.auc),
        "train_acc" => Num(row.train_acc),
        "test_acc" => Num(row.test_acc),
        "wall_seconds" => Num(row.wall_seconds),
        other => {
            return Err(Error::config(format!("unknown result column {other:?}")));
        }
    })
}

fn numeric_value(row: &ResultRow, name: &str) -> Result<f64> {
    match field_value(row, name)? {
        FieldValue::Num(v) => Ok(v),
        FieldValue::Text(_) => Err(Error::config(format!(
            "column {name:?} is not numeric and cannot be an axis"
        ))),
    }
}

fn group_label(row: &ResultRow, name: &str) -> Result<String> {
    Ok(match field_value(row, name)? {
        FieldValue::Num(v) => format!("{v}"),
        FieldValue::Text(s) => s,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.01..10_000.0).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if lo == hi {
            // Flat data still needs a visible axis span.
            return Range { lo: lo - 1.0, hi: hi + 1.0 };
        }
        let pad = 0.05 * (hi - lo);
        Range { lo: lo - pad, hi: hi + pad }
    }
}

/// Writes a line chart of `y_field` against `x_field`, one polyline per
/// distinct `group_field` value (first-appearance order). Rows with a
/// non-finite coordinate are dropped from their line.
pub fn emit_chart(
    rows: &[ResultRow],
    x_field: &str,
    y_field: &str,
    group_field: &str,
    w: &mut impl Write,
) -> Result<()> {
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in rows {
        let x = numeric_value(row, x_field)?;
        let y = numeric_value(row, y_field)?;
        let label = group_label(row, group_field)?;
        let entry = match groups.iter_mut().find(|(g, _)| *g == label) {
            Some(e) => &mut e.1,
            None => {
                groups.push((label, Vec::new()));
                &mut groups.last_mut().unwrap().1
            }
        };
        if x.is_finite() && y.is_finite() {
            entry.push((x, y));
        }
    }
    for (_, pts) in &mut groups {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let xr = Range::of(groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = Range::of(groups.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |v: f64| MARGIN_LEFT + (v - xr.lo) / (xr.hi - xr.lo) * plot_w;
    let sy = |v: f64| MARGIN_TOP + plot_h - (v - yr.lo) / (yr.hi - yr.lo) * plot_h;

    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#)?;

    for i in 0..5 {
        let t = i as f64 / 4.0;
        let xv = xr.lo + t * (xr.hi - xr.lo);
        let yv = yr.lo + t * (yr.hi - yr.lo);
        let gx = sx(xv);
        let gy = sy(yv);
        writeln!(
            w,
            r##"<line x1="{gx:.1}" y1="{MARGIN_TOP}" x2="{gx:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            MARGIN_TOP + plot_h
        )?;
        writeln!(
            w,
            r##"<line x1="{MARGIN_LEFT}" y1="{gy:.1}" x2="{:.1}" y2="{gy:.1}" stroke="#dddddd"/>"##,
            MARGIN_LEFT + plot_w
        )?;
        writeln!(
            w,
            r#"<text x="{gx:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h + 18.0,
            tick_label(xv)
        )?;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            gy + 4.0,
            tick_label(yv)
        )?;
    }

    writeln!(
        w,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{y0:.1}" stroke="black"/>
<line x1="{MARGIN_LEFT}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black"/>"#,
        y0 = MARGIN_TOP + plot_h,
        x1 = MARGIN_LEFT + plot_w
    )?;
    writeln!(
        w,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_field)
    )?;
    writeln!(
        w,
        r#"<text x="16" y="{:.1}" font-size="14" text-anchor="middle" transform="rotate(-90 16 {mid:.1})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        xml_escape(y_field),
        mid = MARGIN_TOP + plot_h / 2.0
    )?;

    for (i, (label, pts)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        )?;
        for (x, y) in pts {
            writeln!(
                w,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            )?;
        }
        let ly = MARGIN_TOP + 16.0 * i as f64 + 8.0;
        let lx = WIDTH - MARGIN_RIGHT + 14.0;
        writeln!(
            w,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        )?;
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            xml_escape(label)
        )?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(flow: &str, m: u64, eps: f64) -> ResultRow {
        ResultRow {
            run_id: "x".into(),
            seed: 0,
            flow: flow.into(),
            canary_mode: "orthogonal".into(),
            m,
            n: m,
            eps_target: f64::NAN,
            sigma: 0.0,
            delta: 1e-5,
            r: m,
            w: m,
            eps_lower: eps,
            eps_opt: eps + 1.0,
            auc: 0.9,
            train_acc: f64::NAN,
            test_acc: f64::NAN,
            wall_seconds: 1.0,
        }
    }

    fn render(rows: &[ResultRow]) -> String {
        let mut buf = Vec::new();
        emit_chart(rows, "m", "eps_lower", "flow", &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn two_groups_of_five_points_become_two_polylines() {
        let mut rows = Vec::new();
        for (i, m) in [64u64, 128, 256, 512, 1024].iter().enumerate() {
            rows.push(row("self_comp", *m, 1.0 + i as f64));
            rows.push(row("baseline_o1", *m, 0.5 + i as f64));
        }
        let svg = render(&rows);
        let polylines: Vec<&str> = svg
            .lines()
            .filter(|l| l.trim_start().starts_with("<polyline"))
            .collect();
        assert_eq!(polylines.len(), 2, "{svg}");
        for line in polylines {
            let pts = line.split("points=\"").nth(1).unwrap();
            let pts = pts.split('"').next().unwrap();
            assert_eq!(pts.split_whitespace().count(), 5, "{line}");
        }
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn unknown_or_text_axis_is_rejected() {
        let rows = [row("a", 1, 1.0)];
        let mut buf = Vec::new();
        assert!(emit_chart(&rows, "nope", "eps_lower", "flow", &mut buf).is_err());
        assert!(emit_chart(&rows, "flow", "eps_lower", "flow", &mut buf).is_err());
    }

    #[test]
    fn empty_input_still_renders_axes() {
        let svg = render(&[]);
        assert!(svg.contains("<line"));
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn non_finite_points_are_dropped_not_plotted() {
        let mut bad = row("a", 10, f64::NAN);
        bad.eps_lower = f64::NAN;
        let rows = [row("a", 1, 1.0), bad, row("a", 3, 2.0)];
        let svg = render(&rows);
        let line = svg
            .lines()
            .find(|l| l.trim_start().starts_with("<polyline"))
            .unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split_whitespace().count(), 2);
    }

    #[test]
    fn group_labels_are_escaped() {
        let rows = [row("a<b&c", 1, 1.0)];
        let svg = render(&rows);
        assert!(svg.contains("a&lt;b&amp;c"));
    }
}
