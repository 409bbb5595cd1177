//! Static log-log SVG plots of study tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::harness::table::StudyRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    ELod,
    EH,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    K,
    PStar,
    Linearization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub metric: Metric,
    pub group_by: GroupBy,
}

impl Default for Axes {
    fn default() -> Self {
        Self { metric: Metric::ELod, group_by: GroupBy::K }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Renders error against `H` with one series per group and a dashed
/// first-order reference line when at least two `H` values are present.
/// Rows with non-finite or non-positive values are skipped.
pub fn render_svg(rows: &[StudyRow], axes: Axes) -> Result<String> {
    let value = |r: &StudyRow| match axes.metric {
        Metric::ELod => r.e_lod,
        Metric::EH => r.e_h,
    };
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let y = value(r);
        if !(y > 0.0 && y.is_finite() && r.h > 0.0) {
            continue;
        }
        let key = match axes.group_by {
            GroupBy::K => format!("k={}", r.k),
            GroupBy::PStar => format!("p*={}", r.p_star),
            GroupBy::Linearization => r.linearization.clone(),
        };
        groups.entry(key).or_default().push((r.h, y));
    }
    if groups.is_empty() {
        return Err(invalid("table has no plottable rows"));
    }
    for pts in groups.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let all: Vec<(f64, f64)> = groups.values().flatten().copied().collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = (lo.log10().floor(), hi.log10().ceil());
        if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let sx = |x: f64| MARGIN + (x.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y.log10() - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let ylabel = match axes.metric {
        Metric::ELod => "e_LOD",
        Metric::EH => "e_H",
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for e in x0 as i32..=x1 as i32 {
        let x = sx(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">1e{e}</text>"#, HEIGHT - MARGIN + 18.0);
    }
    for e in y0 as i32..=y1 as i32 {
        let y = sy(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">1e{e}</text>"#, MARGIN - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">H</text>"#, WIDTH / 2.0, HEIGHT - 15.0);
    let _ = writeln!(s, r#"<text x="18" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {:.2})">{ylabel}</text>"#, HEIGHT / 2.0, HEIGHT / 2.0);

    for (i, (name, pts)) in groups.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if pts.len() > 1 {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        }
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = MARGIN + 16.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-size="12" fill="{color}">{name}</text>"#, WIDTH - MARGIN - 110.0);
    }

    let hs: Vec<f64> = all.iter().map(|p| p.0).collect();
    let (hmin, hmax) = hs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hmax > hmin {
        // Order-one line through the largest error at the largest H.
        let anchor = all.iter().filter(|p| p.0 == hmax).map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let y_at = |h: f64| anchor * h / hmax;
        let _ = writeln!(
            s,
            r#"<polyline class="reference" fill="none" stroke="gray" stroke-dasharray="6 4" points="{:.2},{:.2} {:.2},{:.2}"/>"#,
            sx(hmin),
            sy(y_at(hmin)),
            sx(hmax),
            sy(y_at(hmax))
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="gray">O(H)</text>"#, sx(hmin) + 4.0, sy(y_at(hmin)) - 6.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::table::Status;

    fn row(h: f64, k: usize, e: f64) -> StudyRow {
        StudyRow {
            model: "exp2".into(),
            linearization: "kacanov".into(),
            p_star: "zero".into(),
            h,
            k,
            iterations: 5,
            e_lod: e,
            e_h: e / 10.0,
            wall_ms: 0.0,
            status: Status::Ok,
        }
    }

    #[test]
    fn empty_and_single_row() {
        assert!(render_svg(&[], Axes::default()).is_err());
        let svg = render_svg(&[row(0.25, 1, 0.1)], Axes::default()).unwrap();
        assert_eq!(svg.matches("class=\"marker\"").count(), 1);
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn one_series_per_k() {
        let mut rows = Vec::new();
        for k in 1..=4 {
            for n in [4.0, 8.0, 16.0] {
                rows.push(row(1.0 / n, k, 0.5 / n / k as f64));
            }
        }
        let svg = render_svg(&rows, Axes::default()).unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 4);
        assert_eq!(svg.matches("class=\"reference\"").count(), 1);
        assert_eq!(svg, render_svg(&rows, Axes::default()).unwrap());
        let by_eh = render_svg(&rows, Axes { metric: Metric::EH, group_by: GroupBy::PStar }).unwrap();
        assert_eq!(by_eh.matches("class=\"series\"").count(), 1);
    }
}
