//! Self-contained SVG figures: scatter, quiver, loss curves and tables.

use std::fmt::Write as _;

use dmvae_core::Array;

use crate::error::{LabError, LabResult};
use crate::table::Table;

const W: f64 = 480.0;
const H: f64 = 480.0;
const MARGIN: f64 = 48.0;

pub const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps data coordinates into the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>, equal: bool) -> LabResult<Self> {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            it.filter(|v| v.is_finite())
                .fold(None, |acc: Option<(f64, f64)>, v| Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v)))))
        };
        let (Some(mut x), Some(mut y)) = (range(&mut { xs }), range(&mut { ys })) else {
            return Err(LabError::Render("no finite values to plot".into()));
        };
        let pad = |(lo, hi): (f64, f64)| {
            let w = (hi - lo).max(1e-9);
            (lo - 0.05 * w, hi + 0.05 * w)
        };
        x = pad(x);
        y = pad(y);
        if equal {
            let half = 0.5 * (x.1 - x.0).max(y.1 - y.0);
            let (cx, cy) = (0.5 * (x.0 + x.1), 0.5 * (y.0 + y.1));
            x = (cx - half, cx + half);
            y = (cy - half, cy + half);
        }
        Ok(Self { x, y })
    }

    fn px(&self, v: f64) -> f64 {
        MARGIN + (v - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, s: &mut String, title: &str) {
        let _ = write!(
            s,
            r##"<rect x="{m}" y="{m}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##,
            m = MARGIN,
            w = W - 2.0 * MARGIN,
            h = H - 2.0 * MARGIN
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            MARGIN / 2.0,
            escape(title)
        );
        for (v, anchor, x, y) in [
            (self.x.0, "start", MARGIN, H - MARGIN + 16.0),
            (self.x.1, "end", W - MARGIN, H - MARGIN + 16.0),
        ] {
            let _ = write!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{v:.3}</text>"#);
        }
        for (v, y) in [(self.y.0, H - MARGIN), (self.y.1, MARGIN + 10.0)] {
            let _ = write!(
                s,
                r#"<text x="{}" y="{y}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                MARGIN - 4.0
            );
        }
    }
}

fn open() -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}"><rect width="100%" height="100%" fill="white"/>"#)
}

fn xy(a: &Array, i: usize) -> (f64, f64) {
    let r = a.row(i);
    (r[0], if r.len() > 1 { r[1] } else { 0.0 })
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a Array,
}

/// Scatter of the first two columns of each series.
pub fn scatter(title: &str, series: &[Series<'_>]) -> LabResult<String> {
    let all = || series.iter().flat_map(|s| (0..s.points.rows()).map(move |i| xy(s.points, i)));
    let frame = Frame::fit(all().map(|p| p.0), all().map(|p| p.1), true)?;
    let mut s = open();
    frame.axes(&mut s, title);
    for (k, se) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = write!(s, r#"<g fill="{color}" fill-opacity="0.5">"#);
        for i in 0..se.points.rows() {
            let (x, y) = xy(se.points, i);
            if x.is_finite() && y.is_finite() {
                let _ = write!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, frame.px(x), frame.py(y));
            }
        }
        let _ = write!(
            s,
            r#"</g><text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            MARGIN + 6.0,
            MARGIN + 14.0 + 14.0 * k as f64,
            escape(se.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One arrow per row of `origins`, pointing along the matching row of
/// `arrows`. Arrows are scaled so that the longest spans one grid cell.
pub fn quiver(title: &str, origins: &Array, arrows: &Array, cell: f64) -> LabResult<String> {
    if origins.shape() != arrows.shape() {
        return Err(LabError::Render("origins and arrows differ in shape".into()));
    }
    let n = origins.rows();
    let frame = Frame::fit(
        (0..n).map(|i| xy(origins, i).0),
        (0..n).map(|i| xy(origins, i).1),
        true,
    )?;
    let longest = (0..n)
        .map(|i| {
            let (u, v) = xy(arrows, i);
            (u * u + v * v).sqrt()
        })
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let k = if longest > 0.0 { 0.9 * cell / longest } else { 0.0 };
    let mut s = open();
    frame.axes(&mut s, &format!("{title} (max |arrow| {longest:.3e})"));
    s.push_str(r##"<g stroke="#1f77b4" stroke-width="1.2" fill="#1f77b4">"##);
    for i in 0..n {
        let (x, y) = xy(origins, i);
        let (u, v) = xy(arrows, i);
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (x0, y0) = (frame.px(x), frame.py(y));
        let (x1, y1) = (frame.px(x + k * u), frame.py(y + k * v));
        let _ = write!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}"/>"#);
        let _ = write!(s, r#"<circle cx="{x1:.2}" cy="{y1:.2}" r="1.5"/>"#);
    }
    s.push_str("</g></svg>\n");
    Ok(s)
}

/// Line plot of `(x, y)` series. Non-positive values are dropped on a log axis.
pub fn loss_curves(title: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool) -> LabResult<String> {
    let tf = |y: f64| if log_y { if y > 0.0 { y.log10() } else { f64::NAN } } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, p)| p.iter().map(|&(x, y)| (x, tf(y))).filter(|(x, y)| x.is_finite() && y.is_finite()).collect())
        .collect();
    let frame = Frame::fit(
        pts.iter().flatten().map(|p| p.0),
        pts.iter().flatten().map(|p| p.1),
        false,
    )?;
    let mut s = open();
    frame.axes(&mut s, &if log_y { format!("{title} (log10)") } else { title.to_string() });
    for (k, ((label, _), p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end" fill="{color}">{}</text>"#,
            W - MARGIN - 4.0,
            MARGIN + 14.0 + 14.0 * k as f64,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The table as a text grid.
pub fn table(title: &str, t: &Table) -> LabResult<String> {
    let widths: Vec<usize> = (0..t.header.len())
        .map(|c| {
            t.rows
                .iter()
                .map(|r| short(&r[c].to_string()).len())
                .chain([t.header[c].len()])
                .max()
                .unwrap_or(1)
        })
        .collect();
    let char_w = 6.6;
    let width = 20.0 + widths.iter().map(|w| (*w as f64 + 2.0) * char_w).sum::<f64>();
    let height = 50.0 + 16.0 * (t.rows.len() + 1) as f64;
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}"><rect width="100%" height="100%" fill="white"/><text x="10" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    let line = |s: &mut String, y: f64, cells: Vec<String>, bold: bool| {
        let mut x = 10.0;
        for (c, w) in cells.iter().zip(&widths) {
            let weight = if bold { r#" font-weight="bold""# } else { "" };
            let _ = write!(
                s,
                r#"<text x="{x:.1}" y="{y:.1}" font-family="monospace" font-size="11"{weight}>{}</text>"#,
                escape(c)
            );
            x += (*w as f64 + 2.0) * char_w;
        }
    };
    line(&mut s, 42.0, t.header.clone(), true);
    for (i, r) in t.rows.iter().enumerate() {
        line(&mut s, 58.0 + 16.0 * i as f64, r.iter().map(|c| short(&c.to_string())).collect(), false);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Long floats are shortened for display only; the TSV keeps full precision.
fn short(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.len() > 10 && s.contains('.') => format!("{v:.4e}"),
        _ => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_is_well_formed_and_skips_non_finite() {
        let a = Array::from_rows(&[[0.0, 1.0], [f64::NAN, 2.0], [3.0, -1.0]]);
        let s = scatter("x<y", &[Series { label: "a", points: &a }]).unwrap();
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains("x&lt;y"));
    }

    #[test]
    fn nothing_finite_is_a_render_error() {
        let a = Array::from_rows(&[[f64::NAN, 1.0]]);
        assert!(scatter("t", &[Series { label: "a", points: &a }]).is_err());
        assert!(loss_curves("t", &[("l".into(), vec![(1.0, -1.0)])], true).is_err());
    }

    #[test]
    fn quiver_draws_one_arrow_per_row() {
        let o = Array::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let a = Array::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, -2.0]]);
        let s = quiver("f", &o, &a, 0.5).unwrap();
        assert_eq!(s.matches("<line").count(), 3);
    }
}
