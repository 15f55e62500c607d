//! Tiny deterministic SVG builders for the run figures.
//!
//! Every figure is derived from a CSV sibling; rendering the same values
//! twice yields byte-identical markup, so plots can be regenerated from
//! persisted artifacts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 52.0;

fn fnum(v: f64) -> String {
    // Fixed formatting keeps output byte-stable.
    format!("{v:.3}")
}

pub struct LineSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub dashed: bool,
}

/// Line plot with optional dashed baselines, on a linear x / linear y grid.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[LineSeries]) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = write!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    let _ = write!(
        out,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 14 {})\">{}</text>",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    // range labels
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\">{}</text>",
        MARGIN,
        HEIGHT - MARGIN + 14.0,
        fnum(x0)
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>",
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 14.0,
        fnum(x1)
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>",
        MARGIN - 4.0,
        HEIGHT - MARGIN,
        fnum(y0)
    );
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{}</text>",
        MARGIN - 4.0,
        MARGIN + 4.0,
        fnum(y1)
    );

    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let mut path = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let cmd = if j == 0 { 'M' } else { 'L' };
            let _ = write!(path, "{cmd}{},{} ", fnum(sx(x)), fnum(sy(y)));
        }
        let dash = if s.dashed {
            " stroke-dasharray=\"6,4\""
        } else {
            ""
        };
        let _ = write!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{}/>",
            path.trim_end(),
            s.color,
            dash
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{}\">{}</text>",
            WIDTH - MARGIN + 4.0 - 120.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            s.color,
            escape(&s.label)
        );
    }
    out.push_str("</svg>");
    out
}

/// Heatmap of a dense grid; `values[r][c]`, darker is larger.
pub fn heatmap(title: &str, values: &[Vec<f64>]) -> String {
    let rows = values.len().max(1);
    let cols = values.first().map_or(1, Vec::len).max(1);
    let vmax = values
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let cell_w = (WIDTH - 2.0 * MARGIN) / cols as f64;
    let cell_h = (HEIGHT - 2.0 * MARGIN) / rows as f64;

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = write!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    );
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let frac = (v / vmax).clamp(0.0, 1.0);
            let shade = (255.0 - frac * 215.0).round() as u8;
            let _ = write!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({shade},{shade},255)\"/>",
                fnum(MARGIN + c as f64 * cell_w),
                fnum(MARGIN + r as f64 * cell_h),
                fnum(cell_w),
                fnum(cell_h)
            );
        }
    }
    out.push_str("</svg>");
    out
}

fn span(vs: &[f64]) -> (f64, f64) {
    if vs.is_empty() {
        return (0.0, 1.0);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vs {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        hi = lo + 1.0;
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let series = [LineSeries {
            label: "norm".into(),
            points: vec![(1.0, 2.0), (2.0, 2.5), (3.0, 10.0)],
            color: "blue".into(),
            dashed: false,
        }];
        let a = line_plot("t", "x", "y", &series);
        let b = line_plot("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
    }

    #[test]
    fn heatmap_handles_all_zero_grid() {
        let svg = heatmap("z", &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        // all cells render at the minimum shade
        assert!(svg.matches("rgb(255,255,255)").count() >= 4);
    }
}
