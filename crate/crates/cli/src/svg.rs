//! Minimal self-contained SVG line charts: a fixed template filled with
//! polyline data, no charting dependency.

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub values: &'a [f64],
}

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Renders one or more equally-indexed traces as polylines with axes,
/// horizontal gridlines, and a legend.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || lo == hi {
        let mid = if lo.is_finite() { lo } else { 0.0 };
        lo = mid - 0.5;
        hi = mid + 0.5;
    }
    let pad = (hi - lo) * 0.08;
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |i: usize| {
        let denom = (n.max(2) - 1) as f64;
        MARGIN_L + plot_w * i as f64 / denom
    };
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        WIDTH / 2.0
    ));

    // Gridlines and y tick labels.
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        out.push_str(&format!(
            "  <line x1=\"{MARGIN_L}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
            WIDTH - MARGIN_R,
            y = fmt(y)
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            fmt(y_of(v) + 4.0),
            fmt(v)
        ));
    }

    // Axes.
    out.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"#333\"/>\n",
        HEIGHT - MARGIN_B
    ));
    out.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#333\"/>\n",
        WIDTH - MARGIN_R,
        y = HEIGHT - MARGIN_B
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">frame</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0
    ));
    out.push_str(&format!(
        "  <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    // Traces.
    for s in series {
        let points: Vec<String> =
            s.values.iter().enumerate().map(|(i, &v)| format!("{},{}", fmt(x_of(i)), fmt(y_of(v)))).collect();
        out.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            s.color,
            points.join(" ")
        ));
    }

    // Legend.
    for (k, s) in series.iter().enumerate() {
        let y = MARGIN_T + 8.0 + 18.0 * k as f64;
        let x = WIDTH - MARGIN_R - 150.0;
        out.push_str(&format!(
            "  <line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{}\" stroke-width=\"3\"/>\n",
            x + 24.0,
            s.color
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            x + 30.0,
            y + 4.0,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_polyline_per_series_and_is_deterministic() {
        let a = [0.1, 0.4, 0.2];
        let b = [0.3, 0.3, 0.35];
        let series = [
            Series { label: "ae", color: "#d62728", values: &a },
            Series { label: "dcs", color: "#1f77b4", values: &b },
        ];
        let one = line_chart("t", "mean luminance", &series);
        let two = line_chart("t", "mean luminance", &series);
        assert_eq!(one, two);
        assert_eq!(one.matches("<polyline").count(), 2);
        assert!(one.starts_with("<svg"));
        assert!(one.contains("mean luminance"));
    }

    #[test]
    fn flat_series_still_renders_without_degenerate_scale() {
        let a = [0.5, 0.5, 0.5];
        let svg = line_chart("flat", "y", &[Series { label: "x", color: "#000", values: &a }]);
        assert!(!svg.contains("NaN"));
    }
}
