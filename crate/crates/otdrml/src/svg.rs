//! Dependency-free SVG line charts for the report figures.
//!
//! Output is a self-contained `<svg>` document with axes, tick labels, one
//! polyline per series, and a legend. Coordinates are formatted with fixed
//! precision so chart bytes are reproducible across runs.

/// One plotted curve. Points with non-finite y are skipped, splitting the
/// polyline at the gap.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: u32,
    pub height: u32,
    /// Fixed y range; autoscaled from the data when absent.
    pub y_range: Option<(f64, f64)>,
}

impl Default for ChartSpec {
    fn default() -> Self {
        ChartSpec {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            width: 640,
            height: 420,
            y_range: None,
        }
    }
}

const COLORS: [&str; 6] = ["#1f6fb2", "#d1495b", "#3a7d44", "#8a5a00", "#6a4c93", "#2e2e38"];
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw_step = (hi - lo) / target as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= hi + 1e-9 * step {
        // Snap values like 5.000000000001 for clean labels.
        ticks.push((t / step).round() * step);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a line chart to an SVG document string.
pub fn line_chart(spec: &ChartSpec, series: &[Series]) -> String {
    let w = spec.width as f64;
    let h = spec.height as f64;
    let plot_w = w - MARGIN_L - MARGIN_R;
    let plot_h = h - MARGIN_T - MARGIN_B;

    let finite_points = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in finite_points() {
        x_lo = x_lo.min(*x);
        x_hi = x_hi.max(*x);
        y_lo = y_lo.min(*y);
        y_hi = y_hi.max(*y);
    }
    if !x_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
    }
    if let Some((lo, hi)) = spec.y_range {
        y_lo = lo;
        y_hi = hi;
    } else if !y_lo.is_finite() {
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    // Headroom when autoscaled.
    if spec.y_range.is_none() {
        let pad = 0.05 * (y_hi - y_lo);
        y_lo -= pad;
        y_hi += pad;
    }

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">\n",
        spec.width, spec.height, spec.width, spec.height
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n",
        spec.width, spec.height
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        escape(&spec.title)
    ));

    // Gridlines and ticks.
    for t in nice_ticks(x_lo, x_hi, 6) {
        let x = px(t);
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ddd\"/>\n",
            MARGIN_T,
            MARGIN_T + plot_h
        ));
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 16.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = py(t);
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    // Axes.
    out.push_str(&format!(
        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#444\"/>\n",
        MARGIN_L, MARGIN_T
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        h - 10.0,
        escape(&spec.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(&spec.y_label)
    ));

    // Series polylines, split at non-finite points.
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, out: &mut String| {
            if run.len() >= 2 {
                out.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" \
                     points=\"{}\"/>\n",
                    run.join(" ")
                ));
            } else if run.len() == 1 {
                let xy: Vec<&str> = run[0].split(',').collect();
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"{color}\"/>\n",
                    xy[0], xy[1]
                ));
            }
            run.clear();
        };
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                run.push(format!("{:.2},{:.2}", px(x), py(y)));
            } else {
                flush(&mut run, &mut out);
            }
        }
        flush(&mut run, &mut out);
    }

    // Legend.
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let y = MARGIN_T + 8.0 + 16.0 * si as f64;
        let x = MARGIN_L + plot_w - 150.0;
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            x + 18.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x + 24.0,
            y + 4.0,
            escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    out
}
