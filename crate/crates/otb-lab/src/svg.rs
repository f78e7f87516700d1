//! Native SVG emission: plain line and bar charts, no external renderer.
//! Coordinates are formatted with fixed precision so output bytes are
//! stable across runs.

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22",
];

fn fmt(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt_tick(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else if x.abs() >= 0.01 && x.abs() < 10_000.0 {
        format!("{x:.4}")
    } else {
        format!("{x:.3e}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-300);
        MARGIN_L + (v - self.x_min) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-300);
        HEIGHT - MARGIN_B - (v - self.y_min) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" ",
            "text-anchor=\"middle\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        title = title
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        x_label
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        y_label
    ));
    for (v, label) in [
        (frame.y_min, fmt_tick(frame.y_min)),
        ((frame.y_min + frame.y_max) / 2.0, fmt_tick((frame.y_min + frame.y_max) / 2.0)),
        (frame.y_max, fmt_tick(frame.y_max)),
    ] {
        let y = frame.y(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            fmt(x0),
            fmt(y),
            fmt(x1),
            fmt(y),
            fmt(x0 - 6.0),
            fmt(y + 3.0),
            label
        ));
    }
    s
}

fn legend(names: &[String]) -> String {
    let mut s = String::new();
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_T + 16.0 * i as f64;
        let x = WIDTH - MARGIN_R + 12.0;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            fmt(x),
            fmt(y - 9.0),
            PALETTE[i % PALETTE.len()],
            fmt(x + 14.0),
            fmt(y),
            name
        ));
    }
    s
}

/// Multi-series line chart over (x, y) points.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let points = series.iter().flat_map(|(_, pts)| pts.iter());
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (x, y) in points {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let frame = Frame {
        x_min,
        x_max,
        y_min,
        y_max,
    };
    let mut s = header(title);
    s.push_str(&axes(&frame, x_label, y_label));
    for (i, (_, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{},{}", fmt(frame.x(*x)), fmt(frame.y(*y))))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
            PALETTE[i % PALETTE.len()]
        ));
    }
    s.push_str(&legend(
        &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
    ));
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    labels: &[String],
    series: &[(String, Vec<f64>)],
) -> String {
    let values = series.iter().flat_map(|(_, v)| v.iter().cloned());
    let mut y_max = values.fold(0.0f64, f64::max);
    if y_max <= 0.0 {
        y_max = 1.0;
    }
    let frame = Frame {
        x_min: 0.0,
        x_max: labels.len() as f64,
        y_min: 0.0,
        y_max,
    };
    let mut s = header(title);
    s.push_str(&axes(&frame, "", y_label));
    let group_width = (WIDTH - MARGIN_L - MARGIN_R) / labels.len().max(1) as f64;
    let bar_width = group_width * 0.8 / series.len().max(1) as f64;
    for (gi, label) in labels.iter().enumerate() {
        let gx = MARGIN_L + gi as f64 * group_width;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0).max(0.0);
            let y = frame.y(v);
            let h = (HEIGHT - MARGIN_B) - y;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                fmt(gx + group_width * 0.1 + si as f64 * bar_width),
                fmt(y),
                fmt(bar_width),
                fmt(h),
                PALETTE[si % PALETTE.len()]
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            fmt(gx + group_width / 2.0),
            fmt(HEIGHT - MARGIN_B + 14.0),
            label
        ));
    }
    s.push_str(&legend(
        &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
    ));
    s.push_str("</svg>\n");
    s
}
