//! Static SVG charts for `compare`.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
    s
}

/// Rounds the axis maximum up to a multiple of 10 (at least 10).
fn axis_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    ((m / 10.0).ceil() * 10.0).max(10.0)
}

fn y_axis(s: &mut String, lo: f64, hi: f64, label: &str) {
    let plot_h = H - TOP - BOTTOM;
    for k in 0..=5 {
        let v = lo + (hi - lo) * k as f64 / 5.0;
        let y = TOP + plot_h * (1.0 - k as f64 / 5.0);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.0}</text>",
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text transform=\"translate(16 {:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        TOP + plot_h / 2.0,
        escape(label)
    );
}

fn legend(s: &mut String, names: &[String]) {
    for (k, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * k as f64;
        let x = W - RIGHT + 14.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n<text x=\"{}\" y=\"{:.1}\">{}</text>",
            y - 10.0,
            COLORS[k % COLORS.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

/// One polyline per series: mean AP over the tasks seen so far, after each
/// training stage.
pub fn ap_trajectory(series: &[(String, Vec<f64>)]) -> String {
    let mut s = header("Mean AP over seen tasks");
    let stages = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(1);
    let hi = axis_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    y_axis(&mut s, 0.0, hi, "mean AP (%)");
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x_of = |j: usize| {
        if stages == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * j as f64 / (stages - 1) as f64
        }
    };
    for j in 0..stages {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">task {}</text>",
            x_of(j),
            H - BOTTOM + 18.0,
            j + 1
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">after training</text>",
        LEFT + plot_w / 2.0,
        H - 16.0
    );
    for (k, (_, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, v)| format!("{:.1},{:.1}", x_of(j), TOP + plot_h * (1.0 - v / hi)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point has two coordinates");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// One bar per configuration; missing values are drawn as an empty slot.
pub fn fr_bars(bars: &[(String, Option<f64>)]) -> String {
    let mut s = header("Forgetting rate");
    let vals: Vec<f64> = bars.iter().filter_map(|(_, v)| *v).collect();
    let lo = vals.iter().copied().fold(0.0f64, f64::min);
    let lo = if lo < 0.0 { -axis_max(std::iter::once(-lo)) } else { 0.0 };
    let hi = axis_max(vals.iter().copied());
    y_axis(&mut s, lo, hi, "FR (%)");
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let y_of = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
    let slot = plot_w / bars.len().max(1) as f64;
    for (k, (_, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * (k as f64 + 0.2);
        if let Some(v) = v {
            let (a, b) = (y_of(v.max(0.0)), y_of(v.min(0.0)));
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{a:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2}</text>",
                slot * 0.6,
                (b - a).max(0.5),
                COLORS[k % COLORS.len()],
                x + slot * 0.3,
                a - 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + slot * 0.3,
            H - BOTTOM + 18.0,
            k + 1
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        y_of(0.0),
        W - RIGHT,
        y_of(0.0)
    );
    let names: Vec<String> = bars
        .iter()
        .enumerate()
        .map(|(k, (n, _))| format!("{} {n}", k + 1))
        .collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}
