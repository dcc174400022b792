//! Minimal deterministic SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 300.0;
const LEFT: f64 = 50.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == r.trunc() {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, y_max: f64, y_label: &str) {
    let (x0, y0, x1) = (LEFT, H - BOTTOM, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - TOP) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, num(y + 4.0), num(v));
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        num((TOP + y0) / 2.0),
        num((TOP + y0) / 2.0),
        escape(y_label)
    );
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        1.0
    } else {
        v * 1.1
    }
}

const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

/// Target and predicted histograms as side-by-side bars, labelled with the
/// bin edges.
pub fn histogram_overlay(title: &str, edges: &[f64], target: &[f64], predicted: &[f64]) -> String {
    histogram_bars(title, edges, &[("target", target), ("predicted", predicted)])
}

/// One bar group per bin with one bar per named series.
pub fn histogram_bars(title: &str, edges: &[f64], series: &[(&str, &[f64])]) -> String {
    let bins = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let y_max = nice_max(series.iter().flat_map(|(_, v)| v.iter()).cloned().fold(0.0, f64::max));
    let mut s = header(title);
    axes(&mut s, y_max, "objects");
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - BOTTOM - TOP;
    let slot = plot_w / bins.max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (k, (_, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (i, &v) in values.iter().enumerate() {
            let h = plot_h * v.max(0.0) / y_max;
            let x = LEFT + slot * i as f64 + slot * 0.1 + bar * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}"/>"#,
                num(x),
                num(H - BOTTOM - h),
                num(bar),
                num(h)
            );
        }
    }
    for (i, e) in edges.iter().enumerate() {
        let x = LEFT + slot * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, num(x), num(H - BOTTOM + 14.0), num(*e));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">object area (px)</text>"#, num(W / 2.0), num(H - 12.0));
    let names: Vec<(&str, &str)> = series.iter().enumerate().map(|(k, (n, _))| (*n, COLORS[k % COLORS.len()])).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, items: &[(&str, &str)]) {
    for (i, (name, color)) in items.iter().enumerate() {
        let y = TOP + 4.0 + 14.0 * i as f64;
        let x = W - RIGHT - 90.0;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, num(x), num(y));
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, num(x + 14.0), num(y + 9.0), escape(name));
    }
}

/// One polyline over labelled x positions.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64]) -> String {
    let y_max = nice_max(ys.iter().cloned().fold(0.0, f64::max));
    let (x_min, x_max) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let mut s = header(title);
    axes(&mut s, y_max, y_label);
    let plot_w = W - LEFT - RIGHT - 20.0;
    let plot_h = H - BOTTOM - TOP;
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (LEFT + 10.0 + plot_w * (x - x_min) / span, H - BOTTOM - plot_h * y.max(0.0) / y_max))
        .collect();
    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{},{}", num(*x), num(*y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, path.join(" "), COLORS[0]);
    for ((x, y), xv) in pts.iter().zip(xs) {
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="3" fill="{}"/>"#, num(*x), num(*y), COLORS[0]);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, num(*x), num(H - BOTTOM + 14.0), num(*xv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, num(W / 2.0), num(H - 12.0), escape(x_label));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_deterministic_and_balanced() {
        let a = histogram_overlay("img <1>", &[0.0, 48.0, 96.0], &[2.0, 1.0], &[1.5, 0.5]);
        let b = histogram_overlay("img <1>", &[0.0, 48.0, 96.0], &[2.0, 1.0], &[1.5, 0.5]);
        assert_eq!(a, b);
        assert!(a.contains("img &lt;1&gt;"));
        assert_eq!(a.matches("<svg").count(), a.matches("</svg>").count());
        let l = line_chart("mae", "fraction", "MAE", &[0.25, 1.0], &[3.0, 2.0]);
        assert!(l.contains("<polyline"));
        let one = histogram_bars("p", &[0.0, 48.0, 96.0], &[("predicted", &[1.0, 2.0])]);
        assert_eq!(one.matches("<rect").count(), 1 + 2 + 1);
    }

    #[test]
    fn number_formatting() {
        assert_eq!(num(3.0), "3");
        assert_eq!(num(2.345), "2.35");
        assert_eq!(num(-0.5), "-0.5");
    }
}
