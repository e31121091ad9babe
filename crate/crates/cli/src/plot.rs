//! Completeness curves as a standalone SVG line chart.

use std::fmt::Write as _;

use mvs_core::eval::CompletenessCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Chart with one polyline per `(label, curve)`; x is the threshold, y the
/// fraction of pixels in [0, 1]. Output depends only on the inputs.
pub fn completeness_svg(curves: &[(String, CompletenessCurve)], title: &str) -> String {
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| c.thresholds.iter().copied())
        .filter(|t| t.is_finite())
        .fold(0.0f64, f64::max);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |t: f64| LEFT + plot_w * (t / x_max).clamp(0.0, 1.0);
    let py = |f: f64| TOP + plot_h * (1.0 - f.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, LEFT + plot_w / 2.0, escape(title));
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let t = x_max * f;
        let (gx, gy) = (px(t), py(f));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#e0e0e0"/>"##, LEFT + plot_w);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{f:.1}</text>"#, LEFT - 6.0, gy + 4.0);
        let _ = writeln!(s, r#"<text x="{gx:.2}" y="{:.2}" text-anchor="middle">{t:.3}</text>"#, TOP + plot_h + 16.0);
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">threshold</text>"#, LEFT + plot_w / 2.0, HEIGHT - 18.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">fraction</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = curve
            .thresholds
            .iter()
            .zip(&curve.fractions)
            .map(|(&t, &f)| format!("{:.2},{:.2}", px(t), py(f)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scale: f64) -> CompletenessCurve {
        CompletenessCurve { thresholds: vec![0.1, 0.2, 0.3], fractions: vec![0.2 * scale, 0.5 * scale, 0.9 * scale] }
    }

    #[test]
    fn one_polyline_per_curve_and_labeled_axes() {
        let curves = vec![("a".to_string(), curve(1.0)), ("b<c>".to_string(), curve(0.5))];
        let svg = completeness_svg(&curves, "errors");
        assert_eq!(svg.matches("class=\"curve\"").count(), 2);
        assert!(svg.contains(">threshold</text>") && svg.contains(">fraction</text>"));
        assert!(svg.contains("b&lt;c&gt;"));
        assert_eq!(svg, completeness_svg(&curves, "errors"));
    }
}
