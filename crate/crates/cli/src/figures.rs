//! Static SVG figures: per-metric boxplots and a relative-gain dot plot.

use sctforge::stats::ComparisonReport;

fn quartiles(values: &[f64]) -> (f64, f64, f64, f64, f64) {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = p * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        v[lo] * (1.0 - frac) + v[hi] * frac
    };
    (v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1])
}

/// Side-by-side boxplots of one metric for the two models.
pub fn boxplot_svg(metric: &str, single: &[f64], multi: &[f64]) -> String {
    let (w, h) = (360.0, 260.0);
    let (top, bottom, left) = (30.0, 220.0, 60.0);
    let all: Vec<f64> = single.iter().chain(multi).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if hi > lo { (hi - lo) * 0.08 } else { 0.5 };
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{metric}</text>\n",
        w / 2.0
    ));
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{yy}\" x2=\"{left}\" y2=\"{yy}\" stroke=\"black\"/>\n",
            left - 4.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.3}</text>\n",
            left - 7.0,
            yy + 4.0
        ));
    }
    for (values, cx, label, fill) in [
        (single, 150.0, "single", "#9ecae1"),
        (multi, 270.0, "multi", "#fdae6b"),
    ] {
        let (vmin, q1, med, q3, vmax) = quartiles(values);
        let bw = 50.0;
        let (x0, x1) = (cx - bw / 2.0, cx + bw / 2.0);
        s.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"black\"/>\n",
            y(vmax),
            y(q3)
        ));
        s.push_str(&format!(
            "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"black\"/>\n",
            y(q1),
            y(vmin)
        ));
        for v in [vmin, vmax] {
            s.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                cx - 12.0,
                y(v),
                cx + 12.0,
                y(v)
            ));
        }
        s.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{}\" width=\"{bw}\" height=\"{}\" \
             fill=\"{fill}\" stroke=\"black\"/>\n",
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        ));
        s.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{}\" x2=\"{x1}\" y2=\"{}\" stroke=\"black\" stroke-width=\"2\"/>\n",
            y(med),
            y(med)
        ));
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
            bottom + 16.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// One dot per metric at its relative gain, with the 95% CI as whiskers and
/// a dashed zero line.
pub fn gain_dots_svg(reports: &[ComparisonReport]) -> String {
    let row_h = 28.0;
    let (top, left, right_pad) = (36.0, 110.0, 30.0);
    let w = 480.0;
    let h = top + row_h * reports.len() as f64 + 40.0;
    let axis_bottom = top + row_h * reports.len() as f64;

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for r in reports {
        for v in [r.relative_gain_pct, r.ci_low_pct, r.ci_high_pct] {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let pad = if hi > lo { (hi - lo) * 0.1 } else { 1.0 };
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| left + (v - lo) / (hi - lo) * (w - left - right_pad);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">relative gain of multitask over single-task (%)</text>\n",
        w / 2.0
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{top}\" x2=\"{}\" y2=\"{axis_bottom}\" \
         stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
        x(0.0),
        x(0.0)
    ));
    for (i, r) in reports.iter().enumerate() {
        let cy = top + row_h * (i as f64 + 0.5);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            left - 8.0,
            cy + 4.0,
            r.metric
        ));
        if r.ci_low_pct.is_finite() && r.ci_high_pct.is_finite() {
            s.push_str(&format!(
                "<line x1=\"{}\" y1=\"{cy}\" x2=\"{}\" y2=\"{cy}\" stroke=\"black\"/>\n",
                x(r.ci_low_pct),
                x(r.ci_high_pct)
            ));
        }
        if r.relative_gain_pct.is_finite() {
            s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{cy}\" r=\"4\" fill=\"#d7301f\"/>\n",
                x(r.relative_gain_pct)
            ));
        }
    }
    for v in [lo, 0.0, hi] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.1}</text>\n",
            x(v),
            axis_bottom + 18.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
