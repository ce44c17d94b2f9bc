//! Minimal standalone SVG renderers for the report plots. No styling
//! dependencies; every plot is a self-contained XML document.

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    w: f64,
    h: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad_x = ((x_range.1 - x_range.0).abs()).max(1e-9) * 0.05;
        let pad_y = ((y_range.1 - y_range.0).abs()).max(1e-9) * 0.05;
        Self {
            w: 640.0,
            h: 400.0,
            margin: 48.0,
            x_range: (x_range.0 - pad_x, x_range.1 + pad_x),
            y_range: (y_range.0 - pad_y, y_range.1 + pad_y),
        }
    }
    fn x(&self, v: f64) -> f64 {
        let f = (v - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        self.margin + f * (self.w - 2.0 * self.margin)
    }
    fn y(&self, v: f64) -> f64 {
        let f = (v - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        self.h - self.margin - f * (self.h - 2.0 * self.margin)
    }
}

fn header(w: f64, h: f64, title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        esc(title)
    )
}

fn polyline(points: &[(f64, f64)], color: &str, width: f64) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
        pts.join(" ")
    )
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Truth dots, forecast mean line, shaded confidence band.
pub fn forecast_band_svg(
    title: &str,
    weeks: &[u32],
    truth: &[f64],
    mean: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> String {
    let xr = range_of(weeks.iter().map(|&w| w as f64));
    let yr = range_of(
        truth
            .iter()
            .chain(lower)
            .chain(upper)
            .copied(),
    );
    let f = Frame::new(xr, yr);
    let mut svg = header(f.w, f.h, title);
    // band polygon: upper forward, lower backward
    let mut band = String::from("<polygon points=\"");
    for (i, &w) in weeks.iter().enumerate() {
        band.push_str(&format!("{},{} ", fmt(f.x(w as f64)), fmt(f.y(upper[i]))));
    }
    for (i, &w) in weeks.iter().enumerate().rev() {
        band.push_str(&format!("{},{} ", fmt(f.x(w as f64)), fmt(f.y(lower[i]))));
    }
    band.push_str("\" fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\"/>\n");
    svg.push_str(&band);
    let mean_pts: Vec<(f64, f64)> = weeks
        .iter()
        .enumerate()
        .map(|(i, &w)| (f.x(w as f64), f.y(mean[i])))
        .collect();
    svg.push_str(&polyline(&mean_pts, "#1f77b4", 1.8));
    for (i, &w) in weeks.iter().enumerate() {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.2\" fill=\"#d62728\"/>\n",
            fmt(f.x(w as f64)),
            fmt(f.y(truth[i]))
        ));
    }
    svg.push_str(&axes(&f, "week", "capacity (Ah)"));
    svg.push_str("</svg>\n");
    svg
}

fn axes(f: &Frame, x_label: &str, y_label: &str) -> String {
    format!(
        "<line x1=\"{m}\" y1=\"{hb}\" x2=\"{wr}\" y2=\"{hb}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{hb}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{xl}</text>\n\
         <text x=\"14\" y=\"{cy}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{yl}</text>\n\
         <text x=\"{m}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"10\">{x0}</text>\n\
         <text x=\"{wr}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{x1}</text>\n\
         <text x=\"{m2}\" y=\"{hb}\" font-family=\"sans-serif\" font-size=\"10\">{y0}</text>\n\
         <text x=\"{m2}\" y=\"{mt}\" font-family=\"sans-serif\" font-size=\"10\">{y1}</text>\n",
        m = fmt(f.margin),
        m2 = fmt(f.margin * 0.25),
        hb = fmt(f.h - f.margin),
        wr = fmt(f.w - f.margin),
        cx = fmt(f.w / 2.0),
        cy = fmt(f.h / 2.0),
        ly = fmt(f.h - f.margin * 0.25),
        mt = fmt(f.margin),
        xl = esc(x_label),
        yl = esc(y_label),
        x0 = fmt(f.x_range.0),
        x1 = fmt(f.x_range.1),
        y0 = fmt(f.y_range.0),
        y1 = fmt(f.y_range.1),
    )
}

/// Predicted vs true scatter with the diagonal and an error histogram inset.
pub fn scatter_svg(title: &str, y_true: &[f64], y_pred: &[f64]) -> String {
    let all = range_of(y_true.iter().chain(y_pred).copied());
    let f = Frame::new(all, all);
    let mut svg = header(f.w, f.h, title);
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n",
        fmt(f.x(all.0)),
        fmt(f.y(all.0)),
        fmt(f.x(all.1)),
        fmt(f.y(all.1))
    ));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n",
            fmt(f.x(t)),
            fmt(f.y(p))
        ));
    }
    // error histogram inset, top-left
    let errors: Vec<f64> = y_true.iter().zip(y_pred).map(|(t, p)| p - t).collect();
    if !errors.is_empty() {
        let er = range_of(errors.iter().copied());
        let bins = 15usize;
        let mut counts = vec![0usize; bins];
        for &e in &errors {
            let fbin = ((e - er.0) / (er.1 - er.0).max(1e-12) * bins as f64).floor();
            let b = (fbin as isize).clamp(0, bins as isize - 1) as usize;
            counts[b] += 1;
        }
        let peak = *counts.iter().max().unwrap() as f64;
        let (ix, iy, iw, ih) = (f.margin + 8.0, f.margin + 8.0, 150.0, 80.0);
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{iw}\" height=\"{ih}\" fill=\"white\" stroke=\"#aaa\"/>\n",
            fmt(ix),
            fmt(iy)
        ));
        let bw = iw / bins as f64;
        for (b, &c) in counts.iter().enumerate() {
            let bh = ih * (c as f64 / peak);
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#ff7f0e\" fill-opacity=\"0.8\"/>\n",
                fmt(ix + b as f64 * bw),
                fmt(iy + ih - bh),
                fmt(bw.max(1.0) - 0.5),
                fmt(bh)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"9\">error</text>\n",
            fmt(ix + 2.0),
            fmt(iy + ih + 10.0)
        ));
    }
    svg.push_str(&axes(&f, "true (Ah)", "predicted (Ah)"));
    svg.push_str("</svg>\n");
    svg
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// One box (median, quartiles, whiskers at 5/95) per labelled group.
pub fn error_box_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let yr = range_of(groups.iter().flat_map(|(_, v)| v.iter().copied()));
    let f = Frame::new((0.0, groups.len() as f64), yr);
    let mut svg = header(f.w, f.h, title);
    for (i, (label, values)) in groups.iter().enumerate() {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let center = f.x(i as f64 + 0.5);
        let half = (f.x(0.8) - f.x(0.2)) / 2.0;
        let (q05, q25, q50, q75, q95) = (
            quantile(&sorted, 0.05),
            quantile(&sorted, 0.25),
            quantile(&sorted, 0.50),
            quantile(&sorted, 0.75),
            quantile(&sorted, 0.95),
        );
        svg.push_str(&format!(
            "<line x1=\"{c}\" y1=\"{}\" x2=\"{c}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(f.y(q05)),
            fmt(f.y(q95)),
            c = fmt(center)
        ));
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#c6dbef\" stroke=\"black\"/>\n",
            fmt(center - half),
            fmt(f.y(q75)),
            fmt(2.0 * half),
            fmt((f.y(q25) - f.y(q75)).max(0.5))
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{m}\" x2=\"{}\" y2=\"{m}\" stroke=\"#d62728\" stroke-width=\"1.6\"/>\n",
            fmt(center - half),
            fmt(center + half),
            m = fmt(f.y(q50))
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            fmt(center),
            fmt(f.h - f.margin * 0.4),
            esc(label)
        ));
    }
    svg.push_str(&axes(&f, "", "absolute error (Ah)"));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Tiny well-formedness check: every opened tag closes, quotes balance.
    pub(crate) fn assert_well_formed(svg: &str) {
        assert!(svg.starts_with("<?xml"));
        assert_eq!(svg.matches('"').count() % 2, 0, "unbalanced quotes");
        let mut stack: Vec<String> = Vec::new();
        let mut rest = svg;
        while let Some(open) = rest.find('<') {
            rest = &rest[open + 1..];
            let end = rest.find('>').expect("unterminated tag");
            let tag = &rest[..end];
            rest = &rest[end + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("stray </{name}>"));
                assert_eq!(top, name, "mismatched close tag");
            } else if !tag.ends_with('/') {
                let name: String = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn all_three_plots_are_well_formed_xml() {
        let weeks: Vec<u32> = (0..10).collect();
        let truth: Vec<f64> = weeks.iter().map(|&w| 100.0 - w as f64 * 0.1).collect();
        let mean: Vec<f64> = truth.iter().map(|v| v + 0.05).collect();
        let lower: Vec<f64> = mean.iter().map(|v| v - 0.5).collect();
        let upper: Vec<f64> = mean.iter().map(|v| v + 0.5).collect();
        assert_well_formed(&forecast_band_svg("band", &weeks, &truth, &mean, &lower, &upper));
        assert_well_formed(&scatter_svg("scatter <test> & co", &truth, &mean));
        assert_well_formed(&error_box_svg(
            "boxes",
            &[("full".into(), vec![0.1, 0.4, 0.2]), ("backbone".into(), vec![0.3, 0.7, 0.5])],
        ));
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        assert_well_formed(&scatter_svg("empty", &[], &[]));
        assert_well_formed(&error_box_svg("one", &[("a".into(), vec![1.0])]));
        assert_well_formed(&forecast_band_svg(
            "flat",
            &[3],
            &[100.0],
            &[100.0],
            &[99.0],
            &[101.0],
        ));
    }
}
