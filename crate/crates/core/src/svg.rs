//! Small hand-rolled SVG charts. Every chart embeds its source table in a
//! `<desc>` element so results stay inspectable without a renderer.

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn x_to_px(x: f64, lo: f64, hi: f64) -> f64 {
    MARGIN + (x - lo) / (hi - lo) * (W - 2.0 * MARGIN)
}

fn y_to_px(y: f64, lo: f64, hi: f64) -> f64 {
    H - MARGIN - (y - lo) / (hi - lo) * (H - 2.0 * MARGIN)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, csv: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <desc>{}</desc>\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        escape(csv),
        W / 2.0,
        escape(title)
    )
}

fn axes(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64, x_label: &str, y_label: &str) -> String {
    let mut s = format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    for i in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
            x_to_px(fx, x_lo, x_hi),
            H - MARGIN + 16.0,
            fx
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
            MARGIN - 6.0,
            y_to_px(fy, y_lo, y_hi) + 4.0,
            fy
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        W / 2.0,
        H - 10.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    ));
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Multi-series line chart; each series is (label, points).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let mut csv = format!("series,{x_label},{y_label}\n");
    for (name, pts) in series {
        for (x, y) in pts {
            csv.push_str(&format!("{name},{x},{y}\n"));
        }
    }
    let (x_lo, x_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|&(x, _)| x)));
    let (y_lo, y_hi) = axis_bounds(series.iter().flat_map(|(_, p)| p.iter().map(|&(_, y)| y)));

    let mut svg = header(title, &csv);
    svg.push_str(&axes(x_lo, x_hi, y_lo, y_hi, x_label, y_label));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", x_to_px(x, x_lo, x_hi), y_to_px(y, y_lo, y_hi)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for &(x, y) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                x_to_px(x, x_lo, x_hi),
                y_to_px(y, y_lo, y_hi)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            W - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter plot of paired values, with an identity guide line.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut csv = format!("{x_label},{y_label}\n");
    for (x, y) in points {
        csv.push_str(&format!("{x},{y}\n"));
    }
    let (x_lo, x_hi) = axis_bounds(points.iter().map(|&(x, _)| x));
    let (y_lo, y_hi) = axis_bounds(points.iter().map(|&(_, y)| y));
    let lo = x_lo.min(y_lo);
    let hi = x_hi.max(y_hi);

    let mut svg = header(title, &csv);
    svg.push_str(&axes(lo, hi, lo, hi, x_label, y_label));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#aaaaaa\" stroke-dasharray=\"4 3\"/>\n",
        x_to_px(lo, lo, hi),
        y_to_px(lo, lo, hi),
        x_to_px(hi, lo, hi),
        y_to_px(hi, lo, hi)
    ));
    for &(x, y) in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n",
            x_to_px(x, lo, hi),
            y_to_px(y, lo, hi)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grayscale heatmap of a matrix (darker = larger).
pub fn heatmap(title: &str, matrix: &ndarray::Array2<f64>) -> String {
    let mut csv = String::new();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let max = matrix.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs())).max(1e-12);
    let (rows, cols) = matrix.dim();
    let cell_w = (W - 2.0 * MARGIN) / cols as f64;
    let cell_h = (H - 2.0 * MARGIN) / rows as f64;
    let mut svg = header(title, &csv);
    for r in 0..rows {
        for c in 0..cols {
            let v = (matrix[[r, c]].abs() / max).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)) as u8;
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({shade},{shade},{shade})\"/>\n",
                MARGIN + c as f64 * cell_w,
                MARGIN + r as f64 * cell_h,
                cell_w.max(0.5),
                cell_h.max(0.5)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// ROC curve points from scores and labels (threshold sweep).
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos));
    }
    points
}

/// Precision-recall curve points (recall ascending).
pub fn pr_points(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut points = Vec::new();
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((tp / pos, tp / (tp + fp)));
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn charts_are_valid_and_embed_data() {
        let svg = line_chart(
            "err",
            "n",
            "e",
            &[("a".into(), vec![(1.0, 0.5), (2.0, 0.25)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("<desc>"));
        assert!(svg.contains("a,1,0.5"));

        let sc = scatter("s", "x", "y", &[(0.1, 0.2), (0.4, 0.35)]);
        assert!(sc.contains("0.1,0.2"));

        let hm = heatmap("h", &array![[0.0, 1.0], [0.5, 0.25]]);
        assert!(hm.contains("<rect"));
        assert!(hm.contains("0.5,0.25"));
    }

    #[test]
    fn roc_pr_endpoints() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [1, 0, 1, 0];
        let roc = roc_points(&scores, &labels);
        assert_eq!(*roc.first().unwrap(), (0.0, 0.0));
        assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        let pr = pr_points(&scores, &labels);
        assert_eq!(pr.last().unwrap().0, 1.0);
    }
}
