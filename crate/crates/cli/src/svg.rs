//! Tiny deterministic SVG writers: grayscale heatmaps for response maps and
//! log-log polylines for convergence sweeps. No timestamps, no randomness.

use rkflow_core::linalg::Mat;

fn gray(level: f64) -> String {
    let v = (level.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{v:02x}{v:02x}{v:02x}")
}

/// Heatmap with per-map min-max normalization for display (raw values belong
/// in the CSV, not here).
pub fn heatmap(m: &Mat, cell: usize) -> String {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = m.cols() * cell;
    let h = m.rows() * cell;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let level = (m.get(i, j) - lo) / span;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"/>\n",
                j * cell,
                i * cell,
                gray(level)
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Log-log error plot: one polyline per series over (h, error) points.
pub fn loglog_plot(series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (480.0, 360.0);
    let margin = 48.0;
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (_, s) in series {
        for &(x, y) in s {
            if x > 0.0 && y > 0.0 {
                pts.push((x.log10(), y.log10()));
            }
        }
    }
    if pts.is_empty() {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\"/>\n".into();
    }
    let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let sx = |x: f64| margin + (x - min_x) / (max_x - min_x).max(1e-12) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - min_y) / (max_y - min_y).max(1e-12) * (h - 2.0 * margin);

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">log10 h</text>\n<text x=\"8\" y=\"16\" font-size=\"12\">log10 error</text>\n",
        w / 2.0 - 20.0,
        h - 12.0
    ));
    for (idx, (label, s)) in series.iter().enumerate() {
        let color = palette[idx % palette.len()];
        let path: Vec<String> = s
            .iter()
            .filter(|&&(x, y)| x > 0.0 && y > 0.0)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x.log10()), sy(y.log10())))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            w - margin + 4.0,
            20.0 + 14.0 * idx as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_is_deterministic() {
        let m = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(heatmap(&m, 8), heatmap(&m, 8));
        assert!(heatmap(&m, 8).contains("<svg"));
    }

    #[test]
    fn plot_handles_series() {
        let s = vec![("euler".to_string(), vec![(0.1, 0.2), (0.05, 0.1)])];
        let svg = loglog_plot(&s);
        assert!(svg.contains("polyline"));
        assert!(svg.contains("euler"));
    }
}
