use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Class colors, assigned by class id modulo 10 (the "tab10" qualitative palette).
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const PLOT: f64 = 600.0;
const LEGEND_W: f64 = 110.0;
const RADIUS: f64 = 1.5;

/// Axis range padded by 5% of its span on both sides (a degenerate span is
/// widened to 1 first).
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// Standalone SVG with one circle per sample colored by class and a legend.
/// Points are `<circle class="point" ...>`; legend rows are `<g class="legend-entry">`.
pub fn scatter_svg<T: Scalar>(features: &Tensor<T>, labels: &[usize]) -> Result<String> {
    if features.ndim() != 2 || features.row_len() != 2 {
        bail!(Dimension, "scatter plots need 2-D features, got shape {:?}", features.shape());
    }
    if labels.len() != features.rows() {
        bail!(Shape, "{} labels for {} points", labels.len(), features.rows());
    }
    features.ensure_finite("features")?;
    let n = features.rows();
    let (x0, x1) = padded_range((0..n).map(|i| features.at(i, 0).as_f64()));
    let (y0, y1) = padded_range((0..n).map(|i| features.at(i, 1).as_f64()));
    let sx = PLOT / (x1 - x0);
    let sy = PLOT / (y1 - y0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = PLOT + LEGEND_W,
        h = PLOT
    );
    let _ = writeln!(
        s,
        r#"<rect class="frame" x="0" y="0" width="{PLOT}" height="{PLOT}" fill="white" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<desc>x range [{x0}, {x1}], y range [{y0}, {y1}]</desc>"#);
    let _ = writeln!(s, r#"<g class="points">"#);
    for (i, &label) in labels.iter().enumerate() {
        let cx = (features.at(i, 0).as_f64() - x0) * sx;
        let cy = PLOT - (features.at(i, 1).as_f64() - y0) * sy;
        let _ = writeln!(
            s,
            r#"<circle class="point" data-label="{label}" cx="{cx:.4}" cy="{cy:.4}" r="{RADIUS}" fill="{}"/>"#,
            PALETTE[label % PALETTE.len()]
        );
    }
    s.push_str("</g>\n<g class=\"legend\">\n");
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    for (row, &c) in classes.iter().enumerate() {
        let y = 20.0 + 18.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><circle cx="{:.1}" cy="{y:.1}" r="5" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="12">{c}</text></g>"#,
            PLOT + 15.0,
            PALETTE[c % PALETTE.len()],
            PLOT + 28.0,
            y + 4.0
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn export_scatter<T: Scalar>(features: &Tensor<T>, labels: &[usize], path: &Path) -> Result<()> {
    let svg = scatter_svg(features, labels)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn attr(line: &str, name: &str) -> f64 {
        let key = format!(" {name}=\"");
        let start = line.find(&key).unwrap() + key.len();
        let end = start + line[start..].find('"').unwrap();
        line[start..end].parse().unwrap()
    }

    #[test]
    fn single_point() {
        let f = Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let svg = scatter_svg(&f, &[3]).unwrap();
        assert_eq!(svg.matches("class=\"point\"").count(), 1);
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 1);
        assert!(svg.contains(PALETTE[3]));
    }

    #[test]
    fn ten_classes_ten_legend_entries() {
        let mut rng = Rng::new(1);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let f = Tensor::from_fn(&[50, 2], |_| rng.normal());
        let svg = scatter_svg(&f, &labels).unwrap();
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 10);
        for c in PALETTE {
            assert!(svg.contains(c));
        }
    }

    #[test]
    fn coordinates_are_affine_in_features() {
        let mut rng = Rng::new(2);
        let f = Tensor::from_fn(&[40, 2], |i| if i % 2 == 0 { 3.0 * rng.normal() } else { rng.normal() - 7.0 });
        let svg = scatter_svg(&f, &vec![0; 40]).unwrap();
        let pts: Vec<(f64, f64)> = svg
            .lines()
            .filter(|l| l.contains("class=\"point\""))
            .map(|l| (attr(l, "cx"), attr(l, "cy")))
            .collect();
        assert_eq!(pts.len(), 40);
        // Fit the map from the first two distinct points, check all others.
        let (a, b) = (0, 1);
        let ax = (pts[b].0 - pts[a].0) / (f.at(b, 0) - f.at(a, 0));
        let ay = (pts[b].1 - pts[a].1) / (f.at(b, 1) - f.at(a, 1));
        assert!(ax > 0.0 && ay < 0.0);
        for (i, p) in pts.iter().enumerate() {
            assert!((pts[a].0 + ax * (f.at(i, 0) - f.at(a, 0)) - p.0).abs() < 1e-2);
            assert!((pts[a].1 + ay * (f.at(i, 1) - f.at(a, 1)) - p.1).abs() < 1e-2);
            // 5% margin keeps every point strictly inside the frame.
            assert!(p.0 >= 0.05 * PLOT / 1.1 - 1e-3 && p.0 <= PLOT - 0.05 * PLOT / 1.1 + 1e-3);
        }
    }

    #[test]
    fn rejects_other_dimensions() {
        let f = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(scatter_svg(&f, &[0, 1, 2]), Err(crate::Error::Dimension(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(export_scatter(&f, &[0, 1, 2], &dir.path().join("x.svg")).is_err());
        let ok = Tensor::<f64>::zeros(&[2, 2]);
        export_scatter(&ok, &[0, 1], &dir.path().join("y.svg")).unwrap();
    }
}
