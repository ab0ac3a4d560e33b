//! SVG overlay output: the source raster embedded as a data URI with the
//! extracted polygons drawn on top.

use base64::Engine;

use crate::geometry::PolygonSet;

pub fn polygon_overlay_svg(
    png_bytes: &[u8],
    width: usize,
    height: usize,
    polys: &PolygonSet,
    confidences: &[f64],
) -> String {
    let b64 = base64::engine::general_purpose::STANDARD.encode(png_bytes);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "  <image href=\"data:image/png;base64,{b64}\" x=\"0\" y=\"0\" \
         width=\"{width}\" height=\"{height}\" image-rendering=\"pixelated\"/>\n"
    ));
    for (k, poly) in polys.polygons().iter().enumerate() {
        let pts: Vec<String> = poly
            .vertices()
            .iter()
            .map(|p| format!("{:.2},{:.2}", p.x * width as f64, p.y * height as f64))
            .collect();
        let conf = confidences.get(k).copied().unwrap_or(1.0);
        svg.push_str(&format!(
            "  <polygon points=\"{}\" fill=\"none\" stroke=\"#00eaff\" \
             stroke-width=\"0.6\" opacity=\"{:.3}\"/>\n",
            pts.join(" "),
            0.35 + 0.65 * conf.clamp(0.0, 1.0),
        ));
        for p in poly.vertices() {
            svg.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"0.9\" fill=\"#ff2ea6\"/>\n",
                p.x * width as f64,
                p.y * height as f64
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, Polygon};

    #[test]
    fn svg_contains_image_and_polygons() {
        let poly = Polygon::new(vec![
            Point::new(0.1, 0.1),
            Point::new(0.9, 0.1),
            Point::new(0.5, 0.9),
        ])
        .unwrap();
        let set = PolygonSet::new(vec![poly]);
        let svg = polygon_overlay_svg(b"fakepng", 64, 64, &set, &[0.8]);
        assert!(svg.contains("<image"));
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("base64"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
