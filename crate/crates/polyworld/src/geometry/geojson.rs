//! GeoJSON export/import of polygon sets.
//!
//! One `Feature` per polygon, geometry type `Polygon` with a single ring,
//! coordinates in pixel units (normalized coordinates scaled by the image
//! extent), CRS-free. A per-feature `confidence` property is written when
//! available and defaults to 1.0 on import.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, PolygonSet};

/// Serialize a polygon set as a GeoJSON `FeatureCollection` string.
///
/// `confidences`, when given, must have one entry per polygon.
pub fn export_geojson(
    polys: &PolygonSet,
    confidences: Option<&[f64]>,
    width: usize,
    height: usize,
) -> Result<String> {
    if let Some(c) = confidences {
        if c.len() != polys.len() {
            return Err(Error::contract(
                "confidence count must match polygon count",
            ));
        }
    }
    let features: Vec<Value> = polys
        .polygons()
        .iter()
        .enumerate()
        .map(|(k, poly)| {
            let mut ring: Vec<Value> = poly
                .vertices()
                .iter()
                .map(|p| json!([p.x * width as f64, p.y * height as f64]))
                .collect();
            // GeoJSON rings are explicitly closed.
            ring.push(ring[0].clone());
            let mut properties = serde_json::Map::new();
            if let Some(c) = confidences {
                properties.insert("confidence".into(), json!(c[k]));
            }
            json!({
                "type": "Feature",
                "properties": Value::Object(properties),
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [ring],
                },
            })
        })
        .collect();
    let doc = json!({
        "type": "FeatureCollection",
        "features": features,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parse a GeoJSON `FeatureCollection` produced by [`export_geojson`].
///
/// Returns the polygons (normalized back by the image extent) and one
/// confidence per polygon.
pub fn import_geojson(text: &str, width: usize, height: usize) -> Result<(PolygonSet, Vec<f64>)> {
    let doc: Value = serde_json::from_str(text)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("missing 'features' array".into()))?;
    let mut polygons = Vec::new();
    let mut confidences = Vec::new();
    for (i, feature) in features.iter().enumerate() {
        let geom = feature
            .get("geometry")
            .ok_or_else(|| Error::Parse(format!("feature {i}: missing geometry")))?;
        let gtype = geom.get("type").and_then(Value::as_str).unwrap_or("");
        if gtype != "Polygon" {
            return Err(Error::Parse(format!(
                "feature {i}: unsupported geometry type '{gtype}'"
            )));
        }
        let rings = geom
            .get("coordinates")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse(format!("feature {i}: missing coordinates")))?;
        if rings.len() != 1 {
            return Err(Error::Parse(format!(
                "feature {i}: expected a single ring, got {}",
                rings.len()
            )));
        }
        let ring = rings[0]
            .as_array()
            .ok_or_else(|| Error::Parse(format!("feature {i}: ring is not an array")))?;
        let mut pts = Vec::with_capacity(ring.len());
        for coord in ring {
            let xy = coord
                .as_array()
                .filter(|a| a.len() >= 2)
                .ok_or_else(|| Error::Parse(format!("feature {i}: bad coordinate")))?;
            let x = xy[0].as_f64().unwrap_or(f64::NAN) / width as f64;
            let y = xy[1].as_f64().unwrap_or(f64::NAN) / height as f64;
            pts.push(Point::new(x, y));
        }
        // Strip the closing vertex.
        if pts.len() >= 2 && pts[0] == *pts.last().unwrap() {
            pts.pop();
        }
        polygons.push(Polygon::new(pts)?);
        let conf = feature
            .get("properties")
            .and_then(|p| p.get("confidence"))
            .and_then(Value::as_f64)
            .unwrap_or(1.0);
        confidences.push(conf);
    }
    Ok((PolygonSet::new(polygons), confidences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless_at_power_of_two_extent() {
        // Scaling by a power of two is exact in binary floating point.
        let poly = Polygon::new(vec![
            Point::new(0.1, 0.2),
            Point::new(0.73, 0.21),
            Point::new(0.55, 0.91),
        ])
        .unwrap();
        let set = PolygonSet::new(vec![poly]);
        let text = export_geojson(&set, Some(&[0.625]), 64, 64).unwrap();
        let (back, conf) = import_geojson(&text, 64, 64).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.polygons()[0].vertices(), set.polygons()[0].vertices());
        assert_eq!(conf, vec![0.625]);
    }

    #[test]
    fn import_rejects_multi_ring() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[
                [[0,0],[10,0],[10,10],[0,0]],
                [[2,2],[3,2],[3,3],[2,2]]
            ]}}]}"#;
        assert!(import_geojson(text, 64, 64).is_err());
    }

    #[test]
    fn missing_confidence_defaults_to_one() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[
                [[0,0],[10,0],[10,10],[0,0]]
            ]}}]}"#;
        let (set, conf) = import_geojson(text, 64, 64).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(conf, vec![1.0]);
    }
}
