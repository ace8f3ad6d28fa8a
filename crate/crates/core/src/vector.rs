//! Vector map ingest: a GeoJSON subset for roads and building footprints.
//!
//! Supported input is an RFC 7946 FeatureCollection containing LineString
//! features (roads; the "highway" property selects the road class) and
//! Polygon features carrying a "building" property (footprints, outer ring
//! only). Everything else is skipped and counted. Coordinates are
//! `[lon, lat]` pairs in whatever planar system the companion geotransform
//! uses.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geo::GeoTransform;

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("geojson parse error: {0}")]
    ParseError(String),
    #[error("bad geometry: {0}")]
    GeometryError(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    /// Lon/lat vertices, at least 2.
    pub polyline: Vec<(f64, f64)>,
    pub road_class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    /// Outer ring, closing vertex stripped, at least 3 distinct points.
    pub ring: Vec<(f64, f64)>,
}

/// Roads and building footprints extracted from one vector document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorLayer {
    pub roads: Vec<Road>,
    pub buildings: Vec<Building>,
}

impl VectorLayer {
    pub fn is_empty(&self) -> bool {
        self.roads.is_empty() && self.buildings.is_empty()
    }
}

/// A parsed layer plus the count of features that were skipped because their
/// geometry or properties fall outside the supported subset.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub layer: VectorLayer,
    pub ignored: usize,
}

fn coords_of(value: &Value, what: &str) -> Result<Vec<(f64, f64)>, VectorError> {
    let arr = value
        .as_array()
        .ok_or_else(|| VectorError::ParseError(format!("{what}: coordinates not an array")))?;
    let mut out = Vec::with_capacity(arr.len());
    for pos in arr {
        let pair = pos
            .as_array()
            .ok_or_else(|| VectorError::ParseError(format!("{what}: position not an array")))?;
        if pair.len() < 2 {
            return Err(VectorError::ParseError(format!(
                "{what}: position with fewer than 2 coordinates"
            )));
        }
        let lon = pair[0]
            .as_f64()
            .ok_or_else(|| VectorError::ParseError(format!("{what}: non-numeric coordinate")))?;
        let lat = pair[1]
            .as_f64()
            .ok_or_else(|| VectorError::ParseError(format!("{what}: non-numeric coordinate")))?;
        out.push((lon, lat));
    }
    Ok(out)
}

/// Parse the supported GeoJSON subset.
///
/// LineStrings become roads; `road_class` is the value of the "highway"
/// property, or "residential" when the property is absent or not a string.
/// Polygons become buildings only when a "building" property is present
/// (any value); the outer ring is kept and its closing vertex dropped.
/// Features of any other geometry type, and Polygons without a "building"
/// property, are counted in [`ParseReport::ignored`].
pub fn parse_geojson(text: &str) -> Result<ParseReport, VectorError> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| VectorError::ParseError(format!("invalid json: {e}")))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| VectorError::ParseError("top level is not an object".into()))?;
    if obj.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(VectorError::ParseError(
            "top-level type is not FeatureCollection".into(),
        ));
    }
    let features = obj
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| VectorError::ParseError("missing features array".into()))?;

    let mut layer = VectorLayer::default();
    let mut ignored = 0usize;
    for (i, feat) in features.iter().enumerate() {
        let fobj = feat
            .as_object()
            .ok_or_else(|| VectorError::ParseError(format!("feature {i} is not an object")))?;
        let props = fobj.get("properties").and_then(Value::as_object);
        let geom = match fobj.get("geometry").and_then(Value::as_object) {
            Some(g) => g,
            None => {
                ignored += 1;
                continue;
            }
        };
        let gtype = geom.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geom.get("coordinates").unwrap_or(&Value::Null);
        match gtype {
            "LineString" => {
                let polyline = coords_of(coords, &format!("feature {i}"))?;
                if polyline.len() < 2 {
                    return Err(VectorError::GeometryError(format!(
                        "feature {i}: LineString with fewer than 2 points"
                    )));
                }
                let road_class = props
                    .and_then(|p| p.get("highway"))
                    .and_then(Value::as_str)
                    .unwrap_or("residential")
                    .to_string();
                layer.roads.push(Road {
                    polyline,
                    road_class,
                });
            }
            "Polygon" => {
                if props.map_or(true, |p| !p.contains_key("building")) {
                    ignored += 1;
                    continue;
                }
                let rings = coords
                    .as_array()
                    .ok_or_else(|| {
                        VectorError::ParseError(format!("feature {i}: Polygon coordinates"))
                    })?;
                let outer = rings.first().ok_or_else(|| {
                    VectorError::GeometryError(format!("feature {i}: Polygon with no rings"))
                })?;
                let mut ring = coords_of(outer, &format!("feature {i}"))?;
                if ring.len() >= 2 && ring.first() == ring.last() {
                    ring.pop();
                }
                if ring.len() < 3 {
                    return Err(VectorError::GeometryError(format!(
                        "feature {i}: ring with fewer than 3 points"
                    )));
                }
                layer.buildings.push(Building { ring });
            }
            _ => ignored += 1,
        }
    }
    Ok(ParseReport { layer, ignored })
}

/// Serialize a layer back to the same GeoJSON subset.
///
/// Inverse of [`parse_geojson`] for layers within the subset.
pub fn to_geojson(layer: &VectorLayer) -> String {
    let mut features = Vec::new();
    for road in &layer.roads {
        let coords: Vec<Value> = road.polyline.iter().map(|&(x, y)| json!([x, y])).collect();
        features.push(json!({
            "type": "Feature",
            "properties": { "highway": road.road_class },
            "geometry": { "type": "LineString", "coordinates": coords },
        }));
    }
    for b in &layer.buildings {
        let mut coords: Vec<Value> = b.ring.iter().map(|&(x, y)| json!([x, y])).collect();
        if let Some(first) = coords.first().cloned() {
            coords.push(first);
        }
        features.push(json!({
            "type": "Feature",
            "properties": { "building": true },
            "geometry": { "type": "Polygon", "coordinates": [coords] },
        }));
    }
    let doc = Value::Object(Map::from_iter([
        ("type".to_string(), json!("FeatureCollection")),
        ("features".to_string(), Value::Array(features)),
    ]));
    serde_json::to_string_pretty(&doc).expect("geojson serialization")
}

fn segment_intersects_rect(
    p1: (f64, f64),
    p2: (f64, f64),
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
) -> bool {
    // Liang-Barsky clip test; true if any part of the segment is inside.
    let (x1, y1) = p1;
    let (dx, dy) = (p2.0 - x1, p2.1 - y1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, x1 - xmin),
        (dx, xmax - x1),
        (-dy, y1 - ymin),
        (dy, ymax - y1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

fn point_in_ring(px: f64, py: f64, ring: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > py) != (yj > py) {
            let x_cross = xi + (py - yi) / (yj - yi) * (xj - xi);
            if px < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Keep only the features that touch the tile `h`×`w` (pixel space under
/// `gt`) expanded by `margin_px` on each side. Geometry is not modified;
/// spatial clipping happens at rasterization time.
pub fn clip_to_tile(
    layer: &VectorLayer,
    gt: &GeoTransform,
    h: usize,
    w: usize,
    margin_px: f64,
) -> Result<VectorLayer, crate::geo::GeoError> {
    let xmin = -0.5 - margin_px;
    let ymin = -0.5 - margin_px;
    let xmax = w as f64 - 0.5 + margin_px;
    let ymax = h as f64 - 0.5 + margin_px;

    let project = |pts: &[(f64, f64)]| -> Result<Vec<(f64, f64)>, crate::geo::GeoError> {
        pts.iter()
            .map(|&(lon, lat)| gt.geo_to_pixel(lon, lat).map(|(row, col)| (col, row)))
            .collect()
    };

    let mut out = VectorLayer::default();
    for road in &layer.roads {
        let px = project(&road.polyline)?;
        let touches = px
            .windows(2)
            .any(|s| segment_intersects_rect(s[0], s[1], xmin, ymin, xmax, ymax))
            || (px.len() == 1 && point_in_rect(px[0], xmin, ymin, xmax, ymax));
        if touches {
            out.roads.push(road.clone());
        }
    }
    for b in &layer.buildings {
        let px = project(&b.ring)?;
        let mut closed = px.clone();
        if let Some(&first) = closed.first() {
            closed.push(first);
        }
        let boundary = closed
            .windows(2)
            .any(|s| segment_intersects_rect(s[0], s[1], xmin, ymin, xmax, ymax));
        // A footprint swallowing the whole expanded tile has no boundary
        // contact; test the tile center against the ring.
        let engulfs = point_in_ring((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, &px);
        if boundary || engulfs {
            out.buildings.push(b.clone());
        }
    }
    Ok(out)
}

fn point_in_rect(p: (f64, f64), xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> bool {
    p.0 >= xmin && p.0 <= xmax && p.1 >= ymin && p.1 <= ymax
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linestring_with_class() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [{
            "type": "Feature",
            "properties": {"highway": "primary"},
            "geometry": {"type": "LineString", "coordinates": [[0.0, 0.0], [1.0, 1.0]]}
          }]
        }"#;
        let report = parse_geojson(text).unwrap();
        assert_eq!(report.layer.roads.len(), 1);
        assert_eq!(report.layer.roads[0].road_class, "primary");
        assert_eq!(report.ignored, 0);
    }

    #[test]
    fn empty_collection() {
        let report = parse_geojson(r#"{"type":"FeatureCollection","features":[]}"#).unwrap();
        assert!(report.layer.is_empty());
        assert_eq!(report.ignored, 0);
    }

    #[test]
    fn mixed_document_counts() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [
            {"type":"Feature","properties":{"highway":"primary"},
             "geometry":{"type":"LineString","coordinates":[[0,0],[1,0]]}},
            {"type":"Feature","properties":{},
             "geometry":{"type":"LineString","coordinates":[[0,1],[1,1]]}},
            {"type":"Feature","properties":{"highway":"path"},
             "geometry":{"type":"LineString","coordinates":[[0,2],[1,2],[2,2]]}},
            {"type":"Feature","properties":{"building":"yes"},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
            {"type":"Feature","properties":{"building":true},
             "geometry":{"type":"Polygon","coordinates":[[[2,2],[3,2],[3,3],[2,2]]]}},
            {"type":"Feature","properties":{},
             "geometry":{"type":"Point","coordinates":[5,5]}}
          ]
        }"#;
        let report = parse_geojson(text).unwrap();
        assert_eq!(report.layer.roads.len(), 3);
        assert_eq!(report.layer.buildings.len(), 2);
        assert_eq!(report.ignored, 1);
        assert_eq!(report.layer.roads[1].road_class, "residential");
    }

    #[test]
    fn polygon_without_building_tag_ignored() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [{
            "type":"Feature","properties":{},
            "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}
          }]
        }"#;
        let report = parse_geojson(text).unwrap();
        assert!(report.layer.buildings.is_empty());
        assert_eq!(report.ignored, 1);
    }

    #[test]
    fn short_linestring_rejected() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [{
            "type":"Feature","properties":{},
            "geometry":{"type":"LineString","coordinates":[[0,0]]}
          }]
        }"#;
        assert!(matches!(
            parse_geojson(text),
            Err(VectorError::GeometryError(_))
        ));
    }

    #[test]
    fn short_ring_rejected() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [{
            "type":"Feature","properties":{"building":"yes"},
            "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,1],[0,0]]]}
          }]
        }"#;
        assert!(matches!(
            parse_geojson(text),
            Err(VectorError::GeometryError(_))
        ));
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(matches!(
            parse_geojson("{not json"),
            Err(VectorError::ParseError(_))
        ));
        assert!(matches!(
            parse_geojson(r#"{"type":"Feature"}"#),
            Err(VectorError::ParseError(_))
        ));
    }

    #[test]
    fn serialize_parse_round_trip() {
        let layer = VectorLayer {
            roads: vec![
                Road {
                    polyline: vec![(-73.98, 40.75), (-73.97, 40.76), (-73.961, 40.77)],
                    road_class: "primary".into(),
                },
                Road {
                    polyline: vec![(0.125, -0.25), (0.375, 0.5)],
                    road_class: "residential".into(),
                },
            ],
            buildings: vec![Building {
                ring: vec![(0.0, 0.0), (0.001, 0.0), (0.001, 0.002), (0.0, 0.002)],
            }],
        };
        let text = to_geojson(&layer);
        let report = parse_geojson(&text).unwrap();
        assert_eq!(report.layer, layer);
        assert_eq!(report.ignored, 0);
    }

    fn tile_layer() -> VectorLayer {
        VectorLayer {
            roads: vec![
                // fully inside a 32x32 tile
                Road {
                    polyline: vec![(4.0, 4.0), (20.0, 20.0)],
                    road_class: "primary".into(),
                },
                // far outside
                Road {
                    polyline: vec![(500.0, 500.0), (600.0, 600.0)],
                    road_class: "path".into(),
                },
                // crosses the boundary
                Road {
                    polyline: vec![(-10.0, 16.0), (10.0, 16.0)],
                    road_class: "secondary".into(),
                },
                // both endpoints outside, segment cuts the corner
                Road {
                    polyline: vec![(-5.0, 10.0), (10.0, -5.0)],
                    road_class: "residential".into(),
                },
            ],
            buildings: vec![Building {
                ring: vec![(-100.0, -100.0), (200.0, -100.0), (200.0, 200.0), (-100.0, 200.0)],
            }],
        }
    }

    #[test]
    fn clip_keeps_touching_features() {
        let gt = GeoTransform::identity();
        let clipped = clip_to_tile(&tile_layer(), &gt, 32, 32, 0.0).unwrap();
        assert_eq!(clipped.roads.len(), 3);
        assert_eq!(clipped.roads[0].road_class, "primary");
        assert_eq!(clipped.roads[1].road_class, "secondary");
        assert_eq!(clipped.roads[2].road_class, "residential");
        // the engulfing footprint has no boundary contact but covers the tile
        assert_eq!(clipped.buildings.len(), 1);
    }

    #[test]
    fn clip_is_idempotent() {
        let gt = GeoTransform::identity();
        let once = clip_to_tile(&tile_layer(), &gt, 32, 32, 2.0).unwrap();
        let twice = clip_to_tile(&once, &gt, 32, 32, 2.0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn margin_rescues_nearby_road() {
        let gt = GeoTransform::identity();
        let layer = VectorLayer {
            roads: vec![Road {
                polyline: vec![(35.0, 5.0), (35.0, 20.0)],
                road_class: "path".into(),
            }],
            buildings: vec![],
        };
        assert!(clip_to_tile(&layer, &gt, 32, 32, 0.0).unwrap().is_empty());
        assert_eq!(clip_to_tile(&layer, &gt, 32, 32, 5.0).unwrap().roads.len(), 1);
    }
}
