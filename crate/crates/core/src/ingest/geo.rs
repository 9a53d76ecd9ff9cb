//! Region sets and point-in-polygon lookup.

use std::collections::HashMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

/// A closed ring of `[lon, lat]` vertices; the first vertex equals the last.
pub type Ring = Vec<[f64; 2]>;

/// All rings of one region. Shells and holes are not distinguished: membership
/// uses the even-odd rule across every ring, which handles holes and
/// multi-part regions alike.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionShape {
    pub rings: Vec<Ring>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    ids: Vec<String>,
    shapes: Option<Vec<RegionShape>>,
    index: HashMap<String, usize>,
}

impl RegionSet {
    pub fn from_ids<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        Self::build(ids, None)
    }

    pub fn with_shapes(ids: Vec<String>, shapes: Vec<RegionShape>) -> Result<Self> {
        if ids.len() != shapes.len() {
            return Err(Error::arg(format!(
                "{} region ids but {} shapes",
                ids.len(),
                shapes.len()
            )));
        }
        for (id, shape) in ids.iter().zip(&shapes) {
            for ring in &shape.rings {
                if ring.len() < 4 || ring.first() != ring.last() {
                    return Err(Error::arg(format!(
                        "region `{id}`: ring is not closed (needs >= 4 vertices, first == last)"
                    )));
                }
            }
        }
        Self::build(ids, Some(shapes))
    }

    fn build(ids: Vec<String>, shapes: Option<Vec<RegionShape>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::arg("region set is empty"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate region id `{id}`")));
            }
        }
        Ok(RegionSet { ids, shapes, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn has_shapes(&self) -> bool {
        self.shapes.is_some()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Index of the first region (in id order) containing the point. Points on
    /// a boundary count as inside.
    pub fn locate(&self, lon: f64, lat: f64) -> Result<Option<usize>> {
        let shapes = self
            .shapes
            .as_ref()
            .ok_or_else(|| Error::Config("spatial join needs region polygons".into()))?;
        Ok(shapes.iter().position(|s| s.contains(lon, lat)))
    }

    /// Loads either a GeoJSON feature collection (`.json`/`.geojson`) or a
    /// plain newline-separated id list (blank lines and `#` comments skipped).
    pub fn load(path: impl AsRef<Path>, id_property: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_geojson = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("json" | "geojson")
        );
        if is_geojson {
            parse_feature_collection(&text, id_property).map_err(|message| Error::Schema {
                path: path.into(),
                line: 0,
                message,
            })
        } else {
            let ids = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from);
            Self::from_ids(ids)
        }
    }
}

/// `spatial_join`: id of the first region containing the point.
pub fn spatial_join<'a>(lon: f64, lat: f64, regions: &'a RegionSet) -> Result<Option<&'a str>> {
    Ok(regions
        .locate(lon, lat)?
        .map(|i| regions.ids[i].as_str()))
}

impl RegionShape {
    pub fn from_ring(ring: Ring) -> Self {
        RegionShape { rings: vec![ring] }
    }

    /// Even-odd containment; boundary points are inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if self.rings.iter().any(|r| on_boundary(r, x, y)) {
            return true;
        }
        let crossings: usize = self.rings.iter().map(|r| crossings(r, x, y)).sum();
        crossings % 2 == 1
    }
}

const EDGE_EPS: f64 = 1e-12;

fn on_boundary(ring: &Ring, x: f64, y: f64) -> bool {
    ring.windows(2).any(|e| {
        let [ax, ay] = e[0];
        let [bx, by] = e[1];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        let scale = (bx - ax).abs().max((by - ay).abs()).max(1.0);
        cross.abs() <= EDGE_EPS * scale
            && x >= ax.min(bx) - EDGE_EPS
            && x <= ax.max(bx) + EDGE_EPS
            && y >= ay.min(by) - EDGE_EPS
            && y <= ay.max(by) + EDGE_EPS
    })
}

/// Crossings of the ray from (x, y) towards +x with the ring's edges.
fn crossings(ring: &Ring, x: f64, y: f64) -> usize {
    ring.windows(2)
        .filter(|e| {
            let [ax, ay] = e[0];
            let [bx, by] = e[1];
            if (ay > y) == (by > y) {
                return false;
            }
            let xi = ax + (y - ay) * (bx - ax) / (by - ay);
            x < xi
        })
        .count()
}

fn parse_feature_collection(text: &str, id_property: &str) -> std::result::Result<RegionSet, String> {
    let root: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or("expected a FeatureCollection with a `features` array")?;
    let mut ids = Vec::with_capacity(features.len());
    let mut shapes = Vec::with_capacity(features.len());
    for (k, f) in features.iter().enumerate() {
        let id = f
            .get("properties")
            .and_then(|p| p.get(id_property))
            .or_else(|| f.get("id"))
            .and_then(|v| match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .ok_or_else(|| format!("feature {k}: missing `{id_property}` property"))?;
        let geom = f
            .get("geometry")
            .ok_or_else(|| format!("feature {k}: missing geometry"))?;
        let kind = geom.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| format!("feature {k}: missing coordinates"))?;
        let polygons: Vec<&Value> = match kind {
            "Polygon" => vec![coords],
            "MultiPolygon" => coords
                .as_array()
                .ok_or_else(|| format!("feature {k}: bad MultiPolygon"))?
                .iter()
                .collect(),
            other => return Err(format!("feature {k}: unsupported geometry `{other}`")),
        };
        let mut rings = Vec::new();
        for poly in polygons {
            for ring in poly
                .as_array()
                .ok_or_else(|| format!("feature {k}: bad polygon"))?
            {
                rings.push(parse_ring(ring).ok_or_else(|| format!("feature {k}: bad ring"))?);
            }
        }
        ids.push(id);
        shapes.push(RegionShape { rings });
    }
    RegionSet::with_shapes(ids, shapes).map_err(|e| e.to_string())
}

fn parse_ring(v: &Value) -> Option<Ring> {
    v.as_array()?
        .iter()
        .map(|p| {
            let p = p.as_array()?;
            Some([p.first()?.as_f64()?, p.get(1)?.as_f64()?])
        })
        .collect()
}
