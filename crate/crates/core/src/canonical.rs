//! Canonical serialization of validated specs and the content keys derived
//! from it.
//!
//! Canonical form is a JSON object with lexicographically sorted keys, no
//! insignificant whitespace, and shortest round-trip float rendering. The
//! exact byte sequence feeds dedup keys and spec hashes, so equal specs must
//! serialize identically.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::spec::{OutputSpec, SensorSpec, SpatialSpec, TemporalSpec};

fn to_compact(v: &Value) -> String {
    // serde_json's Map is a BTreeMap (preserve_order off), so keys come out sorted.
    serde_json::to_string(v).expect("canonical value serializes")
}

pub fn canonical_spatial(s: &SpatialSpec) -> String {
    let v = match s {
        SpatialSpec::BBox {
            minlon,
            minlat,
            maxlon,
            maxlat,
            crs,
        } => json!({
            "type": "bbox",
            "minlon": minlon,
            "minlat": minlat,
            "maxlon": maxlon,
            "maxlat": maxlat,
            "crs": crs,
        }),
        SpatialSpec::PointBuffer {
            lon,
            lat,
            buffer_m,
            crs,
        } => json!({
            "type": "point_buffer",
            "lon": lon,
            "lat": lat,
            "buffer_m": buffer_m,
            "crs": crs,
        }),
    };
    to_compact(&v)
}

pub fn canonical_temporal(t: &TemporalSpec) -> String {
    let v = json!({
        "start": t.start.to_string(),
        "end": t.end.to_string(),
    });
    to_compact(&v)
}

pub fn canonical_output(o: &OutputSpec) -> String {
    let mut map = serde_json::Map::new();
    map.insert("mode".into(), json!(o.mode.as_str()));
    if let Some(s) = o.scale_m {
        map.insert("scale_m".into(), json!(s));
    }
    map.insert("pooling".into(), json!(o.pooling.as_str()));
    to_compact(&Value::Object(map))
}

pub fn canonical_sensor(s: &SensorSpec) -> String {
    let v = json!({
        "collection": s.collection,
        "bands": s.bands,
        "scale_m": s.scale_m,
        "cloudy_pct": s.cloudy_pct,
        "fill_value": s.fill_value,
        "composite": s.composite.as_str(),
        "check_input": s.check_input,
    });
    to_compact(&v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use core::fmt::Write;
        write!(out, "{b:02x}").expect("hex write");
    }
    out
}

fn sha256_raw(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Resume/audit identity of one (model, request) pair: SHA-256 over the
/// canonical serialization of everything that determines its output.
pub fn spec_hash(
    model_id: &str,
    spatial: &SpatialSpec,
    temporal: &TemporalSpec,
    output: &OutputSpec,
    sensor: Option<&SensorSpec>,
) -> String {
    let v = json!({
        "model_id": model_id,
        "spatial": Value::from(canonical_spatial(spatial)),
        "temporal": Value::from(canonical_temporal(temporal)),
        "output": Value::from(canonical_output(output)),
        "sensor": sensor.map(canonical_sensor),
    });
    sha256_hex(to_compact(&v).as_bytes())
}

/// Dedup key for prefetch: hashes of the canonical (spatial, sensor,
/// temporal) triple. Equal specs produce equal keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProviderKey {
    pub spatial_key: [u8; 32],
    pub sensor_key: [u8; 32],
    pub temporal_key: [u8; 32],
}

impl ProviderKey {
    pub fn new(spatial: &SpatialSpec, sensor: &SensorSpec, temporal: &TemporalSpec) -> Self {
        Self {
            spatial_key: sha256_raw(canonical_spatial(spatial).as_bytes()),
            sensor_key: sha256_raw(canonical_sensor(sensor).as_bytes()),
            temporal_key: sha256_raw(canonical_temporal(temporal).as_bytes()),
        }
    }

    /// Short printable form for logs and error messages.
    pub fn short_hex(&self) -> String {
        let mut out = String::new();
        use core::fmt::Write;
        for b in &self.spatial_key[..4] {
            write!(out, "{b:02x}").expect("hex write");
        }
        out.push('/');
        for b in &self.sensor_key[..4] {
            write!(out, "{b:02x}").expect("hex write");
        }
        out
    }
}

/// All canonical component strings of a request, kept together for
/// metadata emission.
#[derive(Debug, Clone)]
pub struct CanonicalRequest {
    pub spatial: String,
    pub temporal: String,
    pub output: String,
    pub sensor: Option<String>,
}

pub fn canonical_request(
    spatial: &SpatialSpec,
    temporal: &TemporalSpec,
    output: &OutputSpec,
    sensor: Option<&SensorSpec>,
) -> CanonicalRequest {
    CanonicalRequest {
        spatial: canonical_spatial(spatial),
        temporal: canonical_temporal(temporal),
        output: canonical_output(output),
        sensor: sensor.map(canonical_sensor),
    }
}

/// Canonical bytes of a full batch-request body, used to fingerprint runs.
pub fn canonical_batch(
    spatials: &[SpatialSpec],
    models: &[String],
    temporal: &TemporalSpec,
    output: &OutputSpec,
) -> String {
    let spatial_values: Vec<Value> = spatials
        .iter()
        .map(|s| Value::from(canonical_spatial(s)))
        .collect();
    let v = json!({
        "spatials": spatial_values,
        "models": models,
        "temporal": Value::from(canonical_temporal(temporal)),
        "output": Value::from(canonical_output(output)),
    });
    to_compact(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{validate_spatial, CompositeMethod};
    use alloc::string::ToString;
    use alloc::vec;

    fn sensor() -> SensorSpec {
        SensorSpec {
            collection: "mock-a".into(),
            bands: vec!["b1".into(), "b2".into()],
            scale_m: 10.0,
            cloudy_pct: 40.0,
            fill_value: 0.0,
            composite: CompositeMethod::Median,
            check_input: false,
        }
    }

    #[test]
    fn spatial_keys_sorted_and_compact() {
        let s = SpatialSpec::point_buffer(121.5, 31.2, 2048.0);
        assert_eq!(
            canonical_spatial(&s),
            r#"{"buffer_m":2048.0,"crs":"EPSG:4326","lat":31.2,"lon":121.5,"type":"point_buffer"}"#
        );
    }

    #[test]
    fn bbox_canonical_form() {
        let s = SpatialSpec::bbox(121.45, 31.15, 121.50, 31.20);
        assert_eq!(
            canonical_spatial(&s),
            r#"{"crs":"EPSG:4326","maxlat":31.2,"maxlon":121.5,"minlat":31.15,"minlon":121.45,"type":"bbox"}"#
        );
    }

    #[test]
    fn temporal_canonical_form() {
        let t = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        assert_eq!(
            canonical_temporal(&t),
            r#"{"end":"2022-09-01","start":"2022-06-01"}"#
        );
    }

    #[test]
    fn output_canonical_form() {
        assert_eq!(
            canonical_output(&OutputSpec::pooled()),
            r#"{"mode":"pooled","pooling":"mean"}"#
        );
        assert_eq!(
            canonical_output(&OutputSpec::grid_at_scale(10.0)),
            r#"{"mode":"grid","pooling":"mean","scale_m":10.0}"#
        );
    }

    #[test]
    fn equal_specs_equal_keys() {
        // Same point expressed with float formatting noise below 1e-7.
        let a = validate_spatial(&SpatialSpec::point_buffer(121.5, 31.2, 100.0)).unwrap();
        let b =
            validate_spatial(&SpatialSpec::point_buffer(121.50000000999, 31.2, 100.0)).unwrap();
        let t = TemporalSpec::year(2022).unwrap();
        assert_eq!(
            ProviderKey::new(&a, &sensor(), &t),
            ProviderKey::new(&b, &sensor(), &t)
        );
    }

    #[test]
    fn distinct_sensors_distinct_keys() {
        let s = validate_spatial(&SpatialSpec::point_buffer(121.5, 31.2, 100.0)).unwrap();
        let t = TemporalSpec::year(2022).unwrap();
        let mut other = sensor();
        other.scale_m = 20.0;
        assert_ne!(
            ProviderKey::new(&s, &sensor(), &t),
            ProviderKey::new(&s, &other, &t)
        );
    }

    #[test]
    fn spec_hash_is_stable() {
        let s = SpatialSpec::point_buffer(121.5, 31.2, 2048.0);
        let t = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let o = OutputSpec::grid();
        let h1 = spec_hash("ref-d64", &s, &t, &o, Some(&sensor()));
        let h2 = spec_hash("ref-d64", &s, &t, &o, Some(&sensor()));
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        let h3 = spec_hash("ref-d32", &s, &t, &o, Some(&sensor()));
        assert_ne!(h1, h3);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    proptest::proptest! {
        #[test]
        fn canonical_serialization_deterministic(
            lon in -180.0f64..180.0,
            lat in -90.0f64..90.0,
            buffer in 0.1f64..100000.0,
        ) {
            let v = validate_spatial(&SpatialSpec::point_buffer(lon, lat, buffer)).unwrap();
            let c1 = canonical_spatial(&v);
            let c2 = canonical_spatial(&validate_spatial(&v).unwrap().clone());
            proptest::prop_assert_eq!(&c1, &c2);
            // Round-trips through JSON without loss.
            let parsed: serde_json::Value = serde_json::from_str(&c1).unwrap();
            proptest::prop_assert_eq!(to_compact(&parsed), c1);
            let _ = lat.to_string();
        }
    }
}
