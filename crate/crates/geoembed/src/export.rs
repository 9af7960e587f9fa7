//! Export store: embedding payload + metadata sidecar serialization,
//! input-patch persistence, and the per-run manifest.

use std::path::Path;

use geoembed_core::canonical::{canonical_sensor, canonical_spatial};
use geoembed_core::model::{Capability, EmbeddingData, InputPrep};
use geoembed_core::spec::{OutputSpec, SensorSpec, SpatialSpec, TemporalSpec};
use serde_json::{json, Value};

use crate::provider::Observation;
use crate::ras::write_ras;

pub const SCHEMA_VERSION: u64 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt payload at {path}: expected {expected} bytes, got {got}")]
    CorruptPayload {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("metadata schema mismatch at {path}: {detail}")]
    SchemaVersionMismatch { path: String, detail: String },
    #[error("manifest unreadable at {path}: {detail}")]
    BadManifest { path: String, detail: String },
    #[error(transparent)]
    Ras(#[from] crate::ras::RasError),
}

fn io_err(path: &Path, source: std::io::Error) -> ExportError {
    ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A payload plus its metadata sidecar, as written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub data: EmbeddingData,
    pub meta: Value,
}

/// Everything metadata needs beyond the payload itself.
pub struct MetaContext<'a> {
    pub cap: &'a Capability,
    pub backend: &'a str,
    pub output: &'a OutputSpec,
    pub sensor: Option<&'a SensorSpec>,
    pub temporal: &'a TemporalSpec,
    pub spatial: &'a SpatialSpec,
    pub input_prep: InputPrep,
    pub device: Option<&'a str>,
    pub created_utc: String,
    pub spec_hash: String,
}

/// Keys every meta.json must carry (values may be null where inapplicable).
pub const REQUIRED_META_KEYS: &[&str] = &[
    "schema_version",
    "model_id",
    "model_type",
    "backend",
    "output_mode",
    "shape",
    "dtype",
    "pooling",
    "bands",
    "sensor",
    "temporal",
    "spatial",
    "input_size",
    "input_prep",
    "checkpoint",
    "grid_layout",
    "created_utc",
    "spec_hash",
    "engine_version",
];

pub fn build_meta(data: &EmbeddingData, ctx: &MetaContext<'_>) -> Value {
    let sensor = match ctx.sensor {
        Some(s) => serde_json::from_str::<Value>(&canonical_sensor(s)).expect("canonical sensor"),
        None => Value::Null,
    };
    let grid_layout = match data {
        EmbeddingData::Grid { height, width, .. } => json!({
            "patch_size": ctx.cap.patch_size,
            "h": height,
            "w": width,
        }),
        EmbeddingData::Pooled { .. } => Value::Null,
    };
    let bands: Vec<String> = ctx
        .sensor
        .map(|s| s.bands.clone())
        .unwrap_or_default();
    json!({
        "schema_version": SCHEMA_VERSION,
        "model_id": ctx.cap.model_id,
        "model_type": ctx.cap.backend.as_str(),
        "backend": ctx.backend,
        "output_mode": data.mode().as_str(),
        "shape": data.shape(),
        "dtype": "float32",
        "pooling": ctx.output.pooling.as_str(),
        "bands": bands,
        "sensor": sensor,
        "temporal": { "start": ctx.temporal.start.to_string(), "end": ctx.temporal.end.to_string() },
        "spatial": { "canonical": canonical_spatial(ctx.spatial) },
        "input_size": ctx.cap.input_size,
        "input_prep": ctx.input_prep.as_str(),
        "checkpoint": ctx.cap.checkpoint,
        "grid_layout": grid_layout,
        "device": ctx.device,
        "created_utc": ctx.created_utc,
        "spec_hash": ctx.spec_hash,
        "engine_version": ENGINE_VERSION,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_json_atomic(path: &Path, value: &Value) -> Result<(), ExportError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Write data.f32 + meta.json into `dir`; returns the two file names.
pub fn serialize_embedding(emb: &Embedding, dir: &Path) -> Result<Vec<String>, ExportError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut payload = Vec::with_capacity(emb.data.len() * 4);
    for v in emb.data.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("data.f32"), &payload)?;
    write_json_atomic(&dir.join("meta.json"), &emb.meta)?;
    Ok(vec!["data.f32".into(), "meta.json".into()])
}

fn meta_usize(meta: &Value, key: &str, path: &Path) -> Result<Vec<usize>, ExportError> {
    meta.get(key)
        .and_then(|v| v.as_array())
        .map(|a| {
            a.iter()
                .filter_map(|x| x.as_u64().map(|n| n as usize))
                .collect::<Vec<usize>>()
        })
        .ok_or_else(|| ExportError::SchemaVersionMismatch {
            path: path.display().to_string(),
            detail: format!("key {key:?} missing or not an integer array"),
        })
}

/// Exact inverse of serialize_embedding, validating schema and sizes.
pub fn load_embedding(dir: &Path) -> Result<Embedding, ExportError> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Value =
        serde_json::from_str(&text).map_err(|e| ExportError::SchemaVersionMismatch {
            path: meta_path.display().to_string(),
            detail: e.to_string(),
        })?;
    for key in REQUIRED_META_KEYS {
        if meta.get(key).is_none() {
            return Err(ExportError::SchemaVersionMismatch {
                path: meta_path.display().to_string(),
                detail: format!("required key {key:?} missing"),
            });
        }
    }
    if meta["schema_version"].as_u64() != Some(SCHEMA_VERSION) {
        return Err(ExportError::SchemaVersionMismatch {
            path: meta_path.display().to_string(),
            detail: format!("schema_version {} unsupported", meta["schema_version"]),
        });
    }
    let shape = meta_usize(&meta, "shape", &meta_path)?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    let data_path = dir.join("data.f32");
    let payload = std::fs::read(&data_path).map_err(|e| io_err(&data_path, e))?;
    if payload.len() != expected {
        return Err(ExportError::CorruptPayload {
            path: data_path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mode = meta["output_mode"].as_str().unwrap_or_default();
    let data = match (mode, shape.as_slice()) {
        ("pooled", [_d]) => EmbeddingData::Pooled { values },
        ("grid", [d, h, w]) => EmbeddingData::Grid {
            dim: *d,
            height: *h,
            width: *w,
            values,
        },
        _ => {
            return Err(ExportError::SchemaVersionMismatch {
                path: meta_path.display().to_string(),
                detail: format!("output_mode {mode:?} inconsistent with shape {shape:?}"),
            })
        }
    };
    Ok(Embedding { data, meta })
}

/// Persist the composited input tensor next to the embedding for audit.
pub fn persist_input(obs: &Observation, input_meta: &Value, dir: &Path) -> Result<Vec<String>, ExportError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_ras(&dir.join("input.ras"), &obs.data, &obs.geotransform)?;
    write_json_atomic(&dir.join("input_meta.json"), input_meta)?;
    Ok(vec!["input.ras".into(), "input_meta.json".into()])
}

pub fn build_input_meta(
    obs: &Observation,
    sensor: &SensorSpec,
    temporal: &TemporalSpec,
    spatial: &SpatialSpec,
) -> Value {
    let sensor_v: Value =
        serde_json::from_str(&canonical_sensor(sensor)).expect("canonical sensor");
    json!({
        "sensor": sensor_v,
        "temporal": { "start": temporal.start.to_string(), "end": temporal.end.to_string() },
        "spatial": { "canonical": canonical_spatial(spatial) },
        "scenes": obs.source_scenes,
        "composite": sensor.composite.as_str(),
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ProviderInit,
    ProviderFetch,
    Inference,
    Export,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Timings {
    pub prefetch_ms: u64,
    pub infer_ms: u64,
    pub write_ms: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestModelEntry {
    pub model_id: String,
    pub status: EntryStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fail_stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub attempts: u32,
    pub timings: Timings,
    /// Paths relative to the export root, "/"-separated.
    pub outputs: Vec<String>,
    pub spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestItem {
    pub item_id: String,
    pub index: usize,
    /// Canonical spatial serialization.
    pub spatial: String,
    pub status: ItemStatus,
    pub models: Vec<ManifestModelEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub ok: usize,
    pub partial: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RequestSummary {
    pub n_items: usize,
    pub models: Vec<String>,
    pub temporal: TemporalSummary,
    pub output_mode: String,
    pub pooling: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale_m: Option<f64>,
    pub input_prep: String,
    pub backend: String,
    pub engine_version: String,
    pub created_utc: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemporalSummary {
    pub start: String,
    pub end: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExportManifest {
    pub version: u32,
    pub request: RequestSummary,
    pub items: Vec<ManifestItem>,
    pub summary: Summary,
}

/// Item status is a pure function of its model entries.
pub fn item_status(entries: &[ManifestModelEntry]) -> ItemStatus {
    let ok = entries.iter().filter(|e| e.status == EntryStatus::Ok).count();
    if ok == entries.len() {
        ItemStatus::Ok
    } else if ok == 0 {
        ItemStatus::Failed
    } else {
        ItemStatus::Partial
    }
}

pub fn summarize(items: &[ManifestItem]) -> Summary {
    let mut summary = Summary::default();
    for item in items {
        match item.status {
            ItemStatus::Ok => summary.ok += 1,
            ItemStatus::Partial => summary.partial += 1,
            ItemStatus::Failed => summary.failed += 1,
        }
    }
    summary
}

pub fn write_manifest(path: &Path, manifest: &ExportManifest) -> Result<(), ExportError> {
    let value = serde_json::to_value(manifest).expect("manifest serializes");
    write_json_atomic(path, &value)
}

pub fn read_manifest(path: &Path) -> Result<ExportManifest, ExportError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| ExportError::BadManifest {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn item_dir_name(index: usize) -> String {
    format!("{index:05}")
}
