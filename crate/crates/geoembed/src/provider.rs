//! Imagery providers: turn (spatial, temporal, sensor) into one composited
//! Observation, hiding catalog query, per-scene read, and compositing.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::NaiveDate;
use geoembed_core::geo::{footprint, Footprint, FootprintLimits};
use geoembed_core::mock;
use geoembed_core::raster::{
    composite_median, composite_mosaic, sample_geo, Raster, Resampling, SceneLayer,
};
use geoembed_core::spec::{CompositeMethod, SensorSpec, SpatialSpec, SpecError, TemporalSpec};

use crate::ras::read_ras;

/// One composited imagery tensor over a request footprint.
#[derive(Debug, Clone)]
pub struct Observation {
    /// C x H x W, north-up; C = |sensor.bands|.
    pub data: Raster,
    /// Affine in the planar footprint frame (meters, origin at center).
    pub geotransform: [f64; 6],
    pub band_names: Vec<String>,
    pub fill_value: f32,
    /// True where at least one scene contributed a non-fill value.
    pub valid_mask: Vec<bool>,
    pub source_scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub date: NaiveDate,
    pub cloud_pct: f64,
    pub collection: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("unknown collection {collection:?}")]
    UnknownCollection { collection: String },
    #[error("no scenes in window [{start}, {end}) for {collection:?} at cloudy_pct <= {cloudy_pct}")]
    NoScenesInWindow {
        collection: String,
        start: String,
        end: String,
        cloudy_pct: f64,
    },
    #[error("scene read failed for {scene_id:?}: {detail}")]
    SceneReadFailure { scene_id: String, detail: String },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("compositing failed: {0}")]
    Composite(#[from] geoembed_core::raster::RasterError),
}

impl ProviderError {
    /// Only scene reads are transient; everything else is a hard error.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::SceneReadFailure { .. })
    }
}

/// Monotonic in-flight counter with a high-water mark, for bounded
/// concurrency assertions in tests.
#[derive(Debug, Default)]
pub struct Gauge {
    in_flight: AtomicU64,
    max_seen: AtomicU64,
}

impl Gauge {
    pub fn enter(&self) -> GaugeGuard<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
        GaugeGuard { gauge: self }
    }

    pub fn current(&self) -> u64 {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn max_seen(&self) -> u64 {
        self.max_seen.load(Ordering::SeqCst)
    }
}

pub struct GaugeGuard<'a> {
    gauge: &'a Gauge,
}

impl Drop for GaugeGuard<'_> {
    fn drop(&mut self) {
        self.gauge.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Atomic counters every provider keeps; readable by tests.
#[derive(Debug, Default)]
pub struct ProviderStats {
    pub fetches: AtomicU64,
    pub scene_reads: AtomicU64,
    pub fetch_gauge: Gauge,
}

impl ProviderStats {
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    pub fn scene_read_count(&self) -> u64 {
        self.scene_reads.load(Ordering::SeqCst)
    }
}

/// Test-only failure predicate: (fetch key, 1-based attempt) -> force a
/// SceneReadFailure for this fetch call.
pub type FailurePredicate = dyn Fn(&str, u64) -> bool + Send + Sync;

pub trait ImageryProvider: Send + Sync {
    /// Short backend identifier recorded in metadata ("mock", "local").
    fn backend_id(&self) -> &'static str;

    fn stats(&self) -> &ProviderStats;

    /// Scenes with date in [start, end) and cloud_pct <= cloudy_pct,
    /// ascending by date then scene_id.
    fn list_scenes(
        &self,
        collection: &str,
        temporal: &TemporalSpec,
        cloudy_pct: f64,
    ) -> Result<Vec<SceneRecord>, ProviderError>;

    /// One scene resampled onto the footprint grid.
    fn read_scene(
        &self,
        scene: &SceneRecord,
        fp: &Footprint,
        bands: &[String],
        fill_value: f32,
    ) -> Result<SceneLayer, ProviderError>;

    /// Full path: list, read each scene, composite. Deterministic for
    /// fixed inputs and provider state.
    fn fetch(
        &self,
        spatial: &SpatialSpec,
        temporal: &TemporalSpec,
        sensor: &SensorSpec,
        limits: &FootprintLimits,
    ) -> Result<Observation, ProviderError> {
        let _guard = self.stats().fetch_gauge.enter();
        self.stats().fetches.fetch_add(1, Ordering::SeqCst);
        self.before_fetch(spatial)?;
        let fp = footprint(spatial, sensor.scale_m, limits)?;
        let scenes = self.list_scenes(&sensor.collection, temporal, sensor.cloudy_pct)?;
        if scenes.is_empty() {
            return Err(ProviderError::NoScenesInWindow {
                collection: sensor.collection.clone(),
                start: sensor_date(temporal.start),
                end: sensor_date(temporal.end),
                cloudy_pct: sensor.cloudy_pct,
            });
        }
        let mut stack = Vec::with_capacity(scenes.len());
        for scene in &scenes {
            self.stats().scene_reads.fetch_add(1, Ordering::SeqCst);
            stack.push(self.read_scene(scene, &fp, &sensor.bands, sensor.fill_value)?);
        }
        // list_scenes returns ascending date order, which mosaic relies on.
        let composite = match sensor.composite {
            CompositeMethod::Median => composite_median(&stack, sensor.fill_value)?,
            CompositeMethod::Mosaic => composite_mosaic(&stack, sensor.fill_value)?,
        };
        Ok(Observation {
            data: composite.raster,
            geotransform: fp.geotransform(),
            band_names: sensor.bands.clone(),
            fill_value: sensor.fill_value,
            valid_mask: composite.valid_mask,
            source_scenes: scenes.iter().map(|s| s.scene_id.clone()).collect(),
        })
    }

    /// Hook point for injected latency/failure; default is a no-op.
    fn before_fetch(&self, _spatial: &SpatialSpec) -> Result<(), ProviderError> {
        Ok(())
    }
}

fn sensor_date(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

/// Deterministic synthetic backend over the mock catalog and pixel field.
pub struct MockProvider {
    nodata_pct: u8,
    latency: Option<Duration>,
    failure_hook: Option<Box<FailurePredicate>>,
    attempts: Mutex<HashMap<String, u64>>,
    stats: ProviderStats,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl MockProvider {
    pub fn new() -> Self {
        Self {
            nodata_pct: 0,
            latency: None,
            failure_hook: None,
            attempts: Mutex::new(HashMap::new()),
            stats: ProviderStats::default(),
        }
    }

    /// Percentage of pixels injected as nodata per scene (0-100).
    pub fn with_nodata_pct(mut self, pct: u8) -> Self {
        self.nodata_pct = pct;
        self
    }

    /// Real sleep injected at the start of every fetch.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Force SceneReadFailure when the predicate matches the canonical
    /// spatial key and the per-key attempt count (1-based).
    pub fn with_failure_hook(
        mut self,
        hook: impl Fn(&str, u64) -> bool + Send + Sync + 'static,
    ) -> Self {
        self.failure_hook = Some(Box::new(hook));
        self
    }
}

impl ImageryProvider for MockProvider {
    fn backend_id(&self) -> &'static str {
        "mock"
    }

    fn stats(&self) -> &ProviderStats {
        &self.stats
    }

    fn before_fetch(&self, spatial: &SpatialSpec) -> Result<(), ProviderError> {
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        if let Some(hook) = &self.failure_hook {
            let key = geoembed_core::canonical::canonical_spatial(spatial);
            let attempt = {
                let mut attempts = self.attempts.lock().unwrap();
                let n = attempts.entry(key.clone()).or_insert(0);
                *n += 1;
                *n
            };
            if hook(&key, attempt) {
                return Err(ProviderError::SceneReadFailure {
                    scene_id: key,
                    detail: format!("injected failure on attempt {attempt}"),
                });
            }
        }
        Ok(())
    }

    fn list_scenes(
        &self,
        collection: &str,
        temporal: &TemporalSpec,
        cloudy_pct: f64,
    ) -> Result<Vec<SceneRecord>, ProviderError> {
        if mock::collection_bands(collection).is_none() {
            return Err(ProviderError::UnknownCollection {
                collection: collection.to_string(),
            });
        }
        Ok(mock::scene_dates(temporal)
            .into_iter()
            .filter_map(|date| {
                let cloud_pct = mock::scene_cloud_pct(collection, date);
                (cloud_pct <= cloudy_pct).then(|| SceneRecord {
                    scene_id: mock::scene_id(collection, date),
                    date,
                    cloud_pct,
                    collection: collection.to_string(),
                })
            })
            .collect())
    }

    fn read_scene(
        &self,
        scene: &SceneRecord,
        fp: &Footprint,
        bands: &[String],
        fill_value: f32,
    ) -> Result<SceneLayer, ProviderError> {
        let t = mock::day_index(scene.date);
        let (h, w) = (fp.height_px as usize, fp.width_px as usize);
        let mut raster = Raster::filled(bands.len(), h, w, fill_value);
        // The field is separable: v = 0.5 + 0.25 sin(lon k) cos(lat k) + s(t)
        // with k = 10 + band. Precompute the per-row/per-column factors.
        for (b, _) in bands.iter().enumerate() {
            let k = (10 + b) as f64;
            let season = 0.1 * (2.0 * std::f64::consts::PI * t as f64 / 365.25).sin();
            let sin_lon: Vec<f64> = (0..w)
                .map(|c| (pixel_lon(fp, c) * k).sin())
                .collect();
            let cos_lat: Vec<f64> = (0..h)
                .map(|r| (pixel_lat(fp, r) * k).cos())
                .collect();
            for r in 0..h {
                let base = 0.5 + season;
                let row_factor = 0.25 * cos_lat[r];
                for c in 0..w {
                    raster.set(b, r, c, (base + row_factor * sin_lon[c]) as f32);
                }
            }
        }
        let mut fill_mask = vec![false; h * w];
        if self.nodata_pct > 0 {
            for r in 0..h {
                for c in 0..w {
                    if mock::is_nodata(&scene.scene_id, c, r, self.nodata_pct) {
                        fill_mask[r * w + c] = true;
                        for b in 0..bands.len() {
                            raster.set(b, r, c, fill_value);
                        }
                    }
                }
            }
        }
        Ok(SceneLayer { raster, fill_mask })
    }
}

fn pixel_lon(fp: &Footprint, col: usize) -> f64 {
    fp.center_lon + (col as f64 + 0.5 - fp.width_px as f64 / 2.0) * fp.lon_step
}

fn pixel_lat(fp: &Footprint, row: usize) -> f64 {
    fp.center_lat + (fp.height_px as f64 / 2.0 - (row as f64 + 0.5)) * fp.lat_step
}

/// Backend over a directory tree of `.ras` scenes:
/// `<root>/<collection>/<YYYY-MM-DD>/scene.json` + one `<band>.ras` per band.
pub struct LocalRasterProvider {
    root: PathBuf,
    stats: ProviderStats,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SceneJson {
    date: String,
    cloud_pct: f64,
}

impl LocalRasterProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            stats: ProviderStats::default(),
        }
    }

    fn scene_dir(&self, scene: &SceneRecord) -> PathBuf {
        self.root
            .join(&scene.collection)
            .join(scene.date.format("%Y-%m-%d").to_string())
    }
}

impl ImageryProvider for LocalRasterProvider {
    fn backend_id(&self) -> &'static str {
        "local"
    }

    fn stats(&self) -> &ProviderStats {
        &self.stats
    }

    fn list_scenes(
        &self,
        collection: &str,
        temporal: &TemporalSpec,
        cloudy_pct: f64,
    ) -> Result<Vec<SceneRecord>, ProviderError> {
        let dir = self.root.join(collection);
        if !dir.is_dir() {
            return Err(ProviderError::UnknownCollection {
                collection: collection.to_string(),
            });
        }
        let mut scenes = Vec::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| ProviderError::SceneReadFailure {
            scene_id: collection.to_string(),
            detail: e.to_string(),
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| ProviderError::SceneReadFailure {
                scene_id: collection.to_string(),
                detail: e.to_string(),
            })?;
            let meta_path = entry.path().join("scene.json");
            if !meta_path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&meta_path).map_err(|e| {
                ProviderError::SceneReadFailure {
                    scene_id: meta_path.display().to_string(),
                    detail: e.to_string(),
                }
            })?;
            let meta: SceneJson =
                serde_json::from_str(&text).map_err(|e| ProviderError::SceneReadFailure {
                    scene_id: meta_path.display().to_string(),
                    detail: e.to_string(),
                })?;
            let date = NaiveDate::parse_from_str(&meta.date, "%Y-%m-%d").map_err(|e| {
                ProviderError::SceneReadFailure {
                    scene_id: meta_path.display().to_string(),
                    detail: format!("bad date {:?}: {e}", meta.date),
                }
            })?;
            if temporal.contains(date) && meta.cloud_pct <= cloudy_pct {
                scenes.push(SceneRecord {
                    scene_id: format!("{collection}/{}", meta.date),
                    date,
                    cloud_pct: meta.cloud_pct,
                    collection: collection.to_string(),
                });
            }
        }
        scenes.sort_by(|a, b| a.date.cmp(&b.date).then(a.scene_id.cmp(&b.scene_id)));
        Ok(scenes)
    }

    fn read_scene(
        &self,
        scene: &SceneRecord,
        fp: &Footprint,
        bands: &[String],
        fill_value: f32,
    ) -> Result<SceneLayer, ProviderError> {
        let dir = self.scene_dir(scene);
        let (h, w) = (fp.height_px as usize, fp.width_px as usize);
        let mut raster = Raster::filled(bands.len(), h, w, fill_value);
        let mut missing = vec![false; h * w];
        for (b, band) in bands.iter().enumerate() {
            let path = dir.join(format!("{band}.ras"));
            let (src, gt) = read_ras(&path).map_err(|e| ProviderError::SceneReadFailure {
                scene_id: scene.scene_id.clone(),
                detail: e.to_string(),
            })?;
            // Source fill: a pixel is nodata when every stored band says so;
            // scenes store one band per file, so flag per-file fill.
            let src_mask: Vec<bool> = (0..src.height * src.width)
                .map(|i| {
                    (0..src.channels).all(|c| src.data[c * src.height * src.width + i] == fill_value)
                })
                .collect();
            for r in 0..h {
                for c in 0..w {
                    let (lon, lat) = fp.pixel_center(r as u32, c as u32);
                    match sample_geo(&src, Some(&src_mask), &gt, 0, lon, lat, Resampling::Bilinear)
                    {
                        Some(v) => raster.set(b, r, c, v),
                        None => missing[r * w + c] = true,
                    }
                }
            }
        }
        let mut fill_mask = vec![false; h * w];
        for (i, flag) in missing.iter().enumerate() {
            if *flag {
                fill_mask[i] = true;
                let (r, c) = (i / w, i % w);
                for b in 0..bands.len() {
                    raster.set(b, r, c, fill_value);
                }
            }
        }
        Ok(SceneLayer { raster, fill_mask })
    }
}
