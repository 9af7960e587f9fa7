//! On-disk fixture generators: a local raster scene store mirroring the
//! synthetic catalog, and a precomputed embedding tile store.

use std::path::Path;

use geoembed_core::geo::{footprint, Footprint, FootprintLimits};
use geoembed_core::mock;
use geoembed_core::raster::Raster;
use geoembed_core::spec::{SpatialSpec, SpecError, TemporalSpec};

use crate::ras::{write_ras, RasError};
use crate::store::{store_pixel_value, StoreMeta};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ras(#[from] RasError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("unknown collection {collection:?}")]
    UnknownCollection { collection: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FixtureError {
    FixtureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Degree-space geotransform of a footprint grid (pixel (0,0) corner at
/// the north-west).
fn degree_geotransform(fp: &Footprint) -> [f64; 6] {
    [
        fp.center_lon - fp.width_px as f64 / 2.0 * fp.lon_step,
        fp.lon_step,
        0.0,
        fp.center_lat + fp.height_px as f64 / 2.0 * fp.lat_step,
        0.0,
        -fp.lat_step,
    ]
}

// ---------------------------------------------------------------------------
// Local raster scene store

#[derive(Debug, Clone)]
pub struct RasterStoreSpec {
    pub collection: String,
    /// Coverage center and half-extent of the area the store must serve.
    pub lon: f64,
    pub lat: f64,
    pub buffer_m: f64,
    pub scale_m: f64,
    pub temporal: TemporalSpec,
    /// Extra pixels of slack on every side beyond the requested buffer, so
    /// requests at the nominal buffer resample strictly inside the rasters.
    pub margin_px: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterStoreReport {
    pub scenes: usize,
    pub width: u32,
    pub height: u32,
    pub bands: Vec<String>,
}

/// Materialize catalog scenes as `<root>/<collection>/<date>/{scene.json,
/// <band>.ras}`. Values reproduce the synthetic pixel field, and the grid is
/// the request grid widened by `margin_px`, so pixel centers coincide with
/// request pixel centers and resampling is exact.
pub fn make_raster_store(
    root: &Path,
    spec: &RasterStoreSpec,
) -> Result<RasterStoreReport, FixtureError> {
    let bands = mock::collection_bands(&spec.collection).ok_or_else(|| {
        FixtureError::UnknownCollection {
            collection: spec.collection.clone(),
        }
    })?;
    let widened = SpatialSpec::point_buffer(
        spec.lon,
        spec.lat,
        spec.buffer_m + spec.margin_px as f64 * spec.scale_m,
    );
    let fp = footprint(&widened, spec.scale_m, &FootprintLimits::default())?;
    let gt = degree_geotransform(&fp);
    let (w, h) = (fp.width_px as usize, fp.height_px as usize);

    // Separable field: precompute per-column and per-row factors once.
    let dates = mock::scene_dates(&spec.temporal);
    let mut scenes = 0usize;
    for date in &dates {
        let day = mock::day_index(*date);
        let dir = root
            .join(&spec.collection)
            .join(date.format("%Y-%m-%d").to_string());
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let scene_json = serde_json::json!({
            "date": date.format("%Y-%m-%d").to_string(),
            "cloud_pct": mock::scene_cloud_pct(&spec.collection, *date),
        });
        let meta_path = dir.join("scene.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&scene_json).unwrap())
            .map_err(|e| io_err(&meta_path, e))?;
        for (bi, band) in bands.iter().enumerate() {
            let mut raster = Raster::filled(1, h, w, 0.0);
            for row in 0..h {
                for col in 0..w {
                    let (lon, lat) = fp.pixel_center(row as u32, col as u32);
                    raster.set(0, row, col, mock::pixel_value(bi, lon, lat, day) as f32);
                }
            }
            let band_path = dir.join(format!("{band}.ras"));
            write_ras(&band_path, &raster, &gt)?;
        }
        scenes += 1;
    }
    Ok(RasterStoreReport {
        scenes,
        width: fp.width_px,
        height: fp.height_px,
        bands: bands.iter().map(|b| b.to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Precomputed embedding tile store

#[derive(Debug, Clone)]
pub struct PrecomputedStoreSpec {
    pub model_id: String,
    pub embed_dim: usize,
    pub scale_m: f64,
    pub tile_px: usize,
    pub years: Vec<i32>,
    /// Coverage center and half-extent the tiles must span.
    pub lon: f64,
    pub lat: f64,
    pub buffer_m: f64,
    /// Extra rings of tiles around the covering set.
    pub pad_tiles: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecomputedStoreReport {
    pub tiles: usize,
    pub tile_range_x: (i64, i64),
    pub tile_range_y: (i64, i64),
}

/// Build `store.json` plus seeded `<year>/tile_<tx>_<ty>.ras` tiles covering
/// the given area. Values are a pure function of (model, year, channel,
/// global pixel index), so any tiling of the same area reads back equal.
pub fn make_precomputed_store(
    root: &Path,
    spec: &PrecomputedStoreSpec,
) -> Result<PrecomputedStoreReport, FixtureError> {
    const ORIGIN_LON: f64 = -180.0;
    const ORIGIN_LAT: f64 = 90.0;
    let px_deg = spec.scale_m / geoembed_core::geo::METERS_PER_DEG_LAT;

    let roi = SpatialSpec::point_buffer(spec.lon, spec.lat, spec.buffer_m);
    let fp = footprint(&roi, spec.scale_m, &FootprintLimits::default())?;
    let global = |lon: f64, lat: f64| -> (i64, i64) {
        (
            ((lon - ORIGIN_LON) / px_deg).floor() as i64,
            ((ORIGIN_LAT - lat) / px_deg).floor() as i64,
        )
    };
    let corners = [
        fp.pixel_center(0, 0),
        fp.pixel_center(0, fp.width_px - 1),
        fp.pixel_center(fp.height_px - 1, 0),
        fp.pixel_center(fp.height_px - 1, fp.width_px - 1),
    ];
    let t = spec.tile_px as i64;
    let mut tx_min = i64::MAX;
    let mut tx_max = i64::MIN;
    let mut ty_min = i64::MAX;
    let mut ty_max = i64::MIN;
    for (lon, lat) in corners {
        let (sx, sy) = global(lon, lat);
        tx_min = tx_min.min(sx.div_euclid(t));
        tx_max = tx_max.max(sx.div_euclid(t));
        ty_min = ty_min.min(sy.div_euclid(t));
        ty_max = ty_max.max(sy.div_euclid(t));
    }
    tx_min -= spec.pad_tiles;
    tx_max += spec.pad_tiles;
    ty_min -= spec.pad_tiles;
    ty_max += spec.pad_tiles;

    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let meta = StoreMeta {
        model_id: spec.model_id.clone(),
        embed_dim: spec.embed_dim,
        scale_m: spec.scale_m,
        tile_px: spec.tile_px as u32,
        origin_lon: ORIGIN_LON,
        origin_lat: ORIGIN_LAT,
        years: spec.years.clone(),
    };
    let meta_path = root.join("store.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| io_err(&meta_path, e))?;

    let mut tiles = 0usize;
    for year in &spec.years {
        let year_dir = root.join(year.to_string());
        std::fs::create_dir_all(&year_dir).map_err(|e| io_err(&year_dir, e))?;
        for ty in ty_min..=ty_max {
            for tx in tx_min..=tx_max {
                let mut raster =
                    Raster::filled(spec.embed_dim, spec.tile_px, spec.tile_px, 0.0);
                for k in 0..spec.embed_dim {
                    for row in 0..spec.tile_px {
                        for col in 0..spec.tile_px {
                            let sx = tx * t + col as i64;
                            let sy = ty * t + row as i64;
                            raster.set(
                                k,
                                row,
                                col,
                                store_pixel_value(&spec.model_id, *year, k, sx, sy),
                            );
                        }
                    }
                }
                let gt = [
                    ORIGIN_LON + (tx * t) as f64 * px_deg,
                    px_deg,
                    0.0,
                    ORIGIN_LAT - (ty * t) as f64 * px_deg,
                    0.0,
                    -px_deg,
                ];
                write_ras(&year_dir.join(format!("tile_{tx}_{ty}.ras")), &raster, &gt)?;
                tiles += 1;
            }
        }
    }
    Ok(PrecomputedStoreReport {
        tiles,
        tile_range_x: (tx_min, tx_max),
        tile_range_y: (ty_min, ty_max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ImageryProvider, LocalRasterProvider, MockProvider};
    use crate::store::PrecomputedStore;
    use geoembed_core::spec::{CompositeMethod, SensorSpec};

    fn sensor() -> SensorSpec {
        SensorSpec {
            collection: "mock-a".into(),
            bands: vec!["b1".into(), "b2".into(), "b3".into(), "b4".into()],
            scale_m: 10.0,
            cloudy_pct: 40.0,
            fill_value: 0.0,
            composite: CompositeMethod::Median,
            check_input: false,
        }
    }

    #[test]
    fn raster_store_layout_and_scene_count() {
        let dir = tempfile::tempdir().unwrap();
        let temporal = TemporalSpec::range("2022-06-01", "2022-07-01").unwrap();
        let report = make_raster_store(
            dir.path(),
            &RasterStoreSpec {
                collection: "mock-a".into(),
                lon: 121.5,
                lat: 31.2,
                buffer_m: 100.0,
                scale_m: 10.0,
                temporal,
                margin_px: 2,
            },
        )
        .unwrap();
        // Catalog scenes fall every 5 days from the epoch: 06-02 .. 06-27.
        assert_eq!(report.scenes, 6);
        // 2*100/10 = 20 px widened by 2 px margin per side.
        assert_eq!((report.width, report.height), (24, 24));
        let scene_dir = dir.path().join("mock-a/2022-06-02");
        assert!(scene_dir.join("scene.json").is_file());
        for b in ["b1", "b2", "b3", "b4"] {
            assert!(scene_dir.join(format!("{b}.ras")).is_file());
        }
    }

    #[test]
    fn local_store_matches_mock_backend() {
        let dir = tempfile::tempdir().unwrap();
        // Window wide enough that some scenes survive the cloud filter.
        let temporal = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        make_raster_store(
            dir.path(),
            &RasterStoreSpec {
                collection: "mock-a".into(),
                lon: 121.5,
                lat: 31.2,
                buffer_m: 150.0,
                scale_m: 10.0,
                temporal,
                margin_px: 4,
            },
        )
        .unwrap();
        let spatial = SpatialSpec::point_buffer(121.5, 31.2, 150.0);
        let sensor = sensor();
        let limits = FootprintLimits::default();
        let mock = MockProvider::new();
        let local = LocalRasterProvider::new(dir.path());
        let a = mock.fetch(&spatial, &temporal, &sensor, &limits).unwrap();
        let b = local.fetch(&spatial, &temporal, &sensor, &limits).unwrap();
        assert_eq!(a.data.channels, b.data.channels);
        assert_eq!(a.data.height, b.data.height);
        assert_eq!(a.data.width, b.data.width);
        let mut max_diff = 0f32;
        for (x, y) in a.data.data.iter().zip(&b.data.data) {
            max_diff = max_diff.max((x - y).abs());
        }
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
        assert_eq!(a.source_scenes, b.source_scenes);
    }

    #[test]
    fn precomputed_store_covers_roi_and_reads_back_seeded_values() {
        let dir = tempfile::tempdir().unwrap();
        let report = make_precomputed_store(
            dir.path(),
            &PrecomputedStoreSpec {
                model_id: "pre-test".into(),
                embed_dim: 3,
                scale_m: 10.0,
                tile_px: 16,
                years: vec![2022],
                lon: 121.5,
                lat: 31.2,
                buffer_m: 200.0,
                pad_tiles: 1,
            },
        )
        .unwrap();
        assert!(report.tiles >= 9, "tiles {}", report.tiles);
        let store = PrecomputedStore::open(dir.path()).unwrap();
        let v = store.read_pixel(2022, 121.5, 31.2).unwrap();
        let (sx, sy) = store.global_px(121.5, 31.2);
        for (k, got) in v.iter().enumerate() {
            assert_eq!(*got, store_pixel_value("pre-test", 2022, k, sx, sy));
        }
    }
}
