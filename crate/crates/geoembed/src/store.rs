//! Precomputed embedding tile store: a directory of per-year `.ras` tiles
//! on a fixed global grid, described by `store.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use geoembed_core::geo::METERS_PER_DEG_LAT;
use geoembed_core::model::EmbeddingData;
use geoembed_core::raster::Raster;

use crate::ras::{read_ras, RasError};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StoreMeta {
    pub model_id: String,
    pub embed_dim: usize,
    pub scale_m: f64,
    pub tile_px: u32,
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub years: Vec<i32>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store miss: {0}")]
    Miss(String),
    #[error("store metadata unreadable at {path}: {detail}")]
    BadMeta { path: String, detail: String },
    #[error(transparent)]
    Ras(#[from] RasError),
}

/// Handle to an on-disk store; tiles are read per lookup.
pub struct PrecomputedStore {
    root: PathBuf,
    pub meta: StoreMeta,
}

impl PrecomputedStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let meta_path = root.join("store.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| StoreError::BadMeta {
            path: meta_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let meta: StoreMeta = serde_json::from_str(&text).map_err(|e| StoreError::BadMeta {
            path: meta_path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(Self { root, meta })
    }

    /// Degrees per store pixel (same step on both axes).
    pub fn px_deg(&self) -> f64 {
        self.meta.scale_m / METERS_PER_DEG_LAT
    }

    /// Global store pixel indices for a geographic point.
    pub fn global_px(&self, lon: f64, lat: f64) -> (i64, i64) {
        let px = self.px_deg();
        (
            ((lon - self.meta.origin_lon) / px).floor() as i64,
            ((self.meta.origin_lat - lat) / px).floor() as i64,
        )
    }

    /// Tile index and intra-tile offset for a global pixel index.
    pub fn tile_of(&self, sx: i64, sy: i64) -> ((i64, i64), (usize, usize)) {
        let t = self.meta.tile_px as i64;
        let (tx, ty) = (sx.div_euclid(t), sy.div_euclid(t));
        ((tx, ty), ((sx.rem_euclid(t)) as usize, (sy.rem_euclid(t)) as usize))
    }

    pub fn tile_path(&self, year: i32, tx: i64, ty: i64) -> PathBuf {
        self.root
            .join(year.to_string())
            .join(format!("tile_{tx}_{ty}.ras"))
    }

    fn load_tile(&self, year: i32, tx: i64, ty: i64) -> Result<Raster, StoreError> {
        let path = self.tile_path(year, tx, ty);
        if !path.is_file() {
            return Err(StoreError::Miss(format!(
                "tile ({tx}, {ty}) for year {year} not in store"
            )));
        }
        let (raster, _gt) = read_ras(&path)?;
        Ok(raster)
    }

    /// Embedding vector at one geographic point, reading straight from the
    /// containing tile. Test oracle for `lookup_grid` stitching.
    pub fn read_pixel(&self, year: i32, lon: f64, lat: f64) -> Result<Vec<f32>, StoreError> {
        self.check_year(year)?;
        let (sx, sy) = self.global_px(lon, lat);
        let ((tx, ty), (ox, oy)) = self.tile_of(sx, sy);
        let tile = self.load_tile(year, tx, ty)?;
        Ok((0..tile.channels).map(|c| tile.get(c, oy, ox)).collect())
    }

    fn check_year(&self, year: i32) -> Result<(), StoreError> {
        if !self.meta.years.contains(&year) {
            return Err(StoreError::Miss(format!(
                "year {year} not in store (has {:?})",
                self.meta.years
            )));
        }
        Ok(())
    }

    /// Assemble a d x h x w window over the pixel centers given by
    /// `centers(row, col) -> (lon, lat)`, caching tiles per call.
    pub fn lookup_grid(
        &self,
        year: i32,
        height: usize,
        width: usize,
        centers: impl Fn(usize, usize) -> (f64, f64),
    ) -> Result<EmbeddingData, StoreError> {
        self.check_year(year)?;
        let d = self.meta.embed_dim;
        let mut values = vec![0.0f32; d * height * width];
        let mut cache: HashMap<(i64, i64), Raster> = HashMap::new();
        for r in 0..height {
            for c in 0..width {
                let (lon, lat) = centers(r, c);
                let (sx, sy) = self.global_px(lon, lat);
                let ((tx, ty), (ox, oy)) = self.tile_of(sx, sy);
                if !cache.contains_key(&(tx, ty)) {
                    cache.insert((tx, ty), self.load_tile(year, tx, ty)?);
                }
                let tile = &cache[&(tx, ty)];
                for k in 0..d {
                    values[(k * height + r) * width + c] = tile.get(k, oy, ox);
                }
            }
        }
        Ok(EmbeddingData::Grid {
            dim: d,
            height,
            width,
            values,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// Deterministic store pixel value: seeded by model, year, channel, and
/// GLOBAL pixel index, so values are independent of tiling.
pub fn store_pixel_value(model_id: &str, year: i32, channel: usize, sx: i64, sy: i64) -> f32 {
    let seed = geoembed_core::hashing::fnv1a64(
        format!("{model_id}:{year}:{channel}:{sx}:{sy}").as_bytes(),
    );
    geoembed_core::hashing::SplitMix64::new(seed).next_unit() as f32
}
