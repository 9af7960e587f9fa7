//! Footprint realization: the planar pixel grid a spatial spec maps to at a
//! given ground resolution.
//!
//! Uses a local equirectangular approximation: one degree of latitude is
//! 111320 m, one degree of longitude is 111320 * cos(lat) m. Deterministic
//! and dependency-free, adequate at region-of-interest scale.

use crate::spec::{SpatialSpec, SpecError};

pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// Footprint size limits, checked before any provider work.
#[derive(Debug, Clone, Copy)]
pub struct FootprintLimits {
    pub max_px_per_side: u32,
    pub max_total_px: u64,
}

impl Default for FootprintLimits {
    fn default() -> Self {
        Self {
            max_px_per_side: 16_384,
            max_total_px: 1 << 28,
        }
    }
}

/// Meters of one degree of longitude at the given latitude.
pub fn meters_per_deg_lon(lat_deg: f64) -> f64 {
    let c = libm::cos(lat_deg.to_radians());
    // Keep a positive floor so poles do not divide by zero downstream.
    METERS_PER_DEG_LAT * c.max(1e-12)
}

/// A north-up pixel grid over a spatial spec.
///
/// The grid has square pixels of exactly `scale_m` meters; the covered
/// extent is the requested extent rounded up to whole pixels, centered on
/// the request center. Pixel (0, 0) is the north-west corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub center_lon: f64,
    pub center_lat: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub scale_m: f64,
    /// Degrees of longitude per pixel.
    pub lon_step: f64,
    /// Degrees of latitude per pixel.
    pub lat_step: f64,
}

impl Footprint {
    pub fn width_m(&self) -> f64 {
        self.width_px as f64 * self.scale_m
    }

    pub fn height_m(&self) -> f64 {
        self.height_px as f64 * self.scale_m
    }

    pub fn total_px(&self) -> u64 {
        self.width_px as u64 * self.height_px as u64
    }

    /// Geographic coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: u32, col: u32) -> (f64, f64) {
        let dx = col as f64 + 0.5 - self.width_px as f64 / 2.0;
        let dy = self.height_px as f64 / 2.0 - (row as f64 + 0.5);
        (
            self.center_lon + dx * self.lon_step,
            self.center_lat + dy * self.lat_step,
        )
    }

    /// Affine geotransform in the planar footprint frame (meters, origin at
    /// the footprint center, x east, y north): maps pixel (col, row) corner
    /// to planar coordinates.
    pub fn geotransform(&self) -> [f64; 6] {
        [
            -self.width_m() / 2.0,
            self.scale_m,
            0.0,
            self.height_m() / 2.0,
            0.0,
            -self.scale_m,
        ]
    }
}

/// Realize the pixel grid for a validated spatial spec at `scale_m` meters
/// per pixel, enforcing footprint limits.
pub fn footprint(
    spec: &SpatialSpec,
    scale_m: f64,
    limits: &FootprintLimits,
) -> Result<Footprint, SpecError> {
    if !(scale_m > 0.0) {
        return Err(SpecError::NonPositiveScale { value: scale_m });
    }
    let (center_lon, center_lat, width_m, height_m) = match spec {
        SpatialSpec::PointBuffer {
            lon, lat, buffer_m, ..
        } => (*lon, *lat, 2.0 * buffer_m, 2.0 * buffer_m),
        SpatialSpec::BBox {
            minlon,
            minlat,
            maxlon,
            maxlat,
            ..
        } => {
            let center_lat = (minlat + maxlat) / 2.0;
            let width_m = (maxlon - minlon) * meters_per_deg_lon(center_lat);
            let height_m = (maxlat - minlat) * METERS_PER_DEG_LAT;
            ((minlon + maxlon) / 2.0, center_lat, width_m, height_m)
        }
    };

    let width_px = px_count(width_m, scale_m);
    let height_px = px_count(height_m, scale_m);
    if width_px > limits.max_px_per_side as u64
        || height_px > limits.max_px_per_side as u64
        || width_px * height_px > limits.max_total_px
    {
        return Err(SpecError::AreaLimitExceeded {
            width_px,
            height_px,
            max_side: limits.max_px_per_side,
            max_total: limits.max_total_px,
        });
    }

    Ok(Footprint {
        center_lon,
        center_lat,
        width_px: width_px as u32,
        height_px: height_px as u32,
        scale_m,
        lon_step: scale_m / meters_per_deg_lon(center_lat),
        lat_step: scale_m / METERS_PER_DEG_LAT,
    })
}

fn px_count(extent_m: f64, scale_m: f64) -> u64 {
    let px = libm::ceil(extent_m / scale_m);
    if px < 1.0 {
        1
    } else {
        px as u64
    }
}
