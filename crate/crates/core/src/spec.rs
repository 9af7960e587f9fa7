//! Request specification types: spatial extent, temporal window, output
//! shape, and sensor configuration.
//!
//! All downstream stages consume only validated, canonicalized specs.
//! Validation normalizes coordinates (1e-7 degree rounding) so that equal
//! requests produce byte-identical canonical serializations.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// Allowed year range for [`TemporalSpec::year`].
pub const MIN_YEAR: i32 = 1970;
pub const MAX_YEAR: i32 = 2100;

fn default_crs() -> String {
    "EPSG:4326".to_string()
}

/// Spatial extent of a request: a geographic bounding box or a point with
/// a square buffer, in EPSG:4326 degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpatialSpec {
    #[serde(rename = "bbox")]
    BBox {
        minlon: f64,
        minlat: f64,
        maxlon: f64,
        maxlat: f64,
        #[serde(default = "default_crs")]
        crs: String,
    },
    PointBuffer {
        lon: f64,
        lat: f64,
        buffer_m: f64,
        #[serde(default = "default_crs")]
        crs: String,
    },
}

impl SpatialSpec {
    pub fn bbox(minlon: f64, minlat: f64, maxlon: f64, maxlat: f64) -> Self {
        SpatialSpec::BBox {
            minlon,
            minlat,
            maxlon,
            maxlat,
            crs: default_crs(),
        }
    }

    pub fn point_buffer(lon: f64, lat: f64, buffer_m: f64) -> Self {
        SpatialSpec::PointBuffer {
            lon,
            lat,
            buffer_m,
            crs: default_crs(),
        }
    }

    pub fn crs(&self) -> &str {
        match self {
            SpatialSpec::BBox { crs, .. } => crs,
            SpatialSpec::PointBuffer { crs, .. } => crs,
        }
    }
}

/// Half-open time window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalSpec {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl TemporalSpec {
    /// Window covering a single calendar year: `[y-01-01, (y+1)-01-01)`.
    pub fn year(y: i32) -> Result<Self, SpecError> {
        if !(MIN_YEAR..=MAX_YEAR).contains(&y) {
            return Err(SpecError::InvalidYear {
                year: y,
                min: MIN_YEAR,
                max: MAX_YEAR,
            });
        }
        let start = NaiveDate::from_ymd_opt(y, 1, 1).expect("bounded year");
        let end = NaiveDate::from_ymd_opt(y + 1, 1, 1).expect("bounded year");
        Ok(Self { start, end })
    }

    /// Window from ISO-8601 `YYYY-MM-DD` strings; rejects invalid calendar
    /// dates and reversed (or empty) ranges.
    pub fn range(start: &str, end: &str) -> Result<Self, SpecError> {
        let start = parse_date(start)?;
        let end = parse_date(end)?;
        if end <= start {
            return Err(SpecError::ReversedRange { start, end });
        }
        Ok(Self { start, end })
    }

    /// A date is inside iff `start <= d < end`.
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d < self.end
    }

    /// When the window is exactly one calendar year, returns it.
    ///
    /// Annual-semantics models accept only such windows.
    pub fn as_year(&self) -> Option<i32> {
        let y = self.start.year();
        if self.start == NaiveDate::from_ymd_opt(y, 1, 1)?
            && self.end == NaiveDate::from_ymd_opt(y + 1, 1, 1)?
        {
            Some(y)
        } else {
            None
        }
    }

    /// Number of days in the window.
    pub fn num_days(&self) -> i64 {
        (self.end - self.start).num_days()
    }
}

fn parse_date(s: &str) -> Result<NaiveDate, SpecError> {
    // Strict YYYY-MM-DD only; chrono's %Y would also accept e.g. "+02022".
    let bytes = s.as_bytes();
    let strict_shape = bytes.len() == 10
        && bytes[4] == b'-'
        && bytes[7] == b'-'
        && bytes
            .iter()
            .enumerate()
            .all(|(i, b)| i == 4 || i == 7 || b.is_ascii_digit());
    if !strict_shape {
        return Err(SpecError::InvalidDate {
            input: s.to_string(),
        });
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| SpecError::InvalidDate {
        input: s.to_string(),
    })
}

/// Requested embedding shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Pooled,
    Grid,
}

impl OutputMode {
    pub fn parse(s: &str) -> Result<Self, SpecError> {
        match s {
            "pooled" => Ok(OutputMode::Pooled),
            "grid" => Ok(OutputMode::Grid),
            other => Err(SpecError::InvalidOutputMode {
                given: other.to_string(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OutputMode::Pooled => "pooled",
            OutputMode::Grid => "grid",
        }
    }
}

/// Spatial aggregation used in pooled mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

impl Pooling {
    pub fn parse(s: &str) -> Result<Self, SpecError> {
        match s {
            "mean" => Ok(Pooling::Mean),
            other => Err(SpecError::InvalidPooling {
                given: other.to_string(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
        }
    }
}

/// Output shape and aggregation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub mode: OutputMode,
    /// Target ground resolution; honored only by resolution-aligned models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_m: Option<f64>,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
}

fn default_pooling() -> Pooling {
    Pooling::Mean
}

impl OutputSpec {
    pub fn pooled() -> Self {
        Self {
            mode: OutputMode::Pooled,
            scale_m: None,
            pooling: Pooling::Mean,
        }
    }

    pub fn grid() -> Self {
        Self {
            mode: OutputMode::Grid,
            scale_m: None,
            pooling: Pooling::Mean,
        }
    }

    pub fn grid_at_scale(scale_m: f64) -> Self {
        Self {
            mode: OutputMode::Grid,
            scale_m: Some(scale_m),
            pooling: Pooling::Mean,
        }
    }
}

/// Scene compositing method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMethod {
    Median,
    Mosaic,
}

impl CompositeMethod {
    pub fn parse(s: &str) -> Result<Self, SpecError> {
        match s {
            "median" => Ok(CompositeMethod::Median),
            "mosaic" => Ok(CompositeMethod::Mosaic),
            other => Err(SpecError::InvalidComposite {
                given: other.to_string(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CompositeMethod::Median => "median",
            CompositeMethod::Mosaic => "mosaic",
        }
    }
}

/// Source imagery configuration for on-the-fly inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub collection: String,
    pub bands: Vec<String>,
    pub scale_m: f64,
    /// Maximum scene cloud percentage admitted by the catalog filter.
    pub cloudy_pct: f64,
    pub fill_value: f32,
    pub composite: CompositeMethod,
    /// Enables the pre-inference input quality check.
    #[serde(default)]
    pub check_input: bool,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.bands.is_empty() {
            return Err(SpecError::EmptyBands);
        }
        for (i, b) in self.bands.iter().enumerate() {
            if self.bands[..i].contains(b) {
                return Err(SpecError::DuplicateBand { name: b.clone() });
            }
        }
        if !(self.scale_m > 0.0) {
            return Err(SpecError::NonPositiveScale {
                value: self.scale_m,
            });
        }
        if !(0.0..=100.0).contains(&self.cloudy_pct) {
            return Err(SpecError::CloudPctOutOfRange {
                value: self.cloudy_pct,
            });
        }
        Ok(())
    }
}

/// Validation and normalization failures for request specs.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("coordinate out of range: {name} = {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("reversed bbox: min corner must be strictly south-west of max corner")]
    ReversedBBox,
    #[error("buffer_m must be strictly positive, got {value}")]
    NonPositiveBuffer { value: f64 },
    #[error("unsupported crs {crs:?}: only EPSG:4326 is supported")]
    UnsupportedCrs { crs: String },
    #[error(
        "footprint {width_px}x{height_px} px exceeds limits (max {max_side} px per side, {max_total} px total)"
    )]
    AreaLimitExceeded {
        width_px: u64,
        height_px: u64,
        max_side: u32,
        max_total: u64,
    },
    #[error("year {year} outside allowed range [{min}, {max}]")]
    InvalidYear { year: i32, min: i32, max: i32 },
    #[error("invalid date {input:?}: expected a valid YYYY-MM-DD")]
    InvalidDate { input: String },
    #[error("reversed range: end {end} must be after start {start}")]
    ReversedRange { start: NaiveDate, end: NaiveDate },
    #[error("invalid output mode {given:?}: expected \"pooled\" or \"grid\"")]
    InvalidOutputMode { given: String },
    #[error("invalid pooling {given:?}: only \"mean\" is supported")]
    InvalidPooling { given: String },
    #[error("sensor bands must be non-empty")]
    EmptyBands,
    #[error("duplicate band {name:?}")]
    DuplicateBand { name: String },
    #[error("scale_m must be strictly positive, got {value}")]
    NonPositiveScale { value: f64 },
    #[error("cloudy_pct must be within [0, 100], got {value}")]
    CloudPctOutOfRange { value: f64 },
    #[error("invalid composite method {given:?}: expected \"median\" or \"mosaic\"")]
    InvalidComposite { given: String },
}

/// Round a coordinate to 1e-7 degrees so equal requests key identically
/// regardless of float formatting noise.
pub fn round_coord(x: f64) -> f64 {
    libm::round(x * 1e7) / 1e7
}

fn check_lon(name: &'static str, v: f64) -> Result<(), SpecError> {
    if v.is_finite() && (-180.0..=180.0).contains(&v) {
        Ok(())
    } else {
        Err(SpecError::OutOfRange { name, value: v })
    }
}

fn check_lat(name: &'static str, v: f64) -> Result<(), SpecError> {
    if v.is_finite() && (-90.0..=90.0).contains(&v) {
        Ok(())
    } else {
        Err(SpecError::OutOfRange { name, value: v })
    }
}

/// Validate a spatial spec and return its canonical form (coordinates
/// rounded to 1e-7 degrees). Idempotent.
pub fn validate_spatial(spec: &SpatialSpec) -> Result<SpatialSpec, SpecError> {
    if spec.crs() != "EPSG:4326" {
        return Err(SpecError::UnsupportedCrs {
            crs: spec.crs().to_string(),
        });
    }
    match spec {
        SpatialSpec::BBox {
            minlon,
            minlat,
            maxlon,
            maxlat,
            crs,
        } => {
            let minlon = round_coord(*minlon);
            let minlat = round_coord(*minlat);
            let maxlon = round_coord(*maxlon);
            let maxlat = round_coord(*maxlat);
            check_lon("minlon", minlon)?;
            check_lon("maxlon", maxlon)?;
            check_lat("minlat", minlat)?;
            check_lat("maxlat", maxlat)?;
            if !(minlon < maxlon && minlat < maxlat) {
                return Err(SpecError::ReversedBBox);
            }
            Ok(SpatialSpec::BBox {
                minlon,
                minlat,
                maxlon,
                maxlat,
                crs: crs.clone(),
            })
        }
        SpatialSpec::PointBuffer {
            lon,
            lat,
            buffer_m,
            crs,
        } => {
            let lon = round_coord(*lon);
            let lat = round_coord(*lat);
            check_lon("lon", lon)?;
            check_lat("lat", lat)?;
            if !(*buffer_m > 0.0) || !buffer_m.is_finite() {
                return Err(SpecError::NonPositiveBuffer { value: *buffer_m });
            }
            Ok(SpatialSpec::PointBuffer {
                lon,
                lat,
                buffer_m: *buffer_m,
                crs: crs.clone(),
            })
        }
    }
}
