//! Deterministic synthetic imagery source.
//!
//! One scene every five days starting 1970-01-01 per collection. Scene
//! cloud cover, nodata placement, and pixel values are all hash- or
//! formula-derived, so any backend materializing this catalog produces
//! byte-identical data for the same request.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use chrono::NaiveDate;

use crate::hashing::fnv1a64;
use crate::spec::TemporalSpec;

pub const SCENE_INTERVAL_DAYS: i64 = 5;

pub fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")
}

/// Days since 1970-01-01.
pub fn day_index(d: NaiveDate) -> i64 {
    (d - epoch()).num_days()
}

/// Band lists of the built-in mock collections.
pub fn collection_bands(collection: &str) -> Option<&'static [&'static str]> {
    match collection {
        "mock-a" => Some(&["b1", "b2", "b3", "b4"]),
        "mock-b" => Some(&["b1", "b2"]),
        _ => None,
    }
}

/// Catalog dates inside the half-open window: every date whose day index
/// is a multiple of the scene interval.
pub fn scene_dates(window: &TemporalSpec) -> Vec<NaiveDate> {
    let start_idx = day_index(window.start);
    let end_idx = day_index(window.end);
    let first = start_idx.div_euclid(SCENE_INTERVAL_DAYS) * SCENE_INTERVAL_DAYS;
    let first = if first < start_idx {
        first + SCENE_INTERVAL_DAYS
    } else {
        first
    };
    let mut out = Vec::new();
    let mut idx = first;
    while idx < end_idx {
        out.push(epoch() + chrono::Days::new(idx as u64));
        idx += SCENE_INTERVAL_DAYS;
    }
    out
}

/// Hash-derived scene cloud percentage in [0, 100).
pub fn scene_cloud_pct(collection: &str, date: NaiveDate) -> f64 {
    let key = format!("{collection}:{date}");
    (fnv1a64(key.as_bytes()) % 10_000) as f64 / 100.0
}

pub fn scene_id(collection: &str, date: NaiveDate) -> String {
    format!("{collection}/{date}")
}

/// Synthetic pixel value: smooth in space, periodic in time, bounded to
/// [0.15, 0.85].
pub fn pixel_value(band_index: usize, lon: f64, lat: f64, day_index: i64) -> f64 {
    let k = (10 + band_index) as f64;
    0.5 + 0.25 * libm::sin(lon * k) * libm::cos(lat * k)
        + 0.1 * libm::sin(2.0 * core::f64::consts::PI * day_index as f64 / 365.25)
}

/// Hash-derived nodata placement: pixel (col, row) of a scene is fill when
/// the hash bucket falls under `nodata_pct`.
pub fn is_nodata(scene_id: &str, col: usize, row: usize, nodata_pct: u8) -> bool {
    if nodata_pct == 0 {
        return false;
    }
    let key = format!("{scene_id}:{col}:{row}");
    fnv1a64(key.as_bytes()) % 100 < nodata_pct as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_2022_summer_has_19_scenes() {
        // Oracle: enumerate every day of the window and keep multiples of 5.
        let w = TemporalSpec::range("2022-06-01", "2022-09-01").unwrap();
        let mut expected = Vec::new();
        let mut d = w.start;
        while d < w.end {
            if day_index(d) % SCENE_INTERVAL_DAYS == 0 {
                expected.push(d);
            }
            d = d.succ_opt().unwrap();
        }
        let got = scene_dates(&w);
        assert_eq!(got, expected);
        assert_eq!(got.len(), 19);
    }

    #[test]
    fn scene_dates_respect_half_open_end() {
        // 1970-01-06 is a catalog date (day 5); a window ending there
        // excludes it, one ending a day later includes it.
        let w = TemporalSpec::range("1970-01-01", "1970-01-06").unwrap();
        assert_eq!(scene_dates(&w), alloc::vec![epoch()]);
        let w = TemporalSpec::range("1970-01-01", "1970-01-07").unwrap();
        assert_eq!(
            scene_dates(&w),
            alloc::vec![epoch(), NaiveDate::from_ymd_opt(1970, 1, 6).unwrap()]
        );
    }

    #[test]
    fn pixel_at_origin_day_zero() {
        assert_eq!(pixel_value(0, 0.0, 0.0, 0), 0.5);
        assert_eq!(pixel_value(3, 0.0, 0.0, 0), 0.5);
    }

    #[test]
    fn pixel_at_quarter_period() {
        // lon = pi/20 makes sin(lon * 10) = 1 for band 0.
        let v = pixel_value(0, core::f64::consts::PI / 20.0, 0.0, 0);
        assert!((v - 0.75).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn pixel_amplitude_bounds() {
        let mut g = crate::hashing::SplitMix64::new(99);
        for _ in 0..5000 {
            let lon = (g.next_unit()) * 180.0;
            let lat = (g.next_unit()) * 90.0;
            let b = (g.next_u64() % 4) as usize;
            let t = (g.next_u64() % 40_000) as i64;
            let v = pixel_value(b, lon, lat, t);
            assert!((0.15..=0.85).contains(&v), "out of bounds: {v}");
        }
    }

    #[test]
    fn cloud_filter_monotone_in_threshold() {
        let w = TemporalSpec::year(2022).unwrap();
        let dates = scene_dates(&w);
        let count_at = |max: f64| {
            dates
                .iter()
                .filter(|&&d| scene_cloud_pct("mock-a", d) <= max)
                .count()
        };
        let mut prev = 0;
        for pct in [0.0, 10.0, 25.0, 50.0, 75.0, 100.0] {
            let n = count_at(pct);
            assert!(n >= prev);
            prev = n;
        }
        assert_eq!(count_at(100.0), dates.len());
    }

    #[test]
    fn nodata_fraction_tracks_percentage() {
        let mut hits = 0;
        let total = 10_000;
        for col in 0..100 {
            for row in 0..100 {
                if is_nodata("mock-a/2022-06-02", col, row, 30) {
                    hits += 1;
                }
            }
        }
        let frac = hits as f64 / total as f64;
        assert!((frac - 0.30).abs() < 0.03, "fraction {frac}");
        assert!(!is_nodata("mock-a/2022-06-02", 5, 5, 0));
    }
}
