//! Model capability descriptors and the pure inference math: input
//! normalization/resize/tiling, the deterministic reference forward pass,
//! and pooling.

use alloc::string::String;
use alloc::vec::Vec;

use crate::hashing::{fnv1a64, SplitMix64};
use crate::raster::Raster;
use crate::spec::{OutputMode, SensorSpec};

/// How a model acquires embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelBackend {
    OnTheFly,
    Precomputed,
}

impl ModelBackend {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelBackend::OnTheFly => "on_the_fly",
            ModelBackend::Precomputed => "precomputed",
        }
    }
}

/// Temporal windows a model accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSemantics {
    Range,
    Annual,
}

impl TemporalSemantics {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemporalSemantics::Range => "range",
            TemporalSemantics::Annual => "annual",
        }
    }
}

/// Per-band normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandStat {
    pub mean: f64,
    pub std: f64,
}

/// A model's self-description: everything capability matching needs to
/// accept or reject a request before any work happens.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Capability {
    pub model_id: String,
    pub backend: ModelBackend,
    pub output_modes: Vec<OutputMode>,
    pub temporal_semantics: TemporalSemantics,
    /// Imagery configuration used when no override is given (on-the-fly only).
    pub default_sensor: Option<SensorSpec>,
    /// Normalization stats aligned with `default_sensor.bands`.
    pub band_stats: Vec<BandStat>,
    pub embed_dim: usize,
    /// Model input edge length in pixels (on-the-fly only).
    pub input_size: Option<usize>,
    /// Patch edge length in pixels (on-the-fly only).
    pub patch_size: Option<usize>,
    /// Whether the embedding grid matches the input resolution pixel for
    /// pixel (precomputed stores).
    pub resolution_aligned: bool,
    /// Whether the model exposes a true batch inference path.
    pub supports_batch: bool,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("capability for {model_id:?} is inconsistent: {reason}")]
    InvalidCapability { model_id: String, reason: String },
    #[error(
        "band mismatch for {model_id:?}: observation has {got} bands, model expects {expected}"
    )]
    BandMismatch {
        model_id: String,
        got: usize,
        expected: usize,
    },
    #[error("empty grid cannot be pooled")]
    EmptyGrid,
}

impl Capability {
    pub fn supports_mode(&self, mode: OutputMode) -> bool {
        self.output_modes.contains(&mode)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| {
            Err(ModelError::InvalidCapability {
                model_id: self.model_id.clone(),
                reason: String::from(reason),
            })
        };
        if self.output_modes.is_empty() {
            return fail("output_modes must be non-empty");
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive");
        }
        if self.backend == ModelBackend::OnTheFly {
            let (Some(s), Some(p)) = (self.input_size, self.patch_size) else {
                return fail("on-the-fly models need input_size and patch_size");
            };
            if p == 0 || s % p != 0 {
                return fail("input_size must be a positive multiple of patch_size");
            }
            let Some(sensor) = &self.default_sensor else {
                return fail("on-the-fly models need a default sensor");
            };
            if self.band_stats.len() != sensor.bands.len() {
                return fail("band_stats must align with default sensor bands");
            }
        }
        Ok(())
    }
}

/// Input preparation strategy (resize vs non-overlapping tiling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPrep {
    Resize,
    Tile,
}

impl InputPrep {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputPrep::Resize => "resize",
            InputPrep::Tile => "tile",
        }
    }
}

impl Default for InputPrep {
    fn default() -> Self {
        InputPrep::Resize
    }
}

/// Normalized model input: one or more C x S x S tiles.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub tiles: Vec<Raster>,
    pub prep: InputPrep,
    /// Tile grid shape (rows, cols); (1, 1) in resize mode.
    pub tile_layout: (usize, usize),
}

/// Normalize per band and shape an observation raster into model input.
///
/// Resize mode bilinearly rescales the whole raster to S x S. Tile mode
/// covers it with non-overlapping S x S tiles, padding edge tiles with the
/// normalized fill value 0.
pub fn preprocess(
    obs: &Raster,
    cap: &Capability,
    prep: InputPrep,
) -> Result<ModelInput, ModelError> {
    let size = cap.input_size.expect("on-the-fly capability");
    if obs.channels != cap.band_stats.len() {
        return Err(ModelError::BandMismatch {
            model_id: cap.model_id.clone(),
            got: obs.channels,
            expected: cap.band_stats.len(),
        });
    }
    let normalized = normalize(obs, &cap.band_stats);
    match prep {
        InputPrep::Resize => Ok(ModelInput {
            tiles: alloc::vec![resize_bilinear(&normalized, size, size)],
            prep,
            tile_layout: (1, 1),
        }),
        InputPrep::Tile => {
            let rows = obs.height.div_ceil(size);
            let cols = obs.width.div_ceil(size);
            let mut tiles = Vec::with_capacity(rows * cols);
            for tr in 0..rows {
                for tc in 0..cols {
                    let mut tile = Raster::filled(obs.channels, size, size, 0.0);
                    for c in 0..obs.channels {
                        for r in 0..size {
                            let sr = tr * size + r;
                            if sr >= obs.height {
                                break;
                            }
                            for col in 0..size {
                                let sc = tc * size + col;
                                if sc >= obs.width {
                                    break;
                                }
                                tile.set(c, r, col, normalized.get(c, sr, sc));
                            }
                        }
                    }
                    tiles.push(tile);
                }
            }
            Ok(ModelInput {
                tiles,
                prep,
                tile_layout: (rows, cols),
            })
        }
    }
}

fn normalize(obs: &Raster, stats: &[BandStat]) -> Raster {
    let mut out = obs.clone();
    for (c, stat) in stats.iter().enumerate() {
        let plane = out.height * out.width;
        for i in 0..plane {
            let idx = c * plane + i;
            out.data[idx] = ((out.data[idx] as f64 - stat.mean) / stat.std) as f32;
        }
    }
    out
}

/// Bilinear resize in pixel space (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &Raster, out_h: usize, out_w: usize) -> Raster {
    let mut out = Raster::filled(src.channels, out_h, out_w, 0.0);
    let sy = src.height as f64 / out_h as f64;
    let sx = src.width as f64 / out_w as f64;
    for r in 0..out_h {
        let v = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, src.height as f64 - 1.0);
        let r0 = libm::floor(v) as usize;
        let r1 = (r0 + 1).min(src.height - 1);
        let fv = v - r0 as f64;
        for col in 0..out_w {
            let u = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, src.width as f64 - 1.0);
            let c0 = libm::floor(u) as usize;
            let c1 = (c0 + 1).min(src.width - 1);
            let fu = u - c0 as f64;
            for c in 0..src.channels {
                let a = src.get(c, r0, c0) as f64;
                let b = src.get(c, r0, c1) as f64;
                let d = src.get(c, r1, c0) as f64;
                let e = src.get(c, r1, c1) as f64;
                let top = a + (b - a) * fu;
                let bot = d + (e - d) * fu;
                out.set(c, r, col, (top + (bot - top) * fv) as f32);
            }
        }
    }
    out
}

/// Embedding payload: a pooled vector or a channel-major feature grid.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingData {
    Pooled { values: Vec<f32> },
    Grid { dim: usize, height: usize, width: usize, values: Vec<f32> },
}

impl EmbeddingData {
    pub fn mode(&self) -> OutputMode {
        match self {
            EmbeddingData::Pooled { .. } => OutputMode::Pooled,
            EmbeddingData::Grid { .. } => OutputMode::Grid,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            EmbeddingData::Pooled { values } => alloc::vec![values.len()],
            EmbeddingData::Grid {
                dim, height, width, ..
            } => alloc::vec![*dim, *height, *width],
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            EmbeddingData::Pooled { values } => values,
            EmbeddingData::Grid { values, .. } => values,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }
}

/// Reference-model weight matrix: embed_dim x (2 * channels), row-major,
/// entries uniform in [-1, 1) seeded by the model id.
pub fn reference_weights(model_id: &str, embed_dim: usize, in_dim: usize) -> Vec<f64> {
    let seed = fnv1a64(alloc::format!("{model_id}:weights").as_bytes());
    let mut rng = SplitMix64::new(seed);
    (0..embed_dim * in_dim).map(|_| rng.next_unit()).collect()
}

/// Deterministic reference forward pass.
///
/// For every non-overlapping P x P patch, compute per-band mean then
/// per-band population std (a 2C statistics vector), apply the seeded
/// linear map, and squash with tanh. Tile-mode inputs are stitched into a
/// single grid following the tile layout.
pub fn reference_forward(input: &ModelInput, cap: &Capability, weights: &[f64]) -> EmbeddingData {
    let size = cap.input_size.expect("on-the-fly capability");
    let patch = cap.patch_size.expect("on-the-fly capability");
    let per_tile = size / patch;
    let (rows, cols) = input.tile_layout;
    let (grid_h, grid_w) = (rows * per_tile, cols * per_tile);
    let d = cap.embed_dim;
    let mut values = alloc::vec![0.0f32; d * grid_h * grid_w];

    for (t, tile) in input.tiles.iter().enumerate() {
        let (tr, tc) = (t / cols, t % cols);
        for pr in 0..per_tile {
            for pc in 0..per_tile {
                let stats = patch_stats(tile, pr * patch, pc * patch, patch);
                let gr = tr * per_tile + pr;
                let gc = tc * per_tile + pc;
                for k in 0..d {
                    let row = &weights[k * stats.len()..(k + 1) * stats.len()];
                    let dot: f64 = row.iter().zip(&stats).map(|(w, s)| w * s).sum();
                    values[(k * grid_h + gr) * grid_w + gc] = libm::tanh(dot) as f32;
                }
            }
        }
    }

    EmbeddingData::Grid {
        dim: d,
        height: grid_h,
        width: grid_w,
        values,
    }
}

fn patch_stats(tile: &Raster, row0: usize, col0: usize, patch: usize) -> Vec<f64> {
    let c = tile.channels;
    let n = (patch * patch) as f64;
    let mut stats = alloc::vec![0.0f64; 2 * c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for r in row0..row0 + patch {
            for col in col0..col0 + patch {
                let v = tile.get(ch, r, col) as f64;
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        stats[ch] = mean;
        stats[c + ch] = libm::sqrt(var);
    }
    stats
}

/// Per-channel arithmetic mean over a feature grid, accumulated in f64 in
/// row-major order.
pub fn pool_mean(grid: &EmbeddingData) -> Result<Vec<f32>, ModelError> {
    let EmbeddingData::Grid {
        dim,
        height,
        width,
        values,
    } = grid
    else {
        return Err(ModelError::EmptyGrid);
    };
    let n = height * width;
    if n == 0 {
        return Err(ModelError::EmptyGrid);
    }
    let mut out = Vec::with_capacity(*dim);
    for k in 0..*dim {
        let plane = &values[k * n..(k + 1) * n];
        let sum: f64 = plane.iter().map(|&v| v as f64).sum();
        out.push((sum / n as f64) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{CompositeMethod, SensorSpec};

    fn test_cap(dim: usize, size: usize, patch: usize, bands: usize) -> Capability {
        let band_names: Vec<String> = (1..=bands).map(|i| alloc::format!("b{i}")).collect();
        Capability {
            model_id: "test-model".into(),
            backend: ModelBackend::OnTheFly,
            output_modes: alloc::vec![OutputMode::Pooled, OutputMode::Grid],
            temporal_semantics: TemporalSemantics::Range,
            default_sensor: Some(SensorSpec {
                collection: "mock-a".into(),
                bands: band_names,
                scale_m: 10.0,
                cloudy_pct: 40.0,
                fill_value: 0.0,
                composite: CompositeMethod::Median,
                check_input: false,
            }),
            band_stats: alloc::vec![BandStat { mean: 0.5, std: 0.25 }; bands],
            embed_dim: dim,
            input_size: Some(size),
            patch_size: Some(patch),
            resolution_aligned: false,
            supports_batch: true,
            checkpoint: "builtin:test-model:v1".into(),
        }
    }

    #[test]
    fn capability_invariants() {
        assert!(test_cap(64, 224, 16, 4).validate().is_ok());
        let mut bad = test_cap(64, 224, 15, 4);
        assert!(bad.validate().is_err());
        bad = test_cap(64, 224, 16, 4);
        bad.output_modes.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resize_shapes() {
        let cap = test_cap(8, 224, 16, 4);
        let obs = Raster::filled(4, 410, 410, 0.5);
        let input = preprocess(&obs, &cap, InputPrep::Resize).unwrap();
        assert_eq!(input.tiles.len(), 1);
        assert_eq!(input.tile_layout, (1, 1));
        assert_eq!(
            (input.tiles[0].height, input.tiles[0].width),
            (224, 224)
        );
    }

    #[test]
    fn tile_layout_from_ceil() {
        let cap = test_cap(8, 128, 16, 2);
        let obs = Raster::filled(2, 256, 256, 0.5);
        let input = preprocess(&obs, &cap, InputPrep::Tile).unwrap();
        assert_eq!(input.tile_layout, (2, 2));
        assert_eq!(input.tiles.len(), 4);

        let obs = Raster::filled(2, 200, 300, 0.5);
        let input = preprocess(&obs, &cap, InputPrep::Tile).unwrap();
        assert_eq!(input.tile_layout, (2, 3));
    }

    #[test]
    fn band_mismatch_rejected() {
        let cap = test_cap(8, 128, 16, 4);
        let obs = Raster::filled(3, 64, 64, 0.5);
        assert!(matches!(
            preprocess(&obs, &cap, InputPrep::Resize),
            Err(ModelError::BandMismatch { got: 3, expected: 4, .. })
        ));
    }

    #[test]
    fn mean_valued_input_normalizes_to_zero() {
        let cap = test_cap(8, 64, 8, 2);
        let obs = Raster::filled(2, 64, 64, 0.5);
        let input = preprocess(&obs, &cap, InputPrep::Resize).unwrap();
        assert!(input.tiles[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_yields_spatially_constant_grid() {
        let cap = test_cap(16, 64, 8, 2);
        let obs = Raster::filled(2, 100, 100, 0.7);
        let input = preprocess(&obs, &cap, InputPrep::Resize).unwrap();
        let weights = reference_weights(&cap.model_id, 16, 4);
        let grid = reference_forward(&input, &cap, &weights);
        let EmbeddingData::Grid { dim, height, width, values } = &grid else {
            panic!("expected grid");
        };
        assert_eq!((*dim, *height, *width), (16, 8, 8));
        for k in 0..*dim {
            let plane = &values[k * 64..(k + 1) * 64];
            for &v in plane {
                assert!((v - plane[0]).abs() < 1e-7, "channel {k} not constant");
                assert!(v > -1.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn constant_grid_matches_formula_oracle() {
        // With std = 0 the statistics vector is (c, c, 0, 0), so each
        // feature is tanh of the dot with the mean-weight columns only.
        let cap = test_cap(4, 16, 8, 2);
        let obs = Raster::filled(2, 16, 16, 0.75);
        let input = preprocess(&obs, &cap, InputPrep::Resize).unwrap();
        let weights = reference_weights(&cap.model_id, 4, 4);
        let grid = reference_forward(&input, &cap, &weights);
        let normalized = (0.75 - 0.5) / 0.25;
        for k in 0..4 {
            let expect = libm::tanh(weights[k * 4] * normalized + weights[k * 4 + 1] * normalized);
            let got = grid.values()[k * 4] as f64;
            assert!((got - expect).abs() < 1e-6, "k={k}: {got} vs {expect}");
        }
    }

    #[test]
    fn forward_token_grid_dims() {
        let cap = test_cap(8, 224, 16, 1);
        let obs = Raster::filled(1, 64, 64, 0.3);
        let input = preprocess(&obs, &cap, InputPrep::Resize).unwrap();
        let weights = reference_weights(&cap.model_id, 8, 2);
        let grid = reference_forward(&input, &cap, &weights);
        assert_eq!(grid.shape(), alloc::vec![8, 14, 14]);
    }

    #[test]
    fn tile_stitching_matches_per_tile_forward() {
        let cap = test_cap(6, 32, 8, 2);
        // Non-constant observation so tiles genuinely differ.
        let mut obs = Raster::filled(2, 64, 64, 0.0);
        for c in 0..2 {
            for r in 0..64 {
                for col in 0..64 {
                    obs.set(c, r, col, 0.2 + 0.6 * ((r * 64 + col + c) % 97) as f32 / 97.0);
                }
            }
        }
        let weights = reference_weights(&cap.model_id, 6, 4);
        let tiled = preprocess(&obs, &cap, InputPrep::Tile).unwrap();
        assert_eq!(tiled.tile_layout, (2, 2));
        let stitched = reference_forward(&tiled, &cap, &weights);
        assert_eq!(stitched.shape(), alloc::vec![6, 8, 8]);

        // Oracle: forward each tile separately and place the blocks.
        for (t, tile) in tiled.tiles.iter().enumerate() {
            let single = ModelInput {
                tiles: alloc::vec![tile.clone()],
                prep: InputPrep::Tile,
                tile_layout: (1, 1),
            };
            let block = reference_forward(&single, &cap, &weights);
            let (tr, tc) = (t / 2, t % 2);
            for k in 0..6 {
                for r in 0..4 {
                    for col in 0..4 {
                        let got = stitched.values()[(k * 8 + tr * 4 + r) * 8 + tc * 4 + col];
                        let want = block.values()[(k * 4 + r) * 4 + col];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_mean_arithmetic() {
        let grid = EmbeddingData::Grid {
            dim: 1,
            height: 2,
            width: 2,
            values: alloc::vec![1.0, 3.0, 5.0, 7.0],
        };
        assert_eq!(pool_mean(&grid).unwrap(), alloc::vec![4.0]);

        let one = EmbeddingData::Grid {
            dim: 3,
            height: 1,
            width: 1,
            values: alloc::vec![9.0, -2.0, 0.5],
        };
        assert_eq!(pool_mean(&one).unwrap(), alloc::vec![9.0, -2.0, 0.5]);
    }

    #[test]
    fn pool_rejects_pooled_input() {
        let pooled = EmbeddingData::Pooled {
            values: alloc::vec![1.0],
        };
        assert!(pool_mean(&pooled).is_err());
    }

    #[test]
    fn weights_deterministic_per_model() {
        assert_eq!(reference_weights("m", 4, 6), reference_weights("m", 4, 6));
        assert_ne!(reference_weights("m", 4, 6), reference_weights("n", 4, 6));
        assert!(reference_weights("m", 8, 8)
            .iter()
            .all(|w| (-1.0..1.0).contains(w)));
    }
}
