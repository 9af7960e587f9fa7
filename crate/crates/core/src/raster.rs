//! Raster tensors and the pixel operations on them: bilinear/nearest
//! sampling against a geotransform and median/mosaic compositing.

use alloc::vec;
use alloc::vec::Vec;

/// A C x H x W float32 tensor, channel-major then row-major, north-up.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "raster shape");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[self.idx(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        let i = self.idx(c, row, col);
        self.data[i] = v;
    }

    /// One channel plane as a slice (H*W values, row-major).
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }
}

/// Resampling kernel for continuous vs categorical bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Bilinear,
    Nearest,
}

/// Sample one band of `src` at geo coordinates (x, y) given its affine
/// geotransform `[x0, dx, 0, y0, 0, -dy]` (north-up, origin at the corner
/// of pixel (0, 0)).
///
/// Returns `None` when the point falls outside the raster extent or all
/// contributing source pixels are fill. Bilinear weights are renormalized
/// over non-fill neighbors so isolated nodata does not bleed.
pub fn sample_geo(
    src: &Raster,
    fill_mask: Option<&[bool]>,
    gt: &[f64; 6],
    band: usize,
    x: f64,
    y: f64,
    method: Resampling,
) -> Option<f32> {
    let w = src.width as f64;
    let h = src.height as f64;
    // Continuous pixel coordinates of the sample point (pixel-center space).
    let u = (x - gt[0]) / gt[1] - 0.5;
    let v = (y - gt[3]) / gt[5] - 0.5;
    // Outside the covered extent entirely.
    if u < -0.5 || u > w - 0.5 || v < -0.5 || v > h - 0.5 {
        return None;
    }
    let is_fill = |row: usize, col: usize| -> bool {
        fill_mask.is_some_and(|m| m[row * src.width + col])
    };
    match method {
        Resampling::Nearest => {
            let col = libm::floor(u + 0.5).clamp(0.0, w - 1.0) as usize;
            let row = libm::floor(v + 0.5).clamp(0.0, h - 1.0) as usize;
            if is_fill(row, col) {
                None
            } else {
                Some(src.get(band, row, col))
            }
        }
        Resampling::Bilinear => {
            let u = u.clamp(0.0, w - 1.0);
            let v = v.clamp(0.0, h - 1.0);
            let c0 = libm::floor(u) as usize;
            let r0 = libm::floor(v) as usize;
            let c1 = (c0 + 1).min(src.width - 1);
            let r1 = (r0 + 1).min(src.height - 1);
            let fu = u - c0 as f64;
            let fv = v - r0 as f64;
            let corners = [
                (r0, c0, (1.0 - fu) * (1.0 - fv)),
                (r0, c1, fu * (1.0 - fv)),
                (r1, c0, (1.0 - fu) * fv),
                (r1, c1, fu * fv),
            ];
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for (r, c, wt) in corners {
                if wt > 0.0 && !is_fill(r, c) {
                    acc += wt * src.get(band, r, c) as f64;
                    wsum += wt;
                }
            }
            if wsum <= 0.0 {
                None
            } else {
                Some((acc / wsum) as f32)
            }
        }
    }
}

/// One dated scene's contribution to a composite: pixel values plus a
/// per-pixel fill flag (true = nodata in every band).
#[derive(Debug, Clone)]
pub struct SceneLayer {
    pub raster: Raster,
    pub fill_mask: Vec<bool>,
}

impl SceneLayer {
    pub fn solid(raster: Raster) -> Self {
        let n = raster.height * raster.width;
        Self {
            raster,
            fill_mask: vec![false; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("cannot composite an empty scene stack")]
    EmptyStack,
    #[error("scene stack shapes differ: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

/// Composite output: pixel values plus the per-pixel validity mask (true
/// where at least one scene contributed a non-fill value).
#[derive(Debug, Clone)]
pub struct Composite {
    pub raster: Raster,
    pub valid_mask: Vec<bool>,
}

fn check_stack(stack: &[SceneLayer]) -> Result<(usize, usize, usize), RasterError> {
    let first = stack.first().ok_or(RasterError::EmptyStack)?;
    let shape = (first.raster.channels, first.raster.height, first.raster.width);
    for layer in stack {
        let got = (layer.raster.channels, layer.raster.height, layer.raster.width);
        if got != shape {
            return Err(RasterError::ShapeMismatch {
                expected: shape,
                got,
            });
        }
    }
    Ok(shape)
}

/// Per-pixel, per-band median of non-fill values. Even counts average the
/// two middle values. Pixels with no valid value in any scene become
/// `fill_value` with a false validity flag.
pub fn composite_median(stack: &[SceneLayer], fill_value: f32) -> Result<Composite, RasterError> {
    let (channels, height, width) = check_stack(stack)?;
    let mut out = Raster::filled(channels, height, width, fill_value);
    let mut valid = vec![false; height * width];
    let mut values: Vec<f32> = Vec::with_capacity(stack.len());
    for row in 0..height {
        for col in 0..width {
            let pix = row * width + col;
            let any = stack.iter().any(|l| !l.fill_mask[pix]);
            if !any {
                continue;
            }
            valid[pix] = true;
            for c in 0..channels {
                values.clear();
                for layer in stack {
                    if !layer.fill_mask[pix] {
                        values.push(layer.raster.get(c, row, col));
                    }
                }
                values.sort_by(f32::total_cmp);
                let n = values.len();
                let m = if n % 2 == 1 {
                    values[n / 2]
                } else {
                    (values[n / 2 - 1] + values[n / 2]) / 2.0
                };
                out.set(c, row, col, m);
            }
        }
    }
    Ok(Composite {
        raster: out,
        valid_mask: valid,
    })
}

/// Latest-valid-wins mosaic. The stack must be in ascending date order;
/// for each pixel the value comes from the last layer whose pixel is
/// non-fill.
pub fn composite_mosaic(stack: &[SceneLayer], fill_value: f32) -> Result<Composite, RasterError> {
    let (channels, height, width) = check_stack(stack)?;
    let mut out = Raster::filled(channels, height, width, fill_value);
    let mut valid = vec![false; height * width];
    for row in 0..height {
        for col in 0..width {
            let pix = row * width + col;
            for layer in stack.iter().rev() {
                if !layer.fill_mask[pix] {
                    for c in 0..channels {
                        out.set(c, row, col, layer.raster.get(c, row, col));
                    }
                    valid[pix] = true;
                    break;
                }
            }
        }
    }
    Ok(Composite {
        raster: out,
        valid_mask: valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_1x1x1(v: f32) -> SceneLayer {
        SceneLayer::solid(Raster::from_data(1, 1, 1, vec![v]))
    }

    #[test]
    fn median_odd_count() {
        let stack = [layer_1x1x1(5.0), layer_1x1x1(1.0), layer_1x1x1(3.0)];
        let c = composite_median(&stack, -1.0).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), 3.0);
        assert!(c.valid_mask[0]);
    }

    #[test]
    fn median_even_count_averages_middle_two() {
        let stack = [layer_1x1x1(1.0), layer_1x1x1(3.0)];
        let c = composite_median(&stack, -1.0).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), 2.0);
    }

    #[test]
    fn median_skips_fill_pixels() {
        let mut a = layer_1x1x1(9.0);
        a.fill_mask[0] = true;
        let stack = [a, layer_1x1x1(4.0)];
        let c = composite_median(&stack, -1.0).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), 4.0);
    }

    #[test]
    fn all_fill_pixel_becomes_fill_value() {
        let mut a = layer_1x1x1(9.0);
        a.fill_mask[0] = true;
        let c = composite_median(&[a], -7.5).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), -7.5);
        assert!(!c.valid_mask[0]);
    }

    #[test]
    fn empty_stack_rejected() {
        assert_eq!(
            composite_median(&[], 0.0).unwrap_err(),
            RasterError::EmptyStack
        );
        assert_eq!(
            composite_mosaic(&[], 0.0).unwrap_err(),
            RasterError::EmptyStack
        );
    }

    #[test]
    fn mosaic_latest_valid_wins() {
        // d1 < d2, but d2's pixel is fill: d1's value survives.
        let d1 = layer_1x1x1(10.0);
        let mut d2 = layer_1x1x1(20.0);
        d2.fill_mask[0] = true;
        let c = composite_mosaic(&[d1, d2], -1.0).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), 10.0);

        let d1 = layer_1x1x1(10.0);
        let d2 = layer_1x1x1(20.0);
        let c = composite_mosaic(&[d1, d2], -1.0).unwrap();
        assert_eq!(c.raster.get(0, 0, 0), 20.0);
    }

    #[test]
    fn bilinear_constant_field_is_exact() {
        let src = Raster::filled(1, 4, 5, 7.25);
        let gt = [0.0, 10.0, 0.0, 40.0, 0.0, -10.0];
        for &(x, y) in &[(5.0, 35.0), (17.5, 22.0), (49.9, 0.1), (0.05, 39.9)] {
            let v = sample_geo(&src, None, &gt, 0, x, y, Resampling::Bilinear).unwrap();
            assert_eq!(v, 7.25);
        }
    }

    #[test]
    fn bilinear_matches_linear_ramp_at_coarser_scale() {
        // Source: f(x, y) = 2x + 3y sampled on a fine grid; bilinear
        // interpolation reproduces a linear field exactly (within f32).
        let (h, w) = (40, 40);
        let gt = [0.0, 1.0, 0.0, 40.0, 0.0, -1.0];
        let mut src = Raster::filled(1, h, w, 0.0);
        for r in 0..h {
            for c in 0..w {
                let x = gt[0] + (c as f64 + 0.5) * gt[1];
                let y = gt[3] + (r as f64 + 0.5) * gt[5];
                src.set(0, r, c, (2.0 * x + 3.0 * y) as f32);
            }
        }
        // Resample at 2x coarser pixel centers.
        for r in 0..19 {
            for c in 0..19 {
                let x = 1.0 + (c as f64 + 0.5) * 2.0;
                let y = 39.0 - (r as f64 + 0.5) * 2.0;
                let got = sample_geo(&src, None, &gt, 0, x, y, Resampling::Bilinear).unwrap();
                let want = 2.0 * x + 3.0 * y;
                assert!(
                    (got as f64 - want).abs() < 1e-5,
                    "({x},{y}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn sample_outside_extent_is_none() {
        let src = Raster::filled(1, 2, 2, 1.0);
        let gt = [0.0, 1.0, 0.0, 2.0, 0.0, -1.0];
        assert!(sample_geo(&src, None, &gt, 0, -0.1, 1.0, Resampling::Bilinear).is_none());
        assert!(sample_geo(&src, None, &gt, 0, 1.0, 2.1, Resampling::Nearest).is_none());
        assert!(sample_geo(&src, None, &gt, 0, 2.1, 1.0, Resampling::Bilinear).is_none());
    }

    #[test]
    fn nearest_picks_containing_pixel() {
        let mut src = Raster::filled(1, 2, 2, 0.0);
        src.set(0, 0, 0, 1.0);
        src.set(0, 0, 1, 2.0);
        src.set(0, 1, 0, 3.0);
        src.set(0, 1, 1, 4.0);
        let gt = [0.0, 1.0, 0.0, 2.0, 0.0, -1.0];
        assert_eq!(
            sample_geo(&src, None, &gt, 0, 0.25, 1.75, Resampling::Nearest),
            Some(1.0)
        );
        assert_eq!(
            sample_geo(&src, None, &gt, 0, 1.75, 0.25, Resampling::Nearest),
            Some(4.0)
        );
    }

    proptest::proptest! {
        #[test]
        fn median_is_permutation_invariant(
            vals in proptest::collection::vec(-100.0f32..100.0, 1..9),
            rot in 0usize..8,
        ) {
            let stack: Vec<SceneLayer> = vals.iter().map(|&v| layer_1x1x1(v)).collect();
            let mut rotated = stack.clone();
            rotated.rotate_left(rot % stack.len());
            let a = composite_median(&stack, 0.0).unwrap();
            let b = composite_median(&rotated, 0.0).unwrap();
            proptest::prop_assert_eq!(a.raster.data, b.raster.data);
        }

        #[test]
        fn even_median_matches_sort_oracle(
            vals in proptest::collection::vec(-50.0f32..50.0, 2..12),
        ) {
            let stack: Vec<SceneLayer> = vals.iter().map(|&v| layer_1x1x1(v)).collect();
            let got = composite_median(&stack, 0.0).unwrap().raster.get(0, 0, 0);
            let mut sorted = vals.clone();
            sorted.sort_by(f32::total_cmp);
            let n = sorted.len();
            let want = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            };
            proptest::prop_assert_eq!(got, want);
        }
    }
}
