//! Grid-embedding visualization: project each grid cell's vector onto the
//! top principal components and write an RGB PPM.

use std::path::Path;

use geoembed_core::model::EmbeddingData;
use geoembed_core::pca::{principal_components, project, scale_to_u8};

use crate::export::{load_embedding, ExportError};

pub const PCA_ITERS: usize = 200;
pub const PCA_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("visualization requires a grid embedding, got {mode}")]
    NotGrid { mode: String },
}

/// RGB image of a grid embedding: cells projected on up to three principal
/// components, channels scaled to [0, 255] independently.
#[derive(Debug, Clone)]
pub struct VizImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
    /// Number of distinct components used (gray replication when < 3).
    pub components: usize,
}

pub fn visualize_grid(data: &EmbeddingData) -> Result<VizImage, VizError> {
    let EmbeddingData::Grid {
        dim,
        height,
        width,
        values,
    } = data
    else {
        return Err(VizError::NotGrid {
            mode: data.mode().as_str().to_string(),
        });
    };
    let (d, h, w) = (*dim, *height, *width);
    let n = h * w;
    // Channel-major grid -> n samples of dimension d.
    let mut samples = vec![0f32; n * d];
    for k in 0..d {
        for cell in 0..n {
            samples[cell * d + k] = values[k * n + cell];
        }
    }
    let kcomp = d.min(3);
    let (mean, components) = principal_components(&samples, d, kcomp, PCA_ITERS, PCA_TOL);
    let scores = project(&samples, d, &mean, &components);
    let mut channels: Vec<Vec<u8>> = Vec::with_capacity(kcomp);
    for c in 0..kcomp {
        let col: Vec<f64> = (0..n).map(|i| scores[i * kcomp + c]).collect();
        channels.push(scale_to_u8(&col));
    }
    let mut rgb = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            let ch = &channels[c.min(kcomp - 1)];
            rgb.push(ch[i]);
        }
    }
    Ok(VizImage {
        width: w,
        height: h,
        rgb,
        components: kcomp,
    })
}

/// Binary PPM (P6) serialization.
pub fn ppm_bytes(img: &VizImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

/// Load an exported grid embedding and write its PCA image next to `out`.
pub fn visualize_file(embedding_dir: &Path, out: &Path) -> Result<VizImage, VizError> {
    let emb = load_embedding(embedding_dir)?;
    let img = visualize_grid(&emb.data)?;
    std::fs::write(out, ppm_bytes(&img)).map_err(|e| VizError::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rank-one grid: value[k][cell] = dir[k] * t[cell]. All variance lies
    /// along `dir`, so PC1 scores must reproduce `t` up to affine scaling.
    #[test]
    fn rank_one_grid_recovered_by_first_component() {
        let (d, h, w) = (6usize, 8usize, 9usize);
        let n = h * w;
        let dir: Vec<f64> = (0..d).map(|k| ((k + 1) as f64) / d as f64).collect();
        let t: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.37).collect();
        let mut values = vec![0f32; d * n];
        for k in 0..d {
            for cell in 0..n {
                values[k * n + cell] = (dir[k] * t[cell]) as f32;
            }
        }
        let data = EmbeddingData::Grid {
            dim: d,
            height: h,
            width: w,
            values,
        };
        let img = visualize_grid(&data).unwrap();
        assert_eq!((img.width, img.height), (w, h));
        assert_eq!(img.rgb.len(), n * 3);
        // t is increasing, so the red channel must be monotone (up to the
        // component's global sign) and span the full [0, 255] range.
        let red: Vec<u8> = (0..n).map(|i| img.rgb[i * 3]).collect();
        let increasing = red[n - 1] > red[0];
        for i in 1..n {
            if increasing {
                assert!(red[i] >= red[i - 1]);
            } else {
                assert!(red[i] <= red[i - 1]);
            }
        }
        assert_eq!(*red.iter().min().unwrap(), 0);
        assert_eq!(*red.iter().max().unwrap(), 255);
    }

    #[test]
    fn constant_grid_renders_mid_gray() {
        let data = EmbeddingData::Grid {
            dim: 4,
            height: 3,
            width: 5,
            values: vec![0.25; 4 * 15],
        };
        let img = visualize_grid(&data).unwrap();
        assert!(img.rgb.iter().all(|&b| b == 128));
    }

    #[test]
    fn pooled_embedding_rejected() {
        let data = EmbeddingData::Pooled {
            values: vec![0.0; 8],
        };
        match visualize_grid(&data) {
            Err(VizError::NotGrid { mode }) => assert_eq!(mode, "pooled"),
            other => panic!("expected NotGrid, got {other:?}"),
        }
    }

    #[test]
    fn low_dim_grid_replicates_gray_channels() {
        // d = 2 < 3: blue channel replicates the second component.
        let mut values = vec![0f32; 2 * 4];
        for cell in 0..4 {
            values[cell] = cell as f32;
            values[4 + cell] = -(cell as f32);
        }
        let data = EmbeddingData::Grid {
            dim: 2,
            height: 2,
            width: 2,
            values,
        };
        let img = visualize_grid(&data).unwrap();
        assert_eq!(img.components, 2);
        for i in 0..4 {
            assert_eq!(img.rgb[i * 3 + 1], img.rgb[i * 3 + 2]);
        }
    }

    #[test]
    fn ppm_header_and_size() {
        let img = VizImage {
            width: 4,
            height: 2,
            rgb: vec![7; 24],
            components: 3,
        };
        let bytes = ppm_bytes(&img);
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);
    }
}
