//! The `.ras` raster container: magic "RAS1" | u32 width | u32 height |
//! u32 channels | u8 dtype (1 = float32) | f64[6] geotransform | payload,
//! little-endian float32, channel-major then row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use geoembed_core::raster::Raster;

pub const RAS_MAGIC: &[u8; 4] = b"RAS1";
pub const RAS_DTYPE_F32: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RasError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a RAS1 file)")]
    BadMagic { path: String },
    #[error("{path}: unsupported dtype {dtype}")]
    UnsupportedDtype { path: String, dtype: u8 },
    #[error("{path}: truncated payload (expected {expected} bytes, got {got})")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> RasError {
    RasError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a raster with its geotransform. The write goes to a temp name in
/// the same directory and is renamed into place on success.
pub fn write_ras(path: &Path, raster: &Raster, geotransform: &[f64; 6]) -> Result<(), RasError> {
    let tmp = path.with_extension("ras.tmp");
    {
        let file = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut write_all = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(&tmp, e));
        write_all(RAS_MAGIC)?;
        write_all(&(raster.width as u32).to_le_bytes())?;
        write_all(&(raster.height as u32).to_le_bytes())?;
        write_all(&(raster.channels as u32).to_le_bytes())?;
        write_all(&[RAS_DTYPE_F32])?;
        for g in geotransform {
            write_all(&g.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(raster.data.len() * 4);
        for v in &raster.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_all(&payload)?;
        w.flush().map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Read a `.ras` file back into a raster and its geotransform.
pub fn read_ras(path: &Path) -> Result<(Raster, [f64; 6]), RasError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 4 + 4 + 4 + 4 + 1];
    r.read_exact(&mut header).map_err(|_| RasError::BadMagic {
        path: path.display().to_string(),
    })?;
    if &header[..4] != RAS_MAGIC {
        return Err(RasError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let dtype = header[16];
    if dtype != RAS_DTYPE_F32 {
        return Err(RasError::UnsupportedDtype {
            path: path.display().to_string(),
            dtype,
        });
    }
    let mut gt_bytes = [0u8; 48];
    r.read_exact(&mut gt_bytes).map_err(|e| io_err(path, e))?;
    let mut geotransform = [0.0f64; 6];
    for (i, g) in geotransform.iter_mut().enumerate() {
        *g = f64::from_le_bytes(gt_bytes[i * 8..(i + 1) * 8].try_into().unwrap());
    }
    let expected = channels * height * width * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() != expected {
        return Err(RasError::Truncated {
            path: path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((Raster::from_data(channels, height, width, data), geotransform))
}
