//! Radiance-cube storage, binary container IO, and per-band normalization.
//!
//! The on-disk container is deliberately minimal so any consumer can read it
//! with nothing but a byte reader:
//!
//! - cube file: magic `BLG1` | u32 LE height, width, bands |
//!   height*width*bands f32 LE, pixel-major (row-major pixels, bands
//!   contiguous per pixel);
//! - label file: magic `BLGL` | u32 LE height, width | height*width i16 LE,
//!   0 = background.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"BLG1";
pub const LABEL_MAGIC: &[u8; 4] = b"BLGL";

/// A hyperspectral radiance volume plus its per-pixel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Pixel-major: value for (pixel p, band b) at `p * bands + b`.
    pub values: Vec<f32>,
    /// One entry per pixel; 0 = background, 1..=C are classes.
    pub labels: Vec<u16>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        if values.len() != height * width * bands {
            return Err(Error::contract(
                "HsiCube::new",
                format!(
                    "{} values for {height}x{width}x{bands}",
                    values.len()
                ),
            ));
        }
        if labels.len() != height * width {
            return Err(Error::contract(
                "HsiCube::new",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
            labels,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn spectrum(&self, pixel: usize) -> &[f32] {
        &self.values[pixel * self.bands..(pixel + 1) * self.bands]
    }

    pub fn label(&self, pixel: usize) -> u16 {
        self.labels[pixel]
    }

    /// Number of distinct classes, i.e. the largest label value.
    pub fn num_classes(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Min-max scale each band to [0, 1]; constant bands map to all-zeros.
    /// Idempotent: normalizing twice equals normalizing once.
    pub fn normalize(&self) -> HsiCube {
        let mut out = self.clone();
        let n = self.num_pixels();
        for b in 0..self.bands {
            let mut min = f32::INFINITY;
            let mut max = f32::NEG_INFINITY;
            for p in 0..n {
                let v = self.values[p * self.bands + b];
                min = min.min(v);
                max = max.max(v);
            }
            let range = f64::from(max) - f64::from(min);
            for p in 0..n {
                let idx = p * self.bands + b;
                out.values[idx] = if range == 0.0 {
                    0.0
                } else {
                    ((f64::from(self.values[idx]) - f64::from(min)) / range) as f32
                };
            }
        }
        out
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(
                self.path,
                self.pos as u64,
                format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Read a `BLG1` cube. The label vector comes back all-zero; pair with
/// [`load_labels`].
pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != CUBE_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:?}, expected \"BLG1\"")));
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let bands = r.u32("bands")? as usize;
    let count = height
        .checked_mul(width)
        .and_then(|hw| hw.checked_mul(bands))
        .ok_or_else(|| format_err(path, 4, format!("dimension overflow {height}x{width}x{bands}")))?;
    let payload_start = r.pos as u64;
    let payload = r.take(count * 4, "float payload")?;
    if r.pos != buf.len() {
        return Err(format_err(path, r.pos as u64, "trailing bytes after payload"));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(format_err(
                path,
                payload_start + (i as u64) * 4,
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    HsiCube::new(height, width, bands, values, vec![0; height * width])
}

/// Write the cube payload as a `BLG1` file, byte-exact.
pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + cube.values.len() * 4);
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&(cube.height as u32).to_le_bytes());
    buf.extend_from_slice(&(cube.width as u32).to_le_bytes());
    buf.extend_from_slice(&(cube.bands as u32).to_le_bytes());
    for v in &cube.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a `BLGL` label map; dimensions must match the cube it belongs to.
pub fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:?}, expected \"BLGL\"")));
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let count = height
        .checked_mul(width)
        .ok_or_else(|| format_err(path, 4, format!("dimension overflow {height}x{width}")))?;
    let payload_start = r.pos as u64;
    let payload = r.take(count * 2, "label payload")?;
    if r.pos != buf.len() {
        return Err(format_err(path, r.pos as u64, "trailing bytes after payload"));
    }
    let mut labels = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(2).enumerate() {
        let v = i16::from_le_bytes([chunk[0], chunk[1]]);
        if v < 0 {
            return Err(format_err(
                path,
                payload_start + (i as u64) * 2,
                format!("negative label {v}"),
            ));
        }
        labels.push(v as u16);
    }
    Ok((height, width, labels))
}

pub fn save_labels(height: usize, width: usize, labels: &[u16], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + labels.len() * 2);
    buf.extend_from_slice(LABEL_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for &l in labels {
        if l > i16::MAX as u16 {
            return Err(Error::contract("save_labels", format!("label {l} exceeds i16 range")));
        }
        buf.extend_from_slice(&(l as i16).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a cube and its label map together, verifying matching dimensions.
pub fn load_dataset(cube_path: &Path, label_path: &Path) -> Result<HsiCube> {
    let mut cube = load_cube(cube_path)?;
    let (h, w, labels) = load_labels(label_path)?;
    if h != cube.height || w != cube.width {
        return Err(format_err(
            label_path,
            4,
            format!(
                "label map is {h}x{w} but cube is {}x{}",
                cube.height, cube.width
            ),
        ));
    }
    cube.labels = labels;
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cube() -> HsiCube {
        // 2x2 pixels, 3 bands
        let values: Vec<f32> = (0..12).map(|v| v as f32 * 0.25).collect();
        HsiCube::new(2, 2, 3, values, vec![0, 1, 1, 2]).unwrap()
    }

    #[test]
    fn cube_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.blg");
        save_cube(&tiny_cube(), &path).unwrap();
        let original = fs::read(&path).unwrap();
        let loaded = load_cube(&path).unwrap();
        let path2 = dir.path().join("cube2.blg");
        save_cube(&loaded, &path2).unwrap();
        assert_eq!(original, fs::read(&path2).unwrap());
    }

    #[test]
    fn header_dimensions_respected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.blg");
        save_cube(&tiny_cube(), &path).unwrap();
        let c = load_cube(&path).unwrap();
        assert_eq!((c.height, c.width, c.bands), (2, 2, 3));
        assert_eq!(c.num_pixels(), 4);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.blg");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = load_cube(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.blg");
        save_cube(&tiny_cube(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        let err = load_cube(&path).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte 16"), "{err}");
    }

    #[test]
    fn dimension_overflow_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.blg");
        let mut buf = Vec::new();
        buf.extend_from_slice(CUBE_MAGIC);
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        fs::write(&path, &buf).unwrap();
        let res = load_cube(&path);
        assert!(res.is_err());
    }

    #[test]
    fn labels_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.blgl");
        save_labels(2, 2, &[0, 1, 2, 3], &path).unwrap();
        let (h, w, l) = load_labels(&path).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn normalize_scales_each_band() {
        // single band with values {0, 5, 10, 5}
        let cube = HsiCube::new(2, 2, 1, vec![0.0, 5.0, 10.0, 5.0], vec![1; 4]).unwrap();
        let n = cube.normalize();
        assert_eq!(n.values, vec![0.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn normalize_constant_band_is_zero() {
        let cube = HsiCube::new(1, 2, 1, vec![7.0, 7.0], vec![1; 2]).unwrap();
        assert_eq!(cube.normalize().values, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cube = tiny_cube();
        let once = cube.normalize();
        let twice = once.normalize();
        assert_eq!(once, twice);
    }

    #[test]
    fn normalize_bounds() {
        let mut values = Vec::new();
        for i in 0..30 {
            values.push((i as f32 * 17.3).sin() * 50.0 + 3.0);
        }
        let cube = HsiCube::new(5, 2, 3, values, vec![1; 10]).unwrap();
        let n = cube.normalize();
        assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
