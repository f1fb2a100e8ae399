//! Synthetic hyperspectral scenes for tests and benchmarks.
//!
//! A scene is a grid of rectangular single-class blobs, optionally framed by
//! a background border. Each class has a smooth bump-shaped mean spectrum;
//! per-pixel values add i.i.d. Gaussian noise on top. Everything is
//! deterministic under the seed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hsi::HsiCube;
use crate::rng;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: u16,
    /// Blob grid layout (rows x cols of rectangular blobs).
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Blob size in pixels.
    pub blob_h: usize,
    pub blob_w: usize,
    pub bands: usize,
    /// Std of the additive Gaussian noise per (pixel, band).
    pub noise_std: f64,
    /// Label-0 frame of this many pixels around the scene.
    pub background_border: usize,
    /// Label-0 strip between neighboring blobs, so no region straddles two
    /// classes.
    pub blob_gutter: usize,
    /// L2 distance scale between class mean spectra.
    pub separation: f64,
    /// Explicit class per blob, row-major over the grid. When None, blobs
    /// cycle through 1..=classes.
    pub blob_classes: Option<Vec<u16>>,
    pub seed: u64,
}

impl SynthSpec {
    /// A small, well-separated multi-blob scene.
    pub fn balanced(classes: u16, grid: usize, blob: usize, bands: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            classes,
            grid_rows: grid,
            grid_cols: grid,
            blob_h: blob,
            blob_w: blob,
            bands,
            noise_std,
            background_border: 0,
            blob_gutter: 0,
            separation: 1.0,
            blob_classes: None,
            seed,
        }
    }

    fn cell_h(&self) -> usize {
        self.blob_h + self.blob_gutter
    }

    fn cell_w(&self) -> usize {
        self.blob_w + self.blob_gutter
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.cell_h() + 2 * self.background_border
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.cell_w() + 2 * self.background_border
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.grid_rows == 0 || self.grid_cols == 0 || self.blob_h == 0 || self.blob_w == 0 || self.bands == 0 {
            return Err(Error::contract("synth_dataset", "all counts must be positive"));
        }
        if let Some(bc) = &self.blob_classes {
            if bc.len() != self.grid_rows * self.grid_cols {
                return Err(Error::contract(
                    "synth_dataset",
                    format!("{} blob classes for a {}x{} grid", bc.len(), self.grid_rows, self.grid_cols),
                ));
            }
            if bc.iter().any(|&c| c == 0 || c > self.classes) {
                return Err(Error::contract("synth_dataset", "blob class out of 1..=classes"));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::contract("synth_dataset", "noise_std must be >= 0"));
        }
        Ok(())
    }

    /// Mean radiance of `class` (1..=C; 0 = background) in `band`: a bump
    /// centered per class, normalized over the actual band grid so every
    /// class mean sits `separation` from the flat baseline in L2.
    pub fn class_mean(&self, class: u16, band: usize) -> f64 {
        if class == 0 {
            return 0.1;
        }
        let c = f64::from(class);
        let bands = self.bands as f64;
        let center = (c - 0.5) * bands / f64::from(self.classes);
        let width = (bands / f64::from(self.classes)).max(1.0) * 0.45;
        let bump = |b: f64| {
            let x = (b - center) / width;
            (-x * x).exp()
        };
        let norm: f64 = (0..self.bands).map(|b| bump(b as f64).powi(2)).sum::<f64>().sqrt();
        0.4 + self.separation * bump(band as f64) / norm
    }

    fn blob_class(&self, row: usize, col: usize) -> u16 {
        let idx = row * self.grid_cols + col;
        match &self.blob_classes {
            Some(bc) => bc[idx],
            None => 1 + (idx % self.classes as usize) as u16,
        }
    }
}

/// Deterministic cube of spatially contiguous class blobs with per-class
/// mean spectra plus Gaussian noise.
pub fn synth_dataset(spec: &SynthSpec) -> Result<HsiCube> {
    spec.validate()?;
    let (h, w, b) = (spec.height(), spec.width(), spec.bands);
    let border = spec.background_border;
    let mut rng = rng::stream(spec.seed, "synth");
    let mut values = Vec::with_capacity(h * w * b);
    let mut labels = Vec::with_capacity(h * w);
    let half_gutter = spec.blob_gutter / 2;
    let remainder = spec.blob_gutter - half_gutter;
    for y in 0..h {
        for x in 0..w {
            let inside = y >= border && y < h - border && x >= border && x < w - border;
            let class = if inside {
                let (cy, cx) = (y - border, x - border);
                let (row, col) = (cy / spec.cell_h(), cx / spec.cell_w());
                let (oy, ox) = (cy % spec.cell_h(), cx % spec.cell_w());
                let me = spec.blob_class(row, col);
                // gutters only along edges shared with a different class, so
                // same-class neighbors stay spatially connected
                let differs = |r: Option<usize>, c: Option<usize>| match (r, c) {
                    (Some(r), Some(c)) if r < spec.grid_rows && c < spec.grid_cols => {
                        spec.blob_class(r, c) != me
                    }
                    _ => false,
                };
                let in_gutter = (oy < half_gutter && differs(row.checked_sub(1), Some(col)))
                    || (oy >= spec.cell_h() - remainder && differs(Some(row + 1), Some(col)))
                    || (ox < half_gutter && differs(Some(row), col.checked_sub(1)))
                    || (ox >= spec.cell_w() - remainder && differs(Some(row), Some(col + 1)));
                if in_gutter {
                    0
                } else {
                    me
                }
            } else {
                0
            };
            labels.push(class);
            for band in 0..b {
                let noise: f64 = if spec.noise_std > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    z * spec.noise_std
                } else {
                    0.0
                };
                values.push((spec.class_mean(class, band) + noise) as f32);
            }
        }
    }
    HsiCube::new(h, w, b, values, labels)
}
