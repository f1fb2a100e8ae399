//! SLIC superpixel segmentation: localized k-means over joint
//! spectral-spatial distance.
//!
//! Cluster seeds start on a regular grid; each k-means round assigns every
//! pixel to the best center within a 2Sx2S window and recomputes centers as
//! member means. A final connectivity pass splits stray same-id fragments
//! into components and merges the small ones into their largest neighbor, so
//! every resulting superpixel is contiguous and ids are dense.
//!
//! Pixel assignment fans out across worker threads; every pixel's winner is
//! computed independently with order-free tie-breaking, so results do not
//! depend on the worker count. The center update is a sequential reduction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsi::HsiCube;

/// Per-pixel superpixel ids, dense in `0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub assignments: Vec<usize>,
    pub count: usize,
}

impl Segmentation {
    /// Pixel indices per superpixel, in raster order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (pixel, &id) in self.assignments.iter().enumerate() {
            out[id].push(pixel);
        }
        out
    }
}

struct Center {
    y: f64,
    x: f64,
    spectrum: Vec<f64>,
}

/// Segment `cube` into roughly `k` superpixels.
///
/// The distance is `d_spectral + (compactness / S) * d_spatial` with grid
/// interval `S = sqrt(H*W/K)`. The algorithm itself is deterministic; `seed`
/// is accepted so callers can thread one seed through every pipeline stage.
pub fn slic_segment(cube: &HsiCube, k: usize, compactness: f64, iters: usize, _seed: u64) -> Result<Segmentation> {
    let (h, w, bands) = (cube.height, cube.width, cube.bands);
    let pixels = h * w;
    if k < 1 || iters < 1 {
        return Err(Error::contract("slic_segment", "k and iters must be >= 1"));
    }
    if k > pixels {
        return Err(Error::contract(
            "slic_segment",
            format!("k = {k} exceeds pixel count {pixels}"),
        ));
    }

    let s = ((pixels as f64) / (k as f64)).sqrt();
    let ny = ((h as f64 / s).round() as usize).max(1);
    let nx = ((w as f64 / s).round() as usize).max(1);

    let mut centers: Vec<Center> = Vec::with_capacity(ny * nx);
    for gy in 0..ny {
        for gx in 0..nx {
            let y = (gy as f64 + 0.5) * h as f64 / ny as f64;
            let x = (gx as f64 + 0.5) * w as f64 / nx as f64;
            let py = (y as usize).min(h - 1);
            let px = (x as usize).min(w - 1);
            let spectrum = cube
                .spectrum(py * w + px)
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            centers.push(Center { y, x, spectrum });
        }
    }

    let spatial_weight = compactness / s;
    let mut assignments = vec![0usize; pixels];

    for _ in 0..iters {
        // Bin centers by S-sized cells so a pixel only scans nearby ones.
        let cell_cols = (w as f64 / s).ceil() as usize + 1;
        let cell_rows = (h as f64 / s).ceil() as usize + 1;
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); cell_rows * cell_cols];
        for (ci, c) in centers.iter().enumerate() {
            let cy = ((c.y / s) as usize).min(cell_rows - 1);
            let cx = ((c.x / s) as usize).min(cell_cols - 1);
            cells[cy * cell_cols + cx].push(ci);
        }

        let assign_one = |pixel: usize| -> usize {
            // pixel-center coordinates keep the seed grid an exact k-means
            // fixed point on uniform images
            let py = (pixel / w) as f64 + 0.5;
            let px = (pixel % w) as f64 + 0.5;
            let spectrum = cube.spectrum(pixel);
            let fy = ((py / s) as usize).min(cell_rows - 1);
            let fx = ((px / s) as usize).min(cell_cols - 1);
            let mut best = (f64::INFINITY, usize::MAX);
            for cy in fy.saturating_sub(2)..=(fy + 2).min(cell_rows - 1) {
                for cx in fx.saturating_sub(2)..=(fx + 2).min(cell_cols - 1) {
                    for &ci in &cells[cy * cell_cols + cx] {
                        let c = &centers[ci];
                        if (c.y - py).abs() > s || (c.x - px).abs() > s {
                            continue;
                        }
                        let d = distance(spectrum, c, py, px, spatial_weight);
                        if d < best.0 || (d == best.0 && ci < best.1) {
                            best = (d, ci);
                        }
                    }
                }
            }
            if best.1 == usize::MAX {
                // No center in the window (can happen after drift): fall
                // back to a full scan.
                for (ci, c) in centers.iter().enumerate() {
                    let d = distance(spectrum, c, py, px, spatial_weight);
                    if d < best.0 || (d == best.0 && ci < best.1) {
                        best = (d, ci);
                    }
                }
            }
            best.1
        };

        if pixels >= 4096 {
            assignments = (0..pixels).into_par_iter().map(assign_one).collect();
        } else {
            assignments = (0..pixels).map(assign_one).collect();
        }

        // Synchronized reduction: recompute centers as member means.
        let mut counts = vec![0usize; centers.len()];
        let mut sums_y = vec![0.0f64; centers.len()];
        let mut sums_x = vec![0.0f64; centers.len()];
        let mut sums_spec = vec![0.0f64; centers.len() * bands];
        for pixel in 0..pixels {
            let ci = assignments[pixel];
            counts[ci] += 1;
            sums_y[ci] += (pixel / w) as f64 + 0.5;
            sums_x[ci] += (pixel % w) as f64 + 0.5;
            let spec = cube.spectrum(pixel);
            let acc = &mut sums_spec[ci * bands..(ci + 1) * bands];
            for (a, &v) in acc.iter_mut().zip(spec) {
                *a += f64::from(v);
            }
        }
        for (ci, center) in centers.iter_mut().enumerate() {
            if counts[ci] == 0 {
                continue;
            }
            let n = counts[ci] as f64;
            center.y = sums_y[ci] / n;
            center.x = sums_x[ci] / n;
            for (cs, &sum) in center.spectrum.iter_mut().zip(&sums_spec[ci * bands..(ci + 1) * bands]) {
                *cs = sum / n;
            }
        }
    }

    enforce_connectivity(h, w, k, &assignments)
}

fn distance(spectrum: &[f32], center: &Center, py: f64, px: f64, spatial_weight: f64) -> f64 {
    let mut spec_sq = 0.0;
    for (&p, &c) in spectrum.iter().zip(&center.spectrum) {
        let d = f64::from(p) - c;
        spec_sq += d * d;
    }
    let dy = py - center.y;
    let dx = px - center.x;
    spec_sq.sqrt() + spatial_weight * (dy * dy + dx * dx).sqrt()
}

/// Split disconnected same-id regions into components, merge components
/// smaller than a quarter of the average superpixel size into their largest
/// neighbor, and relabel densely in raster discovery order.
fn enforce_connectivity(h: usize, w: usize, k: usize, assignments: &[usize]) -> Result<Segmentation> {
    let pixels = h * w;
    let min_size = ((pixels as f64 / k as f64) / 4.0).floor().max(1.0) as usize;

    // Flood-fill 4-connected components of equal assignment.
    let mut comp = vec![usize::MAX; pixels];
    let mut comp_sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..pixels {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_sizes.len();
        let label = assignments[start];
        let mut size = 0usize;
        stack.push(start);
        comp[start] = id;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && assignments[q] == label {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comp_sizes.push(size);
    }

    // Component neighbor sets from boundary pixels.
    let n_comp = comp_sizes.len();
    let mut neighbors: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n_comp];
    for p in 0..pixels {
        let (y, x) = (p / w, p % w);
        if x + 1 < w && comp[p] != comp[p + 1] {
            neighbors[comp[p]].insert(comp[p + 1]);
            neighbors[comp[p + 1]].insert(comp[p]);
        }
        if y + 1 < h && comp[p] != comp[p + w] {
            neighbors[comp[p]].insert(comp[p + w]);
            neighbors[comp[p + w]].insert(comp[p]);
        }
    }

    // Union-find; small components join their largest current neighbor.
    let mut parent: Vec<usize> = (0..n_comp).collect();
    fn find(parent: &mut Vec<usize>, mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut sizes = comp_sizes.clone();
    for c in 0..n_comp {
        let root = find(&mut parent, c);
        if sizes[root] >= min_size {
            continue;
        }
        let mut best: Option<(usize, usize)> = None; // (size, root)
        for &nb in &neighbors[c] {
            let nb_root = find(&mut parent, nb);
            if nb_root == root {
                continue;
            }
            let candidate = (sizes[nb_root], nb_root);
            best = Some(match best {
                None => candidate,
                Some(b) if candidate.0 > b.0 || (candidate.0 == b.0 && candidate.1 < b.1) => candidate,
                Some(b) => b,
            });
        }
        if let Some((_, nb_root)) = best {
            parent[root] = nb_root;
            sizes[nb_root] += sizes[root];
        }
    }

    // Dense relabel in raster discovery order.
    let mut remap = vec![usize::MAX; n_comp];
    let mut next = 0usize;
    let mut out = vec![0usize; pixels];
    for p in 0..pixels {
        let root = find(&mut parent, comp[p]);
        if remap[root] == usize::MAX {
            remap[root] = next;
            next += 1;
        }
        out[p] = remap[root];
    }

    Ok(Segmentation {
        height: h,
        width: w,
        assignments: out,
        count: next,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthSpec};

    fn uniform_cube(h: usize, w: usize, bands: usize) -> HsiCube {
        HsiCube::new(h, w, bands, vec![0.5; h * w * bands], vec![1; h * w]).unwrap()
    }

    #[test]
    fn uniform_ten_by_ten_k4_gives_four_equal_quadrants() {
        // With zero spectral contrast the spatial term alone partitions the
        // grid, exactly like plain k-means on coordinates.
        let cube = uniform_cube(10, 10, 3);
        let seg = slic_segment(&cube, 4, 0.08, 10, 1).unwrap();
        assert_eq!(seg.count, 4);
        let members = seg.members();
        for m in &members {
            assert_eq!(m.len(), 25);
        }
        // quadrant corners end up in four distinct clusters
        let ids = [
            seg.assignments[0],
            seg.assignments[9],
            seg.assignments[90],
            seg.assignments[99],
        ];
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn k1_puts_everything_in_one_superpixel() {
        let cube = uniform_cube(6, 7, 2);
        let seg = slic_segment(&cube, 1, 0.08, 5, 1).unwrap();
        assert_eq!(seg.count, 1);
        assert!(seg.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn ids_are_dense_and_every_pixel_assigned() {
        let spec = SynthSpec::balanced(3, 3, 6, 5, 0.02, 9);
        let cube = synth_dataset(&spec).unwrap().normalize();
        let seg = slic_segment(&cube, 12, 0.08, 10, 3).unwrap();
        assert_eq!(seg.assignments.len(), cube.num_pixels());
        let mut seen = vec![false; seg.count];
        for &a in &seg.assignments {
            assert!(a < seg.count);
            seen[a] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn segments_are_contiguous() {
        let spec = SynthSpec::balanced(4, 4, 5, 6, 0.05, 2);
        let cube = synth_dataset(&spec).unwrap().normalize();
        let seg = slic_segment(&cube, 16, 0.08, 10, 3).unwrap();
        // flood fill each segment from its first pixel; must reach all members
        let members = seg.members();
        for (id, m) in members.iter().enumerate() {
            let mut reached = std::collections::BTreeSet::new();
            let mut stack = vec![m[0]];
            reached.insert(m[0]);
            while let Some(p) = stack.pop() {
                let (y, x) = (p / seg.width, p % seg.width);
                for q in [
                    (y > 0).then(|| p - seg.width),
                    (y + 1 < seg.height).then(|| p + seg.width),
                    (x > 0).then(|| p - 1),
                    (x + 1 < seg.width).then(|| p + 1),
                ]
                .into_iter()
                .flatten()
                {
                    if seg.assignments[q] == id && reached.insert(q) {
                        stack.push(q);
                    }
                }
            }
            assert_eq!(reached.len(), m.len(), "segment {id} not contiguous");
        }
    }

    #[test]
    fn k_larger_than_pixel_count_errors() {
        let cube = uniform_cube(2, 2, 1);
        assert!(slic_segment(&cube, 5, 0.08, 1, 0).is_err());
    }

    #[test]
    fn deterministic() {
        let spec = SynthSpec::balanced(3, 3, 5, 4, 0.03, 17);
        let cube = synth_dataset(&spec).unwrap().normalize();
        let a = slic_segment(&cube, 9, 0.08, 10, 5).unwrap();
        let b = slic_segment(&cube, 9, 0.08, 10, 5).unwrap();
        assert_eq!(a, b);
    }
}
