//! Digitally reconstructed radiographs `p = M f` by exact voxel traversal
//! (Siddon's parametrisation with Jacob's incremental index updates), plus
//! the image utilities that turn a detector image into a network input.
//!
//! Rays travel along +depth (axis 0). Detector rows map to axis 1 and
//! columns to axis 2. The isocenter is the volume centre.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, VoxelVolume};

/// Source-to-isocenter distance for thorax imaging, mm.
pub const THORAX_SOURCE_MM: f64 = 2000.0;
/// Source-to-isocenter distance for abdominal imaging, mm.
pub const ABDOMEN_SOURCE_MM: f64 = 1000.0;
pub const PIXEL_MM: f64 = 0.51;

/// `max(0, (HU + 1000) / 1000)`: air 0, water 1.
#[inline]
pub fn hu_to_density(hu: f32) -> f32 {
    ((hu + 1000.0) / 1000.0).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamMode {
    Cone,
    Parallel,
}

impl std::str::FromStr for BeamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cone" => Ok(BeamMode::Cone),
            "parallel" => Ok(BeamMode::Parallel),
            _ => Err(Error::config(format!("unknown beam mode `{s}` (cone | parallel)"))),
        }
    }
}

/// Anterior-posterior projection geometry.
///
/// In cone mode `pixel_mm` is the detector pitch at the detector plane; in
/// parallel mode it is the ray spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    pub mode: BeamMode,
    pub source_distance_mm: f64,
    pub detector_distance_mm: f64,
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
}

impl ProjectionGeometry {
    /// Cone beam whose detector, magnified back to the isocenter, spans
    /// exactly `fov_mm`.
    pub fn cone_aligned(source_distance_mm: f64, detector: usize, pixel_mm: f64, fov_mm: f64) -> Result<Self> {
        let width = detector as f64 * pixel_mm;
        if !(fov_mm > 0.0) || width < fov_mm {
            return Err(Error::Geometry(format!(
                "detector width {width} mm cannot cover a {fov_mm} mm field of view"
            )));
        }
        let magnification = width / fov_mm;
        Ok(ProjectionGeometry {
            mode: BeamMode::Cone,
            source_distance_mm,
            detector_distance_mm: source_distance_mm * (magnification - 1.0),
            rows: detector,
            cols: detector,
            pixel_mm,
        })
    }

    pub fn parallel(detector: usize, pixel_mm: f64) -> Self {
        ProjectionGeometry {
            mode: BeamMode::Parallel,
            source_distance_mm: 0.0,
            detector_distance_mm: 0.0,
            rows: detector,
            cols: detector,
            pixel_mm,
        }
    }

    /// Same rays, detector resampled to `n x n` pixels over the same area.
    pub fn with_detector(&self, n: usize) -> Self {
        ProjectionGeometry {
            rows: n,
            cols: n,
            pixel_mm: self.pixel_mm * self.rows as f64 / n as f64,
            ..self.clone()
        }
    }

    /// Pixel pitch referred to the isocenter plane.
    pub fn pixel_at_isocenter_mm(&self) -> f64 {
        match self.mode {
            BeamMode::Parallel => self.pixel_mm,
            BeamMode::Cone => {
                self.pixel_mm * self.source_distance_mm / (self.source_distance_mm + self.detector_distance_mm)
            }
        }
    }

    pub fn validate(&self, extent_mm: [f64; 3]) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || !(self.pixel_mm > 0.0 && self.pixel_mm.is_finite()) {
            return Err(Error::Geometry(format!(
                "detector {}x{} with pitch {} mm",
                self.rows, self.cols, self.pixel_mm
            )));
        }
        if self.mode == BeamMode::Cone {
            let half_diag = extent_mm.iter().map(|e| (e / 2.0).powi(2)).sum::<f64>().sqrt();
            if !(self.source_distance_mm > half_diag) {
                return Err(Error::Geometry(format!(
                    "source at {} mm lies inside the volume (half-diagonal {half_diag:.2} mm)",
                    self.source_distance_mm
                )));
            }
            if !(self.detector_distance_mm > extent_mm[0] / 2.0) || !self.detector_distance_mm.is_finite() {
                return Err(Error::Geometry(format!(
                    "detector plane at {} mm intersects the volume",
                    self.detector_distance_mm
                )));
            }
        }
        Ok(())
    }

    /// Ray endpoints `(source, detector point)` in mm, `[depth, row, col]`,
    /// relative to the isocenter.
    pub fn ray(&self, row: usize, col: usize, extent_mm: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let u = (row as f64 + 0.5 - self.rows as f64 / 2.0) * self.pixel_mm;
        let v = (col as f64 + 0.5 - self.cols as f64 / 2.0) * self.pixel_mm;
        match self.mode {
            BeamMode::Cone => ([-self.source_distance_mm, 0.0, 0.0], [self.detector_distance_mm, u, v]),
            BeamMode::Parallel => {
                let l = extent_mm[0];
                ([-l, u, v], [l, u, v])
            }
        }
    }
}

/// Voxel grid placement: lower corner and spacing per axis, in mm.
#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn of(v: &VoxelVolume) -> Self {
        Grid {
            dims: v.dims(),
            spacing: v.spacing().map(f64::from),
        }
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    fn lower(&self) -> [f64; 3] {
        self.extent_mm().map(|e| -e / 2.0)
    }
}

/// Parametric entry/exit of the segment `s + a (p - s)`, `a in [0, 1]`,
/// through the grid box, or `None` if it misses.
pub fn clip_ray(grid: &Grid, s: [f64; 3], p: [f64; 3]) -> Option<(f64, f64)> {
    let lo = grid.lower();
    let ext = grid.extent_mm();
    let (mut amin, mut amax) = (0.0f64, 1.0f64);
    for a in 0..3 {
        let d = p[a] - s[a];
        if d == 0.0 {
            if s[a] < lo[a] || s[a] >= lo[a] + ext[a] {
                return None;
            }
            continue;
        }
        let a0 = (lo[a] - s[a]) / d;
        let a1 = (lo[a] + ext[a] - s[a]) / d;
        amin = amin.max(a0.min(a1));
        amax = amax.min(a0.max(a1));
    }
    (amin < amax).then_some((amin, amax))
}

/// Visits every voxel pierced by the ray in traversal order with its
/// intersection length in mm. Returns the clipped chord length.
pub fn traverse(grid: &Grid, s: [f64; 3], p: [f64; 3], mut visit: impl FnMut(usize, f64)) -> f64 {
    let Some((amin, amax)) = clip_ray(grid, s, p) else {
        return 0.0;
    };
    let lo = grid.lower();
    let d: [f64; 3] = std::array::from_fn(|a| p[a] - s[a]);
    let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = grid.dims.map(|v| v as isize);

    // entry voxel: on a boundary plane, pick the voxel on the side the ray
    // is heading into
    let mut idx = [0isize; 3];
    for a in 0..3 {
        let pos = (s[a] + amin * d[a] - lo[a]) / grid.spacing[a];
        let r = pos.round();
        let i = if (pos - r).abs() < 1e-9 && d[a] != 0.0 {
            if d[a] > 0.0 {
                r as isize
            } else {
                r as isize - 1
            }
        } else {
            pos.floor() as isize
        };
        idx[a] = i.clamp(0, n[a] - 1);
    }
    let step: [isize; 3] = d.map(|v| if v > 0.0 { 1 } else { -1 });
    let next_alpha = |a: usize, i: isize| -> f64 {
        if d[a] == 0.0 {
            return f64::INFINITY;
        }
        let plane = if d[a] > 0.0 { i + 1 } else { i };
        (lo[a] + plane as f64 * grid.spacing[a] - s[a]) / d[a]
    };
    let mut next = [next_alpha(0, idx[0]), next_alpha(1, idx[1]), next_alpha(2, idx[2])];
    let mut alpha = amin;
    let dims = grid.dims;
    loop {
        let an = next[0].min(next[1]).min(next[2]).min(amax);
        if an > alpha {
            let voxel = (idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize;
            visit(voxel, (an - alpha) * len);
            alpha = an;
        }
        if alpha >= amax {
            break;
        }
        let mut left = false;
        for a in 0..3 {
            if next[a] <= alpha {
                idx[a] += step[a];
                if idx[a] < 0 || idx[a] >= n[a] {
                    left = true;
                }
                next[a] = next_alpha(a, idx[a]);
            }
        }
        if left {
            break;
        }
    }
    (amax - amin) * len
}

/// A 2D image with isotropic pixel pitch and optional record of the
/// min/max used to normalise it.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    pixel_mm: f32,
    data: Vec<f32>,
    norm: Option<(f32, f32)>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, pixel_mm: f32, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::config(format!(
                "image {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Image {
            rows,
            cols,
            pixel_mm,
            data,
            norm: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixel_mm(&self) -> f32 {
        self.pixel_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `(min, max)` recorded by [`normalize_image`].
    pub fn normalization(&self) -> Option<(f32, f32)> {
        self.norm
    }
}

/// Raytraces a density field (already mapped to non-negative density).
pub fn raytrace_density(density: &[f32], grid: &Grid, geom: &ProjectionGeometry) -> Result<Image> {
    geom.validate(grid.extent_mm())?;
    if density.len() != grid.dims.iter().product::<usize>() {
        return Err(Error::config("density length does not match grid"));
    }
    let ext = grid.extent_mm();
    let mut data = vec![0f32; geom.rows * geom.cols];
    data.par_chunks_mut(geom.cols).enumerate().for_each(|(r, row)| {
        for (c, out) in row.iter_mut().enumerate() {
            let (s, p) = geom.ray(r, c, ext);
            let mut acc = 0f64;
            traverse(grid, s, p, |v, l| acc += l * density[v] as f64);
            *out = acc as f32;
        }
    });
    Image::new(geom.rows, geom.cols, geom.pixel_mm as f32, data)
}

/// DRR of a CT volume: HU are mapped with [`hu_to_density`] and each pixel
/// is the exact sum of intersection length times density.
pub fn siddon_raytrace(volume: &VoxelVolume, geom: &ProjectionGeometry) -> Result<Image> {
    let density: Vec<f32> = volume.data().iter().map(|&h| hu_to_density(h)).collect();
    raytrace_density(&density, &Grid::of(volume), geom)
}

/// Sparse projection matrix `M`: per pixel, `(voxel, length_mm)` entries in
/// traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct RayWeights {
    pub rows: usize,
    pub cols: usize,
    pub pixel_mm: f64,
    /// CSR row pointers, one row per pixel.
    pub offsets: Vec<usize>,
    pub voxels: Vec<u32>,
    pub lengths: Vec<f64>,
    /// In-volume chord length per pixel.
    pub chords: Vec<f64>,
}

impl RayWeights {
    pub fn pixel(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.voxels[r.clone()]
            .iter()
            .map(|&v| v as usize)
            .zip(self.lengths[r].iter().copied())
    }

    /// `M f`, bitwise equal to [`raytrace_density`] on the same field.
    pub fn apply(&self, density: &[f32]) -> Image {
        let data = (0..self.rows * self.cols)
            .map(|i| {
                let mut acc = 0f64;
                for (v, l) in self.pixel(i) {
                    acc += l * density[v] as f64;
                }
                acc as f32
            })
            .collect();
        Image::new(self.rows, self.cols, self.pixel_mm as f32, data).expect("consistent dims")
    }
}

pub fn extract_ray_weights(geom: &ProjectionGeometry, grid: &Grid) -> Result<RayWeights> {
    geom.validate(grid.extent_mm())?;
    let ext = grid.extent_mm();
    let per_pixel: Vec<(Vec<(u32, f64)>, f64)> = (0..geom.rows * geom.cols)
        .into_par_iter()
        .map(|i| {
            let (s, p) = geom.ray(i / geom.cols, i % geom.cols, ext);
            let mut list = Vec::new();
            let chord = traverse(grid, s, p, |v, l| list.push((v as u32, l)));
            (list, chord)
        })
        .collect();
    let mut w = RayWeights {
        rows: geom.rows,
        cols: geom.cols,
        pixel_mm: geom.pixel_mm,
        offsets: vec![0],
        voxels: Vec::new(),
        lengths: Vec::new(),
        chords: Vec::with_capacity(per_pixel.len()),
    };
    for (list, chord) in per_pixel {
        for (v, l) in list {
            w.voxels.push(v);
            w.lengths.push(l);
        }
        w.offsets.push(w.voxels.len());
        w.chords.push(chord);
    }
    Ok(w)
}

/// Area-weighting matrix from `n_src` to `n_dst` cells along one axis.
fn area_weights(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    let r = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|o| {
            let (a, b) = (o as f64 * r, (o + 1) as f64 * r);
            (a.floor() as usize..(b.ceil() as usize).min(n_src))
                .filter_map(|k| {
                    let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
                    (overlap > 0.0).then_some((k, overlap / r))
                })
                .collect()
        })
        .collect()
}

/// Box average when the target divides the source, area-weighted otherwise.
pub fn downsample_image(img: &Image, rows: usize, cols: usize) -> Result<Image> {
    if rows == 0 || cols == 0 || rows > img.rows || cols > img.cols {
        return Err(Error::config(format!(
            "cannot downsample {}x{} to {rows}x{cols}",
            img.rows, img.cols
        )));
    }
    if rows == img.rows && cols == img.cols {
        return Ok(img.clone());
    }
    let wr = area_weights(img.rows, rows);
    let wc = area_weights(img.cols, cols);
    let mut data = Vec::with_capacity(rows * cols);
    for row_w in &wr {
        for col_w in &wc {
            let mut acc = 0f64;
            for &(r, a) in row_w {
                for &(c, b) in col_w {
                    acc += a * b * img.get(r, c) as f64;
                }
            }
            data.push(acc as f32);
        }
    }
    let pixel = img.pixel_mm * img.rows as f32 / rows as f32;
    let mut out = Image::new(rows, cols, pixel, data)?;
    out.norm = img.norm;
    Ok(out)
}

/// `(v - min) / (max - min)`; a constant image maps to zeros.
pub fn normalize_image(img: &Image) -> Image {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let data = img
        .data
        .iter()
        .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    Image {
        data,
        norm: Some((lo, hi)),
        ..img.clone()
    }
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(img: &Image) -> Option<Image> {
    let (lo, hi) = img.norm?;
    Some(Image {
        data: img.data.iter().map(|&v| lo + v * (hi - lo)).collect(),
        norm: None,
        ..img.clone()
    })
}

/// Binary 2D mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask2d {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl Mask2d {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Pixels whose ray crosses more than half a voxel of mask.
pub fn project_mask(mask: &MaskVolume, geom: &ProjectionGeometry) -> Result<Mask2d> {
    let density: Vec<f32> = mask.data().iter().map(|&m| (m != 0) as u8 as f32).collect();
    let grid = Grid {
        dims: mask.dims(),
        spacing: mask.spacing().map(f64::from),
    };
    let img = raytrace_density(&density, &grid, geom)?;
    let half_voxel = 0.5 * grid.spacing[0];
    Ok(Mask2d {
        rows: img.rows,
        cols: img.cols,
        data: img.data.iter().map(|&v| (v as f64 > half_voxel) as u8).collect(),
    })
}

/// Renders the network input: DRR at `geom`, box-downsampled to `n x n`,
/// normalised to `[0, 1]`.
pub fn render_input(volume: &VoxelVolume, geom: &ProjectionGeometry, n: usize) -> Result<(Image, Image)> {
    let drr = siddon_raytrace(volume, geom)?;
    let small = downsample_image(&drr, n, n)?;
    Ok((drr, normalize_image(&small)))
}
