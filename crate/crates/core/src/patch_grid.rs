//! Image tensors and the regular patch grid laid over them.
//!
//! An image is resized to a square of `image_side` pixels and cut into
//! `grid_side × grid_side` non-overlapping square patches, numbered in
//! row-major order. A [`PatchArray`] in that order is the positionally
//! sorted patch set the reconstruction losses compare against.

use std::path::Path;

use crate::error::{KppError, Result};

/// Row-major, channel-interleaved pixel array with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(KppError::Shape(format!(
                "zero-sized image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(KppError::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KppError::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Image with every value set to `value`.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Quantizes back to 8 bits per channel; used when writing corpora to disk.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(KppError::Shape(format!(
                "expected 3 channels, got {}",
                self.channels
            )));
        }
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| KppError::Shape("buffer size does not match dimensions".into()))
    }

    /// Bilinear resize to `side × side` using half-pixel centers.
    ///
    /// Returns a clone when the image already has the target size.
    pub fn resize_square(&self, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(KppError::InvalidArgument("target side must be positive".into()));
        }
        if self.height == side && self.width == side {
            return Ok(self.clone());
        }
        let c = self.channels;
        let cols = sample_positions(self.width, side);
        let rows = sample_positions(self.height, side);

        // Horizontal pass: height × side.
        let mut horiz = vec![0.0; self.height * side * c];
        for r in 0..self.height {
            for (j, &(x0, x1, t)) in cols.iter().enumerate() {
                for ch in 0..c {
                    let a = self.get(r, x0, ch);
                    let b = self.get(r, x1, ch);
                    horiz[(r * side + j) * c + ch] = lerp(a, b, t);
                }
            }
        }
        let mut out = vec![0.0; side * side * c];
        for (i, &(y0, y1, t)) in rows.iter().enumerate() {
            for j in 0..side {
                for ch in 0..c {
                    let a = horiz[(y0 * side + j) * c + ch];
                    let b = horiz[(y1 * side + j) * c + ch];
                    out[(i * side + j) * c + ch] = lerp(a, b, t);
                }
            }
        }
        Self::new(side, side, c, out)
    }
}

// `a + t (b - a)` reproduces `a` exactly when `a == b`, so constant regions stay constant.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(0.0, 1.0)
}

fn sample_positions(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Geometry of a square image cut into square patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    image_side: usize,
    patch_side: usize,
}

impl GridSpec {
    /// ViT-B/16 geometry: 224-pixel images, 16-pixel patches.
    pub const VIT_B16: GridSpec = GridSpec {
        image_side: 224,
        patch_side: 16,
    };

    pub fn new(image_side: usize, patch_side: usize) -> Result<Self> {
        if patch_side == 0 || image_side == 0 {
            return Err(KppError::InvalidArgument(
                "image and patch sides must be positive".into(),
            ));
        }
        if !image_side.is_multiple_of(patch_side) {
            return Err(KppError::InvalidArgument(format!(
                "patch side {patch_side} does not divide image side {image_side}"
            )));
        }
        Ok(Self {
            image_side,
            patch_side,
        })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn index(&self, raw: usize) -> Result<PatchIndex> {
        if raw < self.n_patches() {
            Ok(PatchIndex(raw))
        } else {
            Err(KppError::InvalidArgument(format!(
                "patch index {raw} out of range for {} patches",
                self.n_patches()
            )))
        }
    }

    pub fn row_col(&self, index: PatchIndex) -> (usize, usize) {
        (index.0 / self.grid_side(), index.0 % self.grid_side())
    }
}

/// Linear, row-major identity of one patch in a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchIndex(usize);

impl PatchIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for PatchIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// The patches of one image in row-major grid order, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchArray {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl PatchArray {
    /// Builds an array from per-patch values laid out back to back.
    pub fn from_flat(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        let patch_len = grid.patch_side() * grid.patch_side() * channels;
        if channels == 0 || data.len() != grid.n_patches() * patch_len {
            return Err(KppError::Shape(format!(
                "{} values cannot hold {} patches of {patch_len}",
                data.len(),
                grid.n_patches()
            )));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.grid.n_patches()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values per patch: `patch_side² × channels`.
    pub fn patch_len(&self) -> usize {
        self.grid.patch_side() * self.grid.patch_side() * self.channels
    }

    pub fn patch(&self, k: usize) -> &[f64] {
        let n = self.patch_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn patch_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.patch_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &PatchArray) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }
}

/// Reads an 8-bit image, replicates grayscale to RGB, scales by 1/255 and
/// resizes bilinearly to the grid's square side.
pub fn load_and_resize(path: &Path, grid: GridSpec) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|source| KppError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| KppError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(KppError::Decode {
            path: path.to_path_buf(),
            message: "zero-dimension image".into(),
        });
    }
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)?.resize_square(grid.image_side())
}

/// Cuts an image into row-major patches.
pub fn split(img: &ImageTensor, grid: GridSpec) -> Result<PatchArray> {
    if img.height() != grid.image_side() || img.width() != grid.image_side() {
        return Err(KppError::Shape(format!(
            "image is {}x{}, grid expects {}x{}",
            img.height(),
            img.width(),
            grid.image_side(),
            grid.image_side()
        )));
    }
    let (ps, c, g) = (grid.patch_side(), img.channels(), grid.grid_side());
    let row_len = ps * c;
    let mut data = Vec::with_capacity(img.data().len());
    for k in 0..grid.n_patches() {
        let (pr, pc) = (k / g, k % g);
        for i in 0..ps {
            let start = ((pr * ps + i) * img.width() + pc * ps) * c;
            data.extend_from_slice(&img.data()[start..start + row_len]);
        }
    }
    PatchArray::from_flat(grid, c, data)
}

/// Inverse of [`split`].
pub fn assemble(patches: &PatchArray, grid: GridSpec) -> Result<ImageTensor> {
    if patches.grid() != grid {
        return Err(KppError::Shape(format!(
            "{} patches given, grid expects {}",
            patches.len(),
            grid.n_patches()
        )));
    }
    let (ps, c, g, side) = (
        grid.patch_side(),
        patches.channels(),
        grid.grid_side(),
        grid.image_side(),
    );
    let row_len = ps * c;
    let mut data = vec![0.0; side * side * c];
    for k in 0..grid.n_patches() {
        let (pr, pc) = (k / g, k % g);
        let patch = patches.patch(k);
        for i in 0..ps {
            let start = ((pr * ps + i) * side + pc * ps) * c;
            data[start..start + row_len].copy_from_slice(&patch[i * row_len..(i + 1) * row_len]);
        }
    }
    ImageTensor::new(side, side, c, data)
}

/// The patch at `(⌊g/2⌋, ⌊g/2⌋)`; for even grids this is the lower-right of the four middle cells.
pub fn central_index(grid: GridSpec) -> PatchIndex {
    let g = grid.grid_side();
    PatchIndex((g / 2) * g + g / 2)
}
