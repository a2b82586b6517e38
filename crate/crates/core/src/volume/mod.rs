//! 4D diffusion volumes, slices and their normalization.
//!
//! Data are stored x-fastest: the linear index of `(x, y, z, v)` is
//! `x + X·(y + Y·(z + Z·v))`, which is also the NIfTI on-disk order.

mod gradients;
mod nifti;

pub use gradients::{read_gradient_table, select_shell, GradientTable, B0_THRESHOLD};
pub use nifti::{read_nifti, write_nifti, write_nifti_as, NiftiDatatype};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// What the channels of a [`Volume4D`] hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Dwi,
    ShCoeffs,
    Scalar,
    Labels,
}

pub type Affine = [[f64; 4]; 4];

pub fn affine_from_spacing(spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate().take(3) {
        row[i] = spacing[i];
    }
    a[3][3] = 1.0;
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    spacing: [f64; 3],
    affine: Affine,
    data: Vec<f64>,
    intent: Intent,
}

impl Volume4D {
    pub fn new(
        dims: [usize; 4],
        spacing: [f64; 3],
        affine: Affine,
        data: Vec<f64>,
        intent: Intent,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("dimensions must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims:?} ({expected})",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if intent == Intent::Labels && data.iter().any(|&l| l < 0.0 || l.fract() != 0.0) {
            return Err(Error::InvalidArgument(
                "label volumes must hold non-negative integers".into(),
            ));
        }
        Ok(Volume4D {
            dims,
            spacing,
            affine,
            data,
            intent,
        })
    }

    /// Zero-filled volume with an axis-aligned affine built from `spacing`.
    pub fn zeros(dims: [usize; 4], spacing: [f64; 3], intent: Intent) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, affine_from_spacing(spacing), vec![0.0; n], intent)
    }

    /// A volume with the same geometry as `self` but different channel count and data.
    pub fn with_channels(&self, channels: usize, data: Vec<f64>, intent: Intent) -> Result<Self> {
        let [x, y, z, _] = self.dims;
        Self::new([x, y, z, channels], self.spacing, self.affine, data, intent)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn intent(&self) -> Intent {
        self.intent
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, v: usize) -> usize {
        let [nx, ny, nz, _] = self.dims;
        x + nx * (y + ny * (z + nz * v))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, v: usize) -> f64 {
        self.data[self.index(x, y, z, v)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: usize, value: f64) {
        let i = self.index(x, y, z, v);
        self.data[i] = value;
    }

    /// All channels of the voxel with spatial linear index `voxel`.
    pub fn voxel_signal(&self, voxel: usize) -> Vec<f64> {
        let n = self.n_voxels();
        (0..self.dims[3]).map(|v| self.data[voxel + n * v]).collect()
    }

    /// Keep the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let n = self.n_voxels();
        let mut data = Vec::with_capacity(n * channels.len());
        for &c in channels {
            if c >= self.dims[3] {
                return Err(Error::shape(format!(
                    "channel {c} out of range for {} channels",
                    self.dims[3]
                )));
            }
            data.extend_from_slice(&self.data[c * n..(c + 1) * n]);
        }
        self.with_channels(channels.len(), data, self.intent)
    }

    /// Channel-wise mean, as a single-channel volume.
    pub fn mean_channels(&self) -> Self {
        let n = self.n_voxels();
        let c = self.dims[3];
        let mut data = vec![0.0; n];
        for v in 0..c {
            for (d, s) in data.iter_mut().zip(&self.data[v * n..(v + 1) * n]) {
                *d += s;
            }
        }
        for d in &mut data {
            *d /= c as f64;
        }
        Volume4D {
            dims: [self.dims[0], self.dims[1], self.dims[2], 1],
            spacing: self.spacing,
            affine: self.affine,
            data,
            intent: self.intent,
        }
    }

    /// Extract axial slice `z` with all channels.
    pub fn slice(&self, z: usize) -> SliceImage {
        let [nx, ny, _, nv] = self.dims;
        let plane = nx * ny;
        let mut data = Vec::with_capacity(plane * nv);
        for v in 0..nv {
            let start = self.index(0, 0, z, v);
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        SliceImage {
            width: nx,
            height: ny,
            channels: nv,
            data,
            norm_range: None,
        }
    }

    pub fn set_slice(&mut self, z: usize, s: &SliceImage) -> Result<()> {
        let [nx, ny, _, nv] = self.dims;
        if s.width != nx || s.height != ny || s.channels != nv {
            return Err(Error::shape(format!(
                "slice {}x{}x{} does not fit volume {nx}x{ny}x{nv}",
                s.width, s.height, s.channels
            )));
        }
        let plane = nx * ny;
        for v in 0..nv {
            let start = self.index(0, 0, z, v);
            self.data[start..start + plane].copy_from_slice(&s.data[v * plane..(v + 1) * plane]);
        }
        Ok(())
    }

    /// Labels as integers; fails unless the intent is [`Intent::Labels`].
    pub fn labels(&self) -> Result<Vec<u32>> {
        if self.intent != Intent::Labels {
            return Err(Error::InvalidArgument("volume is not a label map".into()));
        }
        Ok(self.data[..self.n_voxels()].iter().map(|&l| l as u32).collect())
    }

    pub(crate) fn set_intent(&mut self, intent: Intent) {
        self.intent = intent;
    }
}

/// Boolean spatial mask over the `X·Y·Z` voxels of a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    inside: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], inside: Vec<bool>) -> Result<Self> {
        if inside.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("mask length does not match its dimensions"));
        }
        Ok(Mask { dims, inside })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Mask {
            dims,
            inside: vec![true; dims.iter().product()],
        }
    }

    /// Voxels with any nonzero label.
    pub fn from_labels(labels: &Volume4D) -> Result<Self> {
        Self::from_labels_where(labels, |l| l > 0)
    }

    /// Voxels carrying exactly `label`.
    pub fn from_label(labels: &Volume4D, label: u32) -> Result<Self> {
        Self::from_labels_where(labels, |l| l == label)
    }

    fn from_labels_where(labels: &Volume4D, f: impl Fn(u32) -> bool) -> Result<Self> {
        let l = labels.labels()?;
        Ok(Mask {
            dims: labels.spatial_dims(),
            inside: l.into_iter().map(f).collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn contains(&self, voxel: usize) -> bool {
        self.inside[voxel]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.inside
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Intersection with the axial slices in `zs`.
    pub fn restrict_to_slices(&self, zs: &[usize]) -> Mask {
        let plane = self.dims[0] * self.dims[1];
        let inside = self
            .inside
            .iter()
            .enumerate()
            .map(|(i, &b)| b && zs.contains(&(i / plane)))
            .collect();
        Mask { dims: self.dims, inside }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::shape("mask dimensions differ"));
        }
        Ok(Mask {
            dims: self.dims,
            inside: self.inside.iter().zip(&other.inside).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn check_volume(&self, v: &Volume4D) -> Result<()> {
        if self.dims != v.spatial_dims() {
            return Err(Error::shape(format!(
                "mask {:?} does not match volume {:?}",
                self.dims,
                v.spatial_dims()
            )));
        }
        Ok(())
    }
}

/// Per-channel normalization mode for slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Every channel rescaled by its own min and max.
    #[default]
    PerChannel,
    /// One min/max shared by all channels.
    Joint,
}

/// A 2D, multi-channel image. Channel-major, x-fastest:
/// `data[c·W·H + y·W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// `(min, max)` per channel, recorded by [`normalize_slice`].
    pub norm_range: Option<Vec<(f64, f64)>>,
}

impl SliceImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::shape("slice dimensions must be positive"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "slice data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(SliceImage {
            width,
            height,
            channels,
            data,
            norm_range: None,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        SliceImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            norm_range: None,
        }
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// `w_self·self + (1 − w_self)·other`, element-wise, evaluated as
    /// `other + w_self·(self − other)`.
    pub fn weighted_average(&self, other: &SliceImage, w_self: f64) -> Result<SliceImage> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels
        {
            return Err(Error::shape("cannot average slices of different shape"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| b + w_self * (a - b))
            .collect();
        Ok(SliceImage {
            data,
            norm_range: None,
            ..*self
        })
    }

    /// Center-crop or zero-pad to `size × size`. Returns the offsets needed by
    /// [`SliceImage::uncrop`].
    pub fn crop_or_pad(&self, size: usize) -> (SliceImage, CropWindow) {
        let win = CropWindow::new(self.width, self.height, size);
        let mut out = SliceImage::zeros(size, size, self.channels);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..self.height {
                let ty = y as isize + win.dy;
                if ty < 0 || ty >= size as isize {
                    continue;
                }
                for x in 0..self.width {
                    let tx = x as isize + win.dx;
                    if tx < 0 || tx >= size as isize {
                        continue;
                    }
                    dst[ty as usize * size + tx as usize] = src[y * self.width + x];
                }
            }
        }
        (out, win)
    }

    /// Undo [`SliceImage::crop_or_pad`]. Voxels cropped away come back as zero.
    pub fn uncrop(&self, win: &CropWindow) -> SliceImage {
        let mut out = SliceImage::zeros(win.width, win.height, self.channels);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..win.height {
                let sy = y as isize + win.dy;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..win.width {
                    let sx = x as isize + win.dx;
                    if sx < 0 || sx >= self.width as isize {
                        continue;
                    }
                    dst[y * win.width + x] = src[sy as usize * self.width + sx as usize];
                }
            }
        }
        out
    }
}

/// Placement of an original slice inside a square network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub width: usize,
    pub height: usize,
    /// Offset added to original coordinates to get input coordinates.
    pub dx: isize,
    pub dy: isize,
}

impl CropWindow {
    fn new(width: usize, height: usize, size: usize) -> Self {
        CropWindow {
            width,
            height,
            dx: (size as isize - width as isize) / 2,
            dy: (size as isize - height as isize) / 2,
        }
    }
}

/// Rescale each channel to `[0, 1]` by its min and max. Constant channels map
/// to zero and record `(min, min)`.
pub fn normalize_slice(s: &SliceImage) -> SliceImage {
    normalize_slice_with(s, NormMode::PerChannel)
}

pub fn normalize_slice_with(s: &SliceImage, mode: NormMode) -> SliceImage {
    let ranges: Vec<(f64, f64)> = match mode {
        NormMode::PerChannel => (0..s.channels).map(|c| min_max(s.channel(c))).collect(),
        NormMode::Joint => vec![min_max(&s.data); s.channels],
    };
    let mut out = s.clone();
    for (c, &(lo, hi)) in ranges.iter().enumerate() {
        let span = hi - lo;
        for x in out.channel_mut(c) {
            *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
        }
    }
    out.norm_range = Some(
        ranges
            .into_iter()
            .map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo, lo) })
            .collect(),
    );
    out
}

/// Inverse of [`normalize_slice`]. Slices without a recorded range are returned as-is.
pub fn denormalize_slice(s: &SliceImage) -> SliceImage {
    let mut out = s.clone();
    if let Some(ranges) = &s.norm_range {
        for (c, &(lo, hi)) in ranges.iter().enumerate() {
            for x in out.channel_mut(c) {
                *x = lo + *x * (hi - lo);
            }
        }
    }
    out.norm_range = None;
    out
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}
