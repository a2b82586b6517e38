//! Missing-slice synthesis by latent blending, with histogram matching back to
//! the intensities of the neighboring slices.

use crate::error::{Error, Result};
use crate::interp::check_gap;
use crate::linalg;
use crate::nn::{ModelParams, Tensor4};
use crate::sh::{fitting_matrix, sh_basis_matrix};
use crate::volume::{normalize_slice_with, GradientTable, SliceImage, Volume4D};

/// `n_missing` consecutive slices starting at `gap_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapSpec {
    pub gap_start: usize,
    pub n_missing: usize,
}

impl GapSpec {
    pub fn new(gap_start: usize, n_missing: usize) -> Result<Self> {
        if !(1..=2).contains(&n_missing) {
            return Err(Error::InvalidArgument(format!(
                "gaps of {n_missing} slices are not supported (1 or 2)"
            )));
        }
        Ok(GapSpec {
            gap_start,
            n_missing,
        })
    }

    /// Index of the slice preceding the gap.
    pub fn above(&self) -> usize {
        self.gap_start - 1
    }

    /// Index of the slice following the gap.
    pub fn below(&self) -> usize {
        self.gap_start + self.n_missing
    }

    pub fn slices(&self) -> std::ops::Range<usize> {
        self.gap_start..self.gap_start + self.n_missing
    }

    /// Weight of the preceding neighbor for each missing slice: `1 − k/(N+1)`.
    pub fn alphas(&self) -> Vec<f64> {
        let den = (self.n_missing + 1) as f64;
        (1..=self.n_missing).map(|k| (den - k as f64) / den).collect()
    }

    pub fn check(&self, depth: usize) -> Result<()> {
        check_gap(depth, self.gap_start, self.n_missing)
    }
}

/// `alpha·a + (1 − alpha)·b`, evaluated as `b + alpha·(a − b)`.
pub fn blend_latents(a: &Tensor4, b: &Tensor4, alpha: f64) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "latents {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("blend weight {alpha} outside [0, 1]")));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| y + alpha * (x - y))
        .collect();
    Ok(Tensor4 { data, ..*a })
}

/// Map `src` through the quantile function of `reference`: each value takes
/// its (mid)rank quantile in `src` and reads the sorted reference at that
/// quantile with linear interpolation.
fn match_values(src: &[f64], reference: &[f64]) -> Vec<f64> {
    let n = src.len();
    let m = reference.len();
    if n == 0 || m == 0 {
        return vec![0.0; n];
    }
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| src[i].total_cmp(&src[j]));

    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && src[order[end]] == src[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end - 1) as f64 / 2.0;
        let q = if n > 1 { mid_rank / (n - 1) as f64 } else { 0.5 };
        let pos = q * (m - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(m - 1);
        let frac = pos - lo as f64;
        let value = if frac == 0.0 {
            sorted_ref[lo]
        } else {
            sorted_ref[lo] + frac * (sorted_ref[hi] - sorted_ref[lo])
        };
        for &i in &order[start..end] {
            out[i] = value;
        }
        start = end;
    }
    out
}

/// Per-channel exact histogram matching of `source` onto `reference`.
pub fn histogram_match(source: &SliceImage, reference: &SliceImage) -> Result<SliceImage> {
    if source.channels != reference.channels {
        return Err(Error::shape(format!(
            "{} source channels vs {} reference channels",
            source.channels, reference.channels
        )));
    }
    let mut out = source.clone();
    out.norm_range = None;
    for c in 0..source.channels {
        let mapped = match_values(source.channel(c), reference.channel(c));
        out.channel_mut(c).copy_from_slice(&mapped);
    }
    Ok(out)
}

/// Histogram matching restricted to `mask` (one flag per pixel, shared by
/// both slices). Pixels outside the mask are set to zero.
pub fn histogram_match_masked(
    source: &SliceImage,
    reference: &SliceImage,
    mask: &[bool],
) -> Result<SliceImage> {
    if source.channels != reference.channels
        || source.plane() != reference.plane()
        || mask.len() != source.plane()
    {
        return Err(Error::shape("source, reference and mask must share a grid"));
    }
    let inside: Vec<usize> = (0..mask.len()).filter(|&p| mask[p]).collect();
    let mut out = SliceImage::zeros(source.width, source.height, source.channels);
    for c in 0..source.channels {
        let src: Vec<f64> = inside.iter().map(|&p| source.channel(c)[p]).collect();
        let rf: Vec<f64> = inside.iter().map(|&p| reference.channel(c)[p]).collect();
        let mapped = match_values(&src, &rf);
        let dst = out.channel_mut(c);
        for (&p, v) in inside.iter().zip(mapped) {
            dst[p] = v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferOptions {
    /// Restrict histogram matching to these pixels (one flag per in-plane voxel).
    pub match_mask: Option<Vec<bool>>,
}

fn batch_of_two(a: &SliceImage, b: &SliceImage) -> Result<Tensor4> {
    Tensor4::from_slices(&[a, b])
}

/// Synthesize the slices of `gap` from its two neighbors in `v` with `model`.
pub fn infer_gap_signal(
    model: &ModelParams,
    v: &Volume4D,
    gap: GapSpec,
    opts: &InferOptions,
) -> Result<Vec<SliceImage>> {
    let cfg = &model.config;
    if v.channels() != cfg.input_channels {
        return Err(Error::shape(format!(
            "model takes {} channels, volume has {}",
            cfg.input_channels,
            v.channels()
        )));
    }
    gap.check(v.spatial_dims()[2])?;
    let above = v.slice(gap.above());
    let below = v.slice(gap.below());
    let (na, win) = normalize_slice_with(&above, cfg.norm).crop_or_pad(cfg.input_size);
    let (nb, _) = normalize_slice_with(&below, cfg.norm).crop_or_pad(cfg.input_size);
    let latents = model.encode(&batch_of_two(&na, &nb)?)?;
    let item = latents.item_len();
    let za = Tensor4::from_vec(1, latents.c, latents.h, latents.w, latents.data[..item].to_vec())?;
    let zb = Tensor4::from_vec(1, latents.c, latents.h, latents.w, latents.data[item..].to_vec())?;

    let alphas = gap.alphas();
    let mut blended = Vec::with_capacity(alphas.len() * item);
    for &alpha in &alphas {
        blended.extend(blend_latents(&za, &zb, alpha)?.data);
    }
    let z = Tensor4::from_vec(alphas.len(), latents.c, latents.h, latents.w, blended)?;
    let decoded = model.decode(&z)?;

    alphas
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let out = decoded.to_slice(k).uncrop(&win);
            let reference = above.weighted_average(&below, alpha)?;
            match &opts.match_mask {
                Some(mask) => histogram_match_masked(&out, &reference, mask),
                None => histogram_match(&out, &reference),
            }
        })
        .collect()
}

/// Like [`infer_gap_signal`], but a one-channel `model` is applied to each
/// channel of `v` in turn.
pub fn infer_gap_channelwise(
    model: &ModelParams,
    v: &Volume4D,
    gap: GapSpec,
    opts: &InferOptions,
) -> Result<Vec<SliceImage>> {
    if model.config.input_channels != 1 || v.channels() == 1 {
        return infer_gap_signal(model, v, gap, opts);
    }
    let [nx, ny, _, nc] = v.dims();
    let mut out: Vec<SliceImage> = (0..gap.n_missing).map(|_| SliceImage::zeros(nx, ny, nc)).collect();
    for c in 0..nc {
        let one = v.select_channels(&[c])?;
        for (k, s) in infer_gap_signal(model, &one, gap, opts)?.into_iter().enumerate() {
            out[k].channel_mut(c).copy_from_slice(&s.data);
        }
    }
    Ok(out)
}

/// Slices synthesized for one gap: diffusion-weighted signal on the original
/// directions and the unweighted volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReconstruction {
    pub dwi: Vec<SliceImage>,
    pub b0: Vec<SliceImage>,
}

/// `out = B·C` for a coefficient slice `C` (R channel planes).
fn project_slice(coeffs: &SliceImage, basis: &[f64], d: usize) -> SliceImage {
    let p = coeffs.plane();
    let mut out = SliceImage::zeros(coeffs.width, coeffs.height, d);
    linalg::gemm(d, coeffs.channels, p, 1.0, basis, &coeffs.data, 0.0, &mut out.data);
    out
}

/// SH-domain synthesis: fit SH to the neighbors, run the coefficient model,
/// project back onto the directions of `g`, and synthesize every b0 volume
/// with `model_b0`.
#[allow(clippy::too_many_arguments)]
pub fn infer_gap_sh(
    model_sh: &ModelParams,
    model_b0: &ModelParams,
    dwi: &Volume4D,
    b0: &Volume4D,
    g: &GradientTable,
    lmax: usize,
    gap: GapSpec,
    opts: &InferOptions,
) -> Result<GapReconstruction> {
    if dwi.spatial_dims() != b0.spatial_dims() {
        return Err(Error::shape("diffusion and b0 volumes must share a grid"));
    }
    gap.check(dwi.spatial_dims()[2])?;
    if g.len() != dwi.channels() {
        return Err(Error::shape(format!(
            "{} gradient entries for {} volumes",
            g.len(),
            dwi.channels()
        )));
    }
    if !g.b0_indices().is_empty() {
        return Err(Error::InvalidArgument(
            "SH synthesis expects a single shell without b0 volumes".into(),
        ));
    }
    let basis = sh_basis_matrix(g.bvecs(), lmax)?;
    let r = basis.cols();
    let d = g.len();
    let fit = fitting_matrix(&basis, 0.0)?;

    // only the two neighbors are needed; the gap content is never read
    let [nx, ny, nz, _] = dwi.dims();
    let plane = nx * ny;
    let mut coeffs = Volume4D::zeros([nx, ny, nz, r], dwi.spacing(), crate::volume::Intent::ShCoeffs)?;
    for z in [gap.above(), gap.below()] {
        let s = dwi.slice(z);
        let mut c = SliceImage::zeros(nx, ny, r);
        linalg::gemm(r, d, plane, 1.0, &fit, &s.data, 0.0, &mut c.data);
        coeffs.set_slice(z, &c)?;
    }
    let sh_slices = infer_gap_signal(model_sh, &coeffs, gap, opts)?;
    let rows = basis.row_major();
    let dwi_slices = sh_slices.iter().map(|c| project_slice(c, &rows, d)).collect();

    let mut b0_slices: Vec<SliceImage> = (0..gap.n_missing)
        .map(|_| SliceImage::zeros(nx, ny, b0.channels()))
        .collect();
    for c in 0..b0.channels() {
        let one = b0.select_channels(&[c])?;
        for (k, s) in infer_gap_signal(model_b0, &one, gap, opts)?.into_iter().enumerate() {
            b0_slices[k].channel_mut(c).copy_from_slice(&s.data);
        }
    }
    Ok(GapReconstruction {
        dwi: dwi_slices,
        b0: b0_slices,
    })
}
