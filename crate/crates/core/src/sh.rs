//! Real, even-order spherical harmonics: basis construction, least-squares
//! fitting of single-shell signals and projection back onto directions.
//!
//! The basis is the modified real symmetric one: for each even `l` and
//! `m = −l..=l`,
//!
//! * `m < 0`: `√2 · Re(Y_l^|m|)`
//! * `m = 0`: `Y_l^0`
//! * `m > 0`: `√2 · Im(Y_l^m)`
//!
//! with the Condon–Shortley phase, polar angle measured from +z and azimuth
//! from +x.

use crate::error::{Error, Result};
use crate::linalg;
use crate::volume::{GradientTable, Intent, Mask, Volume4D};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

const UNIT_TOL: f64 = 1e-6;
const SVD_RCOND: f64 = 1e-10;

/// Number of coefficients of an even-order basis truncated at `lmax`.
pub fn n_coeffs(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 2) / 2
}

/// `(l, m)` pairs in coefficient order.
pub fn order_index(lmax: usize) -> Vec<(usize, i64)> {
    (0..=lmax)
        .step_by(2)
        .flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m)))
        .collect()
}

fn check_order(lmax: usize) -> Result<()> {
    if lmax % 2 == 1 || lmax > 8 {
        return Err(Error::InvalidOrder(lmax));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShBasisMatrix {
    pub lmax: usize,
    pub order_index: Vec<(usize, i64)>,
    /// `D × R`, row per direction.
    pub matrix: DMatrix<f64>,
}

impl ShBasisMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Row-major copy of the entries.
    pub(crate) fn row_major(&self) -> Vec<f64> {
        let (d, r) = self.matrix.shape();
        let mut out = Vec::with_capacity(d * r);
        for i in 0..d {
            for j in 0..r {
                out.push(self.matrix[(i, j)]);
            }
        }
        out
    }
}

pub fn sh_basis_matrix(directions: &[[f64; 3]], lmax: usize) -> Result<ShBasisMatrix> {
    check_order(lmax)?;
    for (index, g) in directions.iter().enumerate() {
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidDirection { index, norm });
        }
    }
    let order = order_index(lmax);
    let mut matrix = DMatrix::zeros(directions.len(), order.len());
    for (i, g) in directions.iter().enumerate() {
        let row = basis_row(g, lmax);
        for (j, v) in row.into_iter().enumerate() {
            matrix[(i, j)] = v;
        }
    }
    Ok(ShBasisMatrix {
        lmax,
        order_index: order,
        matrix,
    })
}

fn basis_row(g: &[f64; 3], lmax: usize) -> Vec<f64> {
    let cos_theta = g[2].clamp(-1.0, 1.0);
    let phi = g[1].atan2(g[0]);
    let plm = associated_legendre(lmax, cos_theta);
    let mut row = Vec::with_capacity(n_coeffs(lmax));
    for l in (0..=lmax).step_by(2) {
        for m in -(l as i64)..=l as i64 {
            let am = m.unsigned_abs() as usize;
            let k = norm_factor(l, am);
            let p = plm[l][am];
            let v = match m.cmp(&0) {
                std::cmp::Ordering::Less => 2f64.sqrt() * k * p * (am as f64 * phi).cos(),
                std::cmp::Ordering::Equal => k * p,
                std::cmp::Ordering::Greater => 2f64.sqrt() * k * p * (am as f64 * phi).sin(),
            };
            row.push(v);
        }
    }
    row
}

/// `sqrt((2l+1)/(4π) · (l−m)!/(l+m)!)`
fn norm_factor(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// `P_l^m(x)` for `0 ≤ m ≤ l ≤ lmax`, Condon–Shortley phase included.
fn associated_legendre(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; lmax + 1]; lmax + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -((2 * m - 1) as f64) * s;
        }
        p[m][m] = pmm;
        if m < lmax {
            p[m + 1][m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in (m + 2)..=lmax {
            p[l][m] = ((2 * l - 1) as f64 * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    p
}

/// Per-voxel SH coefficients of a single-shell signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffVolume {
    pub lmax: usize,
    pub lambda_reg: f64,
    /// Set when the fit had no more directions than coefficients and no regularization.
    pub ill_conditioned: bool,
    pub coeffs: Volume4D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShSidecar {
    pub lmax: usize,
    pub basis: String,
    pub lambda_reg: f64,
}

pub const BASIS_NAME: &str = "modified_real_symmetric";

impl ShCoeffVolume {
    pub fn sidecar(&self) -> ShSidecar {
        ShSidecar {
            lmax: self.lmax,
            basis: BASIS_NAME.to_string(),
            lambda_reg: self.lambda_reg,
        }
    }

    /// Coefficients as NIfTI plus a `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::volume::write_nifti(&self.coeffs, path)?;
        let json = serde_json::to_string_pretty(&self.sidecar())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut coeffs = crate::volume::read_nifti(path)?;
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let meta: ShSidecar =
            serde_json::from_str(&text).map_err(|e| Error::parse(e.column(), e.to_string()))?;
        if meta.basis != BASIS_NAME {
            return Err(Error::UnsupportedFormat(format!("SH basis {:?}", meta.basis)));
        }
        check_order(meta.lmax)?;
        if coeffs.channels() != n_coeffs(meta.lmax) {
            return Err(Error::shape(format!(
                "{} channels for lmax {} (expected {})",
                coeffs.channels(),
                meta.lmax,
                n_coeffs(meta.lmax)
            )));
        }
        coeffs.set_intent(Intent::ShCoeffs);
        Ok(ShCoeffVolume {
            lmax: meta.lmax,
            lambda_reg: meta.lambda_reg,
            ill_conditioned: false,
            coeffs,
        })
    }
}

pub fn sidecar_path(nifti: &Path) -> PathBuf {
    let s = nifti.to_string_lossy();
    let stem = s.strip_suffix(".nii").unwrap_or(&s);
    PathBuf::from(format!("{stem}.json"))
}

/// `R × D` matrix mapping a signal to coefficients, row-major.
///
/// Solves `min ‖Bc − s‖² + λ‖Λc‖²`, `Λ = diag(l(l+1))`, through the
/// pseudo-inverse of `[B; √λ·Λ]` with singular values below `1e-10·σ_max`
/// dropped.
pub fn fitting_matrix(basis: &ShBasisMatrix, lambda_reg: f64) -> Result<Vec<f64>> {
    if !(lambda_reg >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }
    let (d, r) = basis.matrix.shape();
    if d == 0 {
        return Err(Error::Underdetermined {
            measurements: 0,
            unknowns: r,
        });
    }
    let mut a = DMatrix::zeros(d + r, r);
    a.view_mut((0, 0), (d, r)).copy_from(&basis.matrix);
    let w = lambda_reg.sqrt();
    for (j, &(l, _)) in basis.order_index.iter().enumerate() {
        a[(d + j, j)] = w * (l * (l + 1)) as f64;
    }
    let pinv = pseudo_inverse(a);
    let mut out = Vec::with_capacity(r * d);
    for i in 0..r {
        for j in 0..d {
            out.push(pinv[(i, j)]);
        }
    }
    Ok(out)
}

pub(crate) fn pseudo_inverse(a: DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = SVD_RCOND * smax;
    let u = svd.u.expect("U requested");
    let vt = svd.v_t.expect("Vt requested");
    let inv: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| if s > eps { 1.0 / s } else { 0.0 })
        .collect();
    let mut v_sinv = vt.transpose();
    for (j, s) in inv.iter().enumerate() {
        v_sinv.column_mut(j).scale_mut(*s);
    }
    v_sinv * u.transpose()
}

fn shell_directions(dwi: &Volume4D, g: &GradientTable) -> Result<Vec<[f64; 3]>> {
    if g.len() != dwi.channels() {
        return Err(Error::shape(format!(
            "gradient table has {} entries, volume has {} channels",
            g.len(),
            dwi.channels()
        )));
    }
    if !g.b0_indices().is_empty() {
        return Err(Error::InvalidArgument(
            "SH fit expects a single diffusion-weighted shell without b0 volumes".into(),
        ));
    }
    Ok(g.bvecs().to_vec())
}

/// Least-squares SH fit of every voxel. Voxels outside `mask` get zero coefficients.
pub fn fit_sh(
    dwi: &Volume4D,
    g: &GradientTable,
    lmax: usize,
    lambda_reg: f64,
    mask: Option<&Mask>,
) -> Result<ShCoeffVolume> {
    let dirs = shell_directions(dwi, g)?;
    let basis = sh_basis_matrix(&dirs, lmax)?;
    let r = basis.cols();
    let d = dirs.len();
    let ill_conditioned = d <= r && lambda_reg == 0.0;
    if ill_conditioned {
        log::warn!("SH fit with {d} directions for {r} coefficients and no regularization");
    }
    let fit = fitting_matrix(&basis, lambda_reg)?;
    let n = dwi.n_voxels();
    let mut coeffs = vec![0.0; r * n];
    linalg::gemm(r, d, n, 1.0, &fit, dwi.data(), 0.0, &mut coeffs);
    if let Some(mask) = mask {
        mask.check_volume(dwi)?;
        zero_outside(&mut coeffs, n, mask);
    }
    Ok(ShCoeffVolume {
        lmax,
        lambda_reg,
        ill_conditioned,
        coeffs: dwi.with_channels(r, coeffs, Intent::ShCoeffs)?,
    })
}

fn zero_outside(data: &mut [f64], n: usize, mask: &Mask) {
    data.par_chunks_mut(n).for_each(|channel| {
        for (x, &inside) in channel.iter_mut().zip(mask.as_slice()) {
            if !inside {
                *x = 0.0;
            }
        }
    });
}

/// Evaluate coefficients on `directions`: `s = B·c` per voxel.
pub fn project_sh(sh: &ShCoeffVolume, directions: &[[f64; 3]]) -> Result<Volume4D> {
    let basis = sh_basis_matrix(directions, sh.lmax)?;
    let r = basis.cols();
    if sh.coeffs.channels() != r {
        return Err(Error::shape(format!(
            "{} coefficient channels for lmax {}",
            sh.coeffs.channels(),
            sh.lmax
        )));
    }
    let d = directions.len();
    let n = sh.coeffs.n_voxels();
    let mut out = vec![0.0; d * n];
    linalg::gemm(d, r, n, 1.0, &basis.row_major(), sh.coeffs.data(), 0.0, &mut out);
    sh.coeffs.with_channels(d, out, Intent::Dwi)
}

/// Affine intensity scale mapping `[lo, hi]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityScale {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityScale {
    /// Range of all channels over the masked voxels.
    pub fn from_volume(v: &Volume4D, mask: &Mask) -> Result<Self> {
        mask.check_volume(v)?;
        let n = v.n_voxels();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &x) in v.data().iter().enumerate() {
            if mask.contains(i % n) {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if !lo.is_finite() {
            return Err(Error::EmptyMask);
        }
        Ok(IntensityScale { lo, hi })
    }

    pub fn span(&self) -> f64 {
        if self.hi > self.lo {
            self.hi - self.lo
        } else {
            1.0
        }
    }
}

/// Mean squared difference of `a` and `b` over masked voxels and all
/// channels, after mapping both through `scale`.
pub fn normalized_mse(a: &Volume4D, b: &Volume4D, mask: &Mask, scale: IntensityScale) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    mask.check_volume(a)?;
    let n = a.n_voxels();
    let span = scale.span();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.contains(i % n) {
            let d = (x - y) / span;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Error of representing `dwi` with an order-`lmax` SH expansion: the MSE
/// between the signal and its fit-then-project reconstruction, on
/// intensities normalized to `[0, 1]` over the mask.
pub fn sh_roundtrip_error(
    dwi: &Volume4D,
    g: &GradientTable,
    lmax: usize,
    mask: Option<&Mask>,
) -> Result<f64> {
    let full = Mask::full(dwi.spatial_dims());
    let mask = mask.unwrap_or(&full);
    let scale = IntensityScale::from_volume(dwi, mask)?;
    sh_roundtrip_error_scaled(dwi, g, lmax, 0.0, mask, scale)
}

pub fn sh_roundtrip_error_scaled(
    dwi: &Volume4D,
    g: &GradientTable,
    lmax: usize,
    lambda_reg: f64,
    mask: &Mask,
    scale: IntensityScale,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let sh = fit_sh(dwi, g, lmax, lambda_reg, Some(mask))?;
    let back = project_sh(&sh, g.bvecs())?;
    normalized_mse(dwi, &back, mask, scale)
}

/// Near-uniform points on the unit sphere (spherical Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    fibonacci(n, 2.0)
}

/// Spherical Fibonacci lattice restricted to the `z ≥ 0` hemisphere. Suits
/// antipodally symmetric signals, where `g` and `−g` carry the same value.
pub fn fibonacci_hemisphere(n: usize) -> Vec<[f64; 3]> {
    fibonacci(n, 1.0)
}

fn fibonacci(n: usize, z_span: f64) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - z_span * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let v = [r * phi.cos(), r * phi.sin(), z];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / norm, v[1] / norm, v[2] / norm]
        })
        .collect()
}
