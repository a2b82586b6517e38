//! Diffusion tensor estimation by log-linear least squares, and FA / MD maps.

use crate::error::{Error, Result};
use crate::linalg;
use crate::sh::pseudo_inverse;
use crate::volume::{Affine, GradientTable, Intent, Mask, Volume4D, B0_THRESHOLD};
use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use rayon::prelude::*;

/// Signals at or below this are floored before taking the log.
pub const SIGNAL_FLOOR: f64 = 1e-6;

/// `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`
pub type Tensor6 = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DtiFitMethod {
    #[default]
    Ols,
    /// One reweighting pass with weights `Ŝ²` taken from the OLS fit.
    Wls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub tensors: Vec<Tensor6>,
    pub s0: Vec<f64>,
}

impl TensorVolume {
    /// Six-channel volume in `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` order.
    pub fn to_volume(&self) -> Result<Volume4D> {
        let n = self.tensors.len();
        let mut data = vec![0.0; 6 * n];
        for (i, t) in self.tensors.iter().enumerate() {
            for (c, v) in t.iter().enumerate() {
                data[c * n + i] = *v;
            }
        }
        let [x, y, z] = self.dims;
        Volume4D::new([x, y, z, 6], self.spacing, self.affine, data, Intent::Scalar)
    }

    pub fn from_volume(v: &Volume4D) -> Result<Self> {
        if v.channels() != 6 {
            return Err(Error::shape(format!("tensor volume needs 6 channels, got {}", v.channels())));
        }
        let n = v.n_voxels();
        let tensors = (0..n)
            .map(|i| std::array::from_fn(|c| v.data()[c * n + i]))
            .collect();
        Ok(TensorVolume {
            dims: v.spatial_dims(),
            spacing: v.spacing(),
            affine: *v.affine(),
            tensors,
            s0: vec![0.0; n],
        })
    }

    fn scalar_map(&self, f: impl Fn(&[f64; 3]) -> f64 + Sync) -> Result<Volume4D> {
        let data: Vec<f64> = self
            .tensors
            .par_iter()
            .map(|t| {
                let (l, _) = eig_sym3(t);
                f(&clamp_nonnegative(l))
            })
            .collect();
        let [x, y, z] = self.dims;
        Volume4D::new([x, y, z, 1], self.spacing, self.affine, data, Intent::Scalar)
    }
}

fn design_row(b: f64, g: &[f64; 3]) -> [f64; 7] {
    let [x, y, z] = *g;
    [
        1.0,
        -b * x * x,
        -b * y * y,
        -b * z * z,
        -2.0 * b * x * y,
        -2.0 * b * x * z,
        -2.0 * b * y * z,
    ]
}

/// Fit a tensor per voxel from `b0` (any number of unweighted channels) and
/// `dwi` (channels described by `g`).
pub fn fit_dti(
    dwi: &Volume4D,
    b0: &Volume4D,
    g: &GradientTable,
    mask: Option<&Mask>,
) -> Result<TensorVolume> {
    fit_dti_with(dwi, b0, g, mask, DtiFitMethod::Ols)
}

pub fn fit_dti_with(
    dwi: &Volume4D,
    b0: &Volume4D,
    g: &GradientTable,
    mask: Option<&Mask>,
    method: DtiFitMethod,
) -> Result<TensorVolume> {
    if g.len() != dwi.channels() {
        return Err(Error::shape(format!(
            "gradient table has {} entries, volume has {} channels",
            g.len(),
            dwi.channels()
        )));
    }
    if b0.spatial_dims() != dwi.spatial_dims() {
        return Err(Error::shape("b0 and DWI volumes differ in spatial size"));
    }
    let n_b0 = b0.channels();
    let m = n_b0 + dwi.channels();
    if m < 7 {
        return Err(Error::Underdetermined {
            measurements: m,
            unknowns: 7,
        });
    }
    let n = dwi.n_voxels();
    let full;
    let mask = match mask {
        Some(mk) => {
            mk.check_volume(dwi)?;
            mk
        }
        None => {
            full = Mask::full(dwi.spatial_dims());
            &full
        }
    };
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }

    let mut design = DMatrix::zeros(m, 7);
    for i in 0..n_b0 {
        design[(i, 0)] = 1.0;
    }
    for (j, (b, dir)) in g.bvals().iter().zip(g.bvecs()).enumerate() {
        let b = if *b <= B0_THRESHOLD { 0.0 } else { *b };
        for (c, v) in design_row(b, dir).into_iter().enumerate() {
            design[(n_b0 + j, c)] = v;
        }
    }
    let pinv = pseudo_inverse(design.clone());
    let pinv_rm: Vec<f64> = (0..7).flat_map(|r| (0..m).map(move |c| (r, c))).map(|rc| pinv[rc]).collect();

    let mut logs = Vec::with_capacity(m * n);
    logs.extend(b0.data().iter().map(|&s| s.max(SIGNAL_FLOOR).ln()));
    logs.extend(dwi.data().iter().map(|&s| s.max(SIGNAL_FLOOR).ln()));
    let mut beta = vec![0.0; 7 * n];
    linalg::gemm(7, m, n, 1.0, &pinv_rm, &logs, 0.0, &mut beta);

    if method == DtiFitMethod::Wls {
        let rows: Vec<[f64; 7]> = (0..m)
            .map(|i| std::array::from_fn(|c| design[(i, c)]))
            .collect();
        let refined: Vec<Option<[f64; 7]>> = (0..n)
            .into_par_iter()
            .map(|v| {
                if !mask.contains(v) {
                    return None;
                }
                let ols: [f64; 7] = std::array::from_fn(|c| beta[c * n + v]);
                wls_voxel(&rows, &ols, |i| logs[i * n + v])
            })
            .collect();
        for (v, r) in refined.into_iter().enumerate() {
            if let Some(r) = r {
                for c in 0..7 {
                    beta[c * n + v] = r[c];
                }
            }
        }
    }

    let mut tensors = vec![[0.0; 6]; n];
    let mut s0 = vec![0.0; n];
    for v in 0..n {
        if mask.contains(v) {
            s0[v] = beta[v].exp();
            tensors[v] = std::array::from_fn(|c| beta[(c + 1) * n + v]);
        }
    }
    Ok(TensorVolume {
        dims: dwi.spatial_dims(),
        spacing: dwi.spacing(),
        affine: *dwi.affine(),
        tensors,
        s0,
    })
}

fn wls_voxel(rows: &[[f64; 7]], ols: &[f64; 7], log_s: impl Fn(usize) -> f64) -> Option<[f64; 7]> {
    let mut xtwx = SMatrix::<f64, 7, 7>::zeros();
    let mut xtwy = SVector::<f64, 7>::zeros();
    for (i, row) in rows.iter().enumerate() {
        let pred: f64 = row.iter().zip(ols).map(|(a, b)| a * b).sum();
        let w = (2.0 * pred).exp();
        let x = SVector::<f64, 7>::from_column_slice(row);
        xtwx += w * x * x.transpose();
        xtwy += w * log_s(i) * x;
    }
    let sol = xtwx.cholesky()?.solve(&xtwy);
    Some(std::array::from_fn(|c| sol[c]))
}

fn clamp_nonnegative(l: [f64; 3]) -> [f64; 3] {
    l.map(|x| x.max(0.0))
}

/// Fractional anisotropy from eigenvalues.
pub fn fractional_anisotropy(l: &[f64; 3]) -> f64 {
    let [a, b, c] = *l;
    let denom = a * a + b * b + c * c;
    if denom <= 0.0 {
        return 0.0;
    }
    let num = (a - b).powi(2) + (b - c).powi(2) + (c - a).powi(2);
    ((0.5 * num / denom).sqrt()).clamp(0.0, 1.0)
}

pub fn mean_diffusivity(l: &[f64; 3]) -> f64 {
    (l[0] + l[1] + l[2]) / 3.0
}

/// FA map; negative eigenvalues are clamped to zero first.
pub fn fa_map(t: &TensorVolume) -> Result<Volume4D> {
    t.scalar_map(fractional_anisotropy)
}

/// MD map; negative eigenvalues are clamped to zero first.
pub fn md_map(t: &TensorVolume) -> Result<Volume4D> {
    t.scalar_map(mean_diffusivity)
}

pub fn tensor_matrix(t: &Tensor6) -> Matrix3<f64> {
    let [xx, yy, zz, xy, xz, yz] = *t;
    Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
}

pub fn tensor_from_matrix(m: &Matrix3<f64>) -> Tensor6 {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
}

/// Eigen-decomposition of a symmetric 3×3 tensor.
///
/// Eigenvalues come from the closed-form trigonometric solution of the
/// characteristic cubic, in descending order. Eigenvectors (returned as
/// `vectors[k]` for `values[k]`) are orthonormal to machine precision: the
/// most isolated eigenvalue's vector is taken from a cross product of rows of
/// `A − λI`, the other two from an exact 2×2 rotation in its orthogonal plane.
pub fn eig_sym3(t: &Tensor6) -> ([f64; 3], [[f64; 3]; 3]) {
    let [a00, a11, a22, a01, a02, a12] = *t;
    let p1 = a01 * a01 + a02 * a02 + a12 * a12;
    let q = (a00 + a11 + a22) / 3.0;
    let scale = a00.abs().max(a11.abs()).max(a22.abs()).max(p1.sqrt());

    if p1 <= (f64::EPSILON * scale).powi(2) {
        let mut pairs = [(a00, 0usize), (a11, 1), (a22, 2)];
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut vecs = [[0.0; 3]; 3];
        for (k, &(_, axis)) in pairs.iter().enumerate() {
            vecs[k][axis] = 1.0;
        }
        return ([pairs[0].0, pairs[1].0, pairs[2].0], vecs);
    }

    let p2 = (a00 - q).powi(2) + (a11 - q).powi(2) + (a22 - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = [
        [(a00 - q) / p, a01 / p, a02 / p],
        [a01 / p, (a11 - q) / p, a12 / p],
        [a02 / p, a12 / p, (a22 - q) / p],
    ];
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    let values = [l1, l2, l3];

    let rows = [[a00, a01, a02], [a01, a11, a12], [a02, a12, a22]];
    let (iso_k, iso_val) = if l1 - l2 >= l2 - l3 { (0, l1) } else { (2, l3) };
    let v_iso = null_vector(&rows, iso_val);
    let (u, w) = orthonormal_complement(&v_iso);
    let au = mat_vec(&rows, &u);
    let aw = mat_vec(&rows, &w);
    let m00 = dot(&u, &au);
    let m11 = dot(&w, &aw);
    let m01 = dot(&u, &aw);
    let theta = 0.5 * (2.0 * m01).atan2(m00 - m11);
    let (s, c) = theta.sin_cos();
    let big = [c * u[0] + s * w[0], c * u[1] + s * w[1], c * u[2] + s * w[2]];
    let small = cross(&v_iso, &big);

    let vectors = if iso_k == 0 {
        [v_iso, big, small]
    } else {
        [big, small, v_iso]
    };
    (values, vectors)
}

fn null_vector(rows: &[[f64; 3]; 3], lambda: f64) -> [f64; 3] {
    let r: Vec<[f64; 3]> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut x = *row;
            x[i] -= lambda;
            x
        })
        .collect();
    let candidates = [cross(&r[0], &r[1]), cross(&r[0], &r[2]), cross(&r[1], &r[2])];
    let best = candidates
        .iter()
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .copied()
        .unwrap_or([1.0, 0.0, 0.0]);
    let n = dot(&best, &best).sqrt();
    if n > 0.0 {
        best.map(|x| x / n)
    } else {
        [1.0, 0.0, 0.0]
    }
}

fn orthonormal_complement(v: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if v[0].abs() < 0.6 {
        [1.0, 0.0, 0.0]
    } else if v[1].abs() < 0.6 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let u = cross(v, &helper);
    let n = dot(&u, &u).sqrt();
    let u = u.map(|x| x / n);
    let w = cross(v, &u);
    (u, w)
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| dot(&m[i], v))
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::fibonacci_hemisphere;
    use crate::volume::affine_from_spacing;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn assert_orthonormal(v: &[[f64; 3]; 3]) {
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&v[i], &v[j]) - want).abs() < 1e-10, "({i},{j})");
            }
        }
    }

    #[test]
    fn diagonal_eigenvalues() {
        let (l, v) = eig_sym3(&[1.0, 3.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(l, [3.0, 2.0, 1.0]);
        assert_eq!(v[0], [0.0, 1.0, 0.0]);
        assert_orthonormal(&v);
    }

    #[test]
    fn identity_eigenvalues() {
        let (l, v) = eig_sym3(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(l, [1.0, 1.0, 1.0]);
        assert_orthonormal(&v);
    }

    #[test]
    fn coupled_pair() {
        // characteristic polynomial (1−λ)((2−λ)² − 1) → roots 3, 1, 1
        let (l, v) = eig_sym3(&[2.0, 2.0, 1.0, 1.0, 0.0, 0.0]);
        assert!((l[0] - 3.0).abs() < 1e-12);
        assert!((l[1] - 1.0).abs() < 1e-12);
        assert!((l[2] - 1.0).abs() < 1e-12);
        assert_orthonormal(&v);
        let s = 0.5f64.sqrt();
        assert!((dot(&v[0], &[s, s, 0.0]).abs() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn eigensystem_matches_reference(
            d in prop::array::uniform6(-3.0f64..3.0)
        ) {
            let (l, v) = eig_sym3(&d);
            assert_orthonormal(&v);
            let m = tensor_matrix(&d);
            let trace = m.trace();
            prop_assert!((l[0] + l[1] + l[2] - trace).abs() < 1e-12 * (1.0 + trace.abs().max(m.norm())));
            prop_assert!(l[0] >= l[1] && l[1] >= l[2]);
            let mut reference: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            reference.sort_by(|a, b| b.total_cmp(a));
            for k in 0..3 {
                prop_assert!((l[k] - reference[k]).abs() < 1e-9 * (1.0 + m.norm()));
                let mv = m * Vector3::from(v[k]);
                let lv = Vector3::from(v[k]) * l[k];
                prop_assert!((mv - lv).norm() < 1e-6 * (1.0 + m.norm()));
            }
        }
    }

    #[test]
    fn fa_examples() {
        assert_eq!(fractional_anisotropy(&[2.0, 2.0, 2.0]), 0.0);
        assert!((fractional_anisotropy(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        // √½·√(1.4² + 0 + 1.4²)/√(1.7² + 0.3² + 0.3²) = 1.4/√3.07
        let fa = fractional_anisotropy(&[1.7e-3, 0.3e-3, 0.3e-3]);
        assert!((fa - 1.4 / 3.07f64.sqrt()).abs() < 1e-12);
        assert!((fa - 0.7990).abs() < 1e-4);
        assert_eq!(fractional_anisotropy(&[0.0; 3]), 0.0);
    }

    #[test]
    fn md_examples() {
        assert!((mean_diffusivity(&[1.7e-3, 0.3e-3, 0.3e-3]) - 0.76666666666e-3).abs() < 1e-12);
        assert_eq!(mean_diffusivity(&[0.0; 3]), 0.0);
        assert_eq!(mean_diffusivity(&[1.0; 3]), 1.0);
    }

    /// One-voxel-per-tensor volumes synthesized from the forward model.
    fn synth(tensors: &[Tensor6], dirs: &[[f64; 3]], b: f64, s0: f64) -> (Volume4D, Volume4D, GradientTable) {
        let n = tensors.len();
        let mut data = vec![0.0; n * dirs.len()];
        for (v, t) in tensors.iter().enumerate() {
            let m = tensor_matrix(t);
            for (j, g) in dirs.iter().enumerate() {
                let gv = Vector3::from(*g);
                data[j * n + v] = s0 * (-b * gv.dot(&(m * gv))).exp();
            }
        }
        let aff = affine_from_spacing([1.0; 3]);
        let dwi = Volume4D::new([n, 1, 1, dirs.len()], [1.0; 3], aff, data, Intent::Dwi).unwrap();
        let b0 = Volume4D::new([n, 1, 1, 1], [1.0; 3], aff, vec![s0; n], Intent::Dwi).unwrap();
        let g = GradientTable::from_shell(b, dirs, 0).unwrap();
        (dwi, b0, g)
    }

    #[test]
    fn recovers_anisotropic_tensor() {
        let d = [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0];
        let (dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(88), 1000.0, 1.0);
        let t = fit_dti(&dwi, &b0, &g, None).unwrap();
        for c in 0..6 {
            assert!((t.tensors[0][c] - d[c]).abs() < 1e-10, "component {c}");
        }
        assert!((t.s0[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn recovers_isotropic_tensor() {
        let d = [3.0e-3, 3.0e-3, 3.0e-3, 0.0, 0.0, 0.0];
        let (dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(30), 1000.0, 500.0);
        let t = fit_dti(&dwi, &b0, &g, None).unwrap();
        for c in 0..6 {
            assert!((t.tensors[0][c] - d[c]).abs() < 1e-10);
        }
        let md = md_map(&t).unwrap();
        assert!((md.data()[0] - 3.0e-3).abs() < 1e-10);
    }

    #[test]
    fn wls_matches_ols_without_noise() {
        let d = [1.2e-3, 0.5e-3, 0.4e-3, 0.1e-3, 0.0, -0.05e-3];
        let (dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(40), 1000.0, 300.0);
        let t = fit_dti_with(&dwi, &b0, &g, None, DtiFitMethod::Wls).unwrap();
        for c in 0..6 {
            assert!((t.tensors[0][c] - d[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_sample_is_floored() {
        let d = [1.0e-3, 1.0e-3, 1.0e-3, 0.0, 0.0, 0.0];
        let (mut dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(20), 1000.0, 1.0);
        dwi.data_mut()[3] = 0.0;
        let t = fit_dti(&dwi, &b0, &g, None).unwrap();
        assert!(t.tensors[0].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn too_few_measurements() {
        let d = [1.0e-3, 1.0e-3, 1.0e-3, 0.0, 0.0, 0.0];
        let (dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(5), 1000.0, 1.0);
        assert!(matches!(
            fit_dti(&dwi, &b0, &g, None),
            Err(Error::Underdetermined { measurements: 6, .. })
        ));
    }

    #[test]
    fn empty_mask_rejected() {
        let d = [1.0e-3, 1.0e-3, 1.0e-3, 0.0, 0.0, 0.0];
        let (dwi, b0, g) = synth(&[d], &fibonacci_hemisphere(10), 1000.0, 1.0);
        let mask = Mask::new([1, 1, 1], vec![false]).unwrap();
        assert!(matches!(fit_dti(&dwi, &b0, &g, Some(&mask)), Err(Error::EmptyMask)));
    }

    #[test]
    fn rotation_invariance_of_fa_md() {
        let base = [1.7e-3, 0.3e-3, 0.3e-3, 0.0, 0.0, 0.0];
        let m = tensor_matrix(&base);
        let mut tensors = vec![base];
        for (k, axis) in [Vector3::new(1.0, 2.0, 0.5), Vector3::new(-0.3, 0.2, 1.0)].iter().enumerate() {
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), 0.4 + k as f64);
            let rm = r.matrix() * m * r.matrix().transpose();
            tensors.push(tensor_from_matrix(&rm));
        }
        let (dwi, b0, g) = synth(&tensors, &fibonacci_hemisphere(88), 1000.0, 1.0);
        let t = fit_dti(&dwi, &b0, &g, None).unwrap();
        let fa = fa_map(&t).unwrap();
        let md = md_map(&t).unwrap();
        for v in 1..tensors.len() {
            assert!((fa.data()[v] - fa.data()[0]).abs() < 1e-8);
            assert!((md.data()[v] - md.data()[0]).abs() < 1e-8);
        }
        assert!((fa.data()[0] - 0.7990).abs() < 1e-4);
    }

    #[test]
    fn negative_eigenvalues_clamped() {
        let t = TensorVolume {
            dims: [1, 1, 1],
            spacing: [1.0; 3],
            affine: affine_from_spacing([1.0; 3]),
            tensors: vec![[1.0, -0.5, 0.2, 0.0, 0.0, 0.0]],
            s0: vec![1.0],
        };
        let fa = fa_map(&t).unwrap().data()[0];
        assert!((0.0..=1.0).contains(&fa));
        assert!((md_map(&t).unwrap().data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn tensor_volume_roundtrip() {
        let t = TensorVolume {
            dims: [2, 1, 1],
            spacing: [1.0; 3],
            affine: affine_from_spacing([1.0; 3]),
            tensors: vec![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [0.0; 6]],
            s0: vec![0.0; 2],
        };
        let back = TensorVolume::from_volume(&t.to_volume().unwrap()).unwrap();
        assert_eq!(back.tensors, t.tensors);
    }
}
