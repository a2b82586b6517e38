//! Synthetic single-shell diffusion phantom with known tensors and tissue labels.
//!
//! The head is an ellipsoid of nested shells: CSF outside, cortical gray
//! matter beneath it and white matter in the core, with a corpus callosum band
//! crossing the midline. Every voxel carries one tissue tensor and the signal
//! follows `S0·exp(−b·gᵀDg)`.

use crate::dti::{TensorVolume, Tensor6};
use crate::error::{Error, Result};
use crate::sh::{fibonacci_hemisphere, fit_sh, project_sh};
use crate::volume::{affine_from_spacing, GradientTable, Intent, Mask, Volume4D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LABEL_BACKGROUND: u32 = 0;
pub const LABEL_CSF: u32 = 1;
pub const LABEL_GM: u32 = 2;
pub const LABEL_WM: u32 = 3;
pub const LABEL_CC: u32 = 4;

/// Isotropic diffusivity of CSF, mm²/s.
pub const CSF_DIFFUSIVITY: f64 = 3.0e-3;
pub const GM_DIFFUSIVITY: f64 = 0.8e-3;
/// White-matter eigenvalues, mm²/s.
pub const WM_EIGENVALUES: [f64; 3] = [1.7e-3, 0.3e-3, 0.3e-3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "sigma", rename_all = "snake_case")]
pub enum Noise {
    #[default]
    None,
    Gaussian(f64),
    Rician(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub b_value: f64,
    pub n_directions: usize,
    pub n_b0: usize,
    pub noise: Noise,
    pub seed: u64,
    /// Unweighted signal per label, background first.
    pub s0: [f64; 5],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 16],
            spacing: [1.0, 1.0, 1.0],
            b_value: 1000.0,
            n_directions: 88,
            n_b0: 4,
            noise: Noise::None,
            seed: 0,
            s0: [0.0, 2000.0, 1400.0, 1000.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    /// Diffusion-weighted shell, one channel per entry of `g`.
    pub dwi: Volume4D,
    pub b0: Volume4D,
    pub g: GradientTable,
    pub labels: Volume4D,
    pub tensors: TensorVolume,
}

impl Phantom {
    /// b0 volumes followed by the shell, with the matching gradient table.
    pub fn combined(&self) -> Result<(Volume4D, GradientTable)> {
        let mut data = self.b0.data().to_vec();
        data.extend_from_slice(self.dwi.data());
        let v = self
            .dwi
            .with_channels(self.b0.channels() + self.dwi.channels(), data, Intent::Dwi)?;
        let g = GradientTable::from_shell(self.spec.b_value, self.g.bvecs(), self.b0.channels())?;
        Ok((v, g))
    }

    pub fn brain_mask(&self) -> Result<Mask> {
        Mask::from_labels(&self.labels)
    }

    pub fn region_mask(&self, label: u32) -> Result<Mask> {
        Mask::from_label(&self.labels, label)
    }

    /// Copy whose shell is replaced by its order-`lmax` SH projection, so the
    /// signal is exactly representable at that order.
    pub fn band_limited(&self, lmax: usize) -> Result<Phantom> {
        let sh = fit_sh(&self.dwi, &self.g, lmax, 0.0, None)?;
        Ok(Phantom {
            dwi: project_sh(&sh, self.g.bvecs())?,
            ..self.clone()
        })
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn stick_tensor(e: [f64; 3], l: [f64; 3]) -> Tensor6 {
    // axially symmetric: λ⊥·I + (λ∥ − λ⊥)·e·eᵀ
    let (par, perp) = (l[0], l[1]);
    let d = par - perp;
    [
        perp + d * e[0] * e[0],
        perp + d * e[1] * e[1],
        perp + d * e[2] * e[2],
        d * e[0] * e[1],
        d * e[0] * e[2],
        d * e[1] * e[2],
    ]
}

fn iso(d: f64) -> Tensor6 {
    [d, d, d, 0.0, 0.0, 0.0]
}

/// Tissue label and tensor at normalized coordinates in `[-1, 1]³`.
fn tissue(u: f64, v: f64, w: f64) -> (u32, Tensor6) {
    let r = (u * u + v * v + w * w).sqrt();
    if r > 0.95 {
        return (LABEL_BACKGROUND, [0.0; 6]);
    }
    if r > 0.8 {
        return (LABEL_CSF, iso(CSF_DIFFUSIVITY));
    }
    if r > 0.62 {
        return (LABEL_GM, iso(GM_DIFFUSIVITY));
    }
    if v.abs() < 0.1 && u.abs() < 0.45 && w.abs() < 0.5 {
        // left-right, bending gently with depth
        let c = 0.5 * w;
        return (LABEL_CC, stick_tensor([c.cos(), 0.0, c.sin()], WM_EIGENVALUES));
    }
    // principal direction sweeps in-plane with position and tilts with depth
    let a = std::f64::consts::FRAC_PI_2 * u + std::f64::consts::FRAC_PI_4 * v;
    let b = 0.6 * w;
    let e = normalize([a.cos() * b.cos(), a.sin() * b.cos(), b.sin()]);
    (LABEL_WM, stick_tensor(e, WM_EIGENVALUES))
}

fn quad_form(t: &Tensor6, g: &[f64; 3]) -> f64 {
    let [xx, yy, zz, xy, xz, yz] = *t;
    xx * g[0] * g[0]
        + yy * g[1] * g[1]
        + zz * g[2] * g[2]
        + 2.0 * (xy * g[0] * g[1] + xz * g[0] * g[2] + yz * g[1] * g[2])
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let [nx, ny, nz] = spec.dims;
    if nx == 0 || ny == 0 || nz == 0 || spec.n_directions == 0 || spec.n_b0 == 0 {
        return Err(Error::InvalidArgument(
            "phantom needs positive dimensions, directions and b0 count".into(),
        ));
    }
    if !(spec.b_value > 0.0) {
        return Err(Error::InvalidArgument("b-value must be positive".into()));
    }
    let n = nx * ny * nz;
    let coord = |i: usize, len: usize| (2.0 * i as f64 + 1.0) / len as f64 - 1.0;
    let mut labels = vec![0.0; n];
    let mut tensors = vec![[0.0; 6]; n];
    let mut s0 = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let (l, t) = tissue(coord(x, nx), coord(y, ny), coord(z, nz));
                labels[i] = l as f64;
                tensors[i] = t;
                s0[i] = spec.s0[l as usize];
            }
        }
    }

    let dirs = fibonacci_hemisphere(spec.n_directions);
    let g = GradientTable::from_shell(spec.b_value, &dirs, 0)?;
    let mut dwi = vec![0.0; n * dirs.len()];
    for (c, d) in dirs.iter().enumerate() {
        for i in 0..n {
            dwi[c * n + i] = s0[i] * (-spec.b_value * quad_form(&tensors[i], d)).exp();
        }
    }
    let mut b0 = Vec::with_capacity(n * spec.n_b0);
    for _ in 0..spec.n_b0 {
        b0.extend_from_slice(&s0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.noise {
        Noise::None => {}
        Noise::Gaussian(sigma) => {
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in b0.iter_mut().chain(dwi.iter_mut()) {
                *v += dist.sample(&mut rng);
            }
        }
        Noise::Rician(sigma) => {
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in b0.iter_mut().chain(dwi.iter_mut()) {
                let re = *v + dist.sample(&mut rng);
                let im = dist.sample(&mut rng);
                *v = (re * re + im * im).sqrt();
            }
        }
    }

    let affine = affine_from_spacing(spec.spacing);
    let dims4 = |c| [nx, ny, nz, c];
    Ok(Phantom {
        spec: spec.clone(),
        dwi: Volume4D::new(dims4(dirs.len()), spec.spacing, affine, dwi, Intent::Dwi)?,
        b0: Volume4D::new(dims4(spec.n_b0), spec.spacing, affine, b0, Intent::Dwi)?,
        g,
        labels: Volume4D::new(dims4(1), spec.spacing, affine, labels, Intent::Labels)?,
        tensors: TensorVolume {
            dims: spec.dims,
            spacing: spec.spacing,
            affine,
            tensors,
            s0,
        },
    })
}
