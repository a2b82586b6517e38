//! Through-plane interpolation baselines for missing slices.
//!
//! A gap of `n` slices starting at `gap_start` is removed; the surviving
//! slices form a uniformly spaced line along z, and missing slice `k`
//! (1-based) is read off at fractional position `k/(n+1)` between its two
//! neighbors. In-plane grids are identical, so trilinear/tricubic reduce to
//! 1-D linear/cubic along z.

use crate::error::{Error, Result};
use crate::volume::{SliceImage, Volume4D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Real poles of the sampled quintic B-spline.
pub const BSPLINE5_POLES: [f64; 2] = [-0.430_575_347_099_973_8, -0.043_096_288_203_264_65];

const KEYS_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    Linear,
    Cubic,
    Bspline5,
}

impl InterpKind {
    pub const ALL: [InterpKind; 3] = [InterpKind::Linear, InterpKind::Cubic, InterpKind::Bspline5];

    /// Offset of the first tap relative to `floor(position)`.
    fn first_tap(self) -> isize {
        match self {
            InterpKind::Linear => 0,
            InterpKind::Cubic => -1,
            InterpKind::Bspline5 => -2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InterpKind::Linear => "linear",
            InterpKind::Cubic => "cubic",
            InterpKind::Bspline5 => "bspline5",
        }
    }
}

impl fmt::Display for InterpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InterpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InterpKind::Linear),
            "cubic" => Ok(InterpKind::Cubic),
            "bspline5" => Ok(InterpKind::Bspline5),
            _ => Err(Error::InvalidArgument(format!("unknown interpolation method {s:?}"))),
        }
    }
}

/// Boundary extension. Only whole-sample mirroring is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Mirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterpMethod {
    pub kind: InterpKind,
    pub boundary: Boundary,
}

impl From<InterpKind> for InterpMethod {
    fn from(kind: InterpKind) -> Self {
        InterpMethod {
            kind,
            boundary: Boundary::Mirror,
        }
    }
}

/// Quintic B-spline `β⁵(x)`.
pub fn bspline5(x: f64) -> f64 {
    let x = x.abs();
    if x >= 3.0 {
        return 0.0;
    }
    // (1/120) Σ_k (−1)^k C(6,k) (3 − x − k)₊⁵ over the symmetric half
    const BINOM: [f64; 3] = [1.0, 6.0, 15.0];
    let mut sum = 0.0;
    for (k, c) in BINOM.iter().enumerate() {
        let t = 3.0 - x - k as f64;
        if t > 0.0 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * c * t.powi(5);
        }
    }
    sum / 120.0
}

fn keys_cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((KEYS_A + 2.0) * x - (KEYS_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((KEYS_A * x - 5.0 * KEYS_A) * x + 8.0 * KEYS_A) * x - 4.0 * KEYS_A
    } else {
        0.0
    }
}

/// Tap weights for fractional offset `t ∈ [0, 1)`. Taps start at
/// `floor(x) + first_tap`: linear covers `{0, 1}`, cubic `{−1..2}`,
/// bspline5 `{−2..3}` (applied to prefiltered coefficients).
pub fn kernel_eval(kind: InterpKind, t: f64) -> Vec<f64> {
    match kind {
        InterpKind::Linear => vec![1.0 - t, t],
        InterpKind::Cubic => (-1..=2).map(|k| keys_cubic(t - k as f64)).collect(),
        InterpKind::Bspline5 => (-2..=3).map(|k| bspline5(t - k as f64)).collect(),
    }
}

/// Whole-sample symmetric reflection of `i` into `[0, n)`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Quintic B-spline interpolation coefficients with mirror boundaries:
/// cascaded causal/anti-causal first-order recursive filters, one pair per pole.
pub fn bspline_prefilter(line: &[f64]) -> Vec<f64> {
    let n = line.len();
    let mut c = line.to_vec();
    if n < 2 {
        return c;
    }
    let gain: f64 = BSPLINE5_POLES
        .iter()
        .map(|&z| (1.0 - z) * (1.0 - 1.0 / z))
        .product();
    c.iter_mut().for_each(|x| *x *= gain);
    for &z in &BSPLINE5_POLES {
        c[0] = causal_init(&c, z);
        for k in 1..n {
            c[k] += z * c[k - 1];
        }
        c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
        for k in (0..n - 1).rev() {
            c[k] = z * (c[k + 1] - c[k]);
        }
    }
    c
}

/// Exact initial value of the causal filter for a mirror-extended signal.
fn causal_init(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    let iz = 1.0 / z;
    let mut zn = z;
    let mut z2n = z.powi(n as i32 - 1);
    let mut sum = c[0] + z2n * c[n - 1];
    z2n = z2n * (z2n * iz);
    for &ck in &c[1..n - 1] {
        sum += (zn + z2n) * ck;
        zn *= z;
        z2n *= iz;
    }
    sum / (1.0 - zn * zn)
}

/// Evaluates one 1-D line of samples at arbitrary positions.
#[derive(Debug, Clone)]
pub struct LineInterpolator {
    kind: InterpKind,
    coeffs: Vec<f64>,
}

impl LineInterpolator {
    pub fn new(samples: &[f64], kind: InterpKind) -> Self {
        let coeffs = match kind {
            InterpKind::Bspline5 => bspline_prefilter(samples),
            _ => samples.to_vec(),
        };
        LineInterpolator { kind, coeffs }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let base = x.floor();
        self.apply(base as isize, &kernel_eval(self.kind, x - base))
    }

    /// Evaluate at `base + num/den` without rounding the position first, so
    /// linear weights are exactly `(den − num)/den` and `num/den`.
    pub fn eval_fraction(&self, base: isize, num: usize, den: usize) -> f64 {
        let weights = match self.kind {
            InterpKind::Linear => vec![(den - num) as f64 / den as f64, num as f64 / den as f64],
            kind => kernel_eval(kind, num as f64 / den as f64),
        };
        self.apply(base, &weights)
    }

    fn apply(&self, base: isize, weights: &[f64]) -> f64 {
        let first = base + self.kind.first_tap();
        let n = self.coeffs.len();
        weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * self.coeffs[mirror_index(first + k as isize, n)])
            .sum()
    }
}

/// Positions of the missing slices of an `n`-gap, in units of the reduced
/// (gap-free) line, relative to the preceding neighbor.
pub fn gap_fractions(n_missing: usize) -> Vec<f64> {
    (1..=n_missing)
        .map(|k| k as f64 / (n_missing + 1) as f64)
        .collect()
}

pub(crate) fn check_gap(depth: usize, gap_start: usize, n_missing: usize) -> Result<()> {
    if n_missing == 0 {
        return Err(Error::InvalidArgument("gap must contain at least one slice".into()));
    }
    if gap_start < 1 || gap_start + n_missing > depth.saturating_sub(1) {
        return Err(Error::BoundaryGap {
            start: gap_start,
            end: gap_start + n_missing,
            depth,
        });
    }
    Ok(())
}

/// Reconstruct slices `gap_start .. gap_start + n_missing` of `v` from the
/// remaining slices, ignoring whatever the gap currently contains.
pub fn interp_missing_slices(
    v: &Volume4D,
    gap_start: usize,
    n_missing: usize,
    method: impl Into<InterpMethod>,
) -> Result<Vec<SliceImage>> {
    let method = method.into();
    let [nx, ny, nz, nv] = v.dims();
    check_gap(nz, gap_start, n_missing)?;
    let kept: Vec<usize> = (0..nz)
        .filter(|&z| z < gap_start || z >= gap_start + n_missing)
        .collect();
    let plane = nx * ny;

    // out[k] channel-major planes, filled column by column
    let columns: Vec<Vec<f64>> = (0..nv * plane)
        .into_par_iter()
        .map(|col| {
            let c = col / plane;
            let p = col % plane;
            let line: Vec<f64> = kept
                .iter()
                .map(|&z| v.data()[p + plane * (z + nz * c)])
                .collect();
            let li = LineInterpolator::new(&line, method.kind);
            (1..=n_missing)
                .map(|k| li.eval_fraction(gap_start as isize - 1, k, n_missing + 1))
                .collect()
        })
        .collect();

    Ok((0..n_missing)
        .map(|k| SliceImage {
            width: nx,
            height: ny,
            channels: nv,
            data: columns.iter().map(|vals| vals[k]).collect(),
            norm_range: None,
        })
        .collect())
}
