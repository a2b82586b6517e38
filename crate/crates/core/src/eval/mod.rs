//! Slice-removal experiments: reconstruct removed slices with each method and
//! score signal, FA and MD against the ground truth.

mod wilcoxon;

pub use wilcoxon::{exact_p, normal_p, wilcoxon_both_p, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};

use crate::dti::{fa_map, fit_dti, md_map};
use crate::error::{Error, Result};
use crate::inference::{infer_gap_channelwise, infer_gap_sh, GapReconstruction, GapSpec, InferOptions};
use crate::interp::{interp_missing_slices, InterpKind};
use crate::nn::ModelParams;
use crate::phantom::{LABEL_CC, LABEL_GM, LABEL_WM};
use crate::sh::{fit_sh, normalized_mse, sh_basis_matrix, IntensityScale};
use crate::volume::{GradientTable, Intent, Mask, SliceImage, Volume4D};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Mean squared difference of `est` and `gt` over voxels labelled `label`,
/// all channels included.
pub fn mse_region(est: &Volume4D, gt: &Volume4D, labels: &Volume4D, label: u32) -> Result<f64> {
    if est.dims() != gt.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", est.dims(), gt.dims())));
    }
    let mask = Mask::from_label(labels, label)?;
    mask.check_volume(est)?;
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = est.n_voxels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (a, b)) in est.data().iter().zip(gt.data()).enumerate() {
        if mask.contains(i % n) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    Cubic,
    Bspline5,
    /// Linear interpolation of SH coefficients, projected back to the shell.
    ShLinear,
    /// One-channel network applied to every diffusion-weighted volume.
    AeDwi,
    /// Fifteen-channel network on SH coefficients.
    AeSh,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Linear,
        Method::Cubic,
        Method::Bspline5,
        Method::ShLinear,
        Method::AeDwi,
        Method::AeSh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Cubic => "cubic",
            Method::Bspline5 => "bspline5",
            Method::ShLinear => "sh_linear",
            Method::AeDwi => "ae_dwi",
            Method::AeSh => "ae_sh",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

/// Regions scored for FA and MD.
pub const REGIONS: [(&str, u32); 3] = [("wm", LABEL_WM), ("cgm", LABEL_GM), ("cc", LABEL_CC)];

/// Ground truth for an experiment.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    /// Single diffusion-weighted shell.
    pub dwi: &'a Volume4D,
    pub b0: &'a Volume4D,
    /// Table of `dwi` (no b0 entries).
    pub g: &'a GradientTable,
    pub labels: &'a Volume4D,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub b0: Option<&'a ModelParams>,
    pub dwi: Option<&'a ModelParams>,
    pub sh: Option<&'a ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_missing: usize,
    pub gaps: Vec<usize>,
    pub methods: Vec<Method>,
    pub lmax: usize,
}

impl ExperimentConfig {
    /// Every interior gap position of a volume with `depth` slices.
    pub fn all_gaps(depth: usize, n_missing: usize) -> Vec<usize> {
        (1..depth.saturating_sub(n_missing)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub region: String,
    /// Per gap; `None` where the region does not meet the gap slices.
    pub fa_mse: Vec<Option<f64>>,
    pub md_mse: Vec<Option<f64>>,
    pub fa_mse_mean: Option<f64>,
    pub md_mse_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: Method,
    pub signal_mse: Vec<f64>,
    pub signal_mse_mean: f64,
    pub regions: Vec<RegionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `signal`, or `fa:<region>` / `md:<region>`.
    pub metric: String,
    pub method_a: Method,
    pub method_b: Method,
    pub n: usize,
    pub w: Option<f64>,
    pub p: Option<f64>,
    pub exact: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_missing: usize,
    pub gaps: Vec<usize>,
    /// SH round-trip error of the ground truth on each gap.
    pub sh_lower_bound: Vec<f64>,
    pub sh_lower_bound_mean: f64,
    pub methods: Vec<MethodScores>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub lmax: usize,
    pub runs: Vec<RunReport>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| mean(&present))
}

/// Stack slices into an `nx × ny × k` volume.
fn stack(slices: &[SliceImage], like: &Volume4D) -> Result<Volume4D> {
    let first = &slices[0];
    let mut v = Volume4D::zeros(
        [first.width, first.height, slices.len(), first.channels],
        like.spacing(),
        Intent::Dwi,
    )?;
    for (z, s) in slices.iter().enumerate() {
        v.set_slice(z, s)?;
    }
    Ok(v)
}

fn sub_volume(v: &Volume4D, zs: std::ops::Range<usize>) -> Result<Volume4D> {
    let slices: Vec<SliceImage> = zs.map(|z| v.slice(z)).collect();
    let mut out = stack(&slices, v)?;
    if v.intent() == Intent::Labels {
        out = Volume4D::new(out.dims(), out.spacing(), *out.affine(), out.into_data(), Intent::Labels)?;
    }
    Ok(out)
}

struct Shared<'a> {
    data: ExperimentData<'a>,
    models: Models<'a>,
    lmax: usize,
    sh: Option<Volume4D>,
    basis_rows: Vec<f64>,
    scale: IntensityScale,
    brain: Mask,
}

fn require<'a>(m: Option<&'a ModelParams>, what: &str) -> Result<&'a ModelParams> {
    m.ok_or_else(|| Error::ModelMissing(what.into()))
}

fn reconstruct(s: &Shared, method: Method, gap: GapSpec) -> Result<GapReconstruction> {
    let d = s.data;
    let interp = |v: &Volume4D, kind| interp_missing_slices(v, gap.gap_start, gap.n_missing, kind);
    let opts = InferOptions::default();
    match method {
        Method::Linear | Method::Cubic | Method::Bspline5 => {
            let kind = match method {
                Method::Linear => InterpKind::Linear,
                Method::Cubic => InterpKind::Cubic,
                _ => InterpKind::Bspline5,
            };
            Ok(GapReconstruction {
                dwi: interp(d.dwi, kind)?,
                b0: interp(d.b0, kind)?,
            })
        }
        Method::ShLinear => {
            let sh = s.sh.as_ref().expect("SH fit prepared for sh_linear");
            let coeffs = interp(sh, InterpKind::Linear)?;
            let dirs = d.g.len();
            let dwi = coeffs
                .iter()
                .map(|c| {
                    let mut out = SliceImage::zeros(c.width, c.height, dirs);
                    crate::linalg::gemm(dirs, c.channels, c.plane(), 1.0, &s.basis_rows, &c.data, 0.0, &mut out.data);
                    out
                })
                .collect();
            Ok(GapReconstruction {
                dwi,
                b0: interp(d.b0, InterpKind::Linear)?,
            })
        }
        Method::AeSh => infer_gap_sh(
            require(s.models.sh, "SH network")?,
            require(s.models.b0, "b0 network")?,
            d.dwi,
            d.b0,
            d.g,
            s.lmax,
            gap,
            &opts,
        ),
        Method::AeDwi => {
            let model = require(s.models.dwi, "DWI network")?;
            let model_b0 = require(s.models.b0, "b0 network")?;
            Ok(GapReconstruction {
                dwi: infer_gap_channelwise(model, d.dwi, gap, &opts)?,
                b0: infer_gap_channelwise(model_b0, d.b0, gap, &opts)?,
            })
        }
    }
}

struct Cell {
    signal: f64,
    fa: Vec<Option<f64>>,
    md: Vec<Option<f64>>,
}

fn score(s: &Shared, gap: GapSpec, rec: &GapReconstruction, reference: &(Volume4D, Volume4D)) -> Result<Cell> {
    let d = s.data;
    let est_dwi = stack(&rec.dwi, d.dwi)?;
    let est_b0 = stack(&rec.b0, d.b0)?;
    let gt_dwi = sub_volume(d.dwi, gap.slices())?;
    let labels = sub_volume(d.labels, gap.slices())?;
    let brain = Mask::from_labels(&labels)?;
    let signal = if brain.is_empty() {
        0.0
    } else {
        normalized_mse(&est_dwi, &gt_dwi, &brain, s.scale)?
    };

    let tensors = fit_dti(&est_dwi, &est_b0, d.g, Some(&brain))?;
    let fa = fa_map(&tensors)?;
    let md = md_map(&tensors)?;
    let gt_fa = sub_volume(&reference.0, gap.slices())?;
    let gt_md = sub_volume(&reference.1, gap.slices())?;
    let region = |est: &Volume4D, gt: &Volume4D, label| match mse_region(est, gt, &labels, label) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    };
    let mut fa_scores = Vec::new();
    let mut md_scores = Vec::new();
    for (_, label) in REGIONS {
        fa_scores.push(region(&fa, &gt_fa, label)?);
        md_scores.push(region(&md, &gt_md, label)?);
    }
    Ok(Cell {
        signal,
        fa: fa_scores,
        md: md_scores,
    })
}

fn compare(metric: String, a: Method, b: Method, xa: &[Option<f64>], xb: &[Option<f64>]) -> Comparison {
    let (x, y): (Vec<f64>, Vec<f64>) = xa
        .iter()
        .zip(xb)
        .filter_map(|(p, q)| Some((((*p)?), (*q)?)))
        .unzip();
    let base = Comparison {
        metric,
        method_a: a,
        method_b: b,
        n: x.len(),
        w: None,
        p: None,
        exact: None,
        note: None,
    };
    match wilcoxon_signed_rank(&x, &y) {
        Ok(r) => Comparison {
            n: r.n,
            w: Some(r.w),
            p: Some(r.p),
            exact: Some(r.exact),
            ..base
        },
        Err(e) => Comparison {
            note: Some(e.to_string()),
            ..base
        },
    }
}

/// Remove each gap in turn, reconstruct it with every method and score the result.
pub fn run_experiment(data: ExperimentData, models: Models, cfg: &ExperimentConfig) -> Result<RunReport> {
    let depth = data.dwi.spatial_dims()[2];
    if cfg.gaps.is_empty() || cfg.methods.is_empty() {
        return Err(Error::InvalidArgument("experiment needs gaps and methods".into()));
    }
    let gaps: Vec<GapSpec> = cfg
        .gaps
        .iter()
        .map(|&z| {
            let g = GapSpec::new(z, cfg.n_missing)?;
            g.check(depth)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    for &m in &cfg.methods {
        match m {
            Method::AeSh => {
                require(models.sh, "SH network")?;
                require(models.b0, "b0 network")?;
            }
            Method::AeDwi => {
                require(models.dwi, "DWI network")?;
                require(models.b0, "b0 network")?;
            }
            _ => {}
        }
    }

    let brain = Mask::from_labels(data.labels)?;
    let scale = IntensityScale::from_volume(data.dwi, &brain)?;
    let sh = if cfg.methods.contains(&Method::ShLinear) {
        Some(fit_sh(data.dwi, data.g, cfg.lmax, 0.0, None)?.coeffs)
    } else {
        None
    };
    let basis_rows = sh_basis_matrix(data.g.bvecs(), cfg.lmax)?.row_major();
    let shared = Shared {
        data,
        models,
        lmax: cfg.lmax,
        sh,
        basis_rows,
        scale,
        brain,
    };

    // reference FA / MD from the ground truth, only where gaps will be scored
    let mut scored = vec![false; depth];
    for g in &gaps {
        for z in g.slices() {
            scored[z] = true;
        }
    }
    let plane = data.dwi.spatial_dims()[0] * data.dwi.spatial_dims()[1];
    let ref_mask = Mask::new(
        data.dwi.spatial_dims(),
        shared
            .brain
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &m)| m && scored[i / plane])
            .collect(),
    )?;
    let gt_tensors = fit_dti(data.dwi, data.b0, data.g, Some(&ref_mask))?;
    let reference = (fa_map(&gt_tensors)?, md_map(&gt_tensors)?);

    let sh_lower_bound: Vec<f64> = gaps
        .iter()
        .map(|g| {
            let mask = shared.brain.restrict_to_slices(&g.slices().collect::<Vec<_>>());
            if mask.is_empty() {
                return Ok(0.0);
            }
            crate::sh::sh_roundtrip_error_scaled(data.dwi, data.g, cfg.lmax, 0.0, &mask, scale)
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..gaps.len()).map(move |g| (m, g)))
        .collect();
    let results: Vec<Cell> = cells
        .par_iter()
        .map(|&(m, g)| {
            let rec = reconstruct(&shared, cfg.methods[m], gaps[g])?;
            score(&shared, gaps[g], &rec, &reference)
        })
        .collect::<Result<_>>()?;

    let mut methods = Vec::new();
    for (m, &method) in cfg.methods.iter().enumerate() {
        let cells = &results[m * gaps.len()..(m + 1) * gaps.len()];
        let signal: Vec<f64> = cells.iter().map(|c| c.signal).collect();
        let regions = REGIONS
            .iter()
            .enumerate()
            .map(|(r, (name, _))| {
                let fa: Vec<Option<f64>> = cells.iter().map(|c| c.fa[r]).collect();
                let md: Vec<Option<f64>> = cells.iter().map(|c| c.md[r]).collect();
                RegionScores {
                    region: name.to_string(),
                    fa_mse_mean: mean_opt(&fa),
                    md_mse_mean: mean_opt(&md),
                    fa_mse: fa,
                    md_mse: md,
                }
            })
            .collect();
        methods.push(MethodScores {
            method,
            signal_mse_mean: mean(&signal),
            signal_mse: signal,
            regions,
        });
    }

    let mut comparisons = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let (a, b) = (&methods[i], &methods[j]);
            let wrap = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
            comparisons.push(compare(
                "signal".into(),
                a.method,
                b.method,
                &wrap(&a.signal_mse),
                &wrap(&b.signal_mse),
            ));
            for r in 0..REGIONS.len() {
                let name = REGIONS[r].0;
                comparisons.push(compare(
                    format!("fa:{name}"),
                    a.method,
                    b.method,
                    &a.regions[r].fa_mse,
                    &b.regions[r].fa_mse,
                ));
                comparisons.push(compare(
                    format!("md:{name}"),
                    a.method,
                    b.method,
                    &a.regions[r].md_mse,
                    &b.regions[r].md_mse,
                ));
            }
        }
    }

    Ok(RunReport {
        n_missing: cfg.n_missing,
        gaps: cfg.gaps.clone(),
        sh_lower_bound_mean: mean(&sh_lower_bound),
        sh_lower_bound,
        methods,
        comparisons,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Flat table: one row per mean score and one per comparison.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_missing,kind,metric,region,method_a,method_b,value,w,p\n");
        for run in &self.runs {
            let n = run.n_missing;
            let _ = writeln!(s, "{n},score,signal,,sh_lower_bound,,{:e},,", run.sh_lower_bound_mean);
            for m in &run.methods {
                let name = m.method.name();
                let _ = writeln!(s, "{n},score,signal,,{name},,{:e},,", m.signal_mse_mean);
                for r in &m.regions {
                    let _ = writeln!(s, "{n},score,fa,{},{name},,{},,", r.region, fmt_opt(r.fa_mse_mean));
                    let _ = writeln!(s, "{n},score,md,{},{name},,{},,", r.region, fmt_opt(r.md_mse_mean));
                }
            }
            for c in &run.comparisons {
                let (metric, region) = c.metric.split_once(':').unwrap_or((&c.metric, ""));
                let _ = writeln!(
                    s,
                    "{n},wilcoxon,{metric},{region},{},{},,{},{}",
                    c.method_a.name(),
                    c.method_b.name(),
                    fmt_opt(c.w),
                    fmt_opt(c.p)
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: Vec<f64>, intent: Intent) -> Volume4D {
        let n = values.len();
        Volume4D::zeros([n, 1, 1, 1], [1.0; 3], intent)
            .and_then(|v| v.with_channels(1, values, intent))
            .unwrap()
    }

    #[test]
    fn region_mse_examples() {
        let labels = vol(vec![3.0, 3.0, 3.0, 3.0, 0.0], Intent::Labels);
        let gt = vol(vec![1.0, 2.0, 3.0, 4.0, 5.0], Intent::Scalar);
        assert_eq!(mse_region(&gt, &gt, &labels, 3).unwrap(), 0.0);
        let shifted = vol(vec![1.1, 2.1, 3.1, 4.1, 100.0], Intent::Scalar);
        assert!((mse_region(&shifted, &gt, &labels, 3).unwrap() - 0.01).abs() < 1e-12);
        let half = vol(vec![1.2, 2.2, 3.0, 4.0, -7.0], Intent::Scalar);
        assert!((mse_region(&half, &gt, &labels, 3).unwrap() - 0.02).abs() < 1e-12);
        assert!(matches!(mse_region(&gt, &gt, &labels, 2), Err(Error::EmptyMask)));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
