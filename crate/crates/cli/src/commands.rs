use crate::{Cli, CliError, Command, DomainArg, DtiArg, DwiArgs, InterpArg, MethodArg, NetArg, NoiseArg, NormArg, SplitArg, UpsampleArg};
use dwislice_core::dti::{fa_map, fit_dti_with, md_map, DtiFitMethod};
use dwislice_core::eval::{run_experiment, EvalReport, ExperimentConfig, ExperimentData, Method, Models};
use dwislice_core::inference::{infer_gap_channelwise, infer_gap_sh, GapSpec, InferOptions};
use dwislice_core::interp::{interp_missing_slices, InterpKind};
use dwislice_core::nn::{
    averaged_dwi_dataset, load_checkpoint, save_checkpoint, slices_from_volume, slices_from_volume_with,
    sweep_latent_maps, train,
    ModelConfig, ModelParams, SliceDataset, SplitMode, TrainConfig, TrainOutcome, Upsample,
};
use dwislice_core::phantom::{make_phantom, Noise, PhantomSpec};
use dwislice_core::sh::{fit_sh, project_sh, sh_roundtrip_error, ShCoeffVolume};
use dwislice_core::volume::{read_gradient_table, read_nifti, select_shell, write_nifti, GradientTable, Mask, NormMode, SliceImage, Volume4D};
use std::path::{Path, PathBuf};
use std::time::Instant;

type Result<T> = std::result::Result<T, CliError>;

/// Latent sizes tried by `train --sweep`.
const SWEEP_MAPS: [usize; 4] = [16, 32, 64, 128];

struct Loaded {
    full: Volume4D,
    b0_idx: Vec<usize>,
    shell_idx: Vec<usize>,
    b0: Volume4D,
    shell: Volume4D,
    g_shell: GradientTable,
}

fn sidecars(dwi: &Path, bval: Option<&Path>, bvec: Option<&Path>) -> (PathBuf, PathBuf) {
    (
        bval.map_or_else(|| dwi.with_extension("bval"), Path::to_path_buf),
        bvec.map_or_else(|| dwi.with_extension("bvec"), Path::to_path_buf),
    )
}

fn load(path: &Path, bval: Option<&Path>, bvec: Option<&Path>, shell: f64, tol: f64) -> Result<Loaded> {
    let full = read_nifti(path)?;
    let (bval, bvec) = sidecars(path, bval, bvec);
    let g = read_gradient_table(&bval, &bvec)?;
    let b0_idx = g.b0_indices();
    if b0_idx.is_empty() {
        return Err(CliError::Usage(format!("{} has no b0 volumes", path.display())));
    }
    let (shell_vol, g_shell) = select_shell(&full, &g, shell, tol)?;
    let shell_idx = g.shell_indices(shell, tol);
    Ok(Loaded {
        b0: full.select_channels(&b0_idx)?,
        shell: shell_vol,
        g_shell,
        b0_idx,
        shell_idx,
        full,
    })
}

fn load_args(a: &DwiArgs) -> Result<Loaded> {
    load(&a.dwi, a.bval.as_deref(), a.bvec.as_deref(), a.shell, a.shell_tol)
}

fn load_mask(path: &Path, like: &Volume4D) -> Result<Mask> {
    let m = Mask::from_labels(&read_nifti(path)?)?;
    m.check_volume(like)?;
    Ok(m)
}

/// Write `slices` into `v` starting at slice `z0`, slice channel `c` going to
/// volume channel `channels[c]`.
fn put_slices(v: &mut Volume4D, z0: usize, slices: &[SliceImage], channels: &[usize]) {
    let [nx, ny, _, _] = v.dims();
    for (k, s) in slices.iter().enumerate() {
        for (c, &vc) in channels.iter().enumerate() {
            let src = s.channel(c);
            for y in 0..ny {
                for x in 0..nx {
                    v.set(x, y, z0 + k, vc, src[x + nx * y]);
                }
            }
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn kind(m: InterpArg) -> InterpKind {
    match m {
        InterpArg::Linear => InterpKind::Linear,
        InterpArg::Cubic => InterpKind::Cubic,
        InterpArg::Bspline5 => InterpKind::Bspline5,
    }
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Linear => Method::Linear,
        MethodArg::Cubic => Method::Cubic,
        MethodArg::Bspline5 => Method::Bspline5,
        MethodArg::ShLinear => Method::ShLinear,
        MethodArg::AeDwi => Method::AeDwi,
        MethodArg::AeSh => Method::AeSh,
    }
}

fn load_model(path: Option<&Path>) -> Result<Option<ModelParams>> {
    path.map(load_checkpoint).transpose().map_err(Into::into)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::FitSh {
            input,
            lmax,
            lambda,
            mask,
            out,
        } => {
            let d = load_args(input)?;
            let mask = mask.as_deref().map(|m| load_mask(m, &d.full)).transpose()?;
            let sh = fit_sh(&d.shell, &d.g_shell, *lmax, *lambda, mask.as_ref())?;
            sh.save(out)?;
            println!("{} coefficients from {} directions -> {}", sh.coeffs.channels(), d.g_shell.len(), out.display());
        }
        Command::ProjectSh { sh, bval, bvec, out } => {
            let sh = ShCoeffVolume::load(sh)?;
            let g = read_gradient_table(bval, bvec)?;
            let g = g.subset(&g.dwi_indices());
            let v = project_sh(&sh, g.bvecs())?;
            write_nifti(&v, out)?;
            println!("{} directions -> {}", v.channels(), out.display());
        }
        Command::FitDti {
            input,
            mask,
            method,
            out_prefix,
        } => {
            let d = load_args(input)?;
            let mask = mask.as_deref().map(|m| load_mask(m, &d.full)).transpose()?;
            let m = match method {
                DtiArg::Ols => DtiFitMethod::Ols,
                DtiArg::Wls => DtiFitMethod::Wls,
            };
            let t = fit_dti_with(&d.shell, &d.b0, &d.g_shell, mask.as_ref(), m)?;
            write_nifti(&t.to_volume()?, &with_suffix(out_prefix, "_tensor.nii"))?;
            write_nifti(&fa_map(&t)?, &with_suffix(out_prefix, "_fa.nii"))?;
            write_nifti(&md_map(&t)?, &with_suffix(out_prefix, "_md.nii"))?;
            println!("tensor, FA and MD maps -> {}_*.nii", out_prefix.display());
        }
        Command::Interp {
            input,
            gap_start,
            n,
            method,
            out,
        } => {
            let mut v = read_nifti(input)?;
            let slices = interp_missing_slices(&v, *gap_start, *n as usize, kind(*method))?;
            let channels: Vec<usize> = (0..v.channels()).collect();
            put_slices(&mut v, *gap_start, &slices, &channels);
            write_nifti(&v, out)?;
            println!("filled slices {}..{} -> {}", gap_start, gap_start + *n as usize, out.display());
        }
        Command::Train {
            dwi,
            mask,
            shell,
            shell_tol,
            net,
            avg_n,
            lmax,
            latent_maps,
            sweep,
            epochs,
            lr,
            batch_size,
            val_fraction,
            split,
            input_size,
            width_divisor,
            upsample,
            norm,
            out,
            log,
        } => {
            let norm = match norm {
                NormArg::PerChannel => NormMode::PerChannel,
                NormArg::Joint => NormMode::Joint,
            };
            if !mask.is_empty() && mask.len() != dwi.len() {
                return Err(CliError::Usage(format!("{} masks for {} subjects", mask.len(), dwi.len())));
            }
            let mut data = SliceDataset::default();
            let mut channels = 1;
            for (s, path) in dwi.iter().enumerate() {
                let d = load(path, None, None, *shell, *shell_tol)?;
                let m = mask.get(s).map(|p| load_mask(p, &d.full)).transpose()?;
                let subject = match net {
                    NetArg::B0 => slices_from_volume(&d.b0.mean_channels(), m.as_ref(), s, *input_size)?,
                    NetArg::AvgB1000 => {
                        let seed = cli.seed.wrapping_add(s as u64);
                        averaged_dwi_dataset(&d.shell, m.as_ref(), *avg_n, s, *input_size, seed)?
                    }
                    NetArg::Sh4 => {
                        let sh = fit_sh(&d.shell, &d.g_shell, *lmax, 0.0, m.as_ref())?;
                        channels = sh.coeffs.channels();
                        slices_from_volume_with(&sh.coeffs, m.as_ref(), s, *input_size, norm)?
                    }
                };
                data.extend(subject);
            }
            let default_maps = if *net == NetArg::Sh4 { 64 } else { 32 };
            let model_cfg = ModelConfig {
                input_size: *input_size,
                width_divisor: *width_divisor,
                upsample: match upsample {
                    UpsampleArg::Nearest => Upsample::Nearest,
                    UpsampleArg::TransposedConv => Upsample::TransposedConv,
                },
                norm,
                seed: cli.seed,
                ..ModelConfig::new(channels, latent_maps.unwrap_or(default_maps))
            };
            let cfg = TrainConfig {
                lr: *lr,
                batch_size: *batch_size,
                epochs: *epochs,
                val_fraction: *val_fraction,
                split: match split {
                    SplitArg::Subject => SplitMode::Subject,
                    SplitArg::Slice => SplitMode::Slice,
                },
                seed: cli.seed,
            };
            log::info!("training on {} slices with {} channels", data.len(), channels);
            let outcome: TrainOutcome = if *sweep {
                let (best, mut all) = sweep_latent_maps(&data, &cfg, &model_cfg, &SWEEP_MAPS)?;
                for (m, o) in SWEEP_MAPS.iter().zip(&all) {
                    println!("M={m}: best validation MSE {:.4e}", o.best_val_mse());
                }
                all.swap_remove(best)
            } else {
                train(&data, &cfg, &model_cfg)?
            };
            save_checkpoint(&outcome.best, out)?;
            let log_path = log.clone().unwrap_or_else(|| out.with_extension("csv"));
            std::fs::write(&log_path, outcome.history_csv())?;
            let (h, w, m) = outcome.best.latent_shape();
            println!(
                "epoch {} of {}: validation MSE {:.4e}, latent {h}x{w}x{m} -> {}",
                outcome.best_epoch,
                outcome.history.len(),
                outcome.best_val_mse(),
                out.display()
            );
        }
        Command::Infer {
            input,
            model,
            b0_model,
            domain,
            gap_start,
            n,
            lmax,
            match_mask,
            out,
        } => {
            let d = load_args(input)?;
            let gap = GapSpec::new(*gap_start, *n as usize)?;
            gap.check(d.full.spatial_dims()[2])?;
            let model = load_checkpoint(model)?;
            let model_b0 = load_model(b0_model.as_deref())?;
            let opts = InferOptions {
                match_mask: match match_mask {
                    Some(p) => {
                        let m = load_mask(p, &d.full)?;
                        let [nx, ny, _] = m.dims();
                        let plane = nx * ny;
                        let at = |z: usize| &m.as_slice()[z * plane..(z + 1) * plane];
                        let (a, b) = (at(gap.above()), at(gap.below()));
                        Some(a.iter().zip(b).map(|(x, y)| *x || *y).collect())
                    }
                    None => None,
                },
            };
            let (dwi, b0) = match domain {
                DomainArg::Sh4 => {
                    let model_b0 = model_b0
                        .as_ref()
                        .ok_or_else(|| CliError::Usage("--domain sh4 needs --b0-model".into()))?;
                    let r = infer_gap_sh(&model, model_b0, &d.shell, &d.b0, &d.g_shell, *lmax, gap, &opts)?;
                    (r.dwi, r.b0)
                }
                DomainArg::Signal => {
                    let dwi = infer_gap_channelwise(&model, &d.shell, gap, &opts)?;
                    let b0 = infer_gap_channelwise(model_b0.as_ref().unwrap_or(&model), &d.b0, gap, &opts)?;
                    (dwi, b0)
                }
            };
            let mut v = d.full.clone();
            put_slices(&mut v, gap.gap_start, &dwi, &d.shell_idx);
            put_slices(&mut v, gap.gap_start, &b0, &d.b0_idx);
            write_nifti(&v, out)?;
            for (k, alpha) in gap.alphas().iter().enumerate() {
                println!(
                    "slice {}: weights {:.6} (slice {}) / {:.6} (slice {})",
                    gap.gap_start + k,
                    alpha,
                    gap.above(),
                    1.0 - alpha,
                    gap.below()
                );
            }
            println!("{} slices written -> {}", gap.n_missing, out.display());
        }
        Command::Phantom {
            out_dir,
            dims,
            directions,
            n_b0,
            b_value,
            noise,
            sigma,
            band_limit,
        } => {
            let spec = PhantomSpec {
                dims: [dims[0], dims[1], dims[2]],
                b_value: *b_value,
                n_directions: *directions,
                n_b0: *n_b0,
                noise: match noise {
                    NoiseArg::None => Noise::None,
                    NoiseArg::Gaussian => Noise::Gaussian(*sigma),
                    NoiseArg::Rician => Noise::Rician(*sigma),
                },
                seed: cli.seed,
                ..PhantomSpec::default()
            };
            let mut p = make_phantom(&spec)?;
            if let Some(l) = band_limit {
                p = p.band_limited(*l)?;
            }
            std::fs::create_dir_all(out_dir)?;
            let (v, g) = p.combined()?;
            write_nifti(&v, &out_dir.join("dwi.nii"))?;
            g.write_fsl(&out_dir.join("dwi.bval"), &out_dir.join("dwi.bvec"))?;
            write_nifti(&p.labels, &out_dir.join("labels.nii"))?;
            write_nifti(&p.tensors.to_volume()?, &out_dir.join("tensors.nii"))?;
            write_json(&out_dir.join("phantom.json"), &spec)?;
            println!("phantom {:?} with {} volumes -> {}", spec.dims, v.channels(), out_dir.display());
        }
        Command::Evaluate {
            input,
            labels,
            b0_model,
            dwi_model,
            sh_model,
            methods,
            n,
            gaps,
            lmax,
            out_dir,
        } => {
            let d = load_args(input)?;
            let labels = read_nifti(labels)?;
            let b0 = load_model(b0_model.as_deref())?;
            let dm = load_model(dwi_model.as_deref())?;
            let sm = load_model(sh_model.as_deref())?;
            let methods: Vec<Method> = if methods.is_empty() {
                let mut m = vec![Method::Linear, Method::Cubic, Method::Bspline5, Method::ShLinear];
                if b0.is_some() && dm.is_some() {
                    m.push(Method::AeDwi);
                }
                if b0.is_some() && sm.is_some() {
                    m.push(Method::AeSh);
                }
                m
            } else {
                methods.iter().map(|&m| method(m)).collect()
            };
            let models = Models {
                b0: b0.as_ref(),
                dwi: dm.as_ref(),
                sh: sm.as_ref(),
            };
            let data = ExperimentData {
                dwi: &d.shell,
                b0: &d.b0,
                g: &d.g_shell,
                labels: &labels,
            };
            let depth = d.full.spatial_dims()[2];
            let mut report = EvalReport {
                lmax: *lmax,
                runs: Vec::new(),
            };
            let mut timing = serde_json::Map::new();
            for &nm in n {
                let cfg = ExperimentConfig {
                    n_missing: nm,
                    gaps: if gaps.is_empty() {
                        ExperimentConfig::all_gaps(depth, nm)
                    } else {
                        gaps.clone()
                    },
                    methods: methods.clone(),
                    lmax: *lmax,
                };
                let t = Instant::now();
                let run = run_experiment(data, models, &cfg)?;
                timing.insert(format!("n{nm}_seconds"), t.elapsed().as_secs_f64().into());
                println!("N={nm}: {} gaps, SH lower bound {:.4e}", run.gaps.len(), run.sh_lower_bound_mean);
                for m in &run.methods {
                    println!("  {:<10} signal MSE {:.4e}", m.method.name(), m.signal_mse_mean);
                }
                report.runs.push(run);
            }
            std::fs::create_dir_all(out_dir)?;
            std::fs::write(out_dir.join("report.json"), report.to_json()? + "\n")?;
            std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
            write_json(&out_dir.join("timing.json"), &timing)?;
            println!("report -> {}", out_dir.display());
        }
        Command::ShBound { input, labels, lmax } => {
            let d = load_args(input)?;
            let mask = labels.as_deref().map(|m| load_mask(m, &d.full)).transpose()?;
            for &l in lmax {
                let err = sh_roundtrip_error(&d.shell, &d.g_shell, l, mask.as_ref())?;
                println!("lmax {l}: {err:.6e}");
            }
        }
    }
    Ok(())
}
