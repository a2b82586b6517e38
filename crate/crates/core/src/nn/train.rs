use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{build_model, mse, ModelParams};
use super::tensor::Tensor4;
use super::{ModelConfig, Mode};
use crate::error::{Error, Result};
use crate::volume::{normalize_slice, normalize_slice_with, Mask, NormMode, SliceImage, Volume4D};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Slices with a smaller in-mask fraction are left out of training sets.
pub const MIN_MASK_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole subjects go to either side of the split.
    #[default]
    Subject,
    Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub split: SplitMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 32,
            epochs: 200,
            val_fraction: 0.15,
            split: SplitMode::Subject,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument("validation fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Normalized, network-sized slices with the subject each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceDataset {
    pub slices: Vec<SliceImage>,
    pub groups: Vec<usize>,
}

impl SliceDataset {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn push(&mut self, slice: SliceImage, group: usize) {
        self.slices.push(slice);
        self.groups.push(group);
    }

    pub fn extend(&mut self, other: SliceDataset) {
        self.slices.extend(other.slices);
        self.groups.extend(other.groups);
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor4> {
        let refs: Vec<&SliceImage> = idx.iter().map(|&i| &self.slices[i]).collect();
        Tensor4::from_slices(&refs)
    }
}

fn kept_slices(dims: [usize; 3], mask: Option<&Mask>) -> Result<Vec<usize>> {
    let [nx, ny, nz] = dims;
    let Some(mask) = mask else {
        return Ok((0..nz).collect());
    };
    if mask.dims() != dims {
        return Err(Error::shape("mask does not match the volume"));
    }
    let plane = nx * ny;
    Ok((0..nz)
        .filter(|&z| {
            let inside = mask.as_slice()[z * plane..(z + 1) * plane]
                .iter()
                .filter(|&&m| m)
                .count();
            inside as f64 >= MIN_MASK_FRACTION * plane as f64
        })
        .collect())
}

/// Every axial slice of `v` (all channels), normalized per channel and padded to `size`.
pub fn slices_from_volume(
    v: &Volume4D,
    mask: Option<&Mask>,
    group: usize,
    size: usize,
) -> Result<SliceDataset> {
    slices_from_volume_with(v, mask, group, size, NormMode::PerChannel)
}

pub fn slices_from_volume_with(
    v: &Volume4D,
    mask: Option<&Mask>,
    group: usize,
    size: usize,
    norm: NormMode,
) -> Result<SliceDataset> {
    let mut out = SliceDataset::default();
    for z in kept_slices(v.spatial_dims(), mask)? {
        let (s, _) = normalize_slice_with(&v.slice(z), norm).crop_or_pad(size);
        out.push(s, group);
    }
    Ok(out)
}

/// One-channel samples, each the mean of `n_avg` randomly chosen channels of `dwi`.
pub fn averaged_dwi_dataset(
    dwi: &Volume4D,
    mask: Option<&Mask>,
    n_avg: usize,
    group: usize,
    size: usize,
    seed: u64,
) -> Result<SliceDataset> {
    let nv = dwi.channels();
    if n_avg == 0 || n_avg > nv {
        return Err(Error::InvalidArgument(format!(
            "cannot average {n_avg} of {nv} volumes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SliceDataset::default();
    for z in kept_slices(dwi.spatial_dims(), mask)? {
        let slice = dwi.slice(z);
        let mut chosen = index::sample(&mut rng, nv, n_avg).into_vec();
        chosen.sort_unstable();
        let mut avg = SliceImage::zeros(slice.width, slice.height, 1);
        for &c in &chosen {
            for (a, &s) in avg.data.iter_mut().zip(slice.channel(c)) {
                *a += s;
            }
        }
        avg.data.iter_mut().for_each(|a| *a /= n_avg as f64);
        let (s, _) = normalize_slice(&avg).crop_or_pad(size);
        out.push(s, group);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation MSE.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_val_mse(&self) -> f64 {
        self.history[self.best_epoch - 1].val_mse
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.history {
            let _ = writeln!(s, "{},{:e},{:e}", e.epoch, e.train_mse, e.val_mse);
        }
        s
    }
}

fn split(data: &SliceDataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = data.len();
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let mut groups: Vec<usize> = data.groups.clone();
    groups.sort_unstable();
    groups.dedup();

    if cfg.split == SplitMode::Subject && groups.len() >= 2 {
        groups.shuffle(rng);
        let mut val_groups = Vec::new();
        let mut count = 0;
        for &g in &groups[..groups.len() - 1] {
            if count >= n_val {
                break;
            }
            val_groups.push(g);
            count += data.groups.iter().filter(|&&x| x == g).count();
        }
        let (val, train): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| val_groups.contains(&data.groups[i]));
        return (train, val);
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

fn eval_mse_set(model: &ModelParams, data: &SliceDataset, idx: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let x = data.batch(chunk)?;
        let f = model.forward(&x, Mode::Eval)?;
        total += mse(&f.recon, &x) * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Train from scratch and keep the parameters with the lowest validation loss.
pub fn train(data: &SliceDataset, cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.len() < cfg.batch_size || data.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} slices cannot fill a batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut model = build_model(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) = split(data, cfg, &mut rng);
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let x = data.batch(chunk)?;
            let (loss, grads, stats) = model.loss_and_grads(&x, Mode::Train)?;
            adam_step(&mut model.params, &grads, &mut state, &adam);
            model.update_running_stats(&stats);
            total += loss * chunk.len() as f64;
        }
        let train_mse = total / train_idx.len() as f64;
        let val_mse = eval_mse_set(&model, data, &val_idx, cfg.batch_size)?;
        log::debug!("epoch {epoch}: train {train_mse:.3e} val {val_mse:.3e}");
        history.push(EpochLog {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best_val || best_epoch == 0 {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    if best_epoch == 0 {
        return Err(Error::InvalidArgument("training needs at least one epoch".into()));
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Train one model per latent size and return the index of the one with the
/// lowest validation loss along with all outcomes.
pub fn sweep_latent_maps(
    data: &SliceDataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    maps: &[usize],
) -> Result<(usize, Vec<TrainOutcome>)> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no latent sizes to sweep".into()));
    }
    let mut outcomes = Vec::with_capacity(maps.len());
    for &m in maps {
        let mc = ModelConfig {
            latent_maps: m,
            ..model_cfg.clone()
        };
        outcomes.push(train(data, cfg, &mc)?);
    }
    let best = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.best_val_mse().total_cmp(&b.1.best_val_mse()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((best, outcomes))
}
