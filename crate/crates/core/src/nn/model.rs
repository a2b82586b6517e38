use super::layers::{self, BnCache};
use super::tensor::Tensor4;
use super::{ModelConfig, Mode, Upsample};
use crate::error::{Error, Result};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Elu,
    AvgPool,
    Upsample,
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
    },
    Sigmoid,
}

impl LayerSpec {
    /// Lengths of the trainable tensors this layer owns, in declaration order.
    pub fn param_lens(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
            } => {
                let mut v = vec![out_ch * in_ch * kernel * kernel];
                if bias {
                    v.push(out_ch);
                }
                v
            }
            LayerSpec::BatchNorm { channels } => vec![channels, channels],
            LayerSpec::ConvTranspose { in_ch, out_ch } => vec![out_ch * in_ch * 9],
            _ => Vec::new(),
        }
    }

    /// Lengths of the non-trainable buffers (BN running mean and variance).
    pub fn buffer_lens(&self) -> Vec<usize> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![channels, channels],
            _ => Vec::new(),
        }
    }
}

/// Running statistics produced by a train-mode forward, one entry per BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub recon: Tensor4,
    pub latent: Tensor4,
    pub bn_stats: Vec<BnStats>,
}

/// Gradients aligned with [`ModelParams::params`].
pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

enum Cache {
    Input(Tensor4),
    Bn(BnCache),
    Output(Tensor4),
    None,
}

fn architecture(cfg: &ModelConfig) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
    let w = |n: usize| (n / cfg.width_divisor).max(1);
    let conv = |in_ch, out_ch| LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        bias: false,
    };
    let bn = |channels| LayerSpec::BatchNorm { channels };
    let mut enc = Vec::new();
    let mut ch = cfg.input_channels;
    for b in 0..4 {
        let width = w(32 << b);
        enc.extend([conv(ch, width), bn(width), LayerSpec::Elu]);
        enc.extend([conv(width, width), bn(width), LayerSpec::Elu]);
        ch = width;
        if b == 3 {
            enc.extend([conv(ch, w(512)), bn(w(512)), LayerSpec::Elu]);
            enc.extend([conv(w(512), w(256)), bn(w(256)), LayerSpec::Elu]);
            enc.push(LayerSpec::Conv {
                in_ch: w(256),
                out_ch: cfg.latent_maps,
                kernel: 3,
                bias: true,
            });
        }
        enc.push(LayerSpec::AvgPool);
    }

    let mut dec = vec![conv(cfg.latent_maps, w(512)), bn(w(512)), LayerSpec::Elu];
    let mut ch = w(512);
    for width in [256, 128, 64, 32].map(w) {
        dec.push(match cfg.upsample {
            Upsample::Nearest => LayerSpec::Upsample,
            Upsample::TransposedConv => LayerSpec::ConvTranspose { in_ch: ch, out_ch: ch },
        });
        dec.extend([conv(ch, width), bn(width), LayerSpec::Elu]);
        dec.extend([conv(width, width), bn(width), LayerSpec::Elu]);
        ch = width;
    }
    dec.push(LayerSpec::Conv {
        in_ch: ch,
        out_ch: cfg.input_channels,
        kernel: 1,
        bias: true,
    });
    dec.push(LayerSpec::Sigmoid);
    (enc, dec)
}

/// Build and initialize a model: He-uniform conv kernels, zero biases, BN
/// scale 1 and shift 0, running statistics (0, 1).
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let (encoder, decoder) = architecture(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for layer in encoder.iter().chain(&decoder) {
        match *layer {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                bias,
            } => {
                params.push(he_uniform(&mut rng, out_ch * in_ch * kernel * kernel, in_ch * kernel * kernel));
                if bias {
                    params.push(vec![0.0; out_ch]);
                }
            }
            LayerSpec::ConvTranspose { in_ch, out_ch } => {
                params.push(he_uniform(&mut rng, out_ch * in_ch * 9, in_ch * 9));
            }
            LayerSpec::BatchNorm { channels } => {
                params.push(vec![1.0; channels]);
                params.push(vec![0.0; channels]);
                buffers.push(vec![0.0; channels]);
                buffers.push(vec![1.0; channels]);
            }
            _ => {}
        }
    }
    Ok(ModelParams {
        config: cfg.clone(),
        encoder,
        decoder,
        params,
        buffers,
    })
}

fn he_uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..len).map(|_| dist.sample(rng)).collect()
}

impl ModelParams {
    pub fn latent_size(&self) -> usize {
        self.config.input_size / 16
    }

    /// Latent shape as `(height, width, maps)`.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.latent_size();
        (s, s, self.config.latent_maps)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Check that the stored tensors agree with the layer list.
    pub fn check_consistency(&self) -> Result<()> {
        let layers = self.encoder.iter().chain(&self.decoder);
        let p: Vec<usize> = layers.clone().flat_map(LayerSpec::param_lens).collect();
        let b: Vec<usize> = layers.flat_map(LayerSpec::buffer_lens).collect();
        let got_p: Vec<usize> = self.params.iter().map(Vec::len).collect();
        let got_b: Vec<usize> = self.buffers.iter().map(Vec::len).collect();
        if p != got_p || b != got_b {
            return Err(Error::shape("parameter tensors do not match the layer list"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let c = &self.config;
        if x.n == 0 {
            return Err(Error::shape("empty batch"));
        }
        if x.c != c.input_channels || x.h != c.input_size || x.w != c.input_size {
            return Err(Error::shape(format!(
                "model expects {}x{}x{} inputs, got {}x{}x{}",
                c.input_size, c.input_size, c.input_channels, x.h, x.w, x.c
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor4) -> Result<()> {
        let s = self.latent_size();
        if z.n == 0 || z.c != self.config.latent_maps || z.h != s || z.w != s {
            return Err(Error::shape(format!(
                "model expects {s}x{s}x{} latents, got {}x{}x{}",
                self.config.latent_maps, z.h, z.w, z.c
            )));
        }
        Ok(())
    }

    /// Parameter and buffer offsets at the first decoder layer.
    fn decoder_offsets(&self) -> (usize, usize) {
        let p = self.encoder.iter().map(|l| l.param_lens().len()).sum();
        let b = self.encoder.iter().map(|l| l.buffer_lens().len()).sum();
        (p, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        layers: &[LayerSpec],
        mut p: usize,
        mut b: usize,
        mut x: Tensor4,
        mode: Mode,
        mut caches: Option<&mut Vec<Cache>>,
        stats: &mut Vec<BnStats>,
    ) -> Tensor4 {
        let eps = self.config.bn_eps;
        for layer in layers {
            let (y, cache) = match *layer {
                LayerSpec::Conv {
                    out_ch, kernel, bias, ..
                } => {
                    let bias_p = bias.then(|| self.params[p + 1].as_slice());
                    let y = layers::conv_forward(&x, &self.params[p], bias_p, out_ch, kernel);
                    p += 1 + bias as usize;
                    (y, Cache::Input(x))
                }
                LayerSpec::ConvTranspose { out_ch, .. } => {
                    let y = layers::conv_transpose_forward(&x, &self.params[p], out_ch);
                    p += 1;
                    (y, Cache::Input(x))
                }
                LayerSpec::BatchNorm { .. } => {
                    let (gamma, beta) = (&self.params[p], &self.params[p + 1]);
                    let (y, cache) = match mode {
                        Mode::Train => {
                            let (mean, var) = layers::bn_batch_stats(&x);
                            let out = layers::bn_forward(&x, gamma, beta, &mean, &var, eps, true);
                            stats.push(BnStats { mean, var });
                            out
                        }
                        Mode::Eval => layers::bn_forward(
                            &x,
                            gamma,
                            beta,
                            &self.buffers[b],
                            &self.buffers[b + 1],
                            eps,
                            false,
                        ),
                    };
                    p += 2;
                    b += 2;
                    (y, Cache::Bn(cache))
                }
                LayerSpec::Elu => (layers::elu_forward(&x), Cache::Input(x)),
                LayerSpec::AvgPool => (layers::avgpool_forward(&x), Cache::None),
                LayerSpec::Upsample => (layers::upsample_forward(&x), Cache::None),
                LayerSpec::Sigmoid => {
                    let y = layers::sigmoid_forward(&x);
                    (y.clone(), Cache::Output(y))
                }
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            x = y;
        }
        x
    }

    /// Full autoencoder pass. Train mode normalizes with batch statistics and
    /// returns them in [`Forward::bn_stats`]; apply them with
    /// [`ModelParams::update_running_stats`].
    pub fn forward(&self, x: &Tensor4, mode: Mode) -> Result<Forward> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let latent = self.run(&self.encoder, 0, 0, x.clone(), mode, None, &mut stats);
        let (p, b) = self.decoder_offsets();
        let recon = self.run(&self.decoder, p, b, latent.clone(), mode, None, &mut stats);
        Ok(Forward {
            recon,
            latent,
            bn_stats: stats,
        })
    }

    /// Encoder half in eval mode.
    pub fn encode(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        Ok(self.run(&self.encoder, 0, 0, x.clone(), Mode::Eval, None, &mut Vec::new()))
    }

    /// Decoder half in eval mode.
    pub fn decode(&self, z: &Tensor4) -> Result<Tensor4> {
        self.check_latent(z)?;
        let (p, b) = self.decoder_offsets();
        Ok(self.run(&self.decoder, p, b, z.clone(), Mode::Eval, None, &mut Vec::new()))
    }

    /// Exponential moving average of the BN running statistics.
    pub fn update_running_stats(&mut self, stats: &[BnStats]) {
        let m = self.config.bn_momentum;
        for (i, s) in stats.iter().enumerate() {
            let (mean, var) = (2 * i, 2 * i + 1);
            for (r, &v) in self.buffers[mean].iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * v;
            }
            for (r, &v) in self.buffers[var].iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * v;
            }
        }
    }

    /// Reconstruction MSE and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, x: &Tensor4, mode: Mode) -> Result<(f64, Grads, Vec<BnStats>)> {
        self.check_input(x)?;
        let layers: Vec<LayerSpec> = self.encoder.iter().chain(&self.decoder).copied().collect();
        let mut caches = Vec::with_capacity(layers.len());
        let mut stats = Vec::new();
        let out = self.run(&layers, 0, 0, x.clone(), mode, Some(&mut caches), &mut stats);

        let count = out.data.len() as f64;
        let mut loss = 0.0;
        let mut dy = Tensor4::zeros(out.n, out.c, out.h, out.w);
        for ((d, &o), &t) in dy.data.iter_mut().zip(&out.data).zip(&x.data) {
            let r = o - t;
            loss += r * r;
            *d = 2.0 * r / count;
        }
        loss /= count;

        let mut grads = self.zero_grads();
        let mut p = self.params.len();
        for (layer, cache) in layers.iter().zip(caches).rev() {
            dy = match (*layer, cache) {
                (LayerSpec::Conv { kernel, bias, .. }, Cache::Input(input)) => {
                    p -= 1 + bias as usize;
                    let (dx, dw, db) = layers::conv_backward(&input, &dy, &self.params[p], kernel, bias);
                    grads[p] = dw;
                    if bias {
                        grads[p + 1] = db;
                    }
                    dx
                }
                (LayerSpec::ConvTranspose { .. }, Cache::Input(input)) => {
                    p -= 1;
                    let (dx, dw) = layers::conv_transpose_backward(&input, &dy, &self.params[p]);
                    grads[p] = dw;
                    dx
                }
                (LayerSpec::BatchNorm { .. }, Cache::Bn(c)) => {
                    p -= 2;
                    let (dx, dg, db) = layers::bn_backward(&dy, &c, &self.params[p]);
                    grads[p] = dg;
                    grads[p + 1] = db;
                    dx
                }
                (LayerSpec::Elu, Cache::Input(input)) => layers::elu_backward(&input, &dy),
                (LayerSpec::AvgPool, _) => layers::avgpool_backward(&dy),
                (LayerSpec::Upsample, _) => layers::upsample_backward(&dy),
                (LayerSpec::Sigmoid, Cache::Output(y)) => layers::sigmoid_backward(&y, &dy),
                _ => unreachable!("cache kind always matches its layer"),
            };
        }
        debug_assert_eq!(p, 0);
        Ok((loss, grads, stats))
    }

    /// Mean squared reconstruction error in eval mode.
    pub fn eval_mse(&self, x: &Tensor4) -> Result<f64> {
        let f = self.forward(x, Mode::Eval)?;
        Ok(mse(&f.recon, x))
    }
}

pub(crate) fn mse(a: &Tensor4, b: &Tensor4) -> f64 {
    debug_assert!(a.same_shape(b));
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}
