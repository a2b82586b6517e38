//! Central finite-difference checks of every layer's backward pass and of the
//! composed network.

use super::layers;
use super::model::{build_model, mse, ModelParams};
use super::tensor::Tensor4;
use super::{ModelConfig, Mode};
use crate::error::Result;
use rand::distr::{Distribution, Uniform};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Probe step used for the per-layer checks.
pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub vector_rel_err: f64,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    let d = Uniform::new(lo, hi).expect("valid range");
    (0..len).map(|_| d.sample(rng)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let [n, c, h, w] = shape;
    Tensor4::from_vec(n, c, h, w, random(rng, n * c * h * w, lo, hi)).expect("shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Probe {
    n: usize,
    worst: f64,
    diff2: f64,
    a2: f64,
    n2: f64,
}

/// Compare `analytic` with the central difference of `f` around `x` for the
/// listed components.
fn fd(
    x: &[f64],
    analytic: &[f64],
    which: impl IntoIterator<Item = usize>,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Probe {
    let mut probe = x.to_vec();
    let mut p = Probe {
        n: 0,
        worst: 0.0,
        diff2: 0.0,
        a2: 0.0,
        n2: 0.0,
    };
    for i in which {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        p.worst = p.worst.max(rel_err(a, numeric));
        p.diff2 += (a - numeric) * (a - numeric);
        p.a2 += a * a;
        p.n2 += numeric * numeric;
        p.n += 1;
    }
    p
}

fn all(len: usize) -> std::ops::Range<usize> {
    0..len
}

struct Acc {
    name: String,
    total: Probe,
}

impl Acc {
    fn new(name: &str) -> Self {
        Acc {
            name: name.into(),
            total: Probe {
                n: 0,
                worst: 0.0,
                diff2: 0.0,
                a2: 0.0,
                n2: 0.0,
            },
        }
    }

    fn add(&mut self, p: Probe) {
        let t = &mut self.total;
        t.n += p.n;
        t.worst = t.worst.max(p.worst);
        t.diff2 += p.diff2;
        t.a2 += p.a2;
        t.n2 += p.n2;
    }

    fn done(self) -> GradCheck {
        let t = self.total;
        GradCheck {
            name: self.name,
            checked: t.n,
            max_rel_err: t.worst,
            vector_rel_err: t.diff2.sqrt() / t.a2.sqrt().max(t.n2.sqrt()).max(ABS_FLOOR),
        }
    }
}

fn check_conv(rng: &mut ChaCha8Rng, k: usize) -> GradCheck {
    let (cin, cout) = (3, 4);
    let x = tensor(rng, [2, cin, 5, 4], -1.0, 1.0);
    let w = random(rng, cout * cin * k * k, -0.5, 0.5);
    let b = random(rng, cout, -0.5, 0.5);
    let r = tensor(rng, [2, cout, 5, 4], -1.0, 1.0);
    let (dx, dw, db) = layers::conv_backward(&x, &r, &w, k, true);
    let loss = |x: &Tensor4, w: &[f64], b: &[f64]| dot(&layers::conv_forward(x, w, Some(b), cout, k).data, &r.data);

    let mut acc = Acc::new(&format!("conv{k}x{k}"));
    acc.add(fd(&x.data, &dx.data, all(x.data.len()), FD_STEP, |v| {
        loss(&Tensor4 { data: v.to_vec(), ..x.clone() }, &w, &b)
    }));
    acc.add(fd(&w, &dw, all(w.len()), FD_STEP, |v| loss(&x, v, &b)));
    acc.add(fd(&b, &db, all(b.len()), FD_STEP, |v| loss(&x, &w, v)));
    acc.done()
}

fn check_conv_transpose(rng: &mut ChaCha8Rng) -> GradCheck {
    let (cin, cout) = (3, 2);
    let x = tensor(rng, [2, cin, 3, 4], -1.0, 1.0);
    let w = random(rng, cout * cin * 9, -0.5, 0.5);
    let r = tensor(rng, [2, cout, 6, 8], -1.0, 1.0);
    let (dx, dw) = layers::conv_transpose_backward(&x, &r, &w);
    let loss = |x: &Tensor4, w: &[f64]| dot(&layers::conv_transpose_forward(x, w, cout).data, &r.data);
    let mut acc = Acc::new("conv_transpose3x3s2");
    acc.add(fd(&x.data, &dx.data, all(x.data.len()), FD_STEP, |v| {
        loss(&Tensor4 { data: v.to_vec(), ..x.clone() }, &w)
    }));
    acc.add(fd(&w, &dw, all(w.len()), FD_STEP, |v| loss(&x, v)));
    acc.done()
}

fn check_bn(rng: &mut ChaCha8Rng, train: bool) -> GradCheck {
    let eps = 1e-3;
    let x = tensor(rng, [3, 2, 4, 4], -1.0, 2.0);
    let gamma = random(rng, 2, 0.5, 1.5);
    let beta = random(rng, 2, -0.5, 0.5);
    let (rm, rv) = (vec![0.2, -0.1], vec![0.8, 1.3]);
    let r = tensor(rng, [3, 2, 4, 4], -1.0, 1.0);
    let forward = |x: &Tensor4, g: &[f64], b: &[f64]| {
        let (m, v) = if train { layers::bn_batch_stats(x) } else { (rm.clone(), rv.clone()) };
        layers::bn_forward(x, g, b, &m, &v, eps, train)
    };
    let (_, cache) = forward(&x, &gamma, &beta);
    let (dx, dg, db) = layers::bn_backward(&r, &cache, &gamma);
    let loss = |x: &Tensor4, g: &[f64], b: &[f64]| dot(&forward(x, g, b).0.data, &r.data);
    let mut acc = Acc::new(if train { "batchnorm_train" } else { "batchnorm_eval" });
    acc.add(fd(&x.data, &dx.data, all(x.data.len()), FD_STEP, |v| {
        loss(&Tensor4 { data: v.to_vec(), ..x.clone() }, &gamma, &beta)
    }));
    acc.add(fd(&gamma, &dg, all(2), FD_STEP, |v| loss(&x, v, &beta)));
    acc.add(fd(&beta, &db, all(2), FD_STEP, |v| loss(&x, &gamma, v)));
    acc.done()
}

fn check_pointwise(
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: [usize; 4],
    out_shape: [usize; 4],
    forward: impl Fn(&Tensor4) -> Tensor4,
    backward: impl Fn(&Tensor4, &Tensor4, &Tensor4) -> Tensor4,
) -> GradCheck {
    let mut x = tensor(rng, shape, -2.0, 2.0);
    // keep clear of the ELU kink
    for v in &mut x.data {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let r = tensor(rng, out_shape, -1.0, 1.0);
    let y = forward(&x);
    let dx = backward(&x, &y, &r);
    let mut acc = Acc::new(name);
    acc.add(fd(&x.data, &dx.data, all(x.data.len()), FD_STEP, |v| {
        dot(&forward(&Tensor4 { data: v.to_vec(), ..x.clone() }).data, &r.data)
    }));
    acc.done()
}

/// Finite-difference check of every layer kernel in isolation.
pub fn check_layers(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [2, 3, 4, 6];
    let half = [2, 3, 2, 3];
    let double = [2, 3, 8, 12];
    vec![
        check_conv(&mut rng, 3),
        check_conv(&mut rng, 1),
        check_conv_transpose(&mut rng),
        check_bn(&mut rng, true),
        check_bn(&mut rng, false),
        check_pointwise(&mut rng, "elu", s, s, layers::elu_forward, |x, _, r| {
            layers::elu_backward(x, r)
        }),
        check_pointwise(&mut rng, "sigmoid", s, s, layers::sigmoid_forward, |_, y, r| {
            layers::sigmoid_backward(y, r)
        }),
        check_pointwise(&mut rng, "avgpool2x2", s, half, layers::avgpool_forward, |_, _, r| {
            layers::avgpool_backward(r)
        }),
        check_pointwise(&mut rng, "upsample2x2", s, double, layers::upsample_forward, |_, _, r| {
            layers::upsample_backward(r)
        }),
    ]
}

/// Finite-difference check of the full reconstruction loss with respect to the
/// parameters of a model built from `cfg`, with probe step `h`. Tensors with
/// at most `per_tensor` entries are checked completely, larger ones at
/// `per_tensor` random entries.
pub fn check_network(
    cfg: &ModelConfig,
    batch: usize,
    per_tensor: usize,
    mode: Mode,
    h: f64,
) -> Result<GradCheck> {
    let mut model = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let s = cfg.input_size;
    let x = tensor(&mut rng, [batch, cfg.input_channels, s, s], 0.0, 1.0);
    if mode == Mode::Eval {
        // move the running statistics off their (0, 1) initialization
        let f = model.forward(&x, Mode::Train)?;
        model.update_running_stats(&f.bn_stats);
    }
    let (_, grads, _) = model.loss_and_grads(&x, mode)?;
    let loss = |m: &ModelParams| -> f64 {
        let f = m.forward(&x, mode).expect("valid input");
        mse(&f.recon, &x)
    };

    let mut acc = Acc::new(match mode {
        Mode::Train => "network_train",
        Mode::Eval => "network_eval",
    });
    let mut probe = model.clone();
    for t in 0..model.params.len() {
        let len = model.params[t].len();
        let which: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let base = model.params[t].clone();
        acc.add(fd(&base, &grads[t], which, h, |v| {
            probe.params[t].copy_from_slice(v);
            loss(&probe)
        }));
        probe.params[t].copy_from_slice(&base);
    }
    Ok(acc.done())
}
