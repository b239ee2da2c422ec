//! Stacked-RBM deep belief network for unsupervised feature learning:
//! contrastive-divergence pretraining layer by layer, unrolled-autoencoder
//! fine-tuning, reconstruction-error-based architecture selection, and the
//! deterministic forward pass that turns a scaled sub-epoch into features.
//!
//! Convention: for a layer with I visible and J hidden units, `w` is the J×I
//! weight matrix, `a` the hidden bias, and `b` the visible bias, so that
//! E(v,h) = −aᵀh − bᵀv − hᵀWv.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, sigmoid};

/// Largest I+J for which partition-function enumeration is allowed.
pub const MAX_ENUMERABLE_UNITS: usize = 20;

/// Clip bound (in recording standard deviations) used when mapping raw
/// amplitudes onto [0,1] visible probabilities.
pub const DEFAULT_CLIP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmLayer {
    /// Hidden × visible weights.
    pub w: Array2<f64>,
    /// Hidden bias.
    pub a: Array1<f64>,
    /// Visible bias.
    pub b: Array1<f64>,
}

impl RbmLayer {
    pub fn zeros(visible: usize, hidden: usize) -> RbmLayer {
        RbmLayer {
            w: Array2::zeros((hidden, visible)),
            a: Array1::zeros(hidden),
            b: Array1::zeros(visible),
        }
    }

    /// Weights ~ N(0, σ²) in row-major draw order, zero biases.
    pub fn random_init(visible: usize, hidden: usize, sigma: f64, rng: &mut ChaCha8Rng) -> RbmLayer {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let mut data = Vec::with_capacity(hidden * visible);
        for _ in 0..hidden * visible {
            data.push(normal.sample(rng));
        }
        RbmLayer {
            w: Array2::from_shape_vec((hidden, visible), data).expect("shape"),
            a: Array1::zeros(hidden),
            b: Array1::zeros(visible),
        }
    }

    pub fn visible_units(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_units(&self) -> usize {
        self.w.nrows()
    }

    fn check_dims(&self, v_len: usize, h_len: usize) -> Result<()> {
        if v_len != self.visible_units() {
            return Err(Error::DimensionMismatch {
                expected: self.visible_units(),
                actual: v_len,
            });
        }
        if h_len != self.hidden_units() {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_units(),
                actual: h_len,
            });
        }
        Ok(())
    }

    fn check_enumerable(&self) -> Result<()> {
        let (i, j) = (self.visible_units(), self.hidden_units());
        if i + j > MAX_ENUMERABLE_UNITS {
            return Err(Error::LayerTooLarge {
                visible: i,
                hidden: j,
                max: MAX_ENUMERABLE_UNITS,
            });
        }
        Ok(())
    }
}

/// E(v,h) = −aᵀh − bᵀv − hᵀWv.
pub fn rbm_energy(layer: &RbmLayer, v: &[f64], h: &[f64]) -> Result<f64> {
    layer.check_dims(v.len(), h.len())?;
    let v = ArrayView1::from(v);
    let h = ArrayView1::from(h);
    Ok(-layer.a.dot(&h) - layer.b.dot(&v) - h.dot(&layer.w.dot(&v)))
}

fn bit_vector(mask: u32, len: usize) -> Vec<f64> {
    (0..len).map(|i| f64::from((mask >> i) & 1)).collect()
}

/// Unnormalized marginal weight of a visible configuration,
/// m(v) = e^{bᵀv} Π_j (1 + e^{a_j + w_j·v}).
fn visible_marginal_weight(layer: &RbmLayer, v: &ArrayView1<f64>) -> f64 {
    let mut m = layer.b.dot(v).exp();
    for j in 0..layer.hidden_units() {
        m *= 1.0 + (layer.a[j] + layer.w.row(j).dot(v)).exp();
    }
    m
}

fn partition_function(layer: &RbmLayer) -> f64 {
    let i = layer.visible_units();
    let mut z = 0.0;
    for mask in 0..(1u32 << i) {
        let v = bit_vector(mask, i);
        z += visible_marginal_weight(layer, &ArrayView1::from(&v[..]));
    }
    z
}

/// P(v,h) = e^{−E(v,h)} / Z, with Z by enumeration (I+J ≤ 20).
pub fn rbm_joint_prob(layer: &RbmLayer, v: &[f64], h: &[f64]) -> Result<f64> {
    layer.check_enumerable()?;
    let e = rbm_energy(layer, v, h)?;
    Ok((-e).exp() / partition_function(layer))
}

/// p(h_j = 1 | v) = σ(w_j·v + a_j).
pub fn hidden_given_visible(layer: &RbmLayer, v: &[f64]) -> Result<Vec<f64>> {
    layer.check_dims(v.len(), layer.hidden_units())?;
    let v = ArrayView1::from(v);
    Ok((0..layer.hidden_units())
        .map(|j| sigmoid(layer.w.row(j).dot(&v) + layer.a[j]))
        .collect())
}

/// p(v_i = 1 | h) = σ(w_{·i}·h + b_i).
pub fn visible_given_hidden(layer: &RbmLayer, h: &[f64]) -> Result<Vec<f64>> {
    layer.check_dims(layer.visible_units(), h.len())?;
    let h = ArrayView1::from(h);
    Ok((0..layer.visible_units())
        .map(|i| sigmoid(layer.w.column(i).dot(&h) + layer.b[i]))
        .collect())
}

/// Gradient of the mean log-likelihood over `data` with the model expectation
/// computed exactly by enumeration. Returns (∂W, ∂a, ∂b).
pub fn exact_loglik_gradient(
    layer: &RbmLayer,
    data: &[Vec<f64>],
) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
    layer.check_enumerable()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (i_dim, j_dim) = (layer.visible_units(), layer.hidden_units());
    let mut gw = Array2::zeros((j_dim, i_dim));
    let mut ga = Array1::zeros(j_dim);
    let mut gb = Array1::zeros(i_dim);

    for v in data {
        let p_h = hidden_given_visible(layer, v)?;
        for j in 0..j_dim {
            for i in 0..i_dim {
                gw[[j, i]] += p_h[j] * v[i];
            }
            ga[j] += p_h[j];
        }
        for i in 0..i_dim {
            gb[i] += v[i];
        }
    }
    let n = data.len() as f64;
    gw /= n;
    ga /= n;
    gb /= n;

    // Model expectations: Σ_v P(v)·[σ(a+Wv) ⊗ v, σ(a+Wv), v].
    let z = partition_function(layer);
    for mask in 0..(1u32 << i_dim) {
        let v = bit_vector(mask, i_dim);
        let vv = ArrayView1::from(&v[..]);
        let p_v = visible_marginal_weight(layer, &vv) / z;
        let p_h = hidden_given_visible(layer, &v)?;
        for j in 0..j_dim {
            for i in 0..i_dim {
                gw[[j, i]] -= p_v * p_h[j] * v[i];
            }
            ga[j] -= p_v * p_h[j];
        }
        for i in 0..i_dim {
            gb[i] -= p_v * v[i];
        }
    }
    Ok((gw, ga, gb))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_epoch: usize,
    pub epochs_per_layer: usize,
    pub batch_size: usize,
    pub cd_k: usize,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum_initial: 0.5,
            momentum_final: 0.9,
            momentum_switch_epoch: 5,
            epochs_per_layer: 30,
            batch_size: 64,
            cd_k: 1,
            fine_tune_epochs: 30,
            fine_tune_lr: 0.01,
            init_sigma: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.fine_tune_lr > 0.0
            && self.init_sigma > 0.0
            && self.batch_size >= 1
            && self.cd_k >= 1
            && (0.0..1.0).contains(&self.momentum_initial)
            && (0.0..1.0).contains(&self.momentum_final);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "training hyperparameters out of range".into(),
            ))
        }
    }
}

fn hidden_probs_batch(layer: &RbmLayer, v: &ArrayView2<f64>) -> Array2<f64> {
    let mut logits = v.dot(&layer.w.t());
    logits += &layer.a;
    logits.mapv_inplace(sigmoid);
    logits
}

fn visible_probs_batch(layer: &RbmLayer, h: &ArrayView2<f64>) -> Array2<f64> {
    let mut logits = h.dot(&layer.w);
    logits += &layer.b;
    logits.mapv_inplace(sigmoid);
    logits
}

/// Draws in logical (row-major) order so the consumed random stream is
/// independent of memory layout.
fn sample_bernoulli(p: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = p.clone();
    for v in out.iter_mut() {
        *v = if rng.gen::<f64>() < *v { 1.0 } else { 0.0 };
    }
    out
}

/// Momentum buffers for one layer's CD training.
#[derive(Debug, Clone)]
pub struct Velocity {
    pub w: Array2<f64>,
    pub a: Array1<f64>,
    pub b: Array1<f64>,
}

impl Velocity {
    pub fn zeros(layer: &RbmLayer) -> Velocity {
        Velocity {
            w: Array2::zeros(layer.w.dim()),
            a: Array1::zeros(layer.a.len()),
            b: Array1::zeros(layer.b.len()),
        }
    }
}

/// One CD-k minibatch update. The data statistic uses hidden probabilities
/// given the batch; the reconstruction term runs k alternating Gibbs steps
/// with binary samples on both sides, and only the final hidden statistics
/// use probabilities. Because the hidden units are conditionally independent
/// given the visibles, closing with probabilities is an exact
/// marginalization, so the averaged update approaches the exact likelihood
/// gradient as k and the chain count grow. Updates are averaged over the
/// batch and applied with momentum.
pub fn cd_update(
    layer: &mut RbmLayer,
    batch: ArrayView2<f64>,
    cfg: &TrainConfig,
    momentum: f64,
    vel: &mut Velocity,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if batch.ncols() != layer.visible_units() {
        return Err(Error::DimensionMismatch {
            expected: layer.visible_units(),
            actual: batch.ncols(),
        });
    }
    let n = batch.nrows() as f64;
    let ph0 = hidden_probs_batch(layer, &batch);
    let mut gw = ph0.t().dot(&batch) / n;
    let mut ga = ph0.mean_axis(Axis(0)).expect("nonempty");
    let mut gb = batch.mean_axis(Axis(0)).expect("nonempty");

    let mut h = sample_bernoulli(&ph0, rng);
    let mut v = sample_bernoulli(&visible_probs_batch(layer, &h.view()), rng);
    for _ in 1..cfg.cd_k {
        h = sample_bernoulli(&hidden_probs_batch(layer, &v.view()), rng);
        v = sample_bernoulli(&visible_probs_batch(layer, &h.view()), rng);
    }
    let phk = hidden_probs_batch(layer, &v.view());
    gw -= &(phk.t().dot(&v) / n);
    ga -= &phk.mean_axis(Axis(0)).expect("nonempty");
    gb -= &v.mean_axis(Axis(0)).expect("nonempty");

    vel.w *= momentum;
    vel.w.scaled_add(cfg.learning_rate, &gw);
    vel.a *= momentum;
    vel.a.scaled_add(cfg.learning_rate, &ga);
    vel.b *= momentum;
    vel.b.scaled_add(cfg.learning_rate, &gb);
    layer.w += &vel.w;
    layer.a += &vel.a;
    layer.b += &vel.b;
    Ok(())
}

/// Hidden-layer widths, outermost first.
pub type Architecture = Vec<usize>;

pub fn validate_arch(arch: &[usize]) -> Result<()> {
    if arch.is_empty() {
        return Err(Error::InvalidArchitecture(
            format!("{arch:?}"),
            "at least one hidden layer required",
        ));
    }
    if arch.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArchitecture(
            format!("{arch:?}"),
            "hidden sizes must be strictly decreasing",
        ));
    }
    let last = *arch.last().unwrap();
    if last != 15 && last != 20 {
        return Err(Error::InvalidArchitecture(
            format!("{arch:?}"),
            "the feature layer must have 15 or 20 units",
        ));
    }
    Ok(())
}

/// The four stacked-RBM configurations evaluated by default during
/// architecture selection.
pub fn default_arch_candidates() -> Vec<Architecture> {
    vec![
        vec![300, 225, 150, 50, 40, 30, 20],
        vec![200, 150, 80, 50, 35, 25, 20],
        vec![200, 100, 50, 25, 20, 15],
        vec![150, 75, 35, 25, 20, 15],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbnModel {
    pub layers: Vec<RbmLayer>,
    /// Untied decoder weights from fine-tuning, one visible×hidden matrix per
    /// layer; absent before fine-tuning (the decoder is then the transposed
    /// encoder).
    pub decoder_w: Option<Vec<Array2<f64>>>,
    pub input_dim: usize,
    /// Input-scaling protocol: clip bound in recording standard deviations.
    pub clip_sigma: f64,
}

impl DbnModel {
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, RbmLayer::hidden_units)
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: dim,
            });
        }
        Ok(())
    }
}

/// Layer-wise CD pretraining: each layer is trained on the previous layer's
/// deterministic hidden probabilities. Fully determined by (data, arch, cfg).
pub fn train_dbn(data: ArrayView2<f64>, arch: &[usize], cfg: &TrainConfig) -> Result<DbnModel> {
    validate_arch(arch)?;
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = data.to_owned();
    let mut layers = Vec::with_capacity(arch.len());
    for &hidden in arch {
        let mut layer = RbmLayer::random_init(x.ncols(), hidden, cfg.init_sigma, &mut rng);
        let mut vel = Velocity::zeros(&layer);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for epoch in 0..cfg.epochs_per_layer {
            let momentum = if epoch < cfg.momentum_switch_epoch {
                cfg.momentum_initial
            } else {
                cfg.momentum_final
            };
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = x.select(Axis(0), chunk);
                cd_update(&mut layer, batch.view(), cfg, momentum, &mut vel, &mut rng)?;
            }
        }
        x = hidden_probs_batch(&layer, &x.view());
        layers.push(layer);
    }
    Ok(DbnModel {
        layers,
        decoder_w: None,
        input_dim: data.ncols(),
        clip_sigma: DEFAULT_CLIP_SIGMA,
    })
}

/// Activations of every encoder level, `acts[0]` being the input.
fn up_activations(layers: &[RbmLayer], data: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(data.to_owned());
    for layer in layers {
        let next = hidden_probs_batch(layer, &acts.last().unwrap().view());
        acts.push(next);
    }
    acts
}

/// Activations of every decoder level, `ys[k]` sitting at layer k's visible
/// side and `ys[L]` being the code. `dec_w[k]`, when present, replaces the
/// tied transpose of layer k's weights.
fn down_activations(
    layers: &[RbmLayer],
    dec_w: Option<&[Array2<f64>]>,
    code: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let l = layers.len();
    let mut ys: Vec<Array2<f64>> = Vec::with_capacity(l + 1);
    ys.push(code.clone());
    for k in (0..l).rev() {
        let prev = ys.last().unwrap();
        let mut logits = match dec_w {
            Some(d) => prev.dot(&d[k].t()),
            None => prev.dot(&layers[k].w),
        };
        logits += &layers[k].b;
        logits.mapv_inplace(sigmoid);
        ys.push(logits);
    }
    ys.reverse(); // ys[0] = reconstruction, ys[l] = code
    ys
}

fn mean_squared_error(a: &Array2<f64>, b: ArrayView2<f64>) -> f64 {
    let diff = a - &b;
    diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
}

/// Mean squared reconstruction error of the deterministic down-pass of the
/// deterministic up-pass (probabilities throughout, no sampling).
pub fn msre(model: &DbnModel, data: ArrayView2<f64>) -> Result<f64> {
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    model.check_input(data.ncols())?;
    let ups = up_activations(&model.layers, data);
    let ys = down_activations(&model.layers, model.decoder_w.as_deref(), ups.last().unwrap());
    Ok(mean_squared_error(&ys[0], data))
}

struct AeGrads {
    w: Vec<Array2<f64>>,
    a: Vec<Array1<f64>>,
    dw: Vec<Array2<f64>>,
    db: Vec<Array1<f64>>,
}

fn autoencoder_loss(enc: &[RbmLayer], dec: &[Array2<f64>], data: ArrayView2<f64>) -> f64 {
    let ups = up_activations(enc, data);
    let ys = down_activations(enc, Some(dec), ups.last().unwrap());
    mean_squared_error(&ys[0], data)
}

fn autoencoder_backward(
    enc: &[RbmLayer],
    dec: &[Array2<f64>],
    data: ArrayView2<f64>,
) -> (f64, AeGrads) {
    let l = enc.len();
    let zs = up_activations(enc, data);
    let ys = down_activations(enc, Some(dec), zs.last().unwrap());
    let loss = mean_squared_error(&ys[0], data);

    let scale = 2.0 / (data.nrows() as f64 * data.ncols() as f64);
    let mut g = (&ys[0] - &data) * scale;
    let mut grads = AeGrads {
        w: enc.iter().map(|ly| Array2::zeros(ly.w.dim())).collect(),
        a: enc.iter().map(|ly| Array1::zeros(ly.a.len())).collect(),
        dw: dec.iter().map(|d| Array2::zeros(d.dim())).collect(),
        db: enc.iter().map(|ly| Array1::zeros(ly.b.len())).collect(),
    };
    for k in 0..l {
        let act = &ys[k];
        let gu = &g * act * &(1.0 - act);
        grads.dw[k] = gu.t().dot(&ys[k + 1]);
        grads.db[k] = gu.sum_axis(Axis(0));
        g = gu.dot(&dec[k]);
    }
    for k in (0..l).rev() {
        let act = &zs[k + 1];
        let gu = &g * act * &(1.0 - act);
        grads.w[k] = gu.t().dot(&zs[k]);
        grads.a[k] = gu.sum_axis(Axis(0));
        g = gu.dot(&enc[k].w);
    }
    (loss, grads)
}

fn apply_step(
    enc: &[RbmLayer],
    dec: &[Array2<f64>],
    grads: &AeGrads,
    step: f64,
) -> (Vec<RbmLayer>, Vec<Array2<f64>>) {
    let enc_new = enc
        .iter()
        .enumerate()
        .map(|(k, ly)| {
            let mut n = ly.clone();
            n.w.scaled_add(-step, &grads.w[k]);
            n.a.scaled_add(-step, &grads.a[k]);
            n.b.scaled_add(-step, &grads.db[k]);
            n
        })
        .collect();
    let dec_new = dec
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut n = d.clone();
            n.scaled_add(-step, &grads.dw[k]);
            n
        })
        .collect();
    (enc_new, dec_new)
}

/// Unrolls the model into an untied autoencoder (decoder initialized with
/// transposed weights) and minimizes the reconstruction error by full-batch
/// gradient descent with a backtracking line search, which makes the returned
/// error trace non-increasing. Returns the refitted model and the trace,
/// whose first entry is the pre-fine-tuning error.
pub fn fine_tune(
    model: &DbnModel,
    data: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(DbnModel, Vec<f64>)> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    model.check_input(data.ncols())?;
    let mut trace = vec![msre(model, data)?];
    if cfg.fine_tune_epochs == 0 {
        return Ok((model.clone(), trace));
    }

    let mut enc = model.layers.clone();
    let mut dec: Vec<Array2<f64>> = model
        .decoder_w
        .clone()
        .unwrap_or_else(|| model.layers.iter().map(|ly| ly.w.t().to_owned()).collect());
    let mut lr = cfg.fine_tune_lr;
    for _ in 0..cfg.fine_tune_epochs {
        let (loss, grads) = autoencoder_backward(&enc, &dec, data);
        let mut step = lr;
        loop {
            let (enc_new, dec_new) = apply_step(&enc, &dec, &grads, step);
            let new_loss = autoencoder_loss(&enc_new, &dec_new, data);
            if new_loss <= loss {
                enc = enc_new;
                dec = dec_new;
                trace.push(new_loss);
                lr = (step * 2.0).min(cfg.fine_tune_lr);
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
        if step < 1e-14 {
            break; // no descent direction left at representable step sizes
        }
    }
    Ok((
        DbnModel {
            layers: enc,
            decoder_w: Some(dec),
            input_dim: model.input_dim,
            clip_sigma: model.clip_sigma,
        },
        trace,
    ))
}

fn ae_components(model: &DbnModel) -> (Vec<RbmLayer>, Vec<Array2<f64>>) {
    let dec = model
        .decoder_w
        .clone()
        .unwrap_or_else(|| model.layers.iter().map(|ly| ly.w.t().to_owned()).collect());
    (model.layers.clone(), dec)
}

/// Every parameter the fine-tuning pass updates, flattened: per encoder layer
/// its weight matrix (row-major), hidden bias, and reconstruction bias, then
/// each decoder matrix. [`ae_loss_at`] reads the same layout back, so the
/// pair lets callers probe the fine-tuning objective — e.g. to check
/// [`ae_gradient`] against finite differences.
pub fn ae_params(model: &DbnModel) -> Vec<f64> {
    let (enc, dec) = ae_components(model);
    let mut out = Vec::new();
    for ly in &enc {
        out.extend(ly.w.iter());
        out.extend(ly.a.iter());
        out.extend(ly.b.iter());
    }
    for d in &dec {
        out.extend(d.iter());
    }
    out
}

fn ae_unpack(model: &DbnModel, params: &[f64]) -> Result<(Vec<RbmLayer>, Vec<Array2<f64>>)> {
    let (mut enc, mut dec) = ae_components(model);
    let expected: usize = enc
        .iter()
        .map(|ly| ly.w.len() + ly.a.len() + ly.b.len())
        .sum::<usize>()
        + dec.iter().map(Array2::len).sum::<usize>();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: params.len(),
        });
    }
    let mut it = params.iter().copied();
    for ly in &mut enc {
        ly.w.iter_mut().for_each(|w| *w = it.next().unwrap());
        ly.a.iter_mut().for_each(|a| *a = it.next().unwrap());
        ly.b.iter_mut().for_each(|b| *b = it.next().unwrap());
    }
    for d in &mut dec {
        d.iter_mut().for_each(|w| *w = it.next().unwrap());
    }
    Ok((enc, dec))
}

/// Reconstruction error of the unrolled autoencoder with its parameters
/// replaced by `params` (layout of [`ae_params`]).
pub fn ae_loss_at(model: &DbnModel, params: &[f64], data: ArrayView2<f64>) -> Result<f64> {
    model.check_input(data.ncols())?;
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let (enc, dec) = ae_unpack(model, params)?;
    Ok(autoencoder_loss(&enc, &dec, data))
}

/// Reconstruction error and its gradient at the model's own parameters,
/// flattened like [`ae_params`].
pub fn ae_gradient(model: &DbnModel, data: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    model.check_input(data.ncols())?;
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let (enc, dec) = ae_components(model);
    let (loss, grads) = autoencoder_backward(&enc, &dec, data);
    let mut flat = Vec::new();
    for k in 0..enc.len() {
        flat.extend(grads.w[k].iter());
        flat.extend(grads.a[k].iter());
        flat.extend(grads.db[k].iter());
    }
    for dw in &grads.dw {
        flat.extend(dw.iter());
    }
    Ok((loss, flat))
}

/// Trains every candidate on a seeded 90% split of `data`, scores each by
/// reconstruction error on the held-out 10%, and returns the winner (ties go
/// to fewer total units) with the full table.
pub fn select_architecture(
    candidates: &[Architecture],
    data: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(Architecture, Vec<(Architecture, f64)>)> {
    for arch in candidates {
        validate_arch(arch)?;
    }
    if data.nrows() < 2 {
        return Err(Error::EmptyData);
    }
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "arch-split"));
    order.shuffle(&mut rng);
    let n_train = ((data.nrows() as f64 * 0.9).round() as usize).clamp(1, data.nrows() - 1);
    let train = data.select(Axis(0), &order[..n_train]);
    let held_out = data.select(Axis(0), &order[n_train..]);
    select_architecture_with(candidates, |arch| {
        let model = train_dbn(train.view(), arch, cfg)?;
        msre(&model, held_out.view())
    })
}

/// Architecture selection against an arbitrary scoring function; exposed so
/// the ranking rule can be exercised with fixed scores.
pub fn select_architecture_with<F>(
    candidates: &[Architecture],
    mut score: F,
) -> Result<(Architecture, Vec<(Architecture, f64)>)>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut table = Vec::with_capacity(candidates.len());
    for arch in candidates {
        table.push((arch.clone(), score(arch)?));
    }
    let best = table
        .iter()
        .min_by(|(arch_a, m_a), (arch_b, m_b)| {
            m_a.total_cmp(m_b)
                .then_with(|| arch_a.iter().sum::<usize>().cmp(&arch_b.iter().sum()))
        })
        .unwrap()
        .0
        .clone();
    Ok((best, table))
}

/// Recording-level amplitude statistics for visible-unit scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub mean: f64,
    pub std: f64,
    pub clip_sigma: f64,
}

/// Population mean/std of the whole preprocessed recording.
pub fn recording_stats(x: &[f64], clip_sigma: f64) -> ScalingStats {
    if x.is_empty() {
        return ScalingStats {
            mean: 0.0,
            std: 0.0,
            clip_sigma,
        };
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ScalingStats {
        mean,
        std: var.sqrt(),
        clip_sigma,
    }
}

/// Clips to mean ± clip_sigma·std and maps that interval affinely onto
/// [0,1]. A zero-variance recording scales to all 0.5.
pub fn scale_input(stats: &ScalingStats, samples: &[f64]) -> Vec<f64> {
    if stats.std <= 0.0 {
        return vec![0.5; samples.len()];
    }
    let lo = stats.mean - stats.clip_sigma * stats.std;
    let width = 2.0 * stats.clip_sigma * stats.std;
    samples
        .iter()
        .map(|&v| ((v - lo) / width).clamp(0.0, 1.0))
        .collect()
}

/// Deterministic forward pass through the encoder; the output has
/// `feature_dim` entries, each a conditional activation probability.
pub fn extract_unsup(model: &DbnModel, scaled: &[f64]) -> Result<Vec<f64>> {
    model.check_input(scaled.len())?;
    let mut x = Array1::from(scaled.to_vec());
    for layer in &model.layers {
        let mut logits = layer.w.dot(&x);
        logits += &layer.a;
        logits.mapv_inplace(sigmoid);
        x = logits;
    }
    Ok(x.to_vec())
}

/// Batched [`extract_unsup`] (one row per sub-epoch).
pub fn extract_unsup_batch(model: &DbnModel, scaled: ArrayView2<f64>) -> Result<Array2<f64>> {
    model.check_input(scaled.ncols())?;
    let mut x = scaled.to_owned();
    for layer in &model.layers {
        x = hidden_probs_batch(layer, &x.view());
    }
    Ok(x)
}
