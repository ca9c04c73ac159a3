//! Feed-forward networks and training loops.
//!
//! Two model kinds share one 4-layer MLP (2 hidden tanh layers):
//! - the physics-informed network maps (fingerprint, PDI) to 10 raw
//!   empirical parameters, which are sigmoid-bounded and pushed through the
//!   viscosity graph to produce log viscosity;
//! - the direct baseline maps (fingerprint, PDI, conditions) straight to
//!   log viscosity.
//!
//! Training is plain Adam with reduce-on-plateau learning-rate scheduling,
//! early stopping, and best-validation-epoch weight selection, fully
//! deterministic under the config seed.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ScaledSample, ScalingSpec};
use crate::physics::{
    bound_params_with_grad, log_eta, log_eta_with_grad_guarded, EmpiricalParams,
    PhysicalConditions, PhysicsError, N_RAW,
};

/// Admissible hidden-layer widths.
pub const LAYER_SIZES: [usize; 4] = [64, 128, 256, 512];
/// Admissible dropout rates.
pub const DROPOUTS: [f64; 6] = [0.0, 0.01, 0.015, 0.02, 0.025, 0.03];
/// Admissible weight-decay strengths.
pub const WEIGHT_DECAYS: [f64; 5] = [1e-5, 5e-5, 1e-4, 5e-4, 1e-3];
/// Admissible slope-penalty weights (physics-informed kind only).
pub const W_ALPHAS: [f64; 5] = [0.001, 0.005, 0.01, 0.03, 0.05];

/// Default initial learning rates per kind.
pub const PENN_LR: f64 = 1e-4;
pub const ANN_LR: f64 = 1e-3;

/// Epochs without validation improvement before the LR is halved.
pub const LR_PATIENCE: usize = 20;
/// Epochs without validation improvement before training stops.
pub const STOP_PATIENCE: usize = 25;

/// Smooth floor applied to the WLF denominator during training only.
pub const TRAIN_WLF_FLOOR: f64 = 0.05;

/// Target slopes for the physics penalty.
const ALPHA1_TARGET: f64 = 1.0;
const ALPHA2_TARGET: f64 = 3.4;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {got} does not match model width {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch} (lr {lr:.3e}); check scaling and learning rate")]
    NonFiniteLoss { epoch: usize, lr: f64 },
    #[error("{n} samples cannot populate {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("hyperparameter grid has an empty axis")]
    EmptyGrid,
    #[error("operation requires a {expected:?} model")]
    WrongKind { expected: ModelKind },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "PENN")]
    Penn,
    #[serde(rename = "ANN")]
    Ann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer1_size: usize,
    pub layer1_dropout: f64,
    pub layer2_size: usize,
    pub layer2_dropout: f64,
    pub weight_decay: f64,
    /// Slope-penalty weight; ignored by the direct baseline.
    pub w_alpha: f64,
    pub initial_lr: f64,
    pub seed: u64,
}

impl MlpConfig {
    pub fn default_for(kind: ModelKind, seed: u64) -> Self {
        MlpConfig {
            layer1_size: 128,
            layer1_dropout: 0.01,
            layer2_size: 128,
            layer2_dropout: 0.01,
            weight_decay: 1e-4,
            w_alpha: 0.01,
            initial_lr: match kind {
                ModelKind::Penn => PENN_LR,
                ModelKind::Ann => ANN_LR,
            },
            seed,
        }
    }

    /// Whether every field lies on the search grid.
    pub fn on_grid(&self) -> bool {
        let close = |xs: &[f64], v: f64| xs.iter().any(|&x| (x - v).abs() < 1e-12);
        LAYER_SIZES.contains(&self.layer1_size)
            && LAYER_SIZES.contains(&self.layer2_size)
            && close(&DROPOUTS, self.layer1_dropout)
            && close(&DROPOUTS, self.layer2_dropout)
            && close(&WEIGHT_DECAYS, self.weight_decay)
            && close(&W_ALPHAS, self.w_alpha)
    }
}

// ---------------------------------------------------------------------------
// the MLP

/// Dense 4-layer perceptron (input, two tanh hidden layers, linear output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MlpDoc", into = "MlpDoc")]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Serialization mirror: explicit dims plus row-major data.
#[derive(Serialize, Deserialize, Clone)]
struct MlpDoc {
    dims: [usize; 4],
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
}

impl From<Mlp> for MlpDoc {
    fn from(m: Mlp) -> Self {
        MlpDoc {
            dims: [m.w1.nrows(), m.w1.ncols(), m.w2.ncols(), m.w3.ncols()],
            w1: m.w1.iter().copied().collect(),
            b1: m.b1.to_vec(),
            w2: m.w2.iter().copied().collect(),
            b2: m.b2.to_vec(),
            w3: m.w3.iter().copied().collect(),
            b3: m.b3.to_vec(),
        }
    }
}

impl From<MlpDoc> for Mlp {
    fn from(d: MlpDoc) -> Self {
        let [i, h1, h2, o] = d.dims;
        Mlp {
            w1: Array2::from_shape_vec((i, h1), d.w1).expect("w1 dims"),
            b1: Array1::from_vec(d.b1),
            w2: Array2::from_shape_vec((h1, h2), d.w2).expect("w2 dims"),
            b2: Array1::from_vec(d.b2),
            w3: Array2::from_shape_vec((h2, o), d.w3).expect("w3 dims"),
            b3: Array1::from_vec(d.b3),
        }
    }
}

/// Activations cached by a training-mode forward pass.
struct ForwardCache {
    /// tanh outputs before dropout.
    a1: Array2<f64>,
    a2: Array2<f64>,
    /// inverted-dropout masks (all-ones at inference).
    m1: Array2<f64>,
    m2: Array2<f64>,
    /// post-dropout hidden activations.
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl Mlp {
    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.w3.ncols()
    }

    /// Uniform fan-in initialization under the given rng.
    pub fn init(input: usize, h1: usize, h2: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut dense = |rows: usize, cols: usize| {
            let bound = (1.0 / rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let w1 = dense(input, h1);
        let w2 = dense(h1, h2);
        let w3 = dense(h2, output);
        Mlp {
            w1,
            b1: Array1::zeros(h1),
            w2,
            b2: Array1::zeros(h2),
            w3,
            b3: Array1::zeros(output),
        }
    }

    fn forward_cached(
        &self,
        x: &Array2<f64>,
        dropout: Option<(&mut ChaCha8Rng, f64, f64)>,
    ) -> ForwardCache {
        let z1 = x.dot(&self.w1) + &self.b1;
        let a1 = z1.mapv(f64::tanh);
        let (m1, m2) = match dropout {
            Some((rng, d1, d2)) => {
                let mask = |rng: &mut ChaCha8Rng, rate: f64, shape: (usize, usize)| {
                    if rate == 0.0 {
                        Array2::ones(shape)
                    } else {
                        Array2::from_shape_fn(shape, |_| {
                            if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) }
                        })
                    }
                };
                let m1 = mask(rng, d1, (x.nrows(), self.w1.ncols()));
                let m2 = mask(rng, d2, (x.nrows(), self.w2.ncols()));
                (m1, m2)
            }
            None => (
                Array2::ones((x.nrows(), self.w1.ncols())),
                Array2::ones((x.nrows(), self.w2.ncols())),
            ),
        };
        let h1 = &a1 * &m1;
        let z2 = h1.dot(&self.w2) + &self.b2;
        let a2 = z2.mapv(f64::tanh);
        let h2 = &a2 * &m2;
        let out = h2.dot(&self.w3) + &self.b3;
        ForwardCache { a1, a2, m1, m2, h1, h2, out }
    }

    /// Inference-mode batch forward (no dropout).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x, None).out
    }

    /// Backpropagates `d_out = dL/d out` through the cached pass, returning
    /// gradients in the same layout as the weights.
    fn backward(&self, x: &Array2<f64>, cache: &ForwardCache, d_out: &Array2<f64>) -> MlpGrads {
        let gw3 = cache.h2.t().dot(d_out);
        let gb3 = d_out.sum_axis(Axis(0));
        let d_h2 = d_out.dot(&self.w3.t());
        let d_z2 = d_h2 * &cache.m2 * cache.a2.mapv(|a| 1.0 - a * a);
        let gw2 = cache.h1.t().dot(&d_z2);
        let gb2 = d_z2.sum_axis(Axis(0));
        let d_h1 = d_z2.dot(&self.w2.t());
        let d_z1 = d_h1 * &cache.m1 * cache.a1.mapv(|a| 1.0 - a * a);
        let gw1 = x.t().dot(&d_z1);
        let gb1 = d_z1.sum_axis(Axis(0));
        MlpGrads { w1: gw1, b1: gb1, w2: gw2, b2: gb2, w3: gw3, b3: gb3 }
    }
}

struct MlpGrads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

// ---------------------------------------------------------------------------
// trained model and forward operations

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub mlp: Mlp,
    pub config: MlpConfig,
    pub scaling: ScalingSpec,
    pub training_log: Vec<EpochStats>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String, NnError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Scaled log viscosity at scaled conditions, dispatching on kind.
    pub fn predict_scaled(
        &self,
        fingerprint: &[f64],
        pdi: f64,
        cond: &PhysicalConditions,
    ) -> Result<f64, NnError> {
        match self.kind {
            ModelKind::Penn => Ok(penn_forward(fingerprint, pdi, cond, self)?.0),
            ModelKind::Ann => ann_forward(fingerprint, pdi, cond, self),
        }
    }
}

fn single_row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Physics-informed forward pass: network → raw parameters → bounded
/// parameters → viscosity graph. Deterministic (no dropout at inference).
pub fn penn_forward(
    fingerprint: &[f64],
    pdi: f64,
    cond: &PhysicalConditions,
    model: &TrainedModel,
) -> Result<(f64, EmpiricalParams), NnError> {
    if model.kind != ModelKind::Penn {
        return Err(NnError::WrongKind { expected: ModelKind::Penn });
    }
    let expected = model.mlp.input_width();
    if fingerprint.len() + 1 != expected {
        return Err(NnError::DimensionMismatch { expected, got: fingerprint.len() + 1 });
    }
    let mut input = fingerprint.to_vec();
    input.push(pdi);
    let raw = model.mlp.forward(&single_row(&input));
    let params = crate::physics::bound_params(raw.row(0).as_slice().expect("contiguous"));
    let value = log_eta(cond, &params)?;
    Ok((value, params))
}

/// Direct baseline forward pass: network maps (fingerprint, PDI,
/// conditions) straight to scaled log viscosity.
pub fn ann_forward(
    fingerprint: &[f64],
    pdi: f64,
    cond: &PhysicalConditions,
    model: &TrainedModel,
) -> Result<f64, NnError> {
    if model.kind != ModelKind::Ann {
        return Err(NnError::WrongKind { expected: ModelKind::Ann });
    }
    let expected = model.mlp.input_width();
    if fingerprint.len() + 4 != expected {
        return Err(NnError::DimensionMismatch { expected, got: fingerprint.len() + 4 });
    }
    let mut input = fingerprint.to_vec();
    input.extend_from_slice(&[pdi, cond.log_mw, cond.t, cond.log_g]);
    let out = model.mlp.forward(&single_row(&input));
    Ok(out[[0, 0]])
}

// ---------------------------------------------------------------------------
// losses

/// Physics-informed training loss: viscosity MSE plus the weighted slope
/// penalty pulling alpha1 toward 1 and alpha2 toward 3.4.
pub fn loss_penn(
    predictions: &[f64],
    params: &[EmpiricalParams],
    targets: &[f64],
    w_alpha: f64,
) -> Result<f64, NnError> {
    if predictions.is_empty() || predictions.len() != targets.len() || params.len() != targets.len()
    {
        return Err(NnError::EmptyBatch);
    }
    let n = predictions.len() as f64;
    let mse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let penalty: f64 = params
        .iter()
        .map(|p| {
            let d1 = p.alpha1 - ALPHA1_TARGET;
            let d2 = p.alpha2 - ALPHA2_TARGET;
            w_alpha * (d1 * d1 + d2 * d2)
        })
        .sum::<f64>()
        / n;
    Ok(mse + penalty)
}

// ---------------------------------------------------------------------------
// dataset preparation

struct Prepared {
    x: Array2<f64>,
    conds: Vec<PhysicalConditions>,
    y: Vec<f64>,
}

fn prepare(samples: &[ScaledSample], kind: ModelKind) -> Result<Prepared, NnError> {
    if samples.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let fp_w = samples[0].fingerprint.len();
    let width = match kind {
        ModelKind::Penn => fp_w + 1,
        ModelKind::Ann => fp_w + 4,
    };
    let mut x = Array2::zeros((samples.len(), width));
    let mut conds = Vec::with_capacity(samples.len());
    let mut y = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.fingerprint.len() != fp_w {
            return Err(NnError::DimensionMismatch { expected: fp_w, got: s.fingerprint.len() });
        }
        for (j, &v) in s.fingerprint.iter().enumerate() {
            x[[i, j]] = v;
        }
        x[[i, fp_w]] = s.pdi;
        if kind == ModelKind::Ann {
            x[[i, fp_w + 1]] = s.cond.log_mw;
            x[[i, fp_w + 2]] = s.cond.t;
            x[[i, fp_w + 3]] = s.cond.log_g;
        }
        conds.push(s.cond);
        y.push(s.log_eta);
    }
    Ok(Prepared { x, conds, y })
}

/// Loss and output-layer gradient of one training batch.
fn batch_loss_and_dout(
    kind: ModelKind,
    out: &Array2<f64>,
    conds: &[PhysicalConditions],
    y: &[f64],
    w_alpha: f64,
) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    match kind {
        ModelKind::Ann => {
            for i in 0..y.len() {
                let err = out[[i, 0]] - y[i];
                loss += err * err / n;
                d_out[[i, 0]] = 2.0 * err / n;
            }
        }
        ModelKind::Penn => {
            for i in 0..y.len() {
                let raw: Vec<f64> = out.row(i).to_vec();
                let (params, bg) = bound_params_with_grad(&raw);
                let (pred, gp, _) = log_eta_with_grad_guarded(&conds[i], &params, TRAIN_WLF_FLOOR);
                let err = pred - y[i];
                let d1 = params.alpha1 - ALPHA1_TARGET;
                let d2 = params.alpha2 - ALPHA2_TARGET;
                loss += (err * err + w_alpha * (d1 * d1 + d2 * d2)) / n;
                for j in 0..N_RAW {
                    d_out[[i, j]] = 2.0 * err * gp[j] * bg[j] / n;
                }
                d_out[[i, 1]] += 2.0 * w_alpha * d1 * bg[1] / n;
                d_out[[i, 2]] += 2.0 * w_alpha * d2 * bg[2] / n;
            }
        }
    }
    (loss, d_out)
}

/// Dropout-free batch loss and its analytic weight/bias gradients, packed in
/// an `Mlp` of matching shapes. Includes the slope penalty for the
/// parameter-predicting kind; excludes weight decay. Intended for gradient
/// verification against finite differences.
pub fn batch_loss_gradients(
    mlp: &Mlp,
    samples: &[ScaledSample],
    kind: ModelKind,
    w_alpha: f64,
) -> Result<(f64, Mlp), NnError> {
    let p = prepare(samples, kind)?;
    if p.x.ncols() != mlp.input_width() {
        return Err(NnError::DimensionMismatch { expected: mlp.input_width(), got: p.x.ncols() });
    }
    let cache = mlp.forward_cached(&p.x, None);
    let (loss, d_out) = batch_loss_and_dout(kind, &cache.out, &p.conds, &p.y, w_alpha);
    let g = mlp.backward(&p.x, &cache, &d_out);
    Ok((loss, Mlp { w1: g.w1, b1: g.b1, w2: g.w2, b2: g.b2, w3: g.w3, b3: g.b3 }))
}

/// Viscosity-only mean squared error of a prepared set (model selection and
/// validation metric; excludes the slope penalty).
fn viscosity_mse(kind: ModelKind, mlp: &Mlp, p: &Prepared) -> f64 {
    let out = mlp.forward(&p.x);
    let n = p.y.len() as f64;
    match kind {
        ModelKind::Ann => p
            .y
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let e = out[[i, 0]] - t;
                e * e
            })
            .sum::<f64>()
            / n,
        ModelKind::Penn => p
            .y
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let raw: Vec<f64> = out.row(i).to_vec();
                let (params, _) = bound_params_with_grad(&raw);
                let (pred, _, _) = log_eta_with_grad_guarded(&p.conds[i], &params, TRAIN_WLF_FLOOR);
                let e = pred - t;
                e * e
            })
            .sum::<f64>()
            / n,
    }
}

// ---------------------------------------------------------------------------
// Adam training

struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
    t: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(mlp: &Mlp) -> Self {
        let zero2 = |w: &Array2<f64>| Array2::zeros(w.raw_dim());
        let zero1 = |b: &Array1<f64>| Array1::zeros(b.raw_dim());
        AdamState {
            m: vec![zero2(&mlp.w1), zero2(&mlp.w2), zero2(&mlp.w3)],
            v: vec![zero2(&mlp.w1), zero2(&mlp.w2), zero2(&mlp.w3)],
            mb: vec![zero1(&mlp.b1), zero1(&mlp.b2), zero1(&mlp.b3)],
            vb: vec![zero1(&mlp.b1), zero1(&mlp.b2), zero1(&mlp.b3)],
            t: 0,
        }
    }

    fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let weights: [(&mut Array2<f64>, &Array2<f64>); 3] = [
            (&mut mlp.w1, &grads.w1),
            (&mut mlp.w2, &grads.w2),
            (&mut mlp.w3, &grads.w3),
        ];
        for (k, (w, g)) in weights.into_iter().enumerate() {
            // coupled L2 weight decay folded into the gradient
            let g = g + &w.mapv(|x| weight_decay * x);
            self.m[k] = BETA1 * &self.m[k] + (1.0 - BETA1) * &g;
            self.v[k] = BETA2 * &self.v[k] + (1.0 - BETA2) * &g.mapv(|x| x * x);
            let update = &self.m[k] / bc1 / ((&self.v[k] / bc2).mapv(f64::sqrt) + ADAM_EPS);
            *w -= &(lr * update);
        }
        let biases: [(&mut Array1<f64>, &Array1<f64>); 3] = [
            (&mut mlp.b1, &grads.b1),
            (&mut mlp.b2, &grads.b2),
            (&mut mlp.b3, &grads.b3),
        ];
        for (k, (b, g)) in biases.into_iter().enumerate() {
            self.mb[k] = BETA1 * &self.mb[k] + (1.0 - BETA1) * g;
            self.vb[k] = BETA2 * &self.vb[k] + (1.0 - BETA2) * &g.mapv(|x| x * x);
            let update = &self.mb[k] / bc1 / ((&self.vb[k] / bc2).mapv(f64::sqrt) + ADAM_EPS);
            *b -= &(lr * update);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { max_epochs: 500, batch_size: 64 }
    }
}

/// Trains one model on pre-scaled, disjoint train/validation subsets.
/// Returns the weights from the best-validation epoch. Deterministic given
/// `config.seed`.
pub fn train(
    train_set: &[ScaledSample],
    val_set: &[ScaledSample],
    config: &MlpConfig,
    kind: ModelKind,
    scaling: &ScalingSpec,
    opts: &TrainOptions,
) -> Result<TrainedModel, NnError> {
    let tr = prepare(train_set, kind)?;
    let va = prepare(val_set, kind)?;
    let out_width = match kind {
        ModelKind::Penn => N_RAW,
        ModelKind::Ann => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mlp = Mlp::init(
        tr.x.ncols(),
        config.layer1_size,
        config.layer2_size,
        out_width,
        &mut rng,
    );
    let mut adam = AdamState::new(&mlp);
    let mut lr = config.initial_lr;
    let mut best_val = f64::INFINITY;
    let mut best_mlp = mlp.clone();
    let mut since_improve = 0usize;
    let mut training_log = Vec::new();
    let n = tr.y.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let bx = tr.x.select(Axis(0), chunk);
            let bc: Vec<PhysicalConditions> = chunk.iter().map(|&i| tr.conds[i]).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| tr.y[i]).collect();
            let cache = mlp.forward_cached(
                &bx,
                Some((&mut rng, config.layer1_dropout, config.layer2_dropout)),
            );
            let (loss, d_out) = batch_loss_and_dout(kind, &cache.out, &bc, &by, config.w_alpha);
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, lr });
            }
            let grads = mlp.backward(&bx, &cache, &d_out);
            adam.step(&mut mlp, &grads, lr, config.weight_decay);
            epoch_loss += loss;
            batches += 1.0;
        }
        let val_loss = viscosity_mse(kind, &mlp, &va);
        if !val_loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch, lr });
        }
        training_log.push(EpochStats { epoch, train_loss: epoch_loss / batches, val_loss, lr });
        if val_loss < best_val {
            best_val = val_loss;
            best_mlp = mlp.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve % LR_PATIENCE == 0 {
                lr *= 0.5;
            }
            if since_improve >= STOP_PATIENCE {
                break;
            }
        }
    }

    Ok(TrainedModel {
        kind,
        mlp: best_mlp,
        config: config.clone(),
        scaling: scaling.clone(),
        training_log,
    })
}

// ---------------------------------------------------------------------------
// cross-validation

/// Disjoint fold index sets from a uniform shuffle under `seed`; sizes
/// differ by at most one.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds
}

/// k-fold cross-validation; returns the held-out viscosity MSE of each fold.
pub fn cross_validate(
    dataset: &[ScaledSample],
    config: &MlpConfig,
    kind: ModelKind,
    k: usize,
    scaling: &ScalingSpec,
    opts: &TrainOptions,
) -> Result<Vec<f64>, NnError> {
    if k < 2 || dataset.len() < k {
        return Err(NnError::TooFewSamples { n: dataset.len(), k });
    }
    let folds = fold_indices(dataset.len(), k, config.seed);
    let mut losses = Vec::with_capacity(k);
    for fold in &folds {
        let in_fold: Vec<bool> = {
            let mut mask = vec![false; dataset.len()];
            for &i in fold {
                mask[i] = true;
            }
            mask
        };
        let train_set: Vec<ScaledSample> = dataset
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_fold[*i])
            .map(|(_, s)| s.clone())
            .collect();
        let val_set: Vec<ScaledSample> =
            fold.iter().map(|&i| dataset[i].clone()).collect();
        let model = train(&train_set, &val_set, config, kind, scaling, opts)?;
        let va = prepare(&val_set, kind)?;
        losses.push(viscosity_mse(kind, &model.mlp, &va));
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// hyperparameter search

#[derive(Debug, Clone)]
pub struct SearchGrid {
    pub layer_sizes: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub w_alphas: Vec<f64>,
    pub initial_lrs: Vec<f64>,
}

impl SearchGrid {
    pub fn standard(kind: ModelKind) -> Self {
        SearchGrid {
            layer_sizes: LAYER_SIZES.to_vec(),
            dropouts: DROPOUTS.to_vec(),
            weight_decays: WEIGHT_DECAYS.to_vec(),
            w_alphas: match kind {
                ModelKind::Penn => W_ALPHAS.to_vec(),
                ModelKind::Ann => vec![0.0],
            },
            initial_lrs: vec![match kind {
                ModelKind::Penn => PENN_LR,
                ModelKind::Ann => ANN_LR,
            }],
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, seed: u64) -> MlpConfig {
        let pick_usize = |rng: &mut ChaCha8Rng, xs: &[usize]| xs[rng.gen_range(0..xs.len())];
        let pick = |rng: &mut ChaCha8Rng, xs: &[f64]| xs[rng.gen_range(0..xs.len())];
        MlpConfig {
            layer1_size: pick_usize(rng, &self.layer_sizes),
            layer1_dropout: pick(rng, &self.dropouts),
            layer2_size: pick_usize(rng, &self.layer_sizes),
            layer2_dropout: pick(rng, &self.dropouts),
            weight_decay: pick(rng, &self.weight_decays),
            w_alpha: pick(rng, &self.w_alphas),
            initial_lr: pick(rng, &self.initial_lrs),
            seed,
        }
    }
}

/// Survivor counts of the successive-halving schedule starting from `m`
/// sampled configurations: keep ceil(m/3) per rung down to a single one.
pub fn halving_schedule(m: usize) -> Vec<usize> {
    let mut counts = vec![m];
    let mut cur = m;
    while cur > 1 {
        cur = cur.div_ceil(3);
        counts.push(cur);
    }
    counts
}

/// Successive-halving hyperparameter search: `budget` configs sampled
/// uniformly from the grid, each rung trains survivors with a tripled epoch
/// budget and keeps the best third by held-out viscosity loss; the final
/// survivor set is ranked by k-fold cross-validation.
pub fn hyperparameter_search(
    dataset: &[ScaledSample],
    scaling: &ScalingSpec,
    kind: ModelKind,
    grid: &SearchGrid,
    budget: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<MlpConfig, NnError> {
    if grid.layer_sizes.is_empty()
        || grid.dropouts.is_empty()
        || grid.weight_decays.is_empty()
        || grid.w_alphas.is_empty()
        || grid.initial_lrs.is_empty()
        || budget == 0
    {
        return Err(NnError::EmptyGrid);
    }
    if dataset.len() < 10 {
        return Err(NnError::TooFewSamples { n: dataset.len(), k: 10 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<MlpConfig> =
        (0..budget).map(|_| grid.sample(&mut rng, seed)).collect();
    if candidates.len() == 1 {
        return Ok(candidates.pop().expect("one candidate"));
    }

    // fixed 80/20 rung split
    let folds = fold_indices(dataset.len(), 5, seed);
    let val_set: Vec<ScaledSample> = folds[0].iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Vec<ScaledSample> = folds[1..]
        .iter()
        .flatten()
        .map(|&i| dataset[i].clone())
        .collect();

    let mut rung_epochs = 8usize.min(opts.max_epochs.max(1));
    while candidates.len() > 1 {
        let rung_opts = TrainOptions { max_epochs: rung_epochs, batch_size: opts.batch_size };
        let mut scored: Vec<(f64, MlpConfig)> = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let model = train(&train_set, &val_set, c, kind, scaling, &rung_opts)?;
            let best = model
                .training_log
                .iter()
                .map(|e| e.val_loss)
                .fold(f64::INFINITY, f64::min);
            scored.push((best, c.clone()));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite losses"));
        let keep = candidates.len().div_ceil(3);
        candidates = scored.into_iter().take(keep).map(|(_, c)| c).collect();
        rung_epochs = (rung_epochs * 3).min(opts.max_epochs.max(1));
        if candidates.len() <= 3 {
            break;
        }
    }

    if candidates.len() == 1 {
        return Ok(candidates.pop().expect("one candidate"));
    }
    // final ranking by cross-validated viscosity loss
    let mut best: Option<(f64, MlpConfig)> = None;
    for c in candidates {
        let losses = cross_validate(dataset, &c, kind, 10, scaling, opts)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if best.as_ref().map_or(true, |(b, _)| mean < *b) {
            best = Some((mean, c));
        }
    }
    Ok(best.expect("non-empty candidates").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Affine;
    use crate::physics::{bound_params, PARAM_BOUNDS};
    use approx::assert_abs_diff_eq;

    fn unit_scaling(fp_width: usize) -> ScalingSpec {
        ScalingSpec {
            fingerprint: vec![Affine { min: -1.0, max: 1.0 }; fp_width],
            pdi: Affine { min: -1.0, max: 1.0 },
            temp: Affine { min: -1.0, max: 1.0 },
            log_eta: Affine { min: -1.0, max: 1.0 },
        }
    }

    fn zero_mlp(input: usize, h1: usize, h2: usize, out: usize) -> Mlp {
        Mlp {
            w1: Array2::zeros((input, h1)),
            b1: Array1::zeros(h1),
            w2: Array2::zeros((h1, h2)),
            b2: Array1::zeros(h2),
            w3: Array2::zeros((h2, out)),
            b3: Array1::zeros(out),
        }
    }

    fn model_of(mlp: Mlp, kind: ModelKind, fp_width: usize) -> TrainedModel {
        TrainedModel {
            kind,
            mlp,
            config: MlpConfig::default_for(kind, 0),
            scaling: unit_scaling(fp_width),
            training_log: Vec::new(),
        }
    }

    fn cond() -> PhysicalConditions {
        PhysicalConditions { log_mw: 0.3, t: 0.2, log_g: -0.4 }
    }

    #[test]
    fn penn_forward_zero_weights_gives_midpoint_params() {
        let fp = vec![0.25; 7];
        let model = model_of(zero_mlp(8, 16, 16, N_RAW), ModelKind::Penn, 7);
        let (v, p) = penn_forward(&fp, 0.1, &cond(), &model).unwrap();
        for (i, &(lo, hi)) in PARAM_BOUNDS.iter().enumerate() {
            assert_abs_diff_eq!(p.to_array()[i], (lo + hi) / 2.0, epsilon = 1e-12);
        }
        assert_eq!(v, log_eta(&cond(), &p).unwrap());

        let (v2, p2) = penn_forward(&fp, 0.1, &cond(), &model).unwrap();
        assert_eq!(v, v2);
        assert_eq!(p, p2);
    }

    #[test]
    fn penn_forward_matches_composed_oracles() {
        // hand-set weights producing a known raw vector: zero w's, bias b3
        let raw = [0.3, -0.5, 1.2, 0.0, -2.0, 0.7, 0.1, -0.9, 2.5, -1.1];
        let mut mlp = zero_mlp(4, 8, 8, N_RAW);
        mlp.b3 = Array1::from_vec(raw.to_vec());
        let model = model_of(mlp, ModelKind::Penn, 3);
        let (v, p) = penn_forward(&[0.1, 0.2, 0.3], 0.0, &cond(), &model).unwrap();
        let expect_p = bound_params(&raw);
        assert_eq!(p, expect_p);
        assert_abs_diff_eq!(v, log_eta(&cond(), &expect_p).unwrap(), epsilon = 1e-15);
        assert!(p.in_scaled_bounds());
    }

    #[test]
    fn penn_forward_dimension_mismatch() {
        let model = model_of(zero_mlp(8, 4, 4, N_RAW), ModelKind::Penn, 7);
        assert!(matches!(
            penn_forward(&[0.0; 3], 0.0, &cond(), &model),
            Err(NnError::DimensionMismatch { expected: 8, got: 4 })
        ));
    }

    #[test]
    fn ann_forward_zero_weights_and_linear_map() {
        let model = model_of(zero_mlp(7, 4, 4, 1), ModelKind::Ann, 3);
        assert_eq!(ann_forward(&[0.5, 0.5, 0.5], 0.2, &cond(), &model).unwrap(), 0.0);

        // near-identity tanh trick: tiny gains through the hidden layers,
        // compensated at the output, approximate the linear map a . x
        let d = 1e-4;
        let a = [0.7, -1.3, 0.4, 0.9, 0.25, -0.6, 1.1];
        let mut mlp = zero_mlp(7, 7, 7, 1);
        for i in 0..7 {
            mlp.w1[[i, i]] = d;
            mlp.w2[[i, i]] = d;
            mlp.w3[[i, 0]] = a[i] / (d * d);
        }
        let model = model_of(mlp, ModelKind::Ann, 3);
        let fp = [0.3, -0.2, 0.15];
        let c = cond();
        let x = [fp[0], fp[1], fp[2], 0.4, c.log_mw, c.t, c.log_g];
        let oracle: f64 = a.iter().zip(x.iter()).map(|(ai, xi)| ai * xi).sum();
        let got = ann_forward(&fp, 0.4, &c, &model).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-6);
    }

    #[test]
    fn loss_penn_examples() {
        let ideal = EmpiricalParams {
            alpha1: 1.0,
            alpha2: 3.4,
            ..bound_params(&[0.0; N_RAW])
        };
        assert_eq!(loss_penn(&[1.0, 2.0], &[ideal, ideal], &[1.0, 2.0], 5.0).unwrap(), 0.0);

        let off = EmpiricalParams { alpha1: 1.5, alpha2: 3.0, ..ideal };
        let mse_only = loss_penn(&[1.0, 0.0], &[off, off], &[0.5, 0.5], 0.0).unwrap();
        assert_abs_diff_eq!(mse_only, (0.25 + 0.25) / 2.0, epsilon = 1e-15);

        // n=2 hand value: mse = (0.25+0.25)/2 = 0.25,
        // penalty = 2 * [2*(0.25+0.16)]/2 = 0.82
        let hand = loss_penn(&[1.0, 0.0], &[off, off], &[0.5, 0.5], 2.0).unwrap();
        assert_abs_diff_eq!(hand, 0.25 + 2.0 * (0.25 + 0.16), epsilon = 1e-12);

        assert!(matches!(loss_penn(&[], &[], &[], 1.0), Err(NnError::EmptyBatch)));
    }

    fn toy_samples(n: usize, seed: u64, fp_width: usize) -> Vec<ScaledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let fingerprint: Vec<f64> =
                    (0..fp_width).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let cond = PhysicalConditions {
                    log_mw: rng.gen_range(-0.9..0.9),
                    t: rng.gen_range(-0.5..0.9),
                    log_g: rng.gen_range(-0.9..0.9),
                };
                let log_eta = 0.3 * fingerprint[0] - 0.2 * cond.t + 0.1 * cond.log_mw;
                ScaledSample { fingerprint, pdi: rng.gen_range(-0.5..0.5), cond, log_eta }
            })
            .collect()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        // 16-sample batch, both kinds, every weight and bias
        for kind in [ModelKind::Ann, ModelKind::Penn] {
            let samples = toy_samples(16, 9, 3);
            let p = prepare(&samples, kind).unwrap();
            let out_w = if kind == ModelKind::Penn { N_RAW } else { 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mlp = Mlp::init(p.x.ncols(), 6, 5, out_w, &mut rng);
            let w_alpha = 0.02;

            let loss_of = |m: &Mlp| {
                let out = m.forward(&p.x);
                batch_loss_and_dout(kind, &out, &p.conds, &p.y, w_alpha).0
            };
            let cache = mlp.forward_cached(&p.x, None);
            let (_, d_out) = batch_loss_and_dout(kind, &cache.out, &p.conds, &p.y, w_alpha);
            let grads = mlp.backward(&p.x, &cache, &d_out);

            let h = 1e-4;
            let check = |name: &str, analytic: f64, mut bump: Box<dyn FnMut(&mut Mlp, f64)>| {
                let mut up = mlp.clone();
                bump(&mut up, h);
                let mut dn = mlp.clone();
                bump(&mut dn, -h);
                let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() / scale < 1e-3,
                    "{kind:?} {name}: analytic {analytic} vs fd {fd}"
                );
            };

            for (r, c) in [(0usize, 0usize), (2, 3), (3, 1)] {
                check(
                    "w1",
                    grads.w1[[r, c]],
                    Box::new(move |m: &mut Mlp, e: f64| m.w1[[r, c]] += e),
                );
            }
            for (r, c) in [(0usize, 0usize), (2, 3), (5, 1)] {
                check(
                    "w2",
                    grads.w2[[r, c]],
                    Box::new(move |m: &mut Mlp, e: f64| m.w2[[r, c]] += e),
                );
            }
            for c in 0..out_w.min(4) {
                check(
                    "w3",
                    grads.w3[[1, c]],
                    Box::new(move |m: &mut Mlp, e: f64| m.w3[[1, c]] += e),
                );
                check(
                    "b3",
                    grads.b3[c],
                    Box::new(move |m: &mut Mlp, e: f64| m.b3[c] += e),
                );
            }
            check("b1", grads.b1[2], Box::new(|m: &mut Mlp, e: f64| m.b1[2] += e));
            check("b2", grads.b2[0], Box::new(|m: &mut Mlp, e: f64| m.b2[0] += e));
        }
    }

    #[test]
    fn train_converges_on_quadratic_toy() {
        // all-zero inputs reduce the loss to (out - c)^2: a quadratic in the
        // single effective parameter, with closed-form optimum out = c
        let target = 0.7;
        let samples: Vec<ScaledSample> = (0..8)
            .map(|_| ScaledSample {
                fingerprint: vec![0.0; 3],
                pdi: 0.0,
                cond: PhysicalConditions { log_mw: 0.0, t: 0.0, log_g: 0.0 },
                log_eta: target,
            })
            .collect();
        let config = MlpConfig {
            layer1_size: 8,
            layer1_dropout: 0.0,
            layer2_size: 8,
            layer2_dropout: 0.0,
            weight_decay: 0.0,
            w_alpha: 0.0,
            initial_lr: 0.05,
            seed: 1,
        };
        let opts = TrainOptions { max_epochs: 800, batch_size: 8 };
        let model = train(&samples, &samples, &config, ModelKind::Ann, &unit_scaling(3), &opts)
            .unwrap();
        let got = ann_forward(
            &[0.0; 3],
            0.0,
            &PhysicalConditions { log_mw: 0.0, t: 0.0, log_g: 0.0 },
            &model,
        )
        .unwrap();
        assert!((got - target).abs() < 1e-3, "got {got}");

        // best-epoch validation sequence is non-increasing
        let mut best = f64::INFINITY;
        for e in &model.training_log {
            if e.val_loss < best {
                best = e.val_loss;
            }
        }
        assert!(best <= model.training_log[0].val_loss);
    }

    #[test]
    fn train_is_deterministic() {
        let samples = toy_samples(64, 2, 4);
        let config = MlpConfig {
            layer1_size: 16,
            layer1_dropout: 0.02,
            layer2_size: 16,
            layer2_dropout: 0.01,
            weight_decay: 1e-4,
            w_alpha: 0.01,
            initial_lr: 1e-3,
            seed: 77,
        };
        let opts = TrainOptions { max_epochs: 30, batch_size: 16 };
        let scaling = unit_scaling(4);
        let a = train(&samples[..48], &samples[48..], &config, ModelKind::Penn, &scaling, &opts)
            .unwrap();
        let b = train(&samples[..48], &samples[48..], &config, ModelKind::Penn, &scaling, &opts)
            .unwrap();
        assert_eq!(
            serde_json::to_string(&a.training_log).unwrap(),
            serde_json::to_string(&b.training_log).unwrap()
        );
        assert_eq!(a.mlp, b.mlp);
    }

    #[test]
    fn penn_outputs_always_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mlp = {
                let mut m = Mlp::init(5, 6, 6, N_RAW, &mut rng);
                // exaggerate weights to push raw outputs to extremes
                m.w1 *= 50.0;
                m.w3 *= 50.0;
                m
            };
            let model = model_of(mlp, ModelKind::Penn, 4);
            let fp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // keep T well above any admissible Tr so the WLF window holds
            // even with saturated c2/tr
            let hot = PhysicalConditions { log_mw: 0.3, t: 2.5, log_g: -0.4 };
            let (_, p) = penn_forward(&fp, 0.3, &hot, &model).unwrap();
            assert!(p.in_scaled_bounds() || {
                // saturated sigmoids can land exactly on a bound
                let a = p.to_array();
                PARAM_BOUNDS
                    .iter()
                    .zip(a.iter())
                    .all(|(&(lo, hi), &v)| v >= lo && v <= hi)
            });
        }
    }

    #[test]
    fn huge_penalty_dominates_training() {
        let samples = toy_samples(64, 3, 3);
        let config = MlpConfig {
            layer1_size: 16,
            layer1_dropout: 0.0,
            layer2_size: 16,
            layer2_dropout: 0.0,
            weight_decay: 0.0,
            w_alpha: 1e3,
            initial_lr: 5e-3,
            seed: 4,
        };
        let opts = TrainOptions { max_epochs: 300, batch_size: 64 };
        let scaling = unit_scaling(3);
        let model =
            train(&samples[..48], &samples[48..], &config, ModelKind::Penn, &scaling, &opts)
                .unwrap();
        for s in &samples[48..] {
            let (_, p) = penn_forward(&s.fingerprint, s.pdi, &s.cond, &model).unwrap();
            assert!((p.alpha1 - 1.0).abs() < 0.05, "alpha1 {}", p.alpha1);
            assert!((p.alpha2 - 3.4).abs() < 0.05, "alpha2 {}", p.alpha2);
        }
    }

    #[test]
    fn dropout_trains_but_never_infers() {
        let mlp = {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            Mlp::init(4, 8, 8, 1, &mut rng)
        };
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i + j) as f64 * 0.1);
        let a = mlp.forward(&x);
        let b = mlp.forward(&x);
        assert_eq!(a, b);

        let mut rng1 = ChaCha8Rng::seed_from_u64(100);
        let mut rng2 = ChaCha8Rng::seed_from_u64(200);
        let t1 = mlp.forward_cached(&x, Some((&mut rng1, 0.5, 0.5))).out;
        let t2 = mlp.forward_cached(&x, Some((&mut rng2, 0.5, 0.5))).out;
        assert_ne!(t1, t2);
    }

    #[test]
    fn fold_bookkeeping() {
        let folds = fold_indices(23, 10, 5);
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = folds.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn cross_validation_on_learnable_problem() {
        // constant-target problem: every fold can reach zero loss, so the
        // mean CV loss must match the direct oracle (0) closely
        let samples: Vec<ScaledSample> = (0..30)
            .map(|i| ScaledSample {
                fingerprint: vec![0.1 * (i % 3) as f64],
                pdi: 0.0,
                cond: PhysicalConditions { log_mw: 0.0, t: 0.0, log_g: 0.0 },
                log_eta: 0.4,
            })
            .collect();
        let config = MlpConfig {
            layer1_size: 8,
            layer1_dropout: 0.0,
            layer2_size: 8,
            layer2_dropout: 0.0,
            weight_decay: 0.0,
            w_alpha: 0.0,
            initial_lr: 0.02,
            seed: 8,
        };
        let opts = TrainOptions { max_epochs: 300, batch_size: 30 };
        let losses =
            cross_validate(&samples, &config, ModelKind::Ann, 10, &unit_scaling(1), &opts)
                .unwrap();
        assert_eq!(losses.len(), 10);
        let mean = losses.iter().sum::<f64>() / 10.0;
        assert!(mean < 1e-4, "mean CV loss {mean}");

        assert!(matches!(
            cross_validate(&samples[..5], &config, ModelKind::Ann, 10, &unit_scaling(1), &opts),
            Err(NnError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn halving_schedule_counts() {
        assert_eq!(halving_schedule(27), vec![27, 9, 3, 1]);
        assert_eq!(halving_schedule(10), vec![10, 4, 2, 1]);
        assert_eq!(halving_schedule(1), vec![1]);
    }

    #[test]
    fn search_budget_one_returns_single_sample() {
        let samples = toy_samples(40, 1, 3);
        let grid = SearchGrid {
            layer_sizes: vec![64],
            dropouts: vec![0.0],
            weight_decays: vec![1e-5],
            w_alphas: vec![0.0],
            initial_lrs: vec![1e-3],
        };
        let opts = TrainOptions { max_epochs: 5, batch_size: 64 };
        let c = hyperparameter_search(
            &samples,
            &unit_scaling(3),
            ModelKind::Ann,
            &grid,
            1,
            3,
            &opts,
        )
        .unwrap();
        assert_eq!(c.layer1_size, 64);
        assert_eq!(c.initial_lr, 1e-3);

        let empty = SearchGrid { layer_sizes: vec![], ..grid };
        assert!(matches!(
            hyperparameter_search(
                &samples,
                &unit_scaling(3),
                ModelKind::Ann,
                &empty,
                4,
                3,
                &opts
            ),
            Err(NnError::EmptyGrid)
        ));
    }

    #[test]
    fn search_selects_planted_best() {
        // a learning rate of 1e-12 cannot move the weights, so any sampled
        // config carrying it has strictly higher achievable loss
        let samples = toy_samples(60, 12, 3);
        let grid = SearchGrid {
            layer_sizes: vec![64],
            dropouts: vec![0.0],
            weight_decays: vec![1e-5],
            w_alphas: vec![0.0],
            initial_lrs: vec![1e-2, 1e-12],
        };
        let opts = TrainOptions { max_epochs: 40, batch_size: 60 };
        let c = hyperparameter_search(
            &samples,
            &unit_scaling(3),
            ModelKind::Ann,
            &grid,
            8,
            21,
            &opts,
        )
        .unwrap();
        assert_eq!(c.initial_lr, 1e-2);
        // determinism of the whole search
        let c2 = hyperparameter_search(
            &samples,
            &unit_scaling(3),
            ModelKind::Ann,
            &grid,
            8,
            21,
            &opts,
        )
        .unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let samples = toy_samples(32, 5, 3);
        let config = MlpConfig::default_for(ModelKind::Penn, 9);
        let opts = TrainOptions { max_epochs: 5, batch_size: 16 };
        let model = train(
            &samples[..24],
            &samples[24..],
            &MlpConfig { layer1_size: 16, layer2_size: 16, ..config },
            ModelKind::Penn,
            &unit_scaling(3),
            &opts,
        )
        .unwrap();
        let json = model.to_json().unwrap();
        let back = TrainedModel::from_json(&json).unwrap();
        assert_eq!(model.mlp, back.mlp);
        assert_eq!(model.kind, back.kind);
        assert_eq!(json, back.to_json().unwrap());
        // predictions identical bit-for-bit
        let s = &samples[0];
        assert_eq!(
            model.predict_scaled(&s.fingerprint, s.pdi, &s.cond).unwrap(),
            back.predict_scaled(&s.fingerprint, s.pdi, &s.cond).unwrap()
        );
    }

    #[test]
    fn nonfinite_loss_is_reported() {
        let mut samples = toy_samples(16, 6, 3);
        samples[0].log_eta = f64::NAN;
        let config = MlpConfig {
            layer1_size: 8,
            layer1_dropout: 0.0,
            layer2_size: 8,
            layer2_dropout: 0.0,
            weight_decay: 0.0,
            w_alpha: 0.0,
            initial_lr: 1e-3,
            seed: 0,
        };
        let opts = TrainOptions { max_epochs: 3, batch_size: 16 };
        assert!(matches!(
            train(&samples, &samples, &config, ModelKind::Ann, &unit_scaling(3), &opts),
            Err(NnError::NonFiniteLoss { .. })
        ));
    }
}
