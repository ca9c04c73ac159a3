//! Exact Gaussian process regression with a constant * RBF kernel plus
//! observation noise, and seeded log-uniform random search over the three
//! kernel hyperparameters scored by cross-validated order-of-magnitude
//! error.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Search ranges: noise level, RBF length scale, kernel constant.
pub const ALPHA_RANGE: (f64, f64) = (1e-2, 1e1);
pub const LENGTH_SCALE_RANGE: (f64, f64) = (1e-2, 1e2);
pub const CONSTANT_RANGE: (f64, f64) = (1e-2, 1e2);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GprError {
    #[error("kernel matrix not positive definite (n = {0})")]
    NotPositiveDefinite(usize),
    #[error("feature width {got} does not match training width {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("empty training set")]
    EmptyTraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprHyperparams {
    pub alpha: f64,
    pub length_scale: f64,
    pub constant_value: f64,
}

impl Default for GprHyperparams {
    fn default() -> Self {
        Self { alpha: 1e-2, length_scale: 1.0, constant_value: 1.0 }
    }
}

/// Fitted exact-GPR model: training inputs, Cholesky factor of
/// `K + alpha I`, and the dual weights solving `(K + alpha I) w = y`.
#[derive(Debug, Clone)]
pub struct GprModel {
    pub x_train: DMatrix<f64>,
    pub hp: GprHyperparams,
    chol: Cholesky<f64, Dyn>,
    pub dual: DVector<f64>,
}

fn sq_dist_rows(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..x.ncols())
        .map(|c| {
            let d = x[(i, c)] - x[(j, c)];
            d * d
        })
        .sum()
}

fn sq_dist_to(x: &DMatrix<f64>, i: usize, q: &[f64]) -> f64 {
    q.iter()
        .enumerate()
        .map(|(c, &v)| {
            let d = x[(i, c)] - v;
            d * d
        })
        .sum()
}

fn kernel(hp: &GprHyperparams, d2: f64) -> f64 {
    hp.constant_value * (-d2 / (2.0 * hp.length_scale * hp.length_scale)).exp()
}

pub fn gpr_fit(x: &[Vec<f64>], y: &[f64], hp: GprHyperparams) -> Result<GprModel, GprError> {
    if x.is_empty() {
        return Err(GprError::EmptyTraining);
    }
    let n = x.len();
    let d = x[0].len();
    let x_train = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel(&hp, sq_dist_rows(&x_train, i, j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hp.alpha;
    }
    let chol = Cholesky::new(k).ok_or(GprError::NotPositiveDefinite(n))?;
    let dual = chol.solve(&DVector::from_row_slice(y));
    Ok(GprModel { x_train, hp, chol, dual })
}

/// Serialization mirror of [`GprModel`]: the Cholesky factor is rebuilt on
/// load from the stored inputs and hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GprDoc {
    pub kind: String,
    pub hp: GprHyperparams,
    pub x_train: Vec<Vec<f64>>,
    pub dual: Vec<f64>,
}

impl GprModel {
    pub fn to_doc(&self) -> GprDoc {
        let n = self.x_train.nrows();
        let d = self.x_train.ncols();
        GprDoc {
            kind: "GPR".to_string(),
            hp: self.hp,
            x_train: (0..n).map(|i| (0..d).map(|j| self.x_train[(i, j)]).collect()).collect(),
            dual: self.dual.iter().copied().collect(),
        }
    }

    pub fn from_doc(doc: &GprDoc) -> Result<Self, GprError> {
        if doc.x_train.is_empty() {
            return Err(GprError::EmptyTraining);
        }
        let n = doc.x_train.len();
        let d = doc.x_train[0].len();
        let x_train = DMatrix::from_fn(n, d, |i, j| doc.x_train[i][j]);
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = kernel(&doc.hp, sq_dist_rows(&x_train, i, j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += doc.hp.alpha;
        }
        let chol = Cholesky::new(k).ok_or(GprError::NotPositiveDefinite(n))?;
        Ok(GprModel { x_train, hp: doc.hp, chol, dual: DVector::from_vec(doc.dual.clone()) })
    }
}

/// Posterior mean and (clamped non-negative) variance at each query point.
pub fn gpr_predict(model: &GprModel, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), GprError> {
    let d = model.x_train.ncols();
    let n = model.x_train.nrows();
    let mut means = Vec::with_capacity(xs.len());
    let mut vars = Vec::with_capacity(xs.len());
    for q in xs {
        if q.len() != d {
            return Err(GprError::DimensionMismatch { got: q.len(), expected: d });
        }
        let kstar =
            DVector::from_fn(n, |i, _| kernel(&model.hp, sq_dist_to(&model.x_train, i, q)));
        means.push(kstar.dot(&model.dual));
        // variance = k(q, q) - || L^-1 k* ||^2
        let v = model.chol.l().solve_lower_triangular(&kstar).expect("triangular solve");
        let var = model.hp.constant_value - v.norm_squared();
        vars.push(if var > -1e-12 { var.max(0.0) } else { var });
    }
    Ok((means, vars))
}

/// Mean absolute error of predictions, i.e. the CV score used in the search.
fn cv_ome(x: &[Vec<f64>], y: &[f64], hp: GprHyperparams, folds: usize) -> Option<f64> {
    let n = x.len();
    let k = folds.min(n).max(2);
    let mut abs_err = 0.0;
    let mut count = 0usize;
    for fold in 0..k {
        let test: Vec<usize> = (0..n).filter(|i| i % k == fold).collect();
        let train: Vec<usize> = (0..n).filter(|i| i % k != fold).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let xt: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = gpr_fit(&xt, &yt, hp).ok()?;
        let xq: Vec<Vec<f64>> = test.iter().map(|&i| x[i].clone()).collect();
        let (mean, _) = gpr_predict(&model, &xq).ok()?;
        for (m, &i) in mean.iter().zip(test.iter()) {
            abs_err += (m - y[i]).abs();
        }
        count += test.len();
    }
    (count > 0).then(|| abs_err / count as f64)
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    10f64.powf(rng.gen_range(lo.log10()..hi.log10()))
}

/// Seeded log-uniform random search over the three hyperparameter ranges,
/// scored by 10-fold CV order-of-magnitude error. Proposals whose fit fails
/// are skipped and logged.
pub fn gpr_search(
    x: &[Vec<f64>],
    y: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<GprHyperparams, GprError> {
    if x.is_empty() {
        return Err(GprError::EmptyTraining);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(GprHyperparams, f64)> = None;
    for it in 0..iterations {
        let hp = GprHyperparams {
            alpha: log_uniform(&mut rng, ALPHA_RANGE),
            length_scale: log_uniform(&mut rng, LENGTH_SCALE_RANGE),
            constant_value: log_uniform(&mut rng, CONSTANT_RANGE),
        };
        match cv_ome(x, y, hp, 10) {
            Some(score) => {
                if best.as_ref().map_or(true, |(_, s)| score < *s) {
                    best = Some((hp, score));
                }
            }
            None => log::warn!("gpr search iteration {it}: proposal {hp:?} failed, skipped"),
        }
    }
    best.map(|(hp, _)| hp).ok_or(GprError::NotPositiveDefinite(x.len()))
}
