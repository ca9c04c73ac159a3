//! Evaluation protocol: error metrics, monomer-level physical splits,
//! extrapolation sweeps with parameter estimation, KL divergence of
//! parameter distributions, and extrapolation-outcome classification.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PolymerSample, ScalingSpec, SHEAR_OFFSET};
use crate::fit::{fit_with_defaults, FitError, FitResult, Law};
use crate::gpr::{gpr_predict, GprModel};
use crate::nn::{penn_forward, ModelKind, NnError, TrainedModel};
use crate::physics::EmpiricalParams;

/// Default accuracy gate for extrapolation classification, log10 units.
pub const THETA_ACC: f64 = 1.0;
/// Default WLF-fit RMS gate for the temperature trend test.
pub const THETA_FIT: f64 = 0.15;
/// Default histogram bin count for KL divergence.
pub const KL_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("true values have zero variance")]
    ZeroVariance,
    #[error("only {0} monomers; at least 10 required for a 90/10 split")]
    TooFewMonomers(usize),
    #[error("empty sample set for histogram")]
    EmptySamples,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// scalar metrics

/// Order-of-magnitude error: mean absolute difference of log10 viscosities.
pub fn ome(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { a: pred.len(), b: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination over log10 viscosities.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { a: pred.len(), b: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

// ---------------------------------------------------------------------------
// physical splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitVariable {
    Mw,
    Shear,
    Temp,
}

impl SplitVariable {
    fn value_of(&self, s: &PolymerSample) -> f64 {
        match self {
            SplitVariable::Mw => s.mw,
            SplitVariable::Shear => s.shear_rate,
            SplitVariable::Temp => s.temp,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub variable: SplitVariable,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Median of the split variable per held-out monomer.
    pub medians: BTreeMap<String, f64>,
    /// Whether the upper half went to the test side, per held-out monomer.
    pub upper_to_test: BTreeMap<String, bool>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Holds out 10% of monomers; within each held-out monomer the records are
/// partitioned at that monomer's median of `variable`, and a seeded coin
/// sends one side to test and the other back to train. Records exactly at
/// the median count as the lower side.
pub fn physical_split(
    dataset: &[PolymerSample],
    variable: SplitVariable,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    let mut by_monomer: BTreeMap<String, Vec<&PolymerSample>> = BTreeMap::new();
    for s in dataset {
        by_monomer.entry(s.chemistry_key()).or_default().push(s);
    }
    if by_monomer.len() < 10 {
        return Err(EvalError::TooFewMonomers(by_monomer.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut monomers: Vec<String> = by_monomer.keys().cloned().collect();
    monomers.shuffle(&mut rng);
    let n_test = (monomers.len() / 10).max(1);
    let test_monomers: Vec<String> = monomers[..n_test].to_vec();

    let mut plan = SplitPlan {
        variable,
        seed,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        medians: BTreeMap::new(),
        upper_to_test: BTreeMap::new(),
    };
    for (monomer, records) in &by_monomer {
        if !test_monomers.contains(monomer) {
            plan.train_ids.extend(records.iter().map(|s| s.record_id.clone()));
        }
    }
    // coin flips in the shuffled monomer order keep the plan deterministic
    for monomer in &test_monomers {
        let records = &by_monomer[monomer];
        let mut vals: Vec<f64> = records.iter().map(|s| variable.value_of(s)).collect();
        let med = median(&mut vals);
        let upper = rng.gen_bool(0.5);
        plan.medians.insert(monomer.clone(), med);
        plan.upper_to_test.insert(monomer.clone(), upper);
        for s in records {
            let is_upper = variable.value_of(s) > med;
            if is_upper == upper {
                plan.test_ids.push(s.record_id.clone());
            } else {
                plan.train_ids.push(s.record_id.clone());
            }
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// models under evaluation

/// Anything that predicts log10 viscosity in physical units from physical
/// inputs. Implementations own their scaling.
pub trait ViscosityModel {
    fn predict_log_eta(
        &self,
        fingerprint: &[f64],
        pdi: f64,
        mw: f64,
        temp: f64,
        shear: f64,
    ) -> Option<f64>;

    /// Physical-unit empirical parameters, if the model exposes them.
    fn predicted_params(&self, _fingerprint: &[f64], _pdi: f64) -> Option<EmpiricalParams> {
        None
    }
}

impl ViscosityModel for TrainedModel {
    fn predict_log_eta(
        &self,
        fingerprint: &[f64],
        pdi: f64,
        mw: f64,
        temp: f64,
        shear: f64,
    ) -> Option<f64> {
        let fp: Vec<f64> = fingerprint
            .iter()
            .zip(self.scaling.fingerprint.iter())
            .map(|(&v, a)| a.apply(v))
            .collect();
        if fp.len() != fingerprint.len() {
            return None;
        }
        let cond = self.scaling.scale_conditions(mw, temp, shear);
        let scaled = self.predict_scaled(&fp, self.scaling.pdi.apply(pdi), &cond).ok()?;
        Some(self.scaling.unscale_log_eta(scaled))
    }

    fn predicted_params(&self, fingerprint: &[f64], pdi: f64) -> Option<EmpiricalParams> {
        if self.kind != ModelKind::Penn {
            return None;
        }
        let fp: Vec<f64> = fingerprint
            .iter()
            .zip(self.scaling.fingerprint.iter())
            .map(|(&v, a)| a.apply(v))
            .collect();
        // any in-window condition works; the parameter head ignores it
        let cond = crate::physics::PhysicalConditions { log_mw: 0.0, t: 10.0, log_g: 0.0 };
        match penn_forward(&fp, self.scaling.pdi.apply(pdi), &cond, self) {
            Ok((_, p)) => Some(self.scaling.params_to_physical(&p)),
            Err(NnError::Physics(_)) => None,
            Err(_) => None,
        }
    }
}

/// Exact GPR plus the scaling that binds it to physical units. Input layout
/// matches the direct baseline: (fingerprint, PDI, conditions).
pub struct GprViscosityModel {
    pub model: GprModel,
    pub scaling: ScalingSpec,
}

impl ViscosityModel for GprViscosityModel {
    fn predict_log_eta(
        &self,
        fingerprint: &[f64],
        pdi: f64,
        mw: f64,
        temp: f64,
        shear: f64,
    ) -> Option<f64> {
        let mut x: Vec<f64> = fingerprint
            .iter()
            .zip(self.scaling.fingerprint.iter())
            .map(|(&v, a)| a.apply(v))
            .collect();
        let cond = self.scaling.scale_conditions(mw, temp, shear);
        x.extend_from_slice(&[self.scaling.pdi.apply(pdi), cond.log_mw, cond.t, cond.log_g]);
        let (means, _) = gpr_predict(&self.model, &[x]).ok()?;
        Some(self.scaling.unscale_log_eta(means[0]))
    }
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SplitVariable,
    /// Grid in natural units (g/mol, 1/s, or K).
    pub grid: Vec<f64>,
    /// Fixed conditions for the two variables not swept.
    pub mw: f64,
    pub temp: f64,
    pub shear: f64,
}

/// Sweep ranges mirroring the evaluation protocol.
pub const MW_SWEEP_RANGE: (f64, f64) = (1e2, 1e7);
pub const SHEAR_SWEEP_RANGE: (f64, f64) = (1e-5, 1e6);
pub const TEMP_SWEEP_HALF_WIDTH: f64 = 20.0;

impl SweepSpec {
    /// Standard sweep at a base sample's conditions: log-spaced Mw or shear
    /// grids over the full protocol range, or a linear T grid at +/-20 K.
    pub fn standard(variable: SplitVariable, base: &PolymerSample, n: usize) -> Self {
        let n = n.max(2);
        let grid = match variable {
            SplitVariable::Mw => log_spaced(MW_SWEEP_RANGE.0, MW_SWEEP_RANGE.1, n),
            SplitVariable::Shear => log_spaced(SHEAR_SWEEP_RANGE.0, SHEAR_SWEEP_RANGE.1, n),
            SplitVariable::Temp => {
                let lo = base.temp - TEMP_SWEEP_HALF_WIDTH;
                let hi = base.temp + TEMP_SWEEP_HALF_WIDTH;
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            }
        };
        SweepSpec { variable, grid, mw: base.mw, temp: base.temp, shear: base.shear_rate }
    }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub grid_value: f64,
    /// None marks a per-point model failure (recorded as a gap).
    pub pred_log10_eta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Curve {
    pub record_id: String,
    pub variable: SplitVariable,
    pub points: Vec<CurvePoint>,
    /// Physical-unit parameters at the base sample, when the model predicts
    /// them directly.
    pub params: Option<EmpiricalParams>,
}

/// Evaluates the model over the sweep grid while holding the other two
/// physical variables at the base sample's values.
pub fn sweep_predict(model: &dyn ViscosityModel, base: &PolymerSample, spec: &SweepSpec) -> Curve {
    let pdi = base.pdi.unwrap_or(crate::data::MEDIAN_PDI);
    let points = spec
        .grid
        .iter()
        .map(|&g| {
            let (mw, temp, shear) = match spec.variable {
                SplitVariable::Mw => (g, spec.temp, spec.shear),
                SplitVariable::Shear => (spec.mw, spec.temp, g),
                SplitVariable::Temp => (spec.mw, g, spec.shear),
            };
            CurvePoint {
                grid_value: g,
                pred_log10_eta: model.predict_log_eta(&base.fingerprint, pdi, mw, temp, shear),
            }
        })
        .collect();
    Curve {
        record_id: base.record_id.clone(),
        variable: spec.variable,
        points,
        params: model.predicted_params(&base.fingerprint, pdi),
    }
}

/// Fits the matching empirical law to a sweep curve; this is how parameter
/// distributions are extracted from models that do not predict parameters.
pub fn estimate_params_from_sweep(curve: &Curve, law: Law) -> Result<FitResult, EvalError> {
    let points: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| {
            let y = p.pred_log10_eta?;
            let x = match curve.variable {
                SplitVariable::Mw => p.grid_value.log10(),
                SplitVariable::Shear => (p.grid_value + SHEAR_OFFSET).log10(),
                SplitVariable::Temp => p.grid_value,
            };
            Some((x, y))
        })
        .collect();
    Ok(fit_with_defaults(law, &points)?)
}

// ---------------------------------------------------------------------------
// KL divergence

/// KL divergence of P from Q over shared histogram bins spanning the union
/// range, with every bin mass epsilon-smoothed and renormalized. Natural
/// logarithm.
pub fn kl_divergence(samples_p: &[f64], samples_q: &[f64], bins: usize) -> Result<f64, EvalError> {
    if samples_p.is_empty() || samples_q.is_empty() || bins == 0 {
        return Err(EvalError::EmptySamples);
    }
    let eps = 1e-10;
    let all = samples_p.iter().chain(samples_q.iter());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in all {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        // identical constants: identical histograms
        hi = lo + 1.0;
    }
    let hist = |samples: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0f64; bins];
        for &v in samples {
            let mut b = ((v - lo) / (hi - lo) * bins as f64) as usize;
            if b >= bins {
                b = bins - 1;
            }
            h[b] += 1.0;
        }
        let total: f64 = h.iter().sum::<f64>() + eps * bins as f64;
        h.iter().map(|c| (c + eps) / total).collect()
    };
    let p = hist(samples_p);
    let q = hist(samples_q);
    Ok(p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum())
}

// ---------------------------------------------------------------------------
// extrapolation classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtrapolationOutcome {
    Success,
    FitButWrongTrend,
    Fail,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    /// Held-out accuracy gate, log10 units of OME.
    pub acc: f64,
    /// WLF-fit RMS gate for the temperature trend test.
    pub fit_rms: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { acc: THETA_ACC, fit_rms: THETA_FIT }
    }
}

fn lsq_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        0.0
    } else {
        (n * sxy - sx * sy) / denom
    }
}

/// Judges one extrapolation sweep: held-out accuracy gate first, then a
/// per-law physical-trend test on the curve itself.
pub fn classify_extrapolation(
    curve: &Curve,
    held_pred: &[f64],
    held_true: &[f64],
    law: Law,
    th: &Thresholds,
) -> Result<ExtrapolationOutcome, EvalError> {
    let accurate = ome(held_pred, held_true)? < th.acc;
    if !accurate {
        return Ok(ExtrapolationOutcome::Fail);
    }
    let trend = trend_holds(curve, law, th)?;
    Ok(if trend { ExtrapolationOutcome::Success } else { ExtrapolationOutcome::FitButWrongTrend })
}

fn trend_holds(curve: &Curve, law: Law, th: &Thresholds) -> Result<bool, EvalError> {
    let xy: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| {
            let y = p.pred_log10_eta?;
            let x = match curve.variable {
                SplitVariable::Mw => p.grid_value.log10(),
                SplitVariable::Shear => (p.grid_value + SHEAR_OFFSET).log10(),
                SplitVariable::Temp => p.grid_value,
            };
            Some((x, y))
        })
        .collect();
    match law {
        Law::Mw => {
            let f = match fit_with_defaults(Law::Mw, &xy) {
                Ok(f) => f,
                Err(FitError::TooFewPoints { .. }) => return Ok(false),
                Err(e) => return Err(e.into()),
            };
            let (a1, a2) = (f.params[1], f.params[2]);
            Ok((0.5..=1.5).contains(&a1) && (2.0..=5.0).contains(&a2) && a2 > a1)
        }
        Law::Shear => {
            let f = match fit_with_defaults(Law::Shear, &xy) {
                Ok(f) => f,
                Err(FitError::TooFewPoints { .. }) => return Ok(false),
                Err(e) => return Err(e.into()),
            };
            let n_exp = f.params[1];
            let x_min = xy.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let low: Vec<(f64, f64)> = xy.iter().filter(|p| p.0 <= x_min + 1.0).copied().collect();
            let plateau = low.len() >= 2 && lsq_slope(&low).abs() < 0.05;
            Ok((0.2..=0.8).contains(&n_exp) && plateau)
        }
        Law::Temp => {
            let non_increasing = xy.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9);
            let f = match fit_with_defaults(Law::Temp, &xy) {
                Ok(f) => f,
                Err(FitError::TooFewPoints { .. }) => return Ok(false),
                Err(e) => return Err(e.into()),
            };
            Ok(non_increasing && f.residual_rms < th.fit_rms)
        }
    }
}

// ---------------------------------------------------------------------------
// reporting

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Tallies {
    pub success: usize,
    pub fit_but_wrong_trend: usize,
    pub fail: usize,
}

impl Tallies {
    pub fn add(&mut self, o: ExtrapolationOutcome) {
        match o {
            ExtrapolationOutcome::Success => self.success += 1,
            ExtrapolationOutcome::FitButWrongTrend => self.fit_but_wrong_trend += 1,
            ExtrapolationOutcome::Fail => self.fail += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.success + self.fit_but_wrong_trend + self.fail
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub label: String,
    pub ome: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ome: f64,
    pub r_squared: f64,
    pub per_trial: Vec<TrialMetrics>,
    /// Physical-unit parameter samples per "model/parameter" key, including
    /// a "truth/..." family when ground truth is available.
    pub parameter_distributions: BTreeMap<String, Vec<f64>>,
    /// KL divergence of each model's parameter distribution from truth.
    pub kl_per_parameter: BTreeMap<String, f64>,
    pub tallies: BTreeMap<String, Tallies>,
    pub theta_acc: f64,
    pub theta_fit: f64,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub record_id: String,
    pub variable: String,
    pub grid_value: f64,
    pub pred_log10_eta: Option<f64>,
    pub true_log10_eta: Option<f64>,
}

/// Flat plot-ready curve table.
pub fn write_curves_csv(path: &Path, rows: &[CurveRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record_id", "variable", "grid_value", "pred_log10_eta", "true_log10_eta"])?;
    for r in rows {
        w.write_record([
            r.record_id.as_str(),
            r.variable.as_str(),
            &format!("{}", r.grid_value),
            &r.pred_log10_eta.map_or(String::new(), |v| format!("{v}")),
            &r.true_log10_eta.map_or(String::new(), |v| format!("{v}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Affine;
    use crate::nn::{Mlp, MlpConfig};
    use crate::physics::{bound_params, log_eta, PhysicalConditions, N_RAW};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    #[test]
    fn ome_examples() {
        assert_eq!(ome(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ome(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(ome(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert!(matches!(ome(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(ome(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch { .. })));
        // translation-detecting
        let t = [0.5, 1.5, -0.2];
        for c in [-1.0, -0.1, 0.1, 2.0] {
            let shifted: Vec<f64> = t.iter().map(|v| v + c).collect();
            assert!(ome(&shifted, &t).unwrap() > 0.0);
        }
    }

    #[test]
    fn r_squared_examples() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &t).unwrap(), 0.0);
        // hand case: ss_res = 1, ss_tot = 2
        assert_abs_diff_eq!(r_squared(&[1.0, 2.0, 2.0], &t).unwrap(), 0.5, epsilon = 1e-15);
        assert!(matches!(r_squared(&[1.0], &[5.0]), Err(EvalError::ZeroVariance)));
    }

    fn synthetic_samples(n_chem: usize, pts: usize, seed: u64) -> Vec<PolymerSample> {
        crate::synth::generate(n_chem, pts, 0.05, seed).unwrap().samples
    }

    fn check_plan(plan: &SplitPlan, data: &[PolymerSample]) {
        let by_id: BTreeMap<&str, &PolymerSample> =
            data.iter().map(|s| (s.record_id.as_str(), s)).collect();
        assert_eq!(plan.train_ids.len() + plan.test_ids.len(), data.len());
        for id in &plan.test_ids {
            assert!(!plan.train_ids.contains(id), "{id} in both sides");
            let s = by_id[id.as_str()];
            let monomer = s.chemistry_key();
            let med = plan.medians[&monomer];
            let upper = plan.upper_to_test[&monomer];
            let v = plan.variable.value_of(s);
            if upper {
                assert!(v > med, "{id}: {v} not above median {med}");
            } else {
                assert!(v <= med, "{id}: {v} not at/below median {med}");
            }
        }
    }

    #[test]
    fn physical_split_plans_are_valid_and_seed_sensitive() {
        let data = synthetic_samples(93, 6, 3);
        let mut plans = Vec::new();
        for seed in [1u64, 2, 3] {
            let plan = physical_split(&data, SplitVariable::Mw, seed).unwrap();
            check_plan(&plan, &data);
            assert!(!plan.test_ids.is_empty());
            plans.push(plan.test_ids.clone());
        }
        assert!(plans[0] != plans[1] || plans[1] != plans[2], "seeds produced identical plans");

        let small = synthetic_samples(5, 4, 1);
        assert!(matches!(
            physical_split(&small, SplitVariable::Temp, 0),
            Err(EvalError::TooFewMonomers(5))
        ));
    }

    #[test]
    fn physical_split_degenerate_median() {
        // every record of every monomer shares one temperature: all records
        // sit at the median, so they all follow the lower-side rule
        let mut data = synthetic_samples(12, 4, 9);
        for s in data.iter_mut() {
            s.temp = 400.0;
        }
        let plan = physical_split(&data, SplitVariable::Temp, 4).unwrap();
        check_plan(&plan, &data);
        for (monomer, &upper) in &plan.upper_to_test {
            let n_test = plan
                .test_ids
                .iter()
                .filter(|id| data.iter().any(|s| &s.record_id == *id && &s.chemistry_key() == monomer))
                .count();
            if upper {
                assert_eq!(n_test, 0, "upper side is empty at a degenerate median");
            } else {
                assert_eq!(n_test, 4);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn split_plan_invariants_all_seeds(seed in 0u64..1000) {
            let data = synthetic_samples(15, 5, 77);
            let plan = physical_split(&data, SplitVariable::Shear, seed).unwrap();
            check_plan(&plan, &data);
        }
    }

    // a PENN with constant output: zero weights, raw vector in the bias
    fn fixed_penn(raw: [f64; N_RAW], scaling: ScalingSpec) -> TrainedModel {
        let fp_w = scaling.fingerprint.len();
        let mlp = Mlp {
            w1: Array2::zeros((fp_w + 1, 4)),
            b1: Array1::zeros(4),
            w2: Array2::zeros((4, 4)),
            b2: Array1::zeros(4),
            w3: Array2::zeros((4, N_RAW)),
            b3: Array1::from_vec(raw.to_vec()),
        };
        TrainedModel {
            kind: ModelKind::Penn,
            mlp,
            config: MlpConfig::default_for(ModelKind::Penn, 0),
            scaling,
            training_log: Vec::new(),
        }
    }

    fn demo_scaling() -> ScalingSpec {
        ScalingSpec {
            fingerprint: vec![Affine { min: -1.0, max: 1.0 }; 3],
            pdi: Affine { min: 1.0, max: 3.0 },
            temp: Affine { min: 300.0, max: 500.0 },
            log_eta: Affine { min: -4.0, max: 10.0 },
        }
    }

    fn demo_base() -> PolymerSample {
        PolymerSample {
            record_id: "base".into(),
            kind: crate::data::PolymerKind::Homopolymer,
            constituents: vec![],
            fingerprint: vec![0.1, -0.2, 0.3],
            mw: 1e5,
            pdi: Some(2.0),
            pdi_imputed: false,
            temp: 420.0,
            shear_rate: 0.0,
            log_eta: 3.0,
            augmented: false,
        }
    }

    #[test]
    fn sweep_matches_pointwise_predictions() {
        let model = fixed_penn([0.2, -0.4, 0.5, 0.1, 0.0, -0.3, 0.6, -0.8, 0.0, 0.4], demo_scaling());
        let base = demo_base();
        let spec = SweepSpec::standard(SplitVariable::Mw, &base, 15);
        assert!(spec.grid.iter().all(|&g| (1e2..=1e7 + 1.0).contains(&g)));
        let curve = sweep_predict(&model, &base, &spec);
        assert_eq!(curve.points.len(), 15);
        for p in &curve.points {
            let direct = model.predict_log_eta(
                &base.fingerprint,
                2.0,
                p.grid_value,
                base.temp,
                base.shear_rate,
            );
            assert_eq!(p.pred_log10_eta, direct);
        }
        assert!(curve.params.is_some());

        // grid of 1 value → the single prediction equals the direct call
        let single = SweepSpec {
            variable: SplitVariable::Temp,
            grid: vec![base.temp],
            mw: base.mw,
            temp: base.temp,
            shear: base.shear_rate,
        };
        let c1 = sweep_predict(&model, &base, &single);
        assert_eq!(
            c1.points[0].pred_log10_eta,
            model.predict_log_eta(&base.fingerprint, 2.0, base.mw, base.temp, base.shear_rate)
        );
    }

    #[test]
    fn penn_shear_sweep_is_non_increasing() {
        let model = fixed_penn([0.2, -0.4, 0.5, 0.1, 0.0, -0.3, 0.6, -0.8, -1.0, 0.0], demo_scaling());
        let base = demo_base();
        let spec = SweepSpec::standard(SplitVariable::Shear, &base, 60);
        let curve = sweep_predict(&model, &base, &spec);
        let ys: Vec<f64> = curve.points.iter().map(|p| p.pred_log10_eta.unwrap()).collect();
        // allow the logistic-blend ripple near the critical shear rate
        let n_exp = bound_params(&model.mlp.b3.to_vec()).n;
        let ripple = (1.0 - n_exp) * 0.005 * 14.0 / 2.0; // unscaled to decades
        for w in ys.windows(2) {
            assert!(w[1] <= w[0] + ripple, "increasing: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn estimated_params_self_consistent_with_penn() {
        let raw = [0.2, -0.4, 0.5, 0.1, 0.0, -0.3, 0.6, -0.8, 0.0, 0.4];
        let model = fixed_penn(raw, demo_scaling());
        let base = demo_base();
        let spec = SweepSpec::standard(SplitVariable::Mw, &base, 40);
        let curve = sweep_predict(&model, &base, &spec);
        let fitted = estimate_params_from_sweep(&curve, Law::Mw).unwrap();
        let own = curve.params.unwrap();
        assert!(
            (fitted.params[2] - own.alpha2).abs() < 0.1,
            "alpha2: fitted {} vs own {}",
            fitted.params[2],
            own.alpha2
        );
    }

    struct ConstModel(f64);
    impl ViscosityModel for ConstModel {
        fn predict_log_eta(&self, _: &[f64], _: f64, _: f64, _: f64, _: f64) -> Option<f64> {
            Some(self.0)
        }
    }

    #[test]
    fn constant_model_fits_zero_slopes() {
        let base = demo_base();
        let spec = SweepSpec::standard(SplitVariable::Mw, &base, 20);
        let curve = sweep_predict(&ConstModel(3.0), &base, &spec);
        let fitted = estimate_params_from_sweep(&curve, Law::Mw).unwrap();
        assert!(fitted.params[1].abs() < 1e-3, "alpha1 {}", fitted.params[1]);
        assert!(fitted.params[2].abs() < 1e-3, "alpha2 {}", fitted.params[2]);
    }

    #[test]
    fn shear_exponent_recovered_from_generated_curve() {
        // points straight from the shear law itself; the fit must recover n
        let truth = [5.0, 0.45, 1.5];
        let points: Vec<CurvePoint> = (0..30)
            .map(|i| {
                let lg = -4.0 + 9.0 * i as f64 / 29.0;
                CurvePoint {
                    grid_value: 10f64.powf(lg) - SHEAR_OFFSET,
                    pred_log10_eta: Some(Law::Shear.eval(&truth, lg)),
                }
            })
            .collect();
        let curve = Curve {
            record_id: "gen".into(),
            variable: SplitVariable::Shear,
            points,
            params: None,
        };
        let fitted = estimate_params_from_sweep(&curve, Law::Shear).unwrap();
        assert!((fitted.params[1] - 0.45).abs() < 0.02, "n {}", fitted.params[1]);
    }

    #[test]
    fn kl_examples() {
        let p: Vec<f64> = (0..500).map(|i| (i as f64 * 0.013).sin()).collect();
        assert!(kl_divergence(&p, &p, 20).unwrap().abs() < 1e-9);

        let a: Vec<f64> = (0..300).map(|i| i as f64 / 300.0).collect();
        let b: Vec<f64> = (0..300).map(|i| 10.0 + i as f64 / 300.0).collect();
        let kl = kl_divergence(&a, &b, 20).unwrap();
        assert!(kl.is_finite() && kl > 1.0, "disjoint kl {kl}");

        assert!(matches!(kl_divergence(&[], &p, 20), Err(EvalError::EmptySamples)));
    }

    #[test]
    fn kl_matches_direct_histogram_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, mu: f64| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            mu + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let p: Vec<f64> = (0..400).map(|_| normal(&mut rng, 0.0)).collect();
        let q: Vec<f64> = (0..400).map(|_| normal(&mut rng, 1.0)).collect();
        let got = kl_divergence(&p, &q, 20).unwrap();

        // independent recomputation
        let lo = p.iter().chain(&q).cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().chain(&q).cloned().fold(f64::NEG_INFINITY, f64::max);
        let count = |xs: &[f64]| {
            let mut h = [0.0f64; 20];
            for &v in xs {
                let b = (((v - lo) / (hi - lo) * 20.0) as usize).min(19);
                h[b] += 1.0;
            }
            h
        };
        let (hp, hq) = (count(&p), count(&q));
        let zp: f64 = hp.iter().sum::<f64>() + 20.0 * 1e-10;
        let zq: f64 = hq.iter().sum::<f64>() + 20.0 * 1e-10;
        let expect: f64 = (0..20)
            .map(|i| {
                let pi = (hp[i] + 1e-10) / zp;
                let qi = (hq[i] + 1e-10) / zq;
                pi * (pi / qi).ln()
            })
            .sum();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn classification_examples() {
        let th = Thresholds::default();
        // physics-generated Mw curve with compliant slopes
        let truth = [-1.0, 1.0, 3.4, 4.5];
        let points: Vec<CurvePoint> = (0..30)
            .map(|i| {
                let lm = 2.0 + 5.0 * i as f64 / 29.0;
                CurvePoint {
                    grid_value: 10f64.powf(lm),
                    pred_log10_eta: Some(Law::Mw.eval(&truth, lm)),
                }
            })
            .collect();
        let curve = Curve {
            record_id: "c".into(),
            variable: SplitVariable::Mw,
            points,
            params: None,
        };
        let held_true = [2.0, 3.0];
        let o = classify_extrapolation(&curve, &[2.05, 2.9], &held_true, Law::Mw, &th).unwrap();
        assert_eq!(o, ExtrapolationOutcome::Success);

        // flat curve: accurate but no entangled slope
        let flat = Curve {
            record_id: "f".into(),
            variable: SplitVariable::Mw,
            points: (0..30)
                .map(|i| CurvePoint {
                    grid_value: 10f64.powf(2.0 + 5.0 * i as f64 / 29.0),
                    pred_log10_eta: Some(2.5),
                })
                .collect(),
            params: None,
        };
        let o = classify_extrapolation(&flat, &[2.05, 2.9], &held_true, Law::Mw, &th).unwrap();
        assert_eq!(o, ExtrapolationOutcome::FitButWrongTrend);

        // 3 log-units off: accuracy gate fails regardless of trend
        let o = classify_extrapolation(&curve, &[5.0, 6.0], &held_true, Law::Mw, &th).unwrap();
        assert_eq!(o, ExtrapolationOutcome::Fail);
    }

    #[test]
    fn report_roundtrip_and_curve_csv() {
        let mut tallies = BTreeMap::new();
        let mut t = Tallies::default();
        t.add(ExtrapolationOutcome::Success);
        t.add(ExtrapolationOutcome::Fail);
        tallies.insert("penn".to_string(), t);
        assert_eq!(t.total(), 2);

        let report = EvaluationReport {
            ome: 0.4,
            r_squared: 0.9,
            per_trial: vec![TrialMetrics { label: "seed0".into(), ome: 0.4, r_squared: 0.9 }],
            parameter_distributions: BTreeMap::new(),
            kl_per_parameter: BTreeMap::new(),
            tallies,
            theta_acc: THETA_ACC,
            theta_fit: THETA_FIT,
        };
        let back: EvaluationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back.tallies["penn"].total(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_curves_csv(
            &path,
            &[CurveRow {
                record_id: "r1".into(),
                variable: "mw".into(),
                grid_value: 1e3,
                pred_log10_eta: Some(2.5),
                true_log10_eta: None,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("record_id,variable,grid_value,pred_log10_eta,true_log10_eta"));
        assert!(text.contains("r1,mw,1000,2.5,"));
    }
}
