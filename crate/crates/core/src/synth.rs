//! Synthetic dataset generation from the physics graph with known
//! per-chemistry parameters, for ground-truth-known pipeline runs.
//!
//! Fingerprints are random unit vectors; each chemistry's empirical
//! parameters are a smooth (fixed random linear map + sigmoid) function of
//! its fingerprint, so a network can in principle learn the mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Constituent, PolymerKind, PolymerSample, SHEAR_OFFSET};
use crate::physics::{log_eta, EmpiricalParams, PhysicalConditions};

/// Fingerprint width of synthetic chemistries.
pub const FP_DIM: usize = 16;

/// Seed of the fixed fingerprint-to-parameter linear map. Independent of the
/// dataset seed so different datasets share one underlying structure.
const PARAM_MAP_SEED: u64 = 0x9E3779B97F4A7C15;

/// Physical-unit sampling ranges for the per-chemistry true parameters,
/// in field order without the transition sharpness entries.
const LOG_K1_RANGE: (f64, f64) = (-2.5, -1.5);
const ALPHA1_RANGE: (f64, f64) = (0.9, 1.1);
const ALPHA2_RANGE: (f64, f64) = (3.0, 3.8);
const LOG_MCR_RANGE: (f64, f64) = (2.5, 5.0);
const C1_RANGE: (f64, f64) = (5.0, 12.0);
const C2_RANGE: (f64, f64) = (80.0, 180.0);
const TR_RANGE: (f64, f64) = (260.0, 290.0);
const N_RANGE: (f64, f64) = (0.25, 0.75);
const LOG_GCR_RANGE: (f64, f64) = (-3.0, 4.0);

/// Transition sharpness in physical log10 coordinates. Chosen so the
/// scaled-domain equivalent lands inside the graph's representable ranges
/// for dataset-like viscosity spans.
pub const BETA_PHYSICAL: f64 = 3.0;

/// Condition sampling ranges.
const LOG_MW_RANGE: (f64, f64) = (2.0, 7.0);
const TEMP_RANGE: (f64, f64) = (300.0, 500.0);
const LOG_SHEAR_RANGE: (f64, f64) = (-3.0, 5.0);
const ZERO_SHEAR_FRACTION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid counts: n_chem = {n_chem}, pts_per_chem = {pts_per_chem}")]
    InvalidCounts { n_chem: usize, pts_per_chem: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticChemistry {
    pub id: String,
    pub fingerprint: Vec<f64>,
    /// True empirical parameters in physical units (log10 g/mol, Kelvin).
    pub true_params: EmpiricalParams,
    pub pdi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<PolymerSample>,
    pub chemistries: Vec<SyntheticChemistry>,
}

fn sigmoid(x: f64) -> f64 {
    crate::physics::smooth_heaviside(x, 1.0)
}

/// Maps a unit fingerprint to true parameters through the fixed linear map.
fn params_for_fingerprint(fp: &[f64]) -> EmpiricalParams {
    let mut map_rng = ChaCha8Rng::seed_from_u64(PARAM_MAP_SEED);
    let ranges = [
        LOG_K1_RANGE, ALPHA1_RANGE, ALPHA2_RANGE, LOG_MCR_RANGE,
        C1_RANGE, C2_RANGE, TR_RANGE, N_RANGE, LOG_GCR_RANGE,
    ];
    let mut out = [0.0f64; 9];
    for (slot, &(lo, hi)) in out.iter_mut().zip(ranges.iter()) {
        let row: Vec<f64> = (0..FP_DIM).map(|_| map_rng.gen_range(-1.0..1.0)).collect();
        let z: f64 = row.iter().zip(fp.iter()).map(|(a, b)| a * b).sum();
        // fp is unit norm, so z is O(1); gain 2 spreads the sigmoid output
        *slot = lo + (hi - lo) * sigmoid(2.0 * z);
    }
    EmpiricalParams {
        log_k1: out[0],
        alpha1: out[1],
        alpha2: out[2],
        log_mcr: out[3],
        beta_mw: BETA_PHYSICAL,
        c1: out[4],
        c2: out[5],
        tr: out[6],
        n: out[7],
        log_gcr: out[8],
        beta_g: BETA_PHYSICAL,
    }
}

/// Generates `n_chem` chemistries with `pts_per_chem` measurements each.
/// Gaussian noise of `noise_sigma` log10 units is added to the viscosity.
/// Fully deterministic given `seed`.
pub fn generate(
    n_chem: usize,
    pts_per_chem: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticDataset, SynthError> {
    if n_chem == 0 || pts_per_chem == 0 {
        return Err(SynthError::InvalidCounts { n_chem, pts_per_chem });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("valid sigma");
    let mut chemistries = Vec::with_capacity(n_chem);
    let mut samples = Vec::with_capacity(n_chem * pts_per_chem);

    for ci in 0..n_chem {
        let mut fp: Vec<f64> = (0..FP_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = fp.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in fp.iter_mut() {
            *v /= norm;
        }
        let true_params = params_for_fingerprint(&fp);
        let pdi = rng.gen_range(1.5..3.5);
        let id = format!("SYN{ci}");

        for pi in 0..pts_per_chem {
            let log_mw = rng.gen_range(LOG_MW_RANGE.0..LOG_MW_RANGE.1);
            let temp = rng.gen_range(TEMP_RANGE.0..TEMP_RANGE.1);
            let shear = if rng.gen_bool(ZERO_SHEAR_FRACTION) {
                0.0
            } else {
                10f64.powf(rng.gen_range(LOG_SHEAR_RANGE.0..LOG_SHEAR_RANGE.1))
            };
            let cond = PhysicalConditions {
                log_mw,
                t: temp,
                log_g: (shear + SHEAR_OFFSET).log10(),
            };
            let clean = log_eta(&cond, &true_params)
                .expect("synthetic conditions stay inside the WLF window");
            let log_eta_noisy =
                if noise_sigma > 0.0 { clean + noise.sample(&mut rng) } else { clean };
            samples.push(PolymerSample {
                record_id: format!("c{ci}-p{pi}"),
                kind: PolymerKind::Homopolymer,
                constituents: vec![Constituent {
                    smiles: id.clone(),
                    fraction: 1.0,
                    mw: None,
                    pdi: None,
                }],
                fingerprint: fp.clone(),
                mw: 10f64.powf(log_mw),
                pdi: Some(pdi),
                pdi_imputed: false,
                temp,
                shear_rate: shear,
                log_eta: log_eta_noisy,
                augmented: false,
            });
        }
        chemistries.push(SyntheticChemistry { id, fingerprint: fp, true_params, pdi });
    }
    Ok(SyntheticDataset { samples, chemistries })
}
