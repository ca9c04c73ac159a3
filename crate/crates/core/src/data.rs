//! Dataset ingestion, fingerprint aggregation, PDI imputation, low-Mw
//! augmentation, and the invertible scaling layer shared by all models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{EmpiricalParams, PhysicalConditions};

/// Median PDI of the curated literature dataset, used for imputation.
pub const MEDIAN_PDI: f64 = 2.06;

/// Additive offset applied to shear rate before taking log10, so that
/// zero-shear measurements stay representable.
pub const SHEAR_OFFSET: f64 = 1e-5;

/// Width of the fallback feature-hashed fingerprint.
pub const FALLBACK_FP_WIDTH: usize = 128;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse { line: usize, column: String, reason: String },
    #[error("record {record_id}: {detail}")]
    InvariantViolation { record_id: String, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate range on channel {0} (max == min)")]
    DegenerateRange(String),
    #[error("blend harmonic mean undefined: non-positive component {component}")]
    NonPositiveComponent { component: usize },
    #[error("empty SMILES string")]
    EmptySmiles,
    #[error("chemistry {0}: too few zero-shear entangled points ({1})")]
    TooFewPoints(String, usize),
    #[error("chemistry {0}: no reference Mcr supplied")]
    MissingMcr(String),
    #[error("sample {0} has no PDI; run imputation first")]
    MissingPdi(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolymerKind {
    Homopolymer,
    Copolymer,
    Blend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constituent {
    pub smiles: String,
    pub fraction: f64,
    pub mw: Option<f64>,
    pub pdi: Option<f64>,
}

/// One viscosity measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolymerSample {
    pub record_id: String,
    pub kind: PolymerKind,
    pub constituents: Vec<Constituent>,
    /// Aggregated fingerprint (precomputed or fallback).
    pub fingerprint: Vec<f64>,
    /// Weight-average molecular weight, g/mol.
    pub mw: f64,
    pub pdi: Option<f64>,
    pub pdi_imputed: bool,
    /// Temperature, Kelvin.
    pub temp: f64,
    /// Shear rate, 1/s (0 means zero-shear measurement).
    pub shear_rate: f64,
    /// log10 melt viscosity.
    pub log_eta: f64,
    pub augmented: bool,
}

impl PolymerSample {
    /// Chemistry identity used for grouping and monomer-level splitting.
    pub fn chemistry_key(&self) -> String {
        self.constituents
            .iter()
            .map(|c| format!("{}:{:.6}", c.smiles, c.fraction))
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn pdi_value(&self) -> Result<f64, DataError> {
        self.pdi.ok_or_else(|| DataError::MissingPdi(self.record_id.clone()))
    }
}

// ---------------------------------------------------------------------------
// fingerprints

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic feature-hashed character n-gram (n = 2, 3) count vector,
/// L2-normalized. A stand-in for proper chemistry descriptors.
pub fn fallback_fingerprint(smiles: &str) -> Result<Vec<f64>, DataError> {
    if smiles.is_empty() {
        return Err(DataError::EmptySmiles);
    }
    let mut v = vec![0.0f64; FALLBACK_FP_WIDTH];
    let bytes = smiles.as_bytes();
    for n in [2usize, 3] {
        if bytes.len() < n {
            // count the whole string as one gram
            v[(fnv1a(bytes) % FALLBACK_FP_WIDTH as u64) as usize] += 1.0;
            continue;
        }
        for w in bytes.windows(n) {
            v[(fnv1a(w) % FALLBACK_FP_WIDTH as u64) as usize] += 1.0;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    Ok(v)
}

/// Aggregates per-unit fingerprints into one vector: composition-weighted
/// arithmetic mean for copolymers, composition-weighted harmonic mean for
/// blends. Components that are non-positive in any constituent fall back to
/// the arithmetic rule (the harmonic mean is undefined there); each such
/// record is logged.
pub fn aggregate_fingerprint(
    constituents: &[(Vec<f64>, f64)],
    kind: PolymerKind,
) -> Result<Vec<f64>, DataError> {
    assert!(!constituents.is_empty());
    let width = constituents[0].0.len();
    let mut out = vec![0.0f64; width];
    let mut fallbacks = 0usize;
    for j in 0..width {
        let arithmetic: f64 = constituents.iter().map(|(fp, w)| w * fp[j]).sum();
        out[j] = match kind {
            PolymerKind::Homopolymer | PolymerKind::Copolymer => arithmetic,
            PolymerKind::Blend => {
                if constituents.iter().all(|(fp, _)| fp[j] > 0.0) {
                    let inv: f64 = constituents.iter().map(|(fp, w)| w / fp[j]).sum();
                    1.0 / inv
                } else {
                    fallbacks += 1;
                    arithmetic
                }
            }
        };
    }
    if fallbacks > 0 {
        log::warn!(
            "blend aggregation fell back to arithmetic mean on {fallbacks}/{width} components"
        );
    }
    Ok(out)
}

/// Weighted average used for per-unit Mw/PDI of blends.
pub fn aggregate_scalar(values: &[(f64, f64)]) -> f64 {
    values.iter().map(|(v, w)| v * w).sum()
}

// ---------------------------------------------------------------------------
// imputation and augmentation

/// Fills missing PDI values with the frozen dataset median (2.06) or, when
/// `recompute` is set, the median of the PDI values present in `samples`.
pub fn impute_pdi(samples: &mut [PolymerSample], recompute: bool) {
    let fill = if recompute {
        let mut present: Vec<f64> = samples.iter().filter_map(|s| s.pdi).collect();
        if present.is_empty() {
            MEDIAN_PDI
        } else {
            present.sort_by(|a, b| a.partial_cmp(b).unwrap());
            present[present.len() / 2]
        }
    } else {
        MEDIAN_PDI
    };
    for s in samples.iter_mut() {
        if s.pdi.is_none() {
            s.pdi = Some(fill);
            s.pdi_imputed = true;
        }
    }
}

/// Low-Mw augmentation: for each chemistry with more than five zero-shear
/// points above its reference Mcr, fit the entangled power-law branch,
/// extend the unentangled branch (slope 1) below Mcr through the continuity
/// constraint, and emit synthetic points on a log-uniform Mw grid.
pub fn augment_low_mw(
    samples: &[PolymerSample],
    mcr_by_chemistry: &BTreeMap<String, f64>,
    grid_points: usize,
) -> Result<Vec<PolymerSample>, DataError> {
    let mut by_chem: BTreeMap<String, Vec<&PolymerSample>> = BTreeMap::new();
    for s in samples {
        if s.shear_rate == 0.0 {
            by_chem.entry(s.chemistry_key()).or_default().push(s);
        }
    }
    let mut added = Vec::new();
    for (chem, pts) in by_chem {
        let Some(&mcr) = mcr_by_chemistry.get(&chem) else { continue };
        let log_mcr = mcr.log10();
        let entangled: Vec<&&PolymerSample> = pts.iter().filter(|s| s.mw > mcr).collect();
        if entangled.len() <= 5 {
            continue;
        }
        // least-squares line log_eta = b + a2 * log_mw over the entangled points
        let n = entangled.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for s in &entangled {
            let x = s.mw.log10();
            sx += x;
            sy += s.log_eta;
            sxx += x * x;
            sxy += x * s.log_eta;
        }
        let a2 = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let b = (sy - a2 * sx) / n;
        let value_at_mcr = b + a2 * log_mcr;

        let template = entangled[entangled.len() / 2];
        let lo = 2.0f64; // 10^2 g/mol
        let hi = (mcr / 2.0).log10();
        if hi <= lo {
            continue;
        }
        for i in 0..grid_points {
            let log_mw = lo + (hi - lo) * i as f64 / (grid_points.max(2) - 1) as f64;
            // unentangled branch through the intersection, slope ~1
            let log_eta = value_at_mcr + 1.0 * (log_mw - log_mcr);
            added.push(PolymerSample {
                record_id: format!("{}-aug{}", template.record_id, i),
                mw: 10f64.powf(log_mw),
                log_eta,
                augmented: true,
                ..(*template).clone()
            });
        }
    }
    Ok(added)
}

// ---------------------------------------------------------------------------
// scaling

/// Strictly monotone affine map from [min, max] onto [-1, 1]. Values outside
/// the fitted range map linearly outside (-1, 1); nothing is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub min: f64,
    pub max: f64,
}

impl Affine {
    pub fn apply(&self, x: f64) -> f64 {
        if self.max == self.min {
            return 0.0; // degenerate channel, constant maps to center
        }
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y + 1.0) * (self.max - self.min) / 2.0 + self.min
    }

    /// d(scaled)/d(raw).
    pub fn slope(&self) -> f64 {
        2.0 / (self.max - self.min)
    }
}

/// The invertible scaling layer binding raw physical units to the (-1, 1)
/// graph domain. Fitted on the training split only. log10 Mw and
/// log10(shear + 1e-5) share the log10-viscosity bounds; temperature and
/// the other inputs get their own min-max maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub fingerprint: Vec<Affine>,
    pub pdi: Affine,
    pub temp: Affine,
    pub log_eta: Affine,
}

/// A sample mapped into graph coordinates.
#[derive(Debug, Clone)]
pub struct ScaledSample {
    pub fingerprint: Vec<f64>,
    pub pdi: f64,
    pub cond: PhysicalConditions,
    pub log_eta: f64,
}

pub fn fit_scaling(samples: &[PolymerSample]) -> Result<ScalingSpec, DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let width = samples[0].fingerprint.len();
    let mut fp_min = vec![f64::INFINITY; width];
    let mut fp_max = vec![f64::NEG_INFINITY; width];
    let (mut pdi_min, mut pdi_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut e_min, mut e_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in samples {
        if s.fingerprint.len() != width {
            return Err(DataError::InvariantViolation {
                record_id: s.record_id.clone(),
                detail: format!(
                    "fingerprint length {} differs from dataset width {width}",
                    s.fingerprint.len()
                ),
            });
        }
        for (j, &v) in s.fingerprint.iter().enumerate() {
            fp_min[j] = fp_min[j].min(v);
            fp_max[j] = fp_max[j].max(v);
        }
        let pdi = s.pdi_value()?;
        pdi_min = pdi_min.min(pdi);
        pdi_max = pdi_max.max(pdi);
        t_min = t_min.min(s.temp);
        t_max = t_max.max(s.temp);
        e_min = e_min.min(s.log_eta);
        e_max = e_max.max(s.log_eta);
    }
    if pdi_max == pdi_min && samples.len() > 1 {
        // constant PDI is tolerated (maps to 0) only because imputation can
        // legitimately produce it; eta and temp must carry real spread
    }
    if e_max == e_min {
        return Err(DataError::DegenerateRange("log_eta".into()));
    }
    if t_max == t_min {
        return Err(DataError::DegenerateRange("temp".into()));
    }
    Ok(ScalingSpec {
        fingerprint: fp_min
            .into_iter()
            .zip(fp_max)
            .map(|(min, max)| Affine { min, max })
            .collect(),
        pdi: Affine { min: pdi_min, max: pdi_max },
        temp: Affine { min: t_min, max: t_max },
        log_eta: Affine { min: e_min, max: e_max },
    })
}

impl ScalingSpec {
    pub fn scale_log_mw(&self, mw: f64) -> f64 {
        self.log_eta.apply(mw.log10())
    }

    pub fn scale_temp(&self, t: f64) -> f64 {
        self.temp.apply(t)
    }

    pub fn scale_shear(&self, shear: f64) -> f64 {
        self.log_eta.apply((shear + SHEAR_OFFSET).log10())
    }

    pub fn scale_log_eta(&self, log_eta: f64) -> f64 {
        self.log_eta.apply(log_eta)
    }

    pub fn unscale_log_eta(&self, y: f64) -> f64 {
        self.log_eta.invert(y)
    }

    pub fn scale_conditions(&self, mw: f64, temp: f64, shear: f64) -> PhysicalConditions {
        PhysicalConditions {
            log_mw: self.scale_log_mw(mw),
            t: self.scale_temp(temp),
            log_g: self.scale_shear(shear),
        }
    }

    pub fn scale_sample(&self, s: &PolymerSample) -> Result<ScaledSample, DataError> {
        Ok(ScaledSample {
            fingerprint: s
                .fingerprint
                .iter()
                .zip(self.fingerprint.iter())
                .map(|(&v, a)| a.apply(v))
                .collect(),
            pdi: self.pdi.apply(s.pdi_value()?),
            cond: self.scale_conditions(s.mw, s.temp, s.shear_rate),
            log_eta: self.scale_log_eta(s.log_eta),
        })
    }

    /// Converts empirical parameters from graph coordinates to physical
    /// units (log10 g/mol, Kelvin, decades of viscosity). The conversion is
    /// exact: evaluating the physics in either coordinate system gives the
    /// same viscosity after unscaling.
    pub fn params_to_physical(&self, p: &EmpiricalParams) -> EmpiricalParams {
        let a = self.log_eta.slope();
        let c = self.temp.slope();
        let e_min = self.log_eta.min;
        EmpiricalParams {
            log_k1: (p.log_k1 + 1.0 - p.alpha1) / a + e_min * (1.0 - p.alpha1),
            alpha1: p.alpha1,
            alpha2: p.alpha2,
            log_mcr: self.log_eta.invert(p.log_mcr),
            beta_mw: p.beta_mw * a,
            c1: p.c1 / a,
            c2: p.c2 / c,
            tr: self.temp.invert(p.tr),
            n: p.n,
            log_gcr: self.log_eta.invert(p.log_gcr),
            beta_g: p.beta_g * a,
        }
    }

    /// Inverse of [`Self::params_to_physical`].
    pub fn params_to_scaled(&self, p: &EmpiricalParams) -> EmpiricalParams {
        let a = self.log_eta.slope();
        let c = self.temp.slope();
        let e_min = self.log_eta.min;
        EmpiricalParams {
            log_k1: a * (p.log_k1 - e_min * (1.0 - p.alpha1)) - 1.0 + p.alpha1,
            alpha1: p.alpha1,
            alpha2: p.alpha2,
            log_mcr: self.log_eta.apply(p.log_mcr),
            beta_mw: p.beta_mw / a,
            c1: p.c1 * a,
            c2: p.c2 * c,
            tr: self.temp.apply(p.tr),
            n: p.n,
            log_gcr: self.log_eta.apply(p.log_gcr),
            beta_g: p.beta_g / a,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct Columns {
    record_id: usize,
    kind: usize,
    smiles: Vec<usize>,
    fraction: Vec<usize>,
    mw: usize,
    pdi: usize,
    temp: usize,
    shear: usize,
    viscosity: usize,
    fp: Vec<usize>,
}

fn locate_columns(header: &csv::StringRecord) -> Result<Columns, DataError> {
    let find = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Parse {
                line: 1,
                column: name.to_string(),
                reason: "required column missing".into(),
            })
    };
    let mut smiles = Vec::new();
    let mut fraction = Vec::new();
    let mut fp = Vec::new();
    for (i, h) in header.iter().enumerate() {
        if let Some(rest) = h.strip_prefix("smiles_") {
            if rest.parse::<usize>().is_ok() {
                smiles.push((rest.parse::<usize>().unwrap(), i));
            }
        } else if let Some(rest) = h.strip_prefix("fraction_") {
            if rest.parse::<usize>().is_ok() {
                fraction.push((rest.parse::<usize>().unwrap(), i));
            }
        } else if let Some(rest) = h.strip_prefix("fp_") {
            if rest.parse::<usize>().is_ok() {
                fp.push((rest.parse::<usize>().unwrap(), i));
            }
        }
    }
    smiles.sort();
    fraction.sort();
    fp.sort();
    if smiles.is_empty() {
        return Err(DataError::Parse {
            line: 1,
            column: "smiles_1".into(),
            reason: "no smiles_k columns found".into(),
        });
    }
    Ok(Columns {
        record_id: find("record_id")?,
        kind: find("kind")?,
        smiles: smiles.into_iter().map(|(_, i)| i).collect(),
        fraction: fraction.into_iter().map(|(_, i)| i).collect(),
        mw: find("mw_gmol")?,
        pdi: find("pdi")?,
        temp: find("temp_K")?,
        shear: find("shear_1_per_s")?,
        viscosity: find("viscosity")?,
        fp: fp.into_iter().map(|(_, i)| i).collect(),
    })
}

fn parse_f64(record: &csv::StringRecord, idx: usize, line: usize, col: &str) -> Result<f64, DataError> {
    let raw = record.get(idx).unwrap_or("");
    raw.trim().parse::<f64>().map_err(|e| DataError::Parse {
        line,
        column: col.to_string(),
        reason: format!("{e}: {raw:?}"),
    })
}

/// Loads and validates the dataset CSV. When fingerprint columns are absent,
/// per-unit fallback fingerprints are computed and aggregated by kind.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<Vec<PolymerSample>, DataError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let cols = locate_columns(&header)?;
    let mut samples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = row_idx + 2; // header is line 1
        let record_id = record.get(cols.record_id).unwrap_or("").trim().to_string();
        if record_id.is_empty() {
            return Err(DataError::Parse {
                line,
                column: "record_id".into(),
                reason: "empty".into(),
            });
        }
        let kind = match record.get(cols.kind).unwrap_or("").trim() {
            "homopolymer" => PolymerKind::Homopolymer,
            "copolymer" => PolymerKind::Copolymer,
            "blend" => PolymerKind::Blend,
            other => {
                return Err(DataError::Parse {
                    line,
                    column: "kind".into(),
                    reason: format!("unknown kind {other:?}"),
                })
            }
        };
        let mut constituents = Vec::new();
        for (k, &si) in cols.smiles.iter().enumerate() {
            let smiles = record.get(si).unwrap_or("").trim().to_string();
            if smiles.is_empty() {
                continue;
            }
            let fraction = match cols.fraction.get(k) {
                Some(&fi) if !record.get(fi).unwrap_or("").trim().is_empty() => {
                    parse_f64(&record, fi, line, "fraction")?
                }
                _ => 1.0,
            };
            constituents.push(Constituent { smiles, fraction, mw: None, pdi: None });
        }
        if constituents.is_empty() {
            return Err(DataError::Parse {
                line,
                column: "smiles_1".into(),
                reason: "no constituents".into(),
            });
        }
        let frac_sum: f64 = constituents.iter().map(|c| c.fraction).sum();
        if (frac_sum - 1.0).abs() > 1e-6 {
            return Err(DataError::InvariantViolation {
                record_id,
                detail: format!("composition fractions sum to {frac_sum}, expected 1"),
            });
        }

        let mw = parse_f64(&record, cols.mw, line, "mw_gmol")?;
        let pdi_raw = record.get(cols.pdi).unwrap_or("").trim().to_string();
        let pdi = if pdi_raw.is_empty() { None } else { Some(parse_f64(&record, cols.pdi, line, "pdi")?) };
        let temp = parse_f64(&record, cols.temp, line, "temp_K")?;
        let shear = parse_f64(&record, cols.shear, line, "shear_1_per_s")?;
        let viscosity = parse_f64(&record, cols.viscosity, line, "viscosity")?;

        if mw <= 0.0 || temp <= 0.0 || viscosity <= 0.0 || shear < 0.0 {
            return Err(DataError::InvariantViolation {
                record_id,
                detail: "mw, temp, viscosity must be positive; shear non-negative".into(),
            });
        }
        if let Some(p) = pdi {
            if p < 1.0 {
                return Err(DataError::InvariantViolation {
                    record_id,
                    detail: format!("PDI {p} < 1"),
                });
            }
        }

        let fingerprint = if cols.fp.is_empty() {
            let per_unit: Vec<(Vec<f64>, f64)> = constituents
                .iter()
                .map(|c| Ok((fallback_fingerprint(&c.smiles)?, c.fraction)))
                .collect::<Result<_, DataError>>()?;
            aggregate_fingerprint(&per_unit, kind)?
        } else {
            cols.fp
                .iter()
                .map(|&fi| parse_f64(&record, fi, line, "fp"))
                .collect::<Result<Vec<f64>, _>>()?
        };

        samples.push(PolymerSample {
            record_id,
            kind,
            constituents,
            fingerprint,
            mw,
            pdi,
            pdi_imputed: false,
            temp,
            shear_rate: shear,
            log_eta: viscosity.log10(),
            augmented: false,
        });
    }
    if samples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let width = samples[0].fingerprint.len();
    for s in &samples {
        if s.fingerprint.len() != width {
            return Err(DataError::InvariantViolation {
                record_id: s.record_id.clone(),
                detail: "fingerprint length not uniform across dataset".into(),
            });
        }
    }
    Ok(samples)
}

/// Writes samples back out in the dataset CSV schema (with fingerprint
/// columns), for synthetic data emission and ingest round-trips.
pub fn write_dataset<P: AsRef<Path>>(path: P, samples: &[PolymerSample]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let k = samples.iter().map(|s| s.constituents.len()).max().unwrap_or(1);
    let d = samples.first().map(|s| s.fingerprint.len()).unwrap_or(0);
    let mut header = vec!["record_id".to_string(), "kind".to_string()];
    for i in 1..=k {
        header.push(format!("smiles_{i}"));
    }
    for i in 1..=k {
        header.push(format!("fraction_{i}"));
    }
    header.extend(
        ["mw_gmol", "pdi", "temp_K", "shear_1_per_s", "viscosity"].map(String::from),
    );
    for j in 0..d {
        header.push(format!("fp_{j}"));
    }
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.record_id.clone(),
            match s.kind {
                PolymerKind::Homopolymer => "homopolymer",
                PolymerKind::Copolymer => "copolymer",
                PolymerKind::Blend => "blend",
            }
            .to_string(),
        ];
        for i in 0..k {
            row.push(s.constituents.get(i).map(|c| c.smiles.clone()).unwrap_or_default());
        }
        for i in 0..k {
            row.push(
                s.constituents
                    .get(i)
                    .map(|c| format!("{}", c.fraction))
                    .unwrap_or_default(),
            );
        }
        row.push(format!("{}", s.mw));
        row.push(s.pdi.map(|p| format!("{p}")).unwrap_or_default());
        row.push(format!("{}", s.temp));
        row.push(format!("{}", s.shear_rate));
        row.push(format!("{}", 10f64.powf(s.log_eta)));
        for &v in &s.fingerprint {
            row.push(format!("{v}"));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
