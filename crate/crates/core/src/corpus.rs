//! Clear-sky profile corpus: simulated clear-day shapes across a grid of
//! site geometries, summarized by a mean profile and a small orthonormal
//! shape basis.
//!
//! Irradiance comes from a broadband clear-sky model with closed-form fits
//! in aerosol optical depth, precipitable water, and pressure. Each grid
//! geometry contributes one normalized profile per declination bin,
//! processed with the same masking and resampling rules as measured data
//! and scaled by its own robust peak, mirroring the per-day envelope
//! normalization of measured days.

use crate::error::{Error, Result};
use crate::io;
use crate::preprocess::{self, PROFILE_LEN};
use crate::solar::{self, SunPosition, N_BINS};
use crate::stats::percentile;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use std::fmt::Write as _;
use std::path::Path;

/// Atmospheric conditions for the clear-sky model.
#[derive(Debug, Clone)]
pub struct ClearSkyParams {
    /// Aerosol optical depth at 700 nm.
    pub aod700: f64,
    /// Precipitable water in cm.
    pub precipitable_water: f64,
    /// Surface pressure in Pa.
    pub pressure: f64,
    /// Ground albedo for the transposition model.
    pub albedo: f64,
}

impl Default for ClearSkyParams {
    fn default() -> Self {
        Self {
            aod700: 0.10,
            precipitable_water: 1.0,
            pressure: 101_325.0,
            albedo: 0.2,
        }
    }
}

/// Broadband irradiance components in W/m^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Irradiance {
    pub ghi: f64,
    pub dni: f64,
    pub dhi: f64,
}

impl Irradiance {
    pub const ZERO: Irradiance = Irradiance {
        ghi: 0.0,
        dni: 0.0,
        dhi: 0.0,
    };
}

const SEA_LEVEL_PRESSURE: f64 = 101_325.0;
const EXTRATERRESTRIAL: f64 = 1364.0;

/// Clear-sky irradiance at the given apparent zenith angle (degrees).
/// Returns all zeros at or below the horizon.
pub fn clearsky_irradiance(zenith_deg: f64, params: &ClearSkyParams) -> Irradiance {
    if zenith_deg >= 90.0 {
        return Irradiance::ZERO;
    }
    let aod = params.aod700;
    let w = params.precipitable_water.max(0.2);
    let lnw = w.ln();
    let lnp = (params.pressure / SEA_LEVEL_PRESSURE).ln();
    let sin_elev = (90.0 - zenith_deg).to_radians().sin().max(1e-30);

    let i0p = EXTRATERRESTRIAL
        * (0.12 * w.powf(0.56) * aod * aod + 0.97 * w.powf(0.032) * aod
            + 1.08 * w.powf(0.0051)
            + 0.071 * lnp);

    let taub = (1.82 + 0.056 * lnw + 0.0071 * lnw * lnw) * aod
        + (0.33 + 0.045 * lnw + 0.0096 * lnw * lnw)
        + (0.0089 * w + 0.13) * lnp;
    let b = (0.00925 * aod * aod + 0.0148 * aod - 0.0172) * lnw
        + (-0.7565 * aod * aod + 0.5057 * aod + 0.4557);

    let taug = (1.24 + 0.047 * lnw + 0.0061 * lnw * lnw) * aod
        + (0.27 + 0.043 * lnw + 0.0090 * lnw * lnw)
        + (0.0079 * w + 0.1) * lnp;
    let g = -0.0147 * lnw - 0.3079 * aod * aod + 0.2846 * aod + 0.3798;

    let (taud, d);
    if aod >= 0.05 {
        taud = (-0.21 * w + 11.6) * aod.powi(4) + (0.27 * w - 20.7) * aod.powi(3)
            + (-0.134 * w + 15.5) * aod * aod
            + (0.0554 * w - 5.71) * aod
            + (0.0057 * w + 2.94)
            + (-0.71 * (1.0 + aod).powf(-15.0)) * lnp;
    } else {
        taud = (86.0 * w - 13_800.0) * aod.powi(4) + (-3.11 * w + 79.4) * aod.powi(3)
            + (-0.23 * w + 74.8) * aod * aod
            + (0.092 * w - 8.86) * aod
            + (0.0042 * w + 3.12)
            + (-0.83 * (1.0 + aod).powf(-17.2)) * lnp;
    }
    d = -0.337 * aod * aod + 0.63 * aod + 0.116 + lnp / (18.0 + 152.0 * aod);

    Irradiance {
        dni: i0p * (-taub / sin_elev.powf(b)).exp(),
        ghi: i0p * (-taug / sin_elev.powf(g)).exp() * sin_elev,
        dhi: i0p * (-taud / sin_elev.powf(d)).exp(),
    }
}

/// Plane-of-array irradiance (W/m^2) for a fixed tilted surface, using an
/// isotropic sky and isotropic ground reflection.
pub fn poa_irradiance(
    sun: &SunPosition,
    irr: &Irradiance,
    tilt_deg: f64,
    azimuth_deg: f64,
    albedo: f64,
) -> f64 {
    let z = sun.zenith.to_radians();
    let beta = tilt_deg.to_radians();
    let cos_aoi =
        z.cos() * beta.cos() + z.sin() * beta.sin() * (sun.azimuth - azimuth_deg).to_radians().cos();
    let beam = irr.dni * cos_aoi.max(0.0);
    let sky = irr.dhi * (1.0 + beta.cos()) / 2.0;
    let ground = irr.ghi * albedo * (1.0 - beta.cos()) / 2.0;
    beam + sky + ground
}

/// The grid of site geometries the corpus covers.
#[derive(Debug, Clone)]
pub struct CorpusGrids {
    pub lats: Vec<f64>,
    pub tilts: Vec<f64>,
    pub azimuths: Vec<f64>,
}

impl Default for CorpusGrids {
    fn default() -> Self {
        Self {
            lats: vec![30.0, 35.0, 40.0],
            tilts: (1..=12).map(|i| 5.0 * i as f64).collect(),
            azimuths: (0..=12).map(|i| 90.0 + 15.0 * i as f64).collect(),
        }
    }
}

impl CorpusGrids {
    pub fn canonical(&self, params: &ClearSkyParams) -> String {
        let mut s = String::new();
        writeln!(s, "lats,{}", io::join_floats(&self.lats)).expect("string write");
        writeln!(s, "tilts,{}", io::join_floats(&self.tilts)).expect("string write");
        writeln!(s, "azimuths,{}", io::join_floats(&self.azimuths)).expect("string write");
        writeln!(s, "aod700,{}", params.aod700).expect("string write");
        writeln!(s, "precipitable_water,{}", params.precipitable_water).expect("string write");
        writeln!(s, "pressure,{}", params.pressure).expect("string write");
        writeln!(s, "albedo,{}", params.albedo).expect("string write");
        s
    }
}

/// Day of year (1..=365) whose declination is closest to the bin center;
/// ties go to the earlier day.
pub fn bin_center_day(bin: usize) -> u32 {
    let target = solar::bin_center(bin);
    let mut best = (f64::INFINITY, 1u32);
    for n in 1..=365u32 {
        let err = (solar::declination(n).expect("day in range") - target).abs();
        if err < best.0 {
            best = (err, n);
        }
    }
    best.1
}

const MINUTES_PER_DAY: usize = 1440;

/// Simulates one geometry's clear-sky power curves, one per declination
/// bin, at one-minute resolution over the solar day.
fn geometry_curves(
    sun_cache: &[Vec<(SunPosition, Irradiance)>],
    tilt: f64,
    azimuth: f64,
    albedo: f64,
) -> Vec<Vec<f64>> {
    sun_cache
        .iter()
        .map(|day| {
            day.iter()
                .map(|(sun, irr)| poa_irradiance(sun, irr, tilt, azimuth, albedo))
                .collect()
        })
        .collect()
}

/// Generates the corpus profile matrix, one row per (geometry, bin) pair
/// with a nonzero curve. Rows use the same masking, resampling, and
/// normalization rules as measured data.
pub fn generate_corpus(grids: &CorpusGrids, params: &ClearSkyParams) -> Result<Array2<f64>> {
    for &lat in &grids.lats {
        if lat.abs() >= solar::MAX_LAT {
            return Err(Error::UnsupportedLatitude { latitude: lat });
        }
    }
    let prep = preprocess::PrepConfig::default();
    let mut rows: Vec<Vec<f64>> = Vec::new();

    for &lat in &grids.lats {
        // Sun position and irradiance depend only on (lat, bin, minute);
        // cache them once per latitude and reuse across panel orientations.
        let sun_cache: Vec<Vec<(SunPosition, Irradiance)>> = (0..N_BINS)
            .map(|b| {
                let decl = solar::declination(bin_center_day(b)).expect("day in range");
                (0..MINUTES_PER_DAY)
                    .map(|m| {
                        let hour_angle = (m as f64 + 0.5) / MINUTES_PER_DAY as f64 * 360.0 - 180.0;
                        let sun = solar::sun_position_hour_angle(lat, decl, hour_angle)
                            .expect("latitude validated above");
                        let irr = clearsky_irradiance(sun.zenith, params);
                        (sun, irr)
                    })
                    .collect()
            })
            .collect();

        for &tilt in &grids.tilts {
            for &azimuth in &grids.azimuths {
                let curves = geometry_curves(&sun_cache, tilt, azimuth, params.albedo);
                let all: Vec<f64> = curves.iter().flatten().copied().collect();
                let detect_threshold =
                    prep.sunrise.threshold_frac * percentile(&all, prep.normalize_percentile);
                if detect_threshold <= 0.0 {
                    continue;
                }
                let mut resampled = Vec::new();
                for curve in &curves {
                    let rise = curve.iter().position(|&v| v > detect_threshold);
                    let set = curve.iter().rposition(|&v| v > detect_threshold);
                    let (Some(rise), Some(set)) = (rise, set) else {
                        continue;
                    };
                    if set <= rise {
                        continue;
                    }
                    resampled.push(preprocess::resample_window(
                        curve,
                        rise as f64,
                        set as f64,
                        PROFILE_LEN,
                    ));
                }
                // Each row is scaled by its own robust peak, matching the
                // per-day seasonal envelope applied to measured data; the
                // corpus then describes pure shapes, not seasonal amplitude.
                for mut r in resampled {
                    let scale = percentile(&r[1..PROFILE_LEN - 1], prep.normalize_percentile);
                    if scale <= 0.0 {
                        continue;
                    }
                    for v in &mut r {
                        *v = (*v / scale).min(prep.clip);
                    }
                    rows.push(r);
                }
            }
        }
    }

    if rows.is_empty() {
        return Err(Error::InsufficientData(
            "corpus grid produced no profiles".into(),
        ));
    }
    let mut out = Array2::zeros((rows.len(), PROFILE_LEN));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Mean profile plus leading orthonormal shape directions of a corpus.
#[derive(Debug, Clone)]
pub struct ClearSkyCorpus {
    /// Mean profile, length [`PROFILE_LEN`].
    pub mu: Array1<f64>,
    /// Eigenvalues of the sample covariance, descending, one per kept
    /// direction.
    pub lambda: Vec<f64>,
    /// Orthonormal basis, [`PROFILE_LEN`] by `lambda.len()`.
    pub q: Array2<f64>,
    /// Number of directions requested at fit time.
    pub k_requested: usize,
    /// Total covariance trace and the part captured by the kept directions.
    pub trace_total: f64,
    pub trace_captured: f64,
    pub n_profiles: usize,
    pub params_hash: String,
}

impl ClearSkyCorpus {
    pub fn k_effective(&self) -> usize {
        self.lambda.len()
    }

    /// Fraction of profile variance the kept directions explain.
    pub fn captured_fraction(&self) -> f64 {
        if self.trace_total > 0.0 {
            self.trace_captured / self.trace_total
        } else {
            1.0
        }
    }

    /// Per-direction weights for the decomposition penalty.
    pub fn weights(&self, inverse_sqrt: bool) -> Vec<f64> {
        self.lambda
            .iter()
            .map(|&l| if inverse_sqrt { 1.0 / l.sqrt() } else { 1.0 / l })
            .collect()
    }
}

/// Fits the mean and leading eigenvectors of the profile covariance.
///
/// Requires strictly more profiles than profile samples. Directions with
/// eigenvalues at numerical-noise level are dropped; each kept column is
/// sign-normalized so its largest-magnitude entry is positive, and the
/// first and last rows are forced to exact zero (profiles vanish there, so
/// those rows are zero up to rounding already).
pub fn fit_corpus(profiles: &Array2<f64>, k: usize, params_hash: &str) -> Result<ClearSkyCorpus> {
    let (n, p) = profiles.dim();
    if p != PROFILE_LEN {
        return Err(Error::DimensionMismatch(format!(
            "profiles have {p} columns, expected {PROFILE_LEN}"
        )));
    }
    if n <= p {
        return Err(Error::InsufficientData(format!(
            "{n} profiles cannot determine a {p}-dimensional covariance, need more than {p}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }

    let mut mu = Array1::zeros(p);
    for j in 0..p {
        mu[j] = profiles.column(j).mean().expect("nonempty column");
    }
    mu[0] = 0.0;
    mu[p - 1] = 0.0;

    let mut cov: DMatrix<f64> = DMatrix::zeros(p, p);
    for i in 0..n {
        let row = profiles.row(i);
        let centered: Vec<f64> = (0..p).map(|j| row[j] - mu[j]).collect();
        for a in 0..p {
            if centered[a] == 0.0 {
                continue;
            }
            for bidx in a..p {
                cov[(a, bidx)] += centered[a] * centered[bidx];
            }
        }
    }
    for a in 0..p {
        for bidx in a..p {
            let v = cov[(a, bidx)] / n as f64;
            cov[(a, bidx)] = v;
            cov[(bidx, a)] = v;
        }
    }
    let trace_total = cov.trace();

    let eigen = SymmetricEigen::new(cov);
    let eigenvalues: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let lambda_max = eigenvalues[order[0]].max(0.0);
    // The relative term drops numerically-zero directions of a healthy
    // spectrum; the absolute term handles a covariance that is itself pure
    // rounding noise (for example identical input rows).
    let floor = (1e-12 * lambda_max).max(1e-14 * (1.0 + trace_total));

    let mut lambda = Vec::new();
    let mut q = Array2::zeros((p, 0));
    let mut cols: Vec<Array1<f64>> = Vec::new();
    for &idx in order.iter().take(k) {
        let l = eigenvalues[idx];
        if l <= floor {
            break;
        }
        let mut col = Array1::zeros(p);
        for r in 0..p {
            col[r] = eigen.eigenvectors[(r, idx)];
        }
        // Deterministic sign: the largest-magnitude entry is positive.
        let mut peak = 0usize;
        for r in 1..p {
            if col[r].abs() > col[peak].abs() {
                peak = r;
            }
        }
        if col[peak] < 0.0 {
            col *= -1.0;
        }
        col[0] = 0.0;
        col[p - 1] = 0.0;
        lambda.push(l);
        cols.push(col);
    }
    if !cols.is_empty() {
        q = Array2::zeros((p, cols.len()));
        for (j, col) in cols.iter().enumerate() {
            q.column_mut(j).assign(col);
        }
    }

    let trace_captured = lambda.iter().sum();
    Ok(ClearSkyCorpus {
        mu,
        lambda,
        q,
        k_requested: k,
        trace_total,
        trace_captured,
        n_profiles: n,
        params_hash: params_hash.to_string(),
    })
}

/// Convenience wrapper: generate the grid corpus and fit it.
pub fn build_corpus(
    grids: &CorpusGrids,
    params: &ClearSkyParams,
    k: usize,
) -> Result<ClearSkyCorpus> {
    let hash = io::params_hash(&grids.canonical(params));
    let profiles = generate_corpus(grids, params)?;
    fit_corpus(&profiles, k, &hash)
}

const ARTIFACT_VERSION: &str = "1";

impl ClearSkyCorpus {
    /// Writes the corpus as a single versioned key-value document.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut pairs = vec![
            ("format_version".to_string(), ARTIFACT_VERSION.to_string()),
            ("params_hash".to_string(), self.params_hash.clone()),
            ("k_requested".to_string(), self.k_requested.to_string()),
            ("n_profiles".to_string(), self.n_profiles.to_string()),
            ("trace_total".to_string(), format!("{}", self.trace_total)),
            (
                "trace_captured".to_string(),
                format!("{}", self.trace_captured),
            ),
            ("mu".to_string(), io::join_floats(mu_slice(&self.mu))),
            ("lambda".to_string(), io::join_floats(&self.lambda)),
        ];
        for j in 0..self.k_effective() {
            let col: Vec<f64> = self.q.column(j).to_vec();
            pairs.push((format!("q_{j}"), io::join_floats(&col)));
        }
        io::write_kv(path, &pairs)
    }

    /// Reads back what [`ClearSkyCorpus::save`] wrote.
    pub fn load(path: &Path) -> Result<Self> {
        let kv = io::read_kv(path)?;
        let version = io::kv_get(&kv, "format_version")?;
        if version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported corpus format version {version:?}, expected {ARTIFACT_VERSION:?}"
            )));
        }
        let params_hash = io::kv_get(&kv, "params_hash")?.to_string();
        let parse_usize = |key: &str| -> Result<usize> {
            io::kv_get(&kv, key)?
                .parse()
                .map_err(|e| Error::Artifact(format!("bad {key}: {e}")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            io::kv_get(&kv, key)?
                .parse()
                .map_err(|e| Error::Artifact(format!("bad {key}: {e}")))
        };
        let k_requested = parse_usize("k_requested")?;
        let n_profiles = parse_usize("n_profiles")?;
        let trace_total = parse_f64("trace_total")?;
        let trace_captured = parse_f64("trace_captured")?;
        let mu_vec = io::split_floats(io::kv_get(&kv, "mu")?)?;
        if mu_vec.len() != PROFILE_LEN {
            return Err(Error::Artifact(format!(
                "mu has {} entries, expected {PROFILE_LEN}",
                mu_vec.len()
            )));
        }
        let lambda = io::split_floats(io::kv_get(&kv, "lambda")?)?;
        let mut q = Array2::zeros((PROFILE_LEN, lambda.len()));
        for j in 0..lambda.len() {
            let col = io::split_floats(io::kv_get(&kv, &format!("q_{j}"))?)?;
            if col.len() != PROFILE_LEN {
                return Err(Error::Artifact(format!(
                    "q_{j} has {} entries, expected {PROFILE_LEN}",
                    col.len()
                )));
            }
            for (r, &v) in col.iter().enumerate() {
                q[(r, j)] = v;
            }
        }
        Ok(Self {
            mu: Array1::from_vec(mu_vec),
            lambda,
            q,
            k_requested,
            trace_total,
            trace_captured,
            n_profiles,
            params_hash,
        })
    }
}

fn mu_slice(mu: &Array1<f64>) -> &[f64] {
    mu.as_slice().expect("contiguous array")
}
