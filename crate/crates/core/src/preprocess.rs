//! Transformation of a gap-filled day matrix into the declination-binned,
//! normalized profile matrix the decomposition consumes.
//!
//! Steps: label clear days, resample each usable day's daylight window onto a
//! fixed number of points, normalize by a smooth seasonal clear-sky envelope
//! so every clear day peaks near one, and average clear-day profiles within
//! each declination bin. The envelope removes the seasonal amplitude swing
//! (winter days peak well below summer days on most fixed arrays), which
//! would otherwise read as curvature along the declination axis and be
//! misattributed by the decomposition.

use crate::error::{Error, Result};
use crate::ingest::DayMatrix;
use crate::io;
use crate::solar::{self, DayGeometry, SunriseParams, N_BINS};
use crate::stats::{fill_missing_linear, percentile};
use ndarray::{Array1, Array2};
use std::fmt::Write as _;
use std::path::Path;

/// Samples per resampled daily profile.
pub const PROFILE_LEN: usize = 256;

/// Settings for the preparation pipeline. The hash of these values stamps
/// every derived artifact.
#[derive(Debug, Clone)]
pub struct PrepConfig {
    /// A day is clear only if its roughness is at most this factor times the
    /// low-percentile roughness of its bin.
    pub clear_smoothness_factor: f64,
    /// Percentile of per-bin roughness used as the smoothness baseline.
    pub smoothness_percentile: f64,
    /// A day is clear only if its energy reaches this fraction of the
    /// high-percentile energy of its neighborhood.
    pub clear_energy_factor: f64,
    /// Percentile of neighborhood energy used as the energy baseline.
    pub energy_percentile: f64,
    /// Neighborhood half-width in bins for the energy baseline.
    pub energy_neighbor_bins: usize,
    /// Percentile of clear daytime samples defining the normalization scale.
    pub normalize_percentile: f64,
    /// Curvature weight of the seasonal-envelope fit across days.
    pub envelope_kappa: f64,
    /// Upper clip for normalized values.
    pub clip: f64,
    /// Days shorter than this (hours) are dropped before resampling.
    pub min_day_length_h: f64,
    /// Minimum number of known (non-missing) bin rows.
    pub min_known_rows: usize,
    /// Sunrise/sunset detection settings.
    pub sunrise: SunriseParams,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            clear_smoothness_factor: 3.0,
            smoothness_percentile: 10.0,
            clear_energy_factor: 0.8,
            energy_percentile: 90.0,
            energy_neighbor_bins: 2,
            normalize_percentile: 98.0,
            envelope_kappa: 100.0,
            clip: 1.05,
            min_day_length_h: 4.0,
            min_known_rows: 24,
            sunrise: SunriseParams::default(),
        }
    }
}

impl PrepConfig {
    /// Canonical parameter string; identical settings give identical hashes.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: f64| writeln!(s, "{k},{v}").expect("string write");
        kv("bins", N_BINS as f64);
        kv("profile_len", PROFILE_LEN as f64);
        kv("clear_smoothness_factor", self.clear_smoothness_factor);
        kv("smoothness_percentile", self.smoothness_percentile);
        kv("clear_energy_factor", self.clear_energy_factor);
        kv("energy_percentile", self.energy_percentile);
        kv("energy_neighbor_bins", self.energy_neighbor_bins as f64);
        kv("normalize_percentile", self.normalize_percentile);
        kv("envelope_kappa", self.envelope_kappa);
        kv("clip", self.clip);
        kv("min_day_length_h", self.min_day_length_h);
        kv("min_known_rows", self.min_known_rows as f64);
        kv("sunrise_threshold_frac", self.sunrise.threshold_frac);
        kv("sunrise_q", self.sunrise.q_sunrise);
        kv("sunset_q", self.sunrise.q_sunset);
        kv("sunrise_kappa", self.sunrise.kappa);
        s
    }

    pub fn params_hash(&self) -> String {
        io::params_hash(&self.canonical())
    }
}

/// One resampled daily profile.
#[derive(Debug, Clone)]
pub struct DayProfile {
    pub values: Vec<f64>,
    pub day_index: usize,
    pub bin_index: usize,
    pub clear: bool,
}

/// The declination-binned matrix of averaged clear-day profiles, plus the
/// metadata needed to map results back to physical units.
///
/// `y` is [`N_BINS`] by [`PROFILE_LEN`]; rows are bins in ascending
/// declination order, missing rows are NaN with `known_mask` false (a row is
/// entirely known or entirely missing). Known rows start and end at zero.
#[derive(Debug, Clone)]
pub struct TransformedSignal {
    pub y: Array2<f64>,
    pub known_mask: Array2<bool>,
    /// kW per normalized unit, before the seasonal envelope factor.
    pub scale: f64,
    /// Seasonal envelope per bin relative to `scale`: bin `b` converts back
    /// to kilowatts through `scale * bin_scale[b]`. Interpolated from
    /// neighbors where the bin is missing.
    pub bin_scale: Vec<f64>,
    /// Day indices of the clear days averaged into each bin.
    pub bin_members: Vec<Vec<usize>>,
    /// Mean day length (hours) of each bin's members; NaN for missing bins.
    pub bin_day_length: Vec<f64>,
    pub params_hash: String,
}

/// Roughness and energy summary of one day's daylight window.
fn day_stats(m: &DayMatrix, g: &DayGeometry) -> Option<(f64, f64)> {
    let col = m.values.column(g.day_index);
    let lo = g.sunrise.ceil().max(0.0) as usize;
    let hi = (g.sunset.floor() as usize).min(col.len() - 1);
    if hi < lo + 3 {
        return None;
    }
    let day: Vec<f64> = (lo..=hi).map(|r| col[r]).collect();
    if day.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut rough = 0.0;
    for w in day.windows(3) {
        rough += (w[0] - 2.0 * w[1] + w[2]).abs();
    }
    rough /= (day.len() - 2) as f64;
    let energy: f64 = day.iter().sum::<f64>() * m.interval as f64 / 3600.0;
    Some((rough, energy))
}

/// Labels clear days.
///
/// A usable day is clear when (a) its mean absolute second difference over
/// the daylight window is at most `clear_smoothness_factor` times the
/// `smoothness_percentile` of that statistic within its declination bin, and
/// (b) its daytime energy reaches `clear_energy_factor` times the
/// `energy_percentile` of daily energies within `energy_neighbor_bins` bins.
pub fn detect_clear_days(
    m: &DayMatrix,
    geo: &[DayGeometry],
    cfg: &PrepConfig,
) -> Result<Vec<bool>> {
    if geo.len() != m.n_days() {
        return Err(Error::DimensionMismatch(format!(
            "geometry entries {} vs days {}",
            geo.len(),
            m.n_days()
        )));
    }
    let stats: Vec<Option<(f64, f64)>> = geo
        .iter()
        .map(|g| {
            if m.usable[g.day_index] {
                day_stats(m, g)
            } else {
                None
            }
        })
        .collect();

    let mut rough_by_bin: Vec<Vec<f64>> = vec![Vec::new(); N_BINS];
    let mut energy_by_bin: Vec<Vec<f64>> = vec![Vec::new(); N_BINS];
    for (g, s) in geo.iter().zip(&stats) {
        if let Some((rough, energy)) = s {
            rough_by_bin[g.bin_index].push(*rough);
            energy_by_bin[g.bin_index].push(*energy);
        }
    }

    let mut clear = vec![false; m.n_days()];
    for (g, s) in geo.iter().zip(&stats) {
        let Some((rough, energy)) = s else { continue };
        let bin = g.bin_index;
        let smooth_base = percentile(&rough_by_bin[bin], cfg.smoothness_percentile);
        let smooth_ok = *rough <= cfg.clear_smoothness_factor * smooth_base;

        let lo = bin.saturating_sub(cfg.energy_neighbor_bins);
        let hi = (bin + cfg.energy_neighbor_bins).min(N_BINS - 1);
        let pool: Vec<f64> = (lo..=hi).flat_map(|b| energy_by_bin[b].iter().copied()).collect();
        let energy_ok =
            *energy >= cfg.clear_energy_factor * percentile(&pool, cfg.energy_percentile);

        clear[g.day_index] = smooth_ok && energy_ok;
    }
    Ok(clear)
}

/// Samples `values` at `p` equally spaced fractional positions from `rise`
/// to `set` with linear interpolation, forcing the endpoints to zero.
pub(crate) fn resample_window(values: &[f64], rise: f64, set: f64, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p];
    let hi = (values.len() - 1) as f64;
    for (j, slot) in out.iter_mut().enumerate().take(p - 1).skip(1) {
        let pos = (rise + (set - rise) * j as f64 / (p - 1) as f64).clamp(0.0, hi);
        let base = pos.floor() as usize;
        let frac = pos - base as f64;
        *slot = if base + 1 < values.len() {
            values[base] * (1.0 - frac) + values[base + 1] * frac
        } else {
            values[base]
        };
    }
    out
}

/// Resamples every usable, long-enough day onto the fixed profile grid.
pub fn mask_resample(
    m: &DayMatrix,
    geo: &[DayGeometry],
    clear: &[bool],
    cfg: &PrepConfig,
) -> Result<Vec<DayProfile>> {
    if geo.len() != m.n_days() || clear.len() != m.n_days() {
        return Err(Error::DimensionMismatch(
            "geometry/clear flags must match day count".into(),
        ));
    }
    let mut out = Vec::new();
    for g in geo {
        if !m.usable[g.day_index] || g.day_length_h < cfg.min_day_length_h {
            continue;
        }
        let col: Vec<f64> = m.values.column(g.day_index).to_vec();
        if col.iter().any(|v| !v.is_finite()) {
            continue;
        }
        out.push(DayProfile {
            values: resample_window(&col, g.sunrise, g.sunset, PROFILE_LEN),
            day_index: g.day_index,
            bin_index: g.bin_index,
            clear: clear[g.day_index],
        });
    }
    Ok(out)
}

/// Outcome of [`normalize`]: the global kW scale plus the per-day envelope
/// relative to it.
#[derive(Debug, Clone)]
pub struct Normalization {
    /// kW per normalized unit, the `normalize_percentile` of clear daytime
    /// samples.
    pub scale: f64,
    /// Smooth per-day clear-sky amplitude divided by `scale`; day `d` was
    /// divided by `scale * day_scale[d]`.
    pub day_scale: Vec<f64>,
}

/// Smooth per-day clear-sky amplitude in kW, fitted through the robust
/// amplitudes of the clear days and interpolated across the rest.
fn seasonal_envelope(
    profiles: &[DayProfile],
    n_days: usize,
    cfg: &PrepConfig,
) -> Result<Vec<f64>> {
    let mut amp = vec![0.0; n_days];
    let mut valid = vec![false; n_days];
    for p in profiles.iter().filter(|p| p.clear) {
        assert!(
            p.day_index < n_days,
            "profile day {} outside the {n_days}-day span",
            p.day_index
        );
        amp[p.day_index] = percentile(&p.values[1..PROFILE_LEN - 1], cfg.normalize_percentile);
        valid[p.day_index] = true;
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::InvalidData("no clear days to set the scale".into()));
    }
    if n_days < 3 || n_valid < 2 {
        // Too short for the curvature fit; a constant envelope is exact for
        // a single observation anyway.
        let level = amp
            .iter()
            .zip(&valid)
            .filter(|(_, &v)| v)
            .map(|(&a, _)| a)
            .sum::<f64>()
            / n_valid as f64;
        return Ok(vec![level; n_days]);
    }
    solar::quantile_smooth(&amp, &valid, 0.5, cfg.envelope_kappa)
}

/// Normalizes profiles in place by the smooth seasonal clear-sky envelope
/// and clips at `clip`, so every clear day peaks near one regardless of
/// season. `n_days` is the day count of the source matrix.
pub fn normalize(
    profiles: &mut [DayProfile],
    n_days: usize,
    cfg: &PrepConfig,
) -> Result<Normalization> {
    let clear_samples: Vec<f64> = profiles
        .iter()
        .filter(|p| p.clear)
        .flat_map(|p| p.values[1..PROFILE_LEN - 1].iter().copied())
        .collect();
    if clear_samples.is_empty() {
        return Err(Error::InvalidData("no clear days to set the scale".into()));
    }
    let scale = percentile(&clear_samples, cfg.normalize_percentile);
    if scale <= 0.0 {
        return Err(Error::InvalidData(format!(
            "normalization scale {scale} is not positive (all-zero input?)"
        )));
    }
    let envelope = seasonal_envelope(profiles, n_days, cfg)?;
    if let Some(bad) = envelope.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::InvalidData(format!(
            "seasonal envelope reaches non-positive value {bad}"
        )));
    }
    for p in profiles.iter_mut() {
        let e = envelope[p.day_index];
        for v in &mut p.values {
            *v = (*v / e).min(cfg.clip);
        }
    }
    Ok(Normalization {
        scale,
        day_scale: envelope.iter().map(|e| e / scale).collect(),
    })
}

/// Averages clear-day profiles within each declination bin.
///
/// Bins with no clear member become missing rows. Errors when fewer than
/// `min_known_rows` bins are known.
pub fn bin_average(
    profiles: &[DayProfile],
    geo: &[DayGeometry],
    norm: &Normalization,
    cfg: &PrepConfig,
) -> Result<TransformedSignal> {
    let mut y = Array2::from_elem((N_BINS, PROFILE_LEN), f64::NAN);
    let mut known_mask = Array2::from_elem((N_BINS, PROFILE_LEN), false);
    let mut bin_members: Vec<Vec<usize>> = vec![Vec::new(); N_BINS];
    let mut bin_day_length = vec![f64::NAN; N_BINS];
    let mut bin_scale = vec![f64::NAN; N_BINS];
    let mut bin_known = vec![false; N_BINS];

    for b in 0..N_BINS {
        let members: Vec<&DayProfile> = profiles
            .iter()
            .filter(|p| p.clear && p.bin_index == b)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut row = Array1::zeros(PROFILE_LEN);
        for p in &members {
            for (i, &v) in p.values.iter().enumerate() {
                row[i] += v;
            }
        }
        row /= members.len() as f64;
        y.row_mut(b).assign(&row);
        known_mask.row_mut(b).fill(true);
        bin_members[b] = members.iter().map(|p| p.day_index).collect();
        let lengths: Vec<f64> = members
            .iter()
            .map(|p| geo[p.day_index].day_length_h)
            .collect();
        bin_day_length[b] = lengths.iter().sum::<f64>() / lengths.len() as f64;
        bin_scale[b] = members
            .iter()
            .map(|p| norm.day_scale[p.day_index])
            .sum::<f64>()
            / members.len() as f64;
        bin_known[b] = true;
    }

    let known_rows = bin_members.iter().filter(|m| !m.is_empty()).count();
    if known_rows < cfg.min_known_rows {
        return Err(Error::InsufficientData(format!(
            "only {known_rows} of {N_BINS} declination bins have clear days, need {}",
            cfg.min_known_rows
        )));
    }
    fill_missing_linear(&mut bin_scale, &bin_known)?;
    Ok(TransformedSignal {
        y,
        known_mask,
        scale: norm.scale,
        bin_members,
        bin_day_length,
        bin_scale,
        params_hash: cfg.params_hash(),
    })
}

impl TransformedSignal {
    /// True where bin `b` has data.
    pub fn known_row(&self, b: usize) -> bool {
        self.known_mask[(b, 0)]
    }

    /// Writes the matrix and a sidecar metadata document.
    pub fn save(&self, matrix_path: &Path, meta_path: &Path) -> Result<()> {
        io::write_matrix_tagged(matrix_path, &self.y, &self.params_hash)?;
        let mut pairs = vec![
            ("scale".to_string(), format!("{}", self.scale)),
            ("params_hash".to_string(), self.params_hash.clone()),
            (
                "bin_day_length".to_string(),
                io::join_floats(&self.bin_day_length),
            ),
            ("bin_scale".to_string(), io::join_floats(&self.bin_scale)),
        ];
        for (b, members) in self.bin_members.iter().enumerate() {
            let list = members
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(";");
            pairs.push((format!("bin_members_{b}"), list));
        }
        io::write_kv(meta_path, &pairs)
    }

    /// Reads back what [`TransformedSignal::save`] wrote.
    pub fn load(matrix_path: &Path, meta_path: &Path) -> Result<Self> {
        let y = io::read_matrix(matrix_path)?;
        if y.dim() != (N_BINS, PROFILE_LEN) {
            return Err(Error::DimensionMismatch(format!(
                "expected {N_BINS}x{PROFILE_LEN} matrix, got {:?}",
                y.dim()
            )));
        }
        let known_mask = y.mapv(|v| !v.is_nan());
        let meta = io::read_kv(meta_path)?;
        let scale: f64 = io::kv_get(&meta, "scale")?
            .parse()
            .map_err(|e| Error::Artifact(format!("bad scale: {e}")))?;
        let params_hash = io::kv_get(&meta, "params_hash")?.to_string();
        let bin_day_length = io::split_floats(io::kv_get(&meta, "bin_day_length")?)?;
        let bin_scale = io::split_floats(io::kv_get(&meta, "bin_scale")?)?;
        let mut bin_members = vec![Vec::new(); N_BINS];
        for (b, slot) in bin_members.iter_mut().enumerate() {
            if let Ok(list) = io::kv_get(&meta, &format!("bin_members_{b}")) {
                if !list.trim().is_empty() {
                    *slot = list
                        .split(';')
                        .map(|s| {
                            s.trim().parse::<usize>().map_err(|e| {
                                Error::Artifact(format!("bad member index {s:?}: {e}"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                }
            }
        }
        Ok(Self {
            y,
            known_mask,
            scale,
            bin_members,
            bin_day_length,
            bin_scale,
            params_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use ndarray::Array2;

    /// A day matrix whose columns are caller-provided, with daylight rows
    /// 6..=17 in a 24-row day.
    fn matrix_and_geo(cols: Vec<Vec<f64>>, bins: Vec<usize>) -> (DayMatrix, Vec<DayGeometry>) {
        let n = cols[0].len();
        let n_days = cols.len();
        let mut values = Array2::zeros((n, n_days));
        for (d, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                values[(r, d)] = v;
            }
        }
        let interval = (86400 / n) as u32;
        let m = DayMatrix {
            values,
            gap_mask: Array2::from_elem((n, n_days), false),
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            interval,
            usable: vec![true; n_days],
        };
        let geo = bins
            .into_iter()
            .enumerate()
            .map(|(d, bin_index)| DayGeometry {
                day_index: d,
                day_of_year: 1,
                declination: 0.0,
                bin_index,
                sunrise: 6.0,
                sunset: 17.0,
                day_length_h: (17.0 - 6.0) * interval as f64 / 3600.0,
            })
            .collect();
        (m, geo)
    }

    fn smooth_day() -> Vec<f64> {
        let mut col = vec![0.0; 24];
        for r in 6..=17 {
            let t = (r - 6) as f64 / 11.0;
            col[r] = 4.0 * (std::f64::consts::PI * t).sin().max(0.0);
        }
        col
    }

    #[test]
    fn identical_smooth_days_are_all_clear() {
        let cols = vec![smooth_day(); 30];
        let (m, geo) = matrix_and_geo(cols, vec![10; 30]);
        let clear = detect_clear_days(&m, &geo, &PrepConfig::default()).unwrap();
        assert!(clear.iter().all(|&c| c));
    }

    #[test]
    fn low_energy_day_is_cloudy() {
        let mut cols = vec![smooth_day(); 30];
        // One day at half power with some high-frequency structure.
        for (r, v) in cols[7].iter_mut().enumerate() {
            *v *= 0.5 * (1.0 + 0.2 * ((r % 2) as f64 - 0.5));
        }
        let (m, geo) = matrix_and_geo(cols, vec![10; 30]);
        let clear = detect_clear_days(&m, &geo, &PrepConfig::default()).unwrap();
        assert!(!clear[7]);
        assert!(clear[0] && clear[29]);
    }

    #[test]
    fn jagged_day_with_full_energy_is_cloudy() {
        let mut cols = vec![smooth_day(); 30];
        // Same energy, alternating ripple: fails the smoothness criterion.
        for (r, v) in cols[3].iter_mut().enumerate().take(18).skip(6) {
            *v *= if r % 2 == 0 { 1.35 } else { 0.65 };
        }
        let (m, geo) = matrix_and_geo(cols, vec![10; 30]);
        let clear = detect_clear_days(&m, &geo, &PrepConfig::default()).unwrap();
        assert!(!clear[3]);
    }

    #[test]
    fn unusable_days_are_never_clear() {
        let cols = vec![smooth_day(); 30];
        let (mut m, geo) = matrix_and_geo(cols, vec![10; 30]);
        m.usable[4] = false;
        let clear = detect_clear_days(&m, &geo, &PrepConfig::default()).unwrap();
        assert!(!clear[4]);
    }

    #[test]
    fn resample_constant_day() {
        let mut col = vec![0.0; 24];
        for r in 2..=13 {
            col[r] = 1.0;
        }
        let out = resample_window(&col, 2.0, 13.0, PROFILE_LEN);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[PROFILE_LEN - 1], 0.0);
        for &v in &out[1..PROFILE_LEN - 1] {
            assert_abs_diff_eq!(v, 1.0);
        }
    }

    #[test]
    fn resample_linear_ramp_stays_linear() {
        let col: Vec<f64> = (0..24).map(|r| r as f64).collect();
        let out = resample_window(&col, 4.0, 20.0, PROFILE_LEN);
        for (j, &v) in out.iter().enumerate().take(PROFILE_LEN - 1).skip(1) {
            let expected = 4.0 + 16.0 * j as f64 / (PROFILE_LEN - 1) as f64;
            assert_abs_diff_eq!(v, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn short_days_are_dropped() {
        let cols = vec![smooth_day(); 10];
        let (m, mut geo) = matrix_and_geo(cols, vec![10; 10]);
        geo[2].day_length_h = 3.0;
        let clear = vec![true; 10];
        let profiles = mask_resample(&m, &geo, &clear, &PrepConfig::default()).unwrap();
        assert_eq!(profiles.len(), 9);
        assert!(profiles.iter().all(|p| p.day_index != 2));
    }

    #[test]
    fn normalize_constant_profiles() {
        let mut profiles = vec![DayProfile {
            values: {
                let mut v = vec![4.0; PROFILE_LEN];
                v[0] = 0.0;
                v[PROFILE_LEN - 1] = 0.0;
                v
            },
            day_index: 0,
            bin_index: 5,
            clear: true,
        }];
        let norm = normalize(&mut profiles, 1, &PrepConfig::default()).unwrap();
        assert_abs_diff_eq!(norm.scale, 4.0);
        assert_abs_diff_eq!(norm.day_scale[0], 1.0);
        assert_abs_diff_eq!(profiles[0].values[10], 1.0);
    }

    #[test]
    fn normalize_is_robust_to_one_outlier_and_clips() {
        let mut profiles = Vec::new();
        for i in 0..20 {
            let mut v = vec![2.0; PROFILE_LEN];
            v[0] = 0.0;
            v[PROFILE_LEN - 1] = 0.0;
            if i == 0 {
                v[100] = 200.0;
            }
            profiles.push(DayProfile {
                values: v,
                day_index: i,
                bin_index: 3,
                clear: true,
            });
        }
        let norm = normalize(&mut profiles, 20, &PrepConfig::default()).unwrap();
        assert!((norm.scale - 2.0).abs() / 2.0 < 0.02, "scale {}", norm.scale);
        // The outlier itself is clipped.
        assert_abs_diff_eq!(profiles[0].values[100], 1.05);
    }

    #[test]
    fn normalize_follows_a_seasonal_amplitude_swing() {
        // Amplitude ramps 2.0 -> 3.0 across 40 days; after normalization
        // every clear day should peak near one.
        let mut profiles = Vec::new();
        for d in 0..40 {
            let amp = 2.0 + d as f64 / 39.0;
            let mut v = vec![amp; PROFILE_LEN];
            v[0] = 0.0;
            v[PROFILE_LEN - 1] = 0.0;
            profiles.push(DayProfile {
                values: v,
                day_index: d,
                bin_index: 3,
                clear: true,
            });
        }
        let norm = normalize(&mut profiles, 40, &PrepConfig::default()).unwrap();
        for p in &profiles {
            assert!(
                (p.values[128] - 1.0).abs() < 0.02,
                "day {} peak {} after envelope division",
                p.day_index,
                p.values[128]
            );
        }
        let kw0 = norm.scale * norm.day_scale[0];
        let kw39 = norm.scale * norm.day_scale[39];
        assert!((kw0 - 2.0).abs() < 0.05, "start envelope {kw0} kW");
        assert!((kw39 - 3.0).abs() < 0.05, "end envelope {kw39} kW");
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let mut profiles = vec![DayProfile {
            values: vec![0.0; PROFILE_LEN],
            day_index: 0,
            bin_index: 5,
            clear: true,
        }];
        assert!(matches!(
            normalize(&mut profiles, 1, &PrepConfig::default()),
            Err(Error::InvalidData(_))
        ));
    }

    fn unit_norm(n_days: usize) -> Normalization {
        Normalization {
            scale: 4.0,
            day_scale: vec![1.0; n_days],
        }
    }

    fn geo_stub(n: usize) -> Vec<DayGeometry> {
        (0..n)
            .map(|d| DayGeometry {
                day_index: d,
                day_of_year: 1,
                declination: 0.0,
                bin_index: 0,
                sunrise: 6.0,
                sunset: 17.0,
                day_length_h: 11.0,
            })
            .collect()
    }

    fn profile(day: usize, bin: usize, level: f64, clear: bool) -> DayProfile {
        let mut v = vec![level; PROFILE_LEN];
        v[0] = 0.0;
        v[PROFILE_LEN - 1] = 0.0;
        DayProfile {
            values: v,
            day_index: day,
            bin_index: bin,
            clear,
        }
    }

    #[test]
    fn bin_average_means_and_missing_rows() {
        let cfg = PrepConfig {
            min_known_rows: 1,
            ..PrepConfig::default()
        };
        let profiles = vec![
            profile(0, 5, 0.4, true),
            profile(1, 5, 0.8, true),
            profile(2, 6, 0.9, false), // cloudy: excluded
        ];
        let ts = bin_average(&profiles, &geo_stub(3), &unit_norm(3), &cfg).unwrap();
        assert_eq!(ts.y.dim(), (N_BINS, PROFILE_LEN));
        assert_abs_diff_eq!(ts.y[(5, 100)], 0.6);
        assert_eq!(ts.y[(5, 0)], 0.0);
        assert!(ts.y[(6, 100)].is_nan());
        assert!(!ts.known_row(6));
        assert_eq!(ts.bin_members[5], vec![0, 1]);
        assert_abs_diff_eq!(ts.bin_day_length[5], 11.0);
        assert!(ts.bin_day_length[6].is_nan());
        // bin_scale is filled everywhere, even over missing bins.
        assert!(ts.bin_scale.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn bin_scale_averages_members_and_interpolates_gaps() {
        let cfg = PrepConfig {
            min_known_rows: 1,
            ..PrepConfig::default()
        };
        let profiles = vec![
            profile(0, 10, 0.5, true),
            profile(1, 10, 0.5, true),
            profile(2, 20, 0.5, true),
        ];
        let norm = Normalization {
            scale: 4.0,
            day_scale: vec![0.8, 1.0, 1.2],
        };
        let ts = bin_average(&profiles, &geo_stub(3), &norm, &cfg).unwrap();
        assert_abs_diff_eq!(ts.bin_scale[10], 0.9);
        assert_abs_diff_eq!(ts.bin_scale[20], 1.2);
        // Between the known bins it interpolates; outside it extends flat.
        assert_abs_diff_eq!(ts.bin_scale[15], 0.9 + 0.3 * 0.5);
        assert_abs_diff_eq!(ts.bin_scale[0], 0.9);
        assert_abs_diff_eq!(ts.bin_scale[46], 1.2);
    }

    #[test]
    fn bin_average_requires_coverage() {
        let profiles = vec![profile(0, 5, 0.4, true)];
        assert!(matches!(
            bin_average(&profiles, &geo_stub(1), &unit_norm(1), &PrepConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn known_rows_are_all_or_nothing_with_zero_edges() {
        let cfg = PrepConfig {
            min_known_rows: 1,
            ..PrepConfig::default()
        };
        let profiles = vec![profile(0, 0, 0.5, true), profile(1, 46, 0.7, true)];
        let ts = bin_average(&profiles, &geo_stub(2), &unit_norm(2), &cfg).unwrap();
        for b in 0..N_BINS {
            let row = ts.y.row(b);
            let known: Vec<bool> = row.iter().map(|v| !v.is_nan()).collect();
            assert!(known.iter().all(|&k| k == known[0]), "bin {b} mixes known/missing");
            if known[0] {
                assert_eq!(row[0], 0.0);
                assert_eq!(row[PROFILE_LEN - 1], 0.0);
            }
        }
    }

    #[test]
    fn transformed_signal_round_trips_through_files() {
        let cfg = PrepConfig {
            min_known_rows: 1,
            ..PrepConfig::default()
        };
        let profiles = vec![profile(3, 5, 0.4, true), profile(9, 12, 0.8, true)];
        let ts = bin_average(&profiles, &geo_stub(10), &unit_norm(10), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("y.csv");
        let sp = dir.path().join("meta.txt");
        ts.save(&mp, &sp).unwrap();
        let back = TransformedSignal::load(&mp, &sp).unwrap();
        assert_eq!(back.scale, ts.scale);
        assert_eq!(back.params_hash, ts.params_hash);
        assert_eq!(back.bin_members, ts.bin_members);
        for (a, b) in ts.y.iter().zip(back.y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ts.bin_day_length.iter().zip(&back.bin_day_length) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ts.bin_scale.iter().zip(&back.bin_scale) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
