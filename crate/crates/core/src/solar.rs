//! Solar geometry: declination, declination bins, sun position, and
//! data-driven sunrise/sunset detection.
//!
//! Angle conventions: latitude positive north, longitude positive east,
//! azimuth in degrees clockwise from north (east = 90, south = 180). All
//! public angles are degrees; radians stay internal.

use crate::error::{Error, Result};
use crate::ingest::DayMatrix;
use crate::stats::percentile;
use chrono::{Datelike, NaiveDateTime, Timelike};

/// Number of declination bins.
pub const N_BINS: usize = 47;

/// Declination extremes of the Cooper formula, degrees.
pub const DECL_MAX: f64 = 23.45;

/// Latitudes at or beyond this magnitude are rejected: the day/night
/// structure the pipeline relies on breaks down near the polar circles.
pub const MAX_LAT: f64 = 66.0;

/// Solar declination in degrees for a day of the year (1 to 366) by Cooper's
/// formula; day 366 is treated as day 365.
pub fn declination(day_of_year: u32) -> Result<f64> {
    if day_of_year == 0 || day_of_year > 366 {
        return Err(Error::InvalidArgument(format!(
            "day_of_year {day_of_year} outside 1..=366"
        )));
    }
    let n = day_of_year.min(365) as f64;
    Ok(DECL_MAX * (360.0 * (284.0 + n) / 365.0).to_radians().sin())
}

/// Maps a declination to one of [`N_BINS`] uniform bins over
/// [-DECL_MAX, DECL_MAX]. Out-of-range values clamp to the end bins.
pub fn bin_declination(decl: f64) -> usize {
    let width = 2.0 * DECL_MAX / N_BINS as f64;
    let idx = ((decl + DECL_MAX) / width).floor() as isize;
    idx.clamp(0, N_BINS as isize - 1) as usize
}

/// Center declination of bin `b`, degrees.
pub fn bin_center(b: usize) -> f64 {
    let width = 2.0 * DECL_MAX / N_BINS as f64;
    -DECL_MAX + (b as f64 + 0.5) * width
}

/// Sun position in degrees: zenith from vertical, azimuth clockwise from
/// north.
#[derive(Debug, Clone, Copy)]
pub struct SunPosition {
    pub zenith: f64,
    pub azimuth: f64,
}

impl SunPosition {
    pub fn elevation(&self) -> f64 {
        90.0 - self.zenith
    }
}

/// Equation of time in minutes for a day of the year.
pub fn equation_of_time_minutes(day_of_year: u32) -> f64 {
    let b = (360.0 / 365.0 * (day_of_year.min(365) as f64 - 81.0)).to_radians();
    9.87 * (2.0 * b).sin() - 7.53 * b.cos() - 1.5 * b.sin()
}

/// Sun position from latitude, declination, and hour angle (all degrees;
/// hour angle zero at solar noon, positive in the afternoon).
pub fn sun_position_hour_angle(lat: f64, decl: f64, hour_angle: f64) -> Result<SunPosition> {
    if lat.abs() >= MAX_LAT {
        return Err(Error::UnsupportedLatitude { latitude: lat });
    }
    let phi = lat.to_radians();
    let delta = decl.to_radians();
    let omega = hour_angle.to_radians();
    let cos_z = (phi.sin() * delta.sin() + phi.cos() * delta.cos() * omega.cos()).clamp(-1.0, 1.0);
    let zenith = cos_z.acos();
    let sin_z = zenith.sin();
    let azimuth = if sin_z.abs() < 1e-9 {
        // Sun essentially overhead: azimuth is undefined, report due south.
        180.0
    } else {
        let cos_a = ((delta.sin() - phi.sin() * cos_z) / (phi.cos() * sin_z)).clamp(-1.0, 1.0);
        let a = cos_a.acos().to_degrees();
        if hour_angle > 0.0 {
            360.0 - a
        } else {
            a
        }
    };
    Ok(SunPosition {
        zenith: zenith.to_degrees(),
        azimuth: azimuth.rem_euclid(360.0),
    })
}

/// Sun position at a local-standard-time instant.
///
/// The time zone meridian is the longitude rounded to the nearest multiple of
/// 15 degrees; solar time adds the longitude correction and the equation of
/// time.
pub fn sun_position(lat: f64, lon: f64, instant: NaiveDateTime) -> Result<SunPosition> {
    let n = instant.ordinal();
    let decl = declination(n)?;
    let meridian = 15.0 * (lon / 15.0).round();
    let clock_hours = instant.num_seconds_from_midnight() as f64 / 3600.0;
    let solar_hours =
        clock_hours + (4.0 * (lon - meridian) + equation_of_time_minutes(n)) / 60.0;
    let hour_angle = 15.0 * (solar_hours - 12.0);
    sun_position_hour_angle(lat, decl, hour_angle)
}

/// Per-day geometry derived from the day matrix and sunrise/sunset
/// estimates. `sunrise`/`sunset` are fractional row indices; `day_length_h`
/// is in hours.
#[derive(Debug, Clone)]
pub struct DayGeometry {
    pub day_index: usize,
    pub day_of_year: u32,
    pub declination: f64,
    pub bin_index: usize,
    pub sunrise: f64,
    pub sunset: f64,
    pub day_length_h: f64,
}

/// Builds per-day geometry records from smoothed sunrise/sunset estimates.
pub fn day_geometry(m: &DayMatrix, sun: &[(f64, f64)]) -> Result<Vec<DayGeometry>> {
    if sun.len() != m.n_days() {
        return Err(Error::DimensionMismatch(format!(
            "sunrise/sunset entries {} vs days {}",
            sun.len(),
            m.n_days()
        )));
    }
    let mut out = Vec::with_capacity(m.n_days());
    for d in 0..m.n_days() {
        let day_of_year = m.date(d).ordinal();
        let decl = declination(day_of_year)?;
        let (sunrise, sunset) = sun[d];
        out.push(DayGeometry {
            day_index: d,
            day_of_year,
            declination: decl,
            bin_index: bin_declination(decl),
            sunrise,
            sunset,
            day_length_h: (sunset - sunrise) * m.interval as f64 / 3600.0,
        });
    }
    Ok(out)
}

/// Parameters for sunrise/sunset detection.
#[derive(Debug, Clone)]
pub struct SunriseParams {
    /// Detection threshold as a fraction of the matrix 98th percentile.
    pub threshold_frac: f64,
    /// Quantile for the sunrise fit (small: hug the early envelope).
    pub q_sunrise: f64,
    /// Quantile for the sunset fit (large: hug the late envelope).
    pub q_sunset: f64,
    /// Curvature penalty weight of the seasonal fit.
    pub kappa: f64,
}

impl Default for SunriseParams {
    fn default() -> Self {
        Self {
            threshold_frac: 0.005,
            q_sunrise: 0.05,
            q_sunset: 0.95,
            kappa: 100.0,
        }
    }
}

/// First and last row index per day where power exceeds the detection
/// threshold; `None` for days that never cross it.
pub fn detect_sunrise_sunset_raw(
    m: &DayMatrix,
    threshold_frac: f64,
) -> Result<Vec<Option<(usize, usize)>>> {
    let finite: Vec<f64> = m.values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::InvalidData("day matrix has no finite values".into()));
    }
    let threshold = threshold_frac * percentile(&finite, 98.0);
    let mut out = Vec::with_capacity(m.n_days());
    for d in 0..m.n_days() {
        let col = m.values.column(d);
        let first = col.iter().position(|&v| v.is_finite() && v > threshold);
        let last = col.iter().rposition(|&v| v.is_finite() && v > threshold);
        out.push(match (first, last) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        });
    }
    Ok(out)
}

/// Estimates per-day (sunrise, sunset) as fractional row indices.
///
/// Raw threshold crossings are smoothed across the season with an asymmetric
/// quantile fit plus a squared-curvature penalty, which rejects late
/// crossings on overcast mornings and interpolates days that never cross the
/// threshold.
pub fn detect_sunrise_sunset(m: &DayMatrix, params: &SunriseParams) -> Result<Vec<(f64, f64)>> {
    let raw = detect_sunrise_sunset_raw(m, params.threshold_frac)?;
    let n = m.n_days();
    let valid: Vec<bool> = raw.iter().map(|r| r.is_some()).collect();
    let rise: Vec<f64> = raw
        .iter()
        .map(|r| r.map(|(a, _)| a as f64).unwrap_or(0.0))
        .collect();
    let set: Vec<f64> = raw
        .iter()
        .map(|r| r.map(|(_, b)| b as f64).unwrap_or(0.0))
        .collect();
    let rise_s = quantile_smooth(&rise, &valid, params.q_sunrise, params.kappa)?;
    let set_s = quantile_smooth(&set, &valid, params.q_sunset, params.kappa)?;
    let hi = (m.n_per_day() - 1) as f64;
    Ok((0..n)
        .map(|d| (rise_s[d].clamp(0.0, hi), set_s[d].clamp(0.0, hi)))
        .collect())
}

/// Fits a smooth seasonal curve `f` to raw daily values `r` by minimizing
/// the quantile (pinball) loss at quantile `q` over valid days plus
/// `kappa` times the sum of squared second differences of `f`.
///
/// Days with `valid[d] == false` take no part in the loss and are filled by
/// the curvature penalty. Solved by a small operator-splitting iteration; the
/// quadratic step reuses one banded Cholesky factorization.
pub fn quantile_smooth(r: &[f64], valid: &[bool], q: f64, kappa: f64) -> Result<Vec<f64>> {
    let n = r.len();
    if valid.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "values {} vs valid flags {}",
            n,
            valid.len()
        )));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n < 3 || n_valid < 2 {
        return Err(Error::InsufficientData(format!(
            "quantile fit needs >= 3 days and >= 2 valid days, got {n} and {n_valid}"
        )));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }

    let rho = 1.0;
    // System matrix 2*kappa*D2'D2 + rho*diag(valid), assembled in banded form.
    let mut d0 = vec![0.0; n];
    let mut d1 = vec![0.0; n - 1];
    let mut d2 = vec![0.0; n - 2];
    for row in 0..(n - 2) {
        // Stencil (1, -2, 1) at positions row, row+1, row+2.
        let w = 2.0 * kappa;
        d0[row] += w;
        d0[row + 1] += 4.0 * w;
        d0[row + 2] += w;
        d1[row] += -2.0 * w;
        d1[row + 1] += -2.0 * w;
        d2[row] += w;
    }
    for d in 0..n {
        if valid[d] {
            d0[d] += rho;
        }
    }
    let chol = BandedCholesky::factor(&d0, &d1, &d2)?;

    let mut f = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut u = vec![0.0; n];
    // Warm start the fit from the valid points' mean.
    let mean_valid = r
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .sum::<f64>()
        / n_valid as f64;
    f.fill(mean_valid);
    for d in 0..n {
        if valid[d] {
            z[d] = r[d] - f[d];
        }
    }

    let t = 1.0 / rho;
    let mut rhs = vec![0.0; n];
    for iter in 0..20000 {
        // f-step: quadratic solve.
        for d in 0..n {
            rhs[d] = if valid[d] { rho * (r[d] - z[d] - u[d]) } else { 0.0 };
        }
        chol.solve(&rhs, &mut f);

        // z-step: pinball proximal map, elementwise on valid days.
        let mut primal_sq = 0.0;
        let mut dual_sq = 0.0;
        for d in 0..n {
            if !valid[d] {
                continue;
            }
            let v = r[d] - f[d] - u[d];
            let z_new = if v > t * q {
                v - t * q
            } else if v < -t * (1.0 - q) {
                v + t * (1.0 - q)
            } else {
                0.0
            };
            dual_sq += (z_new - z[d]).powi(2);
            z[d] = z_new;
            let res = f[d] + z[d] - r[d];
            u[d] += res;
            primal_sq += res * res;
        }
        if iter > 10 && primal_sq.sqrt() < 1e-9 && rho * dual_sq.sqrt() < 1e-9 {
            break;
        }
    }
    Ok(f)
}

/// Cholesky factorization of a symmetric positive definite pentadiagonal
/// matrix stored as three bands (main, first sub, second sub).
struct BandedCholesky {
    l0: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl BandedCholesky {
    fn factor(d0: &[f64], d1: &[f64], d2: &[f64]) -> Result<Self> {
        let n = d0.len();
        let mut l0 = vec![0.0; n];
        let mut l1 = vec![0.0; n.saturating_sub(1)];
        let mut l2 = vec![0.0; n.saturating_sub(2)];
        for j in 0..n {
            let mut diag = d0[j];
            if j >= 1 {
                diag -= l1[j - 1] * l1[j - 1];
            }
            if j >= 2 {
                diag -= l2[j - 2] * l2[j - 2];
            }
            if diag <= 0.0 {
                return Err(Error::InvalidData(
                    "banded system is not positive definite".into(),
                ));
            }
            l0[j] = diag.sqrt();
            if j + 1 < n {
                let mut v = d1[j];
                if j >= 1 {
                    v -= l2[j - 1] * l1[j - 1];
                }
                l1[j] = v / l0[j];
            }
            if j + 2 < n {
                l2[j] = d2[j] / l0[j];
            }
        }
        Ok(Self { l0, l1, l2 })
    }

    fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = b.len();
        // Forward: L y = b (y stored in x).
        for i in 0..n {
            let mut v = b[i];
            if i >= 1 {
                v -= self.l1[i - 1] * x[i - 1];
            }
            if i >= 2 {
                v -= self.l2[i - 2] * x[i - 2];
            }
            x[i] = v / self.l0[i];
        }
        // Backward: L' x = y.
        for i in (0..n).rev() {
            let mut v = x[i];
            if i + 1 < n {
                v -= self.l1[i] * x[i + 1];
            }
            if i + 2 < n {
                v -= self.l2[i] * x[i + 2];
            }
            x[i] = v / self.l0[i];
        }
    }
}
