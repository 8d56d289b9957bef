//! Synthetic PV systems with known shade and weather ground truth.
//!
//! The generator simulates a clear-sky power series for a fixed-tilt
//! system, then optionally degrades it in two labeled steps: a horizon
//! obstruction that blocks a fraction of the beam component whenever the
//! sun sits inside an azimuth band below an elevation threshold, and
//! seeded synthetic clouds that scale whole days by a smooth random
//! clearness profile. Every degradation is accounted for, so the true
//! per-bin and yearly shade losses are available for validating the
//! estimation pipeline.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{clearsky_irradiance, ClearSkyParams};
use crate::error::{Error, Result};
use crate::ingest::RawSeries;
use crate::report::{fill_missing_linear, yearly_from_bins};
use crate::solar::{bin_declination, declination, sun_position, MAX_LAT, N_BINS};

/// First simulated day; two years from here cover every declination twice.
pub const START_DATE: (i32, u32, u32) = (2019, 1, 1);

/// Geometry and rating of a simulated system.
#[derive(Debug, Clone, Copy)]
pub struct SystemGeometry {
    /// Degrees north.
    pub latitude: f64,
    /// Degrees east.
    pub longitude: f64,
    /// Module tilt from horizontal, degrees.
    pub tilt: f64,
    /// Module azimuth, degrees clockwise from north (180 = south).
    pub azimuth: f64,
    /// Rated power at 1000 W/m^2, kW.
    pub capacity_kw: f64,
}

impl SystemGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.latitude.abs() >= MAX_LAT {
            return Err(Error::UnsupportedLatitude {
                latitude: self.latitude,
            });
        }
        if !(0.0..=90.0).contains(&self.tilt) {
            return Err(Error::InvalidArgument(format!(
                "tilt {} outside [0, 90]",
                self.tilt
            )));
        }
        if !(0.0..360.0).contains(&self.azimuth) {
            return Err(Error::InvalidArgument(format!(
                "azimuth {} outside [0, 360)",
                self.azimuth
            )));
        }
        if !(self.capacity_kw > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "capacity {} must be positive",
                self.capacity_kw
            )));
        }
        Ok(())
    }
}

/// One blocking band of the horizon profile.
#[derive(Debug, Clone, Copy)]
pub struct ObstructionBand {
    /// Start of the blocked azimuth range, degrees.
    pub azimuth_lo: f64,
    /// End of the blocked azimuth range, degrees.
    pub azimuth_hi: f64,
    /// Sun elevations below this threshold are blocked, degrees.
    pub elevation_deg: f64,
    /// Fraction of the beam component removed while blocked.
    pub beam_block_fraction: f64,
}

/// A horizon obstruction as a list of blocking bands.
///
/// Overlapping bands compound: each band multiplies the beam by
/// `1 - beam_block_fraction` independently.
#[derive(Debug, Clone, Default)]
pub struct Obstruction {
    pub bands: Vec<ObstructionBand>,
}

impl Obstruction {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.azimuth_lo < b.azimuth_hi) {
                return Err(Error::InvalidArgument(format!(
                    "band {i}: azimuth_lo {} must be below azimuth_hi {}",
                    b.azimuth_lo, b.azimuth_hi
                )));
            }
            if !(0.0..=90.0).contains(&b.elevation_deg) {
                return Err(Error::InvalidArgument(format!(
                    "band {i}: elevation {} outside [0, 90]",
                    b.elevation_deg
                )));
            }
            if !(0.0..=1.0).contains(&b.beam_block_fraction) {
                return Err(Error::InvalidArgument(format!(
                    "band {i}: beam fraction {} outside [0, 1]",
                    b.beam_block_fraction
                )));
            }
        }
        Ok(())
    }

    /// Fraction of the beam that survives this horizon at a sun position.
    fn beam_factor(&self, sun_azimuth: f64, sun_elevation: f64) -> f64 {
        let mut factor = 1.0;
        for b in &self.bands {
            if sun_azimuth >= b.azimuth_lo
                && sun_azimuth <= b.azimuth_hi
                && sun_elevation < b.elevation_deg
            {
                factor *= 1.0 - b.beam_block_fraction;
            }
        }
        factor
    }
}

/// True per-bin and yearly losses of a simulated system.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True shade loss per representative day of each bin, kWh.
    pub per_bin_loss_ref: Vec<f64>,
    /// True unshaded energy per representative day of each bin, kWh.
    pub per_bin_energy_ref: Vec<f64>,
    /// True yearly shade loss, kWh.
    pub yearly_loss_ref: f64,
    /// True yearly unshaded energy, kWh.
    pub yearly_energy_ref: f64,
    /// Per simulated day: true when no clouds were injected.
    pub clear_day_labels: Vec<bool>,
}

/// Power of the system at one instant, split so obstructions can act on
/// the beam component alone. All terms in kW.
fn instant_power(
    g: &SystemGeometry,
    csp: &ClearSkyParams,
    instant: NaiveDateTime,
    obs: &Obstruction,
) -> (f64, f64) {
    let sun = sun_position(g.latitude, g.longitude, instant)
        .expect("geometry validated before simulation");
    if sun.zenith >= 90.0 {
        return (0.0, 0.0);
    }
    let irr = clearsky_irradiance(sun.zenith, csp);
    let z = sun.zenith.to_radians();
    let beta = g.tilt.to_radians();
    let cos_aoi =
        z.cos() * beta.cos() + z.sin() * beta.sin() * (sun.azimuth - g.azimuth).to_radians().cos();
    let beam = irr.dni * cos_aoi.max(0.0);
    let diffuse = irr.dhi * (1.0 + beta.cos()) / 2.0
        + irr.ghi * csp.albedo * (1.0 - beta.cos()) / 2.0;
    let to_kw = g.capacity_kw / 1000.0;
    let unshaded = (beam + diffuse) * to_kw;
    let shaded = (beam * obs.beam_factor(sun.azimuth, sun.elevation()) + diffuse) * to_kw;
    (unshaded, shaded)
}

fn simulation_days(years: u32) -> usize {
    years as usize * 365
}

fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(START_DATE.0, START_DATE.1, START_DATE.2)
        .expect("start date constant is valid")
}

/// Simulates an unobstructed clear-sky power series.
///
/// `interval_s` is the sampling cadence in seconds and must divide a day;
/// `years` must be at least 2 so every declination bin is visited twice.
pub fn simulate_system(
    g: &SystemGeometry,
    years: u32,
    interval_s: u32,
    csp: &ClearSkyParams,
) -> Result<RawSeries> {
    g.validate()?;
    if years < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 simulated years for seasonal coverage, got {years}"
        )));
    }
    if interval_s == 0 || 86400 % interval_s != 0 {
        return Err(Error::UnsupportedCadence {
            interval: interval_s,
        });
    }
    let per_day = (86400 / interval_s) as usize;
    let days = simulation_days(years);
    let none = Obstruction::none();
    let mut timestamps = Vec::with_capacity(days * per_day);
    let mut power = Vec::with_capacity(days * per_day);
    for d in 0..days {
        let midnight = start_date() + Duration::days(d as i64);
        for r in 0..per_day {
            let ts = midnight
                .and_hms_opt(0, 0, 0)
                .expect("midnight exists")
                + Duration::seconds((r as u32 * interval_s) as i64);
            let (unshaded, _) = instant_power(g, csp, ts, &none);
            timestamps.push(ts);
            power.push(unshaded);
        }
    }
    Ok(RawSeries {
        timestamps,
        power,
        interval: Some(interval_s),
    })
}

/// Per-day energy bookkeeping produced by [`inject_shade`].
#[derive(Debug, Clone)]
pub struct ShadeAccounting {
    /// Unshaded energy per simulated day, kWh.
    pub day_energy_kwh: Vec<f64>,
    /// Energy removed by the obstruction per simulated day, kWh.
    pub day_loss_kwh: Vec<f64>,
}

/// Applies a horizon obstruction to a simulated clear series.
///
/// Returns the shaded series and the per-day unshaded energy and shade
/// loss used for ground truth. Power never increases at any instant.
pub fn inject_shade(
    series: &RawSeries,
    g: &SystemGeometry,
    obs: &Obstruction,
    csp: &ClearSkyParams,
) -> Result<(RawSeries, ShadeAccounting)> {
    g.validate()?;
    obs.validate()?;
    let interval = series.interval.ok_or_else(|| {
        Error::InvalidArgument("series must carry a sampling interval".into())
    })?;
    let hours = interval as f64 / 3600.0;
    let start = series
        .timestamps
        .first()
        .ok_or_else(|| Error::InsufficientData("empty series".into()))?
        .date();
    let n_days = (series
        .timestamps
        .last()
        .expect("nonempty checked above")
        .date()
        - start)
        .num_days() as usize
        + 1;
    let mut out = series.clone();
    let mut acct = ShadeAccounting {
        day_energy_kwh: vec![0.0; n_days],
        day_loss_kwh: vec![0.0; n_days],
    };
    for (i, &ts) in series.timestamps.iter().enumerate() {
        let (unshaded, shaded) = instant_power(g, csp, ts, obs);
        let d = (ts.date() - start).num_days() as usize;
        out.power[i] = shaded;
        acct.day_energy_kwh[d] += unshaded * hours;
        acct.day_loss_kwh[d] += (unshaded - shaded) * hours;
    }
    Ok((out, acct))
}

/// Scales randomly chosen cloudy days by a smooth intra-day clearness
/// profile; returns the degraded series and per-day clear labels.
///
/// Determinism contract: the same seed always yields the same series.
pub fn inject_weather(
    series: &RawSeries,
    cloud_prob: f64,
    seed: u64,
) -> Result<(RawSeries, Vec<bool>)> {
    if !(0.0..=1.0).contains(&cloud_prob) {
        return Err(Error::InvalidArgument(format!(
            "cloud probability {cloud_prob} outside [0, 1]"
        )));
    }
    let start = series
        .timestamps
        .first()
        .ok_or_else(|| Error::InsufficientData("empty series".into()))?
        .date();
    let n_days = (series
        .timestamps
        .last()
        .expect("nonempty checked above")
        .date()
        - start)
        .num_days() as usize
        + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clear = vec![true; n_days];
    let mut profile: Vec<Option<(f64, f64, f64)>> = vec![None; n_days];
    for d in 0..n_days {
        if rng.gen::<f64>() < cloud_prob {
            clear[d] = false;
            let base = rng.gen_range(0.25..0.65);
            let amp = rng.gen_range(0.05..0.15);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            profile[d] = Some((base, amp, phase));
        }
    }
    let mut out = series.clone();
    for (i, &ts) in series.timestamps.iter().enumerate() {
        let d = (ts.date() - start).num_days() as usize;
        if let Some((base, amp, phase)) = profile[d] {
            let h = ts.num_seconds_from_midnight() as f64 / 3600.0;
            let clearness =
                (base + amp * (std::f64::consts::TAU * h / 24.0 + phase).sin()).clamp(0.15, 0.8);
            out.power[i] *= clearness;
        }
    }
    Ok((out, clear))
}

/// Assembles ground truth from shade accounting and cloud labels.
///
/// Per-bin values average over the clear days mapped to each bin,
/// mirroring how the estimator sees only clear days; bins without clear
/// days are filled by linear interpolation.
pub fn ground_truth(acct: &ShadeAccounting, clear: &[bool]) -> Result<GroundTruth> {
    if acct.day_energy_kwh.len() != clear.len() {
        return Err(Error::DimensionMismatch(format!(
            "accounting covers {} days, labels cover {}",
            acct.day_energy_kwh.len(),
            clear.len()
        )));
    }
    let mut loss_sum = vec![0.0; N_BINS];
    let mut energy_sum = vec![0.0; N_BINS];
    let mut count = vec![0usize; N_BINS];
    for (d, &is_clear) in clear.iter().enumerate() {
        if !is_clear {
            continue;
        }
        let date = start_date() + Duration::days(d as i64);
        let b = bin_declination(declination(date.ordinal())?);
        loss_sum[b] += acct.day_loss_kwh[d];
        energy_sum[b] += acct.day_energy_kwh[d];
        count[b] += 1;
    }
    let known: Vec<bool> = count.iter().map(|&c| c > 0).collect();
    let mut per_bin_loss = vec![0.0; N_BINS];
    let mut per_bin_energy = vec![0.0; N_BINS];
    for b in 0..N_BINS {
        if count[b] > 0 {
            per_bin_loss[b] = loss_sum[b] / count[b] as f64;
            per_bin_energy[b] = energy_sum[b] / count[b] as f64;
        }
    }
    fill_missing_linear(&mut per_bin_loss, &known)?;
    fill_missing_linear(&mut per_bin_energy, &known)?;
    Ok(GroundTruth {
        yearly_loss_ref: yearly_from_bins(&per_bin_loss),
        yearly_energy_ref: yearly_from_bins(&per_bin_energy),
        per_bin_loss_ref: per_bin_loss,
        per_bin_energy_ref: per_bin_energy,
        clear_day_labels: clear.to_vec(),
    })
}

/// Writes a series as `timestamp,power_kw` text with a leading
/// `# params_hash` comment, the format the ingest parser reads back.
pub fn save_series(path: &Path, series: &RawSeries, params_hash: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# params_hash {params_hash}")?;
    writeln!(f, "timestamp,power_kw")?;
    for (ts, p) in series.timestamps.iter().zip(&series.power) {
        writeln!(f, "{},{p:.6}", ts.format("%Y-%m-%dT%H:%M:%S"))?;
    }
    Ok(())
}

/// Writes per-day clear labels as `day_index,date,clear` text with a
/// leading `# params_hash` comment.
pub fn save_labels(path: &Path, labels: &[bool], params_hash: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# params_hash {params_hash}")?;
    writeln!(f, "day_index,date,clear")?;
    for (d, &c) in labels.iter().enumerate() {
        let date = start_date() + Duration::days(d as i64);
        writeln!(f, "{d},{date},{}", u8::from(c))?;
    }
    Ok(())
}

/// Reads a label file written by [`save_labels`].
pub fn load_labels(path: &Path) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let flag = line.rsplit(',').next().ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "empty line".into(),
        })?;
        match flag.trim() {
            "0" => out.push(false),
            "1" => out.push(true),
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("clear flag must be 0 or 1, got {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_geometry() -> SystemGeometry {
        SystemGeometry {
            latitude: 34.0,
            longitude: -118.0,
            tilt: 20.0,
            azimuth: 180.0,
            capacity_kw: 5.0,
        }
    }

    fn default_csp() -> ClearSkyParams {
        ClearSkyParams::default()
    }

    #[test]
    fn night_instants_produce_zero_power() {
        let series = simulate_system(&test_geometry(), 2, 3600, &default_csp()).unwrap();
        for (ts, &p) in series.timestamps.iter().zip(&series.power) {
            if ts.hour() < 4 || ts.hour() >= 22 {
                assert_eq!(p, 0.0, "night sample at {ts} has power {p}");
            }
        }
    }

    #[test]
    fn summer_days_outproduce_winter_days() {
        let series = simulate_system(&test_geometry(), 2, 900, &default_csp()).unwrap();
        let per_day = 96;
        let day_energy = |d: usize| -> f64 {
            series.power[d * per_day..(d + 1) * per_day].iter().sum::<f64>() * 0.25
        };
        // Day 171 is near the June solstice, day 354 near the December one.
        assert!(
            day_energy(171) > day_energy(354),
            "south-facing tilt at 34N: summer {} kWh should beat winter {} kWh",
            day_energy(171),
            day_energy(354)
        );
    }

    #[test]
    fn peak_power_respects_the_rating_bound() {
        let series = simulate_system(&test_geometry(), 2, 900, &default_csp()).unwrap();
        let peak = series.power.iter().cloned().fold(0.0, f64::max);
        // POA can top 1000 W/m^2, but not by more than ~30% for clear sky.
        assert!(
            peak <= 5.0 * 1.3,
            "peak {peak} kW far above the plausible POA bound"
        );
        assert!(peak > 3.0, "peak {peak} kW suspiciously low for 5 kW rating");
    }

    #[test]
    fn single_year_simulation_is_rejected() {
        let err = simulate_system(&test_geometry(), 1, 900, &default_csp()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "got {err:?}");
    }

    #[test]
    fn polar_latitude_is_rejected() {
        let mut g = test_geometry();
        g.latitude = 71.0;
        let err = simulate_system(&g, 2, 900, &default_csp()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLatitude { .. }), "got {err:?}");
    }

    #[test]
    fn empty_obstruction_changes_nothing() {
        let g = test_geometry();
        let series = simulate_system(&g, 2, 3600, &default_csp()).unwrap();
        let (shaded, acct) = inject_shade(&series, &g, &Obstruction::none(), &default_csp()).unwrap();
        assert_eq!(series.power, shaded.power, "no bands must be a no-op");
        let truth = ground_truth(&acct, &vec![true; acct.day_loss_kwh.len()]).unwrap();
        assert_eq!(truth.yearly_loss_ref, 0.0, "no obstruction, no loss");
        assert!(truth.yearly_energy_ref > 0.0);
    }

    #[test]
    fn full_sky_obstruction_leaves_diffuse_only_power() {
        let g = test_geometry();
        let csp = default_csp();
        let series = simulate_system(&g, 2, 3600, &csp).unwrap();
        let obs = Obstruction {
            bands: vec![ObstructionBand {
                azimuth_lo: 0.0,
                azimuth_hi: 360.0,
                elevation_deg: 90.0,
                beam_block_fraction: 1.0,
            }],
        };
        let (shaded, _) = inject_shade(&series, &g, &obs, &csp).unwrap();
        for (i, &ts) in series.timestamps.iter().enumerate() {
            let sun = sun_position(g.latitude, g.longitude, ts).unwrap();
            if sun.zenith >= 90.0 {
                continue;
            }
            let irr = clearsky_irradiance(sun.zenith, &csp);
            let beta = g.tilt.to_radians();
            let diffuse_kw = (irr.dhi * (1.0 + beta.cos()) / 2.0
                + irr.ghi * csp.albedo * (1.0 - beta.cos()) / 2.0)
                * g.capacity_kw
                / 1000.0;
            assert!(
                (shaded.power[i] - diffuse_kw).abs() < 1e-9,
                "at {ts}: full beam block should leave diffuse {diffuse_kw}, got {}",
                shaded.power[i]
            );
        }
    }

    #[test]
    fn southern_obstruction_hits_winter_harder_than_summer() {
        let g = test_geometry();
        let csp = default_csp();
        let series = simulate_system(&g, 2, 900, &csp).unwrap();
        // Winter solar noon at 34N sits at 90 - 34 - 23.45 = 32.6 deg, so a
        // 35 deg southern horizon blocks winter noons but not summer ones.
        let obs = Obstruction {
            bands: vec![ObstructionBand {
                azimuth_lo: 150.0,
                azimuth_hi: 210.0,
                elevation_deg: 35.0,
                beam_block_fraction: 1.0,
            }],
        };
        let (_, acct) = inject_shade(&series, &g, &obs, &csp).unwrap();
        let truth = ground_truth(&acct, &vec![true; acct.day_loss_kwh.len()]).unwrap();
        // Winter bins sit at the start (declination near -23), summer bins
        // at the end.
        let winter: f64 = truth.per_bin_loss_ref[..5].iter().sum();
        let summer: f64 = truth.per_bin_loss_ref[N_BINS - 5..].iter().sum();
        assert!(
            winter > summer,
            "southern horizon must hit winter harder: {winter} vs {summer}"
        );
        assert!(truth.yearly_loss_ref > 0.0);
    }

    #[test]
    fn shade_never_increases_power() {
        let g = test_geometry();
        let csp = default_csp();
        let series = simulate_system(&g, 2, 3600, &csp).unwrap();
        let obs = Obstruction {
            bands: vec![
                ObstructionBand {
                    azimuth_lo: 100.0,
                    azimuth_hi: 220.0,
                    elevation_deg: 35.0,
                    beam_block_fraction: 0.7,
                },
                ObstructionBand {
                    azimuth_lo: 200.0,
                    azimuth_hi: 280.0,
                    elevation_deg: 20.0,
                    beam_block_fraction: 0.9,
                },
            ],
        };
        let (shaded, acct) = inject_shade(&series, &g, &obs, &csp).unwrap();
        for i in 0..series.power.len() {
            assert!(
                shaded.power[i] <= series.power[i] + 1e-12,
                "sample {i}: shading increased power"
            );
        }
        assert!(acct.day_loss_kwh.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn energy_accounting_balances() {
        let g = test_geometry();
        let csp = default_csp();
        let series = simulate_system(&g, 2, 900, &csp).unwrap();
        let obs = Obstruction {
            bands: vec![ObstructionBand {
                azimuth_lo: 150.0,
                azimuth_hi: 210.0,
                elevation_deg: 30.0,
                beam_block_fraction: 1.0,
            }],
        };
        let (shaded, acct) = inject_shade(&series, &g, &obs, &csp).unwrap();
        let per_day = 96;
        for d in 0..acct.day_energy_kwh.len() {
            let shaded_kwh: f64 =
                shaded.power[d * per_day..(d + 1) * per_day].iter().sum::<f64>() * 0.25;
            let balance = shaded_kwh + acct.day_loss_kwh[d] - acct.day_energy_kwh[d];
            assert!(
                balance.abs() <= 1e-9 * (1.0 + acct.day_energy_kwh[d]),
                "day {d}: energy bookkeeping off by {balance} kWh"
            );
        }
    }

    #[test]
    fn weather_injection_is_seed_deterministic() {
        let series = simulate_system(&test_geometry(), 2, 3600, &default_csp()).unwrap();
        let (a, la) = inject_weather(&series, 0.35, 42).unwrap();
        let (b, lb) = inject_weather(&series, 0.35, 42).unwrap();
        assert_eq!(la, lb, "labels must match for identical seeds");
        assert!(
            a.power
                .iter()
                .zip(&b.power)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "powers must be bit-identical for identical seeds"
        );
        let (c, lc) = inject_weather(&series, 0.35, 43).unwrap();
        assert!(
            lc != la || c.power != a.power,
            "different seeds should differ somewhere"
        );
    }

    #[test]
    fn weather_extremes_behave() {
        let series = simulate_system(&test_geometry(), 2, 3600, &default_csp()).unwrap();
        let (unchanged, labels) = inject_weather(&series, 0.0, 7).unwrap();
        assert_eq!(unchanged.power, series.power, "probability 0 is a no-op");
        assert!(labels.iter().all(|&c| c), "probability 0 leaves all days clear");
        let (_, labels) = inject_weather(&series, 1.0, 7).unwrap();
        assert!(labels.iter().all(|&c| !c), "probability 1 clouds every day");
    }

    #[test]
    fn cloudy_days_stay_within_the_clearness_range() {
        let series = simulate_system(&test_geometry(), 2, 3600, &default_csp()).unwrap();
        let (wx, labels) = inject_weather(&series, 1.0, 11).unwrap();
        for (i, &ts) in series.timestamps.iter().enumerate() {
            let d = (ts.date() - series.timestamps[0].date()).num_days() as usize;
            if labels[d] || series.power[i] == 0.0 {
                continue;
            }
            let ratio = wx.power[i] / series.power[i];
            assert!(
                (0.15..=0.8).contains(&ratio),
                "sample {i}: clearness {ratio} outside [0.15, 0.8]"
            );
        }
    }

    #[test]
    fn series_round_trips_through_the_parser() {
        let g = test_geometry();
        let series = simulate_system(&g, 2, 3600, &default_csp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        save_series(&path, &series, "test").unwrap();
        let parsed =
            crate::ingest::parse_series(std::io::BufReader::new(std::fs::File::open(&path).unwrap()))
                .unwrap();
        assert_eq!(parsed.timestamps, series.timestamps);
        for (a, b) in parsed.power.iter().zip(&series.power) {
            assert!((a - b).abs() < 1e-5, "power mismatch after round trip");
        }
    }

    #[test]
    fn labels_round_trip() {
        let labels = vec![true, false, true, true, false];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        save_labels(&path, &labels, "test").unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
    }
}
