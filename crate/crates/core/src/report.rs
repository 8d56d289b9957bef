//! Converts the shade component of a decomposition into physical energy
//! losses and validation metrics.
//!
//! The transformed signal is dimensionless and lives on a fixed 256-sample
//! daylight grid; bin `b` converts back to kilowatts through
//! `scale * bin_scale[b]` (the seasonal envelope the preparation divided
//! out), so one bin row integrates to energy as
//! `(day_length / 256) * scale * bin_scale[b] * sum(row)` kWh for one
//! representative day. Yearly figures walk the 365 days of a year, map each
//! day's declination to its bin, and add that bin's representative-day
//! value.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io;
use crate::preprocess::{TransformedSignal, PROFILE_LEN};
use crate::sd::Decomposition;
use crate::solar::{bin_center, bin_declination, declination, DayGeometry, N_BINS};

/// Seasonal and yearly shade-loss estimates for one analyzed system.
#[derive(Debug, Clone)]
pub struct ShadeReport {
    /// Energy lost to shade per representative day of each bin, kWh.
    pub per_bin_loss: Vec<f64>,
    /// Clear-sky energy per representative day of each bin, kWh.
    pub per_bin_energy: Vec<f64>,
    /// True where the bin had no clear days and was filled by
    /// interpolation.
    pub interpolated: Vec<bool>,
    /// Energy lost to shade over one year, kWh.
    pub yearly_loss: f64,
    /// Estimated clear-sky energy over one year, kWh.
    pub yearly_energy: f64,
    /// Yearly loss as a percentage of the clear-sky baseline.
    pub loss_fraction: f64,
    /// Fingerprint of the preprocessing parameters that produced the
    /// transformed signal.
    pub params_hash: String,
    /// Root-mean-square error against a reference, kWh; set by
    /// [`metrics`].
    pub rmse: Option<f64>,
    /// Relative error against a reference, percent of total yearly
    /// energy; set by [`metrics`].
    pub re: Option<f64>,
}

/// Comparison of an estimate against a reference loss curve.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    /// Root-mean-square over bins of (estimate - reference), kWh.
    pub rmse: f64,
    /// 100 * (yearly_loss - yearly_loss_ref) / yearly_energy_total;
    /// positive when the estimate exceeds the reference.
    pub re: f64,
}

pub use crate::stats::fill_missing_linear;

/// Integrates one transformed-space row back to kWh for one representative
/// day of bin `b`.
fn row_energy_kwh(row: ndarray::ArrayView1<f64>, day_length_h: f64, scale: f64) -> f64 {
    day_length_h / PROFILE_LEN as f64 * scale * row.sum()
}

/// Energy lost to shade per representative day of each bin, kWh.
///
/// Bins without clear days are filled by linear interpolation from
/// neighboring bins.
pub fn shade_energy(dec: &Decomposition, ts: &TransformedSignal) -> Result<Vec<f64>> {
    per_bin_from_component(&dec.x3, ts, -1.0)
}

fn per_bin_from_component(
    component: &Array2<f64>,
    ts: &TransformedSignal,
    sign: f64,
) -> Result<Vec<f64>> {
    assert_eq!(
        component.dim(),
        (N_BINS, PROFILE_LEN),
        "component must be {N_BINS}x{PROFILE_LEN}, got {:?}",
        component.dim()
    );
    let known: Vec<bool> = (0..N_BINS).map(|b| ts.known_row(b)).collect();
    let mut out = vec![0.0; N_BINS];
    for b in 0..N_BINS {
        if known[b] {
            let kw_per_unit = ts.scale * ts.bin_scale[b];
            let e = sign * row_energy_kwh(component.row(b), ts.bin_day_length[b], kw_per_unit);
            out[b] = e.max(0.0);
        }
    }
    fill_missing_linear(&mut out, &known)?;
    Ok(out)
}

/// Number of calendar days (of a 365-day year) whose declination falls in
/// each bin.
pub fn bin_day_counts() -> Vec<usize> {
    let mut counts = vec![0usize; N_BINS];
    for n in 1..=365 {
        let d = declination(n).expect("day of year is in range");
        counts[bin_declination(d)] += 1;
    }
    counts
}

/// Sums a per-representative-day quantity over the 365 days of a year by
/// mapping each day's declination to its bin.
///
/// The walk over days is grouped by bin (value times day count), so the
/// result is exactly the day-count weighting of the per-bin values.
pub fn yearly_from_bins(per_bin: &[f64]) -> f64 {
    assert_eq!(
        per_bin.len(),
        N_BINS,
        "expected one value per bin, got {}",
        per_bin.len()
    );
    per_bin
        .iter()
        .zip(bin_day_counts())
        .map(|(v, c)| v * c as f64)
        .sum()
}

/// Builds the full report from a decomposition and its transformed signal.
pub fn shade_report(dec: &Decomposition, ts: &TransformedSignal) -> Result<ShadeReport> {
    let per_bin_loss = shade_energy(dec, ts)?;
    let per_bin_energy = per_bin_from_component(&dec.x2, ts, 1.0)?;
    let interpolated: Vec<bool> = (0..N_BINS).map(|b| !ts.known_row(b)).collect();
    let yearly_loss = yearly_from_bins(&per_bin_loss);
    let yearly_energy = yearly_from_bins(&per_bin_energy);
    if !(yearly_energy > 0.0) {
        return Err(Error::InvalidData(format!(
            "clear-sky baseline energy must be positive, got {yearly_energy}"
        )));
    }
    Ok(ShadeReport {
        per_bin_loss,
        per_bin_energy,
        interpolated,
        yearly_loss,
        yearly_energy,
        loss_fraction: 100.0 * yearly_loss / yearly_energy,
        params_hash: dec.params_hash.clone(),
        rmse: None,
        re: None,
    })
}

/// Compares two per-bin loss curves.
///
/// `yearly_energy_total` is the denominator of the relative error and
/// should be the total yearly energy of the system under comparison
/// (conventionally the reference's). The sign convention is estimate minus
/// reference.
pub fn metrics(
    per_bin_loss: &[f64],
    per_bin_loss_ref: &[f64],
    yearly_energy_total: f64,
) -> Result<Metrics> {
    if per_bin_loss.len() != per_bin_loss_ref.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} bins, reference has {}",
            per_bin_loss.len(),
            per_bin_loss_ref.len()
        )));
    }
    if per_bin_loss.is_empty() {
        return Err(Error::InvalidArgument("no bins to compare".into()));
    }
    if !(yearly_energy_total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "total yearly energy must be positive, got {yearly_energy_total}"
        )));
    }
    let n = per_bin_loss.len() as f64;
    let mse = per_bin_loss
        .iter()
        .zip(per_bin_loss_ref)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let yearly = yearly_from_bins(per_bin_loss);
    let yearly_ref = yearly_from_bins(per_bin_loss_ref);
    Ok(Metrics {
        rmse: mse.sqrt(),
        re: 100.0 * (yearly - yearly_ref) / yearly_energy_total,
    })
}

/// One day of component series mapped back to the original time grid, kW.
#[derive(Debug, Clone)]
pub struct InvertedDay {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub bin_index: usize,
    /// True when the day's bin had no clear days, so the component rows
    /// were interpolated from neighboring bins.
    pub interpolated: bool,
}

/// Resamples one bin row from the 256-sample daylight grid back onto a
/// day's time grid: linear interpolation inside `[rise, set]`, zero
/// outside, multiplied by `scale`.
fn invert_row(
    row: &[f64],
    rise: f64,
    set: f64,
    n_per_day: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_per_day];
    if set <= rise {
        return out;
    }
    let last = (PROFILE_LEN - 1) as f64;
    for (r, slot) in out.iter_mut().enumerate() {
        let pos = r as f64;
        if pos < rise || pos > set {
            continue;
        }
        let u = (pos - rise) / (set - rise) * last;
        let lo = (u.floor() as usize).min(PROFILE_LEN - 1);
        let hi = (lo + 1).min(PROFILE_LEN - 1);
        let frac = u - lo as f64;
        *slot = scale * (row[lo] * (1.0 - frac) + row[hi] * frac);
    }
    out
}

/// Extracts one component row for bin `b`, interpolating the whole row
/// from neighboring known bins when `b` itself had no clear days.
fn component_row(component: &Array2<f64>, ts: &TransformedSignal, b: usize) -> Vec<f64> {
    if ts.known_row(b) {
        return component.row(b).to_vec();
    }
    let known: Vec<bool> = (0..N_BINS).map(|r| ts.known_row(r)).collect();
    let mut out = vec![0.0; PROFILE_LEN];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut col: Vec<f64> = (0..N_BINS).map(|r| component[(r, j)]).collect();
        fill_missing_linear(&mut col, &known).expect("caller checked for known bins");
        *slot = col[b];
    }
    out
}

/// Maps the three components of one day back onto its original time grid.
///
/// `geo` carries the day's sunrise/sunset (fractional row indices) and
/// bin; `n_per_day` is the number of samples per day of the source series.
pub fn invert_transform(
    dec: &Decomposition,
    ts: &TransformedSignal,
    geo: &DayGeometry,
    n_per_day: usize,
) -> Result<InvertedDay> {
    let b = geo.bin_index;
    if b >= N_BINS {
        return Err(Error::InvalidArgument(format!(
            "bin index {b} outside 0..{N_BINS}"
        )));
    }
    if !(0..N_BINS).any(|r| ts.known_row(r)) {
        return Err(Error::InsufficientData(
            "no known bins to invert from".into(),
        ));
    }
    let interpolated = !ts.known_row(b);
    let x1 = component_row(&dec.x1, ts, b);
    let x2 = component_row(&dec.x2, ts, b);
    let x3 = component_row(&dec.x3, ts, b);
    let kw_per_unit = ts.scale * ts.bin_scale[b];
    Ok(InvertedDay {
        x1: invert_row(&x1, geo.sunrise, geo.sunset, n_per_day, kw_per_unit),
        x2: invert_row(&x2, geo.sunrise, geo.sunset, n_per_day, kw_per_unit),
        x3: invert_row(&x3, geo.sunrise, geo.sunset, n_per_day, kw_per_unit),
        bin_index: b,
        interpolated,
    })
}

impl ShadeReport {
    /// Attaches comparison metrics computed by [`metrics`].
    pub fn with_metrics(mut self, m: Metrics) -> Self {
        self.rmse = Some(m.rmse);
        self.re = Some(m.re);
        self
    }

    /// Writes the human-readable key-value summary.
    pub fn save_summary(&self, path: &Path) -> Result<()> {
        let mut pairs = vec![
            ("yearly_loss_kwh".to_string(), format!("{:.6}", self.yearly_loss)),
            (
                "yearly_energy_kwh".to_string(),
                format!("{:.6}", self.yearly_energy),
            ),
            (
                "loss_fraction_pct".to_string(),
                format!("{:.6}", self.loss_fraction),
            ),
            (
                "interpolated_bins".to_string(),
                self.interpolated.iter().filter(|&&f| f).count().to_string(),
            ),
            ("params_hash".to_string(), self.params_hash.clone()),
        ];
        if let Some(rmse) = self.rmse {
            pairs.push(("rmse_kwh".to_string(), format!("{rmse:.6}")));
        }
        if let Some(re) = self.re {
            pairs.push(("re_pct".to_string(), format!("{re:.6}")));
        }
        io::write_kv(path, &pairs)
    }

    /// Writes the machine-readable per-bin table:
    /// `bin,declination_deg,loss_kwh,energy_kwh`.
    pub fn save_bins(&self, path: &Path) -> Result<()> {
        save_bin_table(path, &self.per_bin_loss, &self.per_bin_energy, &self.params_hash)
    }
}

/// Writes a per-bin table `bin,declination_deg,loss_kwh,energy_kwh` with a
/// leading `# params_hash` comment.
pub fn save_bin_table(path: &Path, loss: &[f64], energy: &[f64], params_hash: &str) -> Result<()> {
    use std::io::Write;
    if loss.len() != N_BINS || energy.len() != N_BINS {
        return Err(Error::DimensionMismatch(format!(
            "bin table needs {N_BINS} rows, got {} and {}",
            loss.len(),
            energy.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# params_hash {params_hash}")?;
    writeln!(f, "bin,declination_deg,loss_kwh,energy_kwh")?;
    for b in 0..N_BINS {
        writeln!(
            f,
            "{b},{:.6},{},{}",
            bin_center(b),
            format_float(loss[b]),
            format_float(energy[b])
        )?;
    }
    Ok(())
}

fn format_float(v: f64) -> String {
    format!("{v:.9}")
}

/// Reads a per-bin table written by [`save_bin_table`]; returns
/// (loss, energy).
pub fn load_bin_table(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut loss = Vec::new();
    let mut energy = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad number {s:?}"),
            })
        };
        loss.push(parse(fields[2])?);
        energy.push(parse(fields[3])?);
    }
    if loss.len() != N_BINS {
        return Err(Error::Artifact(format!(
            "bin table has {} rows, expected {N_BINS}",
            loss.len()
        )));
    }
    Ok((loss, energy))
}
