//! End-to-end orchestration from a raw power series to a shade report.
//!
//! `prepare` runs the full preprocessing chain: snap the series to a
//! regular grid, fold it into a day matrix, estimate seasonal
//! sunrise/sunset curves, fill short gaps, label clear days, resample
//! every day onto the fixed daylight grid, normalize, and average clear
//! days into declination bins. `analyze` then decomposes the binned
//! matrix against a clear-sky corpus and converts the shade component to
//! energy.

use chrono::NaiveDate;

use crate::corpus::ClearSkyCorpus;
use crate::error::{Error, Result};
use crate::ingest::{embed, fill_gaps, regularize, RawSeries};
use crate::preprocess::{
    bin_average, detect_clear_days, mask_resample, normalize, PrepConfig, TransformedSignal,
};
use crate::report::{shade_report, ShadeReport};
use crate::sd::{self, Decomposition, SdParams};
use crate::solar::{day_geometry, detect_sunrise_sunset, DayGeometry};

/// A preprocessed series: the binned signal plus the per-day context
/// needed to map results back onto the original time grid.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub signal: TransformedSignal,
    pub geometry: Vec<DayGeometry>,
    /// Clear flag per day of the embedded matrix.
    pub clear: Vec<bool>,
    /// Samples per day of the regularized series.
    pub n_per_day: usize,
    /// Sampling interval, seconds.
    pub interval: u32,
    /// Calendar date of day 0.
    pub start_date: NaiveDate,
}

/// Runs the preprocessing chain on a parsed series.
pub fn prepare(series: &RawSeries, cfg: &PrepConfig) -> Result<PreparedData> {
    let regular = regularize(series)?;
    let matrix = embed(&regular)?;
    // A first sunrise/sunset estimate on the raw matrix guides gap
    // filling; the final estimate runs on the filled matrix.
    let sun_first = detect_sunrise_sunset(&matrix, &cfg.sunrise)?;
    let filled = fill_gaps(&matrix, &sun_first)?;
    let sun = detect_sunrise_sunset(&filled, &cfg.sunrise)?;
    let geometry = day_geometry(&filled, &sun)?;
    let clear = detect_clear_days(&filled, &geometry, cfg)?;
    let mut profiles = mask_resample(&filled, &geometry, &clear, cfg)?;
    let norm = normalize(&mut profiles, filled.n_days(), cfg)?;
    let signal = bin_average(&profiles, &geometry, &norm, cfg)?;
    Ok(PreparedData {
        signal,
        geometry,
        clear,
        n_per_day: filled.n_per_day(),
        interval: filled.interval,
        start_date: filled.start_date,
    })
}

/// Result of one analysis: the decomposition, the energy report, and any
/// warnings that should surface without failing the run.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub decomposition: Decomposition,
    pub report: ShadeReport,
    pub warnings: Vec<String>,
}

/// Decomposes a prepared signal against a corpus and builds the report.
///
/// Nonconvergence becomes a warning, never a silent success; a violated
/// solver invariant is a hard error.
pub fn analyze(
    prepared: &PreparedData,
    corpus: &ClearSkyCorpus,
    params: SdParams,
) -> Result<Analysis> {
    let prob = sd::build_problem(&prepared.signal, corpus, params)?;
    let decomposition = sd::solve(&prob);
    let mut warnings = Vec::new();
    if !decomposition.converged {
        warnings.push(format!(
            "solver stopped after {} iterations without reaching tolerances \
             (primal residual {:.3e}, dual residual {:.3e})",
            decomposition.iterations,
            decomposition.primal_residual,
            decomposition.dual_residual
        ));
    }
    sd::verify_invariants(&prob, &decomposition).map_err(Error::Numerical)?;
    let report = shade_report(&decomposition, &prepared.signal)?;
    Ok(Analysis {
        decomposition,
        report,
        warnings,
    })
}

/// Parses, prepares, and analyzes a series in one call.
pub fn analyze_series(
    series: &RawSeries,
    cfg: &PrepConfig,
    corpus: &ClearSkyCorpus,
    params: SdParams,
) -> Result<(PreparedData, Analysis)> {
    let prepared = prepare(series, cfg)?;
    let analysis = analyze(&prepared, corpus, params)?;
    Ok((prepared, analysis))
}
