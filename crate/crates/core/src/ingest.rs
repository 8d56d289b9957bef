//! Reading and gridding of raw power time series.
//!
//! The input format is two-column delimited text (comma or tab): an ISO-8601
//! local timestamp and a power value in kW. Parsing, snapping onto a regular
//! grid, and folding into a samples-per-day by days matrix live here, together
//! with daytime gap filling.

use crate::error::{Error, Result};
use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use ndarray::Array2;
use std::collections::HashMap;
use std::io::BufRead;

/// Minimum number of distinct calendar days a series must cover.
pub const MIN_DISTINCT_DAYS: usize = 180;

/// Fraction of missing daytime samples above which a day is unusable.
pub const MAX_DAYTIME_GAP_FRAC: f64 = 0.2;

/// A power time series in timezone-naive local time.
///
/// Power is kW; missing samples are `f64::NAN`. Present values are finite and
/// nonnegative. Timestamps are strictly increasing. `interval` is `None`
/// until [`regularize`] has run; afterwards consecutive timestamps differ by
/// exactly `interval` seconds.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub power: Vec<f64>,
    pub interval: Option<u32>,
}

/// A series folded into one column per calendar day.
///
/// `values[(r, d)]` is the sample at `start_date + d` days, `r * interval`
/// seconds after midnight. `gap_mask` is true where the series had no sample
/// (missing or padding); it is preserved by gap filling. `usable` is set by
/// [`fill_gaps`]: days with too little daytime coverage are excluded
/// downstream.
#[derive(Debug, Clone)]
pub struct DayMatrix {
    pub values: Array2<f64>,
    pub gap_mask: Array2<bool>,
    pub start_date: NaiveDate,
    pub interval: u32,
    pub usable: Vec<bool>,
}

impl DayMatrix {
    pub fn n_per_day(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_days(&self) -> usize {
        self.values.ncols()
    }

    /// Calendar date of column `d`.
    pub fn date(&self, d: usize) -> NaiveDate {
        self.start_date + Duration::days(d as i64)
    }
}

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
];

fn parse_timestamp(field: &str) -> Option<NaiveDateTime> {
    let field = field.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(field, fmt).ok())
}

/// Parses a two-column delimited series.
///
/// A single leading header line is tolerated. Non-numeric, non-finite, or
/// empty power fields become missing samples; negative power is clamped to
/// zero. Duplicate timestamps collapse to the last occurrence. Returns an
/// error naming the line for an unparseable timestamp, and an
/// insufficient-data error when fewer than [`MIN_DISTINCT_DAYS`] distinct
/// calendar days are present.
pub fn parse_series<R: BufRead>(reader: R) -> Result<RawSeries> {
    let mut entries: Vec<(NaiveDateTime, f64)> = Vec::new();
    let mut first_data_line_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (ts_field, value_field) = trimmed
            .split_once(',')
            .or_else(|| trimmed.split_once('\t'))
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected two delimited columns".into(),
            })?;
        let ts = match parse_timestamp(ts_field) {
            Some(ts) => ts,
            None if !first_data_line_seen => {
                // Header line: skip it, but only once at the top of the file.
                first_data_line_seen = true;
                continue;
            }
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unparseable timestamp {:?}", ts_field.trim()),
                })
            }
        };
        first_data_line_seen = true;
        let power = match value_field.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => v.max(0.0),
            _ => f64::NAN,
        };
        entries.push((ts, power));
    }

    // Stable sort by time, then keep the last occurrence of each timestamp.
    entries.sort_by_key(|(ts, _)| *ts);
    let mut deduped: Vec<(NaiveDateTime, f64)> = Vec::with_capacity(entries.len());
    for (ts, p) in entries {
        match deduped.last_mut() {
            Some((last_ts, last_p)) if *last_ts == ts => *last_p = p,
            _ => deduped.push((ts, p)),
        }
    }

    let mut days: Vec<NaiveDate> = deduped.iter().map(|(ts, _)| ts.date()).collect();
    days.dedup();
    if days.len() < MIN_DISTINCT_DAYS {
        return Err(Error::InsufficientData(format!(
            "{} distinct days present, need at least {MIN_DISTINCT_DAYS}",
            days.len()
        )));
    }

    let (timestamps, power) = deduped.into_iter().unzip();
    Ok(RawSeries {
        timestamps,
        power,
        interval: None,
    })
}

/// Snaps a series onto a regular grid at its modal sampling interval.
///
/// The interval is the most frequent spacing between consecutive samples
/// (smallest wins a tie) and must divide 86400 s. The grid is aligned to
/// midnight and spans the rounded first through last sample instants; samples
/// land on the nearest grid point when within half an interval, all other
/// grid points are missing.
pub fn regularize(series: &RawSeries) -> Result<RawSeries> {
    if series.timestamps.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two samples to infer a sampling interval".into(),
        ));
    }
    let mut delta_counts: HashMap<i64, usize> = HashMap::new();
    for pair in series.timestamps.windows(2) {
        let dt = (pair[1] - pair[0]).num_seconds();
        *delta_counts.entry(dt).or_insert(0) += 1;
    }
    let interval = delta_counts
        .iter()
        .map(|(&dt, &count)| (count, std::cmp::Reverse(dt)))
        .max()
        .map(|(_, std::cmp::Reverse(dt))| dt)
        .expect("at least one delta");
    if interval <= 0 || 86400 % interval != 0 {
        return Err(Error::UnsupportedCadence {
            interval: interval.max(0) as u32,
        });
    }

    let snap = |ts: NaiveDateTime| -> i64 {
        let midnight = ts.date().and_hms_opt(0, 0, 0).expect("midnight");
        let epoch = midnight.and_utc().timestamp();
        let sod = ts.num_seconds_from_midnight() as f64;
        epoch + (sod / interval as f64).round() as i64 * interval
    };
    let first = snap(series.timestamps[0]);
    let last = snap(*series.timestamps.last().expect("nonempty"));
    let n = ((last - first) / interval) as usize + 1;

    let mut power = vec![f64::NAN; n];
    for (ts, &p) in series.timestamps.iter().zip(&series.power) {
        let t = ts.and_utc().timestamp();
        let idx = ((t - first) as f64 / interval as f64).round() as i64;
        if idx < 0 || idx >= n as i64 {
            continue;
        }
        let grid_t = first + idx * interval;
        if ((t - grid_t).abs() as f64) <= interval as f64 / 2.0 {
            power[idx as usize] = p;
        }
    }

    let timestamps = (0..n)
        .map(|i| {
            chrono::DateTime::from_timestamp(first + i as i64 * interval, 0)
                .expect("valid timestamp")
                .naive_utc()
        })
        .collect();
    Ok(RawSeries {
        timestamps,
        power,
        interval: Some(interval as u32),
    })
}

/// Folds a regularized series into a day matrix.
///
/// Columns run over consecutive calendar days from the first to the last
/// sample's date. Grid points outside the series (leading or trailing
/// padding) and missing samples are NaN with `gap_mask` set.
pub fn embed(series: &RawSeries) -> Result<DayMatrix> {
    let interval = series.interval.ok_or_else(|| {
        Error::InvalidArgument("embed requires a regularized series".into())
    })? as i64;
    let n_per_day = (86400 / interval) as usize;
    let first = series.timestamps[0];
    let last = *series.timestamps.last().expect("nonempty");
    let start_date = first.date();
    let n_days = (last.date() - start_date).num_days() as usize + 1;

    let mut values = Array2::from_elem((n_per_day, n_days), f64::NAN);
    let mut gap_mask = Array2::from_elem((n_per_day, n_days), true);
    for (ts, &p) in series.timestamps.iter().zip(&series.power) {
        let d = (ts.date() - start_date).num_days() as usize;
        let r = (ts.num_seconds_from_midnight() as i64 / interval) as usize;
        if p.is_nan() {
            continue;
        }
        values[(r, d)] = p;
        gap_mask[(r, d)] = false;
    }
    let usable = vec![true; n_days];
    Ok(DayMatrix {
        values,
        gap_mask,
        start_date,
        interval: interval as u32,
        usable,
    })
}

/// Fills gaps: linear interpolation inside the daylight window, zeros at
/// night.
///
/// `sun` gives per-day (sunrise, sunset) as fractional row indices. Daytime
/// gaps interpolate between the nearest valid samples of the same day
/// (constant extension when only one side has data). A day whose daylight
/// window has no valid sample at all, or more than [`MAX_DAYTIME_GAP_FRAC`]
/// missing daytime samples, is marked unusable. `gap_mask` is unchanged, so
/// filled entries stay identifiable; the operation is idempotent.
pub fn fill_gaps(m: &DayMatrix, sun: &[(f64, f64)]) -> Result<DayMatrix> {
    if sun.len() != m.n_days() {
        return Err(Error::DimensionMismatch(format!(
            "sunrise/sunset entries {} vs days {}",
            sun.len(),
            m.n_days()
        )));
    }
    let n = m.n_per_day();
    let mut out = m.clone();
    for d in 0..m.n_days() {
        let (sunrise, sunset) = sun[d];
        let day_lo = sunrise.ceil().max(0.0) as usize;
        let day_hi = (sunset.floor() as usize).min(n - 1);

        let daytime: Vec<usize> = (day_lo..=day_hi.max(day_lo)).collect();
        let valid: Vec<usize> = daytime
            .iter()
            .copied()
            .filter(|&r| !m.values[(r, d)].is_nan())
            .collect();
        let missing_daytime = daytime.len() - valid.len();
        if valid.is_empty() || missing_daytime as f64 > MAX_DAYTIME_GAP_FRAC * daytime.len() as f64
        {
            out.usable[d] = false;
        }

        for r in 0..n {
            if !m.values[(r, d)].is_nan() {
                continue;
            }
            let in_daylight = (r as f64) >= sunrise && (r as f64) <= sunset;
            if !in_daylight {
                out.values[(r, d)] = 0.0;
            } else if !valid.is_empty() {
                let after = valid.iter().find(|&&v| v > r).copied();
                let before = valid.iter().rev().find(|&&v| v < r).copied();
                out.values[(r, d)] = match (before, after) {
                    (Some(b), Some(a)) => {
                        let frac = (r - b) as f64 / (a - b) as f64;
                        m.values[(b, d)] * (1.0 - frac) + m.values[(a, d)] * frac
                    }
                    (Some(b), None) => m.values[(b, d)],
                    (None, Some(a)) => m.values[(a, d)],
                    (None, None) => unreachable!("valid is nonempty"),
                };
            }
            // Unusable day with no valid daytime data: NaN stays.
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).expect("test timestamp")
    }

    /// Builds a parseable file with one sample per day so the distinct-day
    /// requirement is met, followed by extra custom lines.
    fn with_enough_days(extra: &str) -> String {
        let mut text = String::new();
        for d in 0..MIN_DISTINCT_DAYS {
            let date = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + Duration::days(d as i64);
            text.push_str(&format!("{date}T12:00,1.0\n"));
        }
        text.push_str(extra);
        text
    }

    #[test]
    fn parses_two_columns_with_and_without_seconds() {
        let text = with_enough_days("2019-07-01T08:00,1.52\n2019-07-01T08:05:00,1.61\n");
        let s = parse_series(Cursor::new(text)).unwrap();
        assert_eq!(s.power.len(), MIN_DISTINCT_DAYS + 2);
        let i = s.timestamps.iter().position(|&t| t == ts("2019-07-01T08:00")).unwrap();
        assert_abs_diff_eq!(s.power[i], 1.52);
        assert_abs_diff_eq!(s.power[i + 1], 1.61);
        assert!(s.interval.is_none());
    }

    #[test]
    fn non_numeric_power_becomes_missing() {
        let text = with_enough_days("2019-07-01T08:00,not_a_number\n");
        let s = parse_series(Cursor::new(text)).unwrap();
        let i = s.timestamps.iter().position(|&t| t == ts("2019-07-01T08:00")).unwrap();
        assert!(s.power[i].is_nan());
    }

    #[test]
    fn tab_delimited_and_header_accepted() {
        let mut text = String::from("timestamp\tpower_kw\n");
        text.push_str(&with_enough_days("2019-07-01 08:00\t2.5\n"));
        let s = parse_series(Cursor::new(text)).unwrap();
        let i = s.timestamps.iter().position(|&t| t == ts("2019-07-01T08:00")).unwrap();
        assert_abs_diff_eq!(s.power[i], 2.5);
    }

    #[test]
    fn duplicate_timestamps_keep_last() {
        let text = with_enough_days("2019-07-01T08:00,1.0\n2019-07-01T08:00,9.0\n");
        let s = parse_series(Cursor::new(text)).unwrap();
        let hits: Vec<f64> = s
            .timestamps
            .iter()
            .zip(&s.power)
            .filter(|(t, _)| **t == ts("2019-07-01T08:00"))
            .map(|(_, &p)| p)
            .collect();
        assert_eq!(hits, vec![9.0]);
    }

    #[test]
    fn bad_timestamp_is_an_error_naming_the_line() {
        let text = "2019-01-01T08:00,1.0\nnot-a-date,2.0\n";
        match parse_series(Cursor::new(text)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_days_is_insufficient_data() {
        let mut text = String::new();
        for d in 0..30 {
            let date = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap() + Duration::days(d);
            text.push_str(&format!("{date}T12:00,1.0\n"));
        }
        assert!(matches!(
            parse_series(Cursor::new(text)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn negative_power_clamps_to_zero() {
        let text = with_enough_days("2019-07-01T02:00,-0.02\n");
        let s = parse_series(Cursor::new(text)).unwrap();
        let i = s.timestamps.iter().position(|&t| t == ts("2019-07-01T02:00")).unwrap();
        assert_eq!(s.power[i], 0.0);
    }

    fn series_at(offsets_s: &[i64], base: &str) -> RawSeries {
        let base = ts(base);
        RawSeries {
            timestamps: offsets_s.iter().map(|&o| base + Duration::seconds(o)).collect(),
            power: vec![1.0; offsets_s.len()],
            interval: None,
        }
    }

    #[test]
    fn regularize_inserts_missing_grid_points() {
        let s = series_at(&[0, 300, 600, 1200], "2019-01-01T08:00");
        let r = regularize(&s).unwrap();
        assert_eq!(r.interval, Some(300));
        assert_eq!(r.power.len(), 5);
        assert!(r.power[3].is_nan());
        assert_eq!(r.timestamps[3], ts("2019-01-01T08:15"));
    }

    #[test]
    fn regularize_is_identity_on_regular_input() {
        let s = series_at(&[0, 300, 600, 900], "2019-01-01T08:00");
        let r = regularize(&s).unwrap();
        assert_eq!(r.timestamps, s.timestamps);
        assert_eq!(r.power, s.power);
    }

    #[test]
    fn regularize_rejects_cadence_not_dividing_day() {
        let s = series_at(&[0, 420, 840, 1260], "2019-01-01T08:00");
        assert!(matches!(
            regularize(&s),
            Err(Error::UnsupportedCadence { interval: 420 })
        ));
    }

    #[test]
    fn embed_shapes_two_days() {
        let mut offsets = Vec::new();
        for i in 0..(2 * 288) {
            offsets.push(i * 300);
        }
        let mut s = series_at(&offsets, "2019-01-01T00:00");
        s.interval = Some(300);
        let m = embed(&s).unwrap();
        assert_eq!(m.values.dim(), (288, 2));
        assert!(!m.gap_mask.iter().any(|&g| g));
    }

    #[test]
    fn embed_flags_leading_padding() {
        let offsets: Vec<i64> = (0..288).map(|i| i * 300).collect();
        let mut s = series_at(&offsets, "2019-01-01T12:00");
        s.interval = Some(300);
        let m = embed(&s).unwrap();
        assert_eq!(m.values.dim(), (288, 2));
        // Morning half of the first column is padding.
        assert!(m.gap_mask[(0, 0)]);
        assert!(m.gap_mask[(143, 0)]);
        assert!(!m.gap_mask[(144, 0)]);
        // Afternoon of the last day is padding too.
        assert!(m.gap_mask[(144, 1)]);
    }

    #[test]
    fn embed_three_years_of_daily_samples() {
        // 2019-01-01 through 2021-12-31 covers a leap year: 1096 columns.
        let days = NaiveDate::from_ymd_opt(2021, 12, 31).unwrap()
            - NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let offsets: Vec<i64> = (0..=days.num_days()).map(|d| d * 86400).collect();
        let mut s = series_at(&offsets, "2019-01-01T00:00");
        s.interval = Some(86400);
        let m = embed(&s).unwrap();
        assert_eq!(m.n_days(), 1096);
        assert_eq!(m.n_per_day(), 1);
    }

    fn small_matrix(values: &[f64]) -> DayMatrix {
        let n = values.len();
        let vals = Array2::from_shape_vec((n, 1), values.to_vec()).unwrap();
        let mask = vals.mapv(|v| v.is_nan());
        DayMatrix {
            values: vals,
            gap_mask: mask,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            interval: (86400 / n) as u32,
            usable: vec![true],
        }
    }

    #[test]
    fn fill_gaps_interpolates_daytime_and_zeros_night() {
        let m = small_matrix(&[f64::NAN, 0.5, 2.0, f64::NAN, 4.0, 0.2, f64::NAN, f64::NAN]);
        let filled = fill_gaps(&m, &[(1.0, 5.0)]).unwrap();
        assert_eq!(filled.values[(0, 0)], 0.0); // night
        assert_abs_diff_eq!(filled.values[(3, 0)], 3.0); // midpoint of 2.0 and 4.0
        assert_eq!(filled.values[(6, 0)], 0.0);
        assert_eq!(filled.values[(7, 0)], 0.0);
        assert!(filled.usable[0]);
        // gap positions still flagged
        assert!(filled.gap_mask[(3, 0)]);
        assert!(!filled.gap_mask[(2, 0)]);
    }

    #[test]
    fn fill_gaps_marks_empty_daytime_unusable() {
        let m = small_matrix(&[0.0, f64::NAN, f64::NAN, f64::NAN, f64::NAN, 0.0, 0.0, 0.0]);
        let filled = fill_gaps(&m, &[(1.0, 4.0)]).unwrap();
        assert!(!filled.usable[0]);
    }

    #[test]
    fn fill_gaps_is_idempotent() {
        let m = small_matrix(&[f64::NAN, 1.0, f64::NAN, 3.0, 2.5, 0.1, f64::NAN, f64::NAN]);
        let once = fill_gaps(&m, &[(1.0, 5.0)]).unwrap();
        let twice = fill_gaps(&once, &[(1.0, 5.0)]).unwrap();
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(once.gap_mask, twice.gap_mask);
        assert_eq!(once.usable, twice.usable);
    }

    proptest! {
        /// Flattening the embedded matrix column-major and dropping padding
        /// recovers the regularized samples exactly.
        #[test]
        fn embed_round_trips_regularized_samples(
            seed in 0u64..1000,
            n_days in 2usize..6,
            keep_frac in 0.3f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let interval = *[300i64, 900, 3600].iter().nth(seed as usize % 3).unwrap();
            let per_day = 86400 / interval;
            let base = ts("2019-03-01T07:30");
            let mut timestamps = Vec::new();
            let mut power = Vec::new();
            for i in 0..(n_days as i64 * per_day) {
                if rng.gen_bool(keep_frac) {
                    timestamps.push(base + Duration::seconds(i * interval));
                    power.push(rng.gen_range(0.0..5.0));
                }
            }
            prop_assume!(timestamps.len() >= 2);
            let raw = RawSeries { timestamps, power, interval: None };
            let reg = regularize(&raw).unwrap();
            prop_assume!(reg.interval == Some(interval as u32));
            let m = embed(&reg).unwrap();

            let mut recovered = Vec::new();
            let start_midnight = m.start_date.and_hms_opt(0, 0, 0).unwrap();
            for d in 0..m.n_days() {
                for r in 0..m.n_per_day() {
                    let t = start_midnight + Duration::seconds((d as i64 * 86400) + r as i64 * interval);
                    if t >= reg.timestamps[0] && t <= *reg.timestamps.last().unwrap() {
                        recovered.push((t, m.values[(r, d)]));
                    }
                }
            }
            prop_assert_eq!(recovered.len(), reg.power.len());
            for ((t, v), (rt, rv)) in recovered.iter().zip(reg.timestamps.iter().zip(&reg.power)) {
                prop_assert_eq!(t, rt);
                prop_assert_eq!(v.to_bits(), rv.to_bits());
            }
        }

        /// After gap filling, every entry of a usable day is finite and nonnegative.
        #[test]
        fn filled_usable_days_are_finite_nonnegative(
            seed in 0u64..1000,
            missing_frac in 0.0f64..0.5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 24usize;
            let mut vals = Vec::new();
            for d in 0..3 {
                for r in 0..n {
                    let daylight = (6..=18).contains(&r);
                    let v = if daylight { 2.0 + (d as f64) + (r as f64) / 10.0 } else { 0.0 };
                    vals.push(if rng.gen_bool(missing_frac) { f64::NAN } else { v });
                }
            }
            let values = Array2::from_shape_vec((n, 3), {
                // column-major fill
                let mut cm = vec![0.0; n * 3];
                for d in 0..3 {
                    for r in 0..n {
                        cm[r * 3 + d] = vals[d * n + r];
                    }
                }
                cm
            }).unwrap();
            let gap_mask = values.mapv(|v| v.is_nan());
            let m = DayMatrix {
                values,
                gap_mask,
                start_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
                interval: 3600,
                usable: vec![true; 3],
            };
            let filled = fill_gaps(&m, &[(6.0, 18.0); 3]).unwrap();
            for d in 0..3 {
                if filled.usable[d] {
                    for r in 0..n {
                        let v = filled.values[(r, d)];
                        prop_assert!(v.is_finite() && v >= 0.0, "day {} row {} value {}", d, r, v);
                    }
                }
            }
        }
    }
}
