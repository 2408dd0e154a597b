//! Bait-side splitting and timestamped count series.
//!
//! A separator line `y = a x + b` assigns each detection center to the side
//! where `y - a x - b` is positive (points on the line included) or negative.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;

use chrono::{DateTime, Duration, FixedOffset, NaiveDateTime};
use thiserror::Error;

use crate::geometry::PixelBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("line {line}: cannot parse timestamp `{value}`")]
    Timestamp { line: usize, value: String },
    #[error("time manifest mixes elapsed hours and calendar timestamps")]
    MixedTimestamps,
    #[error("image `{0}` has detections but no timestamp")]
    MissingTimestamp(String),
    #[error("image `{0}` listed twice in the time manifest")]
    DuplicateImage(String),
    #[error("bin width must be a positive number of hours, got {0}")]
    BinWidth(f64),
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("separator parameters must be finite")]
    NonFiniteLine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LineSeparator {
    /// `y = slope * x + intercept`, in image pixels.
    Sloped { slope: f64, intercept: f64 },
    /// `x = at`; points with `x >= at` are on the positive side.
    Vertical { at: f64 },
}

impl LineSeparator {
    pub fn sloped(slope: f64, intercept: f64) -> Result<Self, AnalyticsError> {
        if !(slope.is_finite() && intercept.is_finite()) {
            return Err(AnalyticsError::NonFiniteLine);
        }
        Ok(Self::Sloped { slope, intercept })
    }

    pub fn vertical(at: f64) -> Result<Self, AnalyticsError> {
        if !at.is_finite() {
            return Err(AnalyticsError::NonFiniteLine);
        }
        Ok(Self::Vertical { at })
    }

    /// Signed value whose sign decides the side.
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        match *self {
            Self::Sloped { slope, intercept } => y - slope * x - intercept,
            Self::Vertical { at } => x - at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Positive,
    Negative,
}

pub fn line_side(point: (f64, f64), line: &LineSeparator) -> Side {
    if line.evaluate(point.0, point.1) >= 0.0 {
        Side::Positive
    } else {
        Side::Negative
    }
}

/// `(positive, negative)` counts by detection center.
pub fn split_counts(dets: &[PixelBox], line: &LineSeparator) -> (usize, usize) {
    let positive = dets
        .iter()
        .filter(|d| line_side((d.cx, d.cy), line) == Side::Positive)
        .count();
    (positive, dets.len() - positive)
}

/// A capture time: elapsed hours or a calendar timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timestamp {
    Hours(f64),
    At(DateTime<FixedOffset>),
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hours(h) => write!(f, "{h}"),
            Self::At(t) => write!(f, "{}", t.to_rfc3339()),
        }
    }
}

impl Timestamp {
    /// Hours, or an ISO-8601 date-time (offset optional, UTC assumed).
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(h) = s.parse::<f64>() {
            return h.is_finite().then_some(Self::Hours(h));
        }
        parse_datetime(s).map(Self::At)
    }

    fn is_hours(&self) -> bool {
        matches!(self, Self::Hours(_))
    }

    /// Sort key in hours relative to an arbitrary fixed origin.
    fn key_hours(&self) -> f64 {
        match self {
            Self::Hours(h) => *h,
            Self::At(t) => t.timestamp_micros() as f64 / 3.6e9,
        }
    }
}

fn parse_datetime(s: &str) -> Option<DateTime<FixedOffset>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t);
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f%:z",
        "%Y-%m-%d %H:%M:%S%.f%:z",
        "%Y-%m-%dT%H:%M%:z",
    ] {
        if let Ok(t) = DateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().fixed_offset());
        }
    }
    None
}

/// `image_id,timestamp` rows. All timestamps in one manifest must be of the
/// same kind.
pub fn parse_time_manifest(text: &str) -> Result<Vec<(String, Timestamp)>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| AnalyticsError::Csv {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(AnalyticsError::Csv {
                line,
                reason: format!("expected image_id,timestamp, found {} fields", rec.len()),
            });
        }
        let t = Timestamp::parse(&rec[1]).ok_or_else(|| AnalyticsError::Timestamp {
            line,
            value: rec[1].to_string(),
        })?;
        rows.push((rec[0].to_string(), t));
    }
    if let Some((_, first)) = rows.first() {
        if rows.iter().any(|(_, t)| t.is_hours() != first.is_hours()) {
            return Err(AnalyticsError::MixedTimestamps);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub image_id: String,
    pub t: Timestamp,
    pub total: usize,
    pub side_positive: Option<usize>,
    pub side_negative: Option<usize>,
}

/// Count series ordered by time (ties by image id).
///
/// Manifest images without detections count as zero. With `bin_width_hours`,
/// rows falling in the same bin are summed; the bin row carries the bin start
/// and the first image id of the bin. Elapsed-hour bins start at multiples of
/// the width; calendar bins are anchored at the earliest timestamp.
pub fn build_timeseries(
    per_image: &HashMap<String, Vec<PixelBox>>,
    manifest: &[(String, Timestamp)],
    line: Option<&LineSeparator>,
    bin_width_hours: Option<f64>,
) -> Result<Vec<SeriesRow>, AnalyticsError> {
    let mut times: BTreeMap<&str, Timestamp> = BTreeMap::new();
    for (id, t) in manifest {
        if times.insert(id.as_str(), *t).is_some() {
            return Err(AnalyticsError::DuplicateImage(id.clone()));
        }
    }
    if let Some((_, first)) = manifest.first() {
        if manifest
            .iter()
            .any(|(_, t)| t.is_hours() != first.is_hours())
        {
            return Err(AnalyticsError::MixedTimestamps);
        }
    }
    let mut missing: Vec<&String> = per_image
        .keys()
        .filter(|k| !times.contains_key(k.as_str()))
        .collect();
    missing.sort();
    if let Some(id) = missing.first() {
        return Err(AnalyticsError::MissingTimestamp((*id).clone()));
    }

    let mut rows: Vec<SeriesRow> = times
        .iter()
        .map(|(id, t)| {
            let dets = per_image.get(*id).map(Vec::as_slice).unwrap_or(&[]);
            let (side_positive, side_negative) = match line {
                Some(l) => {
                    let (p, n) = split_counts(dets, l);
                    (Some(p), Some(n))
                }
                None => (None, None),
            };
            SeriesRow {
                image_id: id.to_string(),
                t: *t,
                total: dets.len(),
                side_positive,
                side_negative,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.t.key_hours()
            .total_cmp(&b.t.key_hours())
            .then_with(|| a.image_id.as_bytes().cmp(b.image_id.as_bytes()))
    });

    match bin_width_hours {
        None => Ok(rows),
        Some(w) if w.is_finite() && w > 0.0 => Ok(bin_rows(rows, w)),
        Some(w) => Err(AnalyticsError::BinWidth(w)),
    }
}

fn bin_rows(rows: Vec<SeriesRow>, width: f64) -> Vec<SeriesRow> {
    let anchor = rows.first().map(|r| r.t);
    let bin_of = |t: &Timestamp| -> (i64, Timestamp) {
        match (t, anchor) {
            (Timestamp::Hours(h), _) => {
                let k = (h / width).floor();
                (k as i64, Timestamp::Hours(k * width))
            }
            (Timestamp::At(at), Some(Timestamp::At(origin))) => {
                let elapsed = (*at - origin).num_microseconds().unwrap_or(i64::MAX) as f64 / 3.6e9;
                let k = (elapsed / width).floor();
                let start = origin + Duration::microseconds((k * width * 3.6e9).round() as i64);
                (k as i64, Timestamp::At(start))
            }
            (Timestamp::At(_), _) => unreachable!("manifest kinds are uniform"),
        }
    };
    let mut out: Vec<(i64, SeriesRow)> = Vec::new();
    for row in rows {
        let (k, start) = bin_of(&row.t);
        match out.last_mut() {
            Some((last_k, acc)) if *last_k == k => {
                acc.total += row.total;
                acc.side_positive = acc.side_positive.zip(row.side_positive).map(|(a, b)| a + b);
                acc.side_negative = acc.side_negative.zip(row.side_negative).map(|(a, b)| a + b);
            }
            _ => out.push((k, SeriesRow { t: start, ..row })),
        }
    }
    out.into_iter().map(|(_, r)| r).collect()
}

pub const SERIES_HEADER: &str = "image_id,t,total,side_positive,side_negative";

pub fn export_series_csv(rows: &[SeriesRow]) -> String {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wtr.write_record(SERIES_HEADER.split(',')).unwrap();
    let opt = |v: Option<usize>| v.map(|n| n.to_string()).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.image_id.clone(),
            r.t.to_string(),
            r.total.to_string(),
            opt(r.side_positive),
            opt(r.side_negative),
        ])
        .unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}

pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesRow>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let bad = |reason: String| AnalyticsError::Csv { line, reason };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let count = |k: usize| -> Result<Option<usize>, AnalyticsError> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                rec[k]
                    .parse()
                    .map(Some)
                    .map_err(|_| bad(format!("`{}` is not a count", &rec[k])))
            }
        };
        let t = Timestamp::parse(&rec[1]).ok_or_else(|| AnalyticsError::Timestamp {
            line,
            value: rec[1].to_string(),
        })?;
        rows.push(SeriesRow {
            image_id: rec[0].to_string(),
            t,
            total: count(2)?.ok_or_else(|| bad("total is empty".into()))?,
            side_positive: count(3)?,
            side_negative: count(4)?,
        });
    }
    Ok(rows)
}

/// Minimal SVG line plot of the series: total, plus one polyline per side
/// when side counts are present.
pub fn series_svg(rows: &[SeriesRow]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let xs: Vec<f64> = rows.iter().map(|r| r.t.key_hours()).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_max = rows.iter().map(|r| r.total).max().unwrap_or(0).max(1) as f64;
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| PAD + (x - x_min) / x_span * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{PAD}" y="{}" font-size="12">max {y_max}</text>"#,
        PAD - 8.0
    )
    .unwrap();
    let mut series: Vec<(&str, &str, Vec<f64>)> = vec![(
        "total",
        "black",
        rows.iter().map(|r| r.total as f64).collect(),
    )];
    if rows.iter().all(|r| r.side_positive.is_some()) && !rows.is_empty() {
        series.push((
            "positive",
            "#d95f02",
            rows.iter()
                .map(|r| r.side_positive.unwrap_or(0) as f64)
                .collect(),
        ));
        series.push((
            "negative",
            "#1b9e77",
            rows.iter()
                .map(|r| r.side_negative.unwrap_or(0) as f64)
                .collect(),
        ));
    }
    for (name, color, ys) in series {
        let points: Vec<String> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline class="{name}" fill="none" stroke="{color}" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
