//! YOLO label and detection text files, size manifests and dataset indexing.
//!
//! A label line is `<category_id> <cx> <cy> <w> <h>` in normalized coordinates.
//! Detection files append a sixth `<confidence>` column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{ImageSize, NormBox};

/// One parsed label or detection line.
pub type AnnotationRecord = NormBox;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: {field} = {value} outside [0, 1]")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<AnnotationError>,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateStem(String),
    #[error("{path}: cannot read image header: {reason}")]
    ImageHeader { path: PathBuf, reason: String },
}

impl AnnotationError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn in_file(self, path: &Path) -> Self {
        Self::InFile {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    /// 1-based line number of the innermost parse error, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Malformed { line, .. } | Self::OutOfRange { line, .. } => Some(*line),
            Self::InFile { source, .. } => source.line(),
            _ => None,
        }
    }
}

/// Range handling for label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RangeMode {
    /// Values outside `[0, 1]` are an error.
    #[default]
    Strict,
    /// Values outside `[0, 1]` are clamped.
    Clamp,
}

pub fn parse_label_text(
    text: &str,
    mode: RangeMode,
) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(AnnotationError::Malformed {
                line,
                reason: format!("expected 5 or 6 fields, found {}", fields.len()),
            });
        }
        let category_id: u32 = fields[0].parse().map_err(|_| AnnotationError::Malformed {
            line,
            reason: format!("category id `{}` is not a non-negative integer", fields[0]),
        })?;
        const NAMES: [&str; 5] = ["cx", "cy", "w", "h", "confidence"];
        let mut values = [0.0f64; 5];
        for (k, token) in fields[1..].iter().enumerate() {
            let v: f64 = parse_real(token).ok_or_else(|| AnnotationError::Malformed {
                line,
                reason: format!("{} `{}` is not a decimal number", NAMES[k], token),
            })?;
            values[k] = if (0.0..=1.0).contains(&v) {
                v
            } else {
                match mode {
                    RangeMode::Strict => {
                        return Err(AnnotationError::OutOfRange {
                            line,
                            field: NAMES[k],
                            value: v,
                        })
                    }
                    RangeMode::Clamp => v.clamp(0.0, 1.0),
                }
            };
        }
        let mut rec = NormBox::new(category_id, values[0], values[1], values[2], values[3]);
        if fields.len() == 6 {
            rec.confidence = Some(values[4]);
        }
        records.push(rec);
    }
    Ok(records)
}

/// Decimal-dot reals only; rejects `inf`, `nan` and comma decimals.
fn parse_real(token: &str) -> Option<f64> {
    if !token
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
    {
        return None;
    }
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Format records one per line with six decimals. With `with_confidence`, a
/// record lacking a confidence is written with 1.0.
pub fn write_label_text(records: &[AnnotationRecord], with_confidence: bool) -> String {
    let mut out = String::new();
    for r in records {
        write!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            r.category_id, r.cx, r.cy, r.w, r.h
        )
        .unwrap();
        if with_confidence {
            write!(out, " {:.6}", r.confidence.unwrap_or(1.0)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn read_label_file(
    path: &Path,
    mode: RangeMode,
) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnotationError::io(path, e))?;
    parse_label_text(&text, mode).map_err(|e| e.in_file(path))
}

pub fn write_label_file(
    path: &Path,
    records: &[AnnotationRecord],
    with_confidence: bool,
) -> Result<(), AnnotationError> {
    std::fs::write(path, write_label_text(records, with_confidence))
        .map_err(|e| AnnotationError::io(path, e))
}

/// Image sizes keyed by image id, as read from a `image_id,width,height` CSV.
pub type SizeManifest = BTreeMap<String, ImageSize>;

pub fn parse_sizes_csv(text: &str) -> Result<SizeManifest, AnnotationError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut sizes = SizeManifest::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| AnnotationError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(AnnotationError::Malformed {
                line,
                reason: format!("expected image_id,width,height, found {} fields", row.len()),
            });
        }
        let dim = |k: usize| -> Result<u32, AnnotationError> {
            row[k].parse().map_err(|_| AnnotationError::Malformed {
                line,
                reason: format!("`{}` is not a pixel count", &row[k]),
            })
        };
        let size = ImageSize::new(dim(1)?, dim(2)?).map_err(|e| AnnotationError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if sizes.insert(row[0].to_string(), size).is_some() {
            return Err(AnnotationError::DuplicateStem(row[0].to_string()));
        }
    }
    Ok(sizes)
}

pub fn read_sizes_csv(path: &Path) -> Result<SizeManifest, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnotationError::io(path, e))?;
    parse_sizes_csv(&text).map_err(|e| e.in_file(path))
}

pub fn write_sizes_csv(sizes: &SizeManifest) -> String {
    let mut out = String::from("image_id,width,height\n");
    for (id, s) in sizes {
        writeln!(out, "{},{},{}", id, s.width, s.height).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub image_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
    pub image_size: Option<ImageSize>,
}

impl DatasetEntry {
    /// Records for this entry; a missing label file means zero annotations.
    pub fn read_labels(&self, mode: RangeMode) -> Result<Vec<AnnotationRecord>, AnnotationError> {
        match &self.label_path {
            Some(p) => read_label_file(p, mode),
            None => Ok(Vec::new()),
        }
    }
}

/// Images paired with their label files, sorted bytewise by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn get(&self, image_id: &str) -> Option<&DatasetEntry> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter()
    }

    /// Fill in sizes from a manifest. Manifest ids without a matching entry
    /// are ignored.
    pub fn apply_sizes(&mut self, sizes: &SizeManifest) {
        for e in &mut self.entries {
            if let Some(s) = sizes.get(&e.image_id) {
                e.image_size = Some(*s);
            }
        }
    }

    /// Probe image headers for entries that have an image but no size yet.
    pub fn probe_image_sizes(&mut self) -> Result<(), AnnotationError> {
        for e in &mut self.entries {
            if e.image_size.is_none() {
                if let Some(p) = &e.image_path {
                    e.image_size = Some(probe_image_size(p)?);
                }
            }
        }
        Ok(())
    }
}

/// Read only the image header to get its dimensions.
pub fn probe_image_size(path: &Path) -> Result<ImageSize, AnnotationError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| AnnotationError::ImageHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    ImageSize::new(w, h).map_err(|e| AnnotationError::ImageHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn stem_with_extension(path: &Path, accept: &[&str]) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !accept.contains(&ext.as_str()) {
        return None;
    }
    path.file_stem()?.to_str().map(str::to_owned)
}

fn list_dir(dir: &Path, accept: &[&str]) -> Result<BTreeMap<String, PathBuf>, AnnotationError> {
    let mut found = BTreeMap::new();
    let rd = std::fs::read_dir(dir).map_err(|e| AnnotationError::io(dir, e))?;
    for item in rd {
        let item = item.map_err(|e| AnnotationError::io(dir, e))?;
        let path = item.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = stem_with_extension(&path, accept) {
            if found.insert(stem.clone(), path).is_some() {
                return Err(AnnotationError::DuplicateStem(stem));
            }
        }
    }
    Ok(found)
}

/// Pair `.png`/`.jpg`/`.jpeg` images with same-stem `.txt` files.
///
/// Either directory may be omitted for label-only or image-only workflows.
/// Image sizes are left unset; see [`DatasetIndex::probe_image_sizes`] and
/// [`DatasetIndex::apply_sizes`].
pub fn index_dataset(
    images_dir: Option<&Path>,
    labels_dir: Option<&Path>,
) -> Result<DatasetIndex, AnnotationError> {
    let images = match images_dir {
        Some(d) => list_dir(d, &IMAGE_EXTENSIONS)?,
        None => BTreeMap::new(),
    };
    let mut labels = match labels_dir {
        Some(d) => list_dir(d, &["txt"])?,
        None => BTreeMap::new(),
    };
    let mut entries: Vec<DatasetEntry> = images
        .into_iter()
        .map(|(id, path)| DatasetEntry {
            label_path: labels.remove(&id),
            image_id: id,
            image_path: Some(path),
            image_size: None,
        })
        .collect();
    entries.extend(labels.into_iter().map(|(id, path)| DatasetEntry {
        image_id: id,
        image_path: None,
        label_path: Some(path),
        image_size: None,
    }));
    // BTreeMap<String> order is bytewise on UTF-8, which is what we want.
    entries.sort_by(|a, b| a.image_id.as_bytes().cmp(b.image_id.as_bytes()));
    Ok(DatasetIndex { entries })
}
