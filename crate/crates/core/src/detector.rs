//! Detection sources and the sliced detection pipeline.
//!
//! Every backend answers the same question: given an image (or a tile of one),
//! which boxes does it see, in that frame's pixel coordinates. Outputs are
//! checked against the frame bounds and the confidence range before they are
//! used.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::annotation::{parse_label_text, AnnotationError, DatasetIndex, RangeMode};
use crate::geometry::{denormalize, ImageSize, PixelBox};
use crate::tiling::{crop_tile, merge, slice_boxes, to_global, GridSpec, Tile, TilingError};

pub const TIMEOUT_ENV: &str = "ANTCENSUS_EXTERNAL_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("image size unknown for `{0}`")]
    MissingSize(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error("backend returned an invalid box for `{image_id}`: {reason}")]
    ContractViolation { image_id: String, reason: String },
    #[error("failed to launch `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("runtime exited with {status} for `{image_id}`: {stderr}")]
    RuntimeFailed {
        image_id: String,
        status: String,
        stderr: String,
    },
    #[error("runtime timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed runtime output for `{image_id}`: {source}")]
    MalformedOutput {
        image_id: String,
        #[source]
        source: AnnotationError,
    },
    #[error("no pixel data available for `{0}`")]
    NoPixels(String),
    #[error("image i/o for `{image_id}`: {reason}")]
    Image { image_id: String, reason: String },
    #[error("tile r{row}c{col} of `{image_id}`: {source}")]
    Tile {
        image_id: String,
        row: u32,
        col: u32,
        #[source]
        source: Box<DetectError>,
    },
}

impl DetectError {
    /// True for failures of the detector itself rather than of the input data.
    pub fn is_backend_failure(&self) -> bool {
        match self {
            Self::Launch { .. }
            | Self::RuntimeFailed { .. }
            | Self::Timeout(_)
            | Self::MalformedOutput { .. }
            | Self::ContractViolation { .. } => true,
            Self::Tile { source, .. } => source.is_backend_failure(),
            _ => false,
        }
    }
}

/// What a backend is asked to look at: a whole image, or one tile of it.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub image_id: String,
    pub image_path: Option<PathBuf>,
    pub pixels: Option<Arc<image::DynamicImage>>,
    /// Size of the full image.
    pub size: ImageSize,
    /// When set, only this tile is being detected on.
    pub region: Option<Tile>,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, size: ImageSize) -> Self {
        Self {
            image_id: image_id.into(),
            image_path: None,
            pixels: None,
            size,
            region: None,
        }
    }

    pub fn with_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.image_path = Some(path.into());
        self
    }

    pub fn with_pixels(mut self, pixels: Arc<image::DynamicImage>) -> Self {
        self.pixels = Some(pixels);
        self
    }

    fn for_tile(&self, tile: Tile) -> Self {
        Self {
            region: Some(tile),
            ..self.clone()
        }
    }

    /// Size of the frame being detected on.
    pub fn frame_size(&self) -> ImageSize {
        self.region.map_or(self.size, |t| t.size())
    }

    pub fn load_pixels(&self) -> Result<Arc<image::DynamicImage>, DetectError> {
        if let Some(p) = &self.pixels {
            return Ok(Arc::clone(p));
        }
        let path = self
            .image_path
            .as_ref()
            .ok_or_else(|| DetectError::NoPixels(self.image_id.clone()))?;
        image::open(path)
            .map(Arc::new)
            .map_err(|e| DetectError::Image {
                image_id: self.image_id.clone(),
                reason: e.to_string(),
            })
    }
}

/// A source of detections.
///
/// Implementations return boxes in the pixel frame of `image.frame_size()`
/// and must be deterministic for a fixed configuration.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, image: &ImageRef) -> Result<Vec<PixelBox>, DetectError>;

    /// Whether the backend looks at pixels. Sliced detection decodes the
    /// image once up front for such backends.
    fn needs_pixels(&self) -> bool {
        false
    }
}

/// Reject outputs that break the backend contract.
pub fn check_output(image: &ImageRef, boxes: &[PixelBox]) -> Result<(), DetectError> {
    let frame = image.frame_size();
    for (i, b) in boxes.iter().enumerate() {
        let fail = |reason: String| DetectError::ContractViolation {
            image_id: image.image_id.clone(),
            reason: format!("box {i}: {reason}"),
        };
        b.validate().map_err(|e| fail(e.to_string()))?;
        if !b.is_within(frame) {
            return Err(fail(format!(
                "[{:.3}, {:.3}] x [{:.3}, {:.3}] leaves the {frame} frame",
                b.x_min(),
                b.x_max(),
                b.y_min(),
                b.y_max()
            )));
        }
    }
    Ok(())
}

/// Run a backend and validate what it returns.
pub fn detect_checked(
    backend: &dyn DetectorBackend,
    image: &ImageRef,
) -> Result<Vec<PixelBox>, DetectError> {
    let boxes = backend.detect(image)?;
    check_output(image, &boxes)?;
    Ok(boxes)
}

/// Stored detections (or labels, as perfect detections) for `image_id`, in
/// pixel coordinates and file order.
pub fn detect_replay(image_id: &str, store: &DatasetIndex) -> Result<Vec<PixelBox>, DetectError> {
    let entry = store
        .get(image_id)
        .ok_or_else(|| DetectError::UnknownImage(image_id.to_string()))?;
    let size = entry
        .image_size
        .ok_or_else(|| DetectError::MissingSize(image_id.to_string()))?;
    Ok(entry
        .read_labels(RangeMode::Strict)?
        .iter()
        .map(|r| denormalize(r, size))
        .collect())
}

/// Replays stored files. On a tile, the stored full-image boxes are sliced
/// to that tile with `min_visibility`.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    pub store: DatasetIndex,
    pub min_visibility: f64,
}

impl ReplayBackend {
    pub fn new(store: DatasetIndex) -> Self {
        Self {
            store,
            min_visibility: 0.3,
        }
    }
}

impl DetectorBackend for ReplayBackend {
    fn detect(&self, image: &ImageRef) -> Result<Vec<PixelBox>, DetectError> {
        let boxes = detect_replay(&image.image_id, &self.store)?;
        Ok(match &image.region {
            Some(tile) => slice_boxes(&boxes, tile, self.min_visibility),
            None => boxes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticNoiseConfig {
    /// Fraction of ground-truth boxes dropped.
    pub fn_rate: f64,
    /// False boxes added per ground-truth box.
    pub fp_rate: f64,
    /// Maximum center shift in pixels.
    pub center_jitter: f64,
    /// Maximum relative size change.
    pub size_jitter: f64,
    pub seed: u64,
}

impl SyntheticNoiseConfig {
    pub fn identity(seed: u64) -> Self {
        Self {
            fn_rate: 0.0,
            fp_rate: 0.0,
            center_jitter: 0.0,
            size_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.fn_rate) {
            return Err(format!("fn_rate {} outside [0, 1]", self.fn_rate));
        }
        for (name, v) in [
            ("fp_rate", self.fp_rate),
            ("center_jitter", self.center_jitter),
            ("size_jitter", self.size_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

const FALSE_POSITIVE_ATTEMPTS: usize = 64;

/// Corrupt ground truth into a deterministic fake detector output.
///
/// Drops exactly `round(fn_rate * N)` boxes, jitters the survivors, then
/// appends `round(fp_rate * N)` false boxes placed uniformly in the image with
/// sizes resampled from the ground truth. False boxes are placed away from
/// every ground-truth box when a free spot is found within a bounded number
/// of attempts, so that they stay false at any IoU threshold.
///
/// Survivors keep their input order and get confidences from `[0.5, 1.0]`;
/// false boxes follow with confidences from `[0.3, 0.9]`.
pub fn detect_synthetic(
    gt: &[PixelBox],
    size: ImageSize,
    cfg: &SyntheticNoiseConfig,
) -> Vec<PixelBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = gt.len();
    let n_drop = ((cfg.fn_rate * n as f64).round() as usize).min(n);
    let n_false = (cfg.fp_rate * n as f64).round() as usize;
    let mut dropped = vec![false; n];
    for i in sample(&mut rng, n, n_drop).into_iter() {
        dropped[i] = true;
    }
    let (width, height) = (f64::from(size.width), f64::from(size.height));
    let fit = |cx: f64, cy: f64, w: f64, h: f64| -> (f64, f64, f64, f64) {
        let w = w.min(width);
        let h = h.min(height);
        (
            cx.clamp(w / 2.0, width - w / 2.0),
            cy.clamp(h / 2.0, height - h / 2.0),
            w,
            h,
        )
    };

    let mut out = Vec::with_capacity(n - n_drop + n_false);
    for (b, _) in gt.iter().zip(&dropped).filter(|(_, d)| !**d) {
        let (mut cx, mut cy, mut w, mut h) = (b.cx, b.cy, b.w, b.h);
        if cfg.center_jitter > 0.0 {
            cx += rng.gen_range(-cfg.center_jitter..=cfg.center_jitter);
            cy += rng.gen_range(-cfg.center_jitter..=cfg.center_jitter);
        }
        if cfg.size_jitter > 0.0 {
            let s = cfg.size_jitter.min(0.99);
            w *= 1.0 + rng.gen_range(-s..=s);
            h *= 1.0 + rng.gen_range(-s..=s);
        }
        if cfg.center_jitter > 0.0 || cfg.size_jitter > 0.0 {
            (cx, cy, w, h) = fit(cx, cy, w, h);
        }
        let confidence = rng.gen_range(0.5..=1.0);
        out.push(PixelBox {
            cx,
            cy,
            w,
            h,
            confidence,
            ..*b
        });
    }

    for _ in 0..n_false {
        let template = &gt[rng.gen_range(0..n)];
        let mut candidate = None;
        for _ in 0..FALSE_POSITIVE_ATTEMPTS {
            let (w, h) = (template.w.min(width), template.h.min(height));
            let cx = w / 2.0 + rng.gen::<f64>() * (width - w);
            let cy = h / 2.0 + rng.gen::<f64>() * (height - h);
            let b = PixelBox {
                cx,
                cy,
                w,
                h,
                category_id: template.category_id,
                confidence: 0.0,
            };
            let clear = gt.iter().all(|g| g.intersection_area(&b) <= 0.0);
            candidate = Some(b);
            if clear {
                break;
            }
        }
        let mut b = candidate.expect("at least one attempt");
        b.confidence = rng.gen_range(0.3..=0.9);
        out.push(b);
    }
    out
}

/// Synthetic detector over a ground-truth store. Each image (and tile) gets
/// its own seed derived from the configured one.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub ground_truth: DatasetIndex,
    pub config: SyntheticNoiseConfig,
    pub min_visibility: f64,
}

impl SyntheticBackend {
    pub fn new(ground_truth: DatasetIndex, config: SyntheticNoiseConfig) -> Self {
        Self {
            ground_truth,
            config,
            min_visibility: 0.3,
        }
    }

    fn seed_for(&self, image: &ImageRef) -> u64 {
        // FNV-1a so the derived seed is stable across builds and platforms.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&self.config.seed.to_le_bytes());
        eat(image.image_id.as_bytes());
        if let Some(t) = &image.region {
            eat(&t.row.to_le_bytes());
            eat(&t.col.to_le_bytes());
        }
        h
    }
}

impl DetectorBackend for SyntheticBackend {
    fn detect(&self, image: &ImageRef) -> Result<Vec<PixelBox>, DetectError> {
        let gt = detect_replay(&image.image_id, &self.ground_truth)?;
        let gt = match &image.region {
            Some(tile) => slice_boxes(&gt, tile, self.min_visibility),
            None => gt,
        };
        let cfg = SyntheticNoiseConfig {
            seed: self.seed_for(image),
            ..self.config
        };
        Ok(detect_synthetic(&gt, image.frame_size(), &cfg))
    }
}

/// Bounded concurrency for external runtime calls.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Runs an external model command per image:
/// `<command> [args...] --input <image_path> --output <detections_path>`.
///
/// The command must write the detection text format and exit 0. Calls are
/// serialized unless `workers > 1`.
#[derive(Debug)]
pub struct ExternalBackend {
    pub command: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
    slots: Slots,
}

impl ExternalBackend {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
            args: Vec::new(),
            timeout: timeout_from_env(),
            slots: Slots::new(1),
        }
    }

    pub fn with_args(mut self, args: Vec<String>) -> Self {
        self.args = args;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.slots = Slots::new(workers);
        self
    }
}

/// Per-call timeout from `ANTCENSUS_EXTERNAL_TIMEOUT_SECS`, default 120 s.
pub fn timeout_from_env() -> Duration {
    let secs = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite() && *v > 0.0)
        .unwrap_or(DEFAULT_TIMEOUT_SECS as f64);
    Duration::from_secs_f64(secs)
}

impl DetectorBackend for ExternalBackend {
    fn detect(&self, image: &ImageRef) -> Result<Vec<PixelBox>, DetectError> {
        detect_external(image, self)
    }

    fn needs_pixels(&self) -> bool {
        true
    }
}

/// Invoke the external runtime on `image` and parse what it wrote.
pub fn detect_external(
    image: &ImageRef,
    adapter: &ExternalBackend,
) -> Result<Vec<PixelBox>, DetectError> {
    let scratch = tempfile::tempdir().map_err(|e| DetectError::Image {
        image_id: image.image_id.clone(),
        reason: format!("scratch directory: {e}"),
    })?;
    let input = match (&image.region, &image.image_path) {
        (None, Some(p)) => p.clone(),
        _ => {
            let pixels = image.load_pixels()?;
            let frame = match &image.region {
                Some(tile) => crop_tile(&pixels, tile),
                None => (*pixels).clone(),
            };
            let p = scratch.path().join("input.png");
            frame.save(&p).map_err(|e| DetectError::Image {
                image_id: image.image_id.clone(),
                reason: e.to_string(),
            })?;
            p
        }
    };
    let output = scratch.path().join("detections.txt");

    let text = {
        let _slot = adapter.slots.acquire();
        run_runtime(image, adapter, &input, &output)?
    };
    let records = parse_label_text(&text, RangeMode::Strict).map_err(|source| {
        DetectError::MalformedOutput {
            image_id: image.image_id.clone(),
            source,
        }
    })?;
    let frame = image.frame_size();
    Ok(records.iter().map(|r| denormalize(r, frame)).collect())
}

fn run_runtime(
    image: &ImageRef,
    adapter: &ExternalBackend,
    input: &Path,
    output: &Path,
) -> Result<String, DetectError> {
    let command = adapter.command.display().to_string();
    let mut child = Command::new(&adapter.command)
        .args(&adapter.args)
        .arg("--input")
        .arg(input)
        .arg("--output")
        .arg(output)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| DetectError::Launch {
            command: command.clone(),
            source,
        })?;
    let mut stderr_pipe = child.stderr.take().expect("stderr is piped");
    let stderr_reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr_pipe.read_to_string(&mut buf);
        buf
    });

    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= adapter.timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(DetectError::Timeout(adapter.timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(source) => return Err(DetectError::Launch { command, source }),
        }
    };
    let stderr = stderr_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(DetectError::RuntimeFailed {
            image_id: image.image_id.clone(),
            status: status.to_string(),
            stderr: stderr.trim().to_string(),
        });
    }
    std::fs::read_to_string(output).map_err(|e| DetectError::MalformedOutput {
        image_id: image.image_id.clone(),
        source: AnnotationError::Io {
            path: output.to_path_buf(),
            source: e,
        },
    })
}

/// Detect tile by tile and merge the results into full-image coordinates.
///
/// Tiles are processed in parallel; the merge step fixes the output order
/// (confidence descending), so the result does not depend on scheduling.
pub fn sliced_detect(
    image: &ImageRef,
    grid: &GridSpec,
    backend: &dyn DetectorBackend,
    merge_iou: f64,
) -> Result<Vec<PixelBox>, DetectError> {
    let plan = grid.plan(image.size)?;
    let mut image = image.clone();
    if backend.needs_pixels() && image.pixels.is_none() && plan.tiles.len() > 1 {
        image.pixels = Some(image.load_pixels()?);
    }
    let per_tile: Vec<Vec<PixelBox>> = plan
        .tiles
        .par_iter()
        .map(|tile| {
            let view = image.for_tile(*tile);
            detect_checked(backend, &view)
                .map(|dets| dets.iter().map(|d| to_global(d, tile)).collect())
                .map_err(|e| DetectError::Tile {
                    image_id: image.image_id.clone(),
                    row: tile.row,
                    col: tile.col,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_, _>>()?;
    let all: Vec<PixelBox> = per_tile.into_iter().flatten().collect();
    Ok(merge(&all, merge_iou))
}

/// 64-bit hash of a detection list for determinism checks within one process.
pub fn fingerprint(boxes: &[PixelBox]) -> u64 {
    let mut h = DefaultHasher::new();
    for b in boxes {
        for v in [b.cx, b.cy, b.w, b.h, b.confidence] {
            v.to_bits().hash(&mut h);
        }
        b.category_id.hash(&mut h);
    }
    h.finish()
}
