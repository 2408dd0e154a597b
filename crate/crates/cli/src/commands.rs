use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use antcensus_core::analytics::{
    build_timeseries, export_series_csv, parse_time_manifest, series_svg, LineSeparator,
};
use antcensus_core::annotation::{
    index_dataset, read_label_file, read_sizes_csv, write_label_file, AnnotationError,
    DatasetIndex, RangeMode, SizeManifest,
};
use antcensus_core::detector::{
    detect_checked, sliced_detect, timeout_from_env, DetectError, DetectorBackend, ExternalBackend,
    ImageRef, ReplayBackend, SyntheticBackend, SyntheticNoiseConfig,
};
use antcensus_core::evaluation::{
    aggregate, bootstrap_subsets, count_agreement, match_detections, sample_plan_csv, EvalConfig,
    MatchReport,
};
use antcensus_core::geometry::{denormalize, normalize, BoundsMode, RadiusMode};
use antcensus_core::heatmap::{
    render, scale_for_render, Colormap, HeatGrid, KernelMode, KernelVariant,
};
use antcensus_core::tiling::{
    crop_tile, describe_grid, merge, parse_tile_manifest, slice_boxes, to_global,
    write_tile_manifest, GridSpec, TileRecord, TilingError,
};
use antcensus_core::{ImageSize, NormBox, PixelBox};
use rayon::prelude::*;

use crate::{
    AgreeArgs, BackendKind, CliError, ColormapArg, Command, DetectArgs, EvalArgs, GridArgs,
    HeatmapArgs, KernelArg, MergeArgs, RadiusArg, SamplePlanArgs, SliceArgs, SliceLabelsArgs,
    TimeseriesArgs,
};

type Result<T> = std::result::Result<T, CliError>;

const MANIFEST_NAME: &str = "tiles.csv";

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        if e.is_backend_failure() {
            Self::Backend(e.to_string())
        } else {
            Self::Data(e.to_string())
        }
    }
}

impl From<TilingError> for CliError {
    fn from(e: TilingError) -> Self {
        match e {
            TilingError::Manifest { .. } => Self::Data(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Slice(a) => slice(a),
        Command::SliceLabels(a) => slice_labels(a),
        Command::Detect(a) => detect(a),
        Command::Merge(a) => merge_tiles(a),
        Command::Eval(a) => eval(a),
        Command::Agree(a) => agree(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Timeseries(a) => timeseries(a),
        Command::SamplePlan(a) => sample_plan(a),
    }
}

fn is_stdout(path: &Path) -> bool {
    path.as_os_str() == "-"
}

/// Write text to a file, or to standard output for `-`.
fn emit(path: &Path, text: &str) -> Result<()> {
    if is_stdout(path) {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Data(format!("standard output: {e}")))
    } else {
        std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_dir(dir: &Path, flag: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{flag} {}: not a directory",
            dir.display()
        )))
    }
}

/// Label or detection records keyed by image id, for every `.txt` in `dir`.
fn read_label_dir(dir: &Path, flag: &str) -> Result<BTreeMap<String, Vec<NormBox>>> {
    require_dir(dir, flag)?;
    let index = index_dataset(None, Some(dir))?;
    index
        .iter()
        .map(|e| Ok((e.image_id.clone(), e.read_labels(RangeMode::Strict)?)))
        .collect()
}

fn size_of(sizes: &SizeManifest, id: &str, source: &Path) -> Result<ImageSize> {
    sizes
        .get(id)
        .copied()
        .ok_or_else(|| CliError::Data(format!("{}: no size for image `{id}`", source.display())))
}

fn grid_spec(g: &GridArgs) -> GridSpec {
    GridSpec::new(g.cols, g.rows).with_overlap(g.overlap)
}

fn has_confidence(recs: &[NormBox]) -> bool {
    recs.iter().any(|r| r.confidence.is_some())
}

/// Normalized records for writing; boxes are already inside `size` up to
/// rounding, which clamping absorbs.
fn to_records(boxes: &[PixelBox], size: ImageSize) -> Result<Vec<NormBox>> {
    boxes
        .iter()
        .map(|b| normalize(b, size, BoundsMode::Clamp).map_err(|e| CliError::Data(e.to_string())))
        .collect()
}

fn slice(a: SliceArgs) -> Result<()> {
    let images: Vec<(String, PathBuf)> = if a.images.is_file() {
        let id = a
            .images
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| {
                CliError::Usage(format!("--images {}: no file name", a.images.display()))
            })?;
        vec![(id, a.images.clone())]
    } else {
        require_dir(&a.images, "--images")?;
        index_dataset(Some(&a.images), None)?
            .iter()
            .filter_map(|e| e.image_path.clone().map(|p| (e.image_id.clone(), p)))
            .collect()
    };
    ensure_dir(&a.out)?;
    let spec = grid_spec(&a.grid);
    let per_image: Vec<Vec<TileRecord>> = images
        .par_iter()
        .map(|(id, path)| {
            let img = image::open(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let size = ImageSize::new(img.width(), img.height())
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let grid = spec.plan(size)?;
            let mut records = Vec::with_capacity(grid.tiles.len());
            for tile in &grid.tiles {
                let rec = TileRecord::new(id, *tile);
                let dest = a.out.join(format!("{}.png", rec.tile_id));
                crop_tile(&img, tile)
                    .save(&dest)
                    .map_err(|e| CliError::Data(format!("{}: {e}", dest.display())))?;
                records.push(rec);
            }
            eprintln!("{id}: {}", describe_grid(&grid));
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let records: Vec<TileRecord> = per_image.into_iter().flatten().collect();
    emit(&a.out.join(MANIFEST_NAME), &write_tile_manifest(&records))?;
    eprintln!("wrote {} tiles from {} images", records.len(), images.len());
    Ok(())
}

fn slice_labels(a: SliceLabelsArgs) -> Result<()> {
    let labels = read_label_dir(&a.labels, "--labels")?;
    let sizes = read_sizes_csv(&a.sizes)?;
    ensure_dir(&a.out)?;
    let spec = grid_spec(&a.grid);
    let mut records = Vec::new();
    let mut kept = 0usize;
    for (id, recs) in &labels {
        let size = size_of(&sizes, id, &a.sizes)?;
        let boxes: Vec<PixelBox> = recs.iter().map(|r| denormalize(r, size)).collect();
        let with_conf = has_confidence(recs);
        for tile in &spec.plan(size)?.tiles {
            let rec = TileRecord::new(id, *tile);
            let local = slice_boxes(&boxes, tile, a.min_visibility);
            kept += local.len();
            let out = to_records(&local, tile.size())?;
            write_label_file(&a.out.join(format!("{}.txt", rec.tile_id)), &out, with_conf)?;
            records.push(rec);
        }
    }
    emit(&a.out.join(MANIFEST_NAME), &write_tile_manifest(&records))?;
    eprintln!(
        "wrote {} tile label files ({kept} boxes) from {} images",
        records.len(),
        labels.len()
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    require_dir(&a.images, "--images")?;
    let paired = match a.backend {
        BackendKind::Replay => a.source.as_deref(),
        BackendKind::Synthetic => a.gt.as_deref(),
        BackendKind::External => None,
    };
    if let Some(dir) = paired {
        require_dir(
            dir,
            if a.backend == BackendKind::Replay {
                "--source"
            } else {
                "--gt"
            },
        )?;
    }
    // Every image gets an entry; a missing stored file means no boxes.
    let mut index: DatasetIndex = index_dataset(Some(&a.images), paired)?;
    index.entries.retain(|e| e.image_path.is_some());
    if let Some(path) = &a.sizes {
        index.apply_sizes(&read_sizes_csv(path)?);
    }
    index.probe_image_sizes()?;

    let backend: Box<dyn DetectorBackend> = match a.backend {
        BackendKind::Replay => {
            let mut b = ReplayBackend::new(index.clone());
            b.min_visibility = a.min_visibility;
            Box::new(b)
        }
        BackendKind::Synthetic => {
            let config = SyntheticNoiseConfig {
                fn_rate: a.fn_rate,
                fp_rate: a.fp_rate,
                center_jitter: a.center_jitter,
                size_jitter: a.size_jitter,
                seed: a.seed.expect("clap requires --seed for synthetic"),
            };
            config.validate().map_err(CliError::Usage)?;
            let mut b = SyntheticBackend::new(index.clone(), config);
            b.min_visibility = a.min_visibility;
            Box::new(b)
        }
        BackendKind::External => {
            let timeout = a.timeout.map_or_else(timeout_from_env, Duration::from_secs);
            Box::new(
                ExternalBackend::new(a.command.clone().expect("clap requires --command"))
                    .with_args(a.command_args.clone())
                    .with_timeout(timeout)
                    .with_workers(a.workers as usize),
            )
        }
    };
    let grid = a
        .cols
        .zip(a.rows)
        .map(|(c, r)| GridSpec::new(c, r).with_overlap(a.overlap));

    ensure_dir(&a.out)?;
    let counts: Vec<usize> = index
        .entries
        .par_iter()
        .map(|e| {
            let size = e.image_size.expect("sizes probed for every image");
            let mut img = ImageRef::new(e.image_id.clone(), size);
            if let Some(p) = &e.image_path {
                img = img.with_path(p.clone());
            }
            let dets = match &grid {
                Some(g) => sliced_detect(&img, g, backend.as_ref(), a.merge_iou),
                None => detect_checked(backend.as_ref(), &img),
            }
            .map_err(|err| with_image(&e.image_id, err))?;
            let recs = to_records(&dets, size)?;
            write_label_file(&a.out.join(format!("{}.txt", e.image_id)), &recs, true)?;
            Ok(dets.len())
        })
        .collect::<Result<_>>()?;
    eprintln!(
        "{} detections over {} images",
        counts.iter().sum::<usize>(),
        counts.len()
    );
    Ok(())
}

fn with_image(id: &str, err: DetectError) -> CliError {
    match CliError::from(err) {
        CliError::Backend(m) => CliError::Backend(format!("image `{id}`: {m}")),
        CliError::Data(m) => CliError::Data(format!("image `{id}`: {m}")),
        other => other,
    }
}

fn merge_tiles(a: MergeArgs) -> Result<()> {
    require_dir(&a.dets, "--dets")?;
    let manifest = parse_tile_manifest(&read_text(&a.manifest)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.manifest.display())))?;
    let mut by_image: BTreeMap<&str, Vec<&TileRecord>> = BTreeMap::new();
    for rec in &manifest {
        by_image.entry(rec.image_id.as_str()).or_default().push(rec);
    }
    ensure_dir(&a.out)?;
    let mut total = 0;
    for (id, tiles) in &by_image {
        let mut dets = Vec::new();
        for rec in tiles {
            let path = a.dets.join(format!("{}.txt", rec.tile_id));
            if !path.exists() {
                continue;
            }
            let tile = rec.tile;
            let recs = read_label_file(&path, RangeMode::Strict)?;
            dets.extend(
                recs.iter()
                    .map(|r| to_global(&denormalize(r, tile.size()), &tile)),
            );
        }
        // Tiles cover the image, so the furthest tile edge is the image size.
        let w = tiles.iter().map(|r| r.tile.x_end()).max().unwrap_or(0);
        let h = tiles.iter().map(|r| r.tile.y_end()).max().unwrap_or(0);
        let size = ImageSize::new(w, h)
            .map_err(|e| CliError::Data(format!("{}: image `{id}`: {e}", a.manifest.display())))?;
        let merged = merge(&dets, a.merge_iou);
        total += merged.len();
        write_label_file(
            &a.out.join(format!("{id}.txt")),
            &to_records(&merged, size)?,
            true,
        )?;
    }
    eprintln!("{total} detections over {} images", by_image.len());
    Ok(())
}

fn fmt_rate(v: f64) -> String {
    format!("{v:.6}")
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = EvalConfig::new(a.iou, a.conf).map_err(|e| CliError::Usage(e.to_string()))?;
    let preds = read_label_dir(&a.pred, "--pred")?;
    let gts = read_label_dir(&a.gt, "--gt")?;
    let sizes = read_sizes_csv(&a.sizes)?;
    let ids: BTreeSet<&String> = preds.keys().chain(gts.keys()).collect();
    let empty = Vec::new();
    let mut reports: Vec<(&String, MatchReport)> = Vec::with_capacity(ids.len());
    for id in ids {
        let size = size_of(&sizes, id, &a.sizes)?;
        let px = |recs: &Vec<NormBox>| -> Vec<PixelBox> {
            recs.iter().map(|r| denormalize(r, size)).collect()
        };
        let p = px(preds.get(id).unwrap_or(&empty));
        let g = px(gts.get(id).unwrap_or(&empty));
        reports.push((id, match_detections(&p, &g, &cfg)));
    }
    let agg = aggregate(reports.iter().map(|(_, r)| r));

    let mut csv = String::from("image_id,tp,fp,fn,precision,recall\n");
    for (id, r) in &reports {
        writeln!(
            csv,
            "{id},{},{},{},{},{}",
            r.tp(),
            r.fp(),
            r.fn_(),
            fmt_rate(r.precision.value),
            fmt_rate(r.recall.value)
        )
        .unwrap();
    }
    let t = agg.total;
    writeln!(
        csv,
        "TOTAL,{},{},{},{},{}",
        t.tp,
        t.fp,
        t.fn_,
        fmt_rate(agg.micro_precision.value),
        fmt_rate(agg.micro_recall.value)
    )
    .unwrap();
    writeln!(
        csv,
        "MACRO,,,,{},{}",
        fmt_rate(agg.macro_precision.value),
        fmt_rate(agg.macro_recall.value)
    )
    .unwrap();
    emit(&a.out, &csv)?;

    eprintln!(
        "{:<8} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "", "tp", "fp", "fn", "precision", "recall"
    );
    eprintln!(
        "{:<8} {:>8} {:>8} {:>8} {:>10.4} {:>10.4}",
        "total", t.tp, t.fp, t.fn_, agg.micro_precision.value, agg.micro_recall.value
    );
    eprintln!(
        "{:<8} {:>8} {:>8} {:>8} {:>10.4} {:>10.4}",
        "macro", "", "", "", agg.macro_precision.value, agg.macro_recall.value
    );
    eprintln!(
        "{} images, IoU >= {}, confidence >= {}",
        reports.len(),
        cfg.iou_threshold,
        cfg.confidence_threshold
    );
    Ok(())
}

/// Counts per image from an `image_id,count` CSV or a label directory.
fn read_counts(path: &Path, flag: &str, conf: f64) -> Result<BTreeMap<String, f64>> {
    if path.is_dir() {
        return Ok(read_label_dir(path, flag)?
            .into_iter()
            .map(|(id, recs)| {
                let n = recs
                    .iter()
                    .filter(|r| r.confidence.unwrap_or(1.0) >= conf)
                    .count();
                (id, n as f64)
            })
            .collect());
    }
    let text = read_text(path)?;
    let bad = |line: usize, reason: String| {
        CliError::Data(format!("{}: line {line}: {reason}", path.display()))
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "count"] {
        return Err(bad(1, "expected header `image_id,count`".into()));
    }
    let mut counts = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        if rec.len() != 2 {
            return Err(bad(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let n: f64 = rec[1]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| bad(line, format!("`{}` is not a count", &rec[1])))?;
        if counts.insert(rec[0].to_string(), n).is_some() {
            return Err(bad(line, format!("image `{}` listed twice", &rec[0])));
        }
    }
    Ok(counts)
}

fn agree(a: AgreeArgs) -> Result<()> {
    let manual = read_counts(&a.manual, "--manual", a.conf)?;
    let auto = read_counts(&a.auto, "--auto", a.conf)?;
    if let Some(id) = manual.keys().find(|k| !auto.contains_key(*k)) {
        return Err(CliError::Data(format!(
            "{}: no count for image `{id}`",
            a.auto.display()
        )));
    }
    if let Some(id) = auto.keys().find(|k| !manual.contains_key(*k)) {
        return Err(CliError::Data(format!(
            "{}: no count for image `{id}`",
            a.manual.display()
        )));
    }
    let m: Vec<f64> = manual.values().copied().collect();
    let x: Vec<f64> = auto.values().copied().collect();
    let r = count_agreement(&m, &x).map_err(|e| CliError::Data(e.to_string()))?;
    let r2 = r.r_squared.map(|v| v.to_string()).unwrap_or_default();
    emit(
        &a.out,
        &format!("n,r_squared,rmse\n{},{r2},{}\n", r.n, r.rmse),
    )?;
    match r.r_squared {
        Some(v) => eprintln!("n = {}, r² = {v:.4}, RMSE = {:.4}", r.n, r.rmse),
        None => eprintln!(
            "n = {}, r² undefined (constant counts), RMSE = {:.4}",
            r.n, r.rmse
        ),
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let dets = read_label_dir(&a.dets, "--dets")?;
    let sizes = read_sizes_csv(&a.sizes)?;
    let mode = KernelMode {
        variant: match a.kernel {
            KernelArg::Standard => KernelVariant::Standard,
            KernelArg::Literal => KernelVariant::Literal,
        },
        radius_mode: match a.radius {
            RadiusArg::MeanExtent => RadiusMode::MeanExtent,
            RadiusArg::HalfExtent => RadiusMode::HalfExtent,
        },
        ..KernelMode::default()
    };
    let colormap = match a.colormap {
        ColormapArg::Inferno => Colormap::Inferno,
        ColormapArg::Hot => Colormap::Hot,
        ColormapArg::Gray => Colormap::Gray,
    };
    let mut grid = HeatGrid::square(a.grid as usize).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut used = 0;
    for (id, recs) in &dets {
        let size = size_of(&sizes, id, &a.sizes)?;
        let boxes: Vec<PixelBox> = recs
            .iter()
            .filter(|r| r.confidence.unwrap_or(1.0) >= a.conf)
            .map(|r| denormalize(r, size))
            .collect();
        used += boxes.len();
        grid.accumulate(&boxes, size, &mode);
    }
    let png = render(&scale_for_render(&grid), colormap);
    png.save(&a.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    if let Some(raw) = &a.raw {
        emit(raw, &grid.to_csv())?;
    }
    eprintln!(
        "{used} detections from {} images on a {}x{} grid",
        dets.len(),
        grid.width,
        grid.height
    );
    Ok(())
}

fn parse_line(s: &str) -> Result<LineSeparator> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.parse::<f64>().ok()).collect();
    match nums.as_deref() {
        Some([slope, intercept]) => LineSeparator::sloped(*slope, *intercept)
            .map_err(|e| CliError::Usage(format!("--line {s}: {e}"))),
        _ => Err(CliError::Usage(format!("--line expects `a,b`, got `{s}`"))),
    }
}

fn timeseries(a: TimeseriesArgs) -> Result<()> {
    let line = match (&a.line, a.line_vertical) {
        (Some(s), _) => Some(parse_line(s)?),
        (None, Some(x)) => Some(
            LineSeparator::vertical(x)
                .map_err(|e| CliError::Usage(format!("--line-vertical: {e}")))?,
        ),
        (None, None) => None,
    };
    let sizes = match &a.sizes {
        Some(p) => Some(read_sizes_csv(p)?),
        None if line.is_some() => {
            return Err(CliError::Usage(
                "--sizes is required with --line or --line-vertical".into(),
            ))
        }
        None => None,
    };
    let dets = read_label_dir(&a.dets, "--dets")?;
    let manifest = parse_time_manifest(&read_text(&a.times)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.times.display())))?;

    // Without a line only counts matter, so a unit frame stands in for sizes.
    let unit = ImageSize::new(1, 1).unwrap();
    let mut per_image: HashMap<String, Vec<PixelBox>> = HashMap::new();
    for (id, recs) in &dets {
        let size = match (&sizes, &a.sizes) {
            (Some(s), Some(p)) => size_of(s, id, p)?,
            _ => unit,
        };
        let boxes: Vec<PixelBox> = recs
            .iter()
            .filter(|r| r.confidence.unwrap_or(1.0) >= a.conf)
            .map(|r| denormalize(r, size))
            .collect();
        if !boxes.is_empty() {
            per_image.insert(id.clone(), boxes);
        }
    }
    let rows = build_timeseries(&per_image, &manifest, line.as_ref(), a.bin)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.times.display())))?;
    emit(&a.out, &export_series_csv(&rows))?;
    if let Some(plot) = &a.plot {
        emit(plot, &series_svg(&rows))?;
    }
    eprintln!(
        "{} series rows, {} detections",
        rows.len(),
        rows.iter().map(|r| r.total).sum::<usize>()
    );
    Ok(())
}

fn sample_plan(a: SamplePlanArgs) -> Result<()> {
    let to_usize = |v: u64, flag: &str| {
        usize::try_from(v).map_err(|_| CliError::Usage(format!("{flag} {v} is too large")))
    };
    let pool = to_usize(a.pool, "--pool")?;
    let n = to_usize(a.n, "--n")?;
    let replicates = to_usize(a.replicates, "--replicates")?;
    if n.saturating_mul(replicates) > 50_000_000 {
        return Err(CliError::Usage(format!(
            "{replicates} replicates of {n} draws is too large a plan"
        )));
    }
    let plan = bootstrap_subsets(pool, n, replicates, a.seed);
    emit(&a.out, &sample_plan_csv(&plan))?;
    let how = if n > pool {
        "with replacement"
    } else {
        "without replacement"
    };
    eprintln!("{replicates} replicates of {n} draws from {pool} images, {how}");
    Ok(())
}
