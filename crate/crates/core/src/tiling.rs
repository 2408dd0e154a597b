//! Patch grids for sliced detection.
//!
//! A grid splits an image into `cols x rows` tiles in row-major order. The base
//! tile is `floor(W / cols) x floor(H / rows)`; the last column and row absorb
//! the remainder so the tiles cover the image exactly.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{ImageSize, PixelBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("grid needs at least one column and one row, got {cols}x{rows}")]
    EmptyGrid { cols: u32, rows: u32 },
    #[error("{cols} columns x {rows} rows do not fit a {size} image")]
    TooFine {
        cols: u32,
        rows: u32,
        size: ImageSize,
    },
    #[error("overlap fraction {0} outside [0, 0.5)")]
    Overlap(f64),
    #[error("tile manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tile {
    pub col: u32,
    pub row: u32,
    pub x_offset: u32,
    pub y_offset: u32,
    pub width: u32,
    pub height: u32,
}

impl Tile {
    pub fn size(&self) -> ImageSize {
        ImageSize {
            width: self.width,
            height: self.height,
        }
    }

    pub fn x_end(&self) -> u32 {
        self.x_offset + self.width
    }

    pub fn y_end(&self) -> u32 {
        self.y_offset + self.height
    }

    /// File stem for this tile of `image_id`: `<image_id>__r<row>c<col>`.
    pub fn tile_id(&self, image_id: &str) -> String {
        format!("{}__r{}c{}", image_id, self.row, self.col)
    }
}

/// Requested slicing, before it is resolved against an image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub cols: u32,
    pub rows: u32,
    pub overlap_fraction: f64,
}

impl GridSpec {
    pub fn new(cols: u32, rows: u32) -> Self {
        Self {
            cols,
            rows,
            overlap_fraction: 0.0,
        }
    }

    pub fn with_overlap(mut self, overlap_fraction: f64) -> Self {
        self.overlap_fraction = overlap_fraction;
        self
    }

    pub fn plan(&self, size: ImageSize) -> Result<TileGrid, TilingError> {
        plan_grid(size, self.cols, self.rows, self.overlap_fraction)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(1, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub image_size: ImageSize,
    pub cols: u32,
    pub rows: u32,
    pub overlap_fraction: f64,
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    /// Tile size before remainder absorption and overlap.
    pub fn base_tile_size(&self) -> ImageSize {
        ImageSize {
            width: self.image_size.width / self.cols,
            height: self.image_size.height / self.rows,
        }
    }

    pub fn tile(&self, col: u32, row: u32) -> Option<&Tile> {
        if col >= self.cols || row >= self.rows {
            return None;
        }
        self.tiles.get((row * self.cols + col) as usize)
    }
}

/// Start and end of segment `k` of `n` over `len` pixels, expanded on interior
/// edges by `pad` and clamped to `[0, len]`.
fn segment(len: u32, n: u32, k: u32, pad: u32) -> (u32, u32) {
    let base = len / n;
    let start = k * base;
    let end = if k + 1 == n { len } else { start + base };
    let start = if k > 0 {
        start.saturating_sub(pad)
    } else {
        start
    };
    let end = if k + 1 < n { (end + pad).min(len) } else { end };
    (start, end)
}

pub fn plan_grid(
    size: ImageSize,
    cols: u32,
    rows: u32,
    overlap_fraction: f64,
) -> Result<TileGrid, TilingError> {
    if cols == 0 || rows == 0 {
        return Err(TilingError::EmptyGrid { cols, rows });
    }
    if cols > size.width || rows > size.height {
        return Err(TilingError::TooFine { cols, rows, size });
    }
    if !(0.0..0.5).contains(&overlap_fraction) {
        return Err(TilingError::Overlap(overlap_fraction));
    }
    let pad_x = (overlap_fraction * f64::from(size.width / cols)).round() as u32;
    let pad_y = (overlap_fraction * f64::from(size.height / rows)).round() as u32;
    let mut tiles = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        let (y0, y1) = segment(size.height, rows, row, pad_y);
        for col in 0..cols {
            let (x0, x1) = segment(size.width, cols, col, pad_x);
            tiles.push(Tile {
                col,
                row,
                x_offset: x0,
                y_offset: y0,
                width: x1 - x0,
                height: y1 - y0,
            });
        }
    }
    Ok(TileGrid {
        image_size: size,
        cols,
        rows,
        overlap_fraction,
        tiles,
    })
}

/// Ground truth for one tile, in tile-local coordinates.
///
/// A box is kept when at least `min_visibility` of its area falls inside the
/// tile; kept boxes are clipped to the tile. Boxes entirely inside the tile
/// are only translated.
pub fn slice_boxes(boxes: &[PixelBox], tile: &Tile, min_visibility: f64) -> Vec<PixelBox> {
    let (tx0, ty0) = (f64::from(tile.x_offset), f64::from(tile.y_offset));
    let (tx1, ty1) = (f64::from(tile.x_end()), f64::from(tile.y_end()));
    boxes
        .iter()
        .filter_map(|b| {
            if b.x_min() >= tx0 && b.x_max() <= tx1 && b.y_min() >= ty0 && b.y_max() <= ty1 {
                return Some(b.translated(-tx0, -ty0));
            }
            let x0 = b.x_min().max(tx0);
            let x1 = b.x_max().min(tx1);
            let y0 = b.y_min().max(ty0);
            let y1 = b.y_max().min(ty1);
            if x1 <= x0 || y1 <= y0 {
                return None;
            }
            let visible = (x1 - x0) * (y1 - y0);
            if visible < min_visibility * b.area() {
                return None;
            }
            Some(PixelBox {
                cx: (x0 + x1) / 2.0 - tx0,
                cy: (y0 + y1) / 2.0 - ty0,
                w: x1 - x0,
                h: y1 - y0,
                ..*b
            })
        })
        .collect()
}

/// Move a tile-local detection into full-image coordinates.
pub fn to_global(det: &PixelBox, tile: &Tile) -> PixelBox {
    det.translated(f64::from(tile.x_offset), f64::from(tile.y_offset))
}

/// Ordering used wherever detections are ranked: confidence descending, then
/// center x, center y, width and height ascending.
pub fn rank_order(a: &PixelBox, b: &PixelBox) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
        .then(a.category_id.cmp(&b.category_id))
}

/// Greedy non-maximum suppression across tiles.
///
/// A detection survives iff its IoU with every already-accepted detection is
/// below `merge_iou`. Output is in rank order and does not depend on the
/// order of `dets`.
pub fn merge(dets: &[PixelBox], merge_iou: f64) -> Vec<PixelBox> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(rank_order);
    let mut kept: Vec<PixelBox> = Vec::with_capacity(ranked.len());
    for d in ranked {
        if kept.iter().all(|k| k.iou(&d) < merge_iou) {
            kept.push(d);
        }
    }
    kept
}

/// One row of the tile manifest CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub tile_id: String,
    pub image_id: String,
    pub tile: Tile,
}

impl TileRecord {
    pub fn new(image_id: &str, tile: Tile) -> Self {
        Self {
            tile_id: tile.tile_id(image_id),
            image_id: image_id.to_string(),
            tile,
        }
    }
}

pub const TILE_MANIFEST_HEADER: &str = "tile_id,image_id,col,row,x_offset,y_offset,width,height";

pub fn write_tile_manifest(records: &[TileRecord]) -> String {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    wtr.write_record(TILE_MANIFEST_HEADER.split(',')).unwrap();
    for r in records {
        let t = &r.tile;
        wtr.write_record([
            r.tile_id.clone(),
            r.image_id.clone(),
            t.col.to_string(),
            t.row.to_string(),
            t.x_offset.to_string(),
            t.y_offset.to_string(),
            t.width.to_string(),
            t.height.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}

pub fn parse_tile_manifest(text: &str) -> Result<Vec<TileRecord>, TilingError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 1;
        let row = row.map_err(|e| TilingError::Manifest {
            line,
            reason: e.to_string(),
        })?;
        if idx == 0 {
            if row.iter().collect::<Vec<_>>().join(",") != TILE_MANIFEST_HEADER {
                return Err(TilingError::Manifest {
                    line,
                    reason: format!("expected header `{TILE_MANIFEST_HEADER}`"),
                });
            }
            continue;
        }
        if row.len() != 8 {
            return Err(TilingError::Manifest {
                line,
                reason: format!("expected 8 fields, found {}", row.len()),
            });
        }
        let num = |k: usize| -> Result<u32, TilingError> {
            row[k].trim().parse().map_err(|_| TilingError::Manifest {
                line,
                reason: format!("`{}` is not a non-negative integer", &row[k]),
            })
        };
        let tile = Tile {
            col: num(2)?,
            row: num(3)?,
            x_offset: num(4)?,
            y_offset: num(5)?,
            width: num(6)?,
            height: num(7)?,
        };
        if tile.width == 0 || tile.height == 0 {
            return Err(TilingError::Manifest {
                line,
                reason: "tile has zero area".into(),
            });
        }
        out.push(TileRecord {
            tile_id: row[0].to_string(),
            image_id: row[1].to_string(),
            tile,
        });
    }
    Ok(out)
}

/// Cut one tile out of a decoded image.
pub fn crop_tile(img: &image::DynamicImage, tile: &Tile) -> image::DynamicImage {
    img.crop_imm(tile.x_offset, tile.y_offset, tile.width, tile.height)
}

/// Human-readable summary of a grid, one line per distinct tile size.
pub fn describe_grid(grid: &TileGrid) -> String {
    let mut sizes: Vec<(u32, u32)> = grid.tiles.iter().map(|t| (t.width, t.height)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut out = String::new();
    for (w, h) in sizes {
        let n = grid
            .tiles
            .iter()
            .filter(|t| t.width == w && t.height == h)
            .count();
        writeln!(out, "{n} x {w}x{h}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn size(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    #[test]
    fn table_grids() {
        let s = size(1636, 2180);
        let g = plan_grid(s, 4, 10, 0.0).unwrap();
        assert_eq!(g.tiles.len(), 40);
        assert!(g.tiles.iter().all(|t| t.width == 409 && t.height == 218));

        let g = plan_grid(s, 2, 2, 0.0).unwrap();
        assert!(g.tiles.iter().all(|t| t.width == 818 && t.height == 1090));

        let g = plan_grid(s, 8, 10, 0.0).unwrap();
        let widths: Vec<u32> = g.tiles[..8].iter().map(|t| t.width).collect();
        assert_eq!(widths, [204, 204, 204, 204, 204, 204, 204, 208]);
        assert_eq!(g.base_tile_size(), size(204, 218));
    }

    #[test]
    fn row_major_order() {
        let g = plan_grid(size(100, 60), 3, 2, 0.0).unwrap();
        let order: Vec<(u32, u32)> = g.tiles.iter().map(|t| (t.row, t.col)).collect();
        assert_eq!(order, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!(g.tile(2, 1).unwrap().x_offset, 66);
        assert!(g.tile(3, 0).is_none());
    }

    #[test]
    fn overlap_expands_interior_edges() {
        let g = plan_grid(size(100, 100), 2, 1, 0.2).unwrap();
        // base 50, pad 10
        assert_eq!((g.tiles[0].x_offset, g.tiles[0].width), (0, 60));
        assert_eq!((g.tiles[1].x_offset, g.tiles[1].width), (40, 60));
        assert_eq!(g.tiles[0].height, 100);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            plan_grid(size(10, 10), 0, 1, 0.0),
            Err(TilingError::EmptyGrid { .. })
        ));
        assert!(matches!(
            plan_grid(size(10, 10), 11, 1, 0.0),
            Err(TilingError::TooFine { .. })
        ));
        assert!(matches!(
            plan_grid(size(10, 10), 1, 1, 0.5),
            Err(TilingError::Overlap(_))
        ));
        assert!(plan_grid(size(10, 10), 1, 1, -0.1).is_err());
    }

    #[test]
    fn slicing_examples() {
        let tile = Tile {
            col: 1,
            row: 1,
            x_offset: 100,
            y_offset: 50,
            width: 100,
            height: 50,
        };
        let inside = PixelBox::new(150.0, 75.0, 10.0, 10.0).unwrap();
        assert_eq!(
            slice_boxes(&[inside], &tile, 0.3),
            vec![inside.translated(-100.0, -50.0)]
        );

        let outside = PixelBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        assert!(slice_boxes(&[outside], &tile, 0.3).is_empty());

        // half of it left of x = 100
        let straddle = PixelBox::new(100.0, 75.0, 10.0, 10.0).unwrap();
        let got = slice_boxes(&[straddle], &tile, 0.3);
        assert_eq!(got.len(), 1);
        assert_eq!(
            (got[0].cx, got[0].cy, got[0].w, got[0].h),
            (2.5, 25.0, 5.0, 10.0)
        );
        assert!(slice_boxes(&[straddle], &tile, 0.6).is_empty());
    }

    #[test]
    fn to_global_translates() {
        let origin = Tile {
            col: 0,
            row: 0,
            x_offset: 0,
            y_offset: 0,
            width: 10,
            height: 10,
        };
        let d = PixelBox::with_confidence(10.0, 10.0, 4.0, 4.0, 0.7).unwrap();
        assert_eq!(to_global(&d, &origin), d);
        let t = Tile {
            col: 1,
            row: 1,
            x_offset: 409,
            y_offset: 218,
            width: 409,
            height: 218,
        };
        let g = to_global(&d, &t);
        assert_eq!(
            (g.cx, g.cy, g.w, g.h, g.confidence),
            (419.0, 228.0, 4.0, 4.0, 0.7)
        );
    }

    fn boxc(cx: f64, cy: f64, w: f64, conf: f64) -> PixelBox {
        PixelBox::with_confidence(cx, cy, w, 10.0, conf).unwrap()
    }

    /// Reference NMS: a set S is the answer iff processing in rank order,
    /// each box is in S exactly when it overlaps no earlier member of S.
    fn nms_oracle(dets: &[PixelBox], thr: f64) -> Vec<PixelBox> {
        let mut ranked = dets.to_vec();
        ranked.sort_by(rank_order);
        let n = ranked.len();
        let mut found = None;
        for mask in 0u32..(1 << n) {
            let ok = (0..n).all(|i| {
                let in_set = mask & (1 << i) != 0;
                let blocked =
                    (0..i).any(|j| mask & (1 << j) != 0 && ranked[i].iou(&ranked[j]) >= thr);
                in_set == !blocked
            });
            if ok {
                assert!(found.is_none(), "greedy NMS answer must be unique");
                found = Some(mask);
            }
        }
        let mask = found.unwrap();
        (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| ranked[i])
            .collect()
    }

    #[test]
    fn merge_examples() {
        let a = boxc(50.0, 50.0, 10.0, 0.9);
        let b = boxc(50.0, 50.0, 10.0, 0.8);
        assert_eq!(merge(&[b, a], 0.5), vec![a]);

        let far = boxc(500.0, 50.0, 10.0, 0.8);
        assert_eq!(merge(&[far, a], 0.01).len(), 2);

        // chain: A-B overlap 0.6, B-C overlap 0.6, A-C only 0.25
        let a = boxc(0.0, 0.0, 40.0, 0.9);
        let b = boxc(10.0, 0.0, 40.0, 0.8);
        let c = boxc(20.0, 0.0, 40.0, 0.7);
        assert!(a.iou(&b) >= 0.5 && b.iou(&c) >= 0.5 && a.iou(&c) < 0.5);
        let got = merge(&[c, b, a], 0.5);
        assert_eq!(got, vec![a, c]);
        assert_eq!(got, nms_oracle(&[a, b, c], 0.5));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let g = plan_grid(size(1636, 2180), 4, 10, 0.0).unwrap();
        let recs: Vec<TileRecord> = g
            .tiles
            .iter()
            .map(|t| TileRecord::new("img,1", *t))
            .collect();
        let text = write_tile_manifest(&recs);
        assert!(text.starts_with(TILE_MANIFEST_HEADER));
        assert_eq!(parse_tile_manifest(&text).unwrap(), recs);
        assert!(parse_tile_manifest("a,b\n").is_err());
        let bad = format!("{TILE_MANIFEST_HEADER}\nt,i,0,0,0,0,x,1\n");
        assert!(matches!(
            parse_tile_manifest(&bad),
            Err(TilingError::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn crop_matches_tile() {
        let mut img = image::RgbImage::new(10, 6);
        img.put_pixel(7, 4, image::Rgb([255, 0, 0]));
        let img = image::DynamicImage::ImageRgb8(img);
        let t = plan_grid(size(10, 6), 2, 2, 0.0).unwrap().tiles[3];
        let c = crop_tile(&img, &t).to_rgb8();
        assert_eq!(c.dimensions(), (5, 3));
        assert_eq!(c.get_pixel(2, 1), &image::Rgb([255, 0, 0]));
    }

    fn arb_dets() -> impl Strategy<Value = Vec<PixelBox>> {
        prop::collection::vec(
            (
                0.0..100.0f64,
                0.0..100.0f64,
                1.0..30.0f64,
                1.0..30.0f64,
                0.0..=1.0f64,
            ),
            0..9,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, c)| PixelBox::with_confidence(x, y, w, h, c).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn partition_without_overlap(w in 1u32..400, h in 1u32..400, cols in 1u32..12, rows in 1u32..12) {
            prop_assume!(cols <= w && rows <= h);
            let g = plan_grid(size(w, h), cols, rows, 0.0).unwrap();
            prop_assert_eq!(g.tiles.len() as u32, cols * rows);
            let total: u64 = g.tiles.iter().map(|t| u64::from(t.width) * u64::from(t.height)).sum();
            prop_assert_eq!(total, size(w, h).area());
            let mut cover = vec![0u8; (w * h) as usize];
            for t in &g.tiles {
                for y in t.y_offset..t.y_end() {
                    for x in t.x_offset..t.x_end() {
                        cover[(y * w + x) as usize] += 1;
                    }
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
            prop_assert_eq!(&g, &plan_grid(size(w, h), cols, rows, 0.0).unwrap());
        }

        #[test]
        fn overlapping_tiles_stay_inside(w in 2u32..400, h in 2u32..400, cols in 1u32..6,
                                         rows in 1u32..6, ov in 0.0..0.49f64) {
            prop_assume!(cols <= w && rows <= h);
            let g = plan_grid(size(w, h), cols, rows, ov).unwrap();
            for t in &g.tiles {
                prop_assert!(t.width > 0 && t.height > 0);
                prop_assert!(t.x_end() <= w && t.y_end() <= h);
            }
        }

        #[test]
        fn merge_idempotent_subset_and_matches_oracle(dets in arb_dets(), thr in 0.05..=1.0f64) {
            let once = merge(&dets, thr);
            prop_assert_eq!(&merge(&once, thr), &once);
            for d in &once {
                prop_assert!(dets.contains(d));
            }
            let mut reversed = dets.clone();
            reversed.reverse();
            prop_assert_eq!(&merge(&reversed, thr), &once);
            prop_assert_eq!(once, nms_oracle(&dets, thr));
        }

        #[test]
        fn aspect_of_divisible_grid(cols in 1u32..10, rows in 1u32..10, tw in 1u32..50, th in 1u32..50) {
            let s = size(cols * tw, rows * th);
            let g = plan_grid(s, cols, rows, 0.0).unwrap();
            let expected = (f64::from(s.height) / f64::from(rows)) / (f64::from(s.width) / f64::from(cols));
            for t in &g.tiles {
                prop_assert!((t.size().aspect_ratio() - expected).abs() < 1e-12);
            }
        }
    }
}
