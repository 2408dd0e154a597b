//! Activity heatmaps: every detection deposits a radial kernel on a fixed grid.
//!
//! Each box becomes a circle (center, radius) scaled into grid units, and
//! cells near the center receive `exp(-d^2 / (2 r^2))` (standard) or
//! `exp(-d / (2 r^2))` (literal). Contributions add up over detections and
//! images. Only cells where the kernel is at least `truncation_epsilon` are
//! visited.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{box_to_circle, ImageSize, PixelBox, RadiusMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("unknown colormap `{0}` (expected inferno, hot or gray)")]
    UnknownColormap(String),
    #[error("unknown kernel `{0}` (expected standard or literal)")]
    UnknownKernel(String),
    #[error("grid must be at least 1x1")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelVariant {
    /// `exp(-d^2 / (2 r^2))`
    #[default]
    Standard,
    /// `exp(-d / (2 r^2))`
    Literal,
}

impl FromStr for KernelVariant {
    type Err = HeatmapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(HeatmapError::UnknownKernel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMode {
    pub variant: KernelVariant,
    /// Kernel values below this are not accumulated. `0.0` disables truncation.
    pub truncation_epsilon: f64,
    pub radius_mode: RadiusMode,
}

impl Default for KernelMode {
    fn default() -> Self {
        Self {
            variant: KernelVariant::Standard,
            truncation_epsilon: 1e-4,
            radius_mode: RadiusMode::MeanExtent,
        }
    }
}

impl KernelMode {
    pub fn with_variant(mut self, variant: KernelVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Kernel value at distance `d` for radius `r`.
    pub fn value(&self, d: f64, r: f64) -> f64 {
        match self.variant {
            KernelVariant::Standard => (-(d * d) / (2.0 * r * r)).exp(),
            KernelVariant::Literal => (-d / (2.0 * r * r)).exp(),
        }
    }

    /// Distance beyond which the kernel drops below the truncation epsilon.
    pub fn support_radius(&self, r: f64) -> f64 {
        if self.truncation_epsilon <= 0.0 {
            return f64::INFINITY;
        }
        let log_inv = (1.0 / self.truncation_epsilon).ln();
        match self.variant {
            KernelVariant::Standard => r * (2.0 * log_inv).sqrt(),
            KernelVariant::Literal => 2.0 * r * r * log_inv,
        }
    }
}

/// Euclidean distance between two grid points.
pub fn distance(p: (f64, f64), center: (f64, f64)) -> f64 {
    (p.0 - center.0).hypot(p.1 - center.1)
}

/// Accumulated intensities, row-major, `height` rows of `width` cells.
/// Cell `(x, y)` sits at grid coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<f64>,
}

impl HeatGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, HeatmapError> {
        if width == 0 || height == 0 {
            return Err(HeatmapError::EmptyGrid);
        }
        Ok(Self {
            width,
            height,
            cells: vec![0.0; width * height],
        })
    }

    /// Square grid, 1000 x 1000 by default elsewhere in the crate.
    pub fn square(side: usize) -> Result<Self, HeatmapError> {
        Self::new(side, side)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.cells[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Add the kernels of `dets`, given in the pixel frame of `image_size`.
    ///
    /// Centers are scaled per axis into grid units; the radius is scaled by
    /// the mean of the two axis factors.
    pub fn accumulate(&mut self, dets: &[PixelBox], image_size: ImageSize, mode: &KernelMode) {
        let sx = self.width as f64 / f64::from(image_size.width);
        let sy = self.height as f64 / f64::from(image_size.height);
        let sr = (sx + sy) / 2.0;
        for det in dets {
            let c = box_to_circle(det, mode.radius_mode);
            self.add_kernel(c.x0 * sx, c.y0 * sy, c.r * sr, mode);
        }
    }

    /// Deposit one kernel centered at `(x0, y0)` with radius `r`, all in grid units.
    pub fn add_kernel(&mut self, x0: f64, y0: f64, r: f64, mode: &KernelMode) {
        if !(r > 0.0 && x0.is_finite() && y0.is_finite()) {
            return;
        }
        let support = mode.support_radius(r);
        let (ys, ye) = match cell_span(y0, support, self.height) {
            Some(s) => s,
            None => return,
        };
        match mode.variant {
            KernelVariant::Standard => self.add_gaussian(x0, y0, r, support, ys, ye),
            KernelVariant::Literal => self.add_literal(x0, y0, r, support, ys, ye, mode),
        }
    }

    /// Standard kernel, factored as `exp(-dx^2/2r^2) * exp(-dy^2/2r^2)`.
    fn add_gaussian(&mut self, x0: f64, y0: f64, r: f64, support: f64, ys: usize, ye: usize) {
        let two_r2 = 2.0 * r * r;
        let Some((xs, xe)) = cell_span(x0, support, self.width) else {
            return;
        };
        let col_factor: Vec<f64> = (xs..=xe)
            .map(|x| {
                let dx = x as f64 - x0;
                (-(dx * dx) / two_r2).exp()
            })
            .collect();
        let support2 = support * support;
        for y in ys..=ye {
            let dy = y as f64 - y0;
            let rest = support2 - dy * dy;
            if rest < 0.0 {
                continue;
            }
            let Some((rxs, rxe)) = cell_span(x0, rest.sqrt(), self.width) else {
                continue;
            };
            let row_factor = (-(dy * dy) / two_r2).exp();
            let row = &mut self.cells[y * self.width..(y + 1) * self.width];
            for x in rxs..=rxe {
                row[x] += row_factor * col_factor[x - xs];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_literal(
        &mut self,
        x0: f64,
        y0: f64,
        r: f64,
        support: f64,
        ys: usize,
        ye: usize,
        mode: &KernelMode,
    ) {
        let support2 = support * support;
        for y in ys..=ye {
            let dy = y as f64 - y0;
            let rest = support2 - dy * dy;
            if rest < 0.0 {
                continue;
            }
            let Some((xs, xe)) = cell_span(x0, rest.sqrt(), self.width) else {
                continue;
            };
            let row = &mut self.cells[y * self.width..(y + 1) * self.width];
            for (x, cell) in row.iter_mut().enumerate().take(xe + 1).skip(xs) {
                let dx = x as f64 - x0;
                *cell += mode.value((dx * dx + dy * dy).sqrt(), r);
            }
        }
    }

    /// Elementwise sum, for combining privately accumulated shards in order.
    pub fn add_grid(&mut self, other: &HeatGrid) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
    }

    /// Raw grid as CSV: one row per line, shortest round-trip decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.cells.len() * 4);
        for row in self.cells.chunks(self.width) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Inclusive cell index range within `radius` of `center`, clipped to `[0, len)`.
fn cell_span(center: f64, radius: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(len as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// Values rescaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Min-max normalization. A constant grid maps to all zeros.
pub fn scale_for_render(grid: &HeatGrid) -> ScaledGrid {
    let (min, max) = grid
        .cells
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let values = if range > 0.0 {
        grid.cells.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; grid.cells.len()]
    };
    ScaledGrid {
        width: grid.width,
        height: grid.height,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Black through purple and orange to pale yellow.
    #[default]
    Inferno,
    /// Black, red, yellow, white.
    Hot,
    Gray,
}

// Inferno sampled at 17 points. The first entry is pinned to pure black and
// the green dip of the fourth is flattened so luminance never decreases.
const INFERNO: [[u8; 3]; 17] = [
    [0, 0, 0],
    [11, 7, 36],
    [33, 12, 74],
    [61, 12, 101],
    [87, 16, 110],
    [113, 25, 110],
    [138, 34, 106],
    [163, 44, 97],
    [188, 55, 84],
    [210, 70, 68],
    [228, 90, 49],
    [241, 115, 29],
    [249, 142, 9],
    [252, 172, 17],
    [249, 203, 53],
    [242, 234, 105],
    [252, 255, 164],
];

const HOT: [[u8; 3]; 4] = [[0, 0, 0], [255, 0, 0], [255, 255, 0], [255, 255, 255]];

const GRAY: [[u8; 3]; 2] = [[0, 0, 0], [255, 255, 255]];

impl FromStr for Colormap {
    type Err = HeatmapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inferno" => Ok(Self::Inferno),
            "hot" => Ok(Self::Hot),
            "gray" | "grey" => Ok(Self::Gray),
            other => Err(HeatmapError::UnknownColormap(other.to_string())),
        }
    }
}

impl Colormap {
    fn stops(&self) -> &'static [[u8; 3]] {
        match self {
            Self::Inferno => &INFERNO,
            Self::Hot => &HOT,
            Self::Gray => &GRAY,
        }
    }

    /// 256-entry lookup table, linearly interpolated between the stops.
    pub fn lut(&self) -> Vec<[u8; 3]> {
        let stops = self.stops();
        let segments = (stops.len() - 1) as f64;
        (0..256)
            .map(|i| {
                let t = i as f64 / 255.0 * segments;
                let k = (t.floor() as usize).min(stops.len() - 2);
                let f = t - k as f64;
                let (a, b) = (stops[k], stops[k + 1]);
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let v = f64::from(a[ch]) + f * (f64::from(b[ch]) - f64::from(a[ch]));
                    c[ch] = v.round() as u8;
                }
                c
            })
            .collect()
    }

    pub fn color(&self, value: f64) -> [u8; 3] {
        self.lut()[lut_index(value)]
    }
}

fn lut_index(value: f64) -> usize {
    let v = if value.is_nan() {
        0.0
    } else {
        value.clamp(0.0, 1.0)
    };
    (v * 255.0).round() as usize
}

/// One pixel per cell.
pub fn render(scaled: &ScaledGrid, colormap: Colormap) -> image::RgbImage {
    let lut = colormap.lut();
    let mut img = image::RgbImage::new(scaled.width as u32, scaled.height as u32);
    for (px, v) in img.pixels_mut().zip(&scaled.values) {
        *px = image::Rgb(lut[lut_index(*v)]);
    }
    img
}

/// Relative luminance (Rec. 709 weights) of an 8-bit color.
pub fn luminance(c: [u8; 3]) -> f64 {
    0.2126 * f64::from(c[0]) + 0.7152 * f64::from(c[1]) + 0.0722 * f64::from(c[2])
}
