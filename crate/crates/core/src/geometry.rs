//! Box arithmetic and coordinate conventions.
//!
//! Origin is the top-left corner, x grows rightward and y downward. Boxes are
//! stored in center format (`cx`, `cy`, `w`, `h`) like YOLO labels; corner form
//! is derived on demand.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("image size must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("box [{x_min}, {x_max}] x [{y_min}, {y_max}] lies outside the {width}x{height} image")]
    OutOfBounds {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        width: u32,
        height: u32,
    },
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    /// Height divided by width.
    pub fn aspect_ratio(&self) -> f64 {
        f64::from(self.height) / f64::from(self.width)
    }
}

impl std::fmt::Display for ImageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Free-function form of [`ImageSize::aspect_ratio`].
pub fn aspect_ratio(size: ImageSize) -> f64 {
    size.aspect_ratio()
}

/// A detection or annotation rectangle in pixel coordinates.
///
/// Ground truth carries confidence 1.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub category_id: u32,
    pub confidence: f64,
}

impl PixelBox {
    /// Ground-truth style box: category 0, confidence 1.0.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::with_confidence(cx, cy, w, h, 1.0)
    }

    pub fn with_confidence(
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        confidence: f64,
    ) -> Result<Self, GeometryError> {
        let b = Self {
            cx,
            cy,
            w,
            h,
            category_id: 0,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    /// Build from corner coordinates.
    pub fn from_corners(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        confidence: f64,
    ) -> Result<Self, GeometryError> {
        Self::with_confidence(
            (x_min + x_max) / 2.0,
            (y_min + y_max) / 2.0,
            x_max - x_min,
            y_max - y_min,
            confidence,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidBox(format!(
                "non-finite center ({}, {})",
                self.cx, self.cy
            )));
        }
        if !(self.w.is_finite() && self.w > 0.0 && self.h.is_finite() && self.h > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "width and height must be positive, got {} x {}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GeometryError::InvalidBox(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Shift the center by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Area of the overlap with `other`, 0 when disjoint.
    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = (self.x_max().min(other.x_max()) - self.x_min().max(other.x_min())).max(0.0);
        let h = (self.y_max().min(other.y_max()) - self.y_min().max(other.y_min())).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        iou(self, other)
    }

    /// True when the corner form lies inside `[0, width] x [0, height]`, allowing
    /// a relative slack of 1e-9 for values that went through normalization.
    pub fn is_within(&self, size: ImageSize) -> bool {
        let slack_x = 1e-9 * f64::from(size.width);
        let slack_y = 1e-9 * f64::from(size.height);
        self.x_min() >= -slack_x
            && self.y_min() >= -slack_y
            && self.x_max() <= f64::from(size.width) + slack_x
            && self.y_max() <= f64::from(size.height) + slack_y
    }
}

/// Intersection over union in corner form; 0 for disjoint boxes.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from the same corners as the intersection, so iou(a, a) == 1.
    let corner_area = |p: &PixelBox| (p.x_max() - p.x_min()) * (p.y_max() - p.y_min());
    let union = corner_area(a) + corner_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A rectangle in normalized `[0, 1]` image coordinates (YOLO convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    pub category_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: Option<f64>,
}

impl NormBox {
    pub fn new(category_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            category_id,
            cx,
            cy,
            w,
            h,
            confidence: None,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    /// Geometry in `[0, 1]` and confidence, when present, in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        let unit = 0.0..=1.0;
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| unit.contains(v))
            && self.confidence.is_none_or(|c| unit.contains(&c))
    }
}

/// How [`normalize`] treats boxes that poke out of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundsMode {
    /// Out-of-bounds boxes are an error.
    #[default]
    Strict,
    /// Boxes are clipped to the image first.
    Clamp,
}

pub fn normalize(
    b: &PixelBox,
    size: ImageSize,
    mode: BoundsMode,
) -> Result<NormBox, GeometryError> {
    let (width, height) = (f64::from(size.width), f64::from(size.height));
    let b = if b.is_within(size) {
        *b
    } else {
        match mode {
            BoundsMode::Strict => {
                return Err(GeometryError::OutOfBounds {
                    x_min: b.x_min(),
                    x_max: b.x_max(),
                    y_min: b.y_min(),
                    y_max: b.y_max(),
                    width: size.width,
                    height: size.height,
                })
            }
            BoundsMode::Clamp => {
                let x0 = b.x_min().clamp(0.0, width);
                let x1 = b.x_max().clamp(0.0, width);
                let y0 = b.y_min().clamp(0.0, height);
                let y1 = b.y_max().clamp(0.0, height);
                if x1 <= x0 || y1 <= y0 {
                    return Err(GeometryError::OutOfBounds {
                        x_min: b.x_min(),
                        x_max: b.x_max(),
                        y_min: b.y_min(),
                        y_max: b.y_max(),
                        width: size.width,
                        height: size.height,
                    });
                }
                PixelBox {
                    cx: (x0 + x1) / 2.0,
                    cy: (y0 + y1) / 2.0,
                    w: x1 - x0,
                    h: y1 - y0,
                    ..*b
                }
            }
        }
    };
    let unit = |v: f64| v.clamp(0.0, 1.0);
    Ok(NormBox {
        category_id: b.category_id,
        cx: unit(b.cx / width),
        cy: unit(b.cy / height),
        w: unit(b.w / width),
        h: unit(b.h / height),
        confidence: Some(b.confidence),
    })
}

/// Scale a normalized box back to pixels. A missing confidence becomes 1.0.
pub fn denormalize(ann: &NormBox, size: ImageSize) -> PixelBox {
    let (width, height) = (f64::from(size.width), f64::from(size.height));
    PixelBox {
        cx: ann.cx * width,
        cy: ann.cy * height,
        w: ann.w * width,
        h: ann.h * height,
        category_id: ann.category_id,
        confidence: ann.confidence.unwrap_or(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub x0: f64,
    pub y0: f64,
    pub r: f64,
}

/// How a box's extent turns into a circle radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RadiusMode {
    /// `r = (w + h) / 2`, the mean of width and height.
    #[default]
    MeanExtent,
    /// `r = (w + h) / 4`, half the mean extent.
    HalfExtent,
}

pub fn box_to_circle(b: &PixelBox, mode: RadiusMode) -> Circle {
    let mean = (b.w + b.h) / 2.0;
    let r = match mode {
        RadiusMode::MeanExtent => mean,
        RadiusMode::HalfExtent => mean / 2.0,
    };
    Circle {
        x0: b.cx,
        y0: b.cy,
        r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(cx: f64, cy: f64, side: f64) -> PixelBox {
        PixelBox::new(cx, cy, side, side).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = sq(5.0, 5.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &sq(100.0, 100.0, 10.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &sq(10.0, 5.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &sq(15.0, 5.0, 10.0)), 0.0);
    }

    #[test]
    fn normalize_reproduces_yolo_example() {
        let size = ImageSize::new(1920, 1080).unwrap();
        let n = normalize(&sq(960.0, 540.0, 100.0), size, BoundsMode::Strict).unwrap();
        let r4 = |v: f64| (v * 1e4).round() / 1e4;
        assert_eq!(
            (r4(n.cx), r4(n.cy), r4(n.w), r4(n.h)),
            (0.5, 0.5, 0.0521, 0.0926)
        );

        let full = PixelBox::new(960.0, 540.0, 1920.0, 1080.0).unwrap();
        let n = normalize(&full, size, BoundsMode::Strict).unwrap();
        assert_eq!((n.cx, n.cy, n.w, n.h), (0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn normalize_strict_rejects_and_clamp_clips() {
        let size = ImageSize::new(100, 100).unwrap();
        let b = sq(0.0, 50.0, 10.0);
        assert!(matches!(
            normalize(&b, size, BoundsMode::Strict),
            Err(GeometryError::OutOfBounds { .. })
        ));
        let n = normalize(&b, size, BoundsMode::Clamp).unwrap();
        assert!((n.cx - 0.025).abs() < 1e-12);
        assert!((n.w - 0.05).abs() < 1e-12);
        // entirely outside cannot be clamped into a positive-area box
        assert!(normalize(&sq(-50.0, 50.0, 10.0), size, BoundsMode::Clamp).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let size = ImageSize::new(1920, 1080).unwrap();
        let p = denormalize(&NormBox::new(0, 0.5, 0.5, 0.0521, 0.0926), size);
        assert_eq!((p.cx, p.cy), (960.0, 540.0));
        assert!((p.w - 100.032).abs() < 1e-9);
        assert!((p.h - 100.008).abs() < 1e-9);
        assert_eq!(p.confidence, 1.0);
        let z = denormalize(&NormBox::new(0, 0.0, 0.0, 0.0, 0.0), size);
        assert_eq!((z.cx, z.cy), (0.0, 0.0));
    }

    #[test]
    fn circle_modes() {
        let b = sq(10.0, 10.0, 4.0);
        assert_eq!(
            box_to_circle(&b, RadiusMode::MeanExtent),
            Circle {
                x0: 10.0,
                y0: 10.0,
                r: 4.0
            }
        );
        assert_eq!(box_to_circle(&b, RadiusMode::HalfExtent).r, 2.0);
        let b = PixelBox::new(10.0, 10.0, 6.0, 2.0).unwrap();
        assert_eq!(box_to_circle(&b, RadiusMode::MeanExtent).r, 4.0);
    }

    #[test]
    fn aspect_ratios() {
        let r = aspect_ratio(ImageSize::new(1636, 2180).unwrap());
        assert!((r - 1.3325).abs() < 1e-3);
        let r = aspect_ratio(ImageSize::new(409, 218).unwrap());
        assert!((r - 0.53).abs() < 5e-3);
        assert_eq!(aspect_ratio(ImageSize::new(640, 640).unwrap()), 1.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(ImageSize::new(0, 5).is_err());
        assert!(PixelBox::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(PixelBox::with_confidence(1.0, 1.0, 1.0, 1.0, 1.5).is_err());
        assert!(PixelBox::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = PixelBox> {
        (
            -500.0..500.0f64,
            -500.0..500.0f64,
            0.5..200.0f64,
            0.5..200.0f64,
        )
            .prop_map(|(cx, cy, w, h)| PixelBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(),
                                     dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            let moved = iou(&a.translated(dx, dy), &b.translated(dx, dy));
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn normalize_round_trip(w in 1u32..5000, h in 1u32..5000,
                                fx in 0.0..1.0f64, fy in 0.0..1.0f64,
                                fw in 0.001..1.0f64, fh in 0.001..1.0f64) {
            let size = ImageSize::new(w, h).unwrap();
            let (wf, hf) = (f64::from(w), f64::from(h));
            let bw = fw * wf;
            let bh = fh * hf;
            let cx = bw / 2.0 + fx * (wf - bw);
            let cy = bh / 2.0 + fy * (hf - bh);
            let b = PixelBox::new(cx, cy, bw, bh).unwrap();
            let back = denormalize(&normalize(&b, size, BoundsMode::Strict).unwrap(), size);
            for (x, y) in [(b.cx, back.cx), (b.cy, back.cy), (b.w, back.w), (b.h, back.h)] {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
