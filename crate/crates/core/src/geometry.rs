//! Axis-aligned boxes, anchor templates, IOU-threshold anchor labelling and
//! box-regression encoding.
//!
//! Boxes are stored as `(left, top, width, height)`, the MOT row layout.
//! Regression works in center form `(cx, cy, w, h)`.

use crate::error::{Error, Result};

/// Anchors with best IOU strictly above this are foreground.
pub const FOREGROUND_IOU: f64 = 0.5;
/// Anchors with best IOU strictly below this are background.
pub const BACKGROUND_IOU: f64 = 0.4;

/// Number of pyramid levels anchors are spread over.
pub const PYRAMID_LEVELS: usize = 3;
/// Templates per pyramid level.
pub const TEMPLATES_PER_LEVEL: usize = 4;
/// Down-sampling stride of each level, finest first.
pub const LEVEL_STRIDES: [u32; PYRAMID_LEVELS] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// `(cx, cy, w, h)`.
    pub fn center_form(&self) -> (f64, f64, f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0, self.w, self.h)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "box must have finite coordinates and positive size, got {self:?}"
            )))
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IOU for boxes already known to be valid.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTemplate {
    pub width: f64,
    pub height: f64,
    /// Pyramid level, 0 is the finest (stride 8).
    pub scale_index: usize,
    pub template_index: usize,
}

impl AnchorTemplate {
    pub fn stride(&self) -> u32 {
        LEVEL_STRIDES[self.scale_index]
    }
}

/// The twelve pedestrian anchor templates.
///
/// Widths are `8 * 2^(k/2)` for `k = 1..=12`, heights are three times the
/// width. The four smallest go to the finest level, the four largest to the
/// coarsest.
pub fn make_anchor_templates() -> Vec<AnchorTemplate> {
    (0..PYRAMID_LEVELS * TEMPLATES_PER_LEVEL)
        .map(|i| {
            let k = (i + 1) as f64;
            let width = 8.0 * 2f64.powf(k / 2.0);
            AnchorTemplate {
                width,
                height: 3.0 * width,
                scale_index: i / TEMPLATES_PER_LEVEL,
                template_index: i,
            }
        })
        .collect()
}

/// Tiles every template of `level` over a `grid_w x grid_h` feature map,
/// centering anchors on cell centers. Row-major over cells, templates
/// innermost.
pub fn tile_level_anchors(templates: &[AnchorTemplate], level: usize, grid_w: usize, grid_h: usize) -> Vec<BBox> {
    let stride = LEVEL_STRIDES[level] as f64;
    let level_templates: Vec<_> = templates.iter().filter(|t| t.scale_index == level).collect();
    let mut out = Vec::with_capacity(grid_w * grid_h * level_templates.len());
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let cx = (gx as f64 + 0.5) * stride;
            let cy = (gy as f64 + 0.5) * stride;
            for t in &level_templates {
                out.push(BBox::from_center(cx, cy, t.width, t.height));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground { gt_index: usize },
    Background,
    Ignore,
}

/// Labels every anchor by its best IOU over all ground truths.
///
/// Threshold-only: a ground truth whose best anchor stays below the
/// foreground threshold gets no anchor.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox]) -> Result<Vec<AnchorLabel>> {
    for b in anchors.iter().chain(gts) {
        b.validate()?;
    }
    Ok(anchors
        .iter()
        .map(|anchor| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou_unchecked(anchor, gt);
                // strict comparison keeps the lowest index on ties
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v > FOREGROUND_IOU => AnchorLabel::Foreground { gt_index: g },
                Some((_, v)) if v >= BACKGROUND_IOU => AnchorLabel::Ignore,
                _ => AnchorLabel::Background,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Encodes `gt` relative to `anchor` as center offsets scaled by the anchor
/// size and log size ratios.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<RegressionTarget> {
    gt.validate()?;
    anchor.validate()?;
    let (cx, cy, w, h) = gt.center_form();
    let (acx, acy, aw, ah) = anchor.center_form();
    Ok(RegressionTarget {
        tx: (cx - acx) / aw,
        ty: (cy - acy) / ah,
        tw: (w / aw).ln(),
        th: (h / ah).ln(),
    })
}

pub fn decode_box(t: &RegressionTarget, anchor: &BBox) -> Result<BBox> {
    anchor.validate()?;
    let (acx, acy, aw, ah) = anchor.center_form();
    let decoded = BBox::from_center(acx + t.tx * aw, acy + t.ty * ah, aw * t.tw.exp(), ah * t.th.exp());
    decoded.validate()?;
    Ok(decoded)
}
