//! Set-of-Mark tagging: draw numeric tags over detected elements and keep
//! the tag -> element map used to ground model output back to coordinates.
//!
//! Tag ids run `1..=N` in element-list order. Rendering is a pure function
//! of `(image bytes, elements, style)`; the output is always lossless PNG.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::str::FromStr;

use image::{ImageFormat, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BBox, ImageData, Point, UIElement};

pub const DEFAULT_FONT_SCALE: f64 = 0.02;

/// Minimum stroke width in pixels for a tag glyph.
const MIN_STROKE_PX: i64 = 2;
/// Font cell rows: 7 glyph rows plus one padding row above and below.
const CELL_ROWS: i64 = 9;

#[derive(Debug, Error)]
pub enum SomError {
    #[error("cannot decode screenshot: {0}")]
    Decode(String),
    #[error("cannot encode tagged screenshot: {0}")]
    Encode(String),
    #[error("element bounding boxes outside the screen at indices {0:?}")]
    InvalidElements(Vec<usize>),
    #[error("unknown tag {tag_id}; valid tags are {}", valid_range(*.count))]
    UnknownTag { tag_id: i64, count: usize },
    #[error("tag style {placement:?}+{shape:?} is not a preset; use TagStyle::custom")]
    UnsupportedCombo { placement: TagPlacement, shape: TagShape },
    #[error("font scale must be in (0, 1], got {0}")]
    FontScale(f64),
}

fn valid_range(count: usize) -> String {
    if count == 0 {
        "none (screen has no tags)".to_string()
    } else {
        format!("1..{count}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagPlacement {
    LeftSide,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagShape {
    BlackSquare,
    RedCircle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagStyle {
    pub placement: TagPlacement,
    pub shape: TagShape,
    /// Glyph height as a fraction of the image height.
    pub font_scale: f64,
}

impl Default for TagStyle {
    fn default() -> Self {
        TagStyle::center()
    }
}

impl TagStyle {
    /// Black squares abutting each element's left edge.
    pub fn by_side() -> Self {
        Self {
            placement: TagPlacement::LeftSide,
            shape: TagShape::BlackSquare,
            font_scale: DEFAULT_FONT_SCALE,
        }
    }

    /// Red circles at each element's center.
    pub fn red() -> Self {
        Self {
            placement: TagPlacement::Center,
            shape: TagShape::RedCircle,
            font_scale: DEFAULT_FONT_SCALE,
        }
    }

    /// Black squares at each element's center.
    pub fn center() -> Self {
        Self {
            placement: TagPlacement::Center,
            shape: TagShape::BlackSquare,
            font_scale: DEFAULT_FONT_SCALE,
        }
    }

    pub fn presets() -> [(&'static str, TagStyle); 3] {
        [
            ("by-side", TagStyle::by_side()),
            ("red", TagStyle::red()),
            ("center", TagStyle::center()),
        ]
    }

    /// Only the three preset combinations are accepted here.
    pub fn new(placement: TagPlacement, shape: TagShape, font_scale: f64) -> Result<Self, SomError> {
        if matches!((placement, shape), (TagPlacement::LeftSide, TagShape::RedCircle)) {
            return Err(SomError::UnsupportedCombo { placement, shape });
        }
        TagStyle::custom(placement, shape, font_scale)
    }

    /// Any combination, including ones outside the presets.
    pub fn custom(placement: TagPlacement, shape: TagShape, font_scale: f64) -> Result<Self, SomError> {
        if !(font_scale > 0.0 && font_scale <= 1.0) {
            return Err(SomError::FontScale(font_scale));
        }
        Ok(Self {
            placement,
            shape,
            font_scale,
        })
    }

    pub fn with_font_scale(self, font_scale: f64) -> Result<Self, SomError> {
        TagStyle::custom(self.placement, self.shape, font_scale)
    }
}

impl FromStr for TagStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let key = if key == "side" || key == "by side" { "by-side".to_string() } else { key };
        TagStyle::presets()
            .into_iter()
            .find(|(name, _)| *name == key)
            .map(|(_, style)| style)
            .ok_or_else(|| format!("unknown tag style `{s}` (expected by-side, red, or center)"))
    }
}

/// Pixel rectangle occupied by one drawn tag. Half-open on the far edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl GlyphRect {
    pub fn intersection_area(&self, other: &GlyphRect) -> u64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            u64::from(x1 - x0) * u64::from(y1 - y0)
        }
    }

    pub fn contains_px(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// A screenshot with its tagged rendering and the grounding map.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedScreen {
    pub raw_image: ImageData,
    pub tagged_image: ImageData,
    pub width: u32,
    pub height: u32,
    pub tag_map: BTreeMap<u32, UIElement>,
    pub glyphs: BTreeMap<u32, GlyphRect>,
    pub style: TagStyle,
}

impl TaggedScreen {
    pub fn tag_count(&self) -> usize {
        self.tag_map.len()
    }

    /// `"1..N"`, or `"none"` for a screen without elements.
    pub fn tag_range(&self) -> String {
        match self.tag_map.len() {
            0 => "none".to_string(),
            n => format!("1..{n}"),
        }
    }

    pub fn sidecar(&self) -> TagMapFile {
        TagMapFile {
            width: self.width,
            height: self.height,
            style: self.style,
            tags: self
                .tag_map
                .iter()
                .map(|(id, element)| TagEntry {
                    tag: *id,
                    element: element.clone(),
                    glyph: self.glyphs[id],
                })
                .collect(),
        }
    }
}

/// Side-car JSON written next to a tagged PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMapFile {
    pub width: u32,
    pub height: u32,
    pub style: TagStyle,
    pub tags: Vec<TagEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagEntry {
    pub tag: u32,
    pub element: UIElement,
    pub glyph: GlyphRect,
}

/// Render numeric tags for `elements` onto `image` (any format `image` can
/// decode; PNG expected).
pub fn annotate(image: &ImageData, elements: &[UIElement], style: &TagStyle) -> Result<TaggedScreen, SomError> {
    let invalid: Vec<usize> = elements
        .iter()
        .enumerate()
        .filter(|(_, e)| BBox::new(e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h).is_err())
        .map(|(i, _)| i)
        .collect();
    if !invalid.is_empty() {
        return Err(SomError::InvalidElements(invalid));
    }

    let mut canvas = image::load_from_memory(image.as_bytes())
        .map_err(|e| SomError::Decode(e.to_string()))?
        .to_rgba8();
    let (width, height) = canvas.dimensions();
    if width == 0 || height == 0 {
        return Err(SomError::Decode("image has zero size".into()));
    }

    let mut tag_map = BTreeMap::new();
    let mut glyphs = BTreeMap::new();
    for (i, element) in elements.iter().enumerate() {
        let tag = (i + 1) as u32;
        let layout = layout_glyph(&element.bbox, tag, style, width, height);
        draw_glyph(&mut canvas, &layout, tag, style.shape);
        tag_map.insert(tag, element.clone());
        glyphs.insert(tag, layout.rect);
    }

    let mut out = Vec::new();
    canvas
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| SomError::Encode(e.to_string()))?;

    Ok(TaggedScreen {
        raw_image: image.clone(),
        tagged_image: ImageData::new(out),
        width,
        height,
        tag_map,
        glyphs,
        style: *style,
    })
}

pub fn resolve_tag(ts: &TaggedScreen, tag_id: i64) -> Result<Point, SomError> {
    u32::try_from(tag_id)
        .ok()
        .and_then(|id| ts.tag_map.get(&id))
        .map(|e| e.bbox.center())
        .ok_or(SomError::UnknownTag {
            tag_id,
            count: ts.tag_map.len(),
        })
}

/// Every pair of tag glyphs whose rectangles overlap with positive area,
/// sorted lexicographically.
pub fn collision_report(ts: &TaggedScreen) -> Vec<(u32, u32)> {
    let glyphs: Vec<(u32, GlyphRect)> = ts.glyphs.iter().map(|(k, v)| (*k, *v)).collect();
    let mut pairs = Vec::new();
    for (i, (a, ra)) in glyphs.iter().enumerate() {
        for (b, rb) in &glyphs[i + 1..] {
            if ra.intersection_area(rb) > 0 {
                pairs.push((*a, *b));
            }
        }
    }
    pairs
}

struct GlyphLayout {
    rect: GlyphRect,
    unit: i64,
}

/// Pixels per font cell for a given image height.
pub fn glyph_unit(style: &TagStyle, image_height: u32) -> i64 {
    let target = style.font_scale * f64::from(image_height);
    ((target / CELL_ROWS as f64).round() as i64).max(MIN_STROKE_PX)
}

/// Unclamped glyph size in pixels for a tag label: `(6 * digits + 1)` cells
/// wide and nine cells tall. Circles use the larger side for both.
pub fn glyph_size(tag: u32, style: &TagStyle, image_height: u32) -> (i64, i64) {
    let unit = glyph_unit(style, image_height);
    let digits = tag.to_string().len() as i64;
    let w = (6 * digits + 1) * unit;
    let h = CELL_ROWS * unit;
    match style.shape {
        TagShape::BlackSquare => (w, h),
        TagShape::RedCircle => {
            let side = w.max(h);
            (side, side)
        }
    }
}

fn layout_glyph(bbox: &BBox, tag: u32, style: &TagStyle, width: u32, height: u32) -> GlyphLayout {
    let unit = glyph_unit(style, height);
    let (gw, gh) = glyph_size(tag, style, height);
    let (iw, ih) = (i64::from(width), i64::from(height));
    let gw = gw.min(iw);
    let gh = gh.min(ih);

    let cx = (bbox.x + bbox.w / 2.0) * width as f64;
    let cy = (bbox.y + bbox.h / 2.0) * height as f64;
    let y0 = (cy - gh as f64 / 2.0).round() as i64;
    let x0 = match style.placement {
        TagPlacement::Center => (cx - gw as f64 / 2.0).round() as i64,
        TagPlacement::LeftSide => (bbox.x * width as f64).round() as i64 - gw,
    };
    let x0 = x0.clamp(0, iw - gw);
    let y0 = y0.clamp(0, ih - gh);
    GlyphLayout {
        rect: GlyphRect {
            x: x0 as u32,
            y: y0 as u32,
            w: gw as u32,
            h: gh as u32,
        },
        unit,
    }
}

const BLACK: Rgba<u8> = Rgba([0, 0, 0, 255]);
const RED: Rgba<u8> = Rgba([220, 20, 20, 255]);
const WHITE: Rgba<u8> = Rgba([255, 255, 255, 255]);

fn draw_glyph(canvas: &mut RgbaImage, layout: &GlyphLayout, tag: u32, shape: TagShape) {
    let r = layout.rect;
    match shape {
        TagShape::BlackSquare => {
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    canvas.put_pixel(x, y, BLACK);
                }
            }
        }
        TagShape::RedCircle => {
            let cx = f64::from(r.x) + f64::from(r.w) / 2.0;
            let cy = f64::from(r.y) + f64::from(r.h) / 2.0;
            let radius = f64::from(r.w.min(r.h)) / 2.0;
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    let dx = f64::from(x) + 0.5 - cx;
                    let dy = f64::from(y) + 0.5 - cy;
                    if dx * dx + dy * dy <= radius * radius {
                        canvas.put_pixel(x, y, RED);
                    }
                }
            }
        }
    }

    // Digits are centered in the glyph rect; anything falling outside it
    // (tiny images) is clipped so drawing never leaves the rect.
    let label = tag.to_string();
    let unit = layout.unit;
    let text_w = (6 * label.len() as i64 - 1) * unit;
    let text_h = 7 * unit;
    let ox = i64::from(r.x) + (i64::from(r.w) - text_w) / 2;
    let oy = i64::from(r.y) + (i64::from(r.h) - text_h) / 2;
    for (d, ch) in label.bytes().enumerate() {
        let rows = DIGITS[(ch - b'0') as usize];
        let dx0 = ox + d as i64 * 6 * unit;
        for (row, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0b10000 >> col) == 0 {
                    continue;
                }
                let px0 = dx0 + col * unit;
                let py0 = oy + row as i64 * unit;
                for py in py0..py0 + unit {
                    for px in px0..px0 + unit {
                        if px < 0 || py < 0 {
                            continue;
                        }
                        let (px, py) = (px as u32, py as u32);
                        if r.contains_px(px, py) {
                            canvas.put_pixel(px, py, WHITE);
                        }
                    }
                }
            }
        }
    }
}

/// 5x7 bitmap digits, one `u8` per row, high bit on the left.
const DIGITS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Encode a solid-color PNG; handy for fixtures and tests.
pub fn blank_png(width: u32, height: u32, rgb: [u8; 3]) -> ImageData {
    let img = RgbaImage::from_pixel(width, height, Rgba([rgb[0], rgb[1], rgb[2], 255]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("in-memory png encode");
    ImageData::new(out)
}
