use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrialRecord;
use crate::label_model::{BoundarySegment, MasterMap, Position, Source};

const OUTLINE_OUTER: Rgb<u8> = Rgb([255, 255, 255]);
const OUTLINE_INNER: Rgb<u8> = Rgb([0, 0, 0]);
const SEGMENT: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("trial {trial} is for image {expected}, frame is {found}")]
    WrongImage { trial: String, expected: String, found: String },
    #[error("segment {segment} has pixel ({row}, {col}) outside the {height}x{width} image")]
    OutOfBounds {
        segment: String,
        row: u32,
        col: u32,
        height: u32,
        width: u32,
    },
    #[error("original image is {found_w}x{found_h}, spec expects {width}x{height}")]
    SizeMismatch {
        width: u32,
        height: u32,
        found_w: u32,
        found_h: u32,
    },
}

/// Identity and size of the image a trial is drawn on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

impl From<&MasterMap> for ImageFrame {
    fn from(m: &MasterMap) -> Self {
        Self {
            image_id: m.image_id.clone(),
            width: m.width,
            height: m.height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One outlined crop square with its segment drawn as a red polyline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub side: Side,
    pub top: u32,
    pub left: u32,
    pub size: u32,
    pub polyline: Vec<Position>,
}

/// What a subject sees for one trial: the composite image (both windows over
/// the original) and, separately, the untouched original. Sources are not
/// included, so the spec can be shown as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub trial_id: String,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub original_image: String,
    pub windows: [WindowSpec; 2],
    /// The two crop squares intersect.
    pub overlapping: bool,
}

fn window_for(segment: &BoundarySegment, size: u32, frame: &ImageFrame) -> Result<WindowSpec, RenderError> {
    for &(row, col) in &segment.pixels {
        if row >= frame.height || col >= frame.width {
            return Err(RenderError::OutOfBounds {
                segment: segment.segment_id.clone(),
                row,
                col,
                height: frame.height,
                width: frame.width,
            });
        }
    }
    let half = i64::from(size / 2);
    let place = |center: u32, lo: u32, hi: u32, extent: u32| -> u32 {
        let mut start = i64::from(center) - half;
        start = start.clamp(i64::from(hi) - i64::from(size) + 1, i64::from(lo));
        if extent >= size {
            start = start.clamp(0, i64::from(extent - size));
        } else {
            start = 0;
        }
        start as u32
    };
    let rows = segment.pixels.iter().map(|p| p.0);
    let cols = segment.pixels.iter().map(|p| p.1);
    let (r_lo, r_hi) = (rows.clone().min().unwrap_or(0), rows.max().unwrap_or(0));
    let (c_lo, c_hi) = (cols.clone().min().unwrap_or(0), cols.max().unwrap_or(0));
    Ok(WindowSpec {
        side: Side::Left,
        top: place(segment.window_center.0, r_lo, r_hi, frame.height),
        left: place(segment.window_center.1, c_lo, c_hi, frame.width),
        size,
        polyline: segment.pixels.clone(),
    })
}

fn overlaps(a: &WindowSpec, b: &WindowSpec) -> bool {
    a.top < b.top + b.size && b.top < a.top + a.size && a.left < b.left + b.size && b.left < a.left + a.size
}

/// Presentation spec for one trial.
pub fn render_trial_spec(trial: &TrialRecord, frame: &ImageFrame) -> Result<RenderSpec, RenderError> {
    if trial.image_id != frame.image_id {
        return Err(RenderError::WrongImage {
            trial: trial.trial_id.clone(),
            expected: trial.image_id.clone(),
            found: frame.image_id.clone(),
        });
    }
    let right_source = match trial.left {
        Source::Human => Source::Algorithm,
        Source::Algorithm => Source::Human,
    };
    let mut left = window_for(trial.segment(trial.left), trial.window, frame)?;
    let mut right = window_for(trial.segment(right_source), trial.window, frame)?;
    left.side = Side::Left;
    right.side = Side::Right;
    Ok(RenderSpec {
        trial_id: trial.trial_id.clone(),
        image_id: trial.image_id.clone(),
        width: frame.width,
        height: frame.height,
        original_image: trial.image_id.clone(),
        overlapping: overlaps(&left, &right),
        windows: [left, right],
    })
}

fn put(img: &mut RgbImage, row: i64, col: i64, color: Rgb<u8>) {
    if row >= 0 && col >= 0 && (row as u32) < img.height() && (col as u32) < img.width() {
        img.put_pixel(col as u32, row as u32, color);
    }
}

fn ring(img: &mut RgbImage, top: i64, left: i64, size: i64, color: Rgb<u8>) {
    if size <= 0 {
        return;
    }
    let (bottom, right) = (top + size - 1, left + size - 1);
    for c in left..=right {
        put(img, top, c, color);
        put(img, bottom, c, color);
    }
    for r in top..=bottom {
        put(img, r, left, color);
        put(img, r, right, color);
    }
}

/// Draws the composite stimulus: each window outlined white with a black
/// inner ring, and the segment pixels in red on top.
pub fn rasterize(spec: &RenderSpec, original: &RgbImage) -> Result<RgbImage, RenderError> {
    if original.width() != spec.width || original.height() != spec.height {
        return Err(RenderError::SizeMismatch {
            width: spec.width,
            height: spec.height,
            found_w: original.width(),
            found_h: original.height(),
        });
    }
    let mut img = original.clone();
    for w in &spec.windows {
        let (top, left, size) = (i64::from(w.top), i64::from(w.left), i64::from(w.size));
        ring(&mut img, top, left, size, OUTLINE_OUTER);
        ring(&mut img, top + 1, left + 1, size - 2, OUTLINE_INNER);
    }
    for w in &spec.windows {
        for &(r, c) in &w.polyline {
            put(&mut img, i64::from(r), i64::from(c), SEGMENT);
        }
    }
    Ok(img)
}
