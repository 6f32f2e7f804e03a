//! Boundary label data model: per-labeler maps, the fused master map,
//! boundary segments and tagged segment collections.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version stamped into every JSON document this crate writes.
pub const FORMAT_VERSION: u32 = 1;

/// Default side length of the square crop window around a segment.
pub const DEFAULT_WINDOW: u32 = 64;

/// `(row, col)` pixel coordinate.
pub type Position = (u32, u32);

/// Index of a pixel in a [`MasterMap`].
pub type PixelId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("labeler {labeler}: pixel ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds {
        labeler: String,
        row: u32,
        col: u32,
        height: u32,
        width: u32,
    },
    #[error("labeler {labeler}: duplicate pixel ({row}, {col})")]
    DuplicatePixel { labeler: String, row: u32, col: u32 },
    #[error("master pixel {0} has no positive response")]
    EmptyResponse(PixelId),
    #[error("master pixel {pixel}: expected {expected} responses, found {found}")]
    ResponseLength {
        pixel: PixelId,
        expected: usize,
        found: usize,
    },
    #[error("two master pixels share position ({0}, {1})")]
    DuplicatePosition(u32, u32),
    #[error("master pixel ids must be 0..n in order; found {found} at index {index}")]
    PixelIdOrder { index: usize, found: PixelId },
    #[error("unknown pixel id {0}")]
    UnknownPixel(PixelId),
    #[error("window size must be at least 3, got {0}")]
    WindowTooSmall(u32),
    #[error("duplicate segment id {0}")]
    DuplicateSegment(String),
}

/// Support set of one labeler's binary boundary map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelerMap {
    pub labeler_id: String,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pixels: Vec<Position>,
}

impl LabelerMap {
    /// Validates bounds and uniqueness. Pixel order is preserved.
    pub fn new(
        labeler_id: impl Into<String>,
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<Position>,
    ) -> Result<Self, LabelError> {
        let labeler_id = labeler_id.into();
        let mut seen = HashSet::with_capacity(pixels.len());
        for &(row, col) in &pixels {
            if row >= height || col >= width {
                return Err(LabelError::OutOfBounds {
                    labeler: labeler_id,
                    row,
                    col,
                    height,
                    width,
                });
            }
            if !seen.insert((row, col)) {
                return Err(LabelError::DuplicatePixel {
                    labeler: labeler_id,
                    row,
                    col,
                });
            }
        }
        Ok(Self {
            labeler_id,
            image_id: image_id.into(),
            width,
            height,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[Position] {
        &self.pixels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterPixel {
    pub pixel_id: PixelId,
    pub row: u32,
    pub col: u32,
    /// One bit per labeler, indexed like [`MasterMap::labeler_ids`].
    pub responses: Vec<u8>,
}

impl MasterPixel {
    pub fn position(&self) -> Position {
        (self.row, self.col)
    }

    pub fn vote_count(&self) -> usize {
        self.responses.iter().filter(|&&y| y != 0).count()
    }
}

/// All labelers' boundaries for one image fused onto a common pixel set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterMap {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub labeler_ids: Vec<String>,
    pub pixels: Vec<MasterPixel>,
}

impl MasterMap {
    pub fn num_labelers(&self) -> usize {
        self.labeler_ids.len()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel(&self, id: PixelId) -> Option<&MasterPixel> {
        self.pixels.get(id as usize)
    }

    /// Checks every structural invariant. Pixel ids must equal their index.
    pub fn validate(&self) -> Result<(), LabelError> {
        let l = self.labeler_ids.len();
        let mut positions = HashSet::with_capacity(self.pixels.len());
        for (index, p) in self.pixels.iter().enumerate() {
            if p.pixel_id as usize != index {
                return Err(LabelError::PixelIdOrder {
                    index,
                    found: p.pixel_id,
                });
            }
            if p.responses.len() != l {
                return Err(LabelError::ResponseLength {
                    pixel: p.pixel_id,
                    expected: l,
                    found: p.responses.len(),
                });
            }
            if p.responses.iter().all(|&y| y == 0) {
                return Err(LabelError::EmptyResponse(p.pixel_id));
            }
            if p.row >= self.height || p.col >= self.width {
                return Err(LabelError::OutOfBounds {
                    labeler: "<master>".into(),
                    row: p.row,
                    col: p.col,
                    height: self.height,
                    width: self.width,
                });
            }
            if !positions.insert(p.position()) {
                return Err(LabelError::DuplicatePosition(p.row, p.col));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Algorithm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub segment_id: String,
    pub image_id: String,
    /// Ids into the pixel set the segment was cut from (master pixels for
    /// human segments, algorithm pixel indices otherwise).
    pub member_pixel_ids: Vec<PixelId>,
    /// Positions of the members, same order as `member_pixel_ids`.
    pub pixels: Vec<Position>,
    pub window_center: Position,
    pub window_size: u32,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

impl BoundarySegment {
    /// Top-left corner of the crop window.
    pub fn window_origin(&self) -> (i64, i64) {
        let half = i64::from(self.window_size / 2);
        (
            i64::from(self.window_center.0) - half,
            i64::from(self.window_center.1) - half,
        )
    }

    pub fn window_contains(&self, (row, col): Position) -> bool {
        let (top, left) = self.window_origin();
        let size = i64::from(self.window_size);
        let (row, col) = (i64::from(row), i64::from(col));
        row >= top && row < top + size && col >= left && col < left + size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetTag {
    /// Full human boundary set.
    S,
    /// Orphan labels: marked by exactly one labeler.
    S1,
    /// Reference detector boundaries.
    A,
    /// Detector boundaries absent from the human set.
    #[serde(rename = "A_minus_S")]
    AMinusS,
    /// Human pixels whose inferred strength is at least `tau`.
    #[serde(rename = "S_bar_tau")]
    SBarTau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCollection {
    pub name: SetTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub segments: Vec<BoundarySegment>,
}

impl SegmentCollection {
    pub fn new(
        name: SetTag,
        tau: Option<f64>,
        segments: Vec<BoundarySegment>,
    ) -> Result<Self, LabelError> {
        let mut ids = HashSet::with_capacity(segments.len());
        for s in &segments {
            if !ids.insert(s.segment_id.as_str()) {
                return Err(LabelError::DuplicateSegment(s.segment_id.clone()));
            }
        }
        Ok(Self { name, tau, segments })
    }

    /// Segments grouped by image, images in lexicographic order.
    pub fn by_image(&self) -> BTreeMap<&str, Vec<&BoundarySegment>> {
        let mut out: BTreeMap<&str, Vec<&BoundarySegment>> = BTreeMap::new();
        for s in &self.segments {
            out.entry(s.image_id.as_str()).or_default().push(s);
        }
        out
    }

    pub fn source(&self) -> Source {
        match self.name {
            SetTag::A | SetTag::AMinusS => Source::Algorithm,
            _ => Source::Human,
        }
    }
}

/// Pixels marked by exactly one labeler.
pub fn extract_orphans(master: &MasterMap) -> BTreeSet<PixelId> {
    master
        .pixels
        .iter()
        .filter(|p| p.vote_count() == 1)
        .map(|p| p.pixel_id)
        .collect()
}

/// Cuts a subset of master pixels into window-sized human segments.
pub fn extract_segments(
    master: &MasterMap,
    pixel_subset: &BTreeSet<PixelId>,
    window_size: u32,
) -> Result<Vec<BoundarySegment>, LabelError> {
    let mut members = Vec::with_capacity(pixel_subset.len());
    for &id in pixel_subset {
        let p = master.pixel(id).ok_or(LabelError::UnknownPixel(id))?;
        members.push((id, p.position()));
    }
    segment_pixels(
        &master.image_id,
        master.width,
        master.height,
        &members,
        window_size,
        Source::Human,
    )
}

/// Partitions `(id, position)` pairs into 8-connected components, then cuts
/// each component into connected pieces whose bounding box fits the window.
///
/// Each piece is grown breadth-first from the first remaining pixel in scan
/// order, refusing pixels that would stretch the bounding box past
/// `window_size`.
pub fn segment_pixels(
    image_id: &str,
    width: u32,
    height: u32,
    members: &[(PixelId, Position)],
    window_size: u32,
    source: Source,
) -> Result<Vec<BoundarySegment>, LabelError> {
    if window_size < 3 {
        return Err(LabelError::WindowTooSmall(window_size));
    }
    let mut sorted: Vec<(Position, PixelId)> = members.iter().map(|&(id, p)| (p, id)).collect();
    sorted.sort_unstable();
    sorted.dedup_by_key(|(p, _)| *p);
    let index: HashMap<Position, usize> = sorted.iter().enumerate().map(|(i, (p, _))| (*p, i)).collect();

    let mut assigned = vec![false; sorted.len()];
    let mut segments = Vec::new();
    let source_tag = match source {
        Source::Human => "h",
        Source::Algorithm => "a",
    };

    for seed in 0..sorted.len() {
        if assigned[seed] {
            continue;
        }
        let mut piece = vec![seed];
        assigned[seed] = true;
        let (r0, c0) = sorted[seed].0;
        let mut bbox = (r0, r0, c0, c0);
        let mut queue = VecDeque::from([seed]);
        while let Some(cur) = queue.pop_front() {
            for next in neighbours(sorted[cur].0, &index) {
                if assigned[next] {
                    continue;
                }
                let (r, c) = sorted[next].0;
                let grown = (bbox.0.min(r), bbox.1.max(r), bbox.2.min(c), bbox.3.max(c));
                if grown.1 - grown.0 >= window_size || grown.3 - grown.2 >= window_size {
                    continue;
                }
                bbox = grown;
                assigned[next] = true;
                piece.push(next);
                queue.push_back(next);
            }
        }
        piece.sort_unstable();

        let n = piece.len() as f64;
        let mean_r = piece.iter().map(|&i| f64::from(sorted[i].0 .0)).sum::<f64>() / n;
        let mean_c = piece.iter().map(|&i| f64::from(sorted[i].0 .1)).sum::<f64>() / n;
        let center = (
            window_axis(mean_r, bbox.0, bbox.1, height, window_size),
            window_axis(mean_c, bbox.2, bbox.3, width, window_size),
        );
        let first = sorted[piece[0]].0;
        segments.push(BoundarySegment {
            segment_id: format!("{image_id}:{source_tag}:{}:{}", first.0, first.1),
            image_id: image_id.to_string(),
            member_pixel_ids: piece.iter().map(|&i| sorted[i].1).collect(),
            pixels: piece.iter().map(|&i| sorted[i].0).collect(),
            window_center: center,
            window_size,
            source,
            strength: None,
        });
    }
    Ok(segments)
}

/// Scan-ordered 8-neighbours present in `index`.
fn neighbours((r, c): Position, index: &HashMap<Position, usize>) -> impl Iterator<Item = usize> + '_ {
    const OFFSETS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFSETS.iter().filter_map(move |&(dr, dc)| {
        let nr = i64::from(r) + dr;
        let nc = i64::from(c) + dc;
        if nr < 0 || nc < 0 {
            return None;
        }
        index.get(&(nr as u32, nc as u32)).copied()
    })
}

/// Window center along one axis: as close to the centroid as possible while
/// covering `[lo, hi]` and, when the image is large enough, staying inside it.
fn window_axis(centroid: f64, lo: u32, hi: u32, extent: u32, window: u32) -> u32 {
    let half = i64::from(window / 2);
    let w = i64::from(window);
    let mut start = centroid.round() as i64 - half;
    start = start.clamp(i64::from(hi) - w + 1, i64::from(lo));
    if i64::from(extent) >= w {
        start = start.clamp(0, i64::from(extent) - w);
    } else {
        start = 0;
    }
    (start + half) as u32
}

/// Mean strength of a segment's member pixels.
pub fn segment_strength(segment: &BoundarySegment, strengths: &BTreeMap<PixelId, f64>) -> Option<f64> {
    let mut sum = 0.0;
    for id in &segment.member_pixel_ids {
        sum += strengths.get(id)?;
    }
    Some(sum / segment.member_pixel_ids.len() as f64)
}
