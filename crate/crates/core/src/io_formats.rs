//! File formats: label files, master maps, strengths, pixel sets, trials,
//! risk reports and grayscale boundary rasters.
//!
//! Every JSON document carries `"format_version": 1`. Rasters are binary
//! `P5` grayscale with maxval up to 65535 (16-bit samples big-endian).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{LabelError, LabelerMap, MasterMap, PixelId, Position, SetTag, FORMAT_VERSION};
use crate::strength_inference::{EmResult, LabelerProfile, SigmoidParams, StrengthField};
use crate::trial_engine::TrialRecord;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: invalid JSON: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: unsupported format_version {found}, expected {FORMAT_VERSION}")]
    Version { context: String, found: u32 },
    #[error("raster: {message} at byte {offset}")]
    Raster { offset: usize, message: String },
    #[error("soft map: {0}")]
    SoftMap(String),
    #[error("only {achievable} pixels have nonzero confidence, {requested} requested")]
    Shortfall { requested: usize, achievable: usize },
    #[error(transparent)]
    Label(#[from] LabelError),
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn check_version(context: &str, found: u32) -> Result<(), FormatError> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(FormatError::Version { context: context.into(), found })
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io { path: path.into(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.into(), source })
}

fn parse_json<T: DeserializeOwned>(context: &str, bytes: &[u8]) -> Result<T, FormatError> {
    serde_json::from_slice(bytes).map_err(|source| FormatError::Json { context: context.into(), source })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("document types always serialize");
    out.push(b'\n');
    out
}

// ---- labels ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerEntry {
    pub labeler_id: String,
    pub pixels: Vec<Position>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub labelers: Vec<LabelerEntry>,
}

impl LabelsFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let f: Self = parse_json("labels", bytes)?;
        check_version("labels", f.format_version)?;
        Ok(f)
    }

    pub fn labeler_maps(&self) -> Result<Vec<LabelerMap>, FormatError> {
        self.labelers
            .iter()
            .map(|l| {
                LabelerMap::new(&l.labeler_id, &self.image_id, self.width, self.height, l.pixels.clone())
                    .map_err(FormatError::from)
            })
            .collect()
    }
}

/// Labeler map from a binary raster: every nonzero sample is a boundary pixel.
pub fn labeler_map_from_raster(
    labeler_id: &str,
    image_id: &str,
    bytes: &[u8],
) -> Result<LabelerMap, FormatError> {
    let raster = parse_pgm(bytes)?;
    let pixels = raster
        .samples
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .map(|(i, _)| ((i / raster.width as usize) as u32, (i % raster.width as usize) as u32))
        .collect();
    Ok(LabelerMap::new(labeler_id, image_id, raster.width, raster.height, pixels)?)
}

// ---- master map -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MasterDoc {
    #[serde(default = "default_version")]
    format_version: u32,
    #[serde(flatten)]
    master: MasterMap,
}

pub fn master_to_json(master: &MasterMap) -> Vec<u8> {
    to_json_bytes(&MasterDoc { format_version: FORMAT_VERSION, master: master.clone() })
}

pub fn master_from_json(bytes: &[u8]) -> Result<MasterMap, FormatError> {
    let doc: MasterDoc = parse_json("master map", bytes)?;
    check_version("master map", doc.format_version)?;
    doc.master.validate()?;
    Ok(doc.master)
}

// ---- strengths ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub labeler_id: String,
    pub theta: SigmoidParams,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub degenerate: bool,
    pub final_max_delta: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthsFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub image_id: String,
    pub strengths: StrengthField,
    #[serde(default)]
    pub profiles: Vec<ProfileEntry>,
    #[serde(default)]
    pub iterations_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<EmDiagnostics>,
}

impl StrengthsFile {
    pub fn from_em(image_id: &str, em: &EmResult) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            image_id: image_id.to_string(),
            strengths: em.strengths.clone(),
            profiles: em
                .profiles
                .iter()
                .map(|p: &LabelerProfile| ProfileEntry {
                    labeler_id: p.labeler_id.clone(),
                    theta: p.theta,
                    mu: p.mu.clone(),
                })
                .collect(),
            iterations_run: em.iterations_run,
            diagnostics: Some(EmDiagnostics {
                degenerate: em.degenerate,
                final_max_delta: em.final_max_delta,
                history: em.history.clone(),
            }),
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let f: Self = parse_json("strengths", bytes)?;
        check_version("strengths", f.format_version)?;
        Ok(f)
    }
}

/// Algorithm-side strengths: a bare JSON array, or a strengths file.
pub fn parse_strength_list(bytes: &[u8]) -> Result<Vec<f64>, FormatError> {
    if let Ok(list) = serde_json::from_slice::<Vec<f64>>(bytes) {
        return Ok(list);
    }
    Ok(StrengthsFile::parse(bytes)?.strengths.iter().map(|(_, x)| x).collect())
}

// ---- subsets and pixel sets ----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub image_id: String,
    pub tau: f64,
    pub pixel_ids: Vec<PixelId>,
    pub utility: usize,
}

impl SubsetFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let f: Self = parse_json("subset", bytes)?;
        check_version("subset", f.format_version)?;
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPixel {
    pub id: PixelId,
    pub row: u32,
    pub col: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<SetPixel>,
}

/// A tagged boundary pixel set spanning one or more images; the input to
/// trial generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelSetFile {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub name: SetTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub images: Vec<SetImage>,
}

impl PixelSetFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, FormatError> {
        let f: Self = parse_json("pixel set", bytes)?;
        check_version("pixel set", f.format_version)?;
        Ok(f)
    }
}

// ---- trials and responses -------------------------------------------------

/// One JSON object per line.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records always serialize");
        out.write_all(b"\n").expect("vec write");
    }
    out
}

pub fn from_json_lines<T: DeserializeOwned>(context: &str, bytes: &[u8]) -> Result<Vec<T>, FormatError> {
    bytes
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, line)| !line.iter().all(u8::is_ascii_whitespace))
        .map(|(i, line)| parse_json(&format!("{context} line {}", i + 1), line))
        .collect()
}

pub fn trials_from_jsonl(bytes: &[u8]) -> Result<Vec<TrialRecord>, FormatError> {
    from_json_lines("trials", bytes)
}

// ---- rasters --------------------------------------------------------------

/// Parsed `P5` raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> FormatError {
        FormatError::Raster { offset: self.pos, message: message.into() }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, FormatError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| FormatError::Raster { offset: start, message: format!("{what} overflows") })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Raster, FormatError> {
    let mut h = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(h.err("missing P5 magic"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(h.err(format!("maxval {maxval} outside 1..=65535")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(h.err("expected a single whitespace before pixel data"));
    }
    h.pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let count = (width as usize)
        .checked_mul(height as usize)
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| h.err(format!("dimensions {width}x{height} overflow")))?;
    let need = count * bytes_per;
    let data = &bytes[h.pos..];
    if data.len() < need {
        return Err(FormatError::Raster {
            offset: bytes.len(),
            message: format!("truncated payload: {} of {need} bytes", data.len()),
        });
    }
    let samples: Vec<u16> = if bytes_per == 1 {
        data[..need].iter().map(|&b| u16::from(b)).collect()
    } else {
        data[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(i) = samples.iter().position(|&v| u32::from(v) > maxval) {
        return Err(FormatError::Raster {
            offset: h.pos + i * bytes_per,
            message: format!("sample {} exceeds maxval {maxval}", samples[i]),
        });
    }
    Ok(Raster { width, height, maxval: maxval as u16, samples })
}

pub fn write_pgm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", raster.width, raster.height, raster.maxval).into_bytes();
    if raster.maxval > 255 {
        for &v in &raster.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(raster.samples.iter().map(|&v| v as u8));
    }
    out
}

/// Soft boundary map of a reference detector, confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftMap {
    Raster(Raster),
    Values { width: u32, height: u32, values: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct SoftMapDoc {
    #[serde(default = "default_version")]
    format_version: u32,
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl SoftMap {
    pub fn width(&self) -> u32 {
        match self {
            Self::Raster(r) => r.width,
            Self::Values { width, .. } => *width,
        }
    }

    pub fn height(&self) -> u32 {
        match self {
            Self::Raster(r) => r.height,
            Self::Values { height, .. } => *height,
        }
    }

    /// Row-major confidences; raster samples are divided by maxval.
    pub fn confidences(&self) -> Vec<f64> {
        match self {
            Self::Raster(r) => {
                let m = f64::from(r.maxval);
                r.samples.iter().map(|&v| f64::from(v) / m).collect()
            }
            Self::Values { values, .. } => values.clone(),
        }
    }
}

/// Decodes a `P5` raster or a JSON `{width, height, values}` document.
pub fn load_soft_map(bytes: &[u8]) -> Result<SoftMap, FormatError> {
    if bytes.starts_with(b"P5") {
        return Ok(SoftMap::Raster(parse_pgm(bytes)?));
    }
    let doc: SoftMapDoc = parse_json("soft map", bytes)?;
    check_version("soft map", doc.format_version)?;
    let expected = doc.width as usize * doc.height as usize;
    if doc.values.len() != expected {
        return Err(FormatError::SoftMap(format!(
            "{} values for a {}x{} map",
            doc.values.len(),
            doc.width,
            doc.height
        )));
    }
    if let Some(v) = doc.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(FormatError::SoftMap(format!("confidence {v} outside [0, 1]")));
    }
    Ok(SoftMap::Values { width: doc.width, height: doc.height, values: doc.values })
}

pub fn save_soft_map(map: &SoftMap) -> Vec<u8> {
    match map {
        SoftMap::Raster(r) => write_pgm(r),
        SoftMap::Values { width, height, values } => to_json_bytes(&SoftMapDoc {
            format_version: FORMAT_VERSION,
            width: *width,
            height: *height,
            values: values.clone(),
        }),
    }
}

/// The `target_count` most confident pixels; ties at the cut go to the
/// lexicographically smallest `(row, col)`.
pub fn threshold_matched(soft: &SoftMap, target_count: usize) -> Result<Vec<Position>, FormatError> {
    let width = soft.width() as usize;
    let mut candidates: Vec<(f64, Position)> = soft
        .confidences()
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0.0)
        .map(|(i, c)| (c, ((i / width) as u32, (i % width) as u32)))
        .collect();
    if candidates.len() < target_count {
        return Err(FormatError::Shortfall { requested: target_count, achievable: candidates.len() });
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<Position> = candidates[..target_count].iter().map(|c| c.1).collect();
    out.sort_unstable();
    Ok(out)
}

/// Groups positions by image for pixel-set output.
pub fn set_image(image_id: &str, width: u32, height: u32, pixels: BTreeMap<PixelId, (Position, Option<f64>)>) -> SetImage {
    SetImage {
        image_id: image_id.to_string(),
        width,
        height,
        pixels: pixels
            .into_iter()
            .map(|(id, ((row, col), strength))| SetPixel { id, row, col, strength })
            .collect(),
    }
}
