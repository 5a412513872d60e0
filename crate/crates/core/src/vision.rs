//! Placement verification from camera frames and feature tracks.
//!
//! Pixel coordinates follow the image convention: `x` grows to the right and
//! `y` grows downward from the top row. Conversions to pad cells flip `y` so
//! that cell `(0, 0)` is the bottom-left of the pad.

use std::collections::VecDeque;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::Cell;

pub const DEFAULT_FRAME_GAP: usize = 3;
pub const DEFAULT_DIFF_THRESHOLD: u8 = 25;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("frame is {width}x{height} but holds {len} pixels")]
    PixelCount { width: usize, height: usize, len: usize },
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("no feature tracks supplied")]
    EmptyTracks,
    #[error("track {point_id} has no position at time {t}")]
    MissingTimestamp { point_id: u32, t: usize },
    #[error("track {point_id} timestamps are not strictly increasing")]
    UnorderedTrack { point_id: u32 },
    #[error("track {point_id} is empty")]
    EmptyTrack { point_id: u32 },
    #[error("pad corners are degenerate")]
    DegenerateCorners,
    #[error("centroid ({x:.2}, {y:.2}) lies outside the pad")]
    CentroidOutside { x: f64, y: f64 },
    #[error("detector setting `{0}` must be > 0")]
    BadConfig(&'static str),
    #[error("image I/O: {0}")]
    Image(#[from] image::ImageError),
}

/// A sub-pixel image position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, VisionError> {
        if pixels.len() != width * height {
            return Err(VisionError::PixelCount {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Result<Vec<u8>, VisionError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("length checked at construction");
        encode_pnm(image::DynamicImage::ImageLuma8(img), image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary))
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self, VisionError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)?.into_luma8();
        let (w, h) = img.dimensions();
        Frame::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<(), VisionError> {
        std::fs::write(path, self.to_pgm()?).map_err(|e| VisionError::Image(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, VisionError> {
        let bytes = std::fs::read(path).map_err(|e| VisionError::Image(e.into()))?;
        Self::from_pnm(&bytes)
    }
}

/// RGB frame, row-major, consumed by the block detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

/// Integer Rec. 601 luma.
pub fn luma([r, g, b]: [u8; 3]) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

impl RgbFrame {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    /// Fill the half-open rectangle `[x0, x1) x [y0, y1)`, clipped to the frame.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        for y in clip(y0, self.height)..clip(y1, self.height) {
            for x in clip(x0, self.width)..clip(x1, self.width) {
                self.set(x, y, c);
            }
        }
    }

    pub fn to_gray(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| luma(p)).collect(),
        }
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Result<Vec<u8>, VisionError> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("length checked at construction");
        encode_pnm(image::DynamicImage::ImageRgb8(img), image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self, VisionError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)?.into_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels: img.pixels().map(|p| p.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), VisionError> {
        std::fs::write(path, self.to_ppm()?).map_err(|e| VisionError::Image(e.into()))
    }
}

fn encode_pnm(img: image::DynamicImage, subtype: image::codecs::pnm::PnmSubtype) -> Result<Vec<u8>, VisionError> {
    let mut out = Cursor::new(Vec::new());
    let encoder = image::codecs::pnm::PnmEncoder::new(&mut out).with_subtype(subtype);
    img.write_with_encoder(encoder)?;
    Ok(out.into_inner())
}

/// Positions of one tracked feature point over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub point_id: u32,
    positions: Vec<(usize, PixelPoint)>,
}

impl FeatureTrack {
    /// `positions` are `(time index, position)` pairs with strictly increasing times.
    pub fn new(point_id: u32, positions: Vec<(usize, PixelPoint)>) -> Result<Self, VisionError> {
        if positions.is_empty() {
            return Err(VisionError::EmptyTrack { point_id });
        }
        if positions.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(VisionError::UnorderedTrack { point_id });
        }
        Ok(Self {
            point_id,
            positions,
        })
    }

    pub fn positions(&self) -> &[(usize, PixelPoint)] {
        &self.positions
    }

    pub fn at(&self, t: usize) -> Option<PixelPoint> {
        self.positions
            .binary_search_by_key(&t, |p| p.0)
            .ok()
            .map(|i| self.positions[i].1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Summed upward displacement (px) that counts as a pickup.
    pub pickup_threshold: f64,
    /// Frames between the two samples compared by the pickup detector.
    pub frame_gap: usize,
    pub diff_threshold: u8,
    /// Distance (px) under which a change is attributed to an existing block.
    pub eps_d: f64,
    /// Change area (px^2) under which a near change counts as a stacked block.
    pub eps_a: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::for_geometry(20.0, 12.0)
    }
}

impl DetectorConfig {
    /// Defaults derived from rendered geometry: `eps_d` is half the cell pitch
    /// and `eps_a` is 60% of one block's footprint.
    pub fn for_geometry(cell_px: f64, block_px: f64) -> Self {
        Self {
            pickup_threshold: 20.0,
            frame_gap: DEFAULT_FRAME_GAP,
            diff_threshold: DEFAULT_DIFF_THRESHOLD,
            eps_d: 0.5 * cell_px,
            eps_a: 0.6 * block_px * block_px,
        }
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        let checks = [
            ("pickup_threshold", self.pickup_threshold > 0.0),
            ("frame_gap", self.frame_gap > 0),
            ("diff_threshold", self.diff_threshold > 0),
            ("eps_d", self.eps_d > 0.0),
            ("eps_a", self.eps_a > 0.0),
        ];
        match checks.iter().find(|c| !c.1) {
            Some((name, _)) => Err(VisionError::BadConfig(name)),
            None => Ok(()),
        }
    }
}

/// Sum the upward motion of every track between `t` and `t + frame_gap`.
///
/// Image rows grow downward, so the row delta is negated: a block being
/// lifted yields a positive total. Returns `(total > threshold, total)`.
pub fn pickup_detect(
    tracks: &[FeatureTrack],
    t: usize,
    cfg: &DetectorConfig,
) -> Result<(bool, f64), VisionError> {
    if tracks.is_empty() {
        return Err(VisionError::EmptyTracks);
    }
    let t1 = t + cfg.frame_gap;
    let mut total = 0.0;
    for tr in tracks {
        let missing = |t| VisionError::MissingTimestamp {
            point_id: tr.point_id,
            t,
        };
        let a = tr.at(t).ok_or_else(|| missing(t))?;
        let b = tr.at(t1).ok_or_else(|| missing(t1))?;
        total += a.y - b.y;
    }
    Ok((total > cfg.pickup_threshold, total))
}

/// Per-pixel absolute difference.
pub fn frame_diff(before: &Frame, after: &Frame) -> Result<Frame, VisionError> {
    if (before.width, before.height) != (after.width, after.height) {
        return Err(VisionError::DimensionMismatch(
            (before.width, before.height),
            (after.width, after.height),
        ));
    }
    Ok(Frame {
        width: before.width,
        height: before.height,
        pixels: before
            .pixels
            .iter()
            .zip(&after.pixels)
            .map(|(a, b)| a.abs_diff(*b))
            .collect(),
    })
}

/// The dominant changed region of a difference image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRegion {
    /// Changed pixels as `(x, y)`.
    pub omega: Vec<(usize, usize)>,
    pub centroid: PixelPoint,
    pub area: usize,
}

impl ChangeRegion {
    fn from_pixels(omega: Vec<(usize, usize)>) -> Self {
        let n = omega.len() as f64;
        let (sx, sy) = omega
            .iter()
            .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
        Self {
            centroid: PixelPoint::new(sx / n, sy / n),
            area: omega.len(),
            omega,
        }
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        self.omega.iter().fold(
            (usize::MAX, usize::MAX, 0, 0),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }
}

/// 4-connected components of the pixels where `mask` is true, in raster
/// order of each component's first pixel.
fn components(width: usize, height: usize, mask: impl Fn(usize, usize) -> bool) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; width * height];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..height {
        for x0 in 0..width {
            if seen[y0 * width + x0] || !mask(x0, y0) {
                continue;
            }
            seen[y0 * width + x0] = true;
            queue.push_back((x0, y0));
            let mut comp = Vec::new();
            while let Some((x, y)) = queue.pop_front() {
                comp.push((x, y));
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < width && ny < height && !seen[ny * width + nx] && mask(nx, ny) {
                        seen[ny * width + nx] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
    }
    out
}

/// Binarize `diff` at the configured threshold and return the largest
/// 4-connected component, or `None` when nothing changed.
pub fn change_region(diff: &Frame, cfg: &DetectorConfig) -> Option<ChangeRegion> {
    let comps = components(diff.width, diff.height, |x, y| diff.get(x, y) > cfg.diff_threshold);
    // ties go to the component met first in raster order
    comps
        .into_iter()
        .reduce(|best, c| if c.len() > best.len() { c } else { best })
        .map(ChangeRegion::from_pixels)
}

/// Pad corners in image space: top-left, top-right, bottom-left, bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadCorners {
    pub top_left: PixelPoint,
    pub top_right: PixelPoint,
    pub bottom_left: PixelPoint,
    pub bottom_right: PixelPoint,
}

impl PadCorners {
    /// Axis-aligned pad spanning `[x0, x1] x [y0, y1]`.
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            top_left: PixelPoint::new(x0, y0),
            top_right: PixelPoint::new(x1, y0),
            bottom_left: PixelPoint::new(x0, y1),
            bottom_right: PixelPoint::new(x1, y1),
        }
    }

    /// Inside test for the convex quadrilateral, boundary included.
    pub fn contains(&self, p: PixelPoint) -> bool {
        let ring = [self.top_left, self.top_right, self.bottom_right, self.bottom_left];
        let mut sign = 0.0f64;
        for i in 0..4 {
            let a = ring[i];
            let b = ring[(i + 1) % 4];
            let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            if cross.abs() <= 1e-9 {
                continue;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }
}

/// Map a change centroid to the pad cell under it.
///
/// Fractions along the top edge and the left edge are scaled by the pad size
/// and floored; results on the far boundary are clamped to the last cell. The
/// image-row index is flipped so `y = 0` is the bottom pad row.
pub fn centroid_to_grid(centroid: PixelPoint, corners: &PadCorners, pad_size: usize) -> Result<Cell, VisionError> {
    let p0 = corners.top_left;
    let dx = corners.top_right.x - p0.x;
    let dy = corners.bottom_left.y - p0.y;
    if dx.abs() < f64::EPSILON || dy.abs() < f64::EPSILON || pad_size == 0 {
        return Err(VisionError::DegenerateCorners);
    }
    if !corners.contains(centroid) {
        return Err(VisionError::CentroidOutside {
            x: centroid.x,
            y: centroid.y,
        });
    }
    let n = pad_size as f64;
    let last = (pad_size - 1) as f64;
    let x_grid = ((centroid.x - p0.x) / dx * n).floor().clamp(0.0, last) as usize;
    let y_grid = ((centroid.y - p0.y) / dy * n).floor().clamp(0.0, last) as usize;
    Ok(Cell::new(x_grid, pad_size - 1 - y_grid))
}

/// Whether a new block made a detectable appearance.
///
/// The detector count rising by exactly one is enough; otherwise a change
/// region whose centroid lies on the pad backs up an inconsistent detector.
pub fn dropoff_verify(
    count_before: usize,
    count_after: usize,
    region: Option<&ChangeRegion>,
    pad: &PadCorners,
) -> bool {
    count_after == count_before + 1 || region.is_some_and(|r| pad.contains(r.centroid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackClass {
    /// Small change next to an existing block: a block landed on top of it.
    Stacked,
    /// Full-size change next to an existing block.
    PlacedBehind,
    /// Change away from every existing block.
    NewCell,
}

pub fn classify_stack(new_pos: PixelPoint, existing: &[PixelPoint], area: f64, cfg: &DetectorConfig) -> StackClass {
    let nearest = existing
        .iter()
        .map(|p| p.distance(new_pos))
        .fold(f64::INFINITY, f64::min);
    if nearest >= cfg.eps_d {
        StackClass::NewCell
    } else if area < cfg.eps_a {
        StackClass::Stacked
    } else {
        StackClass::PlacedBehind
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u32,
    /// Inclusive bounding box.
    pub bbox: PixelRect,
    pub centroid: PixelPoint,
}

/// Minimum channel spread for a pixel to count as block-colored. The pad and
/// background are neutral gray.
pub const SATURATION_THRESHOLD: u8 = 60;

/// Components smaller than this are treated as noise.
pub const MIN_BLOCK_PIXELS: usize = 16;

/// Saturated-color blobs inside `region`, ids assigned in raster order.
pub fn detect_blocks(frame: &RgbFrame, region: &PixelRect) -> Vec<Detection> {
    let saturated = |x: usize, y: usize| {
        let [r, g, b] = frame.get(x, y);
        region.contains(x, y) && r.max(g).max(b) - r.min(g).min(b) >= SATURATION_THRESHOLD
    };
    components(frame.width, frame.height, saturated)
        .into_iter()
        .filter(|c| c.len() >= MIN_BLOCK_PIXELS)
        .enumerate()
        .map(|(i, comp)| {
            let r = ChangeRegion::from_pixels(comp);
            let (x0, y0, x1, y1) = r.bbox();
            Detection {
                id: i as u32,
                bbox: PixelRect {
                    x0,
                    y0,
                    x1: x1 + 1,
                    y1: y1 + 1,
                },
                centroid: r.centroid,
            }
        })
        .collect()
}

/// Keeps detection ids stable across frames by nearest-centroid association.
#[derive(Debug, Clone)]
pub struct BlockTracker {
    max_jump_px: f64,
    next_id: u32,
    tracked: Vec<(u32, PixelPoint)>,
}

impl BlockTracker {
    pub fn new(max_jump_px: f64) -> Self {
        Self {
            max_jump_px,
            next_id: 0,
            tracked: Vec::new(),
        }
    }

    pub fn detect(&mut self, frame: &RgbFrame, region: &PixelRect) -> Vec<Detection> {
        let dets = detect_blocks(frame, region);
        self.associate(dets)
    }

    /// Greedy closest-pair matching; unmatched detections get fresh ids.
    pub fn associate(&mut self, mut dets: Vec<Detection>) -> Vec<Detection> {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (di, d) in dets.iter().enumerate() {
            for (ti, (_, p)) in self.tracked.iter().enumerate() {
                let dist = d.centroid.distance(*p);
                if dist <= self.max_jump_px {
                    pairs.push((dist, di, ti));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_id: Vec<Option<u32>> = vec![None; dets.len()];
        let mut used = vec![false; self.tracked.len()];
        for (_, di, ti) in pairs {
            if det_id[di].is_none() && !used[ti] {
                det_id[di] = Some(self.tracked[ti].0);
                used[ti] = true;
            }
        }
        for (d, id) in dets.iter_mut().zip(det_id) {
            d.id = id.unwrap_or_else(|| {
                self.next_id += 1;
                self.next_id - 1
            });
        }
        self.tracked = dets.iter().map(|d| (d.id, d.centroid)).collect();
        dets
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> DetectorConfig {
        DetectorConfig::default()
    }

    fn lift_tracks(dys: &[f64], dx: f64) -> Vec<FeatureTrack> {
        dys.iter()
            .enumerate()
            .map(|(i, dy)| {
                let start = PixelPoint::new(10.0 * i as f64, 50.0);
                let end = PixelPoint::new(start.x + dx, start.y - dy);
                FeatureTrack::new(i as u32, vec![(0, start), (3, end)]).unwrap()
            })
            .collect()
    }

    #[test]
    fn pickup_examples() {
        let c = DetectorConfig {
            pickup_threshold: 30.0,
            ..cfg()
        };
        assert_eq!(pickup_detect(&lift_tracks(&[5.0; 10], 0.0), 0, &c).unwrap(), (true, 50.0));
        assert_eq!(pickup_detect(&lift_tracks(&[0.0; 10], 0.0), 0, &c).unwrap(), (false, 0.0));
        let mixed = [2.0, 2.0, 2.0, 2.0, -2.0, -2.0, -2.0, -2.0];
        assert_eq!(pickup_detect(&lift_tracks(&mixed, 0.0), 0, &c).unwrap(), (false, 0.0));
    }

    #[test]
    fn pickup_errors() {
        assert!(matches!(pickup_detect(&[], 0, &cfg()), Err(VisionError::EmptyTracks)));
        let t = lift_tracks(&[1.0], 0.0);
        assert!(matches!(
            pickup_detect(&t, 1, &cfg()),
            Err(VisionError::MissingTimestamp { point_id: 0, t: 1 })
        ));
        assert!(FeatureTrack::new(0, vec![]).is_err());
        let p = PixelPoint::new(0.0, 0.0);
        assert!(FeatureTrack::new(0, vec![(2, p), (2, p)]).is_err());
    }

    #[test]
    fn diff_examples() {
        let a = Frame::filled(4, 3, 0);
        assert!(frame_diff(&a, &a).unwrap().pixels().iter().all(|&p| p == 0));
        let b = Frame::filled(4, 3, 255);
        assert!(frame_diff(&a, &b).unwrap().pixels().iter().all(|&p| p == 255));
        let mut c = a.clone();
        c.set(2, 1, 40);
        let d = frame_diff(&a, &c).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(d.get(x, y) != 0, (x, y) == (2, 1));
            }
        }
        assert!(matches!(
            frame_diff(&a, &Frame::filled(3, 4, 0)),
            Err(VisionError::DimensionMismatch(..))
        ));
        assert!(Frame::new(2, 2, vec![0; 3]).is_err());
    }

    fn paint(f: &mut Frame, xs: std::ops::Range<usize>, ys: std::ops::Range<usize>, v: u8) {
        for y in ys {
            for x in xs.clone() {
                f.set(x, y, v);
            }
        }
    }

    #[test]
    fn region_of_square() {
        let mut d = Frame::filled(64, 64, 0);
        assert!(change_region(&d, &cfg()).is_none());
        paint(&mut d, 20..30, 40..50, 200);
        let r = change_region(&d, &cfg()).unwrap();
        assert_eq!(r.area, 100);
        assert_eq!(r.centroid, PixelPoint::new(24.5, 44.5));
        assert_eq!(r.bbox(), (20, 40, 29, 49));
    }

    #[test]
    fn largest_component_wins() {
        let mut d = Frame::filled(64, 64, 0);
        paint(&mut d, 2..5, 2..5, 255);
        paint(&mut d, 30..40, 30..40, 255);
        // diagonal neighbor is not 4-connected
        d.set(40, 40, 255);
        let r = change_region(&d, &cfg()).unwrap();
        assert_eq!(r.area, 100);
        assert_eq!(r.centroid, PixelPoint::new(34.5, 34.5));
    }

    #[test]
    fn threshold_is_strict() {
        let mut d = Frame::filled(8, 8, 0);
        d.set(1, 1, DEFAULT_DIFF_THRESHOLD);
        assert!(change_region(&d, &cfg()).is_none());
        d.set(1, 1, DEFAULT_DIFF_THRESHOLD + 1);
        assert_eq!(change_region(&d, &cfg()).unwrap().area, 1);
    }

    fn unit_pad() -> PadCorners {
        PadCorners::axis_aligned(0.0, 0.0, 100.0, 100.0)
    }

    #[test]
    fn grid_mapping_examples() {
        let pad = unit_pad();
        // top-left corner is the top row, which is y = n - 1 in pad cells
        assert_eq!(centroid_to_grid(PixelPoint::new(0.0, 0.0), &pad, 5).unwrap(), Cell::new(0, 4));
        assert_eq!(centroid_to_grid(PixelPoint::new(50.0, 50.0), &pad, 5).unwrap(), Cell::new(2, 2));
        assert_eq!(centroid_to_grid(PixelPoint::new(100.0, 0.0), &pad, 5).unwrap(), Cell::new(4, 4));
        assert_eq!(centroid_to_grid(PixelPoint::new(99.999, 99.999), &pad, 5).unwrap(), Cell::new(4, 0));
        assert!(matches!(
            centroid_to_grid(PixelPoint::new(101.0, 50.0), &pad, 5),
            Err(VisionError::CentroidOutside { .. })
        ));
        let flat = PadCorners::axis_aligned(0.0, 0.0, 0.0, 100.0);
        assert!(matches!(
            centroid_to_grid(PixelPoint::new(0.0, 50.0), &flat, 5),
            Err(VisionError::DegenerateCorners)
        ));
    }

    #[test]
    fn dropoff_examples() {
        let pad = unit_pad();
        let inside = ChangeRegion::from_pixels(vec![(50, 50)]);
        let outside = ChangeRegion::from_pixels(vec![(150, 50)]);
        assert!(dropoff_verify(2, 3, None, &pad));
        assert!(dropoff_verify(2, 3, Some(&outside), &pad));
        assert!(dropoff_verify(2, 2, Some(&inside), &pad));
        assert!(!dropoff_verify(2, 2, None, &pad));
        assert!(!dropoff_verify(2, 2, Some(&outside), &pad));
    }

    #[test]
    fn stack_examples() {
        let c = DetectorConfig {
            eps_d: 10.0,
            eps_a: 200.0,
            ..cfg()
        };
        let existing = [PixelPoint::new(0.0, 0.0), PixelPoint::new(40.0, 0.0)];
        let near = PixelPoint::new(3.0, 0.0);
        assert_eq!(classify_stack(near, &existing, 50.0, &c), StackClass::Stacked);
        assert_eq!(classify_stack(near, &existing, 500.0, &c), StackClass::PlacedBehind);
        assert_eq!(classify_stack(near, &[], 50.0, &c), StackClass::NewCell);
        assert_eq!(classify_stack(PixelPoint::new(20.0, 0.0), &existing, 50.0, &c), StackClass::NewCell);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = DetectorConfig { eps_a: 0.0, ..cfg() };
        assert!(matches!(bad.validate(), Err(VisionError::BadConfig("eps_a"))));
        assert_eq!(cfg().eps_d, 10.0);
        assert!((cfg().eps_a - 86.4).abs() < 1e-9);
    }

    fn rgb_with_blocks(blocks: &[(i64, i64)]) -> RgbFrame {
        let mut f = RgbFrame::filled(100, 100, [90, 90, 90]);
        for &(x, y) in blocks {
            f.fill_rect(x, y, x + 12, y + 12, [58, 181, 233]);
        }
        f
    }

    const WHOLE: PixelRect = PixelRect {
        x0: 0,
        y0: 0,
        x1: 100,
        y1: 100,
    };

    #[test]
    fn detector_counts_blocks() {
        assert!(detect_blocks(&rgb_with_blocks(&[]), &WHOLE).is_empty());
        let f = rgb_with_blocks(&[(5, 5), (40, 5), (5, 60)]);
        let d = detect_blocks(&f, &WHOLE);
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].bbox, PixelRect { x0: 5, y0: 5, x1: 17, y1: 17 });
        let left = PixelRect { x0: 0, y0: 0, x1: 30, y1: 100 };
        assert_eq!(detect_blocks(&f, &left).len(), 2);
    }

    #[test]
    fn tracker_keeps_ids() {
        let mut tr = BlockTracker::new(8.0);
        let first = tr.detect(&rgb_with_blocks(&[(5, 5), (40, 40)]), &WHOLE);
        // first block moves 5 px, a third block appears
        let second = tr.detect(&rgb_with_blocks(&[(10, 5), (40, 40), (70, 70)]), &WHOLE);
        let id_near = |dets: &[Detection], x: f64| dets.iter().find(|d| (d.centroid.x - x).abs() < 1.0).unwrap().id;
        assert_eq!(id_near(&first, 10.5), id_near(&second, 15.5));
        assert_eq!(id_near(&first, 45.5), id_near(&second, 45.5));
        assert_eq!(id_near(&second, 75.5), 2);
    }

    #[test]
    fn pnm_round_trip() {
        let mut g = Frame::filled(7, 5, 10);
        g.set(6, 4, 250);
        assert_eq!(Frame::from_pnm(&g.to_pgm().unwrap()).unwrap(), g);
        let c = rgb_with_blocks(&[(5, 5)]);
        let bytes = c.to_ppm().unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(RgbFrame::from_pnm(&bytes).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        g.save(&p).unwrap();
        assert_eq!(Frame::load(&p).unwrap(), g);
    }

    fn brute_components(d: &Frame, thr: u8) -> Vec<usize> {
        // label by repeated min-propagation until fixpoint
        let (w, h) = (d.width(), d.height());
        let mut label: Vec<Option<usize>> = (0..w * h)
            .map(|i| (d.pixels()[i] > thr).then_some(i))
            .collect();
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    let Some(l) = label[y * w + x] else { continue };
                    let mut m = l;
                    for (nx, ny) in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
                        if nx < w && ny < h {
                            if let Some(o) = label[ny * w + nx] {
                                m = m.min(o);
                            }
                        }
                    }
                    if m < l {
                        label[y * w + x] = Some(m);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut counts = std::collections::HashMap::new();
        for l in label.into_iter().flatten() {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        counts.into_values().collect()
    }

    proptest! {
        #[test]
        fn pickup_ignores_horizontal_motion(
            dys in prop::collection::vec(-10.0f64..10.0, 1..12),
            dx in -50.0f64..50.0,
            thr in 0.1f64..40.0,
        ) {
            let c = DetectorConfig { pickup_threshold: thr, ..cfg() };
            let still = pickup_detect(&lift_tracks(&dys, 0.0), 0, &c).unwrap();
            let moved = pickup_detect(&lift_tracks(&dys, dx), 0, &c).unwrap();
            prop_assert_eq!(still.0, moved.0);
        }

        #[test]
        fn region_is_consistent(pixels in prop::collection::vec(prop::sample::select(vec![0u8, 0, 0, 200]), 144)) {
            let d = Frame::new(12, 12, pixels).unwrap();
            match change_region(&d, &cfg()) {
                None => prop_assert!(d.pixels().iter().all(|&p| p <= DEFAULT_DIFF_THRESHOLD)),
                Some(r) => {
                    prop_assert_eq!(r.area, r.omega.len());
                    let (x0, y0, x1, y1) = r.bbox();
                    prop_assert!(r.centroid.x >= x0 as f64 && r.centroid.x <= x1 as f64);
                    prop_assert!(r.centroid.y >= y0 as f64 && r.centroid.y <= y1 as f64);
                    let largest = brute_components(&d, DEFAULT_DIFF_THRESHOLD).into_iter().max().unwrap();
                    prop_assert_eq!(r.area, largest);
                }
            }
        }

        #[test]
        fn classification_is_scale_consistent(
            nx in -30.0f64..30.0, ny in -30.0f64..30.0,
            ex in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 0..5),
            area in 1.0f64..400.0,
            eps_d in 1.0f64..20.0, eps_a in 1.0f64..300.0,
            k in 0.25f64..8.0,
        ) {
            let c = DetectorConfig { eps_d, eps_a, ..cfg() };
            let ck = DetectorConfig { eps_d: eps_d * k, eps_a: eps_a * k * k, ..cfg() };
            let pts: Vec<PixelPoint> = ex.iter().map(|&(x, y)| PixelPoint::new(x, y)).collect();
            let scaled: Vec<PixelPoint> = ex.iter().map(|&(x, y)| PixelPoint::new(x * k, y * k)).collect();
            let a = classify_stack(PixelPoint::new(nx, ny), &pts, area, &c);
            let b = classify_stack(PixelPoint::new(nx * k, ny * k), &scaled, area * k * k, &ck);
            // exact ties at the thresholds can flip under floating-point scaling
            let d = pts.iter().map(|p| p.distance(PixelPoint::new(nx, ny))).fold(f64::INFINITY, f64::min);
            prop_assume!((d - eps_d).abs() > 1e-6 && (area - eps_a).abs() > 1e-6);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn grid_mapping_matches_cell_bounds(cx in 0.0f64..100.0, cy in 0.0f64..100.0, n in 1usize..12) {
            let cell = centroid_to_grid(PixelPoint::new(cx, cy), &unit_pad(), n).unwrap();
            let pitch = 100.0 / n as f64;
            let row = n - 1 - cell.y;
            prop_assert!(cx >= cell.x as f64 * pitch - 1e-9 && cx < (cell.x + 1) as f64 * pitch + 1e-9);
            prop_assert!(cy >= row as f64 * pitch - 1e-9 && cy < (row + 1) as f64 * pitch + 1e-9);
        }
    }
}
