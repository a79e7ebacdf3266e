//! Unsupervised symbol segmentation.
//!
//! Turns a grayscale expression image into symbol blocks (30x30 patches of
//! connected ink components) and their normalized position vectors. Blocks
//! are features, not recognized symbols: an over-segmented glyph simply
//! yields more blocks.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Side length of a resized symbol block patch.
pub const BLOCK_SIZE: usize = 30;

/// 2-D grid of 8-bit intensities, row-major. 0 is black ink, 255 is paper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 1x1, got {}x{}",
                height, width
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "pixel count {} does not match {}x{}",
                pixels.len(),
                height,
                width
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {}", path.display(), e)))?
            .into_luma8();
        let (w, h) = img.dimensions();
        GrayImage::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer matches dimensions");
        buf.save(path)
            .map_err(|e| Error::InvalidInput(format!("cannot write {}: {}", path.display(), e)))?;
        Ok(())
    }
}

/// Per-pixel foreground flags, same shape as the source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }
}

/// Component extent in pixel coordinates, inclusive, measured from the
/// image's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.top + self.bottom) as f64 / 2.0,
            (self.left + self.right) as f64 / 2.0,
        )
    }
}

/// One connected component: its 30x30 resampled patch plus the raw box.
#[derive(Debug, Clone)]
pub struct SymbolBlock {
    /// Row-major 30x30 patch, intensities rescaled to [0,1].
    pub patch: Vec<Scalar>,
    pub bbox: BoundingBox,
    pub source_index: usize,
}

/// Normalized 5-entry block geometry: (top, bottom, left, right) scaled by
/// the per-image maxima, plus the bottom/right maximum ratio shared by all
/// blocks of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionVector {
    pub top: Scalar,
    pub bottom: Scalar,
    pub left: Scalar,
    pub right: Scalar,
    pub ratio: Scalar,
}

impl PositionVector {
    pub fn as_slice(&self) -> [Scalar; 5] {
        [self.top, self.bottom, self.left, self.right, self.ratio]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// How to resample a cropped component down to the 30x30 patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    NearestNeighbor,
    Bilinear,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentationConfig {
    /// Pixels strictly darker than this are foreground ink.
    pub threshold: u8,
    pub connectivity: Connectivity,
    /// Components smaller than this many pixels are dropped as noise.
    pub min_component_area: usize,
    pub resampling: Resampling,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            threshold: 160,
            connectivity: Connectivity::Eight,
            min_component_area: 2,
            resampling: Resampling::NearestNeighbor,
        }
    }
}

impl SegmentationConfig {
    pub fn with_threshold(threshold: u8) -> Self {
        SegmentationConfig {
            threshold,
            ..Default::default()
        }
    }
}

/// Marks a pixel as foreground iff its intensity is strictly below the
/// threshold (ink is darker than paper).
pub fn binarize(img: &GrayImage, threshold: u8) -> BinaryMask {
    BinaryMask {
        height: img.height,
        width: img.width,
        bits: img.pixels.iter().map(|&p| p < threshold).collect(),
    }
}

/// Labels connected foreground components with BFS region growing.
/// Returns per-pixel labels (0 = background, components numbered from 1 in
/// scan order) and the component count.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();

    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            let visit = |rr: usize, cc: usize, labels: &mut Vec<u32>, queue: &mut VecDeque<usize>| {
                let j = rr * w + cc;
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(r - 1, c, &mut labels, &mut queue);
            }
            if r + 1 < h {
                visit(r + 1, c, &mut labels, &mut queue);
            }
            if c > 0 {
                visit(r, c - 1, &mut labels, &mut queue);
            }
            if c + 1 < w {
                visit(r, c + 1, &mut labels, &mut queue);
            }
            if connectivity == Connectivity::Eight {
                if r > 0 && c > 0 {
                    visit(r - 1, c - 1, &mut labels, &mut queue);
                }
                if r > 0 && c + 1 < w {
                    visit(r - 1, c + 1, &mut labels, &mut queue);
                }
                if r + 1 < h && c > 0 {
                    visit(r + 1, c - 1, &mut labels, &mut queue);
                }
                if r + 1 < h && c + 1 < w {
                    visit(r + 1, c + 1, &mut labels, &mut queue);
                }
            }
        }
    }
    (labels, next as usize)
}

/// Finds one bounding box per connected foreground component with area at
/// least `cfg.min_component_area`, sorted by (left, top) ascending.
pub fn connected_components(mask: &BinaryMask, cfg: &SegmentationConfig) -> Vec<BoundingBox> {
    let (labels, count) = label_components(mask, cfg.connectivity);
    if count == 0 {
        return Vec::new();
    }
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; count];
    let mut areas = vec![0usize; count];
    for (idx, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let k = (label - 1) as usize;
        let (r, c) = (idx / mask.width, idx % mask.width);
        areas[k] += 1;
        boxes[k] = Some(match boxes[k] {
            None => BoundingBox {
                top: r,
                bottom: r,
                left: c,
                right: c,
            },
            Some(b) => BoundingBox {
                top: b.top.min(r),
                bottom: b.bottom.max(r),
                left: b.left.min(c),
                right: b.right.max(c),
            },
        });
    }
    let mut out: Vec<BoundingBox> = boxes
        .into_iter()
        .zip(areas)
        .filter(|(_, area)| *area >= cfg.min_component_area)
        .filter_map(|(b, _)| b)
        .collect();
    out.sort_by_key(|b| (b.left, b.top));
    out
}

/// Crops each box and resamples it (without preserving aspect ratio) to a
/// 30x30 patch with intensities rescaled into [0,1].
pub fn extract_blocks(img: &GrayImage, boxes: &[BoundingBox]) -> Result<Vec<SymbolBlock>> {
    let mut blocks = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        if b.bottom >= img.height || b.right >= img.width || b.top > b.bottom || b.left > b.right {
            return Err(Error::BoxOutOfBounds(
                format!("{:?}", b),
                img.height,
                img.width,
            ));
        }
        blocks.push(SymbolBlock {
            patch: resample_patch(img, b, Resampling::NearestNeighbor),
            bbox: *b,
            source_index: i,
        });
    }
    Ok(blocks)
}

fn resample_patch(img: &GrayImage, b: &BoundingBox, method: Resampling) -> Vec<Scalar> {
    let (bh, bw) = (b.height(), b.width());
    let mut patch = vec![0.0 as Scalar; BLOCK_SIZE * BLOCK_SIZE];
    for r in 0..BLOCK_SIZE {
        for c in 0..BLOCK_SIZE {
            let v = match method {
                Resampling::NearestNeighbor => {
                    // Pixel-center mapping: src = floor((dst + 0.5) * src/dst).
                    let sr = ((r as f64 + 0.5) * bh as f64 / BLOCK_SIZE as f64) as usize;
                    let sc = ((c as f64 + 0.5) * bw as f64 / BLOCK_SIZE as f64) as usize;
                    img.get(b.top + sr.min(bh - 1), b.left + sc.min(bw - 1)) as f64
                }
                Resampling::Bilinear => {
                    let fy = ((r as f64 + 0.5) * bh as f64 / BLOCK_SIZE as f64 - 0.5)
                        .clamp(0.0, (bh - 1) as f64);
                    let fx = ((c as f64 + 0.5) * bw as f64 / BLOCK_SIZE as f64 - 0.5)
                        .clamp(0.0, (bw - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(bh - 1), (x0 + 1).min(bw - 1));
                    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                    let p = |yy: usize, xx: usize| img.get(b.top + yy, b.left + xx) as f64;
                    p(y0, x0) * (1.0 - dy) * (1.0 - dx)
                        + p(y0, x1) * (1.0 - dy) * dx
                        + p(y1, x0) * dy * (1.0 - dx)
                        + p(y1, x1) * dy * dx
                }
            };
            patch[r * BLOCK_SIZE + c] = (v / 255.0) as Scalar;
        }
    }
    patch
}

/// Normalizes each box relative to the image's maximal bottom and right
/// coordinates: (t/d_max, d/d_max, l/r_max, r/r_max, d_max/r_max).
pub fn position_vectors(boxes: &[BoundingBox]) -> Result<Vec<PositionVector>> {
    if boxes.is_empty() {
        return Err(Error::InvalidInput("position_vectors on empty box list".into()));
    }
    let d_max = boxes.iter().map(|b| b.bottom).max().unwrap();
    let r_max = boxes.iter().map(|b| b.right).max().unwrap();
    if d_max == 0 || r_max == 0 {
        return Err(Error::DegenerateGeometry(format!(
            "d_max={} r_max={}",
            d_max, r_max
        )));
    }
    let (dm, rm) = (d_max as Scalar, r_max as Scalar);
    Ok(boxes
        .iter()
        .map(|b| PositionVector {
            top: b.top as Scalar / dm,
            bottom: b.bottom as Scalar / dm,
            left: b.left as Scalar / rm,
            right: b.right as Scalar / rm,
            ratio: dm / rm,
        })
        .collect())
}

/// Full segmentation: binarize, find components, cut blocks, normalize
/// geometry. Blocks and vectors are paired index-wise.
pub fn segment(
    img: &GrayImage,
    cfg: &SegmentationConfig,
) -> Result<(Vec<SymbolBlock>, Vec<PositionVector>)> {
    let mask = binarize(img, cfg.threshold);
    let boxes = connected_components(&mask, cfg);
    if boxes.is_empty() {
        return Err(Error::EmptyExpression);
    }
    let mut blocks = extract_blocks(img, &boxes)?;
    if cfg.resampling == Resampling::Bilinear {
        for block in &mut blocks {
            block.patch = resample_patch(img, &block.bbox, Resampling::Bilinear);
        }
    }
    let vectors = position_vectors(&boxes)?;
    Ok((blocks, vectors))
}

/// Writes one PNG per block plus a sidecar text file with the raw and
/// normalized position entries, one line per block:
/// `index top bottom left right t d l r ro` (normalized entries at 6 dp).
pub fn write_debug_output(
    dir: &Path,
    stem: &str,
    blocks: &[SymbolBlock],
    vectors: &[PositionVector],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut sidecar = String::new();
    for (block, vector) in blocks.iter().zip(vectors) {
        let pixels: Vec<u8> = block
            .patch
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let patch_img = GrayImage::new(BLOCK_SIZE, BLOCK_SIZE, pixels)?;
        patch_img.save_png(&dir.join(format!("{}_block{:03}.png", stem, block.source_index)))?;
        let b = block.bbox;
        writeln!(
            sidecar,
            "{} {} {} {} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            block.source_index,
            b.top,
            b.bottom,
            b.left,
            b.right,
            vector.top,
            vector.bottom,
            vector.left,
            vector.right,
            vector.ratio
        )
        .expect("write to string");
    }
    std::fs::write(dir.join(format!("{}_positions.txt", stem)), sidecar)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from_rows(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask {
            height: rows.len(),
            width: rows[0].len(),
            bits: rows.iter().flat_map(|r| r.iter().map(|&v| v != 0)).collect(),
        }
    }

    /// Independent oracle: plain recursive-style flood fill over all pixels.
    fn flood_fill_oracle(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
        let (h, w) = (mask.height, mask.width);
        let mut labels = vec![0u32; h * w];
        let mut next = 0u32;
        for start in 0..h * w {
            if !mask.bits[start] || labels[start] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            while let Some(idx) = stack.pop() {
                if labels[idx] != 0 {
                    continue;
                }
                labels[idx] = next;
                let (r, c) = (idx as isize / w as isize, idx as isize % w as isize);
                let offsets: &[(isize, isize)] = match connectivity {
                    Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
                    Connectivity::Eight => &[
                        (-1, 0),
                        (1, 0),
                        (0, -1),
                        (0, 1),
                        (-1, -1),
                        (-1, 1),
                        (1, -1),
                        (1, 1),
                    ],
                };
                for &(dr, dc) in offsets {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                        let j = (rr * w as isize + cc) as usize;
                        if mask.bits[j] && labels[j] == 0 {
                            stack.push(j);
                        }
                    }
                }
            }
        }
        (labels, next as usize)
    }

    /// Same partition up to relabeling: pixel pairs agree on same-component.
    fn partitions_equal(a: &[u32], b: &[u32]) -> bool {
        if a.len() != b.len() {
            return false;
        }
        let mut fwd = std::collections::HashMap::new();
        let mut bwd = std::collections::HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if (x == 0) != (y == 0) {
                return false;
            }
            if x == 0 {
                continue;
            }
            if *fwd.entry(x).or_insert(y) != y || *bwd.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    #[test]
    fn binarize_trivial_cases() {
        let blank = GrayImage::filled(2, 3, 255);
        assert!(binarize(&blank, 160).bits.iter().all(|&b| !b));
        let ink = GrayImage::filled(2, 3, 0);
        assert!(binarize(&ink, 160).bits.iter().all(|&b| b));
        // Strict inequality at the threshold boundary.
        let edge = GrayImage::new(1, 2, vec![159, 160]).unwrap();
        let mask = binarize(&edge, 160);
        assert!(mask.get(0, 0));
        assert!(!mask.get(0, 1));
    }

    #[test]
    fn components_empty_mask() {
        let mask = mask_from_rows(&[&[0, 0], &[0, 0]]);
        assert!(connected_components(&mask, &SegmentationConfig::default()).is_empty());
    }

    #[test]
    fn components_two_disjoint_squares() {
        let mask = mask_from_rows(&[
            &[1, 1, 1, 0, 0, 0, 0, 0],
            &[1, 1, 1, 0, 0, 1, 1, 1],
            &[1, 1, 1, 0, 0, 1, 1, 1],
            &[0, 0, 0, 0, 0, 1, 1, 1],
        ]);
        let boxes = connected_components(&mask, &SegmentationConfig::default());
        assert_eq!(boxes.len(), 2);
        assert_eq!(
            boxes[0],
            BoundingBox {
                top: 0,
                bottom: 2,
                left: 0,
                right: 2
            }
        );
        assert_eq!(
            boxes[1],
            BoundingBox {
                top: 1,
                bottom: 3,
                left: 5,
                right: 7
            }
        );
    }

    #[test]
    fn connectivity_matters_for_diagonal_touch() {
        // Two pixels touching only diagonally.
        let mask = mask_from_rows(&[&[1, 0], &[0, 1]]);
        let mut cfg = SegmentationConfig::default();
        cfg.min_component_area = 1;
        cfg.connectivity = Connectivity::Eight;
        assert_eq!(connected_components(&mask, &cfg).len(), 1);
        cfg.connectivity = Connectivity::Four;
        assert_eq!(connected_components(&mask, &cfg).len(), 2);
    }

    #[test]
    fn min_area_drops_specks() {
        let mask = mask_from_rows(&[&[1, 0, 0, 1], &[0, 0, 0, 1]]);
        let cfg = SegmentationConfig::default(); // min area 2
        let boxes = connected_components(&mask, &cfg);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].left, 3);
    }

    #[test]
    fn labeling_agrees_with_flood_fill_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let h = rng.gen_range(1..=32);
            let w = rng.gen_range(1..=32);
            let density: f64 = rng.gen_range(0.1..0.9);
            let mask = BinaryMask {
                height: h,
                width: w,
                bits: (0..h * w).map(|_| rng.gen_bool(density)).collect(),
            };
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let (got, got_count) = label_components(&mask, conn);
                let (want, want_count) = flood_fill_oracle(&mask, conn);
                assert_eq!(got_count, want_count);
                assert!(partitions_equal(&got, &want));
            }
        }
    }

    #[test]
    fn touching_digits_split_by_threshold() {
        // A bridge of medium-gray pixels joins two dark strokes; a low
        // threshold drops the bridge, a high threshold keeps it.
        let mut img = GrayImage::filled(5, 9, 255);
        for r in 0..5 {
            img.set(r, 1, 30);
            img.set(r, 7, 30);
        }
        img.set(2, 2, 170);
        img.set(2, 3, 170);
        img.set(2, 4, 170);
        img.set(2, 5, 170);
        img.set(2, 6, 170);
        let cfg_low = SegmentationConfig::with_threshold(160);
        let cfg_high = SegmentationConfig::with_threshold(200);
        let low = connected_components(&binarize(&img, 160), &cfg_low);
        let high = connected_components(&binarize(&img, 200), &cfg_high);
        assert_eq!(low.len(), 2);
        assert_eq!(high.len(), 1);
        // Cross-check both against the oracle.
        for (threshold, conn) in [(160u8, Connectivity::Eight), (200u8, Connectivity::Eight)] {
            let mask = binarize(&img, threshold);
            let (_, count) = flood_fill_oracle(&mask, conn);
            let boxes = connected_components(&mask, &SegmentationConfig::with_threshold(threshold));
            assert_eq!(boxes.len(), count);
        }
    }

    #[test]
    fn extract_identity_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = GrayImage::filled(BLOCK_SIZE, BLOCK_SIZE, 0);
        for p in img.pixels.iter_mut() {
            *p = rng.gen();
        }
        let b = BoundingBox {
            top: 0,
            bottom: BLOCK_SIZE - 1,
            left: 0,
            right: BLOCK_SIZE - 1,
        };
        let blocks = extract_blocks(&img, &[b]).unwrap();
        for r in 0..BLOCK_SIZE {
            for c in 0..BLOCK_SIZE {
                let expect = img.get(r, c) as Scalar / 255.0;
                assert_eq!(blocks[0].patch[r * BLOCK_SIZE + c], expect);
            }
        }
    }

    #[test]
    fn extract_constant_downscale() {
        let img = GrayImage::filled(60, 60, 120);
        let b = BoundingBox {
            top: 0,
            bottom: 59,
            left: 0,
            right: 59,
        };
        let blocks = extract_blocks(&img, &[b]).unwrap();
        assert!(blocks[0]
            .patch
            .iter()
            .all(|&v| (v - 120.0 as Scalar / 255.0).abs() < 1e-12));
    }

    #[test]
    fn extract_matches_index_mapping_oracle() {
        // 15x45 crop of a vertical bar, checked against an independent
        // per-pixel nearest-neighbor index computation.
        let mut img = GrayImage::filled(20, 50, 255);
        for r in 2..17 {
            for c in 20..25 {
                img.set(r, c, 10);
            }
        }
        let b = BoundingBox {
            top: 2,
            bottom: 16,
            left: 3,
            right: 47,
        };
        let blocks = extract_blocks(&img, &[b]).unwrap();
        let (bh, bw) = (15usize, 45usize);
        for r in 0..BLOCK_SIZE {
            for c in 0..BLOCK_SIZE {
                let sr = (((r as f64 + 0.5) * bh as f64) / 30.0).floor() as usize;
                let sc = (((c as f64 + 0.5) * bw as f64) / 30.0).floor() as usize;
                let expect = img.get(2 + sr, 3 + sc) as Scalar / 255.0;
                assert_eq!(blocks[0].patch[r * BLOCK_SIZE + c], expect, "at {},{}", r, c);
            }
        }
    }

    #[test]
    fn bilinear_resampling_preserves_constants_and_identity() {
        let img = GrayImage::filled(60, 45, 120);
        let b = BoundingBox {
            top: 0,
            bottom: 59,
            left: 0,
            right: 44,
        };
        let patch = resample_patch(&img, &b, Resampling::Bilinear);
        assert!(patch
            .iter()
            .all(|&v| (v - 120.0 as Scalar / 255.0).abs() < 1e-12));

        // Identity-size crop: bilinear hits pixel centers exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut img = GrayImage::filled(BLOCK_SIZE, BLOCK_SIZE, 0);
        for p in img.pixels.iter_mut() {
            *p = rng.gen();
        }
        let b = BoundingBox {
            top: 0,
            bottom: BLOCK_SIZE - 1,
            left: 0,
            right: BLOCK_SIZE - 1,
        };
        let patch = resample_patch(&img, &b, Resampling::Bilinear);
        for r in 0..BLOCK_SIZE {
            for c in 0..BLOCK_SIZE {
                let expect = img.get(r, c) as Scalar / 255.0;
                assert!((patch[r * BLOCK_SIZE + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_bilinear_config_changes_patches_not_boxes() {
        let mut img = GrayImage::filled(20, 20, 255);
        for r in 3..17 {
            for c in 5..12 {
                img.set(r, c, (10 + r * 7) as u8);
            }
        }
        let nn_cfg = SegmentationConfig::default();
        let mut bl_cfg = SegmentationConfig::default();
        bl_cfg.resampling = Resampling::Bilinear;
        let (a, va) = segment(&img, &nn_cfg).unwrap();
        let (b, vb) = segment(&img, &bl_cfg).unwrap();
        assert_eq!(a[0].bbox, b[0].bbox);
        assert_eq!(va, vb);
        assert_ne!(a[0].patch, b[0].patch);
    }

    #[test]
    fn extract_rejects_out_of_bounds() {
        let img = GrayImage::filled(10, 10, 0);
        let b = BoundingBox {
            top: 0,
            bottom: 10,
            left: 0,
            right: 5,
        };
        assert!(matches!(
            extract_blocks(&img, &[b]),
            Err(Error::BoxOutOfBounds(..))
        ));
    }

    #[test]
    fn position_vector_single_box() {
        let b = BoundingBox {
            top: 0,
            bottom: 50,
            left: 0,
            right: 100,
        };
        let v = position_vectors(&[b]).unwrap();
        assert_eq!(v[0].as_slice(), [0.0, 1.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn position_vector_hand_case() {
        let boxes = [
            BoundingBox {
                top: 10,
                bottom: 40,
                left: 20,
                right: 60,
            },
            BoundingBox {
                top: 0,
                bottom: 50,
                left: 0,
                right: 100,
            },
        ];
        // d_max = 50, r_max = 100.
        let v = position_vectors(&boxes).unwrap();
        assert_eq!(v[0].as_slice(), [0.2, 0.8, 0.2, 0.6, 0.5]);
        assert_eq!(v[1].as_slice(), [0.0, 1.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn position_vector_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let boxes: Vec<BoundingBox> = (0..n)
                .map(|_| {
                    let top = rng.gen_range(0..40usize);
                    let left = rng.gen_range(0..40usize);
                    BoundingBox {
                        top,
                        bottom: top + rng.gen_range(1..20usize),
                        left,
                        right: left + rng.gen_range(1..20usize),
                    }
                })
                .collect();
            let k = rng.gen_range(2..7usize);
            let scaled: Vec<BoundingBox> = boxes
                .iter()
                .map(|b| BoundingBox {
                    top: b.top * k,
                    bottom: b.bottom * k,
                    left: b.left * k,
                    right: b.right * k,
                })
                .collect();
            let a = position_vectors(&boxes).unwrap();
            let b = position_vectors(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                    let rel = (u - v).abs() / u.abs().max(1.0);
                    assert!(rel <= 1e-12, "{} vs {}", u, v);
                }
            }
        }
    }

    #[test]
    fn position_vector_translation_sensitivity() {
        let base = [
            BoundingBox {
                top: 5,
                bottom: 15,
                left: 5,
                right: 25,
            },
            BoundingBox {
                top: 0,
                bottom: 20,
                left: 30,
                right: 50,
            },
        ];
        let shifted: Vec<BoundingBox> = base
            .iter()
            .map(|b| BoundingBox {
                top: b.top + 10,
                bottom: b.bottom + 10,
                left: b.left,
                right: b.right,
            })
            .collect();
        let a = position_vectors(&base).unwrap();
        let b = position_vectors(&shifted).unwrap();
        assert_ne!(a[0].top, b[0].top);
    }

    #[test]
    fn position_vector_degenerate_geometry() {
        let b = BoundingBox {
            top: 0,
            bottom: 0,
            left: 0,
            right: 5,
        };
        assert!(matches!(
            position_vectors(&[b]),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn segment_blank_image_is_error() {
        let img = GrayImage::filled(10, 10, 255);
        assert!(matches!(
            segment(&img, &SegmentationConfig::default()),
            Err(Error::EmptyExpression)
        ));
    }

    #[test]
    fn segment_is_deterministic_and_left_sorted() {
        let mut img = GrayImage::filled(12, 30, 255);
        // Three separate 3x3 ink squares, placed out of order.
        for (r0, c0) in [(2usize, 20usize), (5, 2), (8, 11)] {
            for r in r0..r0 + 3 {
                for c in c0..c0 + 3 {
                    img.set(r, c, 0);
                }
            }
        }
        let cfg = SegmentationConfig::default();
        let (blocks, vectors) = segment(&img, &cfg).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(vectors.len(), 3);
        assert_eq!(blocks[0].bbox.left, 2);
        assert_eq!(blocks[1].bbox.left, 11);
        assert_eq!(blocks[2].bbox.left, 20);
        let (blocks2, _) = segment(&img, &cfg).unwrap();
        for (a, b) in blocks.iter().zip(&blocks2) {
            assert_eq!(a.patch, b.patch);
            assert_eq!(a.bbox, b.bbox);
        }
    }
}
