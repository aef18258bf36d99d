//! Visual token geometry and tiling into gaze regions.
//!
//! A [`TokenVolume`] is a `T × H × W` grid of visual tokens placed in the KV
//! sequence starting at `sequence_offset`. Frames are stored one after
//! another; `frame_gap` extra positions may sit between consecutive frames
//! (the per-frame context tokens in the prefill layout). With `frame_gap = 0`
//! the flat index is `offset + t·H·W + h·W + w`.

use std::ops::Range;

use crate::error::{GazeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sequence_offset: usize,
    pub frame_gap: usize,
}

impl TokenVolume {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(GazeError::Layout(format!(
                "token volume {frames}x{height}x{width} has an empty dimension"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            sequence_offset: 0,
            frame_gap: 0,
        })
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.sequence_offset = offset;
        self
    }

    pub fn with_frame_gap(mut self, gap: usize) -> Self {
        self.frame_gap = gap;
        self
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn visual_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    fn frame_stride(&self) -> usize {
        self.tokens_per_frame() + self.frame_gap
    }

    /// First sequence position of frame `t`.
    pub fn frame_start(&self, t: usize) -> usize {
        self.sequence_offset + t * self.frame_stride()
    }

    /// Sequence span from the first to one past the last visual token.
    pub fn span(&self) -> Range<usize> {
        let end = self.frame_start(self.frames - 1) + self.tokens_per_frame();
        self.sequence_offset..end
    }

    pub fn flat_index(&self, t: usize, h: usize, w: usize) -> Result<usize> {
        if t >= self.frames {
            return Err(GazeError::Index { context: "frame", index: t, len: self.frames });
        }
        if h >= self.height {
            return Err(GazeError::Index { context: "row", index: h, len: self.height });
        }
        if w >= self.width {
            return Err(GazeError::Index { context: "column", index: w, len: self.width });
        }
        Ok(self.frame_start(t) + h * self.width + w)
    }

    /// Inverse of [`flat_index`](Self::flat_index); `None` for positions that
    /// are not visual tokens of this volume.
    pub fn coords(&self, position: usize) -> Option<(usize, usize, usize)> {
        let rel = position.checked_sub(self.sequence_offset)?;
        let t = rel / self.frame_stride();
        let within = rel % self.frame_stride();
        if t >= self.frames || within >= self.tokens_per_frame() {
            return None;
        }
        Some((t, within / self.width, within % self.width))
    }
}

/// Block extents `r_t × r_h × r_w` of a gaze region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockExtents {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl BlockExtents {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub id: usize,
    /// Frames covered by the region.
    pub unit_span: Range<usize>,
    /// Sorted, duplicate-free sequence positions.
    pub token_indices: Vec<usize>,
    /// Realised extents; smaller than requested on ragged edges.
    pub extents: BlockExtents,
}

impl Region {
    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }
}

/// Number of regions [`tile_regions`] produces.
pub fn region_count(volume: &TokenVolume, block: BlockExtents) -> usize {
    volume.frames.div_ceil(block.t) * volume.height.div_ceil(block.h) * volume.width.div_ceil(block.w)
}

/// Partition a volume into blocks, enumerated t-major, then h, then w.
/// Blocks that overhang an edge are clipped rather than padded.
pub fn tile_regions(volume: &TokenVolume, block: BlockExtents) -> Result<Vec<Region>> {
    if block.t == 0 || block.h == 0 || block.w == 0 {
        return Err(GazeError::Layout(format!(
            "block extents {}x{}x{} must be positive",
            block.t, block.h, block.w
        )));
    }
    let mut regions = Vec::with_capacity(region_count(volume, block));
    for t0 in (0..volume.frames).step_by(block.t) {
        let t1 = (t0 + block.t).min(volume.frames);
        for h0 in (0..volume.height).step_by(block.h) {
            let h1 = (h0 + block.h).min(volume.height);
            for w0 in (0..volume.width).step_by(block.w) {
                let w1 = (w0 + block.w).min(volume.width);
                let mut token_indices = Vec::with_capacity((t1 - t0) * (h1 - h0) * (w1 - w0));
                // t, then h, then w yields ascending positions
                for t in t0..t1 {
                    for h in h0..h1 {
                        let row = volume.frame_start(t) + h * volume.width;
                        token_indices.extend(row + w0..row + w1);
                    }
                }
                regions.push(Region {
                    id: regions.len(),
                    unit_span: t0..t1,
                    token_indices,
                    extents: BlockExtents::new(t1 - t0, h1 - h0, w1 - w0),
                });
            }
        }
    }
    Ok(regions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grid_gives_sixteen_regions_of_36() {
        let v = TokenVolume::new(1, 24, 24).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(1, 6, 6)).unwrap();
        assert_eq!(regions.len(), 16);
        assert!(regions.iter().all(|r| r.len() == 36));
    }

    #[test]
    fn full_block_is_one_region() {
        let v = TokenVolume::new(3, 4, 5).unwrap().with_offset(10);
        let regions = tile_regions(&v, BlockExtents::new(3, 4, 5)).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].token_indices, (10..70).collect::<Vec<_>>());
    }

    #[test]
    fn ragged_five_by_five() {
        let v = TokenVolume::new(1, 5, 5).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(1, 2, 2)).unwrap();
        let sizes: Vec<usize> = regions.iter().map(Region::len).collect();
        assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2, 2, 2, 1]);
        // hand enumeration: region 2 is column 4 of rows 0-1, region 8 is (4,4)
        assert_eq!(regions[2].token_indices, vec![4, 9]);
        assert_eq!(regions[6].token_indices, vec![20, 21]);
        assert_eq!(regions[8].token_indices, vec![24]);
        assert_eq!(regions[8].extents, BlockExtents::new(1, 1, 1));
    }

    #[test]
    fn flat_index_examples() {
        let v = TokenVolume::new(1, 2, 2).unwrap().with_offset(7);
        assert_eq!(v.flat_index(0, 0, 0).unwrap(), 7);
        let v = TokenVolume::new(2, 3, 4).unwrap();
        assert_eq!(v.flat_index(1, 2, 3).unwrap(), 23);
        assert!(matches!(v.flat_index(2, 0, 0), Err(GazeError::Index { .. })));
        assert!(v.flat_index(0, 3, 0).is_err());
        assert!(v.flat_index(0, 0, 4).is_err());
    }

    #[test]
    fn flat_index_round_trip_exhaustive() {
        for gap in [0, 3] {
            let v = TokenVolume::new(2, 3, 4).unwrap().with_offset(5).with_frame_gap(gap);
            let mut seen = std::collections::BTreeSet::new();
            for t in 0..2 {
                for h in 0..3 {
                    for w in 0..4 {
                        let p = v.flat_index(t, h, w).unwrap();
                        assert_eq!(v.coords(p), Some((t, h, w)));
                        assert!(seen.insert(p));
                    }
                }
            }
            assert_eq!(seen.len(), 24);
        }
        let v = TokenVolume::new(2, 3, 4).unwrap().with_frame_gap(3);
        assert_eq!(v.coords(12), None);
        assert_eq!(v.coords(15), Some((1, 0, 0)));
    }

    #[test]
    fn multi_frame_region_records_span() {
        let v = TokenVolume::new(3, 2, 2).unwrap();
        let regions = tile_regions(&v, BlockExtents::new(2, 2, 2)).unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].unit_span, 0..2);
        assert_eq!(regions[1].unit_span, 2..3);
        assert_eq!(regions[1].extents.t, 1);
    }

    #[test]
    fn zero_block_rejected() {
        let v = TokenVolume::new(1, 2, 2).unwrap();
        assert!(tile_regions(&v, BlockExtents::new(1, 0, 1)).is_err());
        assert!(TokenVolume::new(0, 1, 1).is_err());
    }
}
