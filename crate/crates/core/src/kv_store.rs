//! Per-layer, per-head KV cache, region descriptors and the two-tier
//! residency model used for transfer accounting.
//!
//! The cache is append-only. Nothing is evicted: a region skipped at one
//! decoding step is still available to the next one.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{check_len, GazeError, Result};
use crate::layout::Region;
use crate::numerics::{axpy, Matrix, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Text,
    Visual,
    Context,
}

impl Segment {
    pub(crate) fn code(self) -> u8 {
        match self {
            Segment::Text => 0,
            Segment::Visual => 1,
            Segment::Context => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Segment::Text),
            1 => Some(Segment::Visual),
            2 => Some(Segment::Context),
            _ => None,
        }
    }
}

/// Keys and values of one attention head in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHeadCache {
    layer: usize,
    head: usize,
    dim: usize,
    precision: Precision,
    keys: Vec<f64>,
    values: Vec<f64>,
    segments: Vec<Segment>,
    unit_ids: Vec<Option<u32>>,
}

impl LayerHeadCache {
    pub fn new(layer: usize, head: usize, dim: usize) -> Self {
        Self::with_precision(layer, head, dim, Precision::default())
    }

    pub fn with_precision(layer: usize, head: usize, dim: usize, precision: Precision) -> Self {
        Self {
            layer,
            head,
            dim,
            precision,
            keys: Vec::new(),
            values: Vec::new(),
            segments: Vec::new(),
            unit_ids: Vec::new(),
        }
    }

    /// Append rows; returns the positions they occupy.
    ///
    /// Visual and context rows must carry a unit id, text rows must not.
    pub fn append_kv(
        &mut self,
        keys: &Matrix,
        values: &Matrix,
        segment: Segment,
        unit_id: Option<usize>,
    ) -> Result<Range<usize>> {
        check_len("append_kv key width", self.dim, keys.cols())?;
        check_len("append_kv value width", self.dim, values.cols())?;
        check_len("append_kv row count", keys.rows(), values.rows())?;
        match (segment, unit_id) {
            (Segment::Text, Some(_)) => {
                return Err(GazeError::Contract("text rows carry no unit id".into()))
            }
            (Segment::Visual | Segment::Context, None) => {
                return Err(GazeError::Contract(format!("{segment:?} rows need a unit id")))
            }
            _ => {}
        }
        if !keys.is_finite() || !values.is_finite() {
            return Err(GazeError::Numeric("append_kv rows".into()));
        }
        let unit = unit_id
            .map(|u| u32::try_from(u).map_err(|_| GazeError::Contract("unit id too large".into())))
            .transpose()?;
        let start = self.len();
        let p = self.precision;
        self.keys.extend(keys.as_slice().iter().map(|&x| p.store(x)));
        self.values.extend(values.as_slice().iter().map(|&x| p.store(x)));
        self.segments.extend(std::iter::repeat_n(segment, keys.rows()));
        self.unit_ids.extend(std::iter::repeat_n(unit, keys.rows()));
        Ok(start..self.len())
    }

    /// Append a single key/value pair.
    pub fn append_row(
        &mut self,
        key: &[f64],
        value: &[f64],
        segment: Segment,
        unit_id: Option<usize>,
    ) -> Result<usize> {
        let k = Matrix::from_vec(1, key.len(), key.to_vec())?;
        let v = Matrix::from_vec(1, value.len(), value.to_vec())?;
        Ok(self.append_kv(&k, &v, segment, unit_id)?.start)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    #[inline]
    pub fn key(&self, pos: usize) -> &[f64] {
        &self.keys[pos * self.dim..(pos + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn segment(&self, pos: usize) -> Segment {
        self.segments[pos]
    }

    pub fn unit_id(&self, pos: usize) -> Option<usize> {
        self.unit_ids[pos].map(|u| u as usize)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn keys_flat(&self) -> &[f64] {
        &self.keys
    }

    pub fn values_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn positions(&self, segment: Segment) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == segment)
            .map(|(i, _)| i)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        layer: usize,
        head: usize,
        dim: usize,
        precision: Precision,
        keys: Vec<f64>,
        values: Vec<f64>,
        segments: Vec<Segment>,
        unit_ids: Vec<Option<u32>>,
    ) -> Result<Self> {
        let n = segments.len();
        check_len("snapshot keys", n * dim, keys.len())?;
        check_len("snapshot values", n * dim, values.len())?;
        check_len("snapshot unit ids", n, unit_ids.len())?;
        Ok(Self {
            layer,
            head,
            dim,
            precision,
            keys,
            values,
            segments,
            unit_ids,
        })
    }

    pub(crate) fn raw_unit_ids(&self) -> &[Option<u32>] {
        &self.unit_ids
    }
}

/// Regions of one layer-head together with their mean-pooled key descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    layer: usize,
    head: usize,
    regions: Vec<Region>,
    descriptors: Matrix,
    dirty: Vec<bool>,
}

/// Build the region table for `cache`, computing every descriptor.
pub fn refresh_descriptors(cache: &LayerHeadCache, regions: &[Region]) -> Result<RegionTable> {
    let mut table = RegionTable {
        layer: cache.layer(),
        head: cache.head(),
        regions: regions.to_vec(),
        descriptors: Matrix::zeros(regions.len(), cache.dim()),
        dirty: vec![true; regions.len()],
    };
    table.refresh(cache)?;
    Ok(table)
}

impl RegionTable {
    /// Recompute descriptors of dirty regions from the current keys.
    pub fn refresh(&mut self, cache: &LayerHeadCache) -> Result<()> {
        check_len("RegionTable::refresh key dim", self.descriptors.cols(), cache.dim())?;
        for g in 0..self.regions.len() {
            if !self.dirty[g] {
                continue;
            }
            let mean = region_mean(cache, &self.regions[g])?;
            self.descriptors.row_mut(g).copy_from_slice(&mean);
            self.dirty[g] = false;
        }
        Ok(())
    }

    pub fn mark_dirty(&mut self, region_id: usize) -> Result<()> {
        let len = self.dirty.len();
        let flag = self.dirty.get_mut(region_id).ok_or(GazeError::Index {
            context: "region table",
            index: region_id,
            len,
        })?;
        *flag = true;
        Ok(())
    }

    pub fn mark_all_dirty(&mut self) {
        self.dirty.iter_mut().for_each(|d| *d = true);
    }

    pub fn is_dirty(&self, region_id: usize) -> bool {
        self.dirty[region_id]
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, id: usize) -> Result<&Region> {
        self.regions.get(id).ok_or(GazeError::Index {
            context: "region table",
            index: id,
            len: self.regions.len(),
        })
    }

    pub fn descriptor(&self, id: usize) -> &[f64] {
        self.descriptors.row(id)
    }

    pub fn descriptors(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        self.regions.iter().map(Region::len).collect()
    }
}

fn region_mean(cache: &LayerHeadCache, region: &Region) -> Result<Vec<f64>> {
    if region.is_empty() {
        return Err(GazeError::Layout(format!("region {} is empty", region.id)));
    }
    let mut acc = vec![0.0; cache.dim()];
    for &pos in &region.token_indices {
        if pos >= cache.len() {
            return Err(GazeError::Layout(format!(
                "region {} references position {pos} beyond cache length {}",
                region.id,
                cache.len()
            )));
        }
        if cache.segment(pos) != Segment::Visual {
            return Err(GazeError::Layout(format!(
                "region {} references non-visual position {pos}",
                region.id
            )));
        }
        axpy(1.0, cache.key(pos), &mut acc);
    }
    let n = region.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferStats {
    pub new_bytes: u64,
    pub newly_loaded: usize,
}

/// Fast-tier residency of visual regions. The full cache is assumed to live
/// in the slow tier; loading a region charges its K and V bytes once.
#[derive(Debug, Clone, PartialEq)]
pub struct TierState {
    resident: BTreeSet<usize>,
    bytes_per_token: u64,
    total_bytes_transferred: u64,
    total_load_events: u64,
    total_regions_loaded: u64,
}

impl TierState {
    /// `bytes_per_token = dim · element_bytes · 2` (keys and values).
    pub fn new(dim: usize, element_bytes: usize) -> Self {
        Self {
            resident: BTreeSet::new(),
            bytes_per_token: (dim * element_bytes * 2) as u64,
            total_bytes_transferred: 0,
            total_load_events: 0,
            total_regions_loaded: 0,
        }
    }

    /// Mark `selection` resident, charging bytes for regions not already
    /// resident. Fails without side effects if any id is unknown.
    pub fn load_regions(&mut self, selection: &[usize], region_sizes: &[usize]) -> Result<TransferStats> {
        if let Some(&bad) = selection.iter().find(|&&id| id >= region_sizes.len()) {
            return Err(GazeError::Index {
                context: "load_regions",
                index: bad,
                len: region_sizes.len(),
            });
        }
        let mut stats = TransferStats::default();
        for &id in selection {
            if self.resident.insert(id) {
                stats.new_bytes += region_sizes[id] as u64 * self.bytes_per_token;
                stats.newly_loaded += 1;
            }
        }
        self.total_bytes_transferred += stats.new_bytes;
        self.total_regions_loaded += stats.newly_loaded as u64;
        self.total_load_events += 1;
        Ok(stats)
    }

    /// Empty the fast tier. Counters are kept.
    pub fn reset_residency(&mut self) {
        self.resident.clear();
    }

    pub fn is_resident(&self, id: usize) -> bool {
        self.resident.contains(&id)
    }

    pub fn resident(&self) -> &BTreeSet<usize> {
        &self.resident
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.bytes_per_token
    }

    pub fn total_bytes_transferred(&self) -> u64 {
        self.total_bytes_transferred
    }

    pub fn total_load_events(&self) -> u64 {
        self.total_load_events
    }

    pub fn total_regions_loaded(&self) -> u64 {
        self.total_regions_loaded
    }
}
