//! Query-to-region routing: descriptor scores, TopK selection, and the
//! progressive schedule that maps training progress to a concrete K.

use std::cmp::Ordering;

use crate::error::{check_len, GazeError, Result};
use crate::kv_store::RegionTable;
use crate::layout::BlockExtents;
use crate::numerics::dot_unchecked;

/// Linear decay of the region selection ratio from 1 to `final_ratio`,
/// reached at `decay_end_fraction` of training and held afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub final_ratio: f64,
    pub decay_end_fraction: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            final_ratio: 0.1,
            decay_end_fraction: 0.6,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x <= 1.0;
        if !in_unit(self.final_ratio) || !in_unit(self.decay_end_fraction) {
            return Err(GazeError::Config(format!(
                "schedule ratios must lie in (0, 1]: final_ratio={}, decay_end_fraction={}",
                self.final_ratio, self.decay_end_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingConfig {
    pub top_k: usize,
    pub block: BlockExtents,
    pub context_tokens: usize,
    pub schedule: Schedule,
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(GazeError::Config("top_k must be at least 1".into()));
        }
        if self.block.volume() == 0 {
            return Err(GazeError::Config("block extents must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Regions chosen by one head for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Chosen ids, best first (score descending, then id ascending).
    pub region_ids: Vec<usize>,
    /// Scores of every region at selection time.
    pub scores: Vec<f64>,
}

impl Selection {
    /// Chosen ids in ascending order.
    pub fn sorted_ids(&self) -> Vec<usize> {
        let mut ids = self.region_ids.clone();
        ids.sort_unstable();
        ids
    }

    pub fn contains(&self, id: usize) -> bool {
        self.region_ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.region_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.region_ids.is_empty()
    }

    /// Highest score among the chosen regions.
    pub fn max_score(&self) -> Option<f64> {
        self.region_ids.first().map(|&id| self.scores[id])
    }

    /// A selection with no visual regions.
    pub fn empty(region_count: usize) -> Self {
        Self {
            region_ids: Vec::new(),
            scores: vec![0.0; region_count],
        }
    }

    /// Every region of the table, in id order.
    pub fn all(region_count: usize) -> Self {
        Self {
            region_ids: (0..region_count).collect(),
            scores: vec![0.0; region_count],
        }
    }
}

/// Raw dot-product score of `query` against every descriptor. No scaling.
pub fn score_regions(query: &[f64], table: &RegionTable) -> Result<Vec<f64>> {
    check_len("score_regions", table.dim(), query.len())?;
    Ok((0..table.len())
        .map(|g| dot_unchecked(query, table.descriptor(g)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TieBreak {
    #[cfg_attr(feature = "fault-inject-tiebreak", allow(dead_code))]
    LowerId,
    #[cfg_attr(not(any(test, feature = "fault-inject-tiebreak")), allow(dead_code))]
    HigherId,
}

#[cfg(not(feature = "fault-inject-tiebreak"))]
const DEFAULT_TIE_BREAK: TieBreak = TieBreak::LowerId;
#[cfg(feature = "fault-inject-tiebreak")]
const DEFAULT_TIE_BREAK: TieBreak = TieBreak::HigherId;

/// Select the `min(k, G)` highest-scoring regions; equal scores prefer the
/// lower region id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Selection> {
    top_k_with(scores, k, DEFAULT_TIE_BREAK)
}

pub(crate) fn top_k_with(scores: &[f64], k: usize, tie: TieBreak) -> Result<Selection> {
    if scores.is_empty() {
        return Err(GazeError::Dimension {
            context: "top_k scores",
            expected: 1,
            got: 0,
        });
    }
    if k == 0 {
        return Err(GazeError::Contract("top_k requires k >= 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GazeError::Numeric("top_k scores".into()));
    }
    let rank = |&a: &usize, &b: &usize| -> Ordering {
        let by_score = scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal);
        by_score.then_with(|| match tie {
            TieBreak::LowerId => a.cmp(&b),
            TieBreak::HigherId => b.cmp(&a),
        })
    };
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(ids.len());
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, rank);
        ids.truncate(k);
    }
    ids.sort_unstable_by(rank);
    Ok(Selection {
        region_ids: ids,
        scores: scores.to_vec(),
    })
}

/// Route one query: score against the table and keep the top `k`.
pub fn route(query: &[f64], table: &RegionTable, k: usize) -> Result<Selection> {
    top_k(&score_regions(query, table)?, k)
}

/// Region selection ratio at `step` of `total_steps`.
pub fn schedule_ratio(step: usize, total_steps: usize, schedule: &Schedule) -> f64 {
    let decay_steps = schedule.decay_end_fraction * total_steps.max(1) as f64;
    let progress = if decay_steps > 0.0 {
        (step as f64 / decay_steps).min(1.0)
    } else {
        1.0
    };
    // interpolate as (1-p)·1 + p·final so both endpoints are exact
    (1.0 - progress) + progress * schedule.final_ratio
}

/// Integer K realising a selection ratio over `region_count` regions:
/// `max(1, ceil(ratio·G))`, capped at G.
pub fn ratio_to_k(ratio: f64, region_count: usize) -> usize {
    // products such as 0.1·30 land a few ulps above the integer they denote
    let raw = ratio * region_count as f64;
    let k = (raw - raw.abs() * 1e-12).ceil();
    (k.max(1.0) as usize).min(region_count.max(1))
}
