//! Analytical FLOP and KV-memory accounting for dense versus gaze attention.
//!
//! Counting convention, per decoding query, per layer, per head:
//!
//! * attention over `n` positions: `2·n·d` (scores) + `2·n·d` (weighted sum) + `5·n` (softmax)
//! * routing over `G` regions: `2·G·d` (descriptor scores) + `G·ceil(log2 G)` (selection)
//! * context tokens: their prefill (context token `j` of a unit attends over
//!   the unit's visual tokens plus `j + 1` context tokens) plus their
//!   presence in the attended set of the query; the presence term is also
//!   part of the gaze attention column
//!
//! KV bytes count keys and values of the positions resident in the fast tier:
//! `positions · d · 2 · element_bytes`. Every count is multiplied by
//! `layers · heads`.

use std::fmt::Write as _;

use crate::error::{GazeError, Result};

pub const FLOP_CONVENTION: &str = "attention 4*n*d + 5*n; routing 2*G*d + G*ceil(log2 G); \
context prefill + per-query presence; all per decoding query x layers x heads";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelGeometry {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub element_bytes: usize,
    pub text_len: usize,
    pub units: usize,
    pub tokens_per_unit: usize,
    /// Tokens per region `m`.
    pub region_size: usize,
    /// Region count `G`.
    pub region_count: usize,
    pub top_k: usize,
    pub context_per_unit: usize,
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("element_bytes", self.element_bytes),
            ("units", self.units),
            ("tokens_per_unit", self.tokens_per_unit),
            ("region_size", self.region_size),
            ("region_count", self.region_count),
            ("top_k", self.top_k),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(GazeError::Config(format!("geometry field {name} must be at least 1")));
        }
        if self.region_size * self.region_count < self.visual_tokens() {
            return Err(GazeError::Config(format!(
                "{} regions of {} tokens cannot cover {} visual tokens",
                self.region_count,
                self.region_size,
                self.visual_tokens()
            )));
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        self.units * self.tokens_per_unit
    }

    fn layer_heads(&self) -> u64 {
        (self.layers * self.heads) as u64
    }

    /// Visual tokens of the selected regions, at most `N_v`.
    pub fn selected_visual(&self) -> usize {
        (self.top_k.min(self.region_count) * self.region_size).min(self.visual_tokens())
    }
}

/// `K·m + |C|·U`, the visual-side positions attended by one query.
pub fn attended_visual_count(geom: &ModelGeometry) -> usize {
    geom.selected_visual() + geom.context_per_unit * geom.units
}

fn attention_flops_single(n: u64, d: u64) -> u64 {
    4 * n * d + 5 * n
}

/// Attention FLOPs for one query over `n_attended` positions.
pub fn attention_flops(n_attended: usize, geom: &ModelGeometry) -> u64 {
    attention_flops_single(n_attended as u64, geom.head_dim as u64) * geom.layer_heads()
}

fn ceil_log2(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        u64::from(usize::BITS - (n - 1).leading_zeros())
    }
}

/// Routing FLOPs for one query.
pub fn routing_flops(geom: &ModelGeometry) -> u64 {
    let g = geom.region_count as u64;
    (2 * g * geom.head_dim as u64 + g * ceil_log2(geom.region_count)) * geom.layer_heads()
}

/// One-time prefill of the context tokens, each attending over its unit.
pub fn context_prefill_flops(geom: &ModelGeometry) -> u64 {
    let d = geom.head_dim as u64;
    let per_unit: u64 = (0..geom.context_per_unit)
        .map(|j| attention_flops_single((geom.tokens_per_unit + j + 1) as u64, d))
        .sum();
    per_unit * geom.units as u64 * geom.layer_heads()
}

/// Share of one query's attention spent on the context positions.
pub fn context_presence_flops(geom: &ModelGeometry) -> u64 {
    attention_flops(geom.context_per_unit * geom.units, geom)
}

/// Context-token FLOPs: unit-masked prefill plus per-query presence.
pub fn context_flops(geom: &ModelGeometry) -> u64 {
    context_prefill_flops(geom) + context_presence_flops(geom)
}

/// Fast-tier KV bytes for one query's attended set (text included).
pub fn resident_kv_bytes(geom: &ModelGeometry) -> u64 {
    let positions = (attended_visual_count(geom) + geom.text_len) as u64;
    positions * geom.head_dim as u64 * 2 * geom.element_bytes as u64 * geom.layer_heads()
}

/// Table rows as serialised: the four cost columns for dense and gaze plus
/// the savings row. `None` renders as `--`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub dense: [Option<f64>; 4],
    pub gaze: [Option<f64>; 4],
    pub saving: [Option<f64>; 4],
}

pub const COLUMNS: [&str; 4] = ["Attn", "Route", "Lct", "KV Cache"];

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub dense_attn_flops: u64,
    pub gaze_attn_flops: u64,
    pub routing_flops: u64,
    pub context_flops: u64,
    pub context_prefill_flops: u64,
    pub context_presence_flops: u64,
    pub dense_kv_bytes: u64,
    pub gaze_resident_kv_bytes: u64,
    pub dense_visual: usize,
    pub gaze_attended_visual: usize,
    pub gaze_selected_visual: usize,
    /// Fractions in `[0, 1]`.
    pub attn_saving: f64,
    pub kv_saving: f64,
    pub vision_kv_saving: f64,
    pub vision_kv_saving_regions_only: f64,
}

pub fn savings_report(dense: &ModelGeometry, gaze: &ModelGeometry) -> Result<CostReport> {
    dense.validate()?;
    gaze.validate()?;
    let shared = [
        ("layers", dense.layers, gaze.layers),
        ("heads", dense.heads, gaze.heads),
        ("head_dim", dense.head_dim, gaze.head_dim),
        ("element_bytes", dense.element_bytes, gaze.element_bytes),
    ];
    for (name, a, b) in shared {
        if a != b {
            return Err(GazeError::Contract(format!(
                "dense and gaze geometries disagree on {name}: {a} vs {b}"
            )));
        }
    }
    let dense_visual = attended_visual_count(dense);
    let gaze_visual = attended_visual_count(gaze);
    let dense_attn = attention_flops(dense_visual + dense.text_len, dense);
    let gaze_attn = attention_flops(gaze_visual + gaze.text_len, gaze);
    let dense_kv = resident_kv_bytes(dense);
    let gaze_kv = resident_kv_bytes(gaze);
    let saving = |g: f64, d: f64| 1.0 - g / d;
    Ok(CostReport {
        dense_attn_flops: dense_attn,
        gaze_attn_flops: gaze_attn,
        routing_flops: routing_flops(gaze),
        context_flops: context_flops(gaze),
        context_prefill_flops: context_prefill_flops(gaze),
        context_presence_flops: context_presence_flops(gaze),
        dense_kv_bytes: dense_kv,
        gaze_resident_kv_bytes: gaze_kv,
        dense_visual,
        gaze_attended_visual: gaze_visual,
        gaze_selected_visual: gaze.selected_visual(),
        attn_saving: saving(gaze_attn as f64, dense_attn as f64),
        kv_saving: saving(gaze_kv as f64, dense_kv as f64),
        vision_kv_saving: saving(gaze_visual as f64, dense_visual as f64),
        vision_kv_saving_regions_only: saving(gaze.selected_visual() as f64, dense_visual as f64),
    })
}

/// One-decimal percentage.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}%", 100.0 * fraction)
}

impl CostReport {
    pub fn table(&self) -> CostTable {
        CostTable {
            dense: [Some(self.dense_attn_flops as f64), None, None, Some(self.dense_kv_bytes as f64)],
            gaze: [
                Some(self.gaze_attn_flops as f64),
                Some(self.routing_flops as f64),
                Some(self.context_flops as f64),
                Some(self.gaze_resident_kv_bytes as f64),
            ],
            saving: [Some(self.attn_saving), None, None, Some(self.kv_saving)],
        }
    }

    /// `gaze/dense = x%` line for the attended visual fraction.
    pub fn fraction_line(&self) -> String {
        let frac = self.gaze_attended_visual as f64 / self.dense_visual as f64;
        format!("{}/{} = {}", self.gaze_attended_visual, self.dense_visual, percent(frac))
    }

    pub fn to_text(&self) -> String {
        let fmt_count = |x: Option<f64>| x.map_or("--".to_string(), |v| format!("{}", v as u64));
        let fmt_pct = |x: Option<f64>| x.map_or("--".to_string(), percent);
        let t = self.table();
        let rows = [
            ("Dense", t.dense.map(fmt_count)),
            ("Gaze", t.gaze.map(fmt_count)),
            ("Saving", t.saving.map(fmt_pct)),
        ];
        let mut widths = COLUMNS.map(str::len);
        for (_, cells) in &rows {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "FLOPs and KV cache per decoding query (all layers and heads)");
        let _ = writeln!(out, "convention: {FLOP_CONVENTION}");
        let _ = write!(out, "{:<8}", "");
        for (name, w) in COLUMNS.iter().zip(widths) {
            let _ = write!(out, " | {name:>w$}");
        }
        out.push('\n');
        for (label, cells) in &rows {
            let _ = write!(out, "{label:<8}");
            for (c, w) in cells.iter().zip(widths) {
                let _ = write!(out, " | {c:>w$}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "Lct: {} one-time context prefill + {} per-query presence (also counted in Attn)",
            self.context_prefill_flops, self.context_presence_flops
        );
        let _ = writeln!(out, "attended visual fraction: {}", self.fraction_line());
        let _ = writeln!(
            out,
            "vision KV size saving: {} including context tokens, {} selected regions only",
            percent(self.vision_kv_saving),
            percent(self.vision_kv_saving_regions_only)
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let cell = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        let t = self.table();
        let mut out = String::from("row,attn,route,lct,kv_cache\n");
        for (label, cells) in [("dense", t.dense), ("gaze", t.gaze), ("saving", t.saving)] {
            let cells: Vec<String> = cells.iter().map(|c| cell(*c)).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }
}

impl CostTable {
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("row,attn,route,lct,kv_cache") {
            return Err(GazeError::Format("unexpected cost CSV header".into()));
        }
        let mut table = CostTable {
            dense: [None; 4],
            gaze: [None; 4],
            saving: [None; 4],
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(GazeError::Format(format!("bad cost CSV row: {line}")));
            }
            let mut cells = [None; 4];
            for (c, f) in cells.iter_mut().zip(&fields[1..]) {
                if !f.is_empty() {
                    *c = Some(f.parse::<f64>().map_err(|e| GazeError::Format(format!("{f}: {e}")))?);
                }
            }
            match fields[0] {
                "dense" => table.dense = cells,
                "gaze" => table.gaze = cells,
                "saving" => table.saving = cells,
                other => return Err(GazeError::Format(format!("unknown cost CSV row {other}"))),
            }
        }
        Ok(table)
    }
}
