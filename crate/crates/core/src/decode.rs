//! Synthetic decoding runs: a seeded scene with planted needle regions,
//! per-step routing in every layer and head, attention heatmaps and tiered
//! transfer accounting.
//!
//! Each layer-head owns its projections with `W_q = W_k`, so a query built
//! from a needle's signal scores that needle's region highest. Step `s`
//! queries needle `s mod needles`; after attending, the query token is
//! appended to every cache as a text row.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attention::{append_text_token, full_attention, gaze_attention, prefill_with_context, Projections};
use crate::config::{Residency, RunConfig};
use crate::error::{GazeError, Result};
use crate::kv_store::{refresh_descriptors, LayerHeadCache, RegionTable, TierState};
use crate::layout::{tile_regions, TokenVolume};
use crate::numerics::{vec_mat, Matrix, SeededStream};
use crate::routing::{route, Selection};
use crate::snapshot::save_cache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Gaze,
    /// Every query attends to the whole cache; routing is still traced.
    Dense,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOptions {
    pub heatmap_steps: Vec<usize>,
    pub mode: AttentionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    /// Ascending.
    pub region_ids: Vec<usize>,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub new_bytes: u64,
    pub newly_loaded: usize,
}

/// Grayscale attention map: frames stacked vertically, `W` wide, `T·H` tall.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    /// Render visual attention weights, max-normalised per frame.
    fn render(step: usize, layer: usize, head: usize, volume: &TokenVolume, weights: &[f64]) -> Self {
        let (h, w) = (volume.height, volume.width);
        let mut pixels = vec![0u8; volume.frames * h * w];
        for t in 0..volume.frames {
            let start = volume.frame_start(t);
            let frame = &weights[start..start + h * w];
            let max = frame.iter().cloned().fold(0.0f64, f64::max);
            if max <= 0.0 {
                continue;
            }
            for (i, &x) in frame.iter().enumerate() {
                pixels[t * h * w + i] = (255.0 * x / max).round() as u8;
            }
        }
        Self {
            step,
            layer,
            head,
            width: w,
            height: volume.frames * h,
            pixels,
        }
    }

    pub fn nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }

    /// Plain (ASCII) portable graymap.
    pub fn to_pgm(&self) -> String {
        let mut out = format!(
            "P2\n# step {} layer {} head {}\n{} {}\n255\n",
            self.step, self.layer, self.head, self.width, self.height
        );
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("heatmap_step{}.pgm", self.step)
    }
}

#[derive(Debug, Clone)]
pub struct DecodeRun {
    pub needles: Vec<usize>,
    pub trace: Vec<TraceRow>,
    pub transfers: Vec<TransferRow>,
    pub heatmaps: Vec<Heatmap>,
    pub residency: Residency,
    pub bytes_per_token: u64,
    pub total_bytes: u64,
    pub load_events: u64,
    pub regions_loaded: u64,
    /// Final cache of the heatmap layer-head.
    pub cache: LayerHeadCache,
}

pub const TRACE_HEADER: &str = "step,layer,head,selected_region_ids,max_score";
pub const TRANSFER_HEADER: &str = "step,layer,head,new_bytes,newly_loaded";

impl DecodeRun {
    pub fn trace_csv(&self) -> String {
        let mut out = format!("{TRACE_HEADER}\n");
        for r in &self.trace {
            let ids: Vec<String> = r.region_ids.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{},{:.6}", r.step, r.layer, r.head, ids.join(";"), r.max_score);
        }
        out
    }

    pub fn transfer_csv(&self) -> String {
        let mut out = format!("{TRANSFER_HEADER}\n");
        for r in &self.transfers {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.layer, r.head, r.new_bytes, r.newly_loaded);
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let needles: Vec<String> = self.needles.iter().map(|n| n.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "needle regions: {}", needles.join(" "));
        let _ = writeln!(out, "residency: {}", self.residency.as_str());
        let _ = writeln!(out, "bytes per token (K and V): {}", self.bytes_per_token);
        let _ = writeln!(out, "load events: {}", self.load_events);
        let _ = writeln!(out, "regions loaded: {}", self.regions_loaded);
        let _ = writeln!(out, "bytes transferred: {}", self.total_bytes);
        out
    }
}

struct HeadState {
    layer: usize,
    head: usize,
    proj: Projections,
    cache: LayerHeadCache,
    table: RegionTable,
    tier: TierState,
}

struct Scene {
    needles: Vec<usize>,
    signals: Vec<Vec<f64>>,
    unit_features: Vec<Matrix>,
    prompt: Matrix,
}

fn build_scene(cfg: &RunConfig, stream: &mut SeededStream, region_rows: &[Vec<usize>]) -> Result<Scene> {
    let g = region_rows.len();
    if cfg.needles > g {
        return Err(GazeError::Config(format!("needles = {} exceeds the {g} regions", cfg.needles)));
    }
    let mut needles = Vec::with_capacity(cfg.needles);
    while needles.len() < cfg.needles {
        let id = stream.below(g);
        if !needles.contains(&id) {
            needles.push(id);
        }
    }
    let d_in = cfg.input_dim;
    let signals: Vec<Vec<f64>> = needles.iter().map(|_| stream.normal_vec(d_in, cfg.signal_scale)).collect();
    let volume = cfg.volume()?;
    let mut features = Matrix::random_normal(volume.visual_tokens(), d_in, cfg.noise, stream);
    for (&id, signal) in needles.iter().zip(&signals) {
        for &row in &region_rows[id] {
            features.row_mut(row).iter_mut().zip(signal).for_each(|(x, s)| *x += s);
        }
    }
    let prompt = Matrix::random_normal(cfg.text_len, d_in, cfg.noise, stream);
    let per = volume.tokens_per_frame();
    let unit_features = (0..volume.frames)
        .map(|t| Matrix::from_vec(per, d_in, features.as_slice()[t * per * d_in..(t + 1) * per * d_in].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        needles,
        signals,
        unit_features,
        prompt,
    })
}

fn head_projections(cfg: &RunConfig, stream: &mut SeededStream) -> (Projections, Vec<Matrix>) {
    let (d_in, d) = (cfg.input_dim, cfg.head_dim);
    let s = 1.0 / (d_in as f64).sqrt();
    let shared = Matrix::random_normal(d_in, d, s, stream);
    let value = Matrix::random_normal(d_in, d, s, stream);
    let context = (0..cfg.frames)
        .map(|_| Matrix::random_normal(cfg.context_tokens, d_in, cfg.signal_scale, stream))
        .collect();
    (
        Projections {
            query: shared.clone(),
            key: shared,
            value,
        },
        context,
    )
}

/// Run the configured decoding scene in memory.
pub fn run_decode(cfg: &RunConfig, opts: &DecodeOptions) -> Result<DecodeRun> {
    cfg.validate()?;
    if let Some(&bad) = opts.heatmap_steps.iter().find(|&&s| s >= cfg.decode_steps) {
        return Err(GazeError::Config(format!(
            "heatmap step {bad} is outside 0..{}",
            cfg.decode_steps
        )));
    }
    let volume = cfg.volume()?;
    let block = cfg.block();
    let feature_regions = tile_regions(&volume, block)?;
    let cache_volume = volume.with_frame_gap(cfg.context_tokens);
    let cache_regions = tile_regions(&cache_volume, block)?;
    let region_rows: Vec<Vec<usize>> = feature_regions.iter().map(|r| r.token_indices.clone()).collect();

    let mut master = SeededStream::new(cfg.seed);
    let mut scene_stream = master.fork(0);
    let scene = build_scene(cfg, &mut scene_stream, &region_rows)?;
    let mut step_stream = master.fork(1);
    let head_streams: Vec<(usize, usize, SeededStream)> = (0..cfg.layers)
        .flat_map(|l| (0..cfg.heads).map(move |h| (l, h)))
        .map(|(l, h)| (l, h, master.fork(2 + (l * cfg.heads + h) as u64)))
        .collect();

    let mut heads: Vec<HeadState> = head_streams
        .into_par_iter()
        .map(|(layer, head, mut stream)| {
            let (proj, context) = head_projections(cfg, &mut stream);
            let prefill = prefill_with_context(layer, head, cfg.precision, &scene.unit_features, &context, &proj)?;
            let mut cache = prefill.cache;
            for r in 0..scene.prompt.rows() {
                append_text_token(&mut cache, scene.prompt.row(r), &proj)?;
            }
            let table = refresh_descriptors(&cache, &cache_regions)?;
            Ok(HeadState {
                layer,
                head,
                proj,
                cache,
                table,
                tier: TierState::new(cfg.head_dim, cfg.kv_element_bytes),
            })
        })
        .collect::<Result<_>>()?;

    let region_sizes = heads[0].table.region_sizes();
    let k = cfg.top_k;
    let mut trace = Vec::new();
    let mut transfers = Vec::new();
    let mut heatmaps = Vec::new();

    for step in 0..cfg.decode_steps {
        let target = step % scene.needles.len();
        let noise = step_stream.normal_vec(cfg.input_dim, cfg.noise);
        let x: Vec<f64> = scene.signals[target].iter().zip(&noise).map(|(s, n)| s + n).collect();

        let results: Vec<(Selection, Vec<f64>)> = heads
            .par_iter()
            .map(|hs| {
                let q = vec_mat(&x, &hs.proj.query)?;
                let selection = route(&q, &hs.table, k)?;
                let out = match opts.mode {
                    AttentionMode::Gaze => gaze_attention(&q, &hs.cache, &selection, &hs.table)?,
                    AttentionMode::Dense => full_attention(&q, &hs.cache)?,
                };
                Ok((selection, out.weights_over(hs.cache.len())))
            })
            .collect::<Result<_>>()?;

        for (hs, (selection, weights)) in heads.iter_mut().zip(results) {
            trace.push(TraceRow {
                step,
                layer: hs.layer,
                head: hs.head,
                region_ids: selection.sorted_ids(),
                max_score: selection.max_score().unwrap_or(0.0),
            });
            if cfg.residency == Residency::ResetPerStep {
                hs.tier.reset_residency();
            }
            let loaded = match opts.mode {
                AttentionMode::Gaze => selection.sorted_ids(),
                AttentionMode::Dense => (0..region_sizes.len()).collect(),
            };
            let stats = hs.tier.load_regions(&loaded, &region_sizes)?;
            transfers.push(TransferRow {
                step,
                layer: hs.layer,
                head: hs.head,
                new_bytes: stats.new_bytes,
                newly_loaded: stats.newly_loaded,
            });
            if hs.layer == cfg.heatmap_layer && hs.head == cfg.heatmap_head && opts.heatmap_steps.contains(&step) {
                heatmaps.push(Heatmap::render(step, hs.layer, hs.head, &cache_volume, &weights));
            }
            append_text_token(&mut hs.cache, &x, &hs.proj)?;
        }
    }

    let bytes_per_token = heads[0].tier.bytes_per_token();
    let total_bytes = heads.iter().map(|h| h.tier.total_bytes_transferred()).sum();
    let load_events = heads.iter().map(|h| h.tier.total_load_events()).sum();
    let regions_loaded = heads.iter().map(|h| h.tier.total_regions_loaded()).sum();
    let hm = cfg.heatmap_layer * cfg.heads + cfg.heatmap_head;
    Ok(DecodeRun {
        needles: scene.needles,
        trace,
        transfers,
        heatmaps,
        residency: cfg.residency,
        bytes_per_token,
        total_bytes,
        load_events,
        regions_loaded,
        cache: heads.swap_remove(hm).cache,
    })
}

/// Write every artifact of a run into `dir`; returns the paths written.
pub fn write_decode_outputs(run: &DecodeRun, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("trace.csv", &run.trace_csv())?;
    put("transfer.csv", &run.transfer_csv())?;
    put("transfer_summary.txt", &run.summary_text())?;
    put("effective.conf", &cfg.to_text())?;
    for h in &run.heatmaps {
        put(&h.file_name(), &h.to_pgm())?;
    }
    let cache_path = dir.join("cache.gzkv");
    save_cache(&cache_path, &run.cache)?;
    written.push(cache_path);
    Ok(written)
}
