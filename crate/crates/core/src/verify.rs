//! Self-check suites run by `gaze verify`.
//!
//! Every suite is seeded and returns a [`SuiteResult`]; a suite never panics
//! on a failed check, it records the first mismatch in `detail`.

use crate::attention::{full_attention, gaze_attention, gaze_attention_backward, softmax_attention};
use crate::cost_model::{attended_visual_count, percent, routing_flops, ModelGeometry};
use crate::error::Result;
use crate::kv_store::{refresh_descriptors, LayerHeadCache, RegionTable, Segment, TierState};
use crate::layout::{region_count, tile_regions, BlockExtents, TokenVolume};
use crate::numerics::{central_difference, Matrix, SeededStream};
use crate::routing::{route, top_k, Selection};
use crate::trainer::{TaskSpec, ToyModel, ToyParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("{status} {:<24} {:>8} checks  {}", self.name, self.checks, self.detail)
    }
}

/// Counts checks and remembers the first failure.
struct Tally {
    name: &'static str,
    checks: usize,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: 0,
            failure: None,
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok && self.failure.is_none() {
            self.failure = Some(what());
        }
    }

    fn error(&mut self, e: crate::GazeError) {
        self.check(false, || format!("error: {e}"));
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.failure.is_none() && self.checks > 0,
            checks: self.checks,
            detail: self.failure.unwrap_or_default(),
        }
    }
}

fn random_visual_cache(s: &mut SeededStream, volume: &TokenVolume, d: usize, text: usize) -> Result<LayerHeadCache> {
    let mut cache = LayerHeadCache::new(0, 0, d);
    let n = volume.visual_tokens();
    cache.append_kv(
        &Matrix::random_normal(n, d, 1.0, s),
        &Matrix::random_normal(n, d, 1.0, s),
        Segment::Visual,
        Some(0),
    )?;
    if text > 0 {
        cache.append_kv(
            &Matrix::random_normal(text, d, 1.0, s),
            &Matrix::random_normal(text, d, 1.0, s),
            Segment::Text,
            None,
        )?;
    }
    Ok(cache)
}

/// Gaze attention with every region selected and no context rows equals
/// dense attention over the whole cache.
pub fn full_selection_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("full-selection");
    let mut s = SeededStream::new(seed);
    for i in 0..instances {
        let d = [8, 64][i % 2];
        let side = [6, 24][(i / 2) % 2];
        let text = (i / 4) % 7;
        let run = |s: &mut SeededStream| -> Result<(Vec<f64>, Vec<f64>)> {
            let volume = TokenVolume::new(1, side, side)?;
            let regions = tile_regions(&volume, BlockExtents::new(1, 6, 6))?;
            let cache = random_visual_cache(s, &volume, d, text)?;
            let table = refresh_descriptors(&cache, &regions)?;
            let q = s.normal_vec(d, 1.0);
            let sel = route(&q, &table, regions.len() + i % 3)?;
            Ok((gaze_attention(&q, &cache, &sel, &table)?.output, full_attention(&q, &cache)?.output))
        };
        match run(&mut s) {
            Ok((gaze, dense)) => {
                let worst = gaze.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                t.check(worst <= 1e-10, || format!("instance {i}: max deviation {worst:e}"));
            }
            Err(e) => t.error(e),
        }
    }
    t.finish()
}

/// Selection routine under test: scores and k to a selection.
pub type Selector<'a> = &'a dyn Fn(&[f64], usize) -> Result<Selection>;

/// Compare `selector` against a full stable sort (score descending, id
/// ascending) on random score vectors, half of them with heavy ties.
pub fn topk_oracle_suite(vectors: usize, seed: u64, selector: Selector<'_>) -> SuiteResult {
    let mut t = Tally::new("topk-oracle");
    let mut s = SeededStream::new(seed);
    for i in 0..vectors {
        let g = 1 + s.below(if i % 10 == 0 { 4096 } else { 256 });
        let tied = i % 2 == 1;
        let levels = 1 + s.below(4);
        let scores: Vec<f64> = (0..g)
            .map(|_| if tied { s.below(levels) as f64 } else { s.normal() })
            .collect();
        let k = 1 + s.below(g);
        let mut oracle: Vec<usize> = (0..g).collect();
        oracle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        oracle.truncate(k);
        match selector(&scores, k) {
            Ok(sel) => t.check(sel.region_ids == oracle, || format!("vector {i}: G={g} k={k} differs from sort oracle")),
            Err(e) => t.error(e),
        }
    }
    t.finish()
}

/// Analytic gradients against central differences, at the cache level and
/// through the toy model's prefill and projections.
pub fn gradient_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("gradient");
    let mut s = SeededStream::new(seed);
    let tol = |a: f64| f64::max(1e-7, 1e-5 * a.abs());
    for i in 0..instances {
        let ctx = [0, 2][i % 2];
        if let Err(e) = cache_gradient_case(&mut s, ctx, &mut t, &tol) {
            t.error(e);
        }
        if let Err(e) = toy_gradient_case(&mut s, ctx, &mut t, &tol) {
            t.error(e);
        }
    }
    t.finish()
}

fn cache_gradient_case(s: &mut SeededStream, ctx: usize, t: &mut Tally, tol: &dyn Fn(f64) -> f64) -> Result<()> {
    let d = 8;
    let volume = TokenVolume::new(1, 4, 4)?;
    let regions = tile_regions(&volume, BlockExtents::new(1, 2, 2))?;
    let mut cache = random_visual_cache(s, &volume, d, 2)?;
    if ctx > 0 {
        let m = Matrix::random_normal(ctx, d, 1.0, s);
        cache.append_kv(&m, &Matrix::random_normal(ctx, d, 1.0, s), Segment::Context, Some(0))?;
    }
    let table: RegionTable = refresh_descriptors(&cache, &regions)?;
    let q = s.normal_vec(d, 1.0);
    let up = s.normal_vec(d, 1.0);
    let sel = route(&q, &table, 2)?;
    let fwd = gaze_attention(&q, &cache, &sel, &table)?;
    let grad = gaze_attention_backward(&q, &cache, &sel, &table, &fwd, &up)?;

    let set = fwd.indices.clone();
    let loss = |qq: &[f64], keys: &[f64], values: &[f64]| {
        let kr: Vec<&[f64]> = set.iter().map(|&p| &keys[p * d..(p + 1) * d]).collect();
        let vr: Vec<&[f64]> = set.iter().map(|&p| &values[p * d..(p + 1) * d]).collect();
        softmax_attention(qq, &kr, &vr)
            .map(|(o, _)| o.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>())
            .unwrap_or(f64::NAN)
    };
    let (kf, vf) = (cache.keys_flat().to_vec(), cache.values_flat().to_vec());
    let mut compare = |what: &str, analytic: &[f64], numeric: &[f64]| {
        for (j, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            t.check((a - n).abs() <= tol(*a), || format!("{what}[{j}]: analytic {a} numeric {n}"));
        }
    };
    compare("dq", &grad.query, &central_difference(|x| loss(x, &kf, &vf), &q, 1e-5)?);
    compare("dK", grad.keys.as_slice(), &central_difference(|x| loss(&q, x, &vf), &kf, 1e-5)?);
    compare("dV", grad.values.as_slice(), &central_difference(|x| loss(&q, &kf, x), &vf, 1e-5)?);
    for pos in (0..cache.len()).filter(|p| !set.contains(p)) {
        let zero = grad.keys.row(pos).iter().chain(grad.values.row(pos)).all(|&x| x == 0.0);
        t.check(zero, || format!("row {pos} outside the gaze set has a nonzero gradient"));
    }
    Ok(())
}

fn toy_gradient_case(s: &mut SeededStream, ctx: usize, t: &mut Tally, tol: &dyn Fn(f64) -> f64) -> Result<()> {
    let spec = TaskSpec {
        volume: TokenVolume::new(1, 4, 4)?,
        block: BlockExtents::new(1, 2, 2),
        input_dim: 8,
        model_dim: 8,
        noise: 0.3,
        signal_scale: 1.0,
    };
    let model = ToyModel::new(spec.clone(), ctx)?;
    let params = ToyParams::init(&spec, ctx, 1.0, s);
    let task = model.generate(s);
    let (_, grads, sel) = model.loss_and_grad(&params, &task, 2, None)?;
    let flat = params.flatten();
    let numeric = central_difference(
        |x| {
            params
                .unflatten(x)
                .and_then(|p| model.loss(&p, &task, 2, Some(&sel)))
                .unwrap_or(f64::NAN)
        },
        &flat,
        1e-5,
    )?;
    for (j, (a, n)) in grads.flatten().iter().zip(&numeric).enumerate() {
        t.check((a - n).abs() <= tol(*a), || format!("toy param[{j}]: analytic {a} numeric {n}"));
    }
    Ok(())
}

/// Every tiling of every volume up to `max` is a disjoint cover with the
/// expected region count.
pub fn partition_suite(max: (usize, usize, usize)) -> SuiteResult {
    let mut t = Tally::new("partition");
    for tt in 1..=max.0 {
        for h in 1..=max.1 {
            for w in 1..=max.2 {
                let volume = match TokenVolume::new(tt, h, w) {
                    Ok(v) => v.with_offset(3),
                    Err(e) => {
                        t.error(e);
                        continue;
                    }
                };
                let n = volume.visual_tokens();
                for bt in 1..=tt {
                    for bh in 1..=h {
                        for bw in 1..=w {
                            let block = BlockExtents::new(bt, bh, bw);
                            let regions = match tile_regions(&volume, block) {
                                Ok(r) => r,
                                Err(e) => {
                                    t.error(e);
                                    continue;
                                }
                            };
                            let expected = tt.div_ceil(bt) * h.div_ceil(bh) * w.div_ceil(bw);
                            let mut seen = vec![false; n];
                            let mut ok = regions.len() == expected && region_count(&volume, block) == expected;
                            for (g, r) in regions.iter().enumerate() {
                                ok &= r.id == g && !r.is_empty() && r.len() <= block.volume();
                                ok &= r.token_indices.windows(2).all(|p| p[0] < p[1]);
                                for &p in &r.token_indices {
                                    match p.checked_sub(3).filter(|&i| i < n) {
                                        Some(i) if !seen[i] => seen[i] = true,
                                        _ => ok = false,
                                    }
                                }
                            }
                            ok &= seen.iter().all(|&x| x);
                            t.check(ok, || format!("volume {tt}x{h}x{w} block {bt}x{bh}x{bw}"));
                        }
                    }
                }
            }
        }
    }
    t.finish()
}

/// Worked cost examples: the attended count, routing FLOPs and a transfer.
pub fn cost_example_suite() -> SuiteResult {
    let mut t = Tally::new("cost-example");
    let geom = ModelGeometry {
        layers: 1,
        heads: 1,
        head_dim: 128,
        element_bytes: 4,
        text_len: 0,
        units: 8,
        tokens_per_unit: 576,
        region_size: 36,
        region_count: 128,
        top_k: 20,
        context_per_unit: 4,
    };
    let attended = attended_visual_count(&geom);
    let n_v = geom.visual_tokens();
    t.check(attended == 752 && n_v == 4608, || format!("attended {attended} of {n_v}"));
    let pct = percent(attended as f64 / n_v as f64);
    t.check(pct == "16.3%", || format!("fraction printed as {pct}"));
    let route = routing_flops(&geom);
    t.check(route == 33_664, || format!("routing flops {route}"));
    let mut tier = TierState::new(128, 4);
    let ids: Vec<usize> = (0..20).collect();
    match tier.load_regions(&ids, &[36; 128]) {
        Ok(stats) => t.check(stats.new_bytes == 737_280, || format!("transfer {} bytes", stats.new_bytes)),
        Err(e) => t.error(e),
    }
    t.finish()
}

/// All suites at their default sizes, with the crate's TopK as selector.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        full_selection_suite(200, seed),
        topk_oracle_suite(1000, seed, &|s, k| top_k(s, k)),
        gradient_suite(100, seed),
        partition_suite((4, 12, 12)),
        cost_example_suite(),
    ]
}
