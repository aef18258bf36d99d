//! Toy single-layer model trained on a synthetic needle-in-region retrieval
//! task under the progressive TopK schedule.
//!
//! A task is a `T × H × W` grid of feature rows. One region (the needle)
//! holds a shared signal vector plus noise, every other row is pure noise.
//! The query feature is the signal plus noise, and the target is the mean of
//! the needle rows mapped through a fixed readout (the rectangular identity).
//! The model only sees the prediction loss; whether routing finds the needle
//! is measured separately.

use rayon::prelude::*;

use crate::attention::{
    gaze_attention, gaze_attention_backward, prefill_with_context, softmax_attention_backward, AttentionOutput,
    Prefill, Projections,
};
use crate::error::{check_len, GazeError, Result};
use crate::kv_store::{refresh_descriptors, RegionTable, Segment};
use crate::layout::{tile_regions, BlockExtents, Region, TokenVolume};
use crate::numerics::{axpy, mat_vec, vec_mat, Matrix, Precision, SeededStream};
use crate::routing::{ratio_to_k, route, schedule_ratio, Schedule, Selection};

/// Shape and noise model of generated tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub volume: TokenVolume,
    pub block: BlockExtents,
    pub input_dim: usize,
    pub model_dim: usize,
    pub noise: f64,
    pub signal_scale: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 {
            return Err(GazeError::Config("input_dim and model_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(GazeError::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if self.volume.sequence_offset != 0 || self.volume.frame_gap != 0 {
            return Err(GazeError::Config("task volumes start at offset 0 with no frame gap".into()));
        }
        Ok(())
    }

    /// Regions over feature-row indices.
    pub fn regions(&self) -> Result<Vec<Region>> {
        tile_regions(&self.volume, self.block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleTask {
    /// `N_v × d_in`, frame-major.
    pub features: Matrix,
    pub needle: usize,
    pub query: Vec<f64>,
    pub target: Vec<f64>,
    pub noise: f64,
    pub signal_scale: f64,
}

/// Draw one task. Consumes the stream deterministically.
pub fn generate_task(stream: &mut SeededStream, spec: &TaskSpec, regions: &[Region]) -> NeedleTask {
    let d_in = spec.input_dim;
    let needle = stream.below(regions.len());
    let signal = stream.normal_vec(d_in, spec.signal_scale);
    let mut features = Matrix::random_normal(spec.volume.visual_tokens(), d_in, spec.noise, stream);
    for &row in &regions[needle].token_indices {
        axpy(1.0, &signal, features.row_mut(row));
    }
    let query: Vec<f64> = signal.iter().map(|s| s + spec.noise * stream.normal()).collect();

    let mut mean = vec![0.0; d_in];
    for &row in &regions[needle].token_indices {
        axpy(1.0, features.row(row), &mut mean);
    }
    let n = regions[needle].len() as f64;
    mean.iter_mut().for_each(|x| *x /= n);
    let mut target = vec![0.0; spec.model_dim];
    for (t, m) in target.iter_mut().zip(&mean) {
        *t = *m;
    }
    NeedleTask {
        features,
        needle,
        query,
        target,
        noise: spec.noise,
        signal_scale: spec.signal_scale,
    }
}

/// Trainable parameters: three `d_in × d` projections and `|C|` context
/// embeddings (input space) per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub context: Vec<Matrix>,
}

impl ToyParams {
    /// Gaussian initialisation with standard deviation `scale / sqrt(d_in)`.
    pub fn init(spec: &TaskSpec, context_tokens: usize, scale: f64, stream: &mut SeededStream) -> Self {
        let (d_in, d) = (spec.input_dim, spec.model_dim);
        let s = scale / (d_in as f64).sqrt();
        Self {
            query: Matrix::random_normal(d_in, d, s, stream),
            key: Matrix::random_normal(d_in, d, s, stream),
            value: Matrix::random_normal(d_in, d, s, stream),
            context: (0..spec.volume.frames)
                .map(|_| Matrix::random_normal(context_tokens, d_in, 1.0, stream))
                .collect(),
        }
    }

    /// Query and key projections with orthogonal ranges, so every routing
    /// score is exactly zero and selection carries no information.
    pub fn orthogonal_null(spec: &TaskSpec, context_tokens: usize) -> Self {
        let (d_in, d) = (spec.input_dim, spec.model_dim);
        let mut query = Matrix::zeros(d_in, d);
        let mut key = Matrix::zeros(d_in, d);
        for i in 0..d_in.min(d) {
            if i < d / 2 {
                query.row_mut(i)[i] = 1.0;
            } else {
                key.row_mut(i)[i] = 1.0;
            }
        }
        Self {
            query,
            key,
            value: Matrix::identity_like(d_in, d),
            context: vec![Matrix::zeros(context_tokens, d_in); spec.volume.frames],
        }
    }

    /// Projections that route by feature similarity: `W_q = W_k = W_v = I`.
    pub fn aligned(spec: &TaskSpec, context_tokens: usize, gain: f64) -> Self {
        let (d_in, d) = (spec.input_dim, spec.model_dim);
        let mut query = Matrix::identity_like(d_in, d);
        query.scale(gain);
        Self {
            query,
            key: Matrix::identity_like(d_in, d),
            value: Matrix::identity_like(d_in, d),
            context: vec![Matrix::zeros(context_tokens, d_in); spec.volume.frames],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            query: z(&other.query),
            key: z(&other.key),
            value: z(&other.value),
            context: other.context.iter().map(z).collect(),
        }
    }

    pub fn projections(&self) -> Projections {
        Projections {
            query: self.query.clone(),
            key: self.key.clone(),
            value: self.value.clone(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("query".to_string(), &self.query),
            ("key".to_string(), &self.key),
            ("value".to_string(), &self.value),
        ];
        for (u, c) in self.context.iter().enumerate() {
            out.push((format!("context.{u}"), c));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.query, &mut self.key, &mut self.value];
        out.extend(self.context.iter_mut());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.as_slice().iter().copied()).collect()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        check_len("ToyParams::unflatten", self.flatten().len(), flat.len())?;
        let mut out = self.clone();
        let mut at = 0;
        for m in out.tensors_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, c: f64, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(c, b.1)?;
        }
        Ok(())
    }
}

/// One forward pass, kept for the backward pass and for inspection.
#[derive(Debug, Clone)]
pub struct ToyForward {
    pub prefill: Prefill,
    pub table: RegionTable,
    pub query: Vec<f64>,
    pub selection: Selection,
    pub attention: AttentionOutput,
    pub loss: f64,
}

/// Single attention layer over one task's KV cache.
#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: TaskSpec,
    context_tokens: usize,
    /// Regions over feature-row indices (task side).
    feature_regions: Vec<Region>,
    /// The same regions over cache positions (visual rows interleaved with context rows).
    cache_regions: Vec<Region>,
}

impl ToyModel {
    pub fn new(spec: TaskSpec, context_tokens: usize) -> Result<Self> {
        spec.validate()?;
        let feature_regions = spec.regions()?;
        let cache_volume = spec.volume.with_frame_gap(context_tokens);
        let cache_regions = tile_regions(&cache_volume, spec.block)?;
        Ok(Self {
            spec,
            context_tokens,
            feature_regions,
            cache_regions,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn context_tokens(&self) -> usize {
        self.context_tokens
    }

    pub fn region_count(&self) -> usize {
        self.feature_regions.len()
    }

    pub fn feature_regions(&self) -> &[Region] {
        &self.feature_regions
    }

    pub fn cache_regions(&self) -> &[Region] {
        &self.cache_regions
    }

    pub fn generate(&self, stream: &mut SeededStream) -> NeedleTask {
        generate_task(stream, &self.spec, &self.feature_regions)
    }

    fn unit_features(&self, task: &NeedleTask) -> Vec<Matrix> {
        let per = self.spec.volume.tokens_per_frame();
        let d_in = self.spec.input_dim;
        (0..self.spec.volume.frames)
            .map(|u| {
                let rows = task.features.as_slice()[u * per * d_in..(u + 1) * per * d_in].to_vec();
                Matrix::from_vec(per, d_in, rows).expect("frame slice")
            })
            .collect()
    }

    /// Forward pass. Routing picks the top `k` regions unless `fixed`
    /// supplies the selection.
    pub fn forward(&self, params: &ToyParams, task: &NeedleTask, k: usize, fixed: Option<&Selection>) -> Result<ToyForward> {
        check_len("task target", self.spec.model_dim, task.target.len())?;
        let prefill = prefill_with_context(
            0,
            0,
            Precision::Double,
            &self.unit_features(task),
            &params.context,
            &params.projections(),
        )?;
        let table = refresh_descriptors(&prefill.cache, &self.cache_regions)?;
        let query = vec_mat(&task.query, &params.query)?;
        let selection = match fixed {
            Some(sel) => sel.clone(),
            None => route(&query, &table, k)?,
        };
        let attention = gaze_attention(&query, &prefill.cache, &selection, &table)?;
        let loss = mse(&attention.output, &task.target);
        Ok(ToyForward {
            prefill,
            table,
            query,
            selection,
            attention,
            loss,
        })
    }

    pub fn loss(&self, params: &ToyParams, task: &NeedleTask, k: usize, fixed: Option<&Selection>) -> Result<f64> {
        Ok(self.forward(params, task, k, fixed)?.loss)
    }

    /// Loss and parameter gradients for one task, selection held fixed
    /// during the backward pass.
    pub fn loss_and_grad(
        &self,
        params: &ToyParams,
        task: &NeedleTask,
        k: usize,
        fixed: Option<&Selection>,
    ) -> Result<(f64, ToyParams, Selection)> {
        let fwd = self.forward(params, task, k, fixed)?;
        let grads = self.backward(params, task, &fwd)?;
        Ok((fwd.loss, grads, fwd.selection))
    }

    fn backward(&self, params: &ToyParams, task: &NeedleTask, fwd: &ToyForward) -> Result<ToyParams> {
        let d = self.spec.model_dim;
        let cache = &fwd.prefill.cache;
        let upstream: Vec<f64> = fwd
            .attention
            .output
            .iter()
            .zip(&task.target)
            .map(|(o, t)| 2.0 * (o - t) / d as f64)
            .collect();
        let g = gaze_attention_backward(&fwd.query, cache, &fwd.selection, &fwd.table, &fwd.attention, &upstream)?;
        let mut grads = ToyParams::zeros_like(params);
        outer_add(&mut grads.query, &task.query, &g.query);

        let mut dk = g.keys;
        let dv = g.values;
        let mut dv_visual = dv.clone();

        // context rows: stored key = projected key, stored value = masked prefill output
        let ctx_index = |pos: usize| fwd.prefill.context.iter().position(|t| t.position == pos);
        let mut d_input_value = vec![vec![0.0; d]; fwd.prefill.context.len()];
        let mut d_ctx_query = Vec::with_capacity(fwd.prefill.context.len());
        for tok in &fwd.prefill.context {
            let dout = dv.row(tok.position);
            let mut k_rows: Vec<&[f64]> = Vec::with_capacity(tok.attended.len());
            let mut v_rows: Vec<&[f64]> = Vec::with_capacity(tok.attended.len());
            for &pos in &tok.attended {
                if cache.segment(pos) == Segment::Visual {
                    k_rows.push(cache.key(pos));
                    v_rows.push(cache.value(pos));
                } else {
                    let other = &fwd.prefill.context[ctx_index(pos).expect("context position")];
                    k_rows.push(&other.input_key);
                    v_rows.push(&other.input_value);
                }
            }
            let rg = softmax_attention_backward(&tok.query, &k_rows, &v_rows, &tok.weights, dout)?;
            for (slot, &pos) in tok.attended.iter().enumerate() {
                axpy(1.0, &rg.keys[slot], dk.row_mut(pos));
                if cache.segment(pos) == Segment::Visual {
                    axpy(1.0, &rg.values[slot], dv_visual.row_mut(pos));
                } else {
                    axpy(1.0, &rg.values[slot], &mut d_input_value[ctx_index(pos).expect("context position")]);
                }
            }
            d_ctx_query.push(rg.query);
        }

        for (i, tok) in fwd.prefill.context.iter().enumerate() {
            let e = params.context[tok.unit].row(tok.slot);
            let dkc = dk.row(tok.position);
            outer_add(&mut grads.key, e, dkc);
            outer_add(&mut grads.value, e, &d_input_value[i]);
            outer_add(&mut grads.query, e, &d_ctx_query[i]);
            let mut de = mat_vec(&params.key, dkc)?;
            axpy(1.0, &mat_vec(&params.value, &d_input_value[i])?, &mut de);
            axpy(1.0, &mat_vec(&params.query, &d_ctx_query[i])?, &mut de);
            grads.context[tok.unit].row_mut(tok.slot).copy_from_slice(&de);
        }

        let per = self.spec.volume.tokens_per_frame();
        for (u, range) in fwd.prefill.unit_visual.iter().enumerate() {
            for (r, pos) in range.clone().enumerate() {
                let x = task.features.row(u * per + r);
                outer_add(&mut grads.key, x, dk.row(pos));
                outer_add(&mut grads.value, x, dv_visual.row(pos));
            }
        }
        Ok(grads)
    }

    /// Mean loss and gradient over a batch. Items run in parallel; the
    /// reduction is sequential in batch order.
    pub fn batch_gradient(&self, params: &ToyParams, batch: &[NeedleTask], k: usize) -> Result<(f64, ToyParams)> {
        if batch.is_empty() {
            return Err(GazeError::Contract("empty training batch".into()));
        }
        let items: Vec<(f64, ToyParams)> = batch
            .par_iter()
            .map(|t| self.loss_and_grad(params, t, k, None).map(|(l, g, _)| (l, g)))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = ToyParams::zeros_like(params);
        let mut loss = 0.0;
        for (l, g) in &items {
            loss += l;
            total.add_scaled(scale, g)?;
        }
        Ok((loss * scale, total))
    }

    /// One plain gradient-descent step with `k` regions per query. Returns the
    /// pre-update batch loss.
    pub fn train_step(&self, params: &mut ToyParams, batch: &[NeedleTask], lr: f64, k: usize) -> Result<f64> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(GazeError::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let (loss, grads) = self.batch_gradient(params, batch, k)?;
        if !loss.is_finite() {
            return Err(GazeError::Numeric("training loss".into()));
        }
        params.add_scaled(-lr, &grads)?;
        if !params.is_finite() {
            return Err(GazeError::Numeric("parameters after update".into()));
        }
        Ok(loss)
    }

    /// Fraction of tasks whose top-`k` selection contains the needle.
    pub fn routing_hit_rate(&self, params: &ToyParams, tasks: &[NeedleTask], k: usize) -> Result<f64> {
        if tasks.is_empty() {
            return Err(GazeError::Contract("hit rate over an empty task set".into()));
        }
        let hits: Vec<bool> = tasks
            .par_iter()
            .map(|t| self.routes_to_needle(params, t, k))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|h| **h).count() as f64 / tasks.len() as f64)
    }

    /// Routing only: descriptors of projected keys, no attention.
    fn routes_to_needle(&self, params: &ToyParams, task: &NeedleTask, k: usize) -> Result<bool> {
        let keys = task.features.matmul(&params.key)?;
        let d = self.spec.model_dim;
        let mut desc = Matrix::zeros(self.feature_regions.len(), d);
        for (g, region) in self.feature_regions.iter().enumerate() {
            let row = desc.row_mut(g);
            for &i in &region.token_indices {
                axpy(1.0, keys.row(i), row);
            }
            let n = region.len() as f64;
            row.iter_mut().for_each(|x| *x /= n);
        }
        let q = vec_mat(&task.query, &params.query)?;
        let scores = mat_vec(&desc, &q)?;
        Ok(crate::routing::top_k(&scores, k)?.contains(task.needle))
    }

    pub fn mean_loss(&self, params: &ToyParams, tasks: &[NeedleTask], k: usize) -> Result<f64> {
        let losses: Vec<f64> = tasks
            .par_iter()
            .map(|t| self.loss(params, t, k, None))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / tasks.len() as f64)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `m += xᵀ y`
fn outer_add(m: &mut Matrix, x: &[f64], y: &[f64]) {
    for (i, &a) in x.iter().enumerate() {
        if a != 0.0 {
            axpy(a, y, m.row_mut(i));
        }
    }
}

/// How K evolves over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curriculum {
    pub schedule: Schedule,
    /// When false the ratio is `final_ratio` from the first step.
    pub progressive: bool,
}

impl Curriculum {
    pub fn ratio(&self, step: usize, total: usize) -> f64 {
        if self.progressive {
            schedule_ratio(step, total, &self.schedule)
        } else {
            self.schedule.final_ratio
        }
    }

    pub fn final_ratio(&self) -> f64 {
        self.schedule.final_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub curriculum: Curriculum,
    pub eval_every: usize,
    pub held_out: usize,
    pub seed: u64,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub ratio: f64,
    pub k: usize,
    pub loss: f64,
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub params: ToyParams,
    pub final_k: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_hit_rate: f64,
    pub final_hit_rate: f64,
}

pub const LOG_HEADER: &str = "step,ratio,k,loss,hit_rate";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let hit = self.hit_rate.map_or(String::new(), |h| format!("{h:.6}"));
        format!("{},{:.6},{},{:.9},{}", self.step, self.ratio, self.k, self.loss, hit)
    }
}

/// Held-out tasks and the training stream are derived from `seed` alone.
pub fn held_out_tasks(model: &ToyModel, seed: u64, count: usize) -> Vec<NeedleTask> {
    let mut stream = SeededStream::new(seed ^ 0x4845_4C44_4F55_5421);
    (0..count).map(|_| model.generate(&mut stream)).collect()
}

/// Run the full training loop. Fails with the last good step on divergence.
pub fn train(model: &ToyModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.held_out == 0 || cfg.eval_every == 0 {
        return Err(GazeError::Config("batch, held_out and eval_every must be positive".into()));
    }
    let g = model.region_count();
    let mut init_stream = SeededStream::new(cfg.seed);
    let mut params = ToyParams::init(model.spec(), model.context_tokens(), cfg.init_scale, &mut init_stream);
    let mut task_stream = SeededStream::new(cfg.seed.wrapping_add(0x5452_4149_4E00_0001));
    let held = held_out_tasks(model, cfg.seed, cfg.held_out);

    let final_k = ratio_to_k(cfg.curriculum.final_ratio(), g);
    let start_k = ratio_to_k(cfg.curriculum.ratio(0, cfg.steps.max(1)), g);
    let initial_loss = model.mean_loss(&params, &held, start_k)?;
    let initial_hit_rate = model.routing_hit_rate(&params, &held, final_k)?;

    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let ratio = cfg.curriculum.ratio(step, cfg.steps);
        let k = ratio_to_k(ratio, g);
        let batch: Vec<NeedleTask> = (0..cfg.batch).map(|_| model.generate(&mut task_stream)).collect();
        let loss = model.train_step(&mut params, &batch, cfg.lr, k).map_err(|e| match e {
            GazeError::Numeric(what) => GazeError::Numeric(format!(
                "{what} at step {step}; last good step {}",
                step.checked_sub(1).map_or("none".to_string(), |s| s.to_string())
            )),
            other => other,
        })?;
        let last = step + 1 == cfg.steps;
        if step % cfg.eval_every == 0 || last {
            let hit_rate = Some(model.routing_hit_rate(&params, &held, final_k)?);
            log.push(LogRow {
                step,
                ratio,
                k,
                loss,
                hit_rate,
            });
        }
    }
    let final_loss = model.mean_loss(&params, &held, final_k)?;
    let final_hit_rate = model.routing_hit_rate(&params, &held, final_k)?;
    Ok(TrainOutcome {
        log,
        params,
        final_k,
        initial_loss,
        final_loss,
        initial_hit_rate,
        final_hit_rate,
    })
}
