//! Run configuration: a flat `key = value` file, `#` starts a comment.
//!
//! Every key is optional and falls back to [`RunConfig::default`]; unknown
//! or repeated keys are rejected. [`RunConfig::to_text`] writes every key, so
//! a dumped config reproduces the run that produced it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cost_model::ModelGeometry;
use crate::error::{GazeError, Result};
use crate::layout::{region_count, BlockExtents, TokenVolume};
use crate::numerics::Precision;
use crate::routing::{RoutingConfig, Schedule};
use crate::trainer::{Curriculum, TaskSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Residency {
    /// Regions stay in the fast tier once loaded.
    #[default]
    Persistent,
    /// The fast tier is emptied before every decoding step.
    ResetPerStep,
}

impl Residency {
    pub fn as_str(self) -> &'static str {
        match self {
            Residency::Persistent => "persistent",
            Residency::ResetPerStep => "reset-per-step",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub head_dim: usize,
    pub input_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub block_t: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub top_k: usize,
    pub context_tokens: usize,
    pub text_len: usize,
    pub precision: Precision,
    pub kv_element_bytes: usize,
    pub residency: Residency,
    pub seed: u64,
    pub noise: f64,
    pub signal_scale: f64,
    pub decode_steps: usize,
    pub needles: usize,
    pub heatmap_layer: usize,
    pub heatmap_head: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub init_scale: f64,
    pub final_ratio: f64,
    pub decay_end_fraction: f64,
    pub eval_every: usize,
    pub held_out: usize,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 1,
            height: 24,
            width: 24,
            head_dim: 32,
            input_dim: 32,
            layers: 1,
            heads: 1,
            block_t: 1,
            block_h: 6,
            block_w: 6,
            top_k: 2,
            context_tokens: 4,
            text_len: 0,
            precision: Precision::Double,
            kv_element_bytes: 4,
            residency: Residency::Persistent,
            seed: 7,
            noise: 0.1,
            signal_scale: 1.0,
            decode_steps: 8,
            needles: 3,
            heatmap_layer: 0,
            heatmap_head: 0,
            steps: 2000,
            batch: 16,
            lr: 2.0,
            init_scale: 1.0,
            final_ratio: 0.1,
            decay_end_fraction: 0.6,
            eval_every: 100,
            held_out: 500,
            workers: 1,
            out_dir: None,
        }
    }
}

/// Keys in the order they are written, with one-line descriptions.
pub const SCHEMA: &[(&str, &str)] = &[
    ("frames", "visual units T (frames or images)"),
    ("height", "token grid height H per unit"),
    ("width", "token grid width W per unit"),
    ("head_dim", "key/value dimension d"),
    ("input_dim", "raw feature dimension (defaults to head_dim)"),
    ("layers", "attention layers L"),
    ("heads", "attention heads per layer"),
    ("block_t", "region extent in frames"),
    ("block_h", "region extent in rows"),
    ("block_w", "region extent in columns"),
    ("top_k", "regions selected per query and head"),
    ("context_tokens", "context tokens per unit |C|"),
    ("text_len", "prompt text tokens"),
    ("precision", "storage precision: single | double"),
    ("kv_element_bytes", "bytes per element for transfer and memory accounting"),
    ("residency", "fast-tier policy: persistent | reset-per-step"),
    ("seed", "master seed"),
    ("noise", "feature noise scale"),
    ("signal_scale", "needle signal scale"),
    ("decode_steps", "decoding steps S"),
    ("needles", "needle regions planted in a decode scene"),
    ("heatmap_layer", "layer whose weights are rendered"),
    ("heatmap_head", "head whose weights are rendered"),
    ("steps", "training steps"),
    ("batch", "tasks per training step"),
    ("lr", "gradient descent learning rate"),
    ("init_scale", "projection init std times sqrt(input_dim)"),
    ("final_ratio", "final region selection ratio"),
    ("decay_end_fraction", "fraction of training after which the ratio is fixed"),
    ("eval_every", "training steps between hit-rate evaluations"),
    ("held_out", "held-out tasks for evaluation"),
    ("workers", "worker threads, 0 = one per core; results do not depend on it"),
    ("out_dir", "default output directory"),
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| GazeError::Config(format!("{key} = {raw}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        let mut input_dim_set = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GazeError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(GazeError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            input_dim_set |= key == "input_dim";
            cfg.set(key, value)
                .map_err(|e| GazeError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        if !input_dim_set {
            cfg.input_dim = cfg.head_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "frames" => self.frames = parse_value(key, v)?,
            "height" => self.height = parse_value(key, v)?,
            "width" => self.width = parse_value(key, v)?,
            "head_dim" => self.head_dim = parse_value(key, v)?,
            "input_dim" => self.input_dim = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "block_t" => self.block_t = parse_value(key, v)?,
            "block_h" => self.block_h = parse_value(key, v)?,
            "block_w" => self.block_w = parse_value(key, v)?,
            "top_k" => self.top_k = parse_value(key, v)?,
            "context_tokens" => self.context_tokens = parse_value(key, v)?,
            "text_len" => self.text_len = parse_value(key, v)?,
            "precision" => {
                self.precision = Precision::parse(v)
                    .ok_or_else(|| GazeError::Config(format!("precision = {v}: expected single or double")))?
            }
            "kv_element_bytes" => self.kv_element_bytes = parse_value(key, v)?,
            "residency" => {
                self.residency = match v {
                    "persistent" => Residency::Persistent,
                    "reset-per-step" => Residency::ResetPerStep,
                    _ => {
                        return Err(GazeError::Config(format!(
                            "residency = {v}: expected persistent or reset-per-step"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "signal_scale" => self.signal_scale = parse_value(key, v)?,
            "decode_steps" => self.decode_steps = parse_value(key, v)?,
            "needles" => self.needles = parse_value(key, v)?,
            "heatmap_layer" => self.heatmap_layer = parse_value(key, v)?,
            "heatmap_head" => self.heatmap_head = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "init_scale" => self.init_scale = parse_value(key, v)?,
            "final_ratio" => self.final_ratio = parse_value(key, v)?,
            "decay_end_fraction" => self.decay_end_fraction = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "held_out" => self.held_out = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => return Err(GazeError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("head_dim", self.head_dim),
            ("input_dim", self.input_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_element_bytes", self.kv_element_bytes),
            ("batch", self.batch),
            ("eval_every", self.eval_every),
            ("held_out", self.held_out),
            ("needles", self.needles),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(GazeError::Config(format!("{name} must be at least 1")));
        }
        self.routing().validate()?;
        if self.heatmap_layer >= self.layers || self.heatmap_head >= self.heads {
            return Err(GazeError::Config("heatmap layer/head out of range".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(GazeError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(GazeError::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for (key, _) in SCHEMA {
            let value = match *key {
                "frames" => self.frames.to_string(),
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "head_dim" => self.head_dim.to_string(),
                "input_dim" => self.input_dim.to_string(),
                "layers" => self.layers.to_string(),
                "heads" => self.heads.to_string(),
                "block_t" => self.block_t.to_string(),
                "block_h" => self.block_h.to_string(),
                "block_w" => self.block_w.to_string(),
                "top_k" => self.top_k.to_string(),
                "context_tokens" => self.context_tokens.to_string(),
                "text_len" => self.text_len.to_string(),
                "precision" => self.precision.as_str().to_string(),
                "kv_element_bytes" => self.kv_element_bytes.to_string(),
                "residency" => self.residency.as_str().to_string(),
                "seed" => self.seed.to_string(),
                "noise" => format!("{:?}", self.noise),
                "signal_scale" => format!("{:?}", self.signal_scale),
                "decode_steps" => self.decode_steps.to_string(),
                "needles" => self.needles.to_string(),
                "heatmap_layer" => self.heatmap_layer.to_string(),
                "heatmap_head" => self.heatmap_head.to_string(),
                "steps" => self.steps.to_string(),
                "batch" => self.batch.to_string(),
                "lr" => format!("{:?}", self.lr),
                "init_scale" => format!("{:?}", self.init_scale),
                "final_ratio" => format!("{:?}", self.final_ratio),
                "decay_end_fraction" => format!("{:?}", self.decay_end_fraction),
                "eval_every" => self.eval_every.to_string(),
                "held_out" => self.held_out.to_string(),
                "workers" => self.workers.to_string(),
                "out_dir" => match &self.out_dir {
                    Some(p) => p.display().to_string(),
                    None => continue,
                },
                _ => unreachable!("schema key without a writer"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn schema_help() -> String {
        let mut out = String::from("config keys (flat `key = value`, `#` comments):\n");
        let defaults = RunConfig::default();
        let dump = defaults.to_text();
        for (key, help) in SCHEMA {
            let default = dump
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key} = ")))
                .unwrap_or("unset");
            let _ = writeln!(out, "  {key:<20} {help} [default: {default}]");
        }
        out
    }

    /// Every key with its description and default, as shipped in `configs/reference.conf`.
    pub fn reference_text() -> String {
        let dump = RunConfig::default().to_text();
        let mut out = String::from("# Reference configuration: every key at its default value.\n");
        for (key, help) in SCHEMA {
            let line = dump.lines().find(|l| l.starts_with(&format!("{key} = ")));
            let _ = writeln!(out, "\n# {help}");
            match line {
                Some(l) => out.push_str(l),
                None => out.push_str(&format!("# {key} = out")),
            }
            out.push('\n');
        }
        out
    }

    pub fn volume(&self) -> Result<TokenVolume> {
        TokenVolume::new(self.frames, self.height, self.width)
    }

    pub fn block(&self) -> BlockExtents {
        BlockExtents::new(self.block_t, self.block_h, self.block_w)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            final_ratio: self.final_ratio,
            decay_end_fraction: self.decay_end_fraction,
        }
    }

    pub fn routing(&self) -> RoutingConfig {
        RoutingConfig {
            top_k: self.top_k,
            block: self.block(),
            context_tokens: self.context_tokens,
            schedule: self.schedule(),
        }
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        Ok(TaskSpec {
            volume: self.volume()?,
            block: self.block(),
            input_dim: self.input_dim,
            model_dim: self.head_dim,
            noise: self.noise,
            signal_scale: self.signal_scale,
        })
    }

    pub fn train_config(&self, progressive: bool) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            curriculum: Curriculum {
                schedule: self.schedule(),
                progressive,
            },
            eval_every: self.eval_every,
            held_out: self.held_out,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }

    pub fn geometry(&self) -> Result<ModelGeometry> {
        let volume = self.volume()?;
        let block = self.block();
        Ok(ModelGeometry {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            element_bytes: self.kv_element_bytes,
            text_len: self.text_len,
            units: self.frames,
            tokens_per_unit: volume.tokens_per_frame(),
            region_size: block.volume(),
            region_count: region_count(&volume, block),
            top_k: self.top_k,
            context_per_unit: self.context_tokens,
        })
    }
}
