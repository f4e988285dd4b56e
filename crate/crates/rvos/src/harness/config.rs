//! Run configuration: flat `key = value` files with typed keys.
//!
//! One [`RunConfig`] drives model construction, training, and evaluation,
//! so a checkpoint can embed its full configuration as plain text and a
//! later process can rebuild the identical model. Unknown keys are errors —
//! a typo must not silently train a different model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossWeights;

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Feature width shared by every block.
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    /// Add sinusoidal grid positions before the feature encoder.
    pub positional: bool,
    /// Spectral stages around the fusion gate (ablation switch).
    pub scf_enabled: bool,
    /// Base bandwidth of the adaptive low-pass filter.
    pub scf_bandwidth: f64,
    /// Patch edge of the mask logits (4 reaches full resolution).
    pub cpk_patch: usize,
    /// Hidden width of the per-query conditional kernels.
    pub cpk_hidden: usize,
    /// Feature-conditioned mask refinement (ablation switch).
    pub mso_enabled: bool,
    pub loss: LossWeights,
    pub train_iters: usize,
    pub train_lr: f64,
    pub train_momentum: f64,
    /// Global gradient-norm clip (0 disables).
    pub train_clip: f64,
    pub train_seed: u64,
    pub train_scenes: usize,
    pub train_frames: usize,
    pub train_height: usize,
    pub train_width: usize,
    pub train_objects: usize,
    /// Expressions generated per object (1..=3 phrasing variants).
    pub train_paraphrases: usize,
    pub train_log_every: usize,
    /// Evaluate the training set every this many iterations (0 = never).
    pub train_eval_every: usize,
    /// Stop early once the training-set J&F reaches this value (0 = never).
    pub train_target_jf: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 5,
            positional: true,
            scf_enabled: true,
            scf_bandwidth: 0.25,
            cpk_patch: 4,
            cpk_hidden: 16,
            mso_enabled: true,
            loss: LossWeights::default(),
            train_iters: 2000,
            train_lr: 0.12,
            train_momentum: 0.9,
            train_clip: 0.5,
            train_seed: 17,
            train_scenes: 8,
            train_frames: 3,
            train_height: 64,
            train_width: 64,
            train_objects: 2,
            train_paraphrases: 1,
            train_log_every: 50,
            train_eval_every: 100,
            train_target_jf: 0.0,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got {value:?}"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.dim" => self.dim = parse_usize(key, value)?,
            "model.enc_layers" => self.enc_layers = parse_usize(key, value)?,
            "model.dec_layers" => self.dec_layers = parse_usize(key, value)?,
            "model.num_queries" => self.num_queries = parse_usize(key, value)?,
            "model.positional" => self.positional = parse_bool(key, value)?,
            "scf.enabled" => self.scf_enabled = parse_bool(key, value)?,
            "scf.bandwidth" => self.scf_bandwidth = parse_f64(key, value)?,
            "cpk.patch" => self.cpk_patch = parse_usize(key, value)?,
            "cpk.hidden" => self.cpk_hidden = parse_usize(key, value)?,
            "mso.enabled" => self.mso_enabled = parse_bool(key, value)?,
            "loss.lambda_dice" => self.loss.dice = parse_f64(key, value)?,
            "loss.lambda_focal" => self.loss.focal = parse_f64(key, value)?,
            "loss.lambda_l1" => self.loss.l1 = parse_f64(key, value)?,
            "loss.lambda_giou" => self.loss.giou = parse_f64(key, value)?,
            "loss.lambda_score" => self.loss.score = parse_f64(key, value)?,
            "loss.dice_eps" => self.loss.dice_eps = parse_f64(key, value)?,
            "loss.focal_alpha" => self.loss.focal_alpha = parse_f64(key, value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = parse_f64(key, value)?,
            "train.iters" => self.train_iters = parse_usize(key, value)?,
            "train.lr" => self.train_lr = parse_f64(key, value)?,
            "train.momentum" => self.train_momentum = parse_f64(key, value)?,
            "train.clip" => self.train_clip = parse_f64(key, value)?,
            "train.seed" => self.train_seed = parse_u64(key, value)?,
            "train.scenes" => self.train_scenes = parse_usize(key, value)?,
            "train.frames" => self.train_frames = parse_usize(key, value)?,
            "train.height" => self.train_height = parse_usize(key, value)?,
            "train.width" => self.train_width = parse_usize(key, value)?,
            "train.objects" => self.train_objects = parse_usize(key, value)?,
            "train.paraphrases" => self.train_paraphrases = parse_usize(key, value)?,
            "train.log_every" => self.train_log_every = parse_usize(key, value)?,
            "train.eval_every" => self.train_eval_every = parse_usize(key, value)?,
            "train.target_jf" => self.train_target_jf = parse_f64(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config body: one `key = value` per line, `#` comments,
    /// blank lines ignored. Later assignments override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Serializes every key; [`RunConfig::parse`] of the output reproduces
    /// the configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.dim = {}", self.dim);
        let _ = writeln!(s, "model.enc_layers = {}", self.enc_layers);
        let _ = writeln!(s, "model.dec_layers = {}", self.dec_layers);
        let _ = writeln!(s, "model.num_queries = {}", self.num_queries);
        let _ = writeln!(s, "model.positional = {}", self.positional);
        let _ = writeln!(s, "scf.enabled = {}", self.scf_enabled);
        let _ = writeln!(s, "scf.bandwidth = {}", self.scf_bandwidth);
        let _ = writeln!(s, "cpk.patch = {}", self.cpk_patch);
        let _ = writeln!(s, "cpk.hidden = {}", self.cpk_hidden);
        let _ = writeln!(s, "mso.enabled = {}", self.mso_enabled);
        let _ = writeln!(s, "loss.lambda_dice = {}", self.loss.dice);
        let _ = writeln!(s, "loss.lambda_focal = {}", self.loss.focal);
        let _ = writeln!(s, "loss.lambda_l1 = {}", self.loss.l1);
        let _ = writeln!(s, "loss.lambda_giou = {}", self.loss.giou);
        let _ = writeln!(s, "loss.lambda_score = {}", self.loss.score);
        let _ = writeln!(s, "loss.dice_eps = {}", self.loss.dice_eps);
        let _ = writeln!(s, "loss.focal_alpha = {}", self.loss.focal_alpha);
        let _ = writeln!(s, "loss.focal_gamma = {}", self.loss.focal_gamma);
        let _ = writeln!(s, "train.iters = {}", self.train_iters);
        let _ = writeln!(s, "train.lr = {}", self.train_lr);
        let _ = writeln!(s, "train.momentum = {}", self.train_momentum);
        let _ = writeln!(s, "train.clip = {}", self.train_clip);
        let _ = writeln!(s, "train.seed = {}", self.train_seed);
        let _ = writeln!(s, "train.scenes = {}", self.train_scenes);
        let _ = writeln!(s, "train.frames = {}", self.train_frames);
        let _ = writeln!(s, "train.height = {}", self.train_height);
        let _ = writeln!(s, "train.width = {}", self.train_width);
        let _ = writeln!(s, "train.objects = {}", self.train_objects);
        let _ = writeln!(s, "train.paraphrases = {}", self.train_paraphrases);
        let _ = writeln!(s, "train.log_every = {}", self.train_log_every);
        let _ = writeln!(s, "train.eval_every = {}", self.train_eval_every);
        let _ = writeln!(s, "train.target_jf = {}", self.train_target_jf);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return fail("model.dim must be positive".into());
        }
        if self.positional && self.dim % 4 != 0 {
            return fail(format!(
                "model.positional needs model.dim divisible by 4, got {}",
                self.dim
            ));
        }
        if self.num_queries == 0 {
            return fail("model.num_queries must be positive".into());
        }
        if !(self.scf_bandwidth > 0.0) {
            return fail(format!("scf.bandwidth must be positive, got {}", self.scf_bandwidth));
        }
        if self.cpk_patch == 0 || self.cpk_hidden == 0 {
            return fail("cpk.patch and cpk.hidden must be positive".into());
        }
        if self.train_height % 32 != 0 || self.train_width % 32 != 0 {
            return fail(format!(
                "frame size must be divisible by 32 (feature strides), got {}x{}",
                self.train_height, self.train_width
            ));
        }
        if self.train_frames == 0 || self.train_scenes == 0 || self.train_objects == 0 {
            return fail("train.frames, train.scenes, and train.objects must be positive".into());
        }
        if !(1..=3).contains(&self.train_paraphrases) {
            return fail(format!(
                "train.paraphrases supports 1..=3 phrasings, got {}",
                self.train_paraphrases
            ));
        }
        if !(self.train_lr > 0.0) {
            return fail(format!("train.lr must be positive, got {}", self.train_lr));
        }
        if !(0.0..1.0).contains(&self.train_momentum) {
            return fail(format!(
                "train.momentum must be in [0, 1), got {}",
                self.train_momentum
            ));
        }
        if self.train_iters == 0 {
            return fail("train.iters must be positive".into());
        }
        if self.train_clip < 0.0 {
            return fail(format!("train.clip must be non-negative, got {}", self.train_clip));
        }
        Ok(())
    }
}
