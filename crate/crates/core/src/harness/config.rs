use std::fmt::Write as _;
use std::str::FromStr;

use crate::adapter::{AblationMode, CopyStrategy};
use crate::backbone::{ModelConfig, TaskKind};
use crate::controls::{ControlKind, FramePosition};
use crate::error::{Error, Result};
use crate::simdata::{DatasetConfig, SimParams};

/// Everything a run needs, read from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Condition frames of a conditional base model.
    pub cond_frames: usize,
    /// Predicted frames `T`.
    pub frames: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Forces `β` to increase with the diffusion step.
    pub beta_increasing: bool,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub frame_dim: usize,
    pub attn_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_every: usize,
    pub blocks: usize,
    pub strategy: CopyStrategy,
    pub control: ControlKind,
    pub ablation: AblationMode,
    /// Frames handed to a frame control.
    pub control_frames: usize,
    pub frame_position: FramePosition,
    pub samples: usize,
    /// Test records used by evaluation; 0 means all.
    pub eval_records: usize,
    pub bins: usize,
    pub particles: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub test_records: usize,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            task: TaskKind::Uncond,
            cond_frames: 0,
            frames: 8,
            diffusion_steps: 100,
            beta_start: 0.02,
            beta_end: 0.0001,
            beta_increasing: false,
            hidden: 32,
            layers: 2,
            time_dim: 16,
            frame_dim: 8,
            attn_dim: 8,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            val_every: 100,
            blocks: 2,
            strategy: CopyStrategy::Strided,
            control: ControlKind::Frame,
            ablation: AblationMode::Standard,
            control_frames: 4,
            frame_position: FramePosition::Prefix,
            samples: 5,
            eval_records: 20,
            bins: 50,
            particles: 5,
            train_records: 300,
            val_records: 100,
            test_records: 100,
        }
    }

    pub fn full() -> Self {
        Self {
            cond_frames: 10,
            frames: 20,
            diffusion_steps: 1000,
            hidden: 128,
            layers: 6,
            time_dim: 32,
            batch_size: 128,
            steps: 100_000,
            lr: 1e-4,
            blocks: 3,
            control_frames: 15,
            eval_records: 0,
            train_records: 3000,
            val_records: 2000,
            test_records: 2000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("frames", self.frames),
            ("diffusion_steps", self.diffusion_steps),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("time_dim", self.time_dim),
            ("frame_dim", self.frame_dim),
            ("attn_dim", self.attn_dim),
            ("batch_size", self.batch_size),
            ("val_every", self.val_every),
            ("blocks", self.blocks),
            ("samples", self.samples),
            ("bins", self.bins),
            ("particles", self.particles),
            ("train_records", self.train_records),
            ("val_records", self.val_records),
            ("test_records", self.test_records),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.task == TaskKind::Cond && self.cond_frames == 0 {
            return Err(Error::Config("a conditional task needs cond_frames ≥ 1".into()));
        }
        if self.control == ControlKind::Frame && self.control_frames == 0 {
            return Err(Error::Config("frame control needs control_frames ≥ 1".into()));
        }
        if self.control == ControlKind::Subgraph && self.particles < 2 {
            return Err(Error::Config("subgraph control needs at least 2 particles".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr = {} must be non-negative", self.lr)));
        }
        if self.blocks > self.layers {
            return Err(Error::Config(format!(
                "{} blocks for {} layers",
                self.blocks, self.layers
            )));
        }
        self.model_config(2).validate()
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            kind: self.task,
            feature_dim,
            hidden: self.hidden,
            layers: self.layers,
            time_dim: self.time_dim,
            frame_dim: self.frame_dim,
            attn_dim: self.attn_dim,
            frames: self.frames,
            cond_frames: if self.task == TaskKind::Cond {
                self.cond_frames
            } else {
                0
            },
            diffusion_steps: self.diffusion_steps,
        }
    }

    /// Frames before the predicted window.
    pub fn context_frames(&self) -> usize {
        let cond = if self.task == TaskKind::Cond {
            self.cond_frames
        } else {
            0
        };
        let ctrl = match (self.control, self.frame_position) {
            (ControlKind::Frame, FramePosition::Prefix) => self.control_frames,
            _ => 0,
        };
        cond.max(ctrl)
    }

    /// Frames every record must hold.
    pub fn record_frames(&self) -> usize {
        let after = match (self.control, self.frame_position) {
            (ControlKind::Frame, FramePosition::Suffix) => self.control_frames,
            _ => 0,
        };
        self.context_frames() + self.frames + after
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            particles: self.particles,
            frames: self.record_frames(),
            train: self.train_records,
            val: self.val_records,
            test: self.test_records,
            seed: self.seed,
            sim: SimParams::default(),
        }
    }

    /// Applies `key = value` lines on top of `self`. `preset = desk|full`
    /// resets every field before later lines apply.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::desk().apply(text)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "preset" => {
                *self = match value {
                    "desk" => Self::desk(),
                    "full" => Self::full(),
                    other => return Err(Error::Config(format!("unknown preset `{other}`"))),
                }
            }
            "task" => self.task = value.parse()?,
            "cond_frames" => self.cond_frames = p(key, value)?,
            "frames" => self.frames = p(key, value)?,
            "diffusion_steps" => self.diffusion_steps = p(key, value)?,
            "beta_start" => self.beta_start = p(key, value)?,
            "beta_end" => self.beta_end = p(key, value)?,
            "beta_increasing" => self.beta_increasing = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "time_dim" => self.time_dim = p(key, value)?,
            "frame_dim" => self.frame_dim = p(key, value)?,
            "attn_dim" => self.attn_dim = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "val_every" => self.val_every = p(key, value)?,
            "blocks" => self.blocks = p(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "control" => self.control = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "control_frames" => self.control_frames = p(key, value)?,
            "frame_position" => {
                self.frame_position = match value {
                    "prefix" => FramePosition::Prefix,
                    "suffix" => FramePosition::Suffix,
                    other => return Err(Error::Config(format!("unknown frame position `{other}`"))),
                }
            }
            "samples" => self.samples = p(key, value)?,
            "eval_records" => self.eval_records = p(key, value)?,
            "bins" => self.bins = p(key, value)?,
            "particles" => self.particles = p(key, value)?,
            "train_records" => self.train_records = p(key, value)?,
            "val_records" => self.val_records = p(key, value)?,
            "test_records" => self.test_records = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `key = value`; parses back to an equal config.
    pub fn echo(&self) -> String {
        let pos = match self.frame_position {
            FramePosition::Prefix => "prefix",
            FramePosition::Suffix => "suffix",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.as_str().into()),
            ("cond_frames", self.cond_frames.to_string()),
            ("frames", self.frames.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("beta_start", format!("{:?}", self.beta_start)),
            ("beta_end", format!("{:?}", self.beta_end)),
            ("beta_increasing", self.beta_increasing.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("frame_dim", self.frame_dim.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("seed", self.seed.to_string()),
            ("val_every", self.val_every.to_string()),
            ("blocks", self.blocks.to_string()),
            ("strategy", self.strategy.as_str().into()),
            ("control", self.control.as_str().into()),
            ("ablation", self.ablation.as_str().into()),
            ("control_frames", self.control_frames.to_string()),
            ("frame_position", pos.into()),
            ("samples", self.samples.to_string()),
            ("eval_records", self.eval_records.to_string()),
            ("bins", self.bins.to_string()),
            ("particles", self.particles.to_string()),
            ("train_records", self.train_records.to_string()),
            ("val_records", self.val_records.to_string()),
            ("test_records", self.test_records.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        for c in [RunConfig::desk(), RunConfig::full()] {
            assert_eq!(RunConfig::parse(&c.echo()).unwrap(), c);
        }
    }

    #[test]
    fn full_preset_values() {
        let c = RunConfig::parse("preset = full").unwrap();
        assert_eq!(
            (c.diffusion_steps, c.batch_size, c.lr, c.layers, c.hidden, c.time_dim),
            (1000, 128, 0.0001, 6, 128, 32)
        );
        assert_eq!((c.beta_start, c.beta_end), (0.02, 0.0001));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(RunConfig::parse("hidden = lots").is_err());
        assert!(RunConfig::parse("task = cond\ncond_frames = 0").is_err());
        assert!(RunConfig::parse("just words").is_err());
        let c = RunConfig::parse("# comment\n\nsteps = 5 # trailing\n").unwrap();
        assert_eq!(c.steps, 5);
    }

    #[test]
    fn window_lengths() {
        let c = RunConfig::desk();
        assert_eq!((c.context_frames(), c.record_frames()), (4, 12));
        let c = RunConfig::parse("frame_position = suffix").unwrap();
        assert_eq!((c.context_frames(), c.record_frames()), (0, 12));
        let c = RunConfig::parse("preset = full\ntask = cond").unwrap();
        assert_eq!(c.record_frames(), 35);
    }
}
