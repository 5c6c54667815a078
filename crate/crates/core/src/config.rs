//! Flat `key = value` training configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::world::ClipDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub p_reference_drop: f64,
    pub p_label_drop: f64,
    pub p_clean: f64,
    pub cfg_scale: f64,
    pub window: usize,
    pub clip_frames: usize,
    pub model: DenoiserConfig,
}

fn parse_value<V: FromStr>(v: &str) -> std::result::Result<V, String>
where
    V::Err: fmt::Display,
{
    v.parse().map_err(|e: V::Err| e.to_string())
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (steps, lr) = match stage {
            Stage::Teacher => (2000, 1e-3),
            Stage::Stage1 => (1000, 5e-4),
            Stage::Stage2 => (1000, 1e-5),
        };
        Self {
            stage,
            steps,
            batch_size: 8,
            lr,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 250,
            p_reference_drop: 0.5,
            p_label_drop: 0.1,
            p_clean: 0.2,
            cfg_scale: 5.0,
            window: 5,
            clip_frames: 20,
            model: DenoiserConfig::default(),
        }
    }

    /// Apply `key = value` lines over the stage defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn parse(text: &str, stage: Stage) -> Result<Self> {
        let mut c = Self::defaults(stage);
        let mut lr_set = false;
        let mut stage_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |e: String| Error::Config(format!("line {}: {k}: {e}", n + 1));
            macro_rules! set {
                ($field:expr) => {
                    $field = parse_value(v).map_err(bad)?
                };
            }
            match k {
                "stage" => {
                    set!(c.stage);
                    stage_set = true;
                }
                "steps" => set!(c.steps),
                "batch_size" => set!(c.batch_size),
                "lr" => {
                    set!(c.lr);
                    lr_set = true;
                }
                "weight_decay" => set!(c.weight_decay),
                "grad_clip" => set!(c.grad_clip),
                "seed" => set!(c.seed),
                "checkpoint_every" => set!(c.checkpoint_every),
                "p_reference_drop" => set!(c.p_reference_drop),
                "p_label_drop" => set!(c.p_label_drop),
                "p_clean" => set!(c.p_clean),
                "cfg_scale" => set!(c.cfg_scale),
                "window" => set!(c.window),
                "clip_frames" => set!(c.clip_frames),
                "layers" => set!(c.model.layers),
                "heads" => set!(c.model.heads),
                "d_model" => set!(c.model.d_model),
                "d_mlp" => set!(c.model.d_mlp),
                "c_frames" => set!(c.model.c_frames),
                "height" => set!(c.model.height),
                "width" => set!(c.model.width),
                "patch" => set!(c.model.patch),
                "position_window" => set!(c.model.position_window),
                "t_features" => set!(c.model.t_features),
                "n_effect_labels" => set!(c.model.n_effect_labels),
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        if stage_set && !lr_set {
            c.lr = Self::defaults(c.stage).lr;
        }
        c.model.d_tok = c.model.patch * c.model.patch * c.model.channels;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, stage: Stage) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("batch_size and window must be positive".into()));
        }
        if self.clip_frames == 0 || self.clip_frames % self.model.c_frames != 0 {
            return Err(Error::Config(format!(
                "clip_frames {} is not a multiple of c_frames {}",
                self.clip_frames, self.model.c_frames
            )));
        }
        for (name, p) in [("p_reference_drop", self.p_reference_drop), ("p_label_drop", self.p_label_drop), ("p_clean", self.p_clean)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.lr >= 0.0) || !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("lr and cfg_scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ClipDims {
        ClipDims { frames: self.clip_frames, height: self.model.height, width: self.model.width }
    }

    pub fn chunks(&self) -> usize {
        self.clip_frames / self.model.c_frames
    }
}
