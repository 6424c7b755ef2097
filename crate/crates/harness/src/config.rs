//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use slotforge_core::losses::LossConfig;
use slotforge_world::{ScenarioConfig, Subset};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub subset: Subset,
    /// 0 keeps the subset default.
    pub min_objects: usize,
    pub max_objects: usize,
    /// 0 keeps the subset default (one shared scene for goal, fresh layouts otherwise).
    pub n_layouts: usize,
    pub gripper_instance: bool,
    pub idle_frames: usize,
    pub noop_eps: f64,
    pub episodes: usize,
    pub holdout: usize,
    pub seed: u64,

    pub num_slots: usize,
    pub keep: usize,
    pub num_relations: usize,
    pub slot_iters: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub mlp_hidden: usize,
    pub decoder_layers: usize,
    pub bins: usize,
    pub patch: usize,

    pub batch: usize,
    pub clip_len: usize,
    pub iters1: usize,
    pub iters2: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub threads: usize,
    pub log_every: usize,

    pub filter_on: bool,
    pub carryover_on: bool,
    pub relations_on: bool,
    pub relation_carryover: bool,
    pub track_projection: bool,

    pub lambda_slot_attn: f64,
    pub lambda_track: f64,
    pub lambda_int: f64,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_seg: f64,
    pub tau: f64,
    pub w_pos: f64,
    pub w_neg: f64,
    pub track_window: usize,

    pub eval_tasks: usize,
    pub rollouts: usize,
    pub max_rollout_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let l = LossConfig::default();
        RunConfig {
            subset: Subset::Goal,
            min_objects: 0,
            max_objects: 0,
            n_layouts: 0,
            gripper_instance: true,
            idle_frames: 0,
            noop_eps: 1e-3,
            episodes: 20,
            holdout: 5,
            seed: 0,
            num_slots: 16,
            keep: 4,
            num_relations: 16,
            slot_iters: 3,
            dim: 64,
            heads: 4,
            ff_mult: 2,
            mlp_hidden: 128,
            decoder_layers: 2,
            bins: 256,
            patch: 8,
            batch: 8,
            clip_len: 4,
            iters1: 5000,
            iters2: 4000,
            lr1: 3e-4,
            lr2: 3e-4,
            warmup: 100,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            threads: 8,
            log_every: 10,
            filter_on: true,
            carryover_on: true,
            relations_on: true,
            relation_carryover: false,
            track_projection: true,
            lambda_slot_attn: l.slot_attn,
            lambda_track: l.track,
            // Doubled relevance weight: at 1.0 held-out AUC plateaus near 0.90.
            lambda_int: 2.0 * l.int,
            lambda_box: l.r#box,
            lambda_obj: l.obj,
            lambda_seg: l.seg,
            tau: l.tau,
            w_pos: l.w_pos,
            w_neg: l.w_neg,
            track_window: l.track_window,
            eval_tasks: 5,
            rollouts: 20,
            max_rollout_steps: 80,
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

macro_rules! fields {
    ($mac:ident) => {
        $mac! {
            min_objects: usize, max_objects: usize, n_layouts: usize, gripper_instance: bool,
            idle_frames: usize, noop_eps: f64, episodes: usize, holdout: usize, seed: u64,
            num_slots: usize, keep: usize, num_relations: usize, slot_iters: usize, dim: usize,
            heads: usize, ff_mult: usize, mlp_hidden: usize, decoder_layers: usize, bins: usize,
            patch: usize, batch: usize, clip_len: usize, iters1: usize, iters2: usize, lr1: f64,
            lr2: f64, warmup: usize, min_lr_ratio: f64, grad_clip: f64, threads: usize,
            log_every: usize, filter_on: bool, carryover_on: bool, relations_on: bool,
            relation_carryover: bool, track_projection: bool, lambda_slot_attn: f64,
            lambda_track: f64, lambda_int: f64, lambda_box: f64, lambda_obj: f64, lambda_seg: f64,
            tau: f64, w_pos: f64, w_neg: f64, track_window: usize, eval_tasks: usize,
            rollouts: usize, max_rollout_steps: usize
        }
    };
}

trait FieldValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl FieldValue for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl FieldValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl FieldValue for bool {
    fn parse_value(s: &str) -> Option<Self> {
        parse_bool(s)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        if key == "subset" {
            self.subset = Subset::parse(value).ok_or_else(bad)?;
            return Ok(());
        }
        macro_rules! setter {
            ($($name:ident: $ty:ty),*) => {
                match key {
                    $(stringify!($name) => self.$name = <$ty as FieldValue>::parse_value(value).ok_or_else(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
            };
        }
        fields!(setter);
        Ok(())
    }

    /// Canonical `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "subset = {}", self.subset.name());
        macro_rules! render {
            ($($name:ident: $ty:ty),*) => {
                $(let _ = writeln!(out, "{} = {}", stringify!($name), FieldValue::render(&self.$name));)*
            };
        }
        fields!(render);
        out
    }

    /// Blank lines and `#` comments are ignored; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides, then re-validates.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self, ConfigError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: "--override".into(),
                value: o.clone(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.keep == 0 || self.keep > self.num_slots {
            return fail("keep must lie in 1..=num_slots");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail("dim must be a positive multiple of heads");
        }
        if self.bins < 2 {
            return fail("bins must be at least 2");
        }
        if self.patch == 0 || 64 % self.patch != 0 {
            return fail("patch must divide the 64-pixel canvas");
        }
        if self.batch == 0 || self.clip_len == 0 || self.slot_iters == 0 || self.num_relations == 0 {
            return fail("batch, clip_len, slot_iters and num_relations must be positive");
        }
        if self.lambda_track > 0.0 && self.clip_len < 2 {
            return fail("tracking needs clip_len >= 2");
        }
        if self.threads == 0 {
            return fail("threads must be positive");
        }
        if !(self.lr1 > 0.0 && self.lr2 > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("min_lr_ratio must lie in [0, 1]");
        }
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scenario().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            slot_attn: self.lambda_slot_attn,
            track: self.lambda_track,
            int: self.lambda_int,
            r#box: self.lambda_box,
            obj: self.lambda_obj,
            seg: self.lambda_seg,
            tau: self.tau,
            w_pos: self.w_pos,
            w_neg: self.w_neg,
            track_window: self.track_window,
            ..LossConfig::default()
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        let mut s = ScenarioConfig::for_subset(self.subset);
        if self.min_objects > 0 {
            s.min_objects = self.min_objects;
        }
        if self.max_objects > 0 {
            s.max_objects = self.max_objects;
        }
        s.min_objects = s.min_objects.min(s.max_objects);
        if self.n_layouts > 0 {
            s.n_layouts = Some(self.n_layouts);
        }
        s.gripper_instance = self.gripper_instance;
        s.idle_frames = self.idle_frames;
        s.noop_eps = self.noop_eps;
        s
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        self.to_text()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.subset = Subset::Long;
        c.lr1 = 1.25e-4;
        c.filter_on = false;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::default()
            .with_overrides(&["keep=2".into(), "carryover_on=off".into()])
            .unwrap();
        assert_eq!(c.keep, 2);
        assert!(!c.carryover_on);
        assert!(matches!(RunConfig::parse("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("keep"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("keep = 17"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::parse("dim = x"), Err(ConfigError::BadValue { .. })));
    }
}
