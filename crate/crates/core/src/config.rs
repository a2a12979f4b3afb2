//! Flat `key = value` run configuration.
//!
//! Every tunable of the pipeline is one key. Keys not listed in [`KEYS`] are
//! rejected. A `profile` key, wherever it appears, is applied first and
//! supplies the defaults the remaining lines override.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::distill::{AlphaMode, AlphaSchedule, CurriculumMode, OrderMode, RankingSource, TrainConfig};
use crate::error::{Error, Result};
use crate::ldc::{LdcConfig, LdcShape};
use crate::nn::StepDecay;
use crate::teacher::{Activation, TeacherConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Desk-scale Gaussian-cluster benchmark.
    Synthetic,
    /// Training recipe used for the motor imagery recordings.
    MotorImagery,
    /// Training recipe used for the X11 and S4b recordings.
    X11S4b,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Synthetic => "synthetic",
            Profile::MotorImagery => "motor_imagery",
            Profile::X11S4b => "x11_s4b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "synthetic" => Some(Profile::Synthetic),
            "motor_imagery" => Some(Profile::MotorImagery),
            "x11_s4b" => Some(Profile::X11S4b),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,

    pub source: DataSource,
    pub data_path: Option<PathBuf>,
    pub data_classes: usize,
    pub synth: SynthConfig,
    pub train_fraction: f64,
    pub levels: usize,

    pub teacher_enabled: bool,
    pub teacher_hidden: Vec<usize>,
    pub teacher_activation: Activation,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_lr_decay: f64,
    pub teacher_lr_step: usize,
    pub teacher_batch: usize,

    pub feature_dim: usize,
    pub value_dim: usize,
    pub valuebox_hidden: usize,
    pub logit_scale: f64,
    pub feature_init: f64,
    pub binary_class: bool,
    pub learn_scale: bool,
    /// Accumulator STE scale; 0 selects 1/sqrt(N).
    pub acc_scale: f64,

    pub schedule: AlphaSchedule,
    pub order: OrderMode,
    pub pool_fractions: [f64; 3],
    pub phase_epochs: Option<[usize; 3]>,
    pub curriculum_mode: CurriculumMode,
    pub ranking_source: RankingSource,
    pub rank_epochs: usize,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub tau: f64,
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "profile",
    "seed",
    "data.source",
    "data.path",
    "data.classes",
    "synth.classes",
    "synth.features",
    "synth.samples_per_class",
    "synth.sigma",
    "synth.noise",
    "split.train_fraction",
    "levels",
    "teacher.enabled",
    "teacher.hidden",
    "teacher.activation",
    "teacher.epochs",
    "teacher.lr",
    "teacher.lr_decay",
    "teacher.lr_step",
    "teacher.batch",
    "ldc.feature_dim",
    "ldc.value_dim",
    "ldc.hidden",
    "ldc.logit_scale",
    "ldc.feature_init",
    "ldc.acc_scale",
    "ldc.binary_class",
    "ldc.learn_scale",
    "mode",
    "alpha0",
    "P",
    "k",
    "gamma",
    "r",
    "alpha.linear_end",
    "alpha.lr",
    "order",
    "pool.fractions",
    "phase.epochs",
    "curriculum_mode",
    "ranking_source",
    "rank.epochs",
    "epochs",
    "batch",
    "lr",
    "lr_decay",
    "lr_step",
    "tau",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Synthetic)
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, None, format!("cannot parse `{v}`")))
}

fn num_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let items: Vec<T> = num_list(key, v)?;
    items
        .try_into()
        .map_err(|_| Error::config(key, None, "expected three comma-separated values"))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, None, format!("expected true or false, got `{v}`"))),
    }
}

fn choice<T>(key: &str, v: &str, parsed: Option<T>) -> Result<T> {
    parsed.ok_or_else(|| Error::config(key, None, format!("unknown value `{v}`")))
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            seed: 0,
            source: DataSource::Synth,
            data_path: None,
            data_classes: 0,
            synth: SynthConfig {
                num_classes: 5,
                num_features: 32,
                samples_per_class: 1200,
                sigma: 1.5,
                label_noise: 0.2,
                seed: 0,
            },
            train_fraction: 5.0 / 6.0,
            levels: 16,
            teacher_enabled: true,
            teacher_hidden: vec![300, 300],
            teacher_activation: Activation::Relu,
            teacher_epochs: 20,
            teacher_lr: 0.05,
            teacher_lr_decay: 0.5,
            teacher_lr_step: 10,
            teacher_batch: 32,
            feature_dim: 128,
            value_dim: 4,
            valuebox_hidden: 8,
            logit_scale: 0.05,
            feature_init: 0.05,
            acc_scale: 0.0,
            binary_class: true,
            learn_scale: false,
            schedule: AlphaSchedule::default(),
            order: OrderMode::Curriculum,
            pool_fractions: [0.65, 0.80, 0.95],
            phase_epochs: None,
            curriculum_mode: CurriculumMode::StagedPools,
            ranking_source: RankingSource::StudentLoss,
            rank_epochs: 10,
            epochs: 30,
            batch: 64,
            lr: 0.5,
            lr_decay: 0.5,
            lr_step: 10,
            tau: 4.0,
        };
        match profile {
            Profile::Synthetic => {
                // short teacher training, large batches and a sharp lr drop
                // keep the binary student from oscillating late in training
                cfg.teacher_epochs = 3;
                cfg.schedule.alpha0 = 0.5;
                cfg.schedule.change_point = 20;
                cfg.batch = 256;
                cfg.lr = 1.0;
                cfg.lr_decay = 0.1;
            }
            Profile::MotorImagery => {
                cfg.schedule.change_point = 100;
                cfg.pool_fractions = [0.65, 0.80, 0.95];
                cfg.epochs = 150;
                cfg.lr = 0.005;
                cfg.lr_decay = 0.1;
                cfg.lr_step = 50;
                cfg.batch = 1000;
            }
            Profile::X11S4b => {
                cfg.schedule.change_point = 75;
                cfg.pool_fractions = [0.70, 0.90, 1.0];
                cfg.epochs = 150;
                cfg.lr = 0.005;
                cfg.lr_decay = 0.1;
                cfg.lr_step = 60;
                cfg.batch = 256;
            }
        }
        cfg
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "profile" => self.profile.name().into(),
            "seed" => self.seed.to_string(),
            "data.source" => match self.source {
                DataSource::Synth => "synth".into(),
                DataSource::Csv => "csv".into(),
            },
            "data.path" => self
                .data_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "data.classes" => self.data_classes.to_string(),
            "synth.classes" => self.synth.num_classes.to_string(),
            "synth.features" => self.synth.num_features.to_string(),
            "synth.samples_per_class" => self.synth.samples_per_class.to_string(),
            "synth.sigma" => self.synth.sigma.to_string(),
            "synth.noise" => self.synth.label_noise.to_string(),
            "split.train_fraction" => self.train_fraction.to_string(),
            "levels" => self.levels.to_string(),
            "teacher.enabled" => self.teacher_enabled.to_string(),
            "teacher.hidden" => list(&self.teacher_hidden),
            "teacher.activation" => self.teacher_activation.name().into(),
            "teacher.epochs" => self.teacher_epochs.to_string(),
            "teacher.lr" => self.teacher_lr.to_string(),
            "teacher.lr_decay" => self.teacher_lr_decay.to_string(),
            "teacher.lr_step" => self.teacher_lr_step.to_string(),
            "teacher.batch" => self.teacher_batch.to_string(),
            "ldc.feature_dim" => self.feature_dim.to_string(),
            "ldc.value_dim" => self.value_dim.to_string(),
            "ldc.hidden" => self.valuebox_hidden.to_string(),
            "ldc.logit_scale" => self.logit_scale.to_string(),
            "ldc.feature_init" => self.feature_init.to_string(),
            "ldc.acc_scale" => self.acc_scale.to_string(),
            "ldc.binary_class" => self.binary_class.to_string(),
            "ldc.learn_scale" => self.learn_scale.to_string(),
            "mode" => self.schedule.mode.name().into(),
            "alpha0" => self.schedule.alpha0.to_string(),
            "P" => self.schedule.change_point.to_string(),
            "k" => self.schedule.decay_step.to_string(),
            "gamma" => self.schedule.decay_rate.to_string(),
            "r" => self.schedule.scaling_factor.to_string(),
            "alpha.linear_end" => self.schedule.linear_end.to_string(),
            "alpha.lr" => self.schedule.alpha_lr.to_string(),
            "order" => self.order.name().into(),
            "pool.fractions" => list(&self.pool_fractions),
            "phase.epochs" => self.phase_epochs.map(|p| list(&p)).unwrap_or_else(|| "auto".into()),
            "curriculum_mode" => self.curriculum_mode.name().into(),
            "ranking_source" => self.ranking_source.name().into(),
            "rank.epochs" => self.rank_epochs.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "lr_step" => self.lr_step.to_string(),
            "tau" => self.tau.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Range checks that involve several
    /// keys happen in [`Self::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "profile" => {
                let p = choice(key, v, Profile::parse(v))?;
                *self = Self::for_profile(p);
            }
            "seed" => self.seed = num(key, v)?,
            "data.source" => {
                self.source = match v {
                    "synth" => DataSource::Synth,
                    "csv" => DataSource::Csv,
                    _ => return Err(Error::config(key, None, format!("expected synth or csv, got `{v}`"))),
                }
            }
            "data.path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.classes" => self.data_classes = num(key, v)?,
            "synth.classes" => self.synth.num_classes = num(key, v)?,
            "synth.features" => self.synth.num_features = num(key, v)?,
            "synth.samples_per_class" => self.synth.samples_per_class = num(key, v)?,
            "synth.sigma" => self.synth.sigma = num(key, v)?,
            "synth.noise" => self.synth.label_noise = num(key, v)?,
            "split.train_fraction" => self.train_fraction = num(key, v)?,
            "levels" => self.levels = num(key, v)?,
            "teacher.enabled" => self.teacher_enabled = boolean(key, v)?,
            "teacher.hidden" => {
                self.teacher_hidden = if v.is_empty() { Vec::new() } else { num_list(key, v)? }
            }
            "teacher.activation" => self.teacher_activation = choice(key, v, Activation::parse(v))?,
            "teacher.epochs" => self.teacher_epochs = num(key, v)?,
            "teacher.lr" => self.teacher_lr = num(key, v)?,
            "teacher.lr_decay" => self.teacher_lr_decay = num(key, v)?,
            "teacher.lr_step" => self.teacher_lr_step = num(key, v)?,
            "teacher.batch" => self.teacher_batch = num(key, v)?,
            "ldc.feature_dim" => self.feature_dim = num(key, v)?,
            "ldc.value_dim" => self.value_dim = num(key, v)?,
            "ldc.hidden" => self.valuebox_hidden = num(key, v)?,
            "ldc.logit_scale" => self.logit_scale = num(key, v)?,
            "ldc.feature_init" => self.feature_init = num(key, v)?,
            "ldc.acc_scale" => self.acc_scale = num(key, v)?,
            "ldc.binary_class" => self.binary_class = boolean(key, v)?,
            "ldc.learn_scale" => self.learn_scale = boolean(key, v)?,
            "mode" => self.schedule.mode = choice(key, v, AlphaMode::parse(v))?,
            "alpha0" => self.schedule.alpha0 = num(key, v)?,
            "P" => self.schedule.change_point = num(key, v)?,
            "k" => self.schedule.decay_step = num(key, v)?,
            "gamma" => self.schedule.decay_rate = num(key, v)?,
            "r" => self.schedule.scaling_factor = num(key, v)?,
            "alpha.linear_end" => self.schedule.linear_end = num(key, v)?,
            "alpha.lr" => self.schedule.alpha_lr = num(key, v)?,
            "order" => self.order = choice(key, v, OrderMode::parse(v))?,
            "pool.fractions" => self.pool_fractions = triple(key, v)?,
            "phase.epochs" => {
                self.phase_epochs = if v == "auto" { None } else { Some(triple(key, v)?) }
            }
            "curriculum_mode" => self.curriculum_mode = choice(key, v, CurriculumMode::parse(v))?,
            "ranking_source" => self.ranking_source = choice(key, v, RankingSource::parse(v))?,
            "rank.epochs" => self.rank_epochs = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_step" => self.lr_step = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            _ => return Err(Error::config(key, None, "unknown key")),
        }
        Ok(())
    }

    /// Checks every value against its owning module, naming the key on
    /// failure.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, None, msg));
        match self.source {
            DataSource::Csv => {
                if self.data_path.is_none() {
                    return bad("data.path", "required when data.source = csv".into());
                }
                if self.data_classes < 2 {
                    return bad("data.classes", "required (>= 2) when data.source = csv".into());
                }
            }
            DataSource::Synth => {
                let s = &self.synth;
                if s.num_classes < 2 {
                    return bad("synth.classes", format!("need >= 2, got {}", s.num_classes));
                }
                if s.num_features == 0 {
                    return bad("synth.features", "must be positive".into());
                }
                if s.samples_per_class == 0 {
                    return bad("synth.samples_per_class", "must be positive".into());
                }
                if !(s.sigma > 0.0 && s.sigma.is_finite()) {
                    return bad("synth.sigma", format!("must be > 0, got {}", s.sigma));
                }
                if !(0.0..0.5).contains(&s.label_noise) {
                    return bad("synth.noise", format!("must lie in [0, 0.5), got {}", s.label_noise));
                }
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("split.train_fraction", format!("must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.levels < 2 || self.levels > u16::MAX as usize + 1 {
            return bad("levels", format!("must lie in [2, 65536], got {}", self.levels));
        }
        if self.teacher_hidden.contains(&0) {
            return bad("teacher.hidden", "widths must be positive".into());
        }
        for (key, v) in [
            ("teacher.epochs", self.teacher_epochs),
            ("teacher.lr_step", self.teacher_lr_step),
            ("teacher.batch", self.teacher_batch),
            ("ldc.feature_dim", self.feature_dim),
            ("ldc.value_dim", self.value_dim),
            ("ldc.hidden", self.valuebox_hidden),
            ("k", self.schedule.decay_step),
            ("r", self.schedule.scaling_factor),
            ("rank.epochs", self.rank_epochs),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("lr_step", self.lr_step),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if !self.feature_dim.is_multiple_of(self.value_dim) {
            return bad(
                "ldc.value_dim",
                format!("must divide ldc.feature_dim = {}", self.feature_dim),
            );
        }
        for (key, v) in [
            ("teacher.lr", self.teacher_lr),
            ("lr", self.lr),
            ("alpha.lr", self.schedule.alpha_lr),
            ("ldc.acc_scale", self.acc_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be >= 0, got {v}"));
            }
        }
        for (key, v) in [
            ("ldc.logit_scale", self.logit_scale),
            ("ldc.feature_init", self.feature_init),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be > 0, got {v}"));
            }
        }
        for (key, v) in [
            ("gamma", self.schedule.decay_rate),
            ("lr_decay", self.lr_decay),
            ("teacher.lr_decay", self.teacher_lr_decay),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(key, format!("must lie in (0, 1], got {v}"));
            }
        }
        for (key, v) in [("alpha0", self.schedule.alpha0), ("alpha.linear_end", self.schedule.linear_end)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        let f = self.pool_fractions;
        if f.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || f[0] > f[1] || f[1] > f[2] {
            return bad("pool.fractions", format!("must be nondecreasing in (0, 1], got {f:?}"));
        }
        if let Some(p) = self.phase_epochs {
            if p.iter().sum::<usize>() != self.epochs {
                return bad("phase.epochs", format!("{p:?} must sum to epochs = {}", self.epochs));
            }
        }
        if !self.teacher_enabled && self.ranking_source == RankingSource::TeacherLoss && self.order != OrderMode::Random {
            return bad("ranking_source", "teacher_loss ranking needs teacher.enabled = true".into());
        }
        Ok(())
    }

    /// One `key = value` line per key, parseable by [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn teacher_config(&self, num_features: usize, num_classes: usize, seed: u64) -> TeacherConfig {
        let mut dims = vec![num_features];
        dims.extend(&self.teacher_hidden);
        dims.push(num_classes);
        TeacherConfig {
            layer_dims: dims,
            activation: self.teacher_activation,
            epochs: self.teacher_epochs,
            lr: self.teacher_lr,
            lr_decay: self.teacher_lr_decay,
            lr_step: self.teacher_lr_step,
            batch_size: self.teacher_batch,
            seed,
        }
    }

    pub fn ldc_config(&self, num_features: usize, num_classes: usize) -> LdcConfig {
        LdcConfig {
            valuebox_hidden: self.valuebox_hidden,
            logit_scale: self.logit_scale,
            feature_init: self.feature_init,
            accumulator_scale: (self.acc_scale > 0.0).then_some(self.acc_scale),
            binary_class: self.binary_class,
            learn_scale: self.learn_scale,
            ..LdcConfig::new(LdcShape {
                num_features,
                num_levels: self.levels,
                feature_dim: self.feature_dim,
                value_dim: self.value_dim,
                num_classes,
            })
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: StepDecay {
                base_lr: self.lr,
                factor: self.lr_decay,
                step_size: self.lr_step,
            },
            temperature: self.tau,
            seed,
            curriculum_mode: self.curriculum_mode,
            ranking_source: self.ranking_source,
        }
    }
}

/// Parses config text on top of the synthetic profile defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(line, Some(line_no), "expected `key = value`"));
        };
        let key = key.trim();
        if entries.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::config(key, Some(line_no), "duplicate key"));
        }
        entries.push((key, value.trim(), line_no));
    }
    let mut cfg = RunConfig::default();
    let at_line = |e: Error, line_no: usize| match e {
        Error::Config { key, msg, .. } => Error::config(key, Some(line_no), msg),
        other => other,
    };
    // profile first so the other lines override its defaults
    if let Some((k, v, line_no)) = entries.iter().find(|(k, _, _)| *k == "profile") {
        cfg.set(k, v).map_err(|e| at_line(e, *line_no))?;
    }
    for (k, v, line_no) in entries.iter().filter(|(k, _, _)| *k != "profile") {
        cfg.set(k, v).map_err(|e| at_line(e, *line_no))?;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config { key, line: None, msg } => {
            let line = entries.iter().find(|(k, _, _)| *k == key).map(|(_, _, l)| *l);
            Error::config(key, line, msg)
        }
        other => other,
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&fs::read_to_string(path)?)
}
