//! Flat `key = value` run configuration. Every key has a default; unknown
//! keys are rejected so typos fail loudly instead of silently using defaults.

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::fusion::{FusionAlternative, PoolMode};
use crate::latent::MttVariant;
use crate::segment::{AdjacencyMode, MaskMode};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Adaptive,
    Concat,
    Sum,
    Gate,
}

impl FusionMode {
    pub fn alternative(self) -> Option<FusionAlternative> {
        match self {
            FusionMode::Adaptive => None,
            FusionMode::Concat => Some(FusionAlternative::Concat),
            FusionMode::Sum => Some(FusionAlternative::Sum),
            FusionMode::Gate => Some(FusionAlternative::Gate),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Adaptive => "adaptive",
            FusionMode::Concat => "concat",
            FusionMode::Sum => "sum",
            FusionMode::Gate => "gate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoSesg,
    NoSylg,
    NoFusion,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSesg => "no_sesg",
            Ablation::NoSylg => "no_sylg",
            Ablation::NoFusion => "no_fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Token feature width.
    pub d: usize,
    /// Constituent supervision depth; also the segment attention head count.
    pub l: usize,
    /// Graph convolution layers per stream.
    pub gcn_layers: usize,
    /// Latent-tree attention heads.
    pub n_head_sylg: usize,
    /// Relation embedding width.
    pub d_r: usize,
    /// Cross-attention heads inside fusion.
    pub cross_heads: usize,
    pub fusion_mode: FusionMode,
    pub ablation: Ablation,
    /// Weight of the segment supervision loss.
    pub lambda1: f64,
    /// Weight of the root identification loss.
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mtt_variant: MttVariant,
    /// Supervise masked pre-softmax scores instead of attention.
    pub supervise_presoftmax: bool,
    pub adjacency: AdjacencyMode,
    pub pool: PoolMode,
    pub train_data: String,
    pub dev_data: String,
    /// Longest admissible sentence; bounds the position table.
    pub n_max: usize,
    /// Apply the optional self-mixing layer in the encoder.
    pub encoder_mixing: bool,
    pub segment_mask_mode: MaskMode,
    pub gcn_activation: Activation,
    /// Stop once running train accuracy reaches this fraction; values above
    /// 1 never trigger.
    pub early_stop_train_acc: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 32,
            l: 4,
            gcn_layers: 3,
            n_head_sylg: 4,
            d_r: 8,
            cross_heads: 2,
            fusion_mode: FusionMode::Adaptive,
            ablation: Ablation::Full,
            lambda1: 0.1,
            lambda2: 0.5,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            mtt_variant: MttVariant::FirstRow,
            supervise_presoftmax: false,
            adjacency: AdjacencyMode::PerLayer,
            pool: PoolMode::Mean,
            train_data: String::new(),
            dev_data: String::new(),
            n_max: 64,
            encoder_mixing: false,
            segment_mask_mode: MaskMode::Multiply,
            gcn_activation: Activation::Relu,
            early_stop_train_acc: 1.0,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::invalid(format!("config key {key}: expected integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::invalid(format!("config key {key}: expected integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::invalid(format!("config key {key}: expected number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid(format!(
            "config key {key}: expected true or false, got {v:?}"
        ))),
    }
}

fn bad_choice(key: &str, v: &str, choices: &str) -> Error {
    Error::invalid(format!("config key {key}: expected one of {choices}, got {v:?}"))
}

impl Config {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_usize(key, value)?,
            "l" => self.l = parse_usize(key, value)?,
            "gcn_layers" => self.gcn_layers = parse_usize(key, value)?,
            "n_head_sylg" => self.n_head_sylg = parse_usize(key, value)?,
            "d_r" => self.d_r = parse_usize(key, value)?,
            "cross_heads" => self.cross_heads = parse_usize(key, value)?,
            "fusion_mode" => {
                self.fusion_mode = match value {
                    "adaptive" => FusionMode::Adaptive,
                    "concat" => FusionMode::Concat,
                    "sum" => FusionMode::Sum,
                    "gate" => FusionMode::Gate,
                    _ => return Err(bad_choice(key, value, "adaptive|concat|sum|gate")),
                }
            }
            "ablation" => {
                self.ablation = match value {
                    "full" => Ablation::Full,
                    "no_sesg" => Ablation::NoSesg,
                    "no_sylg" => Ablation::NoSylg,
                    "no_fusion" => Ablation::NoFusion,
                    _ => return Err(bad_choice(key, value, "full|no_sesg|no_sylg|no_fusion")),
                }
            }
            "lambda1" => self.lambda1 = parse_f64(key, value)?,
            "lambda2" => self.lambda2 = parse_f64(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "mtt_variant" => {
                self.mtt_variant = match value {
                    "first_row" => MttVariant::FirstRow,
                    "diagonal" => MttVariant::Diagonal,
                    _ => return Err(bad_choice(key, value, "first_row|diagonal")),
                }
            }
            "supervise_presoftmax" => self.supervise_presoftmax = parse_bool(key, value)?,
            "adjacency" => {
                self.adjacency = match value {
                    "per_layer" => AdjacencyMode::PerLayer,
                    "head_mean" => AdjacencyMode::HeadMean,
                    _ => return Err(bad_choice(key, value, "per_layer|head_mean")),
                }
            }
            "pool" => {
                self.pool = match value {
                    "mean" => PoolMode::Mean,
                    "first" => PoolMode::First,
                    _ => return Err(bad_choice(key, value, "mean|first")),
                }
            }
            "train_data" => self.train_data = value.to_string(),
            "dev_data" => self.dev_data = value.to_string(),
            "n_max" => self.n_max = parse_usize(key, value)?,
            "encoder_mixing" => self.encoder_mixing = parse_bool(key, value)?,
            "segment_mask_mode" => {
                self.segment_mask_mode = match value {
                    "multiply" => MaskMode::Multiply,
                    "logit" => MaskMode::Logit,
                    _ => return Err(bad_choice(key, value, "multiply|logit")),
                }
            }
            "gcn_activation" => {
                self.gcn_activation = match value {
                    "relu" => Activation::Relu,
                    "sigmoid" => Activation::Sigmoid,
                    _ => return Err(bad_choice(key, value, "relu|sigmoid")),
                }
            }
            "early_stop_train_acc" => self.early_stop_train_acc = parse_f64(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected key = value", idx + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("d must be positive"));
        }
        if self.l == 0 {
            return Err(Error::invalid("l must be positive"));
        }
        if self.n_head_sylg == 0 {
            return Err(Error::invalid("n_head_sylg must be positive"));
        }
        if self.d_r == 0 {
            return Err(Error::invalid("d_r must be positive"));
        }
        if self.cross_heads == 0 || self.d % self.cross_heads != 0 {
            return Err(Error::invalid(format!(
                "cross_heads must divide d (d={}, cross_heads={})",
                self.d, self.cross_heads
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::invalid("lambda1 and lambda2 must be non-negative"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.n_max == 0 {
            return Err(Error::invalid("n_max must be positive"));
        }
        if !(self.early_stop_train_acc >= 0.0) {
            return Err(Error::invalid("early_stop_train_acc must be non-negative"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "l = {}", self.l);
        let _ = writeln!(s, "gcn_layers = {}", self.gcn_layers);
        let _ = writeln!(s, "n_head_sylg = {}", self.n_head_sylg);
        let _ = writeln!(s, "d_r = {}", self.d_r);
        let _ = writeln!(s, "cross_heads = {}", self.cross_heads);
        let _ = writeln!(s, "fusion_mode = {}", self.fusion_mode.as_str());
        let _ = writeln!(s, "ablation = {}", self.ablation.as_str());
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "mtt_variant = {}",
            match self.mtt_variant {
                MttVariant::FirstRow => "first_row",
                MttVariant::Diagonal => "diagonal",
            }
        );
        let _ = writeln!(s, "supervise_presoftmax = {}", self.supervise_presoftmax);
        let _ = writeln!(
            s,
            "adjacency = {}",
            match self.adjacency {
                AdjacencyMode::PerLayer => "per_layer",
                AdjacencyMode::HeadMean => "head_mean",
            }
        );
        let _ = writeln!(
            s,
            "pool = {}",
            match self.pool {
                PoolMode::Mean => "mean",
                PoolMode::First => "first",
            }
        );
        if !self.train_data.is_empty() {
            let _ = writeln!(s, "train_data = {}", self.train_data);
        }
        if !self.dev_data.is_empty() {
            let _ = writeln!(s, "dev_data = {}", self.dev_data);
        }
        let _ = writeln!(s, "n_max = {}", self.n_max);
        let _ = writeln!(s, "encoder_mixing = {}", self.encoder_mixing);
        let _ = writeln!(
            s,
            "segment_mask_mode = {}",
            match self.segment_mask_mode {
                MaskMode::Multiply => "multiply",
                MaskMode::Logit => "logit",
            }
        );
        let _ = writeln!(
            s,
            "gcn_activation = {}",
            match self.gcn_activation {
                Activation::Relu => "relu",
                Activation::Sigmoid => "sigmoid",
            }
        );
        let _ = writeln!(s, "early_stop_train_acc = {}", self.early_stop_train_acc);
        s
    }
}
