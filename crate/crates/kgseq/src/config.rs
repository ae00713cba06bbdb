//! Flat `key = value` run configuration with presets and overrides.

use std::fmt;
use std::str::FromStr;

use kgseq_core::encoder::{EncoderConfig, StreamSet};
use kgseq_core::eval::DecodeConfig;
use kgseq_core::fusion::FusionConfig;
use kgseq_core::masks::MaskConfig;
use kgseq_core::objective::LossConfig;
use kgseq_core::train::TrainConfig;
use kgseq_core::trajectory::RewardConfig;

use crate::error::{Error, Result};
use crate::synth::SynthConfig;

/// Ablation axes: multimodal features with loss modulation, and return
/// conditioning with history masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    NoImg,
    Mkg,
    Rl,
    MkgRl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::NoImg, Mode::Mkg, Mode::Rl, Mode::MkgRl];

    pub fn multimodal(self) -> bool {
        matches!(self, Mode::Mkg | Mode::MkgRl)
    }

    pub fn returns(self) -> bool {
        matches!(self, Mode::Rl | Mode::MkgRl)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::NoImg => "no-img",
            Mode::Mkg => "mkg",
            Mode::Rl => "rl",
            Mode::MkgRl => "mkg+rl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected no-img, mkg, rl or mkg+rl)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub feature_width: usize,
    pub max_hops: usize,

    pub fusion_epochs: usize,
    pub fusion_lr: f64,
    pub segments: usize,
    pub structure_width: usize,
    pub image_width: usize,
    pub ocr_width: usize,

    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub init_scale: f64,
    pub separate_trunks: bool,
    pub b: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub alpha: f64,
    pub noise: bool,
    pub literal_sum: bool,
    pub p_k: f64,
    pub p_m: f64,
    pub eta: f64,
    /// Train on only the first this many triples; 0 keeps all.
    pub train_limit: usize,
    /// Report train-set Hits@1 every this many epochs; 0 disables it.
    pub eval_every: usize,

    pub r_good: f64,
    pub r_bad: f64,
    pub r_step: f64,
    pub strict_signs: bool,

    pub k_beam: usize,
    pub alternation_filter: bool,
    pub filtered: bool,

    pub gen: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        let loss = LossConfig::default();
        let masks = MaskConfig::default();
        let reward = RewardConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 7,
            mode: Mode::MkgRl,
            feature_width: fusion.raw_width,
            max_hops: kgseq_core::paths::MAX_HOPS,
            fusion_epochs: fusion.epochs,
            fusion_lr: fusion.lr,
            segments: fusion.segments,
            structure_width: fusion.structure_width,
            image_width: fusion.image_width,
            ocr_width: fusion.ocr_width,
            d: 64,
            heads: 4,
            layers: 2,
            init_scale: 0.08,
            separate_trunks: false,
            b: 0.0,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr: train.lr,
            epsilon: loss.epsilon,
            beta: loss.beta,
            alpha: loss.alpha,
            noise: loss.noise,
            literal_sum: loss.literal_sum,
            p_k: masks.p_k,
            p_m: masks.p_m,
            eta: masks.eta,
            train_limit: 0,
            eval_every: 0,
            r_good: reward.r_good,
            r_bad: reward.r_bad,
            r_step: reward.r_step,
            strict_signs: reward.strict_paper_signs,
            k_beam: 64,
            alternation_filter: true,
            filtered: false,
            gen: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse(key, value)?,)*
                    _ => {
                        let near = kgseq_core::kg::closest(key, Self::KEYS.iter().copied(), 3);
                        return Err(Error::Config(format!("unknown key `{key}`; did you mean: {}", near.join(", "))));
                    }
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.to_string())),*]
            }
        }
    };
}

keys! {
    "seed" => seed,
    "mode" => mode,
    "feature_width" => feature_width,
    "max_hops" => max_hops,
    "fusion_epochs" => fusion_epochs,
    "fusion_lr" => fusion_lr,
    "segments" => segments,
    "structure_width" => structure_width,
    "image_width" => image_width,
    "ocr_width" => ocr_width,
    "d" => d,
    "heads" => heads,
    "layers" => layers,
    "init_scale" => init_scale,
    "separate_trunks" => separate_trunks,
    "b" => b,
    "batch_size" => batch_size,
    "epochs" => epochs,
    "lr" => lr,
    "epsilon" => epsilon,
    "beta" => beta,
    "alpha" => alpha,
    "noise" => noise,
    "literal_sum" => literal_sum,
    "p_k" => p_k,
    "p_m" => p_m,
    "eta" => eta,
    "train_limit" => train_limit,
    "eval_every" => eval_every,
    "r_good" => r_good,
    "r_bad" => r_bad,
    "r_step" => r_step,
    "strict_signs" => strict_signs,
    "k_beam" => k_beam,
    "alternation_filter" => alternation_filter,
    "filtered" => filtered,
    "gen.clusters" => gen.clusters,
    "gen.per_cluster" => gen.per_cluster,
    "gen.relations" => gen.relations,
    "gen.signal" => gen.signal,
    "gen.noise" => gen.noise,
    "gen.image_fraction" => gen.image_fraction,
    "gen.ocr_fraction" => gen.ocr_fraction,
    "gen.valid" => gen.valid,
    "gen.test" => gen.test,
}

/// Named bundles of overrides.
pub const PRESETS: &[(&str, &[(&str, &str)])] = &[
    ("paper-best", &[("batch_size", "16"), ("epsilon", "0.7"), ("alpha", "0.6")]),
    // Memorise a single sequence: no regularising masks, no smoothing.
    (
        "overfit",
        &[
            ("train_limit", "1"),
            ("epochs", "200"),
            ("batch_size", "1"),
            ("epsilon", "1.0"),
            ("p_k", "0"),
            ("eta", "0"),
            ("lr", "0.003"),
            ("noise", "false"),
        ],
    ),
];

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.gen.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (_, pairs) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}` (known: {})", names.join(", ")))
        })?;
        for (k, v) in pairs.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        if k.trim() == "seed" {
            self.gen.seed = self.seed;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            raw_width: self.feature_width,
            segments: self.segments,
            structure_width: self.structure_width,
            image_width: self.image_width,
            ocr_width: self.ocr_width,
            epochs: self.fusion_epochs,
            lr: self.fusion_lr,
            seed: self.seed,
            ..FusionConfig::default()
        }
    }

    pub fn reward(&self) -> Result<RewardConfig> {
        let cfg = RewardConfig {
            r_good: self.r_good,
            r_bad: self.r_bad,
            r_step: self.r_step,
            strict_paper_signs: self.strict_signs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn streams(&self) -> StreamSet {
        StreamSet {
            rtg: self.mode.returns(),
            image: self.mode.multimodal(),
            ocr: self.mode.multimodal(),
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            structure_width: self.structure_width,
            image_width: self.image_width,
            ocr_width: self.ocr_width,
            init_scale: self.init_scale,
            seed: self.seed,
            streams: self.streams(),
            separate_trunks: self.separate_trunks,
            bias_b: self.b,
            ..EncoderConfig::new(vocab_size)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            loss: LossConfig {
                epsilon: self.epsilon,
                beta: self.beta,
                alpha: self.alpha,
                noise: self.noise,
                literal_sum: self.literal_sum,
            },
            masks: MaskConfig {
                p_k: self.p_k,
                p_m: self.p_m,
                eta: self.eta,
                history: self.mode.returns(),
            },
            modulation: self.mode.multimodal(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            k_beam: self.k_beam,
            alternation_filter: self.alternation_filter,
            reward: self.reward()?,
        })
    }
}
