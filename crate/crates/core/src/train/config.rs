use asymgan_autograd::TvSign;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Ablation, LossWeights, Objective};
use crate::model::{Architecture, Mode};
use crate::nets::{NetConfig, ZInjection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub z_injection: ZInjection,
    pub net: NetConfig,
    pub weights: LossWeights,
    pub lr_g: f64,
    pub lr_d: f64,
    pub epochs_flat: u64,
    pub epochs_decay: u64,
    pub batch_size: usize,
    pub pool_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Use the difference of squared neighbor differences in the TV term.
    pub tv_literal_minus: bool,
    /// Stop early after this many steps.
    pub max_steps: Option<u64>,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(Mode::AsymExt)
    }
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            z_injection: mode.default_injection(),
            net: NetConfig::default(),
            weights: match mode {
                Mode::AsymExt => LossWeights::default(),
                _ => LossWeights::without_extension(),
            },
            lr_g: 2e-4,
            lr_d: 1e-4,
            epochs_flat: 100,
            epochs_decay: 100,
            batch_size: 1,
            pool_size: 50,
            seed: 0,
            ablation: Ablation::default(),
            tv_literal_minus: false,
            max_steps: None,
            checkpoint_every: 0,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            mode: self.mode,
            net: self.net,
            z_injection: self.z_injection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.weights.validate()?;
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs_flat + self.epochs_decay == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.ablation.any() && self.mode != Mode::AsymExt {
            return Err(Error::Config("ablation flags apply only to asym_ext mode".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> u64 {
        self.epochs_flat + self.epochs_decay
    }

    /// The objective this config optimizes. Outside extended mode the
    /// extension weights are forced to zero.
    pub fn objective(&self) -> Objective {
        let mut weights = self.weights;
        if self.mode != Mode::AsymExt {
            weights.lambda5 = 0.0;
            weights.lambda6 = 0.0;
            weights.lambda7 = 0.0;
            weights.lambda8 = 0.0;
            weights.lambda9 = 0.0;
        }
        let mut obj = Objective::new(self.mode, weights);
        obj.ablation = self.ablation;
        if self.tv_literal_minus {
            obj.tv_sign = TvSign::Minus;
        }
        obj
    }
}

/// Learning rates `(lr_g, lr_d)` for `epoch`: constant for `epochs_flat`
/// epochs, then linear towards zero, reaching it at the end of training.
pub fn lr_at(epoch: u64, config: &TrainConfig) -> Result<(f64, f64)> {
    let total = config.total_epochs();
    if epoch >= total {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..{total}")));
    }
    let factor = if config.epochs_decay == 0 {
        1.0
    } else {
        1.0 - epoch.saturating_sub(config.epochs_flat) as f64 / config.epochs_decay as f64
    };
    Ok((config.lr_g * factor, config.lr_d * factor))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`].
    pub const KEYS: [&'static str; 30] = [
        "mode",
        "z_injection",
        "image_size",
        "base_channels",
        "n_res_blocks",
        "norm_epsilon",
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "lambda5",
        "lambda6",
        "lambda7",
        "lambda8",
        "lambda9",
        "lr_g",
        "lr_d",
        "epochs_flat",
        "epochs_decay",
        "batch_size",
        "pool_size",
        "seed",
        "max_steps",
        "checkpoint_every",
        "disable_adv_ext",
        "disable_perception",
        "disable_tv",
        "tv_literal_minus",
        "in_channels",
        "out_channels",
    ];

    /// Sets one field from its textual form. Mode and injection accept both
    /// the snake-case names and the hyphenated command-line spellings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "mode" => self.mode = parse_mode(value)?,
            "z_injection" => self.z_injection = parse_injection(value)?,
            "image_size" => self.net.image_size = parse(key, value)?,
            "base_channels" => self.net.base_channels = parse(key, value)?,
            "n_res_blocks" => self.net.n_res_blocks = parse(key, value)?,
            "norm_epsilon" => self.net.norm_epsilon = parse(key, value)?,
            "in_channels" => self.net.in_channels = parse(key, value)?,
            "out_channels" => self.net.out_channels = parse(key, value)?,
            "lr_g" => self.lr_g = parse(key, value)?,
            "lr_d" => self.lr_d = parse(key, value)?,
            "epochs_flat" => self.epochs_flat = parse(key, value)?,
            "epochs_decay" => self.epochs_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "disable_adv_ext" => self.ablation.disable_adv_ext = parse(key, value)?,
            "disable_perception" => self.ablation.disable_perception = parse(key, value)?,
            "disable_tv" => self.ablation.disable_tv = parse(key, value)?,
            "tv_literal_minus" => self.tv_literal_minus = parse(key, value)?,
            _ => match key.strip_prefix("lambda").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) => self.weights.set(i, parse(key, value)?)?,
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every field as `key=value` lines, readable by [`TrainConfig::apply_lines`].
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(&format!("{key}={}\n", self.get(key).expect("known key")));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.weights;
        Some(match key {
            "mode" => mode_name(self.mode).into(),
            "z_injection" => injection_name(self.z_injection).into(),
            "image_size" => self.net.image_size.to_string(),
            "base_channels" => self.net.base_channels.to_string(),
            "n_res_blocks" => self.net.n_res_blocks.to_string(),
            "norm_epsilon" => self.net.norm_epsilon.to_string(),
            "in_channels" => self.net.in_channels.to_string(),
            "out_channels" => self.net.out_channels.to_string(),
            "lambda1" => w.lambda1.to_string(),
            "lambda2" => w.lambda2.to_string(),
            "lambda3" => w.lambda3.to_string(),
            "lambda4" => w.lambda4.to_string(),
            "lambda5" => w.lambda5.to_string(),
            "lambda6" => w.lambda6.to_string(),
            "lambda7" => w.lambda7.to_string(),
            "lambda8" => w.lambda8.to_string(),
            "lambda9" => w.lambda9.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "epochs_flat" => self.epochs_flat.to_string(),
            "epochs_decay" => self.epochs_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pool_size" => self.pool_size.to_string(),
            "seed" => self.seed.to_string(),
            "max_steps" => self.max_steps.map_or_else(|| "none".into(), |s| s.to_string()),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "disable_adv_ext" => self.ablation.disable_adv_ext.to_string(),
            "disable_perception" => self.ablation.disable_perception.to_string(),
            "disable_tv" => self.ablation.disable_tv.to_string(),
            "tv_literal_minus" => self.tv_literal_minus.to_string(),
            _ => return None,
        })
    }
}

pub fn parse_mode(value: &str) -> Result<Mode> {
    match value.trim() {
        "baseline" | "baseline_cyclegan" => Ok(Mode::BaselineCyclegan),
        "asym" | "asym_no_ext" => Ok(Mode::AsymNoExt),
        "asym-ext" | "asym_ext" => Ok(Mode::AsymExt),
        other => Err(Error::Config(format!("unknown mode {other:?}"))),
    }
}

pub fn parse_injection(value: &str) -> Result<ZInjection> {
    match value.trim() {
        "concat-mid" | "concat_mid" => Ok(ZInjection::ConcatMid),
        "concat-all" | "concat_all_decoder" => Ok(ZInjection::ConcatAllDecoder),
        "cin" => Ok(ZInjection::Cin),
        other => Err(Error::Config(format!("unknown z injection {other:?}"))),
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::BaselineCyclegan => "baseline_cyclegan",
        Mode::AsymNoExt => "asym_no_ext",
        Mode::AsymExt => "asym_ext",
    }
}

fn injection_name(z: ZInjection) -> &'static str {
    match z {
        ZInjection::ConcatMid => "concat_mid",
        ZInjection::ConcatAllDecoder => "concat_all_decoder",
        ZInjection::Cin => "cin",
    }
}
