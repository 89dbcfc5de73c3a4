use std::fs;

use anyhow::{Context, Result};
use asymgan::model::Mode;
use asymgan::train::{parse_mode, TrainConfig};

use crate::{usage, ConfigArgs};

/// Keys that may differ from the checkpoint's configuration on resume.
const RESUMABLE: [&str; 2] = ["max_steps", "checkpoint_every"];

fn split_pair(text: &str, origin: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| usage(format!("{origin}: expected key=value, got {text:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ConfigArgs {
    /// Every override in precedence order, lowest first.
    pub fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(path) = &self.config_file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                out.push(split_pair(line, &format!("{}:{}", path.display(), n + 1))?);
            }
        }
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        flag("mode", self.mode.clone());
        flag("z_injection", self.z_inject.clone());
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("image_size", self.image_size.map(|v| v.to_string()));
        flag("base_channels", self.base_channels.map(|v| v.to_string()));
        flag("n_res_blocks", self.n_res_blocks.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("pool_size", self.pool_size.map(|v| v.to_string()));
        flag("lr_g", self.lr_g.map(|v| v.to_string()));
        flag("lr_d", self.lr_d.map(|v| v.to_string()));
        flag("epochs_flat", self.epochs_flat.map(|v| v.to_string()));
        flag("epochs_decay", self.epochs_decay.map(|v| v.to_string()));
        flag("max_steps", self.max_steps.map(|v| v.to_string()));
        flag("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        if let Some(l) = &self.lambda {
            if l.len() != 9 {
                return Err(usage(format!("--lambda takes 9 weights, got {}", l.len())));
            }
            for (i, v) in l.iter().enumerate() {
                out.push((format!("lambda{}", i + 1), v.to_string()));
            }
        }
        for s in &self.set {
            out.push(split_pair(s, "--set")?);
        }
        Ok(out)
    }

    /// Defaults for the final mode with every override applied on top.
    pub fn resolve(&self, default_mode: Mode) -> Result<TrainConfig> {
        let pairs = self.pairs()?;
        let mode = match pairs.iter().rev().find(|(k, _)| k == "mode") {
            Some((_, v)) => parse_mode(v).map_err(|e| usage(e.to_string()))?,
            None => default_mode,
        };
        let mut cfg = TrainConfig::for_mode(mode);
        for (k, v) in &pairs {
            cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies the overrides allowed when resuming onto `cfg`.
    pub fn apply_resumable(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (k, v) in self.pairs()? {
            if !RESUMABLE.contains(&k.as_str()) {
                return Err(usage(format!("{k} cannot be changed when resuming")));
            }
            cfg.set(&k, &v).map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }
}

/// The resolved configuration as a JSON object of `key: value` strings.
pub fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = TrainConfig::KEYS
        .iter()
        .map(|k| (k.to_string(), cfg.get(k).unwrap_or_default().into()))
        .collect();
    map.into()
}
