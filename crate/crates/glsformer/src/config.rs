//! Plain-text key=value configuration, used for config files, resolved
//! config snapshots and the checkpoint header.

use std::fmt::Write as _;
use std::path::Path;

use crate::model::{GatingMode, ModelConfig};
use crate::synth::GeneratorSpec;
use crate::train::TrainConfig;
use crate::{GlsError, Result};

/// Ordered key=value pairs. Later assignments of the same key win.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        KeyValues::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GlsError::config(format!("line {}: expected key=value, got '{}'", lineno + 1, line))
            })?;
            kv.set(key.trim(), value.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GlsError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.pairs.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.pairs.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| GlsError::config(format!("{} must be an integer, got '{}'", key, v))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| GlsError::config(format!("{} must be an integer, got '{}'", key, v))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| GlsError::config(format!("{} must be a number, got '{}'", key, v))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(GlsError::config(format!(
                "{} must be true/false, got '{}'",
                key, v
            ))),
        }
    }

    /// Apply `key=value` override strings on top of this set.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                GlsError::config(format!("override must be key=value, got '{}'", o))
            })?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            let _ = writeln!(out, "{}={}", k, v);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())
            .map_err(|e| GlsError::io(path.display().to_string(), e))
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("channels", self.channels);
        kv.set("patch", self.patch);
        kv.set("embed_dim", self.embed_dim);
        kv.set("heads", self.heads);
        kv.set("blocks", self.blocks);
        kv.set("n_st", self.n_st);
        kv.set("n_lt", self.n_lt);
        kv.set("s", self.s);
        kv.set("num_classes", self.num_classes);
        kv.set("gating_mode", self.gating_mode.name());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = ModelConfig::desk_default();
        let cfg = ModelConfig {
            height: kv.get_usize("height", d.height)?,
            width: kv.get_usize("width", d.width)?,
            channels: kv.get_usize("channels", d.channels)?,
            patch: kv.get_usize("patch", d.patch)?,
            embed_dim: kv.get_usize("embed_dim", d.embed_dim)?,
            heads: kv.get_usize("heads", d.heads)?,
            blocks: kv.get_usize("blocks", d.blocks)?,
            n_st: kv.get_usize("n_st", d.n_st)?,
            n_lt: kv.get_usize("n_lt", d.n_lt)?,
            s: kv.get_usize("s", d.s)?,
            num_classes: kv.get_usize("num_classes", d.num_classes)?,
            gating_mode: match kv.get("gating_mode") {
                Some(name) => GatingMode::parse(name)?,
                None => d.gating_mode,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("windows_per_epoch", self.windows_per_epoch);
        kv.set("val_stride", self.val_stride);
        kv.set("aug_crop", self.aug_crop);
        kv.set("aug_mirror", self.aug_mirror);
        kv.set("aug_jitter", self.aug_jitter);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: kv.get_f64("learning_rate", d.learning_rate)?,
            batch_size: kv.get_usize("batch_size", d.batch_size)?,
            epochs: kv.get_usize("epochs", d.epochs)?,
            beta1: kv.get_f64("beta1", d.beta1)?,
            beta2: kv.get_f64("beta2", d.beta2)?,
            adam_eps: kv.get_f64("adam_eps", d.adam_eps)?,
            windows_per_epoch: kv.get_usize("windows_per_epoch", d.windows_per_epoch)?,
            val_stride: kv.get_usize("val_stride", d.val_stride)?,
            aug_crop: kv.get_bool("aug_crop", d.aug_crop)?,
            aug_mirror: kv.get_bool("aug_mirror", d.aug_mirror)?,
            aug_jitter: kv.get_bool("aug_jitter", d.aug_jitter)?,
            seed: kv.get_u64("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl GeneratorSpec {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("num_classes", self.num_classes);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("segments", self.segments);
        kv.set("duration_min", self.duration_min);
        kv.set("duration_max", self.duration_max);
        kv.set("noise_std", self.noise_std);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = GeneratorSpec::default();
        let spec = GeneratorSpec {
            num_classes: kv.get_usize("num_classes", d.num_classes)?,
            height: kv.get_usize("height", d.height)?,
            width: kv.get_usize("width", d.width)?,
            segments: kv.get_usize("segments", d.segments)?,
            duration_min: kv.get_usize("duration_min", d.duration_min)?,
            duration_max: kv.get_usize("duration_max", d.duration_max)?,
            noise_std: kv.get_f64("noise_std", d.noise_std)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_config_round_trips_through_kv() {
        let cfg = ModelConfig::desk_default();
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&KeyValues::parse(&kv.render()).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut kv = KeyValues::parse("blocks=2\nheads=4\n# comment\n").unwrap();
        kv.apply_overrides(&["blocks=3".to_string()]).unwrap();
        assert_eq!(kv.get("blocks"), Some("3"));
        assert_eq!(kv.get("heads"), Some("4"));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(KeyValues::parse("no equals sign").is_err());
    }
}
