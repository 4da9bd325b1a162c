use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relaxation::NetConfig;

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", n + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::invalid(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::invalid(format!(
                "line {}: duplicate key `{key}`",
                n + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

/// Settings of one bi-level search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub num_layers: usize,
    pub num_blocks: usize,
    pub filter_multiplier: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub arch_delay_epochs: usize,
    pub seed: u64,
    /// Square training crop; equal to the image size means no cropping.
    pub crop_size: usize,
    /// Global gradient-norm cap per parameter group; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_blocks: 3,
            filter_multiplier: 4,
            num_classes: 4,
            epochs: 40,
            batch_size: 2,
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: 3e-3,
            arch_weight_decay: 1e-3,
            arch_delay_epochs: 20,
            seed: 0,
            crop_size: 64,
            grad_clip: Some(5.0),
        }
    }
}

impl SearchConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig::new(
            self.num_layers,
            self.num_blocks,
            self.filter_multiplier,
            self.num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        if self.arch_delay_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "arch_delay_epochs {} exceeds epochs {}",
                self.arch_delay_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(32) {
            return Err(Error::invalid(format!(
                "crop_size {} is not a positive multiple of 32",
                self.crop_size
            )));
        }
        let rates = [
            ("lr_max", self.lr_max),
            ("lr_min", self.lr_min),
            ("arch_lr", self.arch_lr),
            ("grad_clip", self.grad_clip.unwrap_or(1.0)),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(Error::invalid("lr_min exceeds lr_max"));
        }
        let nonneg = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Reads `key = value` lines over the defaults. `L`, `B` and `F` are
    /// accepted as short names; `grad_clip = none` disables clipping.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in parse_kv(text)? {
            let v = value.as_str();
            match key.as_str() {
                "num_layers" | "L" => c.num_layers = parse_value(&key, v)?,
                "num_blocks" | "B" => c.num_blocks = parse_value(&key, v)?,
                "filter_multiplier" | "F" => c.filter_multiplier = parse_value(&key, v)?,
                "num_classes" => c.num_classes = parse_value(&key, v)?,
                "epochs" => c.epochs = parse_value(&key, v)?,
                "batch_size" => c.batch_size = parse_value(&key, v)?,
                "lr_max" => c.lr_max = parse_value(&key, v)?,
                "lr_min" => c.lr_min = parse_value(&key, v)?,
                "momentum" => c.momentum = parse_value(&key, v)?,
                "weight_decay" => c.weight_decay = parse_value(&key, v)?,
                "arch_lr" => c.arch_lr = parse_value(&key, v)?,
                "arch_weight_decay" => c.arch_weight_decay = parse_value(&key, v)?,
                "arch_delay_epochs" => c.arch_delay_epochs = parse_value(&key, v)?,
                "seed" => c.seed = parse_value(&key, v)?,
                "crop_size" => c.crop_size = parse_value(&key, v)?,
                "grad_clip" => {
                    c.grad_clip = if v == "none" {
                        None
                    } else {
                        Some(parse_value(&key, v)?)
                    }
                }
                other => return Err(Error::invalid(format!("unknown search key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let clip = self
            .grad_clip
            .map_or_else(|| "none".to_string(), |v| v.to_string());
        let fields: [(&str, String); 16] = [
            ("num_layers", self.num_layers.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("filter_multiplier", self.filter_multiplier.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_max", self.lr_max.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("arch_lr", self.arch_lr.to_string()),
            ("arch_weight_decay", self.arch_weight_decay.to_string()),
            ("arch_delay_epochs", self.arch_delay_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("grad_clip", clip),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
/// Written as a convex blend so both endpoints are reproduced exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
    Ok(lr_min * (1.0 - w) + lr_max * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_exact() {
        assert_eq!(cosine_lr(0, 1000, 0.025, 0.001).unwrap(), 0.025);
        assert_eq!(cosine_lr(1000, 1000, 0.025, 0.001).unwrap(), 0.001);
        assert!((cosine_lr(500, 1000, 0.025, 0.001).unwrap() - 0.013).abs() < 1e-12);
        assert!(cosine_lr(1001, 1000, 0.025, 0.001).is_err());
        for total in 1..50 {
            assert_eq!(cosine_lr(total, total, 0.025, 0.001).unwrap(), 0.001);
        }
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let c = SearchConfig {
            grad_clip: None,
            seed: 9,
            epochs: 3,
            arch_delay_epochs: 1,
            ..Default::default()
        };
        assert_eq!(SearchConfig::from_kv(&c.to_kv()).unwrap(), c);
        let short = SearchConfig::from_kv("L = 4\nB = 2  # blocks\nF = 8\n").unwrap();
        assert_eq!(
            (short.num_layers, short.num_blocks, short.filter_multiplier),
            (4, 2, 8)
        );
        assert!(SearchConfig::from_kv("epochs = 5\narch_delay_epochs = 6").is_err());
        assert!(SearchConfig::from_kv("arch_lr = 0").is_err());
        assert!(SearchConfig::from_kv("epochs = x").is_err());
        assert!(SearchConfig::from_kv("epochs = 1\nepochs = 2").is_err());
        assert!(SearchConfig::from_kv("nonsense").is_err());
    }
}
