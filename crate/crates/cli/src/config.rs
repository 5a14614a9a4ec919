//! Flat key=value experiment configuration with a closed schema.
//!
//! A config file holds `key=value` lines (UTF-8, `#` comments). Flags given
//! on the command line override file values. Unknown keys are rejected. The
//! effective config is echoed into every run directory and its hash names
//! the directory, so re-running a config reproduces the same artifacts in
//! the same place.

use std::str::FromStr;

use dds_uda::trainer::{AmpMode, MaskBaseline, TrainConfig, Variant};

/// Training settings plus the data-generation and domain-selection keys.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveConfig {
    pub train: TrainConfig,
    pub source_domain: u32,
    pub target_domain: u32,
    pub domains: u32,
    pub n_per_domain: usize,
    pub size: usize,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        EffectiveConfig {
            train: TrainConfig::default(),
            source_domain: 0,
            target_domain: 1,
            domains: 2,
            n_per_domain: 40,
            size: 64,
        }
    }
}

/// All recognized keys, in canonical serialization order.
pub const KEYS: [&str; 22] = [
    "seed",
    "batch_size",
    "pretrain_iters",
    "adapt_iters",
    "l_init",
    "lambda_s",
    "lambda_t",
    "lambda_t_stylized",
    "d_min",
    "d_max",
    "lambda_k_lo",
    "lambda_k_hi",
    "beta",
    "ema_alpha",
    "variant",
    "mask_baseline",
    "amp_mode",
    "source_domain",
    "target_domain",
    "domains",
    "n_per_domain",
    "size",
];

impl EffectiveConfig {
    /// Sets one key, validating the value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value {value:?} for key {key:?}"))
        }
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "pretrain_iters" => t.pretrain_iters = parse(key, value)?,
            "adapt_iters" => t.adapt_iters = parse(key, value)?,
            "l_init" => t.l_init = parse(key, value)?,
            "lambda_s" => t.lambda_s = parse(key, value)?,
            "lambda_t" => t.lambda_t = parse(key, value)?,
            "lambda_t_stylized" => t.lambda_t_stylized = parse(key, value)?,
            "d_min" => t.d_min = parse(key, value)?,
            "d_max" => t.d_max = parse(key, value)?,
            "lambda_k_lo" => t.lambda_k_lo = parse(key, value)?,
            "lambda_k_hi" => t.lambda_k_hi = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "ema_alpha" => t.ema_alpha = parse(key, value)?,
            "variant" => t.variant = Variant::from_str(value).map_err(|e| e.to_string())?,
            "mask_baseline" => {
                t.mask_baseline = MaskBaseline::from_str(value).map_err(|e| e.to_string())?
            }
            "amp_mode" => t.amp_mode = AmpMode::from_str(value).map_err(|e| e.to_string())?,
            "source_domain" => self.source_domain = parse(key, value)?,
            "target_domain" => self.target_domain = parse(key, value)?,
            "domains" => self.domains = parse(key, value)?,
            "n_per_domain" => self.n_per_domain = parse(key, value)?,
            "size" => self.size = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "seed" => t.seed.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "pretrain_iters" => t.pretrain_iters.to_string(),
            "adapt_iters" => t.adapt_iters.to_string(),
            "l_init" => t.l_init.to_string(),
            "lambda_s" => t.lambda_s.to_string(),
            "lambda_t" => t.lambda_t.to_string(),
            "lambda_t_stylized" => t.lambda_t_stylized.to_string(),
            "d_min" => t.d_min.to_string(),
            "d_max" => t.d_max.to_string(),
            "lambda_k_lo" => t.lambda_k_lo.to_string(),
            "lambda_k_hi" => t.lambda_k_hi.to_string(),
            "beta" => t.beta.to_string(),
            "ema_alpha" => t.ema_alpha.to_string(),
            "variant" => t.variant.to_string(),
            "mask_baseline" => t.mask_baseline.to_string(),
            "amp_mode" => t.amp_mode.to_string(),
            "source_domain" => self.source_domain.to_string(),
            "target_domain" => self.target_domain.to_string(),
            "domains" => self.domains.to_string(),
            "n_per_domain" => self.n_per_domain.to_string(),
            "size" => self.size.to_string(),
            other => unreachable!("unknown key {other}"),
        }
    }

    /// Applies a config file's lines.
    pub fn apply_file(&mut self, text: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", n + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies repeated `--set key=value` overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), String> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| format!("--set expects key=value, got {s:?}"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization: every key in fixed order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key}={}\n", self.get(key)));
        }
        out
    }
}
