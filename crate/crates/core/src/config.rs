//! Flat `key = value` configuration covering [`NetworkConfig`] and
//! [`TrainConfig`]. Keys are the field names of both structs.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::arch::{NetworkConfig, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {detail}")]
    Value {
        key: String,
        value: String,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Network and training settings resolved together.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

pub const NETWORK_KEYS: &[&str] = &[
    "variant",
    "channels",
    "groups",
    "ca_reduction",
    "rrcab_loops",
    "scale",
    "ic",
    "cic",
    "ns",
    "ca",
    "cs",
    "ff",
    "global_skip",
    "leaky_slope",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch",
    "lr_init",
    "lr_final",
    "total_steps",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "checkpoint_every",
    "lr_patch",
    "validate_every",
];

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        detail: e.to_string(),
    })
}

impl RunConfig {
    pub fn for_variant(v: Variant) -> Self {
        Self {
            network: NetworkConfig::for_variant(v),
            train: TrainConfig::default(),
        }
    }

    /// Sets one key. `variant` replaces the whole network preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "variant" => *n = NetworkConfig::for_variant(parse(key, value)?),
            "channels" => n.channels = parse(key, value)?,
            "groups" => n.groups = parse(key, value)?,
            "ca_reduction" => n.ca_reduction = parse(key, value)?,
            "rrcab_loops" => n.rrcab_loops = parse(key, value)?,
            "scale" => n.scale = parse(key, value)?,
            "ic" => n.ic = parse(key, value)?,
            "cic" => n.cic = parse(key, value)?,
            "ns" => n.ns = parse(key, value)?,
            "ca" => n.ca = parse(key, value)?,
            "cs" => n.cs = parse(key, value)?,
            "ff" => n.ff = parse(key, value)?,
            "global_skip" => n.global_skip = parse(key, value)?,
            "leaky_slope" => n.leaky_slope = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "lr_init" => t.lr_init = parse(key, value)?,
            "lr_final" => t.lr_final = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "lr_patch" => t.lr_patch = parse(key, value)?,
            "validate_every" => t.validate_every = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies pairs in order, except that the last `variant` is applied
    /// first so later keys refine its preset. Later duplicates win.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k == "variant") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "variant") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a full configuration text on top of the defaults and
    /// validates it.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_pairs(&parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(ConfigError::Invalid)
    }

    /// Every key, one `key = value` line each, in a form [`from_text`]
    /// reads back to an equal value.
    ///
    /// [`from_text`]: RunConfig::from_text
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", n.variant.to_string());
        put("channels", n.channels.to_string());
        put("groups", n.groups.to_string());
        put("ca_reduction", n.ca_reduction.to_string());
        put("rrcab_loops", n.rrcab_loops.to_string());
        put("scale", n.scale.to_string());
        put("ic", n.ic.to_string());
        put("cic", n.cic.to_string());
        put("ns", n.ns.to_string());
        put("ca", n.ca.to_string());
        put("cs", n.cs.to_string());
        put("ff", n.ff.to_string());
        put("global_skip", n.global_skip.to_string());
        put("leaky_slope", n.leaky_slope.to_string());
        put("batch", t.batch.to_string());
        put("lr_init", t.lr_init.to_string());
        put("lr_final", t.lr_final.to_string());
        put("total_steps", t.total_steps.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("eps", t.eps.to_string());
        put("seed", t.seed.to_string());
        put("checkpoint_every", t.checkpoint_every.to_string());
        put("lr_patch", t.lr_patch.to_string());
        put("validate_every", t.validate_every.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::for_variant(Variant::MsfinS);
        cfg.network.cic = true;
        cfg.train.lr_init = 3.3e-4;
        cfg.train.seed = 17;
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            NETWORK_KEYS.len() + TRAIN_KEYS.len(),
            cfg.to_text().lines().count()
        );
    }

    #[test]
    fn variant_applies_before_other_keys() {
        let cfg = RunConfig::from_text("channels = 12\ngroups = 3\nvariant = msfin-s\n").unwrap();
        assert_eq!(cfg.network.variant, Variant::MsfinS);
        assert_eq!(cfg.network.channels, 12);
        assert_eq!(cfg.network.rrcab_loops, 0);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(parse_pairs("a = 1\nnonsense"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(RunConfig::from_text("colour = red"), Err(ConfigError::UnknownKey(k)) if k == "colour"));
        assert!(matches!(RunConfig::from_text("channels = lots"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::from_text("channels = 10\ngroups = 3"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# header\n\nseed = 5 # trailing\n").unwrap();
        assert_eq!(cfg.train.seed, 5);
    }
}
