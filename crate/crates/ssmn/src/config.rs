//! Run configuration: a plain `key = value` file with CLI overrides, fully
//! serialized alongside every checkpoint.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SsmnError};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
    // patch parameters
    pub rho: f64,
    pub patch_size: usize,
    pub ink_threshold: f64,
    pub use_dt: bool,
    // model
    pub dual_encoder: bool,
    pub use_fgc: bool,
    pub use_fp: bool,
    // inference / training
    pub train_beam: usize,
    pub eval_beam: usize,
    pub target_order: String, // "shuffle" | "fixed"
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub amn_max_epochs: usize,
    pub amn_patience: usize,
    pub amn_plateau_delta: f64,
    pub laso_epochs: usize,
    pub max_pairs_per_epoch: usize,
    // dataset generation
    pub categories: usize,
    pub per_category: usize,
    pub k: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub rot_degrees: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub trans: f64,
    pub flip_p: f64,
    pub jitter_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: "data".into(),
            out_dir: "out".into(),
            rho: 0.2,
            patch_size: 32,
            ink_threshold: 0.98,
            use_dt: true,
            dual_encoder: false,
            use_fgc: true,
            use_fp: true,
            train_beam: 5,
            eval_beam: 100,
            target_order: "shuffle".into(),
            lr: 1e-4,
            momentum: 0.9,
            decay: 0.95,
            amn_max_epochs: 20,
            amn_patience: 3,
            amn_plateau_delta: 0.2,
            laso_epochs: 1,
            max_pairs_per_epoch: 0, // 0 = all
            categories: 50,
            per_category: 5,
            k: 10,
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            rot_degrees: 30.0,
            scale_min: 0.8,
            scale_max: 1.2,
            trans: 0.1,
            flip_p: 0.2,
            jitter_sigma: 0.01,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(seed, u64);
        $m!(data_dir, String);
        $m!(out_dir, String);
        $m!(rho, f64);
        $m!(patch_size, usize);
        $m!(ink_threshold, f64);
        $m!(use_dt, bool);
        $m!(dual_encoder, bool);
        $m!(use_fgc, bool);
        $m!(use_fp, bool);
        $m!(train_beam, usize);
        $m!(eval_beam, usize);
        $m!(target_order, String);
        $m!(lr, f64);
        $m!(momentum, f64);
        $m!(decay, f64);
        $m!(amn_max_epochs, usize);
        $m!(amn_patience, usize);
        $m!(amn_plateau_delta, f64);
        $m!(laso_epochs, usize);
        $m!(max_pairs_per_epoch, usize);
        $m!(categories, usize);
        $m!(per_category, usize);
        $m!(k, usize);
        $m!(train_frac, f64);
        $m!(val_frac, f64);
        $m!(test_frac, f64);
        $m!(rot_degrees, f64);
        $m!(scale_min, f64);
        $m!(scale_max, f64);
        $m!(trans, f64);
        $m!(flip_p, f64);
        $m!(jitter_sigma, f64);
    };
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        macro_rules! setter {
            ($field:ident, String) => {
                if key == stringify!($field) {
                    self.$field = value.to_string();
                    return self.validate_field(key);
                }
            };
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|_| {
                        SsmnError::Invalid(format!("config key '{key}': bad value '{value}'"))
                    })?;
                    return self.validate_field(key);
                }
            };
        }
        config_fields!(setter);
        Err(SsmnError::Invalid(format!("unknown config key '{key}'")))
    }

    fn validate_field(&self, key: &str) -> Result<()> {
        let ok = match key {
            "rho" => self.rho > 0.0 && self.rho <= 1.0,
            "ink_threshold" => self.ink_threshold > 0.0 && self.ink_threshold < 1.0,
            "target_order" => matches!(self.target_order.as_str(), "shuffle" | "fixed"),
            "train_beam" | "eval_beam" => self.train_beam >= 1 && self.eval_beam >= 1,
            "patch_size" => self.patch_size >= 2,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(SsmnError::Invalid(format!("config key '{key}': invalid value")))
        }
    }

    /// Parse a `key = value` file body; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SsmnError::Invalid(format!("config line {}: expected 'key = value'", i + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| SsmnError::Invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical serialization: every key on its own line, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($field:ident, String) => {
                writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();
            };
            ($field:ident, f64) => {
                writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();
            };
            ($field:ident, $ty:ty) => {
                writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();
            };
        }
        config_fields!(emit);
        out
    }

    /// FNV-1a hash of the canonical text, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nseed = 7\nlr = 0.001 # inline\n\ntarget_order = fixed\n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.target_order, "fixed");
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("seed", "abc").is_err());
        assert!(cfg.set("target_order", "random").is_err());
        assert!(cfg.set("rho", "1.5").is_err());
        assert!(cfg.apply_text("just a line without equals").is_err());
    }

    #[test]
    fn hash_changes_with_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
