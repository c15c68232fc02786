//! Run configuration: architecture sizes, exploration and penalty constants,
//! training hyperparameters, and the `key = value` config-file format.

use crate::error::{Error, Result};
use crate::glimpse;
use std::fmt::Write as _;
use std::path::Path;

/// Everything a run needs to be reproducible. Field names double as the
/// config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ApcnConfig {
    /// Input image side N (pixels).
    pub image_side: usize,
    /// Top-level frame scale M, fraction of the image side.
    pub top_scale: f64,
    /// Bottom-level glimpse scale m, fraction of the frame side.
    pub bottom_scale: f64,
    /// Scale of the random initialization glimpse.
    pub init_scale: f64,
    /// Macro-steps T₂.
    pub macro_steps: usize,
    /// Micro-steps T₁ per macro-step.
    pub micro_steps: usize,
    /// Top-level state/action vector width |R| = |A|.
    pub top_size: usize,
    /// Bottom-level state/action vector width |r| = |a|.
    pub bottom_size: usize,
    /// Option vector width |z|.
    pub option_size: usize,
    /// Hidden width of the glimpse/reference decoders and task network.
    pub decoder_hidden: usize,
    /// Feature width of the random-baseline extractor.
    pub feature_hidden: usize,
    /// Exploration noise σ for sampled locations and options.
    pub sigma: f64,
    /// Leaky slope α of the location penalty.
    pub penalty_slope: f64,
    /// Weight λ of the location penalty inside the action loss.
    pub penalty_weight: f64,
    /// Glimpse budget of the random baseline (defaults to T₂·T₁).
    pub rb_glimpses: usize,

    pub learning_rate: f64,
    /// Global gradient-norm clip applied to each batch mean (0 disables).
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fixed-order gradient reduction; slower but bitwise reproducible.
    pub deterministic: bool,
    /// Test-set subset used for the per-epoch progress metric (0 = full).
    pub eval_subset: usize,

    pub dataset: String,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for ApcnConfig {
    fn default() -> Self {
        ApcnConfig::mnist()
    }
}

impl ApcnConfig {
    /// 28×28 digits: 14×14 frames, 7×7 glimpses, 3 macro- and micro-steps.
    pub fn mnist() -> ApcnConfig {
        ApcnConfig {
            image_side: 28,
            top_scale: 0.5,
            bottom_scale: 0.5,
            init_scale: 0.5,
            macro_steps: 3,
            micro_steps: 3,
            top_size: 256,
            bottom_size: 32,
            option_size: 32,
            decoder_hidden: 128,
            feature_hidden: 128,
            sigma: 0.1,
            penalty_slope: 0.2,
            penalty_weight: 1.0,
            rb_glimpses: 9,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            deterministic: false,
            eval_subset: 1000,
            dataset: "mnist".into(),
            data_dir: "data/mnist".into(),
            out_dir: "out".into(),
        }
    }

    pub fn fashion() -> ApcnConfig {
        ApcnConfig {
            dataset: "fashion".into(),
            data_dir: "data/fashion".into(),
            ..ApcnConfig::mnist()
        }
    }

    /// 32×32 characters: 16×16 frames, 8×8 glimpses, 4 macro-steps and a
    /// wider bottom level.
    pub fn omniglot() -> ApcnConfig {
        ApcnConfig {
            image_side: 32,
            macro_steps: 4,
            bottom_size: 64,
            rb_glimpses: 12,
            dataset: "omniglot".into(),
            data_dir: "data/omniglot".into(),
            ..ApcnConfig::mnist()
        }
    }

    pub fn preset(name: &str) -> Result<ApcnConfig> {
        match name {
            "mnist" => Ok(ApcnConfig::mnist()),
            "fashion" => Ok(ApcnConfig::fashion()),
            "omniglot" => Ok(ApcnConfig::omniglot()),
            other => Err(Error::Config(format!("unknown dataset preset `{other}`"))),
        }
    }

    // ---- derived geometry ----

    /// Side of the top-level reference frame in pixels.
    pub fn frame_side(&self) -> usize {
        glimpse::patch_side(self.image_side, self.top_scale)
    }

    /// Side of a bottom-level glimpse in pixels.
    pub fn glimpse_side(&self) -> usize {
        glimpse::patch_side(self.frame_side(), self.bottom_scale)
    }

    /// Side of the initialization glimpse in pixels.
    pub fn init_side(&self) -> usize {
        glimpse::patch_side(self.image_side, self.init_scale)
    }

    /// Penalty threshold for top-level locations: the frame must fit in the
    /// image.
    pub fn top_threshold(&self) -> f64 {
        glimpse::fits_threshold(self.image_side, self.frame_side())
    }

    /// Penalty threshold for bottom-level locations: the glimpse must fit in
    /// the frame.
    pub fn bottom_threshold(&self) -> f64 {
        glimpse::fits_threshold(self.frame_side(), self.glimpse_side())
    }

    /// Penalty threshold for flat (single-level) models sampling
    /// `glimpse_side` patches from the whole image.
    pub fn flat_threshold(&self) -> f64 {
        glimpse::fits_threshold(self.image_side, self.glimpse_side())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.image_side >= 4, "image_side must be at least 4")?;
        check(
            self.top_scale > 0.0 && self.top_scale <= 1.0,
            "top_scale must be in (0, 1]",
        )?;
        check(
            self.bottom_scale > 0.0 && self.bottom_scale <= 1.0,
            "bottom_scale must be in (0, 1]",
        )?;
        check(
            self.init_scale > 0.0 && self.init_scale <= 1.0,
            "init_scale must be in (0, 1]",
        )?;
        check(
            self.macro_steps >= 1 && self.micro_steps >= 1,
            "macro_steps and micro_steps must be at least 1",
        )?;
        check(
            self.top_size > 0 && self.bottom_size > 0 && self.option_size > 0,
            "vector sizes must be positive",
        )?;
        check(self.sigma >= 0.0, "sigma must be non-negative")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.rb_glimpses >= 1, "rb_glimpses must be at least 1")?;
        Ok(())
    }

    // ---- key = value serialization ----

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_side", self.image_side.to_string());
        kv("top_scale", self.top_scale.to_string());
        kv("bottom_scale", self.bottom_scale.to_string());
        kv("init_scale", self.init_scale.to_string());
        kv("macro_steps", self.macro_steps.to_string());
        kv("micro_steps", self.micro_steps.to_string());
        kv("top_size", self.top_size.to_string());
        kv("bottom_size", self.bottom_size.to_string());
        kv("option_size", self.option_size.to_string());
        kv("decoder_hidden", self.decoder_hidden.to_string());
        kv("feature_hidden", self.feature_hidden.to_string());
        kv("sigma", self.sigma.to_string());
        kv("penalty_slope", self.penalty_slope.to_string());
        kv("penalty_weight", self.penalty_weight.to_string());
        kv("rb_glimpses", self.rb_glimpses.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("eval_subset", self.eval_subset.to_string());
        kv("dataset", self.dataset.clone());
        kv("data_dir", self.data_dir.clone());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// Parse `key = value` lines (`#` comments, blank lines allowed) on top
    /// of the preset selected by the file's `dataset` key, if any.
    pub fn from_text(text: &str) -> Result<ApcnConfig> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), lineno + 1));
        }
        let mut cfg = match pairs.iter().find(|(k, _, _)| k == "dataset") {
            Some((_, v, _)) => ApcnConfig::preset(v)?,
            None => ApcnConfig::default(),
        };
        for (k, v, lineno) in &pairs {
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ApcnConfig> {
        let text = std::fs::read_to_string(path)?;
        ApcnConfig::from_text(&text)
    }

    /// Set one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
        }
        match key {
            "image_side" => self.image_side = parse(key, value)?,
            "top_scale" => self.top_scale = parse(key, value)?,
            "bottom_scale" => self.bottom_scale = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "macro_steps" => self.macro_steps = parse(key, value)?,
            "micro_steps" => self.micro_steps = parse(key, value)?,
            "top_size" => self.top_size = parse(key, value)?,
            "bottom_size" => self.bottom_size = parse(key, value)?,
            "option_size" => self.option_size = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "feature_hidden" => self.feature_hidden = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "penalty_slope" => self.penalty_slope = parse(key, value)?,
            "penalty_weight" => self.penalty_weight = parse(key, value)?,
            "rb_glimpses" => self.rb_glimpses = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "eval_subset" => self.eval_subset = parse(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Digest of the architecture-relevant fields, stored in checkpoints so
    /// a mismatched load fails fast.
    pub fn arch_digest(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let arch = format!(
            "{} {} {} {} {} {} {} {} {} {} {}",
            self.image_side,
            self.top_scale,
            self.bottom_scale,
            self.init_scale,
            self.macro_steps,
            self.micro_steps,
            self.top_size,
            self.bottom_size,
            self.option_size,
            self.decoder_hidden,
            self.feature_hidden,
        );
        let digest = Sha256::digest(arch.as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_paper_geometry() {
        let m = ApcnConfig::mnist();
        assert_eq!(m.frame_side(), 14);
        assert_eq!(m.glimpse_side(), 7);
        assert_eq!((m.top_threshold(), m.bottom_threshold()), (0.5, 0.5));
        assert_eq!(m.flat_threshold(), 0.75);
        let o = ApcnConfig::omniglot();
        assert_eq!(o.frame_side(), 16);
        assert_eq!(o.glimpse_side(), 8);
        assert_eq!(o.macro_steps, 4);
        assert_eq!(o.bottom_size, 64);
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut cfg = ApcnConfig::omniglot();
        cfg.sigma = 0.05;
        cfg.seed = 1234;
        cfg.out_dir = "runs/test".into();
        let parsed = ApcnConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = ApcnConfig::from_text("image_side = 28\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn dataset_key_selects_preset_before_overrides() {
        let cfg = ApcnConfig::from_text("dataset = omniglot\nmacro_steps = 5\n").unwrap();
        assert_eq!(cfg.image_side, 32);
        assert_eq!(cfg.macro_steps, 5);
        assert_eq!(cfg.bottom_size, 64);
    }

    #[test]
    fn arch_digest_tracks_architecture_only() {
        let a = ApcnConfig::mnist();
        let mut b = ApcnConfig::mnist();
        b.seed = 99;
        b.learning_rate = 0.1;
        assert_eq!(a.arch_digest(), b.arch_digest());
        b.bottom_size = 64;
        assert_ne!(a.arch_digest(), b.arch_digest());
    }
}
