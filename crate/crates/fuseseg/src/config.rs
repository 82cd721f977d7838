//! Flat `key = value` run configuration.
//!
//! [`SCHEMA`] is the only list of keys: parsing, defaults and the `--help`
//! listing are all derived from it. Lines may carry `#` comments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use fuseseg_core::model::{ModelSpec, SaSettings, Variant};
use fuseseg_core::objectives::LossConfig;
use fuseseg_core::synth::{PhantomParams, Range};
use fuseseg_core::train::TrainConfig;

use crate::error::{Error, Result};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default, doc }
}

pub const SCHEMA: &[Key] = &[
    key("out", "fuseseg-out", "output root; FUSESEG_OUT and --out override it"),
    key("dataset", "", "dataset directory; empty means <out>/data"),
    key("n_samples", "300", "number of generated samples"),
    key("image_size", "64", "image side in pixels, a multiple of 32"),
    key("n_distractors", "1,4", "min,max distractor blobs per sample"),
    key("n_decoys", "0,2", "min,max assistant-only decoy blobs per sample"),
    key("mass_radius", "4,12", "min,max mass semi-axis in pixels"),
    key("blob_radius", "3,7", "min,max distractor radius in pixels"),
    key("spiculation", "0.3", "relative boundary perturbation of the mass"),
    key("background", "0.05,0.15", "background intensity band"),
    key("master_fg_intensity", "0.65,0.9", "mass intensity band in the master image"),
    key("distractor_intensity", "0.6,0.95", "distractor intensity band in the master image"),
    key("assistant_mass_contrast", "0.4,0.55", "mass intensity band in the assistant image"),
    key("assistant_distractor_intensity", "0.8,1", "distractor intensity band in the assistant image"),
    key("noise_sigma", "0.05", "Gaussian noise standard deviation"),
    key("data_seed", "0", "phantom generator seed"),
    key("variant", "proposed", "architecture for train and export-attention"),
    key("variants", "fuse_unet,proposed", "comma-separated architectures for benchmark"),
    key("width", "4", "channels of the first U-Net block; 32 is the full-size plan"),
    key("sa_reduction", "16", "attention channel reduction, halved until it divides the block width"),
    key("sa_dilation", "4", "dilation of the attention 3x3 convolution"),
    key("lr0", "0.0001", "initial step size"),
    key("decay_every", "30", "epochs between step-size halvings"),
    key("batch_size", "4", "samples per optimizer step"),
    key("epochs", "90", "training epochs"),
    key("beta1", "0.9", "first-moment decay"),
    key("beta2", "0.999", "second-moment decay"),
    key("adam_eps", "1e-8", "optimizer denominator guard"),
    key("alpha", "1", "cross-entropy weight in the loss"),
    key("dice_epsilon", "1", "Dice loss smoothing term"),
    key("ce_clamp", "1e-7", "probability clamp inside the cross-entropy logs"),
    key("folds", "5", "cross-validation folds"),
    key("test_fold", "1", "held-out fold, 1-based"),
    key("full_cv", "false", "benchmark: rotate the held-out fold over all folds"),
    key("split_seed", "0", "fold assignment seed"),
    key("runs", "3", "benchmark: independent runs per variant"),
    key("seed", "0", "run seed; benchmark run r uses seed + r"),
    key("stop_after", "0", "train: stop after this many epochs in one invocation, 0 = no limit"),
    key("checkpoint_every", "1", "train: epochs between checkpoints"),
];

pub fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Key listing for `--help`.
pub fn help_text() -> String {
    let width = SCHEMA.iter().map(|k| k.name.len() + k.default.len()).max().unwrap_or(0) + 4;
    let mut out = String::from("Configuration keys (key = default):\n");
    for k in SCHEMA {
        let head = format!("{} = {}", k.name, k.default);
        out.push_str(&format!("  {head:<width$} {}\n", k.doc));
    }
    out
}

/// Explicitly set keys; everything else falls back to the schema default.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let key = schema_key(name).ok_or_else(|| Error::Validation(format!("unknown config key {name:?}")))?;
        self.values.insert(key.name, value.trim().to_owned());
        Ok(())
    }

    /// Parses `key=value` from a `--set` argument.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Validation(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        match self.values.get(name) {
            Some(v) => v,
            None => schema_key(name).map(|k| k.default).expect("key is in the schema"),
        }
    }

    fn parse<T: FromStr>(&self, name: &str) -> Result<T> {
        let raw = self.get(name);
        raw.parse()
            .map_err(|_| Error::Validation(format!("invalid value {raw:?} for {name}")))
    }

    fn pair<T: FromStr + Copy>(&self, name: &str) -> Result<(T, T)> {
        let raw = self.get(name);
        let bad = || Error::Validation(format!("{name} expects min,max, got {raw:?}"));
        let (a, b) = raw.split_once(',').ok_or_else(bad)?;
        Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
    }

    fn range(&self, name: &str) -> Result<Range> {
        let (lo, hi) = self.pair(name)?;
        Ok(Range::new(lo, hi))
    }

    fn variant(&self, raw: &str) -> Result<Variant> {
        Ok(raw.trim().parse::<Variant>()?)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let out = PathBuf::from(self.get("out"));
        let dataset = match self.get("dataset") {
            "" => out.join("data"),
            d => PathBuf::from(d),
        };
        let phantom = PhantomParams {
            image_size: self.parse("image_size")?,
            n_distractors: self.pair("n_distractors")?,
            n_decoys: self.pair("n_decoys")?,
            mass_radius: self.range("mass_radius")?,
            blob_radius: self.range("blob_radius")?,
            spiculation: self.parse("spiculation")?,
            background: self.range("background")?,
            master_fg_intensity: self.range("master_fg_intensity")?,
            distractor_intensity: self.range("distractor_intensity")?,
            assistant_mass_contrast: self.range("assistant_mass_contrast")?,
            assistant_distractor_intensity: self.range("assistant_distractor_intensity")?,
            noise_sigma: self.parse("noise_sigma")?,
            seed: self.parse("data_seed")?,
        };
        phantom.validate()?;
        let train = TrainConfig {
            lr0: self.parse("lr0")?,
            decay_every: self.parse("decay_every")?,
            batch_size: self.parse("batch_size")?,
            epochs: self.parse("epochs")?,
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            adam_eps: self.parse("adam_eps")?,
            loss: LossConfig {
                alpha: self.parse("alpha")?,
                epsilon: self.parse("dice_epsilon")?,
                clamp: self.parse("ce_clamp")?,
            },
            folds: self.parse("folds")?,
            runs: self.parse("runs")?,
            seed: self.parse("seed")?,
        };
        train.validate()?;
        let variants = self
            .get("variants")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| self.variant(s))
            .collect::<Result<Vec<_>>>()?;
        if variants.is_empty() {
            return Err(Error::Validation("variants must name at least one architecture".into()));
        }
        let test_fold: usize = self.parse("test_fold")?;
        if test_fold == 0 || test_fold > train.folds {
            return Err(Error::Validation(format!(
                "test_fold {test_fold} must be between 1 and folds = {}",
                train.folds
            )));
        }
        let n_samples: usize = self.parse("n_samples")?;
        if n_samples == 0 {
            return Err(Error::Validation("n_samples must be positive".into()));
        }
        let checkpoint_every: usize = self.parse("checkpoint_every")?;
        if checkpoint_every == 0 {
            return Err(Error::Validation("checkpoint_every must be positive".into()));
        }
        let config = RunConfig {
            out,
            dataset,
            n_samples,
            phantom,
            variant: self.variant(self.get("variant"))?,
            variants,
            width: self.parse("width")?,
            sa: SaSettings {
                reduction: self.parse("sa_reduction")?,
                dilation: self.parse("sa_dilation")?,
            },
            train,
            test_fold: test_fold - 1,
            full_cv: self.parse("full_cv")?,
            split_seed: self.parse("split_seed")?,
            stop_after: self.parse("stop_after")?,
            checkpoint_every,
        };
        for &v in config.variants.iter().chain([&config.variant]) {
            config.spec(v)?;
        }
        Ok(config)
    }
}

/// Fully parsed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub dataset: PathBuf,
    pub n_samples: usize,
    pub phantom: PhantomParams,
    pub variant: Variant,
    pub variants: Vec<Variant>,
    pub width: usize,
    /// Upper bound on the reduction factor, and the dilation.
    pub sa: SaSettings,
    pub train: TrainConfig,
    /// 0-based.
    pub test_fold: usize,
    pub full_cv: bool,
    pub split_seed: u64,
    pub stop_after: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Settings::default().resolve().expect("schema defaults are valid")
    }
}

impl RunConfig {
    pub fn spec(&self, variant: Variant) -> Result<ModelSpec> {
        if self.width == 0 {
            return Err(Error::Validation("width must be positive".into()));
        }
        let mut spec = ModelSpec::with_base_width(variant, self.width);
        if let Some(sa) = spec.sa.as_mut() {
            let first = spec.encoder_channels[0];
            let mut r = self.sa.reduction.max(1);
            while r > 1 && first % r != 0 {
                r /= 2;
            }
            *sa = SaSettings {
                reduction: r,
                dilation: self.sa.dilation,
            };
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_agree_with_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.phantom, PhantomParams::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.spec(Variant::Proposed).unwrap(), ModelSpec::with_base_width(Variant::Proposed, 4));
        let mut full = c.clone();
        full.width = 32;
        for v in Variant::ALL {
            assert_eq!(full.spec(v).unwrap(), ModelSpec::full_size(v));
        }
    }

    #[test]
    fn every_key_is_documented_once() {
        let help = help_text();
        for (i, k) in SCHEMA.iter().enumerate() {
            assert!(help.contains(&format!("{} = {}", k.name, k.default)));
            assert!(!k.doc.is_empty());
            assert!(SCHEMA[..i].iter().all(|o| o.name != k.name));
        }
    }

    #[test]
    fn parse_errors() {
        let mut s = Settings::default();
        assert!(matches!(s.set("bogus", "1"), Err(Error::Validation(_))));
        assert!(s.apply_text("# comment\n\nepochs = 3 # trailing\n", "cfg").is_ok());
        assert_eq!(s.resolve().unwrap().train.epochs, 3);
        assert!(s.apply_text("epochs\n", "cfg").is_err());
        s.set("image_size", "50").unwrap();
        let e = s.resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let mut s = Settings::default();
        s.set("variant", "resnet").unwrap();
        let e = s.resolve().unwrap_err();
        assert!(e.to_string().contains("fuse_unet_sa"));
        assert_eq!(e.exit_code(), 2);
    }
}
