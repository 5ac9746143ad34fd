//! Flat `key = value` run configuration.
//!
//! A `profile` line selects the base values (`desk` or `paper`); every other
//! line overrides one field. Unknown and repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::crossmodal::{CmeConfig, MimMethod};
use crate::encoders::{EncoderConfig, TextGlobal};
use crate::error::{Error, Result};
use crate::losses::SdmConfig;
use crate::numkernel::{AdamState, LrSchedule, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub hidden_size: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub attention_heads_of_cme: usize,
    pub transformer_blocks_in_cme: usize,
    pub patch_size: usize,
    pub input_image_height: usize,
    pub input_image_width: usize,
    pub textual_token_sequence: usize,
    pub batch_size: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub adam_alpha: f64,
    pub adam_beta: f64,
    pub adam_epsilon: f64,
    pub temperature_in_sdm_loss: f64,
    pub sdm_epsilon: f64,
    pub token_mask_rate: f64,
    pub patch_mask_rate: f64,
    pub mlm_loss_weight: f64,
    pub semmim_loss_weight: f64,
    pub mlm_enabled: bool,
    pub mim_method: MimMethod,
    /// Divide the masked cross-entropies by the class count.
    pub per_class_normalization: bool,
    pub text_global: TextGlobal,
    pub flip_augmentation: bool,
    pub num_test_identities: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Small model that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            hidden_size: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            attention_heads_of_cme: 4,
            transformer_blocks_in_cme: 2,
            patch_size: 8,
            input_image_height: 64,
            input_image_width: 32,
            textual_token_sequence: 32,
            batch_size: 32,
            epoch: 30,
            learning_rate: 5e-4,
            warmup_start_lr: 5e-5,
            warmup_epochs: 2,
            adam_alpha: 0.9,
            adam_beta: 0.999,
            adam_epsilon: 1e-8,
            temperature_in_sdm_loss: 0.02,
            sdm_epsilon: 1e-8,
            token_mask_rate: 0.15,
            patch_mask_rate: 0.15,
            mlm_loss_weight: 1.0,
            semmim_loss_weight: 1.0,
            mlm_enabled: true,
            mim_method: MimMethod::Semantic,
            per_class_normalization: true,
            text_global: TextGlobal::Sos,
            flip_augmentation: true,
            num_test_identities: 16,
            seed: 0,
            dataset: None,
            output_dir: None,
        }
    }

    /// Published sizes and optimisation settings.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            hidden_size: 512,
            encoder_layers: 12,
            encoder_heads: 8,
            attention_heads_of_cme: 8,
            transformer_blocks_in_cme: 4,
            patch_size: 16,
            input_image_height: 384,
            input_image_width: 128,
            textual_token_sequence: 77,
            epoch: 60,
            learning_rate: 1e-5,
            warmup_start_lr: 1e-6,
            warmup_epochs: 5,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses the `key = value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", no + 1)));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        let profile = match entries.iter().find(|(k, _)| k == "profile") {
            None => Profile::Desk,
            Some((_, v)) => match v.as_str() {
                "desk" => Profile::Desk,
                "paper" => Profile::Paper,
                other => return Err(Error::Config(format!("unknown profile `{other}`"))),
            },
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in &entries {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
            }
        }
        match key {
            "profile" => return Err(Error::Config("profile can only be chosen at parse time".into())),
            "hidden_size" => self.hidden_size = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "encoder_heads" => self.encoder_heads = num(key, value)?,
            "attention_heads_of_cme" => self.attention_heads_of_cme = num(key, value)?,
            "transformer_blocks_in_cme" => self.transformer_blocks_in_cme = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "input_image_height" => self.input_image_height = num(key, value)?,
            "input_image_width" => self.input_image_width = num(key, value)?,
            "textual_token_sequence" => self.textual_token_sequence = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epoch" => self.epoch = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "warmup_start_lr" => self.warmup_start_lr = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "adam_alpha" => self.adam_alpha = num(key, value)?,
            "adam_beta" => self.adam_beta = num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = num(key, value)?,
            "temperature_in_sdm_loss" => self.temperature_in_sdm_loss = num(key, value)?,
            "sdm_epsilon" => self.sdm_epsilon = num(key, value)?,
            "token_mask_rate" => self.token_mask_rate = num(key, value)?,
            "patch_mask_rate" => self.patch_mask_rate = num(key, value)?,
            "mlm_loss_weight" => self.mlm_loss_weight = num(key, value)?,
            "semmim_loss_weight" => self.semmim_loss_weight = num(key, value)?,
            "mlm_enabled" => self.mlm_enabled = flag(key, value)?,
            "mim_method" => self.mim_method = value.parse()?,
            "per_class_normalization" => self.per_class_normalization = flag(key, value)?,
            "text_global" => {
                self.text_global = match value {
                    "sos" => TextGlobal::Sos,
                    "eos" => TextGlobal::Eos,
                    _ => return Err(Error::Config(format!("`text_global`: expected sos or eos, got `{value}`"))),
                }
            }
            "flip_augmentation" => self.flip_augmentation = flag(key, value)?,
            "num_test_identities" => self.num_test_identities = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, r) in [
            ("token_mask_rate", self.token_mask_rate),
            ("patch_mask_rate", self.patch_mask_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, w) in [
            ("mlm_loss_weight", self.mlm_loss_weight),
            ("semmim_loss_weight", self.semmim_loss_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.learning_rate > 0.0 && self.warmup_start_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.warmup_epochs >= self.epoch {
            return bad("warmup_epochs must be smaller than epoch");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_alpha) || !(0.0..1.0).contains(&self.adam_beta) {
            return bad("adam moments must lie in [0, 1)");
        }
        if !(self.temperature_in_sdm_loss > 0.0 && self.sdm_epsilon > 0.0 && self.adam_epsilon > 0.0) {
            return bad("temperature and epsilons must be positive");
        }
        self.encoder(1).validate()
    }

    /// Every field in a fixed order, as the parser would read it back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut v = vec![
            ("profile", self.profile.name().to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("attention_heads_of_cme", self.attention_heads_of_cme.to_string()),
            ("transformer_blocks_in_cme", self.transformer_blocks_in_cme.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("input_image_height", self.input_image_height.to_string()),
            ("input_image_width", self.input_image_width.to_string()),
            ("textual_token_sequence", self.textual_token_sequence.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epoch", self.epoch.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("warmup_start_lr", self.warmup_start_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("adam_alpha", self.adam_alpha.to_string()),
            ("adam_beta", self.adam_beta.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("temperature_in_sdm_loss", self.temperature_in_sdm_loss.to_string()),
            ("sdm_epsilon", self.sdm_epsilon.to_string()),
            ("token_mask_rate", self.token_mask_rate.to_string()),
            ("patch_mask_rate", self.patch_mask_rate.to_string()),
            ("mlm_loss_weight", self.mlm_loss_weight.to_string()),
            ("semmim_loss_weight", self.semmim_loss_weight.to_string()),
            ("mlm_enabled", self.mlm_enabled.to_string()),
            ("mim_method", self.mim_method.name().to_string()),
            ("per_class_normalization", self.per_class_normalization.to_string()),
            (
                "text_global",
                match self.text_global {
                    TextGlobal::Sos => "sos",
                    TextGlobal::Eos => "eos",
                }
                .to_string(),
            ),
            ("flip_augmentation", self.flip_augmentation.to_string()),
            ("num_test_identities", self.num_test_identities.to_string()),
            ("seed", self.seed.to_string()),
        ];
        if let Some(p) = path(&self.dataset) {
            v.push(("dataset", p));
        }
        if let Some(p) = path(&self.output_dir) {
            v.push(("output_dir", p));
        }
        v
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short digest of the training-relevant settings (paths excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "dataset" && k != "output_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        let digest = h.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: self.hidden_size,
            num_layers: self.encoder_layers,
            num_heads: self.encoder_heads,
            patch_size: self.patch_size,
            image_height: self.input_image_height,
            image_width: self.input_image_width,
            max_text_len: self.textual_token_sequence,
            vocab_size,
        }
    }

    pub fn cme(&self) -> CmeConfig {
        CmeConfig {
            num_layers: self.transformer_blocks_in_cme,
            num_heads: self.attention_heads_of_cme,
            mim_method: self.mim_method,
            mlm_head: self.mlm_enabled,
        }
    }

    /// Whether any cross-modal pass runs.
    pub fn uses_cme(&self) -> bool {
        self.mlm_enabled || self.mim_method != MimMethod::None
    }

    pub fn sdm(&self) -> SdmConfig {
        SdmConfig {
            temperature: self.temperature_in_sdm_loss,
            epsilon: self.sdm_epsilon,
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.learning_rate,
            warmup_start_lr: self.warmup_start_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epoch,
            steps_per_epoch,
        }
    }

    pub fn adam(&self, store: &ParamStore) -> AdamState {
        AdamState::new(store, self.adam_alpha, self.adam_beta, self.adam_epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = TrainConfig::desk();
        cfg.learning_rate = 3e-4;
        cfg.mim_method = MimMethod::Feature;
        cfg.dataset = Some("data/x".into());
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&TrainConfig::paper().to_text()).unwrap(), TrainConfig::paper());
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(matches!(TrainConfig::parse("lerning_rate = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("token_mask_rate = 1.5").is_err());
        assert!(TrainConfig::parse("mim_method = beit").is_err());
        assert!(TrainConfig::parse("profile = huge").is_err());
    }

    #[test]
    fn paper_profile_values() {
        let c = TrainConfig::parse("profile = paper # published settings\n").unwrap();
        assert_eq!(c.hidden_size, 512);
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.warmup_start_lr, 1e-6);
        assert_eq!(c.transformer_blocks_in_cme, 4);
        assert_eq!(c.epoch, 60);
    }

    #[test]
    fn hash_tracks_settings() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.semmim_loss_weight = 1.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
