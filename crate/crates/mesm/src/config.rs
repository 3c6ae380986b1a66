//! Run configuration: every hyperparameter of the model, losses, and
//! optimizer, serializable as flat `key = value` text with CLI overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown ablation switch `{0}`")]
    UnknownSwitch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which word positions the reconstruction loss supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MlmSupervision {
    /// Average over every word of the sentence.
    AllWords,
    /// Average over masked positions only.
    MaskedOnly,
}

macro_rules! run_config {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr, $doc:literal)),+ $(,)?) => {
        /// All hyperparameters of a run. Serialized alongside every
        /// checkpoint; a run is fully reproducible from
        /// (config, seed, dataset).
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $field: $ty,)+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)+ }
            }
        }

        impl RunConfig {
            /// Apply one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$field = parse_value::<$ty>(key, value)?;
                    })+
                    other => return Err(ConfigError::UnknownKey(other.to_string())),
                }
                Ok(())
            }

            /// Flat `key = value` serialization, one field per line, in
            /// declaration order.
            pub fn to_flat_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, format_value(&self.$field)));)+
                out
            }
        }
    };
}

run_config![
    (d_model, "d_model", usize, 256, "Common hidden dimension D of the aligner and transformer."),
    (n_fw, "n_fw", usize, 2, "Frame-word enhancement layers."),
    (n_ss, "n_ss", usize, 4, "Segment-sentence enhancement layers."),
    (n_ma, "n_ma", usize, 2, "Modality-aligner cross-attention layers."),
    (n_enc, "n_enc", usize, 2, "Transformer encoder layers."),
    (n_dec, "n_dec", usize, 2, "Transformer decoder layers."),
    (heads, "heads", usize, 8, "Attention heads."),
    (ffn_hidden, "ffn_hidden", usize, 256, "Hidden width of the blocks' feed-forward sublayer."),
    (dropout, "dropout", f64, 0.1, "Dropout rate inside blocks during training."),
    (n_span, "n_span", usize, 10, "Learnable decoder span anchors."),
    (gamma, "gamma", f64, 0.9, "IoU gate for batch positives in the contrastive loss."),
    (tau, "tau", f64, 0.07, "Contrastive temperature."),
    (mlm_mask_ratio, "mlm_mask_ratio", f64, 1.0 / 3.0, "Fraction of words masked for reconstruction."),
    (mlm_supervision, "mlm_supervision", MlmSupervision, MlmSupervision::AllWords, "Scope of the word-reconstruction loss."),
    (normalize_similarity, "normalize_similarity", bool, true, "L2-normalize token and segment vectors before contrastive dots."),
    (mean_over_tokens, "mean_over_tokens", bool, true, "Mean instead of sum over token similarities (length-invariant scale)."),
    (cross_video_positives, "cross_video_positives", bool, false, "Gate positives on IoU across videos, not just within one."),
    (ss_context_grad, "ss_context_grad", bool, true, "Let gradients flow into context sentences' pooled features."),
    (use_positional_encoding, "use_positional_encoding", bool, true, "Add sinusoidal positions to frames and words before the aligner."),
    (lambda_l1, "lambda_l1", f64, 10.0, "Span L1 loss weight."),
    (lambda_iou, "lambda_iou", f64, 1.0, "Generalized IoU loss weight."),
    (lambda_ce, "lambda_ce", f64, 4.0, "Foreground classification loss weight."),
    (w_bg, "w_bg", f64, 0.1, "Background class weight in the classification loss."),
    (lambda_fw, "lambda_fw", f64, 1.0, "Word-reconstruction loss weight."),
    (lambda_ss, "lambda_ss", f64, 1.0, "Segment-sentence contrastive loss weight."),
    (lambda_enc, "lambda_enc", f64, 1.0, "Encoder saliency loss weight."),
    (deep_supervision, "deep_supervision", bool, true, "Sum the retrieval loss over every decoder layer."),
    (fw_enabled, "fw_enabled", bool, true, "Run the frame-word enhancement blocks."),
    (ss_enabled, "ss_enabled", bool, true, "Run the segment-sentence enhancement branch."),
    (mlm_enabled, "mlm_enabled", bool, true, "Run the word-reconstruction pass and its loss."),
    (enc_loss_enabled, "enc_loss_enabled", bool, true, "Apply the encoder saliency loss."),
    (lr, "lr", f64, 1e-4, "Adam learning rate."),
    (adam_beta1, "adam_beta1", f64, 0.9, "Adam first-moment decay."),
    (adam_beta2, "adam_beta2", f64, 0.999, "Adam second-moment decay."),
    (weight_decay, "weight_decay", f64, 1e-4, "Decoupled weight decay."),
    (grad_clip, "grad_clip", f64, 0.1, "Global gradient-norm clip."),
    (batch_size, "batch_size", usize, 8, "Queries per optimization step."),
    (epochs, "epochs", usize, 30, "Training epochs."),
    (seed, "seed", u64, 0, "Seed for init, masking, shuffling, and dropout."),
    (eval_every, "eval_every", usize, 1, "Validate every this many epochs."),
];

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T, ConfigError> {
    T::parse(value).ok_or_else(|| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        ty: T::TYPE_NAME,
    })
}

fn format_value<T: ConfigValue>(value: &T) -> String {
    value.format()
}

trait ConfigValue: Sized {
    const TYPE_NAME: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn format(&self) -> String;
}

impl ConfigValue for usize {
    const TYPE_NAME: &'static str = "integer";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const TYPE_NAME: &'static str = "integer";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const TYPE_NAME: &'static str = "float";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    const TYPE_NAME: &'static str = "bool";
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn format(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for MlmSupervision {
    const TYPE_NAME: &'static str = "one of all_words | masked_only";
    fn parse(s: &str) -> Option<Self> {
        match s {
            "all_words" => Some(MlmSupervision::AllWords),
            "masked_only" => Some(MlmSupervision::MaskedOnly),
            _ => None,
        }
    }
    fn format(&self) -> String {
        match self {
            MlmSupervision::AllWords => "all_words".to_string(),
            MlmSupervision::MaskedOnly => "masked_only".to_string(),
        }
    }
}

impl RunConfig {
    /// Parse flat `key = value` text. `#` starts a comment; blank lines are
    /// skipped. Unknown keys are errors.
    pub fn from_flat_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_flat_text(text)?;
        Ok(cfg)
    }

    pub fn apply_flat_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: i + 1, text: raw.to_string() })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_flat_text(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` override strings (the CLI `--set` flag).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: 0, text: ov.clone() })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(ConfigError::Invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_ratio) || self.mlm_mask_ratio <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "mlm_mask_ratio {} outside (0, 1]",
                self.mlm_mask_ratio
            )));
        }
        if self.n_span == 0 {
            return Err(ConfigError::Invalid("n_span must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_flat_text().as_bytes())
    }

    /// Table-5-style ablation switches. `fw_off` removes the frame-word
    /// blocks entirely (the aligner still runs); `mlm_off` keeps them but
    /// drops the reconstruction pass and its loss.
    pub fn ablate(&self, switches: &[String]) -> Result<RunConfig, ConfigError> {
        let mut cfg = self.clone();
        for switch in switches {
            let switch = switch.trim();
            if let Some((key, value)) = switch.split_once('=') {
                let n: usize = value.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    ty: "integer",
                })?;
                match key.trim() {
                    "ss_layers" => cfg.n_ss = n,
                    "fw_layers" => cfg.n_fw = n,
                    "ma_layers" => cfg.n_ma = n,
                    _ => return Err(ConfigError::UnknownSwitch(switch.to_string())),
                }
                continue;
            }
            match switch {
                "fw_off" => {
                    cfg.fw_enabled = false;
                    cfg.mlm_enabled = false;
                }
                "ss_off" => cfg.ss_enabled = false,
                "enc_loss_off" => cfg.enc_loss_enabled = false,
                "mlm_off" => cfg.mlm_enabled = false,
                _ => return Err(ConfigError::UnknownSwitch(switch.to_string())),
            }
        }
        Ok(cfg)
    }
}

/// FNV-1a, used for config/dataset/run fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::from_flat_text(&cfg.to_flat_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn paper_defaults_are_pinned() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.d_model, 256);
        assert_eq!((cfg.n_fw, cfg.n_ma, cfg.n_enc, cfg.n_dec), (2, 2, 2, 2));
        assert_eq!(cfg.n_ss, 4);
        assert_eq!(cfg.gamma, 0.9);
        assert!((cfg.mlm_mask_ratio - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["n_ss=6".into(), "tau=0.2".into(), "mlm_supervision=masked_only".into()])
            .unwrap();
        assert_eq!(cfg.n_ss, 6);
        assert_eq!(cfg.tau, 0.2);
        assert_eq!(cfg.mlm_supervision, MlmSupervision::MaskedOnly);
        assert!(matches!(
            cfg.apply_overrides(&["nonsense=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# header\n\nn_fw = 3  # keep shallow\n";
        let cfg = RunConfig::from_flat_text(text).unwrap();
        assert_eq!(cfg.n_fw, 3);
    }

    #[test]
    fn ablation_switches() {
        let base = RunConfig::default();
        let cfg = base.ablate(&["fw_off".into(), "ss_off".into(), "enc_loss_off".into()]).unwrap();
        assert!(!cfg.fw_enabled && !cfg.ss_enabled && !cfg.enc_loss_enabled);
        assert!(!cfg.mlm_enabled, "no frame-word blocks means no reconstruction pass");

        let cfg = base.ablate(&["mlm_off".into()]).unwrap();
        assert!(cfg.fw_enabled && !cfg.mlm_enabled);

        let cfg = base.ablate(&["ss_layers=4".into()]).unwrap();
        assert_eq!(cfg.n_ss, 4, "default depth is already 4");

        assert!(matches!(
            base.ablate(&["warp_drive".into()]),
            Err(ConfigError::UnknownSwitch(_))
        ));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.d_model = 30; // not divisible by 8 heads
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.lr = 3e-4;
        assert_ne!(a.hash(), b.hash());
    }
}
