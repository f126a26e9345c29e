use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture description.
///
/// Level `l` (`0 <= l < num_levels`) works at `base_channels * 2^l` channels
/// and `patch_size / 2^l` voxels per axis; the bottleneck sits one level
/// below the last. The last entry of `depths` is the bottleneck depth, the
/// entries before it are the depths of the deepest encoder levels, which use
/// transformer stages; the remaining shallow levels are convolutional.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub depths: Vec<usize>,
    pub dilations: Vec<usize>,
    pub window: usize,
    pub patch_size: usize,
    /// Number of supervised decoder outputs, the full-resolution one included.
    pub deep_supervision_levels: usize,
    pub csab_reduction: usize,
    pub mlp_ratio: usize,
    /// Channels per attention head.
    pub head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// The published configuration: S = 24, four modalities, four classes,
    /// 96^3 patches, transformer depths 2/6/2 with a 768-wide bottleneck.
    pub fn full() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            base_channels: 24,
            num_levels: 5,
            depths: vec![2, 6, 2],
            dilations: vec![1, 2, 3],
            window: 7,
            patch_size: 96,
            deep_supervision_levels: 4,
            csab_reduction: 8,
            mlp_ratio: 4,
            head_dim: 32,
        }
    }

    /// Small configuration used by the overfit run.
    pub fn reduced() -> Self {
        Self {
            base_channels: 8,
            num_levels: 4,
            depths: vec![2, 2, 2],
            patch_size: 32,
            ..Self::full()
        }
    }

    pub fn transformer_levels(&self) -> usize {
        self.depths.len().saturating_sub(1)
    }

    pub fn cnn_levels(&self) -> usize {
        self.num_levels.saturating_sub(self.transformer_levels())
    }

    pub fn is_transformer_level(&self, level: usize) -> bool {
        level >= self.cnn_levels() && level < self.num_levels
    }

    /// Transformer depth of an encoder level (mirrored in the decoder).
    pub fn level_depth(&self, level: usize) -> usize {
        if self.is_transformer_level(level) {
            self.depths[level - self.cnn_levels()]
        } else {
            0
        }
    }

    pub fn bottleneck_depth(&self) -> usize {
        self.depths.last().copied().unwrap_or(0)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.num_levels)
    }

    pub fn extent(&self, level: usize) -> usize {
        self.patch_size >> level
    }

    pub fn heads(&self, dim: usize) -> usize {
        (dim / self.head_dim.max(1)).max(1)
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.in_channels >= 1, "in_channels must be at least 1".into());
        need(self.num_classes >= 2, "num_classes must be at least 2".into());
        need(self.base_channels >= 1, "base_channels must be at least 1".into());
        need(self.num_levels >= 1, "num_levels must be at least 1".into());
        need(self.num_levels <= 16, "num_levels must be at most 16".into());
        need(
            !self.depths.is_empty(),
            "depths needs at least the bottleneck entry".into(),
        );
        need(
            self.transformer_levels() < self.num_levels,
            format!(
                "{} transformer encoder levels leave no convolutional level out of {}",
                self.transformer_levels(),
                self.num_levels
            ),
        );
        for (i, d) in self.depths.iter().enumerate() {
            need(
                d % 2 == 0,
                format!("depths[{i}] = {d} is odd; blocks come in regular/shifted pairs"),
            );
        }
        need(!self.dilations.is_empty(), "dilations must not be empty".into());
        need(!self.dilations.contains(&0), "dilations must be positive".into());
        need(self.window >= 1, "window must be at least 1".into());
        need(self.mlp_ratio >= 1, "mlp_ratio must be at least 1".into());
        need(self.head_dim >= 1, "head_dim must be at least 1".into());
        need(self.csab_reduction >= 1, "csab_reduction must be at least 1".into());
        if self.num_levels >= 1 && self.num_levels <= 16 {
            let unit = 1usize << self.num_levels;
            need(
                self.patch_size >= unit && self.patch_size % unit == 0,
                format!(
                    "patch size not divisible: {} is not a positive multiple of 2^{} = {unit}",
                    self.patch_size, self.num_levels
                ),
            );
            need(
                (1..=self.num_levels).contains(&self.deep_supervision_levels),
                format!(
                    "deep_supervision_levels must be in 1..={}, got {}",
                    self.num_levels, self.deep_supervision_levels
                ),
            );
            let first = self.cnn_levels();
            for level in first..=self.num_levels {
                let dim = self.channels(level);
                let heads = self.heads(dim);
                need(
                    dim % heads == 0,
                    format!("level {level}: {heads} heads do not divide {dim} channels"),
                );
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_layout() {
        let c = ModelConfig::full();
        c.validate().unwrap();
        assert_eq!(c.cnn_levels(), 3);
        assert_eq!(
            (0..5).map(|l| c.channels(l)).collect::<Vec<_>>(),
            [24, 48, 96, 192, 384]
        );
        assert_eq!(c.bottleneck_channels(), 768);
        assert_eq!([c.level_depth(3), c.level_depth(4), c.bottleneck_depth()], [2, 6, 2]);
        assert_eq!([c.heads(192), c.heads(384), c.heads(768)], [6, 12, 24]);
        assert_eq!(c.extent(5), 3);
    }

    #[test]
    fn violations_are_listed() {
        let c = ModelConfig {
            patch_size: 100,
            depths: vec![3, 2],
            ..ModelConfig::full()
        };
        let Err(Error::InvalidConfig(msgs)) = c.validate() else {
            panic!("expected a validation error");
        };
        assert_eq!(msgs.len(), 2);
        assert!(msgs.iter().any(|m| m.contains("patch size not divisible")));
        assert!(msgs.iter().any(|m| m.contains("depths[0] = 3")));
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = ModelConfig::full();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.window = 5;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
