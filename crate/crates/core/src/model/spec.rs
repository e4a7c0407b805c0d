use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// One layer of a backbone or gater stack.
///
/// A `conv` layer is convolution, optional batchnorm, then relu; when
/// `gated`, each output channel is multiplied by its gate after the relu.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        padding: Option<usize>,
        #[serde(default = "default_true")]
        batchnorm: bool,
        #[serde(default)]
        gated: bool,
    },
    AvgPool {
        size: usize,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel: 3,
            stride: 1,
            padding: None,
            batchnorm: true,
            gated: false,
        }
    }

    pub fn gated_conv(filters: usize) -> Self {
        Self::conv(filters).gated(true)
    }

    pub fn gated(mut self, on: bool) -> Self {
        if let LayerSpec::Conv { gated, .. } = &mut self {
            *gated = on;
        }
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        if let LayerSpec::Conv { stride, .. } = &mut self {
            *stride = s;
        }
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        if let LayerSpec::Conv { kernel, .. } = &mut self {
            *kernel = k;
        }
        self
    }

    pub fn without_batchnorm(mut self) -> Self {
        if let LayerSpec::Conv { batchnorm, .. } = &mut self {
            *batchnorm = false;
        }
        self
    }

    pub fn is_gated(&self) -> bool {
        matches!(self, LayerSpec::Conv { gated: true, .. })
    }

    pub fn filters(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv { filters, .. } => Some(*filters),
            LayerSpec::AvgPool { .. } => None,
        }
    }
}

/// Declarative description of a GaterNet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    /// Images are square, `input_size x input_size`.
    pub input_size: usize,
    pub num_classes: usize,
    pub backbone: Vec<LayerSpec>,
    /// Feature extractor of the gater; its last conv width is the feature
    /// size. Empty means no gater.
    #[serde(default)]
    pub gater: Vec<LayerSpec>,
    /// Width of the gater head bottleneck.
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
}

fn default_bottleneck() -> usize {
    8
}

/// Location of one gate: backbone layer index and filter within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GateSite {
    pub layer: usize,
    pub filter: usize,
}

impl ModelSpec {
    /// Sum of filter counts over gated backbone layers.
    pub fn gated_filter_total(&self) -> usize {
        self.backbone.iter().filter(|l| l.is_gated()).filter_map(LayerSpec::filters).sum()
    }

    /// Output width of the gater feature extractor (0 without a gater).
    pub fn feature_size(&self) -> usize {
        self.gater.iter().rev().find_map(LayerSpec::filters).unwrap_or(0)
    }

    pub fn has_gater(&self) -> bool {
        !self.gater.is_empty()
    }

    pub fn is_gated(&self) -> bool {
        self.gated_filter_total() > 0
    }

    /// Gate index range controlling backbone layer `layer`, if it is gated.
    /// Gates are numbered by layer order, then filter index.
    pub fn gate_range(&self, layer: usize) -> Option<Range<usize>> {
        let mut start = 0;
        for (i, l) in self.backbone.iter().enumerate() {
            let width = if l.is_gated() { l.filters().unwrap_or(0) } else { 0 };
            if i == layer {
                return l.is_gated().then(|| start..start + width);
            }
            start += width;
        }
        None
    }

    /// `gate_map()[j]` is the layer and filter that gate `j` controls.
    pub fn gate_map(&self) -> Vec<GateSite> {
        self.backbone
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_gated())
            .flat_map(|(layer, l)| (0..l.filters().unwrap_or(0)).map(move |filter| GateSite { layer, filter }))
            .collect()
    }

    /// Inverse of [`Self::gate_map`].
    pub fn gate_index(&self, site: GateSite) -> Option<usize> {
        let range = self.gate_range(site.layer)?;
        (site.filter < range.len()).then(|| range.start + site.filter)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.input_size == 0 {
            return bad("input_channels and input_size must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.backbone.is_empty() || self.backbone.iter().all(|l| l.filters().is_none()) {
            return bad("backbone needs at least one conv layer".into());
        }
        if self.gater.iter().any(LayerSpec::is_gated) {
            return bad("gater layers cannot be gated".into());
        }
        if self.is_gated() {
            if !self.has_gater() || self.feature_size() == 0 {
                return bad("gated backbone layers need a gater with at least one conv layer".into());
            }
            if self.bottleneck == 0 {
                return bad("bottleneck must be at least 1".into());
            }
        }
        for (name, stack) in [("backbone", &self.backbone), ("gater", &self.gater)] {
            let mut size = self.input_size;
            for (i, layer) in stack.iter().enumerate() {
                size = match *layer {
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                        ..
                    } => {
                        if filters == 0 || kernel == 0 || stride == 0 {
                            return bad(format!("{name} layer {i}: filters, kernel and stride must be positive"));
                        }
                        let pad = padding.unwrap_or(kernel / 2);
                        if size + 2 * pad < kernel {
                            return bad(format!("{name} layer {i}: kernel {kernel} larger than padded input {size}"));
                        }
                        (size + 2 * pad - kernel) / stride + 1
                    }
                    LayerSpec::AvgPool { size: p } => {
                        if p == 0 || size % p != 0 {
                            return bad(format!("{name} layer {i}: pool {p} does not tile {size}"));
                        }
                        size / p
                    }
                };
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; identifies parameter layouts in
    /// checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The desk-scale recipe: 6 conv backbone, all conv layers gated, 3 conv
    /// gater.
    pub fn desk_default(input_size: usize, num_classes: usize) -> Self {
        Self {
            input_channels: 3,
            input_size,
            num_classes,
            backbone: vec![
                LayerSpec::gated_conv(16),
                LayerSpec::gated_conv(16),
                LayerSpec::gated_conv(32).with_stride(2),
                LayerSpec::gated_conv(32),
                LayerSpec::gated_conv(64).with_stride(2),
                LayerSpec::gated_conv(64),
            ],
            gater: vec![
                LayerSpec::conv(8).with_stride(2),
                LayerSpec::conv(16).with_stride(2),
                LayerSpec::conv(32),
            ],
            bottleneck: 8,
        }
    }

    /// The same backbone with gating switched off and no gater.
    pub fn ungated(&self) -> Self {
        let backbone = self.backbone.iter().map(|l| l.clone().gated(false)).collect();
        Self {
            backbone,
            gater: Vec::new(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_map_is_a_bijection() {
        let spec = ModelSpec::desk_default(16, 10);
        spec.validate().unwrap();
        let c = spec.gated_filter_total();
        assert_eq!(c, 16 + 16 + 32 + 32 + 64 + 64);
        let map = spec.gate_map();
        assert_eq!(map.len(), c);
        for (j, site) in map.iter().enumerate() {
            assert_eq!(spec.gate_index(*site), Some(j));
        }
        assert_eq!(spec.gate_range(2), Some(32..64));
        assert_eq!(spec.feature_size(), 32);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = r#"
            input_channels = 3
            input_size = 8
            num_classes = 4
            bottleneck = 2
            backbone = [
                { kind = "conv", filters = 4, gated = true },
                { kind = "avg_pool", size = 2 },
                { kind = "conv", filters = 8, stride = 2 },
            ]
            gater = [{ kind = "conv", filters = 4 }]
        "#;
        let spec: ModelSpec = toml::from_str(text).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.gated_filter_total(), 4);
        assert!(toml::from_str::<ModelSpec>(&text.replace("bottleneck", "bottlneck")).is_err());
        assert!(toml::from_str::<ModelSpec>(&text.replace("gated = true", "gated = true, gate = 1")).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ModelSpec::desk_default(16, 10);
        spec.gater.clear();
        assert!(spec.validate().is_err());
        assert!(spec.ungated().validate().is_ok());
        let mut spec = ModelSpec::desk_default(16, 10);
        spec.backbone.push(LayerSpec::AvgPool { size: 3 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelSpec::desk_default(16, 10);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.bottleneck = 4;
        assert_ne!(a.hash(), b.hash());
    }
}
