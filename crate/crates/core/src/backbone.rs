//! Feature backbones and the layer-tap registry.
//!
//! `compact_cnn` is a five-stage strided CNN (stem + four stages, each a
//! stride-2 3x3 convolution followed by ReLU) that ships with seeded He
//! initialization and trains on CPU. The ImageNet backbones are registered
//! identifiers with their tap/stride tables; they need external weights.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activations, ConvNet, StageSpec};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    CompactCnn,
    Resnet18,
    Wideresnet50,
    EfficientnetB5,
}

impl BackboneId {
    pub const ALL: [BackboneId; 4] = [
        BackboneId::CompactCnn,
        BackboneId::Resnet18,
        BackboneId::Wideresnet50,
        BackboneId::EfficientnetB5,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::CompactCnn => "compact_cnn",
            BackboneId::Resnet18 => "resnet18",
            BackboneId::Wideresnet50 => "wideresnet50",
            BackboneId::EfficientnetB5 => "efficientnet_b5",
        }
    }

    /// Tap names with their output stride, shallowest first.
    pub fn tap_table(&self) -> &'static [(&'static str, usize)] {
        match self {
            BackboneId::CompactCnn => &[
                ("stem", 2),
                ("stage1", 4),
                ("stage2", 8),
                ("stage3", 16),
                ("stage4", 32),
            ],
            BackboneId::Resnet18 | BackboneId::Wideresnet50 => &[
                ("layer1", 4),
                ("layer2", 8),
                ("layer3", 16),
                ("layer4", 32),
            ],
            BackboneId::EfficientnetB5 => &[
                ("stage2", 4),
                ("stage3", 8),
                ("stage4", 16),
                ("stage6", 32),
            ],
        }
    }

    /// Default feature taps for scoring: the three shallowest stages after
    /// the stem.
    pub fn default_taps(&self) -> Vec<String> {
        let table = self.tap_table();
        let skip = usize::from(matches!(self, BackboneId::CompactCnn));
        table[skip..skip + 3]
            .iter()
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn stride_of(&self, tap: &str) -> Result<usize> {
        self.tap_table()
            .iter()
            .find(|(n, _)| *n == tap)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::UnknownLayer(tap.to_string()))
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnknownBackbone(s.to_string()))
    }
}

pub const COMPACT_STAGES: [StageSpec; 5] = [
    StageSpec {
        out_channels: 16,
        stride: 2,
    },
    StageSpec {
        out_channels: 32,
        stride: 2,
    },
    StageSpec {
        out_channels: 64,
        stride: 2,
    },
    StageSpec {
        out_channels: 64,
        stride: 2,
    },
    StageSpec {
        out_channels: 128,
        stride: 2,
    },
];

/// Seed of the registered `compact_cnn` baseline weights.
pub const COMPACT_BASELINE_SEED: u64 = 20_230_613;

const PIXEL_MEAN: f32 = 0.45;
const PIXEL_STD: f32 = 0.225;

/// One tapped activation map, planar `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn grid(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    id: BackboneId,
    net: ConvNet,
}

impl Backbone {
    /// `compact_cnn` with seeded He initialization.
    pub fn compact(in_channels: usize, seed: u64) -> Self {
        let mut net = ConvNet::new(in_channels, &COMPACT_STAGES);
        net.init_he(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            id: BackboneId::CompactCnn,
            net,
        }
    }

    /// The registered baseline weights for `id`. ImageNet backbones are
    /// looked up under `asset_dir`.
    pub fn pretrained(id: BackboneId, asset_dir: Option<&Path>) -> Result<Self> {
        match id {
            BackboneId::CompactCnn => Ok(Self::compact(3, COMPACT_BASELINE_SEED)),
            other => {
                let reason = match asset_dir {
                    Some(dir) => format!(
                        "no loader for this architecture (asset dir {})",
                        dir.display()
                    ),
                    None => "asset cache directory not configured".to_string(),
                };
                Err(Error::BackboneUnavailable {
                    id: other.to_string(),
                    reason,
                })
            }
        }
    }

    pub fn id(&self) -> BackboneId {
        self.id
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ConvNet {
        &mut self.net
    }

    pub fn in_channels(&self) -> usize {
        self.net.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.net.out_channels(self.net.stage_count() - 1)
    }

    /// Spatial size of the final stage for an input of `h x w`.
    pub fn final_grid(&self, h: usize, w: usize) -> (usize, usize) {
        let (mut h, mut w) = (h, w);
        for s in &self.net.stages {
            (h, w) = s.out_size(h, w);
        }
        (h, w)
    }

    /// Normalized planar input tensor.
    pub fn to_tensor(&self, img: &Image) -> Result<Vec<f32>> {
        if img.channels() != self.in_channels() {
            return Err(Error::DimensionMismatch {
                expected: self.in_channels(),
                found: img.channels(),
            });
        }
        Ok(img.to_planar(|_, v| (v / 255.0 - PIXEL_MEAN) / PIXEL_STD))
    }

    pub fn forward_tensor(&self, x: &[f32], h: usize, w: usize, depth: usize, train: bool) -> Activations {
        self.net.forward(x, h, w, depth, train)
    }

    fn stage_index(&self, tap: &str) -> Result<usize> {
        self.id
            .tap_table()
            .iter()
            .position(|(n, _)| *n == tap)
            .ok_or_else(|| Error::UnknownLayer(tap.to_string()))
    }

    /// Inference-mode activations at the requested taps, in request order.
    pub fn extract_tensor(
        &self,
        x: &[f32],
        h: usize,
        w: usize,
        taps: &[String],
    ) -> Result<Vec<FeatureMap>> {
        let idx: Vec<usize> = taps
            .iter()
            .map(|t| self.stage_index(t))
            .collect::<Result<_>>()?;
        let depth = idx.iter().copied().max().map_or(0, |d| d + 1);
        let acts = self.net.forward(x, h, w, depth, false);
        Ok(idx
            .iter()
            .zip(taps)
            .map(|(&i, name)| {
                let (data, oh, ow) = &acts.outputs[i];
                FeatureMap {
                    layer: name.clone(),
                    channels: self.net.out_channels(i),
                    height: *oh,
                    width: *ow,
                    data: data.clone(),
                }
            })
            .collect())
    }

    pub fn extract_features(&self, img: &Image, taps: &[String]) -> Result<Vec<FeatureMap>> {
        let x = self.to_tensor(img)?;
        self.extract_tensor(&x, img.height(), img.width(), taps)
    }

    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        self.net
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("stage{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" }), t))
            .collect()
    }

    /// Content hash of the weights.
    pub fn weights_hash(&self) -> String {
        let named = self.tensors();
        let refs: Vec<(&str, &[f32])> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let (blob, _) = checkpoint::encode(&refs);
        checkpoint::sha256_hex(&blob)[..16].to_string()
    }

    pub fn save(&self, base: &Path, config_hash: &str, meta: serde_json::Value) -> Result<()> {
        let named = self.tensors();
        let refs: Vec<(&str, &[f32])> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let mut meta = meta;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("in_channels".into(), self.in_channels().into());
        }
        checkpoint::write(base, "backbone", self.id.as_str(), config_hash, &refs, meta)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (sc, tensors) = checkpoint::read(base, "backbone")?;
        let in_channels = sc.meta["in_channels"].as_u64().unwrap_or(3) as usize;
        Self::from_tensors(sc.backbone.parse()?, in_channels, tensors)
    }

    pub fn from_tensors(id: BackboneId, in_channels: usize, tensors: Vec<Vec<f32>>) -> Result<Self> {
        if id != BackboneId::CompactCnn {
            return Backbone::pretrained(id, None);
        }
        let mut net = ConvNet::new(in_channels, &COMPACT_STAGES);
        let shapes = net.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::DimensionMismatch {
                expected: shapes.len(),
                found: tensors.len(),
            });
        }
        for (p, t) in net.params_mut().into_iter().zip(tensors) {
            if p.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.len(),
                    found: t.len(),
                });
            }
            p.copy_from_slice(&t);
        }
        Ok(Self { id, net })
    }
}
