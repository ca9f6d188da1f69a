//! Distance-from-normal anomaly scorers operating on backbone features:
//! PaDiM, PatchCore, SPADE and Mah.AD.

pub mod gaussian;
pub mod maps;
pub mod memory;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneId, FeatureMap};
use crate::checkpoint::{self, hash_of};
use crate::error::{Error, Result};
use crate::model::ExecProfile;
use crate::raster::Image;

pub use gaussian::{
    mahad_distance, mahad_fit, mahalanobis, padim_distances, padim_fit, CovFactor, GaussianStats,
    MahadStats,
};
pub use maps::{embed, global_descriptor, local_average, to_score_map, Embedding, ScoreMap};
pub use memory::{
    coreset_count, kcenter_greedy, patchcore_distances, patchcore_fit, spade_evaluate, spade_fit,
    MemoryBank, SpadeModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Padim,
    Patchcore,
    Spade,
    Mahad,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::Padim,
        ScorerKind::Patchcore,
        ScorerKind::Spade,
        ScorerKind::Mahad,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScorerKind::Padim => "padim",
            ScorerKind::Patchcore => "patchcore",
            ScorerKind::Spade => "spade",
            ScorerKind::Mahad => "mahad",
        }
    }

    pub fn has_pixel_map(&self) -> bool {
        !matches!(self, ScorerKind::Mahad)
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scorer `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    /// Layer taps; empty means the backbone's defaults.
    pub taps: Vec<String>,
    /// Diagonal covariance regularizer.
    pub eps: f64,
    /// Random channel subset size for PaDiM.
    pub padim_channels: usize,
    /// PatchCore neighborhood averaging size.
    pub pool_size: usize,
    pub coreset_ratio: f64,
    pub spade_k: usize,
    pub spade_kappa: usize,
    pub spade_radius: usize,
    /// Gaussian smoothing of the upsampled map; 0 disables it.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            taps: Vec::new(),
            eps: 0.01,
            padim_channels: 100,
            pool_size: 3,
            coreset_ratio: 0.1,
            spade_k: 50,
            spade_kappa: 1,
            spade_radius: 1,
            sigma: 4.0,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Validation("eps must be positive".into()));
        }
        if self.padim_channels == 0 || self.spade_k == 0 || self.spade_kappa == 0 || self.pool_size == 0 {
            return Err(Error::Validation(
                "padim_channels, pool_size, spade_k and spade_kappa must be >= 1".into(),
            ));
        }
        if !(self.coreset_ratio > 0.0 && self.coreset_ratio <= 1.0) {
            return Err(Error::Validation("coreset_ratio must lie in (0, 1]".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation("sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn taps_for(&self, id: BackboneId) -> Vec<String> {
        if self.taps.is_empty() {
            id.default_taps()
        } else {
            self.taps.clone()
        }
    }
}

/// Hash binding a fitted model to the exact extractor and settings that
/// produced it.
pub fn extractor_hash(kind: ScorerKind, backbone: &Backbone, cfg: &ScorerConfig) -> String {
    let mut cfg = cfg.clone();
    cfg.taps = cfg.taps_for(backbone.id());
    hash_of(&(kind, backbone.id(), backbone.weights_hash(), cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub image_score: f64,
    /// Full-resolution map; absent for image-level scorers.
    pub score_map: Option<ScoreMap>,
    pub scorer: ScorerKind,
    pub backbone: BackboneId,
    /// Weights hash of the extractor.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormalState {
    Padim(GaussianStats),
    Patchcore(MemoryBank),
    Spade(SpadeModel),
    Mahad(MahadStats),
}

/// A fitted scorer together with the provenance needed to refuse
/// mismatched extractors.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalModel {
    pub scorer: ScorerKind,
    pub backbone: BackboneId,
    pub config_hash: String,
    pub cfg: ScorerConfig,
    pub state: NormalState,
}

/// Features of one image at the configured taps.
pub fn extract(backbone: &Backbone, img: &Image, cfg: &ScorerConfig) -> Result<Vec<FeatureMap>> {
    backbone.extract_features(img, &cfg.taps_for(backbone.id()))
}

pub(crate) fn map_images<T: Send>(
    images: &[Image],
    profile: ExecProfile,
    f: impl Fn(&Image) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match profile {
        ExecProfile::Serial => images.iter().map(f).collect(),
        ExecProfile::Parallel => images.par_iter().map(f).collect(),
    }
}

fn patch_embedding(maps: &[FeatureMap], pool: usize) -> Result<Embedding> {
    let pooled: Vec<FeatureMap> = maps.iter().map(|m| local_average(m, pool)).collect();
    embed(&pooled)
}

impl NormalModel {
    /// Fits `kind` on normal `images` with features from `backbone`.
    pub fn fit(
        kind: ScorerKind,
        backbone: &Backbone,
        images: &[Image],
        cfg: &ScorerConfig,
        profile: ExecProfile,
    ) -> Result<Self> {
        cfg.validate()?;
        let needed = if kind == ScorerKind::Patchcore { 1 } else { 2 };
        if images.len() < needed {
            return Err(Error::InsufficientNormals {
                needed,
                got: images.len(),
            });
        }
        let feats = map_images(images, profile, |img| extract(backbone, img, cfg))?;
        Self::fit_features(kind, backbone, &feats, cfg)
    }

    /// Fits from pre-extracted features (one tap list per image).
    pub fn fit_features(
        kind: ScorerKind,
        backbone: &Backbone,
        feats: &[Vec<FeatureMap>],
        cfg: &ScorerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let state = match kind {
            ScorerKind::Padim => {
                let embs = feats.iter().map(|f| embed(f)).collect::<Result<Vec<_>>>()?;
                NormalState::Padim(padim_fit(&embs, cfg.padim_channels, cfg.eps, cfg.seed)?)
            }
            ScorerKind::Patchcore => {
                let embs = feats
                    .iter()
                    .map(|f| patch_embedding(f, cfg.pool_size))
                    .collect::<Result<Vec<_>>>()?;
                NormalState::Patchcore(patchcore_fit(&embs, cfg.pool_size, cfg.coreset_ratio, cfg.seed)?)
            }
            ScorerKind::Spade => {
                let descs = feats.iter().map(|f| global_descriptor(f)).collect::<Result<Vec<_>>>()?;
                let embs = feats.iter().map(|f| embed(f)).collect::<Result<Vec<_>>>()?;
                NormalState::Spade(spade_fit(descs, embs, cfg.spade_k, cfg.spade_kappa, cfg.spade_radius)?)
            }
            ScorerKind::Mahad => {
                let descs = feats.iter().map(|f| global_descriptor(f)).collect::<Result<Vec<_>>>()?;
                NormalState::Mahad(mahad_fit(&descs, cfg.eps)?)
            }
        };
        Ok(Self {
            scorer: kind,
            backbone: backbone.id(),
            config_hash: extractor_hash(kind, backbone, cfg),
            cfg: cfg.clone(),
            state,
        })
    }

    fn check_extractor(&self, backbone: &Backbone) -> Result<()> {
        let h = extractor_hash(self.scorer, backbone, &self.cfg);
        if h != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                model: self.config_hash.clone(),
                extractor: h,
            });
        }
        Ok(())
    }

    pub fn score(&self, backbone: &Backbone, img: &Image) -> Result<ScoreResult> {
        self.check_extractor(backbone)?;
        let feats = extract(backbone, img, &self.cfg)?;
        self.score_unchecked(backbone, &feats, img.height(), img.width())
    }

    pub fn score_all(&self, backbone: &Backbone, images: &[Image], profile: ExecProfile) -> Result<Vec<ScoreResult>> {
        self.check_extractor(backbone)?;
        map_images(images, profile, |img| {
            let feats = extract(backbone, img, &self.cfg)?;
            self.score_unchecked(backbone, &feats, img.height(), img.width())
        })
    }

    /// Scores pre-extracted features for an `h x w` input. The caller is
    /// responsible for having used the fitted extractor.
    pub fn score_features(&self, backbone: &Backbone, feats: &[FeatureMap], h: usize, w: usize) -> Result<ScoreResult> {
        self.check_extractor(backbone)?;
        self.score_unchecked(backbone, feats, h, w)
    }

    fn score_unchecked(&self, backbone: &Backbone, feats: &[FeatureMap], h: usize, w: usize) -> Result<ScoreResult> {
        let sigma = self.cfg.sigma;
        let grid_result = |grid: Vec<f64>, gh: usize, gw: usize| {
            let image_score = grid.iter().copied().fold(0.0, f64::max);
            (image_score, Some(to_score_map(&grid, gh, gw, h, w, sigma)))
        };
        let (image_score, score_map) = match &self.state {
            NormalState::Padim(stats) => {
                let emb = embed(feats)?;
                grid_result(padim_distances(stats, &emb)?, emb.height, emb.width)
            }
            NormalState::Patchcore(bank) => {
                let emb = patch_embedding(feats, bank.pool_size)?;
                grid_result(patchcore_distances(bank, &emb)?, emb.height, emb.width)
            }
            NormalState::Spade(model) => {
                let emb = embed(feats)?;
                let out = spade_evaluate(model, &global_descriptor(feats)?, &emb)?;
                (
                    out.image_score,
                    Some(to_score_map(&out.grid, emb.height, emb.width, h, w, sigma)),
                )
            }
            NormalState::Mahad(stats) => (mahad_distance(stats, &global_descriptor(feats)?)?, None),
        };
        Ok(ScoreResult {
            image_score,
            score_map,
            scorer: self.scorer,
            backbone: self.backbone,
            checkpoint: backbone.weights_hash(),
        })
    }

    /// Writes `<base>.bin` / `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
        let mut shape = serde_json::Map::new();
        match &self.state {
            NormalState::Padim(s) => {
                shape.insert("grid".into(), serde_json::json!([s.height, s.width]));
                shape.insert("channels".into(), serde_json::json!(s.channels));
                shape.insert("eps".into(), s.eps.into());
                tensors.push(("mean".into(), s.mean.clone()));
                tensors.push((
                    "factors".into(),
                    s.factors.iter().flat_map(|f| f.packed().iter().copied()).collect(),
                ));
            }
            NormalState::Patchcore(b) => {
                shape.insert("grid".into(), serde_json::json!([b.height, b.width]));
                shape.insert("dim".into(), b.dim.into());
                shape.insert("pool_size".into(), b.pool_size.into());
                shape.insert("coreset".into(), serde_json::json!(b.coreset));
                tensors.push(("vectors".into(), b.vectors.iter().map(|&v| v as f64).collect()));
            }
            NormalState::Spade(m) => {
                let e0 = &m.embeddings[0];
                shape.insert("grid".into(), serde_json::json!([e0.height, e0.width]));
                shape.insert("dim".into(), e0.dim.into());
                shape.insert("descriptor_dim".into(), m.descriptors[0].len().into());
                shape.insert("k".into(), m.k.into());
                shape.insert("kappa".into(), m.kappa.into());
                shape.insert("radius".into(), m.radius.into());
                tensors.push((
                    "descriptors".into(),
                    m.descriptors.iter().flatten().map(|&v| v as f64).collect(),
                ));
                tensors.push((
                    "embeddings".into(),
                    m.embeddings.iter().flat_map(|e| e.data.iter().map(|&v| v as f64)).collect(),
                ));
            }
            NormalState::Mahad(s) => {
                shape.insert("eps".into(), s.eps.into());
                tensors.push(("mean".into(), s.mean.clone()));
                tensors.push(("factor".into(), s.factor.packed().to_vec()));
            }
        }
        let meta = serde_json::json!({
            "scorer": self.scorer,
            "cfg": self.cfg,
            "shape": shape,
        });
        let refs: Vec<(&str, &[f64])> = tensors.iter().map(|(n, t)| (n.as_str(), t.as_slice())).collect();
        checkpoint::write(base, "normal_model", self.backbone.as_str(), &self.config_hash, &refs, meta)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (sc, mut t) = checkpoint::read_typed::<f64>(base, "normal_model")?;
        let meta = &sc.meta;
        let scorer: ScorerKind = serde_json::from_value(meta["scorer"].clone())?;
        let cfg: ScorerConfig = serde_json::from_value(meta["cfg"].clone())?;
        let shape = &meta["shape"];
        let usize_at = |v: &serde_json::Value| -> Result<usize> {
            v.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Validation("normal model metadata is malformed".into()))
        };
        let grid = || -> Result<(usize, usize)> { Ok((usize_at(&shape["grid"][0])?, usize_at(&shape["grid"][1])?)) };
        let expect = |n: usize| -> Result<()> {
            if t.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: t.len(),
                });
            }
            Ok(())
        };
        let to_f32 = |v: Vec<f64>| -> Vec<f32> { v.into_iter().map(|x| x as f32).collect() };
        let state = match scorer {
            ScorerKind::Padim => {
                expect(2)?;
                let (height, width) = grid()?;
                let channels: Vec<usize> = serde_json::from_value(shape["channels"].clone())?;
                let d = channels.len();
                let packed = t.pop().expect("checked");
                let mean = t.pop().expect("checked");
                let per = d * (d + 1) / 2;
                if packed.len() != per * height * width || mean.len() != d * height * width {
                    return Err(Error::DimensionMismatch {
                        expected: per * height * width,
                        found: packed.len(),
                    });
                }
                let factors = packed
                    .chunks_exact(per)
                    .map(|c| CovFactor::from_packed(d, c.to_vec()))
                    .collect::<Result<_>>()?;
                NormalState::Padim(GaussianStats {
                    height,
                    width,
                    eps: shape["eps"].as_f64().unwrap_or(cfg.eps),
                    channels,
                    mean,
                    factors,
                })
            }
            ScorerKind::Patchcore => {
                expect(1)?;
                let (height, width) = grid()?;
                let coreset: Vec<usize> = serde_json::from_value(shape["coreset"].clone())?;
                let dim = usize_at(&shape["dim"])?;
                let vectors = to_f32(t.pop().expect("checked"));
                if vectors.len() != coreset.len() * dim {
                    return Err(Error::DimensionMismatch {
                        expected: coreset.len() * dim,
                        found: vectors.len(),
                    });
                }
                NormalState::Patchcore(MemoryBank {
                    height,
                    width,
                    dim,
                    pool_size: usize_at(&shape["pool_size"])?,
                    coreset,
                    vectors,
                })
            }
            ScorerKind::Spade => {
                expect(2)?;
                let (height, width) = grid()?;
                let dim = usize_at(&shape["dim"])?;
                let ddim = usize_at(&shape["descriptor_dim"])?;
                let embs = to_f32(t.pop().expect("checked"));
                let descs = to_f32(t.pop().expect("checked"));
                let per = height * width * dim;
                if ddim == 0 || per == 0 || descs.len() % ddim != 0 || embs.len() != descs.len() / ddim * per {
                    return Err(Error::Validation("spade model tensors are inconsistent".into()));
                }
                NormalState::Spade(SpadeModel {
                    k: usize_at(&shape["k"])?,
                    kappa: usize_at(&shape["kappa"])?,
                    radius: usize_at(&shape["radius"])?,
                    descriptors: descs.chunks_exact(ddim).map(|c| c.to_vec()).collect(),
                    embeddings: embs
                        .chunks_exact(per)
                        .map(|c| Embedding {
                            height,
                            width,
                            dim,
                            data: c.to_vec(),
                        })
                        .collect(),
                })
            }
            ScorerKind::Mahad => {
                expect(2)?;
                let packed = t.pop().expect("checked");
                let mean = t.pop().expect("checked");
                let d = mean.len();
                NormalState::Mahad(MahadStats {
                    eps: shape["eps"].as_f64().unwrap_or(cfg.eps),
                    mean,
                    factor: CovFactor::from_packed(d, packed)?,
                })
            }
        };
        Ok(Self {
            scorer,
            backbone: sc.backbone.parse()?,
            config_hash: sc.config_hash,
            cfg,
            state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{render_toy_sample, ToyDatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> Vec<Image> {
        let spec = ToyDatasetSpec::default().classes.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| render_toy_sample(&spec, 64, None, &mut rng).0)
            .collect()
    }

    fn small_cfg() -> ScorerConfig {
        ScorerConfig {
            padim_channels: 20,
            spade_k: 3,
            ..ScorerConfig::default()
        }
    }

    #[test]
    fn degenerate_fits_score_zero() {
        let bb = Backbone::compact(3, 1);
        let img = images(1, 0).remove(0);
        let same = vec![img.clone(); 4];
        let cfg = small_cfg();
        for kind in [ScorerKind::Padim, ScorerKind::Mahad] {
            let m = NormalModel::fit(kind, &bb, &same, &cfg, ExecProfile::Serial).unwrap();
            let r = m.score(&bb, &img).unwrap();
            assert_eq!(r.image_score, 0.0, "{kind}");
        }
        let varied = images(4, 1);
        let m = NormalModel::fit(ScorerKind::Spade, &bb, &varied, &ScorerConfig { spade_k: 1, ..cfg.clone() }, ExecProfile::Serial).unwrap();
        let r = m.score(&bb, &varied[2]).unwrap();
        assert_eq!(r.image_score, 0.0);
        assert!(r.score_map.unwrap().data.iter().all(|&v| v == 0.0));
        let m = NormalModel::fit(ScorerKind::Patchcore, &bb, &varied, &ScorerConfig { coreset_ratio: 1.0, ..cfg }, ExecProfile::Serial).unwrap();
        assert_eq!(m.score(&bb, &varied[0]).unwrap().image_score, 0.0);
    }

    #[test]
    fn maps_match_input_and_are_nonnegative() {
        let bb = Backbone::compact(3, 2);
        let train = images(5, 3);
        let test = images(2, 4);
        for kind in ScorerKind::ALL {
            let m = NormalModel::fit(kind, &bb, &train, &small_cfg(), ExecProfile::Serial).unwrap();
            for img in &test {
                let r = m.score(&bb, img).unwrap();
                assert!(r.image_score >= 0.0);
                match r.score_map {
                    Some(map) => {
                        assert_eq!((map.width, map.height), (64, 64));
                        assert!(map.min() >= 0.0);
                    }
                    None => assert_eq!(kind, ScorerKind::Mahad),
                }
            }
        }
    }

    #[test]
    fn scoring_is_deterministic_and_profile_independent() {
        let bb = Backbone::compact(3, 2);
        let train = images(4, 5);
        for kind in ScorerKind::ALL {
            let a = NormalModel::fit(kind, &bb, &train, &small_cfg(), ExecProfile::Serial).unwrap();
            let b = NormalModel::fit(kind, &bb, &train, &small_cfg(), ExecProfile::Parallel).unwrap();
            assert_eq!(a, b);
            let s1 = a.score_all(&bb, &train[..2], ExecProfile::Serial).unwrap();
            let s2 = b.score_all(&bb, &train[..2], ExecProfile::Parallel).unwrap();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn gaussian_fits_ignore_normal_order() {
        let bb = Backbone::compact(3, 2);
        let train = images(5, 6);
        let mut rev = train.clone();
        rev.reverse();
        let test = images(1, 7).remove(0);
        for kind in [ScorerKind::Padim, ScorerKind::Mahad] {
            let a = NormalModel::fit(kind, &bb, &train, &small_cfg(), ExecProfile::Serial).unwrap();
            let b = NormalModel::fit(kind, &bb, &rev, &small_cfg(), ExecProfile::Serial).unwrap();
            let (sa, sb) = (a.score(&bb, &test).unwrap(), b.score(&bb, &test).unwrap());
            assert!((sa.image_score - sb.image_score).abs() < 1e-9 * sa.image_score.max(1.0));
        }
    }

    #[test]
    fn persistence_roundtrip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let bb = Backbone::compact(3, 2);
        let train = images(4, 8);
        let test = images(1, 9).remove(0);
        for kind in ScorerKind::ALL {
            let m = NormalModel::fit(kind, &bb, &train, &small_cfg(), ExecProfile::Serial).unwrap();
            let base = dir.path().join(kind.as_str());
            m.save(&base).unwrap();
            let back = NormalModel::load(&base).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.score(&bb, &test).unwrap(), m.score(&bb, &test).unwrap());
            let other = Backbone::compact(3, 3);
            assert!(matches!(
                back.score(&other, &test),
                Err(Error::ConfigHashMismatch { .. })
            ));
        }
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let bb = Backbone::compact(3, 2);
        let cfg = ScorerConfig {
            taps: vec!["layer9".into()],
            ..small_cfg()
        };
        let err = NormalModel::fit(ScorerKind::Padim, &bb, &images(3, 1), &cfg, ExecProfile::Serial).unwrap_err();
        assert!(matches!(err, Error::UnknownLayer(_)));
    }
}
