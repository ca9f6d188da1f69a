//! Deep homography aligners.
//!
//! Template mode regresses the random inward perturbation applied to one
//! template image. Pairwise mode sees `(image, rotate(image, a))` stacked
//! along channels and regresses the corner displacement of rotation `a`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneId};
use crate::checkpoint::{self, hash_of};
use crate::error::{Error, Result};
use crate::geometry::{
    displacement_to_homography, fit_rotation_angle, invert, rotation_to_displacement,
    similarity_about_center, warp_image, CornerDisplacement, FillMode, HomographyMatrix,
    ImageFrame,
};
use crate::model::{ExecProfile, RegressionModel, TrainSample, Trainer};
use crate::nn::{HeadKind, RegressionHead};
use crate::optim::AdamConfig;
use crate::raster::Image;
use crate::synthesis::{augment, sample_inward_perturbation, AugmentationPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignerMode {
    Template,
    PairwiseRotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    pub mode: AlignerMode,
    pub iterations: usize,
    pub batch_size: usize,
    /// Template mode: maximum perturbation as a fraction of the shorter side.
    pub rho_fraction: f64,
    /// Pairwise mode: training rotations are uniform in `±max_rotation` degrees.
    pub max_rotation: f64,
    /// Pairwise mode: fitted rotations smaller than this (degrees) are
    /// treated as already aligned and leave the image untouched.
    pub min_rotation: f64,
    pub augmentation: AugmentationPolicy,
    pub optimizer: AdamConfig,
    pub head: HeadKind,
    /// Index of the template among the normals; `None` draws it from `seed`.
    pub template_index: Option<usize>,
    pub seed: u64,
    pub profile: ExecProfile,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            mode: AlignerMode::PairwiseRotation,
            iterations: 2000,
            batch_size: 8,
            rho_fraction: 0.25,
            max_rotation: 30.0,
            min_rotation: 0.5,
            augmentation: AugmentationPolicy::default(),
            optimizer: AdamConfig::default(),
            head: HeadKind::Gap,
            template_index: None,
            seed: 0,
            profile: ExecProfile::Serial,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Validation("aligner iterations and batch_size must be > 0".into()));
        }
        if !(self.rho_fraction > 0.0 && self.rho_fraction <= 0.25) {
            return Err(Error::Validation("aligner rho_fraction must lie in (0, 0.25]".into()));
        }
        if !(self.max_rotation > 0.0 && self.max_rotation <= 180.0) {
            return Err(Error::Validation("max_rotation must lie in (0, 180]".into()));
        }
        if !(self.min_rotation >= 0.0 && self.min_rotation.is_finite()) {
            return Err(Error::Validation("min_rotation must be >= 0".into()));
        }
        self.augmentation.validate()
    }

    /// Template index for `n` normals.
    pub fn pick_template(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::InsufficientNormals { needed: 1, got: 0 });
        }
        match self.template_index {
            Some(i) if i < n => Ok(i),
            Some(i) => Err(Error::Validation(format!(
                "template index {i} out of range for {n} normals"
            ))),
            None => Ok(ChaCha8Rng::seed_from_u64(self.seed).gen_range(0..n)),
        }
    }

    fn in_channels(&self, image_channels: usize) -> usize {
        match self.mode {
            AlignerMode::Template => image_channels,
            AlignerMode::PairwiseRotation => 2 * image_channels,
        }
    }

    /// Head output scale in pixels for `frame`.
    fn output_scale(&self, frame: &ImageFrame) -> f64 {
        match self.mode {
            AlignerMode::Template => self.rho_fraction * frame.min_side() as f64,
            AlignerMode::PairwiseRotation => rotation_to_displacement(self.max_rotation, frame)
                .to_flat()
                .iter()
                .fold(1.0f64, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignerModel {
    pub mode: AlignerMode,
    pub model: RegressionModel,
    pub frame: ImageFrame,
    /// Manifest path of the template image, or of the pairwise reference.
    pub template_id: Option<String>,
    pub config: AlignerConfig,
    /// Per-step training loss.
    pub loss_curve: Vec<f64>,
}

fn check_images(images: &[&Image]) -> Result<ImageFrame> {
    let first = images.first().ok_or(Error::InsufficientNormals { needed: 1, got: 0 })?;
    let frame = ImageFrame::of(first)?;
    if images
        .iter()
        .any(|i| i.dims() != first.dims() || i.channels() != first.channels())
    {
        return Err(Error::Validation("aligner inputs differ in size or channels".into()));
    }
    Ok(frame)
}

fn train(
    cfg: &AlignerConfig,
    frame: ImageFrame,
    channels: usize,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<(Image, CornerDisplacement)>,
) -> Result<(RegressionModel, Vec<f64>)> {
    let backbone = Backbone::compact(cfg.in_channels(channels), cfg.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let model = RegressionModel::new(
        backbone,
        cfg.head,
        (frame.height, frame.width),
        cfg.output_scale(&frame) as f32,
        &mut init_rng,
    );
    let mut trainer = Trainer::new(model, cfg.optimizer);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let proto = trainer.model.backbone.clone();
    trainer.run(
        cfg.iterations,
        cfg.batch_size,
        (frame.height, frame.width),
        cfg.seed,
        cfg.profile,
        |rng| {
            let (input, target) = make(rng)?;
            Ok(TrainSample {
                input: proto.to_tensor(&input)?,
                target,
            })
        },
        |_, loss, _| {
            curve.push(loss);
            Ok(())
        },
    )?;
    Ok((trainer.model, curve))
}

/// Trains a template-mode aligner. Each sample warps the augmented
/// template by a random inward perturbation and regresses it.
pub fn train_template_aligner(
    template: &Image,
    template_id: &str,
    cfg: &AlignerConfig,
) -> Result<AlignerModel> {
    let cfg = AlignerConfig {
        mode: AlignerMode::Template,
        ..cfg.clone()
    };
    cfg.validate()?;
    let frame = check_images(&[template])?;
    let rho = cfg.rho_fraction * frame.min_side() as f64;
    let (model, loss_curve) = train(&cfg, frame, template.channels(), |rng| {
        let aug = augment(template, &cfg.augmentation, rng);
        let d = sample_inward_perturbation(rng, rho, &frame)?;
        let h = displacement_to_homography(&d, &frame)?;
        Ok((warp_image(&aug, &h, FillMode::Reflection)?, d))
    })?;
    Ok(AlignerModel {
        mode: AlignerMode::Template,
        model,
        frame,
        template_id: Some(template_id.to_string()),
        config: cfg,
        loss_curve,
    })
}

/// The stacked pairwise input for `(image, rotate(image, a))`.
pub fn pairwise_sample(img: &Image, angle_deg: f64, frame: &ImageFrame) -> Result<(Image, CornerDisplacement)> {
    let h = similarity_about_center(angle_deg, 1.0, 0.0, 0.0, frame);
    let rotated = warp_image(img, &h, FillMode::Reflection)?;
    Ok((img.concat_channels(&rotated)?, rotation_to_displacement(angle_deg, frame)))
}

/// Trains a pairwise rotation aligner on normal images.
pub fn train_pairwise_aligner(normals: &[Image], cfg: &AlignerConfig) -> Result<AlignerModel> {
    let cfg = AlignerConfig {
        mode: AlignerMode::PairwiseRotation,
        ..cfg.clone()
    };
    cfg.validate()?;
    let refs: Vec<&Image> = normals.iter().collect();
    let frame = check_images(&refs)?;
    let (model, loss_curve) = train(&cfg, frame, normals[0].channels(), |rng| {
        let img = &normals[rng.gen_range(0..normals.len())];
        let aug = augment(img, &cfg.augmentation, rng);
        let a = rng.gen_range(-cfg.max_rotation..=cfg.max_rotation);
        pairwise_sample(&aug, a, &frame)
    })?;
    Ok(AlignerModel {
        mode: AlignerMode::PairwiseRotation,
        model,
        frame,
        template_id: None,
        config: cfg,
        loss_curve,
    })
}

impl AlignerModel {
    fn input(&self, img: &Image, reference: Option<&Image>) -> Result<Image> {
        if (img.width(), img.height()) != (self.frame.width, self.frame.height) {
            return Err(Error::DimensionMismatch {
                expected: self.frame.width * self.frame.height,
                found: img.width() * img.height(),
            });
        }
        match (self.mode, reference) {
            (AlignerMode::Template, None) => Ok(img.clone()),
            (AlignerMode::PairwiseRotation, Some(r)) => r.concat_channels(img),
            (AlignerMode::Template, Some(_)) => Err(Error::Validation(
                "template aligner takes no reference image".into(),
            )),
            (AlignerMode::PairwiseRotation, None) => Err(Error::Validation(
                "pairwise aligner needs a reference image".into(),
            )),
        }
    }

    /// Raw predicted displacement and its homography. Pairwise mode
    /// predicts how `img` is rotated relative to `reference`.
    pub fn estimate_alignment(
        &self,
        img: &Image,
        reference: Option<&Image>,
    ) -> Result<(CornerDisplacement, HomographyMatrix)> {
        let input = self.input(img, reference)?;
        let x = self.model.backbone.to_tensor(&input)?;
        let d = self.model.predict_tensor(&x, self.frame.height, self.frame.width);
        if d.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCorrespondence("non-finite prediction".into()));
        }
        let h = displacement_to_homography(&d, &self.frame)?;
        Ok((d, h))
    }

    /// Homography that maps `img` back onto the template/reference pose.
    pub fn alignment_homography(&self, img: &Image, reference: Option<&Image>) -> Result<HomographyMatrix> {
        let (d, h) = self.estimate_alignment(img, reference)?;
        match self.mode {
            AlignerMode::Template => invert(&h),
            AlignerMode::PairwiseRotation => {
                let angle = fit_rotation_angle(&d, &self.frame);
                if angle.abs() < self.config.min_rotation {
                    Ok(HomographyMatrix::identity())
                } else {
                    Ok(similarity_about_center(-angle, 1.0, 0.0, 0.0, &self.frame))
                }
            }
        }
    }

    pub fn config_hash(&self) -> String {
        hash_of(&self.config)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let bb = self.model.backbone.tensors();
        let mut named: Vec<(&str, &[f32])> = bb.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        named.push(("head.weight", &self.model.head.weight));
        named.push(("head.bias", &self.model.head.bias));
        let meta = serde_json::json!({
            "mode": self.mode,
            "config": self.config,
            "frame": [self.frame.width, self.frame.height],
            "template_id": self.template_id,
            "in_channels": self.model.backbone.in_channels(),
            "output_scale": self.model.head.output_scale,
            "loss_curve": self.loss_curve,
        });
        checkpoint::write(
            base,
            "aligner",
            self.model.backbone.id().as_str(),
            &self.config_hash(),
            &named,
            meta,
        )?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (sc, mut tensors) = checkpoint::read(base, "aligner")?;
        let meta = &sc.meta;
        let bad = || Error::Validation(format!("aligner checkpoint {} is malformed", base.display()));
        let mode: AlignerMode = serde_json::from_value(meta["mode"].clone())?;
        let config: AlignerConfig = serde_json::from_value(meta["config"].clone())?;
        let fw = meta["frame"][0].as_u64().ok_or_else(bad)? as usize;
        let fh = meta["frame"][1].as_u64().ok_or_else(bad)? as usize;
        let frame = ImageFrame::new(fw, fh)?;
        let in_channels = meta["in_channels"].as_u64().ok_or_else(bad)? as usize;
        let scale = meta["output_scale"].as_f64().ok_or_else(bad)? as f32;
        if tensors.len() < 3 {
            return Err(bad());
        }
        let bias = tensors.pop().expect("checked");
        let weight = tensors.pop().expect("checked");
        let id: BackboneId = sc.backbone.parse()?;
        let backbone = Backbone::from_tensors(id, in_channels, tensors)?;
        let (gh, gw) = backbone.final_grid(fh, fw);
        let mut head = RegressionHead::new(config.head, backbone.out_channels(), gh * gw, scale);
        if head.weight.len() != weight.len() || head.bias.len() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: head.weight.len(),
                found: weight.len(),
            });
        }
        head.weight = weight;
        head.bias = bias;
        if hash_of(&config) != sc.config_hash {
            return Err(Error::ConfigHashMismatch {
                model: sc.config_hash,
                extractor: hash_of(&config),
            });
        }
        Ok(Self {
            mode,
            model: RegressionModel {
                backbone,
                head,
                train_backbone: true,
            },
            frame,
            template_id: meta["template_id"].as_str().map(str::to_string),
            config,
            loss_curve: serde_json::from_value(meta["loss_curve"].clone()).unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{render_toy_sample, ToyDatasetSpec};

    fn normals(n: usize, size: usize) -> Vec<Image> {
        let spec = ToyDatasetSpec::default().classes.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n).map(|_| render_toy_sample(&spec, size, None, &mut rng).0).collect()
    }

    fn quick(mode: AlignerMode) -> AlignerConfig {
        AlignerConfig {
            mode,
            iterations: 300,
            batch_size: 4,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..AlignerConfig::default()
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn zero_rotation_target_is_zero() {
        let imgs = normals(1, 32);
        let frame = ImageFrame::of(&imgs[0]).unwrap();
        let (x, d) = pairwise_sample(&imgs[0], 0.0, &frame).unwrap();
        assert_eq!(d, CornerDisplacement::zeros());
        assert_eq!(x.channels(), 6);
        assert_eq!(&x.data()[..3], imgs[0].pixel(0, 0));
        assert_eq!(&x.data()[3..6], imgs[0].pixel(0, 0));
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = AlignerConfig {
            template_index: Some(4),
            ..AlignerConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<AlignerConfig>(&s).unwrap(), cfg);
        assert!(AlignerConfig { rho_fraction: 0.5, ..cfg.clone() }.validate().is_err());
        assert!(cfg.pick_template(3).is_err());
        let auto = AlignerConfig::default();
        assert_eq!(auto.pick_template(10).unwrap(), auto.pick_template(10).unwrap());
    }

    #[test]
    fn pairwise_loss_decreases_and_is_reproducible() {
        let imgs = normals(6, 32);
        let cfg = quick(AlignerMode::PairwiseRotation);
        let a = train_pairwise_aligner(&imgs, &cfg).unwrap();
        let n = a.loss_curve.len() / 10;
        assert!(mean(&a.loss_curve[a.loss_curve.len() - n..]) < mean(&a.loss_curve[..n]));
        let b = train_pairwise_aligner(&imgs, &cfg).unwrap();
        assert!((a.loss_curve.last().unwrap() - b.loss_curve.last().unwrap()).abs() < 1e-6);
        let (d1, h1) = a.estimate_alignment(&imgs[0], Some(&imgs[1])).unwrap();
        let (d2, h2) = a.estimate_alignment(&imgs[0], Some(&imgs[1])).unwrap();
        assert_eq!((d1.clone(), h1), (d2, h2));
        let frame = ImageFrame::of(&imgs[0]).unwrap();
        assert_eq!(h1, displacement_to_homography(&d1, &frame).unwrap());
        assert!(a.estimate_alignment(&imgs[0], None).is_err());
    }

    #[test]
    fn template_loss_decreases() {
        let imgs = normals(1, 32);
        let a = train_template_aligner(&imgs[0], "t", &quick(AlignerMode::Template)).unwrap();
        let n = a.loss_curve.len() / 10;
        assert!(mean(&a.loss_curve[a.loss_curve.len() - n..]) < mean(&a.loss_curve[..n]));
        assert!(a.estimate_alignment(&imgs[0], Some(&imgs[0])).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = normals(3, 32);
        let cfg = AlignerConfig {
            iterations: 5,
            ..quick(AlignerMode::PairwiseRotation)
        };
        let a = train_pairwise_aligner(&imgs, &cfg).unwrap();
        a.save(&dir.path().join("al")).unwrap();
        let b = AlignerModel::load(&dir.path().join("al")).unwrap();
        assert_eq!(b.model, a.model);
        assert_eq!(b.loss_curve, a.loss_curve);
        assert_eq!(
            a.estimate_alignment(&imgs[1], Some(&imgs[0])).unwrap(),
            b.estimate_alignment(&imgs[1], Some(&imgs[0])).unwrap()
        );
    }
}
