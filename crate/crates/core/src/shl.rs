//! Self-homography learning: fine-tune a backbone by regressing the random
//! inward corner perturbation applied to aligned normal images.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneId};
use crate::checkpoint::hash_of;
use crate::error::{Error, Result};
use crate::geometry::{
    displacement_to_homography, warp_image, CornerDisplacement, FillMode, ImageFrame,
};
use crate::model::{ExecProfile, RegressionModel, TrainSample, Trainer};
use crate::nn::{HeadKind, RegressionHead, HEAD_OUTPUTS};
use crate::optim::AdamConfig;
use crate::raster::Image;
use crate::synthesis::{augment, sample_inward_perturbation, AugmentationPolicy};

/// Sum over the four corners of the squared Euclidean distance between
/// target and predicted displacement.
pub fn shl_loss(pred: &CornerDisplacement, target: &CornerDisplacement) -> f64 {
    pred.0
        .iter()
        .zip(target.0.iter())
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShlConfig {
    pub backbone: BackboneId,
    /// Maximum perturbation as a fraction of the shorter image side.
    pub rho_fraction: f64,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub augmentation: AugmentationPolicy,
    pub optimizer: AdamConfig,
    pub head: HeadKind,
    /// Update every backbone layer (otherwise only the head trains).
    pub train_all_layers: bool,
    pub seed: u64,
    pub profile: ExecProfile,
}

impl Default for ShlConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneId::CompactCnn,
            rho_fraction: 0.25,
            iterations: 3000,
            checkpoint_every: 100,
            batch_size: 8,
            augmentation: AugmentationPolicy::default(),
            optimizer: AdamConfig::default(),
            head: HeadKind::Gap,
            train_all_layers: true,
            seed: 0,
            profile: ExecProfile::Serial,
        }
    }
}

impl ShlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.checkpoint_every == 0 {
            return Err(Error::Validation("iterations and checkpoint_every must be > 0".into()));
        }
        if self.iterations % self.checkpoint_every != 0 {
            return Err(Error::Validation(format!(
                "checkpoint_every {} does not divide iterations {}",
                self.checkpoint_every, self.iterations
            )));
        }
        if !(self.rho_fraction > 0.0 && self.rho_fraction <= 0.25) {
            return Err(Error::Validation("rho_fraction must lie in (0, 0.25]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be > 0".into()));
        }
        self.augmentation.validate()
    }

    pub fn rho(&self, frame: &ImageFrame) -> f64 {
        self.rho_fraction * frame.min_side() as f64
    }

    pub fn checkpoint_count(&self) -> usize {
        self.iterations / self.checkpoint_every
    }

    /// Hash of everything that determines the training trajectory.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.profile = ExecProfile::Serial;
        c.iterations = 0;
        hash_of(&c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Mean training loss over the steps since the previous checkpoint.
    pub loss: f64,
    pub backbone: Backbone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSeries {
    pub config_hash: String,
    pub entries: Vec<Checkpoint>,
    /// Per-step training loss.
    pub loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeriesIndex {
    config_hash: String,
    backbone: String,
    entries: Vec<IndexEntry>,
    loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    iteration: usize,
    loss: f64,
    file: String,
}

pub const SERIES_INDEX: &str = "series.json";
pub const TRAIN_STATE: &str = "train_state";

impl CheckpointSeries {
    pub fn is_consistent(&self, cfg: &ShlConfig) -> bool {
        self.entries.len() == cfg.checkpoint_count()
            && self
                .entries
                .windows(2)
                .all(|w| w[0].iteration < w[1].iteration)
    }

    /// Writes numbered weight files plus `series.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_from(dir, 0)
    }

    /// Like [`CheckpointSeries::save`] but only writes the weight files of
    /// entries from `first` on; earlier ones are assumed to be on disk.
    pub fn save_from(&self, dir: &Path, first: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (i, ck) in self.entries.iter().enumerate() {
            let file = format!("ckpt_{:06}", ck.iteration);
            if i >= first {
                ck.backbone.save(
                    &dir.join(&file),
                    &self.config_hash,
                    serde_json::json!({ "iteration": ck.iteration, "loss": ck.loss }),
                )?;
            }
            entries.push(IndexEntry {
                iteration: ck.iteration,
                loss: ck.loss,
                file,
            });
        }
        let backbone = self
            .entries
            .first()
            .map(|c| c.backbone.id().to_string())
            .unwrap_or_default();
        let index = SeriesIndex {
            config_hash: self.config_hash.clone(),
            backbone,
            entries,
            loss_curve: self.loss_curve.clone(),
        };
        fs::write(dir.join(SERIES_INDEX), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: SeriesIndex = serde_json::from_slice(&fs::read(dir.join(SERIES_INDEX))?)?;
        let entries = index
            .entries
            .iter()
            .map(|e| {
                Ok(Checkpoint {
                    iteration: e.iteration,
                    loss: e.loss,
                    backbone: Backbone::load(&dir.join(&e.file))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config_hash: index.config_hash,
            entries,
            loss_curve: index.loss_curve,
        })
    }
}

fn check_normals(normals: &[Image]) -> Result<ImageFrame> {
    let first = normals.first().ok_or(Error::InsufficientNormals { needed: 1, got: 0 })?;
    let frame = ImageFrame::of(first)?;
    if normals.iter().any(|i| i.dims() != first.dims()) {
        return Err(Error::Validation("normal images differ in size".into()));
    }
    Ok(frame)
}

/// One SHL training example: augment, perturb inwards, warp with
/// reflection fill.
pub fn shl_sample<R: Rng>(
    img: &Image,
    policy: &AugmentationPolicy,
    rho: f64,
    frame: &ImageFrame,
    rng: &mut R,
) -> Result<(Image, CornerDisplacement)> {
    let aug = augment(img, policy, rng);
    let d = sample_inward_perturbation(rng, rho, frame)?;
    let h = displacement_to_homography(&d, frame)?;
    Ok((warp_image(&aug, &h, FillMode::Reflection)?, d))
}

/// Fine-tunes `backbone` on `normals`, snapshotting it every
/// `checkpoint_every` steps.
pub fn finetune_backbone(
    backbone: Backbone,
    normals: &[Image],
    cfg: &ShlConfig,
) -> Result<CheckpointSeries> {
    finetune_observed(backbone, normals, cfg, None, &mut |_| {})
}

/// Creates the trainer a fresh fine-tuning run starts from.
pub fn new_trainer(backbone: Backbone, frame: &ImageFrame, cfg: &ShlConfig) -> Trainer {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RegressionModel::new(
        backbone,
        cfg.head,
        (frame.height, frame.width),
        cfg.rho(frame) as f32,
        &mut init_rng,
    );
    model.train_backbone = cfg.train_all_layers;
    Trainer::new(model, cfg.optimizer)
}

/// [`finetune_backbone`] with an optional resume point and a hook that sees
/// the augmentation policy each sample is drawn with.
pub fn finetune_observed(
    backbone: Backbone,
    normals: &[Image],
    cfg: &ShlConfig,
    resume: Option<(Trainer, CheckpointSeries)>,
    on_augment: &mut dyn FnMut(&AugmentationPolicy),
) -> Result<CheckpointSeries> {
    finetune_with_state(backbone, normals, cfg, resume, on_augment, None)
}

/// Full fine-tuning driver. When `state_dir` is given, the series and the
/// trainer state are written there at every checkpoint so an interrupted
/// run can be resumed with [`resume_state`].
pub fn finetune_with_state(
    backbone: Backbone,
    normals: &[Image],
    cfg: &ShlConfig,
    resume: Option<(Trainer, CheckpointSeries)>,
    on_augment: &mut dyn FnMut(&AugmentationPolicy),
    state_dir: Option<&Path>,
) -> Result<CheckpointSeries> {
    cfg.validate()?;
    let frame = check_normals(normals)?;
    if backbone.in_channels() != normals[0].channels() {
        return Err(Error::DimensionMismatch {
            expected: backbone.in_channels(),
            found: normals[0].channels(),
        });
    }
    let rho = cfg.rho(&frame);
    let config_hash = cfg.trajectory_hash();
    let (mut trainer, mut series) = match resume {
        Some((t, s)) => {
            if s.config_hash != config_hash {
                return Err(Error::ConfigHashMismatch {
                    model: s.config_hash,
                    extractor: config_hash,
                });
            }
            (t, s)
        }
        None => (
            new_trainer(backbone, &frame, cfg),
            CheckpointSeries {
                config_hash: config_hash.clone(),
                entries: Vec::new(),
                loss_curve: Vec::new(),
            },
        ),
    };
    let proto = trainer.model.backbone.clone();
    let every = cfg.checkpoint_every;
    trainer.run(
        cfg.iterations,
        cfg.batch_size,
        (frame.height, frame.width),
        cfg.seed,
        cfg.profile,
        |rng| {
            let img = &normals[rng.gen_range(0..normals.len())];
            on_augment(&cfg.augmentation);
            let (warped, d) = shl_sample(img, &cfg.augmentation, rho, &frame, rng)?;
            Ok(TrainSample {
                input: proto.to_tensor(&warped)?,
                target: d,
            })
        },
        |step, loss, t| {
            series.loss_curve.push(loss);
            if step % every == 0 {
                let window = &series.loss_curve[series.loss_curve.len() - every..];
                series.entries.push(Checkpoint {
                    iteration: step,
                    loss: window.iter().sum::<f64>() / every as f64,
                    backbone: t.model.backbone.clone(),
                });
                if let Some(dir) = state_dir {
                    series.save_from(dir, series.entries.len() - 1)?;
                    t.save_state(&dir.join(TRAIN_STATE), &series.config_hash)?;
                }
            }
            Ok(())
        },
    )?;
    Ok(series)
}

/// Loads a trainer and its partial series written by
/// [`finetune_with_state`].
pub fn resume_state(dir: &Path, hw: (usize, usize)) -> Result<(Trainer, CheckpointSeries)> {
    let series = CheckpointSeries::load(dir)?;
    let trainer = Trainer::load_state(&dir.join(TRAIN_STATE), hw)?;
    let last = series.entries.last().map_or(0, |c| c.iteration);
    if trainer.step != last {
        return Err(Error::Validation(format!(
            "train state at step {} but last checkpoint is {last}",
            trainer.step
        )));
    }
    Ok((trainer, series))
}

/// Returns the checkpoint with the highest score; ties go to the earliest
/// iteration.
pub fn select_checkpoint<'a>(
    series: &'a CheckpointSeries,
    mut evaluator: impl FnMut(&Checkpoint) -> Result<f64>,
) -> Result<(&'a Checkpoint, Vec<f64>)> {
    let mut best: Option<(usize, f64)> = None;
    let mut scores = Vec::with_capacity(series.entries.len());
    for (i, ck) in series.entries.iter().enumerate() {
        let s = evaluator(ck)?;
        scores.push(s);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::Validation("empty checkpoint series".into()))?;
    Ok((&series.entries[i], scores))
}

/// Analytic gradient of the summed corner loss over `probes` with
/// respect to the head weights then biases, multiplied by `loss_scale`.
pub fn head_gradient(
    head: &RegressionHead,
    probes: &[(Vec<f32>, CornerDisplacement)],
    loss_scale: f64,
) -> Vec<f64> {
    let mut gw = vec![0.0f32; head.weight.len()];
    let mut gb = vec![0.0f32; head.bias.len()];
    for (feats, target) in probes {
        let out = head.forward(feats);
        let t = target.to_flat();
        let dout: [f32; HEAD_OUTPUTS] =
            std::array::from_fn(|i| (loss_scale * 2.0 * (out[i] as f64 - t[i])) as f32);
        head.backward(feats, &dout, head.in_features, &mut gw, &mut gb);
    }
    gw.iter().chain(&gb).map(|&g| g as f64).collect()
}

fn head_loss_f64(
    weight: &[f64],
    bias: &[f64],
    scale: f64,
    probes: &[(Vec<f32>, CornerDisplacement)],
) -> f64 {
    let n_in = weight.len() / HEAD_OUTPUTS;
    probes
        .iter()
        .map(|(feats, target)| {
            let t = target.to_flat();
            (0..HEAD_OUTPUTS)
                .map(|o| {
                    let dot: f64 = weight[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(feats)
                        .map(|(w, &f)| w * f as f64)
                        .sum();
                    ((dot + bias[o]) * scale - t[o]).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

/// Largest relative error between the head's analytic gradient and
/// central finite differences (step `1e-4`) of the loss, over all head
/// parameters. Probes are pre-extracted head inputs (flattened).
pub fn grad_check_head(head: &RegressionHead, probes: &[(Vec<f32>, CornerDisplacement)]) -> f64 {
    const STEP: f64 = 1e-4;
    let flat_head = RegressionHead {
        kind: HeadKind::Flatten,
        ..head.clone()
    };
    let analytic = head_gradient(&flat_head, probes, 1.0);
    let mut weight: Vec<f64> = head.weight.iter().map(|&v| v as f64).collect();
    let mut bias: Vec<f64> = head.bias.iter().map(|&v| v as f64).collect();
    let scale = head.output_scale as f64;
    let mut worst = 0.0f64;
    let n_w = weight.len();
    for (i, &a) in analytic.iter().enumerate() {
        let slot = if i < n_w { &mut weight[i] } else { &mut bias[i - n_w] };
        let orig = *slot;
        *slot = orig + STEP;
        let _ = slot;
        let up = head_loss_f64(&weight, &bias, scale, probes);
        let slot = if i < n_w { &mut weight[i] } else { &mut bias[i - n_w] };
        *slot = orig - STEP;
        let down = head_loss_f64(&weight, &bias, scale, probes);
        let slot = if i < n_w { &mut weight[i] } else { &mut bias[i - n_w] };
        *slot = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
