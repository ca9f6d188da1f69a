//! Backbone + 8-output regression head, trained on corner-displacement
//! targets. Shared by the template/pairwise aligners and self-homography
//! fine-tuning.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::geometry::CornerDisplacement;
use crate::nn::{HeadKind, RegressionHead, HEAD_OUTPUTS};
use crate::optim::Adam;
use crate::shl::shl_loss;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecProfile {
    /// Everything on the calling thread.
    #[default]
    Serial,
    /// Per-sample work fanned out to the rayon pool; gradients are still
    /// reduced in sample order.
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionModel {
    pub backbone: Backbone,
    pub head: RegressionHead,
    pub train_backbone: bool,
}

/// One training example: a normalized planar input and its target.
pub struct TrainSample {
    pub input: Vec<f32>,
    pub target: CornerDisplacement,
}

impl RegressionModel {
    pub fn new<R: Rng>(
        backbone: Backbone,
        kind: HeadKind,
        input_hw: (usize, usize),
        output_scale: f32,
        rng: &mut R,
    ) -> Self {
        let (gh, gw) = backbone.final_grid(input_hw.0, input_hw.1);
        let mut head = RegressionHead::new(kind, backbone.out_channels(), gh * gw, output_scale);
        head.init(rng);
        Self {
            backbone,
            head,
            train_backbone: true,
        }
    }

    fn depth(&self) -> usize {
        self.backbone.net().stage_count()
    }

    pub fn predict_tensor(&self, x: &[f32], h: usize, w: usize) -> CornerDisplacement {
        let acts = self.backbone.forward_tensor(x, h, w, self.depth(), false);
        let (last, _, _) = acts.outputs.last().expect("backbone has stages");
        let feats = self.head.features(last, self.backbone.out_channels());
        to_displacement(&self.head.forward(&feats))
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        let mut shapes = self.backbone.net().param_shapes();
        shapes.push(self.head.weight.len());
        shapes.push(self.head.bias.len());
        shapes
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut p = self.backbone.net_mut().params_mut();
        p.extend(self.head.params_mut());
        p
    }

    /// Loss and parameter gradients for one sample, with the loss divided
    /// by `batch` so that summing over a batch gives the mean.
    pub fn sample_gradient(
        &self,
        sample: &TrainSample,
        h: usize,
        w: usize,
        batch: usize,
    ) -> (f64, Vec<Vec<f32>>) {
        let mut grads: Vec<Vec<f32>> = self.param_shapes().iter().map(|&n| vec![0.0; n]).collect();
        let acts = self
            .backbone
            .forward_tensor(&sample.input, h, w, self.depth(), self.train_backbone);
        let (last, _, _) = acts.outputs.last().expect("backbone has stages");
        let feats = self.head.features(last, self.backbone.out_channels());
        let out = self.head.forward(&feats);
        let pred = to_displacement(&out);
        let loss = shl_loss(&pred, &sample.target);

        let target = sample.target.to_flat();
        let mut dout = [0.0f32; HEAD_OUTPUTS];
        for i in 0..HEAD_OUTPUTS {
            dout[i] = (2.0 * (out[i] as f64 - target[i]) / batch as f64) as f32;
        }
        let n_bb = grads.len() - 2;
        let (bb_grads, head_grads) = grads.split_at_mut(n_bb);
        let (gw, gb) = head_grads.split_at_mut(1);
        let dmap = self
            .head
            .backward(&feats, &dout, last.len(), &mut gw[0], &mut gb[0]);
        if self.train_backbone {
            self.backbone.net().backward(&acts, dmap, bb_grads);
        }
        (loss / batch as f64, grads)
    }

    /// One optimizer step on `batch`; returns the mean per-sample loss.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        batch: &[TrainSample],
        h: usize,
        w: usize,
        profile: ExecProfile,
    ) -> f64 {
        let n = batch.len();
        let per_sample: Vec<(f64, Vec<Vec<f32>>)> = match profile {
            ExecProfile::Serial => batch
                .iter()
                .map(|s| self.sample_gradient(s, h, w, n))
                .collect(),
            ExecProfile::Parallel => batch
                .par_iter()
                .map(|s| self.sample_gradient(s, h, w, n))
                .collect(),
        };
        let mut loss = 0.0;
        let mut total: Vec<Vec<f32>> = self.param_shapes().iter().map(|&n| vec![0.0; n]).collect();
        for (l, g) in per_sample {
            loss += l;
            for (t, gi) in total.iter_mut().zip(g) {
                for (a, b) in t.iter_mut().zip(gi) {
                    *a += b;
                }
            }
        }
        if !self.train_backbone {
            let n_bb = total.len() - 2;
            for g in &mut total[..n_bb] {
                g.fill(0.0);
            }
        }
        opt.update(self.params_mut(), &total);
        loss
    }
}

pub fn to_displacement(out: &[f32; HEAD_OUTPUTS]) -> CornerDisplacement {
    let v: [f64; 8] = std::array::from_fn(|i| out[i] as f64);
    CornerDisplacement([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]])
}

/// Per-step generator: step `k` always draws from the same stream, so a
/// resumed run sees exactly the samples an uninterrupted one would.
pub fn step_rng(seed: u64, step: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// A model, its optimizer, and the number of steps already taken.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: RegressionModel,
    pub opt: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: RegressionModel, cfg: crate::optim::AdamConfig) -> Self {
        let opt = Adam::new(cfg, &model.param_shapes());
        Self {
            model,
            opt,
            step: 0,
        }
    }

    /// Trains until `until` steps have been taken. `make_sample` builds one
    /// batch element from the step's generator; `on_step` sees the step
    /// number (1-based) and its loss after each update.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        until: usize,
        batch_size: usize,
        hw: (usize, usize),
        seed: u64,
        profile: ExecProfile,
        mut make_sample: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> crate::Result<TrainSample>,
        mut on_step: impl FnMut(usize, f64, &Trainer) -> crate::Result<()>,
    ) -> crate::Result<()> {
        while self.step < until {
            let mut rng = step_rng(seed, self.step);
            let batch = (0..batch_size)
                .map(|_| make_sample(&mut rng))
                .collect::<crate::Result<Vec<_>>>()?;
            let loss = self
                .model
                .train_step(&mut self.opt, &batch, hw.0, hw.1, profile);
            if !loss.is_finite() {
                return Err(crate::Error::NonFiniteLoss { step: self.step });
            }
            self.step += 1;
            on_step(self.step, loss, self)?;
        }
        Ok(())
    }

    /// Persists weights, head and optimizer moments for resumption.
    pub fn save_state(&self, base: &std::path::Path, config_hash: &str) -> crate::Result<()> {
        let mut named: Vec<(String, &[f32])> = self
            .model
            .backbone
            .tensors()
            .into_iter()
            .collect();
        named.push(("head.weight".into(), &self.model.head.weight));
        named.push(("head.bias".into(), &self.model.head.bias));
        let (m, v) = self.opt.moments();
        for (i, t) in m.iter().enumerate() {
            named.push((format!("adam.m{i}"), t));
        }
        for (i, t) in v.iter().enumerate() {
            named.push((format!("adam.v{i}"), t));
        }
        let refs: Vec<(&str, &[f32])> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let meta = serde_json::json!({
            "step": self.step,
            "adam_step": self.opt.steps_taken(),
            "adam": self.opt.config(),
            "head_kind": self.model.head.kind,
            "output_scale": self.model.head.output_scale,
            "in_channels": self.model.backbone.in_channels(),
            "train_backbone": self.model.train_backbone,
        });
        crate::checkpoint::write(
            base,
            "train_state",
            self.model.backbone.id().as_str(),
            config_hash,
            &refs,
            meta,
        )?;
        Ok(())
    }

    pub fn load_state(base: &std::path::Path, hw: (usize, usize)) -> crate::Result<Self> {
        let (sc, mut tensors) = crate::checkpoint::read(base, "train_state")?;
        let meta = &sc.meta;
        let bad = |what: &str| crate::Error::Validation(format!("train state missing {what}"));
        let in_channels = meta["in_channels"].as_u64().ok_or_else(|| bad("in_channels"))? as usize;
        let kind: HeadKind = serde_json::from_value(meta["head_kind"].clone())?;
        let scale = meta["output_scale"].as_f64().ok_or_else(|| bad("output_scale"))? as f32;
        let adam_cfg: crate::optim::AdamConfig = serde_json::from_value(meta["adam"].clone())?;
        let n_params = 2 * crate::backbone::COMPACT_STAGES.len() + 2;
        if tensors.len() != 3 * n_params {
            return Err(crate::Error::DimensionMismatch {
                expected: 3 * n_params,
                found: tensors.len(),
            });
        }
        let v = tensors.split_off(2 * n_params);
        let m = tensors.split_off(n_params);
        let head_bias = tensors.pop().expect("length checked");
        let head_weight = tensors.pop().expect("length checked");
        let backbone = Backbone::from_tensors(sc.backbone.parse()?, in_channels, tensors)?;
        let (gh, gw) = backbone.final_grid(hw.0, hw.1);
        let mut head = RegressionHead::new(kind, backbone.out_channels(), gh * gw, scale);
        if head.weight.len() != head_weight.len() {
            return Err(crate::Error::DimensionMismatch {
                expected: head.weight.len(),
                found: head_weight.len(),
            });
        }
        head.weight = head_weight;
        head.bias = head_bias;
        let model = RegressionModel {
            backbone,
            head,
            train_backbone: meta["train_backbone"].as_bool().unwrap_or(true),
        };
        let opt = Adam::from_state(
            adam_cfg,
            meta["adam_step"].as_u64().ok_or_else(|| bad("adam_step"))?,
            m,
            v,
        );
        Ok(Self {
            model,
            opt,
            step: meta["step"].as_u64().ok_or_else(|| bad("step"))? as usize,
        })
    }
}
