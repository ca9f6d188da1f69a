//! Minimal convolutional network with hand-written backpropagation.
//!
//! Tensors are planar `f32` buffers (`[channels, height, width]`) for a
//! single sample; batches are processed sample by sample and per-sample
//! gradients are reduced in sample order, so results do not depend on the
//! execution profile.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// 3x3 convolution with zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out_channels, in_channels * 9]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub struct ConvCache {
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given
    // slices; callers pass exact dimensions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, zero biases.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let std = (2.0 / (self.in_channels * 9) as f64).sqrt();
        for w in &mut self.weight {
            *w = (normal(rng) * std) as f32;
        }
        self.bias.fill(0.0);
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let s = self.stride;
        let mut cols = vec![0.0f32; self.in_channels * 9 * n];
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let s = self.stride;
        let mut x = vec![0.0f32; self.in_channels * h * w];
        for c in 0..self.in_channels {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the pre-activation output and, when `keep` is set, the
    /// im2col buffer needed for the backward pass.
    pub fn forward(&self, x: &[f32], h: usize, w: usize, keep: bool) -> (Vec<f32>, Option<ConvCache>) {
        assert_eq!(x.len(), self.in_channels * h * w, "conv input size");
        let (oh, ow) = self.out_size(h, w);
        let n = oh * ow;
        let k = self.in_channels * 9;
        let cols = self.im2col(x, h, w);
        let mut out = vec![0.0f32; self.out_channels * n];
        for (o, row) in out.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias[o]);
        }
        sgemm(
            self.out_channels,
            k,
            n,
            &self.weight,
            (k as isize, 1),
            &cols,
            (n as isize, 1),
            1.0,
            &mut out,
        );
        let cache = keep.then_some(ConvCache {
            cols,
            in_h: h,
            in_w: w,
        });
        (out, cache)
    }

    /// Accumulates parameter gradients into `gw`/`gb` and returns the
    /// input gradient when `need_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &[f32],
        gw: &mut [f32],
        gb: &mut [f32],
        need_dx: bool,
    ) -> Option<Vec<f32>> {
        let (oh, ow) = self.out_size(cache.in_h, cache.in_w);
        let n = oh * ow;
        let k = self.in_channels * 9;
        for (o, row) in dout.chunks_exact(n).enumerate() {
            gb[o] += row.iter().sum::<f32>();
        }
        // gw += dout (out x n) * cols^T (n x k)
        sgemm(
            self.out_channels,
            n,
            k,
            dout,
            (n as isize, 1),
            &cache.cols,
            (1, n as isize),
            1.0,
            gw,
        );
        if !need_dx {
            return None;
        }
        // dcols = W^T (k x out) * dout (out x n)
        let mut dcols = vec![0.0f32; k * n];
        sgemm(
            k,
            self.out_channels,
            n,
            &self.weight,
            (1, k as isize),
            dout,
            (n as isize, 1),
            0.0,
            &mut dcols,
        );
        Some(self.col2im(&dcols, cache.in_h, cache.in_w))
    }
}

/// Architecture of one stage: a strided 3x3 convolution followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Sequential stack of conv + ReLU stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub in_channels: usize,
    pub stages: Vec<Conv2d>,
}

/// Activations of every stage for one sample.
pub struct Activations {
    /// Post-ReLU output per stage, with its spatial size.
    pub outputs: Vec<(Vec<f32>, usize, usize)>,
    caches: Vec<ConvCache>,
}

impl ConvNet {
    pub fn new(in_channels: usize, spec: &[StageSpec]) -> Self {
        let mut c = in_channels;
        let stages = spec
            .iter()
            .map(|s| {
                let conv = Conv2d::new(c, s.out_channels, s.stride);
                c = s.out_channels;
                conv
            })
            .collect();
        Self {
            in_channels,
            stages,
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        for s in &mut self.stages {
            s.init_he(rng);
        }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self, stage: usize) -> usize {
        self.stages[stage].out_channels
    }

    /// Runs the first `depth` stages. Caches are kept only when `train`.
    pub fn forward(&self, x: &[f32], h: usize, w: usize, depth: usize, train: bool) -> Activations {
        let mut outputs = Vec::with_capacity(depth);
        let mut caches = Vec::with_capacity(depth);
        let (mut cur_h, mut cur_w) = (h, w);
        let mut cur: Option<Vec<f32>> = None;
        for conv in &self.stages[..depth] {
            let input = cur.as_deref().unwrap_or(x);
            let (mut out, cache) = conv.forward(input, cur_h, cur_w, train);
            for v in &mut out {
                *v = v.max(0.0);
            }
            let (oh, ow) = conv.out_size(cur_h, cur_w);
            if let Some(c) = cache {
                caches.push(c);
            }
            outputs.push((out.clone(), oh, ow));
            cur = Some(out);
            cur_h = oh;
            cur_w = ow;
        }
        Activations { outputs, caches }
    }

    /// Backpropagates a gradient w.r.t. the last computed stage output.
    pub fn backward(&self, acts: &Activations, dlast: Vec<f32>, grads: &mut [Vec<f32>]) {
        let depth = acts.caches.len();
        let mut d = dlast;
        for i in (0..depth).rev() {
            let (out, _, _) = &acts.outputs[i];
            for (g, &o) in d.iter_mut().zip(out) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            let dx = self.stages[i].backward(&acts.caches[i], &d, &mut gw[0], &mut rest[0], i > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flat_map(|s| [s.weight.len(), s.bias.len()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.stages
            .iter()
            .flat_map(|s| [s.weight.as_slice(), s.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.stages
            .iter_mut()
            .flat_map(|s| [s.weight.as_mut_slice(), s.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool, then one linear layer.
    Gap,
    /// Flatten the final feature map, then one linear layer.
    Flatten,
}

/// Linear regression head producing the eight corner-displacement values.
/// Raw outputs are multiplied by `output_scale` to give pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead {
    pub kind: HeadKind,
    pub in_features: usize,
    pub output_scale: f32,
    /// `[8, in_features]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub const HEAD_OUTPUTS: usize = 8;

impl RegressionHead {
    pub fn new(kind: HeadKind, channels: usize, grid: usize, output_scale: f32) -> Self {
        let in_features = match kind {
            HeadKind::Gap => channels,
            HeadKind::Flatten => channels * grid,
        };
        Self {
            kind,
            in_features,
            output_scale,
            weight: vec![0.0; HEAD_OUTPUTS * in_features],
            bias: vec![0.0; HEAD_OUTPUTS],
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let std = (1.0 / self.in_features as f64).sqrt() * 0.1;
        for w in &mut self.weight {
            *w = (normal(rng) * std) as f32;
        }
        self.bias.fill(0.0);
    }

    /// Head input vector derived from a `[c, h, w]` map.
    pub fn features(&self, map: &[f32], channels: usize) -> Vec<f32> {
        match self.kind {
            HeadKind::Flatten => map.to_vec(),
            HeadKind::Gap => {
                let plane = map.len() / channels;
                map.chunks_exact(plane)
                    .map(|p| p.iter().sum::<f32>() / plane as f32)
                    .collect()
            }
        }
    }

    /// Predicted displacement in pixels.
    pub fn forward(&self, feats: &[f32]) -> [f32; HEAD_OUTPUTS] {
        let mut out = [0.0f32; HEAD_OUTPUTS];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_features..][..self.in_features];
            let dot: f32 = row.iter().zip(feats).map(|(a, b)| a * b).sum();
            *out_v = (dot + self.bias[o]) * self.output_scale;
        }
        out
    }

    /// Given dL/d(pixel output), accumulates parameter gradients and returns
    /// dL/d(map) for the `[channels, h, w]` map the features came from.
    pub fn backward(
        &self,
        feats: &[f32],
        dout_px: &[f32; HEAD_OUTPUTS],
        map_len: usize,
        gw: &mut [f32],
        gb: &mut [f32],
    ) -> Vec<f32> {
        let mut dfeat = vec![0.0f32; self.in_features];
        for o in 0..HEAD_OUTPUTS {
            let g = dout_px[o] * self.output_scale;
            gb[o] += g;
            let row = &self.weight[o * self.in_features..][..self.in_features];
            let grow = &mut gw[o * self.in_features..][..self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * feats[i];
                dfeat[i] += g * row[i];
            }
        }
        match self.kind {
            HeadKind::Flatten => dfeat,
            HeadKind::Gap => {
                let plane = map_len / self.in_features;
                let inv = 1.0 / plane as f32;
                dfeat
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g * inv).take(plane))
                    .collect()
            }
        }
    }

    pub fn params(&self) -> [&[f32]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut [f32]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
