//! Feature-map plumbing shared by the scorers: grid alignment, pooling,
//! distances, and score-map post-processing.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Tapped maps resized to one grid and channel-concatenated, stored
/// position-major: `data[p * dim + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embedding {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

fn check_finite(maps: &[FeatureMap]) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::Validation("no feature maps".into()));
    }
    for m in maps {
        if m.data.len() != m.channels * m.grid() {
            return Err(Error::DimensionMismatch {
                expected: m.channels * m.grid(),
                found: m.data.len(),
            });
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite activation in {}", m.layer)));
        }
    }
    Ok(())
}

/// Nearest-neighbor resize of every map to the largest grid among them,
/// then channel concatenation in tap order.
pub fn embed(maps: &[FeatureMap]) -> Result<Embedding> {
    check_finite(maps)?;
    let (height, width) = maps
        .iter()
        .map(|m| (m.height, m.width))
        .max_by_key(|&(h, w)| h * w)
        .expect("nonempty");
    let dim: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = vec![0.0f32; height * width * dim];
    let mut off = 0;
    for m in maps {
        for y in 0..height {
            let sy = y * m.height / height;
            for x in 0..width {
                let sx = x * m.width / width;
                let dst = &mut data[(y * width + x) * dim + off..][..m.channels];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = m.at(c, sy, sx);
                }
            }
        }
        off += m.channels;
    }
    Ok(Embedding {
        height,
        width,
        dim,
        data,
    })
}

/// `p x p` mean filter (stride 1) over each map; borders average only the
/// in-bounds neighbors.
pub fn local_average(m: &FeatureMap, p: usize) -> FeatureMap {
    if p <= 1 {
        return m.clone();
    }
    let r = (p / 2) as isize;
    let (h, w) = (m.height as isize, m.width as isize);
    let mut data = vec![0.0f32; m.data.len()];
    for c in 0..m.channels {
        let plane = &m.data[c * m.grid()..(c + 1) * m.grid()];
        let out = &mut data[c * m.grid()..(c + 1) * m.grid()];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                let mut n = 0u32;
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        sum += plane[(yy * w + xx) as usize];
                        n += 1;
                    }
                }
                out[(y * w + x) as usize] = sum / n as f32;
            }
        }
    }
    FeatureMap {
        data,
        ..m.clone()
    }
}

/// Per-channel spatial mean of each map, concatenated in tap order.
pub fn global_descriptor(maps: &[FeatureMap]) -> Result<Vec<f32>> {
    check_finite(maps)?;
    let mut out = Vec::with_capacity(maps.iter().map(|m| m.channels).sum());
    for m in maps {
        let g = m.grid();
        for plane in m.data.chunks_exact(g) {
            out.push((plane.iter().map(|&v| v as f64).sum::<f64>() / g as f64) as f32);
        }
    }
    Ok(out)
}

/// Squared Euclidean distance, accumulated in eight lanes so it
/// vectorizes. Identical inputs give exactly zero.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    (sq_dist(a, b) as f64).sqrt()
}

/// A full-resolution anomaly map, row-major.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn upsample_bilinear(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, gh);
    let xs = coords(w, gw);
    let mut out = Vec::with_capacity(h * w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bot = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Index into `[0, n)` with symmetric reflection that repeats the edge
/// sample (`d c b a | a b c d`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur truncated at 4 sigma. `sigma <= 0` is a no-op.
pub fn gaussian_smooth(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * data[y * w + mirror(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[mirror(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Grid distances to a full-resolution smoothed map.
pub fn to_score_map(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize, sigma: f64) -> ScoreMap {
    let up = upsample_bilinear(grid, gh, gw, h, w);
    let mut data = gaussian_smooth(&up, h, w, sigma);
    for v in &mut data {
        *v = v.max(0.0);
    }
    ScoreMap {
        width: w,
        height: h,
        data,
    }
}
