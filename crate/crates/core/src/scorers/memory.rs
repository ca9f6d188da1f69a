//! Memory-bank scorers: PatchCore (coreset of patch features) and SPADE
//! (two-stage nearest neighbors).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gaussian::check_grid;
use super::maps::{euclid, sq_dist, Embedding};
use crate::error::{Error, Result};

/// Number of points a coreset `ratio` keeps out of `n` (at least one).
pub fn coreset_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).ceil() as usize).clamp(1, n.max(1))
}

/// Greedy max-min selection over the rows of `points` (`n x dim`): start
/// at `start`, then repeatedly add the point farthest from everything
/// selected so far. Ties go to the lowest index.
pub fn kcenter_greedy(points: &[f32], dim: usize, count: usize, start: usize) -> Vec<usize> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if n == 0 || count == 0 {
        return Vec::new();
    }
    let count = count.min(n);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut selected = Vec::with_capacity(count);
    let mut min_d: Vec<f32> = (0..n).map(|i| sq_dist(row(i), row(start))).collect();
    min_d[start] = f32::NEG_INFINITY;
    selected.push(start);
    while selected.len() < count {
        let mut best = 0;
        let mut best_d = f32::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected.push(best);
        min_d[best] = f32::NEG_INFINITY;
        let c = row(best);
        for (i, m) in min_d.iter_mut().enumerate() {
            if *m > 0.0 {
                let d = sq_dist(row(i), c);
                if d < *m {
                    *m = d;
                }
            }
        }
    }
    selected
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Neighborhood size the features were averaged over before pooling.
    pub pool_size: usize,
    /// Indices of the kept vectors in the pre-subsampling pool (image-major,
    /// then position).
    pub coreset: Vec<usize>,
    /// `coreset.len() x dim`, row-major.
    pub vectors: Vec<f32>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.coreset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coreset.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Pools every position of every (already neighborhood-averaged)
/// embedding and keeps a greedy coreset of `ratio` of them.
pub fn patchcore_fit(embs: &[Embedding], pool_size: usize, ratio: f64, seed: u64) -> Result<MemoryBank> {
    if embs.is_empty() {
        return Err(Error::InsufficientNormals { needed: 1, got: 0 });
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Validation(format!("coreset ratio {ratio} outside (0, 1]")));
    }
    check_grid(embs)?;
    let first = &embs[0];
    let dim = first.dim;
    let pool: Vec<f32> = embs.iter().flat_map(|e| e.data.iter().copied()).collect();
    let n = pool.len() / dim;
    let count = coreset_count(n, ratio);
    let coreset = if count == n {
        (0..n).collect()
    } else {
        let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n);
        kcenter_greedy(&pool, dim, count, start)
    };
    let vectors = coreset
        .iter()
        .flat_map(|&i| pool[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    Ok(MemoryBank {
        height: first.height,
        width: first.width,
        dim,
        pool_size,
        coreset,
        vectors,
    })
}

/// Distance from each position to its nearest bank vector.
pub fn patchcore_distances(bank: &MemoryBank, emb: &Embedding) -> Result<Vec<f64>> {
    if emb.dim != bank.dim {
        return Err(Error::DimensionMismatch {
            expected: bank.dim,
            found: emb.dim,
        });
    }
    Ok((0..emb.positions())
        .map(|p| {
            let x = emb.at(p);
            let best = bank
                .vectors
                .chunks_exact(bank.dim)
                .map(|v| sq_dist(x, v))
                .fold(f32::INFINITY, f32::min);
            (best as f64).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpadeModel {
    pub k: usize,
    pub kappa: usize,
    pub radius: usize,
    pub descriptors: Vec<Vec<f32>>,
    pub embeddings: Vec<Embedding>,
}

pub fn spade_fit(
    descriptors: Vec<Vec<f32>>,
    embeddings: Vec<Embedding>,
    k: usize,
    kappa: usize,
    radius: usize,
) -> Result<SpadeModel> {
    if descriptors.len() < 2 {
        return Err(Error::InsufficientNormals {
            needed: 2,
            got: descriptors.len(),
        });
    }
    if descriptors.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: descriptors.len(),
            found: embeddings.len(),
        });
    }
    if k == 0 || kappa == 0 {
        return Err(Error::Validation("spade k and kappa must be >= 1".into()));
    }
    check_grid(&embeddings)?;
    if k > descriptors.len() {
        log::warn!("spade k = {k} clamped to {} normals", descriptors.len());
    }
    Ok(SpadeModel {
        k: k.min(descriptors.len()),
        kappa,
        radius,
        descriptors,
        embeddings,
    })
}

pub struct SpadeOutput {
    /// Indices of the retrieved normal images, nearest first.
    pub neighbors: Vec<usize>,
    pub image_score: f64,
    pub grid: Vec<f64>,
}

pub fn spade_evaluate(model: &SpadeModel, descriptor: &[f32], emb: &Embedding) -> Result<SpadeOutput> {
    let dd = model.descriptors[0].len();
    if descriptor.len() != dd {
        return Err(Error::DimensionMismatch {
            expected: dd,
            found: descriptor.len(),
        });
    }
    let e0 = &model.embeddings[0];
    if (emb.height, emb.width, emb.dim) != (e0.height, e0.width, e0.dim) {
        return Err(Error::DimensionMismatch {
            expected: e0.positions() * e0.dim,
            found: emb.positions() * emb.dim,
        });
    }
    let mut ranked: Vec<(f64, usize)> = model
        .descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| (euclid(descriptor, d), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(model.k);
    let image_score = ranked.iter().map(|r| r.0).sum::<f64>() / ranked.len() as f64;
    let neighbors: Vec<usize> = ranked.iter().map(|r| r.1).collect();

    let (h, w) = (emb.height as isize, emb.width as isize);
    let r = model.radius as isize;
    let mut nearest: Vec<f32> = Vec::new();
    let mut grid = Vec::with_capacity(emb.positions());
    for y in 0..h {
        for x in 0..w {
            let q = emb.at((y * w + x) as usize);
            nearest.clear();
            for &i in &neighbors {
                let e = &model.embeddings[i];
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        nearest.push(sq_dist(q, e.at((yy * w + xx) as usize)));
                    }
                }
            }
            let kappa = model.kappa.min(nearest.len());
            nearest.select_nth_unstable_by(kappa - 1, f32::total_cmp);
            let mut top = nearest[..kappa].to_vec();
            top.sort_by(f32::total_cmp);
            grid.push(top.iter().map(|&d| (d as f64).sqrt()).sum::<f64>() / kappa as f64);
        }
    }
    Ok(SpadeOutput {
        neighbors,
        image_score,
        grid,
    })
}
