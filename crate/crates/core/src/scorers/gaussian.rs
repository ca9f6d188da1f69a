//! Gaussian scorers: per-position statistics (PaDiM) and a single
//! image-level Gaussian over pooled descriptors (Mah.AD).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::maps::Embedding;
use crate::error::{Error, Result};

/// Lower Cholesky factor `L` of a covariance `Σ = L Lᵀ`, packed by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CovFactor {
    dim: usize,
    lower: Vec<f64>,
}

#[inline]
fn tri(i: usize) -> usize {
    i * (i + 1) / 2
}

impl CovFactor {
    /// Factorizes a row-major symmetric positive-definite matrix.
    pub fn from_covariance(cov: &[f64], dim: usize) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: cov.len(),
            });
        }
        let mut lower = vec![0.0; tri(dim)];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = cov[i * dim + j];
                for k in 0..j {
                    s -= lower[tri(i) + k] * lower[tri(j) + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Invalid("covariance is not positive definite".into()));
                    }
                    lower[tri(i) + i] = s.sqrt();
                } else {
                    lower[tri(i) + j] = s / lower[tri(j) + j];
                }
            }
        }
        Ok(Self { dim, lower })
    }

    pub fn from_packed(dim: usize, lower: Vec<f64>) -> Result<Self> {
        if lower.len() != tri(dim) {
            return Err(Error::DimensionMismatch {
                expected: tri(dim),
                found: lower.len(),
            });
        }
        Ok(Self { dim, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.lower
    }

    /// `L Lᵀ`, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..=j)
                    .map(|k| self.lower[tri(i) + k] * self.lower[tri(j) + k])
                    .sum();
                out[i * d + j] = s;
                out[j * d + i] = s;
            }
        }
        out
    }

    /// `|L⁻¹ v|²` by forward substitution.
    fn whitened_sq_norm(&self, v: &[f64]) -> f64 {
        let mut z = vec![0.0; self.dim];
        let mut total = 0.0;
        for i in 0..self.dim {
            let row = &self.lower[tri(i)..tri(i) + i + 1];
            let s: f64 = row[..i].iter().zip(&z[..i]).map(|(l, zk)| l * zk).sum();
            z[i] = (v[i] - s) / row[i];
            total += z[i] * z[i];
        }
        total
    }
}

/// `sqrt((x − μ)ᵀ Σ⁻¹ (x − μ))` with `Σ` given by its Cholesky factor.
pub fn mahalanobis(x: &[f64], mean: &[f64], factor: &CovFactor) -> Result<f64> {
    for len in [x.len(), mean.len()] {
        if len != factor.dim {
            return Err(Error::DimensionMismatch {
                expected: factor.dim,
                found: len,
            });
        }
    }
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    Ok(factor.whitened_sq_norm(&diff).sqrt())
}

/// Sample mean and unbiased covariance (+ `eps` on the diagonal) of the
/// rows of `samples` (`n x dim`, row-major).
pub fn mean_and_covariance(samples: &[f64], n: usize, dim: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let out = &mut cov[i * dim..i * dim + i + 1];
            for (o, cj) in out.iter_mut().zip(&centered[..=i]) {
                *o += ci * cj;
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[i * dim + j] / denom + if i == j { eps } else { 0.0 };
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    (mean, cov)
}

/// Sorted random subset of `d` channel indices out of `total` (all of
/// them when `d >= total`).
pub fn select_channels(total: usize, d: usize, seed: u64) -> Vec<usize> {
    if d >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, total, d).into_vec();
    idx.sort_unstable();
    idx
}

/// Per-position Gaussian over the selected channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub height: usize,
    pub width: usize,
    pub eps: f64,
    /// Indices into the embedding's channels.
    pub channels: Vec<usize>,
    /// Position-major means, `positions x channels.len()`.
    pub mean: Vec<f64>,
    pub factors: Vec<CovFactor>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn mean_at(&self, p: usize) -> &[f64] {
        let d = self.dim();
        &self.mean[p * d..(p + 1) * d]
    }

    pub fn covariance_at(&self, p: usize) -> Vec<f64> {
        self.factors[p].covariance()
    }
}

pub(crate) fn check_grid(embs: &[Embedding]) -> Result<()> {
    let first = &embs[0];
    for e in embs {
        if (e.height, e.width) != (first.height, first.width) {
            return Err(Error::DimensionMismatch {
                expected: first.positions(),
                found: e.positions(),
            });
        }
        if e.dim != first.dim {
            return Err(Error::DimensionMismatch {
                expected: first.dim,
                found: e.dim,
            });
        }
    }
    Ok(())
}

pub fn padim_fit(embs: &[Embedding], channels: usize, eps: f64, seed: u64) -> Result<GaussianStats> {
    if embs.len() < 2 {
        return Err(Error::InsufficientNormals {
            needed: 2,
            got: embs.len(),
        });
    }
    check_grid(embs)?;
    let first = &embs[0];
    let sel = select_channels(first.dim, channels, seed);
    let d = sel.len();
    if embs.len() < d + 1 {
        log::warn!(
            "fitting {d}-dim Gaussians from {} normals; covariance relies on the regularizer",
            embs.len()
        );
    }
    let n = embs.len();
    let positions = first.positions();
    let mut mean = Vec::with_capacity(positions * d);
    let mut factors = Vec::with_capacity(positions);
    let mut samples = vec![0.0; n * d];
    for p in 0..positions {
        for (row, e) in samples.chunks_exact_mut(d).zip(embs) {
            let v = e.at(p);
            for (r, &c) in row.iter_mut().zip(&sel) {
                *r = v[c] as f64;
            }
        }
        let (m, cov) = mean_and_covariance(&samples, n, d, eps);
        mean.extend(m);
        factors.push(CovFactor::from_covariance(&cov, d)?);
    }
    Ok(GaussianStats {
        height: first.height,
        width: first.width,
        eps,
        channels: sel,
        mean,
        factors,
    })
}

/// Mahalanobis distance at every grid position.
pub fn padim_distances(stats: &GaussianStats, emb: &Embedding) -> Result<Vec<f64>> {
    if (emb.height, emb.width) != (stats.height, stats.width) {
        return Err(Error::DimensionMismatch {
            expected: stats.height * stats.width,
            found: emb.positions(),
        });
    }
    if let Some(&max) = stats.channels.last() {
        if max >= emb.dim {
            return Err(Error::DimensionMismatch {
                expected: max + 1,
                found: emb.dim,
            });
        }
    }
    let mut x = vec![0.0; stats.dim()];
    (0..emb.positions())
        .map(|p| {
            let v = emb.at(p);
            for (xi, &c) in x.iter_mut().zip(&stats.channels) {
                *xi = v[c] as f64;
            }
            mahalanobis(&x, stats.mean_at(p), &stats.factors[p])
        })
        .collect()
}

/// One Gaussian over image-level descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct MahadStats {
    pub eps: f64,
    pub mean: Vec<f64>,
    pub factor: CovFactor,
}

pub fn mahad_fit(descriptors: &[Vec<f32>], eps: f64) -> Result<MahadStats> {
    if descriptors.len() < 2 {
        return Err(Error::InsufficientNormals {
            needed: 2,
            got: descriptors.len(),
        });
    }
    let dim = descriptors[0].len();
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let samples: Vec<f64> = descriptors.iter().flatten().map(|&v| v as f64).collect();
    let (mean, cov) = mean_and_covariance(&samples, descriptors.len(), dim, eps);
    Ok(MahadStats {
        eps,
        mean,
        factor: CovFactor::from_covariance(&cov, dim)?,
    })
}

pub fn mahad_distance(stats: &MahadStats, descriptor: &[f32]) -> Result<f64> {
    let x: Vec<f64> = descriptor.iter().map(|&v| v as f64).collect();
    mahalanobis(&x, &stats.mean, &stats.factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_cases() {
        let f = CovFactor::from_covariance(&[2.0, 0.0, 0.0, 0.5], 2).unwrap();
        let d = mahalanobis(&[1.0, 1.0], &[0.0, 0.0], &f).unwrap();
        assert_abs_diff_eq!(d, 2.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(mahalanobis(&[3.0, -1.0], &[3.0, -1.0], &f).unwrap(), 0.0);
        let id = CovFactor::from_covariance(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
        let d = mahalanobis(&[1.0, 2.0, 2.0], &[0.0; 3], &id).unwrap();
        assert_abs_diff_eq!(d, 3.0, epsilon = 1e-12);
        assert!(matches!(
            mahalanobis(&[1.0], &[0.0, 0.0], &f),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn correlated_case_matches_explicit_inverse() {
        // Σ = [[4, 2], [2, 3]], Σ⁻¹ = [[3, -2], [-2, 4]] / 8.
        let f = CovFactor::from_covariance(&[4.0, 2.0, 2.0, 3.0], 2).unwrap();
        let (a, b) = (1.0, -2.0);
        let want = ((3.0 * a * a - 4.0 * a * b + 4.0 * b * b) / 8.0f64).sqrt();
        assert_abs_diff_eq!(mahalanobis(&[a, b], &[0.0, 0.0], &f).unwrap(), want, epsilon = 1e-12);
        let back = f.covariance();
        for (x, y) in back.iter().zip([4.0, 2.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        assert!(CovFactor::from_covariance(&[1.0, 2.0, 2.0, 1.0], 2).is_err());
    }

    fn emb(vals: &[f32], dim: usize) -> Embedding {
        Embedding {
            height: 1,
            width: vals.len() / dim,
            dim,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn padim_two_image_hand_case() {
        // Samples (1, 2) and (3, 6): mean (2, 4); unbiased cov [[2, 4], [4, 8]].
        let e = [emb(&[1.0, 2.0], 2), emb(&[3.0, 6.0], 2)];
        let s = padim_fit(&e, 100, 0.01, 0).unwrap();
        assert_eq!(s.channels, vec![0, 1]);
        assert_eq!(s.mean_at(0), &[2.0, 4.0]);
        let cov = s.covariance_at(0);
        for (x, y) in cov.iter().zip([2.01, 4.0, 4.0, 8.01]) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-10);
        }
        let d = padim_distances(&s, &emb(&[2.5, 4.0], 2)).unwrap();
        let direct = mahalanobis(&[2.5, 4.0], &[2.0, 4.0], &s.factors[0]).unwrap();
        assert_eq!(d, vec![direct]);
    }

    #[test]
    fn identical_normals_give_eps_identity() {
        let v = [0.3f32, -1.7, 2.25, 0.0, 5.5, 1.0];
        let e = vec![emb(&v, 3); 4];
        let s = padim_fit(&e, 100, 0.01, 7).unwrap();
        for p in 0..2 {
            let cov = s.covariance_at(p);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 0.01 } else { 0.0 };
                    assert_abs_diff_eq!(cov[i * 3 + j], want, epsilon = 1e-15);
                }
            }
        }
        assert_eq!(padim_distances(&s, &e[0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn channel_subset_reproducible() {
        let a = select_channels(160, 100, 3);
        assert_eq!(a, select_channels(160, 100, 3));
        assert_ne!(a, select_channels(160, 100, 4));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_channels(10, 100, 0), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn mahad_three_sample_hand_case() {
        // Samples (0,0), (2,0), (1,3): mean (1,1), cov [[1, 0], [0, 3]] + eps.
        let d = vec![vec![0.0f32, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let s = mahad_fit(&d, 0.0).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        let got = mahad_distance(&s, &[2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(got, (1.0f64 + 9.0 / 3.0).sqrt(), epsilon = 1e-12);
        assert_eq!(mahad_distance(&s, &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            mahad_fit(&d[..1], 0.01),
            Err(Error::InsufficientNormals { .. })
        ));
    }
}
