//! Planar projective geometry: the 4-corner homography parameterization,
//! exact four-point DLT, and inverse-mapped image warping.
//!
//! Conventions used throughout the crate:
//!
//! * Integer coordinates address pixel centers. A `w x h` frame spans
//!   `[0, w-1] x [0, h-1]` and its corners are `(0,0)`, `(w-1,0)`,
//!   `(w-1,h-1)`, `(0,h-1)`.
//! * Corners are always ordered top-left, top-right, bottom-right,
//!   bottom-left.
//! * `x` grows to the right and `y` grows downwards, so a positive rotation
//!   angle turns the image clockwise on screen.

use std::fmt;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::Image;

pub type Point = [f64; 2];

const H33_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

/// A 3x3 projective transform normalized so that `h[2][2] == 1`.
#[derive(Clone, Copy, PartialEq)]
pub struct HomographyMatrix(Matrix3<f64>);

impl HomographyMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Normalizes `m` by its bottom-right entry.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if !h33.is_finite() || h33.abs() < H33_EPS {
            return Err(Error::DegenerateCorrespondence(format!(
                "h33 = {h33:e} cannot be normalized"
            )));
        }
        let m = m / h33;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCorrespondence("non-finite entries".into()));
        }
        if m.determinant().abs() < 1e-300 {
            return Err(Error::DegenerateCorrespondence("singular matrix".into()));
        }
        Ok(Self(m))
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn apply_point(&self, p: Point) -> Result<Point> {
        let m = &self.0;
        let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
        if w.abs() <= W_EPS || !w.is_finite() {
            return Err(Error::PointAtInfinity { w });
        }
        let x = m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)];
        let y = m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)];
        Ok([x / w, y / w])
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &HomographyMatrix) -> f64 {
        (self.0 - other.0).amax()
    }

    pub fn is_affine(&self, tol: f64) -> bool {
        self.0[(2, 0)].abs() <= tol && self.0[(2, 1)].abs() <= tol
    }
}

impl fmt::Debug for HomographyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HomographyMatrix({:?})", self.to_row_major())
    }
}

impl Serialize for HomographyMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for HomographyMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        HomographyMatrix::from_row_major(v).map_err(serde::de::Error::custom)
    }
}

/// Displacements of the four frame corners in canonical (TL, TR, BR, BL)
/// order, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CornerDisplacement(pub [Point; 4]);

impl CornerDisplacement {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn uniform(dx: f64, dy: f64) -> Self {
        Self([[dx, dy]; 4])
    }

    pub fn from_flat(v: [f64; 8]) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("corner displacement must be finite".into()));
        }
        Ok(Self([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]]))
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let d = &self.0;
        [
            d[0][0], d[0][1], d[1][0], d[1][1], d[2][0], d[2][1], d[3][0], d[3][1],
        ]
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &CornerDisplacement) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Every component finite and no larger than the frame's longer side.
    pub fn is_valid_for(&self, frame: &ImageFrame) -> bool {
        let side = frame.width.max(frame.height) as f64;
        self.to_flat().iter().all(|v| v.is_finite() && v.abs() <= side)
    }
}

impl Serialize for CornerDisplacement {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CornerDisplacement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 8]>::deserialize(d)?;
        CornerDisplacement::from_flat(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
}

impl ImageFrame {
    pub const MIN_SIDE: usize = 8;

    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::Invalid(format!(
                "frame {width}x{height} is smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        Ok(Self { width, height })
    }

    pub fn of(img: &Image) -> Result<Self> {
        Self::new(img.width(), img.height())
    }

    pub fn corners(&self) -> [Point; 4] {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
    }

    pub fn center(&self) -> Point {
        [
            (self.width - 1) as f64 / 2.0,
            (self.height - 1) as f64 / 2.0,
        ]
    }

    pub fn min_side(&self) -> usize {
        self.width.min(self.height)
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (self.width - 1) as f64
            && p[1] <= (self.height - 1) as f64
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn has_collinear_triple(pts: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|&[i, j, k]| {
        let scale = dist(pts[i], pts[j]) * dist(pts[i], pts[k]);
        scale == 0.0 || cross(pts[i], pts[j], pts[k]).abs() <= 1e-10 * scale
    })
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to sqrt(2).
fn conditioning(pts: &[Point; 4]) -> Matrix3<f64> {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Solves the exactly determined 8x8 system mapping four `src` points onto
/// four `dst` points, with `h33` fixed to 1. Both point sets are
/// pre-conditioned (centroid at the origin, mean radius sqrt 2) so the
/// solve is well scaled for pixel coordinates.
pub fn dlt_solve(src: &[Point; 4], dst: &[Point; 4]) -> Result<HomographyMatrix> {
    if src.iter().chain(dst).flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCorrespondence("non-finite point".into()));
    }
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(Error::DegenerateCorrespondence(
            "three of the four points are collinear".into(),
        ));
    }
    let ts = conditioning(src);
    let td = conditioning(dst);
    let s: Vec<Point> = src.iter().map(|&p| transform(&ts, p)).collect();
    let d: Vec<Point> = dst.iter().map(|&p| transform(&td, p)).collect();

    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let ([x, y], [u, v]) = (s[k], d[k]);
        let r = 2 * k;
        a.set_row(
            r,
            &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[
                x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y,
            ]),
        );
        a.set_row(
            r + 1,
            &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[
                0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y,
            ]),
        );
        b[r] = u;
        b[r + 1] = v;
    }

    let sv = a.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::DegenerateCorrespondence(format!(
            "system condition number {cond:e} exceeds {MAX_CONDITION:e}"
        )));
    }
    let lu = a.lu();
    let mut h = lu
        .solve(&b)
        .ok_or_else(|| Error::DegenerateCorrespondence("singular system".into()))?;
    // One step of iterative refinement recovers the last few bits lost to
    // elimination.
    let residual = b - a * h;
    if let Some(dh) = lu.solve(&residual) {
        h += dh;
    }
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCorrespondence("conditioning not invertible".into()))?;
    HomographyMatrix::new(td_inv * hn * ts)
}

pub fn apply_homography(h: &HomographyMatrix, pts: &[Point]) -> Result<Vec<Point>> {
    pts.iter().map(|&p| h.apply_point(p)).collect()
}

pub fn displacement_to_homography(
    d: &CornerDisplacement,
    frame: &ImageFrame,
) -> Result<HomographyMatrix> {
    let src = frame.corners();
    let mut dst = src;
    for (p, delta) in dst.iter_mut().zip(d.0.iter()) {
        p[0] += delta[0];
        p[1] += delta[1];
    }
    dlt_solve(&src, &dst)
}

pub fn homography_to_displacement(
    h: &HomographyMatrix,
    frame: &ImageFrame,
) -> Result<CornerDisplacement> {
    let corners = frame.corners();
    let mut out = [[0.0; 2]; 4];
    for (o, c) in out.iter_mut().zip(corners) {
        let p = h.apply_point(c)?;
        *o = [p[0] - c[0], p[1] - c[1]];
    }
    Ok(CornerDisplacement(out))
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_degrees(angle: f64) -> f64 {
    let a = (angle + 180.0).rem_euclid(360.0) - 180.0;
    if a == -180.0 {
        180.0
    } else {
        a
    }
}

/// Corner displacement produced by rotating the frame about its center.
/// Angles outside `(-180, 180]` are wrapped into that range first.
pub fn rotation_to_displacement(angle_deg: f64, frame: &ImageFrame) -> CornerDisplacement {
    let a = wrap_degrees(angle_deg).to_radians();
    let (sin, cos) = a.sin_cos();
    let c = frame.center();
    let mut out = [[0.0; 2]; 4];
    for (o, p) in out.iter_mut().zip(frame.corners()) {
        let (vx, vy) = (p[0] - c[0], p[1] - c[1]);
        let (rx, ry) = (cos * vx - sin * vy, sin * vx + cos * vy);
        *o = [rx - vx, ry - vy];
    }
    CornerDisplacement(out)
}

/// Rotation by `angle_deg` and isotropic scale about the frame center,
/// followed by a translation of `(tx, ty)` pixels.
pub fn similarity_about_center(
    angle_deg: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    frame: &ImageFrame,
) -> HomographyMatrix {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let [cx, cy] = frame.center();
    let (a, b) = (scale * cos, -scale * sin);
    let (c, d) = (scale * sin, scale * cos);
    HomographyMatrix(Matrix3::new(
        a,
        b,
        cx - a * cx - b * cy + tx,
        c,
        d,
        cy - c * cx - d * cy + ty,
        0.0,
        0.0,
        1.0,
    ))
}

/// Least-squares rotation angle (degrees) about the frame center that best
/// explains a corner displacement.
pub fn fit_rotation_angle(d: &CornerDisplacement, frame: &ImageFrame) -> f64 {
    let c = frame.center();
    let (mut sin_acc, mut cos_acc) = (0.0, 0.0);
    for (p, delta) in frame.corners().iter().zip(d.0.iter()) {
        let v = [p[0] - c[0], p[1] - c[1]];
        let u = [v[0] + delta[0], v[1] + delta[1]];
        sin_acc += v[0] * u[1] - v[1] * u[0];
        cos_acc += v[0] * u[0] + v[1] * u[1];
    }
    sin_acc.atan2(cos_acc).to_degrees()
}

/// `h1 ∘ h2`: applies `h2` first, then `h1`.
pub fn compose(h1: &HomographyMatrix, h2: &HomographyMatrix) -> Result<HomographyMatrix> {
    HomographyMatrix::new(h1.0 * h2.0)
}

pub fn invert(h: &HomographyMatrix) -> Result<HomographyMatrix> {
    let inv = h
        .0
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCorrespondence("matrix not invertible".into()))?;
    HomographyMatrix::new(inv)
}

/// How samples that fall outside the source image are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum FillMode {
    /// Mirror across the border without repeating the edge pixel.
    Reflection,
    Constant(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Bilinear,
    Nearest,
}

/// Reflects a continuous coordinate into `[0, n-1]` (edge pixel not
/// repeated: -1 maps to 1, n maps to n-2).
#[inline]
pub fn reflect_coord(x: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    if (0.0..=last).contains(&x) {
        return x;
    }
    let period = 2.0 * last;
    let m = x.rem_euclid(period);
    if m > last {
        period - m
    } else {
        m
    }
}

/// Inverse-mapped warp: output pixel `p` samples `img` at `H^-1 p`.
pub fn warp_image(img: &Image, h: &HomographyMatrix, fill: FillMode) -> Result<Image> {
    warp_with(img, h, fill, Sampling::Bilinear)
}

/// Nearest-neighbor warp for label masks, so values stay in the input set.
pub fn warp_mask(mask: &Image, h: &HomographyMatrix, fill: FillMode) -> Result<Image> {
    warp_with(mask, h, fill, Sampling::Nearest)
}

pub fn warp_with(
    img: &Image,
    h: &HomographyMatrix,
    fill: FillMode,
    sampling: Sampling,
) -> Result<Image> {
    if img.is_empty() {
        return Err(Error::Invalid("cannot warp an empty image".into()));
    }
    let inv = invert(h)?;
    let (w, ht, ch) = (img.width(), img.height(), img.channels());
    let mut out = Image::new(w, ht, ch);
    let fill_value = match fill {
        FillMode::Constant(c) => c,
        FillMode::Reflection => 0.0,
    };
    let (wl, hl) = ((w - 1) as f64, (ht - 1) as f64);
    for y in 0..ht {
        for x in 0..w {
            let dst = out.pixel_mut(x, y);
            let Ok([mut sx, mut sy]) = inv.apply_point([x as f64, y as f64]) else {
                dst.fill(fill_value);
                continue;
            };
            match fill {
                FillMode::Reflection => {
                    sx = reflect_coord(sx, w);
                    sy = reflect_coord(sy, ht);
                }
                FillMode::Constant(c) => {
                    if !(0.0..=wl).contains(&sx) || !(0.0..=hl).contains(&sy) {
                        dst.fill(c);
                        continue;
                    }
                }
            }
            match sampling {
                Sampling::Nearest => {
                    let nx = (sx.round() as usize).min(w - 1);
                    let ny = (sy.round() as usize).min(ht - 1);
                    dst.copy_from_slice(img.pixel(nx, ny));
                }
                Sampling::Bilinear => bilinear_into(img, sx, sy, dst),
            }
        }
    }
    Ok(out)
}

/// Bilinear sample at an in-bounds continuous position. Integer positions
/// return the stored pixel exactly.
#[inline]
fn bilinear_into(img: &Image, sx: f64, sy: f64, dst: &mut [f32]) {
    let (w, h) = (img.width(), img.height());
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    let fx = (sx - x0 as f64) as f32;
    let fy = (sy - y0 as f64) as f32;
    if fx == 0.0 && fy == 0.0 {
        dst.copy_from_slice(img.pixel(x0, y0));
        return;
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (p00, p10) = (img.pixel(x0, y0), img.pixel(x1, y0));
    let (p01, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
    for c in 0..dst.len() {
        let top = p00[c] + (p10[c] - p00[c]) * fx;
        let bottom = p01[c] + (p11[c] - p01[c]) * fx;
        dst[c] = top + (bottom - top) * fy;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(w: usize, h: usize) -> ImageFrame {
        ImageFrame::new(w, h).unwrap()
    }

    fn random_inward(rng: &mut ChaCha8Rng, f: &ImageFrame, frac: f64) -> CornerDisplacement {
        let rho = frac * f.min_side() as f64;
        let signs = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let mut d = [[0.0; 2]; 4];
        for (o, s) in d.iter_mut().zip(signs) {
            *o = [s[0] * rng.gen_range(0.0..rho), s[1] * rng.gen_range(0.0..rho)];
        }
        CornerDisplacement(d)
    }

    #[test]
    fn dlt_identity_and_translation() {
        let f = frame(128, 96);
        let c = f.corners();
        let h = dlt_solve(&c, &c).unwrap();
        assert!(h.max_abs_diff(&HomographyMatrix::identity()) < 1e-12);

        let dst = c.map(|p| [p[0] + 10.0, p[1] + 5.0]);
        let h = dlt_solve(&c, &dst).unwrap();
        assert!(h.max_abs_diff(&HomographyMatrix::translation(10.0, 5.0)) < 1e-10);
    }

    #[test]
    fn dlt_rejects_collinear() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        let dst = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(matches!(
            dlt_solve(&src, &dst),
            Err(Error::DegenerateCorrespondence(_))
        ));
        assert!(matches!(
            dlt_solve(&dst, &src),
            Err(Error::DegenerateCorrespondence(_))
        ));
        let dup = [[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(dlt_solve(&dup, &dst).is_err());
    }

    #[test]
    fn dlt_roundtrip_random_quads() {
        let f = frame(128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = random_inward(&mut rng, &f, 0.25);
            let src = f.corners();
            let dst: [Point; 4] = std::array::from_fn(|i| {
                [src[i][0] + d.0[i][0], src[i][1] + d.0[i][1]]
            });
            let h = dlt_solve(&src, &dst).unwrap();
            let mapped = apply_homography(&h, &src).unwrap();
            for (m, t) in mapped.iter().zip(dst) {
                assert!(dist(*m, t) < 1e-9, "{m:?} vs {t:?}");
            }
        }
    }

    #[test]
    fn apply_identity_translation_and_infinity() {
        let pts = vec![[0.0, 0.0], [3.5, -2.0]];
        assert_eq!(
            apply_homography(&HomographyMatrix::identity(), &pts).unwrap(),
            pts
        );
        let t = HomographyMatrix::translation(10.0, 5.0);
        assert_eq!(t.apply_point([0.0, 0.0]).unwrap(), [10.0, 5.0]);

        let h = HomographyMatrix::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
            .unwrap();
        assert!(matches!(
            h.apply_point([-1.0, 3.0]),
            Err(Error::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn displacement_conversions() {
        let f = frame(64, 64);
        let h = displacement_to_homography(&CornerDisplacement::zeros(), &f).unwrap();
        assert!(h.max_abs_diff(&HomographyMatrix::identity()) < 1e-12);
        let h = displacement_to_homography(&CornerDisplacement::uniform(3.0, 3.0), &f).unwrap();
        assert!(h.max_abs_diff(&HomographyMatrix::translation(3.0, 3.0)) < 1e-10);

        let d = homography_to_displacement(&HomographyMatrix::identity(), &f).unwrap();
        assert_eq!(d, CornerDisplacement::zeros());
        let d = homography_to_displacement(&HomographyMatrix::translation(10.0, 5.0), &f).unwrap();
        assert_eq!(d, CornerDisplacement::uniform(10.0, 5.0));
    }

    #[test]
    fn rotation_cases() {
        let f = frame(100, 100);
        assert_eq!(rotation_to_displacement(0.0, &f), CornerDisplacement::zeros());
        let d = rotation_to_displacement(180.0, &f);
        assert!((d.0[0][0] - 99.0).abs() < 1e-9 && (d.0[0][1] - 99.0).abs() < 1e-9);
        assert!((d.0[2][0] + 99.0).abs() < 1e-9 && (d.0[2][1] + 99.0).abs() < 1e-9);

        // Hand-built 90 degree rotation about (49.5, 49.5): (x, y) -> (c + c - y, c - c + x)
        let d = rotation_to_displacement(90.0, &f);
        let c = 49.5;
        for (p, delta) in f.corners().iter().zip(d.0) {
            let expected = [c - (p[1] - c), c + (p[0] - c)];
            assert!((p[0] + delta[0] - expected[0]).abs() < 1e-9);
            assert!((p[1] + delta[1] - expected[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_degrees_domain() {
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(30.0), 30.0);
    }

    #[test]
    fn fit_rotation_recovers_angle() {
        let f = frame(128, 128);
        for a in [-40.0, -5.0, 0.0, 12.5, 33.0] {
            let d = rotation_to_displacement(a, &f);
            assert!((fit_rotation_angle(&d, &f) - a).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_invert() {
        let h = HomographyMatrix::from_row_major([1.1, 0.05, 3.0, -0.02, 0.95, -4.0, 1e-4, -2e-4, 1.0])
            .unwrap();
        assert_eq!(compose(&HomographyMatrix::identity(), &h).unwrap(), h);
        let inv = invert(&HomographyMatrix::translation(10.0, 5.0)).unwrap();
        assert!(inv.max_abs_diff(&HomographyMatrix::translation(-10.0, -5.0)) < 1e-15);
        let id = compose(&h, &invert(&h).unwrap()).unwrap();
        assert!(id.max_abs_diff(&HomographyMatrix::identity()) < 1e-9);
    }

    #[test]
    fn serde_shapes() {
        let h = HomographyMatrix::translation(10.0, 5.0);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[1.0,0.0,10.0,0.0,1.0,5.0,0.0,0.0,1.0]");
        let d = CornerDisplacement::from_flat([1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0,5.0,6.0,7.0,8.0]");
        let back: CornerDisplacement = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<HomographyMatrix>("[0,0,0,0,0,0,0,0,0]").is_err());
    }

    #[test]
    fn reflect_without_edge_repeat() {
        assert_eq!(reflect_coord(-1.0, 5), 1.0);
        assert_eq!(reflect_coord(5.0, 5), 3.0);
        assert_eq!(reflect_coord(-0.5, 5), 0.5);
        assert_eq!(reflect_coord(9.0, 5), 1.0);
        assert_eq!(reflect_coord(2.25, 5), 2.25);
    }

    #[test]
    fn warp_identity_exact_and_constant_preserved() {
        let mut img = Image::new(16, 12, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 251) as f32 + 0.25;
        }
        let out = warp_image(&img, &HomographyMatrix::identity(), FillMode::Reflection).unwrap();
        assert_eq!(out, img);

        let flat = Image::filled(16, 12, 3, 77.0);
        let h = similarity_about_center(23.0, 1.2, 3.0, -2.0, &frame(16, 12));
        let out = warp_image(&flat, &h, FillMode::Reflection).unwrap();
        assert!(out.data().iter().all(|&v| (v - 77.0).abs() < 1e-4));
    }

    #[test]
    fn warp_translation_moves_content() {
        let mut img = Image::new(10, 10, 1);
        img.set(2, 3, 0, 200.0);
        let out = warp_image(&img, &HomographyMatrix::translation(4.0, 1.0), FillMode::Constant(0.0))
            .unwrap();
        assert_eq!(out.get(6, 4, 0), 200.0);
        assert_eq!(out.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn warp_mask_stays_binary() {
        let mut m = Image::new(20, 20, 1);
        for y in 5..12 {
            for x in 4..9 {
                m.set(x, y, 0, 255.0);
            }
        }
        let h = similarity_about_center(17.0, 1.1, 1.3, 0.4, &frame(20, 20));
        let out = warp_mask(&m, &h, FillMode::Reflection).unwrap();
        assert!(crate::raster::mask_is_binary(&out));
    }
}
