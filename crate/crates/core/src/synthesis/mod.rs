//! Dataset variants and training-time image perturbations.

mod toy;

pub use toy::{
    generate_toy_dataset, render_toy_sample, ToyClassSpec, ToyDatasetSpec, ToyDefect, ToyKind,
};

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignerMode, AlignerModel};
use crate::dataset::{AlignmentTag, DatasetManifest, ImageRecord, TransformRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    homography_to_displacement, similarity_about_center, warp_image, warp_mask, CornerDisplacement, FillMode,
    HomographyMatrix, ImageFrame,
};
use crate::raster::Image;

/// Uniform in `[-m, m]`; exactly zero when `m == 0`.
fn symmetric<R: Rng>(rng: &mut R, m: f64) -> f64 {
    if m == 0.0 {
        0.0
    } else {
        rng.gen_range(-m..=m)
    }
}

/// Random corner displacement pointing into the frame.
///
/// Each component has magnitude uniform in `(0, rho]`, with the sign that
/// moves its corner inwards (TL: `+x,+y`; TR: `-x,+y`; BR: `-x,-y`;
/// BL: `+x,-y`).
pub fn sample_inward_perturbation<R: Rng>(
    rng: &mut R,
    rho: f64,
    frame: &ImageFrame,
) -> Result<CornerDisplacement> {
    let max_rho = frame.min_side() as f64 / 4.0;
    if !(rho > 0.0 && rho <= max_rho) {
        return Err(Error::Invalid(format!(
            "rho must lie in (0, {max_rho}], got {rho}"
        )));
    }
    const SIGNS: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    loop {
        let mut d = [[0.0; 2]; 4];
        for (o, s) in d.iter_mut().zip(SIGNS) {
            let mx = rho - rng.gen_range(0.0..rho);
            let my = rho - rng.gen_range(0.0..rho);
            *o = [s[0] * mx, s[1] * my];
        }
        let d = CornerDisplacement(d);
        if is_convex_quad(&frame.corners(), &d) {
            return Ok(d);
        }
    }
}

fn is_convex_quad(corners: &[[f64; 2]; 4], d: &CornerDisplacement) -> bool {
    let p: Vec<[f64; 2]> = corners
        .iter()
        .zip(d.0.iter())
        .map(|(c, v)| [c[0] + v[0], c[1] + v[1]])
        .collect();
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b, c) = (p[i], p[(i + 1) % 4], p[(i + 2) % 4]);
        let z = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if z == 0.0 || (sign != 0.0 && z.signum() != sign) {
            return false;
        }
        sign = z.signum();
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignmentParams {
    /// Degrees.
    pub max_rotation: f64,
    /// Fraction of the frame side.
    pub max_translation: f64,
    /// Fractional deviation from unit scale.
    pub max_scale_delta: f64,
    /// Fraction of the side left free on each border of the centered
    /// square assumed to contain the foreground.
    pub foreground_margin: f64,
}

impl Default for MisalignmentParams {
    fn default() -> Self {
        Self {
            max_rotation: 30.0,
            max_translation: 0.06,
            max_scale_delta: 0.08,
            foreground_margin: 0.2,
        }
    }
}

impl MisalignmentParams {
    pub fn zero() -> Self {
        Self {
            max_rotation: 0.0,
            max_translation: 0.0,
            max_scale_delta: 0.0,
            foreground_margin: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.max_rotation,
            self.max_translation,
            self.max_scale_delta,
            self.foreground_margin,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "misalignment parameters must be finite and nonnegative".into(),
            ));
        }
        if self.foreground_margin >= 0.5 || self.max_scale_delta >= 1.0 {
            return Err(Error::Validation(
                "foreground_margin must be < 0.5 and max_scale_delta < 1".into(),
            ));
        }
        Ok(())
    }

    /// Corners of the centered square assumed to hold the foreground.
    pub fn foreground_box(&self, frame: &ImageFrame) -> [[f64; 2]; 4] {
        let half = (1.0 - 2.0 * self.foreground_margin) * (frame.min_side() - 1) as f64 / 2.0;
        let [cx, cy] = frame.center();
        [
            [cx - half, cy - half],
            [cx + half, cy - half],
            [cx + half, cy + half],
            [cx - half, cy + half],
        ]
    }
}

const MAX_REJECTIONS: usize = 1000;

/// Translation ∘ rotation ∘ isotropic scale (both about the frame center),
/// resampled until the foreground box stays inside the frame.
pub fn sample_misalignment<R: Rng>(
    rng: &mut R,
    params: &MisalignmentParams,
    frame: &ImageFrame,
) -> Result<HomographyMatrix> {
    params.validate()?;
    let side = frame.min_side() as f64;
    let fg = params.foreground_box(frame);
    for _ in 0..MAX_REJECTIONS {
        let angle = symmetric(rng, params.max_rotation);
        let scale = 1.0 + symmetric(rng, params.max_scale_delta);
        let tx = symmetric(rng, params.max_translation) * side;
        let ty = symmetric(rng, params.max_translation) * side;
        let h = similarity_about_center(angle, scale, tx, ty, frame);
        let inside = fg
            .iter()
            .all(|&p| h.apply_point(p).map(|q| frame.contains(q)).unwrap_or(false));
        if inside {
            return Ok(h);
        }
    }
    Err(Error::InfeasibleParams(MAX_REJECTIONS))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationCategory {
    None,
    Color,
    Shape,
    #[serde(rename = "shape+color")]
    ShapeColor,
}

impl AugmentationCategory {
    pub const STUDY: [AugmentationCategory; 3] = [
        AugmentationCategory::ShapeColor,
        AugmentationCategory::Shape,
        AugmentationCategory::Color,
    ];

    pub fn uses_color(&self) -> bool {
        matches!(self, Self::Color | Self::ShapeColor)
    }

    pub fn uses_shape(&self) -> bool {
        matches!(self, Self::Shape | Self::ShapeColor)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Color => "color",
            Self::Shape => "shape",
            Self::ShapeColor => "shape+color",
        }
    }
}

/// Hue/brightness ("color") and pepper/salt ("shape") augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub category: AugmentationCategory,
    /// Maximum hue rotation as a fraction of the hue circle.
    pub hue_shift: f64,
    /// Maximum multiplicative brightness deviation.
    pub brightness: f64,
    /// Fraction of pixels set to the minimum.
    pub pepper_rate: f64,
    /// Fraction of pixels set to the maximum.
    pub salt_rate: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            category: AugmentationCategory::ShapeColor,
            hue_shift: 0.1,
            brightness: 0.2,
            pepper_rate: 0.02,
            salt_rate: 0.02,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            category: AugmentationCategory::None,
            ..Self::default()
        }
    }

    pub fn with_category(category: AugmentationCategory) -> Self {
        Self {
            category,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pepper_rate", self.pepper_rate), ("salt_rate", self.salt_rate)] {
            if !(0.0..=0.2).contains(&v) {
                return Err(Error::Validation(format!("{name} {v} outside [0, 0.2]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue_shift) {
            return Err(Error::Validation("hue_shift outside [0, 0.5]".into()));
        }
        if !(0.0..1.0).contains(&self.brightness) {
            return Err(Error::Validation("brightness outside [0, 1)".into()));
        }
        Ok(())
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Rotates the hue of every pixel by `fraction` of the hue circle.
pub fn shift_hue(img: &Image, fraction: f64) -> Image {
    let mut out = img.clone();
    if img.channels() != 3 {
        return out;
    }
    for px in out.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
        let (r, g, b) = hsv_to_rgb(h + fraction as f32, s, v);
        px[0] = r * 255.0;
        px[1] = g * 255.0;
        px[2] = b * 255.0;
    }
    out
}

pub fn scale_brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * factor as f32).clamp(0.0, 255.0);
    }
    out
}

/// Sets `round(pepper·N)` pixels to 0 and `round(salt·N)` other pixels to
/// 255, sampling pixels without replacement.
pub fn pepper_and_salt<R: Rng>(img: &Image, pepper: f64, salt: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    let n = img.width() * img.height();
    let n_pepper = (pepper * n as f64).round() as usize;
    let n_salt = (salt * n as f64).round() as usize;
    let total = (n_pepper + n_salt).min(n);
    if total == 0 {
        return out;
    }
    let picks = index::sample(rng, n, total);
    let ch = img.channels();
    for (k, p) in picks.into_iter().enumerate() {
        let v = if k < n_pepper { 0.0 } else { 255.0 };
        out.data_mut()[p * ch..(p + 1) * ch].fill(v);
    }
    out
}

pub fn augment<R: Rng>(img: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let mut out = img.clone();
    if policy.category.uses_color() {
        out = shift_hue(&out, symmetric(rng, policy.hue_shift));
        out = scale_brightness(&out, 1.0 + symmetric(rng, policy.brightness));
    }
    if policy.category.uses_shape() {
        out = pepper_and_salt(&out, policy.pepper_rate, policy.salt_rate, rng);
    }
    out
}

/// Pastes a generic defect (a tinted blob or a bright scratch) into the
/// central `1 - 2 * margin` square of `img` and returns the image with its
/// binary mask. Used to make labeled validation anomalies from held-out
/// normals without knowing how the real defects look.
pub fn paste_synthetic_defect<R: Rng>(img: &Image, margin: f64, rng: &mut R) -> Result<(Image, Image)> {
    if img.channels() != 3 {
        return Err(Error::Validation("synthetic defects need an RGB image".into()));
    }
    if !(0.0..0.5).contains(&margin) {
        return Err(Error::Validation("margin must lie in [0, 0.5)".into()));
    }
    let (w, h) = img.dims();
    let side = w.min(h) as f64;
    let (lo_x, hi_x) = (margin * w as f64, (1.0 - margin) * w as f64 - 1.0);
    let (lo_y, hi_y) = (margin * h as f64, (1.0 - margin) * h as f64 - 1.0);
    let center = [rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y)];
    let mut out = img.clone();
    let mut mask = Image::new(w, h, 1);
    let alpha = rng.gen_range(0.35..0.6f32);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0f32));
    let shape: Box<dyn Fn([f64; 2]) -> bool> = if rng.gen_bool(0.5) {
        let r = [rng.gen_range(0.03..0.08) * side, rng.gen_range(0.03..0.08) * side];
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        Box::new(move |p| toy::in_ellipse(p, center, r, angle))
    } else {
        let len = rng.gen_range(0.12..0.25) * side;
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut pts = vec![center];
        for _ in 0..3 {
            heading += rng.gen_range(-0.5..0.5);
            let last = pts[pts.len() - 1];
            pts.push([last[0] + len / 3.0 * heading.cos(), last[1] + len / 3.0 * heading.sin()]);
        }
        let half = 0.012 * side;
        Box::new(move |p| toy::near_polyline(p, &pts, half))
    };
    for y in 0..h {
        for x in 0..w {
            let cov = toy::coverage(x, y, &shape);
            if cov > 0.0 {
                toy::blend(out.pixel_mut(x, y), tint, cov * alpha);
                if cov > 0.5 {
                    mask.set(x, y, 0, 255.0);
                }
            }
        }
    }
    Ok((out.quantized(), mask))
}

/// Outcome of building a dataset variant: the new manifest plus per-file
/// failures that did not stop the build.
#[derive(Debug)]
pub struct BuildReport {
    pub manifest: DatasetManifest,
    pub failures: Vec<(String, String)>,
}

impl BuildReport {
    pub fn summary(&self) -> String {
        format!(
            "{} images written, {} failed",
            self.manifest.images.len(),
            self.failures.len()
        )
    }
}

/// Warps `rec`'s image and mask with `h` and writes them under `dst_root`,
/// returning the updated record.
pub(crate) fn write_transformed(
    rec: &ImageRecord,
    src_root: &Path,
    dst_root: &Path,
    h: &HomographyMatrix,
    alignment: AlignmentTag,
) -> Result<ImageRecord> {
    let img = Image::load_png(&src_root.join(&rec.path))?;
    let warped = warp_image(&img, h, FillMode::Reflection)?;
    warped.save_png(&dst_root.join(&rec.path))?;
    if let Some(mask_path) = &rec.mask {
        let mask = Image::load_png(&src_root.join(mask_path))?;
        let wm = warp_mask(&mask, h, FillMode::Reflection)?;
        wm.save_png(&dst_root.join(mask_path))?;
    }
    let mut out = rec.clone();
    out.transform = Some(TransformRecord {
        homography: *h,
        fill: FillMode::Reflection,
    });
    out.alignment = alignment;
    Ok(out)
}

/// Warps every image by an independently sampled misalignment.
pub fn build_misaligned_dataset<R: Rng>(
    src: &DatasetManifest,
    src_root: &Path,
    dst_root: &Path,
    params: &MisalignmentParams,
    rng: &mut R,
) -> Result<BuildReport> {
    params.validate()?;
    if src_root == dst_root {
        return Err(Error::Validation(
            "output root must differ from the source dataset".into(),
        ));
    }
    let mut manifest = DatasetManifest::new(src.classes.clone());
    let mut failures = Vec::new();
    for rec in &src.images {
        let result = Image::load_png(&src_root.join(&rec.path))
            .and_then(|img| ImageFrame::of(&img))
            .and_then(|frame| sample_misalignment(rng, params, &frame))
            .and_then(|h| write_transformed(rec, src_root, dst_root, &h, AlignmentTag::Misaligned));
        match result {
            Ok(r) => manifest.images.push(r),
            Err(e) => failures.push((rec.path.clone(), e.to_string())),
        }
    }
    manifest.save(&dst_root.join(crate::dataset::MANIFEST_FILE))?;
    Ok(BuildReport { manifest, failures })
}

/// Warps every image onto the template pose predicted by `aligner`.
/// Images whose alignment fails are copied unchanged and flagged.
pub fn build_aligned_dataset(
    src: &DatasetManifest,
    src_root: &Path,
    dst_root: &Path,
    aligner: &AlignerModel,
    template: &Image,
) -> Result<BuildReport> {
    if src_root == dst_root {
        return Err(Error::Validation(
            "output root must differ from the source dataset".into(),
        ));
    }
    let reference = match aligner.mode {
        AlignerMode::PairwiseRotation => Some(template),
        AlignerMode::Template => None,
    };
    let mut manifest = DatasetManifest::new(src.classes.clone());
    let mut failures = Vec::new();
    for rec in &src.images {
        let img = Image::load_png(&src_root.join(&rec.path))?;
        let h = aligner
            .alignment_homography(&img, reference)
            .and_then(|h| {
                // The corners must stay finite and within reach of the frame.
                let frame = ImageFrame::of(&img)?;
                let d = homography_to_displacement(&h, &frame)?;
                let reach = 2.0 * frame.width.max(frame.height) as f64;
                if d.to_flat().iter().all(|v| v.is_finite() && v.abs() <= reach) {
                    Ok(h)
                } else {
                    Err(Error::DegenerateCorrespondence("predicted quad is degenerate".into()))
                }
            })
            .map_err(|e| Error::AlignmentFailure {
                image: rec.path.clone(),
                reason: e.to_string(),
            });
        match h {
            Ok(h) => manifest.images.push(write_transformed(rec, src_root, dst_root, &h, AlignmentTag::Aligned)?),
            Err(e) => {
                let identity = HomographyMatrix::identity();
                let mut out = write_transformed(rec, src_root, dst_root, &identity, rec.alignment)?;
                out.flags.push("alignment_failed".into());
                failures.push((rec.path.clone(), e.to_string()));
                manifest.images.push(out);
            }
        }
    }
    manifest.save(&dst_root.join(crate::dataset::MANIFEST_FILE))?;
    Ok(BuildReport { manifest, failures })
}
