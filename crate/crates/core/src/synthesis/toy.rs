//! Procedural MVTec-style dataset used as the offline test substrate.
//!
//! Object classes render an asymmetric plate (a notched polygon with a
//! drilled hole and a painted stripe) on a shaded background, in a canonical
//! pose perturbed by a small per-instance rotation jitter. Texture classes
//! render a tileable sinusoid weave shifted by a random phase per image.
//! Shapes are anti-aliased by 4x4 supersampling.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    image_rel_path, mask_rel_path, AlignmentTag, ClassKind, ClassRecord, DatasetManifest,
    ImageRecord, Split, GOOD, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::raster::{mask_area, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Object,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDefect {
    /// Thin bright polyline.
    Scratch,
    /// Blob of shifted color.
    Spot,
    /// One outline vertex displaced.
    Structural,
}

impl ToyDefect {
    pub fn as_str(&self) -> &'static str {
        match self {
            ToyDefect::Scratch => "scratch",
            ToyDefect::Spot => "spot",
            ToyDefect::Structural => "structural",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyClassSpec {
    pub name: String,
    pub kind: ToyKind,
    /// Maximum per-instance rotation away from the canonical pose (degrees).
    #[serde(default)]
    pub pose_jitter_deg: f64,
    pub defects: Vec<ToyDefect>,
    /// Defect visibility in (0, 1]: blend opacity of scratches and spots,
    /// relative size of structural deformations.
    #[serde(default = "full_contrast")]
    pub defect_contrast: f64,
}

fn full_contrast() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetSpec {
    pub size: usize,
    pub train_good: usize,
    pub test_good: usize,
    /// Defective test images per class, spread round-robin over its defects.
    pub test_defect: usize,
    pub classes: Vec<ToyClassSpec>,
}

const DEFAULT_CONTRAST: f64 = 0.55;

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            size: 128,
            train_good: 60,
            test_good: 30,
            test_defect: 30,
            classes: vec![
                ToyClassSpec {
                    name: "widget".into(),
                    kind: ToyKind::Object,
                    pose_jitter_deg: 10.0,
                    defects: vec![ToyDefect::Scratch, ToyDefect::Spot, ToyDefect::Structural],
                    defect_contrast: DEFAULT_CONTRAST,
                },
                ToyClassSpec {
                    name: "weave".into(),
                    kind: ToyKind::Texture,
                    pose_jitter_deg: 0.0,
                    defects: vec![ToyDefect::Scratch, ToyDefect::Spot],
                    defect_contrast: DEFAULT_CONTRAST,
                },
            ],
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.size < 32 {
            return bad(format!("image size {} below 32", self.size));
        }
        if self.train_good < 2 || self.test_good < 1 {
            return bad("need at least 2 train and 1 test good images".into());
        }
        if !self.classes.iter().any(|c| c.kind == ToyKind::Object) {
            return bad("at least one object class is required".into());
        }
        if !self.classes.iter().any(|c| c.kind == ToyKind::Texture) {
            return bad("at least one texture class is required".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return bad(format!("invalid class name `{}`", c.name));
            }
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("duplicate class `{}`", c.name));
            }
            if c.defects.is_empty() && self.test_defect > 0 {
                return bad(format!("class `{}` has no defect injectors", c.name));
            }
            if c.kind == ToyKind::Texture && c.defects.contains(&ToyDefect::Structural) {
                return bad(format!("texture class `{}` cannot take structural defects", c.name));
            }
            if !(c.defect_contrast > 0.0 && c.defect_contrast <= 1.0) {
                return bad(format!("defect contrast of `{}` outside (0, 1]", c.name));
            }
            if !(0.0..=90.0).contains(&c.pose_jitter_deg) {
                return bad(format!("pose jitter of `{}` outside [0, 90]", c.name));
            }
        }
        Ok(())
    }
}

const SUPERSAMPLE: usize = 4;

/// Canonical plate outline in object units (object radius = 1).
const PLATE: [[f64; 2]; 8] = [
    [-0.8, -0.7],
    [0.3, -0.7],
    [0.3, -0.3],
    [0.8, -0.3],
    [0.8, 0.4],
    [-0.1, 0.4],
    [-0.1, 0.8],
    [-0.8, 0.8],
];
const HOLE_CENTER: [f64; 2] = [-0.45, -0.3];
const HOLE_RADIUS: f64 = 0.16;
const STRIPE: ([f64; 2], [f64; 2], f64) = ([-0.65, 0.58], [-0.3, 0.58], 0.05);
/// Object radius as a fraction of the image side.
const OBJECT_SCALE: f64 = 0.3;

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - qx).hypot(p[1] - qy)
}

pub(crate) fn near_polyline(p: [f64; 2], line: &[[f64; 2]], half_width: f64) -> bool {
    line.windows(2)
        .any(|w| dist_to_segment(p, w[0], w[1]) <= half_width)
}

pub(crate) fn in_ellipse(p: [f64; 2], c: [f64; 2], r: [f64; 2], angle: f64) -> bool {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    let (u, v) = (co * dx + s * dy, -s * dx + co * dy);
    (u / r[0]).powi(2) + (v / r[1]).powi(2) <= 1.0
}

/// Per-pixel supersampled coverage of `pred` (given continuous pixel coords).
pub(crate) fn coverage(x: usize, y: usize, pred: &impl Fn([f64; 2]) -> bool) -> f32 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let px = x as f64 - 0.5 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = y as f64 - 0.5 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if pred([px, py]) {
                hits += 1;
            }
        }
    }
    hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
}

pub(crate) fn blend(px: &mut [f32], color: [f32; 3], alpha: f32) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

fn finish(img: &mut Image, rng: &mut ChaCha8Rng, noise_std: f64) {
    let noise = Normal::new(0.0, noise_std).expect("positive std");
    for v in img.data_mut() {
        *v = (*v + noise.sample(rng) as f32).round().clamp(0.0, 255.0);
    }
}

struct Pose {
    center: [f64; 2],
    angle: f64,
    radius: f64,
}

impl Pose {
    /// Pixel coordinates to object units.
    fn to_object(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        [(c * dx + s * dy) / self.radius, (-s * dx + c * dy) / self.radius]
    }
}

fn random_point_in_plate(rng: &mut ChaCha8Rng, plate: &[[f64; 2]]) -> [f64; 2] {
    loop {
        let p = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.7..0.8)];
        let in_hole = (p[0] - HOLE_CENTER[0]).hypot(p[1] - HOLE_CENTER[1]) < HOLE_RADIUS + 0.08;
        if point_in_polygon(p, plate) && !in_hole {
            return p;
        }
    }
}

fn render_object(
    spec: &ToyClassSpec,
    size: usize,
    defect: Option<ToyDefect>,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<Image>) {
    let mid = (size - 1) as f64 / 2.0;
    let jitter = spec.pose_jitter_deg;
    let angle = if jitter > 0.0 {
        rng.gen_range(-jitter..=jitter).to_radians()
    } else {
        0.0
    };
    let shift = 0.01 * size as f64;
    let pose = Pose {
        center: [
            mid + rng.gen_range(-shift..=shift),
            mid + rng.gen_range(-shift..=shift),
        ],
        angle,
        radius: OBJECT_SCALE * size as f64 * (1.0 + rng.gen_range(-0.02..=0.02)),
    };
    let plate: Vec<[f64; 2]> = PLATE
        .iter()
        .map(|v| [v[0] + rng.gen_range(-0.01..=0.01), v[1] + rng.gen_range(-0.01..=0.01)])
        .collect();
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-6.0..=6.0));
    let body = [190.0 + tint[0], 110.0 + tint[1], 45.0 + tint[2]];
    let bg_level: f32 = rng.gen_range(-4.0..=4.0);

    // Defect geometry in object units.
    let mut bad_plate = plate.clone();
    let mut scratch: Vec<[f64; 2]> = Vec::new();
    let mut spot: Option<([f64; 2], [f64; 2], f64)> = None;
    match defect {
        Some(ToyDefect::Scratch) => {
            let mut p = random_point_in_plate(rng, &plate);
            scratch.push(p);
            let mut heading = rng.gen_range(0.0..TAU);
            for _ in 0..2 {
                heading += rng.gen_range(-0.8..0.8);
                let len = rng.gen_range(0.25..0.45);
                p = [p[0] + len * heading.cos(), p[1] + len * heading.sin()];
                scratch.push(p);
            }
        }
        Some(ToyDefect::Spot) => {
            let c = random_point_in_plate(rng, &plate);
            let r = [rng.gen_range(0.08..0.14), rng.gen_range(0.06..0.11)];
            spot = Some((c, r, rng.gen_range(0.0..TAU)));
        }
        Some(ToyDefect::Structural) => {
            let i = rng.gen_range(0..plate.len());
            let dir = rng.gen_range(0.0..TAU);
            let len = rng.gen_range(0.2..0.3) * spec.defect_contrast.sqrt();
            bad_plate[i] = [
                plate[i][0] + len * dir.cos(),
                plate[i][1] + len * dir.sin(),
            ];
        }
        None => {}
    }

    let alpha = spec.defect_contrast as f32;
    let mut img = Image::new(size, size, 3);
    let mut mask = defect.map(|_| Image::new(size, size, 1));
    let reach = 1.6 * pose.radius;
    for y in 0..size {
        for x in 0..size {
            let shade = 62.0 + bg_level + 14.0 * (y as f32 / size as f32 - 0.5);
            let px = img.pixel_mut(x, y);
            px.copy_from_slice(&[shade, shade + 4.0, shade + 12.0]);
            let (dx, dy) = (x as f64 - pose.center[0], y as f64 - pose.center[1]);
            if dx.hypot(dy) > reach {
                continue;
            }
            let shape = &bad_plate;
            let body_cov = coverage(x, y, &|p| point_in_polygon(pose.to_object(p), shape));
            if body_cov > 0.0 {
                let u = pose.to_object([x as f64, y as f64]);
                let light = 1.0 + 0.08 * (u[0] * 0.6 - u[1] * 0.4) as f32;
                let color = body.map(|c| c * light);
                blend(px, color, body_cov);
            }
            let hole_cov = coverage(x, y, &|p| {
                let u = pose.to_object(p);
                (u[0] - HOLE_CENTER[0]).hypot(u[1] - HOLE_CENTER[1]) <= HOLE_RADIUS
            });
            if hole_cov > 0.0 {
                blend(px, [28.0, 28.0, 34.0], hole_cov);
            }
            let stripe_cov = coverage(x, y, &|p| {
                dist_to_segment(pose.to_object(p), STRIPE.0, STRIPE.1) <= STRIPE.2
            });
            if stripe_cov > 0.0 {
                blend(px, [232.0, 212.0, 150.0], stripe_cov);
            }

            let mut defect_cov = 0.0;
            if !scratch.is_empty() {
                let sc = coverage(x, y, &|p| {
                    let u = pose.to_object(p);
                    near_polyline(u, &scratch, 0.045) && point_in_polygon(u, &plate)
                });
                if sc > 0.0 {
                    blend(px, [222.0, 222.0, 212.0], sc * alpha);
                }
                defect_cov = sc;
            }
            if let Some((c, r, a)) = spot {
                let sc = coverage(x, y, &|p| {
                    let u = pose.to_object(p);
                    in_ellipse(u, c, r, a) && point_in_polygon(u, &plate)
                });
                if sc > 0.0 {
                    blend(px, [body[0] * 0.55, body[1] * 0.75, body[2] * 1.6], sc * alpha);
                }
                defect_cov = sc;
            }
            if defect == Some(ToyDefect::Structural) {
                let good_cov = coverage(x, y, &|p| point_in_polygon(pose.to_object(p), &plate));
                defect_cov = (body_cov - good_cov).abs();
            }
            if let Some(m) = mask.as_mut() {
                if defect_cov > 0.5 {
                    m.set(x, y, 0, 255.0);
                }
            }
        }
    }
    finish(&mut img, rng, 2.5);
    (img, mask)
}

/// Class-level weave parameters: integer frequencies keep it tileable.
struct Weave {
    waves: Vec<(f64, f64, f64)>,
    dark: [f32; 3],
    light: [f32; 3],
}

impl Weave {
    fn for_class(name: &str) -> Self {
        let seed = name
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..4)
            .map(|_| {
                (
                    rng.gen_range(3..9) as f64 * if rng.gen() { 1.0 } else { -1.0 },
                    rng.gen_range(3..9) as f64,
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        Self {
            waves,
            dark: [70.0, 80.0, 60.0],
            light: [170.0, 160.0, 120.0],
        }
    }
}

fn render_texture(
    spec: &ToyClassSpec,
    size: usize,
    defect: Option<ToyDefect>,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<Image>) {
    let weave = Weave::for_class(&spec.name);
    let (ox, oy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    let n = size as f64;
    let total_amp: f64 = weave.waves.iter().map(|w| w.2).sum();

    let mut scratch: Vec<[f64; 2]> = Vec::new();
    let mut spot: Option<([f64; 2], [f64; 2], f64)> = None;
    let margin = 0.15 * n;
    match defect {
        Some(ToyDefect::Scratch) => {
            let mut p = [rng.gen_range(margin..n - margin), rng.gen_range(margin..n - margin)];
            scratch.push(p);
            let mut heading = rng.gen_range(0.0..TAU);
            for _ in 0..2 {
                heading += rng.gen_range(-0.8..0.8);
                let len = rng.gen_range(0.08..0.15) * n;
                p = [p[0] + len * heading.cos(), p[1] + len * heading.sin()];
                scratch.push(p);
            }
        }
        Some(ToyDefect::Spot) => {
            let c = [rng.gen_range(margin..n - margin), rng.gen_range(margin..n - margin)];
            let r = [rng.gen_range(0.03..0.05) * n, rng.gen_range(0.025..0.04) * n];
            spot = Some((c, r, rng.gen_range(0.0..TAU)));
        }
        Some(ToyDefect::Structural) => unreachable!("rejected by spec validation"),
        None => {}
    }

    let alpha = spec.defect_contrast as f32;
    let mut img = Image::new(size, size, 3);
    let mut mask = defect.map(|_| Image::new(size, size, 1));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + ox) / n, (y as f64 + oy) / n);
            let s: f64 = weave
                .waves
                .iter()
                .map(|&(fx, fy, a)| a * (TAU * (fx * u + fy * v)).sin())
                .sum::<f64>()
                / total_amp;
            let t = (0.5 + 0.5 * s) as f32;
            let px = img.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = weave.dark[c] + (weave.light[c] - weave.dark[c]) * t;
            }
            let mut defect_cov = 0.0;
            if !scratch.is_empty() {
                defect_cov = coverage(x, y, &|p| near_polyline(p, &scratch, 0.9));
                if defect_cov > 0.0 {
                    blend(px, [235.0, 235.0, 225.0], defect_cov * alpha);
                }
            }
            if let Some((c, r, a)) = spot {
                defect_cov = coverage(x, y, &|p| in_ellipse(p, c, r, a));
                if defect_cov > 0.0 {
                    blend(px, [150.0, 60.0, 60.0], defect_cov * alpha);
                }
            }
            if let Some(m) = mask.as_mut() {
                if defect_cov > 0.5 {
                    m.set(x, y, 0, 255.0);
                }
            }
        }
    }
    finish(&mut img, rng, 3.0);
    (img, mask)
}

/// Renders one sample; defective samples are re-drawn until the mask is
/// nonempty.
pub fn render_toy_sample(
    class: &ToyClassSpec,
    size: usize,
    defect: Option<ToyDefect>,
    rng: &mut ChaCha8Rng,
) -> (Image, Option<Image>) {
    loop {
        let (img, mask) = match class.kind {
            ToyKind::Object => render_object(class, size, defect, rng),
            ToyKind::Texture => render_texture(class, size, defect, rng),
        };
        match &mask {
            Some(m) if mask_area(m) == 0 => continue,
            _ => return (img, mask),
        }
    }
}

/// Writes the dataset under `out_dir` and returns its manifest.
pub fn generate_toy_dataset<R: Rng>(
    spec: &ToyDatasetSpec,
    rng: &mut R,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let classes = spec
        .classes
        .iter()
        .map(|c| ClassRecord {
            name: c.name.clone(),
            kind: match c.kind {
                ToyKind::Object => ClassKind::Object,
                ToyKind::Texture => ClassKind::Texture,
            },
        })
        .collect();
    let mut manifest = DatasetManifest::new(classes);
    for class in &spec.classes {
        let mut crng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut push = |split: Split, label: &str, idx: usize, defect: Option<ToyDefect>| -> Result<()> {
            let (img, mask) = render_toy_sample(class, spec.size, defect, &mut crng);
            let path = image_rel_path(&class.name, split, label, idx);
            img.save_png(&out_dir.join(&path))?;
            let mask_path = match mask {
                Some(m) => {
                    let p = mask_rel_path(&class.name, label, idx);
                    m.save_png(&out_dir.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            manifest.images.push(ImageRecord {
                class: class.name.clone(),
                path,
                split,
                label: label.to_string(),
                mask: mask_path,
                transform: None,
                alignment: AlignmentTag::Original,
                flags: vec![],
            });
            Ok(())
        };
        for i in 0..spec.train_good {
            push(Split::Train, GOOD, i, None)?;
        }
        for i in 0..spec.test_good {
            push(Split::Test, GOOD, i, None)?;
        }
        let mut per_defect = vec![0usize; class.defects.len()];
        for i in 0..spec.test_defect {
            let k = i % class.defects.len();
            let d = class.defects[k];
            push(Split::Test, d.as_str(), per_defect[k], Some(d))?;
            per_defect[k] += 1;
        }
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
