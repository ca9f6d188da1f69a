//! MVTec-style dataset manifests.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <class>/train/good/000.png
//! <class>/test/good/000.png
//! <class>/test/<defect>/000.png
//! <class>/ground_truth/<defect>/000_mask.png
//! manifest.json
//! ```
//!
//! Paths inside the manifest are relative to the directory holding it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FillMode, HomographyMatrix};
use crate::raster::Image;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GOOD: &str = "good";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Object,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentTag {
    Original,
    Misaligned,
    Aligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecord {
    pub name: String,
    pub kind: ClassKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    pub homography: HomographyMatrix,
    pub fill: FillMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub class: String,
    pub path: String,
    pub split: Split,
    /// `good` or the defect type.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformRecord>,
    pub alignment: AlignmentTag,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ImageRecord {
    pub fn is_anomalous(&self) -> bool {
        self.label != GOOD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub classes: Vec<ClassRecord>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<ClassRecord>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            classes,
            images: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "manifest schema {} unsupported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn class(&self, name: &str) -> Option<&ClassRecord> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn images_of<'a>(
        &'a self,
        class: &'a str,
        split: Split,
    ) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.images
            .iter()
            .filter(move |r| r.class == class && r.split == split)
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        for r in &self.images {
            if self.class(&r.class).is_none() {
                return Err(Error::Validation(format!(
                    "{} references unknown class {}",
                    r.path, r.class
                )));
            }
            if r.split == Split::Train && r.label != GOOD {
                return Err(Error::Validation(format!(
                    "train image {} is labelled {}",
                    r.path, r.label
                )));
            }
            if r.mask.is_some() && !r.is_anomalous() {
                return Err(Error::Validation(format!("good image {} has a mask", r.path)));
            }
        }
        Ok(())
    }

    /// Checks every mask on disk has its image's dimensions.
    pub fn validate_files(&self, root: &Path) -> Result<()> {
        self.validate()?;
        for r in &self.images {
            if let Some(mask) = &r.mask {
                let img = Image::load_png(&root.join(&r.path))?;
                let m = Image::load_png(&root.join(mask))?;
                if img.dims() != m.dims() {
                    return Err(Error::Validation(format!(
                        "mask {mask} is {:?}, image is {:?}",
                        m.dims(),
                        img.dims()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn image_rel_path(class: &str, split: Split, label: &str, idx: usize) -> String {
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    format!("{class}/{split}/{label}/{idx:03}.png")
}

pub fn mask_rel_path(class: &str, label: &str, idx: usize) -> String {
    format!("{class}/ground_truth/{label}/{idx:03}_mask.png")
}

/// A decoded sample held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ImageRecord,
    pub image: Image,
    pub mask: Option<Image>,
}

/// Loads every image (and mask) of `class` in `split`, in manifest order.
pub fn load_samples(
    manifest: &DatasetManifest,
    root: &Path,
    class: &str,
    split: Split,
) -> Result<Vec<Sample>> {
    manifest
        .images_of(class, split)
        .map(|r| {
            Ok(Sample {
                record: r.clone(),
                image: Image::load_png(&root.join(&r.path))?,
                mask: r
                    .mask
                    .as_ref()
                    .map(|m| Image::load_png(&root.join(m)))
                    .transpose()?,
            })
        })
        .collect()
}

/// MVTec AD texture categories; every other category is an object.
pub const MVTEC_TEXTURES: [&str; 5] = ["carpet", "grid", "leather", "tile", "wood"];

/// MVTec AD object categories.
pub const MVTEC_OBJECTS: [&str; 10] = [
    "bottle", "cable", "capsule", "hazelnut", "metal_nut", "pill", "screw", "toothbrush", "transistor", "zipper",
];

fn sorted_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

/// Builds a manifest for an unpacked MVTec AD tree (`<class>/train/good`,
/// `<class>/test/<label>`, `<class>/ground_truth/<label>/<stem>_mask.png`).
/// Only the listed `classes` are scanned; their kind comes from the
/// published category list.
pub fn scan_mvtec(root: &Path, classes: &[String]) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for name in classes {
        let kind = if MVTEC_TEXTURES.contains(&name.as_str()) {
            ClassKind::Texture
        } else if MVTEC_OBJECTS.contains(&name.as_str()) {
            ClassKind::Object
        } else {
            return Err(Error::Validation(format!("`{name}` is not an MVTec AD category")));
        };
        records.push(ClassRecord { name: name.clone(), kind });
    }
    let mut manifest = DatasetManifest::new(records);
    for class in classes {
        let base = root.join(class);
        if !base.is_dir() {
            return Err(Error::Validation(format!("no directory for `{class}` in {}", root.display())));
        }
        let mut push = |split: Split, label: &str, file: &str, mask: Option<String>| {
            let dir = if split == Split::Train { "train" } else { "test" };
            manifest.images.push(ImageRecord {
                class: class.clone(),
                path: format!("{class}/{dir}/{label}/{file}"),
                split,
                label: label.to_string(),
                mask,
                transform: None,
                alignment: AlignmentTag::Original,
                flags: Vec::new(),
            });
        };
        for f in sorted_pngs(&base.join("train").join(GOOD))? {
            push(Split::Train, GOOD, &f, None);
        }
        for label in sorted_subdirs(&base.join("test"))? {
            for f in sorted_pngs(&base.join("test").join(&label))? {
                let mask = (label != GOOD).then(|| {
                    let stem = f.trim_end_matches(".png");
                    format!("{class}/ground_truth/{label}/{stem}_mask.png")
                });
                push(Split::Test, &label, &f, mask);
            }
        }
    }
    manifest.validate()?;
    manifest.validate_files(root)?;
    Ok(manifest)
}

/// Directory containing a manifest file.
pub fn root_of(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
