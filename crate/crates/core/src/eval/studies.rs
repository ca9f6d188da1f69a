//! Experiment runners. Every study expands a [`RunConfig`] into cells
//! (scorer x condition x class), runs each cell once per seed, and reduces
//! the per-seed AUROCs into [`ExperimentResult`]s in a fixed order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{train_pairwise_aligner, train_template_aligner, AlignerConfig, AlignerMode, AlignerModel};
use crate::backbone::{Backbone, BackboneId};
use crate::config::{DatasetVariant, RunConfig, SelectionConfig, SelectionProtocol};
use crate::dataset::{load_samples, ClassKind, DatasetManifest, Sample, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::heatmap::render_heatmap;
use crate::eval::metrics::{auroc, pixel_auroc};
use crate::model::ExecProfile;
use crate::raster::Image;
use crate::scorers::{NormalModel, ScoreResult, ScorerConfig, ScorerKind};
use crate::shl::{finetune_observed, select_checkpoint, Checkpoint, CheckpointSeries};
use crate::synthesis::{
    build_aligned_dataset, build_misaligned_dataset, generate_toy_dataset, paste_synthetic_defect,
    AugmentationCategory, AugmentationPolicy,
};

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_MD: &str = "results.md";

// Independent RNG streams derived from the run seed.
const MISALIGN_STREAM: u64 = 0x6d69_7361;
const SELECTION_STREAM: u64 = 0x7365_6c65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Evaluate,
    Alignment,
    Hl,
    Augmentation,
    Backbone,
}

impl Study {
    pub const ALL: [Study; 5] = [
        Study::Evaluate,
        Study::Alignment,
        Study::Hl,
        Study::Augmentation,
        Study::Backbone,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Study::Evaluate => "evaluate",
            Study::Alignment => "alignment",
            Study::Hl => "hl",
            Study::Augmentation => "augmentation",
            Study::Backbone => "backbone",
        }
    }
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Study::ALL.iter().map(|k| k.as_str()).collect();
                Error::Validation(format!("unknown study `{s}` (known: {})", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditions {
    pub variant: DatasetVariant,
    pub scorer: ScorerKind,
    pub backbone: BackboneId,
    pub hl: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassResult {
    pub class: String,
    pub kind: ClassKind,
    /// Mean over seeds.
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub image_by_seed: Vec<f64>,
    pub pixel_by_seed: Vec<Option<f64>>,
    /// Selected checkpoint iteration per seed (fine-tuned cells only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_iteration: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_image: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_pixel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub study: Study,
    pub conditions: Conditions,
    pub seeds: Vec<u64>,
    pub classes: Vec<ClassResult>,
    pub mean_image_auroc: Option<f64>,
    pub mean_pixel_auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_image: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_pixel: Option<f64>,
    /// Not part of the reproducible output.
    pub wall_clock_s: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl ExperimentResult {
    pub fn failed(&self) -> bool {
        self.classes.iter().any(|c| c.failure.is_some())
    }

    /// Mean over the classes of `kind` (all classes when `None`) that have
    /// a value.
    pub fn split_mean(&self, kind: Option<ClassKind>, pixel: bool) -> Option<f64> {
        mean(
            self.classes
                .iter()
                .filter(|c| kind.map_or(true, |k| c.kind == k))
                .filter_map(|c| if pixel { c.pixel_auroc } else { c.image_auroc }),
        )
    }

    pub fn class(&self, name: &str) -> Option<&ClassResult> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// Fills the delta fields relative to `reference`, class by class.
    pub fn set_deltas(&mut self, reference: &ExperimentResult) {
        let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
        for c in &mut self.classes {
            if let Some(r) = reference.class(&c.class) {
                c.delta_image = diff(c.image_auroc, r.image_auroc);
                c.delta_pixel = diff(c.pixel_auroc, r.pixel_auroc);
            }
        }
        self.delta_image = diff(self.mean_image_auroc, reference.mean_image_auroc);
        self.delta_pixel = diff(self.mean_pixel_auroc, reference.mean_pixel_auroc);
    }
}

/// All results of one study plus its rendered table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: Study,
    pub results: Vec<ExperimentResult>,
    pub markdown: String,
}

impl StudyReport {
    pub fn any_failed(&self) -> bool {
        self.results.iter().any(|r| r.failed())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.results)?;
        std::fs::write(dir.join(RESULTS_JSON), json + "\n")?;
        std::fs::write(dir.join(RESULTS_MD), &self.markdown)?;
        Ok(())
    }

    pub fn load_results(dir: &Path) -> Result<Vec<ExperimentResult>> {
        let text = std::fs::read_to_string(dir.join(RESULTS_JSON))?;
        let results: Vec<ExperimentResult> = serde_json::from_str(&text)?;
        if let Some(r) = results.iter().find(|r| r.schema_version != RESULT_SCHEMA_VERSION) {
            return Err(Error::Validation(format!(
                "result schema_version {} is not supported",
                r.schema_version
            )));
        }
        Ok(results)
    }
}

/// Per-class accumulation across seeds.
#[derive(Clone, Debug, Default)]
struct Tally {
    image: Vec<f64>,
    pixel: Vec<Option<f64>>,
    iters: Vec<usize>,
    failure: Option<String>,
}

impl Tally {
    fn record(&mut self, seed: u64, outcome: Result<CellScores>) {
        match outcome {
            Ok(s) => {
                self.image.push(s.image);
                self.pixel.push(s.pixel);
            }
            Err(e) => self.fail(seed, &e),
        }
    }

    fn fail(&mut self, seed: u64, e: &Error) {
        if self.failure.is_none() {
            self.failure = Some(format!("seed {seed}: {e}"));
        }
    }
}

struct Cell {
    conditions: Conditions,
    tallies: Vec<Tally>,
    seconds: f64,
}

impl Cell {
    fn new(conditions: Conditions, classes: usize) -> Self {
        Self {
            conditions,
            tallies: vec![Tally::default(); classes],
            seconds: 0.0,
        }
    }

    fn finish(self, study: Study, seeds: &[u64], classes: &[(String, ClassKind)]) -> ExperimentResult {
        let classes: Vec<ClassResult> = classes
            .iter()
            .zip(self.tallies)
            .map(|((name, kind), t)| {
                let ok = t.failure.is_none() && !t.image.is_empty();
                let pixel_complete = ok && t.pixel.iter().all(Option::is_some);
                ClassResult {
                    class: name.clone(),
                    kind: *kind,
                    image_auroc: if ok { mean(t.image.iter().copied()) } else { None },
                    pixel_auroc: if pixel_complete { mean(t.pixel.iter().flatten().copied()) } else { None },
                    image_by_seed: t.image,
                    pixel_by_seed: t.pixel,
                    selected_iteration: t.iters,
                    delta_image: None,
                    delta_pixel: None,
                    failure: t.failure,
                }
            })
            .collect();
        let mut r = ExperimentResult {
            schema_version: RESULT_SCHEMA_VERSION,
            study,
            conditions: self.conditions,
            seeds: seeds.to_vec(),
            classes,
            mean_image_auroc: None,
            mean_pixel_auroc: None,
            delta_image: None,
            delta_pixel: None,
            wall_clock_s: self.seconds,
        };
        r.mean_image_auroc = r.split_mean(None, false);
        r.mean_pixel_auroc = r.split_mean(None, true);
        r
    }
}

/// AUROCs of one fitted-and-scored cell.
#[derive(Clone, Debug)]
pub struct CellScores {
    pub image: f64,
    pub pixel: Option<f64>,
    pub results: Vec<ScoreResult>,
}

/// Fits `kind` on `train` normals and scores `test`.
pub fn evaluate_scorer(
    kind: ScorerKind,
    backbone: &Backbone,
    train: &[Image],
    test: &[Sample],
    cfg: &ScorerConfig,
    profile: ExecProfile,
) -> Result<CellScores> {
    let model = NormalModel::fit(kind, backbone, train, cfg, profile)?;
    let images: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let results = model.score_all(backbone, &images, profile)?;
    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<bool> = test.iter().map(|s| s.record.is_anomalous()).collect();
    let image = auroc(&scores, &labels)?;
    let pixel = if kind.has_pixel_map() {
        let blanks: Vec<Image> = test
            .iter()
            .map(|s| Image::new(s.image.width(), s.image.height(), 1))
            .collect();
        let masks: Vec<&Image> = test
            .iter()
            .zip(&blanks)
            .map(|(s, b)| s.mask.as_ref().unwrap_or(b))
            .collect();
        let maps: Vec<_> = results
            .iter()
            .map(|r| r.score_map.as_ref().expect("pixel scorer emits a map"))
            .collect();
        match pixel_auroc(&maps, &masks) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(CellScores { image, pixel, results })
}

/// Images a checkpoint is ranked on: normals to fit, probes to score.
#[derive(Clone, Debug)]
pub struct SelectionSet {
    pub fit: Vec<Image>,
    pub probe: Vec<Image>,
    pub labels: Vec<bool>,
}

/// Holds out a fraction of `normals`; the probe set is the held-out
/// normals plus a defective copy of each.
pub fn validation_set(normals: &[Image], cfg: &SelectionConfig, seed: u64) -> Result<SelectionSet> {
    let n = normals.len();
    let held = ((n as f64 * cfg.holdout_fraction).round() as usize).max(1);
    if n < held + 2 {
        return Err(Error::InsufficientNormals { needed: held + 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SELECTION_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (probe_idx, fit_idx) = order.split_at(held);
    let mut fit_idx = fit_idx.to_vec();
    fit_idx.sort_unstable();
    let fit = fit_idx.iter().map(|&i| normals[i].clone()).collect();
    let mut probe = Vec::with_capacity(2 * held);
    let mut labels = Vec::with_capacity(2 * held);
    for &i in probe_idx {
        probe.push(normals[i].clone());
        labels.push(false);
    }
    for &i in probe_idx {
        probe.push(paste_synthetic_defect(&normals[i], cfg.defect_margin, &mut rng)?.0);
        labels.push(true);
    }
    Ok(SelectionSet { fit, probe, labels })
}

/// All normals for fitting, the labeled test split for probing.
pub fn test_selection_set(normals: &[Image], test: &[Sample]) -> SelectionSet {
    SelectionSet {
        fit: normals.to_vec(),
        probe: test.iter().map(|s| s.image.clone()).collect(),
        labels: test.iter().map(|s| s.record.is_anomalous()).collect(),
    }
}

pub fn selection_set(
    normals: &[Image],
    test: &[Sample],
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<SelectionSet> {
    match cfg.protocol {
        SelectionProtocol::Validation => validation_set(normals, cfg, seed),
        SelectionProtocol::TestSet => Ok(test_selection_set(normals, test)),
    }
}

/// Ranks every checkpoint by the image AUROC of `kind` on `set` and
/// returns the best one with all scores.
pub fn select_by_auroc<'a>(
    series: &'a CheckpointSeries,
    set: &SelectionSet,
    kind: ScorerKind,
    cfg: &ScorerConfig,
    profile: ExecProfile,
) -> Result<(&'a Checkpoint, Vec<f64>)> {
    select_checkpoint(series, |ck| {
        let model = NormalModel::fit(kind, &ck.backbone, &set.fit, cfg, profile)?;
        let scores: Vec<f64> = model
            .score_all(&ck.backbone, &set.probe, profile)?
            .iter()
            .map(|r| r.image_score)
            .collect();
        auroc(&scores, &set.labels)
    })
}

/// A dataset on disk with its manifest.
#[derive(Clone, Debug)]
pub struct DatasetRef {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetRef {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn samples(&self, class: &str, split: Split) -> Result<Vec<Sample>> {
        load_samples(&self.manifest, &self.root, class, split)
    }

    pub fn train_images(&self, class: &str) -> Result<Vec<Image>> {
        Ok(self
            .samples(class, Split::Train)?
            .into_iter()
            .map(|s| s.image)
            .collect())
    }
}

pub fn work_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join("work").join(format!("seed_{seed}"))
}

/// The source dataset for `seed`: the configured directory, or a toy
/// dataset generated under the work directory.
pub fn original_dataset(cfg: &RunConfig, seed: u64) -> Result<DatasetRef> {
    if let Some(root) = &cfg.dataset.root {
        return DatasetRef::open(root);
    }
    let root = work_dir(cfg, seed).join("original");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest = generate_toy_dataset(&cfg.dataset.toy, &mut rng, &root)?;
    Ok(DatasetRef { root, manifest })
}

pub fn misaligned_dataset(cfg: &RunConfig, seed: u64, src: &DatasetRef) -> Result<DatasetRef> {
    misaligned_into(cfg, seed, src, &work_dir(cfg, seed).join("misaligned"))
}

/// Misaligns every image of `src` into `root` with the seed's stream.
pub fn misaligned_into(cfg: &RunConfig, seed: u64, src: &DatasetRef, root: &Path) -> Result<DatasetRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MISALIGN_STREAM);
    let report = build_misaligned_dataset(&src.manifest, &src.root, root, &cfg.misalignment, &mut rng)?;
    if let Some((path, e)) = report.failures.first() {
        return Err(Error::Invalid(format!("misaligning {path}: {e}")));
    }
    Ok(DatasetRef {
        root: root.to_path_buf(),
        manifest: report.manifest,
    })
}

/// Trains the configured aligner on the train normals of `class`. The
/// returned model records the template (or pairwise reference) image by
/// its manifest path; the image itself is returned alongside.
pub fn train_class_aligner(cfg: &AlignerConfig, src: &DatasetRef, class: &str) -> Result<(AlignerModel, Image)> {
    let records: Vec<_> = src.manifest.images_of(class, Split::Train).collect();
    let normals = src.train_images(class)?;
    let ti = cfg.pick_template(normals.len())?;
    let id = records[ti].path.clone();
    let mut aligner = match cfg.mode {
        AlignerMode::PairwiseRotation => train_pairwise_aligner(&normals, cfg)?,
        AlignerMode::Template => train_template_aligner(&normals[ti], &id, cfg)?,
    };
    aligner.template_id = Some(id);
    Ok((aligner, normals.into_iter().nth(ti).expect("picked index in range")))
}

/// Aligns every image of `class` into `dst_root` and returns its records.
/// Per-image failures are logged and kept as flagged identity copies.
pub fn apply_class_aligner(
    aligner: &AlignerModel,
    template: &Image,
    src: &DatasetRef,
    class: &str,
    dst_root: &Path,
) -> Result<Vec<crate::dataset::ImageRecord>> {
    let mut sub = DatasetManifest::new(src.manifest.classes.clone());
    sub.images = src.manifest.images.iter().filter(|r| r.class == class).cloned().collect();
    let report = build_aligned_dataset(&sub, &src.root, dst_root, aligner, template)?;
    for (path, e) in &report.failures {
        log::warn!("{path}: {e}");
    }
    Ok(report.manifest.images)
}

/// Trains one aligner per listed class on its train normals and aligns
/// every image of that class. Unlisted classes are left out.
pub fn aligned_dataset(cfg: &RunConfig, seed: u64, src: &DatasetRef, classes: &[String]) -> Result<DatasetRef> {
    aligned_into(cfg, seed, src, classes, &work_dir(cfg, seed).join("aligned"))
}

/// [`aligned_dataset`] writing into `root`.
pub fn aligned_into(
    cfg: &RunConfig,
    seed: u64,
    src: &DatasetRef,
    classes: &[String],
    root: &Path,
) -> Result<DatasetRef> {
    let acfg = cfg.for_seed(seed).aligner;
    let mut merged = DatasetManifest::new(
        src.manifest
            .classes
            .iter()
            .filter(|c| classes.contains(&c.name))
            .cloned()
            .collect(),
    );
    for class in classes {
        let (aligner, template) = train_class_aligner(&acfg, src, class)?;
        merged.images.extend(apply_class_aligner(&aligner, &template, src, class, root)?);
    }
    merged.save(&root.join(MANIFEST_FILE))?;
    Ok(DatasetRef {
        root: root.to_path_buf(),
        manifest: merged,
    })
}

/// Builds `variant` of the configured dataset for `seed`.
pub fn dataset_variant(
    cfg: &RunConfig,
    seed: u64,
    variant: DatasetVariant,
    classes: &[String],
) -> Result<DatasetRef> {
    let src = original_dataset(cfg, seed)?;
    match variant {
        DatasetVariant::Original => Ok(src),
        DatasetVariant::Misaligned => misaligned_dataset(cfg, seed, &src),
        DatasetVariant::Aligned => aligned_dataset(cfg, seed, &src, classes),
    }
}

/// Classes a study runs on: the configured list, else every class of the
/// manifest that `keep` admits. Kinds always come from the manifest.
fn resolve_classes(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    keep: impl Fn(ClassKind) -> bool,
) -> Result<Vec<(String, ClassKind)>> {
    if cfg.classes.is_empty() {
        let v: Vec<_> = manifest
            .classes
            .iter()
            .filter(|c| keep(c.kind))
            .map(|c| (c.name.clone(), c.kind))
            .collect();
        if v.is_empty() {
            return Err(Error::Validation("no classes to run".into()));
        }
        return Ok(v);
    }
    cfg.classes
        .iter()
        .map(|name| {
            manifest
                .class(name)
                .map(|c| (c.name.clone(), c.kind))
                .ok_or_else(|| Error::Validation(format!("class `{name}` not in the dataset")))
        })
        .collect()
}

/// Class list for a study, read from the seed-independent part of the
/// dataset (the toy spec or the manifest on disk).
pub fn study_classes(cfg: &RunConfig, keep: impl Fn(ClassKind) -> bool) -> Result<Vec<(String, ClassKind)>> {
    let manifest = match &cfg.dataset.root {
        Some(root) => DatasetManifest::load(&root.join(MANIFEST_FILE))?,
        None => DatasetManifest::new(
            cfg.dataset
                .toy
                .classes
                .iter()
                .map(|c| crate::dataset::ClassRecord {
                    name: c.name.clone(),
                    kind: match c.kind {
                        crate::synthesis::ToyKind::Object => ClassKind::Object,
                        crate::synthesis::ToyKind::Texture => ClassKind::Texture,
                    },
                })
                .collect(),
        ),
    };
    resolve_classes(cfg, &manifest, keep)
}

fn names(classes: &[(String, ClassKind)]) -> Vec<String> {
    classes.iter().map(|(n, _)| n.clone()).collect()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!(" ({x:+.4})"))
}

/// Plain evaluation of each scorer on the configured dataset variant,
/// with heatmap panels for the first few anomalous test images.
pub fn run_evaluation(cfg: &RunConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let classes = study_classes(cfg, |_| true)?;
    let backbone_id = cfg.backbone;
    let mut cells: Vec<Cell> = cfg
        .scorers
        .iter()
        .map(|&scorer| {
            Cell::new(
                Conditions {
                    variant: cfg.dataset.variant,
                    scorer,
                    backbone: backbone_id,
                    hl: false,
                    augmentation: None,
                },
                classes.len(),
            )
        })
        .collect();
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let prepared = dataset_variant(&run, seed, cfg.dataset.variant, &names(&classes))
            .and_then(|d| Ok((d, Backbone::pretrained(backbone_id, run.resolved_asset_dir().as_deref())?)));
        let (data, backbone) = match prepared {
            Ok(v) => v,
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                for cell in &mut cells {
                    cell.tallies.iter_mut().for_each(|t| t.fail(seed, &e));
                }
                continue;
            }
        };
        for (ci, (class, _)) in classes.iter().enumerate() {
            let loaded = data
                .train_images(class)
                .and_then(|tr| Ok((tr, data.samples(class, Split::Test)?)));
            for cell in &mut cells {
                let t0 = Instant::now();
                let outcome = loaded.as_ref().map_err(clone_err).and_then(|(train, test)| {
                    let s = evaluate_scorer(cell.conditions.scorer, &backbone, train, test, &run.scorer, run.profile)?;
                    write_heatmaps(&run, seed, class, cell.conditions.scorer, test, &s.results)?;
                    Ok(s)
                });
                cell.tallies[ci].record(seed, outcome);
                cell.seconds += t0.elapsed().as_secs_f64();
            }
        }
    }
    let results: Vec<_> = cells
        .into_iter()
        .map(|c| c.finish(Study::Evaluate, &cfg.seeds, &classes))
        .collect();
    let mut md = String::from("| class | kind | scorer | image AUROC | pixel AUROC |\n|---|---|---|---|---|\n");
    for r in &results {
        for c in &r.classes {
            md += &format!(
                "| {} | {:?} | {} | {} | {} |\n",
                c.class,
                c.kind,
                r.conditions.scorer,
                fmt(c.image_auroc),
                fmt(c.pixel_auroc)
            );
        }
        md += &format!(
            "| **mean** | | {} | {} | {} |\n",
            r.conditions.scorer,
            fmt(r.mean_image_auroc),
            fmt(r.mean_pixel_auroc)
        );
    }
    Ok(StudyReport {
        study: Study::Evaluate,
        results,
        markdown: md,
    })
}

fn clone_err(e: &Error) -> Error {
    Error::Invalid(e.to_string())
}

fn write_heatmaps(
    cfg: &RunConfig,
    seed: u64,
    class: &str,
    scorer: ScorerKind,
    test: &[Sample],
    results: &[ScoreResult],
) -> Result<()> {
    let dir = cfg.output_dir.join("heatmaps");
    let picked = test
        .iter()
        .zip(results)
        .filter(|(s, r)| s.record.is_anomalous() && r.score_map.is_some())
        .take(cfg.heatmaps);
    for (i, (s, r)) in picked.enumerate() {
        let path = dir.join(format!("seed{seed}_{class}_{scorer}_{i}.png"));
        render_heatmap(r.score_map.as_ref().expect("filtered"), &s.image, s.mask.as_ref(), &path)?;
    }
    Ok(())
}

/// Hook for [`run_alignment_study_with`]: the three dataset variants, in
/// misaligned / original / aligned order, for one seed.
pub type VariantBuilder<'a> = dyn FnMut(&RunConfig, u64, &[String]) -> Result<[DatasetRef; 3]> + 'a;

fn build_variants(cfg: &RunConfig, seed: u64, classes: &[String]) -> Result<[DatasetRef; 3]> {
    let src = original_dataset(cfg, seed)?;
    let mis = misaligned_dataset(cfg, seed, &src)?;
    let al = aligned_dataset(cfg, seed, &src, classes)?;
    Ok([mis, src, al])
}

/// Each scorer on the misaligned, original and aligned variants, with
/// deltas against the original. Defaults to the object classes.
pub fn run_alignment_study(cfg: &RunConfig) -> Result<StudyReport> {
    run_alignment_study_with(cfg, &mut build_variants)
}

pub fn run_alignment_study_with(cfg: &RunConfig, variants: &mut VariantBuilder<'_>) -> Result<StudyReport> {
    cfg.validate()?;
    let classes = study_classes(cfg, |k| k == ClassKind::Object)?;
    let backbone = Backbone::pretrained(cfg.backbone, cfg.resolved_asset_dir().as_deref())?;
    let mut cells: Vec<Cell> = Vec::new();
    for &scorer in &cfg.scorers {
        for variant in DatasetVariant::ALL {
            cells.push(Cell::new(
                Conditions {
                    variant,
                    scorer,
                    backbone: cfg.backbone,
                    hl: false,
                    augmentation: None,
                },
                classes.len(),
            ));
        }
    }
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let sets = match variants(&run, seed, &names(&classes)) {
            Ok(s) => s,
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                for cell in &mut cells {
                    cell.tallies.iter_mut().for_each(|t| t.fail(seed, &e));
                }
                continue;
            }
        };
        for (ci, (class, _)) in classes.iter().enumerate() {
            for (vi, data) in sets.iter().enumerate() {
                let loaded = data
                    .train_images(class)
                    .and_then(|tr| Ok((tr, data.samples(class, Split::Test)?)));
                for cell in cells.iter_mut().skip(vi).step_by(3) {
                    let t0 = Instant::now();
                    let outcome = loaded.as_ref().map_err(clone_err).and_then(|(train, test)| {
                        evaluate_scorer(cell.conditions.scorer, &backbone, train, test, &run.scorer, run.profile)
                    });
                    cell.tallies[ci].record(seed, outcome);
                    cell.seconds += t0.elapsed().as_secs_f64();
                }
            }
        }
    }
    let mut results: Vec<ExperimentResult> = cells
        .into_iter()
        .map(|c| c.finish(Study::Alignment, &cfg.seeds, &classes))
        .collect();
    for chunk in results.chunks_mut(3) {
        let reference = chunk[1].clone();
        chunk[0].set_deltas(&reference);
        chunk[2].set_deltas(&reference);
    }
    let markdown = alignment_table(&results);
    Ok(StudyReport {
        study: Study::Alignment,
        results,
        markdown,
    })
}

fn alignment_table(results: &[ExperimentResult]) -> String {
    let mut md = String::new();
    for chunk in results.chunks(3) {
        md += &format!("### {}\n\n| class | misaligned | original | aligned |\n|---|---|---|---|\n", chunk[0].conditions.scorer);
        for (ci, c) in chunk[1].classes.iter().enumerate() {
            for pixel in [false, true] {
                let cells: Vec<String> = chunk
                    .iter()
                    .map(|r| {
                        let cr = &r.classes[ci];
                        if pixel {
                            format!("{}{}", fmt(cr.pixel_auroc), fmt_delta(cr.delta_pixel))
                        } else {
                            format!("{}{}", fmt(cr.image_auroc), fmt_delta(cr.delta_image))
                        }
                    })
                    .collect();
                let label = if pixel { "pixel" } else { "image" };
                md += &format!("| {} ({label}) | {} |\n", c.class, cells.join(" | "));
            }
        }
        for pixel in [false, true] {
            let cells: Vec<String> = chunk
                .iter()
                .map(|r| {
                    if pixel {
                        format!("{}{}", fmt(r.mean_pixel_auroc), fmt_delta(r.delta_pixel))
                    } else {
                        format!("{}{}", fmt(r.mean_image_auroc), fmt_delta(r.delta_image))
                    }
                })
                .collect();
            let label = if pixel { "pixel" } else { "image" };
            md += &format!("| **mean** ({label}) | {} |\n", cells.join(" | "));
        }
        md += "\n";
    }
    md
}

/// Baseline and fine-tuned backbones for one class and seed.
struct HlOutcome {
    baseline: Backbone,
    selected: Option<(Backbone, usize)>,
    train: Vec<Image>,
    test: Vec<Sample>,
}

/// Fine-tunes `backbone_id` on the class normals and picks a checkpoint.
/// A failed fine-tune leaves `selected` empty so baseline cells still run.
fn hl_for_class(
    run: &RunConfig,
    seed: u64,
    data: &DatasetRef,
    class: &str,
    backbone_id: BackboneId,
    on_augment: &mut dyn FnMut(&AugmentationPolicy),
) -> Result<(HlOutcome, Option<Error>)> {
    let baseline = Backbone::pretrained(backbone_id, run.resolved_asset_dir().as_deref())?;
    let train = data.train_images(class)?;
    let test = data.samples(class, Split::Test)?;
    let mut shl = run.shl.clone();
    shl.backbone = backbone_id;
    let picked = finetune_observed(baseline.clone(), &train, &shl, None, on_augment).and_then(|series| {
        let set = selection_set(&train, &test, &run.selection, seed)?;
        let (ck, scores) = select_by_auroc(&series, &set, run.selection.scorer, &run.scorer, run.profile)?;
        log::info!(
            "{class} seed {seed}: selected iteration {} ({} checkpoints, best {:.4})",
            ck.iteration,
            scores.len(),
            scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
        Ok((ck.backbone.clone(), ck.iteration))
    });
    let (selected, err) = match picked {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e)),
    };
    Ok((
        HlOutcome {
            baseline,
            selected,
            train,
            test,
        },
        err,
    ))
}

/// Shared driver of the fine-tuning studies. `arms` lists the
/// (backbone, augmentation) pairs to fine-tune; each yields a baseline
/// cell and a fine-tuned cell per scorer.
fn run_hl_grid(
    cfg: &RunConfig,
    study: Study,
    arms: &[(BackboneId, AugmentationPolicy)],
    tag_augmentation: bool,
    on_augment: &mut dyn FnMut(&AugmentationPolicy),
) -> Result<Vec<ExperimentResult>> {
    cfg.validate()?;
    let classes = study_classes(cfg, |_| true)?;
    // Cell layout: arm-major, then scorer, then [baseline, fine-tuned].
    let mut cells: Vec<Cell> = Vec::new();
    for (backbone, policy) in arms {
        for &scorer in &cfg.scorers {
            for hl in [false, true] {
                cells.push(Cell::new(
                    Conditions {
                        variant: cfg.dataset.variant,
                        scorer,
                        backbone: *backbone,
                        hl,
                        augmentation: tag_augmentation.then_some(policy.category),
                    },
                    classes.len(),
                ));
            }
        }
    }
    let per_arm = 2 * cfg.scorers.len();
    for &seed in &cfg.seeds {
        let base_run = cfg.for_seed(seed);
        let data = match dataset_variant(&base_run, seed, cfg.dataset.variant, &names(&classes)) {
            Ok(d) => d,
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                for cell in &mut cells {
                    cell.tallies.iter_mut().for_each(|t| t.fail(seed, &e));
                }
                continue;
            }
        };
        for (ai, (backbone_id, policy)) in arms.iter().enumerate() {
            let mut run = base_run.clone();
            run.shl.augmentation = *policy;
            let arm_cells = &mut cells[ai * per_arm..(ai + 1) * per_arm];
            for (ci, (class, _)) in classes.iter().enumerate() {
                let t0 = Instant::now();
                let (outcome, ft_err) = match hl_for_class(&run, seed, &data, class, *backbone_id, on_augment) {
                    Ok(v) => v,
                    Err(e) => {
                        for cell in arm_cells.iter_mut() {
                            cell.tallies[ci].fail(seed, &e);
                        }
                        continue;
                    }
                };
                let train_secs = t0.elapsed().as_secs_f64();
                for pair in arm_cells.chunks_mut(2) {
                    let scorer = pair[0].conditions.scorer;
                    let t1 = Instant::now();
                    let base = evaluate_scorer(scorer, &outcome.baseline, &outcome.train, &outcome.test, &run.scorer, run.profile);
                    pair[0].tallies[ci].record(seed, base);
                    pair[0].seconds += t1.elapsed().as_secs_f64();
                    let t2 = Instant::now();
                    match (&outcome.selected, &ft_err) {
                        (Some((bb, iter)), _) => {
                            let s = evaluate_scorer(scorer, bb, &outcome.train, &outcome.test, &run.scorer, run.profile);
                            pair[1].tallies[ci].record(seed, s);
                            pair[1].tallies[ci].iters.push(*iter);
                        }
                        (None, Some(e)) => pair[1].tallies[ci].fail(seed, e),
                        (None, None) => unreachable!("fine-tune produced neither checkpoint nor error"),
                    }
                    pair[1].seconds += t2.elapsed().as_secs_f64() + train_secs / cfg.scorers.len() as f64;
                }
            }
        }
    }
    let mut results: Vec<ExperimentResult> = cells
        .into_iter()
        .map(|c| c.finish(study, &cfg.seeds, &classes))
        .collect();
    for pair in results.chunks_mut(2) {
        let reference = pair[0].clone();
        pair[1].set_deltas(&reference);
    }
    Ok(results)
}

/// Each scorer with the baseline backbone against the selected fine-tuned
/// checkpoint, split by object and texture classes.
pub fn run_hl_study(cfg: &RunConfig) -> Result<StudyReport> {
    let results = run_hl_grid(cfg, Study::Hl, &[(cfg.backbone, cfg.shl.augmentation)], false, &mut |_| {})?;
    let markdown = hl_table(&results);
    Ok(StudyReport {
        study: Study::Hl,
        results,
        markdown,
    })
}

fn hl_table(results: &[ExperimentResult]) -> String {
    let mut md = String::from(
        "| scorer | backbone | split | baseline image | HL image | baseline pixel | HL pixel |\n|---|---|---|---|---|---|---|\n",
    );
    for pair in results.chunks(2) {
        let (b, h) = (&pair[0], &pair[1]);
        for (label, kind) in [("object", Some(ClassKind::Object)), ("texture", Some(ClassKind::Texture)), ("total", None)] {
            let bi = b.split_mean(kind, false);
            let hi = h.split_mean(kind, false);
            let bp = b.split_mean(kind, true);
            let hp = h.split_mean(kind, true);
            if bi.is_none() && hi.is_none() {
                continue;
            }
            let d = |a: Option<f64>, r: Option<f64>| fmt_delta(a.zip(r).map(|(a, r)| a - r));
            md += &format!(
                "| {} | {} | {label} | {} | {}{} | {} | {}{} |\n",
                b.conditions.scorer,
                b.conditions.backbone,
                fmt(bi),
                fmt(hi),
                d(hi, bi),
                fmt(bp),
                fmt(hp),
                d(hp, bp)
            );
        }
    }
    md
}

/// Fine-tuning under each augmentation category; per-class (image, pixel)
/// pairs with a row-wise max column.
pub fn run_augmentation_study(cfg: &RunConfig) -> Result<StudyReport> {
    run_augmentation_study_with(cfg, &AugmentationCategory::STUDY, &mut |_| {})
}

/// [`run_augmentation_study`] over `categories`; `on_augment` sees the
/// policy of every augmented training sample.
pub fn run_augmentation_study_with(
    cfg: &RunConfig,
    categories: &[AugmentationCategory],
    on_augment: &mut dyn FnMut(&AugmentationPolicy),
) -> Result<StudyReport> {
    if categories.is_empty() {
        return Err(Error::Validation("no augmentation categories".into()));
    }
    let arms: Vec<_> = categories
        .iter()
        .map(|&c| {
            (
                cfg.backbone,
                AugmentationPolicy {
                    category: c,
                    ..cfg.shl.augmentation
                },
            )
        })
        .collect();
    let results = run_hl_grid(cfg, Study::Augmentation, &arms, true, on_augment)?;
    let markdown = grid_table(&results, |c| {
        c.augmentation.map_or("none", |a| a.as_str()).to_string()
    });
    Ok(StudyReport {
        study: Study::Augmentation,
        results,
        markdown,
    })
}

/// Fine-tuning with each registered backbone. Backbones without weights
/// show up as failed cells.
pub fn run_backbone_study(cfg: &RunConfig) -> Result<StudyReport> {
    run_backbone_study_with(cfg, &BackboneId::ALL)
}

pub fn run_backbone_study_with(cfg: &RunConfig, backbones: &[BackboneId]) -> Result<StudyReport> {
    if backbones.is_empty() {
        return Err(Error::Validation("no backbones".into()));
    }
    let arms: Vec<_> = backbones.iter().map(|&b| (b, cfg.shl.augmentation)).collect();
    let results = run_hl_grid(cfg, Study::Backbone, &arms, false, &mut |_| {})?;
    let markdown = grid_table(&results, |c| c.backbone.to_string());
    Ok(StudyReport {
        study: Study::Backbone,
        results,
        markdown,
    })
}

/// Row-wise maxima of the fine-tuned cells of a grid: `(image, pixel)` per
/// class, keyed by scorer.
pub fn grid_max(results: &[ExperimentResult]) -> BTreeMap<(String, String), (Option<f64>, Option<f64>)> {
    let mut out: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    let max = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    };
    for r in results.iter().filter(|r| r.conditions.hl) {
        for c in &r.classes {
            let e = out
                .entry((r.conditions.scorer.to_string(), c.class.clone()))
                .or_insert((None, None));
            *e = (max(e.0, c.image_auroc), max(e.1, c.pixel_auroc));
        }
    }
    out
}

fn grid_table(results: &[ExperimentResult], column: impl Fn(&Conditions) -> String) -> String {
    let tuned: Vec<&ExperimentResult> = results.iter().filter(|r| r.conditions.hl).collect();
    let maxima = grid_max(results);
    let mut scorers: Vec<ScorerKind> = Vec::new();
    for r in &tuned {
        if !scorers.contains(&r.conditions.scorer) {
            scorers.push(r.conditions.scorer);
        }
    }
    let pair = |i: Option<f64>, p: Option<f64>| format!("{} / {}", fmt(i), fmt(p));
    let mut md = String::new();
    for scorer in scorers {
        let cols: Vec<&&ExperimentResult> = tuned.iter().filter(|r| r.conditions.scorer == scorer).collect();
        md += &format!("### {scorer} (image / pixel)\n\n| class |");
        for r in &cols {
            md += &format!(" {} |", column(&r.conditions));
        }
        md += " max |\n|---|";
        md += &"---|".repeat(cols.len() + 1);
        md += "\n";
        for (ci, c) in cols[0].classes.iter().enumerate() {
            md += &format!("| {} |", c.class);
            for r in &cols {
                let cr = &r.classes[ci];
                match &cr.failure {
                    Some(_) => md += " failed |",
                    None => md += &format!(" {} |", pair(cr.image_auroc, cr.pixel_auroc)),
                }
            }
            let (mi, mp) = maxima[&(scorer.to_string(), c.class.clone())];
            md += &format!(" {} |\n", pair(mi, mp));
        }
        md += "\n";
    }
    md
}

/// Dispatches `study` and writes its results plus the config snapshot
/// into the output directory.
pub fn run_study(study: Study, cfg: &RunConfig) -> Result<StudyReport> {
    let report = match study {
        Study::Evaluate => run_evaluation(cfg)?,
        Study::Alignment => run_alignment_study(cfg)?,
        Study::Hl => run_hl_study(cfg)?,
        Study::Augmentation => run_augmentation_study(cfg)?,
        Study::Backbone => run_backbone_study(cfg)?,
    };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.output_dir = dir.to_path_buf();
        cfg.dataset.toy.size = 32;
        cfg.dataset.toy.train_good = 8;
        cfg.dataset.toy.test_good = 3;
        cfg.dataset.toy.test_defect = 3;
        cfg.scorers = vec![ScorerKind::Padim, ScorerKind::Mahad];
        cfg.shl.iterations = 4;
        cfg.shl.checkpoint_every = 2;
        cfg.shl.batch_size = 2;
        cfg.aligner.iterations = 4;
        cfg.aligner.batch_size = 2;
        cfg.heatmaps = 1;
        cfg
    }

    #[test]
    fn study_names_validated() {
        for s in Study::ALL {
            assert_eq!(s.as_str().parse::<Study>().unwrap(), s);
        }
        assert!("table9".parse::<Study>().unwrap_err().is_validation());
    }

    #[test]
    fn identical_variants_give_zero_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = run_alignment_study_with(&cfg, &mut |run, seed, _| {
            let d = original_dataset(run, seed)?;
            Ok([d.clone(), d.clone(), d])
        })
        .unwrap();
        assert_eq!(report.results.len(), 6);
        for r in &report.results {
            assert!(!r.failed());
            assert_eq!(r.classes.len(), 1, "object classes only");
            if r.conditions.variant != DatasetVariant::Original {
                assert_eq!(r.delta_image, Some(0.0));
                assert!(r.classes.iter().all(|c| c.delta_image == Some(0.0)));
            }
        }
        let mahad = report.results.iter().find(|r| r.conditions.scorer == ScorerKind::Mahad).unwrap();
        assert_eq!(mahad.mean_pixel_auroc, None);
        assert!(report.markdown.contains("(+0.0000)"));
    }

    #[test]
    fn frozen_finetune_gives_zero_hl_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.shl.optimizer = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let report = run_hl_study(&cfg).unwrap();
        assert_eq!(report.results.len(), 4);
        for pair in report.results.chunks(2) {
            assert!(!pair[0].conditions.hl && pair[1].conditions.hl);
            assert_eq!(pair[1].delta_image, Some(0.0));
            assert_eq!(pair[0].classes, {
                let mut c = pair[1].classes.clone();
                for x in &mut c {
                    x.selected_iteration.clear();
                    x.delta_image = None;
                    x.delta_pixel = None;
                }
                c
            });
            // Ties go to the first checkpoint.
            assert!(pair[1].classes.iter().all(|c| c.selected_iteration == vec![2]));
        }
        let kinds: Vec<ClassKind> = report.results[0].classes.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![ClassKind::Object, ClassKind::Texture]);
        assert!(report.markdown.contains("| object |") && report.markdown.contains("| texture |"));
    }

    #[test]
    fn single_category_grid_matches_hl_study_and_sees_policy() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.scorers = vec![ScorerKind::Padim];
        cfg.classes = vec!["widget".into()];
        cfg.shl.augmentation.category = AugmentationCategory::Shape;
        let hl = run_hl_study(&cfg).unwrap();
        let mut seen = Vec::new();
        let grid = run_augmentation_study_with(&cfg, &[AugmentationCategory::Shape], &mut |p| seen.push(*p)).unwrap();
        assert_eq!(seen.len(), cfg.shl.iterations * cfg.shl.batch_size);
        assert!(seen.iter().all(|p| *p == cfg.shl.augmentation));
        let strip = |r: &ExperimentResult| (r.classes.clone(), r.mean_image_auroc, r.mean_pixel_auroc);
        assert_eq!(strip(&grid.results[1]), strip(&hl.results[1]));
        assert_eq!(grid.results[1].conditions.augmentation, Some(AugmentationCategory::Shape));

        let mut seen = Vec::new();
        run_augmentation_study_with(&cfg, &[AugmentationCategory::Color], &mut |p| seen.push(p.category)).unwrap();
        assert!(!seen.is_empty() && seen.iter().all(|c| *c == AugmentationCategory::Color));
    }

    #[test]
    fn max_column_is_rowwise_max() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.scorers = vec![ScorerKind::Padim];
        cfg.classes = vec!["widget".into()];
        let report = run_augmentation_study_with(
            &cfg,
            &[AugmentationCategory::Shape, AugmentationCategory::Color],
            &mut |_| {},
        )
        .unwrap();
        let tuned: Vec<_> = report.results.iter().filter(|r| r.conditions.hl).collect();
        let expect = tuned
            .iter()
            .map(|r| r.classes[0].image_auroc.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let m = grid_max(&report.results);
        assert_eq!(m[&("padim".to_string(), "widget".to_string())].0, Some(expect));
        assert!(report.markdown.contains("| max |"));
    }

    #[test]
    fn unavailable_backbones_become_failed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.scorers = vec![ScorerKind::Mahad];
        cfg.classes = vec!["widget".into()];
        let report = run_backbone_study_with(&cfg, &[BackboneId::CompactCnn, BackboneId::Resnet18]).unwrap();
        assert!(report.any_failed());
        assert!(!report.results[0].failed() && !report.results[1].failed());
        assert!(report.results[2].failed() && report.results[3].failed());
        assert!(report.results[3].classes[0].failure.as_ref().unwrap().contains("resnet18"));
        assert!(report.markdown.contains("failed"));
    }

    #[test]
    fn evaluation_writes_results_and_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = run_study(Study::Evaluate, &cfg).unwrap();
        let back = StudyReport::load_results(dir.path()).unwrap();
        assert_eq!(back, report.results);
        for r in &report.results {
            let m = mean(r.classes.iter().map(|c| c.image_auroc.unwrap())).unwrap();
            assert!((r.mean_image_auroc.unwrap() - m).abs() < 1e-12);
            for c in &r.classes {
                let v = c.image_auroc.unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let pngs = std::fs::read_dir(dir.path().join("heatmaps")).unwrap().count();
        assert_eq!(pngs, 2, "one panel per class for the pixel scorer");
    }

    #[test]
    fn missing_class_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.classes = vec!["nope".into()];
        assert!(run_evaluation(&cfg).unwrap_err().is_validation());
    }

    #[test]
    fn validation_split_is_disjoint_and_labeled() {
        let imgs: Vec<Image> = (0..10).map(|i| Image::filled(32, 32, 3, i as f32 * 10.0)).collect();
        let cfg = SelectionConfig::default();
        let set = validation_set(&imgs, &cfg, 4).unwrap();
        assert_eq!(set.fit.len(), 8);
        assert_eq!(set.probe.len(), 4);
        assert_eq!(set.labels, vec![false, false, true, true]);
        for p in &set.probe[..2] {
            assert!(!set.fit.contains(p));
        }
        assert_eq!(validation_set(&imgs, &cfg, 4).unwrap().probe, set.probe);
        assert!(validation_set(&imgs[..2], &cfg, 0).is_err());
    }
}
