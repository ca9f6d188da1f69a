use std::fs;
use std::path::{Path, PathBuf};

use homad::alignment::AlignerModel;
use homad::backbone::Backbone;
use homad::config::{DatasetVariant, RunConfig, SelectionProtocol};
use homad::dataset::{ClassKind, DatasetManifest, Split, MANIFEST_FILE};
use homad::eval::studies::{
    aligned_into, apply_class_aligner, misaligned_into, original_dataset, run_study, select_by_auroc,
    selection_set, study_classes, train_class_aligner, DatasetRef,
};
use homad::geometry::ImageFrame;
use homad::raster::Image;
use homad::shl::{finetune_with_state, resume_state, SERIES_INDEX};
use homad::synthesis::generate_toy_dataset;
use homad::{Error, Result};
use rand::SeedableRng;

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Inputs are never written to: the output directory must not overlap the
/// source dataset.
fn check_paths(cfg: &RunConfig) -> Result<()> {
    let Some(src) = &cfg.dataset.root else {
        return Ok(());
    };
    if !src.join(MANIFEST_FILE).is_file() {
        return Err(invalid(format!("no {MANIFEST_FILE} in {}", src.display())));
    }
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (src, out) = (abs(src), abs(&cfg.output_dir));
    if out.starts_with(&src) || src.starts_with(&out) {
        return Err(invalid("output directory overlaps the source dataset"));
    }
    Ok(())
}

/// Validates, then writes the snapshot before any work starts.
fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    check_paths(cfg)?;
    let path = cfg.write_snapshot(&cfg.output_dir)?;
    log::info!("config snapshot: {}", path.display());
    Ok(())
}

fn single_seed(cfg: &RunConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        _ => Err(invalid("this command takes exactly one seed")),
    }
}

/// Removes a directory this tool owns so reruns start clean.
fn fresh_dir(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        fs::remove_dir_all(p)?;
    }
    Ok(p.to_path_buf())
}

fn dataset_out(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

pub fn synthesize(cfg: &RunConfig) -> Result<bool> {
    let seed = single_seed(cfg)?;
    let root = &cfg.dataset.root;
    match (root, cfg.dataset.variant) {
        (None, DatasetVariant::Original) => {}
        (None, _) => return Err(invalid("building a variant needs a source dataset")),
        (Some(_), DatasetVariant::Original) => {
            return Err(invalid("nothing to synthesize: choose --toy or a misaligned/aligned variant"))
        }
        _ => {}
    }
    prepare(cfg)?;
    let dst = fresh_dir(&dataset_out(cfg))?;
    let manifest = match root {
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            generate_toy_dataset(&cfg.dataset.toy, &mut rng, &dst)?
        }
        Some(src) => {
            let src = DatasetRef::open(src)?;
            match cfg.dataset.variant {
                DatasetVariant::Misaligned => misaligned_into(cfg, seed, &src, &dst)?.manifest,
                _ => {
                    let classes = class_names(cfg, |k| k == ClassKind::Object)?;
                    aligned_into(cfg, seed, &src, &classes, &dst)?.manifest
                }
            }
        }
    };
    log::info!("wrote {} images to {}", manifest.images.len(), dst.display());
    Ok(true)
}

fn class_names(cfg: &RunConfig, keep: impl Fn(ClassKind) -> bool) -> Result<Vec<String>> {
    Ok(study_classes(cfg, keep)?.into_iter().map(|(n, _)| n).collect())
}

pub fn align(cfg: &RunConfig) -> Result<bool> {
    let seed = single_seed(cfg)?;
    let Some(src_root) = &cfg.dataset.root else {
        return Err(invalid("align needs a source dataset (--source)"));
    };
    let src = DatasetRef::open(src_root)?;
    let classes = class_names(cfg, |k| k == ClassKind::Object)?;
    let acfg = cfg.for_seed(seed).aligner;
    // Load or check everything up front so nothing trains on a bad config.
    let loaded: Option<Vec<(AlignerModel, Image)>> = match &cfg.aligner_checkpoint {
        Some(dir) => Some(
            classes
                .iter()
                .map(|c| {
                    let a = AlignerModel::load(&dir.join(c))
                        .map_err(|e| invalid(format!("aligner for `{c}` in {}: {e}", dir.display())))?;
                    let id = a
                        .template_id
                        .clone()
                        .ok_or_else(|| invalid(format!("aligner for `{c}` records no template image")))?;
                    let t = Image::load_png(&src.root.join(&id))
                        .map_err(|e| invalid(format!("template `{id}` of `{c}`: {e}")))?;
                    Ok((a, t))
                })
                .collect::<Result<_>>()?,
        ),
        None => {
            for c in &classes {
                acfg.pick_template(src.manifest.images_of(c, Split::Train).count())
                    .map_err(|e| invalid(format!("class `{c}`: {e}")))?;
            }
            None
        }
    };
    prepare(cfg)?;
    let dst = fresh_dir(&dataset_out(cfg))?;
    let mut merged = DatasetManifest::new(
        src.manifest
            .classes
            .iter()
            .filter(|c| classes.contains(&c.name))
            .cloned()
            .collect(),
    );
    let mut flagged = 0;
    for (i, class) in classes.iter().enumerate() {
        let (aligner, template) = match &loaded {
            Some(v) => v[i].clone(),
            None => {
                let (a, t) = train_class_aligner(&acfg, &src, class)?;
                let base = cfg.output_dir.join("aligners").join(class);
                a.save(&base)?;
                log::info!("{class}: aligner saved to {}", base.display());
                (a, t)
            }
        };
        let recs = apply_class_aligner(&aligner, &template, &src, class, &dst)?;
        flagged += recs.iter().filter(|r| !r.flags.is_empty()).count();
        merged.images.extend(recs);
    }
    merged.save(&dst.join(MANIFEST_FILE))?;
    log::info!(
        "aligned {} images into {} ({flagged} flagged)",
        merged.images.len(),
        dst.display()
    );
    Ok(true)
}

pub fn finetune(cfg: &RunConfig, resume: bool) -> Result<bool> {
    if cfg.dataset.variant != DatasetVariant::Original {
        return Err(invalid("finetune runs on the source dataset; build variants with synthesize"));
    }
    let classes = class_names(cfg, |_| true)?;
    prepare(cfg)?;
    let mut ok = true;
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let data = original_dataset(&run, seed)?;
        let baseline = Backbone::pretrained(run.backbone, run.resolved_asset_dir().as_deref())?;
        for class in &classes {
            let dir = cfg.output_dir.join(format!("seed_{seed}")).join(class);
            match finetune_class(&run, seed, &data, class, &baseline, &dir, resume) {
                Ok(()) => {}
                Err(e) if e.is_validation() => return Err(e),
                Err(e) => {
                    log::error!("{class} seed {seed}: {e}");
                    ok = false;
                }
            }
        }
    }
    Ok(ok)
}

fn finetune_class(
    run: &RunConfig,
    seed: u64,
    data: &DatasetRef,
    class: &str,
    baseline: &Backbone,
    dir: &Path,
    resume: bool,
) -> Result<()> {
    let train = data.train_images(class)?;
    let test = data.samples(class, Split::Test)?;
    let ckpt_dir = dir.join("checkpoints");
    let state = if resume && ckpt_dir.join(SERIES_INDEX).is_file() {
        let frame = ImageFrame::of(&train[0])?;
        let (t, s) = resume_state(&ckpt_dir, (frame.height, frame.width))?;
        log::info!("{class}: resuming at step {}", t.step);
        Some((t, s))
    } else {
        fresh_dir(dir)?;
        None
    };
    let series = finetune_with_state(baseline.clone(), &train, &run.shl, state, &mut |_| {}, Some(&ckpt_dir))?;
    let set = selection_set(&train, &test, &run.selection, seed)?;
    let (ck, scores) = select_by_auroc(&series, &set, run.selection.scorer, &run.scorer, run.profile)?;
    ck.backbone.save(
        &dir.join("selected"),
        &series.config_hash,
        serde_json::json!({ "iteration": ck.iteration, "class": class, "seed": seed }),
    )?;
    let protocol = match run.selection.protocol {
        SelectionProtocol::Validation => "validation",
        SelectionProtocol::TestSet => "test_set",
    };
    let summary = serde_json::json!({
        "class": class,
        "seed": seed,
        "protocol": protocol,
        "scorer": run.selection.scorer,
        "iterations": series.entries.iter().map(|c| c.iteration).collect::<Vec<_>>(),
        "losses": series.entries.iter().map(|c| c.loss).collect::<Vec<_>>(),
        "scores": scores,
        "selected_iteration": ck.iteration,
    });
    fs::write(dir.join("selection.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    log::info!("{class} seed {seed}: selected iteration {}", ck.iteration);
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<bool> {
    prepare(cfg)?;
    let report = run_study(cfg.study, cfg)?;
    print!("{}", report.markdown);
    Ok(!report.any_failed())
}
