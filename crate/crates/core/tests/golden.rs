//! Frozen outputs. Set `HOMAD_BLESS=1` to rewrite them after an
//! intentional change.

use std::path::PathBuf;

use homad::eval::heatmap_panel;
use homad::geometry::ImageFrame;
use homad::scorers::{to_score_map, ScoreMap};
use homad::synthesis::{render_toy_sample, sample_inward_perturbation, ToyClassSpec, ToyDefect, ToyKind};
use homad::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn bless() -> bool {
    std::env::var_os("HOMAD_BLESS").is_some()
}

#[test]
fn seeded_perturbation_matches_golden() {
    let frame = ImageFrame::new(128, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let d = sample_inward_perturbation(&mut rng, 32.0, &frame).unwrap().to_flat();
    let path = golden("perturbation.json");
    if bless() {
        std::fs::write(&path, serde_json::to_string_pretty(&d.to_vec()).unwrap() + "\n").unwrap();
    }
    let want: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(d.to_vec(), want);
}

fn widget() -> ToyClassSpec {
    ToyClassSpec {
        name: "widget".into(),
        kind: ToyKind::Object,
        pose_jitter_deg: 10.0,
        defects: vec![ToyDefect::Spot],
        defect_contrast: 1.0,
    }
}

/// Score map derived from the mask alone, so the panel does not depend on
/// any backbone.
fn mask_map(mask: &Image) -> ScoreMap {
    let grid: Vec<f64> = mask.data().iter().map(|&v| v as f64 / 255.0).collect();
    to_score_map(&grid, mask.height(), mask.width(), mask.height(), mask.width(), 3.0)
}

#[test]
fn heatmap_panel_matches_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (img, mask) = render_toy_sample(&widget(), 64, Some(ToyDefect::Spot), &mut rng);
    let mask = mask.expect("defective sample has a mask");
    let panel = heatmap_panel(&mask_map(&mask), &img, Some(&mask)).unwrap();
    let path = golden("heatmap_panel.png");
    if bless() {
        panel.save_png(&path).unwrap();
    }
    let want = Image::load_png(&path).unwrap();
    assert_eq!(panel.dims(), want.dims());
    assert_eq!(panel.quantized(), want);
}
