pub mod heatmap;
pub mod metrics;
pub mod studies;

pub use heatmap::{heatmap_panel, render_heatmap};
pub use metrics::{auroc, pixel_auroc};
pub use studies::{
    run_alignment_study, run_augmentation_study, run_backbone_study, run_evaluation, run_hl_study, run_study,
    ClassResult, Conditions, ExperimentResult, StudyReport, Study,
};
