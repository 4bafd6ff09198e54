//! Reproducible experiment runner: configs and presets, ablation variants,
//! parameter sweeps, CSV logs, checkpoints and SVG plots.

mod config;
pub mod plot;
mod run;

pub use config::{
    ablation_variants, ExperimentConfig, ModelConfig, PipelineConfig, Preset, ScenesConfig, SensorsConfig, Variant,
};
pub use run::{
    build_scenes, eval_checkpoint, run, run_experiment, sweep, sweep_config, write_artifacts, RunOutput, SummaryRow,
    SweepAxis, VariantRun, SUMMARY_HEADER,
};
