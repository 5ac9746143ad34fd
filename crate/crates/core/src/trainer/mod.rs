//! Configuration, training loop and experiment suites.

pub mod config;
pub mod experiments;
pub mod model;
pub mod run;

pub use config::{Profile, TrainConfig};
pub use model::{similarity, BatchItem, Model};
pub use run::{evaluate_checkpoint, evaluate_split, prepare, split_similarity, train, EpochLog, PreparedSplit, RunReport, TrainedRun};
pub use experiments::{
    ablation_csv, ablation_settings, line_chart_svg, loss_chart, mim_comparison_csv, parse_sweep_csv,
    run_ablation, run_mim_comparison, run_sweep, sweep_charts, sweep_csv, sweep_points, ExperimentRun,
    Series, SweepRow, SWEEP_BETAS, SWEEP_BETA_MASK_RATES, SWEEP_MASK_RATES,
};
