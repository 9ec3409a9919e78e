//! Length-extrapolation sweeps, the ExPE ablation runner and report output.

mod ablation;
mod eval;
mod report;
mod sweep;

pub use ablation::{ablation_suite, AblationOptions, AblationRun, AblationVariant};
pub use eval::{eval_loss, eval_loss_with, eval_windows, EvalStats};
pub use report::{
    compare_report, config_hash, loss_curve_svg, EvalReport, EvalRow, MergedReport, ReportMeta, CSV_HEADER,
    REPORT_SCHEMA_VERSION,
};
pub use sweep::{extrapolation_sweep, validate_grid, SweepOptions, ALLOWED_MULTIPLES};

#[cfg(test)]
mod tests;
