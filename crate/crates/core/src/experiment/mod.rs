//! Experiment configuration, the cached stage pipeline behind the command
//! line, and report rendering.

mod config;
mod manifest;
mod pipeline;
mod report;

pub use config::{AblationSection, EvalSection, ExperimentConfig, JudgeSection, ModelSection};
pub use manifest::{dir_digest, find_manifests, versions, Manifest, MANIFEST_FILE};
pub use pipeline::{
    ablation_table, AblationCell, AblationRow, AblationTable, ContentSource, EvalRun, GenerationStats, Init,
    JudgePair, Pipeline, RunCurve, SampleRecord, CELL_FILE, CHECKPOINT_FILE, CODEC_FILE, CURVE_FILE, EVAL_FILE,
    JUDGE_KEY_ENV, JUDGE_PAIRS_FILE, ROOT_ENV, TABLE_FILE, TABLE_TEXT_FILE,
};
pub use report::{
    build_report, render_ablation, render_report, write_report, EvalBlock, GenerationRow, InitBlock, InitRow,
    MissingCell, Report, TaskCell, TaskColumn, REPORT_DIR, REPORT_JSON, REPORT_TEXT,
};

/// Median of `xs`; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), Some(f64::INFINITY));
    }
}
