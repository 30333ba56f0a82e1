//! Measurements of attention locality, per-step linear separability and
//! view invariance, with CSV and SVG output.

mod invariance;
mod locality;
mod probe;
mod report;

pub use invariance::{make_view_pairs, view_invariance, InvarianceRecord};
pub use locality::{attention_locality, LayerSummary, LocalityAccumulator, LocalityCell, LocalityProfile};
pub use probe::{
    extract_features, fit_linear_probe, probe_per_step, probe_with_labels, split_indices, ProbeConfig, ProbeReport,
    EXTRACT_CHUNK,
};
pub use report::{
    heatmap_svg, line_chart_svg, render_report, ReportInput, INVARIANCE_CSV, INVARIANCE_HEADER, LOCALITY_CSV,
    LOCALITY_HEADER, PROBE_CSV, PROBE_HEADER,
};
