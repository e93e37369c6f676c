//! Evaluation: accuracy and ranking, faithfulness (average drop/increase,
//! deletion and insertion curves), causality under cascading randomization,
//! and the spatiality/temporality checks.

mod accuracy;
mod causality;
mod faithfulness;
mod ranking;
mod spatial;
pub mod stats;

pub use accuracy::{accuracy, ConfusionCounts};
pub use causality::{
    cascade_randomize, causality_report, chance_bound, chi_square, pearson, Axis, CausalityConfig,
    CausalityRecord, CausalityReport, ChiSquareTest, Pearson,
};
pub use faithfulness::{
    average_drop, average_increase, deletion_curve, insertion_curve, mask_by_explanation,
    trapezoid, Classifier, Curve, CurvePoint, FaithfulnessSample, DEFAULT_STEP_FRACTION,
};
pub use ranking::{
    bonferroni_dunn_q, critical_difference, rank_table, CriticalDifference, RankTable, TiePolicy,
};
pub use spatial::{
    spatiality_check, spatiotemporal_rates, spatiotemporality_check, temporality_check,
    SpatiotemporalRates, UNIFORM_TOL,
};
