//! Accuracy assessment, significance testing, experiment protocols and area trends.

pub mod mcnemar;
pub mod metrics;
pub mod protocol;
pub mod trends;

pub use mcnemar::{chi_square_sf, mcnemar_test, paired_counts, McNemarResult, PairedCounts};
pub use metrics::{
    confusion_matrix, evaluate_growth, growth_from_counts, summary_metrics, ClassMetrics, ConfusionMatrix, GrowthAccuracy,
    MetricsReport, Rate, Z95,
};
pub use protocol::{sample_size_sensitivity, temporal_transfer, SensitivityRow, TransferRow};
pub use trends::{area_trends, regions_from_ids, urban_form, AnnualMaps, PopulationTable, Region, TrendReport, TrendRow, URBAN_FORMS};
