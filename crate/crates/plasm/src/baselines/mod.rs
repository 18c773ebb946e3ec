//! Non-neural comparison models: a random forest over hand-crafted color
//! features, and an Otsu + watershed stain detector used as a classifier.
//! Both emit probabilities consumable by the metrics module unchanged.

pub mod features;
pub mod forest;
pub mod watershed;

pub use features::{extract_features, stain_fraction, StainConfig, FEATURE_LEN};
pub use forest::{rf_predict, train_random_forest, DecisionTree, ForestConfig, RandomForest};
pub use watershed::{
    otsu_threshold, watershed_classify, watershed_segment, SegmentationResult,
    WatershedClassifyConfig,
};
