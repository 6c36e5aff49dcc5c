//! Cohort generation and I/O, connectivity features and brain graphs.

pub mod cohort;
pub mod features;
pub mod graph;
pub mod prepare;
pub mod synth;
pub mod templates;

pub use cohort::{Cohort, Subject};
pub use features::{bandpass_filter, fisher_z, pearson_fc, sliding_window_features, StaticFeatures};
pub use graph::{edge_dropout, knn_graph, BrainGraph, Edge};
pub use prepare::{prepare_all, prepare_filtered, prepare_subject, FeatureConfig, PreparedSubject, Scaler};
pub use synth::{generate_cohort, SynthSpec};
pub use templates::{group_templates, GroupTemplates};
