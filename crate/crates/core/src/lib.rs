//! Toolkit for measuring the cultural value orientation of language models
//! along Hofstede's individualism (IDV) and power distance (PDI) dimensions.
//!
//! The pipeline runs probes through a [`gateway::Gateway`], collects blind
//! Likert annotations, and turns them into a [`report::CulturalReport`].

pub mod annotation;
pub mod gateway;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod store;
