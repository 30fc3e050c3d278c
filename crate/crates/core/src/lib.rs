//! Benchmark toolkit for open-ended exploration in a deterministic crafting
//! game.
//!
//! * [`recipes`]: the element/recipe universe and its difficulty profile
//! * [`engine`]: play sessions, trial records and behavior categories
//! * [`valuation`]: empowerment and uncertainty values
//! * [`agents`]: scripted policies and the chat-completions adapter
//! * [`analytics`]: choice datasets, logistic regressions and test statistics
//! * [`sae`]: sparse autoencoders over activation matrices, probes, interventions
//! * [`trace`]: reasoning-trace segmentation, labeling and transition analysis
//! * [`harness`]: experiment orchestration, persistence and replay

pub mod agents;
pub mod analytics;
pub mod engine;
pub mod harness;
pub mod recipes;
pub mod sae;
pub mod synthetic;
pub mod trace;
pub mod valuation;
