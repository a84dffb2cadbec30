//! Conditional front-door answer selection for knowledge-intensive question
//! answering.
//!
//! The crate has two halves. [`graph`] and [`scm`] decide when a causal
//! effect is identifiable and check adjustment formulas against exact
//! interventional distributions. The remaining modules estimate the effect of
//! a question on candidate answers with a language model: counterfactual
//! knowledge variants, clustered chains of thought, a similarity gate and a
//! sensitivity score, plus the baselines and metrics used to compare methods.

pub mod config;
pub mod contrast;
pub mod cot;
pub mod counterfactual;
pub mod estimator;
pub mod eval;
pub mod gateway;
pub mod graph;
pub mod pipeline;
pub mod prompts;
pub mod scm;

pub use config::PipelineConfig;
pub use cot::{ClusterSet, ConsistencyRecord, CotSample};
pub use counterfactual::{CounterfactualEntity, CounterfactualSet, CounterfactualVariant, WeightedEntity};
pub use estimator::{CausalScoreTable, ExtractedAnswer, SensitivityRecord};
pub use eval::{MetricsReport, Prediction, QueryRecord};
pub use gateway::{ChatBackend, ChatReply, ChatRequest, EmbeddingBackend, Gateway, ScriptedFixture};
pub use graph::{CausalDag, CriterionReport, GraphError, GraphPath, NodeSet};
pub use pipeline::{Method, Perturbation, RecordReport, RunOutput};
pub use scm::{DiscreteScm, Distribution, EffectTable, ScmError};
