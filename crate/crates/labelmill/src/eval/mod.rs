//! Evaluation suite: agreement statistics, classification reports, and the
//! human/LLM task harness for pairwise label accuracy and label relevance.

pub mod agreement;
pub mod kappa;
pub mod llm;
pub mod metrics;
pub mod pairwise;

pub use agreement::{agreement_report, AgreementReport};
pub use kappa::{cohen_kappa, fleiss_kappa, Kappa};
pub use llm::LlmRater;
pub use metrics::{
    classification_report, confusion_csv, ClassificationReport, Prf, ReportMode,
};
pub use pairwise::{
    hit_rate, make_pairwise_tasks, make_relevance_tasks, relevance_rate, PairwiseTask,
    PairwiseTaskSet, Position, RaterResponse, RelevanceResponse, RelevanceTask,
};
