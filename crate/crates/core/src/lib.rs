//! Moral Foundations Questionnaire surveys of language models.
//!
//! Runs the 32-item questionnaire against OpenAI-compatible chat endpoints
//! under political personas, stores every exchange, and computes response
//! variance, foundation scores and distances to human reference groups.

pub mod analysis;
pub mod client;
pub mod parse;
pub mod persona;
pub mod questionnaire;
pub mod report;
pub mod runner;
pub mod statements;
