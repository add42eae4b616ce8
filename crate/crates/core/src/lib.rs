pub mod catalog;
pub mod critic;
pub mod critique_loop;
pub mod embedder;
pub mod experiment;
pub mod http;
pub mod llm;
pub mod metrics;
pub mod synthetic;
pub mod util;
