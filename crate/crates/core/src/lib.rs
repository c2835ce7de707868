//! Reinforcement fine-tuning of a dense retriever inside a multi-hop
//! retrieval loop.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod env;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod reward;
