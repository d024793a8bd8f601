//! selfcrit builds training data for small medical reasoning models in two
//! stages: it distills long chain-of-thought SFT records from a teacher
//! endpoint, then samples the tuned student, lets the teacher judge each
//! sample as correct or incorrect, and pairs the two partitions into DPO
//! preference data. A toy-policy reference implementation of the SFT and DPO
//! objectives (with a finite-difference gradient oracle) and a multiple-choice
//! accuracy evaluator round out the pipeline.

pub mod config;
pub mod dpo;
pub mod eval;
pub mod gateway;
pub mod mock;
pub mod pairs;
pub mod pipeline;
pub mod sft;
pub mod templates;
pub mod util;
