#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
