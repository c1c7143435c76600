//! Masked feature reconstruction over multi-scale local visual fields with a
//! frozen teacher, plus segmentation finetuning on top of the pretrained
//! encoder.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mve;
pub mod pretrain;
pub mod rng;
pub mod run;
pub mod seg;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{lit, ParamId, ParamStore, Scalar, Session, Tape, Tensor, Var};
