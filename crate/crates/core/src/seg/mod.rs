//! Segmentation finetuning: tapped encoder features, a lateral-projection
//! feature pyramid, per-pixel classification and mIoU evaluation.

mod finetune;
mod head;
mod metrics;
mod model;

pub use finetune::{argmax_classes, EpochReport, Finetuner};
pub use head::{bilinear_mix, pyramid_sizes, Level, PyramidHead, Resize, TapSpec};
pub use metrics::{miou, write_eval_csv, write_label_png, ClassIou, IouAccumulator, MiouReport};
pub use model::{encoder_params, load_encoder, segment, SegModel};
