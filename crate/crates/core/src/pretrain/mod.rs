//! Teacher-guided masked reconstruction over local fields.

mod loss;
mod model;
mod schedule;
mod trainer;

pub use loss::reconstruction_loss;
pub use model::{
    student_forward, teacher_forward, StudentModel, StudentOutput, TeacherModel, TeacherOutput,
};
pub use schedule::{lr_at, TrainSchedule};
pub use trainer::{
    breakpoint_copy, pretrain_loop, PretrainObserver, PretrainSummary, Pretrainer, StepReport,
};
