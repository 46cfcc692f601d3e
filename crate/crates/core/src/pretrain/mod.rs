pub mod losses;
pub mod queue;
pub mod trainer;

pub use losses::{
    contrastive_loss, mine_hard_negatives, negative_weights, npp_loss, npp_targets, nwp_loss, nwp_positions,
    nwp_targets, spm_loss, ContrastiveTargets,
};
pub use queue::FeatureQueue;
pub use trainer::{
    student_losses, teacher_forward, Batch, LossContext, LossWeights, Negatives, Pretrainer, StepReport,
    StudentLosses, TeacherOutput, prepare_assets,
};
