//! Generative (flow-matching) and discriminative (frozen-backbone) token probes.

pub mod discrim;
pub mod flow;

pub use discrim::{
    audio_project, majority_tasks, probe_train_eval, DiscrimConfig, DiscriminativeProbe, ProbeReport, ProbeTask,
};
pub use flow::{fm_loss_value, fm_sample, FlowConfig, FlowProbe, FlowState, OracleField, VelocityField};
