//! Minimal dense-array compute with reverse-mode differentiation, the
//! parameter store, and the Adam optimizer. Substrate for every neural
//! module in the crate.

pub mod array;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use array::{Array, Scalar};
pub use gradcheck::grad_check;
pub use graph::{softmax_rows_value, Graph, NodeId, MASK_FILL_VALUE};
pub use optim::{
    adam_step, lr_schedule, OptimizerState, ScheduleEvent, DEFAULT_LEARNING_RATE,
    PLATEAU_HALVE_EPOCHS, PLATEAU_STOP_EPOCHS,
};
pub use params::ParamStore;
