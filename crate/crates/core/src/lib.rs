//! Self-supervised pre-training of crystal graph encoders with a
//! redundancy-reduction objective, and supervised fine-tuning on top.

pub mod augment;
pub mod autodiff;
pub mod featurize;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod structure_io;
pub mod pipeline;
pub mod toy;
