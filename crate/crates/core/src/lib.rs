//! Writer adaptation of CTC text-line recognizers by finetuning.

pub mod adapt;
pub mod augment;
pub mod ctc;
pub mod dataset;
pub mod eval;
pub mod numerics;
pub mod raster;
pub mod recognizer;
