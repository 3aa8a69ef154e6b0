//! Deepfake video detection from two cheap preprocessing routes.
//!
//! * [`histogram`] turns a video into 300 L1-normalized grayscale histograms,
//!   which [`net`] classifies with a stateful LSTM read in chunks of 10.
//! * [`blink`] turns 68-point landmark streams into eye-aspect-ratio traces
//!   and blink statistics, which [`knn`] classifies.
//!
//! [`eval`] holds the competition log-loss metric, stratified splits and
//! report formats; [`synth`] generates labeled data for both routes;
//! [`pipeline`] wires the pieces together over a dataset manifest.

pub mod blink;
pub mod eval;
pub mod histogram;
pub mod knn;
pub mod label;
pub mod media;
pub mod net;
pub mod pipeline;
pub mod synth;

pub use label::Label;
