//! Ternary tensors, GXNOR arithmetic, network models and their file format.

pub mod format;
pub mod model;
pub mod ops;
pub mod ternary;

pub use format::{decode_model, encode_model, load_model, read_model, save_model, write_model};
pub use model::{accuracy, argmax, infer, CompiledModel, InputSpec, Layer, NetworkModel, Prediction};
pub use ops::{gxnor, gxnor_dot, phi, sign, xnor, ActivationKind, BatchNormParams, FoldedThreshold, NeuronParams};
pub use ternary::{Ternary, TernaryTensor};
