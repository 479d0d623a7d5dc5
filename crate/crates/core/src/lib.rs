//! Workbench for measuring how adversarial attacks change the explanations
//! of an image classifier.
//!
//! The crate is organized as a pipeline:
//!
//! * [`tensor`] — dense tensors with reverse-mode automatic differentiation;
//!   everything downstream builds on its forward ops and gradients.
//! * [`dataset`] — a synthetic shapes dataset whose explanation ground-truth
//!   masks are exact by construction, plus ingestion of external image/mask
//!   pairs.
//! * [`model`] — a small trainable CNN classifier with named feature maps.
//! * [`attack`] — FGSM and BIM adversarial image generation.
//! * [`explain`] — vanilla gradient saliency, GradCAM, SmoothGrad and LIME.
//! * [`metrics`] — top-fraction binarization plus IoU/RMSE scoring against
//!   ground-truth masks.
//! * [`harness`] — the end-to-end benchmark runner and report emitter.

pub mod error;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
