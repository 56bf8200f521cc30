//! Knowledge distillation with classifier sharing between teacher and
//! student.
//!
//! * Teacher-head distillation (TH-KD): the teacher's classifier is attached,
//!   frozen, to the student's features as an auxiliary head and its losses
//!   are blended with the student head's.
//! * Student-head distillation (SH-KD): a temporary student's classifier is
//!   transplanted, frozen, into the teacher's training; that teacher then
//!   distills the final student, which keeps the same head.
//!
//! Everything runs on a small reverse-mode autodiff core ([`autodiff`]) with
//! MLP backbones ([`nn`]) on synthetic or CSV datasets ([`data`]). The
//! [`harness`] module holds the config, checkpoint and report formats used by
//! the `headkd` command-line tool.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
