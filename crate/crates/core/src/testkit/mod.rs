//! Verification backbone: synthetic cities with planted temporal profiles and
//! a known indicator, a loop-by-loop reference for the training objective,
//! and central-difference gradient checking.
//!
//! Nothing in the training or evaluation paths depends on this module.

mod city;
mod gradcheck;
mod oracle;

pub use city::{gen_city, CitySpec, ChannelTemplate, DaySet, Bump, Profile, ProfileLibrary, SynthCity, WEEK_HOURS};
pub use gradcheck::{compare_gradients, finite_diff_grad, model_gradient_check, rel_error, GradCheck};
pub use oracle::{oracle_total_loss, verify_against_oracle, OracleReport};
