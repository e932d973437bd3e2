//! Progressive imitation learning for a simulated granular pouring task.
//!
//! The crate is organised along the learning pipeline:
//!
//! * [`sim`] renders and steps the pouring world and provides a scripted
//!   demonstrator;
//! * [`dataset`] records trajectories and stores them on disk;
//! * [`coarse`] turns logged actions into class labels and trains the
//!   multi-head image classifier whose softmax outputs become concept features;
//! * [`fine`] trains the windowed recurrent policy on those features and runs
//!   closed-loop rollouts;
//! * [`imaginary`] translates source-domain frames into a novel domain and
//!   fine-tunes both models on the result;
//! * [`pipeline`] wires it all into commands, reports and the teleoperation
//!   session service.

pub mod coarse;
pub mod dataset;
pub mod fine;
pub mod imaginary;
pub mod pipeline;
pub mod sim;
