//! Command-line front end: configuration, stage orchestration and the
//! `powerscan` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod pipeline;
