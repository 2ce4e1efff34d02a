//! Checks shared by the per-topic test targets and the acceptance run. Each
//! suite panics on the first violation and otherwise returns a summary line.

#![allow(dead_code)]

pub mod conservation;
pub mod framework;
pub mod gradient;
pub mod invariance;
pub mod oracle;
pub mod selection;
