#![allow(dead_code)]
//! Check bodies shared by the topic test targets and the acceptance run.

pub mod alignment;
pub mod gradients;
pub mod structural;
