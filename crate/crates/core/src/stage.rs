//! Pipeline stage names and the error wrapper that tags a failure with
//! the stage it came from.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Decode,
    Reason,
    T2i,
    To3d,
    Render,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Decode, Stage::Reason, Stage::T2i, Stage::To3d, Stage::Render, Stage::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Decode => "decode",
            Stage::Reason => "reason",
            Stage::T2i => "t2i",
            Stage::To3d => "to3d",
            Stage::Render => "render",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("stage {stage} failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl StageError {
    pub fn new(stage: Stage, err: impl fmt::Display) -> Self {
        Self { stage, message: err.to_string() }
    }
}
