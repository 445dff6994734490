use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A training objective with its own head on the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Inpainting,
    Denoising,
    Colorization,
    Jigsaw,
    Segmentation,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Inpainting,
        Task::Denoising,
        Task::Colorization,
        Task::Jigsaw,
        Task::Segmentation,
    ];

    pub const PRETEXT: [Task; 4] = [
        Task::Inpainting,
        Task::Denoising,
        Task::Colorization,
        Task::Jigsaw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Inpainting => "inpainting",
            Task::Denoising => "denoising",
            Task::Colorization => "colorization",
            Task::Jigsaw => "jigsaw",
            Task::Segmentation => "segmentation",
        }
    }

    pub fn is_pretext(self) -> bool {
        self != Task::Segmentation
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}
