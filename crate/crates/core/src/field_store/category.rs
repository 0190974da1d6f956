use std::fmt;

use crate::error::{Error, Result};

pub const CATEGORY_COUNT: usize = 5;

/// Rain intensity classes ordered by severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntensityCategory {
    /// Rainless, [0, 0.1)
    RL,
    /// Light rain, [0.1, 4.0)
    LR,
    /// Moderate rain, [4.0, 13.0)
    MR,
    /// Heavy rain, [13.0, 25.0)
    HR,
    /// Rainstorm, [25.0, inf)
    RS,
}

impl IntensityCategory {
    pub const ALL: [IntensityCategory; CATEGORY_COUNT] = [
        IntensityCategory::RL,
        IntensityCategory::LR,
        IntensityCategory::MR,
        IntensityCategory::HR,
        IntensityCategory::RS,
    ];

    /// Lower bound of the class interval in mm.
    pub fn lower_bound(self) -> f64 {
        match self {
            IntensityCategory::RL => 0.0,
            IntensityCategory::LR => 0.1,
            IntensityCategory::MR => 4.0,
            IntensityCategory::HR => 13.0,
            IntensityCategory::RS => 25.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            IntensityCategory::RL => "RL",
            IntensityCategory::LR => "LR",
            IntensityCategory::MR => "MR",
            IntensityCategory::HR => "HR",
            IntensityCategory::RS => "RS",
        }
    }
}

impl fmt::Display for IntensityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn categorize(r: f64) -> Result<IntensityCategory> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::domain(format!("rain rate must be finite and non-negative, got {r}")));
    }
    Ok(IntensityCategory::ALL
        .iter()
        .rev()
        .find(|c| r >= c.lower_bound())
        .copied()
        .unwrap_or(IntensityCategory::RL))
}
