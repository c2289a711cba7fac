//! Per-transition reward schemes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::gridenv::TransitionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    Directional,
    Sparse,
    Dense,
    DirectionalNegative,
    MovingNegative,
    LifelongFollow,
}

impl RewardScheme {
    pub const ALL: [RewardScheme; 6] = [
        RewardScheme::Directional,
        RewardScheme::Sparse,
        RewardScheme::Dense,
        RewardScheme::DirectionalNegative,
        RewardScheme::MovingNegative,
        RewardScheme::LifelongFollow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardScheme::Directional => "directional",
            RewardScheme::Sparse => "sparse",
            RewardScheme::Dense => "dense",
            RewardScheme::DirectionalNegative => "directional_negative",
            RewardScheme::MovingNegative => "moving_negative",
            RewardScheme::LifelongFollow => "lifelong_follow",
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        RewardScheme::ALL
            .into_iter()
            .find(|r| r.name() == key)
            .ok_or_else(|| format!("unknown reward scheme {s:?}"))
    }
}

pub const GOAL_REWARD: f64 = 1.0;
pub const FOLLOW_REWARD: f64 = 0.01;

/// Reward function plus the lifelong goal bonus switch (off by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardFn {
    pub scheme: RewardScheme,
    #[serde(default)]
    pub lifelong_goal_bonus: bool,
}

impl RewardFn {
    pub fn new(scheme: RewardScheme) -> Self {
        Self { scheme, lifelong_goal_bonus: false }
    }

    pub fn reward(&self, record: &TransitionRecord) -> f64 {
        let r = compute_reward(self.scheme, record);
        if self.scheme == RewardScheme::LifelongFollow && self.lifelong_goal_bonus && record.arrived {
            r + GOAL_REWARD
        } else {
            r
        }
    }
}

pub fn compute_reward(scheme: RewardScheme, record: &TransitionRecord) -> f64 {
    if scheme == RewardScheme::LifelongFollow {
        return if record.followed_path { FOLLOW_REWARD } else { 0.0 };
    }
    if record.arrived {
        return GOAL_REWARD;
    }
    let towards = record.moved_towards_goal();
    match scheme {
        RewardScheme::Directional => {
            if towards {
                0.005
            } else {
                0.0
            }
        }
        RewardScheme::Sparse => 0.0,
        RewardScheme::Dense => -0.01,
        RewardScheme::DirectionalNegative => {
            if towards {
                -0.005
            } else {
                -0.01
            }
        }
        // Moving towards the goal and any other move cost the same.
        RewardScheme::MovingNegative => {
            if record.moved() {
                -0.01
            } else {
                -0.005
            }
        }
        RewardScheme::LifelongFollow => unreachable!(),
    }
}
