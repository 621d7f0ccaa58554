//! The nine-way driving-action space.

use crate::error::{Error, Result};

pub const ACTION_COUNT: usize = 9;

/// High-level driving actions, used both as the global intention conditioning
/// a path and as per-position local intention labels.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Action {
    Go = 0,
    TurnLeft = 1,
    TurnRight = 2,
    UTurn = 3,
    LaneChangeLeft = 4,
    LaneChangeRight = 5,
    Avoidance = 6,
    LeftWay = 7,
    RightWay = 8,
}

pub const ALL_ACTIONS: [Action; ACTION_COUNT] = [
    Action::Go,
    Action::TurnLeft,
    Action::TurnRight,
    Action::UTurn,
    Action::LaneChangeLeft,
    Action::LaneChangeRight,
    Action::Avoidance,
    Action::LeftWay,
    Action::RightWay,
];

impl Action {
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Action> {
        ALL_ACTIONS
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("action id {id} out of range 0..{ACTION_COUNT}")))
    }

    pub fn one_hot(self) -> [f64; ACTION_COUNT] {
        let mut v = [0.0; ACTION_COUNT];
        v[self.id()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Go => "Go",
            Action::TurnLeft => "TurnLeft",
            Action::TurnRight => "TurnRight",
            Action::UTurn => "UTurn",
            Action::LaneChangeLeft => "LaneChangeLeft",
            Action::LaneChangeRight => "LaneChangeRight",
            Action::Avoidance => "Avoidance",
            Action::LeftWay => "LeftWay",
            Action::RightWay => "RightWay",
        }
    }

    pub fn from_name(name: &str) -> Result<Action> {
        ALL_ACTIONS
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown action name '{name}'")))
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
