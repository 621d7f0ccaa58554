//! Ground-truth trajectory synthesis for each maneuver.
//!
//! Trajectories are dense (0.1 m steps), start at the origin heading +y, and
//! carry one action label per point. Total arc length always exceeds the path
//! horizon plus margin.

use super::{RoadTopology, SceneSpec, LANE_WIDTH_M};
use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::LabeledTrajectory;

const STEP_M: f64 = 0.1;
const TOTAL_ARC_M: f64 = 34.0;

/// Incremental pen that appends labeled points while tracking heading.
struct Turtle {
    pos: [f64; 2],
    heading: f64, // ccw from +y
    points: Vec<[f64; 2]>,
    labels: Vec<Action>,
    arc: f64,
}

impl Turtle {
    fn new() -> Self {
        Turtle {
            pos: [0.0, 0.0],
            heading: 0.0,
            points: vec![[0.0, 0.0]],
            labels: vec![Action::Go],
            arc: 0.0,
        }
    }

    fn dir(&self) -> [f64; 2] {
        [-self.heading.sin(), self.heading.cos()]
    }

    fn straight(&mut self, len: f64, label: Action) {
        let n = (len / STEP_M).ceil().max(1.0) as usize;
        let step = len / n as f64;
        for _ in 0..n {
            let d = self.dir();
            self.pos = [self.pos[0] + d[0] * step, self.pos[1] + d[1] * step];
            self.arc += step;
            self.points.push(self.pos);
            self.labels.push(label);
        }
    }

    /// Arc of given radius; positive `angle` bends right (clockwise, toward +x).
    fn arc(&mut self, radius: f64, angle: f64, label: Action) {
        let len = radius * angle.abs();
        let n = (len / STEP_M).ceil().max(1.0) as usize;
        let dth = angle / n as f64;
        let step = len / n as f64;
        for _ in 0..n {
            // Heading is ccw-positive; right turns decrease it.
            self.heading -= dth / 2.0;
            let d = self.dir();
            self.pos = [self.pos[0] + d[0] * step, self.pos[1] + d[1] * step];
            self.heading -= dth / 2.0;
            self.arc += step;
            self.points.push(self.pos);
            self.labels.push(label);
        }
    }

    fn fill_to(&mut self, total: f64, label: Action) {
        if self.arc < total {
            self.straight(total - self.arc, label);
        }
    }

    fn finish(self) -> Result<LabeledTrajectory> {
        LabeledTrajectory::new(self.points, self.labels)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Lateral-offset trajectory x = f(y) sampled by arc length, for lane changes
/// and avoidance on straight roads.
fn lateral_profile(
    total_len: f64,
    label_of_y: impl Fn(f64) -> Action,
    offset_of_y: impl Fn(f64) -> f64,
) -> Result<LabeledTrajectory> {
    let mut points = vec![[offset_of_y(0.0), 0.0]];
    let mut labels = vec![label_of_y(0.0)];
    let n = (total_len / STEP_M).ceil() as usize;
    for i in 1..=n {
        let y = total_len * i as f64 / n as f64;
        points.push([offset_of_y(y), y]);
        labels.push(label_of_y(y));
    }
    LabeledTrajectory::new(points, labels)
}

pub(super) fn trajectory_for(spec: &SceneSpec) -> Result<LabeledTrajectory> {
    let m = spec.maneuver_start_m;
    match spec.maneuver {
        Action::Go => go_trajectory(spec),
        Action::TurnLeft | Action::TurnRight => {
            let right = spec.maneuver == Action::TurnRight;
            let mut t = Turtle::new();
            t.straight(m, Action::Go);
            let sign = if right { 1.0 } else { -1.0 };
            t.arc(
                spec.turn_radius_m,
                sign * std::f64::consts::FRAC_PI_2,
                spec.maneuver,
            );
            t.fill_to(TOTAL_ARC_M, Action::Go);
            t.finish()
        }
        Action::UTurn => {
            let mut t = Turtle::new();
            t.straight(m, Action::Go);
            // Median turn across the left side.
            t.arc(spec.turn_radius_m, -std::f64::consts::PI, Action::UTurn);
            t.fill_to(TOTAL_ARC_M, Action::Go);
            t.finish()
        }
        Action::LaneChangeLeft | Action::LaneChangeRight => {
            let sign = if spec.maneuver == Action::LaneChangeRight { 1.0 } else { -1.0 };
            let run = 12.0 + spec.entry_speed_mps * 0.5;
            let shift = spec.lane_offset_m;
            let maneuver = spec.maneuver;
            lateral_profile(
                TOTAL_ARC_M + run,
                move |y| {
                    if y >= m && y <= m + run {
                        maneuver
                    } else {
                        Action::Go
                    }
                },
                move |y| sign * shift * smoothstep((y - m) / run),
            )
        }
        Action::Avoidance => {
            let obstacle = spec
                .obstacles
                .iter()
                .find(|o| o.x.abs() < LANE_WIDTH_M / 2.0)
                .ok_or_else(|| Error::Unsatisfiable("no blocking obstacle".into()))?;
            // Pass on the side with room: left when a left lane or shoulder
            // exists, mirrored otherwise.
            let side = if spec.ego_lane > 0 { -1.0 } else { 1.0 };
            let run = 6.0;
            let y_in = obstacle.y - run;
            let y_out = obstacle.y + 1.5;
            let shift = spec.lane_offset_m;
            lateral_profile(
                TOTAL_ARC_M + run,
                move |y| {
                    if y >= y_in && y <= y_out + run {
                        Action::Avoidance
                    } else {
                        Action::Go
                    }
                },
                move |y| {
                    side * shift
                        * (smoothstep((y - y_in) / run) - smoothstep((y - y_out) / run))
                },
            )
        }
        Action::LeftWay | Action::RightWay => {
            let RoadTopology::Fork { branch_angle_rad, .. } = spec.topology else {
                return Err(Error::Unsatisfiable("way maneuvers need a fork".into()));
            };
            let sign = if spec.maneuver == Action::RightWay { 1.0 } else { -1.0 };
            let mut t = Turtle::new();
            t.straight(m, Action::Go);
            t.arc(spec.turn_radius_m, sign * branch_angle_rad, spec.maneuver);
            t.fill_to(TOTAL_ARC_M, Action::Go);
            t.finish()
        }
    }
}

fn go_trajectory(spec: &SceneSpec) -> Result<LabeledTrajectory> {
    match spec.topology {
        RoadTopology::Curve { radius_m, to_right, start_m } => {
            let mut t = Turtle::new();
            t.straight(start_m, Action::Go);
            // Follow the lane: the ego lane's radius differs from the
            // centerline's by its lateral offset.
            let lane_r = lane_radius(spec, radius_m, to_right);
            let sign = if to_right { 1.0 } else { -1.0 };
            let remaining = TOTAL_ARC_M - start_m;
            t.arc(lane_r, sign * (remaining / lane_r).min(1.2), Action::Go);
            t.fill_to(TOTAL_ARC_M, Action::Go);
            t.finish()
        }
        _ => {
            let mut t = Turtle::new();
            t.straight(TOTAL_ARC_M, Action::Go);
            t.finish()
        }
    }
}

/// Radius of the ego lane centerline given the road centerline radius.
pub(super) fn lane_radius(spec: &SceneSpec, road_radius: f64, to_right: bool) -> f64 {
    let offset = ego_offset_from_center(spec);
    // Bending right: lanes left of center are farther from the turn center.
    if to_right {
        (road_radius - offset).max(3.0)
    } else {
        (road_radius + offset).max(3.0)
    }
}

/// Lateral offset of the ego lane center from the road centerline
/// (positive = right of center).
pub(super) fn ego_offset_from_center(spec: &SceneSpec) -> f64 {
    (spec.ego_lane as f64 + 0.5) * LANE_WIDTH_M - spec.lane_count as f64 * LANE_WIDTH_M / 2.0
}
