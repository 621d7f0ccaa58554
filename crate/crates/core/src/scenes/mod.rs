//! Procedural driving scenes: maneuver trajectories with per-position action
//! labels, a stylized front-view raster with the visual cues that make the
//! maneuver set recognizable, and dataset assembly on disk.

mod dataset;
mod maneuver;
mod render;

pub use dataset::{build_dataset, BuildReport, Dataset, DatasetConfig, Sample, Split};
pub use render::GroundProjection;

use crate::action::Action;
use crate::error::{Error, Result};
use crate::geometry::LabeledTrajectory;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LANE_WIDTH_M: f64 = 3.5;

/// Minimum trajectory arc length beyond the resampled path horizon.
pub const ARC_MARGIN_M: f64 = 6.0;

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum RoadTopology {
    Straight,
    /// Road bends with the given centerline radius starting a few meters ahead.
    Curve { radius_m: f64, to_right: bool, start_m: f64 },
    /// Perpendicular cross road centered at the given distance ahead.
    Cross { distance_m: f64 },
    /// Y-fork: two branches diverge at the given distance ahead.
    Fork { distance_m: f64, branch_angle_rad: f64 },
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius_m: f64,
}

/// Full recipe for one scene; every field is data, so a spec determines its
/// scene bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub topology: RoadTopology,
    /// Same-direction lanes on the ego road.
    pub lane_count: u32,
    /// Ego lane index, 0 = leftmost.
    pub ego_lane: u32,
    pub obstacles: Vec<Obstacle>,
    pub maneuver: Action,
    pub turn_radius_m: f64,
    pub lane_offset_m: f64,
    pub entry_speed_mps: f64,
    /// Longitudinal position where the maneuver begins.
    pub maneuver_start_m: f64,
    pub image_size: usize,
    pub image_channels: usize,
}

/// One rendered scene: raster, ground-truth labeled trajectory in the ego
/// frame (origin, heading +y), and the ego speed.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: SceneImage,
    pub trajectory: LabeledTrajectory,
    pub speed_mps: f64,
}

/// H x W x C raster with intensities quantized to bytes (0 => 0.0, 255 => 1.0).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl SceneImage {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Normalized `[c, h, w]` tensor for the feature extractor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; h * w * c];
        for yy in 0..h {
            for xx in 0..w {
                for cc in 0..c {
                    data[cc * h * w + yy * w + xx] =
                        self.pixels[(yy * w + xx) * c + cc] as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![c, h, w], data)
    }

    pub fn from_tensor_bytes(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * channels);
        SceneImage { height, width, channels, pixels }
    }
}

impl SceneSpec {
    /// Draw a random spec realizing `maneuver`; the scene seed alone
    /// determines every parameter.
    pub fn random_for(maneuver: Action, seed: u64, image_size: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
        let lane_count: u32 = match maneuver {
            Action::UTurn | Action::LaneChangeLeft | Action::LaneChangeRight => rng.gen_range(2..=3),
            _ => rng.gen_range(1..=3),
        };
        let ego_lane = match maneuver {
            Action::LaneChangeLeft => rng.gen_range(1..lane_count),
            Action::LaneChangeRight => rng.gen_range(0..lane_count - 1),
            _ => rng.gen_range(0..lane_count),
        };
        let maneuver_start = rng.gen_range(2.5..12.0);
        let topology = match maneuver {
            Action::TurnLeft | Action::TurnRight => {
                RoadTopology::Cross { distance_m: maneuver_start + rng.gen_range(0.5..2.0) }
            }
            Action::LeftWay | Action::RightWay => RoadTopology::Fork {
                distance_m: maneuver_start,
                branch_angle_rad: rng.gen_range(0.45..0.75),
            },
            // Lateral maneuvers shift across a plain road.
            Action::UTurn
            | Action::LaneChangeLeft
            | Action::LaneChangeRight
            | Action::Avoidance => RoadTopology::Straight,
            Action::Go => match rng.gen_range(0..3) {
                0 => RoadTopology::Straight,
                1 => RoadTopology::Curve {
                    radius_m: rng.gen_range(18.0..45.0),
                    to_right: rng.gen_bool(0.5),
                    start_m: rng.gen_range(4.0..10.0),
                },
                _ => RoadTopology::Cross { distance_m: rng.gen_range(8.0..20.0) },
            },
        };
        let turn_radius_m = match maneuver {
            Action::UTurn => rng.gen_range(3.0..5.0),
            Action::LeftWay | Action::RightWay => rng.gen_range(12.0..24.0),
            _ => rng.gen_range(6.0..13.0),
        };
        let lane_offset_m = match maneuver {
            Action::Avoidance => rng.gen_range(1.8..2.6),
            _ => LANE_WIDTH_M,
        };
        let mut obstacles = Vec::new();
        if maneuver == Action::Avoidance {
            obstacles.push(Obstacle {
                x: rng.gen_range(-0.4..0.4),
                y: maneuver_start + rng.gen_range(4.0..6.0),
                radius_m: rng.gen_range(0.7..1.2),
            });
        } else if rng.gen_bool(0.35) {
            // Roadside clutter so obstacle pixels are not an avoidance shortcut.
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            obstacles.push(Obstacle {
                x: side * (lane_count as f64 * LANE_WIDTH_M / 2.0 + rng.gen_range(1.5..4.0)),
                y: rng.gen_range(6.0..30.0),
                radius_m: rng.gen_range(0.6..1.4),
            });
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        SceneSpec {
            seed,
            topology,
            lane_count,
            ego_lane,
            obstacles,
            maneuver,
            turn_radius_m,
            lane_offset_m,
            // Skewed toward the top of the range: mean ~8.9 m/s.
            entry_speed_mps: 2.0 + 13.0 * u.powf(0.88),
            maneuver_start_m: maneuver_start,
            image_size,
            image_channels: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lane_count == 0 || self.ego_lane >= self.lane_count {
            return Err(Error::Unsatisfiable(format!(
                "ego lane {} outside {} lanes",
                self.ego_lane, self.lane_count
            )));
        }
        if !(1.0..=60.0).contains(&self.turn_radius_m)
            || !(0.5..=8.0).contains(&self.lane_offset_m)
            || !(0.5..=30.0).contains(&self.entry_speed_mps)
            || !(0.5..=20.0).contains(&self.maneuver_start_m)
        {
            return Err(Error::Unsatisfiable("maneuver parameter out of bounds".into()));
        }
        match self.maneuver {
            Action::TurnLeft | Action::TurnRight => {
                if !matches!(self.topology, RoadTopology::Cross { .. }) {
                    return Err(Error::Unsatisfiable(format!(
                        "{} requires a cross intersection",
                        self.maneuver
                    )));
                }
            }
            Action::UTurn => {
                if self.lane_count < 2 {
                    return Err(Error::Unsatisfiable("u-turn needs at least two lanes".into()));
                }
            }
            Action::LaneChangeLeft => {
                if self.ego_lane == 0 {
                    return Err(Error::Unsatisfiable("no lane to the left".into()));
                }
            }
            Action::LaneChangeRight => {
                if self.ego_lane + 1 >= self.lane_count {
                    return Err(Error::Unsatisfiable("no lane to the right".into()));
                }
            }
            Action::Avoidance => {
                let blocking = self.obstacles.iter().any(|o| {
                    o.x.abs() < LANE_WIDTH_M / 2.0 && (2.0..=25.0).contains(&o.y)
                });
                if !blocking {
                    return Err(Error::Unsatisfiable("avoidance needs a blocking obstacle".into()));
                }
            }
            Action::LeftWay | Action::RightWay => {
                if !matches!(self.topology, RoadTopology::Fork { .. }) {
                    return Err(Error::Unsatisfiable(format!(
                        "{} requires a fork",
                        self.maneuver
                    )));
                }
            }
            Action::Go => {
                if matches!(self.topology, RoadTopology::Fork { .. }) {
                    return Err(Error::Unsatisfiable("a fork forces a way choice".into()));
                }
            }
        }
        Ok(())
    }
}

/// Render the scene raster and synthesize the labeled ground-truth trajectory
/// for a spec. Pure: equal specs produce bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let trajectory = maneuver::trajectory_for(spec)?;
    let arc: f64 = trajectory
        .positions
        .windows(2)
        .map(|w| crate::geometry::dist(w[0], w[1]))
        .sum();
    let needed = crate::geometry::DEFAULT_PATH_LEN as f64 + ARC_MARGIN_M;
    if arc < needed {
        return Err(Error::Unsatisfiable(format!(
            "trajectory arc {arc:.1} m below required {needed:.1} m"
        )));
    }
    let image = render::render(spec);
    Ok(Scene { image, trajectory, speed_mps: spec.entry_speed_mps })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum IntentionMode {
    Train,
    Test,
}

/// Choose the global intention from the first `F` local labels.
///
/// Training picks a uniformly random element (so each action is chosen with
/// probability count/F); testing picks the majority, ties broken by the
/// action occurring earliest in the window.
pub fn select_global_intention<R: Rng>(
    candidates: &[Action],
    mode: IntentionMode,
    rng: &mut R,
) -> Result<Action> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty intention candidates"));
    }
    match mode {
        IntentionMode::Train => Ok(candidates[rng.gen_range(0..candidates.len())]),
        IntentionMode::Test => {
            let mut counts = [0usize; crate::action::ACTION_COUNT];
            for a in candidates {
                counts[a.id()] += 1;
            }
            let best = candidates
                .iter()
                .copied()
                .max_by_key(|a| (counts[a.id()], std::cmp::Reverse(first_index(candidates, *a))))
                .expect("non-empty");
            Ok(best)
        }
    }
}

fn first_index(candidates: &[Action], a: Action) -> usize {
    candidates.iter().position(|&x| x == a).expect("present")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let spec = SceneSpec::random_for(Action::TurnRight, 77, 64);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn straight_go_is_a_straight_line() {
        let mut spec = SceneSpec::random_for(Action::Go, 7, 64);
        spec.topology = RoadTopology::Straight;
        spec.entry_speed_mps = 8.0;
        let scene = generate_scene(&spec).unwrap();
        assert!(scene.trajectory.labels.iter().all(|&l| l == Action::Go));
        for p in &scene.trajectory.positions {
            assert!(p[0].abs() < 1e-9, "x deviation {:?}", p);
        }
    }

    #[test]
    fn turn_matches_requested_radius() {
        let mut spec = SceneSpec::random_for(Action::TurnRight, 3, 64);
        spec.turn_radius_m = 12.0;
        let scene = generate_scene(&spec).unwrap();
        // Labels run Go ... TurnRight ... Go.
        let labels = &scene.trajectory.labels;
        assert_eq!(labels[0], Action::Go);
        assert_eq!(*labels.last().unwrap(), Action::Go);
        assert!(labels.contains(&Action::TurnRight));
        // Fit a circle to the curved segment: center is equidistant from all
        // turn-labeled points; check radius within 1%.
        let pts: Vec<_> = scene
            .trajectory
            .positions
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == Action::TurnRight)
            .map(|(p, _)| *p)
            .collect();
        assert!(pts.len() > 10);
        let (c, r) = fit_circle(&pts);
        assert!(
            (r - 12.0).abs() / 12.0 < 0.01,
            "fitted radius {r} center {c:?}"
        );
    }

    /// Least-squares circle fit (Kasa method) used as the test oracle.
    fn fit_circle(pts: &[[f64; 2]]) -> ([f64; 2], f64) {
        let n = pts.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for p in pts {
            sx += p[0];
            sy += p[1];
        }
        let (mx, my) = (sx / n, sy / n);
        let (mut suu, mut suv, mut svv, mut suuu, mut svvv, mut suvv, mut svuu) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for p in pts {
            let u = p[0] - mx;
            let v = p[1] - my;
            suu += u * u;
            suv += u * v;
            svv += v * v;
            suuu += u * u * u;
            svvv += v * v * v;
            suvv += u * v * v;
            svuu += v * u * u;
        }
        let a = [[suu, suv], [suv, svv]];
        let b = [(suuu + suvv) / 2.0, (svvv + svuu) / 2.0];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let uc = (b[0] * a[1][1] - b[1] * a[0][1]) / det;
        let vc = (b[1] * a[0][0] - b[0] * a[1][0]) / det;
        let r = (uc * uc + vc * vc + (suu + svv) / n).sqrt();
        ([uc + mx, vc + my], r)
    }

    #[test]
    fn uturn_on_single_lane_is_unsatisfiable() {
        let mut spec = SceneSpec::random_for(Action::UTurn, 9, 64);
        spec.lane_count = 1;
        spec.ego_lane = 0;
        assert!(matches!(generate_scene(&spec), Err(Error::Unsatisfiable(_))));
    }

    #[test]
    fn gi_unanimous_any_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = vec![Action::Go; 5];
        assert_eq!(
            select_global_intention(&c, IntentionMode::Train, &mut rng).unwrap(),
            Action::Go
        );
        assert_eq!(
            select_global_intention(&c, IntentionMode::Test, &mut rng).unwrap(),
            Action::Go
        );
    }

    #[test]
    fn gi_test_mode_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = vec![
            Action::Go,
            Action::Go,
            Action::Go,
            Action::TurnLeft,
            Action::TurnLeft,
        ];
        assert_eq!(
            select_global_intention(&c, IntentionMode::Test, &mut rng).unwrap(),
            Action::Go
        );
        // Tie: earliest first occurrence wins.
        let tie = vec![
            Action::TurnLeft,
            Action::Go,
            Action::Go,
            Action::TurnLeft,
        ];
        assert_eq!(
            select_global_intention(&tie, IntentionMode::Test, &mut rng).unwrap(),
            Action::TurnLeft
        );
    }

    #[test]
    fn gi_train_mode_is_count_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = vec![
            Action::Go,
            Action::Go,
            Action::Go,
            Action::TurnLeft,
            Action::TurnLeft,
        ];
        let n = 100_000;
        let mut go = 0usize;
        for _ in 0..n {
            if select_global_intention(&c, IntentionMode::Train, &mut rng).unwrap() == Action::Go {
                go += 1;
            }
        }
        let p = go as f64 / n as f64;
        assert!((p - 0.6).abs() < 0.02, "empirical P(Go) = {p}");
    }

    #[test]
    fn gi_empty_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_global_intention(&[], IntentionMode::Test, &mut rng).is_err());
    }

    #[test]
    fn every_maneuver_generates() {
        for (i, a) in crate::action::ALL_ACTIONS.iter().enumerate() {
            for seed in 0..8u64 {
                let spec = SceneSpec::random_for(*a, seed * 31 + i as u64, 48);
                let scene = generate_scene(&spec)
                    .unwrap_or_else(|e| panic!("{a} seed {seed}: {e}"));
                assert_eq!(scene.image.height, 48);
                assert_eq!(scene.image.width, 48);
                assert!(scene.trajectory.labels.contains(a) || *a == Action::Go);
            }
        }
    }
}
