//! Planar geometry: egocentric transforms, unit-spaced path construction,
//! nearest-neighbor label transfer, and a pure-pursuit steering oracle.
//!
//! Conventions (fixed for the whole crate): the ego frame has forward = +y
//! and right = +x; a pose's yaw is the counterclockwise rotation of the
//! heading away from global +y, normalized to (-pi, pi]. The world is planar:
//! pitch and roll are carried by [`Pose`] but projected out.

use crate::action::Action;
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Default number of positions per path (one per meter of travel).
pub const DEFAULT_PATH_LEN: usize = 20;

/// Tolerance on the unit spacing between consecutive path positions.
pub const UNIT_SPACING_TOL: f64 = 1e-6;

// Pure-pursuit oracle constants: plausible sedan values.
pub const WHEELBASE_M: f64 = 2.8;
pub const MAX_STEER_RAD: f64 = 0.55;
pub const LOOKAHEAD_GAIN_S: f64 = 1.0;
pub const LOOKAHEAD_MIN_M: f64 = 3.0;

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Global vehicle pose. Angles in radians.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Result<Pose> {
        Pose::with_attitude(x, y, yaw, 0.0, 0.0)
    }

    pub fn with_attitude(x: f64, y: f64, yaw: f64, pitch: f64, roll: f64) -> Result<Pose> {
        if ![x, y, yaw, pitch, roll].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite pose component"));
        }
        Ok(Pose { x, y, yaw: normalize_angle(yaw), pitch, roll })
    }

    /// Unit heading vector in the global frame.
    pub fn heading(&self) -> Point {
        [-self.yaw.sin(), self.yaw.cos()]
    }
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

/// 2-D rigid transform mapping global coordinates into the ego frame.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EgoTransform {
    rot: [[f64; 2]; 2],
    origin: Point,
}

/// Build the transform that centers the ego frame on `pose`: the pose's own
/// position maps to (0,0) and a point one meter ahead along the heading maps
/// to (0,1). Pitch and roll are projected out (planar model).
pub fn build_egocentric_transform(pose: &Pose) -> Result<EgoTransform> {
    // Pose::new has validated finiteness; revalidate for poses built by hand.
    if ![pose.x, pose.y, pose.yaw].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite pose component"));
    }
    let (s, c) = pose.yaw.sin_cos();
    // Rotation by -yaw brings the heading onto +y.
    Ok(EgoTransform {
        rot: [[c, s], [-s, c]],
        origin: [pose.x, pose.y],
    })
}

impl EgoTransform {
    pub fn apply(&self, p: Point) -> Point {
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [
            self.rot[0][0] * dx + self.rot[0][1] * dy,
            self.rot[1][0] * dx + self.rot[1][1] * dy,
        ]
    }

    pub fn apply_inverse(&self, e: Point) -> Point {
        // Rotation block is orthonormal, so the inverse rotation is the transpose.
        [
            self.rot[0][0] * e[0] + self.rot[1][0] * e[1] + self.origin[0],
            self.rot[0][1] * e[0] + self.rot[1][1] * e[1] + self.origin[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.rot[0][0] * self.rot[1][1] - self.rot[0][1] * self.rot[1][0]
    }
}

/// An ordered list of egocentric 2-D positions. Dataset paths additionally
/// satisfy unit spacing from the implicit origin p_0 = (0,0) onward; generated
/// paths carry no such guarantee.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    positions: Vec<Point>,
}

impl Path {
    pub fn new(positions: Vec<Point>) -> Result<Path> {
        if positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid("non-finite path position"));
        }
        Ok(Path { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn last(&self) -> Option<Point> {
        self.positions.last().copied()
    }

    /// Largest deviation of consecutive spacings (including the implicit
    /// origin) from one meter.
    pub fn unit_spacing_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut prev = [0.0, 0.0];
        for &p in &self.positions {
            worst = worst.max((dist(prev, p) - 1.0).abs());
            prev = p;
        }
        worst
    }

    pub fn mirrored_x(&self) -> Path {
        Path {
            positions: self.positions.iter().map(|p| [-p[0], p[1]]).collect(),
        }
    }
}

/// A trajectory in some frame with one action label per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrajectory {
    pub positions: Vec<Point>,
    pub labels: Vec<Action>,
}

impl LabeledTrajectory {
    pub fn new(positions: Vec<Point>, labels: Vec<Action>) -> Result<LabeledTrajectory> {
        if positions.len() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", positions.len()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(LabeledTrajectory { positions, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Transform every position into the ego frame, keeping labels.
    pub fn transformed(&self, t: &EgoTransform) -> LabeledTrajectory {
        LabeledTrajectory {
            positions: self.positions.iter().map(|&p| t.apply(p)).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Resample an ordered trajectory starting at the origin into `l` positions
/// spaced exactly one meter apart (euclidean, chord-stepped along the
/// piecewise-linear interpolant).
pub fn resample_unit_arc(trajectory: &[Point], l: usize) -> Result<Path> {
    if trajectory.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    if dist(trajectory[0], [0.0, 0.0]) > 1e-6 {
        return Err(Error::invalid("trajectory must start at the origin"));
    }
    let arc: f64 = trajectory.windows(2).map(|w| dist(w[0], w[1])).sum();
    if arc + 1e-12 < l as f64 {
        return Err(Error::InsufficientLength { needed: l as f64, got: arc });
    }

    let mut out = Vec::with_capacity(l);
    let mut current = [0.0, 0.0];
    // Index of the segment [i, i+1] being walked and the parameter already
    // consumed on it.
    let mut seg = 0usize;
    let mut t0 = 0.0f64;
    'outer: for _ in 0..l {
        while seg + 1 < trajectory.len() {
            let a = trajectory[seg];
            let b = trajectory[seg + 1];
            if let Some(t) = unit_chord_crossing(current, a, b, t0) {
                current = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                out.push(current);
                t0 = t;
                continue 'outer;
            }
            seg += 1;
            t0 = 0.0;
        }
        return Err(Error::InsufficientLength {
            needed: l as f64,
            got: arc,
        });
    }
    Path::new(out)
}

/// Smallest `t` in `(t_min, 1]` with `|a + t(b-a) - q| = 1`, if any.
fn unit_chord_crossing(q: Point, a: Point, b: Point, t_min: f64) -> Option<f64> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let f = [a[0] - q[0], a[1] - q[1]];
    let aa = d[0] * d[0] + d[1] * d[1];
    if aa == 0.0 {
        return None;
    }
    let bb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
    let cc = f[0] * f[0] + f[1] * f[1] - 1.0;
    let disc = bb * bb - 4.0 * aa * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // The forward crossing is the larger root (leaving the unit circle).
    let t = (-bb + sq) / (2.0 * aa);
    if t > t_min + 1e-15 && t <= 1.0 + 1e-12 {
        Some(t.min(1.0))
    } else {
        None
    }
}

/// Transfer per-position labels from `source` onto the path by nearest
/// euclidean neighbor; ties break to the smallest source index.
pub fn label_positions(path: &Path, source: &LabeledTrajectory) -> Result<Vec<Action>> {
    if source.is_empty() {
        return Err(Error::invalid("empty label source"));
    }
    Ok(path
        .positions()
        .iter()
        .map(|&p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &sp) in source.positions.iter().enumerate() {
                let d = dist(p, sp);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            source.labels[best]
        })
        .collect())
}

/// Pure-pursuit steering for driving `path` at `speed`, scaled to [-1, 1]
/// (positive steers right, toward +x).
///
/// The look-ahead point sits on the path polyline at euclidean distance
/// `max(LOOKAHEAD_GAIN_S * speed, LOOKAHEAD_MIN_M)` from the origin; if the
/// path never reaches that distance its final position is used.
pub fn path_to_steering(path: &Path, speed: f64) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::invalid("zero-length path"));
    }
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::invalid(format!("speed must be positive, got {speed}")));
    }
    let ld = (LOOKAHEAD_GAIN_S * speed).max(LOOKAHEAD_MIN_M);
    let target = lookahead_point(path.positions(), ld);
    let actual = dist([0.0, 0.0], target);
    if actual < 1e-9 {
        return Ok(0.0);
    }
    // Angle between the heading (+y) and the target bearing.
    let alpha = target[0].atan2(target[1]);
    let angle = (2.0 * WHEELBASE_M * alpha.sin() / actual).atan();
    Ok((angle / MAX_STEER_RAD).clamp(-1.0, 1.0))
}

fn lookahead_point(positions: &[Point], ld: f64) -> Point {
    let mut prev = [0.0, 0.0];
    for &p in positions {
        if dist([0.0, 0.0], p) >= ld {
            // Interpolate on the segment to land exactly at distance ld.
            if let Some(t) = crossing_at_distance(prev, p, ld) {
                return [prev[0] + t * (p[0] - prev[0]), prev[1] + t * (p[1] - prev[1])];
            }
            return p;
        }
        prev = p;
    }
    *positions.last().expect("non-empty")
}

fn crossing_at_distance(a: Point, b: Point, r: f64) -> Option<f64> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let aa = d[0] * d[0] + d[1] * d[1];
    if aa == 0.0 {
        return None;
    }
    let bb = 2.0 * (a[0] * d[0] + a[1] * d[1]);
    let cc = a[0] * a[0] + a[1] * a[1] - r * r;
    let disc = bb * bb - 4.0 * aa * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-bb + disc.sqrt()) / (2.0 * aa);
    (0.0..=1.0).contains(&t).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn transform_identity_case() {
        let pose = Pose::new(0.0, 0.0, 0.0).unwrap();
        let t = build_egocentric_transform(&pose).unwrap();
        let p = t.apply([0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn transform_pure_translation() {
        let pose = Pose::new(3.0, 4.0, 0.0).unwrap();
        let t = build_egocentric_transform(&pose).unwrap();
        let p = t.apply([3.0, 5.0]);
        assert!((p[0]).abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transform_quarter_turn() {
        // Hand-composed: yaw = pi/2 turns the heading to (-1, 0); the
        // rotation by -yaw is [[0, 1], [-1, 0]], so (-1, 0) -> (0, 1).
        let pose = Pose::new(0.0, 0.0, FRAC_PI_2).unwrap();
        let t = build_egocentric_transform(&pose).unwrap();
        let h = pose.heading();
        assert!((h[0] + 1.0).abs() < 1e-12 && h[1].abs() < 1e-12);
        let p = t.apply(h);
        assert!(p[0].abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert!((t.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transform_rejects_non_finite() {
        assert!(Pose::new(f64::NAN, 0.0, 0.0).is_err());
        let bad = Pose { x: f64::INFINITY, y: 0.0, yaw: 0.0, pitch: 0.0, roll: 0.0 };
        assert!(build_egocentric_transform(&bad).is_err());
    }

    #[test]
    fn resample_straight_line() {
        let traj: Vec<Point> = (0..=60).map(|i| [0.0, i as f64 * 0.5]).collect();
        let path = resample_unit_arc(&traj, 20).unwrap();
        for (l, p) in path.positions().iter().enumerate() {
            assert!(p[0].abs() < 1e-9);
            assert!((p[1] - (l + 1) as f64).abs() < 1e-9, "p_{} = {:?}", l + 1, p);
        }
    }

    #[test]
    fn resample_unit_spaced_input_is_fixed_point() {
        let traj: Vec<Point> = (0..=25).map(|i| [0.0, i as f64]).collect();
        let path = resample_unit_arc(&traj, 20).unwrap();
        for (l, p) in path.positions().iter().enumerate() {
            assert!((p[1] - traj[l + 1][1]).abs() < 1e-9);
            assert!(p[0].abs() < 1e-9);
        }
    }

    #[test]
    fn resample_quarter_circle_matches_chord_stepping_oracle() {
        // Quarter circle of radius 20 about (20, 0), densely sampled.
        let r = 20.0;
        let n = 4000;
        let traj: Vec<Point> = (0..=n)
            .map(|i| {
                let th = FRAC_PI_2 * i as f64 / n as f64;
                [r - r * th.cos(), r * th.sin()]
            })
            .collect();
        let path = resample_unit_arc(&traj, 20).unwrap();
        // Closed form: unit chords on a circle subtend 2*asin(1/(2r)) each.
        let dth = 2.0 * (1.0 / (2.0 * r)).asin();
        for (l, p) in path.positions().iter().enumerate() {
            let th = dth * (l + 1) as f64;
            let expect = [r - r * th.cos(), r * th.sin()];
            assert!(dist(*p, expect) < 2e-4, "l={} got {:?} want {:?}", l, p, expect);
            // Points stay on the circle up to dense-interpolation error.
            let radial = (dist(*p, [r, 0.0]) - r).abs();
            assert!(radial < 1e-3);
        }
        assert!(path.unit_spacing_violation() < UNIT_SPACING_TOL);
    }

    #[test]
    fn resample_insufficient_length_errors() {
        let traj: Vec<Point> = (0..=10).map(|i| [0.0, i as f64]).collect();
        match resample_unit_arc(&traj, 20) {
            Err(Error::InsufficientLength { .. }) => {}
            other => panic!("expected insufficient length, got {:?}", other),
        }
    }

    #[test]
    fn labels_uniform_source() {
        let traj: Vec<Point> = (0..=30).map(|i| [0.0, i as f64]).collect();
        let path = resample_unit_arc(&traj, 20).unwrap();
        let source =
            LabeledTrajectory::new(traj.clone(), vec![Action::Go; traj.len()]).unwrap();
        let labels = label_positions(&path, &source).unwrap();
        assert_eq!(labels.len(), 20);
        assert!(labels.iter().all(|&a| a == Action::Go));
    }

    #[test]
    fn labels_two_clusters() {
        let source = LabeledTrajectory::new(
            vec![[0.0, 0.0], [0.0, 1.0], [0.0, 10.0], [0.0, 11.0]],
            vec![Action::Go, Action::Go, Action::TurnRight, Action::TurnRight],
        )
        .unwrap();
        let path = Path::new(vec![[0.0, 0.5], [0.0, 9.0]]).unwrap();
        let labels = label_positions(&path, &source).unwrap();
        assert_eq!(labels, vec![Action::Go, Action::TurnRight]);
    }

    #[test]
    fn labels_empty_source_errors() {
        let path = Path::new(vec![[0.0, 1.0]]).unwrap();
        let source = LabeledTrajectory::new(vec![], vec![]).unwrap();
        assert!(label_positions(&path, &source).is_err());
    }

    #[test]
    fn steering_straight_is_zero() {
        let path = Path::new((1..=20).map(|i| [0.0, i as f64]).collect()).unwrap();
        for speed in [1.0, 5.0, 14.0] {
            assert_eq!(path_to_steering(&path, speed).unwrap(), 0.0);
        }
    }

    #[test]
    fn steering_circle_matches_bicycle_curvature() {
        // Unit-chord points on a right-turning circle of radius R through the
        // origin, tangent to +y.
        for r in [10.0, 20.0, 40.0] {
            let dth = 2.0 * (1.0f64 / (2.0 * r)).asin();
            let pts: Vec<Point> = (1..=20)
                .map(|l| {
                    let th = dth * l as f64;
                    [r - r * th.cos(), r * th.sin()]
                })
                .collect();
            let path = Path::new(pts).unwrap();
            let expected = (WHEELBASE_M / r).atan() / MAX_STEER_RAD;
            let got = path_to_steering(&path, 8.0).unwrap();
            assert!(
                (got - expected).abs() < 0.01 * expected.abs().max(0.01),
                "r={} got {} want {}",
                r,
                got,
                expected
            );
        }
    }

    #[test]
    fn steering_errors() {
        let empty = Path::new(vec![]).unwrap();
        assert!(path_to_steering(&empty, 5.0).is_err());
        let path = Path::new(vec![[0.0, 1.0]]).unwrap();
        assert!(path_to_steering(&path, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn transform_roundtrip_is_identity(
            x in -100.0..100.0f64,
            y in -100.0..100.0f64,
            yaw in -PI..PI,
            px in -50.0..50.0f64,
            py in -50.0..50.0f64,
        ) {
            let pose = Pose::new(x, y, yaw).unwrap();
            let t = build_egocentric_transform(&pose).unwrap();
            let e = t.apply([px, py]);
            let back = t.apply_inverse(e);
            prop_assert!(dist(back, [px, py]) < 1e-9);
            prop_assert!((t.det() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn resample_always_unit_spaced(
            amp in 0.0..6.0f64,
            wavelen in 20.0..60.0f64,
            step in 0.02..0.2f64,
        ) {
            // Smooth wiggly trajectories through the origin.
            let n = (40.0 / step) as usize;
            let traj: Vec<Point> = (0..n)
                .map(|i| {
                    let s = i as f64 * step;
                    [amp * (std::f64::consts::TAU * s / wavelen).sin(), s]
                })
                .collect();
            let path = resample_unit_arc(&traj, 20).unwrap();
            prop_assert!(path.unit_spacing_violation() < UNIT_SPACING_TOL);
        }

        #[test]
        fn labels_match_exhaustive_oracle(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let source = LabeledTrajectory::new(
                (0..n).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect(),
                (0..n).map(|_| Action::from_id(rng.gen_range(0..9)).unwrap()).collect(),
            ).unwrap();
            let path = Path::new(
                (0..12).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect()
            ).unwrap();
            let got = label_positions(&path, &source).unwrap();
            // Independent scan, written differently: max by negated distance,
            // keeping the first index on ties.
            for (p, lab) in path.positions().iter().zip(&got) {
                let mut pairs: Vec<(usize, f64)> = source.positions.iter()
                    .enumerate().map(|(i, sp)| (i, dist(*p, *sp))).collect();
                pairs.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                prop_assert_eq!(source.labels[pairs[0].0], *lab);
            }
        }

        #[test]
        fn steering_is_odd_under_mirroring(
            seed in 0u64..200,
            speed in 0.5..15.0f64,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Vec::new();
            let mut p = [0.0, 0.0];
            let mut dir = 0.0f64;
            for _ in 0..20 {
                dir += rng.gen_range(-0.3..0.3);
                p = [p[0] - dir.sin(), p[1] + dir.cos()];
                pts.push(p);
            }
            let path = Path::new(pts).unwrap();
            let s = path_to_steering(&path, speed).unwrap();
            let sm = path_to_steering(&path.mirrored_x(), speed).unwrap();
            prop_assert!((s + sm).abs() < 1e-12);
        }
    }
}
