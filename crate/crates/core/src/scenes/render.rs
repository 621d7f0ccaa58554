//! Stylized front-view rasterization of a scene.
//!
//! Ground-plane points are mapped through a flat-ground pinhole model so the
//! road converges toward a horizon line. Channel 0 carries road/ground
//! shading, channel 1 lane markings, channel 2 obstacles.

use super::maneuver::ego_offset_from_center;
use super::{RoadTopology, SceneImage, SceneSpec, LANE_WIDTH_M};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAM_BACK_M: f64 = 2.0;
const HORIZON_FRAC: f64 = 0.26;
const FOCAL_FRAC: f64 = 1.5;

/// Flat-ground pinhole projection between ground coordinates
/// (x right, y forward, meters) and pixel coordinates (u right, v down).
#[derive(Copy, Clone, Debug)]
pub struct GroundProjection {
    pub width: usize,
    pub height: usize,
    horizon_v: f64,
    focal: f64,
}

impl GroundProjection {
    pub fn new(width: usize, height: usize) -> Self {
        GroundProjection {
            width,
            height,
            horizon_v: HORIZON_FRAC * height as f64,
            focal: FOCAL_FRAC * height as f64,
        }
    }

    pub fn project(&self, p: [f64; 2]) -> Option<(f64, f64)> {
        let depth = p[1] + CAM_BACK_M;
        if depth < 0.3 {
            return None;
        }
        let u = self.width as f64 / 2.0 + self.focal * p[0] / depth;
        let v = self.horizon_v + self.focal / depth;
        Some((u, v))
    }

    /// Ground point seen at pixel center (u, v), if below the horizon.
    pub fn unproject(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let dv = v - self.horizon_v;
        if dv < 0.35 {
            return None;
        }
        let depth = self.focal / dv;
        let y = depth - CAM_BACK_M;
        let x = (u - self.width as f64 / 2.0) * depth / self.focal;
        Some([x, y])
    }
}

/// Centerline polyline with a half-width, plus lane structure for markings.
struct RoadBand {
    center: Vec<[f64; 2]>,
    half_width: f64,
    lanes: u32,
}

impl RoadBand {
    fn distance_to_center(&self, p: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for w in self.center.windows(2) {
            best = best.min(segment_distance(p, w[0], w[1]));
        }
        best
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = [p[0] - q[0], p[1] - q[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn road_bands(spec: &SceneSpec) -> Vec<RoadBand> {
    let half = spec.lane_count as f64 * LANE_WIDTH_M / 2.0;
    // Ego road centerline sits left/right of the ego by the lane offset.
    let cx = -ego_offset_from_center(spec);
    let mut bands = Vec::new();
    match spec.topology {
        RoadTopology::Straight => {
            bands.push(RoadBand {
                center: vec![[cx, -6.0], [cx, 60.0]],
                half_width: half,
                lanes: spec.lane_count,
            });
        }
        RoadTopology::Curve { radius_m, to_right, start_m } => {
            let mut pts = vec![[cx, -6.0], [cx, start_m]];
            let sign = if to_right { 1.0 } else { -1.0 };
            let center = [cx + sign * radius_m, start_m];
            let mut th = 0.0f64;
            while th < 1.25 {
                th += 0.05;
                pts.push([
                    center[0] - sign * radius_m * th.cos(),
                    start_m + radius_m * th.sin(),
                ]);
            }
            bands.push(RoadBand { center: pts, half_width: half, lanes: spec.lane_count });
        }
        RoadTopology::Cross { distance_m } => {
            bands.push(RoadBand {
                center: vec![[cx, -6.0], [cx, 60.0]],
                half_width: half,
                lanes: spec.lane_count,
            });
            // Two-way cross road, two lanes per direction.
            bands.push(RoadBand {
                center: vec![[-80.0, distance_m + LANE_WIDTH_M], [80.0, distance_m + LANE_WIDTH_M]],
                half_width: 2.0 * LANE_WIDTH_M,
                lanes: 4,
            });
        }
        RoadTopology::Fork { distance_m, branch_angle_rad } => {
            bands.push(RoadBand {
                center: vec![[cx, -6.0], [cx, distance_m]],
                half_width: half,
                lanes: spec.lane_count,
            });
            for side in [-1.0, 1.0] {
                let dir = [side * branch_angle_rad.sin(), branch_angle_rad.cos()];
                bands.push(RoadBand {
                    center: vec![
                        [cx, distance_m],
                        [cx + dir[0] * 60.0, distance_m + dir[1] * 60.0],
                    ],
                    half_width: half.max(LANE_WIDTH_M),
                    lanes: spec.lane_count.max(1),
                });
            }
        }
    }
    bands
}

pub(super) fn render(spec: &SceneSpec) -> SceneImage {
    let s = spec.image_size;
    let c = spec.image_channels;
    let proj = GroundProjection::new(s, s);
    let bands = road_bands(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x00C0_FFEE);
    // Mild per-scene appearance jitter so shading is a cue, not a constant.
    let jitter: f64 = rng.gen_range(0.9..1.1);
    let road_shade = 0.34 * jitter;
    let ground_shade = 0.08 * jitter;
    let sky_shade = 0.16 * jitter;

    let mut canvas = vec![0.0f64; s * s * c];
    for v in 0..s {
        for u in 0..s {
            let idx = (v * s + u) * c;
            match proj.unproject(u as f64 + 0.5, v as f64 + 0.5) {
                None => {
                    canvas[idx] = sky_shade;
                }
                Some(p) => {
                    let on_road = bands.iter().any(|b| b.distance_to_center(p) <= b.half_width);
                    canvas[idx] = if on_road { road_shade } else { ground_shade };
                    for o in &spec.obstacles {
                        let d = ((p[0] - o.x).powi(2) + (p[1] - o.y).powi(2)).sqrt();
                        if d <= o.radius_m {
                            let soft = (1.0 - d / o.radius_m).min(0.6) + 0.4;
                            canvas[idx + 2] = canvas[idx + 2].max(0.9 * soft);
                            canvas[idx] = canvas[idx].max(0.5);
                        }
                    }
                }
            }
        }
    }

    // Lane markings: edges solid and bright, interior boundaries dashed.
    for band in &bands {
        paint_markings(&mut canvas, s, c, &proj, band);
    }

    let pixels = canvas
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    SceneImage { height: s, width: s, channels: c, pixels }
}

fn paint_markings(
    canvas: &mut [f64],
    s: usize,
    c: usize,
    proj: &GroundProjection,
    band: &RoadBand,
) {
    let n_bound = band.lanes + 1;
    for j in 0..n_bound {
        let offset = j as f64 * LANE_WIDTH_M - band.half_width;
        let edge = j == 0 || j == n_bound - 1;
        let intensity = if edge { 0.9 } else { 0.6 };
        let mut arc = 0.0f64;
        for w in band.center.windows(2) {
            let seg = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let len = (seg[0] * seg[0] + seg[1] * seg[1]).sqrt();
            if len < 1e-9 {
                continue;
            }
            // Right-hand normal of the direction of travel.
            let nrm = [seg[1] / len, -seg[0] / len];
            let steps = (len / 0.25).ceil() as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                arc += if i == 0 { 0.0 } else { len / steps as f64 };
                // Interior boundaries use a 2 m on / 1.5 m off dash cycle.
                if !edge && arc.rem_euclid(3.5) > 2.0 {
                    continue;
                }
                let p = [
                    w[0][0] + t * seg[0] + nrm[0] * offset,
                    w[0][1] + t * seg[1] + nrm[1] * offset,
                ];
                if let Some((u, v)) = proj.project(p) {
                    stamp(canvas, s, c, u, v, intensity);
                }
            }
        }
    }
}

fn stamp(canvas: &mut [f64], s: usize, c: usize, u: f64, v: f64, intensity: f64) {
    let (ui, vi) = (u.floor() as isize, v.floor() as isize);
    if ui < 0 || vi < 0 || ui >= s as isize || vi >= s as isize {
        return;
    }
    let idx = (vi as usize * s + ui as usize) * c;
    canvas[idx] = canvas[idx].max(intensity);
    canvas[idx + 1] = canvas[idx + 1].max(intensity);
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::Obstacle;
    use crate::action::Action;

    #[test]
    fn projection_roundtrip() {
        let proj = GroundProjection::new(64, 64);
        for p in [[0.0, 5.0], [3.0, 12.0], [-6.0, 30.0]] {
            let (u, v) = proj.project(p).unwrap();
            let back = proj.unproject(u, v).unwrap();
            assert!((back[0] - p[0]).abs() < 1e-9);
            assert!((back[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn horizon_row_is_sky() {
        let spec = SceneSpec::random_for(Action::Go, 1, 64);
        let img = render(&spec);
        // Top row is above the horizon in every scene.
        assert!(img.pixel(0, 0, 2) == 0);
    }

    #[test]
    fn obstacle_pixels_appear_in_channel_two() {
        let mut spec = SceneSpec::random_for(Action::Avoidance, 5, 64);
        spec.obstacles = vec![Obstacle { x: 0.0, y: 10.0, radius_m: 1.2 }];
        let img = render(&spec);
        let total: u32 = (0..64)
            .flat_map(|v| (0..64).map(move |u| (v, u)))
            .map(|(v, u)| img.pixel(v, u, 2) as u32)
            .sum();
        assert!(total > 200, "obstacle channel total {total}");
    }

    #[test]
    fn cross_road_widens_midfield() {
        let base = SceneSpec {
            lane_count: 1,
            ego_lane: 0,
            obstacles: vec![],
            ..SceneSpec::random_for(Action::Go, 9, 64)
        };
        let near = SceneSpec {
            topology: RoadTopology::Cross { distance_m: 12.0 },
            ..base.clone()
        };
        let img = render(&near);
        let proj = GroundProjection::new(64, 64);
        // A point off to the side at the junction row is road in the cross
        // scene; the same ground point beside a straight road is ground.
        let (u, v) = proj.project([4.0, 13.0]).unwrap();
        let on_cross = img.pixel(v as usize, u as usize, 0);
        let straight = SceneSpec { topology: RoadTopology::Straight, ..base };
        let img2 = render(&straight);
        let off_cross = img2.pixel(v as usize, u as usize, 0);
        assert!(on_cross > off_cross, "cross {on_cross} vs straight {off_cross}");
    }
}
