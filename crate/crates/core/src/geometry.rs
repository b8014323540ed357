//! Camera poses, heading similarity and field-of-view overlap.
//!
//! A camera's field of view is a circular sector with its apex at the camera,
//! bisected by the heading, of radius `r` and opening angle `θ`. Overlap of
//! two views is the area of the intersection of their sectors divided by the
//! sector area. Sectors are approximated by convex polygons whose arc is split
//! into [`ARC_CHORDS`] chords, and intersected by Sutherland–Hodgman clipping.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ARC_CHORDS: usize = 64;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = libm::fmod(a, TAU);
    let w = if r < 0.0 { r + TAU } else { r };
    // the shift can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Absolute heading difference in `[0, π]`.
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = (wrap_angle(a) - wrap_angle(b)).abs();
    d.min(TAU - d)
}

/// `1 − 2·Δ/π` for the wrapped heading difference `Δ`; in `[−1, 1]`.
pub fn heading_similarity(a: f64, b: f64) -> f64 {
    1.0 - 2.0 * heading_difference(a, b) / PI
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    /// Radians, wrapped into `[0, 2π)` by [`Pose::new`].
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            z,
            heading: wrap_angle(heading),
        }
    }

    pub fn planar_distance(&self, other: &Pose) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Field-of-view sector shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovConfig {
    /// Meters.
    pub radius: f64,
    /// Opening angle in radians, `0 < θ ≤ π`.
    pub angle: f64,
    /// Views whose elevation differs by more than this many meters do not
    /// overlap.
    #[serde(default)]
    pub elevation_gate: Option<f64>,
}

impl FovConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "fov radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.angle > 0.0 && self.angle <= PI) {
            return Err(Error::Config(alloc::format!(
                "fov angle must be in (0, π], got {}",
                self.angle
            )));
        }
        if let Some(g) = self.elevation_gate {
            if !(g >= 0.0) {
                return Err(Error::Config(alloc::format!(
                    "elevation gate must be non-negative, got {g}"
                )));
            }
        }
        Ok(())
    }
}

type Point = (f64, f64);

/// Counter-clockwise polygon approximating the view sector of `pose`.
pub fn sector_polygon(pose: &Pose, fov: &FovConfig) -> Vec<Point> {
    let mut poly = Vec::with_capacity(ARC_CHORDS + 2);
    poly.push((pose.x, pose.y));
    let start = pose.heading - fov.angle / 2.0;
    for k in 0..=ARC_CHORDS {
        let a = start + fov.angle * k as f64 / ARC_CHORDS as f64;
        poly.push((
            pose.x + fov.radius * libm::cos(a),
            pose.y + fov.radius * libm::sin(a),
        ));
    }
    poly
}

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        twice += a.0 * b.1 - b.0 * a.1;
    }
    twice / 2.0
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Intersection of `subject` with the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % n]);
        let input = core::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (dc, dp) = (cross(e0, e1, cur), cross(e0, e1, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Normalized overlap of the two views in `[0, 1]`.
pub fn fov_overlap(a: &Pose, b: &Pose, fov: &FovConfig) -> f64 {
    if let Some(gate) = fov.elevation_gate {
        if (a.z - b.z).abs() > gate {
            return 0.0;
        }
    }
    if a.planar_distance(b) >= 2.0 * fov.radius {
        return 0.0;
    }
    let (pa, pb) = (sector_polygon(a, fov), sector_polygon(b, fov));
    let full = polygon_area(&pa);
    if full <= 0.0 {
        return 0.0;
    }
    // Clip both ways and average so the result is symmetric to rounding.
    let ab = polygon_area(&clip_convex(&pa, &pb));
    let ba = polygon_area(&clip_convex(&pb, &pa));
    ((ab + ba) / (2.0 * full)).clamp(0.0, 1.0)
}
