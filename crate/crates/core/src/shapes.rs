//! Planar footprints: oriented rectangles and simple polygons in the ground plane.

use serde::{Deserialize, Serialize};

pub type Point2 = [f64; 2];

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Box of `length` along `heading` and `width` across it, centred at `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Point2, heading: f64, length: f64, width: f64) -> Self {
        Self { center, heading, length, width }
    }

    fn axes(&self) -> [Point2; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Counter-clockwise corners starting front-left.
    pub fn corners(&self) -> [Point2; 4] {
        let [f, l] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let at = |a: f64, b: f64| [self.center[0] + f[0] * a + l[0] * b, self.center[1] + f[1] * a + l[1] * b];
        [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
    }

    /// Point in body coordinates (forward, left).
    pub fn to_local(&self, p: Point2) -> Point2 {
        let [f, l] = self.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [d[0] * f[0] + d[1] * f[1], d[0] * l[0] + d[1] * l[1]]
    }

    pub fn contains_point(&self, p: Point2) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.length / 2.0 && q[1].abs() <= self.width / 2.0
    }

    /// Separating-axis test; touching boundaries count as overlap.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let (ca, cb) = (self.corners(), other.corners());
        for axis in self.axes().into_iter().chain(other.axes()) {
            let project = |cs: &[Point2; 4]| {
                cs.iter().map(|c| c[0] * axis[0] + c[1] * axis[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
            };
            let (a0, a1) = project(&ca);
            let (b0, b1) = project(&cb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }
}

/// Simple (non-self-intersecting) polygon, either orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum::<f64>() / 2.0
    }

    /// Even-odd rule.
    pub fn contains_point(&self, p: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Whole rectangle inside: corners inside, no polygon vertex strictly
    /// inside the rectangle, and no proper edge crossing.
    pub fn contains_rect(&self, rect: &OrientedRect) -> bool {
        let corners = rect.corners();
        if !corners.iter().all(|&c| self.contains_point(c)) {
            return false;
        }
        let strictly_inside = |p: Point2| {
            let q = rect.to_local(p);
            q[0].abs() < rect.length / 2.0 && q[1].abs() < rect.width / 2.0
        };
        if self.vertices.iter().any(|&v| strictly_inside(v)) {
            return false;
        }
        for i in 0..4 {
            let (r0, r1) = (corners[i], corners[(i + 1) % 4]);
            for (a, b) in self.edges() {
                if segments_cross(r0, r1, a, b) {
                    return false;
                }
            }
        }
        true
    }

    /// Closed polygon approximating the band `|lateral| <= half_width`
    /// around a centreline given as points with headings.
    pub fn band(centerline: &[(Point2, f64)], half_width: f64) -> Self {
        let offset = |(p, h): &(Point2, f64), side: f64| {
            let (s, c) = h.sin_cos();
            [p[0] - s * half_width * side, p[1] + c * half_width * side]
        };
        let mut vertices: Vec<Point2> = centerline.iter().map(|pt| offset(pt, -1.0)).collect();
        vertices.extend(centerline.iter().rev().map(|pt| offset(pt, 1.0)));
        Self { vertices }
    }
}

/// Proper crossing: interiors intersect at a single point.
fn segments_cross(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Ego footprints centred on each waypoint. The heading at waypoint `t` is
/// the direction of `w_t - w_{t-1}` with `w_0` the origin; a stationary step
/// keeps the previous heading, starting from 0.
pub fn trajectory_footprints(waypoints: &[Point2], length: f64, width: f64) -> Vec<OrientedRect> {
    let mut prev = [0.0, 0.0];
    let mut heading = 0.0;
    waypoints
        .iter()
        .map(|&w| {
            let (dx, dy) = (w[0] - prev[0], w[1] - prev[1]);
            if dx.hypot(dy) > 1e-9 {
                heading = dy.atan2(dx);
            }
            prev = w;
            OrientedRect::new(w, heading, length, width)
        })
        .collect()
}

/// Region made of several polygons; a footprint is inside when one polygon holds it.
pub fn region_contains_rect(region: &[Polygon], rect: &OrientedRect) -> bool {
    region.iter().any(|p| p.contains_rect(rect))
}

pub fn region_contains_point(region: &[Polygon], p: Point2) -> bool {
    region.iter().any(|poly| poly.contains_point(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn square(half: f64) -> Polygon {
        Polygon::new(vec![[-half, -half], [half, -half], [half, half], [-half, half]])
    }

    #[test]
    fn corners_of_axis_aligned_box() {
        let r = OrientedRect::new([1.0, 2.0], 0.0, 4.0, 2.0);
        assert_eq!(r.corners(), [[3.0, 3.0], [-1.0, 3.0], [-1.0, 1.0], [3.0, 1.0]]);
    }

    #[test]
    fn sat_separates_and_detects() {
        let a = OrientedRect::new([0.0, 0.0], 0.0, 4.0, 2.0);
        assert!(a.overlaps(&OrientedRect::new([3.9, 0.0], 0.0, 4.0, 2.0)));
        assert!(!a.overlaps(&OrientedRect::new([4.1, 0.0], 0.0, 4.0, 2.0)));
        // Bounding boxes overlap; only the rotated axis separates.
        let b = OrientedRect::new([2.5, 2.5], -FRAC_PI_4, 4.0, 0.5);
        assert!(!a.overlaps(&b));
        assert!(a.overlaps(&OrientedRect::new([2.0, 1.0], FRAC_PI_4, 4.0, 1.0)));
    }

    #[test]
    fn polygon_point_tests() {
        let sq = square(1.0);
        assert!(sq.contains_point([0.0, 0.0]));
        assert!(!sq.contains_point([1.5, 0.0]));
        assert!((sq.signed_area() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn concave_notch_excludes_rect() {
        // U shape: the notch between the arms is outside.
        let u = Polygon::new(vec![[0.0, 0.0], [6.0, 0.0], [6.0, 6.0], [4.0, 6.0], [4.0, 2.0], [2.0, 2.0], [2.0, 6.0], [0.0, 6.0]]);
        assert!(u.contains_rect(&OrientedRect::new([3.0, 1.0], 0.0, 5.0, 1.0)));
        // Corners sit in the arms, but the bar spans the notch.
        assert!(!u.contains_rect(&OrientedRect::new([3.0, 4.0], 0.0, 5.0, 1.0)));
        assert!(!u.contains_rect(&OrientedRect::new([3.0, 4.0], 0.0, 1.0, 1.0)));
    }

    #[test]
    fn footprint_headings_follow_steps() {
        let fp = trajectory_footprints(&[[1.0, 0.0], [1.0, 0.0], [1.0, 1.0]], 4.5, 2.0);
        assert_eq!(fp[0].heading, 0.0);
        assert_eq!(fp[1].heading, 0.0);
        assert!((fp[2].heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn band_around_straight_line() {
        let line: Vec<_> = (0..=10).map(|i| ([i as f64, 0.0], 0.0)).collect();
        let band = Polygon::band(&line, 5.0);
        assert!((band.signed_area().abs() - 100.0).abs() < 1e-9);
        assert!(band.contains_rect(&OrientedRect::new([5.0, 0.0], 0.0, 4.5, 2.0)));
        assert!(!band.contains_rect(&OrientedRect::new([5.0, 4.5], 0.0, 4.5, 2.0)));
    }
}
