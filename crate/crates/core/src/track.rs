//! Arc-length parameterized polylines and the sand-table geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("a path needs at least two distinct points")]
    TooShort,
    #[error("non-finite coordinate in path")]
    NonFinite,
}

/// Point in table coordinates (metres).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Nearest point on a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub arc_m: T,
    pub distance_m: T,
    pub point: Point<T>,
}

/// Polyline with cumulative arc length. Closed paths wrap around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path<T> {
    points: Vec<Point<T>>,
    cumulative: Vec<T>,
    closed: bool,
}

impl<T: Real> Path<T> {
    pub fn new(points: Vec<Point<T>>, closed: bool) -> Result<Self, PathError> {
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(PathError::NonFinite);
        }
        let mut pts: Vec<Point<T>> = Vec::with_capacity(points.len() + 1);
        for p in points {
            if pts.last().is_none_or(|q| q.dist(&p) > T::zero()) {
                pts.push(p);
            }
        }
        if closed && pts.len() > 2 && pts[0].dist(pts.last().unwrap()) == T::zero() {
            pts.pop();
        }
        if pts.len() < 2 {
            return Err(PathError::TooShort);
        }
        if closed {
            pts.push(pts[0]);
        }
        let mut cumulative = Vec::with_capacity(pts.len());
        let mut acc = T::zero();
        cumulative.push(acc);
        for w in pts.windows(2) {
            acc = acc + w[0].dist(&w[1]);
            cumulative.push(acc);
        }
        Ok(Self {
            points: pts,
            cumulative,
            closed,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> T {
        *self.cumulative.last().unwrap()
    }

    /// Vertices; for closed paths the first vertex is repeated at the end.
    pub fn vertices(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn start(&self) -> Point<T> {
        self.points[0]
    }

    pub fn end(&self) -> Point<T> {
        *self.points.last().unwrap()
    }

    /// Maps an arbitrary arc coordinate into the path's domain.
    pub fn normalize_arc(&self, s: T) -> T {
        let len = self.length();
        if self.closed {
            let mut r = s % len;
            if r < T::zero() {
                r = r + len;
            }
            if r >= len {
                r = r - len;
            }
            r
        } else {
            s.max(T::zero()).min(len)
        }
    }

    fn segment_at(&self, s: T) -> usize {
        // partition_point gives the first cumulative value > s.
        let i = self.cumulative.partition_point(|&c| c <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    pub fn point_at(&self, s: T) -> Point<T> {
        let s = self.normalize_arc(s);
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > T::zero() {
            (s - self.cumulative[i]) / seg
        } else {
            T::zero()
        };
        Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
    }

    /// Travel heading at `s`, in the vehicle model's convention
    /// (`θ = atan2(dx, dy)`).
    pub fn heading_at(&self, s: T) -> T {
        let s = self.normalize_arc(s);
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b.x - a.x).atan2(b.y - a.y)
    }

    pub fn project(&self, p: Point<T>) -> Projection<T> {
        let mut best = Projection {
            arc_m: T::zero(),
            distance_m: T::infinity(),
            point: self.points[0],
        };
        for i in 0..self.points.len() - 1 {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2)
                .max(T::zero())
                .min(T::one());
            let q = Point::new(a.x + dx * t, a.y + dy * t);
            let d = q.dist(&p);
            if d < best.distance_m {
                let seg = self.cumulative[i + 1] - self.cumulative[i];
                best = Projection {
                    arc_m: self.normalize_arc(self.cumulative[i] + seg * t),
                    distance_m: d,
                    point: q,
                };
            }
        }
        best
    }

    /// Forward arc distance from `behind` to `ahead`. Modulo the length on
    /// closed paths; may be negative on open ones.
    pub fn arc_gap(&self, ahead: T, behind: T) -> T {
        if self.closed {
            self.normalize_arc(ahead - behind)
        } else {
            ahead - behind
        }
    }

    /// Points spaced `spacing` apart from the path start. Open paths keep
    /// their end point as the final sample.
    pub fn resample(&self, spacing: T) -> Vec<Point<T>> {
        let len = self.length();
        let n = (len / spacing).floor().to_usize().unwrap_or(0);
        let mut out: Vec<Point<T>> = (0..=n)
            .map(|k| self.point_at(T::lit(k as f64) * spacing))
            .collect();
        if self.closed {
            // The last sample may coincide with the start.
            if out.len() > 1 && out.last().unwrap().dist(&out[0]) < spacing * T::lit(0.5) {
                out.pop();
            }
        } else if len - T::lit(n as f64) * spacing > spacing * T::lit(1e-6) {
            out.push(self.end());
        }
        out
    }

    /// First arc position after `s` whose point is `d` away (straight line)
    /// from `from`, or `None` past the end of an open path.
    fn chord_step(&self, from: Point<T>, s: T, d: T) -> Option<T> {
        let len = self.length();
        let probe = d / T::lit(16.0);
        let mut lo = s;
        let mut hi = s;
        let max_probes = (len / probe).to_usize().unwrap_or(0) + 2;
        for k in 0.. {
            if k > max_probes {
                return None;
            }
            hi = hi + probe;
            if !self.closed && hi > len {
                if self.point_at(len).dist(&from) < d {
                    return None;
                }
                hi = len;
            }
            if self.point_at(hi).dist(&from) >= d {
                break;
            }
            lo = hi;
        }
        for _ in 0..60 {
            let mid = (lo + hi) / T::lit(2.0);
            if self.point_at(mid).dist(&from) >= d {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }

    /// Open path as waypoints with equal straight-line spacing close to
    /// `spacing`, first and last vertex included. Unlike [`resample`](Self::resample)
    /// the spacing holds through corners.
    pub fn resample_chords(&self, spacing: T) -> Vec<Point<T>> {
        let len = self.length();
        let n = (len / spacing)
            .round()
            .max(T::one())
            .to_usize()
            .unwrap_or(1);
        // Arc reached after `n` chord steps of `d`, or `None` if the path
        // runs out first.
        let walk = |d: T| -> (Vec<Point<T>>, Option<T>) {
            let mut s = T::zero();
            let mut p = self.start();
            let mut pts = vec![p];
            for _ in 0..n {
                match self.chord_step(p, s, d) {
                    Some(next) => {
                        s = next;
                        p = self.point_at(s);
                        pts.push(p);
                    }
                    None => return (pts, None),
                }
            }
            (pts, Some(s))
        };
        let (mut lo, mut hi) = (spacing * T::lit(0.25), spacing * T::lit(2.0));
        for _ in 0..60 {
            let mid = (lo + hi) / T::lit(2.0);
            match walk(mid).1 {
                Some(s) if s < len => lo = mid,
                _ => hi = mid,
            }
        }
        let (mut pts, _) = walk(lo);
        pts.truncate(n);
        pts.push(self.end());
        pts
    }

    /// Sub-path between two arc positions, following travel direction
    /// (wraps on closed paths).
    pub fn slice(&self, from: T, to: T, step: T) -> Vec<Point<T>> {
        let span = if self.closed {
            self.arc_gap(to, from)
        } else {
            (to - from).max(T::zero())
        };
        let n = (span / step).ceil().to_usize().unwrap_or(0).max(1);
        (0..=n)
            .map(|k| self.point_at(from + span * T::lit(k as f64 / n as f64)))
            .collect()
    }
}

/// Closed rounded rectangle traversed counter-clockwise (in table x/y),
/// starting at the middle of the bottom straight.
pub fn rounded_rectangle<T: Real>(
    min: Point<T>,
    max: Point<T>,
    corner_radius: T,
    arc_step: T,
) -> Result<Path<T>, PathError> {
    let r = corner_radius;
    let mut pts = Vec::new();
    let corners = [
        // (centre, start angle) angles measured from +x, counter-clockwise
        (Point::new(max.x - r, min.y + r), -T::FRAC_PI_2()),
        (Point::new(max.x - r, max.y - r), T::zero()),
        (Point::new(min.x + r, max.y - r), T::FRAC_PI_2()),
        (Point::new(min.x + r, min.y + r), T::PI()),
    ];
    let n = ((T::FRAC_PI_2() * r) / arc_step)
        .ceil()
        .to_usize()
        .unwrap_or(1)
        .max(1);
    pts.push(Point::new((min.x + max.x) / T::lit(2.0), min.y));
    for (c, a0) in corners {
        for k in 0..=n {
            let a = a0 + T::FRAC_PI_2() * T::lit(k as f64 / n as f64);
            pts.push(Point::new(c.x + r * a.cos(), c.y + r * a.sin()));
        }
    }
    Path::new(pts, true)
}

/// The sand table: overall extent plus the outer ring road centreline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandTable<T> {
    pub width_m: T,
    pub height_m: T,
    pub lane_width_m: T,
    pub track: Path<T>,
}

/// Tunables for the default outer ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableGeometry {
    pub width_m: f64,
    pub height_m: f64,
    pub lane_width_m: f64,
    /// Distance from the table edge to the ring centreline.
    pub ring_inset_m: f64,
    pub corner_radius_m: f64,
}

impl Default for TableGeometry {
    fn default() -> Self {
        Self {
            width_m: 9.0,
            height_m: 5.0,
            lane_width_m: 0.240,
            ring_inset_m: 0.5,
            corner_radius_m: 0.5,
        }
    }
}

impl<T: Real> SandTable<T> {
    pub fn from_geometry(g: &TableGeometry) -> Result<Self, PathError> {
        let l = |v: f64| T::lit(v);
        let track = rounded_rectangle(
            Point::new(l(g.ring_inset_m), l(g.ring_inset_m)),
            Point::new(
                l(g.width_m - g.ring_inset_m),
                l(g.height_m - g.ring_inset_m),
            ),
            l(g.corner_radius_m),
            l(0.02),
        )?;
        Ok(Self {
            width_m: l(g.width_m),
            height_m: l(g.height_m),
            lane_width_m: l(g.lane_width_m),
            track,
        })
    }

    pub fn contains(&self, x: T, y: T) -> bool {
        x >= T::zero() && y >= T::zero() && x <= self.width_m && y <= self.height_m
    }
}

impl<T: Real> Default for SandTable<T> {
    fn default() -> Self {
        Self::from_geometry(&TableGeometry::default()).expect("default ring is valid")
    }
}
