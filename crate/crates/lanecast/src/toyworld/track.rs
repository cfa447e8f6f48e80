//! Procedural tracks: a gently curving centerline polyline sampled every 2 m,
//! a fixed-width lane corridor, and a few static obstacles parked on the lane
//! edge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Vec2;

pub const POINT_SPACING: f64 = 2.0;
pub const LANE_HALF_WIDTH: f64 = 3.0;
pub const MAX_CURVATURE: f64 = 0.045;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub centerline: Vec<Vec2>,
    pub lane_half_width: f64,
    pub static_obstacles: Vec<Obstacle>,
    pub seed: u64,
    cum_s: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arclength of the closest centerline point.
    pub s: f64,
    /// Signed lateral offset; positive is left of the direction of travel.
    pub lateral: f64,
    /// Unsigned distance to the centerline.
    pub dist: f64,
}

impl Track {
    /// Generates a track from a seed: 8–14 arcs of 15–30 m with zero-biased
    /// curvature, then 0–3 edge obstacles. The cumulative heading is kept
    /// within ±2.2 rad so the track never doubles back over itself.
    pub fn generate(seed: u64) -> Track {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_arcs: usize = rng.random_range(8..=14);
        let mut pts = vec![Vec2::ZERO];
        let mut heading: f64 = 0.0;
        for _ in 0..n_arcs {
            let len: f64 = rng.random_range(15.0..30.0);
            let mut kappa = if rng.random_bool(0.45) {
                0.0
            } else {
                let mag: f64 = rng.random_range(0.008..MAX_CURVATURE);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            };
            if (heading + kappa * len).abs() > 2.2 {
                kappa = -kappa;
            }
            let steps = (len / POINT_SPACING).round() as usize;
            for _ in 0..steps {
                heading += kappa * POINT_SPACING;
                let last = *pts.last().unwrap();
                pts.push(last.add(Vec2::new(heading.cos(), heading.sin()).scale(POINT_SPACING)));
            }
        }
        let mut track = Track::from_centerline(pts, LANE_HALF_WIDTH, seed);
        let n_obstacles: usize = rng.random_range(0..=3);
        for _ in 0..n_obstacles {
            let s = rng.random_range(20.0..track.total_len() - 10.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let off: f64 = rng.random_range(LANE_HALF_WIDTH - 0.5..LANE_HALF_WIDTH + 1.5);
            let radius = rng.random_range(0.5..1.0);
            let center = track
                .point_at(s)
                .add(track.tangent_at(s).left().scale(side * off));
            track.static_obstacles.push(Obstacle { center, radius });
        }
        track
    }

    /// A straight track along +x, mostly for tests.
    pub fn straight(len: f64, lane_half_width: f64) -> Track {
        let n = (len / POINT_SPACING).ceil() as usize;
        let pts = (0..=n)
            .map(|i| Vec2::new(i as f64 * POINT_SPACING, 0.0))
            .collect();
        Track::from_centerline(pts, lane_half_width, 0)
    }

    fn from_centerline(centerline: Vec<Vec2>, lane_half_width: f64, seed: u64) -> Track {
        assert!(centerline.len() >= 2, "centerline needs at least 2 points");
        let mut cum_s = Vec::with_capacity(centerline.len());
        let mut s = 0.0;
        cum_s.push(0.0);
        for w in centerline.windows(2) {
            s += w[1].dist(w[0]);
            cum_s.push(s);
        }
        Track {
            centerline,
            lane_half_width,
            static_obstacles: vec![],
            seed,
            cum_s,
        }
    }

    pub fn total_len(&self) -> f64 {
        *self.cum_s.last().unwrap()
    }

    /// Index of the segment containing arclength `s` (clamped to the track).
    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.total_len());
        let i = match self
            .cum_s
            .binary_search_by(|v| v.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.cum_s.len() - 2),
            Err(i) => i - 1,
        };
        let seg_len = self.cum_s[i + 1] - self.cum_s[i];
        let t = if seg_len > 0.0 {
            (s - self.cum_s[i]) / seg_len
        } else {
            0.0
        };
        (i, t)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        a.add(b.sub(a).scale(t))
    }

    /// Unit tangent of the segment containing `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let (i, _) = self.segment_at(s);
        let d = self.centerline[i + 1].sub(self.centerline[i]);
        d.scale(1.0 / d.norm())
    }

    /// Closest-point projection onto the centerline polyline.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = Projection {
            s: 0.0,
            lateral: f64::INFINITY,
            dist: f64::INFINITY,
        };
        for i in 0..self.centerline.len() - 1 {
            let a = self.centerline[i];
            let b = self.centerline[i + 1];
            let ab = b.sub(a);
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 {
                (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a.add(ab.scale(t));
            let d = p.dist(q);
            if d < best.dist {
                let side = ab.cross(p.sub(a));
                best = Projection {
                    s: self.cum_s[i] + t * len2.sqrt(),
                    lateral: if side >= 0.0 { d } else { -d },
                    dist: d,
                };
            }
        }
        best
    }
}
