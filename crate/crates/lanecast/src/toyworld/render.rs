//! Rasterized ego-view observations: two 32×64 binary masks (drivable
//! corridor, objects) at 0.5 m/px with the ego at pixel (24, 32) heading up.

use super::{world_to_ego, Track, Vec2, WorldState, NPC_RADIUS};

pub const FRAME_CHANNELS: usize = 2;
pub const FRAME_H: usize = 32;
pub const FRAME_W: usize = 64;
pub const FRAME_LEN: usize = FRAME_CHANNELS * FRAME_H * FRAME_W;
pub const M_PER_PX: f64 = 0.5;
pub const EGO_ROW: usize = 24;
pub const EGO_COL: usize = 32;

/// Pixel (r, c) center in ego coordinates: x forward, y left.
fn pixel_center(r: usize, c: usize) -> Vec2 {
    Vec2::new(
        (EGO_ROW as f64 - r as f64) * M_PER_PX,
        (EGO_COL as f64 - c as f64) * M_PER_PX,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    values: Vec<f32>,
}

impl Frame {
    pub fn zeros() -> Frame {
        Frame {
            values: vec![0.0; FRAME_LEN],
        }
    }

    pub fn from_values(values: Vec<f32>) -> Frame {
        assert_eq!(values.len(), FRAME_LEN, "frame length");
        Frame { values }
    }

    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.values[ch * FRAME_H * FRAME_W + r * FRAME_W + c]
    }

    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f32) {
        self.values[ch * FRAME_H * FRAME_W + r * FRAME_W + c] = v;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Fraction of set pixels in a channel.
    pub fn coverage(&self, ch: usize) -> f32 {
        let n = FRAME_H * FRAME_W;
        let s: f32 = self.values[ch * n..(ch + 1) * n].iter().sum();
        s / n as f32
    }

    /// Stamps all pixels within `radius` of the segment `p0`–`p1` (given in
    /// ego coordinates) into channel `ch`.
    fn stamp_capsule(&mut self, ch: usize, p0: Vec2, p1: Vec2, radius: f64) {
        let x_hi = p0.x.max(p1.x) + radius;
        let x_lo = p0.x.min(p1.x) - radius;
        let y_hi = p0.y.max(p1.y) + radius;
        let y_lo = p0.y.min(p1.y) - radius;
        // rows: x_e = (24 - r) * 0.5 is decreasing in r
        let r_lo = ((EGO_ROW as f64 - x_hi / M_PER_PX).floor().max(0.0)) as usize;
        let r_hi = (EGO_ROW as f64 - x_lo / M_PER_PX).ceil().min(FRAME_H as f64 - 1.0);
        if r_hi < 0.0 {
            return;
        }
        let c_lo = ((EGO_COL as f64 - y_hi / M_PER_PX).floor().max(0.0)) as usize;
        let c_hi = (EGO_COL as f64 - y_lo / M_PER_PX).ceil().min(FRAME_W as f64 - 1.0);
        if c_hi < 0.0 {
            return;
        }
        let seg = p1.sub(p0);
        let len2 = seg.dot(seg);
        for r in r_lo..=r_hi as usize {
            for c in c_lo..=c_hi as usize {
                let p = pixel_center(r, c);
                let t = if len2 > 0.0 {
                    (p.sub(p0).dot(seg) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                if p.dist(p0.add(seg.scale(t))) <= radius {
                    self.set(ch, r, c, 1.0);
                }
            }
        }
    }

    fn stamp_disc(&mut self, ch: usize, center: Vec2, radius: f64) {
        self.stamp_capsule(ch, center, center, radius);
    }
}

/// Frame extent from the ego: 12 m ahead, 3.5 m behind, 16 m to either side.
const VIEW_RADIUS: f64 = 20.1;

pub fn render(state: &WorldState, track: &Track) -> Frame {
    let mut frame = Frame::zeros();
    let ego = &state.ego;
    let ego_pos = ego.pos();
    let cull = VIEW_RADIUS + track.lane_half_width + super::track::POINT_SPACING;
    for w in track.centerline.windows(2) {
        if w[0].dist(ego_pos) > cull && w[1].dist(ego_pos) > cull {
            continue;
        }
        let a = world_to_ego(ego, w[0]);
        let b = world_to_ego(ego, w[1]);
        frame.stamp_capsule(0, a, b, track.lane_half_width);
    }
    for ob in &track.static_obstacles {
        if ob.center.dist(ego_pos) > VIEW_RADIUS + ob.radius {
            continue;
        }
        frame.stamp_disc(1, world_to_ego(ego, ob.center), ob.radius);
    }
    for npc in &state.npcs {
        if npc.pos().dist(ego_pos) > VIEW_RADIUS + NPC_RADIUS {
            continue;
        }
        frame.stamp_disc(1, world_to_ego(ego, npc.pos()), NPC_RADIUS);
    }
    frame
}
