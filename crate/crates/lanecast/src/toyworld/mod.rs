//! Deterministic 2D driving environment: kinematic bicycle ego, lane-following
//! NPCs, procedurally generated tracks, rasterized ego-view observations, and
//! multiplicative infraction scoring.

mod policy;
mod render;
mod track;

pub use policy::{expert_policy, ExploreBehavior, ExplorePolicy, ACCEL_SET, STEER_SET};
pub use render::{
    render, Frame, EGO_COL, EGO_ROW, FRAME_CHANNELS, FRAME_H, FRAME_LEN, FRAME_W, M_PER_PX,
};
pub use track::{Obstacle, Projection, Track, LANE_HALF_WIDTH, MAX_CURVATURE, POINT_SPACING};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyworldError {
    #[error("infraction score undefined for an empty ledger (total_ticks = 0)")]
    EmptyLedger,
}

pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 2.5;
pub const MAX_SPEED: f64 = 15.0;
pub const EGO_RADIUS: f64 = 1.0;
pub const NPC_RADIUS: f64 = 1.0;
/// Episode length in ticks (12 s at 10 Hz).
pub const EPISODE_TICKS: usize = 120;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, c: f64) -> Vec2 {
        Vec2::new(self.x * c, self.y * c)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    /// Left-hand normal (rotate +90°).
    pub fn left(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % std::f64::consts::TAU;
    if r <= -std::f64::consts::PI {
        r += std::f64::consts::TAU;
    } else if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Control {
    steer: f64,
    accel: f64,
}

impl Control {
    pub const STEER_LIMIT: f64 = 0.5;
    pub const ACCEL_MIN: f64 = -4.0;
    pub const ACCEL_MAX: f64 = 3.0;

    /// Clamps to the actuator envelope; non-finite inputs become zero.
    pub fn new(steer: f64, accel: f64) -> Self {
        let steer = if steer.is_finite() { steer } else { 0.0 };
        let accel = if accel.is_finite() { accel } else { 0.0 };
        Control {
            steer: steer.clamp(-Self::STEER_LIMIT, Self::STEER_LIMIT),
            accel: accel.clamp(Self::ACCEL_MIN, Self::ACCEL_MAX),
        }
    }

    pub fn steer(&self) -> f64 {
        self.steer
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl EgoState {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose {
        Pose {
            x: self.x,
            y: self.y,
            yaw: self.yaw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Npc {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub lane_offset: f64,
}

impl Npc {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub ego: EgoState,
    pub npcs: Vec<Npc>,
    pub tick: u32,
    pub track_seed: u64,
}

impl WorldState {
    /// Ego on the centerline near the track start at cruise speed, plus 0–2
    /// lane-following NPCs ahead.
    pub fn spawn<R: rand::Rng>(track: &Track, rng: &mut R) -> WorldState {
        let s0 = 5.0;
        let p = track.point_at(s0);
        let t = track.tangent_at(s0);
        let ego = EgoState {
            x: p.x,
            y: p.y,
            yaw: t.y.atan2(t.x),
            speed: 8.0,
        };
        let n_npcs = rng.random_range(0..=2);
        let npcs = (0..n_npcs)
            .map(|_| {
                let s = s0 + rng.random_range(18.0..70.0);
                let lane_offset = rng.random_range(-1.0..1.0);
                let speed = rng.random_range(3.0..6.0);
                let base = track.point_at(s);
                let tan = track.tangent_at(s);
                let pos = base.add(tan.left().scale(lane_offset));
                Npc {
                    x: pos.x,
                    y: pos.y,
                    yaw: tan.y.atan2(tan.x),
                    speed,
                    lane_offset,
                }
            })
            .collect();
        WorldState {
            ego,
            npcs,
            tick: 0,
            track_seed: track.seed,
        }
    }
}

/// One simulation tick: kinematic bicycle for the ego (simultaneous update
/// from current state), constant-speed lane following for NPCs.
pub fn step(state: &WorldState, ctrl: Control, dt: f64, track: &Track) -> WorldState {
    let e = &state.ego;
    let ego = EgoState {
        x: e.x + e.speed * e.yaw.cos() * dt,
        y: e.y + e.speed * e.yaw.sin() * dt,
        yaw: wrap_angle(e.yaw + e.speed / WHEELBASE * ctrl.steer().tan() * dt),
        speed: (e.speed + ctrl.accel() * dt).clamp(0.0, MAX_SPEED),
    };
    let npcs = state
        .npcs
        .iter()
        .map(|npc| {
            let s = track.project(npc.pos()).s + npc.speed * dt;
            let base = track.point_at(s);
            let tan = track.tangent_at(s);
            let pos = base.add(tan.left().scale(npc.lane_offset));
            Npc {
                x: pos.x,
                y: pos.y,
                yaw: tan.y.atan2(tan.x),
                ..*npc
            }
        })
        .collect();
    WorldState {
        ego,
        npcs,
        tick: state.tick + 1,
        track_seed: state.track_seed,
    }
}

/// Per-episode infraction counters. Collision counting is edge-triggered per
/// object: a continuous multi-tick overlap counts once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InfractionLedger {
    pub collisions: u32,
    pub offroad_ticks: u32,
    pub lowspeed_ticks: u32,
    pub total_ticks: u32,
    contact: Vec<bool>,
}

impl InfractionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, state: &WorldState, track: &Track) {
        let n_objects = track.static_obstacles.len() + state.npcs.len();
        if self.contact.len() != n_objects {
            self.contact = vec![false; n_objects];
        }
        let ego = state.ego.pos();
        for (i, ob) in track.static_obstacles.iter().enumerate() {
            let hit = ego.dist(ob.center) < EGO_RADIUS + ob.radius;
            if hit && !self.contact[i] {
                self.collisions += 1;
            }
            self.contact[i] = hit;
        }
        let base = track.static_obstacles.len();
        for (i, npc) in state.npcs.iter().enumerate() {
            let hit = ego.dist(npc.pos()) < EGO_RADIUS + NPC_RADIUS;
            if hit && !self.contact[base + i] {
                self.collisions += 1;
            }
            self.contact[base + i] = hit;
        }
        if track.project(ego).lateral.abs() > track.lane_half_width {
            self.offroad_ticks += 1;
        }
        if state.ego.speed < 1.0 {
            self.lowspeed_ticks += 1;
        }
        self.total_ticks += 1;
    }
}

/// Multiplicative episode score: halved per collision, a 0.7 factor when the
/// off-road fraction reaches 10%, and a linear low-speed penalty.
pub fn infraction_score(ledger: &InfractionLedger) -> Result<f64, ToyworldError> {
    if ledger.total_ticks == 0 {
        return Err(ToyworldError::EmptyLedger);
    }
    let total = ledger.total_ticks as f64;
    let offroad_frac = ledger.offroad_ticks as f64 / total;
    let lowspeed_frac = ledger.lowspeed_ticks as f64 / total;
    let collision_pen = 0.5f64.powi(ledger.collisions as i32);
    let offroad_pen = if offroad_frac >= 0.1 { 0.7 } else { 1.0 };
    let lowspeed_pen = (1.0 - lowspeed_frac).max(0.0);
    Ok(collision_pen * offroad_pen * lowspeed_pen)
}

/// World point into the ego frame: x forward, y left.
pub fn world_to_ego(ego: &EgoState, p: Vec2) -> Vec2 {
    let d = p.sub(ego.pos());
    let (s, c) = ego.yaw.sin_cos();
    Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight_state(speed: f64) -> (WorldState, Track) {
        let track = Track::straight(200.0, 3.0);
        let state = WorldState {
            ego: EgoState {
                x: 5.0,
                y: 0.0,
                yaw: 0.0,
                speed,
            },
            npcs: vec![],
            tick: 0,
            track_seed: track.seed,
        };
        (state, track)
    }

    #[test]
    fn straight_step_advances_half_meter() {
        let (state, track) = straight_state(5.0);
        let next = step(&state, Control::new(0.0, 0.0), DT, &track);
        assert!((next.ego.x - 5.5).abs() < 1e-12);
        assert_eq!(next.ego.y, 0.0);
        assert_eq!(next.ego.yaw, 0.0);
        assert_eq!(next.ego.speed, 5.0);
        assert_eq!(next.tick, 1);
    }

    #[test]
    fn constant_steer_traces_the_bicycle_arc() {
        let (state, track) = straight_state(5.0);
        let ctrl = Control::new(0.2, 0.0);
        // constant step length + constant turn angle = regular polygon; its
        // circumcenter sits on the perpendicular bisector of the first edge
        let p0 = state.ego.pos();
        let mut s = step(&state, ctrl, DT, &track);
        let p1 = s.ego.pos();
        let edge = p1.dist(p0);
        let theta = s.ego.yaw;
        let r_poly = (edge / 2.0) / (theta / 2.0).sin();
        let normal = p1.sub(p0).left().scale(1.0 / edge);
        let h = (r_poly * r_poly - (edge / 2.0) * (edge / 2.0)).sqrt();
        let center = p0.add(p1).scale(0.5).add(normal.scale(h));

        let analytic = WHEELBASE / 0.2f64.tan();
        assert!((r_poly - analytic).abs() / analytic < 0.02);
        for _ in 0..150 {
            s = step(&s, ctrl, DT, &track);
            let r = s.ego.pos().dist(center);
            assert!(
                (r - r_poly).abs() < 1e-6,
                "radius {r} vs {r_poly} at tick {}",
                s.tick
            );
        }
    }

    #[test]
    fn speed_clamps_at_zero_and_limit() {
        let (state, track) = straight_state(0.1);
        let next = step(&state, Control::new(0.0, -4.0), DT, &track);
        assert_eq!(next.ego.speed, 0.0);

        let (state, track) = straight_state(14.95);
        let next = step(&state, Control::new(0.0, 3.0), DT, &track);
        assert_eq!(next.ego.speed, MAX_SPEED);
    }

    #[test]
    fn control_clamps_on_construction() {
        let c = Control::new(2.0, -10.0);
        assert_eq!(c.steer(), Control::STEER_LIMIT);
        assert_eq!(c.accel(), Control::ACCEL_MIN);
        let c = Control::new(f64::NAN, f64::INFINITY);
        assert_eq!(c.steer(), 0.0);
        assert_eq!(c.accel(), 0.0);
    }

    #[test]
    fn yaw_stays_wrapped() {
        let (mut state, track) = straight_state(10.0);
        let ctrl = Control::new(0.5, 0.0);
        for _ in 0..200 {
            state = step(&state, ctrl, DT, &track);
            assert!(state.ego.yaw > -std::f64::consts::PI - 1e-12);
            assert!(state.ego.yaw <= std::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn npcs_follow_their_lane_offset() {
        let track = Track::straight(200.0, 3.0);
        let mut state = WorldState {
            ego: EgoState {
                x: 0.0,
                y: 0.0,
                yaw: 0.0,
                speed: 0.0,
            },
            npcs: vec![Npc {
                x: 20.0,
                y: 0.8,
                yaw: 0.0,
                speed: 4.0,
                lane_offset: 0.8,
            }],
            tick: 0,
            track_seed: track.seed,
        };
        for _ in 0..50 {
            state = step(&state, Control::new(0.0, 0.0), DT, &track);
        }
        let npc = &state.npcs[0];
        assert!((npc.x - 40.0).abs() < 1e-6, "x = {}", npc.x);
        assert!((npc.y - 0.8).abs() < 1e-9, "y = {}", npc.y);
    }

    #[test]
    fn ledger_edge_triggers_collisions_once_per_overlap() {
        let mut track = Track::straight(100.0, 3.0);
        track.static_obstacles.push(Obstacle {
            center: Vec2::new(10.0, 0.0),
            radius: 1.0,
        });
        let mut ledger = InfractionLedger::new();
        let mut state = WorldState {
            ego: EgoState {
                x: 10.0,
                y: 0.0,
                yaw: 0.0,
                speed: 5.0,
            },
            npcs: vec![],
            tick: 0,
            track_seed: track.seed,
        };
        for _ in 0..10 {
            ledger.update(&state, &track);
        }
        assert_eq!(ledger.collisions, 1);
        assert_eq!(ledger.total_ticks, 10);

        // leave contact, then re-enter: a second distinct collision
        state.ego.x = 50.0;
        ledger.update(&state, &track);
        state.ego.x = 10.0;
        ledger.update(&state, &track);
        assert_eq!(ledger.collisions, 2);
    }

    #[test]
    fn ledger_counts_offroad_and_lowspeed_ticks() {
        let track = Track::straight(100.0, 3.0);
        let mut ledger = InfractionLedger::new();
        let mut state = WorldState {
            ego: EgoState {
                x: 10.0,
                y: 3.5,
                yaw: 0.0,
                speed: 0.5,
            },
            npcs: vec![],
            tick: 0,
            track_seed: track.seed,
        };
        for _ in 0..3 {
            ledger.update(&state, &track);
        }
        assert_eq!(ledger.offroad_ticks, 3);
        assert_eq!(ledger.lowspeed_ticks, 3);

        state.ego.y = 0.0;
        state.ego.speed = 5.0;
        ledger.update(&state, &track);
        assert_eq!(ledger.offroad_ticks, 3);
        assert_eq!(ledger.lowspeed_ticks, 3);
        assert_eq!(ledger.total_ticks, 4);
    }

    #[test]
    fn score_formula_hand_cases() {
        let clean = InfractionLedger {
            total_ticks: 100,
            ..Default::default()
        };
        assert_eq!(infraction_score(&clean).unwrap(), 1.0);

        let one_crash = InfractionLedger {
            collisions: 1,
            total_ticks: 100,
            ..Default::default()
        };
        assert_eq!(infraction_score(&one_crash).unwrap(), 0.5);

        let crawl = InfractionLedger {
            lowspeed_ticks: 100,
            total_ticks: 100,
            ..Default::default()
        };
        assert_eq!(infraction_score(&crawl).unwrap(), 0.0);

        let offroad = InfractionLedger {
            offroad_ticks: 10,
            total_ticks: 100,
            ..Default::default()
        };
        assert_eq!(infraction_score(&offroad).unwrap(), 0.7);
        let barely_on = InfractionLedger {
            offroad_ticks: 9,
            total_ticks: 100,
            ..Default::default()
        };
        assert_eq!(infraction_score(&barely_on).unwrap(), 1.0);

        assert!(infraction_score(&InfractionLedger::default()).is_err());
    }

    #[test]
    fn score_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let total: u32 = rng.random_range(1..200);
            let ledger = InfractionLedger {
                collisions: rng.random_range(0..5),
                offroad_ticks: rng.random_range(0..=total),
                lowspeed_ticks: rng.random_range(0..=total),
                total_ticks: total,
                contact: vec![],
            };
            let s = infraction_score(&ledger).unwrap();
            assert!((0.0..=1.0).contains(&s), "{s}");
        }
    }

    #[test]
    fn wrap_angle_stays_in_half_open_interval() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap_angle(-PI - 0.1) - (PI - 0.1)).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(7.0 * PI).abs() - PI).abs() < 1e-9);
    }
}
