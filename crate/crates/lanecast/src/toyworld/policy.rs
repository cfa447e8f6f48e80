//! Driving policies: a pure-pursuit expert with a frontal brake cone, and a
//! scripted exploration policy that perturbs the controls for data variety.

use rand::Rng;

use super::{world_to_ego, Control, Track, Vec2, WorldState, WHEELBASE};

pub const LOOKAHEAD: f64 = 6.0;
pub const TARGET_SPEED: f64 = 8.0;
pub const BRAKE_DIST: f64 = 8.0;
pub const BRAKE_HALF_ANGLE: f64 = 15.0 * std::f64::consts::PI / 180.0;

/// Pure-pursuit centerline tracking at a fixed lookahead, proportional speed
/// control toward the cruise speed, and a hard brake whenever any object sits
/// inside the frontal cone.
pub fn expert_policy(state: &WorldState, track: &Track) -> Control {
    let ego = &state.ego;
    let proj = track.project(ego.pos());
    let target = track.point_at(proj.s + LOOKAHEAD);
    let rel = world_to_ego(ego, target);
    let d2 = rel.dot(rel).max(1e-6);
    let steer = 2.0 * WHEELBASE * rel.y / d2;

    let mut brake = false;
    let mut consider = |p: Vec2| {
        let r = world_to_ego(ego, p);
        if r.norm() <= BRAKE_DIST && r.y.atan2(r.x).abs() <= BRAKE_HALF_ANGLE {
            brake = true;
        }
    };
    for ob in &track.static_obstacles {
        consider(ob.center);
    }
    for npc in &state.npcs {
        consider(npc.pos());
    }

    let accel = if brake {
        Control::ACCEL_MIN
    } else {
        TARGET_SPEED - ego.speed
    };
    Control::new(steer, accel)
}

pub const STEER_SET: [f64; 7] = [-0.4, -0.2, -0.1, 0.0, 0.1, 0.2, 0.4];
pub const ACCEL_SET: [f64; 4] = [-2.0, 0.0, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExploreBehavior {
    /// Constant steer and accel every tick.
    Hold,
    /// Steer follows a 4 s sinusoid at the drawn amplitude.
    SinusoidSteer,
    /// Straight until tick 60, then the drawn steer kicks in.
    LateSwerve,
}

/// Episode-scoped exploration script: parameters are drawn once at episode
/// start, then `control_at` is a pure function of the tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorePolicy {
    pub behavior: ExploreBehavior,
    pub steer: f64,
    pub accel: f64,
}

impl ExplorePolicy {
    /// Draw order: steer, accel, behavior.
    pub fn sample<R: Rng>(rng: &mut R) -> ExplorePolicy {
        let steer = STEER_SET[rng.random_range(0..STEER_SET.len())];
        let accel = ACCEL_SET[rng.random_range(0..ACCEL_SET.len())];
        let behavior = match rng.random_range(0..3) {
            0 => ExploreBehavior::Hold,
            1 => ExploreBehavior::SinusoidSteer,
            _ => ExploreBehavior::LateSwerve,
        };
        ExplorePolicy {
            behavior,
            steer,
            accel,
        }
    }

    pub fn control_at(&self, tick: u32) -> Control {
        match self.behavior {
            ExploreBehavior::Hold => Control::new(self.steer, self.accel),
            ExploreBehavior::SinusoidSteer => {
                let phase = std::f64::consts::TAU * tick as f64 / 40.0;
                Control::new(self.steer * phase.sin(), self.accel)
            }
            ExploreBehavior::LateSwerve => {
                if tick < 60 {
                    Control::new(0.0, self.accel)
                } else {
                    Control::new(self.steer, self.accel)
                }
            }
        }
    }
}
