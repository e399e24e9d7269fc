//! User trajectories over consecutive covariance-coherence frames.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FrameTiming;
use crate::scene::{Bounds, UserPosition};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMode {
    /// Straight motion within each frame; speed and heading redrawn per frame.
    #[default]
    Constant,
    /// Heading perturbed at every channel-interval boundary.
    Dynamic,
}

impl std::fmt::Display for TrajectoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrajectoryMode::Constant => "constant",
            TrajectoryMode::Dynamic => "dynamic",
        })
    }
}

impl std::str::FromStr for TrajectoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(TrajectoryMode::Constant),
            "dynamic" => Ok(TrajectoryMode::Dynamic),
            other => Err(Error::config(format!("unknown trajectory mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub mode: TrajectoryMode,
    /// Speed bounds `[v_L, v_U]` in m/s.
    pub speed_range: (f64, f64),
    /// Standard deviation of the heading change in dynamic mode, radians.
    pub heading_sd: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { mode: TrajectoryMode::Constant, speed_range: (2.0, 10.0), heading_sd: PI / 4.0 }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config(format!("speed range [{lo}, {hi}] must satisfy 0 < v_L <= v_U")));
        }
        if !(self.heading_sd > 0.0 && self.heading_sd.is_finite()) {
            return Err(Error::config("heading spread must be positive"));
        }
        Ok(())
    }
}

/// One frame of motion.
#[derive(Debug, Clone, PartialEq)]
pub struct CoctRecord {
    /// Position at the frame start.
    pub start: UserPosition,
    pub speed: f64,
    /// Position during each channel interval.
    pub positions: Vec<UserPosition>,
    /// Heading change applied at each step (dynamic mode only).
    pub heading_changes: Vec<f64>,
    /// Whether any step in this frame bounced off an edge.
    pub reflected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub mode: TrajectoryMode,
    pub cocts: Vec<CoctRecord>,
}

/// Moves `dist` meters from `p`, folding the path back at the edges.
fn advance(p: UserPosition, heading: f64, dist: f64, b: &Bounds) -> (UserPosition, f64, bool) {
    let (mut x, mut y) = (p.x + dist * heading.cos(), p.y + dist * heading.sin());
    let (mut cx, mut cy) = (heading.cos(), heading.sin());
    let mut bounced = false;
    for _ in 0..8 {
        if x > b.x_max {
            x = 2.0 * b.x_max - x;
        } else if x < b.x_min {
            x = 2.0 * b.x_min - x;
        } else {
            break;
        }
        cx = -cx;
        bounced = true;
    }
    for _ in 0..8 {
        if y > b.y_max {
            y = 2.0 * b.y_max - y;
        } else if y < b.y_min {
            y = 2.0 * b.y_min - y;
        } else {
            break;
        }
        cy = -cy;
        bounced = true;
    }
    let heading = if bounced { cy.atan2(cx) } else { heading };
    (b.clamp(UserPosition::new(x, y)), heading, bounced)
}

fn heading_change<R: Rng + ?Sized>(normal: &Normal<f64>, rng: &mut R) -> f64 {
    loop {
        let d = normal.sample(rng);
        if d > -PI && d < PI {
            return d;
        }
    }
}

pub fn gen_trajectory(cfg: &TrajectoryConfig, timing: &FrameTiming, bounds: &Bounds, n_coct: usize, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    timing.validate()?;
    bounds.validate()?;
    let mut r = rng::stream(seed, "trajectory", 0);
    let normal = Normal::new(0.0, cfg.heading_sd).map_err(|e| Error::config(e.to_string()))?;
    let (v_lo, v_hi) = cfg.speed_range;
    let mut pos = UserPosition::new(
        r.random_range(bounds.x_min..=bounds.x_max),
        r.random_range(bounds.y_min..=bounds.y_max),
    );
    let mut heading = r.random_range(0.0..TAU);
    let mut cocts = Vec::with_capacity(n_coct);
    for _ in 0..n_coct {
        let speed = if v_hi > v_lo { r.random_range(v_lo..=v_hi) } else { v_lo };
        if cfg.mode == TrajectoryMode::Constant {
            heading = r.random_range(0.0..TAU);
        }
        let start = pos;
        let mut positions = Vec::with_capacity(timing.n_cct);
        let mut heading_changes = Vec::new();
        let mut reflected = false;
        let mut elapsed = 0.0;
        for t in timing.offsets() {
            if cfg.mode == TrajectoryMode::Dynamic && elapsed > 0.0 {
                let d = heading_change(&normal, &mut r);
                heading_changes.push(d);
                heading = (heading + d).rem_euclid(TAU);
            }
            let (p, h, b) = advance(pos, heading, speed * (t - elapsed), bounds);
            pos = p;
            heading = h;
            reflected |= b;
            positions.push(pos);
            elapsed = t;
        }
        let (p, h, b) = advance(pos, heading, speed * (timing.t_co - elapsed), bounds);
        pos = p;
        heading = h;
        reflected |= b;
        cocts.push(CoctRecord { start, speed, positions, heading_changes, reflected });
    }
    Ok(Trajectory { mode: cfg.mode, cocts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn area() -> Bounds {
        Bounds::new(0.0, 30.0, 0.0, 30.0).unwrap()
    }

    #[test]
    fn constant_frames_are_straight() {
        let cfg = TrajectoryConfig::default();
        let mut straight = 0;
        for seed in 0..20 {
            let t = gen_trajectory(&cfg, &FrameTiming::default(), &area(), 10, seed).unwrap();
            for c in t.cocts.iter().filter(|c| !c.reflected) {
                let d0 = (c.positions[0].x - c.start.x, c.positions[0].y - c.start.y);
                for p in &c.positions {
                    let d = (p.x - c.start.x, p.y - c.start.y);
                    assert!((d0.0 * d.1 - d0.1 * d.0).abs() < 1e-9);
                }
                straight += 1;
            }
        }
        assert!(straight > 100);
    }

    #[test]
    fn dynamic_changes_are_truncated() {
        let cfg = TrajectoryConfig { mode: TrajectoryMode::Dynamic, heading_sd: 3.0, ..Default::default() };
        let t = gen_trajectory(&cfg, &FrameTiming::default(), &area(), 10, 4).unwrap();
        let all: Vec<f64> = t.cocts.iter().flat_map(|c| c.heading_changes.iter().copied()).collect();
        assert_eq!(all.len(), 10 * 49);
        assert!(all.iter().all(|d| *d > -PI && *d < PI));
    }

    #[test]
    fn step_lengths_and_speeds() {
        let timing = FrameTiming::default();
        for mode in [TrajectoryMode::Constant, TrajectoryMode::Dynamic] {
            let cfg = TrajectoryConfig { mode, ..Default::default() };
            let t = gen_trajectory(&cfg, &timing, &area(), 10, 9).unwrap();
            for c in &t.cocts {
                assert!((2.0..=10.0).contains(&c.speed));
                if c.reflected {
                    continue;
                }
                assert!((c.positions[0].distance(&c.start) - c.speed * timing.offset(1)).abs() < 1e-9);
                for w in c.positions.windows(2) {
                    assert!((w[0].distance(&w[1]) - c.speed * timing.t_c).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = TrajectoryConfig { mode: TrajectoryMode::Dynamic, ..Default::default() };
        let a = gen_trajectory(&cfg, &FrameTiming::default(), &area(), 5, 1).unwrap();
        let b = gen_trajectory(&cfg, &FrameTiming::default(), &area(), 5, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reflection_folds_back_inside() {
        let (p, h, b) = advance(UserPosition::new(29.9, 10.0), 0.0, 0.3, &area());
        assert!(b);
        assert!((p.x - 29.8).abs() < 1e-12 && p.y == 10.0);
        assert!((h - PI).abs() < 1e-12);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrajectoryConfig { speed_range: (5.0, 1.0), ..Default::default() };
        assert!(gen_trajectory(&cfg, &FrameTiming::default(), &area(), 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn positions_stay_inside(seed in 0u64..u64::MAX, dynamic in any::<bool>()) {
            let mode = if dynamic { TrajectoryMode::Dynamic } else { TrajectoryMode::Constant };
            let cfg = TrajectoryConfig { mode, speed_range: (2.0, 40.0), ..Default::default() };
            let b = Bounds::new(0.0, 3.0, 0.0, 3.0).unwrap();
            // 20 cases × 100 frames × 50 steps = 10⁵ steps
            let t = gen_trajectory(&cfg, &FrameTiming::default(), &b, 100, seed).unwrap();
            for c in &t.cocts {
                prop_assert!(b.contains(c.start));
                for p in &c.positions {
                    prop_assert!(b.contains(*p));
                }
            }
        }
    }
}
