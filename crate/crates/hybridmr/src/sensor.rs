//! Deterministic synthetic pose sources.
//!
//! Stands in for tracked hardware sensors and for GUI manipulation: a
//! sensor emits poses along a configured trajectory at a fixed rate during
//! its active window; a GUI source replays a scripted command sequence.
//! Both are pure functions of configuration and simulated time, so runs
//! replay bit-identically.

use crate::time::SimTime;
use crate::types::{Pose, Quat, StreamId};
use serde::Deserialize;

/// One timestamped pose datum on a stream.
///
/// `seq` increases strictly per stream; `origin_time` is the simulated
/// instant the originating node produced the sample; `hop_count` counts
/// network transmissions (0 local, 1 direct, 2 via a forwarder).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub stream: StreamId,
    pub seq: u64,
    pub origin_time: SimTime,
    pub pose: Pose,
    pub hop_count: u8,
}

impl PoseSample {
    pub fn with_hop(&self, hop_count: u8) -> PoseSample {
        PoseSample { hop_count, ..self.clone() }
    }
}

/// Coordinate plane a circular trajectory lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

/// Shape of the synthetic motion.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// Uniform circular motion of the given radius and period, with the
    /// orientation rotating about the plane normal at the same rate.
    Circle { radius_m: f64, period_s: f64, plane: Plane },
    /// Constant pose.
    Fixed { pose: Pose },
    /// Piecewise-constant keyframes (time-ordered); the sample holds the
    /// latest keyframe at or before `t`.
    Scripted { keyframes: Vec<(SimTime, Pose)> },
}

/// Configuration of one synthetic sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub rate_hz: f64,
    pub trajectory: Trajectory,
    /// Active window `[start, stop)` in simulated time.
    pub start: SimTime,
    pub stop: SimTime,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate_hz > 0.0) {
            return Err("rate_hz must be positive".into());
        }
        if self.start >= self.stop {
            return Err("sensor start must precede stop".into());
        }
        match &self.trajectory {
            Trajectory::Circle { period_s, .. } if !(*period_s > 0.0) => {
                Err("circle period must be positive".into())
            }
            Trajectory::Fixed { pose } if !pose.orientation.is_unit(1e-9) => {
                Err("fixed pose orientation must be a unit quaternion".into())
            }
            Trajectory::Scripted { keyframes } => {
                if keyframes.is_empty() {
                    return Err("scripted trajectory needs at least one keyframe".into());
                }
                if keyframes.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err("scripted keyframes must be time-ordered".into());
                }
                if keyframes.iter().any(|(_, p)| !p.orientation.is_unit(1e-9)) {
                    return Err("scripted keyframe orientations must be unit quaternions".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Instant of the k-th sample: `start + k / rate_hz`.
    pub fn sample_time(&self, k: u64) -> SimTime {
        let offset_ns = (k as f64 * 1_000_000_000.0 / self.rate_hz).round() as u64;
        SimTime::from_ns(self.start.as_ns() + offset_ns)
    }

    /// Index of the first sample at or after `t`, staying on the original
    /// tick grid; `None` when no tick before `stop` qualifies.
    pub fn first_tick_at_or_after(&self, t: SimTime) -> Option<u64> {
        let mut k = if t <= self.start {
            0
        } else {
            let elapsed_ns = (t.as_ns() - self.start.as_ns()) as f64;
            (elapsed_ns * self.rate_hz / 1_000_000_000.0).ceil() as u64
        };
        while self.sample_time(k) < t {
            k += 1;
        }
        while k > 0 && self.sample_time(k - 1) >= t {
            k -= 1;
        }
        (self.sample_time(k) < self.stop).then_some(k)
    }

    /// Produces the sample at instant `t`, or `None` outside the active
    /// window. Local samples carry `hop_count = 0`.
    pub fn next_sample(&self, stream: StreamId, t: SimTime, seq: u64) -> Option<PoseSample> {
        if t < self.start || t >= self.stop {
            return None;
        }
        let pose = match &self.trajectory {
            Trajectory::Circle { radius_m, period_s, plane } => {
                circle_pose(*radius_m, *period_s, *plane, t)
            }
            Trajectory::Fixed { pose } => *pose,
            Trajectory::Scripted { keyframes } => {
                let mut current = keyframes[0].1;
                for (at, pose) in keyframes {
                    if *at <= t {
                        current = *pose;
                    } else {
                        break;
                    }
                }
                current
            }
        };
        Some(PoseSample { stream, seq, origin_time: t, pose, hop_count: 0 })
    }
}

fn circle_pose(radius_m: f64, period_s: f64, plane: Plane, t: SimTime) -> Pose {
    let t_s = t.as_ns() as f64 / 1_000_000_000.0;
    let theta = 2.0 * std::f64::consts::PI * (t_s / period_s);
    let (c, s) = (theta.cos(), theta.sin());
    let position = match plane {
        Plane::Xy => [radius_m * c, radius_m * s, 0.0],
        Plane::Xz => [radius_m * c, 0.0, radius_m * s],
        Plane::Yz => [0.0, radius_m * c, radius_m * s],
    };
    let (hc, hs) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    // Rotation about the plane normal by theta.
    let orientation = match plane {
        Plane::Xy => Quat([hc, 0.0, 0.0, hs]),
        Plane::Xz => Quat([hc, 0.0, hs, 0.0]),
        Plane::Yz => Quat([hc, hs, 0.0, 0.0]),
    };
    Pose { position, orientation }
}

/// One scripted GUI manipulation.
#[derive(Debug, Clone, PartialEq)]
pub enum GuiCommand {
    SetPose(Pose),
    Translate([f64; 3]),
    Rotate(Quat),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuiEntry {
    pub at: SimTime,
    pub command: GuiCommand,
}

/// A time-ordered GUI interaction script.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GuiScript {
    pub entries: Vec<GuiEntry>,
}

impl GuiScript {
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.windows(2).any(|w| w[1].at < w[0].at) {
            return Err("gui script entries must be time-ordered".into());
        }
        for e in &self.entries {
            match &e.command {
                GuiCommand::SetPose(p) if !p.orientation.is_unit(1e-9) => {
                    return Err("gui set_pose orientation must be a unit quaternion".into());
                }
                GuiCommand::Rotate(q) if !q.is_unit(1e-9) => {
                    return Err("gui rotation must be a unit quaternion".into());
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Replays a [`GuiScript`], folding relative commands into an absolute pose.
#[derive(Debug, Clone)]
pub struct GuiSource {
    script: GuiScript,
    pose: Pose,
}

impl GuiSource {
    pub fn new(script: GuiScript) -> Self {
        GuiSource { script, pose: Pose::IDENTITY }
    }

    pub fn script(&self) -> &GuiScript {
        &self.script
    }

    /// Applies the `index`-th command and returns the resulting sample.
    pub fn apply(&mut self, index: usize, stream: StreamId, seq: u64) -> Option<PoseSample> {
        let entry = self.script.entries.get(index)?;
        match &entry.command {
            GuiCommand::SetPose(p) => self.pose = *p,
            GuiCommand::Translate(d) => {
                for (axis, delta) in self.pose.position.iter_mut().zip(d.iter()) {
                    *axis += delta;
                }
            }
            GuiCommand::Rotate(q) => {
                // Renormalize so long rotate chains cannot drift off the unit sphere.
                self.pose.orientation =
                    q.mul(self.pose.orientation).normalized().unwrap_or(Quat::IDENTITY);
            }
        }
        Some(PoseSample {
            stream,
            seq,
            origin_time: entry.at,
            pose: self.pose,
            hop_count: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NodeId;
    use approx::assert_abs_diff_eq;

    fn stream() -> StreamId {
        StreamId::sensor(NodeId(0), 0)
    }

    fn circle_cfg() -> SensorConfig {
        SensorConfig {
            rate_hz: 60.0,
            trajectory: Trajectory::Circle { radius_m: 0.5, period_s: 10.0, plane: Plane::Xy },
            start: SimTime::ZERO,
            stop: SimTime::from_ms(20_000.0),
        }
    }

    #[test]
    fn circle_at_phase_zero() {
        let s = circle_cfg().next_sample(stream(), SimTime::ZERO, 0).unwrap();
        assert_eq!(s.pose.position, [0.5, 0.0, 0.0]);
        assert_eq!(s.pose.orientation, Quat::IDENTITY);
        assert_eq!(s.hop_count, 0);
    }

    #[test]
    fn circle_at_half_period() {
        let s = circle_cfg().next_sample(stream(), SimTime::from_ms(5000.0), 1).unwrap();
        assert_abs_diff_eq!(s.pose.position[0], -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.pose.position[1], 0.0, epsilon = 1e-9);
        assert_eq!(s.pose.position[2], 0.0);
    }

    #[test]
    fn sixty_hz_gives_sixty_samples_per_second() {
        let cfg = circle_cfg();
        // Inter-sample interval is 1000/60 ms.
        let dt = cfg.sample_time(1).as_ms() - cfg.sample_time(0).as_ms();
        assert_abs_diff_eq!(dt, 1000.0 / 60.0, epsilon = 1e-6);
        let in_first_second = (0..)
            .map(|k| cfg.sample_time(k))
            .take_while(|t| *t < SimTime::from_ms(1000.0))
            .count();
        assert_eq!(in_first_second, 60);
    }

    #[test]
    fn sample_count_matches_rate_over_window() {
        for (rate, window_ms) in [(60.0, 1000.0), (30.0, 2500.0), (50.0, 730.0)] {
            let cfg = SensorConfig {
                rate_hz: rate,
                trajectory: Trajectory::Fixed { pose: Pose::IDENTITY },
                start: SimTime::from_ms(200.0),
                stop: SimTime::from_ms(200.0 + window_ms),
            };
            let count = (0..)
                .map(|k| cfg.sample_time(k))
                .take_while(|t| *t < cfg.stop)
                .count() as f64;
            let expect = window_ms * rate / 1000.0;
            assert!((count - expect).abs() <= 1.0, "rate {rate}: {count} vs {expect}");
        }
    }

    #[test]
    fn outside_window_yields_no_sample() {
        let cfg = circle_cfg();
        assert!(cfg.next_sample(stream(), SimTime::from_ms(20_000.0), 0).is_none());
        let late = SensorConfig { start: SimTime::from_ms(100.0), ..circle_cfg() };
        assert!(late.next_sample(stream(), SimTime::ZERO, 0).is_none());
    }

    #[test]
    fn trajectory_is_bit_deterministic() {
        let cfg = circle_cfg();
        for k in 0..600u64 {
            let t = cfg.sample_time(k);
            let a = cfg.next_sample(stream(), t, k).unwrap();
            let b = cfg.next_sample(stream(), t, k).unwrap();
            assert!(a.pose.bits_eq(&b.pose));
            assert!(a.pose.orientation.is_unit(1e-9));
        }
    }

    #[test]
    fn scripted_holds_latest_keyframe() {
        let p1 = Pose { position: [1.0, 0.0, 0.0], orientation: Quat::IDENTITY };
        let p2 = Pose { position: [2.0, 0.0, 0.0], orientation: Quat::IDENTITY };
        let cfg = SensorConfig {
            rate_hz: 10.0,
            trajectory: Trajectory::Scripted {
                keyframes: vec![(SimTime::ZERO, p1), (SimTime::from_ms(500.0), p2)],
            },
            start: SimTime::ZERO,
            stop: SimTime::from_ms(1000.0),
        };
        assert_eq!(cfg.next_sample(stream(), SimTime::from_ms(100.0), 0).unwrap().pose, p1);
        assert_eq!(cfg.next_sample(stream(), SimTime::from_ms(500.0), 1).unwrap().pose, p2);
    }

    #[test]
    fn out_of_order_gui_script_rejected() {
        let script = GuiScript {
            entries: vec![
                GuiEntry { at: SimTime::from_ms(200.0), command: GuiCommand::Translate([1.0, 0.0, 0.0]) },
                GuiEntry { at: SimTime::from_ms(100.0), command: GuiCommand::Translate([1.0, 0.0, 0.0]) },
            ],
        };
        assert!(script.validate().is_err());
    }

    #[test]
    fn gui_commands_fold_into_absolute_pose() {
        let script = GuiScript {
            entries: vec![
                GuiEntry {
                    at: SimTime::from_ms(100.0),
                    command: GuiCommand::SetPose(Pose {
                        position: [1.0, 2.0, 3.0],
                        orientation: Quat::IDENTITY,
                    }),
                },
                GuiEntry { at: SimTime::from_ms(200.0), command: GuiCommand::Translate([0.5, 0.0, 0.0]) },
            ],
        };
        script.validate().unwrap();
        let gui_stream = StreamId::gui(NodeId(0), 0);
        let mut src = GuiSource::new(script);
        let s0 = src.apply(0, gui_stream, 0).unwrap();
        assert_eq!(s0.pose.position, [1.0, 2.0, 3.0]);
        assert_eq!(s0.origin_time, SimTime::from_ms(100.0));
        let s1 = src.apply(1, gui_stream, 1).unwrap();
        assert_eq!(s1.pose.position, [1.5, 2.0, 3.0]);
        assert!(src.apply(2, gui_stream, 2).is_none());
    }
}
