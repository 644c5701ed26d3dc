//! Target motion models.
//!
//! Every variant answers position, velocity and position-integral queries in
//! closed form. Piecewise-linear paths use the right-hand derivative at their
//! breakpoints; the breakpoints themselves are reported so the simulator can
//! split its steps there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Motion of a single target along the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetTrajectory {
    Static {
        position: f64,
    },
    /// Linear legs between `(time, position)` waypoints.
    PiecewiseLinear {
        waypoints: Vec<(f64, f64)>,
    },
    /// `offset + amplitude * sin(angular_frequency * t + phase)`.
    Sinusoid {
        offset: f64,
        amplitude: f64,
        angular_frequency: f64,
        phase: f64,
    },
}

impl TargetTrajectory {
    pub fn stationary(position: f64) -> Self {
        TargetTrajectory::Static { position }
    }

    pub fn piecewise_linear(waypoints: Vec<(f64, f64)>) -> Result<Self> {
        let traj = TargetTrajectory::PiecewiseLinear { waypoints };
        traj.check(None)?;
        Ok(traj)
    }

    pub fn sinusoid(offset: f64, amplitude: f64, angular_frequency: f64, phase: f64) -> Self {
        TargetTrajectory::Sinusoid {
            offset,
            amplitude,
            angular_frequency,
            phase,
        }
    }

    /// Checks structural invariants, and coverage of `[0, horizon]` when given.
    pub fn check(&self, horizon: Option<f64>) -> Result<()> {
        match self {
            TargetTrajectory::Static { position } => {
                if !position.is_finite() {
                    return Err(Error::InvalidTrajectory("non-finite position".into()));
                }
            }
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                if waypoints.len() < 2 {
                    return Err(Error::InvalidTrajectory(
                        "piecewise-linear path needs at least two waypoints".into(),
                    ));
                }
                if waypoints[0].0 != 0.0 {
                    return Err(Error::InvalidTrajectory(
                        "first waypoint must be at time 0".into(),
                    ));
                }
                for w in waypoints.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return Err(Error::InvalidTrajectory(
                            "waypoint times must be strictly increasing".into(),
                        ));
                    }
                    let speed = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                    if !speed.is_finite() || !w[1].1.is_finite() {
                        return Err(Error::InvalidTrajectory("non-finite leg speed".into()));
                    }
                }
                if let Some(h) = horizon {
                    let last = waypoints[waypoints.len() - 1].0;
                    if last < h {
                        return Err(Error::InvalidTrajectory(format!(
                            "last waypoint at {last} does not reach the horizon {h}"
                        )));
                    }
                }
            }
            TargetTrajectory::Sinusoid {
                offset,
                amplitude,
                angular_frequency,
                phase,
            } => {
                if ![offset, amplitude, angular_frequency, phase]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return Err(Error::InvalidTrajectory("non-finite sinusoid term".into()));
                }
            }
        }
        Ok(())
    }

    /// End of the time domain on which the trajectory is defined.
    pub fn domain_end(&self) -> f64 {
        match self {
            TargetTrajectory::PiecewiseLinear { waypoints } => waypoints[waypoints.len() - 1].0,
            _ => f64::INFINITY,
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let end = self.domain_end();
        if !(t >= 0.0 && t <= end) {
            return Err(Error::OutOfDomain { t, start: 0.0, end });
        }
        Ok(())
    }

    pub fn position(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.position_at(t))
    }

    pub fn velocity(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.velocity_at(t))
    }

    /// Exact `∫_{t1}^{t2} position(σ) dσ`.
    pub fn position_integral(&self, t1: f64, t2: f64) -> Result<f64> {
        if t1 > t2 {
            return Err(Error::InvalidInterval { t1, t2 });
        }
        self.check_time(t1)?;
        self.check_time(t2)?;
        Ok(self.integral_at(t1, t2))
    }

    /// Interior waypoint times in `(0, horizon)`, where the velocity jumps.
    pub fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        match self {
            TargetTrajectory::PiecewiseLinear { waypoints } => waypoints
                .get(1..waypoints.len().saturating_sub(1))
                .unwrap_or_default()
                .iter()
                .map(|w| w.0)
                .filter(|&t| t > 0.0 && t < horizon)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Index of the leg containing `t`; right-continuous at breakpoints.
    fn leg(waypoints: &[(f64, f64)], t: f64) -> usize {
        let last_leg = waypoints.len() - 2;
        // first waypoint with time > t, minus one
        let idx = waypoints.partition_point(|w| w.0 <= t);
        idx.saturating_sub(1).min(last_leg)
    }

    pub(crate) fn position_at(&self, t: f64) -> f64 {
        match self {
            TargetTrajectory::Static { position } => *position,
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                let k = Self::leg(waypoints, t);
                let (t0, x0) = waypoints[k];
                let (t1, x1) = waypoints[k + 1];
                x0 + (x1 - x0) * (t - t0) / (t1 - t0)
            }
            TargetTrajectory::Sinusoid {
                offset,
                amplitude,
                angular_frequency,
                phase,
            } => offset + amplitude * (angular_frequency * t + phase).sin(),
        }
    }

    pub(crate) fn velocity_at(&self, t: f64) -> f64 {
        match self {
            TargetTrajectory::Static { .. } => 0.0,
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                let k = Self::leg(waypoints, t);
                let (t0, x0) = waypoints[k];
                let (t1, x1) = waypoints[k + 1];
                (x1 - x0) / (t1 - t0)
            }
            TargetTrajectory::Sinusoid {
                amplitude,
                angular_frequency,
                phase,
                ..
            } => amplitude * angular_frequency * (angular_frequency * t + phase).cos(),
        }
    }

    pub(crate) fn integral_at(&self, t1: f64, t2: f64) -> f64 {
        match self {
            TargetTrajectory::Static { position } => position * (t2 - t1),
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                let mut total = 0.0;
                for (k, w) in waypoints.windows(2).enumerate() {
                    let lo = t1.max(w[0].0);
                    let hi = t2.min(w[1].0);
                    if hi > lo {
                        // trapezoid is exact on a linear leg
                        total += 0.5 * (hi - lo) * (self.on_leg(k, lo) + self.on_leg(k, hi));
                    }
                }
                total
            }
            TargetTrajectory::Sinusoid {
                offset,
                amplitude,
                angular_frequency,
                phase,
            } => {
                let w = *angular_frequency;
                if w == 0.0 {
                    (offset + amplitude * phase.sin()) * (t2 - t1)
                } else {
                    offset * (t2 - t1) - amplitude / w * ((w * t2 + phase).cos() - (w * t1 + phase).cos())
                }
            }
        }
    }

    /// Position and velocity at `t` using the smooth piece that contains
    /// `t_ref`, so a step ending on a breakpoint sees left-hand values.
    pub(crate) fn kinematics(&self, t: f64, t_ref: f64) -> (f64, f64) {
        match self {
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                let k = Self::leg(waypoints, t_ref);
                let (t0, x0) = waypoints[k];
                let (t1, x1) = waypoints[k + 1];
                let v = (x1 - x0) / (t1 - t0);
                (x0 + v * (t - t0), v)
            }
            _ => (self.position_at(t), self.velocity_at(t)),
        }
    }

    /// Position on leg `k` extended linearly to `t`.
    fn on_leg(&self, k: usize, t: f64) -> f64 {
        match self {
            TargetTrajectory::PiecewiseLinear { waypoints } => {
                let (t0, x0) = waypoints[k];
                let (t1, x1) = waypoints[k + 1];
                x0 + (x1 - x0) * (t - t0) / (t1 - t0)
            }
            _ => self.position_at(t),
        }
    }
}
