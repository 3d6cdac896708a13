//! Pendulum swing-up dynamics with the Pendulum-v1 constants and update order.
//!
//! Angles use the benchmark convention: `theta = 0` is upright and positive
//! angles rotate counter-clockwise. The state stored here is always wrapped to
//! `(-pi, pi]`, whereas the benchmark keeps the raw accumulated angle; the two
//! agree on every observable quantity.

mod render;

use std::f64::consts::PI;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfbcError};

pub use render::{render, Frame, DEFAULT_FRAME_SIZE};

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const DEFAULT_DT: f64 = 0.05;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub theta: f64,
    pub omega: f64,
}

impl State {
    pub const UPRIGHT: State = State {
        theta: 0.0,
        omega: 0.0,
    };
    pub const HANGING: State = State {
        theta: PI,
        omega: 0.0,
    };

    /// Builds a state, wrapping `theta` and clamping `omega` into range.
    pub fn new(theta: f64, omega: f64) -> Self {
        State {
            theta: wrap_angle(theta),
            omega: omega.clamp(-MAX_SPEED, MAX_SPEED),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.omega.is_finite()
    }

    /// Policy input features `(cos theta, sin theta, omega)`.
    pub fn features(&self) -> [f64; 3] {
        [self.theta.cos(), self.theta.sin(), self.omega]
    }

    /// Mechanical energy with the pivot as the height reference (upright is `+m g l / 2`).
    pub fn energy(&self) -> f64 {
        let inertia = MASS * LENGTH * LENGTH / 3.0;
        0.5 * inertia * self.omega * self.omega + MASS * GRAVITY * 0.5 * LENGTH * self.theta.cos()
    }

    /// Angular distance from the hanging position.
    pub fn distance_from_bottom(&self) -> f64 {
        wrap_angle(self.theta - PI).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub torque: f64,
}

impl Action {
    pub const ZERO: Action = Action { torque: 0.0 };

    pub fn new(torque: f64) -> Self {
        Action {
            torque: torque.clamp(-MAX_TORQUE, MAX_TORQUE),
        }
    }
}

/// Advances the pendulum by one semi-implicit Euler step.
///
/// Returns the successor state and the reward of the pre-step state under the
/// clamped torque.
pub fn step(s: State, a: Action, dt: f64) -> Result<(State, f64)> {
    if !s.is_finite() {
        return Err(SfbcError::NonFinite {
            context: "pendulum state",
            detail: format!("{s:?}"),
        });
    }
    if !a.torque.is_finite() {
        return Err(SfbcError::NonFinite {
            context: "pendulum action",
            detail: format!("{a:?}"),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SfbcError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }

    let u = a.torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let th = wrap_angle(s.theta);
    let cost = th * th + 0.1 * s.omega * s.omega + 0.001 * (u * u);

    // Same operation order as the benchmark so results agree to rounding.
    let gravity_coef = 3.0 * GRAVITY / (2.0 * LENGTH);
    let torque_coef = 3.0 / (MASS * LENGTH * LENGTH);
    let new_omega = s.omega + (gravity_coef * th.sin() + torque_coef * u) * dt;
    let new_omega = new_omega.clamp(-MAX_SPEED, MAX_SPEED);
    let new_theta = th + new_omega * dt;

    Ok((
        State {
            theta: wrap_angle(new_theta),
            omega: new_omega,
        },
        -cost,
    ))
}

/// A state-feedback controller.
///
/// The generator is available to stochastic policies; deterministic ones ignore it.
pub trait Policy {
    fn act(&self, state: &State, rng: &mut dyn RngCore) -> Action;
}

impl<F> Policy for F
where
    F: Fn(&State) -> Action,
{
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self(state)
    }
}

/// Policy that never applies torque.
pub fn zero_policy(_: &State) -> Action {
    Action::ZERO
}

/// One environment interaction: the state visited, the action taken there and
/// the reward it earned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: State,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub final_state: State,
    pub total_return: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Cumulative return after each step.
    pub fn cumulative_returns(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r.reward;
                Some(*acc)
            })
            .collect()
    }
}

/// Runs `policy` for `horizon` steps from `initial`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    initial: State,
    horizon: usize,
    seed: u64,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(SfbcError::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(horizon);
    let mut state = initial;
    let mut total_return = 0.0;
    for t in 0..horizon {
        let action = policy.act(&state, &mut rng);
        if !action.torque.is_finite() {
            return Err(SfbcError::NonFinite {
                context: "policy output",
                detail: format!("step {t}, state {state:?}, torque {}", action.torque),
            });
        }
        let action = Action::new(action.torque);
        let (next, reward) = step(state, action, DEFAULT_DT)?;
        steps.push(StepRecord {
            state,
            action,
            reward,
        });
        total_return += reward;
        state = next;
    }
    Ok(Rollout {
        steps,
        final_state: state,
        total_return,
    })
}
