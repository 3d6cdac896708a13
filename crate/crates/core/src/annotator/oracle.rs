use super::{AnnotatorBackend, PromptKind};
use crate::env::State;
use crate::error::{Result, SfbcError};
use std::f64::consts::PI;

/// Answers are kept away from certainty, like a soft model output.
pub const ORACLE_MIN: f64 = 0.02;
pub const ORACLE_MAX: f64 = 0.98;
/// A frame shows the dot "at the bottom" within this distance of hanging.
pub const BOTTOM_TOLERANCE: f64 = 0.5;
/// Side changes only count when the stick passes vertical this far from hanging.
pub const CROSSING_LIMIT: f64 = 2.8;

/// Deterministic stand-in for a vision-language annotator that reads the
/// ground-truth states instead of rendered frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedOracle;

impl ScriptedOracle {
    pub const ID: &'static str = "scripted-oracle";

    /// Fraction of frames with the dot at the bottom.
    pub fn markov_p_no(states: &[State]) -> f64 {
        let at_bottom = states
            .iter()
            .filter(|s| s.distance_from_bottom() < BOTTOM_TOLERANCE)
            .count();
        (at_bottom as f64 / states.len() as f64).clamp(ORACLE_MIN, ORACLE_MAX)
    }

    /// "No" unless the stick switches screen side between consecutive frames
    /// away from the hanging position. Between two frames the stick is taken
    /// to have moved along the shorter arc, so it passed vertical either at
    /// the top (angle 0) or at the bottom (angle pi).
    pub fn nonmarkov_p_no(states: &[State]) -> f64 {
        let side = |s: &State| {
            let x = s.theta.sin();
            if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            }
        };
        let crossing_angle = |a: f64, b: f64| if a.abs() + b.abs() <= PI { 0.0 } else { PI };
        let crossed = states.windows(2).any(|w| {
            side(&w[0]) * side(&w[1]) < 0
                && crossing_angle(w[0].theta, w[1].theta) < CROSSING_LIMIT
        });
        if crossed {
            ORACLE_MIN
        } else {
            ORACLE_MAX
        }
    }
}

impl AnnotatorBackend for ScriptedOracle {
    fn id(&self) -> String {
        Self::ID.into()
    }

    fn score(&self, states: &[State], kind: PromptKind, _prompt: &str) -> Result<f64> {
        if states.len() < 2 {
            return Err(SfbcError::InvalidArgument(format!(
                "oracle needs at least 2 states, got {}",
                states.len()
            )));
        }
        Ok(match kind {
            PromptKind::Markov => Self::markov_p_no(states),
            PromptKind::NonMarkov => Self::nonmarkov_p_no(states),
        })
    }
}
