//! Policy evaluation and the end-to-end reproduction driver.

mod report;
mod reproduce;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Policy, State};
use crate::error::{Result, SfbcError};
use crate::learner::Method;
use crate::rng;

pub use report::{Report, ReportRow, SeparationRow, SUMMARY_FILE, SEEDS_FILE, SEPARATION_FILE};
pub use reproduce::{
    reproduce, reproduce_on, separation_gate, ReproduceConfig, SeparationGate, TrainSettings,
};

pub const DEFAULT_EVAL_EPISODES: usize = 10;
pub const DEFAULT_EVAL_HORIZON: usize = 300;
pub const DEFAULT_SEEDS: usize = 15;

/// When an episode counts as balanced upright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRule {
    /// Radians.
    pub upright_threshold: f64,
    /// Number of final steps inspected.
    pub window: usize,
    pub fraction: f64,
}

impl Default for SuccessRule {
    fn default() -> Self {
        SuccessRule {
            upright_threshold: 0.3,
            window: 100,
            fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    pub rule: SuccessRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: DEFAULT_EVAL_EPISODES,
            horizon: DEFAULT_EVAL_HORIZON,
            rule: SuccessRule::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rule;
        if self.n_episodes == 0 {
            return Err(SfbcError::InvalidArgument("need at least one episode".into()));
        }
        if !(r.upright_threshold > 0.0 && r.fraction > 0.0 && r.fraction <= 1.0) || r.window == 0 {
            return Err(SfbcError::InvalidArgument(format!("invalid success rule {r:?}")));
        }
        if r.window > self.horizon {
            return Err(SfbcError::InvalidArgument(format!(
                "success window {} exceeds horizon {}",
                r.window, self.horizon
            )));
        }
        Ok(())
    }
}

/// Outcome of one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed_index: usize,
    /// Mean episode return over the seed's episodes.
    pub mean_return: f64,
    pub successful_episodes: usize,
    pub n_episodes: usize,
    pub success: bool,
}

/// Initial state of evaluation episode `episode` under `seed`.
pub fn initial_state(seed: u64, episode: usize) -> State {
    let mut r = rng::stream(seed, "eval-init", episode as u64);
    State::new(r.random_range(-PI..PI), r.random_range(-1.0..=1.0))
}

/// Rolls the policy out from fresh random states. The seed succeeds when at
/// least half of its episodes satisfy the rule.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    cfg: &EvalConfig,
    seed: u64,
    seed_index: usize,
) -> Result<SeedResult> {
    cfg.validate()?;
    let rule = cfg.rule;
    let mut total = 0.0;
    let mut successful = 0;
    for ep in 0..cfg.n_episodes {
        let run = rollout(
            policy,
            initial_state(seed, ep),
            cfg.horizon,
            rng::derive_seed(seed, "eval-rollout", ep as u64),
        )?;
        total += run.total_return;
        let upright = run.steps[cfg.horizon - rule.window..]
            .iter()
            .filter(|r| r.state.theta.abs() < rule.upright_threshold)
            .count();
        if upright as f64 >= rule.fraction * rule.window as f64 {
            successful += 1;
        }
    }
    Ok(SeedResult {
        seed_index,
        mean_return: total / cfg.n_episodes as f64,
        successful_episodes: successful,
        n_episodes: cfg.n_episodes,
        success: 2 * successful >= cfg.n_episodes,
    })
}

/// Sample standard deviation over `sqrt(n)`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seeds: Vec<SeedResult>,
    pub n_seeds: usize,
    /// Percent of successful seeds.
    pub success_rate: f64,
    pub success_rate_se: f64,
    pub mean_return: f64,
    pub mean_return_se: f64,
}

impl EvalReport {
    pub fn from_seeds(method: Method, mut seeds: Vec<SeedResult>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(SfbcError::InvalidArgument("no evaluation seeds".into()));
        }
        seeds.sort_by_key(|s| s.seed_index);
        let n = seeds.len();
        let flags: Vec<f64> = seeds
            .iter()
            .map(|s| if s.success { 100.0 } else { 0.0 })
            .collect();
        let returns: Vec<f64> = seeds.iter().map(|s| s.mean_return).collect();
        Ok(EvalReport {
            method,
            n_seeds: n,
            success_rate: flags.iter().sum::<f64>() / n as f64,
            success_rate_se: standard_error(&flags),
            mean_return: returns.iter().sum::<f64>() / n as f64,
            mean_return_se: standard_error(&returns),
            seeds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{ExpertPolicy, FailurePolicy};
    use crate::env::{zero_policy, Action};

    #[test]
    fn standard_error_hand_example() {
        // mean 4, squared deviations 4 + 0 + 4, sample variance 4, sd 2
        let se = standard_error(&[2.0, 4.0, 6.0]);
        assert!((se - 2.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(standard_error(&[5.0]), 0.0);
    }

    #[test]
    fn report_aggregates() {
        let seeds = (0..4)
            .map(|i| SeedResult {
                seed_index: i,
                mean_return: -(i as f64) * 100.0,
                successful_episodes: if i < 3 { 10 } else { 0 },
                n_episodes: 10,
                success: i < 3,
            })
            .collect();
        let r = EvalReport::from_seeds(Method::Sfbc, seeds).unwrap();
        assert_eq!(r.n_seeds, 4);
        assert_eq!(r.success_rate, 75.0);
        assert_eq!(r.mean_return, -150.0);
        assert!(EvalReport::from_seeds(Method::Sfbc, vec![]).is_err());
    }

    #[test]
    fn expert_succeeds_failure_does_not() {
        let cfg = EvalConfig::default();
        let expert = evaluate(&ExpertPolicy::default(), &cfg, 11, 0).unwrap();
        assert!(expert.success, "{expert:?}");
        let failure = evaluate(&FailurePolicy::default(), &cfg, 11, 0).unwrap();
        assert!(!failure.success);
        assert_eq!(failure.successful_episodes, 0);
        let bound = -(PI * PI) * cfg.horizon as f64;
        assert!(failure.mean_return < 0.75 * bound, "{}", failure.mean_return);
        assert!(failure.mean_return > 1.1 * bound, "{}", failure.mean_return);
    }

    #[test]
    fn zero_policy_from_hanging_returns_minus_pi_squared_per_step() {
        let run = rollout(&zero_policy, State::HANGING, 300, 0).unwrap();
        assert!((run.total_return + PI * PI * 300.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = EvalConfig {
            n_episodes: 3,
            ..EvalConfig::default()
        };
        let p = |s: &State| Action::new(-s.omega);
        assert_eq!(evaluate(&p, &cfg, 5, 2).unwrap(), evaluate(&p, &cfg, 5, 2).unwrap());
    }

    #[test]
    fn window_longer_than_horizon_rejected() {
        let cfg = EvalConfig {
            horizon: 50,
            ..EvalConfig::default()
        };
        assert!(evaluate(&zero_policy, &cfg, 0, 0).is_err());
    }
}
