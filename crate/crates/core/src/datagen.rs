//! Scripted controllers and the mixed expert/failure dataset.
//!
//! Each trajectory is one expert demonstration and one failure demonstration
//! of equal length, concatenated in a per-trajectory random order. The second
//! segment continues from the first segment's terminal state. Which order was
//! used is ground truth kept in a sidecar file that training never reads.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, wrap_angle, Action, Policy, State, StepRecord, MAX_TORQUE};
use crate::error::{Result, SfbcError};
use crate::io;
use crate::rng;

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_TRAJECTORIES: usize = 500;
pub const DEFAULT_HORIZON: usize = 600;

/// PD stabilizer near upright, energy-shaping swing-up elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertPolicy {
    pub kp: f64,
    pub kd: f64,
    /// Half-width of the region around upright where the PD law takes over.
    pub catch_angle: f64,
}

impl Default for ExpertPolicy {
    fn default() -> Self {
        ExpertPolicy {
            kp: 8.0,
            kd: 2.0,
            catch_angle: 0.3,
        }
    }
}

impl ExpertPolicy {
    pub const ID: &'static str = "expert-pd-energy";

    pub fn action(&self, s: &State) -> Action {
        if s.theta.abs() < self.catch_angle {
            return Action::new(-self.kp * s.theta - self.kd * s.omega);
        }
        // Energy of the balanced upright pose; dE/dt = omega * u, so pump
        // toward it with bang-bang torque.
        let deficit = State::UPRIGHT.energy() - s.energy();
        let drive = deficit * s.omega;
        let direction = if drive == 0.0 { 1.0 } else { drive.signum() };
        Action::new(direction * MAX_TORQUE)
    }
}

impl Policy for ExpertPolicy {
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self.action(state)
    }
}

/// Damped PD law toward the hanging position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailurePolicy {
    pub kp: f64,
    pub kd: f64,
}

impl Default for FailurePolicy {
    fn default() -> Self {
        FailurePolicy { kp: 8.0, kd: 2.0 }
    }
}

impl FailurePolicy {
    pub const ID: &'static str = "failure-pd-down";

    pub fn action(&self, s: &State) -> Action {
        Action::new(-self.kp * wrap_angle(s.theta - PI) - self.kd * s.omega)
    }
}

impl Policy for FailurePolicy {
    fn act(&self, state: &State, _rng: &mut dyn RngCore) -> Action {
        self.action(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentOrder {
    ExpertFirst,
    FailureFirst,
}

/// Training-visible trajectory: states, actions and rewards only.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Ground-truth sidecar entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLabel {
    pub traj_id: u32,
    pub segment_order: SegmentOrder,
}

/// One line of the trajectory data file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub traj_id: u32,
    pub t: u32,
    pub theta: f64,
    pub omega: f64,
    pub torque: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksums {
    pub trajectories: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub trajectory_count: usize,
    pub horizon: usize,
    pub seed: u64,
    pub record_count: usize,
    pub expert_policy: String,
    pub failure_policy: String,
    pub checksums: FileChecksums,
}

impl DatasetManifest {
    /// Identifies the training-visible data; used to key annotation caches.
    pub fn dataset_checksum(&self) -> &str {
        &self.checksums.trajectories
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    pub expert: ExpertPolicy,
    pub failure: FailurePolicy,
}

impl DatasetConfig {
    pub fn new(seed: u64) -> Self {
        DatasetConfig {
            n_trajectories: DEFAULT_TRAJECTORIES,
            horizon: DEFAULT_HORIZON,
            seed,
            expert: ExpertPolicy::default(),
            failure: FailurePolicy::default(),
        }
    }
}

/// Training-visible dataset. Ground-truth labels travel separately.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn record_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn horizon(&self) -> usize {
        self.manifest.horizon
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub labels: Vec<TrajectoryLabel>,
}

/// Generates trajectories in memory. The manifest checksums are those of the
/// serialized files, so a written and reloaded dataset carries the same manifest.
pub fn generate(cfg: &DatasetConfig) -> Result<GeneratedDataset> {
    if cfg.horizon < 2 || !cfg.horizon.is_multiple_of(2) {
        return Err(SfbcError::InvalidArgument(format!(
            "horizon must be even and at least 2, got {}",
            cfg.horizon
        )));
    }
    if cfg.n_trajectories == 0 {
        return Err(SfbcError::InvalidArgument("n_trajectories must be positive".into()));
    }
    let results: Vec<(Trajectory, TrajectoryLabel)> = (0..cfg.n_trajectories as u32)
        .into_par_iter()
        .map(|id| generate_one(cfg, id))
        .collect::<Result<_>>()?;
    let (trajectories, labels): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let checksums = FileChecksums {
        trajectories: io::sha256_hex(&encode_trajectories(&trajectories)?),
        labels: io::sha256_hex(&encode_labels(&labels)?),
    };
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        trajectory_count: cfg.n_trajectories,
        horizon: cfg.horizon,
        seed: cfg.seed,
        record_count: cfg.n_trajectories * cfg.horizon,
        expert_policy: ExpertPolicy::ID.into(),
        failure_policy: FailurePolicy::ID.into(),
        checksums,
    };
    Ok(GeneratedDataset {
        dataset: Dataset {
            trajectories,
            manifest,
        },
        labels,
    })
}

fn generate_one(cfg: &DatasetConfig, id: u32) -> Result<(Trajectory, TrajectoryLabel)> {
    let mut rng = rng::stream(cfg.seed, "trajectory", u64::from(id));
    let order = if rng.random_bool(0.5) {
        SegmentOrder::ExpertFirst
    } else {
        SegmentOrder::FailureFirst
    };
    let initial = State::new(rng.random_range(-PI..PI), rng.random_range(-1.0..=1.0));
    let half = cfg.horizon / 2;
    let (first, second): (&dyn Policy, &dyn Policy) = match order {
        SegmentOrder::ExpertFirst => (&cfg.expert, &cfg.failure),
        SegmentOrder::FailureFirst => (&cfg.failure, &cfg.expert),
    };
    let a = env::rollout(first, initial, half, rng.next_u64())?;
    let b = env::rollout(second, a.final_state, half, rng.next_u64())?;
    let mut records = a.steps;
    records.extend(b.steps);
    Ok((
        Trajectory { id, records },
        TrajectoryLabel {
            traj_id: id,
            segment_order: order,
        },
    ))
}

fn step_lines(trajectories: &[Trajectory]) -> impl Iterator<Item = StepLine> + '_ {
    trajectories.iter().flat_map(|traj| {
        traj.records.iter().enumerate().map(move |(t, r)| StepLine {
            traj_id: traj.id,
            t: t as u32,
            theta: r.state.theta,
            omega: r.state.omega,
            torque: r.action.torque,
            reward: r.reward,
        })
    })
}

fn encode_lines<T: Serialize>(items: impl Iterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn encode_trajectories(trajectories: &[Trajectory]) -> Result<Vec<u8>> {
    encode_lines(step_lines(trajectories))
}

fn encode_labels(labels: &[TrajectoryLabel]) -> Result<Vec<u8>> {
    encode_lines(labels.iter())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| SfbcError::io(path, e))
}

/// Writes data file, label sidecar and manifest into `dir`.
pub fn write(generated: &GeneratedDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SfbcError::io(dir, e))?;
    write_bytes(
        &dir.join(TRAJECTORIES_FILE),
        &encode_trajectories(&generated.dataset.trajectories)?,
    )?;
    write_bytes(&dir.join(LABELS_FILE), &encode_labels(&generated.labels)?)?;
    io::write_json(&dir.join(MANIFEST_FILE), &generated.dataset.manifest)
}

/// Loads the training-visible part of a dataset, verifying it against its manifest.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = io::read_json(&manifest_path)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(SfbcError::Schema {
            path: manifest_path,
            detail: format!(
                "schema version {} (expected {DATASET_SCHEMA_VERSION})",
                manifest.schema_version
            ),
        });
    }
    let data_path = dir.join(TRAJECTORIES_FILE);
    let checksum = io::sha256_file(&data_path)?;
    if checksum != manifest.checksums.trajectories {
        return Err(SfbcError::Schema {
            path: data_path,
            detail: "checksum does not match manifest".into(),
        });
    }
    let lines: Vec<StepLine> = io::read_jsonl(&data_path)?;
    if lines.len() != manifest.trajectory_count * manifest.horizon {
        return Err(SfbcError::Schema {
            path: data_path,
            detail: format!(
                "{} records, manifest implies {}",
                lines.len(),
                manifest.trajectory_count * manifest.horizon
            ),
        });
    }
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(manifest.trajectory_count);
    for line in lines {
        let expected_t = trajectories
            .last()
            .filter(|t| t.id == line.traj_id)
            .map_or(0, |t| t.records.len());
        if line.t as usize != expected_t {
            return Err(SfbcError::Schema {
                path: data_path,
                detail: format!("trajectory {} out of order at t={}", line.traj_id, line.t),
            });
        }
        if expected_t == 0 {
            trajectories.push(Trajectory {
                id: line.traj_id,
                records: Vec::with_capacity(manifest.horizon),
            });
        }
        let traj = trajectories.last_mut().expect("pushed above");
        traj.records.push(StepRecord {
            state: State {
                theta: line.theta,
                omega: line.omega,
            },
            action: Action { torque: line.torque },
            reward: line.reward,
        });
    }
    Ok(Dataset {
        trajectories,
        manifest,
    })
}

pub fn load_labels(dir: &Path) -> Result<Vec<TrajectoryLabel>> {
    io::read_jsonl(&dir.join(LABELS_FILE))
}

/// Outcome of the post-generation dataset gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateReport {
    /// Fraction of expert segments holding |theta| < 0.3 over their final 50 steps.
    pub expert_upright_fraction: f64,
    /// Fraction of failure segments within 0.5 rad of hanging over their final 50 steps.
    pub failure_hanging_fraction: f64,
    pub expert_first_fraction: f64,
}

impl GateReport {
    pub const MIN_FRACTION: f64 = 0.9;

    pub fn passed(&self) -> bool {
        self.expert_upright_fraction >= Self::MIN_FRACTION
            && self.failure_hanging_fraction >= Self::MIN_FRACTION
    }
}

pub fn check_gates(dataset: &Dataset, labels: &[TrajectoryLabel]) -> Result<GateReport> {
    const TAIL: usize = 50;
    if labels.len() != dataset.trajectories.len() {
        return Err(SfbcError::InvalidArgument(format!(
            "{} labels for {} trajectories",
            labels.len(),
            dataset.trajectories.len()
        )));
    }
    let half = dataset.horizon() / 2;
    let (mut expert_ok, mut failure_ok, mut expert_first) = (0usize, 0usize, 0usize);
    for (traj, label) in dataset.trajectories.iter().zip(labels) {
        let (first, second) = traj.records.split_at(half);
        let (expert, failure) = match label.segment_order {
            SegmentOrder::ExpertFirst => {
                expert_first += 1;
                (first, second)
            }
            SegmentOrder::FailureFirst => (second, first),
        };
        if expert[expert.len().saturating_sub(TAIL)..]
            .iter()
            .all(|r| r.state.theta.abs() < 0.3)
        {
            expert_ok += 1;
        }
        if failure[failure.len().saturating_sub(TAIL)..]
            .iter()
            .all(|r| r.state.distance_from_bottom() < 0.5)
        {
            failure_ok += 1;
        }
    }
    let n = dataset.trajectories.len() as f64;
    Ok(GateReport {
        expert_upright_fraction: expert_ok as f64 / n,
        failure_hanging_fraction: failure_ok as f64 / n,
        expert_first_fraction: expert_first as f64 / n,
    })
}
