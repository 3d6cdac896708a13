//! Sub-trajectory decomposition, threshold/retrospective filtering and the
//! weighted samples consumed by behavior cloning.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotator::Annotation;
use crate::datagen::{Dataset, Trajectory};
use crate::env::{Action, State, StepRecord};
use crate::error::{Result, SfbcError};
use crate::io;

pub const DEFAULT_SEGMENT_LENGTH: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// How a trajectory is cut into equal segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segmentation {
    /// Fixed segment length `k`; `floor(T / k)` segments.
    Length(usize),
    /// Fixed segment count `n`; length `floor(T / n)`.
    Count(usize),
}

impl Segmentation {
    pub fn segment_length(self, horizon: usize) -> Result<usize> {
        let k = match self {
            Segmentation::Length(k) => k,
            Segmentation::Count(0) => {
                return Err(SfbcError::InvalidArgument("segment count must be positive".into()))
            }
            Segmentation::Count(n) => horizon / n,
        };
        if k < 2 {
            return Err(SfbcError::InvalidArgument(format!(
                "segment length must be at least 2, got {k}"
            )));
        }
        if k > horizon {
            return Err(SfbcError::InvalidArgument(format!(
                "segment length {k} exceeds trajectory length {horizon}"
            )));
        }
        Ok(k)
    }
}

/// A contiguous window `[index * len, (index + 1) * len)` of a parent trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubTrajectory<'a> {
    pub traj_id: u32,
    pub index: usize,
    pub start: usize,
    pub records: &'a [StepRecord],
}

impl SubTrajectory<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        self.records.iter().map(|r| r.state)
    }
}

/// Splits a trajectory into disjoint, ordered, equal-length segments. Trailing
/// steps that do not fill a whole segment are dropped.
pub fn decompose(traj: &Trajectory, segmentation: Segmentation) -> Result<Vec<SubTrajectory<'_>>> {
    let k = segmentation.segment_length(traj.len())?;
    Ok(traj
        .records
        .chunks_exact(k)
        .enumerate()
        .map(|(index, records)| SubTrajectory {
            traj_id: traj.id,
            index,
            start: index * k,
            records,
        })
        .collect())
}

/// What happens to the final segment, which has no successor to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LastSegmentRule {
    /// Retained on its own threshold.
    #[default]
    Keep,
    /// Always dropped under retrospective filtering.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub alpha: f64,
    pub filtering_enabled: bool,
    pub retrospective: bool,
    pub use_weighting: bool,
    /// Substitute the Markov-prompt probability for the combined one, in both
    /// the filter and the weights.
    pub markov_only: bool,
    #[serde(default)]
    pub last_segment: LastSegmentRule,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            alpha: DEFAULT_ALPHA,
            filtering_enabled: true,
            retrospective: true,
            use_weighting: true,
            markov_only: false,
            last_segment: LastSegmentRule::Keep,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SfbcError::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// The statistic that is thresholded and used as the sample weight.
    pub fn score(&self, a: &Annotation) -> f64 {
        if self.markov_only {
            a.p_markov
        } else {
            a.p_vlm
        }
    }

    /// Whether annotations are consulted at all.
    pub fn needs_annotations(&self) -> bool {
        self.filtering_enabled || self.use_weighting
    }
}

/// Indices of the segments that survive filtering, given per-segment scores
/// ordered by segment index.
pub fn filter_retrospective(scores: &[f64], cfg: &FilterConfig) -> Vec<usize> {
    let n = scores.len();
    if !cfg.filtering_enabled {
        return (0..n).collect();
    }
    let passes = |i: usize| scores[i] >= cfg.alpha;
    (0..n)
        .filter(|&i| {
            if !passes(i) {
                return false;
            }
            if !cfg.retrospective {
                return true;
            }
            if i + 1 < n {
                passes(i + 1)
            } else {
                cfg.last_segment == LastSegmentRule::Keep
            }
        })
        .collect()
}

/// Annotations indexed by `(traj_id, segment index)`.
#[derive(Debug, Clone, Default)]
pub struct AnnotationIndex {
    map: BTreeMap<(u32, usize), Annotation>,
}

impl AnnotationIndex {
    pub fn new(annotations: impl IntoIterator<Item = Annotation>) -> Self {
        AnnotationIndex {
            map: annotations
                .into_iter()
                .map(|a| ((a.traj_id, a.i), a))
                .collect(),
        }
    }

    pub fn get(&self, traj_id: u32, segment: usize) -> Result<&Annotation> {
        self.map
            .get(&(traj_id, segment))
            .ok_or(SfbcError::MissingAnnotation { traj_id, segment })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scores for segments `0..n` of one trajectory; any gap is an error.
    pub fn scores(&self, traj_id: u32, n: usize, cfg: &FilterConfig) -> Result<Vec<f64>> {
        (0..n)
            .map(|i| self.get(traj_id, i).map(|a| cfg.score(a)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample {
    pub state: State,
    pub action: Action,
    pub weight: f64,
    pub traj_id: u32,
    pub segment: usize,
    pub t: usize,
}

/// Counts reconciling input records with emitted samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub records_in: usize,
    pub remainder_dropped: usize,
    pub segments_total: usize,
    pub segments_retained: usize,
    pub samples_out: usize,
}

#[derive(Debug, Clone)]
pub struct WeightedDataset {
    pub samples: Vec<WeightedSample>,
    pub stats: FilterStats,
}

/// Emits one weighted sample per step of every retained segment, ordered by
/// `(traj_id, segment, t)`.
pub fn build_weighted_dataset(
    dataset: &Dataset,
    annotations: &AnnotationIndex,
    cfg: &FilterConfig,
    segment_length: usize,
) -> Result<WeightedDataset> {
    cfg.validate()?;
    let mut trajectories: Vec<&Trajectory> = dataset.trajectories.iter().collect();
    trajectories.sort_by_key(|t| t.id);

    let mut stats = FilterStats::default();
    let mut samples = Vec::new();
    for traj in trajectories {
        let segments = decompose(traj, Segmentation::Length(segment_length))?;
        stats.records_in += traj.len();
        stats.remainder_dropped += traj.len() - segments.len() * segment_length;
        stats.segments_total += segments.len();

        let (retained, weights) = if cfg.needs_annotations() {
            let scores = annotations.scores(traj.id, segments.len(), cfg)?;
            (filter_retrospective(&scores, cfg), scores)
        } else {
            ((0..segments.len()).collect(), vec![1.0; segments.len()])
        };
        stats.segments_retained += retained.len();

        for i in retained {
            let seg = &segments[i];
            let weight = if cfg.use_weighting { weights[i] } else { 1.0 };
            samples.extend(seg.records.iter().enumerate().map(|(j, r)| WeightedSample {
                state: r.state,
                action: r.action,
                weight,
                traj_id: traj.id,
                segment: i,
                t: seg.start + j,
            }));
        }
    }
    stats.samples_out = samples.len();
    if samples.is_empty() {
        return Err(SfbcError::EmptyDataset(format!(
            "{} of {} segments retained at alpha {}",
            stats.segments_retained, stats.segments_total, cfg.alpha
        )));
    }
    Ok(WeightedDataset { samples, stats })
}

/// One line of the weighted dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedLine {
    pub theta: f64,
    pub omega: f64,
    pub torque: f64,
    pub weight: f64,
    pub traj_id: u32,
    pub i: usize,
    pub t: usize,
}

impl From<&WeightedSample> for WeightedLine {
    fn from(s: &WeightedSample) -> Self {
        WeightedLine {
            theta: s.state.theta,
            omega: s.state.omega,
            torque: s.action.torque,
            weight: s.weight,
            traj_id: s.traj_id,
            i: s.segment,
            t: s.t,
        }
    }
}

impl From<WeightedLine> for WeightedSample {
    fn from(l: WeightedLine) -> Self {
        WeightedSample {
            state: State {
                theta: l.theta,
                omega: l.omega,
            },
            action: Action { torque: l.torque },
            weight: l.weight,
            traj_id: l.traj_id,
            segment: l.i,
            t: l.t,
        }
    }
}

pub fn write_weighted(path: &Path, samples: &[WeightedSample]) -> Result<()> {
    let lines: Vec<WeightedLine> = samples.iter().map(WeightedLine::from).collect();
    io::write_jsonl(path, &lines)
}

pub fn read_weighted(path: &Path) -> Result<Vec<WeightedSample>> {
    let lines: Vec<WeightedLine> = io::read_jsonl(path)?;
    Ok(lines.into_iter().map(WeightedSample::from).collect())
}
